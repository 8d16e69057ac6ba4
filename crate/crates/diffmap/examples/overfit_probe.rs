// scratch experiment: VQ overfit quality + timing on the acceptance-style set
use diffmap::mapgen::{generate_scene, SceneConfig, NUM_CLASSES};
use diffmap::metrics::iou;
use diffmap::pipeline::{train_vqvae, TrainConfig, PAD_MULTIPLE};
use diffmap::mapgen::pad_to_multiple;
use diffmap::vq::VqConfig;
use ndarray::Array2;

fn main() {
    let mut scene = SceneConfig::short_range();
    scene.p_ped = 1.0;
    let samples: Vec<_> = (0..16).map(|i| generate_scene(4200 + i, &scene).unwrap()).collect();

    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr: f64 = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let mut train = TrainConfig::vq_default();
    train.steps = steps;
    train.lr = lr;
    train.seed = 3;

    let t0 = std::time::Instant::now();
    let out = train_vqvae(&samples, VqConfig::default(), &train).unwrap();
    let dt = t0.elapsed().as_secs_f64();

    // reconstruction IoU per class over the 16 samples
    let mut per_class = [0.0f64; NUM_CLASSES];
    let mut inters = [0usize; NUM_CLASSES];
    let mut unions = [0usize; NUM_CLASSES];
    for s in &samples {
        let x = pad_to_multiple(&s.gt.semantic.mapv(|v| v as f32), PAD_MULTIPLE).0;
        let z = out.model.encode_quantized(&x).unwrap();
        let (_, logits) = out.model.decode_values(&z).unwrap();
        for c in 0..NUM_CLASSES {
            for i in 0..x.dim().1 {
                for j in 0..x.dim().2 {
                    let p = logits[(c, i, j)] > 0.0;
                    let g = x[(c, i, j)] > 0.5;
                    inters[c] += (p && g) as usize;
                    unions[c] += (p || g) as usize;
                }
            }
        }
    }
    for c in 0..NUM_CLASSES {
        per_class[c] = inters[c] as f64 / unions[c].max(1) as f64;
    }
    // codebook usage
    let mut used = std::collections::BTreeSet::new();
    for s in &samples {
        let x = pad_to_multiple(&s.gt.semantic.mapv(|v| v as f32), PAD_MULTIPLE).0;
        let ze = out.model.encode_values(&x).unwrap();
        let (_, idx) = out.model.quantize_grid(&ze).unwrap();
        used.extend(idx);
    }
    println!("steps {steps} lr {lr}: {:.1}s  loss {:.5} recon {:.5}", dt, out.losses.last().unwrap().total, out.losses.last().unwrap().recon);
    println!("per-class IoU: {:?}  codes used: {}", per_class, used.len());
    let _ = iou(&Array2::from_elem((1,1), false), &Array2::from_elem((1,1), false));
}
