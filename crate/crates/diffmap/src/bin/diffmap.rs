//! Command-line interface: dataset generation, two-stage training, iterative
//! refinement inference, evaluation, figure rendering, and the downsampling-
//! factor ablation harness.
//!
//! Every subcommand accepts `--config FILE` (JSON). Precedence per setting:
//! explicit flag, then config file, then the `DIFFMAP_SEED` environment
//! variable (for seeds), then built-in defaults. Exit codes: 0 success,
//! 2 configuration error, 3 data error.

use clap::{Parser, Subcommand};
use serde_json::{json, Value};
use std::path::{Path, PathBuf};

use diffmap::error::{Error, Result};
use diffmap::mapgen::{generate_dataset, load_sample, Dataset, SceneConfig};
use diffmap::metrics::format_interval;
use diffmap::pipeline::{
    self, evaluate_dirs, hash_dataset_dir, load_checkpoint, render_comparison, sample_map,
    save_checkpoint, train_diffusion, train_vqvae, write_prediction, DiffmapModels, RunManifest,
    SampleMapConfig, TrainConfig,
};
use diffmap::vq::VqConfig;

#[derive(Parser)]
#[command(name = "diffmap", about = "Latent-diffusion refinement of BEV map segmentation", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic structured-map dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "short", value_parser = ["short", "long"])]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the VQ-VAE compression stage on clean ground truth.
    TrainVqvae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        factor: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the conditional diffusion stage against a frozen VQ-VAE.
    TrainDiff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        vqvae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Refine every observation of a dataset into predicted maps.
    Infer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score predictions against ground truth over x-intervals.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Comma-separated cut points in meters, e.g. 0,30,60,90.
        #[arg(long, default_value = "0,30,60,90")]
        intervals: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write a CSV next to the JSON report.
        #[arg(long, default_value_t = false)]
        csv: bool,
    },
    /// Render an observation | baseline | prediction | ground-truth figure.
    Viz {
        #[arg(long)]
        sample: PathBuf,
        #[arg(long)]
        pred: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the VQ downsampling-factor ablation (4, 8, 16) end to end.
    AblateFactor {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        vq_steps: usize,
        #[arg(long, default_value_t = 400)]
        diff_steps: usize,
        #[arg(long, default_value_t = 10)]
        infer_steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn load_config_file(path: &Option<PathBuf>) -> Result<Value> {
    match path {
        None => Ok(json!({})),
        Some(p) => {
            let raw = std::fs::read(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_slice(&raw)
                .map_err(|e| Error::config(format!("malformed config {}: {e}", p.display())))
        }
    }
}

fn env_seed() -> Option<u64> {
    std::env::var("DIFFMAP_SEED").ok().and_then(|s| s.parse().ok())
}

/// flag > config section field > DIFFMAP_SEED > default
fn resolve_seed(flag: Option<u64>, section: &Value) -> Option<u64> {
    flag.or_else(|| section.get("seed").and_then(Value::as_u64))
        .or_else(env_seed)
}

fn typed<T: serde::de::DeserializeOwned + serde::Serialize>(
    defaults: &T,
    file_section: &Value,
    flag_overrides: Value,
) -> Result<T> {
    let intermediate: T = pipeline::merge_config(defaults, file_section)?;
    pipeline::merge_config(&intermediate, &flag_overrides)
}

fn section<'a>(cfg: &'a Value, name: &str) -> Value {
    cfg.get(name).cloned().unwrap_or_else(|| json!({}))
}

#[allow(clippy::too_many_lines)]
fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            n,
            seed,
            preset,
            config,
        } => {
            let file = load_config_file(&config)?;
            let defaults = match preset.as_str() {
                "long" => SceneConfig::long_range(),
                _ => SceneConfig::short_range(),
            };
            let scene: SceneConfig = typed(&defaults, &section(&file, "scene"), json!({}))?;
            let seed = resolve_seed(seed, &section(&file, "scene")).unwrap_or(0);
            let ds = generate_dataset(&out, &scene, n, seed, &preset)?;
            let hash = hash_dataset_dir(&out)?;
            RunManifest::new("gen-data", json!({"scene": scene, "n": n, "seed": seed, "preset": preset}))
                .output("dataset", &out)
                .with_data_hash(hash)
                .write_next_to(&out.join("dataset.json"))?;
            println!("wrote {} samples to {}", ds.len(), out.display());
            Ok(())
        }

        Command::TrainVqvae {
            data,
            factor,
            out,
            steps,
            batch,
            lr,
            seed,
            config,
        } => {
            let file = load_config_file(&config)?;
            let mut flags = json!({});
            if let Some(f) = factor {
                flags["factor"] = json!(f);
            }
            let vq_cfg: VqConfig = typed(&VqConfig::default(), &section(&file, "vq"), flags)?;
            let mut tflags = json!({});
            if let Some(v) = steps {
                tflags["steps"] = json!(v);
            }
            if let Some(v) = batch {
                tflags["batch_size"] = json!(v);
            }
            if let Some(v) = lr {
                tflags["lr"] = json!(v);
            }
            if let Some(v) = resolve_seed(seed, &section(&file, "train")) {
                tflags["seed"] = json!(v);
            }
            let train: TrainConfig = typed(&TrainConfig::vq_default(), &section(&file, "train"), tflags)?;

            let ds = Dataset::open(&data)?;
            let samples = ds.load_all()?;
            let result = train_vqvae(&samples, vq_cfg, &train)?;
            save_checkpoint(&out, &pipeline::vq_to_checkpoint(&result.model))?;
            let mut csv = String::from("step,total,recon,vq,commit\n");
            for l in &result.losses {
                csv.push_str(&format!("{},{},{},{},{}\n", l.step, l.total, l.recon, l.vq, l.commit));
            }
            std::fs::write(losses_csv_path(&out), csv)?;
            RunManifest::new("train-vqvae", json!({"vq": vq_cfg, "train": train}))
                .input("data", &data)
                .output("checkpoint", &out)
                .with_data_hash(hash_dataset_dir(&data)?)
                .write_next_to(&out)?;
            let last = result.losses.last().expect("at least one step");
            println!(
                "trained vqvae (factor {}) for {} steps; final loss {:.5} (recon {:.5})",
                vq_cfg.factor, train.steps, last.total, last.recon
            );
            Ok(())
        }

        Command::TrainDiff {
            data,
            vqvae,
            out,
            steps,
            batch,
            lr,
            seed,
            config,
        } => {
            let file = load_config_file(&config)?;
            let mut tflags = json!({});
            if let Some(v) = steps {
                tflags["steps"] = json!(v);
            }
            if let Some(v) = batch {
                tflags["batch_size"] = json!(v);
            }
            if let Some(v) = lr {
                tflags["lr"] = json!(v);
            }
            if let Some(v) = resolve_seed(seed, &section(&file, "train")) {
                tflags["seed"] = json!(v);
            }
            let train: TrainConfig =
                typed(&TrainConfig::diffusion_default(), &section(&file, "train"), tflags)?;

            let vq = pipeline::vq_from_checkpoint(&load_checkpoint(&vqvae)?)?;
            let arch_defaults = pipeline::train_arch_defaults(&vq.cfg);
            let arch = pipeline::arch_from_config(&arch_defaults, &section(&file, "arch"))?;

            let ds = Dataset::open(&data)?;
            let samples = ds.load_all()?;
            let result = train_diffusion(&samples, vq, arch, &train)?;
            save_checkpoint(&out, &result.models.to_checkpoint())?;
            let mut csv = String::from("step,total,diff,ce,disc,dir\n");
            for l in &result.losses {
                csv.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    l.step, l.total, l.diff, l.ce, l.disc, l.dir
                ));
            }
            std::fs::write(losses_csv_path(&out), csv)?;
            RunManifest::new("train-diff", json!({"train": train}))
                .input("data", &data)
                .input("vqvae", &vqvae)
                .output("checkpoint", &out)
                .with_data_hash(hash_dataset_dir(&data)?)
                .write_next_to(&out)?;
            let last = result.losses.last().expect("at least one step");
            println!(
                "trained diffusion for {} steps; final loss {:.5} (diff {:.5})",
                train.steps, last.total, last.diff
            );
            Ok(())
        }

        Command::Infer {
            data,
            ckpt,
            steps,
            samples,
            eta,
            lambda,
            seed,
            out,
            config,
        } => {
            let file = load_config_file(&config)?;
            let mut flags = json!({});
            if let Some(v) = steps {
                flags["steps"] = json!(v);
            }
            if let Some(v) = samples {
                flags["n_samples"] = json!(v);
            }
            if let Some(v) = eta {
                flags["eta"] = json!(v);
            }
            if let Some(v) = lambda {
                flags["lambda"] = json!(v);
            }
            if let Some(v) = resolve_seed(seed, &section(&file, "sample")) {
                flags["seed"] = json!(v);
            }
            let cfg: SampleMapConfig =
                typed(&SampleMapConfig::default(), &section(&file, "sample"), flags)?;
            let models = DiffmapModels::from_checkpoint(&load_checkpoint(&ckpt)?)?;
            let ds = Dataset::open(&data)?;
            for i in 0..ds.len() {
                let sample = ds.load(i)?;
                let per_sample = SampleMapConfig {
                    seed: pipeline::derive_seed(cfg.seed, "sample-map", i as u64),
                    ..cfg
                };
                let pred = sample_map(&sample.observation, &sample.gt.grid, &models, &per_sample)?;
                write_prediction(&out.join(&ds.index.ids[i]), &sample, &pred)?;
            }
            RunManifest::new("infer", json!({"sample": cfg}))
                .input("data", &data)
                .input("checkpoint", &ckpt)
                .output("predictions", &out)
                .with_data_hash(hash_dataset_dir(&data)?)
                .write_next_to(&out.join("predictions"))?;
            println!("wrote {} predictions to {}", ds.len(), out.display());
            Ok(())
        }

        Command::Eval {
            pred,
            gt,
            intervals,
            out,
            csv,
        } => {
            let cuts: Vec<f64> = intervals
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::config(format!("bad interval cut '{s}'")))
                })
                .collect::<Result<_>>()?;
            let report = evaluate_dirs(&pred, &gt, &cuts)?;
            std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            if csv {
                std::fs::write(out.with_extension("csv"), report.to_csv())?;
            }
            print!("{}", report.to_table_string());
            RunManifest::new("eval", json!({"intervals": cuts}))
                .input("pred", &pred)
                .input("gt", &gt)
                .output("report", &out)
                .with_metrics(serde_json::to_value(&report)?)
                .write_next_to(&out)?;
            Ok(())
        }

        Command::Viz { sample, pred, out } => {
            let s = load_sample(&sample)?;
            let pred_data = match &pred {
                Some(p) => {
                    let pm = load_sample(p)?;
                    let baseline = read_baseline_masks(p, pm.gt.semantic.dim())?;
                    Some((pm, baseline))
                }
                None => None,
            };
            let inputs = diffmap::pipeline::RenderInputs {
                observation: &s.observation,
                baseline_semantic: pred_data.as_ref().and_then(|(_, b)| b.as_ref()),
                prediction: pred_data.as_ref().map(|(pm, _)| &pm.gt.semantic),
                gt: &s.gt.semantic,
            };
            render_comparison(&inputs, &out)?;
            println!("wrote {}", out.display());
            Ok(())
        }

        Command::AblateFactor {
            data,
            out,
            vq_steps,
            diff_steps,
            infer_steps,
            seed,
            config,
        } => {
            let file = load_config_file(&config)?;
            let seed = resolve_seed(seed, &file).unwrap_or(0);
            let ds = Dataset::open(&data)?;
            let samples = ds.load_all()?;
            let tmp = tempdir_for(&out)?;
            let mut rows = Vec::new();
            for factor in [4usize, 8, 16] {
                let vq_cfg = VqConfig {
                    factor,
                    ..VqConfig::default()
                };
                let mut vq_train = TrainConfig::vq_default();
                vq_train.steps = vq_steps;
                vq_train.seed = seed;
                let vq = train_vqvae(&samples, vq_cfg, &vq_train)?.model;

                let arch = pipeline::train_arch_defaults(&vq.cfg);
                let mut diff_train = TrainConfig::diffusion_default();
                diff_train.steps = diff_steps;
                diff_train.seed = seed;
                let models = train_diffusion(&samples, vq, arch, &diff_train)?.models;

                let pred_root = tmp.join(format!("f{factor}"));
                for i in 0..ds.len() {
                    let sample = ds.load(i)?;
                    let cfg = SampleMapConfig {
                        steps: infer_steps,
                        n_samples: 1,
                        seed: pipeline::derive_seed(seed, "ablate", i as u64),
                        ..SampleMapConfig::default()
                    };
                    let pred = sample_map(&sample.observation, &sample.gt.grid, &models, &cfg)?;
                    write_prediction(&pred_root.join(&ds.index.ids[i]), &sample, &pred)?;
                }
                let x1 = ds.index.grid.x_range[1];
                let report = evaluate_dirs(&pred_root, &data, &[ds.index.grid.x_range[0], x1])?;
                let key = format_interval([ds.index.grid.x_range[0], x1]);
                let mean = &report.means[&key];
                rows.push(json!({
                    "factor": factor,
                    "miou": mean.iou,
                    "mcd": mean.cd,
                    "map": mean.ap,
                }));
                println!(
                    "factor {factor:>2}: mIoU {}  mCD {}  mAP {}",
                    fmt_opt(mean.iou),
                    fmt_opt(mean.cd),
                    fmt_opt(mean.ap)
                );
            }
            let report = json!({"rows": rows, "vq_steps": vq_steps, "diff_steps": diff_steps, "seed": seed});
            std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
            RunManifest::new("ablate-factor", report.clone())
                .input("data", &data)
                .output("report", &out)
                .with_data_hash(hash_dataset_dir(&data)?)
                .write_next_to(&out)?;
            std::fs::remove_dir_all(&tmp).ok();
            Ok(())
        }
    }
}

fn losses_csv_path(out: &Path) -> PathBuf {
    let name = out
        .file_name()
        .map(|n| format!("{}.losses.csv", n.to_string_lossy()))
        .unwrap_or_else(|| "losses.csv".to_string());
    out.with_file_name(name)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".to_string())
}

fn tempdir_for(out: &Path) -> Result<PathBuf> {
    let base = out.parent().unwrap_or_else(|| Path::new("."));
    let dir = base.join(".ablate-work");
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn read_baseline_masks(
    dir: &Path,
    dims: (usize, usize, usize),
) -> Result<Option<ndarray::Array3<u8>>> {
    let path = dir.join("baseline.u8.bin");
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path)?;
    if bytes.len() != dims.0 * dims.1 * dims.2 {
        return Err(Error::data(format!(
            "baseline masks in {} have wrong size",
            dir.display()
        )));
    }
    Ok(Some(
        ndarray::Array3::from_shape_vec(dims, bytes)
            .map_err(|e| Error::data(format!("baseline masks: {e}")))?,
    ))
}
