//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every training step builds a fresh [`Graph`]: leaves are parameter tensors
//! (tracked) or constants (untracked), interior nodes record a backward
//! closure. [`Graph::backward`] walks the tape once in reverse and returns the
//! gradient for every tracked leaf. Nodes that a loss never touches simply
//! receive no gradient, which the branch-decoupling and stop-gradient probes
//! rely on: "no path" means `Gradients::get` returns `None`, not a tensor of
//! zeros.
//!
//! Tensors are `ndarray::ArrayD` in channel-first layout (`C x H x W` for
//! feature maps, `(rows, cols)` for token matrices). Convolutions lower to
//! im2col + GEMM so both element types hit the fast matrix kernels.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, Ix2, Ix3, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Arr<T> = ArrayD<T>;

/// Element types the tape supports. Training runs in `f32`; gradient
/// verification against central finite differences runs in `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn standard_normal<R: Rng>(rng: &mut R) -> Self;
    fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        rng.gen_range(lo as f32..hi as f32)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> Self {
        rng.gen_range(lo..hi)
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

type BackFn<T> = Box<dyn FnOnce(&[Arr<T>], &Arr<T>, &mut [Option<Arr<T>>])>;

pub struct Graph<T: Scalar> {
    values: Vec<Arr<T>>,
    backs: Vec<Option<BackFn<T>>>,
    requires: Vec<bool>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Arr<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. the node, or `None` if no path touched it.
    pub fn get(&self, id: NodeId) -> Option<&Arr<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Arr<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn accum<T: Scalar>(slot: &mut Option<Arr<T>>, g: Arr<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            backs: Vec::new(),
            requires: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Arr<T> {
        &self.values[id.0]
    }

    fn push(
        &mut self,
        value: Arr<T>,
        requires: bool,
        back: Option<impl FnOnce(&[Arr<T>], &Arr<T>, &mut [Option<Arr<T>>]) + 'static>,
    ) -> NodeId {
        self.values.push(value);
        self.requires.push(requires);
        self.backs
            .push(if requires { back.map(|f| Box::new(f) as BackFn<T>) } else { None });
        NodeId(self.values.len() - 1)
    }

    const NO_BACK: Option<fn(&[Arr<T>], &Arr<T>, &mut [Option<Arr<T>>])> = None;

    /// Untracked input.
    pub fn constant(&mut self, value: Arr<T>) -> NodeId {
        self.push(value, false, Self::NO_BACK)
    }

    /// Tracked leaf (a parameter); its gradient survives `backward`.
    pub fn leaf(&mut self, value: Arr<T>) -> NodeId {
        self.push(value, true, Self::NO_BACK)
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    /// Walk the tape in reverse from `loss` (a scalar node) and collect leaf
    /// gradients. Consumes the graph.
    pub fn backward(mut self, loss: NodeId) -> Gradients<T> {
        let mut grads: Vec<Option<Arr<T>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.values[loss.0].raw_dim()));
        for i in (0..=loss.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(f) = self.backs[i].take() {
                let g = grads[i].take().expect("checked above");
                f(&self.values, &g, &mut grads);
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "add shape");
        let v = &self.values[a.0] + &self.values[b.0];
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                if ra {
                    accum(&mut grads[a.0], g.clone());
                }
                if rb {
                    accum(&mut grads[b.0], g.clone());
                }
            }),
        )
    }

    pub fn add_n(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let mut out = ids[0];
        for &id in &ids[1..] {
            out = self.add(out, id);
        }
        out
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "sub shape");
        let v = &self.values[a.0] - &self.values[b.0];
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                if ra {
                    accum(&mut grads[a.0], g.clone());
                }
                if rb {
                    accum(&mut grads[b.0], g.mapv(|x| -x));
                }
            }),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape(), "mul shape");
        let v = &self.values[a.0] * &self.values[b.0];
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                if ra {
                    accum(&mut grads[a.0], g * &vals[b.0]);
                }
                if rb {
                    accum(&mut grads[b.0], g * &vals[a.0]);
                }
            }),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let cs = T::from_f64(c);
        let v = self.values[a.0].mapv(|x| x * cs);
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                accum(&mut grads[a.0], g.mapv(|x| x * cs));
            }),
        )
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.values[a.0].mapv(|x| one / (one + (-x).exp()));
        let ra = self.req(a);
        let id = self.push(v, ra, Self::NO_BACK);
        let out_idx = id.0;
        self.backs[out_idx] = if ra {
            Some(Box::new(
                move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                    let y = &vals[out_idx];
                    let one = T::one();
                    accum(&mut grads[a.0], g * &y.mapv(|s| s * (one - s)));
                },
            ))
        } else {
            None
        };
        id
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let one = T::one();
        let v = self.values[a.0].mapv(|x| x / (one + (-x).exp()));
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let one = T::one();
                let d = vals[a.0].mapv(|x| {
                    let s = one / (one + (-x).exp());
                    s * (one + x * (one - s))
                });
                accum(&mut grads[a.0], g * &d);
            }),
        )
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let z = T::zero();
        let v = self.values[a.0].mapv(|x| if x > z { x } else { z });
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let z = T::zero();
                let d = vals[a.0].mapv(|x| if x > z { T::one() } else { z });
                accum(&mut grads[a.0], g * &d);
            }),
        )
    }

    /// `sqrt(x + eps)`, the epsilon keeping the derivative finite at zero.
    pub fn sqrt_eps(&mut self, a: NodeId, eps: f64) -> NodeId {
        let e = T::from_f64(eps);
        let v = self.values[a.0].mapv(|x| (x + e).sqrt());
        let ra = self.req(a);
        let id = self.push(v, ra, Self::NO_BACK);
        let out_idx = id.0;
        self.backs[out_idx] = if ra {
            Some(Box::new(
                move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                    let half = T::from_f64(0.5);
                    let d = vals[out_idx].mapv(|y| half / y);
                    accum(&mut grads[a.0], g * &d);
                },
            ))
        } else {
            None
        };
        id
    }

    /// Forward the quantized values, route the gradient to the pre-quantized
    /// input unchanged (straight-through estimator).
    pub fn straight_through(&mut self, a: NodeId, quantized: Arr<T>) -> NodeId {
        assert_eq!(self.values[a.0].shape(), quantized.shape(), "straight_through shape");
        let ra = self.req(a);
        self.push(
            quantized,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                accum(&mut grads[a.0], g.clone());
            }),
        )
    }

    /// Copy of the value with the gradient path severed.
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].clone();
        self.constant(v)
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.values[a.0].sum();
        let shape = self.values[a.0].raw_dim();
        let ra = self.req(a);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let gs = *g.iter().next().expect("scalar");
                accum(&mut grads[a.0], ArrayD::from_elem(shape.clone(), gs));
            }),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row sums of a matrix: `(n, m) -> (n,)`.
    pub fn sum_axis1(&mut self, a: NodeId) -> NodeId {
        let v2 = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matrix");
        let (n, m) = v2.dim();
        let v = v2.sum_axis(Axis(1)).into_dyn();
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g1 = g.view().into_dimensionality::<ndarray::Ix1>().expect("vector");
                let mut out = Array2::<T>::zeros((n, m));
                for (i, mut row) in out.outer_iter_mut().enumerate() {
                    row.fill(g1[i]);
                }
                accum(&mut grads[a.0], out.into_dyn());
            }),
        )
    }

    /// Mean squared difference between two same-shape tensors.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean_all(s)
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let orig = self.values[a.0].raw_dim();
        let v = self.values[a.0]
            .to_shape(IxDyn(shape))
            .expect("reshape size mismatch")
            .to_owned();
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let back = g.to_shape(orig.clone()).expect("reshape back").to_owned();
                accum(&mut grads[a.0], back);
            }),
        )
    }

    /// Transpose of a matrix node.
    pub fn transpose2(&mut self, a: NodeId) -> NodeId {
        let v2 = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matrix");
        let v = v2.t().as_standard_layout().to_owned().into_dyn();
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                accum(&mut grads[a.0], g2.t().as_standard_layout().to_owned().into_dyn());
            }),
        )
    }

    /// Concatenate `C x H x W` maps along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.values[a.0].view().into_dimensionality::<Ix3>().expect("chw");
        let vb = self.values[b.0].view().into_dimensionality::<Ix3>().expect("chw");
        assert_eq!(va.dim().1, vb.dim().1, "concat height");
        assert_eq!(va.dim().2, vb.dim().2, "concat width");
        let ca = va.dim().0;
        let v = ndarray::concatenate(Axis(0), &[va, vb]).expect("concat");
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v.into_dyn(),
            ra || rb,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("chw");
                if ra {
                    accum(
                        &mut grads[a.0],
                        g3.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn(),
                    );
                }
                if rb {
                    accum(
                        &mut grads[b.0],
                        g3.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn(),
                    );
                }
            }),
        )
    }

    /// Channel slice `[lo, hi)` of a `C x H x W` map.
    pub fn slice_ch(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let va = self.values[a.0].view().into_dimensionality::<Ix3>().expect("chw");
        let (c, h, w) = va.dim();
        assert!(lo < hi && hi <= c, "slice_ch range");
        let v = va.slice(ndarray::s![lo..hi, .., ..]).to_owned().into_dyn();
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("chw");
                let mut full = Array3::<T>::zeros((c, h, w));
                full.slice_mut(ndarray::s![lo..hi, .., ..]).assign(&g3);
                accum(&mut grads[a.0], full.into_dyn());
            }),
        )
    }

    /// Column slice `[lo, hi)` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let va = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matrix");
        let (n, m) = va.dim();
        assert!(lo < hi && hi <= m, "slice_cols range");
        let v = va
            .slice(ndarray::s![.., lo..hi])
            .as_standard_layout()
            .to_owned()
            .into_dyn();
        let ra = self.req(a);
        self.push(
            v,
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                let mut full = Array2::<T>::zeros((n, m));
                full.slice_mut(ndarray::s![.., lo..hi]).assign(&g2);
                accum(&mut grads[a.0], full.into_dyn());
            }),
        )
    }

    /// Concatenate matrices along columns.
    pub fn concat_cols(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty());
        let views: Vec<_> = ids
            .iter()
            .map(|id| self.values[id.0].view().into_dimensionality::<Ix2>().expect("matrix"))
            .collect();
        let widths: Vec<usize> = views.iter().map(|v| v.dim().1).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let reqs: Vec<(NodeId, bool)> = ids.iter().map(|&id| (id, self.req(id))).collect();
        let any = reqs.iter().any(|(_, r)| *r);
        self.push(
            v.as_standard_layout().to_owned().into_dyn(),
            any,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                let mut lo = 0;
                for ((id, r), w) in reqs.iter().zip(&widths) {
                    if *r {
                        accum(
                            &mut grads[id.0],
                            g2.slice(ndarray::s![.., lo..lo + w])
                                .as_standard_layout()
                                .to_owned()
                                .into_dyn(),
                        );
                    }
                    lo += w;
                }
            }),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let va = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matrix");
        let vb = self.values[b.0].view().into_dimensionality::<Ix2>().expect("matrix");
        assert_eq!(va.dim().1, vb.dim().0, "matmul inner dim");
        let v = va.dot(&vb).into_dyn();
        let (ra, rb) = (self.req(a), self.req(b));
        self.push(
            v,
            ra || rb,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                let va = vals[a.0].view().into_dimensionality::<Ix2>().expect("matrix");
                let vb = vals[b.0].view().into_dimensionality::<Ix2>().expect("matrix");
                if ra {
                    accum(&mut grads[a.0], g2.dot(&vb.t()).into_dyn());
                }
                if rb {
                    accum(&mut grads[b.0], va.t().dot(&g2).into_dyn());
                }
            }),
        )
    }

    /// `x @ w + bias` for row-major token matrices: `(n, i) @ (i, o) + (o,)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let y = self.matmul(x, w);
        match b {
            None => y,
            Some(b) => {
                let vy = self.values[y.0].view().into_dimensionality::<Ix2>().expect("matrix");
                let vb = self.values[b.0]
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("vector");
                assert_eq!(vy.dim().1, vb.dim(), "bias width");
                let v = (&vy + &vb).into_dyn();
                let (ry, rb) = (self.req(y), self.req(b));
                self.push(
                    v,
                    ry || rb,
                    Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                        let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                        if ry {
                            accum(&mut grads[y.0], g2.to_owned().into_dyn());
                        }
                        if rb {
                            accum(&mut grads[b.0], g2.sum_axis(Axis(0)).into_dyn());
                        }
                    }),
                )
            }
        }
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.values[a.0].view().into_dimensionality::<Ix2>().expect("matrix");
        let mut v = va.to_owned();
        for mut row in v.outer_iter_mut() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            row.mapv_inplace(|x| (x - mx).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        let ra = self.req(a);
        let id = self.push(v.into_dyn(), ra, Self::NO_BACK);
        let out_idx = id.0;
        self.backs[out_idx] = if ra {
            Some(Box::new(
                move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                    let y = vals[out_idx].view().into_dimensionality::<Ix2>().expect("matrix");
                    let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                    let mut out = Array2::<T>::zeros(y.dim());
                    for ((yr, gr), mut or) in
                        y.outer_iter().zip(g2.outer_iter()).zip(out.outer_iter_mut())
                    {
                        let dot: T = yr.iter().zip(gr.iter()).map(|(&a, &b)| a * b).sum();
                        for ((&yv, &gv), o) in yr.iter().zip(gr.iter()).zip(or.iter_mut()) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accum(&mut grads[a.0], out.into_dyn());
                },
            ))
        } else {
            None
        };
        id
    }

    /// Gather rows of a `(K, D)` table; backward scatter-adds into the table.
    pub fn gather_rows(&mut self, table: NodeId, idx: Vec<usize>) -> NodeId {
        let vt = self.values[table.0].view().into_dimensionality::<Ix2>().expect("table");
        let (k, d) = vt.dim();
        let mut v = Array2::<T>::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            assert!(i < k, "gather index out of range");
            v.row_mut(r).assign(&vt.row(i));
        }
        let ra = self.req(table);
        self.push(
            v.into_dyn(),
            ra,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("matrix");
                let mut out = Array2::<T>::zeros((k, d));
                for (r, &i) in idx.iter().enumerate() {
                    let mut row = out.row_mut(i);
                    row += &g2.row(r);
                }
                accum(&mut grads[table.0], out.into_dyn());
            }),
        )
    }

    // ---- spatial ----

    /// 2-D convolution over a `C x H x W` map with square kernel, symmetric
    /// zero padding, and optional per-output-channel bias.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("chw input");
        let vw = self.values[w.0]
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("oikk weight");
        let (c, h, wd) = vx.dim();
        let (o, ci, kh, kw) = vw.dim();
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(kh, kw, "square kernels only");
        let k = kh;
        assert!(h + 2 * pad >= k && wd + 2 * pad >= k, "conv2d kernel larger than input");
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;

        let w2 = vw.to_shape((o, c * k * k)).expect("weight reshape").to_owned();
        // k=1/stride=1 convolutions skip the im2col copy.
        let trivial = k == 1 && stride == 1 && pad == 0;
        let cols: Array2<T> = if trivial {
            vx.to_shape((c, h * wd)).expect("flatten").to_owned()
        } else {
            im2col(&vx, k, stride, pad)
        };
        let mut y = w2.dot(&cols);
        if let Some(b) = b {
            let vb = self.values[b.0]
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias");
            assert_eq!(vb.dim(), o, "bias length");
            for (mut row, &bv) in y.outer_iter_mut().zip(vb.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        let v = y.into_shape_with_order((o, oh, ow)).expect("conv output").into_dyn();

        let (rx, rw) = (self.req(x), self.req(w));
        let rb = b.map(|bb| self.req(bb)).unwrap_or(false);
        let any = rx || rw || rb;
        let saved_cols = if any { Some(cols) } else { None };
        self.push(
            v,
            any,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g2 = g
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("chw grad")
                    .to_shape((o, oh * ow))
                    .expect("flatten grad")
                    .to_owned();
                let cols = saved_cols.expect("saved for backward");
                if rb {
                    let b = b.expect("bias id");
                    accum(&mut grads[b.0], g2.sum_axis(Axis(1)).into_dyn());
                }
                if rw {
                    let dw = g2.dot(&cols.t());
                    accum(
                        &mut grads[w.0],
                        dw.into_shape_with_order((o, c, k, k)).expect("dw shape").into_dyn(),
                    );
                }
                if rx {
                    let vw = vals[w.0]
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .expect("weight");
                    let w2 = vw.to_shape((o, c * k * k)).expect("weight reshape").to_owned();
                    let dcols = w2.t().dot(&g2);
                    let dx = if trivial {
                        dcols.into_shape_with_order((c, h, wd)).expect("dx shape")
                    } else {
                        col2im(&dcols, c, h, wd, k, stride, pad)
                    };
                    accum(&mut grads[x.0], dx.into_dyn());
                }
            }),
        )
    }

    /// Non-overlapping average pooling with window `k` (height and width must
    /// be divisible by `k`).
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("chw");
        let (c, h, w) = vx.dim();
        assert!(k >= 1 && h % k == 0 && w % k == 0, "avg_pool divisibility");
        let (oh, ow) = (h / k, w / k);
        let inv = T::from_f64(1.0 / (k * k) as f64);
        let mut v = Array3::<T>::zeros((c, oh, ow));
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = T::zero();
                    for di in 0..k {
                        for dj in 0..k {
                            s = s + vx[(ci, i * k + di, j * k + dj)];
                        }
                    }
                    v[(ci, i, j)] = s * inv;
                }
            }
        }
        let rx = self.req(x);
        self.push(
            v.into_dyn(),
            rx,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("chw");
                let mut dx = Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..oh {
                        for j in 0..ow {
                            let gv = g3[(ci, i, j)] * inv;
                            for di in 0..k {
                                for dj in 0..k {
                                    dx[(ci, i * k + di, j * k + dj)] = gv;
                                }
                            }
                        }
                    }
                }
                accum(&mut grads[x.0], dx.into_dyn());
            }),
        )
    }

    /// Nearest-neighbor upsampling by integer factor `r`.
    pub fn upsample_nearest(&mut self, x: NodeId, r: usize) -> NodeId {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("chw");
        let (c, h, w) = vx.dim();
        let mut v = Array3::<T>::zeros((c, h * r, w * r));
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let s = vx[(ci, i, j)];
                    for di in 0..r {
                        for dj in 0..r {
                            v[(ci, i * r + di, j * r + dj)] = s;
                        }
                    }
                }
            }
        }
        let rx = self.req(x);
        self.push(
            v.into_dyn(),
            rx,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("chw");
                let mut dx = Array3::<T>::zeros((c, h, w));
                for ci in 0..c {
                    for i in 0..h {
                        for j in 0..w {
                            let mut s = T::zero();
                            for di in 0..r {
                                for dj in 0..r {
                                    s = s + g3[(ci, i * r + di, j * r + dj)];
                                }
                            }
                            dx[(ci, i, j)] = s;
                        }
                    }
                }
                accum(&mut grads[x.0], dx.into_dyn());
            }),
        )
    }

    /// Rearrange `(r*r*C, H, W)` into `(C, r*H, r*W)` (sub-pixel upsampling).
    pub fn pixel_shuffle(&mut self, x: NodeId, r: usize) -> NodeId {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("chw");
        let (cin, h, w) = vx.dim();
        assert!(cin % (r * r) == 0, "pixel_shuffle channel divisibility");
        let c = cin / (r * r);
        let mut v = Array3::<T>::zeros((c, h * r, w * r));
        for co in 0..c {
            for di in 0..r {
                for dj in 0..r {
                    let src = co * r * r + di * r + dj;
                    for i in 0..h {
                        for j in 0..w {
                            v[(co, i * r + di, j * r + dj)] = vx[(src, i, j)];
                        }
                    }
                }
            }
        }
        let rx = self.req(x);
        self.push(
            v.into_dyn(),
            rx,
            Some(move |_: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("chw");
                let mut dx = Array3::<T>::zeros((cin, h, w));
                for co in 0..c {
                    for di in 0..r {
                        for dj in 0..r {
                            let src = co * r * r + di * r + dj;
                            for i in 0..h {
                                for j in 0..w {
                                    dx[(src, i, j)] = g3[(co, i * r + di, j * r + dj)];
                                }
                            }
                        }
                    }
                }
                accum(&mut grads[x.0], dx.into_dyn());
            }),
        )
    }

    /// Per-channel FiLM modulation: `x * (1 + scale[c]) + shift[c]`.
    pub fn channel_affine(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("chw");
        let vs = self.values[scale.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("scale vector");
        let vb = self.values[shift.0]
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("shift vector");
        let (c, h, w) = vx.dim();
        assert_eq!(vs.dim(), c, "scale length");
        assert_eq!(vb.dim(), c, "shift length");
        let one = T::one();
        let mut v = vx.to_owned();
        for (ci, mut plane) in v.outer_iter_mut().enumerate() {
            let s = one + vs[ci];
            let b = vb[ci];
            plane.mapv_inplace(|p| p * s + b);
        }
        let (rx, rs, rb) = (self.req(x), self.req(scale), self.req(shift));
        self.push(
            v.into_dyn(),
            rx || rs || rb,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("chw");
                if rx {
                    let vs = vals[scale.0]
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("scale");
                    let one = T::one();
                    let mut dx = g3.to_owned();
                    for (ci, mut plane) in dx.outer_iter_mut().enumerate() {
                        let s = one + vs[ci];
                        plane.mapv_inplace(|p| p * s);
                    }
                    accum(&mut grads[x.0], dx.into_dyn());
                }
                if rs {
                    let vx = vals[x.0].view().into_dimensionality::<Ix3>().expect("chw");
                    let mut ds = Array1::<T>::zeros(c);
                    for ci in 0..c {
                        let mut s = T::zero();
                        for i in 0..h {
                            for j in 0..w {
                                s = s + g3[(ci, i, j)] * vx[(ci, i, j)];
                            }
                        }
                        ds[ci] = s;
                    }
                    accum(&mut grads[scale.0], ds.into_dyn());
                }
                if rb {
                    let mut db = Array1::<T>::zeros(c);
                    for ci in 0..c {
                        let mut s = T::zero();
                        for i in 0..h {
                            for j in 0..w {
                                s = s + g3[(ci, i, j)];
                            }
                        }
                        db[ci] = s;
                    }
                    accum(&mut grads[shift.0], db.into_dyn());
                }
            }),
        )
    }

    // ---- fused losses ----

    /// Mean binary cross-entropy with logits against a constant target in
    /// `[0, 1]`, computed with the numerically stable softplus form.
    pub fn bce_with_logits(&mut self, logits: NodeId, target: &Arr<T>) -> NodeId {
        self.bce_with_logits_weighted(logits, target, 1.0)
    }

    /// BCE with the positive term scaled by `pos_weight` (counters
    /// foreground/background imbalance); the mean stays over elements.
    pub fn bce_with_logits_weighted(
        &mut self,
        logits: NodeId,
        target: &Arr<T>,
        pos_weight: f64,
    ) -> NodeId {
        let vx = &self.values[logits.0];
        assert_eq!(vx.shape(), target.shape(), "bce shape");
        let n = vx.len();
        let wp = T::from_f64(pos_weight);
        let zero = T::zero();
        let one = T::one();
        let softplus = |x: T| x.max(zero) + (one + (-x.abs()).exp()).ln();
        let mut total = T::zero();
        for (&x, &y) in vx.iter().zip(target.iter()) {
            total = total + wp * y * softplus(-x) + (one - y) * softplus(x);
        }
        let mean = total / T::from_f64(n as f64);
        let rx = self.req(logits);
        let tgt = target.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            rx,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let gs = *g.iter().next().expect("scalar") / T::from_f64(n as f64);
                let one = T::one();
                let d = ndarray::Zip::from(&vals[logits.0])
                    .and(&tgt)
                    .map_collect(|&x, &y| {
                        let sig = one / (one + (-x).exp());
                        (-wp * y * (one - sig) + (one - y) * sig) * gs
                    });
                accum(&mut grads[logits.0], d);
            }),
        )
    }

    /// Mean softmax cross-entropy over the channel axis of `C x H x W` logits
    /// against integer class targets, restricted to pixels where `mask` is
    /// true. An empty mask yields a constant 0 loss.
    pub fn softmax_ce_map(
        &mut self,
        logits: NodeId,
        target: &ndarray::Array2<usize>,
        mask: &ndarray::Array2<bool>,
    ) -> NodeId {
        let vx = self.values[logits.0].view().into_dimensionality::<Ix3>().expect("chw");
        let (c, h, w) = vx.dim();
        assert_eq!(target.dim(), (h, w), "target shape");
        assert_eq!(mask.dim(), (h, w), "mask shape");
        let n_masked = mask.iter().filter(|&&m| m).count();
        if n_masked == 0 {
            return self.constant(ArrayD::from_elem(IxDyn(&[]), T::zero()));
        }
        let mut total = T::zero();
        for i in 0..h {
            for j in 0..w {
                if !mask[(i, j)] {
                    continue;
                }
                let t = target[(i, j)];
                assert!(t < c, "class index out of range");
                let mut mx = T::neg_infinity();
                for ci in 0..c {
                    mx = mx.max(vx[(ci, i, j)]);
                }
                let mut lse = T::zero();
                for ci in 0..c {
                    lse = lse + (vx[(ci, i, j)] - mx).exp();
                }
                total = total + (mx + lse.ln() - vx[(t, i, j)]);
            }
        }
        let mean = total / T::from_f64(n_masked as f64);
        let rx = self.req(logits);
        let target = target.clone();
        let mask = mask.clone();
        self.push(
            ArrayD::from_elem(IxDyn(&[]), mean),
            rx,
            Some(move |vals: &[Arr<T>], g: &Arr<T>, grads: &mut [Option<Arr<T>>]| {
                let vx = vals[logits.0].view().into_dimensionality::<Ix3>().expect("chw");
                let gs = *g.iter().next().expect("scalar") / T::from_f64(n_masked as f64);
                let mut dx = Array3::<T>::zeros((c, h, w));
                for i in 0..h {
                    for j in 0..w {
                        if !mask[(i, j)] {
                            continue;
                        }
                        let t = target[(i, j)];
                        let mut mx = T::neg_infinity();
                        for ci in 0..c {
                            mx = mx.max(vx[(ci, i, j)]);
                        }
                        let mut lse = T::zero();
                        for ci in 0..c {
                            lse = lse + (vx[(ci, i, j)] - mx).exp();
                        }
                        for ci in 0..c {
                            let p = (vx[(ci, i, j)] - mx).exp() / lse;
                            let ind = if ci == t { T::one() } else { T::zero() };
                            dx[(ci, i, j)] = (p - ind) * gs;
                        }
                    }
                }
                accum(&mut grads[logits.0], dx.into_dyn());
            }),
        )
    }
}

/// Lower a padded convolution window scan into a `(C*k*k, OH*OW)` matrix.
fn im2col<T: Scalar>(x: &ndarray::ArrayView3<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<T>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let mut out_row = cols.row_mut(row);
                for i in 0..oh {
                    let src_i = (i * stride + ki) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let src_j = (j * stride + kj) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        out_row[i * ow + j] = x[(ci, src_i as usize, src_j as usize)];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the image.
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<T> {
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut x = Array3::<T>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let col_row = cols.row(row);
                for i in 0..oh {
                    let src_i = (i * stride + ki) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    for j in 0..ow {
                        let src_j = (j * stride + kj) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        x[(ci, src_i as usize, src_j as usize)] =
                            x[(ci, src_i as usize, src_j as usize)] + col_row[i * ow + j];
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, Array4};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || f64::standard_normal(rng))
    }

    /// Central finite differences of `f` w.r.t. each input, compared against
    /// the tape gradients.
    fn check_grad(
        shapes: &[&[usize]],
        f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
        seed: u64,
        tol: f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Arr<f64>> = shapes.iter().map(|s| randn(&mut rng, s)).collect();

        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = f(&mut g, &ids);
        assert_eq!(g.value(loss).len(), 1, "loss must be scalar");
        let grads = g.backward(loss);

        let h = 1e-5;
        for (vi, base) in inputs.iter().enumerate() {
            let analytic = grads.get(ids[vi]).cloned().unwrap_or_else(|| ArrayD::zeros(base.raw_dim()));
            for flat in 0..base.len() {
                let eval = |delta: f64| {
                    let mut g = Graph::new();
                    let ids: Vec<NodeId> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, v)| {
                            let mut v = v.clone();
                            if k == vi {
                                v.as_slice_mut().unwrap()[flat] += delta;
                            }
                            g.leaf(v)
                        })
                        .collect();
                    let loss = f(&mut g, &ids);
                    *g.value(loss).iter().next().unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[flat];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "grad mismatch input {vi} flat {flat}: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        check_grad(
            &[&[3, 4], &[3, 4]],
            |g, ids| {
                let p = g.mul(ids[0], ids[1]);
                let s = g.silu(p);
                let q = g.sigmoid(ids[0]);
                let d = g.sub(s, q);
                let r = g.relu(d);
                let ab = g_abs(g, r);
                let sq = g.sqrt_eps(ab, 1e-8);
                g.mean_all(sq)
            },
            7,
            1e-5,
        );
    }

    // relu(x) + relu(-x) = |x|, smooth enough away from 0 for FD probes.
    fn g_abs(g: &mut Graph<f64>, x: NodeId) -> NodeId {
        let n = g.scale(x, -1.0);
        let a = g.relu(x);
        let b = g.relu(n);
        g.add(a, b)
    }

    #[test]
    fn matmul_linear_softmax_grads() {
        check_grad(
            &[&[4, 3], &[3, 5], &[5]],
            |g, ids| {
                let y = g.linear(ids[0], ids[1], Some(ids[2]));
                let s = g.softmax_rows(y);
                let sq = g.square(s);
                g.mean_all(sq)
            },
            11,
            1e-5,
        );
    }

    #[test]
    fn conv2d_grads_all_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = randn(&mut rng, &[2, 5, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let inputs = [x, w, b];
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let mut g = Graph::new();
            let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
            let sq = g.square(y);
            let loss = g.mean_all(sq);
            let grads = g.backward(loss);

            let h = 1e-5;
            for (vi, base) in inputs.iter().enumerate() {
                let analytic = grads.get(ids[vi]).unwrap();
                for flat in 0..base.len() {
                    let eval = |delta: f64| {
                        let mut g = Graph::new();
                        let ids: Vec<NodeId> = inputs
                            .iter()
                            .enumerate()
                            .map(|(k, v)| {
                                let mut v = v.clone();
                                if k == vi {
                                    v.as_slice_mut().unwrap()[flat] += delta;
                                }
                                g.leaf(v)
                            })
                            .collect();
                        let y = g.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad);
                        let sq = g.square(y);
                        let loss = g.mean_all(sq);
                        *g.value(loss).iter().next().unwrap()
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = analytic.as_slice().unwrap()[flat];
                    assert!(
                        (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6) < 1e-5,
                        "conv grad mismatch stride={stride} pad={pad} input {vi} flat {flat}: fd={fd} an={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn spatial_ops_grads() {
        check_grad(
            &[&[4, 4, 6]],
            |g, ids| {
                let up = g.upsample_nearest(ids[0], 2);
                let pool = g.avg_pool(up, 4);
                let ps = g.pixel_shuffle(ids[0], 2);
                let a = g.mean_all(pool);
                let b = g.mean_all(ps);
                let sq = g.square(b);
                g.add(a, sq)
            },
            13,
            1e-5,
        );
    }

    #[test]
    fn affine_concat_slice_gather_grads() {
        check_grad(
            &[&[3, 2, 2], &[3], &[3], &[4, 5]],
            |g, ids| {
                let film = g.channel_affine(ids[0], ids[1], ids[2]);
                let cat = g.concat_ch(film, ids[0]);
                let sl = g.slice_ch(cat, 1, 5);
                let a = g.mean_all(sl);
                let gath = g.gather_rows(ids[3], vec![0, 2, 2, 3]);
                let s = g.square(gath);
                let b = g.mean_all(s);
                g.add(a, b)
            },
            17,
            1e-5,
        );
    }

    #[test]
    fn fused_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let target = ArrayD::from_shape_simple_fn(IxDyn(&[2, 3, 3]), || {
            if rng.gen_bool(0.5) {
                1.0
            } else {
                0.0
            }
        });
        let cls = ndarray::Array2::from_shape_fn((3, 3), |_| rng.gen_range(0usize..4));
        let mask = ndarray::Array2::from_shape_fn((3, 3), |_| rng.gen_bool(0.8));
        check_grad(
            &[&[2, 3, 3], &[4, 3, 3]],
            move |g, ids| {
                let a = g.bce_with_logits(ids[0], &target);
                let b = g.softmax_ce_map(ids[1], &cls, &mask);
                g.add(a, b)
            },
            29,
            1e-5,
        );
    }

    #[test]
    fn untouched_leaves_get_no_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(arr2(&[[1.0, 2.0]]).into_dyn());
        let b = g.leaf(arr2(&[[3.0, 4.0]]).into_dyn());
        let s = g.square(a);
        let loss = g.mean_all(s);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_some());
        assert!(grads.get(b).is_none(), "no path to b");
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(arr1(&[2.0, -1.0]).into_dyn());
        let d = g.detach(a);
        let s = g.mul(d, d);
        let loss = g.mean_all(s);
        let grads = g.backward(loss);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn straight_through_passes_gradient_unchanged() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.leaf(arr1(&[0.3, 0.7]).into_dyn());
        let st = g.straight_through(a, arr1(&[0.0, 1.0]).into_dyn());
        assert_eq!(g.value(st).as_slice().unwrap(), &[0.0, 1.0]);
        let s = g.sum_all(st);
        let loss = g.scale(s, 3.0);
        let grads = g.backward(loss);
        let ga = grads.get(a).unwrap();
        assert_eq!(ga.as_slice().unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn conv2d_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[2, 4, 5]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let x3 = x.view().into_dimensionality::<Ix3>().unwrap();
        let w4 = w.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let (stride, pad) = (1, 1);
        let mut expect = Array3::<f64>::zeros((3, 4, 5));
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut s = 0.0;
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let si = i as isize + ki as isize - pad as isize;
                                let sj = j as isize + kj as isize - pad as isize;
                                if si >= 0 && si < 4 && sj >= 0 && sj < 5 {
                                    s += x3[(c, si as usize, sj as usize)] * w4[(o, c, ki, kj)];
                                }
                            }
                        }
                    }
                    expect[(o, i, j)] = s;
                }
            }
        }
        let mut g = Graph::new();
        let xid = g.constant(x.clone());
        let wid = g.constant(w.clone());
        let y = g.conv2d(xid, wid, None, stride, pad);
        let got = g.value(y).view().into_dimensionality::<Ix3>().unwrap().to_owned();
        for (a, b) in got.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let _ = Array4::<f64>::zeros((1, 1, 1, 1));
    }
}
