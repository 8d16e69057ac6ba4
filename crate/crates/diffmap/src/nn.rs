//! Parameter management, layer building blocks, and the AdamW optimizer.
//!
//! Parameters live in a [`ParamSet`] in registration order; a forward pass
//! binds them all into a fresh [`Graph`] (as tracked leaves when training,
//! constants when frozen) and layers address them by [`ParamId`]. The same
//! layer definitions therefore run in `f32` for training and `f64` for
//! gradient verification.

use ndarray::{Array1, Array4, ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::{Arr, Graph, NodeId, Scalar};

/// Index of a parameter within its [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Named parameter tensors in deterministic registration order.
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    values: Vec<Arr<T>>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Arr<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr<T> {
        &mut self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arr<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Insert every parameter into `graph`, tracked or frozen.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Bound {
        let nodes = self
            .values
            .iter()
            .map(|v| {
                if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                }
            })
            .collect();
        Bound { nodes }
    }

    /// Convert all values to another element type (used to rerun a model at
    /// `f64` for finite-difference checks).
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| U::from_f64(x.to_f64())))
                .collect(),
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Overwrite every parameter from `(name, value)` pairs; all names must
    /// resolve and shapes must match.
    pub fn load_values(&mut self, tensors: &[(String, Arr<T>)]) -> crate::error::Result<()> {
        use crate::error::Error;
        let mut seen = vec![false; self.len()];
        for (name, value) in tensors {
            let id = self
                .index_of(name)
                .ok_or_else(|| Error::config(format!("checkpoint tensor '{name}' has no matching parameter")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::config(format!(
                    "checkpoint tensor '{name}' shape {:?} does not match parameter shape {:?}",
                    value.shape(),
                    self.values[id.0].shape()
                )));
            }
            self.values[id.0] = value.clone();
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::config(format!(
                "checkpoint is missing parameter '{}'",
                self.names[missing]
            )));
        }
        Ok(())
    }
}

/// Graph nodes for one binding of a [`ParamSet`].
pub struct Bound {
    nodes: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }
}

/// Gradient accumulator aligned with a [`ParamSet`] (sums over a batch).
pub struct GradAccum<T: Scalar> {
    grads: Vec<Option<Arr<T>>>,
    count: usize,
}

impl<T: Scalar> GradAccum<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        GradAccum {
            grads: (0..params.len()).map(|_| None).collect(),
            count: 0,
        }
    }

    /// Fold one sample's gradients in (missing gradients count as zero).
    pub fn add(&mut self, bound: &Bound, grads: &mut crate::autodiff::Gradients<T>) {
        for (slot, &node) in self.grads.iter_mut().zip(bound.nodes()) {
            if let Some(g) = grads.take(node) {
                match slot {
                    Some(acc) => *acc += &g,
                    None => *slot = Some(g),
                }
            }
        }
        self.count += 1;
    }

    /// Mean gradients over the accumulated samples; `None` where no sample
    /// produced a gradient.
    pub fn mean(mut self) -> Vec<Option<Arr<T>>> {
        let inv = T::from_f64(1.0 / self.count.max(1) as f64);
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * inv);
        }
        self.grads
    }
}

/// Kaiming-style uniform initialization: `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
fn kaiming<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Arr<T> {
    let bound = (1.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::uniform(rng, -bound, bound))
}

/// 2-D convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = ps.add(format!("{name}.w"), kaiming(rng, &[out_ch, in_ch, k, k], fan_in));
        let b = ps.add(
            format!("{name}.b"),
            Array1::<T>::zeros(out_ch).into_dyn(),
        );
        Conv2d { w, b, stride, pad }
    }

    /// Same as [`Conv2d::init`] but with weights and bias at zero, so the
    /// layer initially emits zeros (used for network output heads).
    pub fn init_zero<T: Scalar>(
        ps: &mut ParamSet<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = ps.add(
            format!("{name}.w"),
            Array4::<T>::zeros((out_ch, in_ch, k, k)).into_dyn(),
        );
        let b = ps.add(format!("{name}.b"), Array1::<T>::zeros(out_ch).into_dyn());
        Conv2d { w, b, stride, pad }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        g.conv2d(x, bound.node(self.w), Some(bound.node(self.b)), self.stride, self.pad)
    }
}

/// Dense layer over token matrices `(n, in) -> (n, out)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn init<T: Scalar, R: Rng>(
        ps: &mut ParamSet<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let w = ps.add(format!("{name}.w"), kaiming(rng, &[in_dim, out_dim], in_dim));
        let b = bias.then(|| ps.add(format!("{name}.b"), Array1::<T>::zeros(out_dim).into_dyn()));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, bound: &Bound, x: NodeId) -> NodeId {
        g.linear(x, bound.node(self.w), self.b.map(|b| bound.node(b)))
    }
}

/// Flatten a `C x H x W` map into a `(H*W, C)` token matrix.
pub fn to_tokens<T: Scalar>(g: &mut Graph<T>, x: NodeId) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 3, "expected CHW map");
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x, &[c, h * w]);
    g.transpose2(flat)
}

/// Inverse of [`to_tokens`] for a known spatial shape.
pub fn from_tokens<T: Scalar>(g: &mut Graph<T>, x: NodeId, h: usize, w: usize) -> NodeId {
    let shape = g.value(x).shape().to_vec();
    assert_eq!(shape.len(), 2, "expected token matrix");
    assert_eq!(shape[0], h * w, "token count mismatch");
    let t = g.transpose2(x);
    g.reshape(t, &[shape[1], h, w])
}

/// Sinusoidal embedding of a diffusion step index.
pub fn sinusoidal_embedding<T: Scalar>(t: usize, dim: usize) -> Array1<T> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::<T>::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[i] = T::from_f64(arg.sin());
        out[half + i] = T::from_f64(arg.cos());
    }
    out
}

/// AdamW with decoupled weight decay.
pub struct AdamW<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Option<Arr<T>>>,
    v: Vec<Option<Arr<T>>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(params: &ParamSet<T>, lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: (0..params.len()).map(|_| None).collect(),
            v: (0..params.len()).map(|_| None).collect(),
            t: 0,
        }
    }

    /// Apply one update from mean gradients (entries with `None` are skipped).
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Option<Arr<T>>], lr: f64) {
        assert_eq!(grads.len(), params.len(), "gradient/param count mismatch");
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let eps = T::from_f64(self.eps);
        let step = T::from_f64(lr / bc1);
        let inv_sqrt_bc2 = T::from_f64(1.0 / bc2.sqrt());
        let wd = T::from_f64(lr * self.weight_decay);
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = self.m[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self.v[i].get_or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            ndarray::Zip::from(m.view_mut())
                .and(v.view_mut())
                .and(g.view())
                .for_each(|m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                });
            let value = params.value_mut(ParamId(i));
            ndarray::Zip::from(value.view_mut())
                .and(m.view())
                .and(v.view())
                .for_each(|p, &m, &v| {
                    let vhat_sqrt = v.sqrt() * inv_sqrt_bc2;
                    *p = *p - step * m / (vhat_sqrt + eps) - wd * *p;
                });
        }
    }
}
