//! Layout-conditioned multi-scale patch discriminator with spectral normalization.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::layers::{avg_pool2, one_hot, Conv2d, SemanticLayout};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Smallest accepted input side.
pub const MIN_SIDE: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnMode {
    /// One power-iteration update of the singular vectors, then forward.
    Train,
    /// Singular vectors frozen.
    Eval,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
}

/// One power-iteration step on row-major `w: [rows, cols]`: updates `u`
/// in place and returns `(v, sigma)` with `sigma = u^T W v`.
pub fn power_iteration(w: &[f64], rows: usize, cols: usize, u: &mut [f64]) -> (Vec<f64>, f64) {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            v[c] += w[r * cols + c] * u[r];
        }
    }
    normalize(&mut v);
    for r in 0..rows {
        u[r] = (0..cols).map(|c| w[r * cols + c] * v[c]).sum();
    }
    normalize(u);
    let sigma = sigma_of(w, rows, cols, u, &v);
    (v, sigma)
}

fn sigma_of(w: &[f64], rows: usize, cols: usize, u: &[f64], v: &[f64]) -> f64 {
    (0..rows).map(|r| u[r] * (0..cols).map(|c| w[r * cols + c] * v[c]).sum::<f64>()).sum()
}

/// `v = normalize(W^T u)` without touching `u`.
fn right_vector(w: &[f64], rows: usize, cols: usize, u: &[f64]) -> Vec<f64> {
    let mut v = vec![0.0; cols];
    for r in 0..rows {
        for c in 0..cols {
            v[c] += w[r * cols + c] * u[r];
        }
    }
    normalize(&mut v);
    v
}

/// Convolution whose kernel is divided by its estimated spectral norm.
#[derive(Debug, Clone)]
pub struct SnConv {
    pub conv: Conv2d,
    /// Left singular vector estimate, unit length, one entry per output channel.
    pub u: Vec<f64>,
}

impl SnConv {
    #[allow(clippy::too_many_arguments)]
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        let conv = Conv2d::new(store, name, c_in, c_out, k, stride, pad, true, rng);
        let mut u: Vec<f64> = (0..c_out).map(|_| rng.normal()).collect();
        normalize(&mut u);
        Self { conv, u }
    }

    fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: SnMode) -> Result<Var> {
        let wt = store.value(self.conv.weight);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        let v = if mode == SnMode::Train {
            power_iteration(wt.data(), rows, cols, &mut self.u).0
        } else {
            right_vector(wt.data(), rows, cols, &self.u)
        };
        let w = g.param(store, self.conv.weight);
        let wm = g.reshape(w, &[rows, cols])?;
        let u = g.constant(Tensor::new(vec![1, rows], self.u.clone())?);
        let v = g.constant(Tensor::new(vec![cols, 1], v)?);
        let uw = g.matmul(u, wm)?;
        let sigma = g.matmul(uw, v)?;
        let w_sn = g.div(w, sigma)?;
        let b = self.conv.bias.map(|b| g.param(store, b));
        g.conv2d(x, w_sn, b, self.conv.stride, self.conv.pad)
    }

    /// Current estimate `u^T W v` of the kernel's largest singular value.
    pub fn sigma(&self, store: &ParamStore) -> f64 {
        let wt = store.value(self.conv.weight);
        let rows = wt.shape()[0];
        let cols = wt.len() / rows;
        let v = right_vector(wt.data(), rows, cols, &self.u);
        sigma_of(wt.data(), rows, cols, &self.u, &v)
    }
}

/// One scale: strided 4x4 convolutions with leaky ReLU, then a 1x1 logit head.
#[derive(Debug, Clone)]
pub struct PatchDiscriminator {
    pub layers: Vec<SnConv>,
    pub head: SnConv,
}

/// Logit map and the intermediate activations of one scale.
pub struct ScaleOutput {
    pub logits: Var,
    pub features: Vec<Var>,
}

impl PatchDiscriminator {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, base: usize, layers: usize, rng: &mut Rng) -> Self {
        let mut c = c_in;
        let layers = (0..layers)
            .map(|i| {
                let out = base << i.min(3);
                let l = SnConv::new(store, &format!("{name}.conv{i}"), c, out, 4, 2, 2, rng);
                c = out;
                l
            })
            .collect();
        let head = SnConv::new(store, &format!("{name}.head"), c, 1, 1, 1, 0, rng);
        Self { layers, head }
    }

    fn forward(&mut self, g: &mut Graph, store: &ParamStore, x: Var, mode: SnMode) -> Result<ScaleOutput> {
        let mut h = x;
        let mut features = Vec::with_capacity(self.layers.len());
        for l in &mut self.layers {
            h = l.forward(g, store, h, mode)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            features.push(h);
        }
        let logits = self.head.forward(g, store, h, mode)?;
        Ok(ScaleOutput { logits, features })
    }
}

/// Discriminator over full and half resolution of `concat(one_hot(M), image)`.
#[derive(Debug, Clone)]
pub struct MultiScaleDiscriminator {
    pub scales: Vec<PatchDiscriminator>,
    pub image_channels: usize,
    pub num_labels: usize,
}

impl MultiScaleDiscriminator {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_labels: usize,
        image_channels: usize,
        base: usize,
        scales: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let scales = (0..scales)
            .map(|s| PatchDiscriminator::new(store, &format!("{name}.scale{s}"), num_labels + image_channels, base, layers, rng))
            .collect();
        Self { scales, image_channels, num_labels }
    }

    /// Every spectrally normalized layer, in forward order.
    pub fn sn_layers(&self) -> impl Iterator<Item = &SnConv> {
        self.scales.iter().flat_map(|s| s.layers.iter().chain(std::iter::once(&s.head)))
    }

    /// `image: [c, H, W]`; scale `s` sees the input average-pooled `s` times.
    pub fn forward(&mut self, g: &mut Graph, store: &ParamStore, image: Var, layout: &SemanticLayout, mode: SnMode) -> Result<Vec<ScaleOutput>> {
        let shape = g.shape(image).to_vec();
        let [c, h, w] = shape[..] else {
            return Err(shape_err!("discriminator expects [C,H,W], got {:?}", shape));
        };
        if c != self.image_channels {
            return Err(shape_err!("discriminator built for {} channels, got {c}", self.image_channels));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(shape_err!("discriminator input {h}x{w} below {MIN_SIDE}x{MIN_SIDE}"));
        }
        if layout.height() != h || layout.width() != w || layout.num_labels() != self.num_labels {
            return Err(shape_err!("layout does not match the {h}x{w} image or label count"));
        }
        let m = g.constant(one_hot(layout));
        let mut x = g.concat(&[m, image], 0)?;
        let mut out = Vec::with_capacity(self.scales.len());
        for (i, s) in self.scales.iter_mut().enumerate() {
            if i > 0 {
                x = avg_pool2(g, x)?;
            }
            out.push(s.forward(g, store, x, mode)?);
        }
        Ok(out)
    }
}
