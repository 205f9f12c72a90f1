//! Geometric and structural building blocks: label handling, patch tokens,
//! windows, pixel shuffle, convolutions and the token MLP.
//!
//! Feature maps are graph values shaped `[C, H, W]`. Token sequences are
//! `[N_tok, E]`, ordered row-major over the token grid.

use std::sync::Arc;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{InitSpec, Tensor};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_NEG: f64 = -1e9;

/// Integer label grid, the generator's only input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticLayout {
    height: usize,
    width: usize,
    num_labels: usize,
    labels: Vec<u32>,
}

impl SemanticLayout {
    pub fn new(height: usize, width: usize, num_labels: usize, labels: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(shape_err!("layout {height}x{width} cannot hold {} labels", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_labels) {
            return Err(Error::Invalid(format!("label {bad} outside [0, {num_labels})")));
        }
        Ok(Self { height, width, num_labels, labels })
    }

    pub fn constant(height: usize, width: usize, num_labels: usize, label: u32) -> Result<Self> {
        Self::new(height, width, num_labels, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Relabels every pixel `l -> perm[l]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_labels {
            return Err(Error::Invalid("permutation length differs from label count".into()));
        }
        let labels = self.labels.iter().map(|&l| perm[l as usize] as u32).collect();
        Self::new(self.height, self.width, self.num_labels, labels)
    }
}

/// Tokens plus the grid geometry they were cut from.
#[derive(Debug, Clone, Copy)]
pub struct TokenGrid {
    /// `[grid_h * grid_w, E]`
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }
}

/// `[num_labels, H, W]` indicator channels.
pub fn one_hot(layout: &SemanticLayout) -> Tensor {
    let (h, w, l) = (layout.height, layout.width, layout.num_labels);
    let mut data = vec![0.0; l * h * w];
    for (p, &lab) in layout.labels.iter().enumerate() {
        data[lab as usize * h * w + p] = 1.0;
    }
    Tensor::new(vec![l, h, w], data).expect("one-hot shape")
}

/// Nearest-neighbour resampling with pixel-centre alignment: output index `j`
/// reads input index `floor((j + 0.5) * H / H')`.
pub fn resample_labels(layout: &SemanticLayout, height: usize, width: usize) -> Result<SemanticLayout> {
    if height == 0 || width == 0 {
        return Err(shape_err!("cannot resample to {height}x{width}"));
    }
    if height == layout.height && width == layout.width {
        return Ok(layout.clone());
    }
    let src = |j: usize, out: usize, inp: usize| -> usize {
        (((j as f64 + 0.5) * inp as f64 / out as f64).floor() as usize).min(inp - 1)
    };
    let mut labels = Vec::with_capacity(height * width);
    for y in 0..height {
        let sy = src(y, height, layout.height);
        for x in 0..width {
            labels.push(layout.at(sy, src(x, width, layout.width)));
        }
    }
    SemanticLayout::new(height, width, layout.num_labels, labels)
}

/// Tokenwise affine map `x W + b`, `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng) -> Self {
        let weight = store.init(format!("{name}.w"), &[in_dim, out_dim], InitSpec::TruncatedNormal(0.02), rng);
        let bias = bias.then(|| store.init(format!("{name}.b"), &[out_dim], InitSpec::Zeros, rng));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// 2D convolution with fixed stride and zero padding.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Uniform `+-1/sqrt(fan_in)` initialization for weight and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        let weight = store.init(format!("{name}.w"), &[c_out, c_in, kernel, kernel], InitSpec::Uniform(-bound, bound), rng);
        let bias = bias.then(|| store.init(format!("{name}.b"), &[c_out], InitSpec::Uniform(-bound, bound), rng));
        Self { weight, bias, stride, pad }
    }

    /// `k x k` kernel, stride 1, padding `(k - 1) / 2`.
    pub fn same(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, bias: bool, rng: &mut Rng) -> Self {
        Self::new(store, name, c_in, c_out, kernel, 1, (kernel - 1) / 2, bias, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Non-overlapping `p x p` patches flattened channel-major then row-major
/// spatial, projected to the embedding width.
#[derive(Debug, Clone, Copy)]
pub struct PatchEmbed {
    pub proj: Linear,
    pub patch: usize,
    pub channels: usize,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, patch: usize, embed: usize, rng: &mut Rng) -> Self {
        let proj = Linear::new(store, name, channels * patch * patch, embed, true, rng);
        Self { proj, patch, channels }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, map: Var) -> Result<TokenGrid> {
        let patches = patchify(g, map, self.patch)?;
        let tokens = self.proj.forward(g, store, patches.tokens)?;
        Ok(patches.with_tokens(tokens))
    }
}

/// Cuts `[C, H, W]` into `[N_tok, C p^2]` raw patch vectors.
pub fn patchify(g: &mut Graph, map: Var, p: usize) -> Result<TokenGrid> {
    let shape = g.shape(map).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(shape_err!("patch embedding expects [C,H,W], got {:?}", shape));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!("feature map {h}x{w} is not divisible into {p}x{p} patches"));
    }
    let (gh, gw) = (h / p, w / p);
    let x = g.reshape(map, &[c, gh, p, gw, p])?;
    let x = g.permute(x, &[1, 3, 0, 2, 4])?;
    let tokens = g.reshape(x, &[gh * gw, c * p * p])?;
    Ok(TokenGrid { tokens, grid_h: gh, grid_w: gw, patch: p })
}

/// `[N_tok, E] -> [E, grid_h, grid_w]`; token `k` lands at `(k / grid_w, k % grid_w)`.
pub fn token_to_map(g: &mut Graph, t: &TokenGrid) -> Result<Var> {
    let e = *g.shape(t.tokens).last().ok_or_else(|| shape_err!("tokens must be 2-d"))?;
    let x = g.reshape(t.tokens, &[t.grid_h, t.grid_w, e])?;
    g.permute(x, &[2, 0, 1])
}

/// `[C r^2, H, W] -> [C, rH, rW]` with `out[c, h r + i, w r + j] = in[c r^2 + i r + j, h, w]`.
pub fn pixel_shuffle(g: &mut Graph, x: Var, r: usize) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [cr, h, w] = shape[..] else {
        return Err(shape_err!("pixel shuffle expects [C,H,W], got {:?}", shape));
    };
    if r == 0 || cr % (r * r) != 0 {
        return Err(shape_err!("pixel shuffle: {cr} channels not divisible by {r}^2"));
    }
    if r == 1 {
        return Ok(x);
    }
    let c = cr / (r * r);
    let y = g.reshape(x, &[c, r, r, h, w])?;
    let y = g.permute(y, &[0, 3, 1, 4, 2])?;
    g.reshape(y, &[c, h * r, w * r])
}

/// Token index (into the unrolled grid) for every `(window, position)` slot
/// after a cyclic roll by `(-shift, -shift)`.
pub fn window_index_map(grid_h: usize, grid_w: usize, w: usize, shift: usize) -> Vec<usize> {
    let (nwy, nwx) = (grid_h / w, grid_w / w);
    let mut out = Vec::with_capacity(grid_h * grid_w);
    for wy in 0..nwy {
        for wx in 0..nwx {
            for dy in 0..w {
                for dx in 0..w {
                    let r = (wy * w + dy + shift) % grid_h;
                    let c = (wx * w + dx + shift) % grid_w;
                    out.push(r * grid_w + c);
                }
            }
        }
    }
    out
}

fn check_window_args(grid_h: usize, grid_w: usize, w: usize, shift: usize) -> Result<()> {
    if w == 0 || grid_h % w != 0 || grid_w % w != 0 {
        return Err(shape_err!("token grid {grid_h}x{grid_w} is not divisible into windows of {w}"));
    }
    if shift != 0 && shift != w / 2 {
        return Err(shape_err!("window shift must be 0 or {}, got {shift}", w / 2));
    }
    Ok(())
}

/// Additive attention mask `[nW, w^2, w^2]` for the rolled grid: 0 between
/// tokens of the same region, [`MASK_NEG`] otherwise. Regions are the slices
/// `[0, n-w)`, `[n-w, n-shift)`, `[n-shift, n)` along each axis.
pub fn shifted_window_mask(grid_h: usize, grid_w: usize, w: usize, shift: usize) -> Tensor {
    let (nwy, nwx) = (grid_h / w, grid_w / w);
    let nw = nwy * nwx;
    let ww = w * w;
    let mut data = vec![0.0; nw * ww * ww];
    if shift == 0 {
        return Tensor::new(vec![nw, ww, ww], data).expect("mask shape");
    }
    let region = |i: usize, n: usize| -> usize {
        if i < n - w {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    for wy in 0..nwy {
        for wx in 0..nwx {
            let n = wy * nwx + wx;
            let ids: Vec<usize> = (0..ww)
                .map(|q| region(wy * w + q / w, grid_h) * 3 + region(wx * w + q % w, grid_w))
                .collect();
            for q in 0..ww {
                for k in 0..ww {
                    if ids[q] != ids[k] {
                        data[(n * ww + q) * ww + k] = MASK_NEG;
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw, ww, ww], data).expect("mask shape")
}

/// Splits a token grid into `[nW, w^2, E]` windows (rolled first when `shift > 0`)
/// and returns the matching additive mask.
pub fn window_partition(g: &mut Graph, t: &TokenGrid, w: usize, shift: usize) -> Result<(Var, Tensor)> {
    check_window_args(t.grid_h, t.grid_w, w, shift)?;
    let e = g.shape(t.tokens)[1];
    let map = window_index_map(t.grid_h, t.grid_w, w, shift);
    let index: Vec<usize> = map.iter().flat_map(|&tok| (0..e).map(move |c| tok * e + c)).collect();
    let nw = (t.grid_h / w) * (t.grid_w / w);
    let windows = g.gather(t.tokens, Arc::from(index), &[nw, w * w, e])?;
    Ok((windows, shifted_window_mask(t.grid_h, t.grid_w, w, shift)))
}

/// Exact inverse of [`window_partition`], including the roll back.
pub fn window_reverse(g: &mut Graph, windows: Var, w: usize, shift: usize, grid_h: usize, grid_w: usize, patch: usize) -> Result<TokenGrid> {
    check_window_args(grid_h, grid_w, w, shift)?;
    let shape = g.shape(windows).to_vec();
    let nw = (grid_h / w) * (grid_w / w);
    if shape.len() != 3 || shape[0] != nw || shape[1] != w * w {
        return Err(shape_err!("windows {:?} do not tile a {grid_h}x{grid_w} grid with w={w}", shape));
    }
    let e = shape[2];
    let map = window_index_map(grid_h, grid_w, w, shift);
    let mut inverse = vec![0usize; map.len()];
    for (slot, &tok) in map.iter().enumerate() {
        inverse[tok] = slot;
    }
    let index: Vec<usize> = inverse.iter().flat_map(|&slot| (0..e).map(move |c| slot * e + c)).collect();
    let tokens = g.gather(windows, Arc::from(index), &[grid_h * grid_w, e])?;
    Ok(TokenGrid { tokens, grid_h, grid_w, patch })
}

/// Replicates every pixel into a 2x2 block.
pub fn upsample_nearest(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(shape_err!("upsample expects [C,H,W], got {:?}", shape));
    };
    let (oh, ow) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                index.push(ch * h * w + (y / 2) * w + xx / 2);
            }
        }
    }
    g.gather(x, Arc::from(index), &[c, oh, ow])
}

/// 2x2 average pooling (spatial dims must be even).
pub fn avg_pool2(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let [c, h, w] = shape[..] else {
        return Err(shape_err!("pooling expects [C,H,W], got {:?}", shape));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(shape_err!("2x2 pooling needs even dims, got {h}x{w}"));
    }
    let y = g.reshape(x, &[c, h / 2, 2, w / 2, 2])?;
    let y = g.mean_axes(y, &[2, 4])?;
    g.reshape(y, &[c, h / 2, w / 2])
}

/// Tokenwise `Linear(E, 4E) -> GELU -> Linear(4E, E)`.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, true, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, t: &TokenGrid) -> Result<TokenGrid> {
        let e = g.shape(t.tokens)[1];
        if e != self.fc1.in_dim {
            return Err(shape_err!("MLP expects width {}, tokens have {e}", self.fc1.in_dim));
        }
        let h = self.fc1.forward(g, store, t.tokens)?;
        let h = g.gelu(h)?;
        let y = self.fc2.forward(g, store, h)?;
        Ok(t.with_tokens(y))
    }
}
