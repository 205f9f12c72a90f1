//! Window multi-head self-attention (plain and shifted) and the bidirectional
//! depth/RGB cross attention.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::layers::{window_partition, window_reverse, Linear, TokenGrid};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::InitSpec;

/// Heads for an embedding width: `max(1, E / 32)`, lowered until it divides `E`.
pub fn default_heads(embed: usize) -> usize {
    let mut h = (embed / 32).max(1);
    while embed % h != 0 {
        h -= 1;
    }
    h
}

/// Index into the `(2w-1)^2` relative offset table for every query/key pair of
/// a `w x w` window, row-major over `[query, key]`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let n = w * w;
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for q in 0..n {
        let (qy, qx) = (q / w, q % w);
        for k in 0..n {
            let (ky, kx) = (k / w, k % w);
            idx.push((qy + w - 1 - ky) * span + (qx + w - 1 - kx));
        }
    }
    idx
}

#[derive(Debug, Clone, Copy)]
pub struct MsaParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// `[(2w-1)^2, heads]`, absent when the relative bias is disabled.
    pub rel_bias: Option<ParamId>,
    pub heads: usize,
    pub head_dim: usize,
    pub window: usize,
}

impl MsaParams {
    pub fn new(store: &mut ParamStore, name: &str, embed: usize, heads: usize, window: usize, rel_bias: bool, rng: &mut Rng) -> Self {
        assert!(heads > 0 && embed % heads == 0, "heads {heads} must divide width {embed}");
        // Softmax ignores a key bias, so keys have none.
        let lin = |store: &mut ParamStore, part: &str, rng: &mut Rng| Linear::new(store, &format!("{name}.{part}"), embed, embed, part != "k", rng);
        let q = lin(store, "q", rng);
        let k = lin(store, "k", rng);
        let v = lin(store, "v", rng);
        let out = lin(store, "out", rng);
        let span = 2 * window - 1;
        let rel_bias = rel_bias.then(|| store.init(format!("{name}.rel_bias"), &[span * span, heads], InitSpec::TruncatedNormal(0.02), rng));
        Self { q, k, v, out, rel_bias, heads, head_dim: embed / heads, window }
    }

    /// Zeroes every projection and the bias table.
    pub fn zero(&self, store: &mut ParamStore) {
        for l in [self.q, self.k, self.v, self.out] {
            store.value_mut(l.weight).data_mut().fill(0.0);
            if let Some(b) = l.bias {
                store.value_mut(b).data_mut().fill(0.0);
            }
        }
        if let Some(b) = self.rel_bias {
            store.value_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Output tokens plus the `[nW, heads, w^2, w^2]` attention probabilities.
pub struct AttentionOutput {
    pub tokens: TokenGrid,
    pub probs: Var,
}

/// `[B, n, E] -> [B, heads, n, d]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, n, e) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[b, n, heads, e / heads])?;
    g.permute(x, &[0, 2, 1, 3])
}

fn merge_heads(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[b, n, h * d])
}

/// Window attention with the window size of `params`; shift is `w / 2` when `shifted`.
pub fn wmsa(g: &mut Graph, store: &ParamStore, t: &TokenGrid, shifted: bool, params: &MsaParams) -> Result<TokenGrid> {
    Ok(wmsa_with_probs(g, store, t, shifted, params)?.tokens)
}

pub fn wmsa_with_probs(g: &mut Graph, store: &ParamStore, t: &TokenGrid, shifted: bool, params: &MsaParams) -> Result<AttentionOutput> {
    let w = params.window;
    if shifted && w < 2 {
        return Err(shape_err!("shifted windows need w >= 2, got {w}"));
    }
    let shift = if shifted { w / 2 } else { 0 };
    let (windows, mask) = window_partition(g, t, w, shift)?;
    let nw = g.shape(windows)[0];
    let n = w * w;
    let h = params.heads;

    let q = params.q.forward(g, store, windows)?;
    let k = params.k.forward(g, store, windows)?;
    let v = params.v.forward(g, store, windows)?;
    let q = split_heads(g, q, h)?;
    let k = split_heads(g, k, h)?;
    let v = split_heads(g, v, h)?;
    let kt = g.transpose_last(k)?;
    let logits = g.matmul(q, kt)?;
    let mut logits = g.scale(logits, 1.0 / (params.head_dim as f64).sqrt())?;

    if let Some(table) = params.rel_bias {
        let table = g.param(store, table);
        let index: Vec<usize> = (0..h)
            .flat_map(|head| relative_position_index(w).into_iter().map(move |r| r * h + head))
            .collect();
        let bias = g.gather(table, Arc::from(index), &[1, h, n, n])?;
        logits = g.add(logits, bias)?;
    }
    if shift > 0 {
        let mask = g.constant(mask.reshape(&[nw, 1, n, n])?);
        logits = g.add(logits, mask)?;
    }
    let probs = g.softmax(logits, 3)?;
    let out = g.matmul(probs, v)?;
    let out = merge_heads(g, out)?;
    let out = params.out.forward(g, store, out)?;
    let tokens = window_reverse(g, out, w, shift, t.grid_h, t.grid_w, t.patch)?;
    Ok(AttentionOutput { tokens, probs })
}

/// Plain then shifted window attention. CTN and residual wiring belong to the caller.
pub fn msa_pair(g: &mut Graph, store: &ParamStore, t: &TokenGrid, plain: &MsaParams, shifted: &MsaParams) -> Result<TokenGrid> {
    let a = wmsa(g, store, t, false, plain)?;
    wmsa(g, store, &a, true, shifted)
}

/// Which branch supplies the values in cross attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    /// Values from the query's own branch: `softmax(Q_D K_R^T / sqrt d) V_D`.
    #[default]
    #[serde(rename = "self")]
    SelfBranch,
    /// Values from the key's branch.
    Other,
}

/// Query/key/value/output projections of one branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchProjections {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl BranchProjections {
    fn new(store: &mut ParamStore, name: &str, embed: usize, rng: &mut Rng) -> Self {
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), embed, embed, part != "k", rng);
        Self { q: lin("q"), k: lin("k"), v: lin("v"), out: lin("out") }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in [self.q, self.k, self.v, self.out] {
            store.value_mut(l.weight).data_mut().fill(0.0);
            if let Some(b) = l.bias {
                store.value_mut(b).data_mut().fill(0.0);
            }
        }
    }
}

/// Single-head global cross attention between the depth and RGB token sets.
#[derive(Debug, Clone, Copy)]
pub struct CrossAttnParams {
    pub depth: BranchProjections,
    pub rgb: BranchProjections,
    pub dim: usize,
    pub value_source: ValueSource,
}

impl CrossAttnParams {
    pub fn new(store: &mut ParamStore, name: &str, embed: usize, value_source: ValueSource, rng: &mut Rng) -> Self {
        Self {
            depth: BranchProjections::new(store, &format!("{name}.depth"), embed, rng),
            rgb: BranchProjections::new(store, &format!("{name}.rgb"), embed, rng),
            dim: embed,
            value_source,
        }
    }

    /// The same parameters with the branch roles exchanged.
    pub fn mirrored(&self) -> Self {
        Self { depth: self.rgb, rgb: self.depth, ..*self }
    }
}

pub struct CrossAttentionOutput {
    pub depth: TokenGrid,
    pub rgb: TokenGrid,
    /// `[N, N]` probabilities, depth queries over RGB keys.
    pub probs_depth: Var,
    pub probs_rgb: Var,
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, dim: usize) -> Result<(Var, Var)> {
    let kt = g.transpose_last(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (dim as f64).sqrt())?;
    let p = g.softmax(logits, 1)?;
    Ok((g.matmul(p, v)?, p))
}

/// `F_D' = softmax(Q_D K_R^T / sqrt d) V_D` and the mirror for RGB, each
/// followed by its branch's output projection.
pub fn cross_attention(g: &mut Graph, store: &ParamStore, depth: &TokenGrid, rgb: &TokenGrid, params: &CrossAttnParams) -> Result<CrossAttentionOutput> {
    let (sd, sr) = (g.shape(depth.tokens).to_vec(), g.shape(rgb.tokens).to_vec());
    if sd != sr || depth.grid_h != rgb.grid_h || depth.grid_w != rgb.grid_w {
        return Err(shape_err!("cross attention branches differ: {:?} vs {:?}", sd, sr));
    }
    let (pd, pr) = (&params.depth, &params.rgb);
    let qd = pd.q.forward(g, store, depth.tokens)?;
    let kd = pd.k.forward(g, store, depth.tokens)?;
    let vd = pd.v.forward(g, store, depth.tokens)?;
    let qr = pr.q.forward(g, store, rgb.tokens)?;
    let kr = pr.k.forward(g, store, rgb.tokens)?;
    let vr = pr.v.forward(g, store, rgb.tokens)?;
    let (v_for_d, v_for_r) = match params.value_source {
        ValueSource::SelfBranch => (vd, vr),
        ValueSource::Other => (vr, vd),
    };
    let (fd, probs_depth) = attend(g, qd, kr, v_for_d, params.dim)?;
    let (fr, probs_rgb) = attend(g, qr, kd, v_for_r, params.dim)?;
    let fd = pd.out.forward(g, store, fd)?;
    let fr = pr.out.forward(g, store, fr)?;
    Ok(CrossAttentionOutput { depth: depth.with_tokens(fd), rgb: rgb.with_tokens(fr), probs_depth, probs_rgb })
}
