//! Layout-conditioned normalization: conditional token normalization (CTN) on
//! token sequences and the SPADE-modulated learned shortcut on 2D maps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::layers::{one_hot, resample_labels, Conv2d, Linear, PatchEmbed, SemanticLayout, TokenGrid};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which axes CTN normalizes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtnStats {
    /// One mean and deviation over all tokens and channels.
    #[default]
    Joint,
    /// Per-token statistics over channels (standard layer norm).
    PerToken,
}

/// Turns a layout into tokens on a feature token grid: nearest resampling to
/// the grid's pixel extent, one-hot, then patch embedding with the same patch size.
#[derive(Debug, Clone, Copy)]
pub struct LayoutTokenizer {
    pub embed: PatchEmbed,
}

impl LayoutTokenizer {
    pub fn new(store: &mut ParamStore, name: &str, num_labels: usize, patch: usize, embed: usize, rng: &mut Rng) -> Self {
        Self { embed: PatchEmbed::new(store, name, num_labels, patch, embed, rng) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, layout: &SemanticLayout, grid_h: usize, grid_w: usize) -> Result<TokenGrid> {
        let p = self.embed.patch;
        let m = resample_labels(layout, grid_h * p, grid_w * p)?;
        let oh = g.constant(one_hot(&m));
        self.embed.forward(g, store, oh)
    }
}

/// `out = gamma(M^T) * (F^T - mu) / sigma + beta(M^T)` with per-token,
/// per-channel `gamma`, `beta` predicted from the tokenized layout.
#[derive(Debug, Clone, Copy)]
pub struct Ctn {
    pub hidden: Linear,
    pub gamma: Linear,
    pub beta: Linear,
    pub stats: CtnStats,
}

impl Ctn {
    /// Hidden width `2 * layout_dim`; the gamma head bias starts at 1.
    pub fn new(store: &mut ParamStore, name: &str, layout_dim: usize, dim: usize, stats: CtnStats, rng: &mut Rng) -> Self {
        let hidden = Linear::new(store, &format!("{name}.shared"), layout_dim, 2 * layout_dim, true, rng);
        let gamma = Linear::new(store, &format!("{name}.gamma"), 2 * layout_dim, dim, true, rng);
        let beta = Linear::new(store, &format!("{name}.beta"), 2 * layout_dim, dim, true, rng);
        store.value_mut(gamma.bias.expect("bias")).data_mut().fill(1.0);
        Self { hidden, gamma, beta, stats }
    }

    /// Zeroes both heads (weights and biases), so the output is identically 0.
    pub fn zero_heads(&self, store: &mut ParamStore) {
        for l in [self.gamma, self.beta] {
            store.value_mut(l.weight).data_mut().fill(0.0);
            store.value_mut(l.bias.expect("bias")).data_mut().fill(0.0);
        }
    }

    /// Sets gamma to 1 and beta to 0 regardless of the layout.
    pub fn make_identity(&self, store: &mut ParamStore) {
        self.zero_heads(store);
        store.value_mut(self.gamma.bias.expect("bias")).data_mut().fill(1.0);
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenGrid, layout_tokens: &TokenGrid) -> Result<TokenGrid> {
        let (n, m) = (g.shape(tokens.tokens)[0], g.shape(layout_tokens.tokens)[0]);
        if n != m {
            return Err(shape_err!("CTN: {n} feature tokens but {m} layout tokens"));
        }
        let axes: &[usize] = match self.stats {
            CtnStats::Joint => &[0, 1],
            CtnStats::PerToken => &[1],
        };
        let (mu, sigma) = g.joint_stats(tokens.tokens, axes)?;
        let centered = g.sub(tokens.tokens, mu)?;
        let normed = g.div(centered, sigma)?;

        let h = self.hidden.forward(g, store, layout_tokens.tokens)?;
        let h = g.gelu(h)?;
        let gamma = self.gamma.forward(g, store, h)?;
        let beta = self.beta.forward(g, store, h)?;
        let y = g.mul(gamma, normed)?;
        let y = g.add(y, beta)?;
        Ok(tokens.with_tokens(y))
    }
}

/// Learned residual shortcut: parameter-free per-channel normalization,
/// 1x1 projection to the target width, then `proj * (1 + gamma(M)) + beta(M)`.
#[derive(Debug, Clone, Copy)]
pub struct SpadeShortcut {
    pub shared: Conv2d,
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub proj: Conv2d,
    pub c_out: usize,
}

impl SpadeShortcut {
    pub fn new(store: &mut ParamStore, name: &str, num_labels: usize, c_in: usize, c_out: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            shared: Conv2d::same(store, &format!("{name}.shared"), num_labels, hidden, 3, true, rng),
            gamma: Conv2d::same(store, &format!("{name}.gamma"), hidden, c_out, 3, true, rng),
            beta: Conv2d::same(store, &format!("{name}.beta"), hidden, c_out, 3, true, rng),
            proj: Conv2d::same(store, &format!("{name}.proj"), c_in, c_out, 1, false, rng),
            c_out,
        }
    }

    /// Zeroes both modulation heads (weights and biases).
    pub fn zero_modulation(&self, store: &mut ParamStore) {
        for c in [self.gamma, self.beta] {
            store.value_mut(c.weight).data_mut().fill(0.0);
            store.value_mut(c.bias.expect("bias")).data_mut().fill(0.0);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SemanticLayout) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let [_, h, w] = shape[..] else {
            return Err(shape_err!("SPADE shortcut expects [C,H,W], got {:?}", shape));
        };
        let (mu, sigma) = g.joint_stats(x, &[1, 2])?;
        let centered = g.sub(x, mu)?;
        let normed = g.div(centered, sigma)?;
        let proj = self.proj.forward(g, store, normed)?;

        let m = g.constant(one_hot(&resample_labels(layout, h, w)?));
        let act = self.shared.forward(g, store, m)?;
        let act = g.relu(act)?;
        let gamma = self.gamma.forward(g, store, act)?;
        let beta = self.beta.forward(g, store, act)?;
        let scale = g.add_scalar(gamma, 1.0)?;
        let y = g.mul(proj, scale)?;
        g.add(y, beta)
    }
}

/// Per-channel spatial normalization of a plain tensor, matching the
/// shortcut's normalization step.
pub fn channel_normalize(x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let (mu, sigma) = g.joint_stats(v, &[1, 2])?;
    let c = g.sub(v, mu)?;
    let n = g.div(c, sigma)?;
    Ok(g.value(n).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::EPS_VAR;
    use crate::tensor::InitSpec;

    fn grid(g: &mut Graph, t: Tensor, gh: usize, gw: usize) -> TokenGrid {
        let tokens = g.constant(t);
        TokenGrid { tokens, grid_h: gh, grid_w: gw, patch: 1 }
    }

    fn ctn_fixture(stats: CtnStats) -> (ParamStore, Ctn, Rng) {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(3);
        let ctn = Ctn::new(&mut store, "ctn", 3, 4, stats, &mut rng);
        (store, ctn, rng)
    }

    #[test]
    fn identity_affine_gives_joint_normalization() {
        let (mut store, ctn, mut rng) = ctn_fixture(CtnStats::Joint);
        ctn.make_identity(&mut store);
        let x = Tensor::create(&[6, 4], InitSpec::Normal { mean: 3.0, std: 2.0 }, &mut rng).unwrap();
        let mut g = Graph::new();
        let ft = grid(&mut g, x.clone(), 2, 3);
        let mt = grid(&mut g, Tensor::create(&[6, 3], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap(), 2, 3);
        let out = ctn.forward(&mut g, &store, &ft, &mt).unwrap();
        let y = g.value(out.tokens).clone();
        let mean = y.mean();
        let var_x = {
            let m = x.mean();
            x.data().iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
        };
        let std = (y.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / y.len() as f64).sqrt();
        assert!(mean.abs() < 1e-12);
        assert!((std - (var_x / (var_x + EPS_VAR)).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn constant_tokens_normalize_to_zero() {
        let (mut store, ctn, mut rng) = ctn_fixture(CtnStats::Joint);
        ctn.make_identity(&mut store);
        let mut g = Graph::new();
        let ft = grid(&mut g, Tensor::full(&[4, 4], 7.5), 2, 2);
        let mt = grid(&mut g, Tensor::create(&[4, 3], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap(), 2, 2);
        let out = ctn.forward(&mut g, &store, &ft, &mt).unwrap();
        assert!(g.value(out.tokens).data().iter().all(|v| v.abs() <= 1e-2));
    }

    #[test]
    fn token_count_mismatch_is_an_error() {
        let (store, ctn, _) = ctn_fixture(CtnStats::Joint);
        let mut g = Graph::new();
        let ft = grid(&mut g, Tensor::zeros(&[4, 4]), 2, 2);
        let mt = grid(&mut g, Tensor::zeros(&[2, 3]), 1, 2);
        assert!(ctn.forward(&mut g, &store, &ft, &mt).is_err());
    }

    #[test]
    fn per_token_stats_normalize_rows() {
        let (mut store, ctn, mut rng) = ctn_fixture(CtnStats::PerToken);
        ctn.make_identity(&mut store);
        let mut g = Graph::new();
        let ft = grid(&mut g, Tensor::create(&[4, 4], InitSpec::Normal { mean: 1.0, std: 3.0 }, &mut rng).unwrap(), 2, 2);
        let mt = grid(&mut g, Tensor::zeros(&[4, 3]), 2, 2);
        let out = ctn.forward(&mut g, &store, &ft, &mt).unwrap();
        for row in g.value(out.tokens).data().chunks(4) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn shift_and_scale_invariance() {
        let (mut store, ctn, mut rng) = ctn_fixture(CtnStats::Joint);
        ctn.make_identity(&mut store);
        let x = Tensor::create(&[6, 4], InitSpec::Normal { mean: 0.0, std: 2.0 }, &mut rng).unwrap();
        let run = |t: Tensor| {
            let mut g = Graph::new();
            let ft = grid(&mut g, t, 2, 3);
            let mt = grid(&mut g, Tensor::zeros(&[6, 3]), 2, 3);
            let out = ctn.forward(&mut g, &store, &ft, &mt).unwrap();
            g.value(out.tokens).clone()
        };
        let base = run(x.clone());
        assert!(run(x.map(|v| v + 5.0)).max_abs_diff(&base) < 1e-6);
        // Rescaling only moves the variance epsilon's relative weight.
        assert!(run(x.map(|v| v * 3.0)).max_abs_diff(&base) < 1e-5);
    }

    #[test]
    fn tokenizer_constant_layout_and_shape() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(1);
        let tok = LayoutTokenizer::new(&mut store, "mt", 3, 2, 5, &mut rng);
        let m = SemanticLayout::constant(8, 8, 3, 2).unwrap();
        let mut g = Graph::new();
        let t = tok.forward(&mut g, &store, &m, 2, 2).unwrap();
        assert_eq!(g.shape(t.tokens), &[4, 5]);
        let v = g.value(t.tokens);
        for row in v.data().chunks(5) {
            assert_eq!(row, &v.data()[..5]);
        }
    }

    #[test]
    fn spade_without_modulation_is_plain_normalization() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let sp = SpadeShortcut::new(&mut store, "sp", 3, 2, 2, 4, &mut rng);
        sp.zero_modulation(&mut store);
        *store.value_mut(sp.proj.weight) = Tensor::new(vec![2, 2, 1, 1], vec![1., 0., 0., 1.]).unwrap();
        let x = Tensor::create(&[2, 4, 4], InitSpec::Normal { mean: 1.0, std: 2.0 }, &mut rng).unwrap();
        let m = SemanticLayout::new(4, 4, 3, (0..16).map(|i| (i % 3) as u32).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = sp.forward(&mut g, &store, xv, &m).unwrap();
        assert!(g.value(y).bit_eq(&channel_normalize(&x).unwrap()));
    }

    #[test]
    fn spade_output_shape() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(5);
        let sp = SpadeShortcut::new(&mut store, "sp", 2, 5, 3, 4, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(Tensor::create(&[5, 4, 6], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap());
        let m = SemanticLayout::constant(8, 12, 2, 1).unwrap();
        let y = sp.forward(&mut g, &store, xv, &m).unwrap();
        assert_eq!(g.shape(y), &[3, 4, 6]);
    }
}
