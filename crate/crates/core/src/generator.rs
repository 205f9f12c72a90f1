//! The two-branch layout-to-depth generator.
//!
//! A layout is encoded to a latent code, decoded to a coarse shared feature map,
//! and refined by a cascade of windowed-attention stages in a depth branch and
//! an RGB branch. The branches exchange information once, after the
//! penultimate stage, and end in `tanh` heads.

use crate::attention::{default_heads, wmsa, MsaParams};
use crate::autograd::{Graph, Var};
use crate::caf::Caf;
use crate::config::{GeneratorConfig, StageConfig};
use crate::error::{shape_err, Error, Result};
use crate::layers::{one_hot, pixel_shuffle, token_to_map, upsample_nearest, Conv2d, Linear, Mlp, PatchEmbed, SemanticLayout, TokenGrid};
use crate::normalization::{Ctn, LayoutTokenizer, SpadeShortcut};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Side of the encoder's last feature map.
pub const ENCODER_SIDE: usize = 4;

/// One attention sub-block: `x + Attn(CTN(x))` then `x + MLP(CTN(x))`.
#[derive(Debug, Clone, Copy)]
pub struct SwinBlock {
    pub norm_attn: Ctn,
    pub attn: MsaParams,
    pub norm_mlp: Ctn,
    pub mlp: Mlp,
    pub shifted: bool,
}

#[derive(Debug, Clone)]
pub struct StageParams {
    pub embed: PatchEmbed,
    pub layout: LayoutTokenizer,
    /// Plain and shifted blocks alternating, `2 * pair_count` in total.
    pub blocks: Vec<SwinBlock>,
    pub shortcut: SpadeShortcut,
    pub resolution: usize,
    pub patch: usize,
    pub c_out: usize,
}

impl StageParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        stage: &StageConfig,
        c_out: usize,
        num_labels: usize,
        cfg: &GeneratorConfig,
        rng: &mut Rng,
    ) -> Self {
        let e = stage.embedding;
        let layout_dim = e.min(64);
        let heads = default_heads(e);
        let blocks = (0..2 * stage.pair_count)
            .map(|b| {
                let bn = format!("{name}.block{b}");
                SwinBlock {
                    norm_attn: Ctn::new(store, &format!("{bn}.ctn_attn"), layout_dim, e, cfg.ctn_stats, rng),
                    attn: MsaParams::new(store, &format!("{bn}.msa"), e, heads, stage.window_size, cfg.relative_position_bias, rng),
                    norm_mlp: Ctn::new(store, &format!("{bn}.ctn_mlp"), layout_dim, e, cfg.ctn_stats, rng),
                    mlp: Mlp::new(store, &format!("{bn}.mlp"), e, rng),
                    shifted: b % 2 == 1,
                }
            })
            .collect();
        Self {
            embed: PatchEmbed::new(store, &format!("{name}.embed"), stage.channels, stage.patch_size, e, rng),
            layout: LayoutTokenizer::new(store, &format!("{name}.layout"), num_labels, stage.patch_size, layout_dim, rng),
            blocks,
            shortcut: SpadeShortcut::new(
                store,
                &format!("{name}.shortcut"),
                num_labels,
                stage.channels,
                c_out,
                GeneratorConfig::spade_hidden(c_out),
                rng,
            ),
            resolution: stage.resolution,
            patch: stage.patch_size,
            c_out,
        }
    }

    /// `F_hat + shortcut(F)` at the stage resolution (no upsampling).
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, layout: &SemanticLayout, residual: bool) -> Result<Var> {
        let shape = g.shape(x);
        if shape.len() != 3 || shape[1] != self.resolution || shape[2] != self.resolution || shape[0] != self.embed.channels {
            return Err(shape_err!(
                "stage expects [{}, {r}, {r}], got {:?}",
                self.embed.channels,
                shape,
                r = self.resolution
            ));
        }
        let mut t = self.embed.forward(g, store, x)?;
        let m = self.layout.forward(g, store, layout, t.grid_h, t.grid_w)?;
        for b in &self.blocks {
            let n = b.norm_attn.forward(g, store, &t, &m)?;
            let a = wmsa(g, store, &n, b.shifted, &b.attn)?;
            t = add_tokens(g, &t, &a, residual)?;
            let n = b.norm_mlp.forward(g, store, &t, &m)?;
            let f = b.mlp.forward(g, store, &n)?;
            t = add_tokens(g, &t, &f, residual)?;
        }
        let map = token_to_map(g, &t)?;
        let f_hat = pixel_shuffle(g, map, self.patch)?;
        let short = self.shortcut.forward(g, store, x, layout)?;
        g.add(f_hat, short)
    }

    /// Zeroes the token path (patch embedding, attention, MLPs, CTN heads) so
    /// the stage reduces to its shortcut.
    pub fn isolate_shortcut(&self, store: &mut ParamStore) {
        zero_linear(store, &self.embed.proj);
        for b in &self.blocks {
            b.norm_attn.zero_heads(store);
            b.norm_mlp.zero_heads(store);
            b.attn.zero(store);
            zero_linear(store, &b.mlp.fc1);
            zero_linear(store, &b.mlp.fc2);
        }
    }
}

/// Treats `t` as `[outer, L, inner]` around `axis` (the label axis, possibly
/// fused with trailing dims) and moves slice `l` to `perm[l]`.
fn permute_channel_axis(t: &mut Tensor, axis: usize, perm: &[usize]) {
    let l = perm.len();
    let outer: usize = t.shape()[..axis].iter().product();
    let inner = t.len() / (outer * l);
    let old = t.data().to_vec();
    let data = t.data_mut();
    for o in 0..outer {
        for (c, &p) in perm.iter().enumerate() {
            let src = (o * l + c) * inner;
            let dst = (o * l + p) * inner;
            data[dst..dst + inner].copy_from_slice(&old[src..src + inner]);
        }
    }
}

fn add_tokens(g: &mut Graph, x: &TokenGrid, y: &TokenGrid, residual: bool) -> Result<TokenGrid> {
    if residual {
        let s = g.add(x.tokens, y.tokens)?;
        Ok(x.with_tokens(s))
    } else {
        Ok(*y)
    }
}

fn zero_linear(store: &mut ParamStore, l: &Linear) {
    store.value_mut(l.weight).data_mut().fill(0.0);
    if let Some(b) = l.bias {
        store.value_mut(b).data_mut().fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub config: GeneratorConfig,
    /// Stride-2 3x3 convolutions from the output resolution down to 4x4.
    pub encoder: Vec<Conv2d>,
    pub latent_in: Linear,
    pub latent_out: Linear,
    pub stem: Conv2d,
    pub depth: Vec<StageParams>,
    pub rgb: Vec<StageParams>,
    pub caf: Option<Caf>,
    pub depth_head: Conv2d,
    pub rgb_head: Conv2d,
}

/// Generator outputs, both in `[-1, 1]`.
pub struct GeneratorOutput {
    /// `[1, H, W]`
    pub depth: Var,
    /// `[3, H, W]`
    pub rgb: Var,
}

impl Generator {
    /// Registers every parameter under `g.` in `store`.
    pub fn new(config: GeneratorConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let l = config.num_labels;
        let enc_c = config.encoder_channels();
        let n_down = (config.output_resolution / ENCODER_SIDE).max(1).trailing_zeros() as usize;
        let encoder = (0..n_down)
            .map(|i| Conv2d::new(store, &format!("g.enc{i}"), if i == 0 { l } else { enc_c }, enc_c, 3, 2, 1, true, rng))
            .collect::<Vec<_>>();
        let enc_out = if n_down == 0 { l } else { enc_c };
        let side = config.output_resolution.min(ENCODER_SIDE);
        let latent_in = Linear::new(store, "g.latent_in", enc_out * side * side, config.z_dim, true, rng);
        let s0 = config.stages[0].resolution;
        let c0 = config.base_channels();
        let z_in = if config.latent_noise { 2 * config.z_dim } else { config.z_dim };
        let latent_out = Linear::new(store, "g.latent_out", z_in, c0 * s0 * s0, true, rng);
        let stem = Conv2d::same(store, "g.stem", c0, c0, 3, true, rng);

        let branch = |tag: &str, store: &mut ParamStore, rng: &mut Rng| -> Vec<StageParams> {
            config
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| StageParams::new(store, &format!("g.{tag}.s{i}"), s, config.stage_out_channels(i), l, &config, rng))
                .collect()
        };
        let depth = branch("depth", store, rng);
        let rgb = branch("rgb", store, rng);
        let caf = config.fusion_stage().map(|i| {
            let c = config.stage_out_channels(i);
            Caf::new(store, "g.caf", l, c, 2 * config.stages[i].resolution, config.caf_value_source, rng)
        });
        let c_last = config.stage_out_channels(config.stages.len() - 1);
        let depth_head = Conv2d::same(store, "g.head_depth", c_last, 1, 1, true, rng);
        let rgb_head = Conv2d::same(store, "g.head_rgb", c_last, 3, 1, true, rng);
        Ok(Self { config, encoder, latent_in, latent_out, stem, depth, rgb, caf, depth_head, rgb_head })
    }

    fn check_layout(&self, layout: &SemanticLayout) -> Result<()> {
        let r = self.config.output_resolution;
        if layout.height() != r || layout.width() != r {
            return Err(shape_err!("layout is {}x{}, generator expects {r}x{r}", layout.height(), layout.width()));
        }
        if layout.num_labels() != self.config.num_labels {
            return Err(Error::Invalid(format!(
                "layout has {} labels, generator expects {}",
                layout.num_labels(),
                self.config.num_labels
            )));
        }
        Ok(())
    }

    /// Latent code `z` of shape `[1, z_dim]`.
    pub fn encode_latent(&self, g: &mut Graph, store: &ParamStore, layout: &SemanticLayout) -> Result<Var> {
        self.check_layout(layout)?;
        let mut x = g.constant(one_hot(layout));
        for conv in &self.encoder {
            x = conv.forward(g, store, x)?;
            x = g.relu(x)?;
        }
        let n: usize = g.shape(x).iter().product();
        let flat = g.reshape(x, &[1, n])?;
        self.latent_in.forward(g, store, flat)
    }

    /// Shared coarse features `F_0`, `[C_0, s_0, s_0]`.
    pub fn encode_layout(&self, g: &mut Graph, store: &ParamStore, layout: &SemanticLayout, noise: Option<&Tensor>) -> Result<Var> {
        let z = self.encode_latent(g, store, layout)?;
        let mut h = g.relu(z)?;
        if self.config.latent_noise {
            let zd = self.config.z_dim;
            let n = match noise {
                Some(t) if t.len() == zd => t.reshape(&[1, zd])?,
                Some(t) => return Err(shape_err!("noise has {} entries, expected {zd}", t.len())),
                None => Tensor::zeros(&[1, zd]),
            };
            let n = g.constant(n);
            h = g.concat(&[h, n], 1)?;
        }
        let y = self.latent_out.forward(g, store, h)?;
        let s0 = self.config.stages[0].resolution;
        let y = g.reshape(y, &[self.config.base_channels(), s0, s0])?;
        self.stem.forward(g, store, y)
    }

    /// Runs both branches without latent noise.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, layout: &SemanticLayout) -> Result<GeneratorOutput> {
        self.forward_with_noise(g, store, layout, None)
    }

    pub fn forward_with_noise(&self, g: &mut Graph, store: &ParamStore, layout: &SemanticLayout, noise: Option<&Tensor>) -> Result<GeneratorOutput> {
        let f0 = self.encode_layout(g, store, layout, noise)?;
        let residual = !self.config.drop_block_residuals;
        let last = self.config.stages.len() - 1;
        let fusion = self.config.fusion_stage();
        let (mut d, mut r) = (f0, f0);
        for i in 0..=last {
            d = self.depth[i].forward(g, store, d, layout, residual)?;
            r = self.rgb[i].forward(g, store, r, layout, residual)?;
            if i < last {
                d = upsample_nearest(g, d)?;
                r = upsample_nearest(g, r)?;
            }
            if fusion == Some(i) {
                let caf = self.caf.as_ref().expect("fusion module present when enabled");
                let out = caf.forward(g, store, d, r, layout)?;
                d = out.depth;
                r = out.rgb;
            }
        }
        let d = self.depth_head.forward(g, store, d)?;
        let r = self.rgb_head.forward(g, store, r)?;
        Ok(GeneratorOutput { depth: g.tanh(d)?, rgb: g.tanh(r)? })
    }

    /// Plain-tensor convenience wrapper around [`Generator::forward`].
    pub fn generate(&self, store: &ParamStore, layout: &SemanticLayout) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, layout)?;
        Ok((g.value(out.depth).clone(), g.value(out.rgb).clone()))
    }

    /// Reorders every weight that reads one-hot label channels so that the
    /// generator applied to `layout.permuted(perm)` reproduces the original
    /// outputs. Channel `l` moves to channel `perm[l]`.
    pub fn permute_labels(&self, store: &mut ParamStore, perm: &[usize]) -> Result<()> {
        let l = self.config.num_labels;
        let mut seen = vec![false; l];
        if perm.len() != l || perm.iter().any(|&p| p >= l || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Invalid(format!("not a permutation of {l} labels: {perm:?}")));
        }
        if let Some(first) = self.encoder.first() {
            permute_channel_axis(store.value_mut(first.weight), 1, perm);
        } else {
            permute_channel_axis(store.value_mut(self.latent_in.weight), 0, perm);
        }
        for s in self.depth.iter().chain(&self.rgb) {
            permute_channel_axis(store.value_mut(s.layout.embed.proj.weight), 0, perm);
            permute_channel_axis(store.value_mut(s.shortcut.shared.weight), 1, perm);
        }
        if let Some(c) = &self.caf {
            permute_channel_axis(store.value_mut(c.layout_embed.weight), 1, perm);
        }
        Ok(())
    }

    /// Zeroes the token path of every stage and the fusion attention, leaving
    /// the shortcut/upsample path (and the fusion gate's `1 - sigmoid(alpha)` scaling).
    pub fn isolate_shortcuts(&self, store: &mut ParamStore) {
        for s in self.depth.iter().chain(&self.rgb) {
            s.isolate_shortcut(store);
        }
        if let Some(c) = &self.caf {
            c.zero_attention(store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout(side: usize, labels: usize, seed: u64) -> SemanticLayout {
        let mut rng = Rng::new(seed);
        SemanticLayout::new(side, side, labels, (0..side * side).map(|_| rng.below(labels) as u32).collect()).unwrap()
    }

    fn tiny() -> (Generator, ParamStore) {
        let cfg = GeneratorConfig::tiny(16, 8, 8, 3).unwrap();
        let mut store = ParamStore::new();
        let gen = Generator::new(cfg, &mut store, &mut Rng::new(3)).unwrap();
        (gen, store)
    }

    #[test]
    fn shapes_and_range() {
        let (gen, store) = tiny();
        let (d, r) = gen.generate(&store, &layout(16, 3, 1)).unwrap();
        assert_eq!(d.shape(), &[1, 16, 16]);
        assert_eq!(r.shape(), &[3, 16, 16]);
        assert!(d.data().iter().chain(r.data()).all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn stem_shape_and_sensitivity() {
        let (gen, store) = tiny();
        let a = layout(16, 3, 1);
        let mut labels = a.labels().to_vec();
        for v in labels.iter_mut().take(40) {
            *v = (*v + 1) % 3;
        }
        let b = SemanticLayout::new(16, 16, 3, labels).unwrap();
        let mut g = Graph::new();
        let fa = gen.encode_layout(&mut g, &store, &a, None).unwrap();
        let fb = gen.encode_layout(&mut g, &store, &b, None).unwrap();
        assert_eq!(g.shape(fa), &[8, 8, 8]);
        assert!(g.value(fa).max_abs_diff(g.value(fb)) > 0.0);
    }

    #[test]
    fn wrong_layout_is_rejected() {
        let (gen, store) = tiny();
        assert!(gen.generate(&store, &layout(8, 3, 1)).is_err());
        assert!(gen.generate(&store, &layout(16, 4, 1)).is_err());
    }

    #[test]
    fn parameter_names_are_unique_and_grouped() {
        let (gen, store) = tiny();
        let mut names: Vec<&str> = store.params().iter().map(|p| p.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(names.iter().all(|s| s.starts_with("g.")));
        assert!(gen.caf.is_some());
        assert_eq!(gen.depth[0].blocks.len(), 2);
    }

    #[test]
    fn literal_mode_runs() {
        let mut cfg = GeneratorConfig::tiny(16, 8, 8, 3).unwrap();
        cfg.drop_block_residuals = true;
        cfg.latent_noise = true;
        let mut store = ParamStore::new();
        let gen = Generator::new(cfg, &mut store, &mut Rng::new(3)).unwrap();
        let mut g = Graph::new();
        let noise = Tensor::full(&[8], 0.5);
        let out = gen.forward_with_noise(&mut g, &store, &layout(16, 3, 2), Some(&noise)).unwrap();
        assert!(g.value(out.depth).all_finite());
        assert!(gen.forward_with_noise(&mut g, &store, &layout(16, 3, 2), Some(&Tensor::zeros(&[3]))).is_err());
    }
}
