//! Fusion of the depth and RGB branches: semantic alignment with an embedded
//! layout, global cross attention on patch tokens, and a gated blend back into
//! the input maps.

use crate::attention::{cross_attention, CrossAttnParams, ValueSource};
use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::layers::{one_hot, pixel_shuffle, resample_labels, token_to_map, Conv2d, PatchEmbed, SemanticLayout};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::InitSpec;

/// Initial gate logit: `sigmoid(ALPHA_INIT) = 0.1`.
pub const ALPHA_INIT: f64 = -2.197_224_577_336_219_6;

#[derive(Debug, Clone, Copy)]
pub struct Caf {
    /// 1x1, labels to `channels`, no bias.
    pub layout_embed: Conv2d,
    pub embed_depth: PatchEmbed,
    pub embed_rgb: PatchEmbed,
    pub attn: CrossAttnParams,
    /// Unconstrained scalar gate logits `[1]`.
    pub alpha_depth: ParamId,
    pub alpha_rgb: ParamId,
    pub patch: usize,
    pub channels: usize,
}

pub struct CafOutput {
    pub depth: Var,
    pub rgb: Var,
    /// Attention outputs mapped back to `[C, H, W]`, before blending.
    pub recon_depth: Var,
    pub recon_rgb: Var,
}

impl Caf {
    /// Patch size is `max(1, side / 8)`, so at most 64 tokens attend globally.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        num_labels: usize,
        channels: usize,
        side: usize,
        value_source: ValueSource,
        rng: &mut Rng,
    ) -> Self {
        let patch = (side / 8).max(1);
        let embed = channels * patch * patch;
        Self {
            layout_embed: Conv2d::same(store, &format!("{name}.layout"), num_labels, channels, 1, false, rng),
            embed_depth: PatchEmbed::new(store, &format!("{name}.embed_depth"), channels, patch, embed, rng),
            embed_rgb: PatchEmbed::new(store, &format!("{name}.embed_rgb"), channels, patch, embed, rng),
            attn: CrossAttnParams::new(store, &format!("{name}.attn"), embed, value_source, rng),
            alpha_depth: store.init(format!("{name}.alpha_depth"), &[1], InitSpec::Constant(ALPHA_INIT), rng),
            alpha_rgb: store.init(format!("{name}.alpha_rgb"), &[1], InitSpec::Constant(ALPHA_INIT), rng),
            patch,
            channels,
        }
    }

    /// Branch roles exchanged; the layout embedding is shared.
    pub fn mirrored(&self) -> Self {
        Self {
            embed_depth: self.embed_rgb,
            embed_rgb: self.embed_depth,
            attn: self.attn.mirrored(),
            alpha_depth: self.alpha_rgb,
            alpha_rgb: self.alpha_depth,
            ..*self
        }
    }

    /// Zeroes the patch embeddings and all attention projections, so the
    /// reconstructed maps are exactly zero.
    pub fn zero_attention(&self, store: &mut ParamStore) {
        for e in [self.embed_depth, self.embed_rgb] {
            store.value_mut(e.proj.weight).data_mut().fill(0.0);
            if let Some(b) = e.proj.bias {
                store.value_mut(b).data_mut().fill(0.0);
            }
        }
        self.attn.depth.zero(store);
        self.attn.rgb.zero(store);
    }

    /// Embedded layout `[C, H, W]` at the feature resolution.
    pub fn embed_layout(&self, g: &mut Graph, store: &ParamStore, layout: &SemanticLayout, h: usize, w: usize) -> Result<Var> {
        let m = g.constant(one_hot(&resample_labels(layout, h, w)?));
        self.layout_embed.forward(g, store, m)
    }

    /// Alignment, cross attention and reconstruction, without the blend.
    pub fn attend(&self, g: &mut Graph, store: &ParamStore, depth: Var, rgb: Var, layout: &SemanticLayout) -> Result<(Var, Var)> {
        let (sd, sr) = (g.shape(depth).to_vec(), g.shape(rgb).to_vec());
        if sd != sr {
            return Err(shape_err!("fusion inputs differ: {:?} vs {:?}", sd, sr));
        }
        let [c, h, w] = sd[..] else {
            return Err(shape_err!("fusion expects [C,H,W], got {:?}", sd));
        };
        if c != self.channels {
            return Err(shape_err!("fusion built for {} channels, got {c}", self.channels));
        }
        let m = self.embed_layout(g, store, layout, h, w)?;
        let a_d = g.mul(depth, m)?;
        let a_r = g.mul(rgb, m)?;
        let t_d = self.embed_depth.forward(g, store, a_d)?;
        let t_r = self.embed_rgb.forward(g, store, a_r)?;
        let fused = cross_attention(g, store, &t_d, &t_r, &self.attn)?;
        let back = |g: &mut Graph, t| -> Result<Var> {
            let map = token_to_map(g, t)?;
            pixel_shuffle(g, map, self.patch)
        };
        Ok((back(g, &fused.depth)?, back(g, &fused.rgb)?))
    }

    /// `F' = (1 - sigmoid(alpha)) F + sigmoid(alpha) recon` for each branch.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, depth: Var, rgb: Var, layout: &SemanticLayout) -> Result<CafOutput> {
        let gd = g.param(store, self.alpha_depth);
        let gd = g.sigmoid(gd)?;
        let gr = g.param(store, self.alpha_rgb);
        let gr = g.sigmoid(gr)?;
        self.blend(g, store, depth, rgb, layout, gd, gr)
    }

    /// As [`Caf::forward`] with fixed gate values in place of the learned ones.
    pub fn forward_gated(&self, g: &mut Graph, store: &ParamStore, depth: Var, rgb: Var, layout: &SemanticLayout, gates: [f64; 2]) -> Result<CafOutput> {
        let gd = g.scalar(gates[0]);
        let gr = g.scalar(gates[1]);
        self.blend(g, store, depth, rgb, layout, gd, gr)
    }

    #[allow(clippy::too_many_arguments)]
    fn blend(&self, g: &mut Graph, store: &ParamStore, depth: Var, rgb: Var, layout: &SemanticLayout, gd: Var, gr: Var) -> Result<CafOutput> {
        let (recon_depth, recon_rgb) = self.attend(g, store, depth, rgb, layout)?;
        let mix = |g: &mut Graph, x: Var, r: Var, s: Var| -> Result<Var> {
            let keep = g.neg(s)?;
            let keep = g.add_scalar(keep, 1.0)?;
            let a = g.mul(keep, x)?;
            let b = g.mul(s, r)?;
            g.add(a, b)
        };
        Ok(CafOutput {
            depth: mix(g, depth, recon_depth, gd)?,
            rgb: mix(g, rgb, recon_rgb, gr)?,
            recon_depth,
            recon_rgb,
        })
    }
}
