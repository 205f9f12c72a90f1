//! Generator schedules and run configuration, serialized as JSON.

use serde::{Deserialize, Serialize};

use crate::attention::ValueSource;
use crate::error::{Error, Result};
use crate::normalization::CtnStats;

/// One coarse-to-fine generator stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    /// Side of the (square) input feature map.
    pub resolution: usize,
    /// Input channels.
    pub channels: usize,
    /// Token width; equals output channels times `patch_size^2` so that pixel
    /// shuffle restores the stage resolution.
    pub embedding: usize,
    pub patch_size: usize,
    pub window_size: usize,
    /// Number of plain/shifted attention block pairs.
    pub pair_count: usize,
}

impl StageConfig {
    pub fn grid(&self) -> usize {
        self.resolution / self.patch_size
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn is_true(b: &bool) -> bool {
    *b
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub output_resolution: usize,
    /// Coarse to fine.
    pub stages: Vec<StageConfig>,
    pub z_dim: usize,
    pub num_labels: usize,
    pub fuse_enabled: bool,
    pub ctn_stats: CtnStats,
    pub caf_value_source: ValueSource,
    /// Drops the residual adds around attention and MLP blocks.
    #[serde(default, skip_serializing_if = "is_false")]
    pub drop_block_residuals: bool,
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub relative_position_bias: bool,
    /// Concatenates seeded Gaussian noise to the latent code.
    #[serde(default, skip_serializing_if = "is_false")]
    pub latent_noise: bool,
}

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];

/// Label count of the default configurations (40 object classes plus "unlabeled").
pub const DEFAULT_NUM_LABELS: usize = 41;

/// The desk-scale default schedule for a square output of `resolution`.
///
/// Stages run from 8x8 up to the output, doubling. Channels start at 256 and
/// halve down to a floor of 64. Patch size is `stage / 32` for outputs up to 128
/// and `stage / 64` for 256, never below 1. Windows are 4 at 8x8 and 8 beyond,
/// capped by the token grid. Stages above 32x32 use two block pairs.
pub fn default_config(resolution: usize) -> Result<GeneratorConfig> {
    if !SUPPORTED_RESOLUTIONS.contains(&resolution) {
        return Err(Error::Config(format!("unsupported resolution {resolution}; expected one of {SUPPORTED_RESOLUTIONS:?}")));
    }
    let divisor = if resolution >= 256 { 64 } else { 32 };
    let sides: Vec<usize> = std::iter::successors(Some(8usize), |&s| (s < resolution).then_some(s * 2)).collect();
    let channels: Vec<usize> = (0..sides.len()).map(|i| (256usize >> i).max(64)).collect();
    let stages = sides
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let patch = (s / divisor).max(1);
            let grid = s / patch;
            let c_out = *channels.get(i + 1).unwrap_or(&channels[i]);
            StageConfig {
                resolution: s,
                channels: channels[i],
                embedding: c_out * patch * patch,
                patch_size: patch,
                window_size: grid.min(if s <= 8 { 4 } else { 8 }),
                pair_count: if s <= 32 { 1 } else { 2 },
            }
        })
        .collect();
    let cfg = GeneratorConfig {
        output_resolution: resolution,
        stages,
        z_dim: 256,
        num_labels: DEFAULT_NUM_LABELS,
        fuse_enabled: true,
        ctn_stats: CtnStats::Joint,
        caf_value_source: ValueSource::SelfBranch,
        drop_block_residuals: false,
        relative_position_bias: true,
        latent_noise: false,
    };
    cfg.validate()?;
    Ok(cfg)
}

impl GeneratorConfig {
    /// A small configuration: stages from `base` to `resolution`, constant width.
    pub fn tiny(resolution: usize, base: usize, channels: usize, num_labels: usize) -> Result<Self> {
        let sides: Vec<usize> = std::iter::successors(Some(base), |&s| (s < resolution).then_some(s * 2)).collect();
        let stages = sides
            .iter()
            .map(|&s| StageConfig {
                resolution: s,
                channels,
                embedding: channels,
                patch_size: 1,
                window_size: s.min(if s <= 4 { 2 } else { 4 }),
                pair_count: 1,
            })
            .collect();
        let cfg = Self {
            output_resolution: resolution,
            stages,
            z_dim: channels,
            num_labels,
            fuse_enabled: true,
            ctn_stats: CtnStats::Joint,
            caf_value_source: ValueSource::SelfBranch,
            drop_block_residuals: false,
            relative_position_bias: true,
            latent_noise: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn base_channels(&self) -> usize {
        self.stages[0].channels
    }

    /// Output channels of stage `i` (the next stage's input width).
    pub fn stage_out_channels(&self, i: usize) -> usize {
        self.stages.get(i + 1).unwrap_or(&self.stages[i]).channels
    }

    /// Encoder convolution width.
    pub fn encoder_channels(&self) -> usize {
        self.base_channels().min(64)
    }

    /// Hidden width of a SPADE shortcut producing `c_out` channels.
    pub fn spade_hidden(c_out: usize) -> usize {
        c_out.min(128)
    }

    /// Patch size of the fusion module at feature side `side`.
    pub fn caf_patch(side: usize) -> usize {
        (side / 8).max(1)
    }

    /// Index of the stage after which the branches are fused.
    pub fn fusion_stage(&self) -> Option<usize> {
        (self.fuse_enabled && self.stages.len() >= 2).then(|| self.stages.len() - 2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let r = self.output_resolution;
        if r < 4 || !r.is_power_of_two() {
            return bad(format!("output_resolution {r} must be a power of two >= 4"));
        }
        if self.num_labels == 0 {
            return bad("num_labels must be positive".into());
        }
        if self.z_dim == 0 {
            return bad("z_dim must be positive".into());
        }
        let Some(last) = self.stages.last() else {
            return bad("at least one stage is required".into());
        };
        if last.resolution != r {
            return bad(format!("last stage resolution {} differs from output {r}", last.resolution));
        }
        if self.fuse_enabled && self.stages.len() < 2 {
            return bad("fusion needs at least two stages".into());
        }
        for (i, s) in self.stages.iter().enumerate() {
            let name = format!("stage {i}");
            if s.resolution == 0 || s.channels == 0 || s.patch_size == 0 {
                return bad(format!("{name}: resolution, channels and patch_size must be positive"));
            }
            if i > 0 && s.resolution != 2 * self.stages[i - 1].resolution {
                return bad(format!("{name}: resolution {} is not double the previous stage", s.resolution));
            }
            if s.pair_count == 0 {
                return bad(format!("{name}: pair_count must be >= 1"));
            }
            if s.window_size < 2 {
                return bad(format!("{name}: window_size must be >= 2 for shifted windows"));
            }
            if s.resolution % (s.patch_size * s.window_size) != 0 {
                return bad(format!(
                    "{name}: resolution {} not divisible by patch {} x window {}",
                    s.resolution, s.patch_size, s.window_size
                ));
            }
            let c_out = self.stage_out_channels(i);
            if s.embedding != c_out * s.patch_size * s.patch_size {
                return bad(format!(
                    "{name}: embedding {} must equal output channels {c_out} x patch {}^2",
                    s.embedding, s.patch_size
                ));
            }
        }
        if r % Self::caf_patch(r) != 0 {
            return bad(format!("resolution {r} not divisible by fusion patch"));
        }
        Ok(())
    }
}

/// Generator loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub w_ssim: f64,
    pub w_fm: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_ssim: 20.0, w_fm: 10.0, w_adv: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr_g: 1e-4, lr_d: 4e-4, beta1: 0.0, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Width of the first layer; doubles per layer.
    pub base_channels: usize,
    pub scales: usize,
    pub layers: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 16, scales: 2, layers: 4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

fn default_batch() -> usize {
    2
}

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn new(generator: GeneratorConfig) -> Self {
        Self {
            generator,
            loss_weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            seed: 0,
            batch_size: default_batch(),
            paths: PathsConfig::default(),
        }
    }

    /// Parses and validates; any schema or invariant violation is a `Config` error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        let w = &self.loss_weights;
        if [w.w_ssim, w.w_fm, w.w_adv].iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Config("loss weights must be finite and >= 0".into()));
        }
        let o = &self.optimizer;
        if !(o.lr_g > 0.0 && o.lr_d > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config("optimizer needs lr > 0, betas in [0, 1), eps > 0".into()));
        }
        let d = &self.discriminator;
        if d.base_channels == 0 || d.scales == 0 || d.layers == 0 {
            return Err(Error::Config("discriminator sizes must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}
