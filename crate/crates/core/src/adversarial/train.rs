//! Alternating discriminator/generator updates on a small synthetic dataset.

use std::fmt::Write as _;

use crate::autograd::{Gradients, Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::layers::SemanticLayout;
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::discriminator::{MultiScaleDiscriminator, SnMode};
use super::losses::{feature_matching_loss, features, hinge_d_loss, hinge_g_loss, logits, ssim_loss};
use super::optim::Adam;

pub const MAX_SMOKE_RESOLUTION: usize = 32;
pub const MAX_SMOKE_STAGES: usize = 2;
pub const MAX_SMOKE_STEPS: usize = 500;

/// One training example; images in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Sample {
    pub layout: SemanticLayout,
    /// `[1, H, W]`
    pub depth: Tensor,
    /// `[3, H, W]`
    pub rgb: Tensor,
}

/// Box-shaped rooms: label 0 is wall, label 1 floor below a random horizon,
/// higher labels are axis-aligned objects at constant depth. Depth recedes
/// linearly along the floor; colours are per-label tints shaded by depth.
pub fn synthetic_dataset(count: usize, side: usize, num_labels: usize, rng: &mut Rng) -> Result<Vec<Sample>> {
    if num_labels < 2 || side < 4 {
        return Err(Error::Invalid(format!("synthetic scenes need >= 2 labels and side >= 4, got {num_labels} and {side}")));
    }
    let tints: Vec<[f64; 3]> = (0..num_labels).map(|_| [rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0)]).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let horizon = side / 2 + rng.below(side / 4 + 1);
        let wall = rng.uniform(0.7, 0.95);
        let mut labels = vec![0u32; side * side];
        let mut depth = vec![wall; side * side];
        for y in horizon..side {
            let t = (y + 1 - horizon) as f64 / (side - horizon) as f64;
            for x in 0..side {
                labels[y * side + x] = 1;
                depth[y * side + x] = wall * (1.0 - 0.7 * t);
            }
        }
        if num_labels > 2 {
            for _ in 0..1 + rng.below(3) {
                let label = 2 + rng.below(num_labels - 2) as u32;
                let (w, h) = (2 + rng.below(side / 2), 2 + rng.below(side / 2));
                let (x0, y0) = (rng.below(side - w + 1), rng.below(side - h + 1));
                let d = rng.uniform(0.15, 0.6);
                for y in y0..y0 + h {
                    for x in x0..x0 + w {
                        labels[y * side + x] = label;
                        depth[y * side + x] = d;
                    }
                }
            }
        }
        let mut rgb = vec![0.0; 3 * side * side];
        for i in 0..side * side {
            let shade = 1.0 - 0.5 * depth[i];
            for c in 0..3 {
                rgb[c * side * side + i] = 2.0 * tints[labels[i] as usize][c] * shade - 1.0;
            }
        }
        out.push(Sample {
            layout: SemanticLayout::new(side, side, num_labels, labels)?,
            depth: Tensor::new(vec![1, side, side], depth.iter().map(|d| 2.0 * d - 1.0).collect())?,
            rgb: Tensor::new(vec![3, side, side], rgb)?,
        });
    }
    Ok(out)
}

/// Batch means of the losses of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub step: usize,
    pub loss_d_depth: f64,
    pub loss_d_rgb: f64,
    /// Unweighted `hinge_g(depth) + hinge_g(rgb)`.
    pub loss_g_adv: f64,
    pub loss_fm: f64,
    /// `1 - ssim` of the depth branch.
    pub loss_ssim: f64,
}

impl StepLosses {
    fn values(&self) -> [f64; 5] {
        [self.loss_d_depth, self.loss_d_rgb, self.loss_g_adv, self.loss_fm, self.loss_ssim]
    }

    pub fn all_finite(&self) -> bool {
        self.values().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepLosses>,
    pub g_delta_norm: f64,
    pub d_depth_delta_norm: f64,
    pub d_rgb_delta_norm: f64,
}

impl TrainReport {
    pub const HEADER: &'static str = "step,loss_d_depth,loss_d_rgb,loss_g_adv,loss_fm,loss_ssim";

    /// Per-step CSV; floats use the shortest round-trip representation.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.steps {
            let _ = write!(s, "{}", r.step);
            for v in r.values() {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }
}

/// Generator, both discriminators and their optimizers.
pub struct Trainer {
    pub config: RunConfig,
    pub generator: Generator,
    pub g_store: ParamStore,
    pub disc_depth: MultiScaleDiscriminator,
    pub dd_store: ParamStore,
    pub disc_rgb: MultiScaleDiscriminator,
    pub dr_store: ParamStore,
    adam_g: Adam,
    adam_dd: Adam,
    adam_dr: Adam,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut g_store = ParamStore::new();
        let generator = Generator::new(config.generator.clone(), &mut g_store, &mut rng)?;
        let d = config.discriminator;
        let l = config.generator.num_labels;
        let mut dd_store = ParamStore::new();
        let disc_depth = MultiScaleDiscriminator::new(&mut dd_store, "d_depth", l, 1, d.base_channels, d.scales, d.layers, &mut rng);
        let mut dr_store = ParamStore::new();
        let disc_rgb = MultiScaleDiscriminator::new(&mut dr_store, "d_rgb", l, 3, d.base_channels, d.scales, d.layers, &mut rng);
        let o = config.optimizer;
        Ok(Self {
            adam_g: Adam::generator(&g_store, &o),
            adam_dd: Adam::discriminator(&dd_store, &o),
            adam_dr: Adam::discriminator(&dr_store, &o),
            config,
            generator,
            g_store,
            disc_depth,
            dd_store,
            disc_rgb,
            dr_store,
        })
    }

    fn d_loss(disc: &mut MultiScaleDiscriminator, store: &ParamStore, real: &Tensor, fake: &Tensor, layout: &SemanticLayout, mode: SnMode) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let r = g.constant(real.clone());
        let f = g.constant(fake.clone());
        let ro = disc.forward(&mut g, store, r, layout, mode)?;
        let fo = disc.forward(&mut g, store, f, layout, SnMode::Eval)?;
        let loss = hinge_d_loss(&mut g, &logits(&ro), &logits(&fo))?;
        Ok((g.value(loss).item(), g.backward(loss)?))
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, batch: &[&Sample], step: usize) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let inv_b = 1.0 / batch.len() as f64;
        let mut graphs: Vec<(Graph, Var, Var)> = Vec::with_capacity(batch.len());
        for s in batch {
            let mut g = Graph::new();
            let out = self.generator.forward(&mut g, &self.g_store, &s.layout)?;
            graphs.push((g, out.depth, out.rgb));
        }

        self.dd_store.zero_grads();
        self.dr_store.zero_grads();
        let (mut ld, mut lr) = (0.0, 0.0);
        for (i, (s, (g, d, r))) in batch.iter().zip(&graphs).enumerate() {
            let mode = if i == 0 { SnMode::Train } else { SnMode::Eval };
            let (l, grads) = Self::d_loss(&mut self.disc_depth, &self.dd_store, &s.depth, g.value(*d), &s.layout, mode)?;
            grads.accumulate_scaled(&mut self.dd_store, inv_b);
            ld += l * inv_b;
            let (l, grads) = Self::d_loss(&mut self.disc_rgb, &self.dr_store, &s.rgb, g.value(*r), &s.layout, mode)?;
            grads.accumulate_scaled(&mut self.dr_store, inv_b);
            lr += l * inv_b;
        }
        if !(ld.is_finite() && lr.is_finite()) {
            return Err(Error::NonFinite(format!("step {step}: discriminator loss {ld} / {lr}")));
        }
        self.adam_dd.step(&mut self.dd_store).map_err(|e| at_step(step, e))?;
        self.adam_dr.step(&mut self.dr_store).map_err(|e| at_step(step, e))?;

        self.g_store.zero_grads();
        let w = self.config.loss_weights;
        let (mut adv, mut fm, mut ss) = (0.0, 0.0, 0.0);
        for (s, (mut g, d, r)) in batch.iter().zip(graphs) {
            let fd = self.disc_depth.forward(&mut g, &self.dd_store, d, &s.layout, SnMode::Eval)?;
            let fr = self.disc_rgb.forward(&mut g, &self.dr_store, r, &s.layout, SnMode::Eval)?;
            let real_rgb = g.constant(s.rgb.clone());
            let rr = self.disc_rgb.forward(&mut g, &self.dr_store, real_rgb, &s.layout, SnMode::Eval)?;
            let a_d = hinge_g_loss(&mut g, &logits(&fd))?;
            let a_r = hinge_g_loss(&mut g, &logits(&fr))?;
            let a = g.add(a_d, a_r)?;
            let f = feature_matching_loss(&mut g, &features(&rr), &features(&fr))?;
            let target = g.constant(s.depth.clone());
            let sl = ssim_loss(&mut g, d, target)?;
            let t1 = g.scale(a, w.w_adv)?;
            let t2 = g.scale(f, w.w_fm)?;
            let t3 = g.scale(sl, w.w_ssim)?;
            let total = g.add(t1, t2)?;
            let total = g.add(total, t3)?;
            let total_v = g.value(total).item();
            if !total_v.is_finite() {
                return Err(Error::NonFinite(format!("step {step}: generator loss {total_v}")));
            }
            adv += g.value(a).item() * inv_b;
            fm += g.value(f).item() * inv_b;
            ss += g.value(sl).item() * inv_b;
            g.backward(total)?.accumulate_scaled(&mut self.g_store, inv_b);
        }
        self.adam_g.step(&mut self.g_store).map_err(|e| at_step(step, e))?;
        Ok(StepLosses { step, loss_d_depth: ld, loss_d_rgb: lr, loss_g_adv: adv, loss_fm: fm, loss_ssim: ss })
    }
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {step}: {m}")),
        other => other,
    }
}

/// Checks the desk-scale limits of a smoke run.
pub fn check_smoke_limits(config: &RunConfig, steps: usize) -> Result<()> {
    let g = &config.generator;
    if g.output_resolution > MAX_SMOKE_RESOLUTION || g.stages.len() > MAX_SMOKE_STAGES {
        return Err(Error::Config(format!(
            "smoke training is limited to {MAX_SMOKE_RESOLUTION}x{MAX_SMOKE_RESOLUTION} and {MAX_SMOKE_STAGES} stages"
        )));
    }
    if steps > MAX_SMOKE_STEPS {
        return Err(Error::Config(format!("smoke training is limited to {MAX_SMOKE_STEPS} steps")));
    }
    Ok(())
}

/// Runs `steps` alternating updates on a seeded synthetic dataset.
pub fn train_smoke(config: &RunConfig, steps: usize) -> Result<(TrainReport, Trainer)> {
    check_smoke_limits(config, steps)?;
    let mut trainer = Trainer::new(config.clone())?;
    let mut data_rng = Rng::new(config.seed).fork();
    let g = &config.generator;
    let data = synthetic_dataset(8.max(config.batch_size), g.output_resolution, g.num_labels, &mut data_rng)?;
    let (g0, dd0, dr0) = (trainer.g_store.clone(), trainer.dd_store.clone(), trainer.dr_store.clone());
    let b = config.batch_size;
    let mut rows = Vec::with_capacity(steps);
    for step in 0..steps {
        let batch: Vec<&Sample> = (0..b).map(|j| &data[(step * b + j) % data.len()]).collect();
        let losses = trainer.step(&batch, step)?;
        if !losses.all_finite() {
            return Err(Error::NonFinite(format!("step {step}: non-finite loss {losses:?}")));
        }
        rows.push(losses);
    }
    let report = TrainReport {
        steps: rows,
        g_delta_norm: trainer.g_store.distance(&g0),
        d_depth_delta_norm: trainer.dd_store.distance(&dd0),
        d_rgb_delta_norm: trainer.dr_store.distance(&dr0),
    };
    Ok((report, trainer))
}
