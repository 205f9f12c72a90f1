//! Named finite-difference gradient checks, one per building block plus the
//! full two-stage generator.
//!
//! Every check re-draws the parameters at unit scale, treats the inputs as
//! parameters too, and reduces the output with a fixed random linear read-out
//! so no gradient entry is degenerate by construction. Reference derivatives
//! use the fourth-order five-point stencil.

use std::time::Instant;

use crate::adversarial::losses::{feature_matching_loss, hinge_d_loss, hinge_g_loss, ssim};
use crate::attention::{cross_attention, wmsa, CrossAttnParams, MsaParams, ValueSource};
use crate::autograd::{Graph, Var};
use crate::caf::Caf;
use crate::config::{GeneratorConfig, StageConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, StageParams};
use crate::gradcheck::{grad_check_with, GradCheckReport, Stencil};
use crate::layers::{pixel_shuffle, token_to_map, Conv2d, Linear, Mlp, SemanticLayout, TokenGrid};
use crate::normalization::{Ctn, CtnStats, SpadeShortcut};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{InitSpec, Tensor};

/// Five-point difference steps. The composite checks cross more ReLU kinks, so
/// they use the smaller step.
pub const LAYER_STEP: f64 = 1e-3;
pub const COMPOSITE_STEP: f64 = 1e-4;
pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-5;

/// Check names in run order.
pub const MODULES: [&str; 12] =
    ["ctn", "wmsa", "swmsa", "cross", "mlp", "pixel_shuffle", "spade", "conv", "losses", "caf", "stage", "full"];

#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub report: GradCheckReport,
    pub tolerance: f64,
    pub seconds: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance
    }
}

pub fn tolerance(name: &str) -> f64 {
    match name {
        "stage" | "full" => COMPOSITE_TOLERANCE,
        _ => LAYER_TOLERANCE,
    }
}

/// Redraws every parameter from `N(0, std^2)`.
pub fn randomize(store: &mut ParamStore, std: f64, rng: &mut Rng) {
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = std * rng.normal();
        }
    }
}

/// `sum(r * x)` for a fixed `r` with entries uniform in `[-1, 1]`.
pub fn readout(g: &mut Graph, x: Var, rng: &mut Rng) -> Result<Var> {
    let r = Tensor::create(g.shape(x), InitSpec::Uniform(-1.0, 1.0), rng)?;
    let r = g.constant(r);
    let y = g.mul(x, r)?;
    g.sum_all(y)
}

/// Read-out weights drawn once, so every probe of the loss sees the same functional.
/// Outputs are centred on their unperturbed values first; the shift is constant,
/// so it leaves the gradient alone and keeps finite differences away from large sums.
struct Readouts {
    seed: u64,
    base: Vec<Tensor>,
}

impl Readouts {
    fn apply(&self, g: &mut Graph, xs: &[Var]) -> Result<Var> {
        let mut rng = Rng::new(self.seed);
        let mut acc = None;
        for (&x, b) in xs.iter().zip(&self.base) {
            let b = g.constant(b.clone());
            let d = g.sub(x, b)?;
            let t = readout(g, d, &mut rng)?;
            acc = Some(match acc {
                Some(a) => g.add(a, t)?,
                None => t,
            });
        }
        acc.ok_or_else(|| Error::Invalid("gradient check needs at least one output".into()))
    }
}

fn random_layout(side: usize, labels: usize, rng: &mut Rng) -> SemanticLayout {
    SemanticLayout::new(side, side, labels, (0..side * side).map(|_| rng.below(labels) as u32).collect()).expect("valid layout")
}

fn input(store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
    store.add(name, Tensor::zeros(shape))
}

fn grid(g: &mut Graph, store: &ParamStore, id: ParamId, gh: usize, gw: usize) -> TokenGrid {
    TokenGrid { tokens: g.param(store, id), grid_h: gh, grid_w: gw, patch: 1 }
}

fn check<F>(mut store: ParamStore, step: f64, rng: &mut Rng, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Vec<Var>>,
{
    randomize(&mut store, 0.5, rng);
    let mut g = Graph::new();
    let base = f(&mut g, &store)?.iter().map(|&v| g.value(v).clone()).collect();
    let ro = Readouts { seed: rng.next_u64(), base };
    grad_check_with(&mut store, step, Stencil::FivePoint, |g, s| {
        let outs = f(g, s)?;
        ro.apply(g, &outs)
    })
}

fn ctn(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let norms = [CtnStats::Joint, CtnStats::PerToken].map(|st| Ctn::new(&mut store, &format!("ctn_{st:?}"), 3, 4, st, rng));
    let (x, m) = (input(&mut store, "tokens", &[6, 4]), input(&mut store, "layout_tokens", &[6, 3]));
    check(store, LAYER_STEP, rng, |g, s| {
        let (t, mt) = (grid(g, s, x, 2, 3), grid(g, s, m, 2, 3));
        norms.iter().map(|n| Ok(n.forward(g, s, &t, &mt)?.tokens)).collect()
    })
}

fn msa(rng: &mut Rng, shifted: bool) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let p = MsaParams::new(&mut store, "msa", 4, 2, 2, true, rng);
    let x = input(&mut store, "tokens", &[16, 4]);
    check(store, LAYER_STEP, rng, |g, s| {
        let t = grid(g, s, x, 4, 4);
        Ok(vec![wmsa(g, s, &t, shifted, &p)?.tokens])
    })
}

fn cross(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let own = CrossAttnParams::new(&mut store, "cross_self", 3, ValueSource::SelfBranch, rng);
    let other = CrossAttnParams::new(&mut store, "cross_other", 3, ValueSource::Other, rng);
    let (d, r) = (input(&mut store, "depth", &[4, 3]), input(&mut store, "rgb", &[4, 3]));
    check(store, LAYER_STEP, rng, |g, s| {
        let (td, tr) = (grid(g, s, d, 2, 2), grid(g, s, r, 2, 2));
        let a = cross_attention(g, s, &td, &tr, &own)?;
        let b = cross_attention(g, s, &td, &tr, &other)?;
        Ok(vec![a.depth.tokens, a.rgb.tokens, b.depth.tokens, b.rgb.tokens])
    })
}

fn mlp(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let m = Mlp::new(&mut store, "mlp", 3, rng);
    let x = input(&mut store, "tokens", &[5, 3]);
    check(store, LAYER_STEP, rng, |g, s| {
        let t = grid(g, s, x, 1, 5);
        Ok(vec![m.forward(g, s, &t)?.tokens])
    })
}

fn pixel_shuffle_path(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, "proj", 3, 8, true, rng);
    let x = input(&mut store, "tokens", &[4, 3]);
    check(store, LAYER_STEP, rng, |g, s| {
        let t = grid(g, s, x, 2, 2);
        let y = lin.forward(g, s, t.tokens)?;
        let map = token_to_map(g, &t.with_tokens(y))?;
        let sq = g.square(map)?;
        Ok(vec![pixel_shuffle(g, map, 2)?, pixel_shuffle(g, sq, 2)?])
    })
}

fn spade(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let sc = SpadeShortcut::new(&mut store, "spade", 3, 2, 3, 4, rng);
    let x = input(&mut store, "features", &[2, 4, 4]);
    let layout = random_layout(4, 3, rng);
    check(store, LAYER_STEP, rng, |g, s| {
        let xv = g.param(s, x);
        Ok(vec![sc.forward(g, s, xv, &layout)?])
    })
}

fn conv(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let a = Conv2d::new(&mut store, "conv3", 2, 3, 3, 2, 1, true, rng);
    let b = Conv2d::new(&mut store, "conv4", 2, 2, 4, 2, 2, true, rng);
    let c = Conv2d::same(&mut store, "conv1", 2, 2, 1, false, rng);
    let x = input(&mut store, "x", &[2, 5, 5]);
    check(store, LAYER_STEP, rng, |g, s| {
        let xv = g.param(s, x);
        Ok(vec![a.forward(g, s, xv)?, b.forward(g, s, xv)?, c.forward(g, s, xv)?])
    })
}

fn losses(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let real = [input(&mut store, "real0", &[1, 3, 3]), input(&mut store, "real1", &[1, 2, 2])];
    let fake = [input(&mut store, "fake0", &[1, 3, 3]), input(&mut store, "fake1", &[1, 2, 2])];
    let feat_fake = input(&mut store, "feat_fake", &[2, 3, 3]);
    // The real side is detached, so it enters as a constant.
    let feat_real = Tensor::create(&[2, 3, 3], InitSpec::Normal { mean: 0.0, std: 0.5 }, rng)?;
    let maps = [input(&mut store, "ssim_x", &[1, 6, 6]), input(&mut store, "ssim_y", &[1, 6, 6])];
    check(store, LAYER_STEP, rng, |g, s| {
        let r: Vec<Var> = real.iter().map(|&id| g.param(s, id)).collect();
        let f: Vec<Var> = fake.iter().map(|&id| g.param(s, id)).collect();
        let d = hinge_d_loss(g, &r, &f)?;
        let gl = hinge_g_loss(g, &f)?;
        let (fr, ff) = (g.constant(feat_real.clone()), g.param(s, feat_fake));
        let fm = feature_matching_loss(g, &[vec![fr]], &[vec![ff]])?;
        let (x, y) = (g.param(s, maps[0]), g.param(s, maps[1]));
        let (x, y) = (g.sigmoid(x)?, g.sigmoid(y)?);
        let ss = ssim(g, x, y)?;
        Ok(vec![d, gl, fm, ss])
    })
}

fn caf(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let c = Caf::new(&mut store, "caf", 3, 2, 16, ValueSource::SelfBranch, rng);
    let (d, r) = (input(&mut store, "depth", &[2, 16, 16]), input(&mut store, "rgb", &[2, 16, 16]));
    let layout = random_layout(16, 3, rng);
    check(store, LAYER_STEP, rng, |g, s| {
        let (dv, rv) = (g.param(s, d), g.param(s, r));
        let out = c.forward(g, s, dv, rv, &layout)?;
        Ok(vec![out.depth, out.rgb])
    })
}

fn stage(rng: &mut Rng) -> Result<GradCheckReport> {
    let cfg = GeneratorConfig::tiny(16, 8, 3, 3)?;
    let sc = StageConfig { resolution: 8, channels: 3, embedding: 8, patch_size: 2, window_size: 2, pair_count: 1 };
    let mut store = ParamStore::new();
    let sp = StageParams::new(&mut store, "stage", &sc, 2, 3, &cfg, rng);
    let x = input(&mut store, "features", &[3, 8, 8]);
    let layout = random_layout(8, 3, rng);
    check(store, COMPOSITE_STEP, rng, |g, s| {
        let xv = g.param(s, x);
        Ok(vec![sp.forward(g, s, xv, &layout, true)?])
    })
}

/// The 8x8 two-stage generator (stages at 4x4 and 8x8).
pub fn generator_config() -> Result<GeneratorConfig> {
    let mut cfg = GeneratorConfig::tiny(8, 4, 4, 3)?;
    cfg.z_dim = 4;
    Ok(cfg)
}

fn generator(rng: &mut Rng) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    let gen = Generator::new(generator_config()?, &mut store, rng)?;
    let layout = random_layout(8, 3, rng);
    check(store, COMPOSITE_STEP, rng, |g, s| {
        let out = gen.forward(g, s, &layout)?;
        Ok(vec![out.depth, out.rgb])
    })
}

/// Runs one named check with a seeded draw of parameters and inputs.
pub fn run(name: &str, seed: u64) -> Result<SuiteResult> {
    let Some(&name) = MODULES.iter().find(|&&m| m == name) else {
        return Err(Error::Invalid(format!("unknown gradcheck module '{name}'; expected one of {MODULES:?} or 'all'")));
    };
    let mut rng = Rng::new(seed);
    let start = Instant::now();
    let report = match name {
        "ctn" => ctn(&mut rng),
        "wmsa" => msa(&mut rng, false),
        "swmsa" => msa(&mut rng, true),
        "cross" => cross(&mut rng),
        "mlp" => mlp(&mut rng),
        "pixel_shuffle" => pixel_shuffle_path(&mut rng),
        "spade" => spade(&mut rng),
        "conv" => conv(&mut rng),
        "losses" => losses(&mut rng),
        "caf" => caf(&mut rng),
        "stage" => stage(&mut rng),
        _ => generator(&mut rng),
    }?;
    Ok(SuiteResult { name, report, tolerance: tolerance(name), seconds: start.elapsed().as_secs_f64() })
}

/// `"all"` expands to every module.
pub fn run_named(name: &str, seed: u64) -> Result<Vec<SuiteResult>> {
    if name == "all" {
        MODULES.iter().map(|m| run(m, seed)).collect()
    } else {
        Ok(vec![run(name, seed)?])
    }
}
