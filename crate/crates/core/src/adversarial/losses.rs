//! Adversarial, feature-matching and SSIM losses on the graph.

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

use super::discriminator::ScaleOutput;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn mean_over(g: &mut Graph, terms: Vec<Var>) -> Result<Var> {
    let n = terms.len();
    if n == 0 {
        return Err(shape_err!("loss over an empty set of scales"));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / n as f64)
}

/// Mean over scales of `mean(max(0, 1 - real)) + mean(max(0, 1 + fake))`.
pub fn hinge_d_loss(g: &mut Graph, real: &[Var], fake: &[Var]) -> Result<Var> {
    if real.len() != fake.len() {
        return Err(shape_err!("{} real scales vs {} fake scales", real.len(), fake.len()));
    }
    let mut terms = Vec::with_capacity(real.len());
    for (&r, &f) in real.iter().zip(fake) {
        let r = g.neg(r)?;
        let r = g.max0_shift(r, 1.0)?;
        let r = g.mean_all(r)?;
        let f = g.max0_shift(f, 1.0)?;
        let f = g.mean_all(f)?;
        terms.push(g.add(r, f)?);
    }
    mean_over(g, terms)
}

/// Mean over scales of `-mean(fake)`.
pub fn hinge_g_loss(g: &mut Graph, fake: &[Var]) -> Result<Var> {
    let mut terms = Vec::with_capacity(fake.len());
    for &f in fake {
        let m = g.mean_all(f)?;
        terms.push(g.neg(m)?);
    }
    mean_over(g, terms)
}

/// Mean over every (scale, layer) pair of the mean absolute feature
/// difference. Real features are detached.
pub fn feature_matching_loss(g: &mut Graph, real: &[Vec<Var>], fake: &[Vec<Var>]) -> Result<Var> {
    if real.len() != fake.len() || real.iter().zip(fake).any(|(a, b)| a.len() != b.len()) {
        return Err(shape_err!("feature topologies differ"));
    }
    let mut terms = Vec::new();
    for (rs, fs) in real.iter().zip(fake) {
        for (&r, &f) in rs.iter().zip(fs) {
            let r = g.detach(r);
            let d = g.sub(f, r)?;
            let d = g.abs(d)?;
            terms.push(g.mean_all(d)?);
        }
    }
    mean_over(g, terms)
}

pub fn logits(outs: &[ScaleOutput]) -> Vec<Var> {
    outs.iter().map(|o| o.logits).collect()
}

pub fn features(outs: &[ScaleOutput]) -> Vec<Vec<Var>> {
    outs.iter().map(|o| o.features.clone()).collect()
}

/// Normalized `k x k` Gaussian window as a `[1, 1, k, k]` kernel.
pub fn gaussian_window(k: usize, sigma: f64) -> Tensor {
    let c = (k as f64 - 1.0) / 2.0;
    let g1: Vec<f64> = (0..k).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g1.iter().sum();
    let g1: Vec<f64> = g1.iter().map(|v| v / s).collect();
    let data = (0..k * k).map(|i| g1[i / k] * g1[i % k]).collect();
    Tensor::new(vec![1, 1, k, k], data).expect("window shape")
}

/// Mean SSIM of two `[1, H, W]` maps over all valid Gaussian-window positions.
/// The window side is `min(11, H, W)`.
pub fn ssim(g: &mut Graph, x: Var, y: Var) -> Result<Var> {
    let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
    if sx != sy || sx.len() != 3 || sx[0] != 1 {
        return Err(shape_err!("SSIM expects two [1,H,W] maps, got {:?} and {:?}", sx, sy));
    }
    let k = SSIM_WINDOW.min(sx[1]).min(sx[2]);
    let win = g.constant(gaussian_window(k, SSIM_SIGMA));
    let blur = |g: &mut Graph, v: Var| g.conv2d(v, win, None, 1, 0);
    let mx = blur(g, x)?;
    let my = blur(g, y)?;
    let xx = g.mul(x, x)?;
    let yy = g.mul(y, y)?;
    let xy = g.mul(x, y)?;
    let exx = blur(g, xx)?;
    let eyy = blur(g, yy)?;
    let exy = blur(g, xy)?;
    let mx2 = g.mul(mx, mx)?;
    let my2 = g.mul(my, my)?;
    let mxy = g.mul(mx, my)?;
    let vx = g.sub(exx, mx2)?;
    let vy = g.sub(eyy, my2)?;
    let cxy = g.sub(exy, mxy)?;

    let a = g.scale(mxy, 2.0)?;
    let a = g.add_scalar(a, SSIM_C1)?;
    let b = g.scale(cxy, 2.0)?;
    let b = g.add_scalar(b, SSIM_C2)?;
    let num = g.mul(a, b)?;
    let c = g.add(mx2, my2)?;
    let c = g.add_scalar(c, SSIM_C1)?;
    let d = g.add(vx, vy)?;
    let d = g.add_scalar(d, SSIM_C2)?;
    let den = g.mul(c, d)?;
    let map = g.div(num, den)?;
    g.mean_all(map)
}

/// `1 - ssim` after mapping both maps from `[-1, 1]` to `[0, 1]`.
pub fn ssim_loss(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let to_unit = |g: &mut Graph, v: Var| -> Result<Var> {
        let v = g.add_scalar(v, 1.0)?;
        g.scale(v, 0.5)
    };
    let p = to_unit(g, pred)?;
    let t = to_unit(g, target)?;
    let s = ssim(g, p, t)?;
    let s = g.neg(s)?;
    g.add_scalar(s, 1.0)
}
