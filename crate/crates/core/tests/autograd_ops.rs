//! Every differentiable op against central finite differences on small random tensors.

use std::sync::Arc;

use depthgen_core::autograd::{Graph, Var};
use depthgen_core::gradcheck::grad_check;
use depthgen_core::{InitSpec, ParamStore, Result, Rng, Tensor};
use proptest::prelude::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

const SHAPES: &[&[usize]] = &[&[2], &[3], &[5], &[8], &[2, 2], &[2, 3], &[3, 2], &[2, 4], &[4, 2], &[2, 2, 2]];

fn values(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::create(shape, InitSpec::Uniform(lo, hi), rng).unwrap()
}

/// Moves entries at least `gap` away from `kink`.
fn avoid(t: Tensor, kink: f64, gap: f64) -> Tensor {
    t.map(|v| if (v - kink).abs() < gap { kink + gap.copysign(v - kink) * 2.0 } else { v })
}

/// Read-out weights with magnitude in `[0.5, 1]`, with a random sign when `signed`.
fn readout_weights(shape: &[usize], signed: bool, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let m = rng.uniform(0.5, 1.0);
        *v = if signed && rng.next_f64() < 0.5 { -m } else { m };
    }
    t
}

/// Registers `inputs` as parameters and checks each output of `f` under its own
/// fixed weighted sum. Returns the worst error over all outputs.
fn check<F>(inputs: Vec<Tensor>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>>,
{
    check_signed(inputs, seed, true, f)
}

fn check_signed<F>(inputs: Vec<Tensor>, seed: u64, signed: bool, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Vec<Var>>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs.into_iter().enumerate().map(|(i, t)| store.add(format!("x{i}"), t)).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = ids.iter().map(|&id| g.param(&store, id)).collect();
    let outs = f(&mut g, &vars).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    let mut worst = 0.0f64;
    for (k, &o) in outs.iter().enumerate() {
        let w = readout_weights(g.shape(o), signed, &mut rng);
        let report = grad_check(&mut store, H, |g, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.param(s, id)).collect();
            let out = f(g, &vars)?[k];
            let w = g.constant(w.clone());
            let p = g.mul(out, w)?;
            g.sum_all(p)
        })
        .unwrap();
        worst = worst.max(report.max_rel_err);
    }
    worst
}

fn shape_of(i: usize) -> &'static [usize] {
    SHAPES[i % SHAPES.len()]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn smooth_unary_ops(seed in any::<u64>(), si in 0usize..SHAPES.len()) {
        let mut rng = Rng::new(seed);
        let s = shape_of(si);
        let x = values(s, -2.0, 2.0, &mut rng);
        let pos = values(s, 0.3, 3.0, &mut rng);
        let gelu_in = avoid(x.clone(), -0.7518, 0.05);
        let c = rng.uniform(-2.0, 2.0);
        prop_assert!(check(vec![x.clone()], seed, |g, v| Ok(vec![g.exp(v[0])?, g.tanh(v[0])?, g.sigmoid(v[0])?])) < TOL);
        prop_assert!(check(vec![x.clone()], seed, |g, v| Ok(vec![g.square(v[0])?, g.neg(v[0])?, g.scale(v[0], c)?, g.add_scalar(v[0], c)?])) < TOL);
        prop_assert!(check(vec![pos], seed, |g, v| Ok(vec![g.log(v[0])?, g.sqrt(v[0])?])) < TOL);
        prop_assert!(check(vec![gelu_in], seed, |g, v| Ok(vec![g.gelu(v[0])?])) < TOL);
    }

    #[test]
    fn piecewise_unary_ops(seed in any::<u64>(), si in 0usize..SHAPES.len()) {
        let mut rng = Rng::new(seed);
        let s = shape_of(si);
        let x = avoid(values(s, -2.0, 2.0, &mut rng), 0.0, 0.05);
        let c = rng.uniform(-1.0, 1.0);
        let shifted = avoid(values(s, -2.0, 2.0, &mut rng), -c, 0.05);
        prop_assert!(check(vec![x], seed, |g, v| Ok(vec![g.relu(v[0])?, g.abs(v[0])?, g.leaky_relu(v[0], 0.2)?])) < TOL);
        prop_assert!(check(vec![shifted], seed, |g, v| Ok(vec![g.max0_shift(v[0], c)?])) < TOL);
    }

    #[test]
    fn binary_ops_with_broadcasting(seed in any::<u64>(), si in 0usize..SHAPES.len(), mode in 0usize..3) {
        let mut rng = Rng::new(seed);
        let s = shape_of(si);
        let bshape: Vec<usize> = match mode {
            0 => s.to_vec(),
            1 => vec![*s.last().unwrap()],
            _ => vec![1],
        };
        let a = values(s, -2.0, 2.0, &mut rng);
        let b = values(&bshape, 0.5, 2.0, &mut rng);
        let e = check(vec![a, b], seed, |g, v| {
            Ok(vec![g.add(v[0], v[1])?, g.sub(v[0], v[1])?, g.mul(v[0], v[1])?, g.div(v[0], v[1])?, g.sub(v[1], v[0])?])
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn matmul_plain_batched_and_shared(seed in any::<u64>(), m in 1usize..4, k in 1usize..4, n in 1usize..4) {
        // Positive operands and weights keep every gradient entry a sum without cancellation.
        let mut rng = Rng::new(seed);
        let a = values(&[m, k], 0.5, 1.0, &mut rng);
        let b = values(&[k, n], 0.5, 1.0, &mut rng);
        let ab = values(&[2, m, k], 0.5, 1.0, &mut rng);
        let bb = values(&[2, k, n], 0.5, 1.0, &mut rng);
        let mm = |g: &mut Graph, v: &[Var]| Ok(vec![g.matmul(v[0], v[1])?]);
        prop_assert!(check_signed(vec![a, b.clone()], seed, false, mm) < TOL);
        prop_assert!(check_signed(vec![ab.clone(), bb], seed, false, mm) < TOL);
        prop_assert!(check_signed(vec![ab, b], seed, false, mm) < TOL);
    }

    #[test]
    fn reductions_and_stats(seed in any::<u64>(), si in 0usize..SHAPES.len(), pick in 1usize..8) {
        let mut rng = Rng::new(seed);
        let s = shape_of(si);
        let x = values(s, -2.0, 2.0, &mut rng);
        let mut axes: Vec<usize> = (0..s.len()).filter(|a| pick & (1 << a) != 0).collect();
        if axes.is_empty() {
            axes.push(0);
        }
        let e = check(vec![x], seed, |g, v| {
            let (mu, sigma) = g.joint_stats(v[0], &axes)?;
            Ok(vec![g.sum_axes(v[0], &axes)?, g.mean_axes(v[0], &axes)?, mu, sigma, g.sum_all(v[0])?, g.mean_all(v[0])?])
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn softmax_on_every_axis(seed in any::<u64>(), si in 0usize..SHAPES.len()) {
        let mut rng = Rng::new(seed);
        let s = shape_of(si);
        let x = values(s, -2.0, 2.0, &mut rng);
        for axis in 0..s.len() {
            let e = check(vec![x.clone()], seed, |g, v| Ok(vec![g.softmax(v[0], axis)?]));
            prop_assert!(e < TOL, "axis {axis}: {e}");
        }
    }

    #[test]
    fn layout_ops(seed in any::<u64>(), si in 0usize..SHAPES.len()) {
        let mut rng = Rng::new(seed);
        let s = shape_of(si);
        let x = values(s, -2.0, 2.0, &mut rng);
        let n = x.len();
        let order = rng.permutation(s.len());
        let index: Arc<[usize]> = (0..n + 3).map(|_| rng.below(n)).collect();
        let e = check(vec![x.clone(), x], seed, |g, v| {
            let flat = g.reshape(v[0], &[n])?;
            let perm = g.permute(v[0], &order)?;
            let gathered = g.gather(v[1], index.clone(), &[n + 3])?;
            let cat = g.concat(&[v[0], v[1]], s.len() - 1)?;
            let mut outs = vec![flat, perm, gathered, cat];
            if s.len() >= 2 {
                outs.push(g.transpose_last(v[1])?);
            }
            Ok(outs)
        });
        prop_assert!(e < TOL, "{e}");
    }

    #[test]
    fn conv2d_with_stride_and_padding(
        seed in any::<u64>(),
        c_in in 1usize..3,
        c_out in 1usize..3,
        side in 3usize..6,
        kernel in 1usize..5,
        stride in 1usize..3,
        pad in 0usize..3,
        bias in any::<bool>(),
    ) {
        prop_assume!(side + 2 * pad >= kernel);
        // Linear in every input: positive values rule out cancelling sums.
        let mut rng = Rng::new(seed);
        let x = values(&[c_in, side, side], 0.5, 1.0, &mut rng);
        let w = values(&[c_out, c_in, kernel, kernel], 0.5, 1.0, &mut rng);
        let b = values(&[c_out], 0.5, 1.0, &mut rng);
        let e = check_signed(vec![x, w, b], seed, false, |g, v| Ok(vec![g.conv2d(v[0], v[1], bias.then_some(v[2]), stride, pad)?]));
        prop_assert!(e < TOL, "{e}");
    }
}
