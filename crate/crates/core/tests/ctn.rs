use depthgen_core::autograd::EPS_VAR;
use depthgen_core::layers::TokenGrid;
use depthgen_core::normalization::{Ctn, CtnStats};
use depthgen_core::{Graph, InitSpec, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn identity_ctn(layout_dim: usize, dim: usize, stats: CtnStats, seed: u64) -> (ParamStore, Ctn) {
    let mut store = ParamStore::new();
    let ctn = Ctn::new(&mut store, "ctn", layout_dim, dim, stats, &mut Rng::new(seed));
    ctn.make_identity(&mut store);
    (store, ctn)
}

fn run(ctn: &Ctn, store: &ParamStore, x: &Tensor, m: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let n = x.shape()[0];
    let tokens = g.constant(x.clone());
    let layout = g.constant(m.clone());
    let t = TokenGrid { tokens, grid_h: 1, grid_w: n, patch: 1 };
    let mt = TokenGrid { tokens: layout, grid_h: 1, grid_w: n, patch: 1 };
    let out = ctn.forward(&mut g, store, &t, &mt).unwrap();
    g.value(out.tokens).clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn identity_affine_standardizes_jointly(
        seed in any::<u64>(),
        n in 1usize..20,
        e in 1usize..9,
        sigma in 0.1f64..10.0,
        offset in -50.0f64..50.0,
    ) {
        prop_assume!(n * e >= 2);
        let mut rng = Rng::new(seed);
        let (store, ctn) = identity_ctn(3, e, CtnStats::Joint, seed);
        let z = Tensor::create(&[n, e], InitSpec::Normal { mean: 0.0, std: 1.0 }, &mut rng).unwrap();
        // Rescale so the sample deviation is exactly `sigma`.
        let mean = z.mean();
        let sd = (z.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64).sqrt();
        prop_assume!(sd > 1e-6);
        let x = z.map(|v| offset + sigma * (v - mean) / sd);
        let m = Tensor::create(&[n, 3], InitSpec::Uniform(0.0, 1.0), &mut rng).unwrap();
        let y = run(&ctn, &store, &x, &m);

        let mu = y.mean();
        let std = (y.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        prop_assert!(mu.abs() < 1e-10, "mean {mu}");
        prop_assert!((std - 1.0).abs() < 1e-3, "std {std}");

        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (m_, s_) = g.joint_stats(xv, &[0, 1]).unwrap();
        let c = g.sub(xv, m_).unwrap();
        let reference = g.div(c, s_).unwrap();
        prop_assert!(y.bit_eq(g.value(reference)));
    }
}

#[test]
fn two_by_two_hand_oracle() {
    let (store, ctn) = identity_ctn(2, 2, CtnStats::Joint, 0);
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = run(&ctn, &store, &x, &m);
    // mean 2.5, population variance 1.25
    let s = (1.25f64 + EPS_VAR).sqrt();
    let expect = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
    for (a, b) in y.data().iter().zip(expect) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn per_token_mode_standardizes_rows() {
    let (store, ctn) = identity_ctn(2, 4, CtnStats::PerToken, 1);
    let mut rng = Rng::new(2);
    let x = Tensor::create(&[3, 4], InitSpec::Uniform(-3.0, 3.0), &mut rng).unwrap();
    let m = Tensor::zeros(&[3, 2]);
    let y = run(&ctn, &store, &x, &m);
    for (row_x, row_y) in x.data().chunks(4).zip(y.data().chunks(4)) {
        let mu = row_x.iter().sum::<f64>() / 4.0;
        let var = row_x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
        for (a, b) in row_x.iter().zip(row_y) {
            assert!(((a - mu) / (var + EPS_VAR).sqrt() - b).abs() < 1e-12);
        }
    }
}

#[test]
fn modulation_follows_the_layout() {
    let mut store = ParamStore::new();
    let mut rng = Rng::new(4);
    let ctn = Ctn::new(&mut store, "ctn", 2, 3, CtnStats::Joint, &mut rng);
    for p in store.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.normal();
        }
    }
    let x = Tensor::create(&[2, 3], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap();
    let a = run(&ctn, &store, &x, &Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap());
    let b = run(&ctn, &store, &x, &Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    assert!(a.data()[..3] == b.data()[..3]);
    assert!(a.data()[3..] != b.data()[3..]);
}
