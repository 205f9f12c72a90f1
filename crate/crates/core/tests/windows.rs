use depthgen_core::attention::{wmsa_with_probs, MsaParams};
use depthgen_core::layers::{window_partition, window_reverse, TokenGrid};
use depthgen_core::{Graph, InitSpec, ParamStore, Rng, Tensor};
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = (usize, usize, usize, bool, usize)> {
    prop_oneof![Just(2usize), Just(4usize)].prop_flat_map(|w| {
        let max = 16 / w;
        (1..=max, 1..=max, Just(w), any::<bool>(), 1usize..4).prop_map(|(a, b, w, s, e)| (a * w, b * w, w, s, e))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn partition_then_reverse_is_bit_exact((gh, gw, w, shifted, e) in grid_strategy(), seed in any::<u64>()) {
        let shift = if shifted { w / 2 } else { 0 };
        let mut rng = Rng::new(seed);
        let x = Tensor::create(&[gh * gw, e], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap();
        let mut g = Graph::new();
        let tokens = g.constant(x.clone());
        let t = TokenGrid { tokens, grid_h: gh, grid_w: gw, patch: 1 };
        let (windows, _) = window_partition(&mut g, &t, w, shift).unwrap();
        prop_assert_eq!(g.shape(windows), &[(gh / w) * (gw / w), w * w, e][..]);
        let back = window_reverse(&mut g, windows, w, shift, gh, gw, 1).unwrap();
        prop_assert!(g.value(back.tokens).bit_eq(&x));
    }
}

/// Whether the token in rolled-window slot `q` of window `n` wrapped around
/// during the roll, per axis.
fn provenance(n: usize, q: usize, gh: usize, gw: usize, w: usize, shift: usize) -> (bool, bool) {
    let nwx = gw / w;
    let (i, j) = ((n / nwx) * w + q / w, (n % nwx) * w + q % w);
    let (r, c) = ((i + shift) % gh, (j + shift) % gw);
    (r < shift, c < shift)
}

#[test]
fn shifted_windows_never_attend_across_regions() {
    let mut rng = Rng::new(11);
    for w in [2usize, 4] {
        for gh in (w..=8).step_by(w) {
            for gw in (w..=8).step_by(w) {
                let mut store = ParamStore::new();
                let e = 4;
                let heads = 2;
                let p = MsaParams::new(&mut store, "msa", e, heads, w, true, &mut rng);
                for param in store.params_mut() {
                    for v in param.value.data_mut() {
                        *v = rng.normal();
                    }
                }
                let x = Tensor::create(&[gh * gw, e], InitSpec::Uniform(-2.0, 2.0), &mut rng).unwrap();
                let mut g = Graph::new();
                let tokens = g.constant(x);
                let t = TokenGrid { tokens, grid_h: gh, grid_w: gw, patch: 1 };
                let out = wmsa_with_probs(&mut g, &store, &t, true, &p).unwrap();
                let probs = g.value(out.probs);
                let n = w * w;
                let nw = (gh / w) * (gw / w);
                assert_eq!(probs.shape(), &[nw, heads, n, n]);
                let shift = w / 2;
                for win in 0..nw {
                    for h in 0..heads {
                        for q in 0..n {
                            let (mut cross, mut own) = (0.0, 0.0);
                            for k in 0..n {
                                let pk = probs.at(&[win, h, q, k]);
                                if provenance(win, q, gh, gw, w, shift) == provenance(win, k, gh, gw, w, shift) {
                                    assert!(pk > 0.0, "grid {gh}x{gw} w={w}: same-region key starved");
                                    own += pk;
                                } else {
                                    cross += pk;
                                }
                            }
                            assert!(cross < 1e-6, "grid {gh}x{gw} w={w}: cross-region mass {cross}");
                            assert!((own - 1.0).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn unshifted_windows_use_every_key() {
    let mut rng = Rng::new(5);
    let mut store = ParamStore::new();
    let p = MsaParams::new(&mut store, "msa", 4, 1, 2, true, &mut rng);
    let x = Tensor::create(&[16, 4], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap();
    let mut g = Graph::new();
    let tokens = g.constant(x);
    let t = TokenGrid { tokens, grid_h: 4, grid_w: 4, patch: 1 };
    let out = wmsa_with_probs(&mut g, &store, &t, false, &p).unwrap();
    assert!(g.value(out.probs).data().iter().all(|&v| v > 0.0));
}
