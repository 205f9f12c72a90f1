//! One pass/fail line per acceptance criterion. Runs as a plain binary so the
//! lines are always printed.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use depthgen_core::adversarial::ssim;
use depthgen_core::attention::{wmsa_with_probs, MsaParams};
use depthgen_core::autograd::EPS_VAR;
use depthgen_core::config::{default_config, GeneratorConfig, LossWeights};
use depthgen_core::dataprep::{equirect_to_face, face_plane, pano_coords, read_pfm, read_pgm, read_ppm, ray_to_planar, write_pfm, write_pgm, write_ppm, Face, Image};
use depthgen_core::generator::Generator;
use depthgen_core::layers::{upsample_nearest, window_partition, window_reverse, SemanticLayout, TokenGrid};
use depthgen_core::metrics::depth_metrics;
use depthgen_core::normalization::{Ctn, CtnStats};
use depthgen_core::{Graph, InitSpec, ParamStore, Rng, Tensor};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_depthgen")
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let out = Command::new(bin()).args(["gradcheck", "--module", "all"]).output().map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    ensure(out.status.success(), format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)))?;
    let lines: Vec<&str> = text.lines().filter(|l| l.contains("max_rel_err")).collect();
    ensure(lines.len() == 12 && lines.iter().all(|l| l.ends_with("PASS")), format!("unexpected report:\n{text}"))?;
    let worst = lines
        .iter()
        .map(|l| l.split_whitespace().nth(2).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN))
        .collect::<Vec<_>>();
    let layer_max = worst[..11].iter().cloned().fold(0.0, f64::max);
    ensure(layer_max < 1e-6 && worst[11] < 1e-5, format!("layers {layer_max:e}, full {:e}", worst[11]))?;
    ensure(secs < 300.0, format!("took {secs:.0}s"))?;
    Ok(format!("layers max {layer_max:.1e} < 1e-6, full generator {:.1e} < 1e-5, {secs:.0}s", worst[11]))
}

fn window_algebra() -> Check {
    let mut rng = Rng::new(1);
    for case in 0..1000 {
        let w = if rng.below(2) == 0 { 2 } else { 4 };
        let (gh, gw) = ((1 + rng.below(16 / w)) * w, (1 + rng.below(16 / w)) * w);
        let shift = if rng.below(2) == 0 { 0 } else { w / 2 };
        let e = 1 + rng.below(3);
        let x = Tensor::create(&[gh * gw, e], InitSpec::Uniform(-1.0, 1.0), &mut rng).unwrap();
        let mut g = Graph::new();
        let tokens = g.constant(x.clone());
        let (win, _) = window_partition(&mut g, &TokenGrid { tokens, grid_h: gh, grid_w: gw, patch: 1 }, w, shift).map_err(|e| e.to_string())?;
        let back = window_reverse(&mut g, win, w, shift, gh, gw, 1).map_err(|e| e.to_string())?;
        ensure(g.value(back.tokens).bit_eq(&x), format!("roundtrip case {case} ({gh}x{gw}, w {w}, shift {shift})"))?;
    }
    let mut worst = 0.0f64;
    for w in [2usize, 4] {
        let shift = w / 2;
        for gh in (w..=8).step_by(w) {
            for gw in (w..=8).step_by(w) {
                let mut store = ParamStore::new();
                let p = MsaParams::new(&mut store, "msa", 4, 2, w, true, &mut rng);
                for param in store.params_mut() {
                    param.value.data_mut().iter_mut().for_each(|v| *v = rng.normal());
                }
                let x = Tensor::create(&[gh * gw, 4], InitSpec::Uniform(-2.0, 2.0), &mut rng).unwrap();
                let mut g = Graph::new();
                let tokens = g.constant(x);
                let out = wmsa_with_probs(&mut g, &store, &TokenGrid { tokens, grid_h: gh, grid_w: gw, patch: 1 }, true, &p)
                    .map_err(|e| e.to_string())?;
                let probs = g.value(out.probs);
                let (n, nwx) = (w * w, gw / w);
                // A token wrapped during the roll iff its rolled position is below the shift.
                let region = |win: usize, q: usize| {
                    let (i, j) = ((win / nwx) * w + q / w, (win % nwx) * w + q % w);
                    ((i + shift) % gh < shift, (j + shift) % gw < shift)
                };
                for win in 0..(gh / w) * nwx {
                    for h in 0..2 {
                        for q in 0..n {
                            let cross: f64 = (0..n).filter(|&k| region(win, q) != region(win, k)).map(|k| probs.at(&[win, h, q, k])).sum();
                            worst = worst.max(cross);
                        }
                    }
                }
            }
        }
    }
    ensure(worst < 1e-6, format!("cross-region mass {worst:e}"))?;
    Ok(format!("1000 roundtrips bit-exact, max cross-region mass {worst:.1e} < 1e-6"))
}

fn ctn_correctness() -> Check {
    let mut rng = Rng::new(3);
    let run = |ctn: &Ctn, store: &ParamStore, x: &Tensor, m: &Tensor| {
        let mut g = Graph::new();
        let n = x.shape()[0];
        let (tokens, layout) = (g.constant(x.clone()), g.constant(m.clone()));
        let out = ctn
            .forward(&mut g, store, &TokenGrid { tokens, grid_h: 1, grid_w: n, patch: 1 }, &TokenGrid { tokens: layout, grid_h: 1, grid_w: n, patch: 1 })
            .unwrap();
        let xv = g.constant(x.clone());
        let (mu, sd) = g.joint_stats(xv, &[0, 1]).unwrap();
        let c = g.sub(xv, mu).unwrap();
        let reference = g.div(c, sd).unwrap();
        (g.value(out.tokens).clone(), g.value(reference).clone())
    };
    let (mut worst_mean, mut worst_std) = (0.0f64, 0.0f64);
    for case in 0..200 {
        let (n, e) = (2 + rng.below(18), 1 + rng.below(8));
        let mut store = ParamStore::new();
        let ctn = Ctn::new(&mut store, "ctn", 3, e, CtnStats::Joint, &mut rng);
        ctn.make_identity(&mut store);
        let sigma = rng.uniform(0.1, 10.0);
        let offset = rng.uniform(-50.0, 50.0);
        let x = Tensor::create(&[n, e], InitSpec::Normal { mean: offset, std: sigma }, &mut rng).unwrap();
        let mean = x.mean();
        let sd = (x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sqrt();
        let x = x.map(|v| offset + sigma * (v - mean) / sd);
        let m = Tensor::create(&[n, 3], InitSpec::Uniform(0.0, 1.0), &mut rng).unwrap();
        let (y, reference) = run(&ctn, &store, &x, &m);
        ensure(y.bit_eq(&reference), format!("case {case} differs from joint_stats normalization"))?;
        let mu = y.mean();
        let std = (y.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
        worst_mean = worst_mean.max(mu.abs());
        worst_std = worst_std.max((std - 1.0).abs());
    }
    ensure(worst_mean < 1e-10 && worst_std < 1e-3, format!("mean {worst_mean:e}, std offset {worst_std:e}"))?;
    let mut store = ParamStore::new();
    let ctn = Ctn::new(&mut store, "ctn", 2, 2, CtnStats::Joint, &mut rng);
    ctn.make_identity(&mut store);
    let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let (y, _) = run(&ctn, &store, &x, &Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let s = (1.25f64 + EPS_VAR).sqrt();
    let hand = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
    let err = y.data().iter().zip(hand).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure(err < 1e-12, format!("2x2 hand oracle off by {err:e}"))?;
    Ok(format!("|mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, bit-exact vs joint stats, 2x2 oracle {err:.1e}"))
}

fn random_layout(side: usize, labels: usize, rng: &mut Rng) -> SemanticLayout {
    SemanticLayout::new(side, side, labels, (0..side * side).map(|_| rng.below(labels) as u32).collect()).unwrap()
}

fn shortcut_path(gen: &Generator, store: &ParamStore, layout: &SemanticLayout) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let f0 = gen.encode_layout(&mut g, store, layout, None).unwrap();
    let last = gen.config.stages.len() - 1;
    let mut branches = [f0, f0];
    for i in 0..=last {
        for (b, stages) in [&gen.depth, &gen.rgb].into_iter().enumerate() {
            let mut x = stages[i].shortcut.forward(&mut g, store, branches[b], layout).unwrap();
            if i < last {
                x = upsample_nearest(&mut g, x).unwrap();
            }
            branches[b] = x;
        }
        if gen.config.fusion_stage() == Some(i) {
            let caf = gen.caf.as_ref().unwrap();
            for (b, alpha) in [caf.alpha_depth, caf.alpha_rgb].into_iter().enumerate() {
                let keep = 1.0 - 1.0 / (1.0 + (-store.value(alpha).item()).exp());
                let scaled = g.value(branches[b]).map(|v| keep * v);
                branches[b] = g.constant(scaled);
            }
        }
    }
    let d = gen.depth_head.forward(&mut g, store, branches[0]).unwrap();
    let r = gen.rgb_head.forward(&mut g, store, branches[1]).unwrap();
    let (d, r) = (g.tanh(d).unwrap(), g.tanh(r).unwrap());
    (g.value(d).clone(), g.value(r).clone())
}

fn residual_isolation() -> Check {
    for (cfg, seed) in [(GeneratorConfig::tiny(16, 4, 4, 3).unwrap(), 7), (default_config(32).unwrap(), 8)] {
        let side = cfg.output_resolution;
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let gen = Generator::new(cfg, &mut store, &mut rng).unwrap();
        for p in store.params_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng.normal());
        }
        let layout = random_layout(side, gen.config.num_labels, &mut rng);
        gen.isolate_shortcuts(&mut store);
        let (d, r) = gen.generate(&store, &layout).unwrap();
        let (ed, er) = shortcut_path(&gen, &store, &layout);
        ensure(d.bit_eq(&ed) && r.bit_eq(&er), format!("{side}x{side}: depth off by {:e}, rgb by {:e}", d.max_abs_diff(&ed), r.max_abs_diff(&er)))?;
    }
    Ok("bit-exact at 16x16 and the 32x32 default".into())
}

fn metric_oracle(pred: &[f64], gt: &[f64], align: bool) -> [f64; 9] {
    let valid: Vec<usize> = (0..gt.len()).filter(|&i| pred[i] > 0.0 && gt[i] > 0.0).collect();
    let n = valid.len() as f64;
    let s = if align { valid.iter().map(|&i| gt[i]).sum::<f64>() / valid.iter().map(|&i| pred[i]).sum::<f64>() } else { 1.0 };
    let m = |f: &dyn Fn(f64, f64) -> f64| valid.iter().map(|&i| f(pred[i] * s, gt[i])).sum::<f64>() / n;
    let within = |t: f64| m(&|p, g| if (p / g).max(g / p) < t { 1.0 } else { 0.0 });
    [
        m(&|p, g| (p - g).abs()),
        m(&|p, g| (p - g).abs() / g),
        m(&|p, g| (p - g).powi(2) / g),
        m(&|p, g| (p - g).powi(2)).sqrt(),
        m(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        m(&|p, g| (p.log10() - g.log10()).abs()),
        within(1.25),
        within(1.5625),
        within(1.953125),
    ]
}

fn metric_suite() -> Check {
    let mut rng = Rng::new(5);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let gt: Vec<f64> = (0..64).map(|_| rng.uniform(0.5, 10.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.uniform(0.6, 1.6)).collect();
        for align in [false, true] {
            let r = depth_metrics(&pred, &gt, None, align).map_err(|e| e.to_string())?;
            for (a, b) in r.values().iter().zip(metric_oracle(&pred, &gt, align)) {
                worst = worst.max((a - b).abs());
            }
        }
        let base = depth_metrics(&pred, &gt, None, true).unwrap();
        for c in [0.1, 3.0, 17.0] {
            let scaled: Vec<f64> = pred.iter().map(|p| c * p).collect();
            let r = depth_metrics(&scaled, &gt, None, true).unwrap();
            for (a, b) in r.values().iter().zip(base.values()) {
                ensure((a - b).abs() < 1e-12, format!("scale {c}: {a} vs {b}"))?;
            }
        }
    }
    ensure(worst < 1e-12, format!("oracle gap {worst:e}"))?;
    let r = depth_metrics(&[1.0, 3.0], &[1.0, 2.0], None, true).unwrap();
    ensure(r.mae == 0.25 && r.abs_rel == 0.1875 && r.delta1 == 0.5, format!("hand example gave {r:?}"))?;
    Ok(format!("loop oracle gap {worst:.1e}, scale invariant, hand example exact"))
}

fn ssim_of(x: &Tensor, y: &Tensor) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(x.clone()), g.constant(y.clone()));
    let s = ssim(&mut g, a, b).unwrap();
    g.value(s).item()
}

fn ssim_checks() -> Check {
    let mut rng = Rng::new(6);
    for side in [6, 11, 16] {
        let x = Tensor::create(&[1, side, side], InitSpec::Uniform(0.0, 1.0), &mut rng).unwrap();
        let y = Tensor::create(&[1, side, side], InitSpec::Uniform(0.0, 1.0), &mut rng).unwrap();
        let own = ssim_of(&x, &x);
        ensure((own - 1.0).abs() < 1e-12, format!("ssim(x, x) = {own}"))?;
        ensure(ssim_of(&x, &y).to_bits() == ssim_of(&y, &x).to_bits(), "not symmetric")?;
    }
    let c1 = 0.01f64.powi(2);
    for (a, b) in [(0.2, 0.7), (0.9, 0.1)] {
        let s = ssim_of(&Tensor::full(&[1, 12, 12], a), &Tensor::full(&[1, 12, 12], b));
        let expect = (2.0 * a * b + c1) / (a * a + b * b + c1);
        ensure((s - expect).abs() < 1e-12, format!("constant maps {a}/{b}: {s} vs {expect}"))?;
    }
    let w = LossWeights::default();
    ensure(w.w_ssim == 20.0, format!("default w_ssim {}", w.w_ssim))?;
    Ok("self 1, constant closed form, symmetric, w_ssim defaults to 20".into())
}

const ROOM: [(f64, f64); 3] = [(-1.2, 0.8), (-0.6, 1.4), (-0.9, 1.1)];

fn wall_hit(d: [f64; 3]) -> f64 {
    (0..3).filter(|&i| d[i] != 0.0).map(|i| if d[i] > 0.0 { ROOM[i].1 / d[i] } else { ROOM[i].0 / d[i] }).fold(f64::INFINITY, f64::min)
}

fn projection_oracle() -> Check {
    use std::f64::consts::PI;
    let (w, h) = (2048, 1024);
    let mut data = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            let theta = ((i as f64 + 0.5) / w as f64 - 0.5) * 2.0 * PI;
            let phi = ((j as f64 + 0.5) / h as f64 - 0.5) * PI;
            data.push(wall_hit([phi.cos() * theta.sin(), phi.sin(), phi.cos() * theta.cos()]));
        }
    }
    let pano = Image::new(w, h, 1, data).unwrap();
    let s = 128;
    let mut worst_frac = 1.0f64;
    for face in Face::ALL {
        let planar = ray_to_planar(&equirect_to_face(&pano, face, s).unwrap());
        let mut good = 0;
        for v in 0..s {
            for u in 0..s {
                let (a, b) = face_plane(u, v, s);
                let expect = wall_hit(face.direction(a, b));
                good += usize::from(((planar.at(u, v, 0) - expect) / expect).abs() < 0.01);
            }
        }
        worst_frac = worst_frac.min(good as f64 / (s * s) as f64);
    }
    ensure(worst_frac >= 0.99, format!("only {worst_frac:.4} of pixels within 1%"))?;

    let (x, y) = pano_coords(Face::Front.direction(0.0, 0.0), w, h);
    ensure((x - 1024.0).abs() < 1e-9 && (y - 512.0).abs() < 1e-9, format!("front centre at ({x}, {y})"))?;
    let (x, y) = pano_coords(Face::Front.direction(1.0, 1.0), w, h);
    let ey = ((1.0 / 3f64.sqrt()).asin() / PI + 0.5) * h as f64;
    ensure((x - 1280.0).abs() < 1e-9 && (y - ey).abs() < 1e-9, format!("corner at ({x}, {y})"))?;

    let mut rng = Rng::new(7);
    let f = Image::new(5, 3, 1, (0..15).map(|_| rng.normal() as f32).collect()).unwrap();
    let mut buf = Vec::new();
    write_pfm(&mut buf, &f).unwrap();
    let back = read_pfm(buf.as_slice()).unwrap();
    ensure(back.data.iter().zip(&f.data).all(|(a, b)| a.to_bits() == b.to_bits()), "PFM roundtrip")?;
    let c = Image::new(5, 3, 3, (0..45).map(|_| rng.below(256) as u8).collect()).unwrap();
    let mut buf = Vec::new();
    write_ppm(&mut buf, &c).unwrap();
    ensure(read_ppm(buf.as_slice()).unwrap() == c, "PPM roundtrip")?;
    let l = Image::new(5, 3, 1, (0..15).map(|_| rng.below(41) as u8).collect()).unwrap();
    let mut buf = Vec::new();
    write_pgm(&mut buf, &l, 40).unwrap();
    ensure(read_pgm(buf.as_slice()).unwrap().image == l.map(u16::from), "PGM roundtrip")?;
    Ok(format!("{:.2}% of pixels within 1% (worst face), closed forms to 1e-9, codecs bit-exact", 100.0 * worst_frac))
}

fn config_schedule() -> Check {
    let last_patch = |r| default_config(r).unwrap().stages.last().unwrap().patch_size;
    ensure(last_patch(128) == 4 && last_patch(256) == 4, "final patch size at 128/256")?;
    for r in [32, 64, 128, 256] {
        let c = default_config(r).unwrap();
        let divisor = if r >= 256 { 64 } else { 32 };
        for s in &c.stages {
            ensure(s.patch_size == (s.resolution / divisor).max(1), format!("{r}: stage {} has patch {}", s.resolution, s.patch_size))?;
        }
    }
    ensure(default_config(32).unwrap().stages.iter().all(|s| s.patch_size == 1), "32x32 clamp")?;
    Ok("128 -> 4, 256 -> 4, small stages clamp to 1".into())
}

fn smoke_run(dir: &Path, tag: &str) -> Result<(String, f64, String), String> {
    let report = dir.join(format!("{tag}.csv"));
    let cfg = repo_file("configs/smoke16.json");
    let out = Command::new(bin())
        .args(["--seed", "1", "train-smoke", "--steps", "200"])
        .arg("--config")
        .arg(&cfg)
        .arg("--report")
        .arg(&report)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).into_owned())?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let delta = stdout
        .lines()
        .find_map(|l| l.strip_prefix("g_delta_norm "))
        .and_then(|v| v.trim().parse::<f64>().ok())
        .ok_or("no g_delta_norm line")?;
    Ok((std::fs::read_to_string(&report).map_err(|e| e.to_string())?, delta, stdout))
}

fn training_liveness() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let (csv, delta, _) = smoke_run(dir.path(), "a")?;
    let secs = start.elapsed().as_secs_f64();
    let (again, _, _) = smoke_run(dir.path(), "b")?;
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    ensure(rows.len() == 200, format!("{} rows", rows.len()))?;
    let finite = rows.iter().all(|r| r.split(',').skip(1).all(|v| v.parse::<f64>().is_ok_and(f64::is_finite)));
    ensure(finite, "non-finite loss in report")?;
    ensure(delta > 0.0, format!("generator delta {delta}"))?;
    ensure(csv == again, "rerun CSV differs")?;
    ensure(secs < 600.0, format!("took {secs:.0}s"))?;
    Ok(format!("200 steps in {secs:.0}s, losses finite, g delta {delta:.3}, rerun identical"))
}

fn equivariance() -> Check {
    let cfg = default_config(32).unwrap();
    let mut store = ParamStore::new();
    let gen = Generator::new(cfg, &mut store, &mut Rng::new(21)).unwrap();
    let mut rng = Rng::new(22);
    let layout = random_layout(32, gen.config.num_labels, &mut rng);
    let (d0, r0) = gen.generate(&store, &layout).unwrap();
    for k in 0..3 {
        let perm = rng.permutation(gen.config.num_labels);
        let mut permuted = store.clone();
        gen.permute_labels(&mut permuted, &perm).map_err(|e| e.to_string())?;
        let (d, r) = gen.generate(&permuted, &layout.permuted(&perm).unwrap()).unwrap();
        ensure(d.bit_eq(&d0) && r.bit_eq(&r0), format!("permutation {k} breaks equivariance"))?;
    }
    Ok("3 permutations bit-exact at 32x32".into())
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("gradient fidelity", gradient_fidelity),
        ("window algebra", window_algebra),
        ("CTN correctness", ctn_correctness),
        ("residual isolation", residual_isolation),
        ("metric suite", metric_suite),
        ("SSIM", ssim_checks),
        ("projection oracle", projection_oracle),
        ("config schedule", config_schedule),
        ("training liveness", training_liveness),
        ("label equivariance", equivariance),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("[PASS] {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("[FAIL] {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
