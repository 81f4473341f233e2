//! Acceptance checks 1-10, run sequentially so the timed end-to-end run has
//! the machine to itself. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,2,9` restricts the run; `ACCEPTANCE_ABLATION_EPOCHS`
//! overrides the per-variant epoch budget of criterion 8 (default 20).

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sclera_cli::run;
use sclera_core::autonn::{grad_check, Coordinates, Graph, NnError, ParamStore, Tensor};
use sclera_core::evalkit::*;
use sclera_core::imgproc::{frangi, load_image, to_gray, vesselness_at_scale, FrangiC, FrangiParams, GrayImage};
use sclera_core::model::*;
use sclera_core::mrfo::{feature_select, mrfo_optimize, MrfoConfig};
use sclera_core::saliency::*;
use sclera_core::synthcohort::{read_manifest, render_participant, RenderOptions, View};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn sclera(args: &[&Path]) -> i32 {
    run(std::iter::once(std::ffi::OsStr::new("sclera")).chain(args.iter().map(|p| p.as_os_str())))
}

fn cmd(sub: &str, cfg: &Path, input: Option<&Path>, out: &Path) -> Result<(), String> {
    let mut args: Vec<&Path> = vec![Path::new(sub), Path::new("--config"), cfg];
    if let Some(i) = input {
        args.extend([Path::new("--input"), i]);
    }
    args.extend([Path::new("--out"), out]);
    match sclera(&args) {
        0 => Ok(()),
        code => Err(format!("sclera {sub} exited with {code}")),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn gray(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> f64) -> GrayImage {
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(f(x, y));
        }
    }
    GrayImage::new(w, h, data).unwrap()
}

fn random_input(seed: u64, size: usize) -> MultiViewInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = (0..5)
        .map(|_| GrayImage::new(size, size, (0..size * size).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    MultiViewInput::new(views).unwrap()
}

// ------------------------------------------------------------------ 1

fn gradient_integrity() -> Check {
    let c = ModelConfig::default();
    let p = build_model(&c, 31).map_err(|e| e.to_string())?;
    let xs: Vec<_> = (0..2).map(|i| random_input(100 + i, c.input_size)).collect();
    let refs: Vec<_> = xs.iter().collect();
    let scaler = GlucoseScaler { mean: 140.0, sd: 50.0 };
    let mask: Vec<f64> = (0..c.mask_len()).map(|i| (i % 3 != 0) as u8 as f64).collect();
    let to_nn = |e: ModelError| match e {
        ModelError::Nn(n) => n,
        other => NnError::ShapeMismatch(other.to_string()),
    };
    let report = grad_check(
        |g, p| {
            let n = forward(g, p, &c, &refs, Some(&mask)).map_err(to_nn)?;
            composite_loss(g, n.logits, n.glucose_z, &[0, 2], &[95.0, 220.0], &scaler, c.lambda_reg).map_err(to_nn)
        },
        &p,
        Coordinates::Sampled { count: 30, seed: 4 },
        1e-6,
    )
    .map_err(|e| e.to_string())?;
    ensure!(report.checked >= 20, "only {} coordinates checked", report.checked);
    ensure!(report.max_rel_err < 1e-5, "max relative error {:.3e}", report.max_rel_err);
    Ok(format!("{} coordinates, max rel err {:.2e}", report.checked, report.max_rel_err))
}

// ------------------------------------------------------------------ 2

/// Direct 2-D Gaussian smoothing, central-difference Hessian, closed-form
/// eigenvalues, per-scale c = half the largest Hessian norm.
fn frangi_oracle(img: &GrayImage, scales: &[f64], beta: f64) -> Vec<f64> {
    let (w, h) = (img.width() as isize, img.height() as isize);
    let inv: Vec<f64> = img.data().iter().map(|v| 1.0 - v).collect();
    let px = |x: isize, y: isize| inv[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
    let mut best = vec![0.0f64; (w * h) as usize];
    for &s in scales {
        let r = (3.0 * s).ceil() as isize;
        let norm: f64 = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).sum();
        let g = |i: isize| (-(i * i) as f64 / (2.0 * s * s)).exp() / norm;
        let mut sm = vec![0.0; (w * h) as usize];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        acc += g(dx) * g(dy) * px(x + dx, y + dy);
                    }
                }
                sm[(y * w + x) as usize] = acc;
            }
        }
        let f = |x: isize, y: isize| sm[(y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize];
        let mut eig = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let a = s * s * (f(x + 1, y) - 2.0 * f(x, y) + f(x - 1, y));
                let d = s * s * (f(x, y + 1) - 2.0 * f(x, y) + f(x, y - 1));
                let b = s * s * (f(x + 1, y + 1) - f(x + 1, y - 1) - f(x - 1, y + 1) + f(x - 1, y - 1)) / 4.0;
                let (tr, det) = (a + d, a * d - b * b);
                let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                let mut l = [tr / 2.0 + disc, tr / 2.0 - disc];
                l.sort_by(|p, q| p.abs().total_cmp(&q.abs()));
                eig.push(l);
            }
        }
        let c = 0.5 * eig.iter().map(|l| l[0].hypot(l[1])).fold(0.0, f64::max);
        for (i, l) in eig.iter().enumerate() {
            let v = if l[1] >= 0.0 || c == 0.0 {
                0.0
            } else {
                let rb = l[0] / l[1];
                (-rb * rb / (2.0 * beta * beta)).exp() * (1.0 - (-(l[0] * l[0] + l[1] * l[1]) / (2.0 * c * c)).exp())
            };
            best[i] = best[i].max(v);
        }
    }
    let peak = best.iter().copied().fold(0.0, f64::max);
    best.iter().map(|v| if peak > 0.0 { v / peak } else { 0.0 }).collect()
}

fn frangi_checks() -> Check {
    let params = FrangiParams::default();
    let flat = frangi(&GrayImage::constant(32, 32, 0.6), &params).map_err(|e| e.to_string())?;
    ensure!(flat.data.iter().all(|&v| v == 0.0), "constant image gave a non-zero map");

    let n = 48;
    let sr = 2.0;
    let ridge = gray(n, n, |x, _| 0.9 - 0.6 * (-(x as f64 - 24.0).powi(2) / (sr * sr)).exp());
    let at = |s: f64| vesselness_at_scale(&ridge, s, 0.5, FrangiC::Fixed(0.05))[24 * n + 24];
    let (lo, mid, hi) = (at(sr / 2.0), at(sr), at(2.0 * sr));
    ensure!(mid > 0.0 && mid >= lo && mid >= hi, "ridge responses {lo} / {mid} / {hi}");

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scene = gray(32, 32, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let d1 = (yf - 0.4 * xf - 6.0).abs() / 1.077;
        let d2 = (xf - 20.0 - 3.0 * (yf / 5.0).sin()).abs();
        (0.85 - 0.5 * (-d1 * d1 / 2.0).exp() - 0.4 * (-d2 * d2 / 4.0).exp() + 0.02 * rng.random::<f64>()).clamp(0.0, 1.0)
    });
    let map = frangi(&scene, &params).map_err(|e| e.to_string())?;
    let want = frangi_oracle(&scene, &params.scales, params.beta);
    let err = map.data.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(err <= 1e-6, "max deviation from the oracle {err:.3e}");
    Ok(format!("oracle max dev {err:.1e}, ridge {lo:.3}/{mid:.3}/{hi:.3}"))
}

// ------------------------------------------------------------------ 3

fn informative_problem(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>, Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize| {
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for _ in 0..n {
            let x: Vec<f64> = (0..10).map(|_| rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)).collect();
            let s = x[2] + x[7];
            ys.push(if s < -0.6 { 0 } else if s < 0.6 { 1 } else { 2 });
            xs.push(x);
        }
        (xs, ys)
    };
    let (tx, ty) = draw(150);
    let (vx, vy) = draw(90);
    (tx, ty, vx, vy)
}

/// Ridge weights from the explicit normal equations by Gauss-Jordan.
fn direct_ridge(x: &[Vec<f64>], y: &[usize], idx: &[usize], lambda: f64) -> Vec<Vec<f64>> {
    let k = idx.len() + 1;
    let mut a = vec![vec![0.0; k + 3]; k];
    for (r, &c) in x.iter().zip(y) {
        let z: Vec<f64> = idx.iter().map(|&i| r[i]).chain(std::iter::once(1.0)).collect();
        for i in 0..k {
            for j in 0..k {
                a[i][j] += z[i] * z[j];
            }
            a[i][k + c] += z[i];
        }
    }
    for (i, ai) in a.iter_mut().enumerate().take(k - 1) {
        ai[i] += lambda;
    }
    for col in 0..k {
        let piv = (col..k).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..k {
            if r != col {
                let m = a[r][col] / a[col][col];
                for c in col..k + 3 {
                    a[r][c] -= m * a[col][c];
                }
            }
        }
    }
    (0..k).map(|i| (0..3).map(|c| a[i][k + c] / a[i][i]).collect()).collect()
}

fn oracle_fitness(tx: &[Vec<f64>], ty: &[usize], vx: &[Vec<f64>], vy: &[usize], bits: &[bool]) -> f64 {
    let idx: Vec<usize> = (0..bits.len()).filter(|&i| bits[i]).collect();
    let w = direct_ridge(tx, ty, &idx, 1e-3);
    let pred: Vec<usize> = vx
        .iter()
        .map(|r| {
            let s: Vec<f64> =
                (0..3).map(|c| w[idx.len()][c] + idx.iter().enumerate().map(|(j, &i)| r[i] * w[j][c]).sum::<f64>()).collect();
            (0..3).fold(0, |b, c| if s[c] > s[b] { c } else { b })
        })
        .collect();
    let mut f1 = 0.0;
    for c in 0..3 {
        let tp = vy.iter().zip(&pred).filter(|(t, p)| **t == c && **p == c).count() as f64;
        let fp = vy.iter().zip(&pred).filter(|(t, p)| **t != c && **p == c).count() as f64;
        let fn_ = vy.iter().zip(&pred).filter(|(t, p)| **t == c && **p != c).count() as f64;
        f1 += if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fn_) };
    }
    -f1 / 3.0 + 0.01 * idx.len() as f64 / bits.len() as f64
}

fn mrfo_checks() -> Check {
    let mut worst_1d = 0.0f64;
    for seed in 0..10 {
        let cfg = MrfoConfig::uniform(1, -10.0, 10.0, 30, 100, seed);
        let res = mrfo_optimize(|x| (x[0] - 2.0).powi(2), &cfg).map_err(|e| e.to_string())?;
        worst_1d = worst_1d.max((res.best[0] - 2.0).abs());
    }
    let sphere: Vec<f64> = (0..10)
        .map(|seed| {
            let cfg = MrfoConfig::uniform(5, -5.0, 5.0, 30, 100, seed);
            mrfo_optimize(|x| x.iter().map(|v| v * v).sum(), &cfg).map(|r| r.best_fitness)
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let sphere_med = median(sphere);
    ensure!(worst_1d < 1e-3, "1-D quadratic: worst |x - 2| = {worst_1d:.2e}");
    ensure!(sphere_med < 1e-3, "5-D sphere median {sphere_med:.2e}");

    let (tx, ty, vx, vy) = informative_problem(11);
    let mut best: Option<(f64, usize, Vec<bool>)> = None;
    for code in 1u32..1024 {
        let bits: Vec<bool> = (0..10).map(|i| code >> (9 - i) & 1 == 1).collect();
        let f = oracle_fitness(&tx, &ty, &vx, &vy, &bits);
        let n = bits.iter().filter(|&&b| b).count();
        let better = match &best {
            None => true,
            Some((bf, bn, bb)) if (f - bf).abs() <= 1e-12 => (n, &bits) < (*bn, bb),
            Some((bf, _, _)) => f < *bf,
        };
        if better {
            best = Some((f, n, bits));
        }
    }
    let (_, _, want) = best.unwrap();
    let cfg = MrfoConfig::uniform(10, 0.0, 1.0, 30, 100, 5);
    let sel = feature_select(&tx, &ty, &vx, &vy, 3, &cfg, 0.01).map_err(|e| e.to_string())?;
    ensure!(sel.mask.bits() == &want[..], "selected {:?}, exhaustive optimum {:?}", sel.mask.indices(), want);
    Ok(format!("1-D worst {worst_1d:.1e}, sphere median {sphere_med:.1e}, mask {:?}", sel.mask.indices()))
}

// ------------------------------------------------------------------ 4

fn pair_oracle(scores: &[f64], pos: &[bool]) -> Option<f64> {
    let (mut num, mut np, mut nn) = (0.0, 0.0, 0.0);
    for (i, &pi) in pos.iter().enumerate() {
        if pi {
            np += 1.0;
        } else {
            nn += 1.0;
        }
        for (j, &pj) in pos.iter().enumerate() {
            if pi && !pj {
                num += match scores[i].total_cmp(&scores[j]) {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
    }
    (np > 0.0 && nn > 0.0).then(|| num / (np * nn))
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for inst in 0..50 {
        let n = rng.random_range(2..=200);
        let levels = if inst % 2 == 0 { 7 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let pos: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        let (got, want) = (auc_binary(&scores, &pos), pair_oracle(&scores, &pos));
        ensure!(got == want, "instance {inst}: AUC {got:?} vs pair count {want:?}");
    }
    // class-wise precision, recall and F1
    for (p, r, f) in [(0.934, 0.940, 0.937), (0.915, 0.921, 0.918), (0.948, 0.935, 0.942)] {
        let got = f1_score(p, r);
        ensure!((got - f).abs() <= 1e-3, "F1({p}, {r}) = {got:.4}, expected {f}");
    }
    for (correct, total, want) in [(141u32, 150u32, "0.940"), (129, 140, "0.921"), (145, 155, "0.935")] {
        let got = format!("{:.3}", correct as f64 / total as f64);
        ensure!(got == want, "recall {correct}/{total} = {got}, expected {want}");
    }
    let weighted = weighted_mean(&[0.937, 0.918, 0.942], &[150, 140, 155]);
    ensure!((weighted - 0.933).abs() <= 1e-3, "weighted F1 {weighted:.4}");
    Ok(format!("50 AUC instances exact, weighted F1 {weighted:.4}"))
}

// ------------------------------------------------------------------ 5

fn bland_altman_checks() -> Check {
    let (lo, hi) = limits_of_agreement(1.45, 4.99);
    ensure!((lo + 8.33).abs() <= 0.01 && (hi - 11.23).abs() <= 0.01, "LoA ({lo:.4}, {hi:.4})");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let n = rng.random_range(2..150);
        let truth: Vec<f64> = (0..n).map(|_| rng.random_range(60.0..300.0)).collect();
        let pred: Vec<f64> = truth.iter().map(|t| t + rng.random_range(-25.0..25.0)).collect();
        let b = bland_altman(&pred, &truth).map_err(|e| e.to_string())?;
        let width = b.loa_high - b.loa_low;
        ensure!((width - 3.92 * b.sd).abs() <= 1e-12 * b.sd.max(1.0), "width {width} vs 3.92 sd {}", 3.92 * b.sd);
    }
    Ok(format!("LoA ({lo:.2}, {hi:.2}), width identity on 200 samples"))
}

// ------------------------------------------------------------------ 6

fn splitting_checks() -> Check {
    let mut people = Vec::new();
    for (c, n) in [150, 140, 155].into_iter().enumerate() {
        for i in 0..n {
            people.push((format!("C{c}-{i:03}"), c));
        }
    }
    for seed in 0..100u64 {
        let f = group_kfold(&people, 5, seed).map_err(|e| e.to_string())?;
        let mut seen = BTreeMap::new();
        for g in 0..5 {
            let ids = f.group(g);
            ensure!(ids.len() == 89, "seed {seed} fold {g} has {} participants", ids.len());
            let counts: Vec<usize> = (0..3).map(|c| ids.iter().filter(|id| id.starts_with(&format!("C{c}-"))).count()).collect();
            ensure!(counts == [30, 28, 31], "seed {seed} fold {g} class counts {counts:?}");
            for id in ids {
                if let Some(prev) = seen.insert(id.to_string(), g) {
                    return Err(format!("seed {seed}: {id} in folds {prev} and {g}"));
                }
            }
        }
        ensure!(seen.len() == 445, "seed {seed}: {} participants assigned", seen.len());
        f.validate().map_err(|e| format!("seed {seed}: {e}"))?;
    }
    Ok("100 seeds, 5 x 89 with (30, 28, 31)".into())
}

// ------------------------------------------------------------------ 7 / 10

struct Workspace {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    cohort: PathBuf,
    prep: PathBuf,
    run: PathBuf,
}

const SEED: u64 = 2024;

fn end_to_end(ws: &mut Option<Workspace>) -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    std::fs::write(&config, format!("seed = {SEED}\n")).map_err(|e| e.to_string())?;
    let (cohort, prep, run_dir) = (tmp.path().join("cohort"), tmp.path().join("prep"), tmp.path().join("run"));
    let t = Instant::now();
    cmd("synth", &config, None, &cohort)?;
    cmd("preprocess", &config, Some(&cohort), &prep)?;
    cmd("train-eval", &config, Some(&prep), &run_dir)?;
    let secs = t.elapsed().as_secs_f64();
    *ws = Some(Workspace { _tmp: tmp, config, cohort, prep, run: run_dir.clone() });

    let report: MetricsReport = serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let acc = report.classification.accuracy;
    let r = report.regression.pearson_r.unwrap_or(f64::NAN);
    let ci = &report.accuracy_ci;
    let detail = format!(
        "{} participants, accuracy {acc:.4} [{:.4}, {:.4}], r {r:.4}, MAE {:.2} mg/dL, B = {}, {secs:.0} s",
        report.n_participants, ci.lo, ci.hi, report.regression.mae, report.bootstrap_resamples
    );
    ensure!(report.n_participants == 445, "{detail}: expected 445 participants");
    ensure!(secs <= 1800.0, "{detail}: over 30 min");
    ensure!(acc >= 0.85, "{detail}: accuracy below 0.85");
    ensure!(r >= 0.90, "{detail}: r below 0.90");
    ensure!(report.bootstrap_resamples == 1000 && ci.lo <= acc && acc <= ci.hi, "{detail}: bootstrap CI malformed");
    Ok(detail)
}

fn ensure_workspace(ws: &mut Option<Workspace>) -> Result<&Workspace, String> {
    if ws.is_none() {
        end_to_end(ws).map_err(|e| format!("end-to-end prerequisite failed: {e}"))?;
    }
    Ok(ws.as_ref().unwrap())
}

fn determinism(ws: &mut Option<Workspace>) -> Check {
    let ws = ensure_workspace(ws)?;
    let again = ws.run.with_file_name("run_again");
    cmd("train-eval", &ws.config, Some(&ws.prep), &again)?;
    let mut files = vec![PathBuf::from("report.json")];
    let mut names: Vec<_> = std::fs::read_dir(ws.run.join("models")).map_err(|e| e.to_string())?.map(|e| e.unwrap().file_name()).collect();
    names.sort();
    files.extend(names.iter().map(|n| Path::new("models").join(n)));
    let checkpoints = files.iter().filter(|f| f.extension().is_some_and(|e| e == "ckpt")).count();
    ensure!(checkpoints == 5, "expected 5 checkpoints, found {checkpoints}");
    for f in &files {
        let (a, b) = (std::fs::read(ws.run.join(f)), std::fs::read(again.join(f)));
        ensure!(matches!((&a, &b), (Ok(x), Ok(y)) if x == y), "{} differs between runs", f.display());
    }
    Ok(format!("report.json and {} model files byte-identical", files.len() - 1))
}

// ------------------------------------------------------------------ 8

fn ablation_direction(ws: &mut Option<Workspace>) -> Check {
    let ws = ensure_workspace(ws)?;
    let epochs: usize = std::env::var("ACCEPTANCE_ABLATION_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(20);
    let mut mae: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for seed in [11u64, 12, 13] {
        let cfg = ws.run.with_file_name(format!("ablate_{seed}.toml"));
        std::fs::write(&cfg, format!("seed = {seed}\nepochs = {epochs}\n")).map_err(|e| e.to_string())?;
        let out = ws.run.with_file_name(format!("ablate_{seed}"));
        cmd("ablate", &cfg, Some(&ws.prep), &out)?;
        let mut digests = Vec::new();
        for v in Variant::ALL {
            let text = std::fs::read_to_string(out.join("reports").join(format!("{}.json", v.as_str()))).map_err(|e| e.to_string())?;
            let rep: MetricsReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
            digests.push(rep.fold_digest);
            mae.entry(v.as_str().to_string()).or_default().push(rep.regression.mae);
        }
        ensure!(digests.windows(2).all(|w| w[0] == w[1]), "seed {seed}: variants ran on different folds");
    }
    let med: BTreeMap<&str, f64> = mae.iter().map(|(k, v)| (k.as_str(), median(v.clone()))).collect();
    let summary = Variant::ALL.iter().map(|v| format!("{} {:.2}", v.as_str(), med[v.as_str()])).collect::<Vec<_>>().join(", ");
    let detail = format!("median MAE mg/dL over 3 seeds at {epochs} epochs: {summary}");
    ensure!(med["single_view"] > med["full"], "{detail}");
    Ok(detail)
}

// ------------------------------------------------------------------ 9

fn tiny(variant: Variant, fusion: usize) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        branch_channels: vec![2, 2, 2],
        embed_dim: 2,
        fusion_dim: fusion,
        fusion_layers: 1,
        fusion_heads: 1,
        lambda_reg: 1.0,
        variant,
    }
}

fn set(p: &mut ParamStore, name: &str, values: &[f64]) {
    p.get_mut(name).unwrap().data_mut().copy_from_slice(values);
}

fn trained(config: ModelConfig, params: ParamStore) -> TrainedModel {
    TrainedModel { config, params, scaler: GlucoseScaler { mean: 140.0, sd: 50.0 }, mask: None }
}

/// Logit 0 is `c · mean(maxpool(A_1))`, so both maps must equal channel 1.
fn analytic_single_channel() -> Result<(), String> {
    let cfg = tiny(Variant::SingleView, 2);
    let mut p = build_model(&cfg, 6).map_err(|e| e.to_string())?;
    set(&mut p, "branch0.conv2.bias", &[0.0, 0.3]);
    set(&mut p, "branch0.embed.weight", &[0.0, 0.0, 1.0, 0.0]);
    set(&mut p, "branch0.embed.bias", &[0.0, 0.0]);
    set(&mut p, "fusion.dense.weight", &[1.0, 0.0, 0.0, 0.0]);
    set(&mut p, "fusion.dense.bias", &[0.0, 0.0]);
    set(&mut p, "head.class.weight", &[2.5, 0.0, 0.0, 0.0, 0.0, 0.0]);
    let m = trained(cfg, p);
    let x = random_input(1, 16);
    let (acts, _, _) = layer_gradients(&m, &x, Target::Class(0), View::Straight, 2).map_err(|e| e.to_string())?;
    let ch1 = &acts.data()[16..32];
    let max = ch1.iter().copied().fold(0.0, f64::max);
    ensure!(max > 0.0, "channel 1 is empty");
    for method in Method::ALL {
        let h = class_activation_map(&m, &x, Target::Class(0), View::Straight, 2, method).map_err(|e| e.to_string())?;
        let err = h.values.iter().zip(ch1).map(|(a, b)| (a - b / max).abs()).fold(0.0, f64::max);
        ensure!(err < 1e-12, "{method}: analytic case off by {err:.2e}");
    }
    Ok(())
}

fn logit_from_activation(p: &ParamStore, a: &Tensor, target: usize) -> f64 {
    let mut g = Graph::new();
    let x = g.leaf(a.clone());
    let x = g.max_pool2(x).unwrap();
    let x = g.global_avg_pool(x).unwrap();
    let dense = |g: &mut Graph, x, w: &str, b: &str| {
        let w = g.param(p, w).unwrap();
        let b = g.param(p, b).unwrap();
        g.affine(x, w, b).unwrap()
    };
    let e = dense(&mut g, x, "branch0.embed.weight", "branch0.embed.bias");
    let f = dense(&mut g, e, "fusion.dense.weight", "fusion.dense.bias");
    let f = g.relu(f);
    let l = dense(&mut g, f, "head.class.weight", "head.class.bias");
    g.value(l).data()[target]
}

/// Largest |alpha - alpha_fd| over positive-gradient cells, where alpha_fd
/// uses central differences of `exp(logit)`.
fn fd_alpha_deviation() -> Result<f64, String> {
    let cfg = tiny(Variant::SingleView, 3);
    let mut p = build_model(&cfg, 41).map_err(|e| e.to_string())?;
    for b in ["branch0.conv0.bias", "branch0.conv1.bias", "branch0.conv2.bias"] {
        set(&mut p, b, &[1.0, 1.0]);
    }
    let m = trained(cfg.clone(), p.clone());
    let h = 1e-3;
    let mut worst = 0.0f64;
    let mut compared = 0;
    for seed in 0..3 {
        let x = random_input(seed, 16);
        let mut g = Graph::new();
        let nodes = forward(&mut g, &p, &cfg, &[&x], None).map_err(|e| e.to_string())?;
        let a = g.value(nodes.feature_maps[0][2]).clone();
        let sum_a: Vec<f64> = (0..2).map(|k| a.data()[k * 16..(k + 1) * 16].iter().sum()).collect();
        for target in 0..3 {
            let s0 = logit_from_activation(&p, &a, target);
            let y = |i: usize, d: f64| {
                let mut t = a.clone();
                t.data_mut()[i] += d;
                (logit_from_activation(&p, &t, target) - s0).exp()
            };
            let (acts, grads, _) = layer_gradients(&m, &x, Target::Class(target), View::Straight, 2).map_err(|e| e.to_string())?;
            for k in 0..2 {
                let r = k * 16..(k + 1) * 16;
                let alpha = gradcampp_alpha(&acts.data()[r.clone()], &grads.data()[r]);
                for j in 0..16 {
                    let i = k * 16 + j;
                    if grads.data()[i] <= 0.0 {
                        continue;
                    }
                    let (p1, m1, p2, m2) = (y(i, h), y(i, -h), y(i, 2.0 * h), y(i, -2.0 * h));
                    let d2 = (p1 - 2.0 + m1) / (h * h);
                    let d3 = (p2 - 2.0 * p1 + 2.0 * m1 - m2) / (2.0 * h * h * h);
                    let den = 2.0 * d2 + sum_a[k] * d3;
                    let want = if den.abs() > 1e-12 { d2 / den } else { 0.0 };
                    worst = worst.max((alpha[j] - want).abs());
                    compared += 1;
                }
            }
        }
    }
    ensure!(compared > 0, "no positive-gradient cells to compare");
    Ok(worst)
}

fn saliency_checks(ws: &mut Option<Workspace>) -> Check {
    analytic_single_channel()?;
    let alpha_dev = fd_alpha_deviation()?;
    ensure!(alpha_dev <= 1e-4, "Grad-CAM++ alpha deviates from finite differences by {alpha_dev:.2e}");

    let ws = ensure_workspace(ws)?;
    let cohort = read_manifest(&ws.cohort).map_err(|e| e.to_string())?;
    let prep = read_manifest(&ws.prep).map_err(|e| e.to_string())?;
    let folds: BTreeMap<String, usize> = csv::Reader::from_path(ws.run.join("folds.csv"))
        .map_err(|e| e.to_string())?
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[1].parse().unwrap())
        })
        .collect();
    let mut models = BTreeMap::new();
    let mut ratios: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(ws.run.join("predictions.csv")).map_err(|e| e.to_string())?;
    for row in rdr.records() {
        let row = row.map_err(|e| e.to_string())?;
        if &row[2] != "high_glucose" || &row[3] != "high_glucose" {
            continue;
        }
        let id = &row[0];
        let fold = folds[id];
        if !models.contains_key(&fold) {
            models.insert(fold, TrainedModel::load(&ws.run.join("models"), &format!("fold{fold}")).map_err(|e| e.to_string())?);
        }
        let model = &models[&fold];
        let rec = prep.get(id).ok_or_else(|| format!("{id} missing from the preprocessed manifest"))?;
        let views: Vec<GrayImage> = rec
            .views
            .iter()
            .map(|e| load_image(&ws.prep.join(&e.image_path)).map(|r| to_gray(&r)))
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let x = MultiViewInput::new(views).map_err(|e| e.to_string())?;
        let raw = cohort.get(id).ok_or_else(|| format!("{id} missing from the cohort"))?;
        let rendered = render_participant(raw, cohort.seed, RenderOptions::default());
        for method in Method::ALL {
            let mut per_view = Vec::new();
            for e in &raw.views {
                let heat = class_activation_map(model, &x, Target::Predicted, e.view, 2, method).map_err(|e| e.to_string())?;
                let mask = rendered.vessel_masks[e.view.index()].crop(e.roi).map_err(|e| e.to_string())?;
                if let Some(q) = vessel_ratio(&heat, &mask) {
                    per_view.push(q);
                }
            }
            if !per_view.is_empty() {
                ratios.entry(method).or_default().push(median(per_view));
            }
        }
    }
    let n = ratios.get(&Method::GradCam).map_or(0, Vec::len);
    let med: BTreeMap<Method, f64> = ratios.iter().map(|(m, v)| (*m, median(v.clone()))).collect();
    let detail = format!(
        "analytic exact, alpha dev {alpha_dev:.1e}, {n} participants, median on/off ratio Grad-CAM {:.3}, Grad-CAM++ {:.3}",
        med.get(&Method::GradCam).copied().unwrap_or(f64::NAN),
        med.get(&Method::GradCamPp).copied().unwrap_or(f64::NAN)
    );
    ensure!(n >= 30, "{detail}: fewer than 30 participants");
    for m in Method::ALL {
        ensure!(med.get(&m).is_some_and(|&r| r >= 1.2), "{detail}: {m} below 1.2");
    }
    Ok(detail)
}

// ------------------------------------------------------------------

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));

    let mut ws: Option<Workspace> = None;
    let criteria: [(&str, &dyn Fn(&mut Option<Workspace>) -> Check); 10] = [
        ("gradient integrity", &|_| gradient_integrity()),
        ("Frangi oracle", &|_| frangi_checks()),
        ("MRFO convergence and wrapper optimum", &|_| mrfo_checks()),
        ("metric oracles", &|_| metric_oracles()),
        ("Bland-Altman consistency", &|_| bland_altman_checks()),
        ("leakage-free splitting", &|_| splitting_checks()),
        ("end-to-end synthetic run", &end_to_end),
        ("ablation direction", &ablation_direction),
        ("saliency sanity", &saliency_checks),
        ("determinism", &determinism),
    ];
    let limits = [Some(60.0), Some(10.0), Some(120.0), None, None, None, None, None, None, None];

    let mut failed = 0;
    for (i, ((name, check), limit)) in criteria.iter().zip(limits).enumerate() {
        let n = i + 1;
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut ws))).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t.elapsed().as_secs_f64();
        let outcome = match (outcome, limit) {
            (Ok(d), Some(l)) if secs >= l => Err(format!("{d}; took {secs:.1} s, limit {l} s")),
            (o, _) => o,
        };
        match outcome {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d} ({secs:.1} s)"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {d} ({secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
