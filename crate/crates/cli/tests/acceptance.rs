//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::fs;
use std::process::{Command, ExitCode};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use repalign_core::encode::{brain_score, fisher_combine, make_folds, ridge_solve, RidgeConfig};
use repalign_core::reduce::{pca_fit, pca_transform};
use repalign_core::repgeo::{build_rdm, cka_unbiased, gw_distance, gw_permutation_oracle, GwSolverConfig, MassVector, Rdm};
use repalign_core::stats::{bonferroni, wilcoxon_signed_rank};
use repalign_core::synth::{ablate_structure, gen_isometric_pair, gen_linear_pair, AblationMode, SynthSpec};
use repalign_core::tensorio::{ActivationTensor, Condition, ResponseMatrix, Unit};

type Check = Result<String, String>;

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ridge_oracle() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, v) = (rng.random_range(2..=50), rng.random_range(1..=50), rng.random_range(1..=50));
        let lambda = 10f64.powf(rng.random_range(-2.0..1.0));
        let x = gaussian(n, d, &mut rng);
        let y = gaussian(n, v, &mut rng);
        let w = ridge_solve(&x, &y, lambda).map_err(|e| e.to_string())?;
        let inv = (x.transpose() * &x + DMatrix::identity(d, d) * lambda)
            .try_inverse()
            .ok_or("closed form not invertible")?;
        let closed = inv * x.transpose() * &y;
        worst = worst.max((w - closed).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst <= 1e-8, || format!("max |Δ| = {worst:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.1} s"))?;
    Ok(format!("100 instances, max |Δ| = {worst:.1e}, {secs:.2} s"))
}

fn random_rdm(n: usize, rng: &mut ChaCha8Rng) -> Rdm {
    let mut c = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            let v: f64 = rng.random_range(0.0..2.0);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    Rdm::new(c).unwrap()
}

fn gw_checks() -> Check {
    let start = Instant::now();
    let cfg = GwSolverConfig::default();
    let err = |e: repalign_core::Error| e.to_string();
    let mut worst_self = 0.0f64;
    let mut worst_iso = 0.0f64;
    for (k, n) in [3usize, 5, 10, 20, 30].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let c = build_rdm(&gaussian(n, 6, &mut rng), None).map_err(err)?;
        let u = MassVector::uniform(n);
        worst_self = worst_self.max(gw_distance(&c, &c, &u, &u, &cfg).map_err(err)?.loss);

        let pair = gen_isometric_pair(n, 4, 100 + k as u64).map_err(err)?;
        let dims = Some(4.min(n - 1));
        let (ra, rb) = (build_rdm(&pair.a, dims).map_err(err)?, build_rdm(&pair.b, dims).map_err(err)?);
        worst_iso = worst_iso.max(gw_distance(&ra, &rb, &u, &u, &cfg).map_err(err)?.loss);
    }
    ensure(worst_self <= 1e-6, || format!("self loss {worst_self:e}"))?;
    ensure(worst_iso <= 1e-6, || format!("isometry loss {worst_iso:e}"))?;

    let a = Rdm::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).map_err(err)?;
    let b = Rdm::new(DMatrix::from_row_slice(2, 2, &[0.0, 2.0, 2.0, 0.0])).map_err(err)?;
    let u2 = MassVector::uniform(2);
    let two = gw_distance(&a, &b, &u2, &u2, &cfg).map_err(err)?.loss;
    ensure((two - 0.5).abs() <= 1e-6, || format!("two-point loss {two}"))?;

    let mut worst_gap = f64::NEG_INFINITY;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        for n in 2..=6 {
            let (c1, c2) = (random_rdm(n, &mut rng), random_rdm(n, &mut rng));
            let u = MassVector::uniform(n);
            let solver = gw_distance(&c1, &c2, &u, &u, &cfg).map_err(err)?.loss;
            let oracle = gw_permutation_oracle(&c1, &c2).map_err(err)?;
            worst_gap = worst_gap.max(solver - oracle);
        }
    }
    ensure(worst_gap <= 1e-6, || format!("solver exceeds permutation oracle by {worst_gap:e}"))?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!(
        "self ≤ {worst_self:.1e}, isometry ≤ {worst_iso:.1e}, two-point {two:.9}, max(solver − oracle) = {worst_gap:.1e} over 250, {secs:.1} s"
    ))
}

/// HSIC as the average over ordered distinct quadruples (i, j, q, r) of
/// `k_ij l_ij + k_ij l_qr − 2 k_ij l_iq`.
fn hsic_by_quadruples(k: &DMatrix<f64>, l: &DMatrix<f64>) -> f64 {
    let n = k.nrows();
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (0..n).filter(|&j| j != i) {
            for q in (0..n).filter(|&q| q != i && q != j) {
                for r in (0..n).filter(|&r| r != i && r != j && r != q) {
                    sum += k[(i, j)] * l[(i, j)] + k[(i, j)] * l[(q, r)] - 2.0 * k[(i, j)] * l[(i, q)];
                    count += 1;
                }
            }
        }
    }
    sum / count as f64
}

fn cka_checks() -> Check {
    let err = |e: repalign_core::Error| e.to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(40, 6, &mut rng);
    let self_dev = (cka_unbiased(&x, &x).map_err(err)? - 1.0).abs();
    ensure(self_dev <= 1e-9, || format!("self deviation {self_dev:e}"))?;
    let q = gaussian(6, 6, &mut rng).qr().q();
    let rot_dev = (cka_unbiased(&x, &(&x * q)).map_err(err)? - 1.0).abs();
    let scale_dev = (cka_unbiased(&x, &(&x * 3.7)).map_err(err)? - 1.0).abs();
    ensure(rot_dev <= 1e-6 && scale_dev <= 1e-6, || format!("rotation {rot_dev:e}, scale {scale_dev:e}"))?;

    let mut worst_noise = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (a, b) = (gaussian(100, 10, &mut rng), gaussian(100, 10, &mut rng));
        worst_noise = worst_noise.max(cka_unbiased(&a, &b).map_err(err)?.abs());
    }
    ensure(worst_noise < 0.15, || format!("max |CKA| on noise {worst_noise}"))?;

    let mut worst_oracle = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
        let (a, b) = (gaussian(10, 3, &mut rng), gaussian(10, 4, &mut rng));
        let (ka, kb) = (&a * a.transpose(), &b * b.transpose());
        let oracle = hsic_by_quadruples(&ka, &kb) / (hsic_by_quadruples(&ka, &ka) * hsic_by_quadruples(&kb, &kb)).sqrt();
        worst_oracle = worst_oracle.max((cka_unbiased(&a, &b).map_err(err)? - oracle).abs());
    }
    ensure(worst_oracle <= 1e-10, || format!("oracle deviation {worst_oracle:e}"))?;
    Ok(format!(
        "self {self_dev:.0e}, rotation {rot_dev:.0e}, scale {scale_dev:.0e}, noise max {worst_noise:.3}, oracle {worst_oracle:.0e}"
    ))
}

/// Two-sided exact p by enumerating all sign patterns over average ranks.
fn wilcoxon_by_enumeration(x: &[f64], y: &[f64]) -> f64 {
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|v| *v != 0.0).collect();
    let abs: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    let rank = |v: f64| {
        let less = abs.iter().filter(|a| **a < v).count() as f64;
        let equal = abs.iter().filter(|a| **a == v).count() as f64;
        less + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = abs.iter().map(|a| rank(*a)).collect();
    let total: f64 = ranks.iter().sum();
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    let t = w_plus.min(total - w_plus);
    let n = d.len();
    let hits = (0u32..1 << n)
        .filter(|mask| {
            let w: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
            w <= t + 1e-9
        })
        .count();
    (2.0 * hits as f64 / (1u64 << n) as f64).min(1.0)
}

fn fisher_wilcoxon_checks() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_fisher = 0.0f64;
    for _ in 0..200 {
        let m = rng.random_range(1..=30);
        let p: Vec<f64> = (0..m).map(|_| rng.random_range(1e-6..1.0)).collect();
        let stat = -2.0 * p.iter().map(|v| v.ln()).sum::<f64>();
        let oracle = ChiSquared::new(2.0 * m as f64).unwrap().sf(stat);
        let got = fisher_combine(&p).map_err(|e| e.to_string())?;
        worst_fisher = worst_fisher.max((got - oracle).abs());
    }
    ensure(worst_fisher <= 1e-9, || format!("Fisher deviation {worst_fisher:e}"))?;

    let mut worst_wilcoxon = 0.0f64;
    let mut checked = 0;
    for trial in 0..300 {
        let n = rng.random_range(5..=12);
        // Rounded values produce ties on some trials.
        let digits = if trial % 3 == 0 { 1.0 } else { 1e6 };
        let x: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * digits).round() / digits).collect();
        let y: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * digits).round() / digits).collect();
        let nonzero = x.iter().zip(&y).filter(|(a, b)| a != b).count();
        if nonzero < 5 {
            continue;
        }
        let got = wilcoxon_signed_rank(&x, &y).map_err(|e| e.to_string())?.p;
        worst_wilcoxon = worst_wilcoxon.max((got - wilcoxon_by_enumeration(&x, &y)).abs());
        checked += 1;
    }
    ensure(worst_wilcoxon <= 1e-9, || format!("Wilcoxon deviation {worst_wilcoxon:e}"))?;
    Ok(format!(
        "Fisher max |Δ| = {worst_fisher:.0e} (200 sets), Wilcoxon max |Δ| = {worst_wilcoxon:.0e} ({checked} samples, n ≤ 12)"
    ))
}

fn score(x: &ActivationTensor, y: &ResponseMatrix, lambda: f64, seed: u64) -> Result<f64, String> {
    let folds = make_folds(x.n_stimuli(), 5, seed).map_err(|e| e.to_string())?;
    let cfg = RidgeConfig { lambda, ..Default::default() };
    brain_score(x, y, &folds, &cfg, 1.0).map(|r| r.brain_score).map_err(|e| e.to_string())
}

fn pipeline_contrasts() -> Check {
    let err = |e: repalign_core::Error| e.to_string();
    let noiseless = SynthSpec {
        n_stimuli: 200,
        d_source: 12,
        d_target: 16,
        noise_sigma: 0.0,
        shared_rank: 12,
        seed: 1,
    };
    let pair = gen_linear_pair(&noiseless).map_err(err)?;
    let clean = score(&pair.activations, &pair.responses, 1e-8, 0)?;
    ensure(clean > 0.99, || format!("noiseless score {clean}"))?;
    let shuffled = ablate_structure(&pair.activations, AblationMode::RowShuffle, 3).map_err(err)?;
    let ablated = score(&shuffled, &pair.responses, 1e-8, 0)?;
    ensure(ablated < 0.2 * clean, || format!("ablated {ablated} vs {clean}"))?;

    let mut worst_null = 0.0f64;
    for seed in 0..20u64 {
        let control = gen_linear_pair(&SynthSpec { shared_rank: 0, noise_sigma: 1.0, seed, ..noiseless }).map_err(err)?;
        worst_null = worst_null.max(score(&control.activations, &control.responses, 0.2, seed)?.abs());
    }
    ensure(worst_null < 0.1, || format!("null control |score| {worst_null}"))?;

    let (mut intact, mut ablate, mut null) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..20u64 {
        let spec = SynthSpec {
            n_stimuli: 120,
            d_source: 10,
            d_target: 15,
            noise_sigma: 1.0,
            shared_rank: 5,
            seed,
        };
        let p = gen_linear_pair(&spec).map_err(err)?;
        let s = ablate_structure(&p.activations, AblationMode::RowShuffle, seed).map_err(err)?;
        let c = gen_linear_pair(&SynthSpec { shared_rank: 0, ..spec }).map_err(err)?;
        intact.push(score(&p.activations, &p.responses, 0.2, seed)?);
        ablate.push(score(&s, &p.responses, 0.2, seed)?);
        null.push(score(&c.activations, &c.responses, 0.2, seed)?);
    }
    let raw = [
        wilcoxon_signed_rank(&ablate, &intact).map_err(err)?.p,
        wilcoxon_signed_rank(&null, &intact).map_err(err)?.p,
        wilcoxon_signed_rank(&null, &ablate).map_err(err)?.p,
    ];
    let corrected = bonferroni(&raw).map_err(err)?;
    ensure(corrected[0] < 0.01, || format!("ablation gap corrected p = {}", corrected[0]))?;
    Ok(format!(
        "noiseless {clean:.4}, ablated {ablated:.3}, null max |s| {worst_null:.3}, ablation gap p_bonf = {:.1e}",
        corrected[0]
    ))
}

/// Brain scores with the 50 leading response components as targets versus
/// all voxels, signal planted at rank 50.
fn pca_robustness() -> Check {
    let (n, d, v, rank) = (300, 60, 200, 50);
    let mut worst = 0.0f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let latent = gaussian(n, rank, &mut rng);
        let scale = 1.0 / (rank as f64).sqrt();
        let x = &latent * gaussian(rank, d, &mut rng) * scale + gaussian(n, d, &mut rng);
        let y = &latent * gaussian(rank, v, &mut rng) * scale + gaussian(n, v, &mut rng);
        let xt = ActivationTensor::new(x.map(|v| v as f32), "m", Unit::Layer, 0, Condition::Pos).map_err(|e| e.to_string())?;
        let full = ResponseMatrix::new(y.map(|v| v as f32), "s", None).map_err(|e| e.to_string())?;
        let model = pca_fit(&y, 50).map_err(|e| e.to_string())?;
        let z = pca_transform(&model, &y).map_err(|e| e.to_string())?;
        let reduced = ResponseMatrix::new(z.map(|v| v as f32), "s", None).map_err(|e| e.to_string())?;
        let (a, b) = (score(&xt, &full, 0.2, seed)?, score(&xt, &reduced, 0.2, seed)?);
        worst = worst.max((a - b).abs());
    }
    ensure(worst < 0.1, || format!("max |full − pca| = {worst}"))?;
    Ok(format!("10 seeds, planted rank 50, max |full − pca| = {worst:.3}"))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = json!({
        "seed": 2,
        "pipelines": ["synth", "reliability", "score", "pca", "cka", "gw", "stats"],
        "synth": {"n_stimuli": 30, "n_layers": 3, "n_subjects": 3, "n_voxels": 16, "n_signal_voxels": 12},
        "pca": {"components": 8},
        "gw": {"solver": {"restarts": 1}}
    });
    let path = dir.path().join("cfg.json");
    fs::write(&path, cfg.to_string()).map_err(|e| e.to_string())?;
    let out = dir.path().join("out");
    let run = || -> Result<(Value, Vec<u8>), String> {
        let o = Command::new(env!("CARGO_BIN_EXE_repalign"))
            .args(["run", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env_remove("REPALIGN_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        let text = fs::read_to_string(out.join("report.json")).map_err(|e| e.to_string())?;
        let mut report: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        report.as_object_mut().unwrap().remove("timestamp");
        Ok((report, fs::read(out.join("summary.csv")).map_err(|e| e.to_string())?))
    };
    let (r1, s1) = run()?;
    let (r2, s2) = run()?;
    let (b1, b2) = (serde_json::to_vec_pretty(&r1).unwrap(), serde_json::to_vec_pretty(&r2).unwrap());
    ensure(b1 == b2, || "report.json differs between reruns".into())?;
    ensure(s1 == s2, || "summary.csv differs between reruns".into())?;
    Ok(format!("two reruns, {} report bytes identical (timestamp excluded)", b1.len()))
}

fn main() -> ExitCode {
    let checks: [(&str, fn() -> Check); 7] = [
        ("ridge oracle", ridge_oracle),
        ("GW self/isometry/oracle bound", gw_checks),
        ("CKA invariances", cka_checks),
        ("Fisher/chi2 and Wilcoxon", fisher_wilcoxon_checks),
        ("pipeline contrasts", pipeline_contrasts),
        ("PCA robustness", pca_robustness),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail}");
            }
        }
    }
    println!("{} of {} criteria passed", checks.len() - failed, checks.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
