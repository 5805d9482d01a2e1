//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use conflict_exposure::data::{select_spatial_subset, CellMonthRecord, GridCell, SplitSpec};
use conflict_exposure::features::{forward_select, FeatureMatrix, ForestScorer, SubsetScorer, FEATURE_NAMES};
use conflict_exposure::forest::ForestConfig;
use conflict_exposure::gp::{
    decomposition_error, kernel_eval, log_marginal_likelihood, Factor, GpModel, HyperPrior, Inputs, KernelSpec,
    OptimizerOptions, Predictor,
};
use conflict_exposure::metrics::{average_precision, roc_auc};
use conflict_exposure::spatial::estimate_sce_month;
use conflict_exposure::synth::two_trend_timelines;
use conflict_exposure::temporal::{extrapolate_all, fit_tce};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_time(started: Instant, limit: Duration, detail: String) -> Outcome {
    let t = started.elapsed();
    if t <= limit {
        Ok(format!(
            "{detail}; {:.1}s (limit {}s)",
            t.as_secs_f64(),
            limit.as_secs()
        ))
    } else {
        Err(format!(
            "{detail}; took {:.1}s, limit {}s",
            t.as_secs_f64(),
            limit.as_secs()
        ))
    }
}

fn random_model(rng: &mut ChaCha8Rng, kinds: &str) -> GpModel {
    let mut spec = |matern: bool| {
        let l = rng.random_range(0.5..8.0);
        let a = rng.random_range(0.3..2.0);
        if matern {
            KernelSpec::matern32(l, a)
        } else {
            KernelSpec::se(l, a)
        }
    };
    let comps = match kinds {
        "se" => vec![spec(false)],
        "matern32" => vec![spec(true)],
        _ => vec![spec(false), spec(true)],
    };
    GpModel::new(comps, rng.random_range(0.1..1.0)).unwrap()
}

fn kernel_correctness() -> Outcome {
    let started = Instant::now();
    let se = kernel_eval(&KernelSpec::se(1.0, 1.0), 1.0);
    let m32 = kernel_eval(&KernelSpec::matern32(1.0, 1.0), 1.0);
    let se_hand = (-0.5f64).exp();
    let m32_hand = (1.0 + 3f64.sqrt()) * (-(3f64.sqrt())).exp();
    let mut failures = Vec::new();
    if (se - 0.606_531).abs() >= 1e-6 || (se - se_hand).abs() >= 1e-12 {
        failures.push(format!("SE(1) = {se}"));
    }
    if (m32 - 0.483_357_7).abs() >= 1e-6 || (m32 - m32_hand).abs() >= 1e-12 {
        failures.push(format!("Matérn(1) = {m32}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut jittered = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..=50);
        let kinds = ["se", "matern32", "sum"][i % 3];
        let model = random_model(&mut rng, kinds);
        let x = if i % 2 == 0 {
            // clustered 1D points, some duplicated
            Inputs::from_1d(
                &(0..n)
                    .map(|_| (rng.random_range(0.0..3.0f64) * 4.0).round() / 4.0)
                    .collect::<Vec<_>>(),
            )
        } else {
            Inputs::from_2d(
                &(0..n)
                    .map(|_| [rng.random_range(0.0..2.0), rng.random_range(0.0..2.0)])
                    .collect::<Vec<_>>(),
            )
        };
        match Factor::new(&model, &x) {
            Ok(f) => {
                if f.relative_jitter > 1e-8 {
                    jittered += 1;
                }
            }
            Err(e) => failures.push(format!("gram {i}: {e}")),
        }
    }
    let detail = format!(
        "SE(1)={se:.7}, Matérn(1)={m32:.7} (hand (1+√3)e^(−√3)={m32_hand:.7}; the listed 0.483351 is off by {:.1e}); \
         1000 Gram matrices factorized, {jittered} needed escalated jitter",
        (m32 - 0.483_351).abs()
    );
    if !failures.is_empty() {
        return Err(format!("{detail}; failures: {}", failures.join(", ")));
    }
    within_time(started, Duration::from_secs(10), detail)
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    for kinds in ["se", "matern32", "sum"] {
        for trial in 0..100 {
            let model = random_model(&mut rng, kinds);
            let x: Vec<f64> = (0..15).map(|_| rng.random_range(0.0..20.0)).collect();
            let y: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = Inputs::from_1d(&x);
            let (_, grad) = log_marginal_likelihood(&model, &x, &y).unwrap();
            let p = model.log_params();
            for k in 0..p.len() {
                let mut up = p.clone();
                let mut dn = p.clone();
                up[k] += h;
                dn[k] -= h;
                let fu = log_marginal_likelihood(&model.with_log_params(&up), &x, &y).unwrap().0;
                let fd = log_marginal_likelihood(&model.with_log_params(&dn), &x, &y).unwrap().0;
                let numeric = (fu - fd) / (2.0 * h);
                let rel = (grad[k] - numeric).abs() / numeric.abs().max(grad[k].abs()).max(1e-3);
                if rel > worst {
                    worst = rel;
                    worst_at = format!("{kinds} #{trial} param {k}: analytic {} vs numeric {numeric}", grad[k]);
                }
            }
        }
    }
    let detail = format!("max relative error {worst:.2e} over 300 problems ({worst_at})");
    if worst >= 1e-4 {
        return Err(detail);
    }
    within_time(started, Duration::from_secs(30), detail)
}

fn decomposition_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut calls = 0;
    for _ in 0..200 {
        let model = random_model(&mut rng, "sum");
        let n = rng.random_range(5..60);
        let x = Inputs::from_1d(&(0..n).map(|i| i as f64).collect::<Vec<_>>());
        let q = Inputs::from_1d(&(0..n + 24).map(|i| i as f64 - 3.5).collect::<Vec<_>>());
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
        let p = Predictor::new(&model, &x, &q).unwrap().predict(&y).unwrap();
        worst = worst.max(decomposition_error(&p));
        calls += 1;
    }
    let timelines = two_trend_timelines(&GpModel::two_trend(60.0, 0.6, 4.0, 0.4, 0.3).unwrap(), 30, 120, 9).unwrap();
    let surfaces = extrapolate_all(&timelines, &GpModel::two_trend(50.0, 0.5, 3.0, 0.3, 0.4).unwrap(), 36).unwrap();
    for s in &surfaces {
        worst = worst.max(s.decomposition_error());
        calls += 1;
    }
    check(
        worst <= 1e-10,
        format!("max |μ_long + μ_short − μ_full| / max|μ_full| = {worst:.2e} over {calls} posterior calls"),
    )
}

fn interpolation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst = 0.0f64;
    for i in 0..50 {
        let l = rng.random_range(0.5..3.0);
        let spec = if i % 2 == 0 {
            KernelSpec::se(l, rng.random_range(0.5..2.0))
        } else {
            KernelSpec::matern32(l, rng.random_range(0.5..2.0))
        };
        let model = GpModel::new(vec![spec], 1e-6).unwrap();
        let n = rng.random_range(5..30);
        // separated by at least one lengthscale
        let mut xs = Vec::with_capacity(n);
        let mut at = 0.0;
        for _ in 0..n {
            at += l * rng.random_range(1.0..2.0);
            xs.push(at);
        }
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let x = Inputs::from_1d(&xs);
        let p = Predictor::new(&model, &x, &x).unwrap().predict(&y).unwrap();
        let scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, b) in p.mu_full.iter().zip(&y) {
            worst = worst.max((a - b).abs() / scale);
        }
    }
    check(
        worst <= 1e-4,
        format!("max |μ(x_i) − y_i| / max|y| = {worst:.2e} over 50 problems (ε = 1e-6)"),
    )
}

fn hyperparameter_recovery() -> Outcome {
    let started = Instant::now();
    let truth = GpModel::two_trend(120.0, 0.5, 4.0, 0.3, 0.5).unwrap();
    let timelines = two_trend_timelines(&truth, 50, 300, 2024).unwrap();
    let refs: Vec<_> = timelines.iter().collect();
    let fitted = fit_tce(&refs, &HyperPrior::two_trend_default(), &OptimizerOptions::default()).unwrap();
    let m = &fitted.model;
    let (long, short) = (m.components[0], m.components[1]);
    let rel = |est: f64, tru: f64| (est - tru).abs() / tru;
    let errs = [
        rel(long.lengthscale, 120.0),
        rel(short.lengthscale, 4.0),
        rel(long.amplitude, 0.5),
        rel(short.amplitude, 0.3),
    ];
    let detail = format!(
        "ℓ_long {:.2} ({:+.0}%), ℓ_short {:.2} ({:+.0}%), η_long {:.3} ({:+.0}%), η_short {:.3} ({:+.0}%), ε {:.3}; \
         {} of {} starts converged",
        long.lengthscale,
        100.0 * (long.lengthscale / 120.0 - 1.0),
        short.lengthscale,
        100.0 * (short.lengthscale / 4.0 - 1.0),
        long.amplitude,
        100.0 * (long.amplitude / 0.5 - 1.0),
        short.amplitude,
        100.0 * (short.amplitude / 0.3 - 1.0),
        m.noise,
        fitted
            .optimizer
            .starts
            .iter()
            .filter(|s| s.error.is_none() && s.termination.is_some_and(|t| t.converged()))
            .count(),
        fitted.optimizer.starts.len(),
    );
    if errs[0] > 0.3 || errs[1] > 0.3 || errs[2] > 0.5 || errs[3] > 0.5 {
        return Err(detail);
    }
    within_time(started, Duration::from_secs(300), detail)
}

fn grid10() -> Vec<GridCell> {
    (0..100)
        .map(|i| GridCell {
            cell_id: i as i64,
            lat: (i / 10) as f64 * 0.5 + 0.25,
            lon: (i % 10) as f64 * 0.5 + 0.25,
        })
        .collect()
}

fn month_records(cells: &[GridCell], hot: &[(i64, u64)]) -> Vec<CellMonthRecord> {
    cells
        .iter()
        .map(|c| {
            let f = hot.iter().find(|h| h.0 == c.cell_id).map_or(0, |h| h.1);
            CellMonthRecord::new(c.cell_id, 0, f)
        })
        .collect()
}

fn spatial_behaviour() -> Outcome {
    let started = Instant::now();
    let cells = grid10();
    let (ell, eta) = (0.4, 1.0);
    let model = GpModel::new(vec![KernelSpec::matern32(ell, eta)], 0.1).unwrap();
    let id = |r: i64, c: i64| r * 10 + c;
    // source at (8,5); its neighbours lie outside the zero-filled top-60 subset
    let src = id(8, 5);
    let recs = month_records(&cells, &[(src, 30)]);
    let s = estimate_sce_month(&recs, &cells, &model, 60).unwrap();
    let at = |c: i64| s.value(c).unwrap();
    let max_cell = s.cell_ids[s
        .mu
        .iter()
        .enumerate()
        .fold(0, |b, (i, v)| if *v > s.mu[b] { i } else { b })];
    let neighbours = [id(7, 5), id(9, 5), id(8, 4), id(8, 6)];
    let mut failures = Vec::new();
    if max_cell != src {
        failures.push(format!("maximum at cell {max_cell}, not the source"));
    }
    for n in neighbours {
        if !(at(n) > 0.0) {
            failures.push(format!("neighbour {n} has μ = {}", at(n)));
        }
    }
    // kernel-decay bound: |μ| ≤ k(10ℓ)·Σ|α| beyond 10ℓ from the source
    let subset = select_spatial_subset(&recs, 60);
    let x = Inputs::from_2d(
        &subset
            .iter()
            .map(|r| {
                let c = &cells[r.cell_id as usize];
                [c.lon, c.lat]
            })
            .collect::<Vec<_>>(),
    );
    let y: Vec<f64> = subset.iter().map(|r| r.magnitude).collect();
    let query = Inputs::from_2d(&cells.iter().map(|c| [c.lon, c.lat]).collect::<Vec<_>>());
    let alpha_l1 = Predictor::new(&model, &x, &query).unwrap().alpha_l1(&y);
    let bound = kernel_eval(&KernelSpec::matern32(ell, eta), 10.0 * ell) * alpha_l1;
    let sc = &cells[src as usize];
    let far: Vec<&GridCell> = cells
        .iter()
        .filter(|c| ((c.lat - sc.lat).powi(2) + (c.lon - sc.lon).powi(2)).sqrt() >= 10.0 * ell)
        .collect();
    let far_max = far.iter().map(|c| at(c.cell_id).abs()).fold(0.0, f64::max);
    if far.is_empty() || far_max > bound {
        failures.push(format!(
            "far cells: {} with max |μ| {far_max:.3e} > bound {bound:.3e}",
            far.len()
        ));
    }
    // encircled (8,2) vs adjacency-only (8,6) beside (8,7), equal magnitudes
    let ring = [id(7, 2), id(9, 2), id(8, 1), id(8, 3)];
    let mut hot: Vec<(i64, u64)> = ring.iter().map(|&c| (c, 20)).collect();
    hot.push((id(8, 7), 20));
    let recs2 = month_records(&cells, &hot);
    let s2 = estimate_sce_month(
        &recs2,
        &cells,
        &GpModel::new(vec![KernelSpec::matern32(0.72, 1.0)], 0.1).unwrap(),
        60,
    )
    .unwrap();
    let (enc, adj) = (s2.value(id(8, 2)).unwrap(), s2.value(id(8, 6)).unwrap());
    if !(enc > adj) {
        failures.push(format!("encircled {enc} ≤ adjacent {adj}"));
    }
    let detail = format!(
        "source μ {:.3}, neighbours min μ {:.3}, {} cells beyond 10ℓ with max |μ| {far_max:.2e} ≤ {bound:.2e}, \
         encircled {enc:.4} > adjacent {adj:.4}",
        at(src),
        neighbours.iter().map(|&n| at(n)).fold(f64::INFINITY, f64::min),
        far.len()
    );
    if !failures.is_empty() {
        return Err(format!("{detail}; {}", failures.join("; ")));
    }
    within_time(started, Duration::from_secs(60), detail)
}

fn brute_ap(s: &[f64], l: &[u8]) -> f64 {
    let pos = l.iter().filter(|&&v| v > 0).count();
    let mut thresholds: Vec<f64> = s.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for t in thresholds {
        let tp = s.iter().zip(l).filter(|(v, y)| **v >= t && **y > 0).count();
        let fp = s.iter().zip(l).filter(|(v, y)| **v >= t && **y == 0).count();
        let r = tp as f64 / pos as f64;
        ap += (r - prev) * (tp as f64 / (tp + fp) as f64);
        prev = r;
    }
    ap
}

fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if l[i] > 0 && l[j] == 0 {
                pairs += 1.0;
                if s[i] > s[j] {
                    num += 1.0;
                } else if s[i] == s[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=12);
        let s: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6u8)) / 5.0).collect();
        let mut l: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        l[0] = 1;
        l[n - 1] = 0;
        if average_precision(&s, &l).unwrap() != brute_ap(&s, &l) || roc_auc(&s, &l).unwrap().1 != brute_auc(&s, &l) {
            mismatches += 1;
        }
    }
    let ws = [0.9, 0.8, 0.3, 0.2];
    let wl = [1, 0, 1, 0];
    let ap = average_precision(&ws, &wl).unwrap();
    let auc = roc_auc(&ws, &wl).unwrap().1;
    let n = 10_000;
    let rs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    let rl: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<f64>() < 0.05)).collect();
    let share = rl.iter().filter(|&&v| v > 0).count() as f64 / n as f64;
    let rap = average_precision(&rs, &rl).unwrap();
    check(
        mismatches == 0 && (ap - 0.8333).abs() <= 1e-4 && auc == 0.75 && (rap - share).abs() <= 0.02,
        format!(
            "{mismatches} oracle mismatches in 1000 cases; worked example AP {ap:.4}, AUC {auc}; \
             random scorer AP {rap:.4} vs event share {share:.4}"
        ),
    )
}

fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_conflict-exposure"))
}

fn run_pipeline(dir: &Path, config: &str) -> Result<(), String> {
    std::fs::write(dir.join("run.cfg"), config).map_err(|e| e.to_string())?;
    let out = Command::new(binary())
        .arg("pipeline")
        .arg("--config")
        .arg(dir.join("run.cfg"))
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "pipeline exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

const FULL_RUN: &str = "\
stages = synth, ingest, fit-tce, fit-sce, fit-tsce, features, select, train, forecast, evaluate
out = out
seed = 11
synth.rows = 20
synth.cols = 20
synth.months = 372
synth.seed = 5
split.train = 0..299
split.validation = 300..335
split.test = 336..371
horizon = 36
ensemble.size = 100
";

fn end_to_end() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(dir.path(), FULL_RUN)?;
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("out/evaluate/evaluation.json")).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    let num = |k: &str| report[k].as_f64().unwrap_or(f64::NAN);
    let (ap, auc, base) = (num("ap"), num("auc"), num("base_rate"));
    let per_month: Vec<f64> = report["per_month"]
        .as_array()
        .map(|a| a.iter().map(|m| m["ap"].as_f64().unwrap_or(f64::NAN)).collect())
        .unwrap_or_default();
    let mean = |v: &[f64]| {
        let ok: Vec<f64> = v.iter().copied().filter(|x| x.is_finite()).collect();
        ok.iter().sum::<f64>() / ok.len().max(1) as f64
    };
    let (early, late) = if per_month.len() == 36 {
        (mean(&per_month[..6]), mean(&per_month[30..]))
    } else {
        (f64::NAN, f64::NAN)
    };
    let trace = std::fs::read_to_string(dir.path().join("out/select/selection_trace.json")).unwrap_or_default();
    let chosen: serde_json::Value = serde_json::from_str(&trace).unwrap_or_default();
    let detail = format!(
        "AUC {auc:.4} (≥ 0.85), AP {ap:.4} vs 3 × base rate {:.4}, per-month AP months 1-6 {early:.4} vs 31-36 {late:.4}; \
         selected {}; ensemble of 100",
        3.0 * base,
        chosen["chosen_subset"]
    );
    if !(auc >= 0.85 && ap >= 3.0 * base && early > late) {
        return Err(detail);
    }
    within_time(started, Duration::from_secs(20 * 60), detail)
}

const SMALL_RUN: &str = "\
stages = synth, ingest, fit-tce, fit-sce, fit-tsce, features, select, train, forecast, evaluate
out = out
seed = 4
synth.rows = 10
synth.cols = 10
synth.months = 120
synth.seed = 8
synth.baseline = -2
split.train = 0..83
split.validation = 84..101
split.test = 102..119
horizon = 18
selection.trees = 30
ensemble.size = 12
";

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    run_pipeline(a.path(), SMALL_RUN)?;
    run_pipeline(b.path(), SMALL_RUN)?;
    let files = [
        "features/features_selection.csv",
        "features/features_final.csv",
        "select/selection_trace.json",
        "forecast/predictions.csv",
        "train/ensemble.bin",
    ];
    let mut differing = BTreeSet::new();
    for f in files {
        let x = std::fs::read(a.path().join("out").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = std::fs::read(b.path().join("out").join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            differing.insert(f);
        }
    }
    let manifest = |d: &Path| {
        let text = std::fs::read_to_string(d.join("out/evaluate/manifest.json")).unwrap_or_default();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
        v["config_sha256"].as_str().unwrap_or("").to_string()
    };
    let (ha, hb) = (manifest(a.path()), manifest(b.path()));
    check(
        differing.is_empty() && !ha.is_empty() && ha == hb,
        format!(
            "{} of {} artifacts byte-identical across two seeded runs; config hash {}",
            files.len() - differing.len(),
            files.len(),
            if ha == hb { "identical" } else { "differs" }
        ),
    )
}

fn selection_sanity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1010);
    let signal = FeatureMatrix::column_index("mu_tsce_short").unwrap();
    let (cells, months) = (100i64, 60i64);
    let mut keys = Vec::new();
    let mut columns = vec![Vec::new(); FEATURE_NAMES.len()];
    let mut targets = Vec::new();
    for c in 0..cells {
        for m in 0..months {
            keys.push((c, m));
            for col in columns.iter_mut() {
                col.push(rng.random_range(-1.0..1.0));
            }
            let z: f64 = 4.0 * columns[signal].last().unwrap() - 1.0;
            targets.push(u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-z).exp())));
        }
    }
    let features = FeatureMatrix { keys, columns };
    let split = SplitSpec::new(
        "0..39".parse().unwrap(),
        "40..59".parse().unwrap(),
        "60..61".parse().unwrap(),
    )
    .unwrap();
    let config = ForestConfig {
        tree_count: 100,
        max_depth: 8,
        min_leaf: 10,
        feature_subsample: 1,
        bootstrap_fraction: 0.8,
        seed: 3,
    };
    let scorer = ForestScorer::new(&features, &targets, &split, config).map_err(|e| e.to_string())?;
    let trace = forward_select(&scorer).map_err(|e| e.to_string())?;
    let steps: Vec<String> = trace
        .steps
        .iter()
        .map(|s| format!("{}={:.4}", s.feature, s.score))
        .collect();
    // the best of 23 noise-augmented forests is compared with the signal-only forest
    let alone = scorer.score(&[signal]).map_err(|e| e.to_string())?;
    check(
        trace.steps[0].feature == "mu_tsce_short" && trace.dip_round == Some(2) && trace.chosen_subset.len() == 1,
        format!(
            "signal-only AP {alone:.4}; trace {}; dip at round {:?}; chosen {:?}",
            steps.join(" → "),
            trace.dip_round,
            trace.chosen_subset
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test -- --list` and filters from the default harness
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("kernel correctness", kernel_correctness),
        ("gradient fidelity", gradient_fidelity),
        ("decomposition identity", decomposition_identity),
        ("interpolation", interpolation),
        ("hyperparameter recovery", hyperparameter_recovery),
        ("spatial behaviour", spatial_behaviour),
        ("metric oracles", metric_oracles),
        ("end-to-end pipeline", end_to_end),
        ("determinism", determinism),
        ("forward selection sanity", selection_sanity),
    ];
    let only: Vec<usize> = args.iter().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("criterion {n:>2} {name}: PASS [{secs:.1}s] {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL [{secs:.1}s] {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
