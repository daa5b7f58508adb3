//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints a PASS/FAIL line; exits nonzero if any fails.

mod common;

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::{perturb, rand_tensor, rng, small_config};
use pir_core::backbone::load_external_forecasts;
use pir_core::data::{load_csv, make_windows, CsvLayout, SplitRatios};
use pir_core::eval::improvement_pct;
use pir_core::identify::{build_uncertainty_loss, realized_mse, uncertainty_loss};
use pir_core::model::{build_beta, combine, GateOverride, PirConfig, PirModel, Variant};
use pir_core::pipeline::{
    build_report, prepare_native, prepare_with_forecasts, split_windows, standardized_splits, train_variant,
    write_run, PipelineConfig, Prepared, SplitForecasts, VariantResult,
};
use pir_core::retrieval::{build_database, global_revise, Granularity, RetrievalResult};
use pir_core::synth::{generate_synthetic_benchmark, SynthConfig};
use pir_core::tensor::{param_gradient_report, ComputeGraph, GraphBuilder, ParamStore, Tensor};
use pir_core::train::TrainConfig;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-4;
const ZERO_TOL: f64 = 1e-9;
const STEP: f64 = 1e-5;

struct GradCase {
    graph: ComputeGraph,
    output: &'static str,
    params: ParamStore,
    inputs: Vec<(&'static str, Tensor)>,
}

impl GradCase {
    fn run(&self) -> pir_core::tensor::GradCheckReport {
        let inputs: Vec<(&str, &Tensor)> = self.inputs.iter().map(|(n, t)| (*n, t)).collect();
        param_gradient_report(&self.graph, &self.params, &inputs, self.output, STEP).expect("gradient check")
    }
}

fn gradient_cases(seed: u64) -> Vec<(&'static str, GradCase)> {
    let cfg = small_config(2, 8, 4, 3);
    let mut model = PirModel::new(PirConfig { seed, ..cfg.clone() }).unwrap();
    model.gate_open = true;
    perturb(&mut model.params, seed, 0.3);
    let mut r = rng(1000 + seed);
    let s = common::random_sample(&mut r, &cfg, 0);

    // uncertainty estimator through its loss
    let net = cfg.uncertainty_net();
    let mut g = GraphBuilder::new();
    let (x, yb, y) = (g.input("x", &[2, 8]), g.input("ybar", &[2, 4]), g.input("y", &[2, 4]));
    let delta = net.build(&mut g, x, yb).unwrap();
    let l_ue = build_uncertainty_loss(&mut g, delta, yb, y).unwrap();
    g.output("l_ue", l_ue);
    let ue = GradCase {
        graph: g.build(),
        output: "l_ue",
        params: model.params.clone(),
        inputs: vec![("x", s.x.clone()), ("ybar", s.ybar.clone()), ("y", s.y.clone())],
    };

    // local reviser through mean(y_local²)
    let local = cfg.local_reviser().unwrap();
    let mut g = GraphBuilder::new();
    let (yb, exo) = (g.input("ybar", &[2, 4]), g.input("exo", &[1, 20]));
    let nodes = local.build(&mut g, yb, exo).unwrap();
    let sq = g.mul(nodes.y_local, nodes.y_local).unwrap();
    let obj = g.mean(sq).unwrap();
    g.output("obj", obj);
    let loc = GradCase {
        graph: g.build(),
        output: "obj",
        params: model.params.clone(),
        inputs: vec![("ybar", s.ybar.clone()), ("exo", s.exo.clone())],
    };

    // β gate through a random projection of its output
    let mut g = GraphBuilder::new();
    let (d, w, proj) = (g.input("delta", &[2, 1]), g.input("w", &[2, 3]), g.input("proj", &[2, 1]));
    let beta = build_beta(&mut g, d, w, 3, cfg.beta_hidden).unwrap();
    let prod = g.mul(beta, proj).unwrap();
    let obj = g.sum(prod).unwrap();
    g.output("obj", obj);
    let gate = GradCase {
        graph: g.build(),
        output: "obj",
        params: model.params.clone(),
        inputs: vec![
            ("delta", rand_tensor(&mut r, 2, 1, 1.0).map(f64::abs)),
            ("w", s.w.clone()),
            ("proj", rand_tensor(&mut r, 2, 1, 1.0)),
        ],
    };

    let full = GradCase {
        graph: model.graph(true).unwrap(),
        output: "loss",
        params: model.params.clone(),
        inputs: vec![
            ("x", s.x.clone()),
            ("ybar", s.ybar.clone()),
            ("exo", s.exo.clone()),
            ("y_global", s.y_global.clone()),
            ("w", s.w.clone()),
            ("y", s.y.clone()),
        ],
    };
    vec![("uncertainty", ue), ("local", loc), ("beta", gate), ("end-to-end", full)]
}

fn c1_gradients() -> Outcome {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64, f64)> = Vec::new();
    for seed in 0..20 {
        for (i, (name, case)) in gradient_cases(seed).into_iter().enumerate() {
            let rep = case.run();
            if worst.len() <= i {
                worst.push((name, 0.0, 0.0));
            }
            worst[i].1 = worst[i].1.max(rep.max_relative);
            worst[i].2 = worst[i].2.max(rep.max_abs_at_zero);
        }
    }
    let elapsed = start.elapsed();
    let ok = worst.iter().all(|(_, rel, abs)| *rel < GRAD_TOL && *abs < ZERO_TOL) && elapsed < Duration::from_secs(30);
    let parts: Vec<String> = worst.iter().map(|(n, rel, abs)| format!("{n} rel {rel:.1e} zero-abs {abs:.1e}")).collect();
    check(ok, format!("20 seeds; {}; {:.1}s", parts.join(", "), elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- retrieval

fn c2_retrieval() -> Outcome {
    let mut r = rng(42);
    let series: Vec<Vec<f64>> = (0..1000 + 39).map(|_| vec![r.random_range(-1.0..1.0)]).collect();
    let ws = make_windows(&common::hourly(series), 32, 8, 1).unwrap();
    let db = build_database(&ws, Granularity::Channel).unwrap();
    if db.len() != 1000 {
        return Err(format!("database has {} entries", db.len()));
    }
    let queries: Vec<Vec<f64>> = (0..50).map(|_| (0..32).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    let start = Instant::now();
    let batch: Vec<(&[f64], _)> = queries.iter().map(|q| (q.as_slice(), None)).collect();
    let results = db.retrieve_batch(&batch, 10).unwrap();
    let elapsed = start.elapsed();

    let mut max_diff = 0.0f64;
    for (q, res) in queries.iter().zip(&results) {
        // exhaustive scan with an independently written normalization
        let zq = unit(q);
        let mut scan: Vec<(f64, usize)> =
            ws.iter().enumerate().map(|(j, w)| (dot(&zq, &unit(w.x.row(0))), j)).collect();
        scan.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (k, &(s, j)) in scan.iter().take(10).enumerate() {
            if res.indices[k] != j {
                return Err(format!("rank {k}: got entry {}, scan says {j}", res.indices[k]));
            }
            max_diff = max_diff.max((res.similarities[k] - s).abs());
        }
    }
    let ok = max_diff < 1e-12 && elapsed < Duration::from_secs(5);
    check(ok, format!("50 queries x 1000 entries, top-10 identical, max |Δsim| {max_diff:.1e}, {elapsed:.2?}"))
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let centered: Vec<f64> = v.iter().map(|x| x - m).collect();
    let norm = dot(&centered, &centered).sqrt();
    centered.iter().map(|x| x / norm).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------- benchmark

struct Bench {
    prepared: Prepared,
    config: PipelineConfig,
    full: VariantResult,
    full_elapsed: Duration,
}

fn benchmark() -> Bench {
    let start = Instant::now();
    let (ds, _) = generate_synthetic_benchmark(&SynthConfig::default(), 0).unwrap();
    let config = PipelineConfig::default();
    let splits = standardized_splits(&ds, config.splits).unwrap();
    let prepared = prepare_native(split_windows(&splits, &config).unwrap(), &config).unwrap();
    let full = train_variant(&prepared, &config, Variant::Full).unwrap();
    Bench { prepared, config, full, full_elapsed: start.elapsed() }
}

fn c3_noop(bench: &Bench) -> Outcome {
    let p = &bench.prepared;
    for variant in Variant::ALL {
        let model = pir_core::pipeline::init_model(p, &bench.config, variant).unwrap();
        for (pred, f) in model.predict_all(&p.test_samples).unwrap().iter().zip(&p.forecasts.test) {
            if !bitwise_eq(pred.y_pred.data(), f.values.data()) {
                return Err(format!("{variant}: instance {} differs from the backbone", f.instance_id));
            }
        }
    }
    check(true, format!("all 4 variants, {} test instances bitwise equal", p.test_samples.len()))
}

fn c4_identities() -> Outcome {
    let mut r = rng(4);
    let (ybar, y) = (rand_tensor(&mut r, 3, 6, 2.0), rand_tensor(&mut r, 3, 6, 2.0));
    let l_ue = uncertainty_loss(&realized_mse(&ybar, &y).unwrap(), &ybar, &y).unwrap();

    let model = PirModel::new(PirConfig { k: 4, ..PirConfig::new(3, 8, 6) }).unwrap();
    let c = combine(
        &ybar,
        &rand_tensor(&mut r, 3, 6, 1.0),
        &rand_tensor(&mut r, 3, 6, 1.0),
        &[0.1, 0.2, 0.3],
        &rand_tensor(&mut r, 3, 4, 1.0),
        &model.params,
        GateOverride { alpha: Some(0.0), beta: Some(0.0) },
    )
    .unwrap();
    let passthrough = bitwise_eq(c.y_pred.data(), ybar.data());

    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = r.random_range(1..30);
        let sims: Vec<f64> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        let res = RetrievalResult { indices: (0..k).collect(), similarities: sims, retrieved: Tensor::zeros(&[k, 2]) };
        let (_, p) = global_revise(&res, r.random_range(0.05..5.0));
        worst = worst.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    let ok = l_ue < 1e-12 && passthrough && worst < 1e-9;
    check(ok, format!("L_ue {l_ue:.1e}; α=β=0 passthrough {passthrough}; softmax max |Σp-1| {worst:.1e}"))
}

fn c5_benchmark(bench: &Bench) -> Outcome {
    let rep = build_report(&bench.prepared, &bench.full).unwrap();
    let (base, rev) = (bench.full.base_mse(), bench.full.revised_mse());
    let mse_gain = (base - rev) / base * 100.0;
    let tail = rep.tail.expect("tail stats");
    let pearson = rep.fidelity.and_then(|f| f.pearson).unwrap_or(f64::NAN);
    let t = bench.full_elapsed;
    let ok = mse_gain >= 10.0 && tail.improvement >= 20.0 && pearson >= 0.5 && t < Duration::from_secs(300);
    check(
        ok,
        format!(
            "MSE {base:.4} -> {rev:.4} ({mse_gain:.2}%), top-decile {:.4} -> {:.4} ({:.2}%), δ pearson {pearson:.3}, {:.1}s",
            tail.base_mse,
            tail.revised_mse,
            tail.improvement,
            t.as_secs_f64()
        ),
    )
}

fn c6_ablation(bench: &Bench) -> Outcome {
    let full = bench.full.revised_mse();
    let no_local = train_variant(&bench.prepared, &bench.config, Variant::NoLocal).unwrap().revised_mse();
    let no_global = train_variant(&bench.prepared, &bench.config, Variant::NoGlobal).unwrap().revised_mse();
    let ok = full <= no_local * 1.02 && full <= no_global * 1.02;
    check(ok, format!("full {full:.4}, no_local {no_local:.4}, no_global {no_global:.4}"))
}

fn c7_improvement() -> Outcome {
    let v = improvement_pct(0.466, 0.437);
    check(v == 6.22, format!("improvement(0.466, 0.437) = {v}"))
}

/// Generation → training → report files, all from one seed.
fn run_once(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let synth = SynthConfig { length: 1500, ..SynthConfig::default() };
    let (ds, _) = generate_synthetic_benchmark(&synth, 5).unwrap();
    let config = PipelineConfig {
        l_in: 48,
        l_out: 12,
        train: TrainConfig { max_epochs: 3, ..TrainConfig::default() },
        ..PipelineConfig::default()
    };
    let splits = standardized_splits(&ds, config.splits).unwrap();
    let prepared = prepare_native(split_windows(&splits, &config).unwrap(), &config).unwrap();
    let result = train_variant(&prepared, &config, Variant::Full).unwrap();
    write_run(dir, &prepared, &result, &config).unwrap();
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files);
    files.sort();
    files
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
        }
    }
}

fn c8_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (fa, fb) = (run_once(a.path()), run_once(b.path()));
    if fa.len() != fb.len() {
        return Err(format!("{} vs {} output files", fa.len(), fb.len()));
    }
    for ((pa, da), (pb, db)) in fa.iter().zip(&fb) {
        if pa != pb || da != db {
            return Err(format!("{} differs between runs", pa.display()));
        }
    }
    check(true, format!("{} output files (model, revisions, reports) byte-identical across runs", fa.len()))
}

fn c9_external() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/external");
    let raw = load_csv(&dir.join("series.csv"), &CsvLayout::default()).unwrap();
    let config = PipelineConfig {
        l_in: 48,
        l_out: 12,
        splits: SplitRatios::new(6.0, 2.0, 2.0).unwrap(),
        train: TrainConfig { max_epochs: 3, ..TrainConfig::default() },
        ..PipelineConfig::default()
    };
    let splits = standardized_splits(&raw, config.splits).unwrap();
    let windows = split_windows(&splits, &config).unwrap();
    let load = |split: &str, ws| load_external_forecasts(&dir.join(format!("forecasts.{split}.csv")), ws);
    let forecasts = SplitForecasts {
        train: load("train", &windows.train).map_err(|e| e.to_string())?,
        val: load("val", &windows.val).map_err(|e| e.to_string())?,
        test: load("test", &windows.test).map_err(|e| e.to_string())?,
    };
    let pir_train = windows.train.clone();
    let prepared = prepare_with_forecasts(windows, pir_train, forecasts, &config).unwrap();
    if prepared.backbone.is_some() {
        return Err("a native backbone was fitted".into());
    }
    let result = train_variant(&prepared, &config, Variant::Full).unwrap();
    let out = tempfile::tempdir().unwrap();
    write_run(out.path(), &prepared, &result, &config).unwrap();
    let report = build_report(&prepared, &result).unwrap();
    let ok = report.rows.len() == 1 && out.path().join("revised.csv").exists();
    check(
        ok,
        format!(
            "{} external test forecasts revised, MSE {:.4} -> {:.4}",
            result.revised.len(),
            result.base_mse(),
            result.revised_mse()
        ),
    )
}

fn main() {
    // run the cheap checks first
    let mut outcomes: Vec<(u32, &str, Outcome)> = vec![
        (1, "gradients match finite differences", c1_gradients()),
        (2, "retrieval equals exhaustive scan", c2_retrieval()),
        (4, "identities", c4_identities()),
        (7, "improvement formula", c7_improvement()),
        (9, "external backbone forecasts", c9_external()),
        (8, "bitwise determinism", c8_determinism()),
    ];
    let bench = benchmark();
    outcomes.push((3, "fresh model reproduces backbone", c3_noop(&bench)));
    outcomes.push((5, "synthetic benchmark gains", c5_benchmark(&bench)));
    outcomes.push((6, "ablation ordering", c6_ablation(&bench)));
    outcomes.sort_by_key(|o| o.0);

    let mut failed = 0;
    for (n, name, outcome) in &outcomes {
        match outcome {
            Ok(detail) => println!("criterion {n} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
