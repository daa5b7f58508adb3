use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use pir_core::backbone::{fit_linear, Backbone};
use pir_core::data::{join_forecasts, load_csv, read_forecasts, write_forecasts, CsvLayout, ForecastRecord, SplitRatios};
use pir_core::eval::{
    ablation_row, aggregate_report, delta_fidelity, per_instance_errors, per_step_mse, read_deltas, tail_stats,
    write_deltas, write_report, DeltaPoint, EvalReport, Run,
};
use pir_core::identify::realized_mse;
use pir_core::model::{load_model, make_samples, save_model, Variant};
use pir_core::pipeline::{
    build_report, evaluate_model, init_model, prepare_with_forecasts, standardized_splits, PipelineConfig,
    Prepared,
};
use pir_core::retrieval::{global_contexts, Granularity, RetrievalDatabase};
use pir_core::synth::{generate_synthetic_benchmark, SynthConfig};
use pir_core::train::train as train_model;

use crate::config::{resolve, write_snapshot, Defaults};
use crate::layout::{
    forecast_file, read_all_forecasts, read_split, sibling, split_file, write_data_dir, DataDir, Manifest, SPLITS,
};

fn req<T: Clone>(v: &Option<T>, flag: &str) -> Result<T> {
    v.clone().with_context(|| format!("--{flag} is required (flag or config file)"))
}

// ---- synth -----------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generate the series without rare motifs.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_motifs: Option<bool>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub length: Option<usize>,
    /// Number of motif templates (1..=10).
    #[arg(long)]
    pub templates: Option<usize>,
}

impl Defaults for SynthArgs {
    fn fill_defaults(&mut self) {
        let d = SynthConfig::default();
        self.seed.get_or_insert(0);
        self.no_motifs.get_or_insert(!d.motifs);
        self.channels.get_or_insert(d.n_channels);
        self.length.get_or_insert(d.length);
        self.templates.get_or_insert(d.n_templates);
    }
}

pub fn synth(cli: &SynthArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "synth")?;
    let out = req(&a.out, "out")?;
    let seed = a.seed.unwrap_or(0);
    let mut cfg = SynthConfig { motifs: !a.no_motifs.unwrap_or(false), ..SynthConfig::default() };
    cfg.n_channels = a.channels.unwrap_or(cfg.n_channels);
    cfg.length = a.length.unwrap_or(cfg.length);
    cfg.n_templates = a.templates.unwrap_or(cfg.n_templates);
    let (ds, log) = generate_synthetic_benchmark(&cfg, seed)?;
    fs::create_dir_all(&out)?;
    pir_core::data::write_csv(&ds, &out.join("synth.csv"))?;
    fs::write(out.join("synth_log.json"), serde_json::to_string_pretty(&log)? + "\n")?;
    write_snapshot(&a, "synth", &out.join("effective_config.toml"))?;
    log::info!("{} rows x {} channels, {} motifs -> {}", ds.len(), ds.num_channels(), log.events.len(), out.display());
    Ok(())
}

// ---- ingest ----------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestArgs {
    /// Input CSV: a timestamp column followed by numeric channels.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Train:validation:test proportions.
    #[arg(long)]
    pub splits: Option<String>,
    #[arg(long)]
    pub lin: Option<usize>,
    #[arg(long)]
    pub lout: Option<usize>,
    #[arg(long)]
    pub stride: Option<usize>,
    /// Name of the timestamp column.
    #[arg(long)]
    pub date_column: Option<String>,
    /// Output data directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Defaults for IngestArgs {
    fn fill_defaults(&mut self) {
        self.splits.get_or_insert_with(|| "7:1:2".into());
        self.lin.get_or_insert(96);
        self.lout.get_or_insert(24);
        self.stride.get_or_insert(1);
        self.date_column.get_or_insert_with(|| "date".into());
    }
}

pub fn ingest(cli: &IngestArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "ingest")?;
    let data = req(&a.data, "data")?;
    let out = req(&a.out, "out")?;
    let ratios = SplitRatios::parse(a.splits.as_deref().unwrap_or("7:1:2"))?;
    let layout = CsvLayout { date_column: a.date_column.clone().unwrap_or_else(|| "date".into()), ..CsvLayout::default() };
    let raw = load_csv(&data, &layout).with_context(|| format!("loading {}", data.display()))?;
    let splits = standardized_splits(&raw, ratios)?;
    let manifest = Manifest {
        source: data.display().to_string(),
        stem: data.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "data".into()),
        l_in: a.lin.unwrap_or(96),
        l_out: a.lout.unwrap_or(24),
        stride: a.stride.unwrap_or(1),
        splits: ratios,
        channels: raw.channel_names().to_vec(),
        starts: [splits.train.start_index(), splits.val.start_index(), splits.test.start_index()],
    };
    write_data_dir(&out, &data, &splits, manifest)?;
    // fail early if a split is too short for the window lengths
    let windows = DataDir::open(&out)?.all_windows()?;
    log::info!("windows: {} train, {} val, {} test", windows.train.len(), windows.val.len(), windows.test.len());
    write_snapshot(&a, "ingest", &out.join("effective_config.toml"))
}

// ---- backbone --------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneArgs {
    /// Data directory written by `ingest`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// seasonal | linear
    #[arg(long)]
    pub kind: Option<String>,
    /// Seasonal period in steps.
    #[arg(long)]
    pub period: Option<usize>,
    /// Ridge penalty of the linear backbone.
    #[arg(long)]
    pub ridge: Option<f64>,
    /// Forecast the training split out-of-sample: fit on its first 80% and
    /// emit training forecasts only for the remaining 20%.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub holdout: Option<bool>,
    /// Validate and adopt an external forecast exchange file instead.
    #[arg(long)]
    pub external: Option<PathBuf>,
    /// Output forecast file; one `{stem}.{split}.csv` is written per split.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Defaults for BackboneArgs {
    fn fill_defaults(&mut self) {
        if self.external.is_none() {
            let kind = self.kind.get_or_insert_with(|| "seasonal".into());
            match kind.as_str() {
                "seasonal" => {
                    self.period.get_or_insert(24);
                }
                "linear" => {
                    self.ridge.get_or_insert(1e-3);
                    self.holdout.get_or_insert(false);
                }
                _ => {}
            }
        }
    }
}

pub fn backbone(cli: &BackboneArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "backbone")?;
    let dir = DataDir::open(&req(&a.data, "data")?)?;
    let out = req(&a.out, "out")?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let windows = dir.all_windows()?;

    if let Some(ext) = &a.external {
        ensure!(a.kind.is_none(), "--external and --kind are mutually exclusive");
        let (_, fc) = read_all_forecasts(ext, &windows)?;
        for (split, records) in SPLITS.iter().zip([&fc.train, &fc.val, &fc.test]) {
            write_forecasts(records, &split_file(&out, split))?;
        }
        log::info!("external forecasts validated: {} train, {} val, {} test", fc.train.len(), fc.val.len(), fc.test.len());
        return write_snapshot(&a, "backbone", &sibling(&out, ".config.toml"));
    }

    let l_out = dir.manifest.l_out;
    let kind = a.kind.as_deref().unwrap_or("seasonal");
    let fit = |w: &[_]| -> Result<Backbone> {
        Ok(match kind {
            "seasonal" => Backbone::Seasonal { period: a.period.unwrap_or(24), l_out },
            "linear" => Backbone::Linear(fit_linear(w, a.ridge.unwrap_or(1e-3))?),
            other => bail!("unknown backbone kind `{other}` (seasonal|linear)"),
        })
    };
    let model = fit(&windows.train)?;
    let train_fc = if a.holdout.unwrap_or(false) && kind == "linear" {
        let cut = windows.train.len() * 4 / 5;
        ensure!(cut > 0 && cut < windows.train.len(), "too few training windows for --holdout");
        fit(&windows.train[..cut])?.forecast(&windows.train[cut..])?
    } else {
        model.forecast(&windows.train)?
    };
    write_forecasts(&train_fc, &split_file(&out, "train"))?;
    write_forecasts(&model.forecast(&windows.val)?, &split_file(&out, "val"))?;
    write_forecasts(&model.forecast(&windows.test)?, &split_file(&out, "test"))?;
    fs::write(sibling(&out, ".backbone.json"), serde_json::to_string_pretty(&model)? + "\n")?;
    log::info!("{kind} backbone forecasts written next to {}", out.display());
    write_snapshot(&a, "backbone", &sibling(&out, ".config.toml"))
}

// ---- train -----------------------------------------------------------------

/// Settings shared by `train` and `ablate`.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelArgs {
    /// Data directory written by `ingest`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Backbone forecast file (per-split files next to it).
    #[arg(long)]
    pub forecasts: Option<PathBuf>,
    /// Retrieved neighbours per query.
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the uncertainty loss.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub warmup_epochs: Option<usize>,
    /// Softmax temperature over retrieval similarities.
    #[arg(long)]
    pub temperature: Option<f64>,
    /// channel | instance
    #[arg(long)]
    pub granularity: Option<String>,
    /// Also train the linear backbone's weights (needs `backbone --kind linear`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub joint_backbone: Option<bool>,
}

impl ModelArgs {
    fn pipeline_config(&self, manifest: &Manifest) -> Result<PipelineConfig> {
        let mut c = PipelineConfig {
            l_in: manifest.l_in,
            l_out: manifest.l_out,
            splits: manifest.splits,
            stride: manifest.stride,
            seed: self.seed.unwrap_or(0),
            ..PipelineConfig::default()
        };
        c.retrieval.k = self.k.unwrap_or(c.retrieval.k);
        c.retrieval.temperature = self.temperature.unwrap_or(c.retrieval.temperature);
        c.retrieval.granularity = match self.granularity.as_deref() {
            None | Some("channel") => Granularity::Channel,
            Some("instance") => Granularity::Instance,
            Some(g) => bail!("unknown granularity `{g}` (channel|instance)"),
        };
        c.model.lambda = self.lambda.unwrap_or(c.model.lambda);
        c.model.joint_backbone = self.joint_backbone.unwrap_or(false);
        let t = &mut c.train;
        t.max_epochs = self.epochs.unwrap_or(t.max_epochs);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.learning_rate = self.learning_rate.unwrap_or(t.learning_rate);
        t.patience = self.patience.unwrap_or(t.patience);
        t.warmup_epochs = self.warmup_epochs.unwrap_or(t.warmup_epochs);
        Ok(c)
    }

    fn prepare(&self) -> Result<(DataDir, PipelineConfig, Prepared)> {
        let dir = DataDir::open(&req(&self.data, "data")?)?;
        let forecasts = req(&self.forecasts, "forecasts")?;
        let config = self.pipeline_config(&dir.manifest)?;
        let windows = dir.all_windows()?;
        let (pir_train, fc) = read_all_forecasts(&forecasts, &windows)?;
        let mut prepared = prepare_with_forecasts(windows, pir_train, fc, &config)?;
        if config.model.joint_backbone {
            let path = sibling(&forecasts, ".backbone.json");
            let text = fs::read_to_string(&path)
                .with_context(|| format!("joint training needs the fitted backbone at {}", path.display()))?;
            prepared.backbone = Some(serde_json::from_str(&text)?);
        }
        Ok((dir, config, prepared))
    }
}

impl Defaults for ModelArgs {
    fn fill_defaults(&mut self) {
        let d = PipelineConfig::default();
        self.k.get_or_insert(d.retrieval.k);
        self.lambda.get_or_insert(d.model.lambda);
        self.seed.get_or_insert(d.seed);
        self.epochs.get_or_insert(d.train.max_epochs);
        self.batch_size.get_or_insert(d.train.batch_size);
        self.learning_rate.get_or_insert(d.train.learning_rate);
        self.patience.get_or_insert(d.train.patience);
        self.warmup_epochs.get_or_insert(d.train.warmup_epochs);
        self.temperature.get_or_insert(d.retrieval.temperature);
        self.granularity.get_or_insert_with(|| "channel".into());
        self.joint_backbone.get_or_insert(d.model.joint_backbone);
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// full | no_local | no_global | none
    #[arg(long)]
    pub variant: Option<String>,
    /// Checkpoint path; the retrieval database is saved to `{stem}.db/`.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

impl Defaults for TrainArgs {
    fn fill_defaults(&mut self) {
        self.model.fill_defaults();
        self.variant.get_or_insert_with(|| "full".into());
    }
}

pub fn train(cli: &TrainArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "train")?;
    let ckpt = req(&a.ckpt, "ckpt")?;
    let variant: Variant = a.variant.as_deref().unwrap_or("full").parse()?;
    let (dir, config, prepared) = a.model.prepare()?;
    let model = init_model(&prepared, &config, variant)?;
    let (model, history) =
        train_model(model, &prepared.train_samples, &prepared.val_samples, &config.train_config())?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    prepared.db.save(&sibling(&ckpt, ".db"))?;
    let extra = serde_json::json!({ "data": dir.dir, "pipeline": config });
    save_model(&model, &ckpt, Some(&prepared.db.fingerprint()), extra)?;
    fs::write(sibling(&ckpt, ".history.json"), serde_json::to_string_pretty(&history)? + "\n")?;
    log::info!(
        "validation MSE {:.6} -> {:.6} (best epoch {:?}); checkpoint {}",
        history.initial_val_mse,
        history.best_val_mse,
        history.best_epoch,
        ckpt.display()
    );
    write_snapshot(&a, "train", &sibling(&ckpt, ".config.toml"))
}

// ---- revise ----------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ReviseArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Backbone forecasts to revise (the per-split file is used if present).
    #[arg(long)]
    pub forecasts: Option<PathBuf>,
    /// Revised forecasts; per-channel δ goes to `{stem}.deltas.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Data directory (defaults to the one the model was trained on).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// train | val | test
    #[arg(long)]
    pub split: Option<String>,
}

impl Defaults for ReviseArgs {
    fn fill_defaults(&mut self) {
        self.split.get_or_insert_with(|| "test".into());
    }
}

pub fn revise(cli: &ReviseArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "revise")?;
    let ckpt = req(&a.ckpt, "ckpt")?;
    let out = req(&a.out, "out")?;
    let forecasts = req(&a.forecasts, "forecasts")?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let loaded = load_model(&ckpt)?;
    let data = match &a.data {
        Some(d) => d.clone(),
        None => loaded.extra["data"]
            .as_str()
            .map(PathBuf::from)
            .context("checkpoint does not record its data directory; pass --data")?,
    };
    let config: PipelineConfig = serde_json::from_value(loaded.extra["pipeline"].clone())
        .context("checkpoint lacks its pipeline settings")?;
    let db = RetrievalDatabase::load(&sibling(&ckpt, ".db"))?;
    if let Some(expected) = &loaded.db_fingerprint {
        ensure!(*expected == db.fingerprint(), "retrieval database does not match the checkpoint");
    }
    let dir = DataDir::open(&data)?;
    let windows = dir.windows(&split)?;
    let path = forecast_file(&forecasts, &split)?;
    let records = join_forecasts(read_forecasts(&path)?, &windows).with_context(|| format!("aligning {}", path.display()))?;
    let ctx = global_contexts(&db, &windows, &config.retrieval, split == "train")?;
    let samples = make_samples(&windows, &records, &ctx)?;
    let preds = loaded.model.predict_all(&samples)?;
    let source = format!("pir-{}", loaded.model.config.variant);
    let revised: Vec<ForecastRecord> =
        preds.iter().zip(&samples).map(|(p, s)| ForecastRecord::new(s.id, p.y_pred.clone(), source.clone())).collect();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    write_forecasts(&revised, &out)?;
    let deltas: Vec<(usize, Vec<f64>)> = preds.iter().zip(&samples).map(|(p, s)| (s.id, p.delta.clone())).collect();
    write_deltas(&sibling(&out, ".deltas.csv"), &deltas)?;
    log::info!("revised {} {split} instances -> {}", revised.len(), out.display());
    write_snapshot(&a, "revise", &sibling(&out, ".config.toml"))
}

// ---- eval ------------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalArgs {
    /// Revised forecasts.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    /// Backbone forecasts (the per-split file is used if present).
    #[arg(long)]
    pub base: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Data directory holding the targets.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Histogram bins of the error distribution.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Per-channel δ file (defaults to `{pred stem}.deltas.csv` when present).
    #[arg(long)]
    pub deltas: Option<PathBuf>,
}

impl Defaults for EvalArgs {
    fn fill_defaults(&mut self) {
        self.split.get_or_insert_with(|| "test".into());
        self.bins.get_or_insert(50);
    }
}

pub fn eval(cli: &EvalArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "eval")?;
    let pred = req(&a.pred, "pred")?;
    let base = req(&a.base, "base")?;
    let out = req(&a.out, "out")?;
    let split = a.split.clone().unwrap_or_else(|| "test".into());
    let dir = DataDir::open(&req(&a.data, "data")?)?;
    let windows = dir.windows(&split)?;
    let (_, base_fc) = read_split(&base, &split, &windows)?;
    let revised = join_forecasts(read_forecasts(&pred)?, &windows).with_context(|| format!("aligning {}", pred.display()))?;

    let base_err = per_instance_errors(&base_fc, &windows)?;
    let rev_err = per_instance_errors(&revised, &windows)?;
    let mut report = aggregate_report(&[Run {
        label: format!("L_out={}", dir.manifest.l_out),
        base: base_err.clone(),
        revised: rev_err.clone(),
    }]);
    report.base_per_step_mse = per_step_mse(&base_fc, &windows)?;
    report.revised_per_step_mse = per_step_mse(&revised, &windows)?;
    report.tail = Some(tail_stats(&base_err, &rev_err, 0.1)?);

    let delta_path = a.deltas.clone().or_else(|| Some(sibling(&pred, ".deltas.csv")).filter(|p| p.exists()));
    let mut points = Vec::new();
    if let Some(path) = delta_path {
        let deltas = read_deltas(&path)?;
        ensure!(deltas.len() == windows.len(), "{} has {} instances, expected {}", path.display(), deltas.len(), windows.len());
        for ((id, d), (f, w)) in deltas.iter().zip(base_fc.iter().zip(&windows)) {
            ensure!(*id == w.id, "δ file is not aligned with the {split} instances");
            let realized = realized_mse(&f.values, &w.y)?;
            points.push(DeltaPoint {
                instance_id: *id,
                delta_mean: pir_core::eval::mean(d),
                realized_mse: pir_core::eval::mean(&realized),
            });
        }
        if points.len() >= 3 {
            let d: Vec<f64> = points.iter().map(|p| p.delta_mean).collect();
            let r: Vec<f64> = points.iter().map(|p| p.realized_mse).collect();
            report.fidelity = Some(delta_fidelity(&d, &r)?);
        }
    }
    write_report(&out, &report, &base_err, &rev_err, &points, a.bins.unwrap_or(50))?;
    print_summary(&report);
    write_snapshot(&a, "eval", &out.join("effective_config.toml"))
}

fn print_summary(report: &EvalReport) {
    for r in &report.rows {
        println!(
            "{}: MSE {:.4} -> {:.4} ({:+.2}%), MAE {:.4} -> {:.4} ({:+.2}%)",
            r.label, r.base_mse, r.revised_mse, r.mse_improvement, r.base_mae, r.revised_mae, r.mae_improvement
        );
    }
    if let Some(t) = report.tail {
        println!("top {:.0}% instances: MSE {:.4} -> {:.4} ({:+.2}%)", t.fraction * 100.0, t.base_mse, t.revised_mse, t.improvement);
    }
    if let Some(f) = report.fidelity {
        match f.pearson {
            Some(r) => println!("δ fidelity: pearson {r:.4}, R² {:.4}", f.r_squared.unwrap_or(f64::NAN)),
            None => println!("δ fidelity: undefined (constant δ or error)"),
        }
    }
    for a in &report.ablation {
        println!("{:>9}: MSE {:.4} MAE {:.4} ({:+.2}%)", a.variant, a.mse, a.mae, a.improvement);
    }
}

// ---- ablate ----------------------------------------------------------------

#[derive(Args, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Variants to train (repeatable); all four by default.
    #[arg(long = "variant")]
    pub variants: Option<Vec<String>>,
    /// Output directory: one subdirectory per variant plus the combined report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Defaults for AblateArgs {
    fn fill_defaults(&mut self) {
        self.model.fill_defaults();
    }
}

pub fn ablate(cli: &AblateArgs, file: Option<&Path>) -> Result<()> {
    let a = resolve(cli, file, "ablate")?;
    let out = req(&a.out, "out")?;
    let variants: Vec<Variant> = match &a.variants {
        Some(v) if !v.is_empty() => v.iter().map(|s| s.parse()).collect::<Result<_, _>>()?,
        _ => Variant::ALL.to_vec(),
    };
    let (_, config, prepared) = a.model.prepare()?;
    fs::create_dir_all(&out)?;
    let mut report: Option<EvalReport> = None;
    let mut rows = Vec::new();
    for variant in variants {
        log::info!("training variant {variant}");
        let model = init_model(&prepared, &config, variant)?;
        let (model, history) =
            train_model(model, &prepared.train_samples, &prepared.val_samples, &config.train_config())?;
        let result = evaluate_model(&prepared, model, history, variant)?;
        pir_core::pipeline::write_run(&out.join(variant.as_str()), &prepared, &result, &config)?;
        rows.push(ablation_row(variant.as_str(), &result.base_errors, &result.revised_errors));
        if variant == Variant::Full || report.is_none() {
            report = Some(build_report(&prepared, &result)?);
        }
    }
    let mut report = report.context("no variants to train")?;
    report.ablation = rows;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    print_summary(&report);
    write_snapshot(&a, "ablate", &out.join("effective_config.toml"))
}

