//! End-to-end orchestration: split and standardize, produce backbone
//! forecasts, build the retrieval database, train a variant, and evaluate.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{fit_linear, Backbone};
use crate::data::{
    make_windows, split_chronological, standardize, write_forecasts, ChannelStats, ForecastRecord, SplitRatios,
    TimeSeriesDataset, WindowInstance,
};
use crate::error::{PirError, Result};
use crate::eval::{
    aggregate_report, delta_fidelity, per_instance_errors, per_step_mse, tail_stats, write_deltas, write_report, DeltaPoint,
    EvalReport, InstanceError, Run,
};
use crate::identify::{realized_mse, UncertaintyConfig};
use crate::local::LocalConfig;
use crate::model::{make_samples, save_model, PirConfig, PirModel, Prediction, Sample, Variant};
use crate::retrieval::{build_database, global_contexts, RetrievalConfig, RetrievalDatabase};
use crate::train::{train, TrainConfig, TrainHistory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackboneSpec {
    Seasonal { period: usize },
    Linear { ridge: f64 },
}

/// How training-split backbone forecasts are produced.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastMode {
    /// Fit on the whole training split and forecast it in-sample.
    #[default]
    InSample,
    /// Fit on the first 80% of training windows; train the reviser only on
    /// the remaining 20%, forecast out-of-sample.
    HoldoutRefit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub uncertainty: UncertaintyConfig,
    pub local: LocalConfig,
    pub beta_hidden: usize,
    pub beta_bias_init: f64,
    pub lambda: f64,
    pub joint_backbone: bool,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            uncertainty: UncertaintyConfig::default(),
            local: LocalConfig::default(),
            beta_hidden: 32,
            beta_bias_init: -2.0,
            lambda: 1.0,
            joint_backbone: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub l_in: usize,
    pub l_out: usize,
    pub splits: SplitRatios,
    pub stride: usize,
    pub backbone: BackboneSpec,
    pub forecast_mode: ForecastMode,
    pub retrieval: RetrievalConfig,
    pub model: ModelSettings,
    pub train: TrainConfig,
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            l_in: 96,
            l_out: 24,
            splits: SplitRatios { train: 7.0, val: 1.0, test: 2.0 },
            stride: 1,
            backbone: BackboneSpec::Seasonal { period: 24 },
            forecast_mode: ForecastMode::InSample,
            retrieval: RetrievalConfig::default(),
            model: ModelSettings::default(),
            train: TrainConfig::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn pir_config(&self, n_channels: usize, variant: Variant) -> PirConfig {
        let m = &self.model;
        PirConfig {
            n_channels,
            l_in: self.l_in,
            l_out: self.l_out,
            k: self.retrieval.k,
            uncertainty: m.uncertainty,
            local: m.local,
            beta_hidden: m.beta_hidden,
            beta_bias_init: m.beta_bias_init,
            lambda: m.lambda,
            variant,
            seed: self.seed,
            joint_backbone: m.joint_backbone,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }
}

/// Standardized train/validation/test segments and the training statistics.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TimeSeriesDataset,
    pub val: TimeSeriesDataset,
    pub test: TimeSeriesDataset,
    pub stats: ChannelStats,
}

pub fn standardized_splits(raw: &TimeSeriesDataset, ratios: SplitRatios) -> Result<Splits> {
    let (train, val, test) = split_chronological(raw, ratios)?;
    let (train, stats) = standardize(&train, None)?;
    let (val, _) = standardize(&val, Some(&stats))?;
    let (test, _) = standardize(&test, Some(&stats))?;
    Ok(Splits { train, val, test, stats })
}

#[derive(Clone, Debug)]
pub struct SplitWindows {
    pub train: Vec<WindowInstance>,
    pub val: Vec<WindowInstance>,
    pub test: Vec<WindowInstance>,
}

pub fn split_windows(splits: &Splits, config: &PipelineConfig) -> Result<SplitWindows> {
    let w = |d: &TimeSeriesDataset| make_windows(d, config.l_in, config.l_out, config.stride);
    Ok(SplitWindows { train: w(&splits.train)?, val: w(&splits.val)?, test: w(&splits.test)? })
}

/// Backbone forecasts per split, aligned with the windows.
#[derive(Clone, Debug)]
pub struct SplitForecasts {
    /// Forecasts for the windows the reviser trains on (see [`Prepared::pir_train`]).
    pub train: Vec<ForecastRecord>,
    pub val: Vec<ForecastRecord>,
    pub test: Vec<ForecastRecord>,
}

/// Everything needed to train and evaluate revision models.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub windows: SplitWindows,
    /// Windows the reviser trains on: all of train, or its tail in holdout mode.
    pub pir_train: Vec<WindowInstance>,
    pub backbone: Option<Backbone>,
    pub forecasts: SplitForecasts,
    pub db: RetrievalDatabase,
    pub train_samples: Vec<Sample>,
    pub val_samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
}

fn fit_backbone(spec: &BackboneSpec, windows: &[WindowInstance], l_out: usize) -> Result<Backbone> {
    Ok(match spec {
        BackboneSpec::Seasonal { period } => Backbone::Seasonal { period: *period, l_out },
        BackboneSpec::Linear { ridge } => Backbone::Linear(fit_linear(windows, *ridge)?),
    })
}

/// Fits the configured native backbone (training windows only) and prepares samples.
pub fn prepare_native(windows: SplitWindows, config: &PipelineConfig) -> Result<Prepared> {
    let backbone = fit_backbone(&config.backbone, &windows.train, config.l_out)?;
    let (pir_train, train_fc) = match (config.forecast_mode, &config.backbone) {
        (ForecastMode::HoldoutRefit, BackboneSpec::Linear { .. }) => {
            let cut = windows.train.len() * 4 / 5;
            if cut == 0 || cut == windows.train.len() {
                return Err(PirError::invalid("too few training windows for a holdout refit"));
            }
            let early = fit_backbone(&config.backbone, &windows.train[..cut], config.l_out)?;
            let tail = windows.train[cut..].to_vec();
            let fc = early.forecast(&tail)?;
            (tail, fc)
        }
        (mode, _) => {
            if mode == ForecastMode::HoldoutRefit {
                log::info!("seasonal backbone has no parameters; holdout refit is the same as in-sample");
            }
            (windows.train.clone(), backbone.forecast(&windows.train)?)
        }
    };
    let forecasts = SplitForecasts {
        train: train_fc,
        val: backbone.forecast(&windows.val)?,
        test: backbone.forecast(&windows.test)?,
    };
    let mut prepared = prepare_with_forecasts(windows, pir_train, forecasts, config)?;
    prepared.backbone = Some(backbone);
    Ok(prepared)
}

/// Prepares samples from forecasts produced elsewhere (aligned with the windows).
pub fn prepare_with_forecasts(
    windows: SplitWindows,
    pir_train: Vec<WindowInstance>,
    forecasts: SplitForecasts,
    config: &PipelineConfig,
) -> Result<Prepared> {
    let db = build_database(&windows.train, config.retrieval.granularity)?;
    let train_ctx = global_contexts(&db, &pir_train, &config.retrieval, true)?;
    let val_ctx = global_contexts(&db, &windows.val, &config.retrieval, false)?;
    let test_ctx = global_contexts(&db, &windows.test, &config.retrieval, false)?;
    Ok(Prepared {
        train_samples: make_samples(&pir_train, &forecasts.train, &train_ctx)?,
        val_samples: make_samples(&windows.val, &forecasts.val, &val_ctx)?,
        test_samples: make_samples(&windows.test, &forecasts.test, &test_ctx)?,
        windows,
        pir_train,
        backbone: None,
        forecasts,
        db,
    })
}

/// A trained variant and its test-split evaluation.
#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub model: PirModel,
    pub history: TrainHistory,
    pub predictions: Vec<Prediction>,
    pub revised: Vec<ForecastRecord>,
    pub base_errors: Vec<InstanceError>,
    pub revised_errors: Vec<InstanceError>,
}

impl VariantResult {
    pub fn base_mse(&self) -> f64 {
        crate::eval::mean(&self.base_errors.iter().map(|e| e.mse).collect::<Vec<_>>())
    }

    pub fn revised_mse(&self) -> f64 {
        crate::eval::mean(&self.revised_errors.iter().map(|e| e.mse).collect::<Vec<_>>())
    }
}

/// A freshly initialized model for `variant` (joint mode starts from the fitted linear backbone).
pub fn init_model(prepared: &Prepared, config: &PipelineConfig, variant: Variant) -> Result<PirModel> {
    let n = prepared.windows.train[0].x.rows();
    let pir = config.pir_config(n, variant);
    if pir.joint_backbone {
        match &prepared.backbone {
            Some(Backbone::Linear(lb)) => PirModel::with_backbone(pir, lb),
            _ => Err(PirError::invalid("joint backbone training requires the native linear backbone")),
        }
    } else {
        PirModel::new(pir)
    }
}

pub fn train_variant(prepared: &Prepared, config: &PipelineConfig, variant: Variant) -> Result<VariantResult> {
    let model = init_model(prepared, config, variant)?;
    let (model, history) = train(model, &prepared.train_samples, &prepared.val_samples, &config.train_config())?;
    evaluate_model(prepared, model, history, variant)
}

pub fn evaluate_model(
    prepared: &Prepared,
    model: PirModel,
    history: TrainHistory,
    variant: Variant,
) -> Result<VariantResult> {
    let predictions = model.predict_all(&prepared.test_samples)?;
    let revised: Vec<ForecastRecord> = predictions
        .iter()
        .zip(&prepared.test_samples)
        .map(|(p, s)| ForecastRecord::new(s.id, p.y_pred.clone(), format!("pir-{variant}")))
        .collect();
    let base_errors = per_instance_errors(&prepared.forecasts.test, &prepared.windows.test)?;
    let revised_errors = per_instance_errors(&revised, &prepared.windows.test)?;
    Ok(VariantResult { variant, model, history, predictions, revised, base_errors, revised_errors })
}

/// δ averaged over channels next to the realized backbone MSE, per test instance.
pub fn delta_points(prepared: &Prepared, result: &VariantResult) -> Result<Vec<DeltaPoint>> {
    result
        .predictions
        .iter()
        .zip(&prepared.test_samples)
        .map(|(p, s)| {
            let realized = realized_mse(&s.ybar, &s.y)?;
            Ok(DeltaPoint {
                instance_id: s.id,
                delta_mean: crate::eval::mean(&p.delta),
                realized_mse: crate::eval::mean(&realized),
            })
        })
        .collect()
}

pub fn build_report(prepared: &Prepared, result: &VariantResult) -> Result<EvalReport> {
    let mut report = aggregate_report(&[Run {
        label: format!("L_out={}", prepared.windows.test[0].y.cols()),
        base: result.base_errors.clone(),
        revised: result.revised_errors.clone(),
    }]);
    report.base_per_step_mse = per_step_mse(&prepared.forecasts.test, &prepared.windows.test)?;
    report.revised_per_step_mse = per_step_mse(&result.revised, &prepared.windows.test)?;
    report.tail = Some(tail_stats(&result.base_errors, &result.revised_errors, 0.1)?);
    let points = delta_points(prepared, result)?;
    let d: Vec<f64> = points.iter().map(|p| p.delta_mean).collect();
    let r: Vec<f64> = points.iter().map(|p| p.realized_mse).collect();
    if points.len() >= 3 {
        report.fidelity = Some(delta_fidelity(&d, &r)?);
    }
    Ok(report)
}

/// Writes the checkpoint, database, revised forecasts, δ values, training
/// history and report for one variant into `dir`.
pub fn write_run(dir: &Path, prepared: &Prepared, result: &VariantResult, config: &PipelineConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let db_dir = dir.join("db");
    prepared.db.save(&db_dir)?;
    let extra = serde_json::json!({ "pipeline": config });
    save_model(&result.model, &dir.join("model.json"), Some(&prepared.db.fingerprint()), extra)?;
    write_forecasts(&result.revised, &dir.join("revised.csv"))?;
    let deltas: Vec<(usize, Vec<f64>)> =
        result.predictions.iter().zip(&prepared.test_samples).map(|(p, s)| (s.id, p.delta.clone())).collect();
    write_deltas(&dir.join("deltas.csv"), &deltas)?;
    fs::write(dir.join("history.json"), serde_json::to_string_pretty(&result.history)? + "\n")?;
    let report = build_report(prepared, result)?;
    let points = delta_points(prepared, result)?;
    write_report(&dir.join("report"), &report, &result.base_errors, &result.revised_errors, &points, 50)
}
