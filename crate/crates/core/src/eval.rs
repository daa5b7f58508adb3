//! Per-instance metrics, error distributions, δ fidelity, and report tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ForecastRecord, WindowInstance};
use crate::error::{PirError, Result};

pub const KDE_POINTS: usize = 256;
const BANDWIDTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceError {
    pub instance_id: usize,
    pub mse: f64,
    pub mae: f64,
}

/// MSE and MAE over all `N x L_out` cells of each instance, in target order.
pub fn per_instance_errors(predictions: &[ForecastRecord], targets: &[WindowInstance]) -> Result<Vec<InstanceError>> {
    let by_id: BTreeMap<usize, &ForecastRecord> = predictions.iter().map(|p| (p.instance_id, p)).collect();
    let known: std::collections::BTreeSet<usize> = targets.iter().map(|t| t.id).collect();
    let unknown: Vec<usize> = by_id.keys().copied().filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(PirError::UnknownIds(unknown));
    }
    let missing: Vec<usize> = targets.iter().map(|t| t.id).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(PirError::MissingIds(missing));
    }
    targets
        .iter()
        .map(|t| {
            let p = by_id[&t.id];
            if p.values.shape() != t.y.shape() {
                return Err(PirError::Shape {
                    node: format!("prediction for instance {}", t.id),
                    detail: format!("{:?} vs target {:?}", p.values.shape(), t.y.shape()),
                });
            }
            let n = t.y.len() as f64;
            let (mut se, mut ae) = (0.0, 0.0);
            for (a, b) in p.values.data().iter().zip(t.y.data()) {
                se += (a - b) * (a - b);
                ae += (a - b).abs();
            }
            Ok(InstanceError { instance_id: t.id, mse: se / n, mae: ae / n })
        })
        .collect()
}

/// MSE at each horizon step, averaged over instances and channels.
pub fn per_step_mse(predictions: &[ForecastRecord], targets: &[WindowInstance]) -> Result<Vec<f64>> {
    per_instance_errors(predictions, targets)?; // validates alignment
    let by_id: BTreeMap<usize, &ForecastRecord> = predictions.iter().map(|p| (p.instance_id, p)).collect();
    let Some(first) = targets.first() else { return Ok(Vec::new()) };
    let (n, l) = (first.y.rows(), first.y.cols());
    let mut acc = vec![0.0; l];
    for t in targets {
        let p = &by_id[&t.id].values;
        for c in 0..n {
            for s in 0..l {
                let d = p.at(c, s) - t.y.at(c, s);
                acc[s] += d * d;
            }
        }
    }
    let denom = (targets.len() * n) as f64;
    Ok(acc.into_iter().map(|v| v / denom).collect())
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population standard deviation.
pub fn std_dev(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Sample skewness `m3 / m2^1.5` (population moments).
pub fn skewness(v: &[f64]) -> f64 {
    let m = mean(v);
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / v.len() as f64;
    m3 / m2.powf(1.5)
}

/// Excess kurtosis `m4 / m2² - 3` (0 for a normal distribution).
pub fn kurtosis(v: &[f64]) -> f64 {
    let m = mean(v);
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    let m4 = v.iter().map(|x| (x - m).powi(4)).sum::<f64>() / v.len() as f64;
    m4 / (m2 * m2) - 3.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    /// `bins + 1` equal-width edges over `[min, max]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// Error value at the highest sampled density.
    pub peak: f64,
}

/// Histogram plus a Gaussian KDE (Scott's rule bandwidth `n^(-1/5)·σ`)
/// sampled at 256 points over `[min - 3h, max + 3h]`.
pub fn error_distribution(errors: &[f64], bins: usize) -> Result<Distribution> {
    if errors.len() < 2 || bins == 0 {
        return Err(PirError::invalid("need at least 2 errors and 1 bin"));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(PirError::NonFinite("error values".into()));
    }
    let lo = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut counts = vec![0usize; bins];
    for &e in errors {
        let i = if width > 0.0 { (((e - lo) / width) as usize).min(bins - 1) } else { 0 };
        counts[i] += 1;
    }

    let n = errors.len() as f64;
    let mut h = n.powf(-0.2) * std_dev(errors);
    if !(h >= BANDWIDTH_FLOOR) {
        log::warn!("degenerate error distribution; KDE bandwidth floored at {BANDWIDTH_FLOOR}");
        h = BANDWIDTH_FLOOR;
    }
    let (g0, g1) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (g1 - g0) / (KDE_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..KDE_POINTS).map(|i| g0 + step * i as f64).collect();
    let norm = 1.0 / (n * h * (2.0 * std::f64::consts::PI).sqrt());
    let density: Vec<f64> = grid
        .iter()
        .map(|&x| norm * errors.iter().map(|&e| (-0.5 * ((x - e) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    let peak_idx = (0..KDE_POINTS).fold(0, |best, i| if density[i] > density[best] { i } else { best });
    let peak = grid[peak_idx];
    Ok(Distribution { edges, counts, bandwidth: h, grid, peak, density })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub n: usize,
    /// `None` when either side has zero variance.
    pub pearson: Option<f64>,
    /// R² of the least-squares line predicting realized error from δ.
    pub r_squared: Option<f64>,
}

pub fn delta_fidelity(delta: &[f64], realized: &[f64]) -> Result<Fidelity> {
    if delta.len() != realized.len() || delta.len() < 3 {
        return Err(PirError::invalid("δ fidelity needs at least 3 aligned instances"));
    }
    let n = delta.len();
    let (mx, my) = (mean(delta), mean(realized));
    let sxx: f64 = delta.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = realized.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = delta.iter().zip(realized).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        log::warn!("δ fidelity undefined: zero variance");
        return Ok(Fidelity { n, pearson: None, r_squared: None });
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = delta.iter().zip(realized).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(Fidelity {
        n,
        pearson: Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)),
        r_squared: Some(1.0 - ss_res / syy),
    })
}

/// `(base - revised) / base × 100`, rounded to two decimals.
pub fn improvement_pct(base: f64, revised: f64) -> f64 {
    round2((base - revised) / base * 100.0)
}

fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub base_mse: f64,
    pub revised_mse: f64,
    pub mse_improvement: f64,
    pub base_mae: f64,
    pub revised_mae: f64,
    pub mae_improvement: f64,
}

impl ReportRow {
    pub fn new(label: impl Into<String>, base: (f64, f64), revised: (f64, f64)) -> Self {
        ReportRow {
            label: label.into(),
            base_mse: base.0,
            revised_mse: revised.0,
            mse_improvement: improvement_pct(base.0, revised.0),
            base_mae: base.1,
            revised_mae: revised.1,
            mae_improvement: improvement_pct(base.1, revised.1),
        }
    }
}

/// Errors of one evaluation setting (e.g. one horizon).
#[derive(Clone, Debug)]
pub struct Run {
    pub label: String,
    pub base: Vec<InstanceError>,
    pub revised: Vec<InstanceError>,
}

fn mean_errors(e: &[InstanceError]) -> (f64, f64) {
    let n = e.len() as f64;
    (e.iter().map(|x| x.mse).sum::<f64>() / n, e.iter().map(|x| x.mae).sum::<f64>() / n)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Average over rows, as in a table averaged across horizons.
    pub average: Option<ReportRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub base_per_step_mse: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub revised_per_step_mse: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<Fidelity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail: Option<TailStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ablation: Vec<AblationRow>,
}

/// Errors on the hardest instances, ranked by backbone MSE.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub fraction: f64,
    pub n: usize,
    pub base_mse: f64,
    pub revised_mse: f64,
    /// Relative MSE reduction in percent.
    pub improvement: f64,
}

/// Mean MSE of the `fraction` of instances with the largest backbone error
/// (at least one), before and after revision. Ties break by instance id.
pub fn tail_stats(base: &[InstanceError], revised: &[InstanceError], fraction: f64) -> Result<TailStats> {
    if base.is_empty() || base.len() != revised.len() || !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PirError::invalid("tail statistics need aligned, nonempty errors and a fraction in (0, 1]"));
    }
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_by(|&a, &b| base[b].mse.total_cmp(&base[a].mse).then(base[a].instance_id.cmp(&base[b].instance_id)));
    let n = ((base.len() as f64 * fraction).ceil() as usize).max(1);
    let top = &order[..n];
    let b = top.iter().map(|&i| base[i].mse).sum::<f64>() / n as f64;
    let r = top.iter().map(|&i| revised[i].mse).sum::<f64>() / n as f64;
    Ok(TailStats { fraction, n, base_mse: b, revised_mse: r, improvement: improvement_pct(b, r) })
}

/// One row per run plus the across-run average.
pub fn aggregate_report(runs: &[Run]) -> EvalReport {
    let rows: Vec<ReportRow> =
        runs.iter().map(|r| ReportRow::new(r.label.clone(), mean_errors(&r.base), mean_errors(&r.revised))).collect();
    let average = (!rows.is_empty()).then(|| {
        let k = rows.len() as f64;
        let avg = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
        ReportRow::new(
            "average",
            (avg(|r| r.base_mse), avg(|r| r.base_mae)),
            (avg(|r| r.revised_mse), avg(|r| r.revised_mae)),
        )
    });
    EvalReport { rows, average, ..EvalReport::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub mse: f64,
    pub mae: f64,
    /// MSE improvement over the backbone.
    pub improvement: f64,
}

pub fn ablation_row(variant: &str, backbone: &[InstanceError], revised: &[InstanceError]) -> AblationRow {
    let (bm, _) = mean_errors(backbone);
    let (mse, mae) = mean_errors(revised);
    AblationRow { variant: variant.into(), mse, mae, improvement: improvement_pct(bm, mse) }
}

/// Per-instance δ (averaged over channels) next to the realized backbone error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPoint {
    pub instance_id: usize,
    pub delta_mean: f64,
    pub realized_mse: f64,
}

/// Writes `metrics.json`, `per_instance.csv`, `distribution.csv` and, when
/// δ points are given, `delta_fidelity.csv` into `dir`.
pub fn write_report(
    dir: &Path,
    report: &EvalReport,
    base: &[InstanceError],
    revised: &[InstanceError],
    deltas: &[DeltaPoint],
    bins: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(report)? + "\n")?;

    let mut w = csv::Writer::from_path(dir.join("per_instance.csv"))?;
    w.write_record(["instance_id", "base_mse", "base_mae", "revised_mse", "revised_mae"])?;
    for (b, r) in base.iter().zip(revised) {
        w.write_record([
            b.instance_id.to_string(),
            b.mse.to_string(),
            b.mae.to_string(),
            r.mse.to_string(),
            r.mae.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("distribution.csv"))?;
    w.write_record(["series", "kind", "x", "x_end", "value"])?;
    for (series, errs) in [("base", base), ("revised", revised)] {
        let values: Vec<f64> = errs.iter().map(|e| e.mse).collect();
        if values.len() < 2 {
            continue;
        }
        let d = error_distribution(&values, bins)?;
        for (i, c) in d.counts.iter().enumerate() {
            w.write_record([series, "histogram", &d.edges[i].to_string(), &d.edges[i + 1].to_string(), &c.to_string()])?;
        }
        for (x, y) in d.grid.iter().zip(&d.density) {
            w.write_record([series, "kde", &x.to_string(), "", &y.to_string()])?;
        }
        w.write_record([series, "peak", &d.peak.to_string(), "", ""])?;
    }
    w.flush()?;

    if !deltas.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("delta_fidelity.csv"))?;
        w.write_record(["instance_id", "delta_mean", "realized_mse"])?;
        for p in deltas {
            w.write_record([p.instance_id.to_string(), p.delta_mean.to_string(), p.realized_mse.to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Per-channel δ values: `instance_id,channel,delta`.
pub fn write_deltas(path: &Path, deltas: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_id", "channel", "delta"])?;
    for (id, d) in deltas {
        for (c, v) in d.iter().enumerate() {
            w.write_record([id.to_string(), c.to_string(), v.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_deltas(path: &Path) -> Result<Vec<(usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut map: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = || PirError::Ingest { row: i + 2, message: "expected instance_id,channel,delta".into() };
        let id: usize = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let c: usize = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let v: f64 = rec.get(2).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        map.entry(id).or_default().insert(c, v);
    }
    Ok(map.into_iter().map(|(id, m)| (id, m.into_values().collect())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improvement_examples() {
        assert_eq!(improvement_pct(0.466, 0.437), 6.22);
        assert_eq!(improvement_pct(0.3, 0.3), 0.0);
        assert_eq!(improvement_pct(0.2, 0.1), 50.0);
    }

    #[test]
    fn two_bin_histogram() {
        let d = error_distribution(&[0.0, 1.0], 2).unwrap();
        assert_eq!(d.counts, vec![1, 1]);
        assert_eq!(d.grid.len(), KDE_POINTS);
    }

    #[test]
    fn identical_errors_floor_the_bandwidth() {
        let d = error_distribution(&[0.5, 0.5, 0.5], 4).unwrap();
        assert_eq!(d.bandwidth, BANDWIDTH_FLOOR);
        assert_eq!(d.counts.iter().sum::<usize>(), 3);
    }

    #[test]
    fn fidelity_identity_and_degenerate() {
        let r = [0.1, 0.5, 0.2, 0.9];
        let f = delta_fidelity(&r, &r).unwrap();
        assert!((f.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert!((f.r_squared.unwrap() - 1.0).abs() < 1e-12);
        let f = delta_fidelity(&[0.3; 4], &r).unwrap();
        assert_eq!((f.pearson, f.r_squared), (None, None));
        assert!(delta_fidelity(&r[..2], &r[..2]).is_err());
    }
}
