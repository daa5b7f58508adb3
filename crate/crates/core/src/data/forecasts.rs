use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::WindowInstance;
use crate::error::{PirError, Result};
use crate::tensor::Tensor;

/// A forecast `N x L_out` for one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastRecord {
    pub instance_id: usize,
    pub values: Tensor,
    /// Name of the model that produced it.
    pub source: String,
}

impl ForecastRecord {
    pub fn new(instance_id: usize, values: Tensor, source: impl Into<String>) -> Self {
        ForecastRecord { instance_id, values, source: source.into() }
    }
}

/// Writes records in long format: `instance_id,channel,step,value`.
/// Floats are written in shortest round-trip form, so reading back is exact.
pub fn write_forecasts(records: &[ForecastRecord], path: &Path) -> Result<()> {
    if let Some(first) = records.first() {
        let shape = first.values.shape();
        if let Some(bad) = records.iter().find(|r| r.values.shape() != shape) {
            return Err(PirError::Shape {
                node: format!("forecast for instance {}", bad.instance_id),
                detail: format!("{:?} vs {:?}", bad.values.shape(), shape),
            });
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["instance_id", "channel", "step", "value"])?;
    for r in records {
        let cols = r.values.cols();
        for (i, v) in r.values.data().iter().enumerate() {
            w.write_record([
                r.instance_id.to_string(),
                (i / cols).to_string(),
                (i % cols).to_string(),
                v.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a long-format forecast file. Rows may come in any order; every
/// instance must cover the same complete `channel x step` grid. Records are
/// returned sorted by instance id and tagged with the file stem.
pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRecord>> {
    let source = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let want = ["instance_id", "channel", "step", "value"];
    if headers.len() != 4 || headers.iter().zip(want).any(|(h, w)| h != w) {
        return Err(PirError::Ingest {
            row: 1,
            message: format!("forecast header must be `{}`", want.join(",")),
        });
    }

    let mut cells: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record?;
        let bad = |what: &str| PirError::Ingest { row: line, message: format!("invalid {what}") };
        let id: usize = record.get(0).and_then(|s| s.parse().ok()).ok_or_else(|| bad("instance_id"))?;
        let ch: usize = record.get(1).and_then(|s| s.parse().ok()).ok_or_else(|| bad("channel"))?;
        let step: usize = record.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("step"))?;
        let v: f64 = record.get(3).and_then(|s| s.parse().ok()).ok_or_else(|| bad("value"))?;
        if !v.is_finite() {
            return Err(bad("value (non-finite)"));
        }
        if cells.entry(id).or_default().insert((ch, step), v).is_some() {
            return Err(PirError::Ingest {
                row: line,
                message: format!("duplicate cell (instance {id}, channel {ch}, step {step})"),
            });
        }
    }

    let mut shape: Option<(usize, usize)> = None;
    let mut out = Vec::with_capacity(cells.len());
    for (id, grid) in cells {
        let n = grid.keys().map(|k| k.0).max().unwrap_or(0) + 1;
        let l = grid.keys().map(|k| k.1).max().unwrap_or(0) + 1;
        if grid.len() != n * l {
            return Err(PirError::Shape {
                node: format!("forecast for instance {id}"),
                detail: format!("{} cells do not fill a {n} x {l} grid", grid.len()),
            });
        }
        match shape {
            None => shape = Some((n, l)),
            Some(s) if s != (n, l) => {
                return Err(PirError::Shape {
                    node: format!("forecast for instance {id}"),
                    detail: format!("{n} x {l} differs from {} x {}", s.0, s.1),
                })
            }
            _ => {}
        }
        // BTreeMap order is (channel, step), i.e. row-major
        let values = Tensor::matrix(n, l, grid.into_values().collect())?;
        out.push(ForecastRecord { instance_id: id, values, source: source.clone() });
    }
    Ok(out)
}

/// Aligns records to `instances` (same order). Every instance needs a record
/// of matching shape, and every record must refer to a known instance.
pub fn join_forecasts(
    records: Vec<ForecastRecord>,
    instances: &[WindowInstance],
) -> Result<Vec<ForecastRecord>> {
    let known: BTreeSet<usize> = instances.iter().map(|w| w.id).collect();
    let unknown: Vec<usize> =
        records.iter().map(|r| r.instance_id).filter(|id| !known.contains(id)).collect();
    if !unknown.is_empty() {
        return Err(PirError::UnknownIds(unknown));
    }
    let mut by_id: BTreeMap<usize, ForecastRecord> = BTreeMap::new();
    for r in records {
        let id = r.instance_id;
        if by_id.insert(id, r).is_some() {
            return Err(PirError::invalid(format!("instance {id} has more than one forecast")));
        }
    }
    let missing: Vec<usize> =
        instances.iter().map(|w| w.id).filter(|id| !by_id.contains_key(id)).collect();
    if !missing.is_empty() {
        return Err(PirError::MissingIds(missing));
    }
    instances
        .iter()
        .map(|w| {
            let r = by_id.remove(&w.id).expect("checked above");
            if r.values.shape() != w.y.shape() {
                return Err(PirError::Shape {
                    node: format!("forecast for instance {}", w.id),
                    detail: format!("{:?}, instance target is {:?}", r.values.shape(), w.y.shape()),
                });
            }
            Ok(r)
        })
        .collect()
}
