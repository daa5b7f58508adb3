use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TimeSeriesDataset;
use crate::error::{PirError, Result};
use crate::tensor::Tensor;

const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct Moments {
    mean: f64,
    std: f64,
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub names: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population (ddof = 0) statistics of every channel. A standard deviation
    /// below `1e-8` is replaced by 1 so the channel is only centered.
    pub fn fit(dataset: &TimeSeriesDataset) -> Self {
        let (t, n) = (dataset.len(), dataset.num_channels());
        let v = dataset.values().data();
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for c in 0..n {
            let m = (0..t).map(|i| v[i * n + c]).sum::<f64>() / t as f64;
            let var = (0..t).map(|i| (v[i * n + c] - m).powi(2)).sum::<f64>() / t as f64;
            let mut s = var.sqrt();
            if s < STD_FLOOR {
                log::warn!(
                    "channel `{}` is constant on the fitting split; scaling by 1",
                    dataset.channel_names()[c]
                );
                s = 1.0;
            }
            mean[c] = m;
            std[c] = s;
        }
        ChannelStats { names: dataset.channel_names().to_vec(), mean, std }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let map: BTreeMap<&str, Moments> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), Moments { mean: self.mean[i], std: self.std[i] }))
            .collect();
        std::fs::write(path, serde_json::to_string_pretty(&map)?)?;
        Ok(())
    }

    /// Reads a stats sidecar, ordering channels as in `channel_names`.
    pub fn read(path: &Path, channel_names: &[String]) -> Result<Self> {
        let map: BTreeMap<String, Moments> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let mut out = ChannelStats { names: channel_names.to_vec(), mean: vec![], std: vec![] };
        for name in channel_names {
            let m = map.get(name).ok_or_else(|| {
                PirError::invalid(format!("stats file {} has no channel `{name}`", path.display()))
            })?;
            out.mean.push(m.mean);
            out.std.push(m.std);
        }
        Ok(out)
    }

    fn check(&self, dataset: &TimeSeriesDataset) -> Result<()> {
        if self.names != dataset.channel_names() {
            return Err(PirError::invalid(format!(
                "stats channels {:?} do not match dataset channels {:?}",
                self.names,
                dataset.channel_names()
            )));
        }
        Ok(())
    }
}

/// Standardizes with `stats`, or with statistics fitted on `dataset` itself
/// when none are given. Returns the scaled dataset and the statistics used.
pub fn standardize(
    dataset: &TimeSeriesDataset,
    stats: Option<&ChannelStats>,
) -> Result<(TimeSeriesDataset, ChannelStats)> {
    let stats = match stats {
        Some(s) => {
            s.check(dataset)?;
            s.clone()
        }
        None => ChannelStats::fit(dataset),
    };
    let n = dataset.num_channels();
    let mut values = dataset.values().clone();
    for (i, v) in values.data_mut().iter_mut().enumerate() {
        let c = i % n;
        *v = (*v - stats.mean[c]) / stats.std[c];
    }
    Ok((dataset.with_values(values), stats))
}

pub fn destandardize(dataset: &TimeSeriesDataset, stats: &ChannelStats) -> Result<TimeSeriesDataset> {
    stats.check(dataset)?;
    let n = dataset.num_channels();
    let data = dataset
        .values()
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v * stats.std[i % n] + stats.mean[i % n])
        .collect();
    Ok(dataset.with_values(Tensor::matrix(dataset.len(), n, data)?))
}
