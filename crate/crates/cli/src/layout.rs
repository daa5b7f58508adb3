//! On-disk layout shared by the subcommands.
//!
//! A data directory (written by `ingest`) holds standardized split files
//! `{stem}.train.csv`, `{stem}.val.csv`, `{stem}.test.csv`, the training
//! statistics `stats.csv` and `manifest.json`. Forecast files given as
//! `forecasts.csv` are stored per split as `forecasts.{split}.csv`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use pir_core::data::{
    join_forecasts, load_csv, make_windows, read_forecasts, CsvLayout, ForecastRecord, SplitRatios,
    TimeSeriesDataset, WindowInstance,
};
use pir_core::pipeline::{SplitForecasts, SplitWindows, Splits};

pub const SPLITS: [&str; 3] = ["train", "val", "test"];
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub source: String,
    pub stem: String,
    pub l_in: usize,
    pub l_out: usize,
    pub stride: usize,
    pub splits: SplitRatios,
    pub channels: Vec<String>,
    /// Absolute first row of each split.
    pub starts: [usize; 3],
}

/// `dir/name.csv` → `dir/name.{split}.csv`.
pub fn split_file(path: &Path, split: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{split}.csv"))
}

/// `dir/name.csv` → `dir/name{suffix}`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// The per-split file if present, otherwise `path` itself.
pub fn forecast_file(path: &Path, split: &str) -> Result<PathBuf> {
    let per_split = split_file(path, split);
    if per_split.exists() {
        Ok(per_split)
    } else if path.exists() {
        Ok(path.to_path_buf())
    } else {
        bail!("neither {} nor {} exists", per_split.display(), path.display())
    }
}

pub fn write_data_dir(dir: &Path, source: &Path, splits: &Splits, manifest: Manifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, ds) in SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        pir_core::data::write_csv(ds, &dir.join(format!("{}.{name}.csv", manifest.stem)))?;
    }
    splits.stats.write(&dir.join("stats.csv"))?;
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("wrote {} splits of {} to {}", SPLITS.len(), source.display(), dir.display());
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DataDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl DataDir {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .with_context(|| format!("{} is not a data directory (run `ingest` first)", dir.display()))?;
        let manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(DataDir { dir: dir.to_path_buf(), manifest })
    }

    pub fn dataset(&self, split: &str) -> Result<TimeSeriesDataset> {
        let i = split_index(split)?;
        let path = self.dir.join(format!("{}.{split}.csv", self.manifest.stem));
        let ds = load_csv(&path, &CsvLayout::default())?;
        Ok(TimeSeriesDataset::with_start(
            ds.values().clone(),
            ds.timestamps().to_vec(),
            ds.channel_names().to_vec(),
            self.manifest.starts[i],
        )?)
    }

    pub fn windows(&self, split: &str) -> Result<Vec<WindowInstance>> {
        let m = &self.manifest;
        Ok(make_windows(&self.dataset(split)?, m.l_in, m.l_out, m.stride)?)
    }

    pub fn all_windows(&self) -> Result<SplitWindows> {
        Ok(SplitWindows { train: self.windows("train")?, val: self.windows("val")?, test: self.windows("test")? })
    }
}

pub fn split_index(split: &str) -> Result<usize> {
    SPLITS.iter().position(|s| *s == split).with_context(|| format!("unknown split `{split}` (train|val|test)"))
}

/// Forecasts for one split aligned to its windows. The training split may
/// cover only some windows (e.g. a holdout tail); those windows are returned.
pub fn read_split(
    path: &Path,
    split: &str,
    windows: &[WindowInstance],
) -> Result<(Vec<WindowInstance>, Vec<ForecastRecord>)> {
    let file = forecast_file(path, split)?;
    let records = read_forecasts(&file).with_context(|| format!("reading {}", file.display()))?;
    let covered: Vec<WindowInstance> = if split == "train" {
        let ids: BTreeSet<usize> = records.iter().map(|r| r.instance_id).collect();
        windows.iter().filter(|w| ids.contains(&w.id)).cloned().collect()
    } else {
        windows.to_vec()
    };
    let joined = join_forecasts(records, &covered).with_context(|| format!("aligning {}", file.display()))?;
    if joined.is_empty() {
        bail!("{} has no forecasts", file.display());
    }
    Ok((covered, joined))
}

pub fn read_all_forecasts(path: &Path, windows: &SplitWindows) -> Result<(Vec<WindowInstance>, SplitForecasts)> {
    let (pir_train, train) = read_split(path, "train", &windows.train)?;
    let (_, val) = read_split(path, "val", &windows.val)?;
    let (_, test) = read_split(path, "test", &windows.test)?;
    Ok((pir_train, SplitForecasts { train, val, test }))
}
