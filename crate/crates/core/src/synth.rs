//! Synthetic multichannel series with rare recurring motifs: a desk-scale
//! long-tail benchmark with known ground truth.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use chrono::TimeDelta;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{parse_timestamp, SplitRatios, TimeSeriesDataset};
use crate::error::{PirError, Result};
use crate::tensor::{named_rng, Tensor};

pub const MAX_TEMPLATES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_channels: usize,
    pub length: usize,
    pub start: String,
    pub daily_amplitude: f64,
    pub weekly_amplitude: f64,
    pub ar_phi: f64,
    pub ar_sigma: f64,
    pub motifs: bool,
    /// Share of non-overlapping segments that carry a motif.
    pub motif_fraction: f64,
    pub segment_len: usize,
    /// How many of the fixed templates are used (at most 10).
    pub n_templates: usize,
    pub motif_amplitude: f64,
    /// Minimum occurrences of every template inside the training split.
    pub min_train_occurrences: usize,
    pub splits: SplitRatios,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_channels: 3,
            length: 6000,
            start: "2016-07-01 00:00:00".into(),
            daily_amplitude: 1.0,
            weekly_amplitude: 0.5,
            ar_phi: 0.7,
            ar_sigma: 0.1,
            motifs: true,
            motif_fraction: 0.05,
            segment_len: 24,
            n_templates: 2,
            motif_amplitude: 3.0,
            min_train_occurrences: 5,
            splits: SplitRatios { train: 7.0, val: 1.0, test: 2.0 },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifEvent {
    pub template: usize,
    pub channel: usize,
    /// First row of the motif segment.
    pub start: usize,
    pub len: usize,
    pub split: SplitName,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Ground truth written next to a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthLog {
    pub seed: u64,
    pub config: SynthConfig,
    pub events: Vec<MotifEvent>,
    /// Candidate segments rejected because they straddled a split boundary.
    pub resampled: Vec<usize>,
}

/// Template `i` of length `len`, unit amplitude. Shapes are squares, spikes,
/// ramps and steps at different positions so that no two are alike.
pub fn motif_template(i: usize, len: usize) -> Vec<f64> {
    let f = |t: usize| t as f64 / len as f64; // position in [0, 1)
    (0..len)
        .map(|t| {
            let p = f(t);
            match i {
                0 => f64::from(u8::from((0.15..0.65).contains(&p))),
                1 => f64::from(u8::from(t % 6 < 2)),
                2 => -f64::from(u8::from((0.3..0.8).contains(&p))),
                3 => if p < 0.7 { p / 0.7 } else { -1.0 },
                4 => f64::from(u8::from((0.1..0.3).contains(&p) || (0.6..0.8).contains(&p))),
                5 => if (0.4..0.5).contains(&p) { 1.5 } else { 0.0 },
                6 => if p < 0.5 { 1.0 } else { -1.0 },
                7 => (1.0 - p) * f64::from(u8::from(t % 4 == 0)),
                8 => -f64::from(u8::from(t % 8 < 3)),
                _ => if p >= 0.5 { 1.0 } else { 0.0 },
            }
        })
        .collect()
}

pub fn generate_synthetic_benchmark(config: &SynthConfig, seed: u64) -> Result<(TimeSeriesDataset, SynthLog)> {
    let (n, t_len, seg) = (config.n_channels, config.length, config.segment_len);
    if n == 0 || t_len == 0 || seg == 0 {
        return Err(PirError::invalid("channels, length and segment length must be positive"));
    }
    let start = parse_timestamp(&config.start)
        .ok_or_else(|| PirError::invalid(format!("bad start timestamp `{}`", config.start)))?;

    let mut values = vec![0.0; t_len * n];
    for c in 0..n {
        let mut rng = named_rng(seed, &format!("synth.noise.{c}"));
        let (pd, pw) = (c as f64 * PI / 3.0, c as f64 * PI / 5.0);
        let amp_d = config.daily_amplitude * (1.0 + 0.25 * c as f64);
        let mut e = 0.0;
        for t in 0..t_len {
            let z: f64 = rng.sample(StandardNormal);
            e = config.ar_phi * e + config.ar_sigma * z;
            let tt = t as f64;
            values[t * n + c] = amp_d * (2.0 * PI * tt / 24.0 + pd).sin()
                + config.weekly_amplitude * (2.0 * PI * tt / 168.0 + pw).sin()
                + e;
        }
    }

    let mut log = SynthLog { seed, config: config.clone(), events: Vec::new(), resampled: Vec::new() };
    if config.motifs {
        place_motifs(config, seed, &mut values, &mut log)?;
    }

    let stamps = (0..t_len).map(|i| start + TimeDelta::hours(i as i64)).collect();
    let names = (0..n).map(|c| format!("ch{c}")).collect();
    Ok((TimeSeriesDataset::new(Tensor::matrix(t_len, n, values)?, stamps, names)?, log))
}

fn place_motifs(config: &SynthConfig, seed: u64, values: &mut [f64], log: &mut SynthLog) -> Result<()> {
    let (n, t_len, seg) = (config.n_channels, config.length, config.segment_len);
    if config.n_templates == 0 || config.n_templates > MAX_TEMPLATES {
        return Err(PirError::invalid(format!("n_templates must be in 1..={MAX_TEMPLATES}")));
    }
    let (b1, b2) = config.splits.boundaries(t_len);
    let segments = t_len / seg;
    let region = |s: usize| -> Option<SplitName> {
        let (lo, hi) = (s * seg, (s + 1) * seg);
        if hi <= b1 {
            Some(SplitName::Train)
        } else if lo >= b1 && hi <= b2 {
            Some(SplitName::Val)
        } else if lo >= b2 {
            Some(SplitName::Test)
        } else {
            None
        }
    };
    let by_split = |name: SplitName| (0..segments).filter(|&s| region(s) == Some(name)).count();

    let requested = (config.motif_fraction * segments as f64).round() as usize;
    let train_needed = config.n_templates * config.min_train_occurrences;
    let total = requested.max(train_needed);
    if total > requested {
        log::warn!(
            "motif fraction gives {requested} motifs but {train_needed} are needed in training; using {total}"
        );
    }
    // remaining motifs go to validation and test in proportion to their size
    let rest = total - train_needed.min(total);
    let (n_val, n_test) = (by_split(SplitName::Val), by_split(SplitName::Test));
    let rest_val = (rest * n_val + (n_val + n_test) / 2).checked_div(n_val + n_test).unwrap_or(0);
    let plan: Vec<(SplitName, usize)> = (0..train_needed)
        .map(|i| (SplitName::Train, i % config.n_templates))
        .chain((0..rest).map(|i| {
            let split = if i < rest_val { SplitName::Val } else { SplitName::Test };
            (split, i % config.n_templates)
        }))
        .collect();

    let mut rng = named_rng(seed, "synth.motifs");
    let mut used = BTreeSet::new();
    let mut straddled = BTreeSet::new();
    for (split, template) in plan {
        let available = (0..segments).filter(|s| region(*s) == Some(split) && !used.contains(s)).count();
        if available == 0 {
            return Err(PirError::invalid(format!("no free {split:?} segment left for a motif")));
        }
        let s = loop {
            let cand = rng.random_range(0..segments);
            if region(cand).is_none() && straddled.insert(cand) {
                log::info!("motif candidate segment {cand} straddles a split boundary; resampling");
                log.resampled.push(cand);
            }
            if region(cand) == Some(split) && !used.contains(&cand) {
                break cand;
            }
        };
        used.insert(s);
        let channel = rng.random_range(0..n);
        let shape = motif_template(template, seg);
        for (k, v) in shape.iter().enumerate() {
            values[(s * seg + k) * n + channel] += config.motif_amplitude * v;
        }
        log.events.push(MotifEvent { template, channel, start: s * seg, len: seg, split });
    }
    log.events.sort_by_key(|e| e.start);
    Ok(())
}
