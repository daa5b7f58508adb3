#![allow(dead_code)]

use chrono::{NaiveDate, TimeDelta};
use pir_core::data::{make_windows, TimeSeriesDataset, WindowInstance};
use pir_core::identify::UncertaintyConfig;
use pir_core::local::LocalConfig;
use pir_core::model::{PirConfig, Sample};
use pir_core::tensor::{named_rng, ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    named_rng(seed, "tests")
}

pub fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Adds uniform noise to every parameter so no gradient is trivially zero.
pub fn perturb(params: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = named_rng(seed, "tests.perturb");
    for (_, t) in params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += r.random_range(-scale..scale));
    }
}

/// A model small enough for finite differences.
pub fn small_config(n: usize, l_in: usize, l_out: usize, k: usize) -> PirConfig {
    PirConfig {
        k,
        uncertainty: UncertaintyConfig { embed_dim: 4, hidden: 8 },
        local: LocalConfig { d_model: 8, heads: 2, layers: 1, ff_dim: 16 },
        beta_hidden: 6,
        ..PirConfig::new(n, l_in, l_out)
    }
}

pub fn random_sample(rng: &mut impl Rng, c: &PirConfig, id: usize) -> Sample {
    let (n, li, lo, k) = (c.n_channels, c.l_in, c.l_out, c.k);
    let mut w = rand_tensor(rng, n, k, 1.0);
    for r in 0..n {
        let row = w.row_mut(r);
        row.sort_by(|a, b| b.total_cmp(a));
    }
    Sample {
        id,
        x: rand_tensor(rng, n, li, 1.0),
        ybar: rand_tensor(rng, n, lo, 1.0),
        exo: rand_tensor(rng, 1, lo * 5, 0.5),
        y_global: rand_tensor(rng, n, lo, 1.0),
        w,
        y: rand_tensor(rng, n, lo, 1.0),
    }
}

pub fn hourly(values: Vec<Vec<f64>>) -> TimeSeriesDataset {
    let t = values.len();
    let n = values[0].len();
    let start = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let stamps = (0..t).map(|i| start + TimeDelta::hours(i as i64)).collect();
    let names = (0..n).map(|c| format!("c{c}")).collect();
    TimeSeriesDataset::new(Tensor::from_rows(&values).unwrap(), stamps, names).unwrap()
}

/// Noisy sinusoids, one phase per channel.
pub fn sine_dataset(t: usize, n: usize, seed: u64) -> TimeSeriesDataset {
    let mut r = rng(seed);
    hourly(
        (0..t)
            .map(|i| {
                (0..n)
                    .map(|c| (i as f64 * std::f64::consts::TAU / 24.0 + c as f64).sin() + 0.1 * r.random_range(-1.0..1.0))
                    .collect()
            })
            .collect(),
    )
}

pub fn windows(t: usize, n: usize, l_in: usize, l_out: usize, seed: u64) -> Vec<WindowInstance> {
    make_windows(&sine_dataset(t, n, seed), l_in, l_out, 1).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
