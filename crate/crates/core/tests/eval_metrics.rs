mod common;

use common::{rng, windows};
use pir_core::data::ForecastRecord;
use pir_core::eval::{
    aggregate_report, delta_fidelity, error_distribution, improvement_pct, kurtosis, per_instance_errors,
    per_step_mse, skewness, tail_stats, InstanceError, Run,
};
use pir_core::pipeline::{prepare_native, split_windows, standardized_splits, BackboneSpec, PipelineConfig};
use pir_core::synth::{generate_synthetic_benchmark, SynthConfig};
use pir_core::tensor::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn noisy(ws: &[pir_core::data::WindowInstance], seed: u64) -> Vec<ForecastRecord> {
    let mut r = rng(seed);
    ws.iter()
        .map(|w| {
            let noise = common::rand_tensor(&mut r, w.y.rows(), w.y.cols(), 1.0);
            let v: Vec<f64> = w.y.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            ForecastRecord::new(w.id, Tensor::matrix(w.y.rows(), w.y.cols(), v).unwrap(), "noisy")
        })
        .collect()
}

#[test]
fn per_instance_errors_match_loop_oracle() {
    let ws = windows(60, 3, 8, 5, 0);
    let preds = noisy(&ws, 1);
    let errs = per_instance_errors(&preds, &ws).unwrap();
    for ((e, p), w) in errs.iter().zip(&preds).zip(&ws) {
        let (mut se, mut ae) = (0.0, 0.0);
        for c in 0..3 {
            for t in 0..5 {
                let d = p.values.at(c, t) - w.y.at(c, t);
                se += d * d;
                ae += d.abs();
            }
        }
        assert_eq!(e.instance_id, w.id);
        assert!((e.mse - se / 15.0).abs() < 1e-12 && (e.mae - ae / 15.0).abs() < 1e-12);
    }
    // aggregate equals the mean of per-instance values, and of per-step values
    let report = aggregate_report(&[Run { label: "h5".into(), base: errs.clone(), revised: errs.clone() }]);
    let mean = errs.iter().map(|e| e.mse).sum::<f64>() / errs.len() as f64;
    assert!((report.rows[0].base_mse - mean).abs() < 1e-10);
    let steps = per_step_mse(&preds, &ws).unwrap();
    assert!((steps.iter().sum::<f64>() / 5.0 - mean).abs() < 1e-10);
}

#[test]
fn improvement_examples() {
    assert_eq!(improvement_pct(0.466, 0.437), 6.22);
    assert_eq!(improvement_pct(1.0, 1.0), 0.0);
    assert_eq!(improvement_pct(2.0, 1.0), 50.0);
    assert_eq!(improvement_pct(1.0, 1.5), -50.0);
}

#[test]
fn kde_integrates_to_one() {
    let mut r = rng(5);
    let errors: Vec<f64> = (0..500).map(|_| r.random_range(0.0..1.0f64).powi(3) * 4.0).collect();
    let d = error_distribution(&errors, 50).unwrap();
    let step = d.grid[1] - d.grid[0];
    // trapezoid rule over the sampled grid
    let area: f64 = d.density.windows(2).map(|p| 0.5 * (p[0] + p[1]) * step).sum();
    assert!((area - 1.0).abs() < 1e-2, "{area}");
    assert_eq!(d.counts.iter().sum::<usize>(), 500);
    assert_eq!(d.edges.len(), 51);
}

#[test]
fn symmetric_errors_give_a_symmetric_density() {
    let mut r = rng(6);
    let half: Vec<f64> = (0..100).map(|_| r.random_range(0.1..2.0)).collect();
    let errors: Vec<f64> = half.iter().flat_map(|v| [*v, -*v]).collect();
    let d = error_distribution(&errors, 20).unwrap();
    let n = d.density.len();
    for i in 0..n {
        assert!((d.density[i] - d.density[n - 1 - i]).abs() < 1e-9);
    }
    assert!(skewness(&errors).abs() < 1e-12);
    // a uniform sample is platykurtic: excess kurtosis near -1.2
    let uniform: Vec<f64> = (0..10_000).map(|i| i as f64).collect();
    assert!((kurtosis(&uniform) + 1.2).abs() < 1e-3);
}

#[test]
fn tail_ranks_by_backbone_error() {
    let e = |id, mse| InstanceError { instance_id: id, mse, mae: 0.0 };
    let base: Vec<_> = (0..20).map(|i| e(i, i as f64)).collect();
    let revised: Vec<_> = (0..20).map(|i| e(i, if i >= 18 { 1.0 } else { i as f64 })).collect();
    let t = tail_stats(&base, &revised, 0.1).unwrap();
    assert_eq!(t.n, 2);
    assert_eq!((t.base_mse, t.revised_mse), (18.5, 1.0));
}

#[test]
fn fidelity_of_an_exact_linear_relation() {
    let d: Vec<f64> = (0..10).map(|i| i as f64).collect();
    let f = delta_fidelity(&d, &d.iter().map(|x| 2.0 * x + 1.0).collect::<Vec<_>>()).unwrap();
    assert!((f.pearson.unwrap() - 1.0).abs() < 1e-12 && (f.r_squared.unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(delta_fidelity(&d, &[3.0; 10]).unwrap().pearson, None);
}

fn backbone_test_errors(motifs: bool) -> Vec<f64> {
    let synth = SynthConfig { motifs, ..SynthConfig::default() };
    let (ds, _) = generate_synthetic_benchmark(&synth, 0).unwrap();
    let cfg = PipelineConfig { backbone: BackboneSpec::Linear { ridge: 1.0 }, ..PipelineConfig::default() };
    let splits = standardized_splits(&ds, cfg.splits).unwrap();
    let prep = prepare_native(split_windows(&splits, &cfg).unwrap(), &cfg).unwrap();
    per_instance_errors(&prep.forecasts.test, &prep.windows.test).unwrap().iter().map(|e| e.mse).collect()
}

#[test]
fn motifs_make_backbone_errors_heavy_tailed() {
    let plain = backbone_test_errors(false);
    let with = backbone_test_errors(true);
    assert!(kurtosis(&plain) < 5.0, "motif-free kurtosis {}", kurtosis(&plain));
    assert!(kurtosis(&with) > 5.0, "motif kurtosis {}", kurtosis(&with));
    assert!(skewness(&with) > 1.0, "motif skewness {}", skewness(&with));
}

#[test]
fn synthetic_benchmark_is_seed_deterministic() {
    let cfg = SynthConfig { length: 1500, ..SynthConfig::default() };
    let (a, la) = generate_synthetic_benchmark(&cfg, 11).unwrap();
    let (b, lb) = generate_synthetic_benchmark(&cfg, 11).unwrap();
    assert!(a.values().data().iter().zip(b.values().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(la, lb);
    let (c, _) = generate_synthetic_benchmark(&cfg, 12).unwrap();
    assert_ne!(a.values().data(), c.values().data());
}

proptest! {
    #[test]
    fn improvement_is_antisymmetric(a in 0.01f64..10.0, b in 0.01f64..10.0) {
        // reversing the roles flips the sign of the raw (unrounded) ratio's numerator
        let (fwd, back) = (improvement_pct(a, b), improvement_pct(b, a));
        prop_assert_eq!(fwd > 0.0, a > b && fwd != 0.0);
        prop_assert!(fwd <= 100.0 && back <= 100.0);
        prop_assert!((fwd * a - (-back) * b).abs() <= 0.01 * (a + b) / 2.0 + 1e-9);
    }
}
