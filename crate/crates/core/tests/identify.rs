mod common;

use std::collections::BTreeMap;

use common::{rand_tensor, rng};
use pir_core::identify::{
    build_uncertainty_loss, estimate_uncertainty, realized_mse, uncertainty_loss, UncertaintyConfig, UncertaintyNet,
    UE_EMBEDDING,
};
use pir_core::tensor::{param_gradient_report, AdamConfig, AdamState, GraphBuilder, ParamStore, Tensor};
use proptest::prelude::*;

fn ue_graph(net: &UncertaintyNet) -> pir_core::tensor::ComputeGraph {
    let mut g = GraphBuilder::new();
    let x = g.input("x", &[net.n_channels, net.l_in]);
    let ybar = g.input("ybar", &[net.n_channels, net.l_out]);
    let y = g.input("y", &[net.n_channels, net.l_out]);
    let delta = net.build(&mut g, x, ybar).unwrap();
    let loss = build_uncertainty_loss(&mut g, delta, ybar, y).unwrap();
    g.output("delta", delta);
    g.output("l_ue", loss);
    g.build()
}

#[test]
fn estimator_is_channel_permutation_equivariant() {
    let net = UncertaintyNet::new(UncertaintyConfig { embed_dim: 4, hidden: 16 }, 4, 12, 6);
    let mut params = ParamStore::new();
    net.init_params(&mut params, 3);
    let mut r = rng(7);
    let (x, ybar) = (rand_tensor(&mut r, 4, 12, 1.0), rand_tensor(&mut r, 4, 6, 1.0));
    let perm = [2, 0, 3, 1];
    let delta = estimate_uncertainty(&x, &ybar, &net, &params).unwrap();

    let mut permuted = params.clone();
    permuted.insert(UE_EMBEDDING, params.get(UE_EMBEDDING).unwrap().permute_rows(&perm));
    let got = estimate_uncertainty(&x.permute_rows(&perm), &ybar.permute_rows(&perm), &net, &permuted).unwrap();
    for (i, &p) in perm.iter().enumerate() {
        assert!((got[i] - delta[p]).abs() < 1e-12);
    }
}

#[test]
fn estimator_gradients_pass_finite_differences() {
    let net = UncertaintyNet::new(UncertaintyConfig { embed_dim: 3, hidden: 7 }, 2, 8, 4);
    let graph = ue_graph(&net);
    for seed in 0..5 {
        let mut params = ParamStore::new();
        net.init_params(&mut params, seed);
        let mut r = rng(seed);
        let (x, ybar, y) = (rand_tensor(&mut r, 2, 8, 1.0), rand_tensor(&mut r, 2, 4, 1.0), rand_tensor(&mut r, 2, 4, 1.0));
        let inputs = [("x", &x), ("ybar", &ybar), ("y", &y)];
        let report = param_gradient_report(&graph, &params, &inputs, "l_ue", 1e-5).unwrap();
        assert!(report.passes(1e-4, 1e-9), "seed {seed}: {report:?}");
    }
}

#[test]
fn adam_drives_uncertainty_loss_down_on_one_batch() {
    let net = UncertaintyNet::new(UncertaintyConfig::default(), 3, 16, 4);
    let graph = ue_graph(&net);
    let mut params = ParamStore::new();
    net.init_params(&mut params, 0);
    let mut r = rng(11);
    let batch: Vec<[Tensor; 3]> = (0..8)
        .map(|_| [rand_tensor(&mut r, 3, 16, 1.0), rand_tensor(&mut r, 3, 4, 1.0), rand_tensor(&mut r, 3, 4, 1.0)])
        .collect();
    let step = |params: &ParamStore| -> (f64, BTreeMap<String, Tensor>) {
        let mut total = 0.0;
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for [x, ybar, y] in &batch {
            let mut s = graph.session();
            s.forward(params, &[("x", x), ("ybar", ybar), ("y", y)]).unwrap();
            total += s.get("l_ue").unwrap().data()[0] / batch.len() as f64;
            for (name, g) in s.backward("l_ue", &Tensor::scalar(1.0 / batch.len() as f64)).unwrap().params {
                match grads.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name, g);
                    }
                }
            }
        }
        (total, grads)
    };
    let initial = step(&params).0;
    let mut adam = AdamState::new(AdamConfig { learning_rate: 1e-3, ..AdamConfig::default() });
    for _ in 0..500 {
        let (_, grads) = step(&params);
        adam.update(&mut params, &grads).unwrap();
    }
    let last = step(&params).0;
    assert!(last < 1e-2 * initial, "L_ue {initial} -> {last}");
}

#[test]
fn loss_vanishes_when_delta_is_the_realized_error() {
    let mut r = rng(3);
    let (ybar, y) = (rand_tensor(&mut r, 5, 7, 2.0), rand_tensor(&mut r, 5, 7, 2.0));
    let m = realized_mse(&ybar, &y).unwrap();
    for c in 0..5 {
        let oracle = (0..7).map(|t| (ybar.at(c, t) - y.at(c, t)).powi(2)).sum::<f64>() / 7.0;
        assert!((m[c] - oracle).abs() < 1e-12);
    }
    assert!(uncertainty_loss(&m, &ybar, &y).unwrap() < 1e-12);
    let shifted: Vec<f64> = m.iter().map(|v| v + 0.5).collect();
    assert!((uncertainty_loss(&shifted, &ybar, &y).unwrap() - 0.5).abs() < 1e-12);
}

proptest! {
    #[test]
    fn uncertainty_loss_is_nonnegative_and_symmetric(seed in 0u64..200) {
        let mut r = rng(seed);
        let (ybar, y) = (rand_tensor(&mut r, 3, 4, 1.0), rand_tensor(&mut r, 3, 4, 1.0));
        let d: Vec<f64> = rand_tensor(&mut r, 1, 3, 1.0).into_data();
        let l = uncertainty_loss(&d, &ybar, &y).unwrap();
        prop_assert!(l >= 0.0);
        // realized error is symmetric in forecast and target
        prop_assert_eq!(l, uncertainty_loss(&d, &y, &ybar).unwrap());
    }
}

