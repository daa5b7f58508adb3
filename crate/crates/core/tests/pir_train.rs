use pir_core::identify::UncertaintyConfig;
use pir_core::local::LocalConfig;
use pir_core::model::{load_model, save_model, Variant};
use pir_core::pipeline::{
    init_model, prepare_native, split_windows, standardized_splits, train_variant, BackboneSpec, ModelSettings,
    PipelineConfig, Prepared,
};
use pir_core::retrieval::RetrievalConfig;
use pir_core::synth::{generate_synthetic_benchmark, SynthConfig};
use pir_core::train::{mse_of, train, TrainConfig};

fn small() -> (Prepared, PipelineConfig) {
    let synth = SynthConfig { length: 900, n_channels: 2, ..SynthConfig::default() };
    let (ds, _) = generate_synthetic_benchmark(&synth, 3).unwrap();
    let cfg = PipelineConfig {
        l_in: 48,
        l_out: 12,
        stride: 2,
        backbone: BackboneSpec::Seasonal { period: 24 },
        retrieval: RetrievalConfig { k: 5, ..RetrievalConfig::default() },
        model: ModelSettings {
            uncertainty: UncertaintyConfig { embed_dim: 4, hidden: 16 },
            local: LocalConfig { d_model: 16, heads: 2, layers: 1, ff_dim: 32 },
            beta_hidden: 8,
            ..ModelSettings::default()
        },
        train: TrainConfig { max_epochs: 4, patience: 4, batch_size: 16, learning_rate: 3e-3, ..TrainConfig::default() },
        ..PipelineConfig::default()
    };
    let splits = standardized_splits(&ds, cfg.splits).unwrap();
    let prepared = prepare_native(split_windows(&splits, &cfg).unwrap(), &cfg).unwrap();
    (prepared, cfg)
}

#[test]
fn fresh_model_reproduces_the_backbone_bitwise() {
    let (prep, cfg) = small();
    for variant in Variant::ALL {
        let model = init_model(&prep, &cfg, variant).unwrap();
        let preds = model.predict_all(&prep.test_samples).unwrap();
        for (p, f) in preds.iter().zip(&prep.forecasts.test) {
            assert!(p.y_pred.data().iter().zip(f.values.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}

#[test]
fn training_improves_validation_and_uncertainty_fit() {
    let (prep, cfg) = small();
    let r = train_variant(&prep, &cfg, Variant::Full).unwrap();
    let h = &r.history;
    let backbone_val = mse_of(&init_model(&prep, &cfg, Variant::None).unwrap(), &prep.val_samples).unwrap();
    assert_eq!(h.initial_val_mse, backbone_val);
    assert!(h.best_val_mse <= backbone_val);
    assert_eq!(mse_of(&r.model, &prep.val_samples).unwrap(), h.best_val_mse);
    let (first, last) = (&h.epochs[0], h.epochs.last().unwrap());
    assert!(last.train_l_ue < first.train_l_ue, "{} -> {}", first.train_l_ue, last.train_l_ue);
    assert!(h.epochs.iter().all(|e| e.gate_open == (e.epoch >= cfg.train.warmup_epochs)));
}

#[test]
fn training_is_bitwise_reproducible() {
    let (prep, cfg) = small();
    let cfg = PipelineConfig { train: TrainConfig { max_epochs: 2, ..cfg.train.clone() }, ..cfg };
    let a = train_variant(&prep, &cfg, Variant::Full).unwrap();
    let b = train_variant(&prep, &cfg, Variant::Full).unwrap();
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, b.history);
    for (x, y) in a.revised.iter().zip(&b.revised) {
        assert!(x.values.data().iter().zip(y.values.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let other = PipelineConfig { seed: 1, ..cfg };
    assert_ne!(train_variant(&prep, &other, Variant::Full).unwrap().model.params, a.model.params);
}

#[test]
fn checkpoint_round_trip_keeps_predictions() {
    let (prep, cfg) = small();
    let cfg = PipelineConfig { train: TrainConfig { max_epochs: 2, ..cfg.train.clone() }, ..cfg };
    let model = init_model(&prep, &cfg, Variant::Full).unwrap();
    let (model, _) = train(model, &prep.train_samples, &prep.val_samples, &cfg.train_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    let fp = prep.db.fingerprint();
    save_model(&model, &path, Some(&fp), serde_json::json!({"note": 1})).unwrap();
    let loaded = load_model(&path).unwrap();
    assert_eq!(loaded.db_fingerprint.as_deref(), Some(fp.as_str()));
    assert_eq!(loaded.extra["note"], 1);
    let (a, b) = (model.predict_all(&prep.test_samples).unwrap(), loaded.model.predict_all(&prep.test_samples).unwrap());
    assert_eq!(a, b);
}

#[test]
fn joint_mode_needs_a_linear_backbone() {
    let (prep, mut cfg) = small();
    cfg.model.joint_backbone = true;
    assert!(init_model(&prep, &cfg, Variant::Full).is_err());
}
