use stfm_core::baselines::{ArMeta, LinearAr};
use stfm_core::checkpoint::Container;
use stfm_core::dataflow::{default_toy_start, generate_toy, load_csv, SplitSpec, TOY_PERIOD};
use stfm_core::forecaster::{AttentionKind, Dropout, Forecaster, ModelConfig, ModelMeta};
use stfm_core::nn::NormKind;
use stfm_core::training::{evaluate, train, PreparedData, TrainConfig};

fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig {
        d_model: 16,
        ff_dim: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        start_token_len: 2,
        time_emb_dim: 2,
        attention: AttentionKind::Performer,
        norm: NormKind::Batch,
        dropout: Dropout { ff: 0.1, ..Dropout::default() },
        ..ModelConfig::toy()
    };
    cfg.performer.features = 16;
    cfg
}

fn train_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        train_stride: 2,
        eval_stride: 4,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn csv_to_trained_checkpoint_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    generate_toy(3, 300, default_toy_start(), TOY_PERIOD).unwrap().write_csv(&csv).unwrap();
    let raw = load_csv(&csv).unwrap();
    let data = PreparedData::new(&raw, 16, 4, SplitSpec::default()).unwrap();

    let model = Forecaster::<f32>::build(small_model(), 3, 4).unwrap();
    let mut out = train(model, &data, &train_config(), &mut |_| {}).unwrap();
    assert_eq!(out.history.len(), 3);
    assert!(out.history.iter().all(|r| r.probe_acc.is_some()));
    assert!(!out.step_probe_acc.is_empty());
    let report = evaluate(&mut out.best, &data, data.regions.test.clone(), 1, 8).unwrap();
    assert!(report.rrse.is_finite() && report.rrse < 1.5, "{report:?}");

    let meta = ModelMeta {
        config: out.best.config.clone(),
        names: raw.names.clone(),
        context_len: 16,
        horizon: 4,
        max_train_year: data.max_train_year,
        standardizer: data.standardizer.clone(),
        split: SplitSpec::default(),
    };
    let path = dir.path().join("model.stfm");
    out.best.to_container(&meta).unwrap().save(&path).unwrap();
    let (mut loaded, loaded_meta) = Forecaster::<f32>::from_container(&Container::load(&path).unwrap()).unwrap();
    assert_eq!(loaded_meta, meta);
    let again = evaluate(&mut loaded, &data, data.regions.test.clone(), 1, 8).unwrap();
    assert_eq!(report, again);
}

#[test]
fn linear_ar_round_trips_through_a_checkpoint() {
    let raw = generate_toy(3, 300, default_toy_start(), TOY_PERIOD).unwrap();
    let data = PreparedData::new(&raw, 16, 4, SplitSpec::default()).unwrap();
    let cfg = TrainConfig {
        lr: 1e-2,
        probe: false,
        ..train_config()
    };
    let (mut model, history) = LinearAr::fit(&data, &cfg, &mut |_| {}).unwrap();
    assert!(!history.is_empty());
    let report = evaluate(&mut model, &data, data.regions.test.clone(), 1, 8).unwrap();
    let meta = ArMeta {
        names: raw.names.clone(),
        context_len: 16,
        horizon: 4,
        max_train_year: data.max_train_year,
        standardizer: data.standardizer.clone(),
        split: SplitSpec::default(),
    };
    let (mut loaded, _) = LinearAr::from_container(&model.to_container(&meta).unwrap()).unwrap();
    // Weights are stored as f32, so a second round trip is exact.
    let (twice, _) = LinearAr::from_container(&loaded.to_container(&meta).unwrap()).unwrap();
    assert_eq!(twice, loaded);
    let again = evaluate(&mut loaded, &data, data.regions.test.clone(), 1, 8).unwrap();
    assert!((report.mse - again.mse).abs() < 1e-5 * report.mse, "{report:?} {again:?}");
    assert!((report.mae - again.mae).abs() < 1e-5 * report.mae, "{report:?} {again:?}");
}
