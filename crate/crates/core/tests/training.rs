mod support;

use dlf_core::data::{self, Splits};
use dlf_core::model::{DlfModel, ForwardMode, ModelConfig};
use dlf_core::trainer::{self, AdamConfig, AdamState, TrainConfig};
use dlf_core::DlfError;

fn tiny() -> (Splits, dlf_core::data::FeatureSchema) {
    let data = support::synthetic(400, 3, 8, 21);
    (data::time_split(&data).unwrap(), support::schema(3, 8))
}

fn small_config(seed: u64) -> ModelConfig {
    ModelConfig { d: 6, rank: 3, layers: 2, seed, ..ModelConfig::default() }
}

fn full_batch(d: &data::EncodedData) -> data::ExampleBatch {
    d.select(&(0..d.len()).collect::<Vec<_>>())
}

/// Runs `epochs` epochs of plain mini-batch Adam, no early stopping.
fn run_epochs(model: &mut DlfModel<f32>, splits: &Splits, adam: AdamConfig, epochs: u64, seed: u64) -> AdamState<f32> {
    let mut state = AdamState::new(model.params());
    let mut step = 0;
    for epoch in 0..epochs {
        for batch in data::batches(&splits.train, 32, true, seed, epoch).unwrap() {
            let (_, g) = trainer::batch_gradients(model, &batch, 32, ForwardMode::train(seed, step)).unwrap();
            trainer::adam_step(model.params_mut(), &g, &mut state, &adam).unwrap();
            step += 1;
        }
    }
    state
}

#[test]
fn small_learning_rate_lowers_loss_on_average() {
    let (splits, schema) = tiny();
    let all = full_batch(&splits.train);
    let (mut before, mut after) = (0.0, 0.0);
    for seed in 0..20 {
        let mut model = DlfModel::<f32>::init(&small_config(seed), &schema).unwrap();
        before += model.loss(&all, ForwardMode::eval()).unwrap();
        run_epochs(&mut model, &splits, AdamConfig::new(1e-3, 0.0), 1, seed);
        after += model.loss(&all, ForwardMode::eval()).unwrap();
    }
    assert!(after < before, "mean loss {} -> {}", before / 20.0, after / 20.0);
}

#[test]
fn l2_shrinks_the_embedding_table() {
    let (splits, schema) = tiny();
    let norm = |l2: f64| {
        let mut model = DlfModel::<f32>::init(&small_config(0), &schema).unwrap();
        run_epochs(&mut model, &splits, AdamConfig::new(0.01, l2), 3, 0);
        model.params().get(model.embedding_id()).frobenius_norm()
    };
    let (plain, decayed) = (norm(0.0), norm(0.1));
    assert!(decayed < plain, "{decayed} !< {plain}");
}

#[test]
fn optimizer_state_mirrors_parameters() {
    let (splits, schema) = tiny();
    let mut model = DlfModel::<f32>::init(&small_config(1), &schema).unwrap();
    let state = run_epochs(&mut model, &splits, AdamConfig::new(1e-3, 0.0), 2, 1);
    let batches_per_epoch = splits.train.len().div_ceil(32) as u64;
    assert_eq!(state.steps(), 2 * batches_per_epoch);
    for (id, _, p) in model.params().iter() {
        assert_eq!(state.first_moment(id.index()).shape(), p.shape());
        assert_eq!(state.second_moment(id.index()).shape(), p.shape());
    }
}

#[test]
fn training_keeps_the_best_epoch() {
    let (splits, schema) = tiny();
    let mut model = DlfModel::<f32>::init(&small_config(2), &schema).unwrap();
    let cfg = TrainConfig { lr: 0.01, batch_size: 32, micro_batch: 16, epochs: 6, ..TrainConfig::default() };
    let out = trainer::train(&mut model, &splits, &cfg, 0, |_| {}).unwrap();
    let best = out.history.iter().map(|r| r.val_auc).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(out.best.best_val_auc, best);
    assert_eq!(out.history[out.best.epoch - 1].val_auc, best);
    // the model now holds the best parameters
    let report = trainer::evaluate(&model, &splits.validation, 64).unwrap();
    assert_eq!(report.auc, best);
    assert!(out.history.len() <= 6);
}

#[test]
fn divergence_reports_where_it_happened() {
    let (splits, schema) = tiny();
    let mut model = DlfModel::<f32>::init(&small_config(3), &schema).unwrap();
    let id = model.params().id("head.bias").unwrap();
    model.params_mut().get_mut(id).data_mut()[0] = f32::NAN;
    let cfg = TrainConfig { batch_size: 32, epochs: 1, ..TrainConfig::default() };
    match trainer::train(&mut model, &splits, &cfg, 0, |_| {}) {
        Err(DlfError::NonFinite(msg)) => {
            assert!(msg.contains("epoch 1") && msg.contains("batch 1") && msg.contains("norms"), "{msg}");
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}
