use scvfp::checkpoint::Checkpoint;
use scvfp::config::{DataSpec, ModelConfig, Precision, RunSpec, TrainConfig, Variant};
use scvfp::data::{generate_synthetic, EmbeddingDataset, SplitName, SyntheticConfig};
use scvfp::trainer::{evaluate, persistence_mse, split_mse, train};

fn small_spec(variant: Variant, epochs: usize) -> RunSpec {
    RunSpec {
        model: ModelConfig {
            d: 8,
            seq_len: 3,
            heads: 2,
            blocks: 1,
            head_hidden: Some(16),
            variant,
            ..ModelConfig::desk()
        },
        train: TrainConfig {
            lr: 3e-3,
            batch: 4,
            epochs,
            rollout_steps: 3,
            ..TrainConfig::default()
        },
        data: DataSpec {
            stride: 2,
            ..DataSpec::default()
        },
    }
}

fn small_dataset(spec: &RunSpec, sequences: usize) -> EmbeddingDataset {
    let file = generate_synthetic(&SyntheticConfig {
        d: spec.model.d,
        num_sequences: sequences,
        length: 24,
        seed: 11,
        ..SyntheticConfig::default()
    })
    .unwrap();
    EmbeddingDataset::build(file, spec.model.seq_len, &spec.data).unwrap()
}

#[test]
fn training_reduces_loss_and_beats_persistence() {
    let spec = small_spec(Variant::Scmhsa, 12);
    let ds = small_dataset(&spec, 12);
    let out = train(&spec, &ds).unwrap();
    let h = &out.history.epochs;
    assert_eq!(h.len(), 12);
    assert!(h.last().unwrap().train_total < h[0].train_total);
    let val = split_mse(&out.final_checkpoint.state, &ds, SplitName::Val).unwrap();
    assert!(val < persistence_mse(&ds, SplitName::Val).unwrap());
}

#[test]
fn history_matches_independent_evaluation() {
    let spec = small_spec(Variant::MhsaBaseline, 3);
    let ds = small_dataset(&spec, 6);
    let out = train(&spec, &ds).unwrap();
    let last = out.history.epochs.last().unwrap();
    let report = evaluate(&out.final_checkpoint.state, &ds, SplitName::Val, 0).unwrap();
    assert_eq!(report.mse, last.val_mse);
    assert_eq!(report.psnr, last.val_psnr);
    let best = out
        .history
        .epochs
        .iter()
        .map(|r| r.val_mse)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(split_mse(&out.best_checkpoint.state, &ds, SplitName::Val).unwrap(), best);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let spec = small_spec(Variant::Scmhsa, 3);
    let ds = small_dataset(&spec, 6);
    let a = train(&spec, &ds).unwrap();
    let b = train(&spec, &ds).unwrap();
    assert_eq!(a.final_checkpoint.to_bytes(), b.final_checkpoint.to_bytes());
    assert_eq!(a.history.without_timing(), b.history.without_timing());
}

#[test]
fn thread_count_does_not_change_results() {
    let spec = small_spec(Variant::Scmhsa, 2);
    let ds = small_dataset(&spec, 6);
    let one = train(&spec, &ds).unwrap();
    std::env::set_var("SCVFP_THREADS", "3");
    let three = train(&spec, &ds);
    std::env::remove_var("SCVFP_THREADS");
    assert_eq!(one.final_checkpoint.to_bytes(), three.unwrap().final_checkpoint.to_bytes());
}

#[test]
fn f32_training_keeps_parameters_representable() {
    let mut spec = small_spec(Variant::Scmhsa, 2);
    spec.model.precision = Precision::F32;
    let ds = small_dataset(&spec, 6);
    let out = train(&spec, &ds).unwrap();
    for t in &out.final_checkpoint.state.tensors {
        assert!(t.tensor.data().iter().all(|&v| v == v as f32 as f64), "{}", t.name);
    }
}

#[test]
fn checkpoint_reload_evaluates_identically() {
    let spec = small_spec(Variant::Scmhsa, 2);
    let ds = small_dataset(&spec, 6);
    let out = train(&spec, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.final_checkpoint.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back, out.final_checkpoint);
    let a = evaluate(&out.final_checkpoint.state, &ds, SplitName::Test, 3).unwrap();
    let b = evaluate(&back.state, &ds, SplitName::Test, 3).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.step_cosines.len(), 3);
}

#[test]
fn rollout_feeds_predictions_back() {
    let spec = small_spec(Variant::Scmhsa, 1);
    let ds = small_dataset(&spec, 4);
    let state = train(&spec, &ds).unwrap().final_checkpoint.state;
    let w = &ds.instances[0].inputs;
    let roll = state.rollout(w, 4).unwrap();
    assert_eq!(roll.predictions.shape(), &[4, 8]);
    assert_eq!(roll.predictions.row(0), state.predict(w).unwrap().data());
    for k in 1..4 {
        let win = &roll.windows[k];
        assert_eq!(win.row(2), roll.predictions.row(k - 1));
        assert_eq!(win.row(0), roll.windows[k - 1].row(1));
        assert_eq!(roll.predictions.row(k), state.predict(win).unwrap().data());
    }
}

#[test]
fn width_mismatch_is_reported() {
    let spec = small_spec(Variant::Scmhsa, 1);
    let mut other = spec.clone();
    other.model.d = 6;
    let ds = small_dataset(&other, 4);
    assert!(train(&spec, &ds).is_err());
}
