//! Training loop, evaluation and the SCMHSA × SSL ablation grid.

use std::time::Instant;

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunSpec, Variant};
use crate::data::{EmbeddingDataset, SplitName, WindowInstance};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{predict_next, Layout, ModelState};
use crate::objective::{cosine_similarity, squared_error, total_loss, LossBreakdown, MetricReport};
use crate::optim::AdamW;
use crate::rng::Rng;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub train_ss: f64,
    pub train_total: f64,
    pub val_mse: f64,
    pub val_psnr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
}

impl RunHistory {
    /// Records with wall time zeroed, for determinism comparisons.
    pub fn without_timing(&self) -> Vec<EpochRecord> {
        self.epochs
            .iter()
            .map(|r| EpochRecord { seconds: 0.0, ..r.clone() })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: Checkpoint,
    /// Lowest validation MSE seen (the initial state when no epoch ran).
    pub best_checkpoint: Checkpoint,
    pub history: RunHistory,
}

/// Worker count from `SCVFP_THREADS` (default 1). Results do not depend on it.
pub fn worker_count() -> usize {
    std::env::var("SCVFP_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Gradient of one window's total loss with respect to every model tensor.
pub fn item_gradients(state: &ModelState, layout: &Layout, w: &WindowInstance) -> Result<(Vec<Tensor>, LossBreakdown)> {
    let mut g = Graph::new();
    let vars = state.insert(&mut g, true);
    let e_in = g.constant(w.inputs.clone());
    let label = g.constant(w.label.clone());
    let fwd = predict_next(&mut g, e_in, &vars, layout, &state.config)?;
    let (loss, breakdown) = total_loss(&mut g, label, fwd.prediction, &fwd.heads, state.config.lambda)?;
    g.backward(loss)?;
    let grads = vars
        .iter()
        .zip(&state.tensors)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.tensor.shape())))
        .collect();
    Ok((grads, breakdown))
}

type ItemResult = Result<(Vec<Tensor>, LossBreakdown)>;

fn batch_items(state: &ModelState, layout: &Layout, items: &[&WindowInstance], workers: usize) -> Vec<ItemResult> {
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(|w| item_gradients(state, layout, w)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(|w| item_gradients(state, layout, w)).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("gradient worker panicked"))
            .collect()
    })
}

fn predictions(state: &ModelState, items: &[&WindowInstance], workers: usize) -> Result<Vec<Tensor>> {
    let run = |part: &[&WindowInstance]| part.iter().map(|w| state.predict(&w.inputs)).collect::<Vec<_>>();
    let out: Vec<Result<Tensor>> = if workers <= 1 || items.len() <= 1 {
        run(items)
    } else {
        let chunk = items.len().div_ceil(workers);
        std::thread::scope(|s| {
            let handles: Vec<_> = items.chunks(chunk).map(|p| s.spawn(move || run(p))).collect();
            handles
                .into_iter()
                .flat_map(|h| h.join().expect("prediction worker panicked"))
                .collect()
        })
    };
    out.into_iter().collect()
}

/// Mean `‖e − ê‖²` over a split.
pub fn split_mse(state: &ModelState, dataset: &EmbeddingDataset, which: SplitName) -> Result<f64> {
    let items = dataset.subset(which);
    if items.is_empty() {
        return Err(Error::Data(format!("{which:?} split is empty")));
    }
    let preds = predictions(state, &items, worker_count())?;
    let mut total = 0.0;
    for (w, p) in items.iter().zip(&preds) {
        total += squared_error(w.label.data(), p.data())?;
    }
    Ok(total / items.len() as f64)
}

/// Mean squared error of predicting the last observed frame unchanged.
pub fn persistence_mse(dataset: &EmbeddingDataset, which: SplitName) -> Result<f64> {
    let items = dataset.subset(which);
    if items.is_empty() {
        return Err(Error::Data(format!("{which:?} split is empty")));
    }
    let mut total = 0.0;
    for w in &items {
        let last = w.inputs.row(w.inputs.rows() - 1);
        total += squared_error(w.label.data(), last)?;
    }
    Ok(total / items.len() as f64)
}

fn check_dims(state: &ModelState, dataset: &EmbeddingDataset) -> Result<()> {
    if state.config.d != dataset.file.d {
        return Err(Error::Data(format!(
            "model width {} does not match data width {}",
            state.config.d, dataset.file.d
        )));
    }
    Ok(())
}

fn global_clip(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Trains from a seeded initialisation: per epoch a seeded shuffle, then per
/// batch the mean total loss, backward, and one AdamW step.
pub fn train(spec: &RunSpec, dataset: &EmbeddingDataset) -> Result<TrainOutcome> {
    spec.validate()?;
    if dataset.split.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut rng = Rng::seed(spec.train.seed);
    let mut state = ModelState::init(&spec.model, &mut rng)?;
    check_dims(&state, dataset)?;
    let layout = state.layout();
    let shapes: Vec<Vec<usize>> = state.tensors.iter().map(|t| t.tensor.shape().to_vec()).collect();
    let shape_refs: Vec<&[usize]> = shapes.iter().map(Vec::as_slice).collect();
    let mut opt = AdamW::new((&spec.train).into(), &shape_refs);
    let workers = worker_count();
    let has_val = !dataset.split.val.is_empty();

    let checkpoint = |state: &ModelState, epoch: usize, rng: &Rng| Checkpoint {
        spec: spec.clone(),
        state: state.clone(),
        epoch: epoch as u32,
        rng_state: rng.state(),
    };
    let mut best = checkpoint(&state, 0, &rng);
    let mut best_val = f64::INFINITY;
    let mut history = RunHistory::default();
    let mut order = dataset.split.train.clone();

    for epoch in 0..spec.train.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let (mut sum_mse, mut sum_ss, mut sum_total) = (0.0, 0.0, 0.0);
        for (batch_idx, batch) in order.chunks(spec.train.batch).enumerate() {
            let items: Vec<&WindowInstance> = batch.iter().map(|&i| &dataset.instances[i]).collect();
            let mut grads: Option<Vec<Tensor>> = None;
            let (mut b_mse, mut b_ss) = (0.0, 0.0);
            for result in batch_items(&state, &layout, &items, workers) {
                let (g, parts) = result.map_err(|e| match e {
                    Error::Tensor(TensorError::NonFinite { .. }) => Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        mse: f64::NAN,
                        ss: f64::NAN,
                    },
                    other => other,
                })?;
                if !parts.total.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        mse: parts.mse_term,
                        ss: parts.ss_term,
                    });
                }
                b_mse += parts.mse_term;
                b_ss += parts.ss_term;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, gi) in acc.iter_mut().zip(&g) {
                            for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / items.len() as f64;
            let mut grads = grads.expect("non-empty batch");
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= scale;
                }
            }
            if let Some(c) = spec.train.grad_clip {
                global_clip(&mut grads, c);
            }
            let mut weights: Vec<&mut Tensor> = state.tensors.iter_mut().map(|t| &mut t.tensor).collect();
            opt.step(&mut weights, &grads)?;
            if spec.model.precision == Precision::F32 {
                for w in weights {
                    w.round_to_f32();
                }
            }
            sum_mse += b_mse;
            sum_ss += b_ss;
            sum_total += b_mse + spec.model.lambda * b_ss;
        }
        let n = order.len() as f64;
        let (val_mse, val_psnr) = if has_val {
            let v = split_mse(&state, dataset, SplitName::Val)?;
            (v, crate::objective::report_psnr(v))
        } else {
            (f64::NAN, f64::NAN)
        };
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_mse: sum_mse / n,
            train_ss: sum_ss / n,
            train_total: sum_total / n,
            val_mse,
            val_psnr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if !has_val || val_mse < best_val {
            best_val = val_mse;
            best = checkpoint(&state, epoch + 1, &rng);
        }
    }
    Ok(TrainOutcome {
        final_checkpoint: checkpoint(&state, spec.train.epochs, &rng),
        best_checkpoint: best,
        history,
    })
}

/// Single-step metrics over a split for an arbitrary predictor.
pub fn evaluate_predictor<F>(dataset: &EmbeddingDataset, which: SplitName, predict: F) -> Result<MetricReport>
where
    F: Fn(&WindowInstance) -> Result<Tensor>,
{
    let items = dataset.subset(which);
    if items.is_empty() {
        return Err(Error::Data(format!("{which:?} split is empty")));
    }
    let mut errors = Vec::with_capacity(items.len());
    let mut cosines = Vec::with_capacity(items.len());
    for w in items {
        let p = predict(w)?;
        errors.push(squared_error(w.label.data(), p.data())?);
        cosines.push(cosine_similarity(w.label.data(), p.data()));
    }
    Ok(MetricReport::from_errors(&errors, &cosines, Vec::new()))
}

/// Test-style metrics for a trained model: mean embedding MSE, PSNR, mean
/// cosine, and the mean cosine of each of `rollout_steps` autoregressive
/// steps (averaged over windows whose ground truth reaches that step).
pub fn evaluate(state: &ModelState, dataset: &EmbeddingDataset, which: SplitName, rollout_steps: usize) -> Result<MetricReport> {
    check_dims(state, dataset)?;
    let items = dataset.subset(which);
    if items.is_empty() {
        return Err(Error::Data(format!("{which:?} split is empty")));
    }
    let preds = predictions(state, &items, worker_count())?;
    let mut errors = Vec::with_capacity(items.len());
    let mut cosines = Vec::with_capacity(items.len());
    for (w, p) in items.iter().zip(&preds) {
        errors.push(squared_error(w.label.data(), p.data())?);
        cosines.push(cosine_similarity(w.label.data(), p.data()));
    }
    let mut step_sums = vec![0.0; rollout_steps];
    let mut step_counts = vec![0usize; rollout_steps];
    if rollout_steps > 0 {
        for w in &items {
            let available = (0..rollout_steps).take_while(|&k| dataset.future_frame(w, k).is_some()).count();
            if available == 0 {
                continue;
            }
            let roll = state.rollout(&w.inputs, available)?;
            for k in 0..available {
                let truth = dataset.future_frame(w, k).expect("checked above");
                step_sums[k] += cosine_similarity(&truth, roll.predictions.row(k));
                step_counts[k] += 1;
            }
        }
    }
    let step_cosines = step_sums
        .iter()
        .zip(&step_counts)
        .take_while(|(_, &c)| c > 0)
        .map(|(s, &c)| s / c as f64)
        .collect();
    Ok(MetricReport::from_errors(&errors, &cosines, step_cosines))
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub seed: u64,
    pub test: MetricReport,
    pub history: RunHistory,
}

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub variant: Variant,
    pub lambda: f64,
    pub runs: Vec<AblationRun>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationCell {
    pub fn test_mse(&self) -> (f64, f64) {
        mean_sd(&self.runs.iter().map(|r| r.test.mse).collect::<Vec<_>>())
    }

    pub fn test_psnr(&self) -> (f64, f64) {
        mean_sd(&self.runs.iter().map(|r| r.test.psnr).collect::<Vec<_>>())
    }

    /// Seed-mean training loss (total) per epoch.
    pub fn mean_train_curve(&self) -> Vec<f64> {
        let epochs = self.runs.first().map_or(0, |r| r.history.epochs.len());
        (0..epochs)
            .map(|e| self.runs.iter().map(|r| r.history.epochs[e].train_total).sum::<f64>() / self.runs.len() as f64)
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{}/lambda={}", self.variant.as_str(), self.lambda)
    }
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn cell(&self, variant: Variant, with_ssl: bool) -> Option<&AblationCell> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && (c.lambda > 0.0) == with_ssl)
    }
}

/// Trains {scmhsa, mhsa_baseline} × {λ, 0} for every seed and scores each
/// final model on the test split.
pub fn run_ablation(spec: &RunSpec, dataset: &EmbeddingDataset, seeds: &[u64]) -> Result<AblationReport> {
    let mut cells = Vec::with_capacity(4);
    for variant in [Variant::Scmhsa, Variant::MhsaBaseline] {
        for lambda in [spec.model.lambda, 0.0] {
            let mut runs = Vec::with_capacity(seeds.len());
            for &seed in seeds {
                let mut run_spec = spec.clone();
                run_spec.model.variant = variant;
                run_spec.model.lambda = lambda;
                run_spec.train.seed = seed;
                let outcome = train(&run_spec, dataset)?;
                let test = evaluate(&outcome.final_checkpoint.state, dataset, SplitName::Test, 0)?;
                runs.push(AblationRun {
                    seed,
                    test,
                    history: outcome.history,
                });
            }
            cells.push(AblationCell { variant, lambda, runs });
        }
    }
    Ok(AblationReport { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DataSpec, ModelConfig, TrainConfig};
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn small_dataset(d: usize) -> EmbeddingDataset {
        let file = generate_synthetic(&SyntheticConfig {
            d,
            num_sequences: 4,
            length: 20,
            ..SyntheticConfig::default()
        })
        .unwrap();
        EmbeddingDataset::build(
            file,
            3,
            &DataSpec {
                stride: 2,
                ..DataSpec::default()
            },
        )
        .unwrap()
    }

    fn small_spec(epochs: usize) -> RunSpec {
        RunSpec {
            model: ModelConfig::tiny(),
            train: TrainConfig {
                epochs,
                batch: 8,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            data: DataSpec::default(),
        }
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let ds = small_dataset(8);
        let spec = small_spec(0);
        let out = train(&spec, &ds).unwrap();
        assert!(out.history.epochs.is_empty());
        let init = ModelState::init(&spec.model, &mut Rng::seed(spec.train.seed)).unwrap();
        assert_eq!(out.final_checkpoint.state, init);
        assert_eq!(out.final_checkpoint.epoch, 0);
    }

    #[test]
    fn loss_decomposition_holds_each_epoch() {
        let ds = small_dataset(8);
        let spec = small_spec(2);
        let out = train(&spec, &ds).unwrap();
        assert_eq!(out.history.epochs.len(), 2);
        for r in &out.history.epochs {
            assert!((r.train_total - (r.train_mse + spec.model.lambda * r.train_ss)).abs() < 1e-6);
            assert!((0.0..=0.5).contains(&r.train_ss));
        }
    }

    #[test]
    fn width_mismatch_is_reported() {
        let ds = small_dataset(6);
        assert!(matches!(train(&small_spec(1), &ds), Err(Error::Data(_))));
    }

    #[test]
    fn oracle_predictor_has_zero_mse() {
        let ds = small_dataset(8);
        let r = evaluate_predictor(&ds, SplitName::Test, |w| Ok(w.label.clone())).unwrap();
        assert_eq!(r.mse, 0.0);
        assert_eq!(r.psnr, f64::INFINITY);
        assert!((r.mean_cosine - 1.0).abs() < 1e-12);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let ds = small_dataset(8);
        let state = ModelState::init(&ModelConfig::tiny(), &mut Rng::seed(3)).unwrap();
        let layout = state.layout();
        let items = ds.subset(SplitName::Train);
        let one = batch_items(&state, &layout, &items, 1);
        let four = batch_items(&state, &layout, &items, 4);
        for (a, b) in one.iter().zip(&four) {
            let (a, b) = (a.as_ref().unwrap(), b.as_ref().unwrap());
            assert_eq!(a.0, b.0);
            assert_eq!(a.1, b.1);
        }
    }
}
