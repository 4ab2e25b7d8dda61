//! MSE objective, the epoch loop with early stopping, and checkpoints.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Splits, WindowSet};
use crate::error::{Error, Result};
use crate::experts::Dropout;
use crate::fusion::GateOverride;
use crate::model::{AdaMixT, Batch};
use crate::numerics::{clip_global_norm, AdamState, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps; 0 means no cap.
    pub max_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub window_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            patience: 3,
            min_delta: 0.0,
            seed: 0,
            max_steps: 0,
            grad_clip: 0.0,
            window_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr <= 0.0 || self.batch_size == 0 || self.epochs == 0 || self.window_stride == 0 {
            return Err(Error::Config(
                "learning rate, batch size, epochs and window stride must be positive".into(),
            ));
        }
        if self.grad_clip < 0.0 || self.min_delta < 0.0 {
            return Err(Error::Config("grad_clip and min_delta must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean squared error over every batch entry and horizon step.
pub fn mse_loss(graph: &mut Graph, preds: Var, targets: Var) -> Result<Var> {
    let diff = graph.sub(preds, targets)?;
    let sq = graph.mul(diff, diff)?;
    Ok(graph.mean(sq))
}

/// Loss of one batch and the gradient of every trainable tensor.
pub fn loss_and_grads(
    model: &AdaMixT,
    batch: &Batch,
    gate: GateOverride,
    drop: &mut Dropout<'_>,
) -> Result<(f64, IndexMap<String, Tensor>)> {
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::Contract("training batch has no targets".into()))?;
    let mut graph = Graph::new();
    let bound = model.params().bind(&mut graph);
    let out = model.forward(&mut graph, &bound, batch, gate, drop)?;
    let t = graph.constant(targets.clone());
    let loss = mse_loss(&mut graph, out.pred, t)?;
    let value = graph.value(loss).data()[0] as f64;
    let mut grads = graph.backward(loss)?;
    Ok((value, model.params().collect_grads(&bound, &mut grads)))
}

/// Eval-mode loss of one batch.
pub fn batch_loss(model: &AdaMixT, batch: &Batch, gate: GateOverride) -> Result<f64> {
    let pred = model.predict_with(batch, gate)?;
    let targets = batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::Contract("batch has no targets".into()))?;
    let n = targets.numel() as f64;
    Ok(pred
        .normalized
        .data()
        .iter()
        .zip(targets.data())
        .map(|(p, t)| {
            let d = (p - t) as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// Normalized-space MSE over the given windows (all of them when `indices`
/// is `None`).
pub fn evaluate_mse(model: &AdaMixT, windows: &WindowSet<'_>, indices: Option<&[usize]>, batch_size: usize) -> Result<f64> {
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..windows.len()).collect();
            &all
        }
    };
    if idx.is_empty() {
        return Err(Error::Contract("no windows to evaluate".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let ws: Vec<_> = chunk.iter().map(|&i| windows.get(i)).collect();
        let batch = model.batch(&ws)?;
        let k = model.config().pred_len;
        total += batch_loss(model, &batch, GateOverride::Model)? * (ws.len() * k) as f64;
        count += ws.len() * k;
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub improved: bool,
}

/// Result of [`train`]: the best-validation model plus the optimizer and
/// RNG state captured with it.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AdaMixT,
    pub adam: AdamState,
    pub rng: RngState,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Validation MSE of the untrained model.
    pub initial_val: f64,
    pub history: Vec<EpochRecord>,
    pub step_losses: Vec<f64>,
    pub total_steps: usize,
}

pub(crate) fn train_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One optimizer step on `batch`; returns the pre-update loss.
pub fn train_step(
    model: &mut AdaMixT,
    adam: &mut AdamState,
    batch: &Batch,
    rng: &mut ChaCha8Rng,
    grad_clip: f64,
) -> Result<f64> {
    let (loss, mut grads) = loss_and_grads(model, batch, GateOverride::Model, &mut Dropout::On(rng))?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite training loss {loss}")));
    }
    if grad_clip > 0.0 {
        clip_global_norm(&mut grads, grad_clip);
    }
    adam.step(model.params_mut(), &grads)?;
    Ok(loss)
}

/// Trains `model` on the train split with early stopping on the val split.
pub fn train(model: AdaMixT, cfg: &TrainConfig, splits: &Splits<'_>) -> Result<TrainOutcome> {
    train_on(model, cfg, &splits.train, None, &splits.val, None)
}

/// As [`train`], optionally restricted to subsets of the training and
/// validation windows.
pub fn train_on(
    mut model: AdaMixT,
    cfg: &TrainConfig,
    train_set: &WindowSet<'_>,
    train_indices: Option<&[usize]>,
    val_set: &WindowSet<'_>,
    val_indices: Option<&[usize]>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::EmptySplit {
            split: if train_set.is_empty() { "train" } else { "val" },
            len: 0,
            need: model.config().seq_len + model.config().pred_len,
        });
    }
    let mut rng = train_rng(cfg.seed);
    let mut adam = AdamState::new(model.params(), cfg.lr);
    let eval_batch = cfg.batch_size.max(64);
    let initial_val = evaluate_mse(&model, val_set, val_indices, eval_batch)?;
    let mut best = (f64::INFINITY, 0usize, model.clone(), adam.clone(), RngState::capture(&rng));
    let mut history = Vec::new();
    let mut step_losses = Vec::new();
    let mut stale = 0;
    let mut total_steps = 0;
    let pool: Vec<usize> = match train_indices {
        Some(i) => i.to_vec(),
        None => (0..train_set.len()).collect(),
    };
    'epochs: for epoch in 1..=cfg.epochs {
        let mut order = pool.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        let mut capped = false;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let ws: Vec<_> = chunk.iter().map(|&i| train_set.get(i)).collect();
            let batch = model.batch(&ws)?;
            let loss = train_step(&mut model, &mut adam, &batch, &mut rng, cfg.grad_clip).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                other => other,
            })?;
            step_losses.push(loss);
            epoch_loss += loss;
            epoch_steps += 1;
            total_steps += 1;
            if cfg.max_steps > 0 && total_steps >= cfg.max_steps {
                capped = true;
                break;
            }
        }
        let val = evaluate_mse(&model, val_set, val_indices, eval_batch)?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: validation MSE is {val}")));
        }
        let improved = val < best.0 - cfg.min_delta;
        history.push(EpochRecord {
            epoch,
            steps: epoch_steps,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_mse: val,
            improved,
        });
        log::debug!("epoch {epoch}: train {:.6} val {val:.6}", epoch_loss / epoch_steps.max(1) as f64);
        if improved {
            best = (val, epoch, model.clone(), adam.clone(), RngState::capture(&rng));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break 'epochs;
            }
        }
        if capped {
            break;
        }
    }
    let (best_val, best_epoch, model, adam, rng) = best;
    Ok(TrainOutcome {
        model,
        adam,
        rng,
        best_epoch,
        best_val,
        initial_val,
        history,
        step_losses,
        total_steps,
    })
}
