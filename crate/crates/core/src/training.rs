//! Sliding-window examples, chronological splits and the training loop.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::grid::{fit_scale, node_features, DemandTensor, LogKind, ScalePolicy, TemporalKey};
use crate::model::{Inputs, Mode, TgNet, TgNetConfig};
use crate::scalar::Scalar;

/// Slack for the floor in the split rule, so `0.8 * 85 = 67.99999` still floors to 68.
const SPLIT_EPS: f64 = 1e-9;

/// Chronological train/validation/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.64,
            val: 0.16,
            test: 0.20,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions {}/{}/{} must lie in [0, 1] and sum to 1",
                self.train, self.val, self.test
            )));
        }
        if self.train == 0.0 {
            return Err(Error::Config("training fraction must be positive".into()));
        }
        Ok(())
    }

    /// Example counts for `n` targets: the first `floor((train + val) * n)` go to training,
    /// of which the last `floor(val / (train + val) * that)` are held out for validation.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let keep = self.train + self.val;
        let trainval = ((keep * n as f64) + SPLIT_EPS).floor() as usize;
        let val = ((self.val / keep * trainval as f64) + SPLIT_EPS).floor() as usize;
        (trainval - val, val, n - trainval)
    }
}

/// Number of forecast targets in a period of `periods` intervals. The last observed interval
/// `t` ranges over `max(t_demand, t_dropoff) - 1 ..= periods - 2`.
pub fn n_targets(periods: usize, t_demand: usize, t_dropoff: usize) -> usize {
    let first = t_demand.max(t_dropoff).max(1) - 1;
    periods.saturating_sub(first + 1)
}

/// One forecast: history up to interval `t`, target at `t + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example<S> {
    pub t: usize,
    /// `[N, t_demand]`, scaled.
    pub demand: Tensor<S>,
    /// `[N, t_dropoff]`, scaled by the drop-off policy.
    pub dropoff: Tensor<S>,
    pub key: TemporalKey,
    /// Scaled target per node.
    pub target: Vec<S>,
    /// Raw target counts per node.
    pub target_raw: Vec<u32>,
}

/// Examples in chronological order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExampleSet<S> {
    pub examples: Vec<Example<S>>,
}

impl<S: Scalar> ExampleSet<S> {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        self.examples.iter().map(|e| e.t + 1)
    }

    /// Stacks the chosen examples into model inputs and a `[B * N, 1]` scaled target.
    pub fn batch(&self, idx: &[usize], with_dropoff: bool) -> Result<(Inputs<S>, Tensor<S>)> {
        let first = idx
            .first()
            .map(|&i| &self.examples[i])
            .ok_or_else(|| Error::Config("empty batch".into()))?;
        let n = first.target.len();
        let demand = Tensor::vstack(&idx.iter().map(|&i| &self.examples[i].demand).collect::<Vec<_>>())?;
        let dropoff = if with_dropoff {
            Some(Tensor::vstack(&idx.iter().map(|&i| &self.examples[i].dropoff).collect::<Vec<_>>())?)
        } else {
            None
        };
        let keys: Vec<TemporalKey> = idx.iter().map(|&i| self.examples[i].key).collect();
        let target: Vec<S> = idx.iter().flat_map(|&i| self.examples[i].target.iter().copied()).collect();
        Ok((
            Inputs {
                demand,
                dropoff,
                keys: Inputs::key_tensor(&keys)?,
            },
            Tensor::from_vec(&[idx.len() * n, 1], target)?,
        ))
    }
}

/// The three chronological example sets plus the scaling fit on the training portion.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits<S> {
    pub train: ExampleSet<S>,
    pub val: ExampleSet<S>,
    pub test: ExampleSet<S>,
    pub scale: ScalePolicy,
    pub dropoff_scale: ScalePolicy,
    /// Intervals visible to training: every window and target of the training examples.
    pub train_range: Range<usize>,
}

/// Builds every valid example from the pickup and drop-off tensors and splits them
/// chronologically. `keys[t]` is the calendar key of interval `t`.
pub fn make_examples<S: Scalar>(
    pickup: &DemandTensor,
    dropoff: &DemandTensor,
    keys: &[TemporalKey],
    model: &TgNetConfig,
    split: &SplitFractions,
) -> Result<Splits<S>> {
    split.validate()?;
    if pickup.kind() != LogKind::Pickup || dropoff.kind() != LogKind::Dropoff {
        return Err(Error::Data("expected a pickup and a drop-off tensor".into()));
    }
    if pickup.periods() != dropoff.periods() || pickup.nodes() != dropoff.nodes() || keys.len() != pickup.periods() {
        return Err(Error::Data(format!(
            "pickup {}x{}, drop-off {}x{} and {} keys do not share a grid spec",
            pickup.periods(),
            pickup.nodes(),
            dropoff.periods(),
            dropoff.nodes(),
            keys.len()
        )));
    }
    let (td, tp) = (model.t_demand, model.t_dropoff);
    let n = n_targets(pickup.periods(), td, tp);
    if n == 0 {
        return Err(Error::WindowUnderflow {
            t: pickup.periods().saturating_sub(1),
            needed: td.max(tp) + 1,
            available: pickup.periods(),
        });
    }
    let first_t = td.max(tp).max(1) - 1;
    let (n_train, n_val, _) = split.counts(n);
    // scaling sees every interval a training example touches and nothing later
    let train_end = first_t + n_train + 1;
    let scale = fit_scale(pickup, 0..train_end);
    let dropoff_scale = fit_scale(dropoff, 0..train_end);

    let build = |t: usize| -> Result<Example<S>> {
        let row = pickup.row(t + 1);
        Ok(Example {
            t,
            demand: node_features(pickup, t, td, &scale)?,
            dropoff: node_features(dropoff, t, tp.max(1), &dropoff_scale)?,
            key: keys[t + 1],
            target: row.iter().map(|&x| scale.apply(x as f64)).collect(),
            target_raw: row.to_vec(),
        })
    };
    let all: Vec<Example<S>> = (first_t..first_t + n).map(build).collect::<Result<_>>()?;
    let mut rest = all.into_iter();
    let train = rest.by_ref().take(n_train).collect();
    let val = rest.by_ref().take(n_val).collect();
    let test = rest.collect();
    Ok(Splits {
        train: ExampleSet { examples: train },
        val: ExampleSet { examples: val },
        test: ExampleSet { examples: test },
        scale,
        dropoff_scale,
        train_range: 0..train_end,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPhase {
    Mse,
    Mae,
}

impl LossPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            LossPhase::Mse => "mse",
            LossPhase::Mae => "mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping a phase.
    pub patience: usize,
    /// Fraction of `max_epochs` trained with squared error before switching to absolute error.
    pub l2_phase: f64,
    /// Disables early stopping when false.
    pub early_stopping: bool,
    pub split: SplitFractions,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            decay: 0.01,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            l2_phase: 0.25,
            early_stopping: true,
            split: SplitFractions::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.l2_phase) {
            return Err(Error::Config(format!("l2_phase {} outside [0, 1]", self.l2_phase)));
        }
        if !(self.lr0 > 0.0) || self.decay < 0.0 {
            return Err(Error::Config("lr0 must be positive and decay non-negative".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr0: self.lr0,
            decay: self.decay,
            ..AdamConfig::default()
        }
    }

    /// Last epoch (1-based) trained with squared error.
    pub fn l2_epochs(&self) -> usize {
        (self.l2_phase * self.max_epochs as f64 - SPLIT_EPS).ceil().max(0.0) as usize
    }

    pub fn phase_of(&self, epoch: usize) -> LossPhase {
        if epoch <= self.l2_epochs() {
            LossPhase::Mse
        } else {
            LossPhase::Mae
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: LossPhase,
    pub train_loss: f64,
    /// `None` when there is no validation data.
    pub val_loss: Option<f64>,
    /// Step size of the epoch's last update.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored, if validation data existed.
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
    /// Set when the final phase ended through early stopping.
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "phase", "train_loss", "val_loss", "lr"])?;
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.phase.as_str().to_string(),
                format!("{:e}", r.train_loss),
                r.val_loss.map(|v| format!("{v:e}")).unwrap_or_default(),
                format!("{:e}", r.lr),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

fn phase_loss<S: Scalar>(tape: &mut Tape<S>, phase: LossPhase, pred: crate::autodiff::Var, target: crate::autodiff::Var) -> Result<crate::autodiff::Var> {
    match phase {
        LossPhase::Mse => tape.mse(pred, target),
        LossPhase::Mae => tape.mae(pred, target),
    }
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numerical(_) => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Mean per-node loss of the model on `set` in eval mode.
pub fn evaluate_loss<S: Scalar>(model: &TgNet<S>, set: &ExampleSet<S>, phase: LossPhase, batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let with_dropoff = model.config().use_dropoff;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (inputs, target) = set.batch(chunk, with_dropoff)?;
        let mut tape = Tape::new();
        let bound = model.store().bind(&mut tape);
        let fwd = model.forward(&mut tape, &bound, &inputs, Mode::Eval)?;
        let t = tape.leaf(target);
        let loss = phase_loss(&mut tape, phase, fwd.output, t)?;
        let rows = tape.value(t).len();
        total += tape.value(loss).item().as_f64() * rows as f64;
        count += rows;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Raw-unit predictions for every example of `set`, example-major (`[len * N]`).
pub fn predict_set<S: Scalar>(model: &TgNet<S>, set: &ExampleSet<S>, batch_size: usize) -> Result<Vec<f64>> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut out = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (inputs, _) = set.batch(chunk, model.config().use_dropoff)?;
        out.extend(model.predict(&inputs)?.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Trains `model` in place and returns the per-epoch history.
///
/// Epochs up to [`TrainConfig::l2_epochs`] minimise squared error, later ones absolute error.
/// Within each phase the parameters with the lowest validation loss are tracked and restored
/// when the phase ends, whether by running out of epochs or by early stopping; an early stop
/// during the squared-error phase moves straight on to the absolute-error phase.
pub fn train<S: Scalar>(model: &mut TgNet<S>, train: &ExampleSet<S>, val: &ExampleSet<S>, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training examples".into()));
    }
    let adam = cfg.adam();
    let with_dropoff = model.config().use_dropoff;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = History::default();

    let mut best: Option<(f64, usize, crate::autodiff::ParamStore<S>)> = None;
    let mut non_improving = 0usize;
    let mut epoch = 1;
    let mut current_phase = cfg.phase_of(1);
    while epoch <= cfg.max_epochs {
        let phase = cfg.phase_of(epoch);
        if phase != current_phase {
            finish_phase(model, &mut best, &mut history)?;
            non_improving = 0;
            current_phase = phase;
        }

        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut rows_seen = 0usize;
        let mut lr = adam.learning_rate(model.store().step());
        for chunk in order.chunks(cfg.batch_size) {
            let (inputs, target) = train.batch(chunk, with_dropoff)?;
            let mut tape = Tape::new();
            let bound = model.store().bind(&mut tape);
            let fwd = model
                .forward(&mut tape, &bound, &inputs, Mode::Train { rng: &mut rng })
                .map_err(|e| diverged(epoch, e))?;
            let t = tape.leaf(target);
            let loss = phase_loss(&mut tape, phase, fwd.output, t).map_err(|e| diverged(epoch, e))?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let grads = tape.backward(loss).map_err(|e| diverged(epoch, e))?;
            let grads = model.store().collect_grads(&bound, &grads);
            lr = adam_step(model.store_mut(), &grads, &adam)?;
            model.apply_bn_stats(&fwd.stats);
            let rows = tape.value(t).len();
            sum += value * rows as f64;
            rows_seen += rows;
        }
        let train_loss = sum / rows_seen as f64;
        if model.store().params().iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }

        let val_loss = if val.is_empty() {
            None
        } else {
            Some(evaluate_loss(model, val, phase, cfg.batch_size).map_err(|e| diverged(epoch, e))?)
        };
        history.epochs.push(EpochRecord {
            epoch,
            phase,
            train_loss,
            val_loss,
            lr,
        });
        log::debug!("epoch {epoch} {} train {train_loss:.6e} val {val_loss:?}", phase.as_str());

        let mut stop_phase = false;
        if let Some(v) = val_loss {
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, epoch, model.store().clone()));
                non_improving = 0;
            } else {
                non_improving += 1;
                stop_phase = cfg.early_stopping && non_improving >= cfg.patience.max(1);
            }
        }
        if stop_phase {
            if phase == LossPhase::Mse && cfg.l2_epochs() < cfg.max_epochs {
                log::info!("early stop in squared-error phase at epoch {epoch}; switching loss");
                epoch = cfg.l2_epochs() + 1;
                continue;
            }
            history.stopped_early = true;
            break;
        }
        epoch += 1;
    }
    finish_phase(model, &mut best, &mut history)?;
    Ok(history)
}

fn finish_phase<S: Scalar>(
    model: &mut TgNet<S>,
    best: &mut Option<(f64, usize, crate::autodiff::ParamStore<S>)>,
    history: &mut History,
) -> Result<()> {
    if let Some((loss, epoch, store)) = best.take() {
        model.store_mut().copy_values_from(&store)?;
        history.best_epoch = Some(epoch);
        history.best_val_loss = Some(loss);
    }
    Ok(())
}
