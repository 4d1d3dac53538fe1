//! Loss, optimizer, learning-rate schedule, evaluation metric and the
//! training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{relative_error, Tape, Tensor, Var, FD_STEP};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::layers::{Forward, GraFormer, ParamStore};
use crate::rng::{self, stream, StreamRng};

/// Per-sample squared Frobenius error, averaged over the batch.
///
/// A 2-D `[j, 3]` input counts as a batch of one.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred), tape.shape(target));
    if ps != ts {
        return Err(Error::Shape {
            op: "mse_loss",
            lhs: ps.to_vec(),
            rhs: ts.to_vec(),
        });
    }
    let batch = if ps.len() >= 3 { ps[0] } else { 1 };
    let diff = tape.sub(pred, target)?;
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / batch as f64))
}

/// [`mse_loss`] on plain tensors.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (p, t) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let l = mse_loss(&mut tape, p, t)?;
    Ok(tape.value(l).item())
}

/// Mean per-joint position error after subtracting each sample's root joint
/// from both prediction and target. Inputs are `[batch, j, 3]` or `[j, 3]`.
pub fn mpjpe(pred: &Tensor, target: &Tensor, root: usize) -> Result<f64> {
    let errors = per_sample_mpjpe(pred, target, root)?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Root-aligned mean joint error of each sample.
pub fn per_sample_mpjpe(pred: &Tensor, target: &Tensor, root: usize) -> Result<Vec<f64>> {
    let shape_err = || Error::Shape {
        op: "mpjpe",
        lhs: pred.shape().to_vec(),
        rhs: target.shape().to_vec(),
    };
    if pred.shape() != target.shape() || pred.last_dim() != 3 || pred.ndim() < 2 {
        return Err(shape_err());
    }
    let j = pred.shape()[pred.ndim() - 2];
    if root >= j || j == 0 {
        return Err(shape_err());
    }
    let per = j * 3;
    Ok(pred
        .data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(p, t)| {
            let (pr, tr) = (&p[3 * root..3 * root + 3], &t[3 * root..3 * root + 3]);
            let total: f64 = (0..j)
                .map(|k| {
                    (0..3)
                        .map(|c| {
                            let d = (p[3 * k + c] - pr[c]) - (t[3 * k + c] - tr[c]);
                            d * d
                        })
                        .sum::<f64>()
                        .sqrt()
                })
                .sum();
            total / j as f64
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LrSchedule {
    /// Multiply by `factor` every `every` optimizer steps.
    Step { every: usize, factor: f64 },
    /// Multiply by `factor` every `every` epochs.
    Epoch { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn steps() -> Self {
        LrSchedule::Step {
            every: 75_000,
            factor: 0.9,
        }
    }

    pub fn epochs() -> Self {
        LrSchedule::Epoch {
            every: 30,
            factor: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Evaluate every this many epochs; the last epoch is always evaluated.
    #[serde(default = "one")]
    pub eval_every: usize,
}

fn one() -> usize {
    1
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            schedule: LrSchedule::steps(),
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        let every = match self.schedule {
            LrSchedule::Step { every, .. } | LrSchedule::Epoch { every, .. } => every,
        };
        if every == 0 {
            return Err(Error::Config("schedule period must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate for the optimizer step `step` taken during `epoch`.
pub fn lr_at(config: &TrainConfig, step: usize, epoch: usize) -> f64 {
    let (count, every, factor) = match config.schedule {
        LrSchedule::Step { every, factor } => (step, every, factor),
        LrSchedule::Epoch { every, factor } => (epoch, every, factor),
    };
    config.learning_rate * factor.powi((count / every) as i32)
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_config(params: &ParamStore, config: &TrainConfig) -> Self {
        Self::new(params, config.beta1, config.beta2, config.adam_eps)
    }

    pub fn timestep(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update from the gradients stored in `params`.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    if state.m.len() != params.len()
        || params
            .iter()
            .zip(&state.m)
            .any(|(p, m)| p.value.numel() != m.len() || p.grad.len() != m.len())
    {
        return Err(Error::Shape {
            op: "adam_step",
            lhs: params.iter().map(|p| p.value.numel()).collect(),
            rhs: state.m.iter().map(Vec::len).collect(),
        });
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let g = p.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Eval-mode MPJPE of `model` over a whole dataset, in millimeters.
pub fn evaluate(model: &GraFormer, data: &Dataset) -> Result<f64> {
    let errors = evaluate_per_sample(model, data)?;
    Ok(errors.iter().sum::<f64>() / errors.len().max(1) as f64)
}

pub fn evaluate_per_sample(model: &GraFormer, data: &Dataset) -> Result<Vec<f64>> {
    const CHUNK: usize = 256;
    let root = data.skeleton.root_index();
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(CHUNK) {
        let (x, y) = data.batch(chunk);
        let pred = model.predict(&x)?;
        out.extend(per_sample_mpjpe(&pred, &y, root)?);
    }
    Ok(out)
}

/// Eval-mode loss of `model` on the given indices.
pub fn eval_loss(model: &GraFormer, data: &Dataset) -> Result<f64> {
    let (x, y) = data.all();
    mse(&model.predict(&x)?, &y)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_mpjpe_mm: Option<f64>,
    pub wall_ms: u64,
}

/// Stateful training driver; one call to [`Trainer::run_epoch`] per epoch.
pub struct Trainer {
    model: GraFormer,
    config: TrainConfig,
    adam: AdamState,
    step: usize,
    epoch: usize,
    shuffle_rng: StreamRng,
    dropout_rng: StreamRng,
    best: Option<(f64, ParamStore)>,
    prefetch: usize,
}

impl Trainer {
    pub fn new(model: GraFormer, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::for_config(model.params(), &config);
        Ok(Self {
            shuffle_rng: rng::seeded(config.seed, stream::SHUFFLE),
            dropout_rng: rng::seeded(config.seed, stream::DROPOUT),
            model,
            config,
            adam,
            step: 0,
            epoch: 0,
            best: None,
            prefetch: 0,
        })
    }

    /// Assembles up to `depth` upcoming mini-batches on a helper thread while
    /// the current one trains. `0` keeps batch assembly inline. Results do
    /// not depend on the setting.
    pub fn set_prefetch(&mut self, depth: usize) {
        self.prefetch = depth;
    }

    pub fn model(&self) -> &GraFormer {
        &self.model
    }

    pub fn into_model(self) -> GraFormer {
        self.model
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Parameters with the lowest evaluation score seen so far.
    pub fn best(&self) -> Option<(f64, GraFormer)> {
        self.best.as_ref().map(|(score, params)| {
            let mut m = self.model.clone();
            *m.params_mut() = params.clone();
            (*score, m)
        })
    }

    /// Single optimizer step on the given batch; returns the batch loss.
    pub fn train_batch(&mut self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let lr = lr_at(&self.config, self.step, self.epoch);
        let mut f = Forward::train(self.model.params(), &mut self.dropout_rng);
        let xv = f.input(x.clone());
        let yv = f.input(y.clone());
        let pred = self.model.forward(&mut f, xv)?;
        let loss = mse_loss(&mut f.tape, pred, yv)?;
        let value = f.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                value,
            });
        }
        let grads = f.backward(loss)?;
        let params = self.model.params_mut();
        params.zero_grads();
        params.accumulate(&grads);
        adam_step(params, &mut self.adam, lr)?;
        self.step += 1;
        Ok(value)
    }

    /// Shuffles, trains on every mini-batch once, then evaluates on `eval`
    /// (or on the training set when `eval` is `None`).
    pub fn run_epoch(&mut self, train: &Dataset, eval: Option<&Dataset>) -> Result<EpochLog> {
        self.run_epoch_with(train, eval, true)
    }

    /// [`Trainer::run_epoch`] with the evaluation pass optional.
    pub fn run_epoch_with(
        &mut self,
        train: &Dataset,
        eval: Option<&Dataset>,
        evaluate_now: bool,
    ) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let start = Instant::now();
        let lr = lr_at(&self.config, self.step, self.epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let batch_size = self.config.batch_size;
        let mut weighted = 0.0;
        if self.prefetch == 0 {
            for chunk in order.chunks(batch_size) {
                let (x, y) = train.batch(chunk);
                weighted += self.train_batch(&x, &y)? * chunk.len() as f64;
            }
        } else {
            let (tx, rx) = mpsc::sync_channel(self.prefetch);
            let order = &order;
            thread::scope(|scope| -> Result<()> {
                scope.spawn(move || {
                    for chunk in order.chunks(batch_size) {
                        if tx.send((chunk.len(), train.batch(chunk))).is_err() {
                            break;
                        }
                    }
                });
                for (n, (x, y)) in rx {
                    weighted += self.train_batch(&x, &y)? * n as f64;
                }
                Ok(())
            })?;
        }
        let score = if evaluate_now {
            let score = evaluate(&self.model, eval.unwrap_or(train))?;
            if self.best.as_ref().is_none_or(|(b, _)| score < *b) {
                self.best = Some((score, self.model.params().clone()));
            }
            Some(score)
        } else {
            None
        };
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            step: self.step,
            lr,
            train_loss: weighted / train.len() as f64,
            eval_mpjpe_mm: score,
            wall_ms: start.elapsed().as_millis() as u64,
        })
    }
}

/// Everything produced by [`train`].
pub struct TrainReport {
    pub model: GraFormer,
    pub best: Option<(f64, GraFormer)>,
    pub log: Vec<EpochLog>,
}

/// Output locations written by [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("final.grfk")
    }

    pub fn best_checkpoint(&self) -> PathBuf {
        self.dir.join("best.grfk")
    }

    pub fn log(&self) -> PathBuf {
        self.dir.join("train.log")
    }
}

/// Runs `config.epochs` epochs. When `outputs` is given, the log is streamed
/// as JSON lines and the final and best checkpoints are written at the end.
pub fn train(
    model: GraFormer,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    outputs: Option<&TrainOutputs>,
) -> Result<TrainReport> {
    train_with(model, train_set, eval_set, config, outputs, 0, |_| {})
}

/// [`train`] with a batch prefetch depth and a callback after every epoch.
pub fn train_with(
    model: GraFormer,
    train_set: &Dataset,
    eval_set: Option<&Dataset>,
    config: &TrainConfig,
    outputs: Option<&TrainOutputs>,
    prefetch: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    if train_set.joint_count() != model.skeleton().joint_count() {
        return Err(Error::Config(format!(
            "dataset has {} joints, model expects {}",
            train_set.joint_count(),
            model.skeleton().joint_count()
        )));
    }
    let mut log_file = match outputs {
        Some(o) => {
            std::fs::create_dir_all(&o.dir)?;
            Some(BufWriter::new(File::create(o.log())?))
        }
        None => None,
    };
    let mut trainer = Trainer::new(model, config.clone())?;
    trainer.set_prefetch(prefetch);
    let mut log = Vec::with_capacity(config.epochs);
    for e in 1..=config.epochs {
        let due = e % config.eval_every == 0 || e == config.epochs;
        let row = trainer.run_epoch_with(train_set, eval_set, due)?;
        on_epoch(&row);
        if let Some(w) = log_file.as_mut() {
            writeln!(w, "{}", serde_json::to_string(&row)?)?;
            w.flush()?;
        }
        log.push(row);
    }
    let best = trainer.best();
    let model = trainer.into_model();
    if let Some(o) = outputs {
        model.save(&o.final_checkpoint())?;
        match &best {
            Some((_, b)) => b.save(&o.best_checkpoint())?,
            None => model.save(&o.best_checkpoint())?,
        }
    }
    Ok(TrainReport { model, best, log })
}

pub fn read_log(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Result of checking parameter gradients against finite differences.
#[derive(Debug, Clone)]
pub struct ModelGradCheck {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked: usize,
    /// Sampled coordinates discarded because a `±h` step changed the sign of
    /// some ReLU input.
    pub skipped: usize,
    pub pass: bool,
}

/// Compares the analytic gradient of the scalar built by `loss` with central
/// differences at `per_param` random coordinates of every tensor in `store`.
///
/// `loss` runs in eval mode. Coordinates whose perturbation crosses a ReLU
/// kink are resampled, up to eight attempts per requested coordinate.
pub fn grad_check_params<F>(
    store: &ParamStore,
    per_param: usize,
    seed: u64,
    tol: f64,
    loss: F,
) -> Result<ModelGradCheck>
where
    F: Fn(&mut Forward) -> Result<Var>,
{
    let eval = |params: &ParamStore| -> Result<(f64, Vec<bool>)> {
        let mut f = Forward::eval(params);
        let l = loss(&mut f)?;
        Ok((f.value(l).item(), f.tape.relu_pattern().to_vec()))
    };
    let mut f = Forward::eval_with_grads(store);
    let l = loss(&mut f)?;
    let grads = f.backward(l)?;
    let mut analytic = store.clone();
    analytic.zero_grads();
    analytic.accumulate(&grads);
    let (_, base_pattern) = eval(store)?;

    let mut rng = rng::seeded(seed, stream::GRAD_CHECK);
    let mut report = ModelGradCheck {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        skipped: 0,
        pass: true,
    };
    let mut probe = store.clone();
    for (pi, p) in analytic.iter().enumerate() {
        let n = p.grad.len();
        let wanted = per_param.min(n);
        let (mut done, mut attempts) = (0, 0);
        while done < wanted && attempts < 8 * wanted {
            attempts += 1;
            let i = rng.gen_range(0..n);
            let orig = p.value.data()[i];
            let h = FD_STEP * orig.abs().max(1.0);
            let mut at = |v: f64| -> Result<(f64, Vec<bool>)> {
                probe
                    .iter_mut()
                    .nth(pi)
                    .expect("same layout")
                    .value
                    .data_mut()[i] = v;
                eval(&probe)
            };
            let (up, up_pattern) = at(orig + h)?;
            let (down, down_pattern) = at(orig - h)?;
            at(orig)?;
            if up_pattern != base_pattern || down_pattern != base_pattern {
                report.skipped += 1;
                continue;
            }
            done += 1;
            report.checked += 1;
            let err = relative_error(p.grad[i], (up - down) / (2.0 * h));
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", p.name);
            }
        }
    }
    report.pass = report.max_rel_error <= tol && report.checked > 0;
    Ok(report)
}

/// Checks every parameter tensor and the input of the eval-mode MSE loss.
///
/// The loss is taken in output units (head scale 1, targets divided by
/// `output_scale`) so its magnitude, and with it the round-off in the
/// differences, stays near 1.
pub fn grad_check_model(
    model: &GraFormer,
    x: &Tensor,
    y: &Tensor,
    per_param: usize,
    seed: u64,
    tol: f64,
) -> Result<ModelGradCheck> {
    let scale = model.config().output_scale;
    let mut model = model.with_output_scale(1.0);
    let input = model.params_mut().add("input", x.clone());
    let y = Tensor::new(
        y.shape().to_vec(),
        y.data().iter().map(|v| v / scale).collect(),
    )?;
    grad_check_params(model.params(), per_param, seed, tol, |f| {
        let xv = f.param(input);
        let yv = f.input(y.clone());
        let pred = model.forward(f, xv)?;
        mse_loss(&mut f.tape, pred, yv)
    })
}
