use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use super::config::TrainRunConfig;
use super::optim::{adamw_step, OptimizerState};
use crate::array::Array;
use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, Bound, CheckpointMeta, HeadKind, Model};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::signal::{sample_batch, write_file, PretrainData};

/// Mean losses at one evaluation point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub iter: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainReport<T> {
    /// Parameters after the last iteration.
    pub model: Model<T>,
    /// Parameters at the lowest validation loss.
    pub best_model: Model<T>,
    pub best_iter: usize,
    pub best_val: f64,
    pub rows: Vec<EvalRow>,
    /// Training mini-batch loss of every iteration.
    pub step_losses: Vec<f64>,
}

/// Collects gradients of every trainable bound tensor.
pub(crate) fn collect_grads<T: Scalar>(tape: &Tape<T>, bound: &Bound) -> IndexMap<String, Array<T>> {
    bound
        .iter()
        .filter(|(_, v)| tape.requires_grad(*v))
        .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g.clone())))
        .collect()
}

/// Mean next-token cross-entropy over every position of a batch.
pub fn lm_loss<T: Scalar>(model: &Model<T>, x: &[usize], y: &[usize], batch: usize, len: usize, mode: Mode, rng: &mut Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| false);
    let fwd = model.forward_tape(&mut tape, &p, x, batch, len, mode, rng)?;
    let loss = tape.cross_entropy(fwd.output, y)?;
    Ok(tape.value(loss).item().as_f64())
}

/// One optimizer step on a language-modelling batch; returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn lm_train_step<T: Scalar>(
    model: &mut Model<T>,
    state: &mut OptimizerState<T>,
    config: &TrainRunConfig,
    x: &[usize],
    y: &[usize],
    batch: usize,
    len: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, |_| true);
    let fwd = model.forward_tape(&mut tape, &p, x, batch, len, Mode::Train, rng)?;
    let loss = tape.cross_entropy(fwd.output, y)?;
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss at step {}", state.step + 1)));
    }
    tape.backward(loss)?;
    let grads = collect_grads(&tape, &p);
    adamw_step(&mut model.params, &grads, state, config.learning_rate, &config.adamw, config.grad_clip)?;
    Ok(value)
}

/// Mean eval-mode loss over `iters` random batches of a stream.
pub fn estimate_loss<T: Scalar>(model: &Model<T>, stream: &[usize], batch: usize, iters: usize, rng: &mut Rng) -> Result<f64> {
    let len = model.config.max_context;
    let mut total = 0.0;
    for _ in 0..iters {
        let (x, y) = sample_batch(stream, batch, len, rng)?;
        total += lm_loss(model, &x, &y, batch, len, Mode::Eval, rng)?;
    }
    Ok(total / iters as f64)
}

pub fn write_loss_csv(path: &Path, rows: &[EvalRow]) -> Result<()> {
    let mut s = String::from("iter,train_loss,val_loss\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.iter, r.train_loss, r.val_loss));
    }
    write_file(path, s.as_bytes())
}

pub fn write_steps_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("iter,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(path, s.as_bytes())
}

/// Output locations of a pre-training run.
pub struct PretrainPaths {
    pub loss_csv: PathBuf,
    pub steps_csv: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
}

impl PretrainPaths {
    pub fn new(dir: &Path) -> Self {
        PretrainPaths {
            loss_csv: dir.join("loss.csv"),
            steps_csv: dir.join("steps.csv"),
            best: dir.join("checkpoints").join("best"),
            last: dir.join("checkpoints").join("last"),
        }
    }

    pub fn at_iter(dir: &Path, iter: usize) -> PathBuf {
        dir.join("checkpoints").join(format!("iter-{iter:07}"))
    }
}

/// Next-token pre-training. Each iteration draws `batch_size` random
/// contexts from the training stream; at every evaluation point the mean
/// eval-mode loss over `eval_iters` batches of each stream is recorded and,
/// when `out_dir` is given, a checkpoint is written (plus `best` and `last`).
///
/// Streams: batches use `(seed, 1)`, dropout `(seed, 2)`, evaluation
/// `(seed, 100 + k)` for the k-th evaluation point, so evaluation never
/// perturbs the training trajectory.
pub fn pretrain<T: Scalar>(
    model: Model<T>,
    data: &PretrainData,
    config: &TrainRunConfig,
    out_dir: Option<&Path>,
    on_eval: &mut dyn FnMut(&EvalRow),
) -> Result<PretrainReport<T>> {
    config.validate()?;
    if model.head != HeadKind::Lm {
        return Err(Error::Contract("pre-training needs the language-model head".into()));
    }
    let len = model.config.max_context;
    for (name, s) in [("training", &data.train), ("validation", &data.val)] {
        if s.len() < len + 1 {
            return Err(Error::Data(format!("{name} stream has {} tokens, needs at least {}", s.len(), len + 1)));
        }
    }
    let mut model = model;
    let mut state = OptimizerState::new();
    let mut batch_rng = Rng::derive(config.seed, 1);
    let mut dropout_rng = Rng::derive(config.seed, 2);
    let eval_points = config.eval_points();
    let mut rows = Vec::new();
    let mut step_losses = Vec::with_capacity(config.max_iters);
    let mut best_model = model.clone();
    let (mut best_iter, mut best_val) = (0, f64::INFINITY);
    let paths = out_dir.map(PretrainPaths::new);

    for iter in 1..=config.max_iters {
        let (x, y) = sample_batch(&data.train, config.batch_size, len, &mut batch_rng)?;
        let loss = lm_train_step(&mut model, &mut state, config, &x, &y, config.batch_size, len, &mut dropout_rng)?;
        step_losses.push(loss);
        if let Ok(k) = eval_points.binary_search(&iter) {
            let mut eval_rng = Rng::derive(config.seed, 100 + k as u64);
            let train_loss = estimate_loss(&model, &data.train, config.batch_size, config.eval_iters, &mut eval_rng)?;
            let val_loss = estimate_loss(&model, &data.val, config.batch_size, config.eval_iters, &mut eval_rng)?;
            let row = EvalRow { iter, train_loss, val_loss };
            rows.push(row);
            on_eval(&row);
            let improved = val_loss < best_val;
            if improved {
                best_val = val_loss;
                best_iter = iter;
                best_model = model.clone();
            }
            if let (Some(dir), Some(paths)) = (out_dir, &paths) {
                let meta = CheckpointMeta { seed: config.seed, step: iter as u64 };
                save_checkpoint(&PretrainPaths::at_iter(dir, iter), &model, &meta)?;
                if improved {
                    save_checkpoint(&paths.best, &model, &meta)?;
                }
                write_loss_csv(&paths.loss_csv, &rows)?;
            }
        }
    }
    if let Some(paths) = &paths {
        let meta = CheckpointMeta { seed: config.seed, step: config.max_iters as u64 };
        save_checkpoint(&paths.last, &model, &meta)?;
        write_steps_csv(&paths.steps_csv, &step_losses)?;
    }
    Ok(PretrainReport { model, best_model, best_iter, best_val, rows, step_losses })
}

/// Repeatedly fits one fixed batch; returns the loss after each step.
pub fn overfit_batch<T: Scalar>(
    model: &mut Model<T>,
    config: &TrainRunConfig,
    x: &[usize],
    y: &[usize],
    batch: usize,
    iters: usize,
) -> Result<Vec<f64>> {
    let len = x.len() / batch.max(1);
    let mut state = OptimizerState::new();
    let mut rng = Rng::derive(config.seed, 2);
    (0..iters).map(|_| lm_train_step(model, &mut state, config, x, y, batch, len, &mut rng)).collect()
}
