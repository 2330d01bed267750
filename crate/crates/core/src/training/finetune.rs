use std::collections::HashSet;

use super::config::TrainRunConfig;
use super::optim::{adamw_step, OptimizerState};
use super::pretrain::collect_grads;
use crate::array::Array;
use crate::autodiff::{Mode, Tape};
use crate::error::{Error, Result};
use crate::model::{finetune_trainable, sigmoid, HeadKind, Model};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Windows scored or trained per forward pass when filling the cache.
const PREFIX_CHUNK: usize = 8;

/// Residual stream entering the final block for a set of windows.
///
/// The blocks before the final one are frozen during fine-tuning and run in
/// eval mode, so their output is a fixed function of the window and can be
/// computed once and shared by every fold.
#[derive(Debug, Clone)]
pub struct PrefixCache<T> {
    hidden: Vec<T>,
    window_len: usize,
    width: usize,
    count: usize,
}

impl<T: Scalar> PrefixCache<T> {
    pub fn build(model: &Model<T>, windows: &[&[usize]]) -> Result<Self> {
        let len = windows.first().map_or(0, |w| w.len());
        if windows.iter().any(|w| w.len() != len) || len == 0 {
            return Err(Error::Contract("prefix cache needs non-empty windows of equal length".into()));
        }
        let width = model.config.d_model;
        let mut hidden = Vec::with_capacity(windows.len() * len * width);
        for chunk in windows.chunks(PREFIX_CHUNK) {
            let tokens: Vec<usize> = chunk.iter().flat_map(|w| w.iter().copied()).collect();
            let h = model.prefix_hidden(&tokens, chunk.len(), len)?;
            hidden.extend_from_slice(h.data());
        }
        Ok(PrefixCache { hidden, window_len: len, width, count: windows.len() })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    /// `[indices.len(), len, width]` batch.
    pub fn gather(&self, indices: &[usize]) -> Result<Array<T>> {
        let stride = self.window_len * self.width;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.count {
                return Err(Error::Contract(format!("window {i} outside cache of {}", self.count)));
            }
            data.extend_from_slice(&self.hidden[i * stride..(i + 1) * stride]);
        }
        Array::from_vec(&[indices.len(), self.window_len, self.width], data)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneReport<T> {
    pub model: Model<T>,
    /// Mini-batch BCE of every iteration.
    pub losses: Vec<f64>,
    pub trainable: Vec<String>,
    pub trainable_scalars: usize,
}

/// Swaps in the classification head and fixes the trainable set.
pub fn prepare_finetune<T: Scalar>(base: &Model<T>, config: &TrainRunConfig) -> Result<(Model<T>, Vec<String>)> {
    if base.head != HeadKind::Lm {
        return Err(Error::Contract("fine-tuning starts from a language-model checkpoint".into()));
    }
    let model = base.swap_head(&mut Rng::derive(config.seed, 10))?;
    let trainable = finetune_trainable(&model.config, config.train_final_norm);
    Ok((model, trainable))
}

/// Fine-tunes the final block and classification head with BCE on the
/// final-position output. `train` indexes windows of `cache`; `labels`
/// holds 0/1 targets for every cached window.
pub fn finetune_af<T: Scalar>(
    base: &Model<T>,
    cache: &PrefixCache<T>,
    labels: &[f64],
    train: &[usize],
    config: &TrainRunConfig,
) -> Result<FinetuneReport<T>> {
    config.validate()?;
    if labels.len() != cache.len() {
        return Err(Error::Contract(format!("{} labels for {} cached windows", labels.len(), cache.len())));
    }
    if train.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    let positives = train.iter().filter(|&&i| labels[i] > 0.5).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::Data(format!(
            "training windows contain a single class ({} of {} positive)",
            positives,
            train.len()
        )));
    }
    let (mut model, trainable) = prepare_finetune(base, config)?;
    let initial = model.clone();
    let is_trainable: HashSet<&str> = trainable.iter().map(String::as_str).collect();
    let trainable_scalars = trainable.iter().map(|n| model.params.get(n).map(|t| t.len())).sum::<Result<usize>>()?;

    let mut state = OptimizerState::new();
    let mut batch_rng = Rng::derive(config.seed, 11);
    let mut dropout_rng = Rng::derive(config.seed, 12);
    let mut losses = Vec::with_capacity(config.max_iters);
    for _ in 0..config.max_iters {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| train[batch_rng.below(train.len())]).collect();
        let targets: Vec<f64> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |n| is_trainable.contains(n));
        let hidden = tape.constant(cache.gather(&idx)?);
        let logits = model.classify_from_prefix_tape(&mut tape, &p, hidden, Mode::Train, &mut dropout_rng)?;
        let loss = tape.bce_with_logits(logits, &targets)?;
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at step {}", state.step + 1)));
        }
        tape.backward(loss)?;
        let grads = collect_grads(&tape, &p);
        adamw_step(&mut model.params, &grads, &mut state, config.learning_rate, &config.adamw, config.grad_clip)?;
        losses.push(value);
    }
    for (name, t) in initial.params.iter() {
        if !is_trainable.contains(name) && model.params.get(name)?.data() != t.data() {
            return Err(Error::Contract(format!("frozen tensor {name} changed during fine-tuning")));
        }
    }
    Ok(FinetuneReport { model, losses, trainable, trainable_scalars })
}

/// Eval-mode AF probability of each listed cached window.
pub fn score_windows<T: Scalar>(model: &Model<T>, cache: &PrefixCache<T>, indices: &[usize]) -> Result<Vec<f64>> {
    if model.head != HeadKind::Cls {
        return Err(Error::Contract("scoring needs the classification head".into()));
    }
    let mut scores = Vec::with_capacity(indices.len());
    let mut rng = Rng::new(0);
    for chunk in indices.chunks(PREFIX_CHUNK * 4) {
        let mut tape = Tape::new();
        let p = model.bind(&mut tape, |_| false);
        let hidden = tape.constant(cache.gather(chunk)?);
        let logits = model.classify_from_prefix_tape(&mut tape, &p, hidden, Mode::Eval, &mut rng)?;
        scores.extend(tape.value(logits).data().iter().map(|&z| sigmoid(z).as_f64()));
    }
    Ok(scores)
}
