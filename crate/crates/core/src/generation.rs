//! Autoregressive sampling and multi-step horizon error.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HeadKind, Model};
use crate::plot::{Figure, BLACK, BLUE, RED};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::signal::{quantize, write_file, SignalRecord, TokenWindow, VOCAB_SIZE};

/// Anything that maps a context to next-token logits.
pub trait NextToken {
    /// Longest context accepted; longer contexts are cropped to the tail.
    fn max_context(&self) -> usize;
    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>>;
}

impl<T: Scalar> NextToken for Model<T> {
    fn max_context(&self) -> usize {
        self.config.max_context
    }

    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        if self.head != HeadKind::Lm {
            return Err(Error::Contract("generation needs the language-model head".into()));
        }
        let logits = self.logits(context)?;
        Ok(logits.row(context.len() - 1).iter().map(|v| v.as_f64()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sampling {
    /// Categorical draw from `softmax(logits / t)`.
    Temperature(f64),
    /// Highest logit, lowest index on ties.
    Argmax,
}

impl Default for Sampling {
    fn default() -> Self {
        Sampling::Temperature(1.0)
    }
}

impl Sampling {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampling::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::Config(format!("temperature {t} must be positive; use argmax for greedy decoding")))
            }
            _ => Ok(()),
        }
    }

    fn pick(&self, logits: &[f64], rng: &mut Rng) -> Result<usize> {
        if logits.is_empty() || logits.len() > VOCAB_SIZE {
            return Err(Error::Contract(format!("{} logits for a vocabulary of {VOCAB_SIZE}", logits.len())));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite("next-token logits".into()));
        }
        match *self {
            Sampling::Argmax => Ok(argmax(logits)),
            Sampling::Temperature(t) => Ok(rng.categorical(&softmax(logits, t))),
        }
    }
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// `softmax(logits / temperature)` in f64.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| ((z - max) / temperature).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Extends `context` by `n_new` tokens, one forward pass per token, keeping
/// only the trailing `max_context` tokens as input.
pub fn generate<M: NextToken + ?Sized>(
    model: &M,
    context: &[usize],
    n_new: usize,
    rng: &mut Rng,
    sampling: Sampling,
) -> Result<Vec<usize>> {
    if context.is_empty() {
        return Err(Error::Contract("generation needs a non-empty context".into()));
    }
    sampling.validate()?;
    let limit = model.max_context();
    let mut buffer: Vec<usize> = context[context.len().saturating_sub(limit)..].to_vec();
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let start = buffer.len().saturating_sub(limit);
        let next = sampling.pick(&model.next_logits(&buffer[start..])?, rng)?;
        out.push(next);
        buffer.push(next);
        if buffer.len() > 2 * limit {
            buffer.drain(..buffer.len() - limit);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonConfig {
    pub context_len: usize,
    pub horizon: usize,
    /// Independent stochastic rollouts per window.
    pub rollouts: usize,
    pub sampling: Sampling,
    pub seed: u64,
    pub jobs: usize,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { context_len: 500, horizon: 250, rollouts: 1, sampling: Sampling::default(), seed: 0, jobs: 1 }
    }
}

impl HorizonConfig {
    pub fn window_len(&self) -> usize {
        self.context_len + self.horizon
    }
}

/// Cuts a record into `context_len + horizon` sample windows, each quantized
/// with the min/max of the whole window so the continuation has well-defined
/// ground-truth tokens.
pub fn horizon_windows(record: &SignalRecord, window_len: usize, shift: usize) -> Result<Vec<TokenWindow>> {
    if window_len == 0 || shift == 0 {
        return Err(Error::Config("window length and shift must be positive".into()));
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_len <= record.samples.len() {
        let (tokens, scale_min, scale_max) = quantize(&record.samples[start..start + window_len])?;
        out.push(TokenWindow { tokens, scale_min, scale_max, fs: record.fs, modality: record.modality });
        start += shift;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub window: usize,
    pub rollout: usize,
    /// Full ground-truth window: context followed by the continuation.
    pub truth: Vec<usize>,
    pub prediction: Vec<usize>,
}

impl Rollout {
    pub fn errors(&self, context_len: usize) -> impl Iterator<Item = usize> + '_ {
        self.truth[context_len..].iter().zip(&self.prediction).map(|(&t, &p)| t.abs_diff(p))
    }

    /// `t,truth,prediction` with the prediction blank over the context.
    pub fn to_csv(&self) -> String {
        let context_len = self.truth.len() - self.prediction.len();
        let mut s = String::from("t,truth,prediction\n");
        for (t, &v) in self.truth.iter().enumerate() {
            match t.checked_sub(context_len).map(|i| self.prediction[i]) {
                Some(p) => s.push_str(&format!("{t},{v},{p}\n")),
                None => s.push_str(&format!("{t},{v},\n")),
            }
        }
        s
    }

    /// Context in black, true continuation in blue, prediction in red.
    pub fn to_svg(&self, title: &str) -> String {
        let context_len = self.truth.len() - self.prediction.len();
        let pts = |range: std::ops::Range<usize>, src: &[usize], offset: usize| {
            range.map(|t| (t as f64, src[t - offset] as f64)).collect::<Vec<_>>()
        };
        Figure::new(title)
            .line(pts(0..context_len, &self.truth, 0), BLACK)
            .line(pts(context_len.saturating_sub(1)..self.truth.len(), &self.truth, 0), BLUE)
            .line(pts(context_len..self.truth.len(), &self.prediction, context_len), RED)
            .to_svg()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonStep {
    /// 1-based prediction step.
    pub step: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n: usize,
}

/// Absolute token error per prediction step, aggregated over rollouts.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonStats {
    pub steps: Vec<HorizonStep>,
}

impl HorizonStats {
    pub fn from_rollouts(rollouts: &[Rollout], context_len: usize, horizon: usize) -> Self {
        let mut per_step: Vec<Vec<f64>> = vec![Vec::with_capacity(rollouts.len()); horizon];
        for r in rollouts {
            for (h, e) in r.errors(context_len).enumerate().take(horizon) {
                per_step[h].push(e as f64);
            }
        }
        let steps = per_step
            .into_iter()
            .enumerate()
            .map(|(h, mut errs)| {
                errs.sort_by(f64::total_cmp);
                HorizonStep {
                    step: h + 1,
                    median: quantile(&errs, 0.5),
                    q25: quantile(&errs, 0.25),
                    q75: quantile(&errs, 0.75),
                    n: errs.len(),
                }
            })
            .collect();
        Self { steps }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,median,q25,q75,n\n");
        for h in &self.steps {
            s.push_str(&format!("{},{},{},{},{}\n", h.step, h.median, h.q25, h.q75, h.n));
        }
        s
    }
}

/// Linearly interpolated quantile of sorted values; NaN when empty.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub stats: HorizonStats,
    pub rollouts: Vec<Rollout>,
}

impl HorizonReport {
    /// Writes `horizon.csv` and, for the first `examples` rollouts,
    /// `rollout-NNN.csv` / `rollout-NNN.svg`.
    pub fn write(&self, dir: &Path, examples: usize, context_len: usize) -> Result<()> {
        write_file(&dir.join("horizon.csv"), self.stats.to_csv().as_bytes())?;
        for (i, r) in self.rollouts.iter().take(examples).enumerate() {
            write_file(&dir.join(format!("rollout-{i:03}.csv")), r.to_csv().as_bytes())?;
            let title = format!("window {} rollout {} (context {context_len})", r.window, r.rollout);
            write_file(&dir.join(format!("rollout-{i:03}.svg")), r.to_svg(&title).as_bytes())?;
        }
        Ok(())
    }
}

/// Generates `horizon` tokens from the first `context_len` tokens of each
/// window and compares against the true continuation. Each (window, rollout)
/// pair owns an rng stream derived from the seed, so `jobs` does not change
/// the result.
pub fn evaluate_horizon<M: NextToken + Sync + ?Sized>(
    model: &M,
    windows: &[TokenWindow],
    config: &HorizonConfig,
) -> Result<HorizonReport> {
    config.sampling.validate()?;
    if config.context_len == 0 || config.horizon == 0 || config.rollouts == 0 {
        return Err(Error::Config("context, horizon and rollouts must be positive".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.tokens.len() != config.window_len()) {
        return Err(Error::Data(format!("horizon window of {} tokens, expected {}", w.tokens.len(), config.window_len())));
    }
    let tasks: Vec<(usize, usize)> =
        (0..windows.len()).flat_map(|w| (0..config.rollouts).map(move |r| (w, r))).collect();
    let run = |&(w, r): &(usize, usize)| -> Result<Rollout> {
        let truth = &windows[w].tokens;
        let mut rng = Rng::derive(config.seed, (w * config.rollouts + r) as u64);
        let prediction = generate(model, &truth[..config.context_len], config.horizon, &mut rng, config.sampling)?;
        Ok(Rollout { window: w, rollout: r, truth: truth.clone(), prediction })
    };
    let jobs = config.jobs.max(1);
    let rollouts: Vec<Rollout> = if jobs == 1 {
        tasks.iter().map(run).collect::<Result<_>>()?
    } else {
        let per = tasks.len().div_ceil(jobs).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> =
                tasks.chunks(per).map(|chunk| scope.spawn(move || chunk.iter().map(run).collect::<Result<Vec<_>>>())).collect();
            let mut all = Vec::with_capacity(tasks.len());
            for h in handles {
                all.extend(h.join().expect("horizon worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let stats = HorizonStats::from_rollouts(&rollouts, config.context_len, config.horizon);
    Ok(HorizonReport { stats, rollouts })
}
