use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{bandpass, resample, tokenize_window, window_count, Label, SignalRecord, TokenWindow};

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub records: Vec<SignalRecord>,
    pub window_len: usize,
    pub window_shift: usize,
    pub target_fs: f64,
    /// Band edges in Hz, applied at the native rate before resampling.
    pub bandpass: Option<(f64, f64)>,
    /// Share of the token stream used for training.
    pub split_fraction: f64,
}

impl DatasetSpec {
    pub fn new(records: Vec<SignalRecord>, target_fs: f64) -> Self {
        DatasetSpec { records, window_len: 500, window_shift: 50, target_fs, bandpass: None, split_fraction: 0.9 }
    }

    fn check(&self) -> Result<()> {
        if self.records.is_empty() {
            return Err(Error::Data("dataset has no records".into()));
        }
        if self.window_shift == 0 || self.window_len == 0 || self.window_len > super::MAX_WINDOW {
            return Err(Error::Config(format!(
                "window length {} must be in 1..=500 and shift {} at least 1",
                self.window_len, self.window_shift
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::Config(format!("split fraction {} must lie in (0, 1)", self.split_fraction)));
        }
        Ok(())
    }

    /// Band-pass (when configured) then resample to the target rate.
    pub fn preprocess(&self, record: &SignalRecord) -> Result<SignalRecord> {
        record.check()?;
        let filtered = match self.bandpass {
            Some((lo, hi)) => bandpass(record, lo, hi)?,
            None => record.clone(),
        };
        resample(&filtered, self.target_fs)
    }
}

/// Tokenizes a whole record as consecutive, independently scaled chunks of
/// `window_len` samples (a trailing partial chunk is kept).
pub fn tokenize_stream(record: &SignalRecord, window_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(record.samples.len());
    for chunk in record.samples.chunks(window_len) {
        out.extend(tokenize_window(chunk, record.fs, record.modality)?.tokens);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct PretrainData {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Records (by index) placed in the training stream; the rest are validation.
    pub train_records: usize,
}

/// Concatenates per-record token streams in input order and splits them at
/// the record boundary closest to `split_fraction` of all tokens, keeping at
/// least one record on each side.
pub fn build_pretrain_dataset(spec: &DatasetSpec) -> Result<PretrainData> {
    spec.check()?;
    if spec.records.len() < 2 {
        return Err(Error::Data("pre-training split needs at least two records".into()));
    }
    let streams = spec
        .records
        .iter()
        .map(|r| tokenize_stream(&spec.preprocess(r)?, spec.window_len))
        .collect::<Result<Vec<_>>>()?;
    let total: usize = streams.iter().map(Vec::len).sum();
    let target = spec.split_fraction * total as f64;
    let mut best = (1, f64::INFINITY);
    let mut acc = 0usize;
    for (i, s) in streams.iter().enumerate().take(streams.len() - 1) {
        acc += s.len();
        let gap = (acc as f64 - target).abs();
        if gap < best.1 {
            best = (i + 1, gap);
        }
    }
    let train_records = best.0;
    let train: Vec<usize> = streams[..train_records].concat();
    let val: Vec<usize> = streams[train_records..].concat();
    let need = spec.window_len + 1;
    for (name, s) in [("training", &train), ("validation", &val)] {
        if s.len() < need {
            return Err(Error::Data(format!("{name} stream has {} tokens, needs at least {need}", s.len())));
        }
    }
    Ok(PretrainData { train, val, train_records })
}

/// Draws `batch` random (context, next-token target) pairs of length `len`
/// from `stream`, flattened row-major.
pub fn sample_batch(stream: &[usize], batch: usize, len: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<usize>)> {
    if stream.len() < len + 1 {
        return Err(Error::Data(format!("stream has {} tokens, needs at least {}", stream.len(), len + 1)));
    }
    let mut x = Vec::with_capacity(batch * len);
    let mut y = Vec::with_capacity(batch * len);
    for _ in 0..batch {
        let start = rng.below(stream.len() - len);
        x.extend_from_slice(&stream[start..start + len]);
        y.extend_from_slice(&stream[start + 1..start + len + 1]);
    }
    Ok((x, y))
}

#[derive(Debug, Clone)]
pub struct FinetuneDataset {
    pub windows: Vec<TokenWindow>,
    pub labels: Vec<Label>,
    pub subject_ids: Vec<String>,
    /// Sample offset of each window within its preprocessed record.
    pub starts: Vec<usize>,
}

impl FinetuneDataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Distinct subjects in first-appearance order.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen: Vec<String> = Vec::new();
        for s in &self.subject_ids {
            if !seen.contains(s) {
                seen.push(s.clone());
            }
        }
        seen
    }
}

/// Sliding windows over every labeled record, each tokenized on its own scale.
pub fn build_finetune_dataset(spec: &DatasetSpec) -> Result<FinetuneDataset> {
    spec.check()?;
    let mut out = FinetuneDataset { windows: Vec::new(), labels: Vec::new(), subject_ids: Vec::new(), starts: Vec::new() };
    for record in &spec.records {
        let label = record
            .label
            .ok_or_else(|| Error::Data(format!("record {} has no rhythm label", record.subject_id)))?;
        let r = spec.preprocess(record)?;
        let n = window_count(r.samples.len(), spec.window_len, spec.window_shift);
        for w in 0..n {
            let start = w * spec.window_shift;
            out.windows.push(tokenize_window(&r.samples[start..start + spec.window_len], r.fs, r.modality)?);
            out.labels.push(label);
            out.subject_ids.push(r.subject_id.clone());
            out.starts.push(start);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub subject: String,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Leave-one-subject-out folds: one per subject, in first-appearance order.
pub fn loso_folds(subject_ids: &[String]) -> Vec<Fold> {
    let mut subjects: Vec<&String> = Vec::new();
    for s in subject_ids {
        if !subjects.contains(&s) {
            subjects.push(s);
        }
    }
    subjects
        .into_iter()
        .map(|s| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..subject_ids.len()).partition(|&i| &subject_ids[i] == s);
            Fold { subject: s.clone(), train, test }
        })
        .collect()
}
