//! Attention and residual-stream analyses: final-row aggregates, look-back
//! distance, slope-token similarity, shift-and-add head maps with peak
//! detection, and base vs fine-tuned attention deltas.
//!
//! Layers are numbered from 1 here, as in the figures; `AttentionRecord`
//! indexes them from 0.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{AttentionRecord, Model};
use crate::plot::{Figure, BLACK, RED};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::signal::{detokenize, write_file, TokenWindow};
use crate::Mode;

pub const PEAK_MIN_DISTANCE: usize = 15;
pub const PEAK_REL_HEIGHT: f64 = 0.5;
pub const SLOPE_TOLERANCE: usize = 2;

fn layer_index<T>(record: &AttentionRecord<T>, layer: usize) -> Result<usize> {
    if layer == 0 || layer > record.layers {
        return Err(Error::Contract(format!("layer {layer} outside 1..={}", record.layers)));
    }
    Ok(layer - 1)
}

/// Sum over heads of the final attention row of `layer`, normalized to 1.
pub fn aggregate_final_row<T: Scalar>(record: &AttentionRecord<T>, layer: usize) -> Result<Vec<f64>> {
    let l = layer_index(record, layer)?;
    let mut acc = vec![0.0; record.len];
    for h in 0..record.heads {
        for (a, w) in acc.iter_mut().zip(record.final_row(l, h)) {
            *a += w.as_f64();
        }
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::NonFinite(format!("aggregate attention of layer {layer}")));
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

/// Attention-weighted mean look-back of one row, in seconds.
pub fn lookback_center(row: &[f64], fs: f64) -> f64 {
    let t = row.len();
    let total: f64 = row.iter().sum();
    row.iter().enumerate().map(|(i, w)| w * (t - 1 - i) as f64).sum::<f64>() / total / fs
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookbackRow {
    pub layer: usize,
    pub mean_s: f64,
    /// Sample standard deviation over head-window pairs.
    pub sd_s: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LookbackTable {
    pub rows: Vec<LookbackRow>,
}

impl LookbackTable {
    pub fn layer(&self, layer: usize) -> Option<&LookbackRow> {
        self.rows.iter().find(|r| r.layer == layer)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,mean_s,sd_s,n\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.layer, r.mean_s, r.sd_s, r.n));
        }
        s
    }
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-layer mean and spread of per-head look-back centers, pooled over
/// heads and windows.
pub fn lookback_distance<T: Scalar>(records: &[AttentionRecord<T>], fs: f64) -> Result<LookbackTable> {
    let first = records.first().ok_or_else(|| Error::Data("look-back needs at least one record".into()))?;
    if !(fs > 0.0) {
        return Err(Error::Config(format!("sampling rate {fs} must be positive")));
    }
    if records.iter().any(|r| r.layers != first.layers || r.heads != first.heads) {
        return Err(Error::Contract("records come from different architectures".into()));
    }
    let rows = (0..first.layers)
        .map(|l| {
            let centers: Vec<f64> = records
                .iter()
                .flat_map(|r| {
                    (0..r.heads).map(move |h| {
                        let row: Vec<f64> = r.final_row(l, h).iter().map(|w| w.as_f64()).collect();
                        lookback_center(&row, fs)
                    })
                })
                .collect();
            let (mean_s, sd_s) = mean_sd(&centers);
            LookbackRow { layer: l + 1, mean_s, sd_s, n: centers.len() }
        })
        .collect();
    Ok(LookbackTable { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeClass {
    Rising,
    Falling,
}

impl std::fmt::Display for SlopeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SlopeClass::Rising => "rising",
            SlopeClass::Falling => "falling",
        })
    }
}

/// Slope class at interior position `i`, or `None` at extrema and flats.
pub fn slope_class(x: &[f64], i: usize) -> Option<SlopeClass> {
    if i == 0 || i + 1 >= x.len() {
        return None;
    }
    let (a, b, c) = (x[i - 1], x[i], x[i + 1]);
    if c > a && a <= b && b <= c {
        Some(SlopeClass::Rising)
    } else if c < a && a >= b && b >= c {
        Some(SlopeClass::Falling)
    } else {
        None
    }
}

/// Positions whose token is within `tolerance` of the token at `reference`
/// and that sit on a rising or falling flank.
pub fn select_slope_tokens(window: &TokenWindow, reference: usize, tolerance: usize) -> Result<Vec<(usize, SlopeClass)>> {
    let n = window.tokens.len();
    if n < 3 {
        return Err(Error::Data(format!("slope selection needs at least 3 tokens, got {n}")));
    }
    if reference >= n {
        return Err(Error::Contract(format!("reference {reference} outside window of {n}")));
    }
    let x = detokenize(window);
    let value = window.tokens[reference];
    Ok((1..n - 1)
        .filter(|&i| window.tokens[i].abs_diff(value) <= tolerance)
        .filter_map(|i| slope_class(&x, i).map(|c| (i, c)))
        .collect())
}

/// First rising-slope position whose token is closest to `target`.
pub fn rising_reference(window: &TokenWindow, target: usize) -> Option<usize> {
    let x = detokenize(window);
    (1..window.tokens.len().saturating_sub(1))
        .filter(|&i| slope_class(&x, i) == Some(SlopeClass::Rising))
        .min_by_key(|&i| window.tokens[i].abs_diff(target))
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Data("cosine similarity of a zero-norm activation is undefined".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityEntry {
    pub position: usize,
    pub class: SlopeClass,
    /// Stage 0 is the embedded input; stage k is the output of block k.
    pub similarity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTrace {
    pub reference: usize,
    pub entries: Vec<SimilarityEntry>,
}

impl SimilarityTrace {
    pub fn stages(&self) -> usize {
        self.entries.first().map_or(0, |e| e.similarity.len())
    }

    /// Mean similarity of a class at one stage, excluding the reference.
    pub fn class_mean(&self, class: SlopeClass, stage: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .entries
            .iter()
            .filter(|e| e.class == class && e.position != self.reference)
            .map(|e| e.similarity[stage])
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,class,is_reference");
        for k in 0..self.stages() {
            s.push_str(&format!(",stage_{k}"));
        }
        s.push('\n');
        for e in &self.entries {
            s.push_str(&format!("{},{},{}", e.position, e.class, u8::from(e.position == self.reference)));
            for v in &e.similarity {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Cosine similarity of each selected position's residual-stream vector to
/// the reference position's, at the input and after every block. The
/// reference must be among the selected positions, classed as rising.
pub fn similarity_trace<T: Scalar>(
    model: &Model<T>,
    tokens: &[usize],
    selected: &[(usize, SlopeClass)],
    reference: usize,
) -> Result<SimilarityTrace> {
    if let Some(&(p, _)) = selected.iter().find(|(p, _)| *p >= tokens.len()) {
        return Err(Error::Contract(format!("position {p} outside context of {}", tokens.len())));
    }
    if !selected.contains(&(reference, SlopeClass::Rising)) {
        return Err(Error::Contract(format!("reference {reference} is not a selected rising-slope position")));
    }
    let stream = model.residual_stream(tokens)?;
    let rows: Vec<Vec<Vec<f64>>> =
        stream.iter().map(|a| (0..tokens.len()).map(|i| a.row(i).iter().map(|v| v.as_f64()).collect()).collect()).collect();
    let mut entries = Vec::with_capacity(selected.len());
    for &(position, class) in selected {
        let similarity = rows
            .iter()
            .map(|stage| if position == reference { Ok(1.0) } else { cosine(&stage[position], &stage[reference]) })
            .collect::<Result<_>>()?;
        entries.push(SimilarityEntry { position, class, similarity });
    }
    Ok(SimilarityTrace { reference, entries })
}

/// Local maxima of at least `rel_height * max`, accepted greedily from the
/// tallest down (lower index first on ties) while keeping every pair at
/// least `min_distance` apart. Plateaus count once at their leftmost index;
/// the endpoints are never peaks. Returned in increasing order.
pub fn find_peaks(x: &[f64], min_distance: usize, rel_height: f64) -> Vec<usize> {
    let n = x.len();
    if n < 3 {
        return Vec::new();
    }
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let threshold = rel_height * max;
    let mut candidates = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < n && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < n && x[j + 1] < x[i] && x[i] >= threshold {
                candidates.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    candidates.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_distance) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

pub fn find_attention_peaks(map: &[f64]) -> Vec<usize> {
    find_peaks(map, PEAK_MIN_DISTANCE, PEAK_REL_HEIGHT)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttentionMap {
    pub head: usize,
    pub weights: Vec<f64>,
    pub counts: Vec<usize>,
    pub peaks: Vec<usize>,
}

/// Number of shifted windows covering position `p` of an `n`-token window.
pub fn shift_and_add_count(p: usize, n: usize) -> usize {
    (p + 1).min(n)
}

/// Shift-and-add of final-row attention over `n` windows starting at
/// `0..n`. Window `s` places its weight for key `j` at position `s + j` of
/// the first window, when that falls inside it; sums are divided by the
/// number of contributions.
pub fn shift_and_add(rows: &[Vec<f64>], n: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Contract(format!("shift-and-add needs {n} rows of {n} weights")));
    }
    let mut sum = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (s, row) in rows.iter().enumerate() {
        for (j, &w) in row.iter().enumerate().take(n - s) {
            sum[s + j] += w;
            counts[s + j] += 1;
        }
    }
    let weights = sum.iter().zip(&counts).map(|(v, &c)| v / c as f64).collect();
    Ok((weights, counts))
}

/// Final-block head maps by shift-and-add over a context of at least
/// `2n - 1` tokens.
pub fn shift_and_add_head_maps<T: Scalar>(model: &Model<T>, tokens: &[usize], n: usize) -> Result<Vec<HeadAttentionMap>> {
    if n == 0 || tokens.len() < 2 * n - 1 {
        return Err(Error::Data(format!("shift-and-add over {n} tokens needs {} tokens, got {}", 2 * n - 1, tokens.len())));
    }
    let heads = model.config.n_heads;
    let last = model.config.n_blocks - 1;
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::with_capacity(n); heads];
    for s in 0..n {
        let (_, record) = model.forward(&tokens[s..s + n], Mode::Eval, &mut Rng::new(0))?;
        for (h, r) in rows.iter_mut().enumerate() {
            r.push(record.final_row(last, h).iter().map(|w| w.as_f64()).collect());
        }
    }
    rows.iter()
        .enumerate()
        .map(|(head, r)| {
            let (weights, counts) = shift_and_add(r, n)?;
            let peaks = find_attention_peaks(&weights);
            Ok(HeadAttentionMap { head, weights, counts, peaks })
        })
        .collect()
}

pub fn head_maps_csv(maps: &[HeadAttentionMap]) -> String {
    let mut s = String::from("head,position,weight,count,is_peak\n");
    for m in maps {
        for (p, (w, c)) in m.weights.iter().zip(&m.counts).enumerate() {
            s.push_str(&format!("{},{p},{w},{c},{}\n", m.head, u8::from(m.peaks.contains(&p))));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDelta {
    pub delta: Vec<f64>,
}

impl AttentionDelta {
    pub fn from_records<T: Scalar>(base: &AttentionRecord<T>, tuned: &AttentionRecord<T>) -> Result<Self> {
        if base.layers != tuned.layers || base.heads != tuned.heads || base.len != tuned.len {
            return Err(Error::Contract("attention records differ in shape".into()));
        }
        let a = aggregate_final_row(base, base.layers)?;
        let b = aggregate_final_row(tuned, tuned.layers)?;
        Ok(Self { delta: b.iter().zip(&a).map(|(t, s)| t - s).collect() })
    }

    /// Positive part of the delta.
    pub fn increases(&self) -> Vec<f64> {
        self.delta.iter().map(|d| d.max(0.0)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("position,delta\n");
        for (i, d) in self.delta.iter().enumerate() {
            s.push_str(&format!("{i},{d}\n"));
        }
        s
    }
}

/// Final-layer aggregate of the fine-tuned model minus that of the base.
pub fn attention_delta<T: Scalar>(base: &Model<T>, tuned: &Model<T>, tokens: &[usize]) -> Result<AttentionDelta> {
    let (a, b) = (&base.config, &tuned.config);
    if a.n_blocks != b.n_blocks || a.n_heads != b.n_heads || a.d_model != b.d_model {
        return Err(Error::Contract("base and fine-tuned models differ in architecture".into()));
    }
    let (_, rb) = base.forward(tokens, Mode::Eval, &mut Rng::new(0))?;
    let (_, rt) = tuned.forward(tokens, Mode::Eval, &mut Rng::new(0))?;
    AttentionDelta::from_records(&rb, &rt)
}

pub fn weights_csv(weights: &[f64]) -> String {
    let mut s = String::from("position,weight\n");
    for (i, w) in weights.iter().enumerate() {
        s.push_str(&format!("{i},{w}\n"));
    }
    s
}

/// Signal in black with translucent red bars proportional to `weights`.
pub fn overlay_svg(title: &str, signal: &[f64], weights: &[f64]) -> String {
    Figure::new(title)
        .bars(weights.iter().enumerate().map(|(i, &w)| (i as f64, w)).collect(), RED)
        .line(signal.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(), BLACK)
        .to_svg()
}

/// Writes `<stem>.csv` and `<stem>.svg` for a weight vector over a window.
pub fn write_overlay(dir: &Path, stem: &str, title: &str, signal: &[f64], weights: &[f64]) -> Result<()> {
    write_file(&dir.join(format!("{stem}.csv")), weights_csv(weights).as_bytes())?;
    write_file(&dir.join(format!("{stem}.svg")), overlay_svg(title, signal, weights).as_bytes())
}
