use crate::error::{Error, Result};

use super::SignalRecord;

/// Largest up/down factor handled by the polyphase path.
const MAX_POLYPHASE_FACTOR: u64 = 1000;
/// Kaiser window shape parameter for the anti-aliasing filter.
const KAISER_BETA: f64 = 5.0;
/// Filter half-length in units of the larger rate factor.
const HALF_LEN_FACTOR: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMethod {
    Identity,
    Polyphase { up: u64, down: u64 },
    Linear,
}

impl std::fmt::Display for ResampleMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ResampleMethod::Identity => write!(f, "identity"),
            ResampleMethod::Polyphase { up, down } => write!(f, "polyphase-kaiser(up={up},down={down},beta={KAISER_BETA})"),
            ResampleMethod::Linear => write!(f, "linear"),
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Expresses `to / from` as a reduced ratio of small integers when both
/// rates are multiples of 1 mHz.
fn rational_ratio(from: f64, to: f64) -> Option<(u64, u64)> {
    let as_millis = |x: f64| {
        let m = (x * 1000.0).round();
        ((x * 1000.0 - m).abs() < 1e-6 && m >= 1.0).then_some(m as u64)
    };
    let (a, b) = (as_millis(from)?, as_millis(to)?);
    let g = gcd(a, b);
    let (up, down) = (b / g, a / g);
    (up.max(down) <= MAX_POLYPHASE_FACTOR).then_some((up, down))
}

pub fn choose_method(from: f64, to: f64) -> ResampleMethod {
    if from == to {
        return ResampleMethod::Identity;
    }
    match rational_ratio(from, to) {
        Some((1, 1)) => ResampleMethod::Identity,
        Some((up, down)) => ResampleMethod::Polyphase { up, down },
        None => ResampleMethod::Linear,
    }
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Low-pass FIR at the upsampled rate with cutoff at the lower Nyquist.
/// Each polyphase branch is normalized to unit DC gain, which also restores
/// the amplitude lost to zero stuffing.
fn design_filter(up: u64, down: u64) -> Vec<f64> {
    let factor = up.max(down) as usize;
    let half = HALF_LEN_FACTOR * factor;
    let len = 2 * half + 1;
    let cutoff = 1.0 / factor as f64; // fraction of the upsampled Nyquist
    let denom = bessel_i0(KAISER_BETA);
    let mut h: Vec<f64> = (0..len)
        .map(|i| {
            let t = i as f64 - half as f64;
            let r = t / half as f64;
            let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / denom;
            cutoff * sinc(cutoff * t) * w
        })
        .collect();
    let up = up as usize;
    for phase in 0..up {
        let s: f64 = h.iter().skip(phase).step_by(up).sum();
        h.iter_mut().skip(phase).step_by(up).for_each(|x| *x /= s);
    }
    h
}

fn output_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * to / from).round() as usize).max(1)
}

fn polyphase(x: &[f64], up: u64, down: u64, out_len: usize) -> Vec<f64> {
    let h = design_filter(up, down);
    let half = (h.len() - 1) / 2;
    let (up, down) = (up as usize, down as usize);
    // odd reflection about the end samples keeps constants and ramps intact
    let pad = half / up + 1;
    let last = x.len() - 1;
    let mut xp = Vec::with_capacity(x.len() + 2 * pad);
    xp.extend((1..=pad).rev().map(|k| 2.0 * x[0] - x[k.min(last)]));
    xp.extend_from_slice(x);
    xp.extend((1..=pad).map(|k| 2.0 * x[last] - x[last - k.min(last)]));
    let x = &xp;
    let n = x.len();
    (0..out_len)
        .map(|m| {
            // position on the upsampled grid, centred on the filter
            let centre = m * down + half + pad * up;
            // input j contributes at upsampled index j*up; need 0 <= centre - j*up < len
            let j_hi = (centre / up).min(n - 1);
            let j_lo = (centre + up).saturating_sub(h.len()).div_ceil(up);
            let mut acc = 0.0;
            for j in j_lo..=j_hi {
                acc += x[j] * h[centre - j * up];
            }
            acc
        })
        .collect()
}

fn linear(x: &[f64], from: f64, to: f64, out_len: usize) -> Vec<f64> {
    let last = x.len() - 1;
    (0..out_len)
        .map(|m| {
            let t = m as f64 * from / to;
            let i = (t.floor() as usize).min(last);
            if i >= last {
                x[last]
            } else {
                let f = t - i as f64;
                x[i] * (1.0 - f) + x[i + 1] * f
            }
        })
        .collect()
}

/// Resamples to `target_fs`. Rational ratios use a Kaiser-windowed sinc
/// polyphase filter; other ratios fall back to linear interpolation. The
/// method is appended to the record history.
pub fn resample(record: &SignalRecord, target_fs: f64) -> Result<SignalRecord> {
    if !(target_fs.is_finite() && target_fs > 0.0) {
        return Err(Error::Config(format!("target sample rate {target_fs} must be positive")));
    }
    if record.samples.len() < 2 {
        return Err(Error::Data(format!(
            "record {}: resampling needs at least 2 samples, got {}",
            record.subject_id,
            record.samples.len()
        )));
    }
    let method = choose_method(record.fs, target_fs);
    let samples = match method {
        ResampleMethod::Identity => record.samples.clone(),
        ResampleMethod::Polyphase { up, down } => {
            polyphase(&record.samples, up, down, output_len(record.samples.len(), record.fs, target_fs))
        }
        ResampleMethod::Linear => {
            linear(&record.samples, record.fs, target_fs, output_len(record.samples.len(), record.fs, target_fs))
        }
    };
    let mut out = record.clone();
    out.samples = samples;
    out.fs = target_fs;
    out.history.push(format!("resample {} Hz -> {} Hz: {method}", record.fs, target_fs));
    Ok(out)
}
