use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::Modality;

/// Largest token value; the vocabulary is `0..=TOKEN_MAX`.
pub const TOKEN_MAX: usize = 100;
pub const VOCAB_SIZE: usize = TOKEN_MAX + 1;
/// Token emitted for every sample of a flat window.
pub const FLAT_TOKEN: usize = 50;
/// Longest window a single context can hold.
pub const MAX_WINDOW: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWindow {
    pub tokens: Vec<usize>,
    pub scale_min: f64,
    pub scale_max: f64,
    pub fs: f64,
    pub modality: Modality,
}

/// Maps `x` onto `[0, 100]` with the window min at 0 and max at 100, then
/// rounds half away from zero.
pub fn quantize(samples: &[f64]) -> Result<(Vec<usize>, f64, f64)> {
    if let Some(i) = samples.iter().position(|x| !x.is_finite()) {
        return Err(Error::Data(format!("sample {i} is not finite")));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if samples.is_empty() {
        return Ok((Vec::new(), 0.0, 0.0));
    }
    if hi == lo {
        return Ok((vec![FLAT_TOKEN; samples.len()], lo, hi));
    }
    let span = hi - lo;
    let tokens = samples
        .iter()
        .map(|&x| {
            let t = ((x - lo) / span * TOKEN_MAX as f64).round();
            t.clamp(0.0, TOKEN_MAX as f64) as usize
        })
        .collect();
    Ok((tokens, lo, hi))
}

/// Tokenizes one context window (at most 500 samples).
pub fn tokenize_window(samples: &[f64], fs: f64, modality: Modality) -> Result<TokenWindow> {
    if samples.len() > MAX_WINDOW {
        return Err(Error::ContextOverflow { len: samples.len(), max: MAX_WINDOW });
    }
    let (tokens, scale_min, scale_max) = quantize(samples)?;
    Ok(TokenWindow { tokens, scale_min, scale_max, fs, modality })
}

/// Maps tokens back onto the window's original scale.
pub fn detokenize(window: &TokenWindow) -> Vec<f64> {
    detokenize_tokens(&window.tokens, window.scale_min, window.scale_max)
}

pub fn detokenize_tokens(tokens: &[usize], scale_min: f64, scale_max: f64) -> Vec<f64> {
    let span = scale_max - scale_min;
    tokens.iter().map(|&t| scale_min + t as f64 / TOKEN_MAX as f64 * span).collect()
}

/// Number of windows of `len` samples with stride `shift` in `total` samples.
pub fn window_count(total: usize, len: usize, shift: usize) -> usize {
    if total < len || shift == 0 {
        0
    } else {
        (total - len) / shift + 1
    }
}
