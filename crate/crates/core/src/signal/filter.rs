use num_complex::Complex64;

use crate::error::{Error, Result};

use super::SignalRecord;

/// Order of the Butterworth low-pass prototype; the band-pass has twice as
/// many poles.
pub const BUTTERWORTH_ORDER: usize = 4;

/// One biquad: `b0 + b1 z^-1 + b2 z^-2` over `1 + a1 z^-1 + a2 z^-2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        (self.b[0] + z1 * self.b[1] + z2 * self.b[2]) / (self.a[0] + z1 * self.a[1] + z2 * self.a[2])
    }
}

/// Cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos(pub Vec<Biquad>);

impl Sos {
    /// Complex response at normalized angular frequency `w` (radians/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        self.0.iter().map(|s| s.response(w)).product()
    }

    pub fn magnitude_at(&self, freq_hz: f64, fs: f64) -> f64 {
        self.response(2.0 * std::f64::consts::PI * freq_hz / fs).norm()
    }

    /// Steady-state section states for a unit step input (transposed direct
    /// form II), so filtering a constant starts without a transient.
    pub fn step_initial_state(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.0
            .iter()
            .map(|s| {
                let gain = (s.b[0] + s.b[1] + s.b[2]) / (1.0 + s.a[1] + s.a[2]);
                let z = [scale * (gain - s.b[0]), scale * (s.b[2] - s.a[2] * gain)];
                scale *= gain;
                z
            })
            .collect()
    }

    /// Single forward pass from the given section states.
    pub fn filter_with_state(&self, x: &[f64], state: &mut [[f64; 2]]) -> Vec<f64> {
        let mut y = x.to_vec();
        for (s, z) in self.0.iter().zip(state.iter_mut()) {
            for v in y.iter_mut() {
                let xi = *v;
                let yi = s.b[0] * xi + z[0];
                z[0] = s.b[1] * xi - s.a[1] * yi + z[1];
                z[1] = s.b[2] * xi - s.a[2] * yi;
                *v = yi;
            }
        }
        y
    }

    /// Edge padding length used by [`Sos::filtfilt`].
    pub fn pad_len(&self) -> usize {
        3 * (2 * self.0.len() + 1)
    }

    /// Zero-phase forward-backward filtering with odd edge extension and
    /// step-response initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.pad_len();
        if x.len() <= pad {
            return Err(Error::Data(format!("zero-phase filtering needs more than {pad} samples, got {}", x.len())));
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|k| 2.0 * x[0] - x[k]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|k| 2.0 * x[n - 1] - x[n - 1 - k]));

        let zi = self.step_initial_state();
        let mut state: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * ext[0], z[1] * ext[0]]).collect();
        let mut y = self.filter_with_state(&ext, &mut state);
        y.reverse();
        let mut state: Vec<[f64; 2]> = zi.iter().map(|z| [z[0] * y[0], z[1] * y[0]]).collect();
        let mut y = self.filter_with_state(&y, &mut state);
        y.reverse();
        Ok(y[pad..pad + n].to_vec())
    }
}

/// Butterworth band-pass: analog prototype, low-pass to band-pass transform
/// at pre-warped edges, then the bilinear transform. Gain is normalized to 1
/// at the geometric centre of the band.
pub fn butterworth_bandpass(order: usize, low: f64, high: f64, fs: f64) -> Result<Sos> {
    if !(order > 0 && low > 0.0 && low < high && high < fs / 2.0) {
        return Err(Error::Config(format!(
            "band-pass requires 0 < low < high < fs/2, got low {low} high {high} fs {fs}"
        )));
    }
    use std::f64::consts::PI;
    let k = 2.0 * fs;
    let w1 = k * (PI * low / fs).tan();
    let w2 = k * (PI * high / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    let mut poles = Vec::with_capacity(2 * order);
    for i in 0..order {
        let theta = PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta);
        let half = p * (bw / 2.0);
        let root = (half * half - w0sq).sqrt();
        for s in [half + root, half - root] {
            poles.push((k + s) / (k - s));
        }
    }
    // keep one of each conjugate pair (upper half plane)
    let mut upper: Vec<Complex64> = poles.into_iter().filter(|p| p.im > 0.0).collect();
    if upper.len() != order {
        return Err(Error::NonFinite("band-pass pole pairing".into()));
    }
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));

    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad { b: [1.0, 0.0, -1.0], a: [1.0, -2.0 * p.re, p.norm_sqr()] })
        .collect();
    let centre = 2.0 * (w0sq.sqrt() / k).atan();
    let g = Sos(sections.clone()).response(centre).norm();
    for v in sections[0].b.iter_mut() {
        *v /= g;
    }
    Ok(Sos(sections))
}

/// Zero-phase Butterworth band-pass of a record.
pub fn bandpass(record: &SignalRecord, low: f64, high: f64) -> Result<SignalRecord> {
    let sos = butterworth_bandpass(BUTTERWORTH_ORDER, low, high, record.fs)?;
    let mut out = record.clone();
    out.samples = sos.filtfilt(&record.samples)?;
    out.history.push(format!("bandpass butterworth order {BUTTERWORTH_ORDER} {low}-{high} Hz zero-phase"));
    Ok(out)
}
