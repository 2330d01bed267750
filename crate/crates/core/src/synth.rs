//! Seeded PPG-like and ECG-like waveform generators with respiratory
//! modulation and an atrial-fibrillation rhythm.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::signal::{Label, Modality, SignalRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rhythm {
    Regular,
    Af,
}

/// One Gaussian deflection relative to the beat fiducial (R peak for ECG).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    /// Standard deviation in seconds.
    pub width: f64,
    /// Offset from the fiducial in seconds.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpgShape {
    /// Systolic upstroke and decay widths (s); unequal widths skew the pulse.
    pub rise_width: f64,
    pub fall_width: f64,
    /// Dicrotic bump relative to the systolic amplitude.
    pub notch_depth: f64,
    /// Dicrotic bump delay after the systolic peak (s).
    pub notch_delay: f64,
    pub notch_width: f64,
}

impl Default for PpgShape {
    fn default() -> Self {
        PpgShape { rise_width: 0.07, fall_width: 0.14, notch_depth: 0.4, notch_delay: 0.32, notch_width: 0.09 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EcgShape {
    pub p: Wave,
    pub q: Wave,
    pub r: Wave,
    pub s: Wave,
    pub t: Wave,
}

impl Default for EcgShape {
    fn default() -> Self {
        EcgShape {
            p: Wave { amplitude: 0.15, width: 0.025, offset: -0.2 },
            q: Wave { amplitude: -0.1, width: 0.01, offset: -0.03 },
            r: Wave { amplitude: 1.0, width: 0.012, offset: 0.0 },
            s: Wave { amplitude: -0.25, width: 0.012, offset: 0.03 },
            t: Wave { amplitude: 0.3, width: 0.05, offset: 0.25 },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub modality: Modality,
    pub fs: f64,
    pub duration_s: f64,
    pub heart_rate_bpm: f64,
    /// Beat-to-beat jitter of the RR interval (coefficient of variation) in
    /// regular rhythm.
    pub rr_jitter: f64,
    pub respiratory_rate_bpm: f64,
    /// Respiratory amplitude modulation depth, in [0, 1).
    pub amplitude_modulation: f64,
    /// Respiratory modulation of the beat period (fraction of the RR interval).
    pub rate_modulation: f64,
    /// Log-normal sigma of RR intervals in AF (0.246 gives CV close to 0.25).
    pub af_sigma: f64,
    pub ppg: PpgShape,
    pub ecg: EcgShape,
    pub rhythm: Rhythm,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            modality: Modality::Ppg,
            fs: 50.0,
            duration_s: 60.0,
            heart_rate_bpm: 72.0,
            rr_jitter: 0.005,
            respiratory_rate_bpm: 15.0,
            amplitude_modulation: 0.15,
            rate_modulation: 0.02,
            af_sigma: 0.246,
            ppg: PpgShape::default(),
            ecg: EcgShape::default(),
            rhythm: Rhythm::Regular,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn ppg(fs: f64, duration_s: f64, seed: u64) -> Self {
        SynthConfig { modality: Modality::Ppg, fs, duration_s, seed, ..Self::default() }
    }

    pub fn ecg(fs: f64, duration_s: f64, seed: u64) -> Self {
        SynthConfig { modality: Modality::Ecg, fs, duration_s, seed, ..Self::default() }
    }

    fn narrowest_width(&self) -> f64 {
        match self.modality {
            Modality::Ppg => self.ppg.rise_width.min(self.ppg.fall_width).min(self.ppg.notch_width),
            Modality::Ecg => [self.ecg.p, self.ecg.q, self.ecg.r, self.ecg.s, self.ecg.t]
                .iter()
                .map(|w| w.width)
                .fold(f64::INFINITY, f64::min),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fs", self.fs),
            ("duration_s", self.duration_s),
            ("heart_rate_bpm", self.heart_rate_bpm),
            ("respiratory_rate_bpm", self.respiratory_rate_bpm),
            ("af_sigma", self.af_sigma),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.amplitude_modulation) {
            return Err(Error::Config(format!("amplitude_modulation {} outside [0, 1)", self.amplitude_modulation)));
        }
        if !(0.0..0.5).contains(&self.rate_modulation) || !(0.0..0.5).contains(&self.rr_jitter) {
            return Err(Error::Config("rate_modulation and rr_jitter must lie in [0, 0.5)".into()));
        }
        let w = self.narrowest_width();
        if !(w > 0.0) {
            return Err(Error::Config("component widths must be positive".into()));
        }
        // a Gaussian of width w carries negligible energy beyond 3 / (2 pi w) Hz
        let highest = 3.0 / (2.0 * PI * w);
        if self.fs <= 2.0 * highest {
            return Err(Error::Config(format!(
                "fs {} Hz too low for components up to {highest:.1} Hz (narrowest width {w} s)",
                self.fs
            )));
        }
        Ok(())
    }
}

/// Generated record together with its ground truth.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub record: SignalRecord,
    /// Fiducial time of every beat in seconds (systolic peak or R peak).
    pub beat_times: Vec<f64>,
    /// Sample index of each fiducial inside the record.
    pub peak_samples: Vec<usize>,
}

impl SynthOutput {
    /// RR intervals in seconds.
    pub fn rr_intervals(&self) -> Vec<f64> {
        self.beat_times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

fn gaussian(t: f64, width: f64) -> f64 {
    (-0.5 * (t / width).powi(2)).exp()
}

/// Beat fiducial times covering `[0, duration]` plus one beat either side so
/// tails of neighbouring pulses are present at the edges.
fn beat_times(config: &SynthConfig, rng: &mut Rng) -> Vec<f64> {
    let mean_rr = 60.0 / config.heart_rate_bpm;
    let resp = 2.0 * PI * config.respiratory_rate_bpm / 60.0;
    let resp_phase = rng.uniform_in(0.0, 2.0 * PI);
    let mut t = -mean_rr * rng.uniform_in(1.0, 2.0);
    let mut times = Vec::new();
    while t < config.duration_s + mean_rr {
        times.push(t);
        let base = mean_rr * (1.0 + config.rate_modulation * (resp * t + resp_phase).sin());
        let factor = match config.rhythm {
            Rhythm::Regular => 1.0 + config.rr_jitter * rng.normal(),
            Rhythm::Af => {
                let s = config.af_sigma;
                rng.log_normal(-0.5 * s * s, s)
            }
        };
        t += (base * factor).max(0.25 * mean_rr);
    }
    times
}

pub fn synth_ppg(config: &SynthConfig) -> Result<SynthOutput> {
    if config.modality != Modality::Ppg {
        return Err(Error::Config("synth_ppg called with a non-PPG config".into()));
    }
    synth(config)
}

pub fn synth_ecg(config: &SynthConfig) -> Result<SynthOutput> {
    if config.modality != Modality::Ecg {
        return Err(Error::Config("synth_ecg called with a non-ECG config".into()));
    }
    synth(config)
}

fn synth(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    let times = beat_times(config, &mut rng);
    let resp = 2.0 * PI * config.respiratory_rate_bpm / 60.0;
    let amp_phase = rng.uniform_in(0.0, 2.0 * PI);
    let n = (config.duration_s * config.fs).round() as usize;
    let mut x = vec![0.0; n];
    let mean_rr = 60.0 / config.heart_rate_bpm;

    for (k, &tb) in times.iter().enumerate() {
        let mut amp = 1.0 + config.amplitude_modulation * (resp * tb + amp_phase).sin();
        if config.modality == Modality::Ppg && config.rhythm == Rhythm::Af && k > 0 {
            // shorter filling time gives a weaker pulse
            let rr = tb - times[k - 1];
            amp *= (rr / mean_rr).sqrt().clamp(0.6, 1.2);
        }
        let components: Vec<(f64, f64, f64, f64)> = match config.modality {
            // (amplitude, rise width, fall width, offset)
            Modality::Ppg => {
                let p = &config.ppg;
                vec![
                    (amp, p.rise_width, p.fall_width, 0.0),
                    (amp * p.notch_depth, p.notch_width, p.notch_width, p.notch_delay),
                ]
            }
            Modality::Ecg => {
                let e = &config.ecg;
                let mut waves = vec![e.q, e.r, e.s, e.t];
                if config.rhythm == Rhythm::Regular {
                    waves.push(e.p);
                }
                waves.into_iter().map(|w| (amp * w.amplitude, w.width, w.width, w.offset)).collect()
            }
        };
        for (a, rise, fall, offset) in components {
            let centre = tb + offset;
            let reach = 5.0 * rise.max(fall);
            let lo = (((centre - reach) * config.fs).ceil().max(0.0)) as usize;
            let hi = (((centre + reach) * config.fs).floor() + 1.0).clamp(0.0, n as f64) as usize;
            for (i, v) in x.iter_mut().enumerate().take(hi).skip(lo) {
                let dt = i as f64 / config.fs - centre;
                *v += a * gaussian(dt, if dt < 0.0 { rise } else { fall });
            }
        }
    }

    let inside: Vec<f64> = times.iter().copied().filter(|&t| t >= 0.0 && t < config.duration_s).collect();
    let peak_samples = inside
        .iter()
        .map(|&t| ((t * config.fs).round() as usize).min(n.saturating_sub(1)))
        .collect();
    let prefix = match config.modality {
        Modality::Ppg => "ppg",
        Modality::Ecg => "ecg",
    };
    let mut record = SignalRecord::new(x, config.fs, config.modality, format!("{prefix}-seed{}", config.seed))?;
    record.label = Some(match config.rhythm {
        Rhythm::Regular => Label::Healthy,
        Rhythm::Af => Label::Af,
    });
    record.history.push(format!("synthetic {prefix} {:?} rhythm seed {}", config.rhythm, config.seed));
    Ok(SynthOutput { record, beat_times: inside, peak_samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortRhythm {
    Regular,
    Af,
    /// Alternating regular and AF subjects, starting with regular.
    Mixed,
}

impl std::str::FromStr for CohortRhythm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regular" => Ok(CohortRhythm::Regular),
            "af" => Ok(CohortRhythm::Af),
            "mixed" => Ok(CohortRhythm::Mixed),
            other => Err(Error::Config(format!("unknown rhythm {other:?} (expected regular, af or mixed)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub modality: Modality,
    pub subjects: usize,
    pub rhythm: CohortRhythm,
    pub fs: f64,
    pub duration_s: f64,
    /// Subject heart rates are drawn uniformly from this range (bpm).
    pub heart_rate_range: (f64, f64),
    pub respiratory_rate_range: (f64, f64),
    pub seed: u64,
}

impl Default for CohortConfig {
    fn default() -> Self {
        CohortConfig {
            modality: Modality::Ppg,
            subjects: 10,
            rhythm: CohortRhythm::Regular,
            fs: 50.0,
            duration_s: 300.0,
            heart_rate_range: (60.0, 90.0),
            respiratory_rate_range: (12.0, 18.0),
            seed: 0,
        }
    }
}

/// Per-subject generator settings for a cohort; subject `i` draws its heart
/// and respiratory rates from an independent stream of the cohort seed.
pub fn cohort_configs(cohort: &CohortConfig) -> Vec<(String, SynthConfig)> {
    (0..cohort.subjects)
        .map(|i| {
            let mut rng = Rng::derive(cohort.seed, i as u64 + 1);
            let rhythm = match cohort.rhythm {
                CohortRhythm::Regular => Rhythm::Regular,
                CohortRhythm::Af => Rhythm::Af,
                CohortRhythm::Mixed if i % 2 == 1 => Rhythm::Af,
                CohortRhythm::Mixed => Rhythm::Regular,
            };
            let (hlo, hhi) = cohort.heart_rate_range;
            let (rlo, rhi) = cohort.respiratory_rate_range;
            let config = SynthConfig {
                modality: cohort.modality,
                fs: cohort.fs,
                duration_s: cohort.duration_s,
                heart_rate_bpm: rng.uniform_in(hlo, hhi),
                respiratory_rate_bpm: rng.uniform_in(rlo, rhi),
                rhythm,
                seed: rng.next_u64(),
                ..SynthConfig::default()
            };
            (format!("{}-s{i:02}", cohort.modality), config)
        })
        .collect()
}

/// Builds `subjects` labeled records with distinct seeds and subject ids.
pub fn synth_cohort(cohort: &CohortConfig) -> Result<Vec<SynthOutput>> {
    if cohort.subjects == 0 {
        return Err(Error::Config("cohort needs at least one subject".into()));
    }
    cohort_configs(cohort)
        .into_iter()
        .map(|(id, config)| {
            let mut out = synth(&config)?;
            out.record.subject_id = id;
            Ok(out)
        })
        .collect()
}
