use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Ppg,
    Ecg,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ppg" => Ok(Modality::Ppg),
            "ecg" => Ok(Modality::Ecg),
            other => Err(Error::Config(format!("unknown modality {other:?} (expected ppg or ecg)"))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Ppg => "ppg",
            Modality::Ecg => "ecg",
        })
    }
}

/// Rhythm label: healthy (0) or atrial fibrillation (1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Healthy,
    Af,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::Healthy => 0.0,
            Label::Af => 1.0,
        }
    }
}

/// Uniformly sampled single-channel waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalRecord {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub modality: Modality,
    pub subject_id: String,
    pub label: Option<Label>,
    /// Processing steps applied so far (resampling method, filters).
    pub history: Vec<String>,
}

impl SignalRecord {
    pub fn new(samples: Vec<f64>, fs: f64, modality: Modality, subject_id: impl Into<String>) -> Result<Self> {
        let record = SignalRecord { samples, fs, modality, subject_id: subject_id.into(), label: None, history: Vec::new() };
        record.check()?;
        Ok(record)
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fs.is_finite() && self.fs > 0.0) {
            return Err(Error::Data(format!("record {}: sample rate {} must be positive", self.subject_id, self.fs)));
        }
        if let Some(i) = self.samples.iter().position(|x| !x.is_finite()) {
            return Err(Error::Data(format!("record {}: sample {i} is not finite", self.subject_id)));
        }
        Ok(())
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    fn sidecar(&self, format: SampleFormat) -> Sidecar {
        Sidecar {
            fs: self.fs,
            modality: self.modality,
            subject_id: self.subject_id.clone(),
            label: self.label,
            format: Some(format),
            history: self.history.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    /// One decimal sample per line.
    Csv,
    /// Little-endian 32-bit floats, no header.
    F32le,
}

/// JSON metadata stored next to every sample file (`<stem>.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub fs: f64,
    pub modality: Modality,
    pub subject_id: String,
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub format: Option<SampleFormat>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub history: Vec<String>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn format_from_extension(path: &Path) -> SampleFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("f32" | "bin" | "raw") => SampleFormat::F32le,
        _ => SampleFormat::Csv,
    }
}

fn read_samples(path: &Path, format: SampleFormat) -> Result<Vec<f64>> {
    match format {
        SampleFormat::Csv => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut out = Vec::new();
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let field = line.split(',').next().unwrap_or("").trim();
                match field.parse::<f64>() {
                    Ok(v) => out.push(v),
                    // tolerate a single header line
                    Err(_) if out.is_empty() && n == 0 => {}
                    Err(_) => {
                        return Err(Error::Data(format!("{}:{}: cannot parse {field:?} as a sample", path.display(), n + 1)))
                    }
                }
            }
            Ok(out)
        }
        SampleFormat::F32le => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            if bytes.len() % 4 != 0 {
                return Err(Error::Data(format!("{}: length {} is not a multiple of 4", path.display(), bytes.len())));
            }
            Ok(bytes.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]]))).collect())
        }
    }
}

/// Reads a sample file together with its JSON sidecar.
pub fn read_record(path: &Path) -> Result<SignalRecord> {
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(&side_path, e))?;
    let format = side.format.unwrap_or_else(|| format_from_extension(path));
    let samples = read_samples(path, format)?;
    let record = SignalRecord {
        samples,
        fs: side.fs,
        modality: side.modality,
        subject_id: side.subject_id,
        label: side.label,
        history: side.history,
    };
    record.check().map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(record)
}

/// Writes samples (format chosen by extension) plus the sidecar.
pub fn write_record(path: &Path, record: &SignalRecord) -> Result<()> {
    let format = format_from_extension(path);
    let body = match format {
        SampleFormat::Csv => {
            let mut s = String::with_capacity(record.samples.len() * 12);
            for x in &record.samples {
                s.push_str(&format!("{x}\n"));
            }
            s.into_bytes()
        }
        SampleFormat::F32le => record.samples.iter().flat_map(|&x| (x as f32).to_le_bytes()).collect(),
    };
    write_file(path, &body)?;
    let side = serde_json::to_string_pretty(&record.sidecar(format)).map_err(|e| Error::json(path, e))?;
    write_file(&sidecar_path(path), side.as_bytes())
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// Dataset manifest: a list of record files with optional metadata overrides.
/// Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<Label>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        write_file(path, text.as_bytes())
    }

    /// Loads every listed record, applying manifest overrides.
    pub fn read_records(&self, manifest_path: &Path) -> Result<Vec<SignalRecord>> {
        let base = manifest_path.parent().unwrap_or(Path::new(""));
        self.records
            .iter()
            .map(|entry| {
                let mut record = read_record(&base.join(&entry.path))?;
                if let Some(id) = &entry.subject_id {
                    record.subject_id = id.clone();
                }
                if entry.label.is_some() {
                    record.label = entry.label;
                }
                Ok(record)
            })
            .collect()
    }
}
