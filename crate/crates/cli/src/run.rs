use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use pulsegpt_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Root for run directories when `--out` is not given.
pub const RUN_ROOT_ENV: &str = "PULSEGPT_RUN_ROOT";
pub const MANIFEST: &str = "run.json";
pub const RESOLVED_CONFIG: &str = "config.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub checksums: BTreeMap<String, String>,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

pub struct Run {
    pub dir: PathBuf,
    command: String,
    config: Value,
    inputs: Vec<PathBuf>,
    seed: Option<u64>,
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl Run {
    pub fn start<C: Serialize>(command: &str, out: Option<PathBuf>, config: &C, seed: Option<u64>) -> Result<Self> {
        let dir = out.unwrap_or_else(|| {
            let root = std::env::var_os(RUN_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
            root.join(command)
        });
        fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        let config = serde_json::to_value(config).map_err(|e| Error::Json { path: dir.join(RESOLVED_CONFIG), source: e })?;
        let text = serde_json::to_string_pretty(&config).expect("config serializes") + "\n";
        write(&dir.join(RESOLVED_CONFIG), text.as_bytes())?;
        Ok(Run {
            dir,
            command: command.to_string(),
            config,
            inputs: Vec::new(),
            seed,
            timings: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs `f` and records its wall-clock time under `stage`.
    pub fn timed<R>(&mut self, stage: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        let out = f()?;
        self.timings.insert(stage.to_string(), t.elapsed().as_secs_f64());
        Ok(out)
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let mut files = Vec::new();
        collect_files(&self.dir, &mut files)?;
        let mut checksums = BTreeMap::new();
        for f in &files {
            let rel = f.strip_prefix(&self.dir).unwrap_or(f).to_string_lossy().replace('\\', "/");
            if rel == MANIFEST {
                continue;
            }
            checksums.insert(rel, sha256_file(f)?);
        }
        let manifest = RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            inputs: self.inputs,
            outputs: checksums.keys().cloned().collect(),
            seed: self.seed,
            checksums,
            timings: self.timings,
        };
        let path = self.dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        write(&path, text.as_bytes())?;
        Ok(self.dir)
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::Io { path: parent.to_path_buf(), source: e })?;
    }
    fs::write(path, bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Overlays `patch` onto `base`, recursing into objects.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Defaults overlaid with an optional JSON config file. Flags are applied by
/// the caller afterwards.
pub fn load_config<C: Serialize + DeserializeOwned + Default>(file: Option<&Path>) -> Result<C> {
    let mut value = serde_json::to_value(C::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let patch: Value = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        if !patch.is_object() {
            return Err(Error::Config(format!("{}: config file must hold a JSON object", path.display())));
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| Error::Json { path: file.map(Path::to_path_buf).unwrap_or_default(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Inner {
        a: u32,
        b: u32,
    }

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default)]
    struct Outer {
        x: f64,
        inner: Inner,
    }

    #[test]
    fn file_overrides_defaults_field_by_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"inner": {"b": 7}}"#).unwrap();
        let c: Outer = load_config(Some(&path)).unwrap();
        assert_eq!(c, Outer { x: 0.0, inner: Inner { a: 0, b: 7 } });
        fs::write(&path, "[1]").unwrap();
        assert!(load_config::<Outer>(Some(&path)).is_err());
        fs::write(&path, r#"{"x": "no"}"#).unwrap();
        assert!(load_config::<Outer>(Some(&path)).is_err());
    }

    #[test]
    fn manifest_lists_checksums() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::start("demo", Some(dir.path().to_path_buf()), &Outer::default(), Some(3)).unwrap();
        write(&run.path("sub/a.csv"), b"abc").unwrap();
        run.finish().unwrap();
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(dir.path().join(MANIFEST)).unwrap()).unwrap();
        assert_eq!(m.checksums["sub/a.csv"], "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
        assert!(m.checksums.contains_key(RESOLVED_CONFIG));
        assert!(m.timings.contains_key("total"));
    }
}
