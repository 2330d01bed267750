use std::path::{Path, PathBuf};

use pulsegpt_core::generation::{evaluate_horizon, generate, horizon_windows, HorizonConfig, Sampling};
use pulsegpt_core::interpret::{
    aggregate_final_row, attention_delta, head_maps_csv, lookback_distance, overlay_svg, rising_reference,
    select_slope_tokens, shift_and_add_head_maps, similarity_trace, weights_csv, SlopeClass, SLOPE_TOLERANCE,
};
use pulsegpt_core::model::{load_checkpoint, save_checkpoint, CheckpointMeta, HeadKind, Model, ModelConfig};
use pulsegpt_core::plot::{Figure, BLACK, BLUE, RED};
use pulsegpt_core::signal::{
    build_finetune_dataset, build_pretrain_dataset, detokenize, tokenize_window, write_record, DatasetManifest,
    DatasetSpec, ManifestEntry, Modality, SampleFormat, SignalRecord, TokenWindow,
};
use pulsegpt_core::synth::{synth_cohort, CohortConfig, CohortRhythm};
use pulsegpt_core::training::{
    finetune_af, loso_evaluate, pretrain, score_windows, PrefixCache, PretrainPaths, TrainRunConfig,
};
use pulsegpt_core::{Error, Mode, Model32, Result, Rng};
use serde::{Deserialize, Serialize};

use crate::run::{load_config, write, Run};
use crate::{
    AttnAggregateArgs, AttnDeltaArgs, AttnHeadsArgs, AttnLookbackArgs, AttnSimilarityArgs, DataArgs, EvalHorizonArgs,
    ExportFigureArgs, FigureKind, FinetuneArgs, GenerateArgs, LosoArgs, ModelArgs, PretrainArgs, SynthArgs,
    TokenizeArgs, TrainArgs,
};

/// Windowing and preprocessing shared by every dataset-reading command.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Model sampling rate; defaults to 50 Hz for PPG and 100 Hz for ECG.
    pub target_fs: Option<f64>,
    pub window_len: usize,
    pub window_shift: usize,
    /// Band edges in Hz applied before resampling; off when absent.
    pub bandpass: Option<(f64, f64)>,
    pub split_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { target_fs: None, window_len: 500, window_shift: 50, bandpass: None, split_fraction: 0.9 }
    }
}

impl DataConfig {
    fn apply(&mut self, a: &DataArgs) {
        if let Some(v) = a.fs {
            self.target_fs = Some(v);
        }
        if let Some(v) = a.window {
            self.window_len = v;
        }
        if let Some(v) = a.shift {
            self.window_shift = v;
        }
        if let Some(v) = &a.bandpass {
            self.bandpass = v.0;
        }
        if let Some(v) = a.split {
            self.split_fraction = v;
        }
    }

    fn spec(&self, records: Vec<SignalRecord>) -> DatasetSpec {
        let fs = self.target_fs.unwrap_or_else(|| default_fs(records.first().map_or(Modality::Ppg, |r| r.modality)));
        DatasetSpec {
            records,
            window_len: self.window_len,
            window_shift: self.window_shift,
            target_fs: fs,
            bandpass: self.bandpass,
            split_fraction: self.split_fraction,
        }
    }
}

fn default_fs(m: Modality) -> f64 {
    match m {
        Modality::Ppg => 50.0,
        Modality::Ecg => 100.0,
    }
}

fn apply_model(c: &mut ModelConfig, a: &ModelArgs) {
    if let Some(v) = a.d_model {
        c.d_model = v;
    }
    if let Some(v) = a.blocks {
        c.n_blocks = v;
    }
    if let Some(v) = a.heads {
        c.n_heads = v;
    }
    if let Some(v) = a.context {
        c.max_context = v;
    }
    if let Some(v) = a.dropout {
        c.dropout = v;
    }
}

fn apply_train(c: &mut TrainRunConfig, a: &TrainArgs, seed: Option<u64>) {
    if let Some(v) = a.iters {
        c.max_iters = v;
    }
    if let Some(v) = a.batch {
        c.batch_size = v;
    }
    if let Some(v) = a.lr {
        c.learning_rate = v;
    }
    if let Some(v) = a.eval_interval {
        c.eval_interval = v;
    }
    if let Some(v) = a.eval_iters {
        c.eval_iters = v;
    }
    if let Some(v) = a.weight_decay {
        c.adamw.weight_decay = v;
    }
    if let Some(v) = a.grad_clip {
        c.grad_clip = Some(v);
    }
    if let Some(v) = seed {
        c.seed = v;
    }
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let p = path.clone().ok_or_else(|| Error::Config(format!("--{what} is required (flag or config file)")))?;
    if !p.exists() {
        return Err(Error::Io { path: p, source: std::io::ErrorKind::NotFound.into() });
    }
    Ok(p)
}

fn read_dataset(path: &Path) -> Result<Vec<SignalRecord>> {
    DatasetManifest::load(path)?.read_records(path)
}

/// Accepts a checkpoint directory or a pre-training run directory.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    let best = PretrainPaths::new(path).best;
    if !path.join("manifest.json").exists() && best.join("manifest.json").exists() {
        best
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<Model32> {
    Ok(load_checkpoint::<f32>(&resolve_checkpoint(path))?.0)
}

fn sampling(temperature: Option<f64>, argmax: bool, current: Sampling) -> Sampling {
    if argmax {
        Sampling::Argmax
    } else if let Some(t) = temperature {
        Sampling::Temperature(t)
    } else {
        current
    }
}

fn tokens_csv(tokens: &[usize]) -> String {
    let mut s = String::from("position,token\n");
    for (i, t) in tokens.iter().enumerate() {
        s.push_str(&format!("{i},{t}\n"));
    }
    s
}

// ---------------------------------------------------------------- synth

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCmd {
    pub cohort: CohortConfig,
    pub format: SampleFormat,
}

impl Default for SynthCmd {
    fn default() -> Self {
        Self { cohort: CohortConfig::default(), format: SampleFormat::Csv }
    }
}

pub fn synth(a: &SynthArgs) -> Result<PathBuf> {
    let mut c: SynthCmd = load_config(a.common.config.as_deref())?;
    if let Some(v) = a.modality {
        c.cohort.modality = v;
        if a.fs.is_none() && a.common.config.is_none() {
            c.cohort.fs = default_fs(v);
        }
    }
    if let Some(v) = a.subjects {
        c.cohort.subjects = v;
    }
    if let Some(v) = a.rhythm {
        c.cohort.rhythm = v;
    }
    if let Some(v) = a.fs {
        c.cohort.fs = v;
    }
    if let Some(v) = a.duration {
        c.cohort.duration_s = v;
    }
    if let Some(v) = a.common.seed {
        c.cohort.seed = v;
    }
    if a.f32 {
        c.format = SampleFormat::F32le;
    }
    let mut run = Run::start("synth", a.common.out.clone(), &c, Some(c.cohort.seed))?;
    let outputs = run.timed("synthesize", || synth_cohort(&c.cohort))?;
    let ext = match c.format {
        SampleFormat::Csv => "csv",
        SampleFormat::F32le => "f32",
    };
    let mut manifest = DatasetManifest::default();
    for o in &outputs {
        let rel = PathBuf::from("signals").join(format!("{}.{ext}", o.record.subject_id));
        write_record(&run.path(&rel.to_string_lossy()), &o.record)?;
        manifest.records.push(ManifestEntry { path: rel, subject_id: None, label: None });
    }
    manifest.save(&run.path("dataset.json"))?;
    println!("wrote {} {} records", outputs.len(), c.cohort.modality);
    run.finish()
}

// ---------------------------------------------------------------- tokenize

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizeCmd {
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
}

pub fn tokenize(a: &TokenizeArgs) -> Result<PathBuf> {
    let mut c: TokenizeCmd = load_config(a.common.config.as_deref())?;
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    c.data.apply(&a.data);
    let dataset = required(&c.dataset, "dataset")?;
    let mut run = Run::start("tokenize", a.common.out.clone(), &c, None)?;
    run.input(&dataset);
    let spec = c.data.spec(read_dataset(&dataset)?);
    let windows = run.timed("windows", || build_finetune_dataset(&spec))?;
    let streams = run.timed("streams", || build_pretrain_dataset(&spec))?;
    let mut s = String::from("subject,label,start,scale_min,scale_max,tokens\n");
    for i in 0..windows.len() {
        let w = &windows.windows[i];
        let tokens: Vec<String> = w.tokens.iter().map(ToString::to_string).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            windows.subject_ids[i],
            windows.labels[i].as_f64(),
            windows.starts[i],
            w.scale_min,
            w.scale_max,
            tokens.join(" ")
        ));
    }
    write(&run.path("windows.csv"), s.as_bytes())?;
    let bytes = |v: &[usize]| v.iter().map(|&t| t as u8).collect::<Vec<u8>>();
    write(&run.path("train_tokens.u8"), &bytes(&streams.train))?;
    write(&run.path("val_tokens.u8"), &bytes(&streams.val))?;
    let summary = format!(
        "metric,value\nwindows,{}\nsubjects,{}\ntrain_tokens,{}\nval_tokens,{}\ntrain_records,{}\ntarget_fs,{}\n",
        windows.len(),
        windows.subjects().len(),
        streams.train.len(),
        streams.val.len(),
        streams.train_records,
        spec.target_fs
    );
    write(&run.path("summary.csv"), summary.as_bytes())?;
    println!("{} windows, {} train / {} validation tokens", windows.len(), streams.train.len(), streams.val.len());
    run.finish()
}

// ---------------------------------------------------------------- pretrain

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainCmd {
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainRunConfig,
}

impl Default for PretrainCmd {
    fn default() -> Self {
        Self {
            dataset: None,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainRunConfig::pretrain(),
        }
    }
}

pub fn pretrain_cmd(a: &PretrainArgs) -> Result<PathBuf> {
    let mut c: PretrainCmd = load_config(a.common.config.as_deref())?;
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    c.data.apply(&a.data);
    apply_model(&mut c.model, &a.model);
    apply_train(&mut c.train, &a.train, a.common.seed);
    c.model.validate()?;
    c.train.validate()?;
    if c.data.window_len != c.model.max_context {
        return Err(Error::Config(format!(
            "window length {} must equal the model context {}",
            c.data.window_len, c.model.max_context
        )));
    }
    let dataset = required(&c.dataset, "dataset")?;
    let mut run = Run::start("pretrain", a.common.out.clone(), &c, Some(c.train.seed))?;
    run.input(&dataset);
    let spec = c.data.spec(read_dataset(&dataset)?);
    let data = run.timed("tokenize", || build_pretrain_dataset(&spec))?;
    println!("train {} tokens, validation {} tokens", data.train.len(), data.val.len());
    let model = Model::<f32>::new(c.model.clone(), HeadKind::Lm, &mut Rng::new(c.train.seed))?;
    let dir = run.dir.clone();
    let report = run.timed("train", || {
        pretrain(model, &data, &c.train, Some(&dir), &mut |r| {
            println!("iter {:>7}  train {:.4}  val {:.4}", r.iter, r.train_loss, r.val_loss);
        })
    })?;
    println!("best validation loss {:.4} at iteration {}", report.best_val, report.best_iter);
    run.finish()
}

// ---------------------------------------------------------------- generate

fn load_window(input: &Path, data: &DataConfig, start: usize, len: usize) -> Result<(SignalRecord, TokenWindow)> {
    let record = pulsegpt_core::signal::read_record(input)?;
    let spec = data.spec(vec![record.clone()]);
    let processed = spec.preprocess(&record)?;
    if start + len > processed.samples.len() {
        return Err(Error::Data(format!(
            "{}: window {start}..{} past the end of {} samples at {} Hz",
            input.display(),
            start + len,
            processed.samples.len(),
            processed.fs
        )));
    }
    let window = tokenize_window(&processed.samples[start..start + len], processed.fs, processed.modality)?;
    Ok((processed, window))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerateCmd {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub data: DataConfig,
    /// First sample of the context window (after preprocessing).
    pub start: usize,
    pub n_new: usize,
    pub sampling: Sampling,
    pub seed: u64,
}

impl Default for GenerateCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            input: None,
            data: DataConfig::default(),
            start: 0,
            n_new: 250,
            sampling: Sampling::default(),
            seed: 0,
        }
    }
}

pub fn generate_cmd(a: &GenerateArgs) -> Result<PathBuf> {
    let mut c: GenerateCmd = load_config(a.common.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.input.is_some() {
        c.input = a.input.clone();
    }
    c.data.apply(&a.data);
    if let Some(v) = a.start {
        c.start = v;
    }
    if let Some(v) = a.n_new {
        c.n_new = v;
    }
    if let Some(v) = a.common.seed {
        c.seed = v;
    }
    c.sampling = sampling(a.temperature, a.argmax, c.sampling);
    c.sampling.validate()?;
    let (ckpt, input) = (required(&c.checkpoint, "checkpoint")?, required(&c.input, "input")?);
    let mut run = Run::start("generate", a.common.out.clone(), &c, Some(c.seed))?;
    run.input(&ckpt);
    run.input(&input);
    let model = load_model(&ckpt)?;
    let (_, window) = load_window(&input, &c.data, c.start, c.data.window_len)?;
    let out = run.timed("generate", || generate(&model, &window.tokens, c.n_new, &mut Rng::new(c.seed), c.sampling))?;
    let mut s = String::from("t,token,source\n");
    for (t, tok) in window.tokens.iter().enumerate() {
        s.push_str(&format!("{t},{tok},context\n"));
    }
    let n = window.tokens.len();
    for (i, tok) in out.iter().enumerate() {
        s.push_str(&format!("{},{tok},generated\n", n + i));
    }
    write(&run.path("generated.csv"), s.as_bytes())?;
    let svg = Figure::new(format!("{} generated tokens", out.len()))
        .line(window.tokens.iter().enumerate().map(|(i, &t)| (i as f64, t as f64)).collect(), BLACK)
        .line(out.iter().enumerate().map(|(i, &t)| ((n + i) as f64, t as f64)).collect(), RED)
        .to_svg();
    write(&run.path("generated.svg"), svg.as_bytes())?;
    run.finish()
}

// ---------------------------------------------------------------- eval-horizon

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalHorizonCmd {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub horizon: HorizonConfig,
    /// Samples between consecutive evaluation windows.
    pub stride: usize,
    pub max_windows: Option<usize>,
    /// Rollouts exported as CSV + SVG.
    pub examples: usize,
}

impl Default for EvalHorizonCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            data: DataConfig::default(),
            horizon: HorizonConfig::default(),
            stride: 750,
            max_windows: None,
            examples: 3,
        }
    }
}

pub fn eval_horizon(a: &EvalHorizonArgs) -> Result<PathBuf> {
    let mut c: EvalHorizonCmd = load_config(a.common.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    c.data.apply(&a.data);
    if let Some(v) = a.windows {
        c.max_windows = Some(v);
    }
    if let Some(v) = a.stride {
        c.stride = v;
    }
    if let Some(v) = a.horizon {
        c.horizon.horizon = v;
    }
    if let Some(v) = a.rollouts {
        c.horizon.rollouts = v;
    }
    if let Some(v) = a.jobs {
        c.horizon.jobs = v;
    }
    if let Some(v) = a.examples {
        c.examples = v;
    }
    if let Some(v) = a.common.seed {
        c.horizon.seed = v;
    }
    c.horizon.context_len = c.data.window_len;
    c.horizon.sampling = sampling(a.temperature, a.argmax, c.horizon.sampling);
    c.horizon.sampling.validate()?;
    let (ckpt, dataset) = (required(&c.checkpoint, "checkpoint")?, required(&c.dataset, "dataset")?);
    let mut run = Run::start("eval-horizon", a.common.out.clone(), &c, Some(c.horizon.seed))?;
    run.input(&ckpt);
    run.input(&dataset);
    let model = load_model(&ckpt)?;
    let spec = c.data.spec(read_dataset(&dataset)?);
    let mut windows = Vec::new();
    for r in &spec.records {
        windows.extend(horizon_windows(&spec.preprocess(r)?, c.horizon.window_len(), c.stride)?);
    }
    if let Some(m) = c.max_windows {
        windows.truncate(m);
    }
    if windows.is_empty() {
        return Err(Error::Data(format!("no {}-sample windows in the dataset", c.horizon.window_len())));
    }
    println!("{} windows x {} rollouts", windows.len(), c.horizon.rollouts);
    let report = run.timed("rollouts", || evaluate_horizon(&model, &windows, &c.horizon))?;
    report.write(&run.dir, c.examples, c.horizon.context_len)?;
    for h in report.stats.steps.iter().filter(|h| h.step == 1 || h.step % 50 == 0) {
        println!("step {:>4}  median {:>5.1}  iqr [{:.1}, {:.1}]", h.step, h.median, h.q25, h.q75);
    }
    run.finish()
}

// ---------------------------------------------------------------- finetune

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneCmd {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainRunConfig,
}

impl Default for FinetuneCmd {
    fn default() -> Self {
        Self { checkpoint: None, dataset: None, data: DataConfig::default(), train: TrainRunConfig::finetune() }
    }
}

pub fn finetune(a: &FinetuneArgs) -> Result<PathBuf> {
    let mut c: FinetuneCmd = load_config(a.common.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    c.data.apply(&a.data);
    apply_train(&mut c.train, &a.train, a.common.seed);
    if a.train_final_norm {
        c.train.train_final_norm = true;
    }
    c.train.eval_interval = c.train.eval_interval.min(c.train.max_iters);
    c.train.validate()?;
    let (ckpt, dataset) = (required(&c.checkpoint, "checkpoint")?, required(&c.dataset, "dataset")?);
    let mut run = Run::start("finetune", a.common.out.clone(), &c, Some(c.train.seed))?;
    run.input(&ckpt);
    run.input(&dataset);
    let base = load_model(&ckpt)?;
    let ds = build_finetune_dataset(&c.data.spec(read_dataset(&dataset)?))?;
    let windows: Vec<&[usize]> = ds.windows.iter().map(|w| w.tokens.as_slice()).collect();
    let cache = run.timed("prefix", || PrefixCache::build(&base, &windows))?;
    let labels: Vec<f64> = ds.labels.iter().map(|l| l.as_f64()).collect();
    let train: Vec<usize> = (0..ds.len()).collect();
    let report = run.timed("train", || finetune_af(&base, &cache, &labels, &train, &c.train))?;
    println!("{} trainable parameters in {} tensors", report.trainable_scalars, report.trainable.len());
    let mut s = String::from("iter,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        s.push_str(&format!("{},{l}\n", i + 1));
    }
    write(&run.path("losses.csv"), s.as_bytes())?;
    let scores = score_windows(&report.model, &cache, &train)?;
    let mut s = String::from("subject,start,label,score\n");
    for (i, p) in scores.iter().enumerate() {
        s.push_str(&format!("{},{},{},{p}\n", ds.subject_ids[i], ds.starts[i], labels[i]));
    }
    write(&run.path("scores.csv"), s.as_bytes())?;
    let meta = CheckpointMeta { seed: c.train.seed, step: report.losses.len() as u64 };
    save_checkpoint(&run.path("checkpoint"), &report.model, &meta)?;
    run.finish()
}

// ---------------------------------------------------------------- loso

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LosoCmd {
    /// Pre-trained base; a freshly initialized model is used when absent.
    pub checkpoint: Option<PathBuf>,
    /// Labelled dataset; a synthetic cohort is generated when absent.
    pub dataset: Option<PathBuf>,
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainRunConfig,
    pub jobs: usize,
}

impl Default for LosoCmd {
    fn default() -> Self {
        Self {
            checkpoint: None,
            dataset: None,
            cohort: CohortConfig { subjects: 12, rhythm: CohortRhythm::Mixed, duration_s: 180.0, ..CohortConfig::default() },
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainRunConfig::finetune(),
            jobs: 1,
        }
    }
}

pub fn loso(a: &LosoArgs) -> Result<PathBuf> {
    let mut c: LosoCmd = load_config(a.common.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    if let Some(v) = a.subjects {
        c.cohort.subjects = v;
    }
    if let Some(v) = a.duration {
        c.cohort.duration_s = v;
    }
    if let Some(v) = a.jobs {
        c.jobs = v;
    }
    c.data.apply(&a.data);
    apply_model(&mut c.model, &a.model);
    apply_train(&mut c.train, &a.train, a.common.seed);
    if let Some(v) = a.common.seed {
        c.cohort.seed = v;
    }
    c.train.eval_interval = c.train.eval_interval.min(c.train.max_iters);
    c.train.validate()?;
    let mut run = Run::start("loso", a.common.out.clone(), &c, Some(c.train.seed))?;
    let base = match &c.checkpoint {
        Some(p) => {
            let p = required(&Some(p.clone()), "checkpoint")?;
            run.input(&p);
            load_model(&p)?
        }
        None => {
            c.model.validate()?;
            println!("no checkpoint given; fine-tuning from a randomly initialized model");
            Model::<f32>::new(c.model.clone(), HeadKind::Lm, &mut Rng::new(c.train.seed))?
        }
    };
    let records = match &c.dataset {
        Some(p) => {
            let p = required(&Some(p.clone()), "dataset")?;
            run.input(&p);
            read_dataset(&p)?
        }
        None => run.timed("synthesize", || synth_cohort(&c.cohort))?.into_iter().map(|o| o.record).collect(),
    };
    let ds = build_finetune_dataset(&c.data.spec(records))?;
    println!("{} windows from {} subjects", ds.len(), ds.subjects().len());
    let report = run.timed("folds", || {
        loso_evaluate(&base, &ds, &c.train, c.jobs, &mut |f| {
            println!(
                "fold {:>3} {:<12} mean score {:.3}  loss {:.4} -> {:.4}  {:.1}s",
                f.fold, f.subject, f.mean_score, f.first_loss, f.final_loss, f.seconds
            );
        })
    })?;
    report.write(&run.dir)?;
    let fmt = |x: Option<f64>| x.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"));
    println!("pooled window AUC {}  subject AUC {}", fmt(report.pooled_auc), fmt(report.subject_auc));
    run.finish()
}

// ---------------------------------------------------------------- attention

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowCmd {
    pub checkpoint: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub data: DataConfig,
    pub start: usize,
}

impl WindowCmd {
    fn resolve(config: Option<&Path>, checkpoint: &Option<PathBuf>, input: &Option<PathBuf>, data: &DataArgs, start: Option<usize>) -> Result<Self> {
        let mut c: WindowCmd = load_config(config)?;
        if checkpoint.is_some() {
            c.checkpoint = checkpoint.clone();
        }
        if input.is_some() {
            c.input = input.clone();
        }
        c.data.apply(data);
        if let Some(v) = start {
            c.start = v;
        }
        Ok(c)
    }

    fn load(&self, run: &mut Run) -> Result<(Model32, TokenWindow)> {
        let (ckpt, input) = (required(&self.checkpoint, "checkpoint")?, required(&self.input, "input")?);
        run.input(&ckpt);
        run.input(&input);
        let model = load_model(&ckpt)?;
        let (_, window) = load_window(&input, &self.data, self.start, model.config.max_context.min(self.data.window_len))?;
        write(&run.path("window.csv"), tokens_csv(&window.tokens).as_bytes())?;
        Ok((model, window))
    }
}

pub fn attn_aggregate(a: &AttnAggregateArgs) -> Result<PathBuf> {
    let c = WindowCmd::resolve(a.common.config.as_deref(), &a.checkpoint, &a.input, &a.data, a.start)?;
    let mut run = Run::start("attn-aggregate", a.common.out.clone(), &c, None)?;
    let (model, window) = c.load(&mut run)?;
    let (_, record) = model.forward(&window.tokens, Mode::Eval, &mut Rng::new(0))?;
    let layers: Vec<usize> = if a.layer.is_empty() { (1..=record.layers).collect() } else { a.layer.clone() };
    let signal = detokenize(&window);
    for l in layers {
        let w = aggregate_final_row(&record, l)?;
        write(&run.path(&format!("aggregate-layer{l}.csv")), weights_csv(&w).as_bytes())?;
        write(&run.path(&format!("aggregate-layer{l}.svg")), overlay_svg(&format!("layer {l}"), &signal, &w).as_bytes())?;
    }
    run.finish()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LookbackCmd {
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub data: DataConfig,
    pub max_windows: usize,
}

impl Default for LookbackCmd {
    fn default() -> Self {
        Self { checkpoint: None, dataset: None, data: DataConfig { window_shift: 500, ..DataConfig::default() }, max_windows: 100 }
    }
}

pub fn attn_lookback(a: &AttnLookbackArgs) -> Result<PathBuf> {
    let mut c: LookbackCmd = load_config(a.common.config.as_deref())?;
    if a.checkpoint.is_some() {
        c.checkpoint = a.checkpoint.clone();
    }
    if a.dataset.is_some() {
        c.dataset = a.dataset.clone();
    }
    c.data.apply(&a.data);
    if let Some(v) = a.windows {
        c.max_windows = v;
    }
    let (ckpt, dataset) = (required(&c.checkpoint, "checkpoint")?, required(&c.dataset, "dataset")?);
    let mut run = Run::start("attn-lookback", a.common.out.clone(), &c, None)?;
    run.input(&ckpt);
    run.input(&dataset);
    let model = load_model(&ckpt)?;
    let ds = build_finetune_dataset(&c.data.spec(read_dataset(&dataset)?))?;
    let fs = ds.windows.first().map_or(50.0, |w| w.fs);
    let records = run.timed("forward", || {
        ds.windows
            .iter()
            .take(c.max_windows)
            .map(|w| Ok(model.forward(&w.tokens, Mode::Eval, &mut Rng::new(0))?.1))
            .collect::<Result<Vec<_>>>()
    })?;
    let table = lookback_distance(&records, fs)?;
    write(&run.path("lookback.csv"), table.to_csv().as_bytes())?;
    for r in &table.rows {
        println!("layer {}  {:.3} +/- {:.3} s", r.layer, r.mean_s, r.sd_s);
    }
    run.finish()
}

pub fn attn_similarity(a: &AttnSimilarityArgs) -> Result<PathBuf> {
    let c = WindowCmd::resolve(a.common.config.as_deref(), &a.checkpoint, &a.input, &a.data, a.start)?;
    let mut run = Run::start("attn-similarity", a.common.out.clone(), &c, None)?;
    let (model, window) = c.load(&mut run)?;
    let target = a.reference_value.unwrap_or(50);
    let reference = match a.reference {
        Some(r) => r,
        None => rising_reference(&window, target).ok_or_else(|| Error::Data("window has no rising slope".into()))?,
    };
    let selected = select_slope_tokens(&window, reference, a.tolerance.unwrap_or(SLOPE_TOLERANCE))?;
    let trace = similarity_trace(&model, &window.tokens, &selected, reference)?;
    write(&run.path("similarity.csv"), trace.to_csv().as_bytes())?;
    let mut fig = Figure::new(format!("cosine similarity to position {reference}"));
    for e in &trace.entries {
        let color = if e.class == SlopeClass::Rising { RED } else { BLUE };
        fig = fig.line(e.similarity.iter().enumerate().map(|(k, &s)| (k as f64, s)).collect(), color);
    }
    write(&run.path("similarity.svg"), fig.to_svg().as_bytes())?;
    let last = trace.stages() - 1;
    for class in [SlopeClass::Rising, SlopeClass::Falling] {
        if let Some(m) = trace.class_mean(class, last) {
            println!("{class} mean similarity after the final block: {m:.4}");
        }
    }
    run.finish()
}

pub fn attn_heads(a: &AttnHeadsArgs) -> Result<PathBuf> {
    let mut c = WindowCmd::resolve(a.common.config.as_deref(), &a.checkpoint, &a.input, &a.data, a.start)?;
    let ckpt = required(&c.checkpoint, "checkpoint")?;
    let model = load_model(&ckpt)?;
    let n = a.n.unwrap_or(model.config.max_context);
    c.data.window_len = 2 * n - 1;
    let input = required(&c.input, "input")?;
    let mut run = Run::start("attn-heads", a.common.out.clone(), &c, None)?;
    run.input(&ckpt);
    run.input(&input);
    // one scale for the whole span so shifted windows share coordinates
    let (processed, _) = load_window(&input, &DataConfig { window_len: 1, ..c.data.clone() }, c.start, 1)?;
    let end = c.start + 2 * n - 1;
    if end > processed.samples.len() {
        return Err(Error::Data(format!("{}: need {} samples from {}, have {}", input.display(), 2 * n - 1, c.start, processed.samples.len())));
    }
    let (tokens, lo, hi) = pulsegpt_core::signal::quantize(&processed.samples[c.start..end])?;
    let maps = run.timed("shift-and-add", || shift_and_add_head_maps(&model, &tokens, n))?;
    write(&run.path("heads.csv"), head_maps_csv(&maps).as_bytes())?;
    write(&run.path("window.csv"), tokens_csv(&tokens[..n]).as_bytes())?;
    let signal = pulsegpt_core::signal::detokenize_tokens(&tokens[..n], lo, hi);
    for m in &maps {
        let svg = overlay_svg(&format!("head {} peaks {:?}", m.head, m.peaks), &signal, &m.weights);
        write(&run.path(&format!("head-{}.svg", m.head)), svg.as_bytes())?;
        println!("head {}: peaks at {:?}", m.head, m.peaks);
    }
    run.finish()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DeltaCmd {
    pub base: Option<PathBuf>,
    pub tuned: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub data: DataConfig,
    pub start: usize,
}

pub fn attn_delta(a: &AttnDeltaArgs) -> Result<PathBuf> {
    let mut c: DeltaCmd = load_config(a.common.config.as_deref())?;
    if a.base.is_some() {
        c.base = a.base.clone();
    }
    if a.tuned.is_some() {
        c.tuned = a.tuned.clone();
    }
    if a.input.is_some() {
        c.input = a.input.clone();
    }
    c.data.apply(&a.data);
    if let Some(v) = a.start {
        c.start = v;
    }
    let (base_p, tuned_p, input) = (required(&c.base, "base")?, required(&c.tuned, "tuned")?, required(&c.input, "input")?);
    let mut run = Run::start("attn-delta", a.common.out.clone(), &c, None)?;
    for p in [&base_p, &tuned_p, &input] {
        run.input(p);
    }
    let (base, tuned) = (load_model(&base_p)?, load_model(&tuned_p)?);
    let (_, window) = load_window(&input, &c.data, c.start, base.config.max_context.min(c.data.window_len))?;
    let delta = attention_delta(&base, &tuned, &window.tokens)?;
    write(&run.path("delta.csv"), delta.to_csv().as_bytes())?;
    write(&run.path("window.csv"), tokens_csv(&window.tokens).as_bytes())?;
    let svg = overlay_svg("attention increase after fine-tuning", &detokenize(&window), &delta.increases());
    write(&run.path("delta.svg"), svg.as_bytes())?;
    run.finish()
}

// ---------------------------------------------------------------- export-figure

fn read_columns(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or_default().split(',').map(str::to_string).collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(|v| v.trim().parse::<f64>().ok()).collect())
        .collect();
    Ok((header, rows))
}

fn column(header: &[String], rows: &[Vec<Option<f64>>], name: &str, path: &Path) -> Result<Vec<Option<f64>>> {
    let i = header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Data(format!("{}: no column {name:?}", path.display())))?;
    Ok(rows.iter().map(|r| r.get(i).copied().flatten()).collect())
}

fn points(x: &[Option<f64>], y: &[Option<f64>]) -> Vec<(f64, f64)> {
    x.iter().zip(y).filter_map(|(a, b)| Some(((*a)?, (*b)?))).collect()
}

/// Re-renders an SVG from a CSV written by another command.
pub fn export_figure(a: &ExportFigureArgs) -> Result<PathBuf> {
    let csv = required(&Some(a.csv.clone()), "csv")?;
    let mut run = Run::start("export-figure", a.common.out.clone(), &(a.kind, &csv), None)?;
    run.input(&csv);
    let (h, rows) = read_columns(&csv)?;
    let title = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = a.output.clone().unwrap_or_else(|| format!("{title}.svg"));
    let fig = match a.kind {
        FigureKind::Rollout => {
            let t = column(&h, &rows, "t", &csv)?;
            let truth = column(&h, &rows, "truth", &csv)?;
            let pred = column(&h, &rows, "prediction", &csv)?;
            let context_len = pred.iter().position(Option::is_some).unwrap_or(t.len());
            Figure::new(title)
                .line(points(&t[..context_len], &truth[..context_len]), BLACK)
                .line(points(&t[context_len.saturating_sub(1)..], &truth[context_len.saturating_sub(1)..]), BLUE)
                .line(points(&t, &pred), RED)
        }
        FigureKind::Weights => {
            let p = column(&h, &rows, "position", &csv)?;
            let key = if h.iter().any(|c| c == "delta") { "delta" } else { "weight" };
            let w = column(&h, &rows, key, &csv)?;
            let bars = points(&p, &w).into_iter().map(|(x, y)| (x, y.max(0.0))).collect();
            let mut fig = Figure::new(title).bars(bars, RED);
            if let Some(sig) = &a.signal {
                let (sh, srows) = read_columns(sig)?;
                let sp = column(&sh, &srows, "position", sig)?;
                let st = column(&sh, &srows, "token", sig)?;
                fig = fig.line(points(&sp, &st), BLACK);
            }
            fig
        }
        FigureKind::Horizon => {
            let s = column(&h, &rows, "step", &csv)?;
            Figure::new(title)
                .line(points(&s, &column(&h, &rows, "q25", &csv)?), BLUE)
                .line(points(&s, &column(&h, &rows, "q75", &csv)?), BLUE)
                .line(points(&s, &column(&h, &rows, "median", &csv)?), RED)
        }
        FigureKind::Loss => {
            let it = column(&h, &rows, "iter", &csv)?;
            let mut fig = Figure::new(title);
            for (name, color) in [("train_loss", BLUE), ("val_loss", RED), ("loss", BLACK)] {
                if h.iter().any(|c| c == name) {
                    fig = fig.line(points(&it, &column(&h, &rows, name, &csv)?), color);
                }
            }
            fig
        }
    };
    write(&run.path(&name), fig.to_svg().as_bytes())?;
    run.finish()
}
