use std::path::Path;
use std::time::Instant;

use super::auc::auc;
use super::config::TrainRunConfig;
use super::finetune::{finetune_af, score_windows, PrefixCache};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::signal::{loso_folds, write_file, FinetuneDataset, Label};

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub subject: String,
    /// Majority label of the held-out windows.
    pub label: Label,
    pub n_windows: usize,
    pub mean_score: f64,
    /// Within-fold AUC; undefined when the held-out subject has one class.
    pub auc: Option<f64>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowScore {
    pub fold: usize,
    pub subject: String,
    pub window: usize,
    pub label: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub folds: Vec<FoldResult>,
    /// AUC over every held-out window, pooled across folds.
    pub pooled_auc: Option<f64>,
    /// AUC over per-subject mean window scores.
    pub subject_auc: Option<f64>,
    pub scores: Vec<WindowScore>,
}

fn smoothed(losses: &[f64], from_end: bool) -> f64 {
    let w = losses.len().clamp(1, 10);
    let slice = if from_end { &losses[losses.len() - w..] } else { &losses[..w] };
    slice.iter().sum::<f64>() / w as f64
}

/// Seed used for fold `k`: an independent stream of the run seed.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    Rng::derive(seed, 1000 + fold as u64).next_u64()
}

fn run_fold<T: Scalar>(
    base: &Model<T>,
    cache: &PrefixCache<T>,
    dataset: &FinetuneDataset,
    targets: &[f64],
    fold_index: usize,
    train: &[usize],
    test: &[usize],
    subject: &str,
    config: &TrainRunConfig,
) -> Result<(FoldResult, Vec<WindowScore>)> {
    let start = Instant::now();
    let fold_config = TrainRunConfig { seed: fold_seed(config.seed, fold_index), ..config.clone() };
    let report = finetune_af(base, cache, targets, train, &fold_config)
        .map_err(|e| Error::Data(format!("fold {fold_index} (held out {subject}): {e}")))?;
    let scores = score_windows(&report.model, cache, test)?;
    let positive: Vec<bool> = test.iter().map(|&i| dataset.labels[i] == Label::Af).collect();
    let n_af = positive.iter().filter(|&&p| p).count();
    let label = if 2 * n_af >= test.len() { Label::Af } else { Label::Healthy };
    let window_scores = test
        .iter()
        .zip(&scores)
        .map(|(&i, &score)| WindowScore {
            fold: fold_index,
            subject: subject.to_string(),
            window: i,
            label: dataset.labels[i],
            score,
        })
        .collect();
    let fold = FoldResult {
        fold: fold_index,
        subject: subject.to_string(),
        label,
        n_windows: test.len(),
        mean_score: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
        auc: auc(&scores, &positive),
        first_loss: smoothed(&report.losses, false),
        final_loss: smoothed(&report.losses, true),
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((fold, window_scores))
}

/// Leave-one-subject-out evaluation: one fine-tune per held-out subject,
/// windows scored in eval mode. Folds run `jobs` at a time on threads; fold
/// seeds do not depend on `jobs`, so results are identical for any value.
pub fn loso_evaluate<T: Scalar>(
    base: &Model<T>,
    dataset: &FinetuneDataset,
    config: &TrainRunConfig,
    jobs: usize,
    on_fold: &mut dyn FnMut(&FoldResult),
) -> Result<AucReport> {
    config.validate()?;
    let folds = loso_folds(&dataset.subject_ids);
    if folds.len() < 2 {
        return Err(Error::Data(format!("LOSO needs at least 2 subjects, found {}", folds.len())));
    }
    let targets: Vec<f64> = dataset.labels.iter().map(|l| l.as_f64()).collect();
    let n_af = targets.iter().filter(|&&t| t > 0.5).count();
    if n_af == 0 || n_af == targets.len() {
        return Err(Error::Data("LOSO needs both classes in the dataset".into()));
    }
    let windows: Vec<&[usize]> = dataset.windows.iter().map(|w| w.tokens.as_slice()).collect();
    let cache = PrefixCache::build(base, &windows)?;

    let mut results = Vec::with_capacity(folds.len());
    for group in folds.chunks(jobs.max(1)).enumerate().map(|(g, c)| (g * jobs.max(1), c)).collect::<Vec<_>>() {
        let (offset, chunk) = group;
        let outcomes: Vec<Result<(FoldResult, Vec<WindowScore>)>> = if chunk.len() == 1 {
            let f = &chunk[0];
            vec![run_fold(base, &cache, dataset, &targets, offset, &f.train, &f.test, &f.subject, config)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(j, f)| {
                        let (cache, targets) = (&cache, &targets);
                        scope.spawn(move || {
                            run_fold(base, cache, dataset, targets, offset + j, &f.train, &f.test, &f.subject, config)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
            })
        };
        for outcome in outcomes {
            let (fold, scores) = outcome?;
            on_fold(&fold);
            results.push((fold, scores));
        }
    }

    let folds: Vec<FoldResult> = results.iter().map(|(f, _)| f.clone()).collect();
    let scores: Vec<WindowScore> = results.into_iter().flat_map(|(_, s)| s).collect();
    let pooled_auc = auc(
        &scores.iter().map(|s| s.score).collect::<Vec<_>>(),
        &scores.iter().map(|s| s.label == Label::Af).collect::<Vec<_>>(),
    );
    let subject_auc = auc(
        &folds.iter().map(|f| f.mean_score).collect::<Vec<_>>(),
        &folds.iter().map(|f| f.label == Label::Af).collect::<Vec<_>>(),
    );
    Ok(AucReport { folds, pooled_auc, subject_auc, scores })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn label_value(l: Label) -> u8 {
    match l {
        Label::Healthy => 0,
        Label::Af => 1,
    }
}

impl AucReport {
    /// One row per fold (timings are kept out so reruns compare byte-equal).
    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,subject,label,n_windows,mean_score,fold_auc,first_loss,final_loss\n");
        for f in &self.folds {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                f.fold,
                f.subject,
                label_value(f.label),
                f.n_windows,
                f.mean_score,
                opt(f.auc),
                f.first_loss,
                f.final_loss
            ));
        }
        s
    }

    pub fn scores_csv(&self) -> String {
        let mut s = String::from("fold,subject,window,label,score\n");
        for w in &self.scores {
            s.push_str(&format!("{},{},{},{},{}\n", w.fold, w.subject, w.window, label_value(w.label), w.score));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!(
            "metric,value\npooled_window_auc,{}\nsubject_mean_score_auc,{}\nfolds,{}\nwindows,{}\n",
            opt(self.pooled_auc),
            opt(self.subject_auc),
            self.folds.len(),
            self.scores.len()
        )
    }

    /// Writes `auc_folds.csv`, `auc_scores.csv` and `auc_summary.csv`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        write_file(&dir.join("auc_folds.csv"), self.folds_csv().as_bytes())?;
        write_file(&dir.join("auc_scores.csv"), self.scores_csv().as_bytes())?;
        write_file(&dir.join("auc_summary.csv"), self.summary_csv().as_bytes())
    }
}
