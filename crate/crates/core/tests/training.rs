use indexmap::IndexMap;
use proptest::prelude::*;
use pulsegpt_core::model::*;
use pulsegpt_core::signal::*;
use pulsegpt_core::synth::*;
use pulsegpt_core::training::*;
use pulsegpt_core::*;
use pulsegpt_core::rng::Rng;

fn store(entries: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
    ParamStore::from_tensors(
        entries.iter().map(|(n, v)| (n.to_string(), Array::from_vec(&[v.len()], v.clone()).unwrap())).collect(),
    )
}

fn grads(entries: &[(&str, Vec<f64>)]) -> IndexMap<String, Array<f64>> {
    entries.iter().map(|(n, v)| (n.to_string(), Array::from_vec(&[v.len()], v.clone()).unwrap())).collect()
}

#[test]
fn zero_gradient_without_decay_is_identity() {
    let mut p = store(&[("w", vec![0.3, -1.2]), ("blocks.0.ln1.gain", vec![1.0])]);
    let before = p.clone();
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut state = OptimizerState::new();
    for _ in 0..3 {
        adamw_step(&mut p, &grads(&[("w", vec![0.0, 0.0]), ("blocks.0.ln1.gain", vec![0.0])]), &mut state, 3e-4, &cfg, None)
            .unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn first_step_hand_value() {
    let mut p = store(&[("w", vec![1.0])]);
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    adamw_step(&mut p, &grads(&[("w", vec![1.0])]), &mut OptimizerState::new(), 3e-4, &cfg, None).unwrap();
    let w = p.get("w").unwrap().data()[0];
    // m_hat = 1, v_hat = 1
    let expected = 1.0 - 3e-4 * (1.0 / (1.0 + 1e-8));
    assert!((w - expected).abs() < 1e-15, "{w}");
    assert!((w - 0.99970003).abs() < 5e-8);
}

/// AdamW written out element by element from the update equations.
fn reference_adamw(p0: f64, grads: &[f64], lr: f64, b1: f64, b2: f64, eps: f64, wd: f64) -> Vec<f64> {
    let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
    let mut trace = Vec::new();
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        p -= lr * wd * p;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mhat = m / (1.0 - b1.powi(t));
        let vhat = v / (1.0 - b2.powi(t));
        p -= lr * mhat / (vhat.sqrt() + eps);
        trace.push(p);
    }
    trace
}

#[test]
fn two_steps_match_reference_trace() {
    for wd in [0.0, 0.01, 0.5] {
        let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
        let mut p = store(&[("w", vec![0.7])]);
        let mut state = OptimizerState::new();
        let mut got = Vec::new();
        for _ in 0..2 {
            adamw_step(&mut p, &grads(&[("w", vec![0.25])]), &mut state, 1e-2, &cfg, None).unwrap();
            got.push(p.get("w").unwrap().data()[0]);
        }
        let want = reference_adamw(0.7, &[0.25, 0.25], 1e-2, 0.9, 0.999, 1e-8, wd);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-14, "wd {wd}: {a} vs {b}");
        }
        assert_eq!(state.step, 2);
    }
}

#[test]
fn decay_skips_norms_and_embeddings() {
    let names = ["token_embedding", "position_embedding", "blocks.3.ln2.bias", "final_ln.gain", "blocks.0.attn.query", "lm_head.bias"];
    let entries: Vec<(&str, Vec<f64>)> = names.iter().map(|n| (*n, vec![2.0])).collect();
    let zero: Vec<(&str, Vec<f64>)> = names.iter().map(|n| (*n, vec![0.0])).collect();
    let mut p = store(&entries);
    let cfg = AdamWConfig::default();
    adamw_step(&mut p, &grads(&zero), &mut OptimizerState::new(), 0.1, &cfg, None).unwrap();
    for n in &names[..4] {
        assert_eq!(p.get(n).unwrap().data()[0], 2.0, "{n}");
    }
    for n in &names[4..] {
        assert_eq!(p.get(n).unwrap().data()[0], 2.0 * (1.0 - 0.1 * 0.01), "{n}");
    }
}

#[test]
fn non_finite_gradient_aborts_without_update() {
    let mut p = store(&[("a", vec![1.0]), ("b", vec![1.0])]);
    let before = p.clone();
    let err = adamw_step(
        &mut p,
        &grads(&[("a", vec![0.5]), ("b", vec![f64::NAN])]),
        &mut OptimizerState::new(),
        1e-3,
        &AdamWConfig::default(),
        None,
    )
    .unwrap_err();
    assert!(err.to_string().contains('b'), "{err}");
    assert_eq!(err.kind(), ErrorKind::Numeric);
    assert_eq!(p, before);
}

#[test]
fn clipping_scales_to_max_norm() {
    let g = grads(&[("a", vec![3.0]), ("b", vec![4.0])]);
    assert_eq!(grad_norm(&g), 5.0);
    // with clipping the first moment sees g * (1 / 5)
    let cfg = AdamWConfig { weight_decay: 0.0, beta1: 0.0, beta2: 0.0, eps: 0.0 };
    let mut p = store(&[("a", vec![0.0]), ("b", vec![0.0])]);
    let mut state = OptimizerState::new();
    adamw_step(&mut p, &g, &mut state, 1.0, &cfg, Some(1.0)).unwrap();
    assert!((state.m["a"][0] - 0.6).abs() < 1e-15);
    assert!((state.m["b"][0] - 0.8).abs() < 1e-15);
}

#[test]
fn run_config_validation_and_cadence() {
    assert!(TrainRunConfig::pretrain().validate().is_ok());
    assert!(TrainRunConfig::finetune().validate().is_ok());
    assert_eq!(TrainRunConfig::finetune().batch_size, 128);
    let c = TrainRunConfig { max_iters: 2000, ..TrainRunConfig::pretrain() };
    assert_eq!(c.eval_points(), vec![2000]);
    let c = TrainRunConfig { max_iters: 5000, ..TrainRunConfig::pretrain() };
    assert_eq!(c.eval_points(), vec![2000, 4000, 5000]);
    assert!(TrainRunConfig { max_iters: 100, ..TrainRunConfig::pretrain() }.validate().is_err());
    assert!(TrainRunConfig { learning_rate: 0.0, ..TrainRunConfig::pretrain() }.validate().is_err());
}

fn small_config() -> ModelConfig {
    ModelConfig { d_model: 16, n_blocks: 2, n_heads: 2, vocab: 101, max_context: 500, dropout: 0.2 }
}

fn ppg_streams(subjects: usize, seconds: f64) -> PretrainData {
    let cohort = CohortConfig { subjects, duration_s: seconds, seed: 4, ..CohortConfig::default() };
    let records: Vec<SignalRecord> = synth_cohort(&cohort).unwrap().into_iter().map(|o| o.record).collect();
    build_pretrain_dataset(&DatasetSpec::new(records, 50.0)).unwrap()
}

#[test]
fn initial_loss_near_uniform() {
    let data = ppg_streams(3, 40.0);
    let model = Model::<f32>::new(ModelConfig::default(), HeadKind::Lm, &mut Rng::new(0)).unwrap();
    let mut rng = Rng::new(1);
    let (x, y) = sample_batch(&data.train, 2, 500, &mut rng).unwrap();
    let loss = lm_loss(&model, &x, &y, 2, 500, Mode::Eval, &mut rng).unwrap();
    assert!((loss - 101f64.ln()).abs() < 0.5, "{loss}");
}

fn moving_average(x: &[f64], w: usize) -> Vec<f64> {
    x.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

#[test]
fn small_model_overfits_one_batch() {
    let data = ppg_streams(2, 40.0);
    let mut rng = Rng::new(2);
    let (x, y) = sample_batch(&data.train, 1, 500, &mut rng).unwrap();
    let mut model = Model::<f32>::new(small_config(), HeadKind::Lm, &mut Rng::new(3)).unwrap();
    let cfg = TrainRunConfig { learning_rate: 3e-3, batch_size: 1, ..TrainRunConfig::pretrain() };
    let losses = overfit_batch(&mut model, &cfg, &x, &y, 1, 200).unwrap();
    assert!(losses[199] < 0.5 * losses[0], "{} -> {}", losses[0], losses[199]);
    let smooth = moving_average(&losses, 10);
    let rises = smooth.windows(2).filter(|w| w[1] > w[0] + 1e-3).count();
    assert_eq!(rises, 0);
}

#[test]
fn pretrain_cadence_checkpoints_and_determinism() {
    let data = ppg_streams(3, 40.0);
    let cfg = TrainRunConfig { batch_size: 2, max_iters: 12, eval_interval: 5, eval_iters: 2, seed: 9, ..TrainRunConfig::pretrain() };
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut reports = Vec::new();
    for dir in &dirs {
        let model = Model::<f32>::new(small_config(), HeadKind::Lm, &mut Rng::new(cfg.seed)).unwrap();
        let mut seen = Vec::new();
        let report = pretrain(model, &data, &cfg, Some(dir.path()), &mut |r| seen.push(r.iter)).unwrap();
        assert_eq!(seen, vec![5, 10, 12]);
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.step_losses.len(), 12);
        for it in [5, 10, 12] {
            assert!(PretrainPaths::at_iter(dir.path(), it).join("manifest.json").exists());
        }
        let best: (Model<f32>, CheckpointMeta) = load_checkpoint(&dir.path().join("checkpoints/best")).unwrap();
        assert_eq!(best.1.step as usize, report.best_iter);
        assert_eq!(best.0, report.best_model);
        reports.push(report);
    }
    assert_eq!(reports[0].model, reports[1].model);
    for f in ["loss.csv", "steps.csv", "checkpoints/last/params.bin", "checkpoints/best/params.bin"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let csv = std::fs::read_to_string(dirs[0].path().join("loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn pretrain_rejects_short_streams_and_cls_head() {
    let data = PretrainData { train: vec![1; 400], val: vec![1; 600], train_records: 1 };
    let model = Model::<f32>::new(small_config(), HeadKind::Lm, &mut Rng::new(0)).unwrap();
    let cfg = TrainRunConfig { batch_size: 1, max_iters: 1, eval_interval: 1, eval_iters: 1, ..TrainRunConfig::pretrain() };
    assert!(pretrain(model.clone(), &data, &cfg, None, &mut |_| {}).is_err());
    let cls = Model::<f32>::new(small_config(), HeadKind::Cls, &mut Rng::new(0)).unwrap();
    let data = PretrainData { train: vec![1; 600], val: vec![1; 600], train_records: 1 };
    assert!(pretrain(cls, &data, &cfg, None, &mut |_| {}).is_err());
}

fn af_dataset(subjects: usize, seconds: f64) -> FinetuneDataset {
    let cohort = CohortConfig { subjects, rhythm: CohortRhythm::Mixed, duration_s: seconds, seed: 3, ..CohortConfig::default() };
    let records: Vec<SignalRecord> = synth_cohort(&cohort).unwrap().into_iter().map(|o| o.record).collect();
    build_finetune_dataset(&DatasetSpec::new(records, 50.0)).unwrap()
}

#[test]
fn finetune_census_and_freeze_contract() {
    let ds = af_dataset(2, 14.0);
    let base = Model::<f32>::new(ModelConfig::default(), HeadKind::Lm, &mut Rng::new(5)).unwrap();
    let windows: Vec<&[usize]> = ds.windows.iter().map(|w| w.tokens.as_slice()).collect();
    let cache = PrefixCache::build(&base, &windows).unwrap();
    let labels: Vec<f64> = ds.labels.iter().map(|l| l.as_f64()).collect();
    let train: Vec<usize> = (0..ds.len()).collect();
    let cfg = TrainRunConfig { batch_size: 4, max_iters: 3, eval_interval: 3, ..TrainRunConfig::finetune() };
    let report = finetune_af(&base, &cache, &labels, &train, &cfg).unwrap();
    assert_eq!(report.trainable_scalars, 49_857);
    assert_eq!(report.model.head, HeadKind::Cls);
    for (name, t) in base.params.iter() {
        if name.starts_with("lm_head") {
            continue;
        }
        let after = report.model.params.get(name).unwrap();
        let trainable = report.trainable.iter().any(|n| n == name);
        assert_eq!(after.data() == t.data(), !trainable, "{name}");
    }
    // the final layer norm becomes trainable with the toggle
    let cfg = TrainRunConfig { train_final_norm: true, ..cfg };
    let report = finetune_af(&base, &cache, &labels, &train, &cfg).unwrap();
    assert_eq!(report.trainable_scalars, 49_857 + 128);

    let healthy: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == Label::Healthy).collect();
    let err = finetune_af(&base, &cache, &labels, &healthy, &cfg).unwrap_err();
    assert!(err.to_string().contains("single class"), "{err}");
    let cls = base.swap_head(&mut Rng::new(0)).unwrap();
    assert!(finetune_af(&cls, &cache, &labels, &train, &cfg).is_err());
}

#[test]
fn cached_scores_match_full_forward() {
    let ds = af_dataset(2, 12.0);
    let base = Model::<f64>::new(small_config(), HeadKind::Lm, &mut Rng::new(6)).unwrap();
    let windows: Vec<&[usize]> = ds.windows.iter().map(|w| w.tokens.as_slice()).collect();
    let cache = PrefixCache::build(&base, &windows).unwrap();
    let labels: Vec<f64> = ds.labels.iter().map(|l| l.as_f64()).collect();
    let train: Vec<usize> = (0..ds.len()).collect();
    let cfg = TrainRunConfig { batch_size: 4, max_iters: 5, eval_interval: 5, ..TrainRunConfig::finetune() };
    let model = finetune_af(&base, &cache, &labels, &train, &cfg).unwrap().model;
    let scores = score_windows(&model, &cache, &train).unwrap();
    for (i, s) in scores.iter().enumerate() {
        let full = model.forward_classify(windows[i], Mode::Eval, &mut Rng::new(0)).unwrap();
        assert!((s - full).abs() < 1e-12);
    }
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn brute_force_auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (mut wins, mut pairs) = (0.0, 0usize);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0).then(|| wins / pairs as f64)
}

proptest! {
    #[test]
    fn auc_matches_pair_counting(pairs in prop::collection::vec((0u8..12, any::<bool>()), 1..100)) {
        // coarse scores force plenty of ties
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| f64::from(*s) / 11.0).collect();
        let labels: Vec<bool> = pairs.iter().map(|(_, l)| *l).collect();
        let fast = auc(&scores, &labels);
        let slow = brute_force_auc(&scores, &labels);
        prop_assert_eq!(fast.is_some(), slow.is_some());
        if let (Some(a), Some(b)) = (fast, slow) {
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}

#[test]
fn auc_brute_force_example() {
    let s = [0.2, 0.8, 0.6, 0.4];
    let l = [false, true, true, false];
    assert_eq!(brute_force_auc(&s, &l), Some(1.0));
    assert_eq!(auc(&s, &l), Some(1.0));
}

#[test]
fn loso_fold_contract_and_jobs_invariance() {
    let ds = af_dataset(4, 12.0);
    let base = Model::<f32>::new(small_config(), HeadKind::Lm, &mut Rng::new(8)).unwrap();
    let cfg = TrainRunConfig { batch_size: 4, max_iters: 4, eval_interval: 4, seed: 2, ..TrainRunConfig::finetune() };
    let mut seen = 0;
    let a = loso_evaluate(&base, &ds, &cfg, 1, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 4);
    assert_eq!(a.folds.len(), 4);
    assert_eq!(a.folds_csv().lines().count(), 5);
    assert_eq!(a.scores.len(), ds.len());
    assert!(a.pooled_auc.is_some() && a.subject_auc.is_some());
    // each held-out subject has one rhythm, so within-fold AUC is undefined
    assert!(a.folds.iter().all(|f| f.auc.is_none()));
    let b = loso_evaluate(&base, &ds, &cfg, 3, &mut |_| {}).unwrap();
    assert_eq!(a.folds_csv(), b.folds_csv());
    assert_eq!(a.scores_csv(), b.scores_csv());

    let one_class = FinetuneDataset {
        labels: vec![Label::Healthy; ds.len()],
        ..ds.clone()
    };
    assert!(loso_evaluate(&base, &one_class, &cfg, 1, &mut |_| {}).is_err());
}
