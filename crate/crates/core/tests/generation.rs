use std::cell::RefCell;

use proptest::prelude::*;
use pulsegpt_core::generation::*;
use pulsegpt_core::model::*;
use pulsegpt_core::rng::Rng;
use pulsegpt_core::signal::*;
use pulsegpt_core::synth::*;
use pulsegpt_core::Result;

fn small_config(max_context: usize) -> ModelConfig {
    ModelConfig { d_model: 16, n_blocks: 2, n_heads: 2, vocab: 101, max_context, dropout: 0.2 }
}

fn rigged(token: usize) -> Model<f64> {
    let mut m = Model::<f64>::new(small_config(64), HeadKind::Lm, &mut Rng::new(0)).unwrap();
    m.params.get_mut("lm_head.weight").unwrap().data_mut().fill(0.0);
    let bias = m.params.get_mut("lm_head.bias").unwrap().data_mut();
    bias.fill(0.0);
    bias[token] = 30.0;
    m
}

#[test]
fn rigged_head_always_emits_its_token() {
    let m = rigged(7);
    let out = generate(&m, &[1, 2, 3], 40, &mut Rng::new(4), Sampling::default()).unwrap();
    assert_eq!(out, vec![7; 40]);
}

#[test]
fn same_seed_same_sequence() {
    let m = Model::<f32>::new(small_config(32), HeadKind::Lm, &mut Rng::new(1)).unwrap();
    let a = generate(&m, &[50; 10], 60, &mut Rng::new(9), Sampling::default()).unwrap();
    let b = generate(&m, &[50; 10], 60, &mut Rng::new(9), Sampling::default()).unwrap();
    let c = generate(&m, &[50; 10], 60, &mut Rng::new(10), Sampling::default()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(generate(&m, &[], 5, &mut Rng::new(0), Sampling::default()).is_err());
    assert!(generate(&m, &[1], 0, &mut Rng::new(0), Sampling::default()).unwrap().is_empty());
    assert!(generate(&m, &[1], 3, &mut Rng::new(0), Sampling::Temperature(0.0)).is_err());
    let cls = m.swap_head(&mut Rng::new(0)).unwrap();
    assert!(generate(&cls, &[1], 3, &mut Rng::new(0), Sampling::default()).is_err());
}

struct FixedLogits(Vec<f64>);

impl NextToken for FixedLogits {
    fn max_context(&self) -> usize {
        8
    }
    fn next_logits(&self, _: &[usize]) -> Result<Vec<f64>> {
        Ok(self.0.clone())
    }
}

#[test]
fn sample_frequencies_follow_softmax() {
    let logits: Vec<f64> = (0..101).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
    let draws = generate(&FixedLogits(logits.clone()), &[0], 10_000, &mut Rng::new(3), Sampling::default()).unwrap();
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    let mut counts = vec![0usize; 101];
    for d in draws {
        counts[d] += 1;
    }
    for (c, l) in counts.iter().zip(&logits) {
        assert!((*c as f64 / 10_000.0 - l.exp() / z).abs() < 0.02);
    }
    // temperature sharpens toward the argmax
    let hot = generate(&FixedLogits(vec![0.0, 1.0]), &[0], 4000, &mut Rng::new(5), Sampling::Temperature(0.25)).unwrap();
    let frac = hot.iter().filter(|&&t| t == 1).count() as f64 / 4000.0;
    let want = 1.0 / (1.0 + (-4.0f64).exp());
    assert!((frac - want).abs() < 0.02, "{frac}");
}

/// Records every context it is shown.
struct Recorder {
    limit: usize,
    seen: RefCell<Vec<Vec<usize>>>,
}

impl NextToken for Recorder {
    fn max_context(&self) -> usize {
        self.limit
    }
    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        self.seen.borrow_mut().push(context.to_vec());
        let mut l = vec![0.0; 101];
        l[(context.len() * 13) % 101] = 100.0;
        Ok(l)
    }
}

#[test]
fn context_is_cropped_to_trailing_tokens() {
    let r = Recorder { limit: 5, seen: RefCell::new(Vec::new()) };
    let context = vec![1, 2, 3, 4, 5, 6, 7];
    let out = generate(&r, &context, 20, &mut Rng::new(0), Sampling::Argmax).unwrap();
    let full: Vec<usize> = context.iter().chain(&out).copied().collect();
    for (k, ctx) in r.seen.borrow().iter().enumerate() {
        let end = context.len() + k;
        assert_eq!(ctx.as_slice(), &full[end - 5..end]);
    }
}

/// Knows the whole sequence and always predicts its true continuation.
struct Playback(Vec<usize>);

impl NextToken for Playback {
    fn max_context(&self) -> usize {
        20
    }
    fn next_logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        let k = (context.len()..self.0.len()).find(|&k| self.0[k - context.len()..k] == *context).unwrap();
        let mut l = vec![0.0; 101];
        l[self.0[k]] = 60.0;
        Ok(l)
    }
}

#[test]
fn playback_oracle_has_zero_error() {
    let cfg = HorizonConfig { context_len: 20, horizon: 10, ..HorizonConfig::default() };
    let truth: Vec<usize> = (0..30).map(|i| (i * 7 + i * i) % 101).collect();
    let windows = vec![TokenWindow { tokens: truth.clone(), scale_min: 0.0, scale_max: 1.0, fs: 50.0, modality: Modality::Ppg }];
    let report = evaluate_horizon(&Playback(truth.clone()), &windows, &cfg).unwrap();
    assert_eq!(report.stats.steps.len(), 10);
    for s in &report.stats.steps {
        assert_eq!((s.median, s.q25, s.q75, s.n), (0.0, 0.0, 0.0, 1));
    }
    assert_eq!(report.rollouts[0].prediction, truth[20..].to_vec());
}

fn windows_from_synth(n: usize, len: usize) -> Vec<TokenWindow> {
    let out = synth_ppg(&SynthConfig::ppg(50.0, 30.0, 1)).unwrap();
    let mut w = horizon_windows(&out.record, len, 37).unwrap();
    w.truncate(n);
    w
}

#[test]
fn horizon_windows_use_full_window_scale() {
    let out = synth_ppg(&SynthConfig::ppg(50.0, 30.0, 1)).unwrap();
    let w = horizon_windows(&out.record, 750, 250).unwrap();
    assert_eq!(w.len(), window_count(1500, 750, 250));
    for win in &w {
        assert_eq!(win.tokens.len(), 750);
        assert_eq!(*win.tokens.iter().min().unwrap(), 0);
        assert_eq!(*win.tokens.iter().max().unwrap(), 100);
    }
}

#[test]
fn horizon_stats_ignore_order_and_jobs() {
    let model = Model::<f32>::new(small_config(24), HeadKind::Lm, &mut Rng::new(2)).unwrap();
    let cfg = HorizonConfig { context_len: 24, horizon: 8, seed: 5, ..HorizonConfig::default() };
    let windows = windows_from_synth(6, 32);
    let a = evaluate_horizon(&model, &windows, &cfg).unwrap();
    let b = evaluate_horizon(&model, &windows, &HorizonConfig { jobs: 4, ..cfg.clone() }).unwrap();
    assert_eq!(a, b);
    for s in &a.stats.steps {
        assert!(s.q25 <= s.median && s.median <= s.q75);
        assert!((0.0..=100.0).contains(&s.q75));
        assert_eq!(s.n, 6);
    }
    // greedy decoding is a pure function of each window, so order cannot matter
    let greedy = HorizonConfig { sampling: Sampling::Argmax, ..cfg };
    let mut reversed = windows.clone();
    reversed.reverse();
    let x = evaluate_horizon(&model, &windows, &greedy).unwrap();
    let y = evaluate_horizon(&model, &reversed, &greedy).unwrap();
    assert_eq!(x.stats, y.stats);
    assert!(evaluate_horizon(&model, &windows[..1], &HorizonConfig { horizon: 9, ..greedy }).is_err());
}

#[test]
fn rollout_exports() {
    let dir = tempfile::tempdir().unwrap();
    let model = Model::<f32>::new(small_config(24), HeadKind::Lm, &mut Rng::new(2)).unwrap();
    let cfg = HorizonConfig { context_len: 24, horizon: 8, rollouts: 2, ..HorizonConfig::default() };
    let report = evaluate_horizon(&model, &windows_from_synth(2, 32), &cfg).unwrap();
    assert_eq!(report.rollouts.len(), 4);
    report.write(dir.path(), 1, 24).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("horizon.csv")).unwrap();
    assert!(csv.starts_with("step,median,q25,q75,n\n"));
    assert_eq!(csv.lines().count(), 9);
    let svg = std::fs::read_to_string(dir.path().join("rollout-000.svg")).unwrap();
    for color in ["#000000", "#1f4fd1", "#d11f1f"] {
        assert!(svg.contains(color));
    }
    assert!(!dir.path().join("rollout-001.csv").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn generated_tokens_stay_in_vocabulary(seed in any::<u64>(), start in 0usize..=100, temp in 0.2f64..5.0) {
        let m = Model::<f32>::new(small_config(16), HeadKind::Lm, &mut Rng::new(seed)).unwrap();
        let out = generate(&m, &[start; 4], 30, &mut Rng::new(seed), Sampling::Temperature(temp)).unwrap();
        prop_assert!(out.iter().all(|&t| t <= TOKEN_MAX));
    }
}
