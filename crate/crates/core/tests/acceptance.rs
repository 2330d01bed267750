//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! `ACCEPTANCE_ONLY=1,2,4` restricts the run to the listed criteria (a
//! criterion whose inputs come from a skipped one is reported as SKIP).
//! `ACCEPTANCE_BASE=<checkpoint dir>` reuses a pre-trained model for 6-11
//! instead of running criterion 5, which is then reported as SKIP.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use pulsegpt_core::autodiff::AttentionSpec;
use pulsegpt_core::gradcheck::{central_differences, relative_error};
use pulsegpt_core::interpret::*;
use pulsegpt_core::model::*;
use pulsegpt_core::rng::Rng;
use pulsegpt_core::signal::*;
use pulsegpt_core::synth::*;
use pulsegpt_core::training::*;
use pulsegpt_core::{Array, Mode, Tape, Var};

type Check = Result<String, String>;

/// Pinned thresholds.
const DEFAULT_PARAMS: usize = 443_493;
const FINETUNE_PARAMS: usize = 49_857;
const GRAD_REL_ERR: f64 = 1e-4;
const ROW_SUM_TOL: f64 = 1e-6;
const OVERFIT_LOSS: f64 = 0.3;
const OVERFIT_ITERS: usize = 200;
const DESK_ITERS: usize = 5000;
const PEAK_ALIGN_TOKENS: usize = 3;
/// Share of a head's peaks that must sit on a systolic peak.
const ALIGNED_PEAK_SHARE: f64 = 0.75;
const LOSO_AUC: f64 = 0.90;
const FOLD_SECONDS: f64 = 15.0 * 60.0;
const DELTA_SUM_TOL: f64 = 1e-6;
/// A beat is irregular when it lands this fraction of the previous interval
/// away from where the previous interval predicts.
const IRREGULAR_FRACTION: f64 = 0.2;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn records(cohort: &CohortConfig) -> Vec<SynthOutput> {
    synth_cohort(cohort).expect("cohort synthesizes")
}

// ------------------------------------------------------------------ 1

fn parameter_count() -> Check {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(cfg.clone(), HeadKind::Lm, &mut Rng::new(0)).map_err(err)?;
    let counted: usize = model.params.iter().map(|(_, t)| t.len()).sum();
    ensure(counted == DEFAULT_PARAMS && cfg.param_count(HeadKind::Lm) == DEFAULT_PARAMS, || {
        format!("{counted} parameters, expected {DEFAULT_PARAMS}")
    })?;
    Ok(format!("{counted} parameters"))
}

// ------------------------------------------------------------------ 2

fn normal_array(shape: &[usize], rng: &mut Rng) -> Array<f64> {
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
}

/// Contracts the output with fixed random weights so every element matters.
fn contract(t: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let w = normal_array(t.shape(y), &mut Rng::new(seed));
    let w = t.constant(w);
    let p = t.mul(y, w).unwrap();
    t.sum(p)
}

type OpFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;

fn op_error(inputs: &[Array<f64>], f: &OpFn) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let est = central_differences(inputs[i].data(), 1e-5, |x| {
            let mut xs = inputs.to_vec();
            xs[i].data_mut().copy_from_slice(x);
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|a| t.param(a.clone())).collect();
            let o = f(&mut t, &vs);
            t.value(o).item()
        });
        worst = worst.max(relative_error(&analytic, &est.gradient));
    }
    worst
}

fn autodiff_correctness() -> Check {
    let mut rng = Rng::new(2024);
    let r = &mut rng;
    let ops: Vec<(&str, Vec<Array<f64>>, OpFn)> = vec![
        ("matmul", vec![normal_array(&[2, 3, 4], r), normal_array(&[4, 5], r)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            contract(t, y, 1)
        })),
        ("add", vec![normal_array(&[2, 3, 4], r), normal_array(&[4], r)], Box::new(|t, v| {
            let y = t.add(v[0], v[1]).unwrap();
            contract(t, y, 2)
        })),
        ("mul", vec![normal_array(&[3, 4], r), normal_array(&[3, 4], r)], Box::new(|t, v| {
            let y = t.mul(v[0], v[1]).unwrap();
            contract(t, y, 3)
        })),
        ("scale-mean", vec![normal_array(&[6], r)], Box::new(|t, v| {
            let y = t.scale(v[0], 1.3);
            let y = t.mul(y, v[0]).unwrap();
            t.mean(y)
        })),
        ("relu", vec![normal_array(&[4, 5], r)], Box::new(|t, v| {
            let y = t.relu(v[0]);
            contract(t, y, 4)
        })),
        ("transpose", vec![normal_array(&[2, 3, 4], r)], Box::new(|t, v| {
            let y = t.transpose(v[0]).unwrap();
            contract(t, y, 5)
        })),
        ("masked-softmax", vec![normal_array(&[2, 4, 4], r)], Box::new(|t, v| {
            let y = t.causal_mask(v[0]).unwrap();
            let y = t.softmax_rows(y).unwrap();
            contract(t, y, 6)
        })),
        ("layer-norm", vec![normal_array(&[2, 3, 8], r), normal_array(&[8], r), normal_array(&[8], r)], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            contract(t, y, 7)
        })),
        ("embed", vec![normal_array(&[5, 3], r)], Box::new(|t, v| {
            let y = t.embed(v[0], &[4, 0, 4, 2, 1, 1], &[2, 3]).unwrap();
            contract(t, y, 8)
        })),
        ("dropout", vec![normal_array(&[4, 6], r)], Box::new(|t, v| {
            let y = t.dropout(v[0], 0.2, &mut Rng::new(5), Mode::Train).unwrap();
            contract(t, y, 9)
        })),
        ("concat-slice", vec![normal_array(&[2, 4, 3], r), normal_array(&[2, 4, 5], r)], Box::new(|t, v| {
            let y = t.concat_features(&[v[0], v[1]]).unwrap();
            let y = t.slice_features(y, 2, 4).unwrap();
            let y = t.slice_positions(y, 1, 3).unwrap();
            contract(t, y, 10)
        })),
        ("cross-entropy", vec![normal_array(&[2, 3, 7], r)], Box::new(|t, v| t.cross_entropy(v[0], &[1, 6, 0, 3, 3, 2]).unwrap())),
        ("bce", vec![normal_array(&[5, 1], r)], Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0]).unwrap())),
        (
            "causal-attention",
            vec![normal_array(&[2, 6, 8], r), normal_array(&[2, 6, 8], r), normal_array(&[2, 6, 8], r)],
            Box::new(|t, v| {
                let spec = AttentionSpec { heads: 2, dropout: 0.1 };
                let y = t.causal_attention(v[0], v[1], v[2], spec, &mut Rng::new(3), Mode::Train).unwrap();
                contract(t, y, 11)
            }),
        ),
    ];
    let mut worst = (0.0, "");
    for (name, inputs, f) in &ops {
        let e = op_error(inputs, f);
        ensure(e < GRAD_REL_ERR, || format!("{name}: relative error {e:.2e}"))?;
        if e > worst.0 {
            worst = (e, name);
        }
    }
    // full model loss, d_model 8, 2 blocks, T 16, every parameter tensor
    let cfg = ModelConfig { d_model: 8, n_blocks: 2, n_heads: 2, vocab: 101, max_context: 16, dropout: 0.1 };
    let mut model = Model::<f64>::new(cfg, HeadKind::Lm, &mut Rng::new(7)).map_err(err)?;
    let mut rng = Rng::new(8);
    for (_, t) in model.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.5 * rng.normal());
    }
    let tokens: Vec<usize> = (0..17).map(|_| rng.below(101)).collect();
    let loss = |m: &Model<f64>, tape: &mut Tape<f64>, trainable: bool| {
        let p = m.bind(tape, |_| trainable);
        let fwd = m.forward_tape(tape, &p, &tokens[..16], 1, 16, Mode::Train, &mut Rng::new(11)).unwrap();
        (tape.cross_entropy(fwd.output, &tokens[1..]).unwrap(), p)
    };
    let mut tape = Tape::new();
    let (l, p) = loss(&model, &mut tape, true);
    tape.backward(l).map_err(err)?;
    let mut model_worst: f64 = 0.0;
    for (name, var) in p.iter() {
        let analytic = tape.grad(var).unwrap().data().to_vec();
        let x0 = model.params.get(name).unwrap().data().to_vec();
        let mut probe = model.clone();
        let est = central_differences(&x0, 1e-5, |x| {
            probe.params.get_mut(name).unwrap().data_mut().copy_from_slice(x);
            let mut t = Tape::new();
            let (l, _) = loss(&probe, &mut t, false);
            t.value(l).item()
        });
        let e = relative_error(&analytic, &est.gradient);
        ensure(e < GRAD_REL_ERR, || format!("model {name}: relative error {e:.2e}"))?;
        model_worst = model_worst.max(e);
    }
    Ok(format!("{} ops, worst {:.1e} ({}); full model worst {:.1e}", ops.len(), worst.0, worst.1, model_worst))
}

// ------------------------------------------------------------------ 3

fn attention_structure() -> Check {
    let cfg = ModelConfig { max_context: 128, ..ModelConfig::default() };
    let mut worst_sum: f64 = 0.0;
    for trial in 0..3u64 {
        let model = Model::<f64>::new(cfg.clone(), HeadKind::Lm, &mut Rng::new(100 + trial)).map_err(err)?;
        let mut rng = Rng::new(200 + trial);
        let tokens: Vec<usize> = (0..128).map(|_| rng.below(101)).collect();
        let (logits, rec) = model.forward(&tokens, Mode::Eval, &mut Rng::new(0)).map_err(err)?;
        for l in 0..rec.layers {
            for h in 0..rec.heads {
                let m = rec.matrix(l, h);
                for i in 0..rec.len {
                    let row = &m[i * rec.len..(i + 1) * rec.len];
                    worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
                    ensure(row[i + 1..].iter().all(|&w| w == 0.0), || format!("layer {l} head {h} row {i} attends ahead"))?;
                }
            }
        }
        for _ in 0..4 {
            let j = rng.below(128);
            let mut changed = tokens.clone();
            changed[j] = (changed[j] + 1 + rng.below(100)) % 101;
            let (other, _) = model.forward(&changed, Mode::Eval, &mut Rng::new(0)).map_err(err)?;
            for i in 0..128 {
                let same = logits.row(i) == other.row(i);
                ensure(i >= j || same, || format!("changing token {j} moved logits at {i}"))?;
                ensure(i != j || !same, || format!("changing token {j} left its own logits unchanged"))?;
            }
        }
    }
    ensure(worst_sum <= ROW_SUM_TOL, || format!("row sum off by {worst_sum:.2e}"))?;
    Ok(format!("rows sum to 1 within {worst_sum:.1e}; causal under 12 perturbations"))
}

// ------------------------------------------------------------------ 4

fn tokenizer_properties() -> Check {
    let mut rng = Rng::new(4);
    for trial in 0..1000 {
        let n = 2 + rng.below(499);
        let scale = 10f64.powf(rng.uniform_in(-3.0, 3.0));
        let x: Vec<f64> = (0..n).map(|_| scale * rng.normal()).collect();
        let w = tokenize_window(&x, 50.0, Modality::Ppg).map_err(err)?;
        ensure(w.tokens.iter().all(|&t| t <= 100), || format!("trial {trial}: token above 100"))?;
        let (a, b) = (rng.uniform_in(0.01, 100.0), rng.uniform_in(-1e3, 1e3));
        let y: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        let wy = tokenize_window(&y, 50.0, Modality::Ppg).map_err(err)?;
        ensure(wy.tokens == w.tokens, || format!("trial {trial}: affine map changed tokens"))?;
        let bound = (w.scale_max - w.scale_min) / 200.0;
        let back = detokenize(&w);
        let worst = x.iter().zip(&back).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        ensure(worst <= bound * (1.0 + 1e-12), || format!("trial {trial}: round trip error {worst} > {bound}"))?;
        let len = 500 + rng.below(20_000);
        let expected = (len - 500) / 50 + 1;
        ensure(window_count(len, 500, 50) == expected, || format!("window count wrong for L={len}"))?;
    }
    // the count formula against actual windowing
    for len in [500, 549, 550, 1234] {
        let rec = SignalRecord::new((0..len).map(|i| (i as f64 * 0.2).sin()).collect(), 50.0, Modality::Ppg, "w")
            .map_err(err)?
            .with_label(Label::Healthy);
        let ds = build_finetune_dataset(&DatasetSpec::new(vec![rec], 50.0)).map_err(err)?;
        ensure(ds.len() == (len - 500) / 50 + 1, || format!("{} windows for L={len}", ds.len()))?;
    }
    Ok("1000 random windows: range, affine invariance, round trip, window count".into())
}

// ------------------------------------------------------------------ 5

struct Desk {
    model: Model<f32>,
}

fn desk_pretraining(desk: &mut Option<Desk>) -> Check {
    let cohort = CohortConfig { seed: 1, ..CohortConfig::default() };
    let recs: Vec<SignalRecord> = records(&cohort).into_iter().map(|o| o.record).collect();
    let data = build_pretrain_dataset(&DatasetSpec::new(recs, 50.0)).map_err(err)?;
    let cfg = TrainRunConfig { batch_size: 2, max_iters: DESK_ITERS, eval_iters: 20, ..TrainRunConfig::pretrain() };
    let model = Model::<f32>::new(ModelConfig::default(), HeadKind::Lm, &mut Rng::new(cfg.seed)).map_err(err)?;
    let start = Instant::now();
    let report = pretrain(model, &data, &cfg, None, &mut |r| {
        eprintln!("    desk iter {:>5} train {:.4} val {:.4} ({:.0}s)", r.iter, r.train_loss, r.val_loss, start.elapsed().as_secs_f64());
    })
    .map_err(err)?;
    let pretrain_secs = start.elapsed().as_secs_f64();
    let final_val = report.rows.last().map(|r| r.val_loss).unwrap_or(f64::NAN);
    let target = 101f64.ln() - 1.0;
    *desk = Some(Desk { model: report.best_model.clone() });

    // single-batch overfit with the default architecture
    let mut rng = Rng::new(3);
    let (x, y) = sample_batch(&data.train, 1, 500, &mut rng).map_err(err)?;
    let mut fresh = Model::<f32>::new(ModelConfig::default(), HeadKind::Lm, &mut Rng::new(1)).map_err(err)?;
    let ocfg = TrainRunConfig { batch_size: 1, learning_rate: 1e-3, ..TrainRunConfig::pretrain() };
    let losses = overfit_batch(&mut fresh, &ocfg, &x, &y, 1, OVERFIT_ITERS).map_err(err)?;
    let reached = losses.iter().position(|&l| l < OVERFIT_LOSS);

    let summary = format!(
        "{} subjects x {:.0} s, {DESK_ITERS} iters in {:.0} s: final val CE {final_val:.3} (best {:.3}) vs {target:.3}; overfit {}",
        cohort.subjects,
        cohort.duration_s,
        pretrain_secs,
        report.best_val,
        reached.map_or_else(|| format!("min {:.3} in {OVERFIT_ITERS} iters", losses.iter().copied().fold(f64::INFINITY, f64::min)), |i| {
            format!("< {OVERFIT_LOSS} at iter {}", i + 1)
        })
    );
    ensure(final_val < target && reached.is_some() && pretrain_secs <= 3600.0, || summary.clone())?;
    Ok(summary)
}

// ------------------------------------------------------------------ 6, 7, 8

/// Regular PPG subjects never seen in pre-training.
fn held_out() -> Vec<SynthOutput> {
    records(&CohortConfig { seed: 2, subjects: 3, duration_s: 60.0, ..CohortConfig::default() })
}

fn attention_broadening(model: &Model<f32>) -> Check {
    let recs: Vec<SignalRecord> = held_out().into_iter().map(|o| o.record.with_label(Label::Healthy)).collect();
    let spec = DatasetSpec { window_shift: 500, ..DatasetSpec::new(recs, 50.0) };
    let ds = build_finetune_dataset(&spec).map_err(err)?;
    let mut rng = Rng::new(0);
    let recs = ds
        .windows
        .iter()
        .map(|w| model.forward(&w.tokens, Mode::Eval, &mut rng).map(|r| r.1))
        .collect::<pulsegpt_core::Result<Vec<_>>>()
        .map_err(err)?;
    let table = lookback_distance(&recs, 50.0).map_err(err)?;
    let first = table.layer(1).ok_or("no layer 1")?;
    let last = table.layer(model.config.n_blocks).ok_or("no final layer")?;
    let trend: Vec<String> = table.rows.iter().map(|r| format!("{:.2}", r.mean_s)).collect();
    let msg = format!("{} windows; look-back by layer (s): {}", ds.len(), trend.join(" "));
    ensure(last.mean_s > first.mean_s, || msg.clone())?;
    Ok(msg)
}

fn similarity_clustering(model: &Model<f32>) -> Check {
    let mut rising = Vec::new();
    let mut falling = Vec::new();
    for out in held_out() {
        for start in [0, 1000, 2000] {
            let w = tokenize_window(&out.record.samples[start..start + 500], 50.0, Modality::Ppg).map_err(err)?;
            let reference = rising_reference(&w, 50).ok_or("window without a rising slope")?;
            let selected = select_slope_tokens(&w, reference, SLOPE_TOLERANCE).map_err(err)?;
            let trace = similarity_trace(model, &w.tokens, &selected, reference).map_err(err)?;
            let last = trace.stages() - 1;
            rising.extend(trace.class_mean(SlopeClass::Rising, last));
            falling.extend(trace.class_mean(SlopeClass::Falling, last));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    ensure(!rising.is_empty() && !falling.is_empty(), || "no slope tokens selected".into())?;
    let (r, f) = (mean(&rising), mean(&falling));
    let msg = format!("final-stage cosine to rising reference: rising {r:.3} vs falling {f:.3} over {} windows", rising.len());
    ensure(r > f, || msg.clone())?;
    Ok(msg)
}

fn peaks_and_head_maps(model: &Model<f32>) -> Check {
    // exact agreement with an exhaustive oracle
    let mut rng = Rng::new(8);
    for trial in 0..1000 {
        let n = 3 + rng.below(300);
        let levels = [3, 8, 100, 1_000_000][trial % 4];
        let x: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64).collect();
        let got = find_attention_peaks(&x);
        let want = oracle_peaks(&x, PEAK_MIN_DISTANCE, PEAK_REL_HEIGHT);
        ensure(got == want, || format!("trial {trial}: {got:?} vs oracle {want:?}"))?;
    }
    // shift-and-add maps on a regular held-out subject
    let out = held_out().swap_remove(0);
    let n = model.config.max_context;
    let start = 250;
    let (tokens, _, _) = quantize(&out.record.samples[start..start + 2 * n - 1]).map_err(err)?;
    let maps = shift_and_add_head_maps(model, &tokens, n).map_err(err)?;
    let systolic: Vec<usize> = out.peak_samples.iter().filter(|&&p| p >= start && p < start + n).map(|p| p - start).collect();
    let near = |p: usize| systolic.iter().any(|&s| s.abs_diff(p) <= PEAK_ALIGN_TOKENS);
    let mut lines = Vec::new();
    let mut aligned = Vec::new();
    for m in &maps {
        let hits = m.peaks.iter().filter(|&&p| near(p)).count();
        let found = systolic.iter().filter(|&&s| m.peaks.iter().any(|&p| p.abs_diff(s) <= PEAK_ALIGN_TOKENS)).count();
        lines.push(format!("h{}:{hits}/{}", m.head, m.peaks.len()));
        // every beat found, and the head is beat-locked rather than densely peaked
        if !systolic.is_empty() && found == systolic.len() && hits as f64 >= ALIGNED_PEAK_SHARE * m.peaks.len() as f64 {
            aligned.push(m.head);
        }
    }
    let msg = format!(
        "1000 oracle vectors match; {} systolic peaks; aligned heads {:?} (hits/peaks {})",
        systolic.len(),
        aligned,
        lines.join(" ")
    );
    ensure(!aligned.is_empty(), || msg.clone())?;
    Ok(msg)
}

/// Every strict local maximum (leftmost point of a plateau, interior only)
/// above the height floor, then tallest-first suppression.
fn oracle_peaks(x: &[f64], distance: usize, rel: f64) -> Vec<usize> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cand: Vec<usize> = (1..x.len())
        .filter(|&i| {
            let mut r = i;
            while r + 1 < x.len() && x[r + 1] == x[i] {
                r += 1;
            }
            x[i - 1] < x[i] && r + 1 < x.len() && x[r + 1] < x[i] && x[i] >= rel * max
        })
        .collect();
    cand.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for c in cand {
        if keep.iter().all(|&k| k.abs_diff(c) >= distance) {
            keep.push(c);
        }
    }
    keep.sort_unstable();
    keep
}

// ------------------------------------------------------------------ 9

fn finetune_contract(model: &Model<f32>) -> Check {
    let cfg = TrainRunConfig { batch_size: 16, max_iters: 5, eval_interval: 5, seed: 4, ..TrainRunConfig::finetune() };
    let cohort = records(&CohortConfig { seed: 6, subjects: 2, rhythm: CohortRhythm::Mixed, duration_s: 20.0, ..CohortConfig::default() });
    let recs: Vec<SignalRecord> = cohort.into_iter().map(|o| o.record).collect();
    let ds = build_finetune_dataset(&DatasetSpec::new(recs, 50.0)).map_err(err)?;
    let windows: Vec<&[usize]> = ds.windows.iter().map(|w| w.tokens.as_slice()).collect();
    let cache = PrefixCache::build(model, &windows).map_err(err)?;
    let labels: Vec<f64> = ds.labels.iter().map(|l| l.as_f64()).collect();
    let train: Vec<usize> = (0..ds.len()).collect();
    let report = finetune_af(model, &cache, &labels, &train, &cfg).map_err(err)?;
    ensure(report.trainable_scalars == FINETUNE_PARAMS, || format!("{} trainable, expected {FINETUNE_PARAMS}", report.trainable_scalars))?;
    let (start, _) = prepare_finetune(model, &cfg).map_err(err)?;
    let mut frozen = 0;
    for (name, after) in report.model.params.iter() {
        let before = start.params.get(name).map_err(err)?;
        let same = before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if report.trainable.iter().any(|t| t == name) {
            ensure(!same, || format!("trainable {name} did not move"))?;
        } else {
            ensure(same, || format!("frozen {name} changed"))?;
            frozen += after.len();
        }
    }
    Ok(format!("{} trainable scalars in {} tensors; {frozen} frozen scalars bit-identical", report.trainable_scalars, report.trainable.len()))
}

// ------------------------------------------------------------------ 10, 11

fn af_cohort() -> CohortConfig {
    CohortConfig { seed: 3, subjects: 12, rhythm: CohortRhythm::Mixed, duration_s: 180.0, ..CohortConfig::default() }
}

fn af_dataset(cohort: &CohortConfig) -> Result<FinetuneDataset, String> {
    let recs: Vec<SignalRecord> = records(cohort).into_iter().map(|o| o.record).collect();
    build_finetune_dataset(&DatasetSpec::new(recs, 50.0)).map_err(err)
}

fn desk_af_classification(model: &Model<f32>) -> Check {
    let cohort = af_cohort();
    let ds = af_dataset(&cohort)?;
    let cfg = TrainRunConfig::finetune();
    let start = Instant::now();
    let report = loso_evaluate(model, &ds, &cfg, 1, &mut |f| {
        eprintln!("    fold {:>2} {} mean score {:.3} ({:.0}s)", f.fold, f.subject, f.mean_score, f.seconds);
    })
    .map_err(err)?;
    let total = start.elapsed().as_secs_f64();
    let fold_sum: f64 = report.folds.iter().map(|f| f.seconds).sum();
    let shared = (total - fold_sum) / report.folds.len() as f64;
    let worst_fold = report.folds.iter().map(|f| f.seconds).fold(0.0, f64::max) + shared;
    let auc = report.pooled_auc.unwrap_or(f64::NAN);
    let msg = format!(
        "{} subjects, {} windows: pooled AUC {auc:.3} (subject AUC {}); slowest fold {worst_fold:.0} s, total {total:.0} s",
        report.folds.len(),
        ds.len(),
        report.subject_auc.map_or("undefined".into(), |a| format!("{a:.3}"))
    );
    ensure(auc >= LOSO_AUC && worst_fold <= FOLD_SECONDS, || msg.clone())?;
    Ok(msg)
}

/// Marks positions between where each beat was expected (previous beat plus
/// previous interval) and where it occurred, for beats off by more than
/// `IRREGULAR_FRACTION` of the previous interval.
fn irregular_mask(peaks: &[usize], start: usize, len: usize) -> Vec<bool> {
    let mut mask = vec![false; len];
    for k in 2..peaks.len() {
        let prev = (peaks[k - 1] - peaks[k - 2]) as f64;
        let expected = peaks[k - 1] as f64 + prev;
        let actual = peaks[k] as f64;
        if (actual - expected).abs() > IRREGULAR_FRACTION * prev {
            let lo = expected.min(actual).round() as usize;
            let hi = expected.max(actual).round() as usize;
            for p in lo.max(start)..=hi.min(start + len - 1) {
                if p >= start {
                    mask[p - start] = true;
                }
            }
        }
    }
    mask
}

fn attention_delta_sanity(model: &Model<f32>) -> Check {
    let train = af_dataset(&af_cohort())?;
    let windows: Vec<&[usize]> = train.windows.iter().map(|w| w.tokens.as_slice()).collect();
    let cache = PrefixCache::build(model, &windows).map_err(err)?;
    let labels: Vec<f64> = train.labels.iter().map(|l| l.as_f64()).collect();
    let all: Vec<usize> = (0..train.len()).collect();
    let tuned = finetune_af(model, &cache, &labels, &all, &TrainRunConfig::finetune()).map_err(err)?.model;

    let unseen = records(&CohortConfig { seed: 4, subjects: 2, rhythm: CohortRhythm::Af, duration_s: 60.0, ..CohortConfig::default() });
    let (mut irr, mut reg) = ((0.0, 0usize), (0.0, 0usize));
    let mut worst_sum: f64 = 0.0;
    let mut windows = 0;
    for out in &unseen {
        for start in (0..=out.record.samples.len() - 500).step_by(250) {
            let w = tokenize_window(&out.record.samples[start..start + 500], 50.0, Modality::Ppg).map_err(err)?;
            let delta = attention_delta(model, &tuned, &w.tokens).map_err(err)?;
            worst_sum = worst_sum.max(delta.delta.iter().sum::<f64>().abs());
            let mask = irregular_mask(&out.peak_samples, start, 500);
            for (d, m) in delta.increases().iter().zip(&mask) {
                let acc = if *m { &mut irr } else { &mut reg };
                acc.0 += d;
                acc.1 += 1;
            }
            windows += 1;
        }
    }
    let (mi, mr) = (irr.0 / irr.1.max(1) as f64, reg.0 / reg.1.max(1) as f64);
    let msg = format!(
        "{windows} unseen AF windows: |sum delta| <= {worst_sum:.1e}; mean increase irregular {mi:.2e} ({} tokens) vs regular {mr:.2e} ({} tokens)",
        irr.1, reg.1
    );
    ensure(worst_sum <= DELTA_SUM_TOL && irr.1 > 0 && mi > mr, || msg.clone())?;
    Ok(msg)
}

// ------------------------------------------------------------------ 12

fn files_equal(a: &Path, b: &Path) -> Result<usize, String> {
    let mut n = 0;
    let mut entries: Vec<_> = std::fs::read_dir(a).map_err(err)?.map(|e| e.unwrap().path()).collect();
    entries.sort();
    for p in entries {
        let q = b.join(p.file_name().unwrap());
        if p.is_dir() {
            n += files_equal(&p, &q)?;
        } else {
            let (x, y) = (std::fs::read(&p).map_err(err)?, std::fs::read(&q).map_err(|e| format!("{}: {e}", q.display()))?);
            ensure(x == y, || format!("{} differs between runs", p.display()))?;
            n += 1;
        }
    }
    Ok(n)
}

fn determinism() -> Check {
    let dirs: Vec<_> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    // reduced pre-training
    let recs: Vec<SignalRecord> =
        records(&CohortConfig { seed: 1, subjects: 3, duration_s: 60.0, ..CohortConfig::default() }).into_iter().map(|o| o.record).collect();
    let data = build_pretrain_dataset(&DatasetSpec::new(recs, 50.0)).map_err(err)?;
    let cfg = TrainRunConfig { batch_size: 2, max_iters: 6, eval_interval: 3, eval_iters: 2, ..TrainRunConfig::pretrain() };
    let mut bases = Vec::new();
    for d in &dirs {
        let model = Model::<f32>::new(ModelConfig::default(), HeadKind::Lm, &mut Rng::new(cfg.seed)).map_err(err)?;
        bases.push(pretrain(model, &data, &cfg, Some(&d.path().join("pre")), &mut |_| {}).map_err(err)?.model);
    }
    let pre_files = files_equal(&dirs[0].path().join("pre"), &dirs[1].path().join("pre"))?;
    // reduced LOSO on top of it, single-threaded and with two workers
    let ds = af_dataset(&CohortConfig { subjects: 4, duration_s: 30.0, ..af_cohort() })?;
    let fcfg = TrainRunConfig { batch_size: 16, max_iters: 4, eval_interval: 4, ..TrainRunConfig::finetune() };
    for (i, d) in dirs.iter().enumerate() {
        loso_evaluate(&bases[i], &ds, &fcfg, 1, &mut |_| {}).map_err(err)?.write(&d.path().join("loso")).map_err(err)?;
    }
    let threaded = tempfile::tempdir().unwrap();
    loso_evaluate(&bases[0], &ds, &fcfg, 2, &mut |_| {}).map_err(err)?.write(threaded.path()).map_err(err)?;
    let loso_files = files_equal(&dirs[0].path().join("loso"), &dirs[1].path().join("loso"))?;
    files_equal(&dirs[0].path().join("loso"), threaded.path())?;
    Ok(format!("{pre_files} pre-training artifacts and {loso_files} LOSO CSVs byte-identical across reruns"))
}

// ------------------------------------------------------------------ driver

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|s| s.contains(&k));
    let mut failures = 0;
    let mut report = |k: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        if !wanted(k) {
            return;
        }
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS {k:>2} {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failures += 1;
                println!("FAIL {k:>2} {name}: {msg} [{secs:.1}s]");
            }
        }
    };
    let skip = |k: usize, name: &str| {
        if wanted(k) {
            println!("SKIP {k:>2} {name}: needs the desk-pretrained model (criterion 5)");
        }
    };

    report(1, "parameter count", &mut parameter_count);
    report(2, "autodiff correctness", &mut autodiff_correctness);
    report(3, "attention structure", &mut attention_structure);
    report(4, "tokenizer properties", &mut tokenizer_properties);
    let mut desk = None;
    let needs_desk = [5, 6, 7, 8, 9, 10, 11].iter().any(|&k| wanted(k));
    if let Ok(base) = std::env::var("ACCEPTANCE_BASE") {
        match load_checkpoint::<f32>(Path::new(&base)) {
            Ok((model, _)) => desk = Some(Desk { model }),
            Err(e) => println!("cannot load {base}: {e}"),
        }
        if wanted(5) {
            println!("SKIP  5 desk pre-training: ACCEPTANCE_BASE given");
        }
    } else if needs_desk {
        let mut run5 = || desk_pretraining(&mut desk);
        if wanted(5) {
            report(5, "desk pre-training", &mut run5);
        } else if let Err(e) = run5() {
            println!("desk pre-training failed: {e}");
        }
    }
    let names = [
        (6, "attention broadening"),
        (7, "similarity clustering"),
        (8, "head maps and peaks"),
        (9, "fine-tuning contract"),
        (10, "desk AF classification"),
        (11, "attention-delta sanity"),
    ];
    for (k, name) in names {
        let Some(d) = &desk else {
            skip(k, name);
            continue;
        };
        let m = &d.model;
        let mut f: Box<dyn FnMut() -> Check> = match k {
            6 => Box::new(|| attention_broadening(m)),
            7 => Box::new(|| similarity_clustering(m)),
            8 => Box::new(|| peaks_and_head_maps(m)),
            9 => Box::new(|| finetune_contract(m)),
            10 => Box::new(|| desk_af_classification(m)),
            _ => Box::new(|| attention_delta_sanity(m)),
        };
        report(k, name, &mut *f);
    }
    report(12, "determinism", &mut determinism);

    if failures == 0 {
        println!("acceptance: all requested criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failures} criteria failed");
        ExitCode::FAILURE
    }
}
