use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadfusion::augment::AugmentConfig;
use roadfusion::check::model_gradcheck;
use roadfusion::config::{Mode, ModelConfig};
use roadfusion::metrics::{metrics_from_confusion, ConfusionMatrix};
use roadfusion::params::ModelParams;
use roadfusion::sample::{Condition, ImageTensor, ImuWindow, Sample, SurfaceClass};
use roadfusion::tensor::{gradcheck, FaultyAdjoint, Graph, Tensor};
use roadfusion::trainer::{
    adamw_step, cross_entropy, evaluate, train, AdamWHyper, AdamWState, EarlyStopping, TrainConfig,
    TrainError, Verdict,
};

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---- metrics ----

#[test]
fn diagonal_matrix_is_perfect() {
    let r = metrics_from_confusion(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 2]], &[]).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.per_class.iter().all(|c| c.f1 == 1.0));
    assert_eq!(r.normalized_confusion, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
}

#[test]
fn rows_normalize_and_zero_rows_stay_zero() {
    let r = metrics_from_confusion(&[vec![8, 1, 1], vec![0, 0, 0], vec![0, 2, 2]], &[]).unwrap();
    assert_eq!(r.normalized_confusion[0], vec![0.8, 0.1, 0.1]);
    assert_eq!(r.normalized_confusion[1], vec![0.0; 3]);
    // never-predicted class with no support has every ratio at 0
    assert_eq!((r.per_class[1].recall, r.per_class[0].precision), (0.0, 1.0));
}

#[test]
fn two_class_reference_values() {
    let r = metrics_from_confusion(&[vec![9, 1], vec![3, 7]], &[]).unwrap();
    let p = &r.per_class;
    assert!(close(r.accuracy, 0.8, 1e-12));
    assert!(close(p[0].precision, 0.75, 1e-12) && close(p[0].recall, 0.9, 1e-12));
    assert!(close(p[1].precision, 0.875, 1e-12) && close(p[1].recall, 0.7, 1e-12));
    assert!(close(p[0].f1, 0.818, 1e-3) && close(p[1].f1, 0.778, 1e-3));
    assert!(close(r.macro_f1, 0.798, 1e-3));
}

#[test]
fn constant_predictor_on_balanced_classes() {
    let pairs = (0..30).map(|i| (i % 3, 0));
    let cm = ConfusionMatrix::from_pairs(3, pairs);
    let r = metrics_from_confusion(&cm.counts, &[]).unwrap();
    assert!(close(r.accuracy, 1.0 / 3.0, 1e-12));
    assert!(close(r.macro_f1, 0.5 / 3.0, 1e-12));
}

/// Expands counts into individual samples and recounts from scratch.
fn brute_force(counts: &[Vec<u64>]) -> (f64, Vec<(f64, f64, f64)>, f64) {
    let k = counts.len();
    let mut samples = Vec::new();
    for (t, row) in counts.iter().enumerate() {
        for (p, &c) in row.iter().enumerate() {
            samples.extend(std::iter::repeat((t, p)).take(c as usize));
        }
    }
    let n = samples.len();
    let correct = samples.iter().filter(|(t, p)| t == p).count();
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let mut per = Vec::new();
    for c in 0..k {
        let tp = samples.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
        let fp = samples.iter().filter(|&&(t, p)| t != c && p == c).count() as f64;
        let fneg = samples.iter().filter(|&&(t, p)| t == c && p != c).count() as f64;
        let pr = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let re = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
        let f1 = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
        per.push((pr, re, f1));
    }
    let macro_f1 = per.iter().map(|x| x.2).sum::<f64>() / k as f64;
    let rebuilt = ConfusionMatrix::from_pairs(k, samples);
    assert_eq!(rebuilt.counts, counts);
    (acc, per, macro_f1)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(150))]

    #[test]
    fn metrics_match_per_sample_recount(k in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let counts: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..12)).collect()).collect();
        let r = metrics_from_confusion(&counts, &[]).unwrap();
        let (acc, per, macro_f1) = brute_force(&counts);
        prop_assert_eq!(&r.confusion.counts, &counts);
        prop_assert_eq!(r.samples, counts.iter().flatten().sum::<u64>());
        prop_assert!(close(r.accuracy, acc, 1e-9));
        prop_assert!(close(r.macro_f1, macro_f1, 1e-9));
        prop_assert!((0.0..=1.0).contains(&r.macro_f1));
        for (c, (pr, re, f1)) in r.per_class.iter().zip(per) {
            prop_assert!(close(c.precision, pr, 1e-9) && close(c.recall, re, 1e-9) && close(c.f1, f1, 1e-9));
        }
        for row in &r.normalized_confusion {
            let s: f64 = row.iter().sum();
            prop_assert!(s == 0.0 || close(s, 1.0, 1e-12));
        }
    }
}

// ---- loss ----

fn ce_value(logits: &[f64], label: usize) -> f64 {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![logits.len()], logits.to_vec()).unwrap());
    let l = cross_entropy(&mut g, x, label, None).unwrap();
    g.value(l).data()[0]
}

#[test]
fn cross_entropy_reference_values() {
    assert_eq!(ce_value(&[0.0, -1e3, -1e3], 0), 0.0);
    assert!(close(ce_value(&[0.3, 0.3, 0.3], 2), 3f64.ln(), 1e-12));
    assert!(close(ce_value(&[1000.0, 0.0, 0.0], 1), 1000.0, 1e-9));
}

#[test]
fn cross_entropy_rejects_bad_label() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
    assert!(cross_entropy(&mut g, x, 3, None).is_err());
}

#[test]
fn cross_entropy_gradient_is_probabilities_minus_one_hot() {
    let logits = vec![0.4, -1.2, 2.0];
    let report = gradcheck(
        |g, v| cross_entropy(g, v[0], 1, None).map_err(|e| e.into_tensor()),
        &[("logits".into(), Tensor::new(vec![3], logits.clone()).unwrap())],
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{}", report.max_rel_error);

    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::new(vec![3], logits.clone()).unwrap());
    let l = cross_entropy(&mut g, x, 1, None).unwrap();
    g.backward(l).unwrap();
    let z: f64 = logits.iter().map(|v| v.exp()).sum();
    for (i, d) in g.grad(x).data().iter().enumerate() {
        let y = logits[i].exp() / z;
        assert!(close(*d, y - f64::from(u8::from(i == 1)), 1e-12));
    }
}

#[test]
fn class_weight_scales_loss() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0.5, 0.1, -0.3]).unwrap());
    let a = cross_entropy(&mut g, x, 0, None).unwrap();
    let b = cross_entropy(&mut g, x, 0, Some(2.5)).unwrap();
    assert!(close(g.value(b).data()[0], 2.5 * g.value(a).data()[0], 1e-12));
}

// ---- AdamW ----

fn scalar_params(values: &[f64]) -> ModelParams<f64> {
    let mut m = BTreeMap::new();
    m.insert("w".to_string(), Tensor::new(vec![values.len()], values.to_vec()).unwrap());
    ModelParams::from_map(m)
}

fn grads(values: &[f64]) -> BTreeMap<String, Vec<f64>> {
    BTreeMap::from([("w".to_string(), values.to_vec())])
}

fn theta(p: &ModelParams<f64>) -> Vec<f64> {
    p.get("w").unwrap().data().to_vec()
}

#[test]
fn first_step_moves_by_learning_rate() {
    let mut p = scalar_params(&[1.0]);
    let mut st = AdamWState::default();
    adamw_step(&mut p, &grads(&[1.0]), &mut st, &AdamWHyper::new(0.1, 0.0)).unwrap();
    assert!(close(theta(&p)[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15));
    assert!(close(theta(&p)[0], 0.9, 1e-8));
}

#[test]
fn zero_gradient_only_decays() {
    let mut p = scalar_params(&[2.0, -0.5]);
    let mut st = AdamWState::default();
    adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut st, &AdamWHyper::new(0.1, 0.0)).unwrap();
    assert_eq!(theta(&p), vec![2.0, -0.5]);

    let (lr, wd) = (0.1, 0.3);
    adamw_step(&mut p, &grads(&[0.0, 0.0]), &mut st, &AdamWHyper::new(lr, wd)).unwrap();
    assert_eq!(theta(&p), vec![2.0 - lr * wd * 2.0, -0.5 - lr * wd * -0.5]);
}

#[test]
fn constant_gradient_matches_closed_form() {
    // With g held fixed both bias-corrected moments equal g and g², so each
    // step moves by lr·g/(|g| + ε).
    let (lr, eps) = (0.01, 1e-8);
    let gs = [0.7, -2.0, 1e-3];
    let mut p = scalar_params(&[0.5, 0.5, 0.5]);
    let mut st = AdamWState::default();
    for _ in 0..10 {
        adamw_step(&mut p, &grads(&gs), &mut st, &AdamWHyper::new(lr, 0.0)).unwrap();
    }
    for (t, g) in theta(&p).iter().zip(gs) {
        let expected = 0.5 - 10.0 * lr * g / (g.abs() + eps);
        assert!(close(*t, expected, 1e-10), "{t} vs {expected}");
    }
}

#[test]
fn varying_gradient_matches_scalar_recurrence() {
    let hp = AdamWHyper::new(0.05, 0.1);
    let seq = [0.3, -1.1, 0.8, 0.0, 2.4, -0.2, 0.9, -0.6, 0.05, 1.5];
    let mut p = scalar_params(&[1.5]);
    let mut st = AdamWState::default();
    let (mut th, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
    for (i, g) in seq.iter().enumerate() {
        adamw_step(&mut p, &grads(&[*g]), &mut st, &hp).unwrap();
        let t = (i + 1) as i32;
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        th = th - 0.05 * 0.1 * th - 0.05 * mh / (vh.sqrt() + 1e-8);
    }
    assert!(close(theta(&p)[0], th, 1e-10));
}

#[test]
fn non_finite_gradient_aborts_without_update() {
    let mut p = scalar_params(&[1.0, 2.0]);
    let mut st = AdamWState::default();
    let err = adamw_step(&mut p, &grads(&[0.1, f64::NAN]), &mut st, &AdamWHyper::new(0.1, 0.1)).unwrap_err();
    assert!(matches!(err, TrainError::NonFiniteGradient { ref name } if name == "w"));
    assert_eq!(theta(&p), vec![1.0, 2.0]);
    assert_eq!(st.step, 0);
}

// ---- early stopping ----

#[test]
fn decreasing_accuracy_stops_after_patience() {
    let mut es = EarlyStopping::new(1);
    assert_eq!(es.observe(1, 0.9, 0.3), Verdict::Improved);
    assert_eq!(es.observe(2, 0.8, 0.2), Verdict::Stop);
    assert_eq!((es.best_epoch(), es.best_val_acc()), (1, 0.9));
}

#[test]
fn equal_accuracy_prefers_lower_loss() {
    let mut es = EarlyStopping::new(3);
    es.observe(1, 0.5, 1.0);
    assert_eq!(es.observe(2, 0.5, 0.9), Verdict::Improved);
    assert_eq!(es.observe(3, 0.5, 0.95), Verdict::Wait);
    assert_eq!(es.best_epoch(), 2);
}

proptest! {
    #[test]
    fn best_is_never_below_any_observed(accs in prop::collection::vec(0u8..20, 1..40), patience in 1usize..6) {
        let mut es = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for (i, a) in accs.iter().enumerate() {
            let acc = f64::from(*a) / 20.0;
            seen.push(acc);
            if es.observe(i + 1, acc, 0.0) == Verdict::Stop {
                break;
            }
        }
        let max = seen.iter().copied().fold(0.0, f64::max);
        prop_assert_eq!(es.best_val_acc(), max);
        prop_assert_eq!(seen[es.best_epoch() - 1], max);
    }
}

// ---- training ----

fn toy_set(n: usize, cfg: &ModelConfig, seed: u64, offset: usize) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.encoder.image_size;
    let (c, t) = (cfg.encoder.d_sensor, cfg.encoder.imu_window);
    (0..n)
        .map(|i| {
            let checker = i % 2 == 0;
            let image = ImageTensor::from_fn(3, s, s, |_, y, x| {
                let pattern = if checker && (y + x) % 2 == 0 { 0.4 } else { 0.0 };
                0.3 + pattern + rng.gen_range(-0.1..0.1)
            });
            let imu = (0..c * t).map(|_| rng.gen_range(-0.5..0.5)).collect();
            Sample {
                id: format!("t{}", i + offset),
                image,
                imu: ImuWindow::new(Tensor::new(vec![c, t], imu).unwrap(), 400.0).unwrap(),
                label: if checker { SurfaceClass::Asphalt } else { SurfaceClass::OffRoad },
                segment_id: i + offset,
                condition: if i % 3 == 0 { Condition::Night } else { Condition::Day },
            }
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    let model = ModelConfig::tiny();
    let s = model.encoder.image_size;
    TrainConfig {
        lr: 1e-2,
        batch_size: 8,
        max_epochs: 5,
        patience: 5,
        seed: 11,
        augment: AugmentConfig::degenerate(s, s),
        model,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_toy_problem_is_learned() {
    let cfg = toy_config();
    let tr = toy_set(128, &cfg.model, 1, 0);
    let va = toy_set(16, &cfg.model, 2, 100);
    let out = train(&cfg, &tr, &va, |_| {}).unwrap();
    assert!(out.log.len() <= 5);
    assert_eq!(out.best_val_acc, 1.0, "{:?}", out.log);

    let report = evaluate(&out.params, &cfg.model, &cfg.augment, &va).unwrap();
    assert_eq!(report.accuracy, 1.0);
    let gate = report.mean_gate.unwrap();
    assert!(gate > 0.0 && gate < 1.0);
    assert_eq!(report.per_condition.keys().collect::<Vec<_>>(), ["day", "night"]);
    let n: u64 = report.per_condition.values().map(|c| c.samples).sum();
    assert_eq!(n, 16);
}

#[test]
fn training_is_bit_reproducible() {
    let mut cfg = toy_config();
    cfg.max_epochs = 2;
    cfg.augment = AugmentConfig {
        resize_to: 10,
        crop_to: 8,
        ..AugmentConfig::default()
    };
    let tr = toy_set(20, &cfg.model, 3, 0);
    let va = toy_set(6, &cfg.model, 4, 100);
    let a = train(&cfg, &tr, &va, |_| {}).unwrap();
    let b = train(&cfg, &tr, &va, |_| {}).unwrap();
    assert_eq!(a.log, b.log);
    for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    cfg.seed = 12;
    let c = train(&cfg, &tr, &va, |_| {}).unwrap();
    assert_ne!(a.log, c.log);
}

#[test]
fn vision_only_training_and_callback() {
    let mut cfg = toy_config();
    cfg.max_epochs = 2;
    cfg.model.mode = Mode::VisionOnly;
    let tr = toy_set(10, &cfg.model, 5, 0);
    let va = toy_set(4, &cfg.model, 6, 100);
    let mut seen = Vec::new();
    let out = train(&cfg, &tr, &va, |e| seen.push(e.epoch)).unwrap();
    assert_eq!(seen, vec![1, 2]);
    assert!(out.log.iter().all(|e| e.mean_gate.is_none()));
}

#[test]
fn empty_splits_and_bad_config_are_rejected() {
    let cfg = toy_config();
    let tr = toy_set(4, &cfg.model, 5, 0);
    assert!(matches!(train(&cfg, &tr, &[], |_| {}), Err(TrainError::EmptySplit("val"))));
    assert!(matches!(train(&cfg, &[], &tr, |_| {}), Err(TrainError::EmptySplit("train"))));
    let mut bad = cfg.clone();
    bad.patience = 0;
    let err = train(&bad, &tr, &tr, |_| {}).unwrap_err();
    assert!(err.to_string().contains("patience"));
    let mut bad = cfg;
    bad.class_weights = Some(vec![1.0]);
    assert!(train(&bad, &tr, &tr, |_| {}).is_err());
}

#[test]
fn divergence_returns_last_good_parameters() {
    let mut cfg = toy_config();
    cfg.lr = 1e30;
    cfg.max_epochs = 4;
    let tr = toy_set(16, &cfg.model, 7, 0);
    let va = toy_set(4, &cfg.model, 8, 100);
    match train(&cfg, &tr, &va, |_| {}) {
        Err(TrainError::Diverged { last_good, .. }) => {
            assert!(last_good.iter().all(|(_, t)| t.data().iter().all(|v| v.is_finite())));
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
    }
}

// ---- whole-model gradient check ----

#[test]
fn model_gradcheck_passes_and_faults_are_caught() {
    let cfg = ModelConfig::tiny();
    let ok = model_gradcheck(&cfg, 3, None, usize::MAX).unwrap();
    assert!(ok.passed, "{}", ok.max_rel_error);
    for fault in [FaultyAdjoint::Sigmoid, FaultyAdjoint::MatMul, FaultyAdjoint::LayerNorm] {
        let bad = model_gradcheck(&cfg, 3, Some(fault), usize::MAX).unwrap();
        assert!(!bad.passed, "{fault:?}");
    }
}
