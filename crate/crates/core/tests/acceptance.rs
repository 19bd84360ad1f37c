//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs without the libtest harness so the lines always print.

use std::collections::{BTreeMap, HashMap};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use roadfusion::augment::{augment_image, augment_imu, AugmentConfig};
use roadfusion::check::model_gradcheck;
use roadfusion::config::{FusionConfig, Mode, ModelConfig};
use roadfusion::datagen::{gen_dataset, DatagenConfig, DEFAULT_PRIORS};
use roadfusion::dataio::{
    load_checkpoint, save_checkpoint, split_by_segment, split_by_segment_stratified, write_dataset, Dataset,
    Manifest, SampleRecord, Split,
};
use roadfusion::fusion::{attention_pool, classify, cross_attend, gate_fuse, tokenize};
use roadfusion::metrics::{metrics_from_confusion, ConfusionMatrix};
use roadfusion::params::ModelParams;
use roadfusion::sample::{Condition, ImageTensor, ImuWindow, Sample};
use roadfusion::tensor::{FaultyAdjoint, Graph, Tensor};
use roadfusion::trainer::{adamw_step, evaluate, train, AdamWHyper, AdamWState, EpochLog, TrainConfig};

mod common;

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- 1 ----

fn gradient_integrity() -> Outcome {
    let cfg = ModelConfig::tiny();
    let start = Instant::now();
    let report = match model_gradcheck(&cfg, 0, None, usize::MAX) {
        Ok(r) => r,
        Err(e) => return outcome(false, e.to_string()),
    };
    let secs = start.elapsed().as_secs_f64();
    let control = model_gradcheck(&cfg, 0, Some(FaultyAdjoint::MatMul), usize::MAX)
        .map(|r| !r.passed)
        .unwrap_or(false);
    outcome(
        report.passed && report.max_rel_error < 1e-4 && secs < 60.0 && control,
        format!(
            "max rel err {:.2e} < 1e-4 over {} tensors, {secs:.1}s < 60s, faulty adjoint caught: {control}",
            report.max_rel_error,
            report.params.len()
        ),
    )
}

// ---- 2 ----

fn fusion_fidelity() -> Outcome {
    let mut worst = 0.0f64;
    let mut rows_ok = true;
    let mut gate_ok = true;
    let mut convex_ok = true;
    let eps = 1e-5;

    for seed in 0..20u64 {
        let s = seed * 31;
        let mut g = Graph::<f64>::new();

        // tokenize
        let (width, n, d) = (5, 2, 4);
        let x = rand_vec(width, s + 1);
        let gain = rand_vec(width, s + 2);
        let bias = rand_vec(width, s + 3);
        let w = rand_mat(width, n * d, s + 4);
        let b = rand_vec(n * d, s + 5);
        let e = g.constant(vec_tensor(&x));
        let p = tok_params(&mut g, &gain, &bias, &w, &b);
        let t = tokenize(&mut g, e, p, n, d, eps).unwrap();
        let flat = add_bias(&mm(&vec![ln_row(&x, &gain, &bias, eps)], &w), &b).remove(0);
        worst = worst.max(max_diff(g.value(t).data(), &flat));

        // cross_attend, n <= 2, one head
        let bv = BlockVals::random(d, 2 * d, s + 6);
        let ba = BlockVals::random(d, 2 * d, s + 7);
        let v = rand_mat(n, d, s + 8);
        let a = rand_mat(n, d, s + 9);
        let pv = bv.record(&mut g);
        let pa = ba.record(&mut g);
        let vv = g.constant(to_tensor(&v));
        let av = g.constant(to_tensor(&a));
        let fc = FusionConfig {
            tokens: n,
            d_latent: d,
            heads: 1,
            layer_norm_eps: eps,
            ..FusionConfig::default()
        };
        let out = cross_attend(&mut g, vv, av, &pv, &pa, &fc).unwrap();
        let (ov, wv) = bv.oracle(&v, &a, eps);
        let (oa, wa) = ba.oracle(&a, &v, eps);
        worst = worst.max(max_diff(g.value(out.vision).data(), &ov.concat()));
        worst = worst.max(max_diff(g.value(out.imu).data(), &oa.concat()));
        worst = worst.max(max_diff(g.value(out.vision_maps[0]).data(), &wv.concat()));
        worst = worst.max(max_diff(g.value(out.imu_maps[0]).data(), &wa.concat()));
        for m in out.vision_maps.iter().chain(&out.imu_maps) {
            let t = g.value(*m);
            let cols = t.shape()[1];
            rows_ok &= t.data().chunks(cols).all(|r| (r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }

        // attention_pool
        let tokens = rand_mat(3, d, s + 10);
        let wp = rand_mat(d, 1, s + 11);
        let tv = g.constant(to_tensor(&tokens));
        let wpv = g.constant(to_tensor(&wp));
        let (pooled, weights) = attention_pool(&mut g, tv, wpv).unwrap();
        let sw = softmax_row(&mm(&tokens, &wp).iter().map(|r| r[0]).collect::<Vec<_>>());
        worst = worst.max(max_diff(g.value(pooled).data(), &mm(&vec![sw.clone()], &tokens).remove(0)));
        worst = worst.max(max_diff(g.value(weights).data(), &sw));
        rows_ok &= (g.value(weights).data().iter().sum::<f64>() - 1.0).abs() < 1e-6;

        // gate_fuse
        let vs = rand_vec(d, s + 12);
        let as_ = rand_vec(d, s + 13);
        let wg: Mat = rand_mat(2 * d, d, s + 14).iter().map(|r| r.iter().map(|x| 3.0 * x).collect()).collect();
        let bg = rand_vec(d, s + 15);
        let (vsv, asv) = (g.constant(vec_tensor(&vs)), g.constant(vec_tensor(&as_)));
        let (wgv, bgv) = (g.constant(to_tensor(&wg)), g.constant(vec_tensor(&bg)));
        let (z, gate) = gate_fuse(&mut g, vsv, asv, wgv, bgv).unwrap();
        let pre = add_bias(&mm(&vec![[vs.clone(), as_.clone()].concat()], &wg), &bg).remove(0);
        let gw: Vec<f64> = pre.iter().map(|&x| sigmoid(x)).collect();
        let zw: Vec<f64> = (0..d).map(|k| gw[k] * vs[k] + (1.0 - gw[k]) * as_[k]).collect();
        worst = worst.max(max_diff(g.value(gate).data(), &gw));
        worst = worst.max(max_diff(g.value(z).data(), &zw));
        gate_ok &= g.value(gate).data().iter().all(|&x| x > 0.0 && x < 1.0);
        convex_ok &= g.value(z).data().iter().enumerate().all(|(k, &zk)| {
            zk >= vs[k].min(as_[k]) - 1e-12 && zk <= vs[k].max(as_[k]) + 1e-12
        });

        // classify
        let wc = rand_mat(d, 3, s + 16);
        let bc = rand_vec(3, s + 17);
        let zc = g.constant(vec_tensor(&zw));
        let (wcv, bcv) = (g.constant(to_tensor(&wc)), g.constant(vec_tensor(&bc)));
        let (_, probs) = classify(&mut g, zc, wcv, bcv).unwrap();
        let want = softmax_row(&add_bias(&mm(&vec![zw.clone()], &wc), &bc).remove(0));
        worst = worst.max(max_diff(g.value(probs).data(), &want));
    }
    outcome(
        worst < 1e-6 && rows_ok && gate_ok && convex_ok,
        format!(
            "max oracle diff {worst:.2e} < 1e-6; attention rows sum to 1: {rows_ok}; g in (0,1): {gate_ok}; z convex-bounded: {convex_ok}"
        ),
    )
}

// ---- 3 ----

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let trials = 200;
    let mut worst = 0.0f64;
    let mut counts_exact = true;
    for _ in 0..trials {
        let k = rng.gen_range(2..6);
        let counts: Vec<Vec<u64>> = (0..k).map(|_| (0..k).map(|_| rng.gen_range(0..15)).collect()).collect();
        // Per-sample brute force.
        let mut samples = Vec::new();
        for (t, row) in counts.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                samples.extend(std::iter::repeat((t, p)).take(c as usize));
            }
        }
        let rebuilt = ConfusionMatrix::from_pairs(k, samples.iter().copied());
        let r = metrics_from_confusion(&rebuilt.counts, &[]).unwrap();
        counts_exact &= r.confusion.counts == counts && r.samples == samples.len() as u64;
        let n = samples.len() as f64;
        let acc = samples.iter().filter(|(t, p)| t == p).count() as f64 / n;
        worst = worst.max((r.accuracy - acc).abs());
        let mut f1s = Vec::new();
        for c in 0..k {
            let tp = samples.iter().filter(|&&(t, p)| t == c && p == c).count() as f64;
            let pp = samples.iter().filter(|&&(_, p)| p == c).count() as f64;
            let ap = samples.iter().filter(|&&(t, _)| t == c).count() as f64;
            let pr = if pp == 0.0 { 0.0 } else { tp / pp };
            let re = if ap == 0.0 { 0.0 } else { tp / ap };
            let f1 = if pr + re == 0.0 { 0.0 } else { 2.0 * pr * re / (pr + re) };
            let m = &r.per_class[c];
            worst = worst.max((m.precision - pr).abs()).max((m.recall - re).abs()).max((m.f1 - f1).abs());
            f1s.push(f1);
        }
        worst = worst.max((r.macro_f1 - f1s.iter().sum::<f64>() / k as f64).abs());
    }
    let reference = metrics_from_confusion(&[vec![9, 1], vec![3, 7]], &[]).unwrap();
    let ref_ok = (reference.accuracy - 0.8).abs() < 1e-3 && (reference.macro_f1 - 0.798).abs() < 1e-3;
    outcome(
        counts_exact && worst < 1e-9 && ref_ok,
        format!(
            "{trials} random matrices: counts exact {counts_exact}, max ratio diff {worst:.1e} < 1e-9; [[9,1],[3,7]] acc {:.4} macro-F1 {:.4}",
            reference.accuracy, reference.macro_f1
        ),
    )
}

// ---- 4 ----

fn optimizer() -> Outcome {
    let one = |v: f64| {
        let mut m = BTreeMap::new();
        m.insert("w".to_string(), Tensor::new(vec![1], vec![v]).unwrap());
        ModelParams::from_map(m)
    };
    let grad = |v: f64| BTreeMap::from([("w".to_string(), vec![v])]);
    let val = |p: &ModelParams<f64>| p.get("w").unwrap().data()[0];

    let mut worst = 0.0f64;
    for (g0, lr) in [(0.7, 0.01), (-2.0, 0.1), (1e-3, 0.05)] {
        let mut p = one(0.5);
        let mut st = AdamWState::default();
        for _ in 0..10 {
            adamw_step(&mut p, &grad(g0), &mut st, &AdamWHyper::new(lr, 0.0)).unwrap();
        }
        worst = worst.max((val(&p) - (0.5 - 10.0 * lr * g0 / (g0.abs() + 1e-8))).abs());
    }

    let (lr, wd) = (0.1, 0.3);
    let mut p = one(2.0);
    let mut st = AdamWState::default();
    adamw_step(&mut p, &grad(0.0), &mut st, &AdamWHyper::new(lr, wd)).unwrap();
    let decay_ok = val(&p) == 2.0 - lr * wd * 2.0;
    let mut p = one(2.0);
    adamw_step(&mut p, &grad(0.0), &mut AdamWState::default(), &AdamWHyper::new(lr, 0.0)).unwrap();
    let still_ok = val(&p) == 2.0;
    outcome(
        worst < 1e-10 && decay_ok && still_ok,
        format!("10-step closed form max diff {worst:.1e} < 1e-10; g=0,wd>0 shrinks by lr*wd*theta: {decay_ok}; g=0,wd=0 unchanged: {still_ok}"),
    )
}

// ---- 5, 6, 7 ----

struct Run {
    log: Vec<EpochLog>,
    params: ModelParams<f32>,
    secs: f64,
}

fn train_run(cfg: &TrainConfig, tr: &[Sample], va: &[Sample]) -> Run {
    let start = Instant::now();
    let out = train(cfg, tr, va, |e| {
        eprintln!(
            "    [{:?}] epoch {:>2} loss {:.4} val_acc {:.4}",
            cfg.model.mode, e.epoch, e.loss, e.val_acc
        )
    })
    .expect("training runs");
    Run {
        log: out.log,
        params: out.params,
        secs: start.elapsed().as_secs_f64(),
    }
}

/// The same config capped at a few epochs must retrace the first epochs of
/// the full run bit for bit.
fn reproducible(cfg: &TrainConfig, tr: &[Sample], va: &[Sample], full: &Run) -> bool {
    let epochs = 3.min(full.log.len());
    let short = train(&TrainConfig { max_epochs: epochs, ..cfg.clone() }, tr, va, |_| {}).expect("training runs");
    let bits = |e: &EpochLog| (e.loss.to_bits(), e.val_acc.to_bits(), e.val_loss.to_bits(), e.mean_gate.map(f64::to_bits));
    short.log.iter().map(bits).eq(full.log[..epochs].iter().map(bits))
}

fn end_to_end() -> Vec<(&'static str, Outcome)> {
    let dir = tempfile::tempdir().unwrap();
    let gen = DatagenConfig::default();
    let samples = gen_dataset(600, &DEFAULT_PRIORS, 42, 10, &gen).unwrap();
    write_dataset(dir.path(), &samples, gen.sample_rate).unwrap();
    let mut ds = Dataset::open(dir.path()).unwrap();
    ds.manifest = split_by_segment_stratified(&ds.manifest, [0.7, 0.2, 0.1], 42).unwrap();
    let part = |s: Split| ds.load_all(&ds.manifest.indices(s)).unwrap();
    let (tr, va, te) = (part(Split::Train), part(Split::Val), part(Split::Test));
    eprintln!("  dataset: train {} val {} test {}", tr.len(), va.len(), te.len());

    let fused_cfg = TrainConfig {
        seed: 42,
        ..TrainConfig::default()
    };
    let mut vision_cfg = fused_cfg.clone();
    vision_cfg.model.mode = Mode::VisionOnly;

    let fused = train_run(&fused_cfg, &tr, &va);
    let vision = train_run(&vision_cfg, &tr, &va);
    let eval = |cfg: &TrainConfig, run: &Run, set: &[Sample]| evaluate(&run.params, &cfg.model, &cfg.augment, set).unwrap();
    let f_clean = eval(&fused_cfg, &fused, &te);
    let v_clean = eval(&vision_cfg, &vision, &te);

    let c5 = outcome(
        f_clean.accuracy >= 0.95 && f_clean.macro_f1 >= 0.90 && fused.log.len() <= 50 && fused.secs < 900.0,
        format!(
            "fused test acc {:.4} >= 0.95, macro-F1 {:.4} >= 0.90, {} epochs <= 50, {:.0}s < 900s ({} test samples)",
            f_clean.accuracy,
            f_clean.macro_f1,
            fused.log.len(),
            fused.secs,
            f_clean.samples
        ),
    );

    let gap = f_clean.accuracy - v_clean.accuracy;
    let repro_f = reproducible(&fused_cfg, &tr, &va, &fused);
    let repro_v = reproducible(&vision_cfg, &tr, &va, &vision);
    let c6 = outcome(
        gap.abs() <= 0.03 && repro_f && repro_v,
        format!(
            "vision-only acc {:.4} vs fused {:.4}: gap {:+.1} pp within 3 pp; reproducible fused {repro_f}, vision-only {repro_v}",
            v_clean.accuracy,
            f_clean.accuracy,
            100.0 * gap
        ),
    );

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let noisy: Vec<Sample> = te
        .iter()
        .map(|s| Sample {
            image: ImageTensor::from_fn(3, s.image.height(), s.image.width(), |_, _, _| rng.gen()),
            ..s.clone()
        })
        .collect();
    let f_noise = eval(&fused_cfg, &fused, &noisy);
    let v_noise = eval(&vision_cfg, &vision, &noisy);
    let margin = f_noise.accuracy - v_noise.accuracy;
    let (g_clean, g_noise) = (f_clean.mean_gate.unwrap_or(f64::NAN), f_noise.mean_gate.unwrap_or(f64::NAN));
    let c7 = outcome(
        margin >= 0.10 && g_noise < g_clean,
        format!(
            "noise images: fused acc {:.4} vs vision-only {:.4} ({:+.1} pp >= 10 pp); mean gate {g_clean:.4} clean -> {g_noise:.4} noise",
            f_noise.accuracy,
            v_noise.accuracy,
            100.0 * margin
        ),
    );
    vec![
        ("end-to-end synthetic training", c5),
        ("ablation structure", c6),
        ("degraded-vision robustness", c7),
    ]
}

// ---- 8 ----

fn random_manifest(sizes: &[usize], labels: &[u8]) -> Manifest {
    let names = ["Asphalt", "BelgianBlocks", "OffRoad"];
    let mut m = Manifest::empty(400.0);
    let mut k = 0;
    for (seg, (&n, &l)) in sizes.iter().zip(labels).enumerate() {
        for _ in 0..n {
            m.samples.push(SampleRecord {
                id: format!("s{k}"),
                segment_id: seg,
                image: String::new(),
                imu: String::new(),
                label: names[usize::from(l) % 3].to_string(),
                condition: Condition::Day,
                split: None,
            });
            k += 1;
        }
    }
    m
}

fn protocol_invariants() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        ..PropConfig::default()
    });
    let strategy = (
        prop::collection::vec((1usize..15, 0u8..3), 3..25),
        any::<u64>(),
        any::<bool>(),
    );
    let split_result = runner.run(&strategy, |(segs, seed, strat)| {
        let (sizes, labels): (Vec<usize>, Vec<u8>) = segs.into_iter().unzip();
        let m = random_manifest(&sizes, &labels);
        let s = if strat {
            split_by_segment_stratified(&m, [0.7, 0.2, 0.1], seed)
        } else {
            split_by_segment(&m, [0.7, 0.2, 0.1], seed)
        }
        .unwrap();
        let mut seen: HashMap<usize, Split> = HashMap::new();
        for r in &s.samples {
            let sp = r.split.expect("assigned");
            prop_assert_eq!(*seen.entry(r.segment_id).or_insert(sp), sp);
        }
        Ok(())
    });
    let splits_ok = split_result.is_ok();

    // Dataset round trip: quantized pixels within half a level, IMU exact.
    let dir = tempfile::tempdir().unwrap();
    let gen = DatagenConfig {
        image_size: 16,
        imu_window: 40,
        ..DatagenConfig::default()
    };
    let samples = gen_dataset(30, &DEFAULT_PRIORS, 5, 5, &gen).unwrap();
    write_dataset(dir.path(), &samples, gen.sample_rate).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    let data_ok = samples.iter().enumerate().all(|(i, s)| {
        let r = ds.load(i).unwrap();
        r.id == s.id
            && r.label == s.label
            && r.segment_id == s.segment_id
            && r.condition == s.condition
            && r.imu == s.imu
            && r.image.pixels().iter().zip(s.image.pixels()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6)
    });

    let cfg = ModelConfig::tiny();
    let p = ModelParams::<f32>::init(&cfg, 8);
    let path = dir.path().join("m.rsfc");
    save_checkpoint(&path, &p, &cfg, serde_json::Value::Null).unwrap();
    let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
    let ckpt_ok = ck.config == cfg
        && p.iter().zip(ck.params.iter()).all(|((n1, a), (n2, b))| {
            n1 == n2 && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });

    let aug = AugmentConfig::degenerate(24, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = ImageTensor::from_fn(3, 24, 24, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f32 / 11.0);
    let win_data = (0..6 * 30).map(|i| ((i * 37) % 19) as f32 / 19.0 - 0.5).collect();
    let win = ImuWindow::new(Tensor::new(vec![6, 30], win_data).unwrap(), 400.0).unwrap();
    let aug_ok = (0..5).all(|_| {
        augment_image(&img, &aug, &mut rng).unwrap() == img && augment_imu(&win, &aug, &mut rng).unwrap() == win
    });

    outcome(
        splits_ok && data_ok && ckpt_ok && aug_ok,
        format!(
            "segment purity over 1000 random manifests: {splits_ok}; dataset round trip: {data_ok}; checkpoint bit-exact: {ckpt_ok}; degenerate augmentation identity: {aug_ok}"
        ),
    )
}

fn main() -> ExitCode {
    // libtest flags such as --list or a name filter are accepted and ignored,
    // except that listing must not run the slow criteria.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let start = Instant::now();
    let mut results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient integrity", gradient_integrity()),
        (2, "fusion-equation fidelity", fusion_fidelity()),
        (3, "metric oracle equivalence", metric_oracle()),
        (4, "optimizer correctness", optimizer()),
    ];
    for (i, (name, o)) in end_to_end().into_iter().enumerate() {
        results.push((5 + i, name, o));
    }
    results.push((8, "protocol invariants", protocol_invariants()));

    println!();
    for (n, name, o) in &results {
        println!("[{}] criterion {n} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!(
        "acceptance: {} passed, {failed} failed in {:.0?}",
        results.len() - failed,
        Duration::from_secs(start.elapsed().as_secs())
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
