// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Oracles here are written independently of the
//! library code they check.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, StudentsT};

use ymir_core::detectors::{vae_loss_and_gradient, init_vae_params, DetectorRegistry, VaeConfig};
use ymir_core::ensemble::{aggregate_weighted, fit_normalizer, generalized_esd, normalize_scores, EnsembleWeights, FeatureMatrix};
use ymir_core::detectors::RawScoreSeries;
use ymir_core::evaluation::{best_range_f1, extract_ranges, range_precision, range_recall, MetricParams, RangeSet};
use ymir_core::nn::ParamList;
use ymir_core::pipeline::{
    detect, detect_batched, fit_supervised, fit_unsupervised, generate_synthetic, train, Detection, EventCategory,
    FittedModel, PipelineConfig, SynthData, SynthProfile,
};
use ymir_core::series::LabelSeries;
use ymir_core::supervised::{
    classifier_loss_and_gradient, init_classifier_params, linear_loss_and_gradient, positional_encoding, ClassifierHyper,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1: ESD

/// Textbook Rosner procedure: recompute mean and sample deviation from
/// scratch on every pass; ties in deviation go to the lowest index.
fn rosner(x: &[f64], alpha: f64, r: usize) -> Vec<usize> {
    let n = x.len();
    let mut alive: Vec<usize> = (0..n).collect();
    let mut removed = Vec::new();
    let mut count = 0;
    for i in 1..=r {
        let m = alive.len() as f64;
        let mean = alive.iter().map(|&k| x[k]).sum::<f64>() / m;
        let var = alive.iter().map(|&k| (x[k] - mean).powi(2)).sum::<f64>() / (m - 1.0);
        let sd = var.sqrt();
        if sd == 0.0 {
            break;
        }
        let mut best = alive[0];
        for &k in &alive {
            if (x[k] - mean).abs() > (x[best] - mean).abs() {
                best = k;
            }
        }
        let stat = (x[best] - mean).abs() / sd;
        let (nf, fi) = (n as f64, i as f64);
        let p = 1.0 - alpha / (2.0 * (nf - fi + 1.0));
        let df = nf - fi - 1.0;
        let t = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(p);
        let lambda = (nf - fi) * t / ((df + t * t) * (nf - fi + 1.0)).sqrt();
        if stat > lambda {
            count = i;
        }
        removed.push(best);
        alive.retain(|&k| k != best);
    }
    let mut out = removed[..count].to_vec();
    out.sort_unstable();
    out
}

fn criterion_1() -> Outcome {
    let mut x = vec![0.0; 9];
    x.push(10.0);
    let hand = generalized_esd(&x, 0.05, 3).unwrap();
    if hand != vec![9] || rosner(&x, 0.05, 3) != vec![9] {
        return outcome(false, format!("nine zeros plus 10 gave {hand:?}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    let mut nonempty = 0;
    for _ in 0..200 {
        let n = rng.random_range(3..=50);
        let mut s: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..rng.random_range(0..=3) {
            let k = rng.random_range(0..n);
            s[k] += rng.random_range(-8.0..8.0);
        }
        let r = rng.random_range(1..=(n - 2).max(1));
        let ours = generalized_esd(&s, 0.05, r).unwrap();
        nonempty += usize::from(!ours.is_empty());
        if ours != rosner(&s, 0.05, r) {
            mismatches += 1;
        }
    }
    outcome(mismatches == 0, format!("200 series, {mismatches} mismatches, {nonempty} with outliers"))
}

// ------------------------------------------------------ 2: gradient checks

fn central_difference(p: &ParamList, h: f64, mut loss: impl FnMut(&ParamList) -> f64) -> Vec<f64> {
    let mut q = p.clone();
    let mut out = Vec::with_capacity(p.scalar_count());
    for i in 0..p.scalar_count() {
        let orig = *q.scalar_mut(i);
        *q.scalar_mut(i) = orig + h;
        let up = loss(&q);
        *q.scalar_mut(i) = orig - h;
        let down = loss(&q);
        *q.scalar_mut(i) = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

fn jitter(p: &mut ParamList, rng: &mut ChaCha8Rng, scale: f64) {
    for t in &mut p.tensors {
        for v in &mut t.data {
            *v += scale * rng.random_range(-1.0..1.0);
        }
    }
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = [0.0f64; 3];
    for _ in 0..20 {
        // classifier
        let hyper = ClassifierHyper { window: 6, d_model: 4, channels: 3 };
        let (n, k) = (3, 2);
        let mut p = init_classifier_params(&hyper, n, k, rng.random());
        jitter(&mut p, &mut rng, 0.3);
        let pe = positional_encoding(hyper.window, hyper.d_model);
        let x = randn(&mut rng, hyper.window, n);
        let s = randn(&mut rng, hyper.window, k).mapv(|v: f64| v.abs().min(1.0));
        let y = rng.random_range(0.05..0.95);
        let (_, g) = classifier_loss_and_gradient(&p, x.view(), s.view(), y, &pe).unwrap();
        let num = central_difference(&p, 1e-5, |q| classifier_loss_and_gradient(q, x.view(), s.view(), y, &pe).unwrap().0);
        worst[0] = worst[0].max(rel_err(&g.flat(), &num));

        // linear baseline
        let dim = 5;
        let mut lp = ParamList::new(vec![
            ymir_core::nn::Tensor::zeros("w", &[dim]),
            ymir_core::nn::Tensor::zeros("b", &[1]),
        ]);
        jitter(&mut lp, &mut rng, 1.0);
        let feats: Vec<Vec<f64>> = (0..8).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
        let ys: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let (_, g) = linear_loss_and_gradient(&lp, &feats, &ys);
        let num = central_difference(&lp, 1e-6, |q| linear_loss_and_gradient(q, &feats, &ys).0);
        worst[1] = worst[1].max(rel_err(&g.flat(), &num));

        // vae
        let cfg = VaeConfig { window: 3, hidden: 5, latent: 2, ..VaeConfig::default() };
        let d = 6;
        let mut vp = init_vae_params(d, &cfg, &mut rng);
        jitter(&mut vp, &mut rng, 0.2);
        let xb = randn(&mut rng, 4, d);
        let noise = randn(&mut rng, 4, cfg.latent);
        let (_, g) = vae_loss_and_gradient(&vp, xb.view(), noise.view());
        let num = central_difference(&vp, 1e-5, |q| vae_loss_and_gradient(q, xb.view(), noise.view()).0);
        worst[2] = worst[2].max(rel_err(&g.flat(), &num));
    }
    let pass = worst.iter().all(|&e| e < 1e-4);
    outcome(pass, format!("20 draws each; worst relative error classifier {:.2e}, linear {:.2e}, vae {:.2e}", worst[0], worst[1], worst[2]))
}

// ------------------------------------------- 3: normalization / aggregation

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut failures = BTreeMap::new();
    for _ in 0..10_000 {
        let k = rng.random_range(1..=5);
        let t = rng.random_range(1..=30);
        let raw: Vec<RawScoreSeries> = (0..k)
            .map(|j| {
                let scale = 10f64.powf(rng.random_range(-3.0..3.0));
                let constant = rng.random_bool(0.1);
                RawScoreSeries {
                    model_id: format!("m{j}"),
                    scores: (0..t).map(|_| if constant { 1.5 } else { scale * rng.random_range(0.0..1.0) }).collect(),
                }
            })
            .collect();
        let norm = fit_normalizer(&raw).unwrap();
        let fm = FeatureMatrix::from_raw(&raw, &norm).unwrap();
        if fm.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            *failures.entry("bounds").or_insert(0) += 1;
        }
        // monotone: sorting raw scores sorts normalized scores
        let col = normalize_scores(&raw[0], &norm).unwrap();
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| raw[0].scores[a].total_cmp(&raw[0].scores[b]));
        if order.windows(2).any(|w| col[w[0]] > col[w[1]]) {
            *failures.entry("monotone").or_insert(0) += 1;
        }
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).chain([1.0]).take(k).collect();
        let w = if w.iter().all(|&v| v == 0.0) { vec![1.0; k] } else { w };
        let c = [1e-6, 0.37, 3.0, 1024.0, 7.5e5][rng.random_range(0..5)];
        let base = aggregate_weighted(&fm, &EnsembleWeights::new(w.clone()).unwrap()).unwrap();
        let scaled = aggregate_weighted(&fm, &EnsembleWeights::new(w.iter().map(|v| v * c).collect()).unwrap()).unwrap();
        if base != scaled {
            *failures.entry("scale").or_insert(0) += 1;
        }
        if base.iter().any(|v| !(0.0..=1.0).contains(v)) {
            *failures.entry("aggregate bounds").or_insert(0) += 1;
        }
    }
    outcome(failures.is_empty(), format!("10000 fuzz cases, failures {failures:?}"))
}

// ------------------------------------------------------- 4: range metrics

/// Per-range fraction of points marked in `other`, averaged; 1 if empty.
fn brute_overlap(targets: &[u8], other: &[u8]) -> f64 {
    let mut fractions = Vec::new();
    let mut t = 0;
    while t < targets.len() {
        if targets[t] == 1 {
            let start = t;
            while t < targets.len() && targets[t] == 1 {
                t += 1;
            }
            let hit = (start..t).filter(|&i| other[i] == 1).count();
            fractions.push(hit as f64 / (t - start) as f64);
        } else {
            t += 1;
        }
    }
    if fractions.is_empty() {
        1.0
    } else {
        fractions.iter().sum::<f64>() / fractions.len() as f64
    }
}

fn brute_best_f1(scores: &[f64], truth: &[u8]) -> (f64, f64) {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut ths: Vec<f64> = scores.iter().copied().filter(|&s| s > min).collect();
    ths.sort_by(f64::total_cmp);
    ths.dedup();
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for th in ths {
        let pred: Vec<u8> = scores.iter().map(|&s| u8::from(s >= th)).collect();
        let r = brute_overlap(truth, &pred);
        let p = brute_overlap(&pred, truth);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        if f > best.0 {
            best = (f, th);
        }
    }
    best
}

fn random_binary(rng: &mut ChaCha8Rng, t: usize) -> Vec<u8> {
    let mut v = vec![0u8; t];
    for _ in 0..rng.random_range(0..6) {
        let s = rng.random_range(0..t);
        let len = rng.random_range(1..20);
        for x in v.iter_mut().skip(s).take(len) {
            *x = 1;
        }
    }
    v
}

fn criterion_4() -> Outcome {
    let p = MetricParams::default();
    let mut problems = Vec::new();
    let perfect = RangeSet::new(10, vec![(2, 5)]).unwrap();
    if range_recall(&perfect, &perfect, &p).unwrap() != 1.0 || range_precision(&perfect, &perfect, &p).unwrap() != 1.0 {
        problems.push("perfect match".to_string());
    }
    let half = RangeSet::new(10, vec![(2, 3)]).unwrap();
    if range_recall(&perfect, &half, &p).unwrap() != 0.5 {
        problems.push("half overlap".to_string());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let t = 200;
        let truth = random_binary(&mut rng, t);
        let pred = random_binary(&mut rng, t);
        let (real, guess) = (extract_ranges(&truth), extract_ranges(&pred));
        worst = worst.max((range_recall(&real, &guess, &p).unwrap() - brute_overlap(&truth, &pred)).abs());
        worst = worst.max((range_precision(&real, &guess, &p).unwrap() - brute_overlap(&pred, &truth)).abs());
        // at most 100 distinct levels, so the sweep covers every threshold
        let scores: Vec<f64> = (0..t).map(|i| (rng.random_range(0..60) + 40 * truth[i] as usize) as f64 / 99.0).collect();
        let labels = LabelSeries::full(&(0..t as i64).collect::<Vec<_>>(), truth.clone()).unwrap();
        let report = best_range_f1(&scores, &labels, 100, &p).unwrap();
        let (f, th) = brute_best_f1(&scores, &truth);
        let f = if f.is_finite() { f } else { 0.0 };
        worst = worst.max((report.best_f1 - f).abs());
        if f > 0.0 && report.threshold != th {
            problems.push(format!("case {case}: threshold {} vs {th}", report.threshold));
        }
    }
    let pass = problems.is_empty() && worst <= 1e-12;
    outcome(pass, format!("hand cases and 100 random pairs; max deviation {worst:.1e}; problems {problems:?}"))
}

// ------------------------------------------------------ 5-7: end to end

const TRAIN_ROWS: usize = 3000;

struct EndToEnd {
    data: SynthData,
    config: PipelineConfig,
    supervised: FittedModel,
    sup_detection: Detection,
    result: Outcome,
}

fn held_out_f1(scores: &[f64], labels: &LabelSeries) -> f64 {
    let n = labels.len();
    best_range_f1(&scores[TRAIN_ROWS..], &labels.slice(TRAIN_ROWS, n), 100, &MetricParams::default())
        .unwrap()
        .best_f1
}

/// Library defaults except for a faster classifier schedule and a lower
/// pseudo-label threshold: aggregate confidences on this data rarely exceed
/// 0.8, so the default keeps only a handful of pseudo-positives.
fn acceptance_config() -> PipelineConfig {
    let mut config = PipelineConfig { seed: 7, ..PipelineConfig::default() };
    config.train.learning_rate = 0.03;
    config.train.epochs = 60;
    config.train.th = 0.5;
    config
}

fn criterion_5() -> EndToEnd {
    let start = Instant::now();
    let data = generate_synthetic(&SynthProfile { seed: 2024, ..SynthProfile::default() }).unwrap();
    let config = acceptance_config();
    let reg = DetectorRegistry::default();
    let train_set = data.data.slice(0, TRAIN_ROWS).unwrap();
    let train_labels = data.labels.slice(0, TRAIN_ROWS);

    let stage = fit_unsupervised(&train_set, &config, &reg).unwrap();
    let supervised = fit_supervised(&stage, &train_set, Some(&train_labels), &config).unwrap();
    let mut sparse = train_labels.clone();
    let mut idx: Vec<usize> = (0..TRAIN_ROWS).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(55));
    let keep: std::collections::HashSet<usize> = idx[..TRAIN_ROWS / 10].iter().copied().collect();
    for t in 0..TRAIN_ROWS {
        sparse.mask[t] = keep.contains(&t);
    }
    let semi = fit_supervised(&stage, &train_set, Some(&sparse), &config).unwrap();

    let sup_detection = detect(&supervised, &data.data, &reg).unwrap();
    let semi_detection = detect(&semi, &data.data, &reg).unwrap();

    let f_unsup = held_out_f1(&sup_detection.aggregate(), &data.labels);
    let f_sup = held_out_f1(&sup_detection.classifier().unwrap(), &data.labels);
    let f_semi = held_out_f1(&semi_detection.classifier().unwrap(), &data.labels);

    let probs = sup_detection.classifier().unwrap();
    let restarts: Vec<_> = data.events.iter().filter(|e| e.category == EventCategory::Restart).collect();
    let flagged: Vec<_> = restarts.iter().filter(|e| (e.start..=e.end).any(|t| sup_detection.rows[t].flag)).collect();
    let suppressed = flagged.iter().filter(|e| (e.start..=e.end).all(|t| probs[t] < 0.5)).count();
    let suppression = if flagged.is_empty() { 0.0 } else { suppressed as f64 / flagged.len() as f64 };

    let elapsed = start.elapsed();
    let checks = [
        ("a", f_unsup >= 0.6),
        ("b", f_sup - f_unsup >= 0.10),
        ("c", !flagged.is_empty() && suppression >= 0.5),
        ("d", f_semi >= f_unsup),
        ("time", elapsed < Duration::from_secs(300)),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let detail = format!(
        "held-out best range F1: unsupervised {f_unsup:.4}, supervised {f_sup:.4} (+{:.4}), semi-supervised 10% {f_semi:.4}; \
         restarts flagged {}/{} with {suppressed} suppressed ({:.0}%); {:.1}s; failed {failed:?}",
        f_sup - f_unsup,
        flagged.len(),
        restarts.len(),
        100.0 * suppression,
        elapsed.as_secs_f64()
    );
    EndToEnd { data, config, supervised, sup_detection, result: outcome(failed.is_empty(), detail) }
}

fn criterion_6(e2e: &EndToEnd) -> Outcome {
    let reg = DetectorRegistry::default();
    let offline = e2e.sup_detection.to_csv_string();
    let mut differing = Vec::new();
    for batch in [1, 7, 100] {
        if detect_batched(&e2e.supervised, &e2e.data.data, &reg, batch).unwrap().to_csv_string() != offline {
            differing.push(batch);
        }
    }
    outcome(differing.is_empty(), format!("T={} scores CSV for batches 1, 7, 100; differing {differing:?}", e2e.data.data.len()))
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn criterion_7(e2e: &EndToEnd) -> Outcome {
    let reg = DetectorRegistry::default();
    let train_set = e2e.data.data.slice(0, TRAIN_ROWS).unwrap();
    let train_labels = e2e.data.labels.slice(0, TRAIN_ROWS);
    let again = train(&train_set, Some(&train_labels), &e2e.config, &reg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    e2e.supervised.save(a.path()).unwrap();
    again.save(b.path()).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    let same_artifacts = fa == fb;
    let same_scores = detect(&again, &e2e.data.data, &reg).unwrap().to_csv_string() == e2e.sup_detection.to_csv_string();
    outcome(
        same_artifacts && same_scores,
        format!("{} artifact files identical: {same_artifacts}; scores identical: {same_scores}", fa.len()),
    )
}

fn main() {
    // the libtest protocol probes with --list; this target has no sub-tests
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let timed = |f: fn() -> Outcome, limit: u64| {
        let t = Instant::now();
        let mut o = f();
        let s = t.elapsed().as_secs_f64();
        o.detail = format!("{}; {s:.2}s (limit {limit}s)", o.detail);
        o.pass &= s < limit as f64;
        o
    };
    results.push(("1 ESD oracle equivalence", timed(criterion_1, 10)));
    results.push(("2 gradient checks", timed(criterion_2, 60)));
    results.push(("3 normalization/aggregation invariants", criterion_3()));
    results.push(("4 range-metric oracle", criterion_4()));
    let e2e = criterion_5();
    let c6 = criterion_6(&e2e);
    let c7 = criterion_7(&e2e);
    results.push(("5 synthetic end-to-end", e2e.result));
    results.push(("6 stream/offline equivalence", c6));
    results.push(("7 determinism", c7));

    let mut failed = 0;
    for (name, o) in &results {
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
