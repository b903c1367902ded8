//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ctxpaste::augment::{make_batch, AugmentConfig};
use ctxpaste::blend::{paste, random_blend, BlendConfig};
use ctxpaste::cam::{cam_to_mask, forward, loss_and_grad, FeatureMap, Heatmap, ToyModel, FEATURE_DIM};
use ctxpaste::experiment::{
    ablation_axes, run_experiment, run_sweep, ExperimentConfig, ExperimentReport, BASELINE_ARM, DECOUPLED_ARM,
};
use ctxpaste::harvest::{harvest, qualifies, Decision, HarvestCriteria, RejectReason};
use ctxpaste::metrics::miou;
use ctxpaste::synth::{gen_corpus, SynthConfig};
use ctxpaste::{CategoryMask, ColorImage, LabelSet, ObjectInstance, Raster, RngStream, Sample};

/// Default-config experiment results under seed 7, frozen from a run.
const FROZEN_BASELINE_MIOU: f64 = 0.4578;
const FROZEN_DECOUPLED_MIOU: f64 = 0.6458;
const FIXTURE_TOLERANCE: f64 = 0.01;

struct Outcome {
    ok: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (ok, detail) = f();
    Outcome {
        ok,
        detail,
        elapsed: t.elapsed(),
    }
}

fn within(o: &mut Outcome, limit: Duration) {
    if o.elapsed >= limit {
        o.ok = false;
        o.detail.push_str(&format!("; exceeded {} s budget", limit.as_secs()));
    }
}

fn harvest_oracle(labels: &LabelSet, mask: &CategoryMask, eps1: f64, eps2: f64) -> Decision {
    let cats: Vec<u8> = labels.iter().collect();
    if cats.len() != 1 {
        return Decision::Rejected(RejectReason::MultiClass);
    }
    let mut m = 0usize;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y, 0) == cats[0] {
                m += 1;
            }
        }
    }
    let r = m as f64 / (mask.width() * mask.height()) as f64;
    if r <= eps1 {
        Decision::Rejected(RejectReason::RatioTooSmall)
    } else if r >= eps2 {
        Decision::Rejected(RejectReason::RatioTooLarge)
    } else {
        Decision::Accepted(cats[0])
    }
}

fn criterion_1() -> (bool, String) {
    let crit = HarvestCriteria {
        eps1: 0.1,
        eps2: 0.7,
        require_single_class: true,
    };
    let mut rng = RngStream::root(101);
    let mut mismatches = 0;
    let mut accepted = 0;
    for i in 0..500 {
        let w = rng.range_inclusive(1, 24);
        let h = rng.range_inclusive(1, 24);
        let n_labels = [0, 1, 1, 1, 2, 3][rng.below(6)];
        let labels = LabelSet::from_categories((0..n_labels).map(|_| rng.range_inclusive(1, 4) as u8));
        // every fourth mask places an exact number of pixels near a threshold
        let mask = if i % 4 == 0 && labels.len() == 1 {
            let c = labels.iter().next().unwrap();
            let n = w * h;
            let target = [n / 10, n / 10 + 1, 7 * n / 10, (7 * n).div_ceil(10)][rng.below(4)].min(n);
            let mut data = vec![0u8; n];
            for k in rng.sample_indices(n, target) {
                data[k] = c;
            }
            Raster::from_vec(w, h, 1, data).unwrap()
        } else {
            let p = rng.uniform(0.0, 1.0);
            Raster::from_fn(w, h, 1, |_, _, _| {
                if rng.bernoulli(p) {
                    rng.range_inclusive(1, 4) as u8
                } else {
                    0
                }
            })
        };
        let got = qualifies(&labels, &mask, &crit);
        if matches!(got, Decision::Accepted(_)) {
            accepted += 1;
        }
        if got != harvest_oracle(&labels, &mask, crit.eps1, crit.eps2) {
            mismatches += 1;
        }
    }
    (
        mismatches == 0,
        format!("500 pairs, {accepted} accepted, {mismatches} mismatches"),
    )
}

fn binary_instance(rng: &mut RngStream) -> ObjectInstance {
    loop {
        let w = rng.range_inclusive(2, 12);
        let h = rng.range_inclusive(2, 12);
        let alpha = Raster::from_fn(w, h, 1, |_, _, _| if rng.bernoulli(0.6) { 1.0f32 } else { 0.0 });
        let Some(r) = alpha.tight_bbox(|v| v > 0.5) else {
            continue;
        };
        let alpha = alpha.crop_rect(r).unwrap();
        let cutout = Raster::from_fn(r.w, r.h, 3, |_, _, _| rng.uniform(0.0, 1.0) as f32);
        return ObjectInstance::new(cutout, alpha, rng.range_inclusive(1, 4) as u8, "rand").unwrap();
    }
}

fn criterion_2() -> (bool, String) {
    let mut rng = RngStream::root(202);
    let cfg = BlendConfig {
        gaussian_sigma: 0.0,
        ..BlendConfig::default()
    };
    let mut third_values = 0usize;
    let mut pixels = 0usize;
    let mut failures = 0;
    for i in 0..200 {
        let tw = rng.range_inclusive(24, 64);
        let th = rng.range_inclusive(24, 64);
        let target: ColorImage = Raster::from_fn(tw, th, 3, |_, _, _| rng.uniform(0.0, 1.0) as f32);
        let inst = binary_instance(&mut rng);
        // alternate direct pastes with the full rescale + rotation path
        let (out, pasted, x0, y0) = if i % 2 == 0 {
            let x = rng.below(tw - inst.width() + 1);
            let y = rng.below(th - inst.height() + 1);
            (paste(&target, &inst, x as i64, y as i64).unwrap(), inst, x, y)
        } else {
            match random_blend(&target, None, &inst, &cfg, &mut rng.child_index(i)) {
                Ok(b) => (b.image, b.instance, b.record.paste_x, b.record.paste_y),
                Err(_) => {
                    failures += 1;
                    continue;
                }
            }
        };
        for y in 0..th {
            for x in 0..tw {
                pixels += 1;
                let got = out.pixel(x, y);
                let inside = x >= x0 && y >= y0 && x < x0 + pasted.width() && y < y0 + pasted.height();
                let expected = if inside && pasted.alpha.get(x - x0, y - y0, 0) > 0.5 {
                    pasted.cutout.pixel(x - x0, y - y0)
                } else {
                    target.pixel(x, y)
                };
                let bit_eq = got.iter().zip(expected).all(|(a, b)| a.to_bits() == b.to_bits());
                if !bit_eq {
                    third_values += 1;
                }
            }
        }
    }
    (
        third_values == 0 && failures == 0,
        format!("200 pastes, {pixels} pixels, {third_values} third values, {failures} placement failures"),
    )
}

fn criterion_3() -> (bool, String) {
    let corpus = gen_corpus(&SynthConfig::default(), 120, 303).unwrap();
    let masks: Vec<&CategoryMask> = corpus.iter().map(|s| s.gt_mask.as_ref().unwrap()).collect();
    let pairs: Vec<(&Sample, &CategoryMask)> = corpus.iter().zip(masks).collect();
    let bank = harvest(&pairs, &HarvestCriteria::default(), "ground-truth").unwrap();
    let cfg = AugmentConfig::default();
    let n = 4;
    let root = RngStream::root(304);
    let mut violations = [0usize; 4];
    let mut skipped = 0;
    for b in 0..1000 {
        let batch = make_batch(&corpus, &bank, n, &cfg, &root.child_index(b)).unwrap();
        skipped += batch.skipped;
        if batch.entries.len() != 2 * n {
            violations[2] += 1;
            continue;
        }
        for pair in batch.entries.chunks_exact(2) {
            let (orig, aug) = (&pair[0], &pair[1]);
            let source = &corpus[orig.source_index];
            if orig.sample != *source || aug.source_index != orig.source_index || !orig.placements.is_empty() {
                violations[2] += 1;
            }
            let pasted: Vec<u8> = aug.placements.iter().map(|p| p.category).collect();
            let pasted_set: BTreeSet<u8> = pasted.iter().copied().collect();
            if pasted.iter().any(|&c| source.labels.contains(c)) || pasted_set.len() != pasted.len() {
                violations[0] += 1;
            }
            let merged = source.labels.union(&LabelSet::from_categories(pasted_set));
            if aug.sample.labels != merged {
                violations[1] += 1;
            }
            let consistent = aug
                .sample
                .gt_mask
                .as_ref()
                .is_some_and(|m| LabelSet::from_mask(m) == aug.sample.labels);
            if !consistent {
                violations[3] += 1;
            }
        }
    }
    let total: usize = violations.iter().sum();
    (
        total == 0,
        format!(
            "1000 batches of 2x{n}, bank {} instances, {skipped} skipped pastes; violations a={} b={} c={} d={}",
            bank.len(),
            violations[0],
            violations[1],
            violations[2],
            violations[3]
        ),
    )
}

fn loss_via_forward(m: &ToyModel, f: &FeatureMap, labels: &LabelSet) -> f64 {
    let fw = forward(m, f).unwrap();
    fw.logits
        .iter()
        .enumerate()
        .map(|(i, &z)| {
            let y = if labels.contains(i as u8 + 1) { 1.0 } else { 0.0 };
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum()
}

fn criterion_4() -> (bool, String) {
    let mut rng = RngStream::root(404);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let triples = 24;
    for _ in 0..triples {
        let c = rng.range_inclusive(1, 5);
        let (w, h) = (rng.range_inclusive(2, 8), rng.range_inclusive(2, 8));
        let f = FeatureMap::from_vec(w, h, (0..w * h * FEATURE_DIM).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap();
        let mut m = ToyModel::zeros(c);
        for row in &mut m.weights {
            for v in row.iter_mut() {
                *v = rng.normal(0.0, 1.0);
            }
        }
        for b in &mut m.bias {
            *b = rng.normal(0.0, 1.0);
        }
        let labels = LabelSet::from_categories((1..=c as u8).filter(|_| rng.bernoulli(0.5)));
        let (_, g) = loss_and_grad(&m, &f, &labels).unwrap();
        let step = 1e-5;
        let mut check = |analytic: f64, set: &dyn Fn(&mut ToyModel, f64)| {
            let (mut plus, mut minus) = (m.clone(), m.clone());
            set(&mut plus, step);
            set(&mut minus, -step);
            let numeric = (loss_via_forward(&plus, &f, &labels) - loss_via_forward(&minus, &f, &labels)) / (2.0 * step);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
        };
        for k in 0..c {
            for j in 0..FEATURE_DIM {
                check(g.weights[k][j], &|m: &mut ToyModel, d| m.weights[k][j] += d);
            }
            check(g.bias[k], &|m: &mut ToyModel, d| m.bias[k] += d);
        }
    }
    (
        worst < 1e-4,
        format!("{triples} triples, {checked} partials, worst relative error {worst:.2e}"),
    )
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_5(one_default_run: Duration) -> (bool, String) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("det.toml");
    fs::write(
        &cfg_path,
        "train_size = 400\neval_size = 100\ndump_count = 6\nrounds = 1\n",
    )
    .unwrap();
    let run = |jobs: &str, out: &str| {
        let status = Command::new(env!("CARGO_BIN_EXE_ctxpaste"))
            .args(["--seed", "7", "--jobs", jobs, "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(tmp.path().join(out))
            .arg("experiment")
            .status()
            .unwrap();
        status.success()
    };
    let t = Instant::now();
    if !run("8", "a") || !run("1", "b") {
        return (false, "experiment exited nonzero".into());
    }
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (fa, fb) = (files_under(&a), files_under(&b));
    let mut differing = Vec::new();
    if fa != fb {
        differing.push("file lists".to_string());
    }
    for f in &fa {
        if fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    let rasters = fa.iter().filter(|p| p.extension().is_some_and(|e| e == "png")).count();
    let elapsed = t.elapsed();
    let ok = differing.is_empty() && rasters > 0 && fa.iter().any(|p| p.ends_with("report.json"));
    (
        ok && elapsed < 2 * one_default_run,
        format!(
            "--jobs 8 vs --jobs 1, {} files ({rasters} rasters), {} differ; {:.1} s vs one default run {:.1} s",
            fa.len(),
            differing.len(),
            elapsed.as_secs_f64(),
            one_default_run.as_secs_f64()
        ),
    )
}

fn criterion_6(report: &ExperimentReport) -> (bool, String) {
    let b = report.arm(BASELINE_ARM).unwrap();
    let d = report.arm(DECOUPLED_ARM).unwrap();
    let delta = 100.0 * (d.miou - b.miou);
    let directional = delta >= 5.0 && d.background_activation < b.background_activation;
    let frozen = (b.miou - FROZEN_BASELINE_MIOU).abs() <= FIXTURE_TOLERANCE
        && (d.miou - FROZEN_DECOUPLED_MIOU).abs() <= FIXTURE_TOLERANCE;
    (
        directional && frozen,
        format!(
            "mIoU {:.1} -> {:.1} ({delta:+.1}), bg-act {:.3} -> {:.3}, fixture {:.1}/{:.1} {}",
            100.0 * b.miou,
            100.0 * d.miou,
            b.background_activation,
            d.background_activation,
            100.0 * FROZEN_BASELINE_MIOU,
            100.0 * FROZEN_DECOUPLED_MIOU,
            if frozen { "matched" } else { "MISMATCH" }
        ),
    )
}

fn criterion_7() -> (bool, String) {
    let mut cfg = ExperimentConfig {
        train_size: 240,
        eval_size: 60,
        ..ExperimentConfig::default()
    };
    cfg.model.epochs = 15;
    let mut problems = Vec::new();
    let mut cells = 0;
    let mut tables = String::new();
    for axis in ablation_axes() {
        let sweep = match run_sweep(&cfg, &axis.name, &axis.overrides) {
            Ok(s) => s,
            Err(e) => {
                problems.push(format!("{}: {e}", axis.name));
                continue;
            }
        };
        if sweep.entries.len() != axis.overrides.len() {
            problems.push(format!(
                "{}: {} of {} entries",
                axis.name,
                sweep.entries.len(),
                axis.overrides.len()
            ));
        }
        let baseline = sweep.entries[0].report.arm(BASELINE_ARM).cloned();
        for e in &sweep.entries {
            let (Some(b), Some(d)) = (e.report.arm(BASELINE_ARM), e.report.arm(DECOUPLED_ARM)) else {
                problems.push(format!("{}/{}: missing arm", axis.name, e.name));
                continue;
            };
            if ![b.miou, d.miou, b.background_activation, d.background_activation]
                .iter()
                .all(|v| v.is_finite())
            {
                problems.push(format!("{}/{}: empty cell", axis.name, e.name));
            }
            if Some(b) != baseline.as_ref() {
                problems.push(format!("{}/{}: baseline differs", axis.name, e.name));
            }
            cells += 1;
        }
        let rows = sweep
            .table
            .lines()
            .filter(|l| l.starts_with("| ") && !l.starts_with("| setting"))
            .count();
        if rows != axis.overrides.len() {
            problems.push(format!("{}: table has {rows} rows", axis.name));
        }
        tables.push_str(&sweep.table);
    }
    for line in tables.lines() {
        println!("    {line}");
    }
    (
        problems.is_empty(),
        if problems.is_empty() {
            format!("4 axes, {cells} sweep points, baseline constant on every axis")
        } else {
            problems.join("; ")
        },
    )
}

fn confusion_miou(pred: &CategoryMask, gt: &CategoryMask, k: usize) -> f64 {
    let mut cm = vec![vec![0u64; k]; k];
    for (p, g) in pred.data().iter().zip(gt.data()) {
        cm[*g as usize][*p as usize] += 1;
    }
    let mut ious = Vec::new();
    for c in 0..k {
        let tp = cm[c][c];
        let row: u64 = cm[c].iter().sum();
        let col: u64 = cm.iter().map(|r| r[c]).sum();
        let union = row + col - tp;
        if union > 0 {
            ious.push(tp as f64 / union as f64);
        }
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}

fn criterion_8() -> (bool, String) {
    let mut rng = RngStream::root(808);
    let mut nest_violations = 0;
    for _ in 0..100 {
        let (w, h) = (rng.range_inclusive(1, 32), rng.range_inclusive(1, 32));
        let levels = rng.range_inclusive(2, 12) as f64;
        let heat: Heatmap = Raster::from_fn(w, h, 1, |_, _, _| (rng.uniform(0.0, 1.0) * levels).floor() / levels);
        let mut taus: Vec<f64> = (0..8).map(|_| rng.uniform(0.0, 1.0)).collect();
        taus.extend([0.0, 0.5, 1.0]);
        taus.sort_by(f64::total_cmp);
        for pair in taus.windows(2) {
            let lo = cam_to_mask(&heat, pair[0], 1);
            let hi = cam_to_mask(&heat, pair[1], 1);
            nest_violations += hi
                .data()
                .iter()
                .zip(lo.data())
                .filter(|(h, l)| **h == 1 && **l != 1)
                .count();
        }
    }
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (w, h) = (rng.range_inclusive(1, 40), rng.range_inclusive(1, 40));
        let k = rng.range_inclusive(2, 6);
        let gt: CategoryMask = Raster::from_fn(w, h, 1, |_, _, _| rng.below(k) as u8);
        let pred: CategoryMask = Raster::from_fn(w, h, 1, |_, _, _| rng.below(k) as u8);
        let got = miou(&pred, &gt, 1..k as u8).unwrap().miou;
        worst = worst.max((got - confusion_miou(&pred, &gt, k)).abs());
    }
    (
        nest_violations == 0 && worst <= 1e-12,
        format!("100 heatmaps, {nest_violations} nesting violations; 50 mask pairs, max |diff| {worst:.1e}"),
    )
}

fn main() {
    // the default run is timed first so criterion 5 can compare against it
    let t = Instant::now();
    let default_run = run_experiment(&ExperimentConfig::default());
    let default_elapsed = t.elapsed();

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut c1 = timed(criterion_1);
    within(&mut c1, Duration::from_secs(5));
    results.push((1, "harvest filter oracle", c1));
    let mut c2 = timed(criterion_2);
    within(&mut c2, Duration::from_secs(5));
    results.push((2, "compositing exactness", c2));
    let mut c3 = timed(criterion_3);
    within(&mut c3, Duration::from_secs(30));
    results.push((3, "pairwise batch invariants", c3));
    let mut c4 = timed(criterion_4);
    within(&mut c4, Duration::from_secs(5));
    results.push((4, "gradient check", c4));
    results.push((5, "determinism", timed(|| criterion_5(default_elapsed))));
    let mut c6 = match &default_run {
        Ok(out) => {
            let (ok, detail) = criterion_6(&out.report);
            Outcome {
                ok,
                detail,
                elapsed: default_elapsed,
            }
        }
        Err(e) => Outcome {
            ok: false,
            detail: format!("experiment failed: {e}"),
            elapsed: default_elapsed,
        },
    };
    within(&mut c6, Duration::from_secs(180));
    results.push((6, "decoupling effect", c6));
    results.push((7, "ablation harness", timed(criterion_7)));
    let mut c8 = timed(criterion_8);
    within(&mut c8, Duration::from_secs(5));
    results.push((8, "threshold nesting and mIoU oracle", c8));

    let mut failed = 0;
    for (n, name, o) in &results {
        if !o.ok {
            failed += 1;
        }
        println!(
            "{} [{n}] {name}: {} ({:.2} s)",
            if o.ok { "PASS" } else { "FAIL" },
            o.detail,
            o.elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
