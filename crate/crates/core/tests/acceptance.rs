//! Acceptance suite. Runs as a plain binary (`harness = false`) so the
//! one-line verdict per criterion is always printed; exits non-zero if any
//! criterion fails.
//!
//! The end-to-end ordering check trains all 21 ablation runs on the default
//! benchmark and takes most of the suite's runtime. Set
//! `DACS_ACCEPTANCE_SKIP_E2E=1` to skip it while iterating locally; a skipped
//! criterion counts as a failure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dacs_core::cli::{run_from_args, AblationSummary};
use dacs_core::grid::{composite, ImageBatch, LabelMap, MixMask, ProbMap, IGNORE};
use dacs_core::metrics::{conflation_count, ConfusionMatrix};
use dacs_core::mix::{classes_present, classmix_mask, cowmix_mask, MixStrategy};
use dacs_core::model::{Architecture, PixelWeights, SegModel};
use dacs_core::optim::{OptimizerConfig, OptimizerState};
use dacs_core::storage::{DataDir, FileKind};
use dacs_core::synthgen::{DomainTag, Split};
use dacs_core::trainer::{
    adaptive_lambda, dacs_step, distribution_align, run, DistAlignState, LabeledBatch, RunOptions,
    TrainConfig, Variant,
};

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn random_probs(rng: &mut ChaCha8Rng, n: usize, k: usize, h: usize, w: usize, scale: f64) -> ProbMap {
    let hw = h * w;
    let mut data = vec![0.0; n * k * hw];
    for i in 0..n {
        for p in 0..hw {
            let logits: Vec<f64> = (0..k).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = exp.iter().sum();
            for c in 0..k {
                data[i * k * hw + c * hw + p] = exp[c] / z;
            }
        }
    }
    ProbMap::new(n, k, h, w, data).unwrap()
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> ImageBatch {
    let data = (0..n * 3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImageBatch::new(n, 3, h, w, data).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize, k: usize, ignore_rate: f64) -> LabelMap {
    let data = (0..n * h * w)
        .map(|_| {
            if rng.gen_bool(ignore_rate) {
                IGNORE
            } else {
                rng.gen_range(0..k as u8)
            }
        })
        .collect();
    LabelMap::new(n, h, w, k, data).unwrap()
}

// ---------------------------------------------------------------- gradients

/// Weighted mean cross-entropy computed straight from the forward
/// probabilities; independent of the backward pass.
fn oracle_ce(model: &SegModel, x: &ImageBatch, y: &LabelMap, weights: &[f64]) -> f64 {
    let p = model.forward(x).unwrap();
    let (n, k, h, w) = p.shape();
    let hw = h * w;
    let (mut total, mut scored) = (0.0, 0usize);
    for i in 0..n {
        for px in 0..hw {
            let label = y.item(i)[px];
            if label == IGNORE {
                continue;
            }
            scored += 1;
            let prob = p.item(i)[label as usize * hw + px];
            total += weights[i * hw + px] * -prob.ln();
            debug_assert!(k > label as usize);
        }
    }
    if scored == 0 {
        0.0
    } else {
        total / scored as f64
    }
}

fn finite_difference(model: &SegModel, index: usize, eps: f64, loss: &dyn Fn(&SegModel) -> f64) -> f64 {
    let mut plus = model.clone();
    *plus.params.get_mut(index).unwrap() += eps;
    let mut minus = model.clone();
    *minus.params.get_mut(index).unwrap() -= eps;
    (loss(&plus) - loss(&minus)) / (2.0 * eps)
}

#[derive(Default)]
struct GradTally {
    checked: usize,
    good: usize,
    worst: f64,
}

impl GradTally {
    fn compare(&mut self, analytic: &[f64], model: &SegModel, loss: &dyn Fn(&SegModel) -> f64) {
        for (i, &a) in analytic.iter().enumerate() {
            let n = finite_difference(model, i, 1e-4, loss);
            let scale = a.abs().max(n.abs());
            let rel = if scale < 1e-10 { 0.0 } else { (a - n).abs() / scale };
            self.checked += 1;
            if rel < 1e-4 {
                self.good += 1;
            }
            self.worst = self.worst.max(rel);
        }
    }

    fn share(&self) -> f64 {
        self.good as f64 / self.checked as f64
    }
}

fn criterion_gradients() -> Verdict {
    let mut sup = GradTally::default();
    let mut full = GradTally::default();
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let k = rng.gen_range(3..=5);
        let arch = Architecture {
            in_channels: 3,
            features: rng.gen_range(2..=4),
            num_classes: k,
        };
        let (h, w) = (rng.gen_range(4..=7), rng.gen_range(4..=7));
        let model = SegModel::new(arch, instance).unwrap();

        // supervised term
        let xs = random_images(&mut rng, 2, h, w);
        let ys = random_labels(&mut rng, 2, h, w, k, 0.1);
        let ones = vec![1.0; 2 * h * w];
        let analytic = model.loss_and_grad(&xs, &ys, &PixelWeights::Uniform(1.0)).unwrap();
        sup.compare(&analytic.grads.flatten(), &model, &|m| oracle_ce(m, &xs, &ys, &ones));

        // full mixed-sample objective: take the gradient dacs_step applies
        // (plain SGD with lr 1 makes it theta_before - theta_after) and
        // compare against the oracle with the mixed labels and lambda frozen
        let xt = random_images(&mut rng, 2, h, w);
        let probs = model.forward(&xt).unwrap();
        let mut conf: Vec<f64> = dacs_core::grid::max_confidence(&probs);
        conf.sort_by(f64::total_cmp);
        let tau = conf[conf.len() / 2];
        let lambda = adaptive_lambda(&probs, tau);
        let cfg = TrainConfig {
            confidence_threshold: tau,
            optimizer: OptimizerConfig {
                base_lr: 1.0,
                momentum: 0.0,
                weight_decay: 0.0,
                nesterov: false,
                poly_exponent: 1.0,
            },
            ..TrainConfig::default()
        };
        let mut stepped = model.clone();
        let mut opt = OptimizerState::new(cfg.optimizer, 1, &stepped).unwrap();
        let source = LabeledBatch {
            images: xs.clone(),
            labels: ys.clone(),
        };
        let mut step_rng = ChaCha8Rng::seed_from_u64(77 + instance);
        let (_, mixed) = dacs_step(&mut stepped, &mut opt, &source, &xt, &cfg, 0, &mut step_rng).unwrap();
        let applied: Vec<f64> = model
            .params
            .flatten()
            .iter()
            .zip(stepped.params.flatten())
            .map(|(before, after)| before - after)
            .collect();
        let hw = h * w;
        let lambda_px: Vec<f64> = lambda.iter().flat_map(|&l| std::iter::repeat(l).take(hw)).collect();
        let (xm, ym) = (mixed.images, mixed.labels);
        full.compare(&applied, &model, &|m| {
            oracle_ce(m, &xs, &ys, &ones) + oracle_ce(m, &xm, &ym, &lambda_px)
        });
    }
    let pass = sup.share() >= 0.99 && full.share() >= 0.99;
    Verdict::new(
        pass,
        format!(
            "supervised {}/{} coords ok ({:.2}%), mixed objective {}/{} ({:.2}%), worst rel err {:.2e} / {:.2e}",
            sup.good,
            sup.checked,
            100.0 * sup.share(),
            full.good,
            full.checked,
            100.0 * full.share(),
            sup.worst,
            full.worst
        ),
    )
}

// ---------------------------------------------------------------- mixing

fn criterion_mixing() -> Verdict {
    let mut failures = Vec::new();
    for case in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(case);
        let (h, w) = (rng.gen_range(2..=12), rng.gen_range(2..=12));
        let k = rng.gen_range(1..=8);
        let mut labels = random_labels(&mut rng, 1, h, w, k, 0.15);
        if !labels.data().iter().any(|&v| v != IGNORE) {
            let mut data = labels.data().to_vec();
            data[0] = 0;
            labels = LabelMap::new(1, h, w, k, data).unwrap();
        }

        let mask = classmix_mask(&labels, &mut rng).unwrap();
        let present = classes_present(labels.item(0));
        let mut chosen = BTreeSet::new();
        let mut partial = false;
        for &c in &present {
            let px: Vec<bool> = labels
                .item(0)
                .iter()
                .zip(mask.data())
                .filter(|(&l, _)| l == c)
                .map(|(_, &m)| m)
                .collect();
            if px.iter().all(|&m| m) {
                chosen.insert(c);
            } else if px.iter().any(|&m| m) {
                partial = true;
            }
        }
        let ignored_selected = labels
            .item(0)
            .iter()
            .zip(mask.data())
            .any(|(&l, &m)| l == IGNORE && m);
        if partial || ignored_selected || chosen.len() != present.len().div_ceil(2) {
            failures.push(format!("classmix case {case}"));
        }

        let a = random_images(&mut rng, 1, h, w);
        let b = random_images(&mut rng, 1, h, w);
        let la = random_labels(&mut rng, 1, h, w, k, 0.1);
        let lb = random_labels(&mut rng, 1, h, w, k, 0.1);
        let ones = MixMask::filled(1, h, w, true).unwrap();
        let zeros = MixMask::filled(1, h, w, false).unwrap();
        let bits = |x: &ImageBatch| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        if bits(&composite(&ones, &a, &b).unwrap()) != bits(&a)
            || bits(&composite(&zeros, &a, &b).unwrap()) != bits(&b)
            || composite(&ones, &la, &lb).unwrap() != la
            || composite(&zeros, &la, &lb).unwrap() != lb
        {
            failures.push(format!("composite case {case}"));
        }

        let proportion = rng.gen_range(0.05..0.95);
        let sigma = rng.gen_range(0.5..6.0);
        let cow = cowmix_mask(h, w, sigma, proportion, &mut rng).unwrap();
        if cow.popcount() != (proportion * (h * w) as f64).round() as usize {
            failures.push(format!("cowmix case {case}"));
        }
    }
    let detail = if failures.is_empty() {
        "1000 cases: classmix class count/support, composite identities, cowmix popcount".to_string()
    } else {
        format!("{} failures, first: {}", failures.len(), failures[0])
    };
    Verdict::new(failures.is_empty(), detail)
}

// ---------------------------------------------------------------- metrics

fn brute_force_iou(t: &[u8], p: &[u8], k: usize) -> (Vec<Option<f64>>, Option<f64>) {
    let scored: Vec<usize> = (0..t.len()).filter(|&i| t[i] != IGNORE).collect();
    let per_class: Vec<Option<f64>> = (0..k as u8)
        .map(|c| {
            let truth: BTreeSet<usize> = scored.iter().copied().filter(|&i| t[i] == c).collect();
            let pred: BTreeSet<usize> = scored.iter().copied().filter(|&i| p[i] == c).collect();
            let union = truth.union(&pred).count();
            (union > 0).then(|| truth.intersection(&pred).count() as f64 / union as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    (per_class, miou)
}

fn criterion_metrics() -> Verdict {
    let mut worst: f64 = 0.0;
    let mut structural = 0;
    for case in 0..500u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + case);
        let k = rng.gen_range(2..=8);
        let t = random_labels(&mut rng, 1, 8, 8, k, 0.1);
        let p = random_labels(&mut rng, 1, 8, 8, k, 0.0);
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&t, &p).unwrap();
        let got = cm.iou();
        let (want, want_miou) = brute_force_iou(t.data(), p.data(), k);
        for (g, w) in got.per_class.iter().zip(&want) {
            match (g, w) {
                (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
                (None, None) => {}
                _ => structural += 1,
            }
        }
        match (got.miou, want_miou) {
            (Some(g), Some(w)) => worst = worst.max((g - w).abs()),
            (None, None) => {}
            _ => structural += 1,
        }
    }

    let t = LabelMap::new(1, 2, 2, 2, vec![0, 0, 1, 1]).unwrap();
    let p = LabelMap::new(1, 2, 2, 2, vec![0, 1, 1, 1]).unwrap();
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&t, &p).unwrap();
    let hand = cm.iou().miou;

    // per-class IoU (percent) of the naive-mixing ablation row
    let naive_row = [
        84.78, 0.00, 82.81, 0.34, 0.05, 10.56, 47.96, 58.86, 86.87, 8.08, 90.99, 56.09, 0.00, 86.92, 40.45,
        11.38, 0.00, 0.45, 0.00,
    ];
    let fractions: Vec<Option<f64>> = naive_row.iter().map(|v| Some(v / 100.0)).collect();
    let conflated = conflation_count(&fractions, 0.01);

    let pass = worst <= 1e-12 && structural == 0 && hand == Some(7.0 / 12.0) && conflated == 7;
    Verdict::new(
        pass,
        format!(
            "500 random 8x8 pairs max |diff| {worst:.1e} ({structural} definedness mismatches); 2x2 mIoU {:?}; published naive row conflated = {conflated}",
            hand
        ),
    )
}

// ---------------------------------------------------------------- lambda

fn criterion_lambda() -> Verdict {
    let mut problems = Vec::new();
    let taus = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 0.968, 0.99, 1.0];
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + case);
        let (n, k) = (rng.gen_range(1..=3), rng.gen_range(2..=6));
        let (h, w) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
        let scale = rng.gen_range(0.5..8.0);
        let p = random_probs(&mut rng, n, k, h, w, scale);
        let mut previous: Option<Vec<f64>> = None;
        for &tau in &taus {
            let lambda = adaptive_lambda(&p, tau);
            if lambda.len() != n || lambda.iter().any(|l| !(0.0..=1.0).contains(l)) {
                problems.push(format!("range case {case} tau {tau}"));
            }
            if let Some(prev) = &previous {
                if lambda.iter().zip(prev).any(|(now, before)| now > before) {
                    problems.push(format!("monotonicity case {case} tau {tau}"));
                }
            }
            previous = Some(lambda);
        }
    }

    let (k, hw) = (4usize, 9usize);
    let mut one_hot = vec![0.0; 2 * k * hw];
    for i in 0..2 {
        for p in 0..hw {
            one_hot[i * k * hw + ((i + p) % k) * hw + p] = 1.0;
        }
    }
    let one_hot = ProbMap::new(2, k, 3, 3, one_hot).unwrap();
    for tau in [0.0, 0.5, 0.968, 1.0] {
        if adaptive_lambda(&one_hot, tau) != vec![1.0, 1.0] {
            problems.push(format!("one-hot tau {tau}"));
        }
    }
    let uniform = ProbMap::new(1, 6, 4, 4, vec![1.0 / 6.0; 6 * 16]).unwrap();
    if adaptive_lambda(&uniform, 0.5) != vec![0.0] {
        problems.push("uniform K=6".into());
    }
    let detail = if problems.is_empty() {
        "range, one-hot, uniform K=6 and monotonicity over 100 random maps".to_string()
    } else {
        format!("{} problems, first: {}", problems.len(), problems[0])
    };
    Verdict::new(problems.is_empty(), detail)
}

// ---------------------------------------------------------------- alignment

fn simplex(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
    let z: f64 = raw.iter().sum();
    raw.iter().map(|v| v / z).collect()
}

fn criterion_alignment() -> Verdict {
    let mut worst_sum: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for case in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(12_000 + case);
        let (n, k) = (rng.gen_range(1..=3), rng.gen_range(2..=6));
        let (h, w) = (rng.gen_range(1..=5), rng.gen_range(1..=5));
        let q = random_probs(&mut rng, n, k, h, w, 3.0);
        let prior = simplex(&mut rng, k);
        let running = simplex(&mut rng, k);

        let mut state = DistAlignState::with_running(prior.clone(), running, 0.999).unwrap();
        let aligned = distribution_align(&q, &mut state).unwrap();
        let hw = h * w;
        for i in 0..n {
            for p in 0..hw {
                let s: f64 = (0..k).map(|c| aligned.item(i)[c * hw + p]).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }

        let mut same = DistAlignState::with_running(prior.clone(), prior, 0.999).unwrap();
        let unchanged = distribution_align(&q, &mut same).unwrap();
        for (a, b) in unchanged.data().iter().zip(q.data()) {
            worst_identity = worst_identity.max((a - b).abs());
        }
    }

    let q = ProbMap::new(1, 2, 1, 1, vec![0.6, 0.4]).unwrap();
    let mut state = DistAlignState::with_running(vec![0.5, 0.5], vec![0.75, 0.25], 0.999).unwrap();
    let hand = distribution_align(&q, &mut state).unwrap();
    let hand_err = (hand.data()[0] - 1.0 / 3.0).abs().max((hand.data()[1] - 2.0 / 3.0).abs());

    let pass = worst_sum <= 1e-6 && worst_identity <= 1e-12 && hand_err <= 1e-9;
    Verdict::new(
        pass,
        format!(
            "row sums within {worst_sum:.1e}; matched prior changes q by {worst_identity:.1e}; hand case off by {hand_err:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- end to end

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["dacs".to_string()];
    full.extend(args.iter().map(|s| s.to_string()));
    run_from_args(full)
}

fn criterion_ordering(work: &Path) -> Verdict {
    if std::env::var_os("DACS_ACCEPTANCE_SKIP_E2E").is_some() {
        return Verdict::new(false, "skipped (DACS_ACCEPTANCE_SKIP_E2E set)");
    }
    let data = work.join("bench");
    let out = work.join("ablate");
    if cli(&["generate", "--out", data.to_str().unwrap()]) != 0 {
        return Verdict::new(false, "generate failed");
    }
    let started = Instant::now();
    let code = cli(&[
        "ablate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seeds",
        "1,2,3",
    ]);
    let elapsed = started.elapsed();
    if code != 0 {
        return Verdict::new(false, format!("ablate exited with {code}"));
    }
    let text = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let summary: AblationSummary = serde_json::from_str(&text).unwrap();

    let mut by_cell: BTreeMap<&str, Vec<(f64, usize)>> = BTreeMap::new();
    for r in &summary.runs {
        by_cell
            .entry(r.cell.as_str())
            .or_default()
            .push((r.final_miou.unwrap_or(0.0), r.conflation_count));
    }
    let mean = |cell: &str| {
        let v = &by_cell[cell];
        v.iter().map(|r| r.0).sum::<f64>() / v.len() as f64
    };
    let seeds_with = |cell: &str, at_least: usize| by_cell[cell].iter().filter(|r| r.1 >= at_least).count();

    let (dacs, naive, source, pseudo) = (
        mean("dacs_classmix"),
        mean("naive_mixing"),
        mean("source_only"),
        mean("pseudo_only"),
    );
    let ordering = dacs - naive >= 0.02 && naive - source >= 0.02;
    let naive_conflates = seeds_with("naive_mixing", 1) >= 2;
    let dacs_clean = seeds_with("dacs_classmix", 1) == 0;
    let pseudo_worse = pseudo < source || seeds_with("pseudo_only", 2) >= 2;
    let fast = summary.runs.len() == 21 && elapsed < Duration::from_secs(30 * 60);

    let counts = |cell: &str| by_cell[cell].iter().map(|r| r.1.to_string()).collect::<Vec<_>>().join("/");
    Verdict::new(
        ordering && naive_conflates && dacs_clean && pseudo_worse && fast,
        format!(
            "mean mIoU dacs {dacs:.4} naive {naive:.4} source {source:.4} pseudo {pseudo:.4}; conflated per seed naive {} dacs {} pseudo {}; 21 runs in {:.1} min [ordering {} naive-conflates {} dacs-clean {} pseudo {} time {}]",
            counts("naive_mixing"),
            counts("dacs_classmix"),
            counts("pseudo_only"),
            elapsed.as_secs_f64() / 60.0,
            ordering,
            naive_conflates,
            dacs_clean,
            pseudo_worse,
            fast
        ),
    )
}

// ---------------------------------------------------------------- determinism

const SMALL_CONFIG: &str = r#"{
  "benchmark": {"source_train": 12, "target_train": 12, "target_eval": 6, "height": 24, "width": 24},
  "train": {"iters": 12, "eval_every": 4, "features": 4}
}"#;

fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    files
}

/// Wall-clock fields are the only legitimately varying bytes.
fn is_timing_record(name: &str) -> bool {
    name.ends_with("summary.json")
}

fn criterion_determinism(work: &Path) -> Verdict {
    let cfg = work.join("small.json");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let mut mismatches = Vec::new();
    let mut compared = 0usize;

    let mut trees = Vec::new();
    for attempt in 0..2 {
        let root = work.join(format!("det_{attempt}"));
        let data = root.join("data");
        let d = data.to_str().unwrap();
        let train = root.join("train");
        let eval = root.join("eval");
        let ablate = root.join("ablate");
        let codes = [
            cli(&["generate", "--config", cfg, "--out", d]),
            cli(&[
                "train",
                "--config",
                cfg,
                "--data",
                d,
                "--out",
                train.to_str().unwrap(),
                "--dump-qualitative",
            ]),
            cli(&[
                "eval",
                "--checkpoint",
                train.join("model.ckpt").to_str().unwrap(),
                "--data",
                d,
                "--out",
                eval.to_str().unwrap(),
                "--dump-qualitative",
            ]),
            cli(&[
                "ablate",
                "--config",
                cfg,
                "--data",
                d,
                "--out",
                ablate.to_str().unwrap(),
                "--seeds",
                "4",
            ]),
        ];
        if codes.iter().any(|&c| c != 0) {
            return Verdict::new(false, format!("commands exited with {codes:?}"));
        }
        trees.push(dir_bytes(&root));
    }
    let (a, b) = (&trees[0], &trees[1]);
    if a.keys().ne(b.keys()) {
        mismatches.push("file sets differ".to_string());
    }
    for (name, bytes) in a {
        if is_timing_record(name) {
            continue;
        }
        compared += 1;
        if b.get(name) != Some(bytes) {
            mismatches.push(name.clone());
        }
    }
    let csvs = a.keys().filter(|n| n.ends_with(".csv")).count();
    let ckpts = a.keys().filter(|n| n.ends_with(".ckpt")).count();
    let detail = if mismatches.is_empty() {
        format!("generate/train/eval/ablate rerun: {compared} files byte-identical ({csvs} CSV, {ckpts} checkpoints)")
    } else {
        format!("{} differing files, first: {}", mismatches.len(), mismatches[0])
    };
    Verdict::new(mismatches.is_empty() && csvs > 0 && ckpts > 0, detail)
}

// ---------------------------------------------------------------- data contract

fn criterion_audit(work: &Path) -> Verdict {
    let cfg = work.join("audit.json");
    std::fs::write(&cfg, SMALL_CONFIG).unwrap();
    let data = work.join("audit_data");
    if cli(&["generate", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]) != 0 {
        return Verdict::new(false, "generate failed");
    }
    let base: dacs_core::ExperimentConfig =
        dacs_core::ExperimentConfig::from_json(SMALL_CONFIG).unwrap();
    let cases = [
        (Variant::SourceOnly, MixStrategy::ClassMix),
        (Variant::Dacs, MixStrategy::ClassMix),
        (Variant::Dacs, MixStrategy::default_cutmix()),
        (Variant::Dacs, MixStrategy::default_cowmix()),
        (Variant::NaiveMixing, MixStrategy::ClassMix),
        (Variant::NaiveMixingDistalign, MixStrategy::ClassMix),
        (Variant::PseudoOnly, MixStrategy::ClassMix),
    ];
    let mut problems = Vec::new();
    for (variant, strategy) in cases {
        let label = format!("{}/{}", variant.name(), strategy.name());
        let dir = DataDir::open(&data).unwrap();
        let train = TrainConfig {
            variant,
            strategy,
            ..base.train.clone()
        };
        let out = work.join(format!("audit_{}_{}", variant.name(), strategy.name()));
        let report = run(&train, &dir, &out, &RunOptions::default()).unwrap();
        let records = dir.access_log().records();
        if dir.access_log().target_train_label_reads() != 0 {
            problems.push(format!("{label} read target-train labels"));
        }
        let target_train: Vec<_> = records.iter().filter(|r| r.split == Split::TargetTrain).collect();
        if variant == Variant::SourceOnly {
            // the periodic held-out evaluation is the only target access
            let training_target = records
                .iter()
                .filter(|r| r.split.domain() == DomainTag::Target && r.split != Split::TargetEval)
                .count();
            if training_target != 0 {
                problems.push(format!("{label} touched {training_target} target training files"));
            }
        } else if !target_train.iter().all(|r| r.kind == FileKind::Images) || target_train.is_empty() {
            problems.push(format!("{label} unexpected target-train access {target_train:?}"));
        }
        let audit: Vec<dacs_core::storage::AccessRecord> =
            serde_json::from_str(&std::fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
        if audit != report.target_train_reads || audit.len() != target_train.len() {
            problems.push(format!("{label} audit file disagrees with the access log"));
        }
    }
    let detail = if problems.is_empty() {
        "7 variant/strategy runs: 0 target-train label reads; source_only reads no target training file"
            .to_string()
    } else {
        format!("{} problems, first: {}", problems.len(), problems[0])
    };
    Verdict::new(problems.is_empty(), detail)
}

fn main() {
    // `cargo test` passes harness flags (e.g. `--nocapture`); a name filter
    // that does not mention this suite skips it.
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut filters = Vec::new();
    let mut i = 0;
    while i < args.len() {
        if args[i] == "--skip" {
            if args.get(i + 1).is_some_and(|s| "acceptance".contains(s.as_str())) {
                return;
            }
            i += 2;
            continue;
        }
        if !args[i].starts_with('-') {
            filters.push(args[i].clone());
        }
        i += 1;
    }
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let work = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
        ("gradient oracle", Box::new(criterion_gradients)),
        ("mixing algebra", Box::new(criterion_mixing)),
        ("metric oracle", Box::new(criterion_metrics)),
        ("lambda schedule", Box::new(criterion_lambda)),
        ("distribution alignment", Box::new(criterion_alignment)),
        ("end-to-end ordering", Box::new(|| criterion_ordering(work.path()))),
        ("determinism", Box::new(|| criterion_determinism(work.path()))),
        ("unlabeled-data contract", Box::new(|| criterion_audit(work.path()))),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let verdict = check();
        let status = if verdict.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {status} {name} ({:.1}s): {}",
            i + 1,
            started.elapsed().as_secs_f64(),
            verdict.detail
        );
        if !verdict.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
