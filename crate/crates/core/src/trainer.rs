//! Training loop for cross-domain mixed sampling and its ablation variants.
//!
//! Every step draws a labelled source batch, builds pseudo-labels for the
//! unlabelled target images with a gradient-free forward pass, and minimizes
//!
//! ```text
//! H(f(X_S), Y_S) + lambda * H(f(X_U), Y_U)
//! ```
//!
//! where `(X_U, Y_U)` depends on the variant: source/target mixes (`dacs`),
//! target/target mixes (`naive_mixing`, optionally with distribution
//! alignment), plain target images (`pseudo_only`), or nothing
//! (`source_only`). `lambda` is the fraction of confidently predicted target
//! pixels in each image.
//!
//! RNG streams, all derived from the training seed:
//! model init, source shuffles `[1]`, target shuffles `[2]`, and one stream
//! per iteration `[3, iter]` for masks and photometric noise. Source batches
//! and the model initialization are therefore identical across variants.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::grid::{
    argmax_labels, composite, composite_values, max_confidence, ImageBatch, LabelMap, MixMask,
    ProbMap,
};
use crate::metrics::{conflation_count, ConfusionMatrix, DEFAULT_CONFLATION_THRESHOLD};
use crate::mix::{cross_domain_mix, photometric, strategy_mask, MixStrategy, PhotometricConfig};
use crate::model::{Architecture, Params, PixelWeights, SegModel};
use crate::optim::{sgd_step, OptimizerConfig, OptimizerState};
use crate::seeding::stream_rng;
use crate::storage::{write_json, write_label_ppm, write_ppm, AccessRecord, DataDir};
use crate::synthgen::{Dataset, Split};

const PRIOR_FLOOR: f64 = 1e-6;
const EVAL_CHUNK: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    SourceOnly,
    Dacs,
    NaiveMixing,
    PseudoOnly,
    NaiveMixingDistalign,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Dacs => "dacs",
            Variant::NaiveMixing => "naive_mixing",
            Variant::PseudoOnly => "pseudo_only",
            Variant::NaiveMixingDistalign => "naive_mixing_distalign",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Variant::SourceOnly
    }
}

/// How the confidence fraction weights the unsupervised loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// One scalar per mixed image: its share of confident target pixels.
    #[default]
    PerImage,
    /// Each target pixel weighted 1 if confident else 0; source pixels 1.
    PerPixel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub strategy: MixStrategy,
    pub photometric: PhotometricConfig,
    pub iters: usize,
    pub source_batch: usize,
    pub mixed_batch: usize,
    pub confidence_threshold: f64,
    pub lambda_mode: LambdaMode,
    /// Forces every lambda to this value (diagnostics only).
    pub lambda_override: Option<f64>,
    pub eval_every: usize,
    pub seed: u64,
    pub features: usize,
    pub optimizer: OptimizerConfig,
    pub dist_align_ema: f64,
    pub conflation_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dacs,
            strategy: MixStrategy::ClassMix,
            photometric: PhotometricConfig::default(),
            iters: 3000,
            source_batch: 2,
            mixed_batch: 2,
            confidence_threshold: 0.968,
            lambda_mode: LambdaMode::PerImage,
            lambda_override: None,
            eval_every: 500,
            seed: 1,
            features: 16,
            optimizer: OptimizerConfig::default(),
            dist_align_ema: 0.999,
            conflation_threshold: DEFAULT_CONFLATION_THRESHOLD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::Config("iters must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if self.source_batch == 0 || self.mixed_batch == 0 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if self.mixed_batch > self.source_batch {
            return Err(Error::Config(
                "mixed_batch cannot exceed source_batch: mixed samples reuse source items".into(),
            ));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config("confidence_threshold must lie in (0, 1]".into()));
        }
        if let Some(l) = self.lambda_override {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config("lambda_override must lie in [0, 1]".into()));
            }
        }
        if self.features == 0 {
            return Err(Error::Config("features must be >= 1".into()));
        }
        if !(self.dist_align_ema > 0.0 && self.dist_align_ema < 1.0) {
            return Err(Error::Config("dist_align_ema must lie in (0, 1)".into()));
        }
        if !(self.conflation_threshold >= 0.0 && self.conflation_threshold <= 1.0) {
            return Err(Error::Config("conflation_threshold must lie in [0, 1]".into()));
        }
        self.strategy.validate()?;
        self.photometric.validate()?;
        self.optimizer.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub labels: LabelMap,
}

impl LabeledBatch {
    fn prefix(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n).collect();
        Ok(Self {
            images: self.images.select(&idx)?,
            labels: self.labels.select(&idx)?,
        })
    }
}

/// Loss terms of one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepStats {
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub mean_lambda: f64,
}

/// Share of pixels per image whose maximum class probability is at least `tau`.
pub fn adaptive_lambda(p_target: &ProbMap, tau: f64) -> Vec<f64> {
    let hw = p_target.pixels_per_item();
    confident_fraction(&max_confidence(p_target), hw, tau)
}

fn confident_fraction(confidence: &[f64], hw: usize, tau: f64) -> Vec<f64> {
    confidence
        .chunks_exact(hw)
        .map(|img| img.iter().filter(|&&c| c >= tau).count() as f64 / hw as f64)
        .collect()
}

/// Target class prior and running mean of predicted class distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistAlignState {
    pub prior: Vec<f64>,
    pub running: Vec<f64>,
    pub ema_decay: f64,
}

fn check_distribution(name: &str, v: &[f64]) -> Result<()> {
    let sum: f64 = v.iter().sum();
    if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidInput(format!(
            "{name} must be a probability vector, got {v:?}"
        )));
    }
    Ok(())
}

impl DistAlignState {
    /// Starts the running average at the uniform distribution.
    pub fn new(prior: Vec<f64>, ema_decay: f64) -> Result<Self> {
        let k = prior.len();
        Self::with_running(prior, vec![1.0 / k as f64; k], ema_decay)
    }

    pub fn with_running(prior: Vec<f64>, running: Vec<f64>, ema_decay: f64) -> Result<Self> {
        if prior.is_empty() || prior.len() != running.len() {
            return Err(Error::shape(
                format!("prior and running of equal non-zero length ({})", prior.len()),
                format!("running of length {}", running.len()),
            ));
        }
        if !(ema_decay > 0.0 && ema_decay < 1.0) {
            return Err(Error::InvalidInput("ema_decay must lie in (0, 1)".into()));
        }
        check_distribution("prior", &prior)?;
        check_distribution("running average", &running)?;
        Ok(Self {
            prior,
            running,
            ema_decay,
        })
    }

    /// Prior from the class histogram of a label map.
    pub fn from_labels(labels: &LabelMap, ema_decay: f64) -> Result<Self> {
        let hist = labels.histogram();
        let total: u64 = hist.iter().sum();
        if total == 0 {
            return Err(Error::InvalidInput("prior labels contain no scored pixels".into()));
        }
        Self::new(hist.iter().map(|&c| c as f64 / total as f64).collect(), ema_decay)
    }
}

/// Rescales every pixel's class vector by `prior / running` and renormalizes,
/// then folds the mean unaligned prediction into the running average.
pub fn distribution_align(q: &ProbMap, state: &mut DistAlignState) -> Result<ProbMap> {
    let (n, k, h, w) = q.shape();
    if state.prior.len() != k {
        return Err(Error::shape(format!("K={}", state.prior.len()), format!("K={k}")));
    }
    check_distribution("prior", &state.prior)?;
    check_distribution("running average", &state.running)?;
    let ratio: Vec<f64> = state
        .prior
        .iter()
        .zip(&state.running)
        .map(|(p, r)| p / r.max(PRIOR_FLOOR))
        .collect();
    let hw = h * w;
    let mut out = vec![0.0; q.data().len()];
    let mut mean = vec![0.0; k];
    for i in 0..n {
        let src = q.item(i);
        let dst = &mut out[i * k * hw..(i + 1) * k * hw];
        for px in 0..hw {
            let mut sum = 0.0;
            for c in 0..k {
                let v = src[c * hw + px] * ratio[c];
                dst[c * hw + px] = v;
                sum += v;
                mean[c] += src[c * hw + px];
            }
            if !(sum > 0.0 && sum.is_finite()) {
                return Err(Error::Numerical(format!(
                    "aligned distribution at item {i}, pixel {px} cannot be normalized"
                )));
            }
            for c in 0..k {
                dst[c * hw + px] /= sum;
            }
        }
    }
    let count = (n * hw) as f64;
    let decay = state.ema_decay;
    for (r, m) in state.running.iter_mut().zip(&mean) {
        *r = decay * *r + (1.0 - decay) * m / count;
    }
    ProbMap::new(n, k, h, w, out)
}

fn unsup_weights(
    cfg: &TrainConfig,
    confidence: &[f64],
    from_source: Option<&MixMask>,
    hw: usize,
) -> (PixelWeights, f64) {
    let tau = cfg.confidence_threshold;
    let per_image = match cfg.lambda_override {
        Some(l) => vec![l; confidence.len() / hw],
        None => confident_fraction(confidence, hw, tau),
    };
    let mean = per_image.iter().sum::<f64>() / per_image.len() as f64;
    let weights = match (cfg.lambda_mode, cfg.lambda_override) {
        (LambdaMode::PerPixel, None) => PixelWeights::PerPixel(
            confidence
                .iter()
                .enumerate()
                .map(|(p, &c)| {
                    let source_pixel = from_source.is_some_and(|m| m.data()[p]);
                    if source_pixel || c >= tau {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect(),
        ),
        _ => PixelWeights::per_image(&per_image, hw),
    };
    (weights, mean)
}

fn all_zero(weights: &PixelWeights) -> bool {
    match weights {
        PixelWeights::Uniform(w) => *w == 0.0,
        PixelWeights::PerPixel(v) => v.iter().all(|&w| w == 0.0),
    }
}

/// Supervised loss plus optional weighted pseudo-labelled term, then one
/// SGD step. Pseudo-labels enter only as constant targets.
fn update(
    model: &mut SegModel,
    opt: &mut OptimizerState,
    source: &LabeledBatch,
    unsup: Option<(&ImageBatch, &LabelMap, &PixelWeights)>,
    iter: usize,
) -> Result<(f64, f64)> {
    let sup = model.loss_and_grad(&source.images, &source.labels, &PixelWeights::Uniform(1.0))?;
    let mut grads: Params = sup.grads;
    let mut unsup_loss = 0.0;
    if let Some((x, y, w)) = unsup {
        if !all_zero(w) {
            let out = model.loss_and_grad(x, y, w)?;
            grads.add_scaled(&out.grads, 1.0);
            unsup_loss = out.loss;
        }
    }
    if !(sup.loss.is_finite() && unsup_loss.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite loss at iteration {iter} (supervised {}, unsupervised {unsup_loss})",
            sup.loss
        )));
    }
    sgd_step(model, opt, &grads, iter)?;
    Ok((sup.loss, unsup_loss))
}

pub fn source_only_step(
    model: &mut SegModel,
    opt: &mut OptimizerState,
    source: &LabeledBatch,
    iter: usize,
) -> Result<StepStats> {
    let (sup_loss, _) = update(model, opt, source, None, iter)?;
    Ok(StepStats {
        sup_loss,
        ..Default::default()
    })
}

/// Pseudo-labels `target`, mixes the first `mixed_batch` source items onto
/// it, perturbs the mixed images, and takes one step. Returns the mixed
/// batch alongside the stats for inspection.
pub fn dacs_step<R: Rng + ?Sized>(
    model: &mut SegModel,
    opt: &mut OptimizerState,
    source: &LabeledBatch,
    target: &ImageBatch,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut R,
) -> Result<(StepStats, LabeledBatch)> {
    let m = target.len();
    if m > source.images.len() {
        return Err(Error::shape(
            format!("at most {} target items", source.images.len()),
            format!("{m}"),
        ));
    }
    let probs = model.forward(target)?;
    let pseudo = argmax_labels(&probs);
    let confidence = max_confidence(&probs);
    let paired = source.prefix(m)?;
    let mixed = cross_domain_mix(
        &paired.images,
        &paired.labels,
        target,
        &pseudo,
        &cfg.strategy,
        rng,
    )?;
    let images = photometric(&mixed.images, &cfg.photometric, rng)?;
    let hw = target.height() * target.width();
    let (weights, mean_lambda) = unsup_weights(cfg, &confidence, Some(&mixed.mask), hw);
    let (sup_loss, unsup_loss) = update(
        model,
        opt,
        source,
        Some((&images, &mixed.labels, &weights)),
        iter,
    )?;
    Ok((
        StepStats {
            sup_loss,
            unsup_loss,
            mean_lambda,
        },
        LabeledBatch {
            images,
            labels: mixed.labels,
        },
    ))
}

/// Mixes pairs of target images: the mask comes from the prediction on the
/// first image of each pair, pseudo-labels from both predictions.
#[allow(clippy::too_many_arguments)]
pub fn naive_mixing_step<R: Rng + ?Sized>(
    model: &mut SegModel,
    opt: &mut OptimizerState,
    source: &LabeledBatch,
    target_first: &ImageBatch,
    target_second: &ImageBatch,
    cfg: &TrainConfig,
    iter: usize,
    rng: &mut R,
    dist_align: Option<&mut DistAlignState>,
) -> Result<(StepStats, LabeledBatch)> {
    if target_first.shape() != target_second.shape() {
        return Err(Error::shape(
            format!("{:?}", target_first.shape()),
            format!("{:?}", target_second.shape()),
        ));
    }
    let m = target_first.len();
    let both = ImageBatch::concat(&[target_first, target_second])?;
    let mut probs = model.forward(&both)?;
    if let Some(state) = dist_align {
        probs = distribution_align(&probs, state)?;
    }
    let pseudo = argmax_labels(&probs);
    let confidence = max_confidence(&probs);
    let first: Vec<usize> = (0..m).collect();
    let second: Vec<usize> = (m..2 * m).collect();
    let (pseudo_a, pseudo_b) = (pseudo.select(&first)?, pseudo.select(&second)?);
    let hw = target_first.height() * target_first.width();
    let (conf_a, conf_b) = confidence.split_at(m * hw);

    let (h, w) = (target_first.height(), target_first.width());
    let masks = (0..m)
        .map(|i| strategy_mask(&cfg.strategy, pseudo_a.item(i), h, w, rng))
        .collect::<Result<Vec<_>>>()?;
    let mask = MixMask::stack(&masks)?;
    let mixed_images = composite(&mask, target_first, target_second)?;
    let mixed_labels = composite(&mask, &pseudo_a, &pseudo_b)?;
    let mixed_conf = composite_values(&mask, conf_a, conf_b)?;
    let images = photometric(&mixed_images, &cfg.photometric, rng)?;
    let (weights, mean_lambda) = unsup_weights(cfg, &mixed_conf, None, hw);
    let (sup_loss, unsup_loss) = update(
        model,
        opt,
        source,
        Some((&images, &mixed_labels, &weights)),
        iter,
    )?;
    Ok((
        StepStats {
            sup_loss,
            unsup_loss,
            mean_lambda,
        },
        LabeledBatch {
            images,
            labels: mixed_labels,
        },
    ))
}

/// Self-training on unmixed target images, no photometric perturbation.
pub fn pseudo_only_step(
    model: &mut SegModel,
    opt: &mut OptimizerState,
    source: &LabeledBatch,
    target: &ImageBatch,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<StepStats> {
    let probs = model.forward(target)?;
    let pseudo = argmax_labels(&probs);
    let confidence = max_confidence(&probs);
    let hw = target.height() * target.width();
    let (weights, mean_lambda) = unsup_weights(cfg, &confidence, None, hw);
    let (sup_loss, unsup_loss) = update(model, opt, source, Some((target, &pseudo, &weights)), iter)?;
    Ok(StepStats {
        sup_loss,
        unsup_loss,
        mean_lambda,
    })
}

/// Draws indices without replacement, reshuffling at every epoch boundary.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    pub fn new(len: usize, rng: ChaCha8Rng) -> Self {
        let mut s = Self {
            order: (0..len).collect(),
            pos: len,
            rng,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, count: usize) -> Vec<usize> {
        (0..count)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    pub conflated: usize,
}

pub fn evaluate(model: &SegModel, data: &Dataset, conflation_threshold: f64) -> Result<EvalMetrics> {
    let k = data.labels.num_classes();
    let mut cm = ConfusionMatrix::new(k);
    let n = data.len();
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let pred = argmax_labels(&model.forward(&data.images.select(&idx)?)?);
        cm.accumulate(&data.labels.select(&idx)?, &pred)?;
    }
    let report = cm.iou();
    Ok(EvalMetrics {
        conflated: conflation_count(&report.per_class, conflation_threshold),
        per_class_iou: report.per_class,
        miou: report.miou,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iteration: usize,
    /// Mean loss terms over the steps since the previous row.
    pub sup_loss: Option<f64>,
    pub unsup_loss: Option<f64>,
    pub mean_lambda: Option<f64>,
    pub metrics: EvalMetrics,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

pub fn csv_header(k: usize) -> String {
    let ious: Vec<String> = (0..k).map(|c| format!("iou_{c}")).collect();
    format!(
        "iteration,sup_loss,unsup_loss,mean_lambda,{},miou,conflated",
        ious.join(",")
    )
}

/// The metric columns of a CSV row (everything after `mean_lambda`).
pub fn format_metrics(m: &EvalMetrics) -> String {
    let ious: Vec<String> = m.per_class_iou.iter().map(|v| fmt_opt(*v)).collect();
    format!("{},{},{}", ious.join(","), fmt_opt(m.miou), m.conflated)
}

impl EvalRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.iteration,
            fmt_opt(self.sup_loss),
            fmt_opt(self.unsup_loss),
            fmt_opt(self.mean_lambda),
            format_metrics(&self.metrics)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEval {
    pub iteration: usize,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub data_config_hash: String,
    pub seed: u64,
    pub variant: Variant,
    pub strategy: String,
    /// Set for runs that read the target class prior from evaluation labels.
    pub prior_source: Option<String>,
    pub rows: Vec<EvalRow>,
    pub final_per_class_iou: Vec<Option<f64>>,
    pub final_miou: Option<f64>,
    pub conflation_count: usize,
    pub best: Option<BestEval>,
    pub target_train_reads: Vec<AccessRecord>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Write the last step's mixed images and labels under `out/mixed/`.
    pub dump_mixed: bool,
    /// Also track the best evaluation and keep its checkpoint.
    pub report_best_on_eval: bool,
}

#[derive(Serialize)]
struct EffectiveTrainConfig<'a> {
    train: &'a TrainConfig,
    data_config_hash: &'a str,
}

struct Window {
    sup: f64,
    unsup: f64,
    lambda: f64,
    steps: usize,
}

impl Window {
    fn new() -> Self {
        Self {
            sup: 0.0,
            unsup: 0.0,
            lambda: 0.0,
            steps: 0,
        }
    }

    fn push(&mut self, s: &StepStats) {
        self.sup += s.sup_loss;
        self.unsup += s.unsup_loss;
        self.lambda += s.mean_lambda;
        self.steps += 1;
    }

    fn means(&self, uses_target: bool) -> (Option<f64>, Option<f64>, Option<f64>) {
        if self.steps == 0 {
            return (None, None, None);
        }
        let n = self.steps as f64;
        if uses_target {
            (Some(self.sup / n), Some(self.unsup / n), Some(self.lambda / n))
        } else {
            (Some(self.sup / n), None, None)
        }
    }
}

fn dump_batch(dir: &Path, batch: &LabeledBatch) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (n, _, h, w) = batch.images.shape();
    let k = batch.labels.num_classes();
    for i in 0..n {
        write_ppm(&dir.join(format!("mixed_{i}.ppm")), batch.images.item(i), h, w)?;
        write_label_ppm(&dir.join(format!("mixed_{i}_labels.ppm")), batch.labels.item(i), k, h, w)?;
        let raw = dir.join(format!("mixed_{i}_labels.u8"));
        fs::write(&raw, batch.labels.item(i)).map_err(|e| Error::io(&raw, e))?;
    }
    Ok(())
}

/// Output files of a training run.
pub struct RunFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub config: PathBuf,
    pub audit: PathBuf,
}

impl RunFiles {
    pub fn new(out_dir: &Path) -> Self {
        Self {
            csv: out_dir.join("metrics.csv"),
            summary: out_dir.join("summary.json"),
            checkpoint: out_dir.join("model.ckpt"),
            best_checkpoint: out_dir.join("best.ckpt"),
            config: out_dir.join("config.json"),
            audit: out_dir.join("audit.json"),
        }
    }
}

/// Trains the configured variant for `cfg.iters` steps, evaluating on the
/// target evaluation split at iteration 0, every `eval_every` steps, and at
/// the end. Writes `metrics.csv`, `summary.json`, `model.ckpt`,
/// `config.json` and `audit.json` into `out_dir`.
pub fn run(cfg: &TrainConfig, data: &DataDir, out_dir: &Path, opts: &RunOptions) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let files = RunFiles::new(out_dir);
    let manifest = data.manifest().clone();
    write_json(
        &files.config,
        &EffectiveTrainConfig {
            train: cfg,
            data_config_hash: &manifest.generator_config_hash,
        },
    )?;

    let source = data.load_dataset(Split::SourceTrain)?;
    let target_images = if cfg.variant.uses_target() {
        Some(data.load_images(Split::TargetTrain)?)
    } else {
        None
    };
    let eval = data.load_dataset(Split::TargetEval)?;

    let arch = Architecture {
        in_channels: manifest.channels,
        features: cfg.features,
        num_classes: manifest.num_classes,
    };
    let mut model = SegModel::new(arch, cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.iters, &model)?;
    let mut source_sampler = EpochSampler::new(source.len(), stream_rng(cfg.seed, &[1]));
    let mut target_sampler = target_images
        .as_ref()
        .map(|t| EpochSampler::new(t.len(), stream_rng(cfg.seed, &[2])));
    let mut dist_align = match cfg.variant {
        Variant::NaiveMixingDistalign => Some(DistAlignState::from_labels(&eval.labels, cfg.dist_align_ema)?),
        _ => None,
    };

    let mut csv = fs::File::create(&files.csv).map_err(|e| Error::io(&files.csv, e))?;
    writeln!(csv, "{}", csv_header(arch.num_classes)).map_err(|e| Error::io(&files.csv, e))?;
    let mut write_row = |row: &EvalRow| -> Result<()> {
        writeln!(csv, "{}", row.to_csv()).map_err(|e| Error::io(&files.csv, e))
    };

    let mut rows = Vec::new();
    let mut best: Option<BestEval> = None;
    let mut record = |iteration: usize, window: &Window, model: &SegModel| -> Result<EvalRow> {
        let metrics = evaluate(model, &eval, cfg.conflation_threshold)?;
        let (sup_loss, unsup_loss, mean_lambda) = window.means(cfg.variant.uses_target());
        model.save_checkpoint(&files.checkpoint, iteration)?;
        if opts.report_best_on_eval {
            if let Some(m) = metrics.miou {
                if best.as_ref().map_or(true, |b| m > b.miou) {
                    best = Some(BestEval { iteration, miou: m });
                    model.save_checkpoint(&files.best_checkpoint, iteration)?;
                }
            }
        }
        Ok(EvalRow {
            iteration,
            sup_loss,
            unsup_loss,
            mean_lambda,
            metrics,
        })
    };

    let row = record(0, &Window::new(), &model)?;
    write_row(&row)?;
    rows.push(row);

    let mut window = Window::new();
    for iter in 0..cfg.iters {
        let batch_idx = source_sampler.next_batch(cfg.source_batch);
        let batch = LabeledBatch {
            images: source.images.select(&batch_idx)?,
            labels: source.labels.select(&batch_idx)?,
        };
        let mut rng = stream_rng(cfg.seed, &[3, iter as u64]);
        let (stats, mixed) = match cfg.variant {
            Variant::SourceOnly => (source_only_step(&mut model, &mut opt, &batch, iter)?, None),
            Variant::Dacs => {
                let (t, s) = (target_images.as_ref(), target_sampler.as_mut());
                let t = t.zip(s).expect("target data loaded for dacs");
                let target = t.0.select(&t.1.next_batch(cfg.mixed_batch))?;
                let (stats, mixed) =
                    dacs_step(&mut model, &mut opt, &batch, &target, cfg, iter, &mut rng)?;
                (stats, Some(mixed))
            }
            Variant::NaiveMixing | Variant::NaiveMixingDistalign => {
                let (t, s) = (target_images.as_ref(), target_sampler.as_mut());
                let (t, s) = t.zip(s).expect("target data loaded for naive mixing");
                let first = t.select(&s.next_batch(cfg.mixed_batch))?;
                let second = t.select(&s.next_batch(cfg.mixed_batch))?;
                let (stats, mixed) = naive_mixing_step(
                    &mut model,
                    &mut opt,
                    &batch,
                    &first,
                    &second,
                    cfg,
                    iter,
                    &mut rng,
                    dist_align.as_mut(),
                )?;
                (stats, Some(mixed))
            }
            Variant::PseudoOnly => {
                let (t, s) = (target_images.as_ref(), target_sampler.as_mut());
                let (t, s) = t.zip(s).expect("target data loaded for pseudo-labelling");
                let target = t.select(&s.next_batch(cfg.mixed_batch))?;
                (pseudo_only_step(&mut model, &mut opt, &batch, &target, cfg, iter)?, None)
            }
        };
        window.push(&stats);
        let done = iter + 1;
        if opts.dump_mixed && done == cfg.iters {
            if let Some(m) = &mixed {
                dump_batch(&out_dir.join("mixed"), m)?;
            }
        }
        if done % cfg.eval_every == 0 || done == cfg.iters {
            let row = record(done, &window, &model)?;
            write_row(&row)?;
            rows.push(row);
            window = Window::new();
        }
    }
    drop(write_row);

    let last = rows.last().expect("at least the initial evaluation").metrics.clone();
    let target_train_reads = data.access_log().target_train_reads();
    write_json(&files.audit, &target_train_reads)?;
    let report = RunReport {
        config_hash: config_hash(cfg),
        data_config_hash: manifest.generator_config_hash.clone(),
        seed: cfg.seed,
        variant: cfg.variant,
        strategy: cfg.strategy.name().into(),
        prior_source: dist_align.as_ref().map(|_| "oracle-prior".to_string()),
        rows,
        final_per_class_iou: last.per_class_iou,
        final_miou: last.miou,
        conflation_count: last.conflated,
        best,
        target_train_reads,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    write_json(&files.summary, &report)?;
    Ok(report)
}
