//! Procedural two-domain street-scene benchmark.
//!
//! Every scene is a sky band (class 0) above a road band (class 1), with an
//! optional thin sidewalk band (class 2) between them, and up to `K - 3`
//! foreground objects (classes `3..K`). Source and target domains differ in
//! base colors, a global color shift, texture noise, and class frequencies.
//! In the target domain the sidewalk color sits right next to the road color
//! and sidewalks are rarer, which is what makes naive self-training merge
//! the two classes.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageBatch, LabelMap};
use crate::seeding::{derive_seed, stream_rng};

pub const SKY: u8 = 0;
pub const ROAD: u8 = 1;
pub const SIDEWALK: u8 = 2;
pub const FIRST_OBJECT: u8 = 3;
pub const MIN_CLASSES: usize = 4;
pub const MIN_SIDE: usize = 16;
pub const CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandLayout {
    /// Range of the sky band's height, as a fraction of the image height.
    pub sky_fraction: [f64; 2],
    /// Range of the sidewalk band's thickness, as a fraction of the image height.
    pub sidewalk_fraction: [f64; 2],
    /// Maximum horizon slope in rows per column.
    pub max_tilt: f64,
    /// Range of object radius (circles) or half-extent (rectangles), as a
    /// fraction of the smaller image side.
    pub object_size: [f64; 2],
}

impl Default for BandLayout {
    fn default() -> Self {
        Self {
            sky_fraction: [0.25, 0.4],
            sidewalk_fraction: [0.08, 0.14],
            max_tilt: 0.15,
            object_size: [0.08, 0.16],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub class_colors: Vec<[f64; 3]>,
    pub class_frequency: Vec<f64>,
    pub color_shift: [f64; 3],
    pub texture_noise_sigma: f64,
    pub layout: BandLayout,
}

impl DomainSpec {
    /// Default source domain for six classes: well separated class colors.
    pub fn default_source() -> Self {
        Self {
            class_colors: vec![
                [0.45, 0.65, 0.90],
                [0.35, 0.35, 0.38],
                [0.60, 0.50, 0.40],
                [0.80, 0.15, 0.15],
                [0.10, 0.75, 0.10],
                [0.90, 0.80, 0.20],
            ],
            class_frequency: vec![1.0, 1.0, 0.45, 0.6, 0.6, 0.6],
            color_shift: [0.0, 0.0, 0.0],
            texture_noise_sigma: 0.03,
            layout: BandLayout::default(),
        }
    }

    /// Default target domain: a global color shift, heavier noise, and a
    /// sidewalk that is rarer and nearly road-colored.
    pub fn default_target() -> Self {
        Self {
            class_colors: vec![
                [0.45, 0.65, 0.90],
                [0.35, 0.35, 0.38],
                [0.417, 0.39, 0.385],
                [0.80, 0.15, 0.15],
                [0.00, 0.70, 0.15],
                [0.90, 0.80, 0.20],
            ],
            class_frequency: vec![1.0, 1.0, 0.225, 0.6, 0.6, 0.6],
            // moves target road most of the way toward the source sidewalk
            color_shift: [0.20, 0.11, -0.05],
            texture_noise_sigma: 0.06,
            layout: BandLayout::default(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_colors.len()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.class_colors.len() != num_classes || self.class_frequency.len() != num_classes {
            return Err(Error::Config(format!(
                "domain spec has {} colors and {} frequencies, expected {num_classes} of each",
                self.class_colors.len(),
                self.class_frequency.len()
            )));
        }
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.class_colors.iter().flatten().all(|&v| in_unit(v)) {
            return Err(Error::Config("class colors must lie in [0, 1]".into()));
        }
        if !self.class_frequency.iter().all(|&f| in_unit(f)) {
            return Err(Error::Config("class frequencies must lie in [0, 1]".into()));
        }
        if self.class_frequency[SKY as usize] != 1.0 || self.class_frequency[ROAD as usize] != 1.0 {
            return Err(Error::Config(
                "sky and road are backbone classes and must have frequency 1".into(),
            ));
        }
        if !self.color_shift.iter().all(|v| v.is_finite()) {
            return Err(Error::Config("color shift must be finite".into()));
        }
        if !(self.texture_noise_sigma >= 0.0 && self.texture_noise_sigma.is_finite()) {
            return Err(Error::Config("texture_noise_sigma must be >= 0".into()));
        }
        let l = &self.layout;
        for (name, [lo, hi]) in [
            ("sky_fraction", l.sky_fraction),
            ("sidewalk_fraction", l.sidewalk_fraction),
            ("object_size", l.object_size),
        ] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::Config(format!("layout.{name} must satisfy 0 <= lo <= hi <= 1")));
            }
        }
        if l.sky_fraction[1] + l.sidewalk_fraction[1] >= 1.0 {
            return Err(Error::Config("sky and sidewalk bands leave no room for road".into()));
        }
        if !(l.max_tilt >= 0.0 && l.max_tilt.is_finite()) {
            return Err(Error::Config("layout.max_tilt must be >= 0".into()));
        }
        Ok(())
    }
}

/// Euclidean RGB distance between the base colors of two classes.
pub fn color_distance(spec: &DomainSpec, a: usize, b: usize) -> f64 {
    spec.class_colors[a]
        .iter()
        .zip(&spec.class_colors[b])
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Eval,
}

/// The three splits of the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    TargetTrain,
    TargetEval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::SourceTrain, Split::TargetTrain, Split::TargetEval];

    pub fn dir_name(self) -> &'static str {
        match self {
            Split::SourceTrain => "source_train",
            Split::TargetTrain => "target_train",
            Split::TargetEval => "target_eval",
        }
    }

    pub fn domain(self) -> DomainTag {
        match self {
            Split::SourceTrain => DomainTag::Source,
            Split::TargetTrain | Split::TargetEval => DomainTag::Target,
        }
    }

    pub fn kind(self) -> SplitKind {
        match self {
            Split::SourceTrain | Split::TargetTrain => SplitKind::Train,
            Split::TargetEval => SplitKind::Eval,
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Split::SourceTrain => 1,
            Split::TargetTrain => 2,
            Split::TargetEval => 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageBatch,
    pub labels: LabelMap,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: ImageBatch, labels: LabelMap, split: Split) -> Result<Self> {
        let (n, _, h, w) = images.shape();
        if labels.shape() != (n, h, w) {
            return Err(Error::shape(
                format!("labels ({n}, {h}, {w})"),
                format!("labels {:?}", labels.shape()),
            ));
        }
        Ok(Self {
            images,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn domain(&self) -> DomainTag {
        self.split.domain()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub source_train: usize,
    pub target_train: usize,
    pub target_eval: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            source_train: 400,
            target_train: 400,
            target_eval: 100,
            height: 64,
            width: 64,
            num_classes: 6,
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        check_scene_shape(self.height, self.width, self.num_classes)?;
        if self.source_train == 0 || self.target_train == 0 || self.target_eval == 0 {
            return Err(Error::Config("every split needs at least one scene".into()));
        }
        self.source.validate(self.num_classes)?;
        self.target.validate(self.num_classes)?;
        Ok(())
    }

    pub fn split_size(&self, split: Split) -> usize {
        match split {
            Split::SourceTrain => self.source_train,
            Split::TargetTrain => self.target_train,
            Split::TargetEval => self.target_eval,
        }
    }

    pub fn domain_spec(&self, domain: DomainTag) -> &DomainSpec {
        match domain {
            DomainTag::Source => &self.source,
            DomainTag::Target => &self.target,
        }
    }
}

fn check_scene_shape(h: usize, w: usize, k: usize) -> Result<()> {
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::InvalidInput(format!(
            "scene must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}"
        )));
    }
    if !(MIN_CLASSES..crate::grid::MAX_CLASSES).contains(&k) {
        return Err(Error::InvalidInput(format!(
            "scene needs at least {MIN_CLASSES} classes, got {k}"
        )));
    }
    Ok(())
}

enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

/// Renders one scene as a single-item image batch and its exact label map.
pub fn generate_scene(
    spec: &DomainSpec,
    seed: u64,
    h: usize,
    w: usize,
    k: usize,
) -> Result<(ImageBatch, LabelMap)> {
    check_scene_shape(h, w, k)?;
    spec.validate(k).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = stream_rng(seed, &[]);
    let layout = &spec.layout;
    let (hf, wf) = (h as f64, w as f64);

    let sky_rows = rng.gen_range(layout.sky_fraction[0]..=layout.sky_fraction[1]) * hf;
    let tilt = rng.gen_range(-layout.max_tilt..=layout.max_tilt);
    let has_sidewalk = rng.gen_bool(spec.class_frequency[SIDEWALK as usize]);
    let sidewalk_rows =
        (rng.gen_range(layout.sidewalk_fraction[0]..=layout.sidewalk_fraction[1]) * hf).max(1.0);

    let mut labels = vec![ROAD; h * w];
    for y in 0..h {
        for x in 0..w {
            let horizon = sky_rows + tilt * (x as f64 - wf / 2.0);
            let yf = y as f64 + 0.5;
            labels[y * w + x] = if yf < horizon {
                SKY
            } else if has_sidewalk && yf < horizon + sidewalk_rows {
                SIDEWALK
            } else {
                ROAD
            };
        }
    }

    let side = hf.min(wf);
    for class in FIRST_OBJECT as usize..k {
        if !rng.gen_bool(spec.class_frequency[class]) {
            continue;
        }
        let size = rng.gen_range(layout.object_size[0]..=layout.object_size[1]) * side;
        let cy = rng.gen_range(0.0..hf);
        let cx = rng.gen_range(0.0..wf);
        let shape = if rng.gen_bool(0.5) {
            Shape::Circle { cy, cx, r: size }
        } else {
            let aspect: f64 = rng.gen_range(0.5..2.0);
            let (hy, hx) = (size * aspect.sqrt(), size / aspect.sqrt());
            Shape::Rect {
                y0: cy - hy,
                x0: cx - hx,
                y1: cy + hy,
                x1: cx + hx,
            }
        };
        for y in 0..h {
            for x in 0..w {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    labels[y * w + x] = class as u8;
                }
            }
        }
    }

    let hw = h * w;
    let mut image = vec![0.0; CHANNELS * hw];
    for c in 0..CHANNELS {
        for p in 0..hw {
            let base = spec.class_colors[labels[p] as usize][c] + spec.color_shift[c];
            let noise = if spec.texture_noise_sigma > 0.0 {
                spec.texture_noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            image[c * hw + p] = (base + noise).clamp(0.0, 1.0);
        }
    }

    Ok((
        ImageBatch::new(1, CHANNELS, h, w, image)?,
        LabelMap::new(1, h, w, k, labels)?,
    ))
}

/// Seed of scene `index` within `split`; scenes are independent of each other
/// so generation order does not matter.
pub fn scene_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, &[split.stream_id(), index as u64])
}

pub fn generate_split(config: &BenchmarkConfig, split: Split) -> Result<Dataset> {
    config.validate()?;
    let spec = config.domain_spec(split.domain());
    let mut images = Vec::with_capacity(config.split_size(split));
    let mut labels = Vec::with_capacity(config.split_size(split));
    for i in 0..config.split_size(split) {
        let (img, lab) = generate_scene(
            spec,
            scene_seed(config.seed, split, i),
            config.height,
            config.width,
            config.num_classes,
        )?;
        images.push(img);
        labels.push(lab);
    }
    let images = ImageBatch::concat(&images.iter().collect::<Vec<_>>())?;
    let labels = LabelMap::concat(&labels.iter().collect::<Vec<_>>())?;
    Dataset::new(images, labels, split)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub source_train: Dataset,
    pub target_train: Dataset,
    pub target_eval: Dataset,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> &Dataset {
        match split {
            Split::SourceTrain => &self.source_train,
            Split::TargetTrain => &self.target_train,
            Split::TargetEval => &self.target_eval,
        }
    }
}

/// Generates all three splits in memory. See [`crate::storage`] for the
/// on-disk layout.
pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    Ok(Benchmark {
        source_train: generate_split(config, Split::SourceTrain)?,
        target_train: generate_split(config, Split::TargetTrain)?,
        target_eval: generate_split(config, Split::TargetEval)?,
    })
}
