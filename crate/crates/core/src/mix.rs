//! Binary mask generators (ClassMix, CutMix, CowMix), cross-domain mixing,
//! and photometric perturbation of mixed images.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{composite, ImageBatch, LabelMap, MixMask, IGNORE};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MixStrategy {
    ClassMix,
    CutMix { area_fraction: f64 },
    CowMix { sigma: f64, proportion: f64 },
}

impl Default for MixStrategy {
    fn default() -> Self {
        MixStrategy::ClassMix
    }
}

impl MixStrategy {
    pub fn default_cutmix() -> Self {
        MixStrategy::CutMix { area_fraction: 0.5 }
    }

    pub fn default_cowmix() -> Self {
        MixStrategy::CowMix {
            sigma: 4.0,
            proportion: 0.5,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixStrategy::ClassMix => "classmix",
            MixStrategy::CutMix { .. } => "cutmix",
            MixStrategy::CowMix { .. } => "cowmix",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MixStrategy::ClassMix => Ok(()),
            MixStrategy::CutMix { area_fraction } => {
                if area_fraction > 0.0 && area_fraction < 1.0 {
                    Ok(())
                } else {
                    Err(Error::Config(format!(
                        "cutmix area_fraction must lie in (0, 1), got {area_fraction}"
                    )))
                }
            }
            MixStrategy::CowMix { sigma, proportion } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("cowmix sigma must be > 0, got {sigma}")));
                }
                if !(proportion > 0.0 && proportion < 1.0) {
                    return Err(Error::Config(format!(
                        "cowmix proportion must lie in (0, 1), got {proportion}"
                    )));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Per-channel scale drawn from `[1 - j, 1 + j]` and offset from `[-j, j]`.
    pub jitter_strength: f64,
    pub blur_sigma_range: [f64; 2],
    pub blur_probability: f64,
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            jitter_strength: 0.2,
            blur_sigma_range: [0.1, 1.0],
            blur_probability: 0.5,
        }
    }
}

impl PhotometricConfig {
    pub fn identity() -> Self {
        Self {
            jitter_strength: 0.0,
            blur_sigma_range: [0.0, 0.0],
            blur_probability: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.blur_sigma_range;
        if !(self.jitter_strength >= 0.0 && self.jitter_strength.is_finite()) {
            return Err(Error::Config("jitter_strength must be >= 0".into()));
        }
        if !(0.0 <= lo && lo <= hi && hi.is_finite()) {
            return Err(Error::Config("blur_sigma_range must satisfy 0 <= lo <= hi".into()));
        }
        if !(0.0..=1.0).contains(&self.blur_probability) {
            return Err(Error::Config("blur_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Distinct non-IGNORE classes of one label item, ascending.
pub fn classes_present(labels: &[u8]) -> Vec<u8> {
    let mut seen = [false; 256];
    for &v in labels {
        seen[v as usize] = true;
    }
    (0..IGNORE).filter(|&c| seen[c as usize]).collect()
}

/// Picks `ceil(|S| / 2)` of the classes present in `labels` uniformly at
/// random and returns them ascending.
pub fn classmix_classes<R: Rng + ?Sized>(labels: &[u8], rng: &mut R) -> Result<Vec<u8>> {
    let present = classes_present(labels);
    if present.is_empty() {
        return Err(Error::InvalidInput(
            "classmix needs at least one labelled pixel".into(),
        ));
    }
    let take = present.len().div_ceil(2);
    let mut chosen: Vec<u8> = present.choose_multiple(rng, take).copied().collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Mask that is 1 exactly on pixels whose class is in `classes`.
pub fn mask_from_classes(labels: &[u8], classes: &[u8], h: usize, w: usize) -> Result<MixMask> {
    let mut selected = [false; 256];
    for &c in classes {
        selected[c as usize] = true;
    }
    selected[IGNORE as usize] = false;
    MixMask::new(1, h, w, labels.iter().map(|&v| selected[v as usize]).collect())
}

/// ClassMix mask for a single label item.
pub fn classmix_mask<R: Rng + ?Sized>(labels: &LabelMap, rng: &mut R) -> Result<MixMask> {
    let (n, h, w) = labels.shape();
    if n != 1 {
        return Err(Error::shape("a single label item", format!("{n} items")));
    }
    let chosen = classmix_classes(labels.item(0), rng)?;
    mask_from_classes(labels.item(0), &chosen, h, w)
}

/// One axis-aligned rectangle covering about `area_fraction` of the image.
pub fn cutmix_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    area_fraction: f64,
    rng: &mut R,
) -> Result<MixMask> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("degenerate mask shape {h}x{w}")));
    }
    MixStrategy::CutMix { area_fraction }
        .validate()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let area = (area_fraction * (h * w) as f64).round().max(1.0);
    let aspect = rng.gen_range(0.5f64.ln()..=2f64.ln()).exp();
    let mut rect_h = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let rect_w = ((area / rect_h as f64).round() as usize).clamp(1, w);
    rect_h = ((area / rect_w as f64).round() as usize).clamp(1, h);
    let y0 = rng.gen_range(0..=h - rect_h);
    let x0 = rng.gen_range(0..=w - rect_w);
    let mut data = vec![false; h * w];
    for y in y0..y0 + rect_h {
        data[y * w + x0..y * w + x0 + rect_w].fill(true);
    }
    MixMask::new(1, h, w, data)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect()
}

/// Separable Gaussian smoothing of one `h x w` plane. Taps that fall outside
/// the image are dropped and the remaining weights renormalized, so constant
/// planes are preserved exactly up to rounding.
pub fn gaussian_blur_plane(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let pass = |src: &[f64], along_x: bool| {
        let mut dst = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut norm) = (0.0, 0.0);
                for (t, &kv) in kernel.iter().enumerate() {
                    let off = t as isize - radius;
                    let (sy, sx) = if along_x {
                        (y as isize, x as isize + off)
                    } else {
                        (y as isize + off, x as isize)
                    };
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        continue;
                    }
                    acc += kv * src[sy as usize * w + sx as usize];
                    norm += kv;
                }
                dst[y * w + x] = acc / norm;
            }
        }
        dst
    };
    pass(&pass(plane, true), false)
}

/// CowMix mask: smoothed Gaussian noise thresholded so that exactly
/// `round(proportion * h * w)` pixels are selected. Ties in the noise field
/// resolve in raster order.
pub fn cowmix_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    sigma: f64,
    proportion: f64,
    rng: &mut R,
) -> Result<MixMask> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!("degenerate mask shape {h}x{w}")));
    }
    MixStrategy::CowMix { sigma, proportion }
        .validate()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let noise: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let field = gaussian_blur_plane(&noise, h, w, sigma);
    let count = (proportion * (h * w) as f64).round() as usize;
    let mut order: Vec<usize> = (0..h * w).collect();
    // stable: equal values keep raster order
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]));
    let mut data = vec![false; h * w];
    for &p in &order[..count] {
        data[p] = true;
    }
    MixMask::new(1, h, w, data)
}

/// Mask for one mixed sample; ClassMix derives it from `class_source`.
pub fn strategy_mask<R: Rng + ?Sized>(
    strategy: &MixStrategy,
    class_source: &[u8],
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<MixMask> {
    match *strategy {
        MixStrategy::ClassMix => {
            let chosen = classmix_classes(class_source, rng)?;
            mask_from_classes(class_source, &chosen, h, w)
        }
        MixStrategy::CutMix { area_fraction } => cutmix_mask(h, w, area_fraction, rng),
        MixStrategy::CowMix { sigma, proportion } => cowmix_mask(h, w, sigma, proportion, rng),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: ImageBatch,
    pub labels: LabelMap,
    pub mask: MixMask,
}

/// Pastes masked source pixels onto target images, item `i` with item `i`.
/// ClassMix masks come from the source ground truth.
pub fn cross_domain_mix<R: Rng + ?Sized>(
    x_s: &ImageBatch,
    y_s: &LabelMap,
    x_t: &ImageBatch,
    y_hat_t: &LabelMap,
    strategy: &MixStrategy,
    rng: &mut R,
) -> Result<MixedBatch> {
    let (n, _, h, w) = x_s.shape();
    if x_t.shape() != x_s.shape() {
        return Err(Error::shape(format!("{:?}", x_s.shape()), format!("{:?}", x_t.shape())));
    }
    if y_s.shape() != (n, h, w) || y_hat_t.shape() != (n, h, w) {
        return Err(Error::shape(
            format!("labels ({n}, {h}, {w})"),
            format!("{:?} and {:?}", y_s.shape(), y_hat_t.shape()),
        ));
    }
    let masks = (0..n)
        .map(|i| strategy_mask(strategy, y_s.item(i), h, w, rng))
        .collect::<Result<Vec<_>>>()?;
    let mask = MixMask::stack(&masks)?;
    Ok(MixedBatch {
        images: composite(&mask, x_s, x_t)?,
        labels: composite(&mask, y_s, y_hat_t)?,
        mask,
    })
}

/// Per-image channelwise affine jitter, then (with `blur_probability`) a
/// Gaussian blur; the result is clamped to `[0, 1]`.
pub fn photometric<R: Rng + ?Sized>(
    x: &ImageBatch,
    cfg: &PhotometricConfig,
    rng: &mut R,
) -> Result<ImageBatch> {
    cfg.validate()?;
    let mut out = x.clone();
    let (n, c, h, w) = x.shape();
    let hw = h * w;
    let j = cfg.jitter_strength;
    for i in 0..n {
        let item = out.item_mut(i);
        for ch in 0..c {
            let scale = 1.0 + j * rng.gen_range(-1.0..=1.0);
            let offset = j * rng.gen_range(-1.0..=1.0);
            for v in &mut item[ch * hw..(ch + 1) * hw] {
                *v = scale * *v + offset;
            }
        }
        if rng.gen_bool(cfg.blur_probability) {
            let [lo, hi] = cfg.blur_sigma_range;
            let sigma = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            for ch in 0..c {
                let blurred = gaussian_blur_plane(&item[ch * hw..(ch + 1) * hw], h, w, sigma);
                item[ch * hw..(ch + 1) * hw].copy_from_slice(&blurred);
            }
        }
        item.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}
