//! Dense per-pixel containers shared by every other module.
//!
//! All containers are batch-major: images are `N x C x H x W`, label maps,
//! masks and confidence maps are `N x H x W`, probability maps are
//! `N x K x H x W`.

use crate::error::{Error, Result};

/// Reserved label value for pixels that carry no class.
pub const IGNORE: u8 = u8::MAX;

/// Largest number of classes a [`LabelMap`] can carry (`IGNORE` is reserved).
pub const MAX_CLASSES: usize = IGNORE as usize;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Vec<f64>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

impl ImageBatch {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "image batch shape ({n}, {c}, {h}, {w}) has a zero dimension"
            )));
        }
        if data.len() != n * c * h * w {
            return Err(Error::shape(
                format!("{} values for ({n}, {c}, {h}, {w})", n * c * h * w),
                format!("{} values", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite image value at flat index {pos}"
            )));
        }
        Ok(Self { data, n, c, h, w })
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(n, c, h, w, vec![0.0; n * c * h * w])
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The `C x H x W` block of item `i`.
    pub fn item(&self, i: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Mutable access for in-place pixel edits. Callers must keep values finite.
    pub(crate) fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[i * len..(i + 1) * len]
    }

    /// Gathers the listed items into a new batch.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.item_len());
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidInput(format!(
                    "item index {i} out of range for batch of {}",
                    self.n
                )));
            }
            data.extend_from_slice(self.item(i));
        }
        Self::new(indices.len(), self.c, self.h, self.w, data)
    }

    /// Stacks single-shape batches along the batch axis.
    pub fn concat(parts: &[&ImageBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concatenate zero batches".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (first.c, first.h, first.w) {
                return Err(Error::shape(
                    format!("(_, {}, {}, {})", first.c, first.h, first.w),
                    format!("(_, {}, {}, {})", p.c, p.h, p.w),
                ));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Self::new(n, first.c, first.h, first.w, data)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    data: Vec<u8>,
    n: usize,
    h: usize,
    w: usize,
    num_classes: usize,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "label map shape ({n}, {h}, {w}) has a zero dimension"
            )));
        }
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(Error::InvalidInput(format!(
                "num_classes must be in 1..={MAX_CLASSES}, got {num_classes}"
            )));
        }
        if data.len() != n * h * w {
            return Err(Error::shape(
                format!("{} labels for ({n}, {h}, {w})", n * h * w),
                format!("{} labels", data.len()),
            ));
        }
        if let Some(&bad) = data
            .iter()
            .find(|&&v| v != IGNORE && v as usize >= num_classes)
        {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            data,
            n,
            h,
            w,
            num_classes,
        })
    }

    pub fn filled(n: usize, h: usize, w: usize, num_classes: usize, value: u8) -> Result<Self> {
        Self::new(n, h, w, num_classes, vec![value; n * h * w])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn pixels_per_item(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn item(&self, i: usize) -> &[u8] {
        let len = self.pixels_per_item();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.pixels_per_item());
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidInput(format!(
                    "item index {i} out of range for label map of {}",
                    self.n
                )));
            }
            data.extend_from_slice(self.item(i));
        }
        Self::new(indices.len(), self.h, self.w, self.num_classes, data)
    }

    pub fn concat(parts: &[&LabelMap]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot concatenate zero label maps".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w, p.num_classes) != (first.h, first.w, first.num_classes) {
                return Err(Error::shape(
                    format!("(_, {}, {}) with K={}", first.h, first.w, first.num_classes),
                    format!("(_, {}, {}) with K={}", p.h, p.w, p.num_classes),
                ));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Self::new(n, first.h, first.w, first.num_classes, data)
    }

    /// Per-class pixel counts, IGNORE excluded.
    pub fn histogram(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.num_classes];
        for &v in self.data.iter().filter(|&&v| v != IGNORE) {
            counts[v as usize] += 1;
        }
        counts
    }
}

/// Per-pixel class probabilities, `N x K x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    data: Vec<f64>,
    n: usize,
    k: usize,
    h: usize,
    w: usize,
}

impl ProbMap {
    pub fn new(n: usize, k: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || k == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "probability map shape ({n}, {k}, {h}, {w}) has a zero dimension"
            )));
        }
        if data.len() != n * k * h * w {
            return Err(Error::shape(
                format!("{} values for ({n}, {k}, {h}, {w})", n * k * h * w),
                format!("{} values", data.len()),
            ));
        }
        let map = Self { data, n, k, h, w };
        map.validate()?;
        Ok(map)
    }

    /// Builds without re-validating; for producers that normalize by construction.
    pub(crate) fn from_normalized(n: usize, k: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), n * k * h * w);
        Self { data, n, k, h, w }
    }

    fn validate(&self) -> Result<()> {
        let hw = self.h * self.w;
        for i in 0..self.n {
            let block = self.item(i);
            for p in 0..hw {
                let mut sum = 0.0;
                for c in 0..self.k {
                    let v = block[c * hw + p];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::InvalidInput(format!(
                            "probability {v} outside [0, 1] at item {i}, pixel {p}, class {c}"
                        )));
                    }
                    sum += v;
                }
                if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                    return Err(Error::InvalidInput(format!(
                        "class probabilities sum to {sum} at item {i}, pixel {p}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.k, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn pixels_per_item(&self) -> usize {
        self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let len = self.k * self.h * self.w;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let len = self.k * self.h * self.w;
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidInput(format!(
                    "item index {i} out of range for probability map of {}",
                    self.n
                )));
            }
            data.extend_from_slice(self.item(i));
        }
        Ok(Self::from_normalized(indices.len(), self.k, self.h, self.w, data))
    }

    /// Class vector of one pixel.
    pub fn pixel(&self, item: usize, pixel: usize) -> Vec<f64> {
        let hw = self.h * self.w;
        let block = self.item(item);
        (0..self.k).map(|c| block[c * hw + pixel]).collect()
    }
}

/// Binary per-pixel mask, `N x H x W`; `true` selects the first operand of
/// [`composite`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixMask {
    data: Vec<bool>,
    n: usize,
    h: usize,
    w: usize,
}

impl MixMask {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!(
                "mask shape ({n}, {h}, {w}) has a zero dimension"
            )));
        }
        if data.len() != n * h * w {
            return Err(Error::shape(
                format!("{} entries for ({n}, {h}, {w})", n * h * w),
                format!("{} entries", data.len()),
            ));
        }
        Ok(Self { data, n, h, w })
    }

    pub fn filled(n: usize, h: usize, w: usize, value: bool) -> Result<Self> {
        Self::new(n, h, w, vec![value; n * h * w])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn item(&self, i: usize) -> &[bool] {
        let len = self.h * self.w;
        &self.data[i * len..(i + 1) * len]
    }

    pub fn popcount(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            data: self.data.iter().map(|b| !b).collect(),
            n: self.n,
            h: self.h,
            w: self.w,
        }
    }

    pub fn stack(parts: &[MixMask]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero masks".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.h, p.w) != (first.h, first.w) {
                return Err(Error::shape(
                    format!("(_, {}, {})", first.h, first.w),
                    format!("(_, {}, {})", p.h, p.w),
                ));
            }
            data.extend_from_slice(&p.data);
            n += p.n;
        }
        Self::new(n, first.h, first.w, data)
    }
}

/// Per-pixel class prediction; ties resolve to the lowest class index.
pub fn argmax_labels(p: &ProbMap) -> LabelMap {
    let hw = p.pixels_per_item();
    let mut out = Vec::with_capacity(p.n * hw);
    for i in 0..p.n {
        let block = p.item(i);
        for px in 0..hw {
            let mut best = 0;
            let mut best_v = block[px];
            for c in 1..p.k {
                let v = block[c * hw + px];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    LabelMap {
        data: out,
        n: p.n,
        h: p.h,
        w: p.w,
        num_classes: p.k,
    }
}

/// Per-pixel maximum class probability, laid out `N x H x W`.
pub fn max_confidence(p: &ProbMap) -> Vec<f64> {
    let hw = p.pixels_per_item();
    let mut out = Vec::with_capacity(p.n * hw);
    for i in 0..p.n {
        let block = p.item(i);
        for px in 0..hw {
            let m = (0..p.k)
                .map(|c| block[c * hw + px])
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    out
}

/// Types that can be pixelwise selected between two operands by a mask.
pub trait Composite: Sized {
    fn composite(mask: &MixMask, a: &Self, b: &Self) -> Result<Self>;
}

/// `mask * a + (1 - mask) * b`, pixelwise (and channelwise for images).
pub fn composite<T: Composite>(mask: &MixMask, a: &T, b: &T) -> Result<T> {
    T::composite(mask, a, b)
}

impl Composite for ImageBatch {
    fn composite(mask: &MixMask, a: &Self, b: &Self) -> Result<Self> {
        if a.shape() != b.shape() {
            return Err(Error::shape(
                format!("{:?}", a.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        if mask.shape() != (a.n, a.h, a.w) {
            return Err(Error::shape(
                format!("mask ({}, {}, {})", a.n, a.h, a.w),
                format!("mask {:?}", mask.shape()),
            ));
        }
        let hw = a.h * a.w;
        let mut data = Vec::with_capacity(a.data.len());
        for i in 0..a.n {
            let m = mask.item(i);
            let (ai, bi) = (a.item(i), b.item(i));
            for c in 0..a.c {
                let off = c * hw;
                data.extend(
                    (0..hw).map(|p| if m[p] { ai[off + p] } else { bi[off + p] }),
                );
            }
        }
        Ok(Self {
            data,
            n: a.n,
            c: a.c,
            h: a.h,
            w: a.w,
        })
    }
}

impl Composite for LabelMap {
    fn composite(mask: &MixMask, a: &Self, b: &Self) -> Result<Self> {
        if a.shape() != b.shape() || a.num_classes != b.num_classes {
            return Err(Error::shape(
                format!("{:?} with K={}", a.shape(), a.num_classes),
                format!("{:?} with K={}", b.shape(), b.num_classes),
            ));
        }
        if mask.shape() != a.shape() {
            return Err(Error::shape(
                format!("mask {:?}", a.shape()),
                format!("mask {:?}", mask.shape()),
            ));
        }
        let data = mask
            .data
            .iter()
            .zip(a.data.iter().zip(&b.data))
            .map(|(&m, (&x, &y))| if m { x } else { y })
            .collect();
        Ok(Self {
            data,
            n: a.n,
            h: a.h,
            w: a.w,
            num_classes: a.num_classes,
        })
    }
}

/// Confidence maps (`N x H x W` reals) composite the same way as labels.
pub fn composite_values(mask: &MixMask, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != mask.data.len() || b.len() != mask.data.len() {
        return Err(Error::shape(
            format!("{} values", mask.data.len()),
            format!("{} and {} values", a.len(), b.len()),
        ));
    }
    Ok(mask
        .data
        .iter()
        .zip(a.iter().zip(b))
        .map(|(&m, (&x, &y))| if m { x } else { y })
        .collect())
}
