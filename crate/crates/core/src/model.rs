//! Small fully-convolutional per-pixel classifier with hand-written
//! forward and backward passes.
//!
//! ```text
//! x (C) -> conv3x3 -> relu -> conv3x3 -> relu -> conv1x1 -> softmax (K)
//! ```
//!
//! Convolutions use zero "same" padding and are lowered to GEMM through an
//! im2col buffer per image.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ImageBatch, LabelMap, ProbMap, IGNORE};
use crate::seeding::stream_rng;

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
const CHECKPOINT_MAGIC: &[u8; 8] = b"DACSCKPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub in_channels: usize,
    pub features: usize,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            features: 16,
            num_classes: 6,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.features == 0 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "architecture needs in_channels >= 1, features >= 1, num_classes >= 2, got {self:?}"
            )));
        }
        Ok(())
    }

    fn block_shapes(&self) -> [(&'static str, Vec<usize>); 6] {
        let (c, f, k) = (self.in_channels, self.features, self.num_classes);
        [
            ("conv1.weight", vec![f, c, KERNEL, KERNEL]),
            ("conv1.bias", vec![f]),
            ("conv2.weight", vec![f, f, KERNEL, KERNEL]),
            ("conv2.bias", vec![f]),
            ("head.weight", vec![k, f]),
            ("head.bias", vec![k]),
        ]
    }
}

/// Model parameters, also used for gradients and optimizer buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl Params {
    /// Whether each block of [`Params::blocks`] is a weight (vs. a bias).
    pub const IS_WEIGHT: [bool; 6] = [true, false, true, false, true, false];

    pub fn zeros(arch: &Architecture) -> Self {
        let (c, f, k) = (arch.in_channels, arch.features, arch.num_classes);
        Self {
            conv1_w: vec![0.0; f * c * TAPS],
            conv1_b: vec![0.0; f],
            conv2_w: vec![0.0; f * f * TAPS],
            conv2_b: vec![0.0; f],
            head_w: vec![0.0; k * f],
            head_b: vec![0.0; k],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 6] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.head_w,
            &self.head_b,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    pub fn num_values(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        self.blocks()
            .iter()
            .zip(other.blocks())
            .all(|(a, b)| a.len() == b.len())
    }

    /// Flat view over all blocks in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Mutable reference to the value at a flat index (declaration order).
    pub fn get_mut(&mut self, mut index: usize) -> Option<&mut f64> {
        for block in self.blocks_mut() {
            if index < block.len() {
                return Some(&mut block[index]);
            }
            index -= block.len();
        }
        None
    }
}

/// Per-pixel loss weights.
#[derive(Clone, Debug, PartialEq)]
pub enum PixelWeights {
    Uniform(f64),
    /// One weight per pixel, laid out `N x H x W`.
    PerPixel(Vec<f64>),
}

impl PixelWeights {
    /// Expands one weight per image into a per-pixel map.
    pub fn per_image(weights: &[f64], pixels_per_item: usize) -> Self {
        PixelWeights::PerPixel(
            weights
                .iter()
                .flat_map(|&w| std::iter::repeat(w).take(pixels_per_item))
                .collect(),
        )
    }

    fn get(&self, index: usize) -> f64 {
        match self {
            PixelWeights::Uniform(w) => *w,
            PixelWeights::PerPixel(v) => v[index],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Params,
    /// Number of non-IGNORE pixels the loss averages over.
    pub scored_pixels: usize,
    /// Set when every target pixel was IGNORE; loss and grads are then zero.
    pub all_ignored: bool,
}

struct ItemCache {
    col1: Vec<f64>,
    a1: Vec<f64>,
    col2: Vec<f64>,
    a2: Vec<f64>,
}

/// Activations retained by [`SegModel::forward_with_cache`] for the backward pass.
pub struct ForwardCache {
    items: Vec<ItemCache>,
    probs: ProbMap,
    logsumexp: Vec<f64>,
    logits: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &ProbMap {
        &self.probs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    arch: Architecture,
    pub params: Params,
}

/// Row-major `c = op(a) * op(b) + beta * c` with `op(a)` m x k and `op(b)` k x n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // elements whose presence is asserted on entry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 3x3 zero-padded patches: row `ch * 9 + ky * 3 + kx`, column `y * w + x`.
fn im2col(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; channels * TAPS * hw];
    for ch in 0..channels {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut col[((ch * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[1..].copy_from_slice(&src[..w - 1]),
                        1 => dst.copy_from_slice(src),
                        _ => dst[..w - 1].copy_from_slice(&src[1..]),
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input plane.
fn col2im(col: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for ch in 0..channels {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &col[((ch * TAPS) + ky * KERNEL + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    match kx {
                        0 => dst[..w - 1].iter_mut().zip(&src[1..]).for_each(|(d, s)| *d += s),
                        1 => dst.iter_mut().zip(src).for_each(|(d, s)| *d += s),
                        _ => dst[1..].iter_mut().zip(&src[..w - 1]).for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

fn add_bias_relu(z: &mut [f64], bias: &[f64], hw: usize) {
    for (row, &b) in z.chunks_exact_mut(hw).zip(bias) {
        for v in row {
            *v = (*v + b).max(0.0);
        }
    }
}

fn relu_backward(grad: &mut [f64], activation: &[f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn accumulate_row_sums(dst: &mut [f64], src: &[f64], hw: usize) {
    for (d, row) in dst.iter_mut().zip(src.chunks_exact(hw)) {
        *d += row.iter().sum::<f64>();
    }
}

impl SegModel {
    /// Glorot-uniform weights from `seed`, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = Params::zeros(&arch);
        let mut rng = stream_rng(seed, &[0x1417]);
        let (c, f, k) = (arch.in_channels, arch.features, arch.num_classes);
        let fans = [(c * TAPS, f * TAPS), (f * TAPS, f * TAPS), (f, k)];
        let weights = [&mut params.conv1_w, &mut params.conv2_w, &mut params.head_w];
        for (block, (fan_in, fan_out)) in weights.into_iter().zip(fans) {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in block.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: Params::zeros(&arch),
        })
    }

    pub fn from_params(arch: Architecture, params: Params) -> Result<Self> {
        arch.validate()?;
        if !params.same_shape(&Params::zeros(&arch)) {
            return Err(Error::shape("parameters matching the architecture", "mismatched blocks"));
        }
        Ok(Self { arch, params })
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    fn check_input(&self, x: &ImageBatch) -> Result<()> {
        if x.channels() != self.arch.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.arch.in_channels),
                format!("{} channels", x.channels()),
            ));
        }
        Ok(())
    }

    /// Runs one image and returns (logits, cache).
    fn forward_item(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, ItemCache) {
        let hw = h * w;
        let (c, f, k) = (self.arch.in_channels, self.arch.features, self.arch.num_classes);
        let p = &self.params;

        let col1 = im2col(input, c, h, w);
        let mut a1 = vec![0.0; f * hw];
        gemm(f, c * TAPS, hw, &p.conv1_w, false, &col1, false, 0.0, &mut a1);
        add_bias_relu(&mut a1, &p.conv1_b, hw);

        let col2 = im2col(&a1, f, h, w);
        let mut a2 = vec![0.0; f * hw];
        gemm(f, f * TAPS, hw, &p.conv2_w, false, &col2, false, 0.0, &mut a2);
        add_bias_relu(&mut a2, &p.conv2_b, hw);

        let mut logits = vec![0.0; k * hw];
        gemm(k, f, hw, &p.head_w, false, &a2, false, 0.0, &mut logits);
        for (row, &b) in logits.chunks_exact_mut(hw).zip(&p.head_b) {
            row.iter_mut().for_each(|v| *v += b);
        }
        (logits, ItemCache { col1, a1, col2, a2 })
    }

    /// Softmax with max subtraction; returns per-pixel log-sum-exp alongside.
    fn softmax(logits: &[f64], k: usize, hw: usize, probs: &mut [f64], lse: &mut [f64]) {
        for px in 0..hw {
            let max = (0..k)
                .map(|c| logits[c * hw + px])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for c in 0..k {
                let e = (logits[c * hw + px] - max).exp();
                probs[c * hw + px] = e;
                sum += e;
            }
            for c in 0..k {
                probs[c * hw + px] /= sum;
            }
            lse[px] = max + sum.ln();
        }
    }

    pub fn forward(&self, x: &ImageBatch) -> Result<ProbMap> {
        self.check_input(x)?;
        let (n, _, h, w) = x.shape();
        let (hw, k) = (h * w, self.arch.num_classes);
        let mut probs = vec![0.0; n * k * hw];
        let mut lse = vec![0.0; hw];
        for i in 0..n {
            let (logits, _) = self.forward_item(x.item(i), h, w);
            Self::softmax(&logits, k, hw, &mut probs[i * k * hw..(i + 1) * k * hw], &mut lse);
        }
        let probs = ProbMap::from_normalized(n, k, h, w, probs);
        Ok(probs)
    }

    pub fn forward_with_cache(&self, x: &ImageBatch) -> Result<ForwardCache> {
        self.check_input(x)?;
        let (n, _, h, w) = x.shape();
        let (hw, k) = (h * w, self.arch.num_classes);
        let mut probs = vec![0.0; n * k * hw];
        let mut lse = vec![0.0; n * hw];
        let mut all_logits = Vec::with_capacity(n * k * hw);
        let mut items = Vec::with_capacity(n);
        for i in 0..n {
            let (logits, cache) = self.forward_item(x.item(i), h, w);
            Self::softmax(
                &logits,
                k,
                hw,
                &mut probs[i * k * hw..(i + 1) * k * hw],
                &mut lse[i * hw..(i + 1) * hw],
            );
            all_logits.extend_from_slice(&logits);
            items.push(cache);
        }
        Ok(ForwardCache {
            items,
            probs: ProbMap::from_normalized(n, k, h, w, probs),
            logsumexp: lse,
            logits: all_logits,
        })
    }

    /// Weighted mean cross-entropy over non-IGNORE pixels and its gradient.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        y: &LabelMap,
        weights: &PixelWeights,
    ) -> Result<LossGrad> {
        let (n, k, h, w) = cache.probs.shape();
        let hw = h * w;
        if y.shape() != (n, h, w) {
            return Err(Error::shape(format!("labels ({n}, {h}, {w})"), format!("{:?}", y.shape())));
        }
        if y.num_classes() != k {
            return Err(Error::shape(format!("K={k}"), format!("K={}", y.num_classes())));
        }
        if let PixelWeights::PerPixel(v) = weights {
            if v.len() != n * hw {
                return Err(Error::shape(format!("{} weights", n * hw), format!("{}", v.len())));
            }
        }
        let scored = y.data().iter().filter(|&&v| v != IGNORE).count();
        let mut grads = Params::zeros(&self.arch);
        if scored == 0 {
            return Ok(LossGrad {
                loss: 0.0,
                grads,
                scored_pixels: 0,
                all_ignored: true,
            });
        }
        let norm = 1.0 / scored as f64;
        let f = self.arch.features;
        let c = self.arch.in_channels;
        let mut loss = 0.0;

        for (i, item) in cache.items.iter().enumerate() {
            let labels = y.item(i);
            let probs = cache.probs.item(i);
            let logits = &cache.logits[i * k * hw..(i + 1) * k * hw];
            let lse = &cache.logsumexp[i * hw..(i + 1) * hw];

            let mut dlogits = vec![0.0; k * hw];
            let mut active = false;
            for px in 0..hw {
                let label = labels[px];
                if label == IGNORE {
                    continue;
                }
                let wt = weights.get(i * hw + px);
                if wt == 0.0 {
                    continue;
                }
                active = true;
                let label = label as usize;
                loss += wt * (lse[px] - logits[label * hw + px]);
                let scale = wt * norm;
                for cls in 0..k {
                    dlogits[cls * hw + px] = scale * probs[cls * hw + px];
                }
                dlogits[label * hw + px] -= scale;
            }
            if !active {
                continue;
            }

            // head
            gemm(k, hw, f, &dlogits, false, &item.a2, true, 1.0, &mut grads.head_w);
            accumulate_row_sums(&mut grads.head_b, &dlogits, hw);
            let mut da2 = vec![0.0; f * hw];
            gemm(f, k, hw, &self.params.head_w, true, &dlogits, false, 0.0, &mut da2);
            relu_backward(&mut da2, &item.a2);

            // conv2
            gemm(f, hw, f * TAPS, &da2, false, &item.col2, true, 1.0, &mut grads.conv2_w);
            accumulate_row_sums(&mut grads.conv2_b, &da2, hw);
            let mut dcol2 = vec![0.0; f * TAPS * hw];
            gemm(f * TAPS, f, hw, &self.params.conv2_w, true, &da2, false, 0.0, &mut dcol2);
            let mut da1 = col2im(&dcol2, f, h, w);
            relu_backward(&mut da1, &item.a1);

            // conv1
            gemm(f, hw, c * TAPS, &da1, false, &item.col1, true, 1.0, &mut grads.conv1_w);
            accumulate_row_sums(&mut grads.conv1_b, &da1, hw);
        }

        Ok(LossGrad {
            loss: loss * norm,
            grads,
            scored_pixels: scored,
            all_ignored: false,
        })
    }

    pub fn loss_and_grad(
        &self,
        x: &ImageBatch,
        y: &LabelMap,
        weights: &PixelWeights,
    ) -> Result<LossGrad> {
        let cache = self.forward_with_cache(x)?;
        self.backward(&cache, y, weights)
    }

    /// Loss only; used by finite-difference checks.
    pub fn loss(&self, x: &ImageBatch, y: &LabelMap, weights: &PixelWeights) -> Result<f64> {
        Ok(self.loss_and_grad(x, y, weights)?.loss)
    }

    /// Writes the checkpoint: magic, u32 header length, JSON header, then
    /// little-endian parameter blocks in declaration order.
    pub fn save_checkpoint(&self, path: &Path, iteration: usize) -> Result<()> {
        let header = CheckpointHeader {
            format_version: 1,
            architecture: self.arch,
            iteration,
            dtype: "float64-le".into(),
            blocks: self
                .arch
                .block_shapes()
                .into_iter()
                .map(|(name, shape)| BlockInfo {
                    name: name.into(),
                    shape,
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).map_err(|e| Error::json(path, e))?;
        let mut out = Vec::with_capacity(12 + header.len() + self.params.num_values() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for block in self.params.blocks() {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Returns the model and the iteration it was saved at.
    pub fn load_checkpoint(path: &Path) -> Result<(Self, usize)> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::corrupt(path, "missing checkpoint magic"));
        }
        let header_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let header_bytes = bytes
            .get(12..12 + header_len)
            .ok_or_else(|| Error::corrupt(path, "truncated header"))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_bytes).map_err(|e| Error::json(path, e))?;
        if header.dtype != "float64-le" {
            return Err(Error::corrupt(path, format!("unsupported dtype {}", header.dtype)));
        }
        header
            .architecture
            .validate()
            .map_err(|e| Error::corrupt(path, e.to_string()))?;
        let expected = header.architecture.block_shapes();
        if header.blocks.len() != expected.len()
            || header
                .blocks
                .iter()
                .zip(&expected)
                .any(|(b, (name, shape))| b.name != *name || &b.shape != shape)
        {
            return Err(Error::corrupt(path, "block table does not match architecture"));
        }
        let mut params = Params::zeros(&header.architecture);
        let body = &bytes[12 + header_len..];
        if body.len() != params.num_values() * 8 {
            return Err(Error::corrupt(
                path,
                format!("{} parameter bytes, expected {}", body.len(), params.num_values() * 8),
            ));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        for block in params.blocks_mut() {
            for v in block.iter_mut() {
                *v = values.next().expect("length checked above");
            }
        }
        if !params.all_finite() {
            return Err(Error::corrupt(path, "non-finite parameter"));
        }
        Ok((
            Self {
                arch: header.architecture,
                params,
            },
            header.iteration,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BlockInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    architecture: Architecture,
    iteration: usize,
    dtype: String,
    blocks: Vec<BlockInfo>,
}
