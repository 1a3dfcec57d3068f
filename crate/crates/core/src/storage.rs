//! On-disk benchmark layout, image/label files, and the data-access audit.
//!
//! ```text
//! <root>/manifest.json
//! <root>/config.json                  effective generator config
//! <root>/<split>/images.f32           N*C*H*W little-endian float32
//! <root>/<split>/images.json          {"dtype":"float32-le","shape":[N,C,H,W]}
//! <root>/<split>/labels.u8            N*H*W bytes, 255 = ignore
//! <root>/<split>/labels.json          {"dtype":"uint8","shape":[N,H,W],"num_classes":K,"ignore":255}
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::config::config_hash;
use crate::error::{Error, Result};
use crate::grid::{ImageBatch, LabelMap, IGNORE};
use crate::synthgen::{Benchmark, BenchmarkConfig, Dataset, DomainTag, Split, SplitKind};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_FILE: &str = "images.f32";
pub const IMAGE_HEADER: &str = "images.json";
pub const LABEL_FILE: &str = "labels.u8";
pub const LABEL_HEADER: &str = "labels.json";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageHeader {
    pub dtype: String,
    pub shape: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelHeader {
    pub dtype: String,
    pub shape: [usize; 3],
    pub num_classes: usize,
    pub ignore: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub file: String,
    pub header: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub name: String,
    pub domain_tag: DomainTag,
    pub split: SplitKind,
    pub num_scenes: usize,
    pub images: FileEntry,
    pub labels: FileEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub generator_config_hash: String,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub splits: Vec<SplitEntry>,
    pub config: BenchmarkConfig,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Option<&SplitEntry> {
        self.splits.iter().find(|s| s.name == split.dir_name())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_images(dir: &Path, images: &ImageBatch) -> Result<()> {
    let (n, c, h, w) = images.shape();
    let mut bytes = Vec::with_capacity(images.data().len() * 4);
    for &v in images.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let path = dir.join(IMAGE_FILE);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    write_json(
        &dir.join(IMAGE_HEADER),
        &ImageHeader {
            dtype: "float32-le".into(),
            shape: [n, c, h, w],
        },
    )
}

pub fn read_images(dir: &Path) -> Result<ImageBatch> {
    let header: ImageHeader = read_json(&dir.join(IMAGE_HEADER))?;
    let path = dir.join(IMAGE_FILE);
    if header.dtype != "float32-le" {
        return Err(Error::corrupt(&path, format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let [n, c, h, w] = header.shape;
    if bytes.len() != n * c * h * w * 4 {
        return Err(Error::corrupt(
            &path,
            format!("{} bytes, header promises {}", bytes.len(), n * c * h * w * 4),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    ImageBatch::new(n, c, h, w, data).map_err(|e| Error::corrupt(&path, e.to_string()))
}

pub fn write_labels(dir: &Path, labels: &LabelMap) -> Result<()> {
    let (n, h, w) = labels.shape();
    let path = dir.join(LABEL_FILE);
    fs::write(&path, labels.data()).map_err(|e| Error::io(&path, e))?;
    write_json(
        &dir.join(LABEL_HEADER),
        &LabelHeader {
            dtype: "uint8".into(),
            shape: [n, h, w],
            num_classes: labels.num_classes(),
            ignore: IGNORE,
        },
    )
}

pub fn read_labels(dir: &Path) -> Result<LabelMap> {
    let header: LabelHeader = read_json(&dir.join(LABEL_HEADER))?;
    let path = dir.join(LABEL_FILE);
    if header.dtype != "uint8" || header.ignore != IGNORE {
        return Err(Error::corrupt(&path, "unsupported label encoding"));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let [n, h, w] = header.shape;
    LabelMap::new(n, h, w, header.num_classes, bytes)
        .map_err(|e| Error::corrupt(&path, e.to_string()))
}

/// Writes the three splits, the manifest, and the effective config.
pub fn write_benchmark(root: &Path, config: &BenchmarkConfig, bench: &Benchmark) -> Result<Manifest> {
    create_dir(root)?;
    let mut splits = Vec::new();
    for split in Split::ALL {
        let data = bench.split(split);
        let dir = root.join(split.dir_name());
        create_dir(&dir)?;
        write_images(&dir, &data.images)?;
        write_labels(&dir, &data.labels)?;
        let rel = |f: &str| format!("{}/{f}", split.dir_name());
        splits.push(SplitEntry {
            name: split.dir_name().into(),
            domain_tag: split.domain(),
            split: split.kind(),
            num_scenes: data.len(),
            images: FileEntry {
                file: rel(IMAGE_FILE),
                header: rel(IMAGE_HEADER),
            },
            labels: FileEntry {
                file: rel(LABEL_FILE),
                header: rel(LABEL_HEADER),
            },
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        generator_config_hash: config_hash(config),
        num_classes: config.num_classes,
        channels: crate::synthgen::CHANNELS,
        height: config.height,
        width: config.width,
        splits,
        config: config.clone(),
    };
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    write_json(&root.join("config.json"), config)?;
    Ok(manifest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    Images,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub split: Split,
    pub kind: FileKind,
    /// Relative to the benchmark root, so audits do not depend on where the
    /// data lives.
    pub path: PathBuf,
}

/// Shared record of every split file read through a [`DataDir`].
#[derive(Clone, Debug, Default)]
pub struct AccessLog {
    records: Arc<Mutex<Vec<AccessRecord>>>,
}

impl AccessLog {
    fn push(&self, record: AccessRecord) {
        self.records.lock().expect("access log poisoned").push(record);
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.records.lock().expect("access log poisoned").clone()
    }

    pub fn reads_of(&self, split: Split, kind: FileKind) -> usize {
        self.records()
            .iter()
            .filter(|r| r.split == split && r.kind == kind)
            .count()
    }

    /// Reads of the target-domain training split. Evaluation reads are
    /// held-out scoring and are not part of the training contract.
    pub fn target_train_reads(&self) -> Vec<AccessRecord> {
        self.records()
            .into_iter()
            .filter(|r| r.split == Split::TargetTrain)
            .collect()
    }

    pub fn target_train_label_reads(&self) -> usize {
        self.reads_of(Split::TargetTrain, FileKind::Labels)
    }
}

/// Handle on a generated benchmark directory. All split reads go through
/// here so they land in the access log.
#[derive(Clone, Debug)]
pub struct DataDir {
    root: PathBuf,
    manifest: Manifest,
    log: AccessLog,
}

impl DataDir {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let manifest: Manifest = read_json(&root.join(MANIFEST_FILE))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::corrupt(
                root.join(MANIFEST_FILE),
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        Ok(Self {
            root,
            manifest,
            log: AccessLog::default(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn access_log(&self) -> &AccessLog {
        &self.log
    }

    fn split_dir(&self, split: Split) -> Result<PathBuf> {
        self.manifest
            .split(split)
            .map(|_| self.root.join(split.dir_name()))
            .ok_or_else(|| {
                Error::corrupt(
                    self.root.join(MANIFEST_FILE),
                    format!("manifest lists no {} split", split.dir_name()),
                )
            })
    }

    pub fn load_images(&self, split: Split) -> Result<ImageBatch> {
        let dir = self.split_dir(split)?;
        self.log.push(AccessRecord {
            split,
            kind: FileKind::Images,
            path: PathBuf::from(split.dir_name()).join(IMAGE_FILE),
        });
        read_images(&dir)
    }

    pub fn load_labels(&self, split: Split) -> Result<LabelMap> {
        let dir = self.split_dir(split)?;
        self.log.push(AccessRecord {
            split,
            kind: FileKind::Labels,
            path: PathBuf::from(split.dir_name()).join(LABEL_FILE),
        });
        read_labels(&dir)
    }

    pub fn load_dataset(&self, split: Split) -> Result<Dataset> {
        Dataset::new(self.load_images(split)?, self.load_labels(split)?, split)
    }
}

/// Writes an RGB image (`3 x H x W`, values in `[0, 1]`) as binary 8-bit PPM.
pub fn write_ppm(path: &Path, rgb: &[f64], h: usize, w: usize) -> Result<()> {
    if rgb.len() != 3 * h * w {
        return Err(Error::shape(format!("{} values", 3 * h * w), format!("{} values", rgb.len())));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(hw * 3 + 32);
    write!(out, "P6\n{w} {h}\n255\n").expect("write to Vec");
    for p in 0..hw {
        for c in 0..3 {
            out.push((rgb[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary 8-bit PPM back into planar `3 x H x W` values in `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::corrupt(path, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::corrupt(path, format!("bad PPM header field {s:?}")))
    };
    if fields[0] != "P6" || parse(&fields[3])? != 255 {
        return Err(Error::corrupt(path, "only 8-bit P6 PPM is supported"));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let hw = h * w;
    let body = bytes
        .get(pos..pos + 3 * hw)
        .ok_or_else(|| Error::corrupt(path, "truncated PPM body"))?;
    let mut rgb = vec![0.0; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            rgb[c * hw + p] = body[3 * p + c] as f64 / 255.0;
        }
    }
    Ok((rgb, h, w))
}

/// Fixed display colors for label visualizations.
pub fn class_palette(k: usize) -> Vec<[f64; 3]> {
    const BASE: [[f64; 3]; 8] = [
        [0.27, 0.51, 0.71],
        [0.50, 0.25, 0.50],
        [0.96, 0.14, 0.91],
        [0.86, 0.08, 0.24],
        [0.42, 0.56, 0.14],
        [0.98, 0.67, 0.12],
        [0.40, 0.40, 0.61],
        [0.00, 0.00, 0.56],
    ];
    (0..k)
        .map(|c| {
            let b = BASE[c % BASE.len()];
            let dim = 1.0 / (1 + c / BASE.len()) as f64;
            [b[0] * dim, b[1] * dim, b[2] * dim]
        })
        .collect()
}

/// Renders one label item (`H x W`) as a PPM, IGNORE in black.
pub fn write_label_ppm(path: &Path, labels: &[u8], k: usize, h: usize, w: usize) -> Result<()> {
    let palette = class_palette(k);
    let hw = h * w;
    let mut rgb = vec![0.0; 3 * hw];
    for (p, &v) in labels.iter().enumerate().take(hw) {
        if v != IGNORE {
            for c in 0..3 {
                rgb[c * hw + p] = palette[v as usize][c];
            }
        }
    }
    write_ppm(path, &rgb, h, w)
}
