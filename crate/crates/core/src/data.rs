//! Datasets: deterministic 2-D toy sets, IDX image files, and the corruption
//! and splitting operations used by the experiment protocols.
//!
//! Every operation returns a new dataset and is a pure function of its inputs
//! and seed.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, d]`, values in `[0, 1]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub provenance: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyPattern {
    Spiral,
    Checkerboard,
}

/// `round(x)` with halves rounded up.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::IndexOutOfRange {
                what: "label",
                index: bad,
                limit: n_classes,
            });
        }
        Ok(Dataset {
            features,
            labels,
            n_classes,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize], provenance: impl Into<String>) -> Result<Dataset> {
        Ok(Dataset {
            features: self.features.select_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            provenance: provenance.into(),
        })
    }

    /// First `n` rows (or all of them).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx, format!("{} | head {}", self.provenance, idx.len()))
    }

    /// SHA-256 over shape, features (little-endian bits) and labels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for d in self.features.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in self.features.data() {
            h.update(v.to_le_bytes());
        }
        for &y in &self.labels {
            h.update((y as u64).to_le_bytes());
        }
        h.update((self.n_classes as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// CSV with header `x0,…,x{d-1},label`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let d = self.dim();
        let header: Vec<String> = (0..d).map(|i| format!("x{i}")).chain(["label".to_string()]).collect();
        writeln!(out, "{}", header.join(","))?;
        for (r, &y) in self.labels.iter().enumerate() {
            for v in self.features.row(r) {
                write!(out, "{v},")?;
            }
            writeln!(out, "{y}")?;
        }
        Ok(())
    }
}

/// Two-class 2-D toy data in `[0, 1]²` with exactly `n_per_class` points per class.
///
/// `Spiral`: two interleaved Archimedean arms `r = 0.05 + 0.35·t`, `θ = 3π·t (+ π)`
/// around the centre, `t ~ U(0, 1)`. `Checkerboard`: uniform points labelled by
/// the parity of their cell in a 4×4 board. Gaussian jitter `noise_sigma` is
/// added afterwards and the result clamped to the unit square.
pub fn toy_two_class(n_per_class: usize, pattern: ToyPattern, noise_sigma: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be at least 1"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::config("noise_sigma must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, noise_sigma).expect("sigma checked");
    let mut points: Vec<([f64; 2], usize)> = Vec::with_capacity(2 * n_per_class);
    match pattern {
        ToyPattern::Spiral => {
            for class in 0..2 {
                for _ in 0..n_per_class {
                    let t: f64 = rng.random();
                    points.push((spiral_point(class, t), class));
                }
            }
        }
        ToyPattern::Checkerboard => {
            let mut counts = [0usize; 2];
            while counts[0] < n_per_class || counts[1] < n_per_class {
                let p = [rng.random::<f64>(), rng.random::<f64>()];
                let class = checkerboard_class(p);
                if counts[class] < n_per_class {
                    counts[class] += 1;
                    points.push((p, class));
                }
            }
        }
    }
    let mut features = Vec::with_capacity(points.len() * 2);
    let mut labels = Vec::with_capacity(points.len());
    for (p, class) in points {
        for v in p {
            let v = if noise_sigma > 0.0 { v + jitter.sample(&mut rng) } else { v };
            features.push(v.clamp(0.0, 1.0));
        }
        labels.push(class);
    }
    let n = labels.len();
    Dataset::new(
        Tensor::new(vec![n, 2], features)?,
        labels,
        2,
        format!("toy {pattern:?} n_per_class={n_per_class} sigma={noise_sigma} seed={seed}"),
    )
}

/// Point at parameter `t ∈ [0, 1]` on the arm of `class`.
pub fn spiral_point(class: usize, t: f64) -> [f64; 2] {
    let theta = 3.0 * std::f64::consts::PI * t + std::f64::consts::PI * class as f64;
    let r = 0.05 + 0.35 * t;
    [0.5 + r * theta.cos(), 0.5 + r * theta.sin()]
}

pub fn checkerboard_class(p: [f64; 2]) -> usize {
    let cell = |v: f64| ((v * 4.0).floor() as usize).min(3);
    (cell(p[0]) + cell(p[1])) % 2
}

struct IdxReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl IdxReader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                path: self.path.to_path_buf(),
                offset: self.bytes.len(),
                needed: n - (self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let found = self.u32()?;
        if found != expected {
            return Err(Error::BadMagic {
                path: self.path.to_path_buf(),
                found,
                expected,
            });
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file (`0x00000803`) and label file (`0x00000801`);
/// pixels are scaled to `[0, 1]` by `/255`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = read_file(images_path)?;
    let mut img = IdxReader {
        bytes: &img_bytes,
        pos: 0,
        path: images_path,
    };
    img.magic(IDX_IMAGES_MAGIC)?;
    let count = img.u32()? as usize;
    let rows = img.u32()? as usize;
    let cols = img.u32()? as usize;
    let pixels = img.take(count * rows * cols)?;
    let features: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();

    let lab_bytes = read_file(labels_path)?;
    let mut lab = IdxReader {
        bytes: &lab_bytes,
        pos: 0,
        path: labels_path,
    };
    lab.magic(IDX_LABELS_MAGIC)?;
    let n_labels = lab.u32()? as usize;
    if n_labels != count {
        return Err(Error::CountMismatch {
            images: count,
            labels: n_labels,
        });
    }
    let labels: Vec<usize> = lab.take(n_labels)?.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(10));
    Dataset::new(
        Tensor::new(vec![count, rows * cols], features)?,
        labels,
        n_classes,
        format!("idx {}", images_path.display()),
    )
}

/// Image/label file names looked up inside a data directory.
pub const IDX_FILE_PAIRS: [(&str, &str); 2] = [
    ("images-idx3-ubyte", "labels-idx1-ubyte"),
    ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
];

pub fn idx_paths_in(dir: &Path) -> Result<(PathBuf, PathBuf)> {
    for (img, lab) in IDX_FILE_PAIRS {
        let (i, l) = (dir.join(img), dir.join(lab));
        if i.is_file() && l.is_file() {
            return Ok((i, l));
        }
    }
    Err(Error::io(
        dir,
        std::io::Error::new(std::io::ErrorKind::NotFound, "no IDX image/label pair in directory"),
    ))
}

pub fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    let (i, l) = idx_paths_in(dir)?;
    load_idx(&i, &l)
}

/// Writes the dataset as IDX files with `rows × cols` images; features are
/// quantized with `round(255·v)`.
pub fn write_idx(dataset: &Dataset, rows: usize, cols: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::config(format!("{rows}x{cols} images do not match feature width {}", dataset.dim())));
    }
    let mut img = Vec::with_capacity(16 + dataset.features.len());
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [dataset.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    img.extend(dataset.features.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    let mut lab = Vec::with_capacity(8 + dataset.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(dataset.len() as u32).to_be_bytes());
    for &y in &dataset.labels {
        lab.push(u8::try_from(y).map_err(|_| Error::config(format!("label {y} does not fit in a byte")))?);
    }
    std::fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    std::fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))
}

/// Replaces exactly `round(fraction·n)` labels, at positions drawn without
/// replacement, with a uniformly drawn different class.
pub fn flip_labels(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!("flip fraction {fraction} outside [0, 1]")));
    }
    let n = dataset.len();
    let count = round_half_up(fraction * n as f64).min(n);
    if count > 0 && dataset.n_classes < 2 {
        return Err(Error::config("label flipping needs at least two classes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = dataset.labels.clone();
    let mut positions = sample(&mut rng, n, count).into_vec();
    positions.sort_unstable();
    for i in positions {
        let r = rng.random_range(0..dataset.n_classes - 1);
        labels[i] = if r >= labels[i] { r + 1 } else { r };
    }
    Ok(Dataset {
        features: dataset.features.clone(),
        labels,
        n_classes: dataset.n_classes,
        provenance: format!("{} | flip {fraction} seed={seed}", dataset.provenance),
    })
}

/// Keeps `max(1, round(fraction·n))` rows chosen without replacement, in
/// their original order.
pub fn subsample(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let n = dataset.len();
    let keep = round_half_up(fraction * n as f64).clamp(1, n.max(1));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    dataset.subset(&idx, format!("{} | subsample {fraction} seed={seed}", dataset.provenance))
}

/// Partitions into `(train, validation)` with `holdout_count` validation rows
/// drawn at random; both keep the original row order.
pub fn split(dataset: &Dataset, holdout_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = dataset.len();
    if holdout_count >= n {
        return Err(Error::config(format!("holdout {holdout_count} must be smaller than dataset size {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = sample(&mut rng, n, holdout_count).into_vec();
    held.sort_unstable();
    let mut is_held = vec![false; n];
    held.iter().for_each(|&i| is_held[i] = true);
    let kept: Vec<usize> = (0..n).filter(|&i| !is_held[i]).collect();
    Ok((
        dataset.subset(&kept, format!("{} | split-train seed={seed}", dataset.provenance))?,
        dataset.subset(&held, format!("{} | split-holdout seed={seed}", dataset.provenance))?,
    ))
}
