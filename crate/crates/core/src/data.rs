//! Dataset ingestion: IDX (MNIST, Fashion-MNIST) and CIFAR-10 binary
//! batches, per-channel normalization, augmentation and shuffled batching.
//!
//! All images come out as `[N × C × 32 × 32]`. IDX digits are centered in
//! the 32×32 frame with zero padding before scaling to `[0, 1]`.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
/// Crop padding on each side.
pub const CROP_PAD: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Cifar10,
}

impl DatasetKind {
    pub fn channels(self) -> usize {
        match self {
            DatasetKind::Cifar10 => 3,
            _ => 1,
        }
    }

    pub fn flips(self) -> bool {
        self == DatasetKind::Cifar10
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Fashion => "fashion",
            DatasetKind::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "fashion" => Ok(DatasetKind::Fashion),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(Error::config(format!(
                "unknown dataset {other:?} (expected mnist, fashion or cifar10)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel statistics of a split, in 64-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LabeledDataset<T> {
    kind: DatasetKind,
    split: Split,
    images: Tensor<T>,
    labels: Vec<usize>,
    /// Statistics the images were normalized with, if any.
    stats: Option<ChannelStats>,
}

impl<T: Scalar> LabeledDataset<T> {
    pub fn new(kind: DatasetKind, split: Split, images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[0] != labels.len() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        Ok(Self {
            kind,
            split,
            images,
            labels,
            stats: None,
        })
    }

    pub fn kind(&self) -> DatasetKind {
        self.kind
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn stats(&self) -> Option<&ChannelStats> {
        self.stats.as_ref()
    }

    pub fn sample_len(&self) -> usize {
        self.images.row_len()
    }

    /// Histogram over classes `0..classes`.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Population mean and standard deviation per channel.
    pub fn channel_stats(&self) -> ChannelStats {
        let [n, c, h, w] = self.images.shape()[..] else { unreachable!() };
        let hw = h * w;
        let data = self.images.data();
        let count = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let plane = |b: usize| &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let mu = (0..n)
                .map(|b| plane(b).iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>())
                .sum::<f64>()
                / count;
            let var = (0..n)
                .map(|b| {
                    plane(b)
                        .iter()
                        .map(|v| {
                            let d = v.to_f64().unwrap_or(0.0) - mu;
                            d * d
                        })
                        .sum::<f64>()
                })
                .sum::<f64>()
                / count;
            mean[ch] = mu;
            std[ch] = var.sqrt();
        }
        ChannelStats { mean, std }
    }

    /// `(x − mean) / std` per channel. Normalizing twice is an error.
    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        if self.stats.is_some() {
            return Err(Error::config("dataset is already normalized"));
        }
        let c = self.channels();
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::config(format!(
                "normalization statistics cover {} channels, images have {c}",
                stats.mean.len()
            )));
        }
        if stats.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("a channel has zero variance"));
        }
        let hw = self.images.shape()[2] * self.images.shape()[3];
        for (i, plane) in self.images.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            let (m, s) = (T::lit(stats.mean[ch]), T::lit(stats.std[ch]));
            for v in plane {
                *v = (*v - m) / s;
            }
        }
        self.stats = Some(stats.clone());
        Ok(())
    }

    /// Stacks the samples at `indices` into a batch.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let d = self.sample_len();
        let data = self.images.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::config(format!("sample {i} out of range ({} samples)", self.len())));
            }
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
            labels.push(self.labels[i]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Ok((Tensor::new(&shape, out)?, labels))
    }

    /// The first `n` samples (all of them if `n` exceeds the size).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx)?;
        Ok(Self {
            kind: self.kind,
            split: self.split,
            images,
            labels,
            stats: self.stats.clone(),
        })
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(0, format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(offset as u64, format!("header truncated ({} bytes)", bytes.len())))
}

/// Parsed IDX image file: `count` images of `rows × cols` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(0, format!("image magic {magic:#010x}, expected {IDX_IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let rows = be_u32(bytes, 8)? as usize;
    let cols = be_u32(bytes, 12)? as usize;
    if rows == 0 || cols == 0 || rows > IMAGE_SIDE || cols > IMAGE_SIDE {
        return Err(Error::format(8, format!("image size {rows}×{cols} does not fit {IMAGE_SIDE}×{IMAGE_SIDE}")));
    }
    let need = 16 + count * rows * cols;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("image payload truncated: {count} images need {need} bytes, file has {}", bytes.len()),
        ));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..need].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != IDX_LABEL_MAGIC {
        return Err(Error::format(0, format!("label magic {magic:#010x}, expected {IDX_LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4)? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::format(
            bytes.len() as u64,
            format!("label payload truncated: {count} labels need {need} bytes, file has {}", bytes.len()),
        ));
    }
    let labels = bytes[8..need].to_vec();
    if let Some(pos) = labels.iter().position(|l| *l > 9) {
        return Err(Error::format((8 + pos) as u64, format!("label {} outside 0..=9", labels[pos])));
    }
    Ok(labels)
}

/// Builds an unnormalized dataset in `[0, 1]` from IDX image and label bytes.
pub fn idx_dataset<T: Scalar>(kind: DatasetKind, split: Split, images: &[u8], labels: &[u8]) -> Result<LabeledDataset<T>> {
    let img = parse_idx_images(images)?;
    let lab = parse_idx_labels(labels)?;
    if img.count != lab.len() {
        return Err(Error::format(
            4,
            format!("{} images but {} labels", img.count, lab.len()),
        ));
    }
    let (top, left) = ((IMAGE_SIDE - img.rows) / 2, (IMAGE_SIDE - img.cols) / 2);
    let frame = IMAGE_SIDE * IMAGE_SIDE;
    let scale = T::lit(1.0 / 255.0);
    let mut data = vec![T::zero(); img.count * frame];
    for (n, src) in img.pixels.chunks(img.rows * img.cols).enumerate() {
        let dst = &mut data[n * frame..(n + 1) * frame];
        for (r, row) in src.chunks(img.cols).enumerate() {
            for (c, p) in row.iter().enumerate() {
                dst[(top + r) * IMAGE_SIDE + left + c] = T::lit(f64::from(*p)) * scale;
            }
        }
    }
    let images = Tensor::new(&[img.count, 1, IMAGE_SIDE, IMAGE_SIDE], data)?;
    LabeledDataset::new(kind, split, images, lab.into_iter().map(usize::from).collect())
}

/// Reads an IDX image/label file pair, raw or gzip-compressed.
pub fn load_idx<T: Scalar>(kind: DatasetKind, split: Split, images: &Path, labels: &Path) -> Result<LabeledDataset<T>> {
    let img = read_file(images)?;
    let lab = read_file(labels)?;
    idx_dataset(kind, split, &img, &lab)
}

/// Parses concatenated CIFAR-10 binary records (label byte, then the R, G
/// and B planes).
pub fn cifar10_dataset<T: Scalar>(split: Split, bytes: &[u8]) -> Result<LabeledDataset<T>> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
        return Err(Error::format(
            whole as u64,
            format!("{} bytes is not a multiple of the {CIFAR_RECORD}-byte record", bytes.len()),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let scale = T::lit(1.0 / 255.0);
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::format((i * CIFAR_RECORD) as u64, format!("label {} outside 0..=9", rec[0])));
        }
        labels.push(usize::from(rec[0]));
        data.extend(rec[1..].iter().map(|p| T::lit(f64::from(*p)) * scale));
    }
    let images = Tensor::new(&[n, 3, IMAGE_SIDE, IMAGE_SIDE], data)?;
    LabeledDataset::new(DatasetKind::Cifar10, split, images, labels)
}

pub fn load_cifar10<T: Scalar>(split: Split, paths: &[PathBuf]) -> Result<LabeledDataset<T>> {
    let mut bytes = Vec::new();
    for p in paths {
        let file = read_file(p)?;
        if file.len() % CIFAR_RECORD != 0 {
            return cifar10_dataset(split, &file).map_err(|e| match e {
                Error::Format { offset, detail } => Error::format(offset, format!("{}: {detail}", p.display())),
                other => other,
            });
        }
        bytes.extend(file);
    }
    cifar10_dataset(split, &bytes)
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::Io(std::io::Error::new(
        std::io::ErrorKind::NotFound,
        format!("{} not found in {}", stem, dir.display()),
    )))
}

/// Train and test splits from a dataset directory, both normalized with the
/// train split's channel statistics.
///
/// MNIST-style datasets expect the four standard IDX file names (optionally
/// `.gz`); CIFAR-10 expects `data_batch_{1..5}.bin` and `test_batch.bin`,
/// directly or under `cifar-10-batches-bin/`.
pub fn load_dir<T: Scalar>(kind: DatasetKind, dir: &Path) -> Result<(LabeledDataset<T>, LabeledDataset<T>)> {
    let (mut train, mut test) = match kind {
        DatasetKind::Mnist | DatasetKind::Fashion => (
            load_idx(
                kind,
                Split::Train,
                &find(dir, "train-images-idx3-ubyte")?,
                &find(dir, "train-labels-idx1-ubyte")?,
            )?,
            load_idx(
                kind,
                Split::Test,
                &find(dir, "t10k-images-idx3-ubyte")?,
                &find(dir, "t10k-labels-idx1-ubyte")?,
            )?,
        ),
        DatasetKind::Cifar10 => {
            let nested = dir.join("cifar-10-batches-bin");
            let root = if nested.is_dir() { nested } else { dir.to_path_buf() };
            let train_files = (1..=5)
                .map(|i| find(&root, &format!("data_batch_{i}.bin")))
                .collect::<Result<Vec<_>>>()?;
            (
                load_cifar10(Split::Train, &train_files)?,
                load_cifar10(Split::Test, &[find(&root, "test_batch.bin")?])?,
            )
        }
    };
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}

/// Pads one `[C × H × W]` sample by [`CROP_PAD`] zeros per side and takes the
/// `H × W` window at `(dy, dx)`, optionally mirrored left-right.
pub fn crop_flip<T: Scalar>(sample: &[T], c: usize, h: usize, w: usize, dy: usize, dx: usize, flip: bool) -> Vec<T> {
    let mut out = vec![T::zero(); sample.len()];
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = (y + dy).wrapping_sub(CROP_PAD);
            if sy >= h {
                continue;
            }
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = (x + dx).wrapping_sub(CROP_PAD);
                if sx < w {
                    dst[y * w + ox] = plane[sy * w + sx];
                }
            }
        }
    }
    out
}

/// Random pad-and-crop for every sample of a `[N × C × H × W]` batch, plus a
/// coin-flip horizontal mirror for datasets that use one.
pub fn augment<T: Scalar, R: Rng>(batch: &Tensor<T>, kind: DatasetKind, rng: &mut R) -> Result<Tensor<T>> {
    let [n, c, h, w] = batch.shape()[..] else {
        return Err(Error::shape("augment", format!("expected [N, C, H, W], got {:?}", batch.shape())));
    };
    let d = c * h * w;
    let mut out = Vec::with_capacity(batch.len());
    for s in 0..n {
        let dy = rng.gen_range(0..=2 * CROP_PAD);
        let dx = rng.gen_range(0..=2 * CROP_PAD);
        let flip = kind.flips() && rng.gen_bool(0.5);
        out.extend(crop_flip(&batch.data()[s * d..(s + 1) * d], c, h, w, dy, dx, flip));
    }
    Tensor::new(batch.shape(), out)
}

/// A shuffled partition of `0..n` into batches of `batch_size` (the last one
/// may be short).
pub fn shuffled_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
