//! Dataset containers and loaders for the IDX (MNIST family) and CIFAR-10
//! binary formats.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.247, 0.243, 0.261];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// One flattened, normalized sample per row.
    pub images: Matrix,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<usize>, n_classes: usize, split: Split) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::CountMismatch { images: images.rows(), labels: labels.len() });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::LabelOutOfRange { label, n_classes });
        }
        if !images.is_finite() {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(Self { images, labels, n_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.images.cols()
    }

    pub fn subset(&self, idx: &[usize], split: Split) -> Dataset {
        Dataset {
            images: self.images.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
            split,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (self.images.select_rows(idx), idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// Splits off the first `fraction` of a seeded permutation as the
    /// validation set.
    pub fn split_validation(&self, fraction: f64, rng: &mut Rng) -> Result<(Dataset, Option<Dataset>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidArgument(format!("validation fraction must be in [0,1), got {fraction}")));
        }
        let n_val = (fraction * self.len() as f64).round() as usize;
        if n_val == 0 {
            return Ok((self.clone(), None));
        }
        let perm = rng.permutation(self.len());
        let (val, train) = perm.split_at(n_val);
        Ok((self.subset(train, Split::Train), Some(self.subset(val, Split::Val))))
    }
}

#[inline]
fn idx_pixel(b: u8) -> f64 {
    (b as f64 / 255.0 - 0.5) / 0.5
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn truncated(path: &Path, detail: String) -> Error {
    Error::Truncated { path: path.to_path_buf(), detail }
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    if bytes.len() < 4 {
        return Err(truncated(path, format!("{} bytes, no header", bytes.len())));
    }
    let found = read_u32(bytes, 0);
    if found != expected {
        return Err(Error::BadMagic { path: path.to_path_buf(), found, expected });
    }
    Ok(())
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, usize, &'a [u8])> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    if bytes.len() < 16 {
        return Err(truncated(path, format!("header needs 16 bytes, found {}", bytes.len())));
    }
    let n = read_u32(bytes, 4) as usize;
    let rows = read_u32(bytes, 8) as usize;
    let cols = read_u32(bytes, 12) as usize;
    let expected = n
        .checked_mul(rows)
        .and_then(|x| x.checked_mul(cols))
        .and_then(|x| x.checked_add(16))
        .ok_or_else(|| truncated(path, "header sizes overflow".into()))?;
    if bytes.len() != expected {
        return Err(truncated(path, format!("expected {expected} bytes for {n}x{rows}x{cols}, found {}", bytes.len())));
    }
    Ok((n, rows, cols, &bytes[16..]))
}

/// Parses an IDX label file.
pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    if bytes.len() < 8 {
        return Err(truncated(path, format!("header needs 8 bytes, found {}", bytes.len())));
    }
    let n = read_u32(bytes, 4) as usize;
    if bytes.len() != n + 8 {
        return Err(truncated(path, format!("expected {} bytes for {n} labels, found {}", n + 8, bytes.len())));
    }
    Ok(&bytes[8..])
}

/// Builds a dataset from in-memory IDX files (10 classes).
pub fn decode_idx(images: &[u8], labels: &[u8], images_path: &Path, labels_path: &Path, split: Split) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(images, images_path)?;
    let label_bytes = parse_idx_labels(labels, labels_path)?;
    if n != label_bytes.len() {
        return Err(Error::CountMismatch { images: n, labels: label_bytes.len() });
    }
    let data = pixels.iter().map(|&b| idx_pixel(b)).collect();
    let images = Matrix::new(n, rows * cols, data)?;
    let labels = label_bytes.iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, 10, split)
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    decode_idx(&read_file(ip)?, &read_file(lp)?, ip, lp, split)
}

/// Standard file names of an MNIST-style directory.
pub fn idx_paths(dir: &Path, split: Split) -> (PathBuf, PathBuf) {
    let prefix = if split == Split::Test { "t10k" } else { "train" };
    (
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

/// Decodes CIFAR-10 binary records (label byte + 1024 R + 1024 G + 1024 B).
pub fn decode_cifar10(bytes: &[u8], path: &Path, split: Split) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::RecordMisaligned { path: path.to_path_buf(), len: bytes.len(), record: CIFAR_RECORD });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::LabelOutOfRange { label, n_classes: 10 });
        }
        labels.push(label);
        for (i, &b) in rec[1..].iter().enumerate() {
            let ch = i / 1024;
            data.push((b as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]);
        }
    }
    Dataset::new(Matrix::new(n, 3072, data)?, labels, 10, split)
}

pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P], split: Split) -> Result<Dataset> {
    if paths.is_empty() {
        return Err(Error::InvalidArgument("no CIFAR-10 batch files given".into()));
    }
    let mut parts = Vec::new();
    for p in paths {
        let p = p.as_ref();
        parts.push(decode_cifar10(&read_file(p)?, p, split)?);
    }
    concat(parts, split)
}

/// Standard CIFAR-10 binary batch names in `dir`.
pub fn cifar_paths(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Test => vec![dir.join("test_batch.bin")],
        _ => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
    }
}

fn concat(parts: Vec<Dataset>, split: Split) -> Result<Dataset> {
    let width = parts[0].width();
    let n_classes = parts[0].n_classes;
    let rows: usize = parts.iter().map(Dataset::len).sum();
    let mut data = Vec::with_capacity(rows * width);
    let mut labels = Vec::with_capacity(rows);
    for p in parts {
        data.extend_from_slice(p.images.data());
        labels.extend(p.labels);
    }
    Dataset::new(Matrix::new(rows, width, data)?, labels, n_classes, split)
}

/// Random 4-pixel-padded 32x32 crop plus horizontal flip, in place, for
/// rows laid out as three 32x32 channel planes. Padding uses the value of
/// a zero pixel after normalization.
pub fn augment_cifar(batch: &mut Matrix, rng: &mut Rng) {
    let mut buf = vec![0.0; 3072];
    for r in 0..batch.rows() {
        let dy = rng.below(9) as isize - 4;
        let dx = rng.below(9) as isize - 4;
        let flip = rng.below(2) == 1;
        let row = batch.row_mut(r);
        for ch in 0..3 {
            let pad = -CIFAR_MEAN[ch] / CIFAR_STD[ch];
            for y in 0..32isize {
                for x in 0..32isize {
                    let sx = if flip { 31 - x } else { x } + dx;
                    let sy = y + dy;
                    buf[ch * 1024 + (y * 32 + x) as usize] = if (0..32).contains(&sx) && (0..32).contains(&sy) {
                        row[ch * 1024 + (sy * 32 + sx) as usize]
                    } else {
                        pad
                    };
                }
            }
        }
        row.copy_from_slice(&buf);
    }
}

/// Gaussian clusters around random unit-variance centres; a quick stand-in
/// for image data in examples and tests.
pub fn synthetic_clusters(n_per_class: usize, n_classes: usize, dim: usize, spread: f64, rng: &mut Rng) -> Result<Dataset> {
    let centres = Matrix::from_fn(n_classes, dim, |_, _| rng.normal());
    let n = n_per_class * n_classes;
    let mut images = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % n_classes;
        labels.push(c);
        for (x, m) in images.row_mut(i).iter_mut().zip(centres.row(c)) {
            *x = m + spread * rng.normal();
        }
    }
    Dataset::new(images, labels, n_classes, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for v in [n, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    #[test]
    fn pixel_mapping() {
        assert_eq!(idx_pixel(255), 1.0);
        assert_eq!(idx_pixel(0), -1.0);
    }

    #[test]
    fn decodes_small_idx() {
        let img = idx_images(2, 1, 2, &[0, 255, 51, 102]);
        let lab = idx_labels(&[3, 7]);
        let d = decode_idx(&img, &lab, Path::new("i"), Path::new("l"), Split::Train).unwrap();
        assert_eq!(d.labels, vec![3, 7]);
        assert_eq!(d.images.row(0), &[-1.0, 1.0]);
        assert!((d.images.get(1, 0) - (0.2 - 0.5) / 0.5).abs() < 1e-15);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let img = idx_images(2, 1, 2, &[0, 1, 2, 3]);
        let lab = idx_labels(&[1, 2]);
        let p = Path::new("x");
        assert!(matches!(decode_idx(&lab, &lab, p, p, Split::Train), Err(Error::BadMagic { .. })));
        assert!(matches!(decode_idx(&img[..18], &lab, p, p, Split::Train), Err(Error::Truncated { .. })));
        let lab3 = idx_labels(&[1, 2, 3]);
        assert!(matches!(decode_idx(&img, &lab3, p, p, Split::Train), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn cifar_record_and_misalignment() {
        let mut rec = vec![4u8];
        rec.extend((0..3072).map(|i| (i % 256) as u8));
        let d = decode_cifar10(&rec, Path::new("c"), Split::Test).unwrap();
        assert_eq!(d.labels, vec![4]);
        assert!((d.images.get(0, 125) - (125.0 / 255.0 - 0.4914) / 0.247).abs() < 1e-15);
        assert!((d.images.get(0, 1024) - (0.0 - 0.4822) / 0.243).abs() < 1e-15);
        assert!(matches!(
            decode_cifar10(&rec[..3000], Path::new("c"), Split::Test),
            Err(Error::RecordMisaligned { .. })
        ));
    }

    #[test]
    fn validation_split_is_disjoint_and_seeded() {
        let mut rng = Rng::new(1);
        let d = synthetic_clusters(10, 2, 3, 0.1, &mut rng).unwrap();
        let (t1, v1) = d.split_validation(0.1, &mut Rng::with_stream(5, 1)).unwrap();
        let (t2, v2) = d.split_validation(0.1, &mut Rng::with_stream(5, 1)).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(t1, t2);
        assert_eq!(v1.unwrap().len(), 2);
        assert_eq!(t1.len(), 18);
    }

    #[test]
    fn augmentation_keeps_shape_and_values_finite() {
        let mut rng = Rng::new(0);
        let mut b = Matrix::from_fn(2, 3072, |_, j| j as f64 / 3072.0);
        augment_cifar(&mut b, &mut rng);
        assert!(b.is_finite());
        assert_eq!(b.shape(), (2, 3072));
    }
}
