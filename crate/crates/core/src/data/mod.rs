//! Dataset ingestion and deterministic nested subset construction.
//!
//! Images load from IDX files (big-endian magic and dimension sizes,
//! unsigned-byte payload) and normalise to [0, 1] by dividing by 255. The
//! initial training set is a seeded permutation prefix of the full set, so
//! a smaller proportion is always contained in a larger one.

pub mod synth;

use std::fs;
use std::io::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::netcore::Batch;
use crate::rng::{tags, Xoshiro256StarStar};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {got:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        got: u32,
        expected: u32,
    },
    #[error("{path}: truncated payload (need {need} bytes, have {have})")]
    Truncated {
        path: String,
        need: usize,
        have: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("subset proportion {0} out of range (0, 1]")]
    BadProportion(f64),
}

/// Images with class labels, pixels in [0, 1].
#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    /// Row-major (n, c, h, w).
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn image(&self, idx: usize) -> &[f64] {
        let len = self.c * self.h * self.w;
        &self.images[idx * len..(idx + 1) * len]
    }

    pub fn from_batch(batch: &Batch, num_classes: usize) -> Dataset {
        Dataset {
            n: batch.n,
            c: batch.c,
            h: batch.h,
            w: batch.w,
            images: batch.images.clone(),
            labels: batch.labels.clone(),
            num_classes,
        }
    }

    /// Gathers the given sample indices into a batch.
    pub fn gather(&self, idxs: &[usize]) -> Batch {
        let len = self.c * self.h * self.w;
        let mut images = Vec::with_capacity(idxs.len() * len);
        let mut labels = Vec::with_capacity(idxs.len());
        for &i in idxs {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Batch {
            n: idxs.len(),
            c: self.c,
            h: self.h,
            w: self.w,
            images,
            labels,
        }
    }

    /// First round(p*n) samples of a seeded permutation. For a fixed seed the
    /// result is a prefix, so subset(p1) is contained in subset(p2) whenever
    /// p1 <= p2.
    pub fn subset(&self, p: f64, seed: u64) -> Result<Dataset, DataError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DataError::BadProportion(p));
        }
        let k = (p * self.n as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.n).collect();
        Xoshiro256StarStar::stream(seed, tags::SUBSET).shuffle(&mut order);
        order.truncate(k);
        let batch = self.gather(&order);
        Ok(Dataset::from_batch(&batch, self.num_classes))
    }

    /// Permutation prefix indices used by `subset`; exposed so nestedness can
    /// be checked directly.
    pub fn subset_indices(&self, p: f64, seed: u64) -> Result<Vec<usize>, DataError> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(DataError::BadProportion(p));
        }
        let k = (p * self.n as f64).round() as usize;
        let mut order: Vec<usize> = (0..self.n).collect();
        Xoshiro256StarStar::stream(seed, tags::SUBSET).shuffle(&mut order);
        order.truncate(k);
        Ok(order)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// True when every class appears at least once. Absence on a small
    /// subset is a seed-quality warning, not an error.
    pub fn covers_all_classes(&self) -> bool {
        self.class_counts().iter().all(|&c| c > 0)
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn be_u32(bytes: &[u8], off: usize, path: &Path) -> Result<u32, DataError> {
    let end = off + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.display().to_string(),
            need: end,
            have: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes([
        bytes[off],
        bytes[off + 1],
        bytes[off + 2],
        bytes[off + 3],
    ]))
}

/// Loads an IDX image/label file pair.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let img_bytes = read_file(images_path)?;
    let magic = be_u32(&img_bytes, 0, images_path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: images_path.display().to_string(),
            got: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(&img_bytes, 4, images_path)? as usize;
    let h = be_u32(&img_bytes, 8, images_path)? as usize;
    let w = be_u32(&img_bytes, 12, images_path)? as usize;
    let need = 16 + n * h * w;
    if img_bytes.len() < need {
        return Err(DataError::Truncated {
            path: images_path.display().to_string(),
            need,
            have: img_bytes.len(),
        });
    }

    let lbl_bytes = read_file(labels_path)?;
    let magic = be_u32(&lbl_bytes, 0, labels_path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: labels_path.display().to_string(),
            got: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n_labels = be_u32(&lbl_bytes, 4, labels_path)? as usize;
    if n_labels != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let need = 8 + n;
    if lbl_bytes.len() < need {
        return Err(DataError::Truncated {
            path: labels_path.display().to_string(),
            need,
            have: lbl_bytes.len(),
        });
    }

    let images: Vec<f64> = img_bytes[16..16 + n * h * w]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    Ok(Dataset {
        n,
        c: 1,
        h,
        w,
        images,
        labels,
        num_classes,
    })
}

/// Writes a dataset as an IDX image/label file pair. Pixels quantise to
/// round(v * 255).
pub fn write_idx(images_path: &Path, labels_path: &Path, data: &Dataset) -> Result<(), DataError> {
    let io_err = |path: &Path, source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut img = Vec::with_capacity(16 + data.n * data.h * data.w);
    img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.n as u32).to_be_bytes());
    img.extend_from_slice(&(data.h as u32).to_be_bytes());
    img.extend_from_slice(&(data.w as u32).to_be_bytes());
    img.extend(
        data.images
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut f = fs::File::create(images_path).map_err(|e| io_err(images_path, e))?;
    f.write_all(&img).map_err(|e| io_err(images_path, e))?;

    let mut lbl = Vec::with_capacity(8 + data.n);
    lbl.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl.extend_from_slice(&(data.n as u32).to_be_bytes());
    lbl.extend(data.labels.iter().map(|&l| l as u8));
    let mut f = fs::File::create(labels_path).map_err(|e| io_err(labels_path, e))?;
    f.write_all(&lbl).map_err(|e| io_err(labels_path, e))?;
    Ok(())
}

/// Standard file names inside a dataset directory.
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Loads the train/test pair from a dataset directory laid out with the
/// standard file names.
pub fn load_dir(dir: &Path) -> Result<(Dataset, Dataset), DataError> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}
