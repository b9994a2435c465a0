//! Image dataset ingestion and pool splitting.
//!
//! The bundled dataset is the UCI optical-recognition handwritten digits
//! set (1797 images, 8x8 grayscale, 10 classes) in its standard text
//! layout: one image per line, 64 comma-separated integer intensities in
//! `0..=16` in row-major order, followed by the class label. Intensities are
//! scaled by `1/16` into `[0, 1]`.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

static BUNDLED_DIGITS: &[u8] = include_bytes!("../../data/digits.csv.gz");

pub const DIGITS_SIDE: usize = 8;
pub const DIGITS_CLASSES: usize = 10;
const DIGITS_LEVELS: f64 = 16.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage<T> {
    pub pixels: Tensor<T>,
    pub label: usize,
}

impl<T: Scalar> LabeledImage<T> {
    pub fn new(pixels: Tensor<T>, label: usize) -> Result<Self> {
        if let Some(pos) = pixels
            .data()
            .iter()
            .position(|&v| v < T::zero() || v > T::one())
        {
            return Err(Error::invalid(format!(
                "pixel {pos} = {} lies outside [0, 1]",
                pixels.data()[pos]
            )));
        }
        Ok(Self { pixels, label })
    }
}

/// Loads the bundled digits dataset.
pub fn load_digits<T: Scalar>() -> Result<Vec<LabeledImage<T>>> {
    read_optdigits(GzDecoder::new(BUNDLED_DIGITS))
}

/// Loads an optdigits-format file; `.gz` files are decompressed.
pub fn load_optdigits_file<T: Scalar>(path: &Path) -> Result<Vec<LabeledImage<T>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        read_optdigits(GzDecoder::new(file))
    } else {
        read_optdigits(file)
    }
}

pub fn read_optdigits<T: Scalar, R: Read>(reader: R) -> Result<Vec<LabeledImage<T>>> {
    let pixels = DIGITS_SIDE * DIGITS_SIDE;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let values: Vec<u32> = line
            .split(',')
            .map(|f| f.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("optdigits line", format!("line {}: {e}", lineno + 1)))?;
        if values.len() != pixels + 1 {
            return Err(Error::format(
                "optdigits line",
                format!("line {}: expected {} fields, got {}", lineno + 1, pixels + 1, values.len()),
            ));
        }
        let label = values[pixels] as usize;
        if label >= DIGITS_CLASSES || values[..pixels].iter().any(|&v| v as f64 > DIGITS_LEVELS) {
            return Err(Error::format(
                "optdigits line",
                format!("line {}: value out of range", lineno + 1),
            ));
        }
        let data = values[..pixels]
            .iter()
            .map(|&v| T::narrow(v as f64 / DIGITS_LEVELS))
            .collect();
        let tensor = Tensor::new(vec![1, DIGITS_SIDE, DIGITS_SIDE], data)?;
        out.push(LabeledImage::new(tensor, label)?);
    }
    Ok(out)
}

/// Sizes of the four disjoint image pools.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub victim_train: usize,
    pub calibration: usize,
    pub detector_train: usize,
    pub detector_test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        // 1797 digits in total.
        Self {
            victim_train: 697,
            calibration: 500,
            detector_train: 350,
            detector_test: 250,
        }
    }
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.victim_train + self.calibration + self.detector_train + self.detector_test
    }
}

/// Disjoint index pools into a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub victim_train: Vec<usize>,
    pub calibration: Vec<usize>,
    pub detector_train: Vec<usize>,
    pub detector_test: Vec<usize>,
}

impl DatasetSplit {
    /// Shuffles `0..n` with `seed` and cuts it into consecutive pools.
    pub fn new(n: usize, sizes: SplitSizes, seed: u64) -> Result<Self> {
        if sizes.total() > n {
            return Err(Error::invalid(format!(
                "split sizes need {} images but the dataset has {n}",
                sizes.total()
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut rest = order.as_slice();
        let mut take = |k: usize| {
            let (head, tail) = rest.split_at(k);
            rest = tail;
            head.to_vec()
        };
        Ok(Self {
            victim_train: take(sizes.victim_train),
            calibration: take(sizes.calibration),
            detector_train: take(sizes.detector_train),
            detector_test: take(sizes.detector_test),
        })
    }

    pub fn select<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
        idx.iter().map(|&i| items[i].clone()).collect()
    }
}
