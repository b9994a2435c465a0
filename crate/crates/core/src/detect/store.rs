//! Detector files: one JSON header line, then a little-endian float block
//! holding the support vectors (row-major) followed by the dual
//! coefficients. Stump files carry an empty block.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read, split_header, write_atomic};
use crate::scalar::Scalar;

use super::records::Label;
use super::stump::StumpModel;
use super::svm::SvmModel;
use super::Detector;

pub const DETECTOR_FORMAT: &str = "advscore-detector";
pub const DETECTOR_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Svm,
    Stump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: DetectorKind,
    dtype: String,
    /// Score dimension K.
    dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_mean: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_std: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    support_vectors: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
    /// Label predicted above the threshold: 1 or -1.
    #[serde(skip_serializing_if = "Option::is_none")]
    polarity: Option<i8>,
}

fn widen<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.widen()).collect()
}

pub fn encode_detector<T: Scalar>(det: &Detector<T>) -> Result<Vec<u8>> {
    let mut header = Header {
        format: DETECTOR_FORMAT.into(),
        version: DETECTOR_VERSION,
        kind: DetectorKind::Stump,
        dtype: T::DTYPE.into(),
        dim: None,
        c: None,
        gamma: None,
        bias: None,
        feature_mean: None,
        feature_std: None,
        support_vectors: None,
        iterations: None,
        converged: None,
        threshold: None,
        polarity: None,
    };
    let mut block = Vec::new();
    match det {
        Detector::Svm(m) => {
            header.kind = DetectorKind::Svm;
            header.dim = Some(m.dim());
            header.c = Some(m.c);
            header.gamma = Some(m.gamma);
            header.bias = Some(m.bias.widen());
            header.feature_mean = Some(widen(&m.feature_mean));
            header.feature_std = Some(widen(&m.feature_std));
            header.support_vectors = Some(m.support_vectors.len());
            header.iterations = Some(m.iterations);
            header.converged = Some(m.converged);
            for sv in &m.support_vectors {
                sv.iter().for_each(|v| v.write_le(&mut block));
            }
            m.dual_coefs.iter().for_each(|v| v.write_le(&mut block));
        }
        Detector::Stump(s) => {
            header.dim = s.num_scores;
            header.threshold = Some(s.threshold.widen());
            header.polarity = Some(s.polarity.sign() as i8);
        }
    }
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.extend_from_slice(&block);
    Ok(out)
}

pub fn decode_detector<T: Scalar>(bytes: &[u8]) -> Result<Detector<T>> {
    const WHAT: &str = "detector";
    let (head, block) = split_header(bytes, WHAT)?;
    let h: Header = serde_json::from_slice(head)?;
    if h.format != DETECTOR_FORMAT || h.version != DETECTOR_VERSION {
        return Err(Error::format(WHAT, "unsupported format or version"));
    }
    if h.dtype != T::DTYPE {
        return Err(Error::format(WHAT, format!("stored as {}, expected {}", h.dtype, T::DTYPE)));
    }
    let missing = |f: &str| Error::format(WHAT, format!("missing field {f}"));
    match h.kind {
        DetectorKind::Stump => {
            let polarity = match h.polarity.ok_or_else(|| missing("polarity"))? {
                1 => Label::Clean,
                -1 => Label::Adversarial,
                p => return Err(Error::format(WHAT, format!("polarity {p}"))),
            };
            if !block.is_empty() {
                return Err(Error::format(WHAT, "unexpected payload after stump header"));
            }
            let threshold = h.threshold.ok_or_else(|| missing("threshold"))?;
            if !threshold.is_finite() {
                return Err(Error::format(WHAT, "non-finite threshold"));
            }
            Ok(Detector::Stump(StumpModel {
                threshold: T::narrow(threshold),
                polarity,
                num_scores: h.dim,
            }))
        }
        DetectorKind::Svm => {
            let dim = h.dim.ok_or_else(|| missing("dim"))?;
            let n = h.support_vectors.ok_or_else(|| missing("support_vectors"))?;
            let mean = h.feature_mean.ok_or_else(|| missing("feature_mean"))?;
            let std = h.feature_std.ok_or_else(|| missing("feature_std"))?;
            if mean.len() != dim || std.len() != dim || std.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::format(WHAT, "bad standardization vectors"));
            }
            if block.len() != n * (dim + 1) * T::BYTES {
                return Err(Error::format(
                    WHAT,
                    format!("expected {} payload bytes, found {}", n * (dim + 1) * T::BYTES, block.len()),
                ));
            }
            let vals: Vec<T> = block.chunks_exact(T::BYTES).map(T::read_le).collect();
            let (svs, coefs) = vals.split_at(n * dim);
            Ok(Detector::Svm(SvmModel {
                support_vectors: svs.chunks(dim.max(1)).map(|c| c.to_vec()).collect(),
                dual_coefs: coefs.to_vec(),
                bias: T::narrow(h.bias.ok_or_else(|| missing("bias"))?),
                gamma: h.gamma.ok_or_else(|| missing("gamma"))?,
                c: h.c.ok_or_else(|| missing("c"))?,
                feature_mean: mean.into_iter().map(T::narrow).collect(),
                feature_std: std.into_iter().map(T::narrow).collect(),
                iterations: h.iterations.unwrap_or(0),
                converged: h.converged.unwrap_or(true),
            }))
        }
    }
}

pub fn save_detector<T: Scalar>(det: &Detector<T>, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode_detector(det)?;
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn load_detector<T: Scalar>(path: &Path) -> Result<Detector<T>> {
    decode_detector(&read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::{train_svm, Provenance, ScoreRecord, SmoParams};

    #[test]
    fn svm_roundtrip_preserves_predictions() {
        let data: Vec<ScoreRecord<f64>> = (0..20)
            .map(|i| {
                let p = if i % 2 == 0 { Provenance::Original } else { Provenance::Cw };
                ScoreRecord::new(vec![i as f64 * 0.37, (i % 3) as f64, 1.0 / (1.0 + i as f64)], p).unwrap()
            })
            .collect();
        let det = Detector::Svm(train_svm(&data, 2.0, 0.5, &SmoParams::default()).unwrap());
        let back: Detector<f64> = decode_detector(&encode_detector(&det).unwrap()).unwrap();
        assert_eq!(back, det);
        assert!(decode_detector::<f32>(&encode_detector(&det).unwrap()).is_err());
    }

    #[test]
    fn stump_roundtrip_and_truncation() {
        let det = Detector::Stump(StumpModel::<f64> {
            threshold: 0.125,
            polarity: Label::Adversarial,
            num_scores: Some(10),
        });
        let bytes = encode_detector(&det).unwrap();
        assert_eq!(decode_detector::<f64>(&bytes).unwrap(), det);
        let svm = encode_detector(&Detector::<f64>::Svm(SvmModel {
            support_vectors: vec![vec![0.0]],
            dual_coefs: vec![1.0],
            bias: 0.0,
            gamma: 1.0,
            c: 1.0,
            feature_mean: vec![0.0],
            feature_std: vec![1.0],
            iterations: 0,
            converged: true,
        }))
        .unwrap();
        assert!(decode_detector::<f64>(&svm[..svm.len() - 1]).is_err());
    }
}
