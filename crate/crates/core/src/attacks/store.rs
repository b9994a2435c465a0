//! On-disk attack results: a directory holding `manifest.json` plus raw
//! little-endian float blocks `original.bin` and `perturbed.bin` (one
//! flattened image after another, in manifest order).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read, sha256_hex, write_atomic};
use crate::netcore::Tensor;
use crate::scalar::Scalar;

use super::{AdversarialExample, AttackConfig, Calibration};

pub const ATTACK_FORMAT: &str = "advscore-attack";
pub const ATTACK_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleEntry {
    /// Index of the source image in the dataset.
    pub image_index: usize,
    pub seed: u64,
    pub true_label: usize,
    pub predicted_label: usize,
    pub perturbation_norm: f64,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackManifest {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub image_shape: Vec<usize>,
    pub config: AttackConfig,
    pub calibration: Option<Calibration>,
    pub success_rate: f64,
    pub mean_perturbation_norm: f64,
    pub examples: Vec<ExampleEntry>,
    pub original_sha256: String,
    pub perturbed_sha256: String,
}

fn encode_block<T: Scalar>(tensors: impl Iterator<Item = impl AsRef<[T]>>) -> Vec<u8> {
    let mut out = Vec::new();
    for t in tensors {
        for &v in t.as_ref() {
            v.write_le(&mut out);
        }
    }
    out
}

pub fn save_attack_results<T: Scalar>(
    dir: &Path,
    config: &AttackConfig,
    calibration: Option<&Calibration>,
    image_indices: &[usize],
    examples: &[AdversarialExample<T>],
) -> Result<AttackManifest> {
    if image_indices.len() != examples.len() {
        return Err(Error::invalid("one image index per example required"));
    }
    let first = examples
        .first()
        .ok_or_else(|| Error::invalid("no attack results to save"))?;
    let original = encode_block::<T>(examples.iter().map(|e| e.original.data()));
    let perturbed = encode_block::<T>(examples.iter().map(|e| e.perturbed.data()));
    let n = examples.len() as f64;
    let manifest = AttackManifest {
        format: ATTACK_FORMAT.into(),
        version: ATTACK_VERSION,
        dtype: T::DTYPE.into(),
        image_shape: first.original.shape().to_vec(),
        config: config.clone(),
        calibration: calibration.cloned(),
        success_rate: examples.iter().filter(|e| e.success).count() as f64 / n,
        mean_perturbation_norm: examples.iter().map(|e| e.perturbation_norm).sum::<f64>() / n,
        examples: examples
            .iter()
            .zip(image_indices)
            .enumerate()
            .map(|(i, (e, &idx))| ExampleEntry {
                image_index: idx,
                seed: config.seed.wrapping_add(i as u64),
                true_label: e.true_label,
                predicted_label: e.predicted_label,
                perturbation_norm: e.perturbation_norm,
                success: e.success,
            })
            .collect(),
        original_sha256: sha256_hex(&original),
        perturbed_sha256: sha256_hex(&perturbed),
    };
    write_atomic(&dir.join("original.bin"), &original)?;
    write_atomic(&dir.join("perturbed.bin"), &perturbed)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

fn decode_block<T: Scalar>(bytes: &[u8], shape: &[usize], count: usize) -> Result<Vec<Tensor<T>>> {
    let per: usize = shape.iter().product();
    if bytes.len() != per * count * T::BYTES {
        return Err(Error::format(
            "attack results",
            format!("expected {} bytes, found {}", per * count * T::BYTES, bytes.len()),
        ));
    }
    bytes
        .chunks_exact(per * T::BYTES)
        .map(|chunk| {
            let data = chunk.chunks_exact(T::BYTES).map(T::read_le).collect();
            Tensor::new(shape.to_vec(), data)
        })
        .collect()
}

/// Reads a results directory back into examples, verifying checksums.
pub fn load_attack_results<T: Scalar>(
    dir: &Path,
) -> Result<(AttackManifest, Vec<AdversarialExample<T>>)> {
    let manifest: AttackManifest = serde_json::from_slice(&read(&dir.join("manifest.json"))?)?;
    if manifest.format != ATTACK_FORMAT || manifest.version != ATTACK_VERSION {
        return Err(Error::format("attack results", "unsupported manifest format"));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::format("attack results", format!("dtype {}", manifest.dtype)));
    }
    let original = read(&dir.join("original.bin"))?;
    let perturbed = read(&dir.join("perturbed.bin"))?;
    if sha256_hex(&original) != manifest.original_sha256
        || sha256_hex(&perturbed) != manifest.perturbed_sha256
    {
        return Err(Error::format("attack results", "checksum mismatch"));
    }
    let n = manifest.examples.len();
    let originals = decode_block::<T>(&original, &manifest.image_shape, n)?;
    let perturbeds = decode_block::<T>(&perturbed, &manifest.image_shape, n)?;
    let examples = manifest
        .examples
        .iter()
        .zip(originals.into_iter().zip(perturbeds))
        .map(|(e, (o, p))| AdversarialExample {
            original: o,
            perturbed: p,
            true_label: e.true_label,
            predicted_label: e.predicted_label,
            perturbation_norm: e.perturbation_norm,
            attack: manifest.config.kind,
            success: e.success,
        })
        .collect();
    Ok((manifest, examples))
}
