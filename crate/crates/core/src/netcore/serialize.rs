//! Model file format: one line of compact JSON header, a `\n`, then every
//! parameter as a little-endian float (width given by `dtype`) in layer
//! declaration order, weights before biases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{split_header, write_atomic};
use crate::scalar::Scalar;

use super::layers::{Layer, LayerSpec};
use super::Classifier;

pub const MODEL_FORMAT: &str = "advscore-model";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub seed: u64,
    pub param_count: usize,
    pub layers: Vec<LayerSpec>,
}

pub fn encode_model<T: Scalar>(model: &Classifier<T>) -> Result<Vec<u8>> {
    let header = ModelHeader {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        dtype: T::DTYPE.into(),
        input_shape: model.input_shape(),
        num_classes: model.num_classes(),
        seed: model.seed(),
        param_count: model.param_count(),
        layers: model.specs(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    out.reserve(model.param_count() * T::BYTES);
    for layer in model.layers() {
        for &p in &layer.params {
            p.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<Classifier<T>> {
    let (head, body) = split_header(bytes, "model file")?;
    let header: ModelHeader = serde_json::from_slice(head)?;
    if header.format != MODEL_FORMAT || header.version != MODEL_VERSION {
        return Err(Error::format(
            "model file",
            format!("unsupported format {} v{}", header.format, header.version),
        ));
    }
    if header.dtype != T::DTYPE {
        return Err(Error::format(
            "model file",
            format!("stored dtype {} but {} requested", header.dtype, T::DTYPE),
        ));
    }
    let expected: usize = header.layers.iter().map(|l| l.param_len()).sum();
    if expected != header.param_count || body.len() != expected * T::BYTES {
        return Err(Error::format(
            "model file",
            format!(
                "header declares {} parameters, layers need {expected}, payload holds {} bytes",
                header.param_count,
                body.len()
            ),
        ));
    }
    let mut chunks = body.chunks_exact(T::BYTES);
    let layers = header
        .layers
        .iter()
        .map(|&spec| {
            let params: Vec<T> = chunks.by_ref().take(spec.param_len()).map(T::read_le).collect();
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::format("model file", "non-finite parameter"));
            }
            Ok(Layer::new(spec, params))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = Classifier::new(header.input_shape, layers, header.seed)?;
    if model.num_classes() != header.num_classes {
        return Err(Error::format("model file", "num_classes disagrees with layers"));
    }
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &Classifier<T>, path: &Path) -> Result<Vec<u8>> {
    let bytes = encode_model(model)?;
    write_atomic(path, &bytes)?;
    Ok(bytes)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    decode_model(&crate::io::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_parameters_bitwise() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 42).unwrap();
        let bytes = encode_model(&model).unwrap();
        let back: Classifier<f32> = decode_model(&bytes).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.seed(), 42);
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap();
        assert_eq!(bytes.len() - header_end - 1, model.param_count() * 4);
    }

    #[test]
    fn rejects_dtype_mismatch_and_truncation() {
        let model = Classifier::<f32>::desk_cnn(1, 8, 10, 1).unwrap();
        let bytes = encode_model(&model).unwrap();
        assert!(decode_model::<f64>(&bytes).is_err());
        assert!(decode_model::<f32>(&bytes[..bytes.len() - 1]).is_err());
    }
}
