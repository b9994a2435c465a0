//! Minimal neural-network engine: layers with exact forward passes,
//! parameter gradients for training the victim model and input gradients
//! for white-box attacks.

pub mod dataset;
pub mod layers;
pub mod loss;
pub mod model;
pub mod serialize;
pub mod tensor;
pub mod train;

pub use dataset::{load_digits, load_optdigits_file, read_optdigits, DatasetSplit, LabeledImage, SplitSizes};
pub use layers::{Layer, LayerSpec};
pub use loss::{argmax, cross_entropy_loss, softmax};
pub use model::Classifier;
pub use serialize::{decode_model, encode_model, load_model, save_model};
pub use tensor::Tensor;
pub use train::{accuracy, train, TrainConfig, TrainReport};

use crate::error::Result;
use crate::scalar::Scalar;

/// Unnormalized class scores for a `(B, C, H, W)` batch.
pub fn forward<T: Scalar>(model: &Classifier<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    model.forward(batch)
}

/// Gradient of the cross-entropy loss with respect to the input image(s).
pub fn input_gradient<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>> {
    model.input_gradient(x, labels)
}

/// Argmax class of a single image, ties resolved to the lowest index.
pub fn predict<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>) -> usize {
    model.predict(x.data())
}
