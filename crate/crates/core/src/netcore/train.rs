use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::dataset::LabeledImage;
use super::Classifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 0.02,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Accuracy on the training set with the final parameters.
    pub train_accuracy: f64,
}

/// Mini-batch SGD with momentum on the mean cross-entropy.
///
/// Deterministic for a fixed `config.seed`: the only randomness is the
/// per-epoch shuffle.
pub fn train<T: Scalar>(
    model: &Classifier<T>,
    data: &[LabeledImage<T>],
    config: &TrainConfig,
) -> Result<(Classifier<T>, TrainReport)> {
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let k = model.num_classes();
    let n_in = model.input_len();
    for (i, item) in data.iter().enumerate() {
        if item.label >= k {
            return Err(Error::invalid(format!(
                "sample {i} has label {} but K = {k}",
                item.label
            )));
        }
        if item.pixels.len() != n_in {
            return Err(Error::invalid(format!(
                "sample {i} has {} pixels, model expects {n_in}",
                item.pixels.len()
            )));
        }
    }

    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut velocity: Vec<Vec<f64>> = model
        .layers()
        .iter()
        .map(|l| vec![0.0; l.params.len()])
        .collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grads: Vec<Vec<T>> = model
                .layers()
                .iter()
                .map(|l| vec![T::zero(); l.params.len()])
                .collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, _) =
                    model.accumulate_param_gradients(data[i].pixels.data(), data[i].label, &mut grads);
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            let scale = 1.0 / batch.len() as f64;
            for ((layer, g), v) in model.layers_mut().iter_mut().zip(&grads).zip(&mut velocity) {
                for ((p, gi), vi) in layer.params.iter_mut().zip(g).zip(v.iter_mut()) {
                    *vi = config.momentum * *vi + gi.widen() * scale;
                    *p = T::narrow(p.widen() - config.learning_rate * *vi);
                }
            }
            if model
                .layers()
                .iter()
                .any(|l| l.params.iter().any(|p| !p.is_finite()))
            {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    loss: f64::NAN,
                });
            }
        }
        let mean = epoch_loss / data.len() as f64;
        log::debug!("epoch {epoch}: mean loss {mean:.5}");
        epoch_losses.push(mean);
    }

    let train_accuracy = accuracy(&model, data);
    log::info!("training finished: accuracy {:.4}", train_accuracy);
    Ok((
        model,
        TrainReport {
            epoch_losses,
            train_accuracy,
        },
    ))
}

/// Fraction of `data` whose argmax prediction equals the label.
pub fn accuracy<T: Scalar>(model: &Classifier<T>, data: &[LabeledImage<T>]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = data
        .iter()
        .filter(|d| model.predict(d.pixels.data()) == d.label)
        .count();
    correct as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::layers::LayerSpec;
    use crate::netcore::Tensor;
    use rand::Rng;

    fn blobs(n: usize, seed: u64) -> Vec<LabeledImage<f32>> {
        // Class 0 is bright on the left half, class 1 on the right half.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % 2;
                let px: Vec<f32> = (0..64)
                    .map(|p| {
                        let left = p % 8 < 4;
                        let base = if left == (label == 0) { 0.7 } else { 0.2 };
                        (base + rng.gen_range(-0.15..0.15f32)).clamp(0.0, 1.0)
                    })
                    .collect();
                LabeledImage::new(Tensor::new(vec![1, 8, 8], px).unwrap(), label).unwrap()
            })
            .collect()
    }

    fn linear_model(seed: u64) -> Classifier<f32> {
        Classifier::init(
            [1, 8, 8],
            &[LayerSpec::Flatten, LayerSpec::Dense { inputs: 64, outputs: 2 }],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let data = blobs(200, 1);
        let cfg = TrainConfig {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 16,
            momentum: 0.9,
            seed: 4,
        };
        let (_, report) = train(&linear_model(2), &data, &cfg).unwrap();
        assert!(report.train_accuracy >= 0.99, "{}", report.train_accuracy);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = blobs(20, 1);
        let model = linear_model(5);
        let cfg = TrainConfig {
            epochs: 2,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let (trained, _) = train(&model, &data, &cfg).unwrap();
        assert_eq!(trained, model);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let data = blobs(64, 3);
        let model = Classifier::<f32>::desk_cnn(1, 8, 2, 9).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, _) = train(&model, &data, &cfg).unwrap();
        let (b, _) = train(&model, &data, &cfg).unwrap();
        for (la, lb) in a.layers().iter().zip(b.layers()) {
            let bits_a: Vec<u32> = la.params.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = lb.params.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn huge_learning_rate_is_reported_as_divergence() {
        let data = blobs(64, 3);
        let cfg = TrainConfig {
            epochs: 50,
            learning_rate: 1e300,
            ..TrainConfig::default()
        };
        let err = train(&linear_model(1), &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
    }

    #[test]
    fn rejects_empty_and_bad_labels() {
        let model = linear_model(1);
        assert!(train(&model, &[], &TrainConfig::default()).is_err());
        let bad = vec![LabeledImage::new(Tensor::zeros(vec![1, 8, 8]), 5).unwrap()];
        assert!(train(&model, &bad, &TrainConfig::default()).is_err());
    }
}
