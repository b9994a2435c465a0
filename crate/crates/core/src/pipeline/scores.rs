//! Score datasets: clean and adversarial class-score vectors at 1:1
//! (one attack) or 2:1:1 (two attacks on disjoint image halves).

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AdversarialExample, AttackConfig};
use crate::detect::{Provenance, ScoreRecord};
use crate::error::{Error, Result};
use crate::netcore::{softmax, Classifier, LabeledImage};
use crate::scalar::Scalar;

/// Which model output the detectors see.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSpace {
    #[default]
    Logits,
    Softmax,
}

impl ScoreSpace {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreSpace::Logits => "logits",
            ScoreSpace::Softmax => "softmax",
        }
    }
}

impl fmt::Display for ScoreSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logits" => Ok(ScoreSpace::Logits),
            "softmax" => Ok(ScoreSpace::Softmax),
            other => Err(Error::invalid(format!(
                "unknown score space '{other}' (expected logits|softmax)"
            ))),
        }
    }
}

pub fn score_vector<T: Scalar>(model: &Classifier<T>, x: &[T], space: ScoreSpace) -> Vec<f64> {
    let logits = model.scores(x);
    match space {
        ScoreSpace::Logits => logits.iter().map(|v| v.widen()).collect(),
        ScoreSpace::Softmax => softmax(&logits),
    }
}

/// Builds records from precomputed attack results.
///
/// `adversarial` holds one result list per attack, index-aligned with
/// `clean`. With one attack every image contributes a clean and an
/// adversarial record. With two, attack A covers the first half of the
/// images and attack B the second; an odd trailing image is dropped.
/// Records are shuffled with `seed`.
pub fn assemble_score_dataset<T: Scalar>(
    model: &Classifier<T>,
    clean: &[LabeledImage<T>],
    adversarial: &[&[AdversarialExample<T>]],
    space: ScoreSpace,
    seed: u64,
) -> Result<Vec<ScoreRecord<f64>>> {
    if clean.is_empty() {
        return Err(Error::invalid("no clean images for the score dataset"));
    }
    if adversarial.is_empty() || adversarial.len() > 2 {
        return Err(Error::invalid("a score dataset takes one or two attacks"));
    }
    if adversarial.iter().any(|a| a.len() != clean.len()) {
        return Err(Error::invalid("attack results must align with the clean images"));
    }
    let n = if adversarial.len() == 2 && clean.len() % 2 == 1 {
        log::warn!("odd image count {} in combined mode; dropping the last image", clean.len());
        clean.len() - 1
    } else {
        clean.len()
    };
    if n == 0 {
        return Err(Error::invalid("combined mode needs at least two images"));
    }
    let record = |x: &[T], p: Provenance| ScoreRecord::new(score_vector(model, x, space), p);
    let mut records = Vec::with_capacity(2 * n);
    for img in &clean[..n] {
        records.push(record(img.pixels.data(), Provenance::Original)?);
    }
    for i in 0..n {
        let source = if adversarial.len() == 1 || i < n / 2 {
            adversarial[0]
        } else {
            adversarial[1]
        };
        let ex = &source[i];
        records.push(record(ex.perturbed.data(), ex.attack.into())?);
    }
    records.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(records)
}

/// Runs the attacks over `clean` and assembles the score dataset.
pub fn build_score_dataset<T: Scalar>(
    model: &Classifier<T>,
    clean: &[LabeledImage<T>],
    attacks: &[AttackConfig],
    space: ScoreSpace,
    seed: u64,
    jobs: usize,
) -> Result<Vec<ScoreRecord<f64>>> {
    let results = attacks
        .iter()
        .map(|cfg| attack_batch(model, clean, cfg, jobs))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&[AdversarialExample<T>]> = results.iter().map(|r| r.as_slice()).collect();
    assemble_score_dataset(model, clean, &refs, space, seed)
}
