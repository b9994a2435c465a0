//! Labeled class-score vectors and their CSV form
//! (`score_0..score_{K-1},label,provenance`).

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Detector target: clean inputs are `+1`, adversarial ones `-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Adversarial,
    Clean,
}

impl Label {
    pub fn sign(self) -> f64 {
        match self {
            Label::Clean => 1.0,
            Label::Adversarial => -1.0,
        }
    }

    pub fn from_sign(v: f64) -> Label {
        if v >= 0.0 {
            Label::Clean
        } else {
            Label::Adversarial
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Label::Clean => "1",
            Label::Adversarial => "-1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Provenance {
    Original,
    Fgsm,
    Bim,
    Cw,
    Boundary,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Original => "ORIGINAL",
            Provenance::Fgsm => "FGSM",
            Provenance::Bim => "BIM",
            Provenance::Cw => "CW",
            Provenance::Boundary => "BOUNDARY",
        }
    }

    pub fn label(self) -> Label {
        match self {
            Provenance::Original => Label::Clean,
            _ => Label::Adversarial,
        }
    }
}

impl From<AttackKind> for Provenance {
    fn from(kind: AttackKind) -> Self {
        match kind {
            AttackKind::Fgsm => Provenance::Fgsm,
            AttackKind::Bim => Provenance::Bim,
            AttackKind::Cw => Provenance::Cw,
            AttackKind::Boundary => Provenance::Boundary,
        }
    }
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ORIGINAL" => Provenance::Original,
            "FGSM" => Provenance::Fgsm,
            "BIM" => Provenance::Bim,
            "CW" => Provenance::Cw,
            "BOUNDARY" => Provenance::Boundary,
            other => return Err(Error::format("score csv", format!("unknown provenance '{other}'"))),
        })
    }
}

/// One class-score vector with its detector label.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord<T> {
    pub scores: Vec<T>,
    pub label: Label,
    pub provenance: Provenance,
}

impl<T: Scalar> ScoreRecord<T> {
    /// The label is implied by the provenance.
    pub fn new(scores: Vec<T>, provenance: Provenance) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("score vector is empty"));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("score vector has non-finite entries"));
        }
        Ok(Self {
            scores,
            label: provenance.label(),
            provenance,
        })
    }

    pub fn dim(&self) -> usize {
        self.scores.len()
    }
}

/// Checks that every record has `dim` scores and returns `dim`.
pub(crate) fn common_dim<T: Scalar>(records: &[ScoreRecord<T>]) -> Result<usize> {
    let dim = records
        .first()
        .ok_or_else(|| Error::invalid("no score records"))?
        .dim();
    if let Some(r) = records.iter().find(|r| r.dim() != dim) {
        return Err(Error::invalid(format!(
            "score records have mixed dimensions ({dim} and {})",
            r.dim()
        )));
    }
    Ok(dim)
}

pub fn write_scores_csv<T: Scalar, W: Write>(records: &[ScoreRecord<T>], out: W) -> Result<()> {
    let dim = common_dim(records)?;
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..dim).map(|k| format!("score_{k}")).collect();
    header.push("label".into());
    header.push("provenance".into());
    w.write_record(&header)?;
    for r in records {
        let mut row: Vec<String> = r.scores.iter().map(|s| s.to_string()).collect();
        row.push(r.label.as_str().into());
        row.push(r.provenance.as_str().into());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

pub fn scores_csv_bytes<T: Scalar>(records: &[ScoreRecord<T>]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_scores_csv(records, &mut buf)?;
    Ok(buf)
}

/// Parses a score CSV, checking the header and the label/provenance
/// pairing of every row.
pub fn read_scores_csv<T: Scalar, R: Read>(input: R) -> Result<Vec<ScoreRecord<T>>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    let n = header.len();
    let dim = n.saturating_sub(2);
    let expected = (0..dim)
        .map(|k| format!("score_{k}"))
        .chain(["label".to_string(), "provenance".to_string()]);
    if dim == 0 || !header.iter().eq(expected) {
        return Err(Error::format("score csv", "unexpected header"));
    }
    let mut out = Vec::new();
    for (line, row) in rd.records().enumerate() {
        let row = row?;
        let bad = |what: &str| Error::format("score csv", format!("row {}: {what}", line + 1));
        let scores = (0..dim)
            .map(|k| T::parse_decimal(&row[k]).ok_or_else(|| bad("bad score")))
            .collect::<Result<Vec<T>>>()?;
        let label = match &row[dim] {
            "1" => Label::Clean,
            "-1" => Label::Adversarial,
            _ => return Err(bad("label must be 1 or -1")),
        };
        let provenance: Provenance = row[dim + 1].parse()?;
        if provenance.label() != label {
            return Err(bad("label does not match provenance"));
        }
        out.push(ScoreRecord::new(scores, provenance).map_err(|_| bad("non-finite score"))?);
    }
    Ok(out)
}
