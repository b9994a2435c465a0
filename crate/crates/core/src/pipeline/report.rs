//! Result tables: per-attack summaries (adversarial accuracy and mean
//! perturbation norm) and detector rows for single and combined attacks,
//! as CSV and Markdown.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::AdversarialExample;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::scalar::Scalar;

/// One detector evaluated on one attack set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    /// Attack set name, e.g. `CW` or `CW+BIM`.
    pub attack: String,
    pub detector: String,
    pub accuracy: f64,
    pub f1: f64,
    /// Over the adversarial images in the detector test set.
    pub attack_success_rate: f64,
    pub mean_perturbation_norm: f64,
}

impl ReportRow {
    pub fn is_combined(&self) -> bool {
        self.attack.contains('+')
    }
}

/// Effect of one attack on the victim model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub model: String,
    pub attack: String,
    pub epsilon: Option<f64>,
    pub images: usize,
    /// Fraction of perturbed images still classified correctly.
    pub accuracy: f64,
    pub success_rate: f64,
    /// Success rate over the images the model classified correctly before
    /// the attack.
    pub success_rate_on_correct: f64,
    pub mean_perturbation_norm: f64,
}

/// Post-attack accuracy and mean L2 norm over `examples`. `clean_correct`
/// flags, per example, whether the unperturbed image was classified
/// correctly.
pub fn attack_summary<T: Scalar>(
    model: &str,
    examples: &[AdversarialExample<T>],
    clean_correct: &[bool],
    epsilon: Option<f64>,
) -> Result<AttackSummary> {
    if examples.is_empty() {
        return Err(Error::invalid("no adversarial examples to summarize"));
    }
    if clean_correct.len() != examples.len() {
        return Err(Error::invalid("one correctness flag per example required"));
    }
    let n = examples.len() as f64;
    let fooled = examples.iter().filter(|e| e.success).count();
    let correct_total = clean_correct.iter().filter(|&&c| c).count();
    let fooled_correct = examples
        .iter()
        .zip(clean_correct)
        .filter(|(e, &c)| c && e.success)
        .count();
    Ok(AttackSummary {
        model: model.to_string(),
        attack: examples[0].attack.display_name().to_string(),
        epsilon,
        images: examples.len(),
        accuracy: (examples.len() - fooled) as f64 / n,
        success_rate: fooled as f64 / n,
        success_rate_on_correct: if correct_total == 0 {
            0.0
        } else {
            fooled_correct as f64 / correct_total as f64
        },
        mean_perturbation_norm: examples.iter().map(|e| e.perturbation_norm).sum::<f64>() / n,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Md,
    #[default]
    Both,
}

impl ReportFormat {
    pub fn csv(self) -> bool {
        self != ReportFormat::Md
    }

    pub fn md(self) -> bool {
        self != ReportFormat::Csv
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "md" => Ok(ReportFormat::Md),
            "both" => Ok(ReportFormat::Both),
            other => Err(Error::invalid(format!("unknown format '{other}' (expected csv|md|both)"))),
        }
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::io("<csv>", e.into_error()))
}

pub fn read_report_csv(bytes: &[u8]) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

fn detector_table(out: &mut String, title: &str, rows: &[&ReportRow]) {
    let _ = writeln!(out, "## {title}\n");
    let _ = writeln!(
        out,
        "| Attack | Model | Detector | Accuracy | F1 | Attack success | Mean L2 norm |"
    );
    let _ = writeln!(out, "|---|---|---|---:|---:|---:|---:|");
    for r in rows {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {:.4} | {} | {:.4} |",
            r.attack,
            r.model,
            r.detector,
            pct(r.accuracy),
            r.f1,
            pct(r.attack_success_rate),
            r.mean_perturbation_norm
        );
    }
    out.push('\n');
}

/// Markdown with up to three tables: attack summaries, single attacks and
/// combined attacks. Empty sections are left out.
pub fn report_markdown(
    title: &str,
    notes: &[String],
    summaries: &[AttackSummary],
    rows: &[ReportRow],
) -> String {
    let mut out = format!("# {title}\n\n");
    for n in notes {
        out.push_str(n);
        out.push('\n');
    }
    if !notes.is_empty() {
        out.push('\n');
    }
    if !summaries.is_empty() {
        out.push_str("## Attacks\n\n");
        out.push_str(
            "| Attack | Model | Accuracy on adversarial | Success (originally correct) | Mean L2 norm | Epsilon |\n",
        );
        out.push_str("|---|---|---:|---:|---:|---:|\n");
        for s in summaries {
            let eps = s.epsilon.map_or("-".to_string(), |e| format!("{e:.6}"));
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} | {:.4} | {} |",
                s.attack,
                s.model,
                pct(s.accuracy),
                pct(s.success_rate_on_correct),
                s.mean_perturbation_norm,
                eps
            );
        }
        out.push('\n');
    }
    let single: Vec<&ReportRow> = rows.iter().filter(|r| !r.is_combined()).collect();
    let combined: Vec<&ReportRow> = rows.iter().filter(|r| r.is_combined()).collect();
    if !single.is_empty() {
        detector_table(&mut out, "Detection of single attacks", &single);
    }
    if !combined.is_empty() {
        detector_table(&mut out, "Detection of combined attacks", &combined);
    }
    out
}

/// Writes `report.csv` and/or `report.md` into `dir`; returns the paths.
pub fn emit_report(
    dir: &Path,
    title: &str,
    notes: &[String],
    summaries: &[AttackSummary],
    rows: &[ReportRow],
    format: ReportFormat,
) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::invalid("no report rows to write"));
    }
    let mut written = Vec::new();
    if format.csv() {
        let path = dir.join("report.csv");
        write_atomic(&path, &report_csv(rows)?)?;
        written.push(path);
    }
    if format.md() {
        let path = dir.join("report.md");
        write_atomic(&path, report_markdown(title, notes, summaries, rows).as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackKind;
    use crate::netcore::Tensor;

    fn row(attack: &str, det: &str, acc: f64) -> ReportRow {
        ReportRow {
            model: "desk-cnn".into(),
            attack: attack.into(),
            detector: det.into(),
            accuracy: acc,
            f1: 0.1 + acc / 3.0,
            attack_success_rate: 0.5,
            mean_perturbation_norm: 0.123456789,
        }
    }

    fn example(norm: f32, success: bool) -> AdversarialExample<f32> {
        let x = Tensor::new(vec![1, 1, 1], vec![0.0f32]).unwrap();
        AdversarialExample {
            original: x.clone(),
            perturbed: Tensor::new(vec![1, 1, 1], vec![norm]).unwrap(),
            true_label: 0,
            predicted_label: success as usize,
            perturbation_norm: norm as f64,
            attack: AttackKind::Cw,
            success,
        }
    }

    #[test]
    fn csv_roundtrip_is_field_exact() {
        let rows = vec![row("CW", "svm", 0.9), row("CW+BIM", "stump", 2.0 / 3.0)];
        let bytes = report_csv(&rows).unwrap();
        let text = String::from_utf8(bytes.clone()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(
            "model,attack,detector,accuracy,f1,attack_success_rate,mean_perturbation_norm\n"
        ));
        assert_eq!(read_report_csv(&bytes).unwrap(), rows);
    }

    #[test]
    fn markdown_splits_single_and_combined() {
        let rows = vec![row("FGSM", "svm", 0.9), row("CW+BIM", "svm", 0.8)];
        let md = report_markdown("t", &[], &[], &rows);
        let single = md.find("single attacks").unwrap();
        let combined = md.find("combined attacks").unwrap();
        assert!(md.find("| FGSM |").unwrap() > single && md.find("| FGSM |").unwrap() < combined);
        assert!(md.find("| CW+BIM |").unwrap() > combined);
        assert!(md.contains("| Attack | Model | Detector | Accuracy | F1 | Attack success | Mean L2 norm |"));
        assert!(md.contains("| 90.00% |"));
    }

    #[test]
    fn summary_arithmetic() {
        let ex = [example(0.1, true), example(0.3, false)];
        let s = attack_summary("m", &ex, &[true, true], None).unwrap();
        assert!((s.mean_perturbation_norm - 0.2).abs() < 1e-7);
        assert_eq!((s.accuracy, s.success_rate), (0.5, 0.5));
        assert!(attack_summary::<f32>("m", &[], &[], None).is_err());
    }

    #[test]
    fn failed_attacks_keep_clean_accuracy() {
        let ex = [example(0.0, false), example(0.0, false), example(0.0, true)];
        let s = attack_summary("m", &ex, &[true, true, false], None).unwrap();
        assert!((s.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.mean_perturbation_norm, 0.0);
        assert_eq!(s.success_rate_on_correct, 0.0);
    }

    #[test]
    fn empty_rows_and_bad_dir_fail() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path(), "t", &[], &[], &[], ReportFormat::Both).is_err());
        let file = dir.path().join("f");
        std::fs::write(&file, b"x").unwrap();
        let r = emit_report(&file.join("sub"), "t", &[], &[], &[row("CW", "svm", 1.0)], ReportFormat::Csv);
        assert!(r.is_err());
    }
}
