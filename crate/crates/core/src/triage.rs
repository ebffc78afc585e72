//! Uncertainty-threshold referral: predictions at or below a threshold are
//! retained, the rest are referred for review.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{confusion, metrics};
use crate::uncertainty::{SquareMatrix, UncertaintyRecord};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Aleatoric,
    Epistemic,
}

impl Field {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aleatoric" => Ok(Self::Aleatoric),
            "epistemic" => Ok(Self::Epistemic),
            other => Err(Error::Input(format!(
                "unknown uncertainty field `{other}` (expected aleatoric or epistemic)"
            ))),
        }
    }

    pub fn of(self, r: &UncertaintyRecord) -> f64 {
        match self {
            Self::Aleatoric => r.scalar_aleatoric,
            Self::Epistemic => r.scalar_epistemic,
        }
    }
}

/// `(low, high)` with `low` holding every record whose scalar is `<= threshold`.
pub fn threshold_split(
    records: &[UncertaintyRecord],
    threshold: f64,
    field: Field,
) -> Result<(Vec<UncertaintyRecord>, Vec<UncertaintyRecord>)> {
    if !threshold.is_finite() {
        return Err(Error::Input(format!("threshold {threshold} is not finite")));
    }
    Ok(records.iter().cloned().partition(|r| field.of(r) <= threshold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TriageRow {
    pub threshold: f64,
    pub retained_fraction: f64,
    /// `None` when nothing is retained.
    pub retained_accuracy: Option<f64>,
    /// False negatives among retained records.
    pub fn_count: u64,
    /// False positives among retained records.
    pub fp_count: u64,
    pub referred_fraction: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriageCurve {
    pub field: Field,
    pub rows: Vec<TriageRow>,
}

impl TriageCurve {
    /// `threshold,retained_frac,retained_acc,fn,fp,referred_frac`; an undefined
    /// accuracy is written as `NA`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,retained_frac,retained_acc,fn,fp,referred_frac\n");
        for r in &self.rows {
            let acc = r
                .retained_accuracy
                .map_or_else(|| "NA".to_string(), |a| format!("{a:.16e}"));
            let _ = writeln!(
                s,
                "{:.16e},{:.16e},{},{},{},{:.16e}",
                r.threshold, r.retained_fraction, acc, r.fn_count, r.fp_count, r.referred_fraction
            );
        }
        s
    }
}

pub fn sweep(records: &[UncertaintyRecord], thresholds: &[f64], field: Field) -> Result<TriageCurve> {
    if records.is_empty() {
        return Err(Error::Input("triage sweep over an empty record list".into()));
    }
    if thresholds.is_empty() {
        return Err(Error::Input("triage sweep needs at least one threshold".into()));
    }
    if thresholds.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Input("thresholds must be strictly ascending".into()));
    }
    let total = records.len();
    let mut rows = Vec::with_capacity(thresholds.len());
    for &threshold in thresholds {
        let (low, _) = threshold_split(records, threshold, field)?;
        let preds: Vec<usize> = low.iter().map(|r| r.predicted).collect();
        let labels: Vec<usize> = low.iter().map(|r| r.label).collect();
        let cm = confusion(&preds, &labels)?;
        rows.push(TriageRow {
            threshold,
            retained_fraction: low.len() as f64 / total as f64,
            retained_accuracy: metrics(&cm).accuracy,
            fn_count: cm.fn_,
            fp_count: cm.fp,
            referred_fraction: (total - low.len()) as f64 / total as f64,
        });
    }
    Ok(TriageCurve {
        field,
        rows,
    })
}

/// `n` evenly spaced thresholds from 0 to the largest observed scalar, both
/// ends included. Collapses to `[0]` when every scalar is 0.
pub fn default_grid(records: &[UncertaintyRecord], field: Field, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::Input("grid size must be >= 1".into()));
    }
    let max = records.iter().map(|r| field.of(r)).fold(0.0, f64::max);
    if !max.is_finite() {
        return Err(Error::Numeric(format!("non-finite {field:?} scalar in records")));
    }
    if max == 0.0 || n == 1 {
        return Ok(vec![max]);
    }
    Ok((0..n)
        .map(|i| if i == n - 1 { max } else { max * i as f64 / (n - 1) as f64 })
        .collect())
}

pub const LOW_BAND_MAX: f64 = 0.01;
pub const MEDIUM_BAND_MAX: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Low,
    Medium,
    High,
}

impl Band {
    /// Band of a normalized epistemic value in `[0, 1]`.
    pub fn of(e: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&e) {
            return Err(Error::Contract(format!("normalized epistemic {e} outside [0, 1]")));
        }
        Ok(if e <= LOW_BAND_MAX {
            Self::Low
        } else if e <= MEDIUM_BAND_MAX {
            Self::Medium
        } else {
            Self::High
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BandPartition {
    pub low: Vec<UncertaintyRecord>,
    pub medium: Vec<UncertaintyRecord>,
    pub high: Vec<UncertaintyRecord>,
}

pub fn band_partition(records: &[UncertaintyRecord]) -> Result<BandPartition> {
    let mut out = BandPartition::default();
    for r in records {
        let bucket = match Band::of(r.normalized_epistemic)? {
            Band::Low => &mut out.low,
            Band::Medium => &mut out.medium,
            Band::High => &mut out.high,
        };
        bucket.push(r.clone());
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct RecordRow {
    id: String,
    pred: usize,
    label: usize,
    aleatoric: f64,
    epistemic: f64,
    #[serde(rename = "E")]
    e: f64,
}

/// Writes `id,pred,label,aleatoric,epistemic,E` with scalars to 17 significant digits.
pub fn records_to_csv(records: &[UncertaintyRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "pred", "label", "aleatoric", "epistemic", "E"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.id.clone(),
            r.predicted.to_string(),
            r.label.to_string(),
            format!("{:.16e}", r.scalar_aleatoric),
            format!("{:.16e}", r.scalar_epistemic),
            format!("{:.16e}", r.normalized_epistemic),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("records CSV: {e}"))
}

/// Binary 2×2 covariance with the given trace: `t/2 · [[1, -1], [-1, 1]]`.
fn binary_matrix(trace: f64) -> SquareMatrix {
    let h = trace / 2.0;
    SquareMatrix::from_rows(2, vec![h, -h, -h, h])
}

/// Parses records written by [`records_to_csv`]. The 2×2 matrices are rebuilt
/// from their traces, which determine them for two classes.
pub fn records_from_csv(text: &str) -> Result<Vec<UncertaintyRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for row in r.deserialize::<RecordRow>() {
        let row = row.map_err(csv_err)?;
        if row.pred > 1 || row.label > 1 {
            return Err(Error::Input(format!("record `{}` has a non-binary class", row.id)));
        }
        out.push(UncertaintyRecord {
            id: row.id,
            predicted: row.pred,
            label: row.label,
            aleatoric: binary_matrix(row.aleatoric),
            epistemic: binary_matrix(row.epistemic),
            scalar_aleatoric: row.aleatoric,
            scalar_epistemic: row.epistemic,
            normalized_epistemic: row.e,
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<UncertaintyRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    records_from_csv(&text)
}
