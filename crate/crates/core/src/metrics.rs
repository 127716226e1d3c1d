//! Per-position metric vectors `C_1..C_m` computed from ±1 relevance labels.
//!
//! `C_k` is the metric value obtained if the list is cut after position `k`.
//! Cutting at 0 (returning nothing) is not a candidate.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth labels, `+1` relevant and `-1` non-relevant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<i8>", into = "Vec<i8>")]
pub struct LabelVector(Vec<i8>);

impl LabelVector {
    pub fn new(labels: Vec<i8>) -> Result<Self> {
        if let Some(i) = labels.iter().position(|&y| y != 1 && y != -1) {
            return Err(Error::InvalidArgument(format!(
                "label at position {} is {}, expected +1 or -1",
                i + 1,
                labels[i]
            )));
        }
        Ok(Self(labels))
    }

    pub fn from_relevance(relevant: &[bool]) -> Self {
        Self(relevant.iter().map(|&r| if r { 1 } else { -1 }).collect())
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn relevant_count(&self) -> usize {
        self.0.iter().filter(|&&y| y == 1).count()
    }
}

impl TryFrom<Vec<i8>> for LabelVector {
    type Error = Error;

    fn try_from(v: Vec<i8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelVector> for Vec<i8> {
    fn from(l: LabelVector) -> Self {
        l.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    F1,
    Precision,
    Dcg,
}

impl MetricKind {
    pub const ALL: [MetricKind; 3] = [MetricKind::F1, MetricKind::Precision, MetricKind::Dcg];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::F1 => "f1",
            MetricKind::Precision => "precision",
            MetricKind::Dcg => "dcg",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(MetricKind::F1),
            "precision" => Ok(MetricKind::Precision),
            "dcg" => Ok(MetricKind::Dcg),
            other => Err(Error::InvalidArgument(format!(
                "unknown metric '{other}' (expected f1, precision or dcg)"
            ))),
        }
    }
}

/// `values[k-1]` is the metric when cutting after position `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricVector {
    pub kind: MetricKind,
    pub values: Vec<f64>,
}

impl MetricVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// `C_k` for 1-based `k`, clamped to the last position.
    pub fn at(&self, k: usize) -> f64 {
        let idx = k.clamp(1, self.values.len()) - 1;
        self.values[idx]
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn non_empty(y: &LabelVector) -> Result<()> {
    if y.is_empty() {
        return Err(Error::InvalidArgument("empty label vector".into()));
    }
    Ok(())
}

/// Penalized DCG: `C_k = Σ_{i≤k} y_i / log2(i+1)`, so non-relevant
/// results subtract gain.
pub fn dcg_vector(y: &LabelVector) -> Result<MetricVector> {
    non_empty(y)?;
    let mut acc = 0.0;
    let values = y
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            acc += f64::from(label) / ((i + 2) as f64).log2();
            acc
        })
        .collect();
    Ok(MetricVector {
        kind: MetricKind::Dcg,
        values,
    })
}

/// F1 with recall measured against the relevant documents inside the list.
pub fn f1_vector(y: &LabelVector) -> Result<MetricVector> {
    non_empty(y)?;
    f1_with_relevant_total(y, y.relevant_count())
}

/// F1 with an externally supplied relevant total (e.g. from qrels).
/// `relevant_total` may not be smaller than the relevant count in `y`.
pub fn f1_vector_with_total(y: &LabelVector, relevant_total: usize) -> Result<MetricVector> {
    non_empty(y)?;
    let in_list = y.relevant_count();
    if relevant_total < in_list {
        return Err(Error::InvalidArgument(format!(
            "relevant total {relevant_total} is below the {in_list} relevant documents in the list"
        )));
    }
    f1_with_relevant_total(y, relevant_total)
}

fn f1_with_relevant_total(y: &LabelVector, total: usize) -> Result<MetricVector> {
    let mut hits = 0usize;
    let values = y
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            if label == 1 {
                hits += 1;
            }
            if hits == 0 || total == 0 {
                0.0
            } else {
                // 2PR/(P+R) with P = hits/k and R = hits/total
                2.0 * hits as f64 / ((i + 1) + total) as f64
            }
        })
        .collect();
    Ok(MetricVector {
        kind: MetricKind::F1,
        values,
    })
}

pub fn precision_vector(y: &LabelVector) -> Result<MetricVector> {
    non_empty(y)?;
    let mut hits = 0usize;
    let values = y
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            if label == 1 {
                hits += 1;
            }
            hits as f64 / (i + 1) as f64
        })
        .collect();
    Ok(MetricVector {
        kind: MetricKind::Precision,
        values,
    })
}

pub fn metric_vector(kind: MetricKind, y: &LabelVector) -> Result<MetricVector> {
    match kind {
        MetricKind::F1 => f1_vector(y),
        MetricKind::Precision => precision_vector(y),
        MetricKind::Dcg => dcg_vector(y),
    }
}

/// Best cut position (1-based, earliest on ties) and its metric value.
pub fn oracle_cutoff(c: &MetricVector) -> Result<(usize, f64)> {
    if c.is_empty() {
        return Err(Error::InvalidArgument("empty metric vector".into()));
    }
    let k = crate::model::argmax_first(&c.values);
    Ok((k + 1, c.values[k]))
}
