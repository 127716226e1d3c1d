//! Truncation policies evaluated against per-query metric vectors:
//! Fixed-k, Greedy-k, Oracle, and the trained model.

use std::fmt::Write as _;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{oracle_cutoff, MetricKind};
use crate::model::{predict_cutoff, ModelConfig, ModelParams};

/// Published mean F1 of the BiLSTM cutoff baseline on Robust04, kept only
/// to annotate reports.
pub const BICUT_F1_BM25: f64 = 0.244;
pub const BICUT_F1_DRMM: f64 = 0.262;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub k: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub metric: MetricKind,
    /// The global cutoff for Fixed-k and Greedy-k.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chosen_k: Option<usize>,
    pub rows: Vec<QueryResult>,
    pub mean: f64,
}

impl EvalReport {
    fn from_rows(
        policy: String,
        metric: MetricKind,
        chosen_k: Option<usize>,
        rows: Vec<QueryResult>,
    ) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dataset("cannot evaluate an empty dataset".into()));
        }
        let mean = rows.iter().map(|r| r.value).sum::<f64>() / rows.len() as f64;
        Ok(Self {
            policy,
            metric,
            chosen_k,
            rows,
            mean,
        })
    }

    pub fn row(&self, query_id: &str) -> Option<&QueryResult> {
        self.rows.iter().find(|r| r.query_id == query_id)
    }

    /// A summary record followed by one record per query, as JSON lines.
    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            record: &'static str,
            policy: &'a str,
            metric: MetricKind,
            #[serde(skip_serializing_if = "Option::is_none")]
            chosen_k: Option<usize>,
            queries: usize,
            mean: f64,
        }
        #[derive(Serialize)]
        struct Row<'a> {
            record: &'static str,
            policy: &'a str,
            query_id: &'a str,
            k: usize,
            value: f64,
        }
        let summary = Summary {
            record: "summary",
            policy: &self.policy,
            metric: self.metric,
            chosen_k: self.chosen_k,
            queries: self.rows.len(),
            mean: self.mean,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&summary).expect("serializable")
        )?;
        for r in &self.rows {
            let row = Row {
                record: "query",
                policy: &self.policy,
                query_id: &r.query_id,
                k: r.k,
                value: r.value,
            };
            writeln!(w, "{}", serde_json::to_string(&row).expect("serializable"))?;
        }
        Ok(())
    }
}

/// Fixed-width table with one row per report.
pub fn render_table(reports: &[EvalReport]) -> String {
    let mut out = String::new();
    let metric = reports.first().map_or("metric", |r| r.metric.name());
    let _ = writeln!(
        out,
        "{:<16} {:>6} {:>10} {:>8}",
        "policy", "k", metric, "queries"
    );
    let _ = writeln!(out, "{}", "-".repeat(43));
    for r in reports {
        let k = r
            .chosen_k
            .map_or_else(|| "-".to_string(), |k| k.to_string());
        let _ = writeln!(
            out,
            "{:<16} {:>6} {:>10.4} {:>8}",
            r.policy,
            k,
            r.mean,
            r.rows.len()
        );
    }
    out
}

/// Cuts every query at `k`, clamped to its list length.
pub fn fixed_k_eval(k: usize, dataset: &Dataset, metric: MetricKind) -> Result<EvalReport> {
    if k < 1 {
        return Err(Error::InvalidArgument("fixed k must be at least 1".into()));
    }
    let rows = dataset
        .examples
        .iter()
        .map(|e| {
            let c = e.metric(metric);
            QueryResult {
                query_id: e.query_id().to_string(),
                k: k.min(c.len()),
                value: c.at(k),
            }
        })
        .collect();
    EvalReport::from_rows(format!("Fixed-k ({k})"), metric, Some(k), rows)
}

/// Mean metric over the dataset for each global cutoff `1..=max_len`.
pub fn fixed_k_means(dataset: &Dataset, metric: MetricKind) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Dataset(
            "cannot choose a cutoff from an empty dataset".into(),
        ));
    }
    let max_len = dataset.max_len();
    let q = dataset.len() as f64;
    Ok((1..=max_len)
        .map(|k| {
            dataset
                .examples
                .iter()
                .map(|e| e.metric(metric).at(k))
                .sum::<f64>()
                / q
        })
        .collect())
}

/// The single cutoff maximizing the mean metric over `train`; smallest on ties.
pub fn greedy_k(train: &Dataset, metric: MetricKind) -> Result<usize> {
    let means = fixed_k_means(train, metric)?;
    Ok(crate::model::argmax_first(&means) + 1)
}

/// Chooses k on `train` and applies it to `test`.
pub fn greedy_eval(train: &Dataset, test: &Dataset, metric: MetricKind) -> Result<EvalReport> {
    let k = greedy_k(train, metric)?;
    let mut report = fixed_k_eval(k, test, metric)?;
    report.policy = "Greedy-k".into();
    Ok(report)
}

/// Per-query best cutoff using the true labels: an upper bound for any policy.
pub fn oracle_eval(dataset: &Dataset, metric: MetricKind) -> Result<EvalReport> {
    let rows = dataset
        .examples
        .iter()
        .map(|e| {
            let (k, value) = oracle_cutoff(e.metric(metric))?;
            Ok(QueryResult {
                query_id: e.query_id().to_string(),
                k,
                value,
            })
        })
        .collect::<Result<_>>()?;
    EvalReport::from_rows("Oracle".into(), metric, None, rows)
}

/// Cuts each query at the model's argmax position.
pub fn model_eval(
    dataset: &Dataset,
    config: &ModelConfig,
    params: &ModelParams,
    metric: MetricKind,
) -> Result<EvalReport> {
    let rows = dataset
        .examples
        .par_iter()
        .map(|e| {
            let k = predict_cutoff(&e.list.scores, config, params)?;
            Ok(QueryResult {
                query_id: e.query_id().to_string(),
                k,
                value: e.metric(metric).at(k),
            })
        })
        .collect::<Result<_>>()?;
    EvalReport::from_rows("Choppy".into(), metric, None, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Example, RankedList};
    use crate::metrics::LabelVector;

    fn dataset(label_sets: &[&[i8]]) -> Dataset {
        let examples = label_sets
            .iter()
            .enumerate()
            .map(|(i, y)| {
                let n = y.len();
                let list = RankedList::new(
                    format!("q{i}"),
                    (0..n).map(|j| format!("d{j}")).collect(),
                    (0..n).map(|j| (n - j) as f64).collect(),
                    LabelVector::new(y.to_vec()).unwrap(),
                )
                .unwrap();
                Example::new(list, None).unwrap()
            })
            .collect();
        Dataset::new(examples).unwrap()
    }

    #[test]
    fn fixed_k_indexes_and_clamps() {
        let ds = dataset(&[&[1, -1, 1], &[1, 1], &[-1, 1, 1, 1]]);
        let r = fixed_k_eval(1, &ds, MetricKind::Precision).unwrap();
        assert_eq!(r.mean, (1.0 + 1.0 + 0.0) / 3.0);
        let r = fixed_k_eval(10, &ds, MetricKind::Precision).unwrap();
        assert_eq!(r.rows[1].k, 2);
        assert_eq!(r.rows[1].value, 1.0);
        assert_eq!(r.policy, "Fixed-k (10)");
        assert!(fixed_k_eval(0, &ds, MetricKind::F1).is_err());
        assert!(fixed_k_eval(1, &Dataset::default(), MetricKind::F1).is_err());
    }

    #[test]
    fn greedy_picks_best_mean() {
        // F1 vectors [2/3, 0.5] and [0, 2/3]: means 1/3 and 7/12.
        let ds = dataset(&[&[1, -1], &[-1, 1]]);
        assert_eq!(greedy_k(&ds, MetricKind::F1).unwrap(), 2);
        // Every query's F1 peaks at position 2; precision means are 2/3 and 5/6.
        let ds = dataset(&[&[1, 1, -1], &[-1, 1, -1, -1], &[1, 1, -1, -1, -1]]);
        assert_eq!(greedy_k(&ds, MetricKind::Precision).unwrap(), 2);
        assert_eq!(greedy_k(&ds, MetricKind::F1).unwrap(), 2);
        let report = greedy_eval(&ds, &ds, MetricKind::F1).unwrap();
        assert_eq!(report.chosen_k, Some(2));
        assert_eq!(report.policy, "Greedy-k");
    }

    #[test]
    fn oracle_dominates_fixed_k() {
        let ds = dataset(&[&[1, -1, 1, -1, -1], &[-1, -1, 1], &[1, 1, 1, -1]]);
        for metric in MetricKind::ALL {
            let oracle = oracle_eval(&ds, metric).unwrap();
            for k in 1..=6 {
                assert!(oracle.mean >= fixed_k_eval(k, &ds, metric).unwrap().mean);
            }
        }
        let o = oracle_eval(&ds, MetricKind::F1).unwrap();
        assert_eq!(o.rows[2].k, 3);
        assert_eq!(o.rows[2].value, 1.0);
    }

    #[test]
    fn records_and_table() {
        let ds = dataset(&[&[1, -1], &[-1, 1]]);
        let r = greedy_eval(&ds, &ds, MetricKind::F1).unwrap();
        let mut buf = Vec::new();
        r.write_records(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        let summary: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(summary["chosen_k"], 2);
        assert_eq!(summary["mean"].as_f64().unwrap(), r.mean);
        let table = render_table(&[oracle_eval(&ds, MetricKind::F1).unwrap(), r]);
        assert!(table.contains("Oracle"));
        assert!(table.contains("Greedy-k"));
    }
}
