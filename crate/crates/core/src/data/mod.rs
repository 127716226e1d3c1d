//! Ranked lists, datasets and their on-disk forms.

pub mod synth;
pub mod trec;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{
    dcg_vector, f1_vector, f1_vector_with_total, precision_vector, LabelVector, MetricKind,
    MetricVector,
};
pub use trec::{load_qrels, load_run, parse_qrels, parse_trec_run, Qrels, Run, RunEntry};

/// Paper protocol: only the top 300 candidates of each query are kept.
pub const DEFAULT_TOP_N: usize = 300;

/// One query's results in descending score order with aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    pub doc_ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: LabelVector,
}

impl RankedList {
    /// Validates alignment and re-sorts by descending score (stable).
    pub fn new(
        query_id: String,
        doc_ids: Vec<String>,
        scores: Vec<f64>,
        labels: LabelVector,
    ) -> Result<Self> {
        if doc_ids.len() != scores.len() || labels.len() != scores.len() {
            return Err(Error::Dataset(format!(
                "query {query_id}: {} doc ids, {} scores, {} labels",
                doc_ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::Dataset(format!("query {query_id} has no results")));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!(
                "query {query_id} score {}",
                i + 1
            )));
        }
        let mut list = Self {
            query_id,
            doc_ids,
            scores,
            labels,
        };
        if list.scores.windows(2).any(|w| w[1] > w[0]) {
            list.sort_descending();
        }
        Ok(list)
    }

    fn sort_descending(&mut self) {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let labels = self.labels.as_slice();
        let sorted_labels = order.iter().map(|&i| labels[i]).collect();
        self.doc_ids = order.iter().map(|&i| self.doc_ids[i].clone()).collect();
        self.scores = order.iter().map(|&i| self.scores[i]).collect();
        self.labels = LabelVector::new(sorted_labels).expect("labels were valid");
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// A ranked list with its precomputed metric vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub list: RankedList,
    /// Relevant total used as the F1 recall denominator when set; otherwise
    /// the in-list relevant count is used.
    pub relevant_total: Option<usize>,
    pub f1: MetricVector,
    pub precision: MetricVector,
    pub dcg: MetricVector,
}

impl Example {
    pub fn new(list: RankedList, relevant_total: Option<usize>) -> Result<Self> {
        let f1 = match relevant_total {
            Some(total) => f1_vector_with_total(&list.labels, total)?,
            None => f1_vector(&list.labels)?,
        };
        Ok(Self {
            precision: precision_vector(&list.labels)?,
            dcg: dcg_vector(&list.labels)?,
            f1,
            list,
            relevant_total,
        })
    }

    pub fn metric(&self, kind: MetricKind) -> &MetricVector {
        match kind {
            MetricKind::F1 => &self.f1,
            MetricKind::Precision => &self.precision,
            MetricKind::Dcg => &self.dcg,
        }
    }

    pub fn query_id(&self) -> &str {
        &self.list.query_id
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Option<Split>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.query_id()) {
                return Err(Error::Dataset(format!(
                    "duplicate query id {}",
                    e.query_id()
                )));
            }
        }
        Ok(Self {
            examples,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn query_ids(&self) -> Vec<&str> {
        self.examples.iter().map(Example::query_id).collect()
    }

    pub fn get(&self, query_id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.query_id() == query_id)
    }

    pub fn mean_relevant(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let total: usize = self
            .examples
            .iter()
            .map(|e| e.list.labels.relevant_count())
            .sum();
        total as f64 / self.len() as f64
    }

    pub fn max_len(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.list.len())
            .max()
            .unwrap_or(0)
    }

    /// Back to TREC run form; ranks are 1-based list positions.
    pub fn to_run(&self) -> Run {
        self.examples
            .iter()
            .map(|e| {
                let entries = e
                    .list
                    .doc_ids
                    .iter()
                    .zip(&e.list.scores)
                    .enumerate()
                    .map(|(i, (doc, &score))| RunEntry {
                        doc_id: doc.clone(),
                        rank: i as i64 + 1,
                        score,
                    })
                    .collect();
                (e.list.query_id.clone(), entries)
            })
            .collect()
    }

    /// Binary qrels (1 relevant, 0 non-relevant) covering every listed document.
    pub fn write_qrels<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.examples {
            for (doc, &y) in e.list.doc_ids.iter().zip(e.list.labels.as_slice()) {
                writeln!(w, "{} 0 {doc} {}", e.list.query_id, i32::from(y > 0))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BuildOptions {
    pub top_n: usize,
    /// Use the qrels relevant total as the F1 recall denominator.
    pub recall_from_qrels: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            top_n: DEFAULT_TOP_N,
            recall_from_qrels: false,
        }
    }
}

/// Joins a run with qrels: truncates to `top_n`, labels `level > 0` as
/// relevant and everything else (including unjudged) as non-relevant, and
/// attaches metric vectors.
pub fn build_dataset(run: &Run, qrels: &Qrels, options: BuildOptions) -> Result<Dataset> {
    if run.is_empty() {
        return Err(Error::Dataset("run contains no queries".into()));
    }
    if options.top_n == 0 {
        return Err(Error::InvalidArgument("top_n must be at least 1".into()));
    }
    for qid in qrels.query_ids() {
        if !run.contains_key(qid) {
            warn!("query {qid} has judgments but no retrieved documents; dropped");
        }
    }
    let queries: Vec<(&String, &Vec<RunEntry>)> = run
        .iter()
        .filter(|(qid, entries)| {
            if entries.is_empty() {
                warn!("query {qid} has no retrieved documents; dropped");
            }
            !entries.is_empty()
        })
        .collect();
    let examples = queries
        .into_par_iter()
        .map(|(qid, entries)| {
            let top = &entries[..entries.len().min(options.top_n)];
            let doc_ids = top.iter().map(|e| e.doc_id.clone()).collect();
            let scores = top.iter().map(|e| e.score).collect();
            let labels = LabelVector::new(
                top.iter()
                    .map(|e| match qrels.level(qid, &e.doc_id) {
                        Some(level) if level > 0 => 1,
                        _ => -1,
                    })
                    .collect(),
            )?;
            let list = RankedList::new(qid.clone(), doc_ids, scores, labels)?;
            let total = options.recall_from_qrels.then(|| qrels.relevant_total(qid));
            Example::new(list, total)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples)
}

/// Query-level random split; `fraction` of queries (rounded) go to train.
pub fn split_train_test(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let count = dataset.len();
    if count < 2 {
        return Err(Error::Dataset(format!(
            "need at least 2 queries to split, have {count}"
        )));
    }
    let n_train = ((fraction * count as f64).round() as usize).clamp(1, count - 1);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_train = vec![false; count];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, flag) in dataset.examples.iter().zip(in_train) {
        if flag {
            train.push(e.clone());
        } else {
            test.push(e.clone());
        }
    }
    Ok((
        Dataset {
            examples: train,
            split: Some(Split::Train),
        },
        Dataset {
            examples: test,
            split: Some(Split::Test),
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    qid: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    relevant_total: Option<usize>,
    doc_ids: Vec<String>,
    scores: Vec<f64>,
    labels: Vec<i8>,
}

/// One JSON record per query: qid, doc ids, scores, labels.
pub fn write_dataset<W: Write>(mut w: W, dataset: &Dataset) -> Result<()> {
    for e in &dataset.examples {
        let rec = CacheRecord {
            qid: e.list.query_id.clone(),
            split: dataset.split,
            relevant_total: e.relevant_total,
            doc_ids: e.list.doc_ids.clone(),
            scores: e.list.scores.clone(),
            labels: e.list.labels.as_slice().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R, source: &str) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut split = None;
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            source_name: source.to_string(),
            line: idx + 1,
            message,
        };
        let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        if examples.is_empty() {
            split = rec.split;
        } else if split != rec.split {
            split = None;
        }
        let labels = LabelVector::new(rec.labels).map_err(|e| parse(e.to_string()))?;
        let list = RankedList::new(rec.qid, rec.doc_ids, rec.scores, labels)
            .map_err(|e| parse(e.to_string()))?;
        examples.push(Example::new(list, rec.relevant_total).map_err(|e| parse(e.to_string()))?);
    }
    let mut ds = Dataset::new(examples)?;
    ds.split = split;
    Ok(ds)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    write_dataset(BufWriter::new(file), dataset).map_err(|e| match e {
        Error::Io(e) => Error::io_at(path, e),
        other => other,
    })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_dataset(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_run() -> Run {
        let mut text = String::new();
        for i in 0..1000 {
            text.push_str(&format!(
                "q1 Q0 d{i} {} {} bm25\n",
                i + 1,
                1000.0 - i as f64
            ));
        }
        text.push_str("q2 Q0 x 1 3.0 bm25\nq2 Q0 y 2 4.0 bm25\n");
        parse_trec_run(text.as_bytes(), "run").unwrap()
    }

    fn small_qrels() -> Qrels {
        parse_qrels(
            "q1 0 d0 1\nq1 0 d5 2\nq1 0 d7 0\nq1 0 d999 1\nq2 0 x 1\n".as_bytes(),
            "qrels",
        )
        .unwrap()
    }

    #[test]
    fn build_truncates_and_labels() {
        let ds = build_dataset(&small_run(), &small_qrels(), BuildOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        let q1 = ds.get("q1").unwrap();
        assert_eq!(q1.list.len(), 300);
        assert_eq!(q1.list.labels.relevant_count(), 2);
        assert_eq!(q1.list.labels.as_slice()[5], 1);
        assert_eq!(q1.list.labels.as_slice()[7], -1);
        assert_eq!(q1.list.labels.as_slice()[8], -1);
        assert_eq!(q1.f1.len(), 300);
        let q2 = ds.get("q2").unwrap();
        assert_eq!(q2.list.doc_ids, ["y", "x"]);
        assert_eq!(q2.list.labels.as_slice(), &[-1, 1]);
    }

    #[test]
    fn recall_from_qrels_uses_full_total() {
        let opts = BuildOptions {
            recall_from_qrels: true,
            ..Default::default()
        };
        let ds = build_dataset(&small_run(), &small_qrels(), opts).unwrap();
        let q1 = ds.get("q1").unwrap();
        assert_eq!(q1.relevant_total, Some(3));
        // two relevant retrieved in the top 300 out of three judged relevant
        assert!((q1.f1.at(300) - 2.0 * 2.0 / 303.0).abs() < 1e-15);
    }

    #[test]
    fn build_errors() {
        assert!(build_dataset(&Run::new(), &Qrels::default(), BuildOptions::default()).is_err());
        let opts = BuildOptions {
            top_n: 0,
            ..Default::default()
        };
        assert!(build_dataset(&small_run(), &Qrels::default(), opts).is_err());
    }

    #[test]
    fn split_sizes_and_partition() {
        let examples = (0..250)
            .map(|i| {
                let list = RankedList::new(
                    format!("q{i}"),
                    vec!["d".into()],
                    vec![1.0],
                    LabelVector::new(vec![1]).unwrap(),
                )
                .unwrap();
                Example::new(list, None).unwrap()
            })
            .collect();
        let ds = Dataset::new(examples).unwrap();
        let (train, test) = split_train_test(&ds, 0.8, 7).unwrap();
        assert_eq!((train.len(), test.len()), (200, 50));
        assert_eq!(train.split, Some(Split::Train));
        let (train2, _) = split_train_test(&ds, 0.8, 7).unwrap();
        assert_eq!(train.query_ids(), train2.query_ids());
        let a: HashSet<&str> = train.query_ids().into_iter().collect();
        let b: HashSet<&str> = test.query_ids().into_iter().collect();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), 250);
        assert!(split_train_test(&ds, 1.0, 0).is_err());
        assert!(split_train_test(&ds, 0.0, 0).is_err());
        let one = Dataset::new(ds.examples[..1].to_vec()).unwrap();
        assert!(split_train_test(&one, 0.5, 0).is_err());
    }

    #[test]
    fn ranked_list_resorts_stably() {
        let list = RankedList::new(
            "q".into(),
            vec!["a".into(), "b".into(), "c".into()],
            vec![1.0, 2.0, 1.0],
            LabelVector::new(vec![1, -1, -1]).unwrap(),
        )
        .unwrap();
        assert_eq!(list.doc_ids, ["b", "a", "c"]);
        assert_eq!(list.labels.as_slice(), &[-1, 1, -1]);
        assert!(RankedList::new(
            "q".into(),
            vec![],
            vec![1.0],
            LabelVector::new(vec![1]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn cache_round_trip_and_duplicate_detection() {
        let ds = build_dataset(&small_run(), &small_qrels(), BuildOptions::default()).unwrap();
        let (train, _) = split_train_test(&ds, 0.5, 1).unwrap();
        let mut buf = Vec::new();
        write_dataset(&mut buf, &train).unwrap();
        let back = read_dataset(buf.as_slice(), "cache").unwrap();
        assert_eq!(back, train);

        let mut dup = Vec::new();
        write_dataset(&mut dup, &ds).unwrap();
        dup.extend_from_within(..);
        assert!(read_dataset(dup.as_slice(), "cache").is_err());
        let err = read_dataset("{\"qid\": 3}\n".as_bytes(), "cache.jsonl").unwrap_err();
        assert!(err.to_string().starts_with("cache.jsonl:1:"));
    }
}
