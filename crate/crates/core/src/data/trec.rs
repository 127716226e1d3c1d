//! TREC run (`qid Q0 docid rank score tag`) and qrels (`qid 0 docid rel`)
//! readers and writers.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use indexmap::IndexMap;
use log::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub doc_id: String,
    pub rank: i64,
    pub score: f64,
}

/// Retrieved documents per query, in order of first appearance of each
/// query id. Each list is sorted by score descending, then rank ascending.
pub type Run = IndexMap<String, Vec<RunEntry>>;

fn parse_err(source: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        source_name: source.to_string(),
        line,
        message: message.into(),
    }
}

pub fn parse_trec_run<R: BufRead>(reader: R, source: &str) -> Result<Run> {
    let mut run: Run = IndexMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 6 {
            return Err(parse_err(
                source,
                lineno,
                format!(
                    "expected 6 columns (qid Q0 docid rank score tag), found {}",
                    cols.len()
                ),
            ));
        }
        let rank: i64 = cols[3].parse().map_err(|_| {
            parse_err(
                source,
                lineno,
                format!("rank '{}' is not an integer", cols[3]),
            )
        })?;
        let score: f64 = cols[4].parse().map_err(|_| {
            parse_err(
                source,
                lineno,
                format!("score '{}' is not numeric", cols[4]),
            )
        })?;
        if !score.is_finite() {
            return Err(parse_err(
                source,
                lineno,
                format!("score '{}' is not finite", cols[4]),
            ));
        }
        run.entry(cols[0].to_string()).or_default().push(RunEntry {
            doc_id: cols[2].to_string(),
            rank,
            score,
        });
    }
    for entries in run.values_mut() {
        entries.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.rank.cmp(&b.rank)));
    }
    Ok(run)
}

/// Relevance levels keyed by query, then document.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Qrels {
    judgments: HashMap<String, HashMap<String, i32>>,
}

impl Qrels {
    pub fn insert(&mut self, qid: &str, doc_id: &str, level: i32) -> Option<i32> {
        self.judgments
            .entry(qid.to_string())
            .or_default()
            .insert(doc_id.to_string(), level)
    }

    pub fn level(&self, qid: &str, doc_id: &str) -> Option<i32> {
        self.judgments.get(qid)?.get(doc_id).copied()
    }

    /// Judged-relevant (level > 0) documents for a query.
    pub fn relevant_total(&self, qid: &str) -> usize {
        self.judgments
            .get(qid)
            .map_or(0, |m| m.values().filter(|&&l| l > 0).count())
    }

    pub fn query_ids(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// Number of judged pairs.
    pub fn len(&self) -> usize {
        self.judgments.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reads 4-column qrels. Duplicate pairs keep the last level and log a warning.
pub fn parse_qrels<R: BufRead>(reader: R, source: &str) -> Result<Qrels> {
    let mut qrels = Qrels::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(parse_err(
                source,
                lineno,
                format!("expected 4 columns (qid 0 docid rel), found {}", cols.len()),
            ));
        }
        let level: i32 = cols[3].parse().map_err(|_| {
            parse_err(
                source,
                lineno,
                format!("relevance '{}' is not an integer", cols[3]),
            )
        })?;
        if let Some(prev) = qrels.insert(cols[0], cols[2], level) {
            warn!(
                "{source}:{lineno}: duplicate judgment for ({}, {}); {prev} replaced by {level}",
                cols[0], cols[2]
            );
        }
    }
    Ok(qrels)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::io_at(path, e))
}

pub fn load_run(path: &Path) -> Result<Run> {
    parse_trec_run(open(path)?, &path.display().to_string())
}

pub fn load_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(open(path)?, &path.display().to_string())
}

pub fn write_trec_run<W: Write>(mut w: W, run: &Run, tag: &str) -> Result<()> {
    for (qid, entries) in run {
        for e in entries {
            writeln!(w, "{qid} Q0 {} {} {} {tag}", e.doc_id, e.rank, e.score)?;
        }
    }
    Ok(())
}
