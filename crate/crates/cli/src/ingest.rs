//! Converters from raw candidate lists to the canonical JSON-lines dataset.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use mrnn_core::dataset::{Candidate, Dataset, Query, Subset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// `QuestionID Question DocumentID DocumentTitle SentenceID Sentence Label`.
    WikiQa,
    /// Tab-separated with a header naming at least query id, query, doc id,
    /// doc text and label columns.
    TrecQa,
    /// Already canonical; validated and filtered only.
    Jsonl,
}

impl FromStr for Format {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "wikiqa" => Ok(Format::WikiQa),
            "trecqa" | "tsv" => Ok(Format::TrecQa),
            "jsonl" => Ok(Format::Jsonl),
            other => bail!("unknown format `{other}` (expected wikiqa, trecqa, tsv or jsonl)"),
        }
    }
}

/// Lowercases and splits on whitespace; every other non-alphanumeric
/// character becomes its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SubsetCounts {
    pub read: usize,
    pub kept: usize,
    pub no_positive: usize,
    pub no_negative: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    pub train: SubsetCounts,
    pub valid: SubsetCounts,
    pub test: SubsetCounts,
}

impl IngestReport {
    fn counts_mut(&mut self, subset: Subset) -> &mut SubsetCounts {
        match subset {
            Subset::Train => &mut self.train,
            Subset::Valid => &mut self.valid,
            Subset::Test => &mut self.test,
        }
    }

    pub fn kept(&self) -> usize {
        self.train.kept + self.valid.kept + self.test.kept
    }
}

impl fmt::Display for IngestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, c) in [("train", &self.train), ("valid", &self.valid), ("test", &self.test)] {
            writeln!(
                f,
                "{name}: read {} kept {} dropped {} (no positive {}, no negative {})",
                c.read,
                c.kept,
                c.no_positive + c.no_negative,
                c.no_positive,
                c.no_negative
            )?;
        }
        write!(f, "total kept {}", self.kept())
    }
}

struct Columns {
    qid: usize,
    query: usize,
    did: usize,
    doc: usize,
    label: usize,
    width: usize,
}

fn find_column(header: &[String], names: &[&str]) -> Option<usize> {
    header.iter().position(|h| names.contains(&h.to_ascii_lowercase().as_str()))
}

fn columns(format: Format, header: &[String], path: &Path) -> Result<Columns> {
    let pick = |names: &[&str]| {
        find_column(header, names).ok_or_else(|| anyhow!("{}:1: header lacks a column named {}", path.display(), names.join("/")))
    };
    let cols = match format {
        Format::WikiQa => Columns {
            qid: pick(&["questionid"])?,
            query: pick(&["question"])?,
            did: pick(&["sentenceid"])?,
            doc: pick(&["sentence"])?,
            label: pick(&["label"])?,
            width: header.len(),
        },
        _ => Columns {
            qid: pick(&["qid", "questionid", "question_id", "query_id"])?,
            query: pick(&["question", "query"])?,
            did: pick(&["aid", "docid", "doc_id", "sentenceid", "answer_id"])?,
            doc: pick(&["answer", "sentence", "document", "doc"])?,
            label: pick(&["label", "relevance", "judgement"])?,
            width: header.len(),
        },
    };
    Ok(cols)
}

/// Reads one tab-separated file into queries of `subset`, in order of first appearance.
pub fn read_tsv(path: &Path, format: Format, subset: Subset) -> Result<Vec<Query>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines().enumerate();
    let header: Vec<String> = match lines.next() {
        Some((_, h)) => h.split('\t').map(|s| s.trim().to_string()).collect(),
        None => bail!("{}: empty file", path.display()),
    };
    let cols = columns(format, &header, path)?;
    let mut queries: Vec<Query> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (n, line) in lines {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.width {
            bail!("{}:{lineno}: expected {} tab-separated fields, found {}", path.display(), cols.width, fields.len());
        }
        let label = match fields[cols.label].trim() {
            "0" => 0,
            "1" => 1,
            other => bail!("{}:{lineno}: label must be 0 or 1, found `{other}`", path.display()),
        };
        let qid = fields[cols.qid].trim().to_string();
        let (qtokens, dtokens) = (tokenize(fields[cols.query]), tokenize(fields[cols.doc]));
        if qtokens.is_empty() || dtokens.is_empty() {
            bail!("{}:{lineno}: empty query or document text", path.display());
        }
        let slot = *index.entry(qid.clone()).or_insert_with(|| {
            queries.push(Query {
                query_id: qid.clone(),
                subset,
                tokens: qtokens.clone(),
                candidates: Vec::new(),
            });
            queries.len() - 1
        });
        let q = &mut queries[slot];
        if q.tokens != qtokens {
            bail!("{}:{lineno}: query `{qid}` appears with different text", path.display());
        }
        let doc_id = fields[cols.did].trim().to_string();
        if q.candidates.iter().any(|c| c.doc_id == doc_id) {
            bail!("{}:{lineno}: document `{doc_id}` listed twice for query `{qid}`", path.display());
        }
        q.candidates.push(Candidate {
            doc_id,
            tokens: dtokens,
            label,
        });
    }
    Ok(queries)
}

/// Keeps queries with at least one positive and one negative candidate.
pub fn filter_usable(queries: Vec<Query>) -> (Vec<Query>, IngestReport) {
    let mut report = IngestReport::default();
    let mut kept = Vec::with_capacity(queries.len());
    for q in queries {
        let c = report.counts_mut(q.subset);
        c.read += 1;
        if !q.has_positive() {
            c.no_positive += 1;
        } else if !q.has_negative() {
            c.no_negative += 1;
        } else {
            c.kept += 1;
            kept.push(q);
        }
    }
    (kept, report)
}

/// Where the raw inputs of one ingest run live.
#[derive(Clone, Debug, Default)]
pub struct Inputs<'a> {
    pub input: Option<&'a Path>,
    pub train: Option<&'a Path>,
    pub valid: Option<&'a Path>,
    pub test: Option<&'a Path>,
}

pub fn ingest(format: Format, inputs: &Inputs<'_>) -> Result<(Dataset, IngestReport)> {
    let raw = match format {
        Format::Jsonl => {
            let path = inputs.input.ok_or_else(|| anyhow!("jsonl ingest needs --input"))?;
            Dataset::load(path)?.queries
        }
        _ => {
            let mut all = Vec::new();
            let parts = [(inputs.train, Subset::Train), (inputs.valid, Subset::Valid), (inputs.test, Subset::Test)];
            if parts.iter().all(|(p, _)| p.is_none()) {
                bail!("tsv ingest needs at least one of --train, --valid, --test");
            }
            for (path, subset) in parts {
                if let Some(path) = path {
                    all.extend(read_tsv(path, format, subset)?);
                }
            }
            all
        }
    };
    let (kept, report) = filter_usable(raw);
    if kept.is_empty() {
        bail!("no query has both a positive and a negative candidate");
    }
    Ok((Dataset::new(kept)?, report))
}
