//! Canonical JSON-lines dataset: one query per line with its candidate pool.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::{doc_key, query_key};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Valid,
    Test,
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Subset::Train),
            "valid" | "dev" => Ok(Subset::Valid),
            "test" => Ok(Subset::Test),
            other => Err(Error::Usage(format!("unknown subset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub label: u8,
}

impl Candidate {
    pub fn relevant(&self) -> bool {
        self.label == 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub query_id: String,
    pub subset: Subset,
    pub tokens: Vec<String>,
    pub candidates: Vec<Candidate>,
}

impl Query {
    pub fn has_positive(&self) -> bool {
        self.candidates.iter().any(Candidate::relevant)
    }

    pub fn has_negative(&self) -> bool {
        self.candidates.iter().any(|c| !c.relevant())
    }

    /// Usable for triplet training: at least one positive and one negative.
    pub fn minable(&self) -> bool {
        self.has_positive() && self.has_negative()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub queries: Vec<Query>,
}

impl Dataset {
    pub fn new(queries: Vec<Query>) -> Result<Self> {
        let d = Dataset { queries };
        d.validate()?;
        Ok(d)
    }

    /// Query ids unique, token lists non-empty, labels binary, doc ids unique
    /// within a pool and bound to one token list across pools.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut docs: HashMap<&str, &[String]> = HashMap::new();
        for q in &self.queries {
            if !seen.insert(q.query_id.as_str()) {
                return Err(Error::Data(format!("duplicate query id `{}`", q.query_id)));
            }
            if q.tokens.is_empty() {
                return Err(Error::Data(format!("query `{}` has no tokens", q.query_id)));
            }
            let mut pool = HashSet::new();
            for c in &q.candidates {
                if !pool.insert(c.doc_id.as_str()) {
                    return Err(Error::Data(format!("query `{}` lists doc `{}` twice", q.query_id, c.doc_id)));
                }
                if c.tokens.is_empty() {
                    return Err(Error::Data(format!("doc `{}` of query `{}` has no tokens", c.doc_id, q.query_id)));
                }
                if c.label > 1 {
                    return Err(Error::Data(format!("doc `{}` of query `{}` has label {}", c.doc_id, q.query_id, c.label)));
                }
                match docs.get(c.doc_id.as_str()) {
                    Some(prev) if *prev != c.tokens.as_slice() => {
                        return Err(Error::Data(format!("doc id `{}` is used for two different texts", c.doc_id)));
                    }
                    Some(_) => {}
                    None => {
                        docs.insert(&c.doc_id, &c.tokens);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, subset: Subset) -> impl Iterator<Item = &Query> {
        self.queries.iter().filter(move |q| q.subset == subset)
    }

    pub fn count(&self, subset: Subset) -> usize {
        self.subset(subset).count()
    }

    pub fn find(&self, query_id: &str) -> Option<&Query> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    /// Every text as `(bundle key, tokens)`, each document once.
    pub fn texts(&self) -> Vec<(String, &[String])> {
        let mut out = Vec::new();
        let mut docs = HashSet::new();
        for q in &self.queries {
            out.push((query_key(&q.query_id), q.tokens.as_slice()));
            for c in &q.candidates {
                if docs.insert(c.doc_id.as_str()) {
                    out.push((doc_key(&c.doc_id), c.tokens.as_slice()));
                }
            }
        }
        out
    }

    /// Distinct training documents, used as the idf corpus.
    pub fn train_documents(&self) -> Vec<Vec<String>> {
        let mut seen = HashSet::new();
        self.subset(Subset::Train)
            .flat_map(|q| &q.candidates)
            .filter(|c| seen.insert(c.doc_id.as_str()))
            .map(|c| c.tokens.clone())
            .collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut queries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let q: Query = serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
            queries.push(q);
        }
        Dataset::new(queries).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        for q in &self.queries {
            let line = serde_json::to_string(q).expect("query serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Settings for [`synthetic_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub vocab: usize,
    pub phrase_len: usize,
    pub query_len: usize,
    pub doc_len: usize,
    pub distractors: usize,
    pub seed: u64,
}

impl Default for SyntheticDataSpec {
    fn default() -> Self {
        SyntheticDataSpec {
            train: 200,
            valid: 50,
            test: 50,
            vocab: 1000,
            phrase_len: 3,
            query_len: 6,
            doc_len: 10,
            distractors: 7,
            seed: 7,
        }
    }
}

/// Retrieval toy task: each query embeds a random key phrase; its single
/// relevant document contains the same phrase, the distractors do not.
pub fn synthetic_dataset(spec: &SyntheticDataSpec) -> Result<Dataset> {
    if spec.phrase_len == 0 || spec.query_len < spec.phrase_len || spec.doc_len < spec.phrase_len {
        return Err(Error::Config("synthetic phrase must fit inside queries and documents".into()));
    }
    if spec.vocab < 2 * spec.phrase_len {
        return Err(Error::Config("synthetic vocabulary too small".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let word = |rng: &mut ChaCha8Rng| format!("w{}", rng.gen_range(0..spec.vocab));
    let subsets = [
        (Subset::Train, spec.train),
        (Subset::Valid, spec.valid),
        (Subset::Test, spec.test),
    ];
    let mut queries = Vec::new();
    for (subset, count) in subsets {
        for _ in 0..count {
            let n = queries.len();
            let phrase: Vec<String> = (0..spec.phrase_len).map(|_| word(&mut rng)).collect();
            let contains_phrase = |t: &[String]| t.windows(phrase.len()).any(|w| w == phrase.as_slice());
            let with_phrase = |rng: &mut ChaCha8Rng, len: usize| {
                let mut t: Vec<String> = (0..len - phrase.len()).map(|_| word(rng)).collect();
                let at = rng.gen_range(0..=t.len());
                t.splice(at..at, phrase.iter().cloned());
                t
            };
            let tokens = with_phrase(&mut rng, spec.query_len);
            let mut candidates = vec![Candidate {
                doc_id: format!("s{n}-0"),
                tokens: with_phrase(&mut rng, spec.doc_len),
                label: 1,
            }];
            for k in 1..=spec.distractors {
                let tokens = loop {
                    let t: Vec<String> = (0..spec.doc_len).map(|_| word(&mut rng)).collect();
                    if !contains_phrase(&t) {
                        break t;
                    }
                };
                candidates.push(Candidate {
                    doc_id: format!("s{n}-{k}"),
                    tokens,
                    label: 0,
                });
            }
            candidates.shuffle(&mut rng);
            queries.push(Query {
                query_id: format!("s{n}"),
                subset,
                tokens,
                candidates,
            });
        }
    }
    Dataset::new(queries)
}
