//! Input token matrices assembled from precomputed embedding sources.
//!
//! A source is either a *bundle* (per-example, per-position, per-layer vectors
//! written offline) or a *static table* (token string → vector). Each source
//! combines its layers with weights `m` ([`mixture`]); the per-source vectors
//! are then combined with weights `u` ([`ensemble`]).

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{EmbeddingConfig, SourceKind};
use crate::diffcore::Array;
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixOp {
    Sum,
    Concat,
}

/// Bundle key for a query text.
pub fn query_key(query_id: &str) -> String {
    format!("q:{query_id}")
}

/// Bundle key for a candidate document text.
pub fn doc_key(doc_id: &str) -> String {
    format!("d:{doc_id}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub source: String,
    pub layers: usize,
    pub dim: usize,
    #[serde(default)]
    pub tokenizer: String,
    #[serde(default)]
    pub synthetic: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    example_id: String,
    position: usize,
    layers: Vec<Vec<f64>>,
}

/// Per-token layer vectors keyed by `(example id, position)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Bundle {
    pub meta: BundleMeta,
    records: BTreeMap<(String, usize), Vec<Vec<f64>>>,
}

impl Bundle {
    pub fn new(meta: BundleMeta) -> Self {
        Bundle {
            meta,
            records: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, example_id: &str, position: usize, layers: Vec<Vec<f64>>) -> Result<()> {
        if layers.len() != self.meta.layers {
            return Err(shape_err!(
                "bundle record ({example_id}, {position}) has {} layers, expected {}",
                layers.len(),
                self.meta.layers
            ));
        }
        if let Some(bad) = layers.iter().find(|l| l.len() != self.meta.dim) {
            return Err(shape_err!(
                "bundle record ({example_id}, {position}) has a {}-dim layer, expected {}",
                bad.len(),
                self.meta.dim
            ));
        }
        if layers.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("bundle record ({example_id}, {position}) is not finite")));
        }
        self.records.insert((example_id.to_string(), position), layers);
        Ok(())
    }

    pub fn get(&self, example_id: &str, position: usize) -> Result<&[Vec<f64>]> {
        self.records
            .get(&(example_id.to_string(), position))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Data(format!(
                    "bundle `{}` has no record for ({example_id}, {position})",
                    self.meta.source
                ))
            })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Checks that every position `0..len` of each example is present.
    pub fn check_coverage<'a>(&self, examples: impl IntoIterator<Item = (&'a str, usize)>) -> Result<()> {
        for (id, len) in examples {
            for p in 0..len {
                self.get(id, p)?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: BundleMeta =
            serde_json::from_str(&text).map_err(|e| Error::parse(&meta_path, e.line(), e.to_string()))?;
        let mut bundle = Bundle::new(meta);
        let rec_path = dir.join("records.jsonl");
        let file = File::open(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&rec_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| Error::parse(&rec_path, n + 1, e.to_string()))?;
            bundle
                .insert(&rec.example_id, rec.position, rec.layers)
                .map_err(|e| Error::parse(&rec_path, n + 1, e.to_string()))?;
        }
        Ok(bundle)
    }

    /// Writes `meta.json` and `records.jsonl`, records sorted by key.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta_path = dir.join("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        std::fs::write(&meta_path, meta + "\n").map_err(|e| Error::io(&meta_path, e))?;
        let rec_path = dir.join("records.jsonl");
        let file = File::create(&rec_path).map_err(|e| Error::io(&rec_path, e))?;
        let mut out = BufWriter::new(file);
        for ((id, pos), layers) in &self.records {
            let rec = Record {
                example_id: id.clone(),
                position: *pos,
                layers: layers.clone(),
            };
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(out, "{line}").map_err(|e| Error::io(&rec_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&rec_path, e))
    }
}

/// Token-string lookup table with an out-of-vocabulary fallback.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
    fallback: Vec<f64>,
}

/// Token whose row, when present in a static table file, becomes the fallback.
pub const UNK_TOKEN: &str = "<unk>";

impl StaticTable {
    pub fn new(dim: usize, fallback: Vec<f64>) -> Result<Self> {
        if fallback.len() != dim {
            return Err(shape_err!("static table fallback has {} dims, expected {dim}", fallback.len()));
        }
        Ok(StaticTable {
            dim,
            vectors: HashMap::new(),
            fallback,
        })
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(shape_err!("static vector for `{token}` has {} dims, expected {}", vector.len(), self.dim));
        }
        self.vectors.insert(token.to_string(), vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lookup(&self, token: &str) -> &[f64] {
        self.vectors.get(token).unwrap_or(&self.fallback)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.vectors.contains_key(token)
    }

    /// Reads `token v1 … vd` lines. The `<unk>` row, if any, is the fallback;
    /// otherwise the fallback is the zero vector.
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let vector = parts
                .map(|v| v.parse::<f64>().map_err(|e| Error::parse(path, n + 1, format!("`{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some((_, first)) = rows.first() {
                if first.len() != vector.len() {
                    return Err(Error::parse(
                        path,
                        n + 1,
                        format!("{} values, expected {}", vector.len(), first.len()),
                    ));
                }
            }
            if vector.is_empty() || vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(path, n + 1, "vector must be non-empty and finite"));
            }
            rows.push((token.to_string(), vector));
        }
        let dim = rows
            .first()
            .map(|(_, v)| v.len())
            .ok_or_else(|| Error::Data(format!("{}: empty static table", path.display())))?;
        let fallback = rows
            .iter()
            .find(|(t, _)| t == UNK_TOKEN)
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| vec![0.0; dim]);
        let mut table = StaticTable::new(dim, fallback)?;
        for (t, v) in rows {
            table.insert(&t, v)?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut tokens: Vec<&String> = self.vectors.keys().collect();
        tokens.sort();
        let write_row = |out: &mut BufWriter<File>, token: &str, v: &[f64]| {
            let values: Vec<String> = v.iter().map(|x| format!("{x:?}")).collect();
            writeln!(out, "{token} {}", values.join(" "))
        };
        if !self.vectors.contains_key(UNK_TOKEN) {
            write_row(&mut out, UNK_TOKEN, &self.fallback).map_err(|e| Error::io(path, e))?;
        }
        for t in tokens {
            write_row(&mut out, t, &self.vectors[t]).map_err(|e| Error::io(path, e))?;
        }
        out.flush().map_err(|e| Error::io(path, e))
    }
}

/// Smoothed inverse document frequency: `ln((1+|D|)/(1+df)) + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable {
    documents: usize,
    weights: HashMap<String, f64>,
}

fn smoothed_idf(documents: usize, df: usize) -> f64 {
    ((1.0 + documents as f64) / (1.0 + df as f64)).ln() + 1.0
}

impl IdfTable {
    pub fn documents(&self) -> usize {
        self.documents
    }

    /// Stored weight, or the `df = 0` value for unseen tokens.
    pub fn weight(&self, token: &str) -> f64 {
        self.weights
            .get(token)
            .copied()
            .unwrap_or_else(|| smoothed_idf(self.documents, 0))
    }

    /// Writes a `# documents N` header followed by `token idf` lines.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let mut tokens: Vec<(&String, &f64)> = self.weights.iter().collect();
        tokens.sort_by(|a, b| a.0.cmp(b.0));
        let write = || -> std::io::Result<()> {
            writeln!(out, "# documents {}", self.documents)?;
            for (t, w) in tokens {
                writeln!(out, "{t} {w:?}")?;
            }
            out.flush()
        };
        write().map_err(|e| Error::io(path, e))
    }

    /// Reads the format written by [`IdfTable::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut documents = None;
        let mut weights = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => {}
                ["#", "documents", count] => {
                    documents = Some(count.parse::<usize>().map_err(|e| Error::parse(path, n + 1, e.to_string()))?);
                }
                [token, idf] => {
                    let idf = idf.parse::<f64>().map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
                    if !(idf.is_finite() && idf > 0.0) {
                        return Err(Error::parse(path, n + 1, "idf must be finite and positive"));
                    }
                    weights.insert(token.to_string(), idf);
                }
                _ => return Err(Error::parse(path, n + 1, "expected `token idf`")),
            }
        }
        let documents = documents.ok_or_else(|| Error::parse(path, 1, "missing `# documents N` header"))?;
        if documents == 0 {
            return Err(Error::Domain(format!("{}: idf table over zero documents", path.display())));
        }
        Ok(IdfTable { documents, weights })
    }
}

pub fn compute_idf<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<IdfTable> {
    if corpus.is_empty() {
        return Err(Error::Domain("compute_idf: empty corpus".into()));
    }
    let mut df: HashMap<&str, usize> = HashMap::new();
    for doc in corpus {
        let unique: HashSet<&str> = doc.iter().map(AsRef::as_ref).collect();
        for t in unique {
            *df.entry(t).or_default() += 1;
        }
    }
    let weights = df
        .into_iter()
        .map(|(t, n)| (t.to_string(), smoothed_idf(corpus.len(), n)))
        .collect();
    Ok(IdfTable {
        documents: corpus.len(),
        weights,
    })
}

/// Combines one token's layer vectors with weights `m`.
///
/// Concat mode skips zero-weight layers. `idf_weight`, when given, scales the result.
pub fn mixture(layers: &[Vec<f64>], m: &[f64], op: MixOp, idf_weight: Option<f64>) -> Result<Vec<f64>> {
    if layers.len() != m.len() {
        return Err(shape_err!("mixture: {} layer weights for {} layers", m.len(), layers.len()));
    }
    let scale = idf_weight.unwrap_or(1.0);
    match op {
        MixOp::Sum => {
            let dim = layers.first().map_or(0, Vec::len);
            if layers.iter().any(|l| l.len() != dim) {
                return Err(shape_err!("mixture: sum mode needs equal layer dimensions"));
            }
            let mut out = vec![0.0; dim];
            for (layer, &w) in layers.iter().zip(m) {
                for (o, v) in out.iter_mut().zip(layer) {
                    *o += w * v;
                }
            }
            out.iter_mut().for_each(|v| *v *= scale);
            Ok(out)
        }
        MixOp::Concat => Ok(layers
            .iter()
            .zip(m)
            .filter(|(_, &w)| w != 0.0)
            .flat_map(|(layer, &w)| layer.iter().map(move |v| w * v * scale))
            .collect()),
    }
}

/// Combines per-source token vectors with weights `u`.
pub fn ensemble(parts: &[Vec<f64>], u: &[f64], op: MixOp) -> Result<Vec<f64>> {
    if parts.len() != u.len() {
        return Err(shape_err!("ensemble: {} weights for {} parts", u.len(), parts.len()));
    }
    match op {
        MixOp::Concat => Ok(parts
            .iter()
            .zip(u)
            .flat_map(|(p, &w)| p.iter().map(move |v| w * v))
            .collect()),
        MixOp::Sum => {
            let dim = parts.first().map_or(0, Vec::len);
            if parts.iter().any(|p| p.len() != dim) {
                return Err(shape_err!("ensemble: sum mode needs equal part dimensions"));
            }
            let mut out = vec![0.0; dim];
            for (p, &w) in parts.iter().zip(u) {
                for (o, v) in out.iter_mut().zip(p) {
                    *o += w * v;
                }
            }
            Ok(out)
        }
    }
}

/// Mixture settings for one source.
#[derive(Clone, Debug, PartialEq)]
pub struct SourceSpec {
    pub layers: Vec<f64>,
    pub idf: bool,
    pub mix: MixOp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Bundle(Bundle),
    Static(StaticTable),
}

impl Source {
    pub fn layer_count(&self) -> usize {
        match self {
            Source::Bundle(b) => b.meta.layers,
            Source::Static(_) => 1,
        }
    }

    pub fn layer_dim(&self) -> usize {
        match self {
            Source::Bundle(b) => b.meta.dim,
            Source::Static(t) => t.dim(),
        }
    }
}

/// All configured sources plus mixture and ensemble settings.
#[derive(Clone, Debug)]
pub struct Embedder {
    sources: Vec<(Source, SourceSpec)>,
    weights: Vec<f64>,
    ensemble: MixOp,
    idf: Option<IdfTable>,
    dim: usize,
}

impl Embedder {
    /// Validates the source settings against the sources and fixes the output dimension.
    pub fn new(sources: Vec<(Source, SourceSpec)>, weights: Vec<f64>, ensemble: MixOp, idf: Option<IdfTable>) -> Result<Self> {
        if sources.is_empty() || weights.len() != sources.len() {
            return Err(Error::Config(format!(
                "{} ensemble weights for {} sources",
                weights.len(),
                sources.len()
            )));
        }
        let mut part_dims = Vec::new();
        for (i, (src, spec)) in sources.iter().enumerate() {
            if spec.layers.len() != src.layer_count() {
                return Err(Error::Config(format!(
                    "source {i}: {} layer weights for {} layers",
                    spec.layers.len(),
                    src.layer_count()
                )));
            }
            if spec.idf && idf.is_none() {
                return Err(Error::Config(format!("source {i} requests idf weighting but no idf table is loaded")));
            }
            part_dims.push(match spec.mix {
                MixOp::Sum => src.layer_dim(),
                MixOp::Concat => spec.layers.iter().filter(|w| **w != 0.0).count() * src.layer_dim(),
            });
        }
        let dim = match ensemble {
            MixOp::Concat => part_dims.iter().sum(),
            MixOp::Sum => {
                if part_dims.iter().any(|d| *d != part_dims[0]) {
                    return Err(Error::Config(format!("sum ensemble over unequal part dimensions {part_dims:?}")));
                }
                part_dims[0]
            }
        };
        if dim == 0 {
            return Err(Error::Config("embedding configuration yields zero-dimensional tokens".into()));
        }
        Ok(Embedder {
            sources,
            weights,
            ensemble,
            idf,
            dim,
        })
    }

    /// Loads every source named in `config`. `corpus` supplies document
    /// frequencies when no idf table path is configured.
    pub fn from_config<S: AsRef<str>>(config: &EmbeddingConfig, corpus: &[Vec<S>]) -> Result<Self> {
        let mut sources = Vec::new();
        for s in &config.sources {
            let src = match s.kind {
                SourceKind::Bundle => Source::Bundle(Bundle::load(&s.path)?),
                SourceKind::Static => Source::Static(StaticTable::load(&s.path)?),
            };
            sources.push((
                src,
                SourceSpec {
                    layers: s.layers.clone(),
                    idf: s.idf,
                    mix: s.mix,
                },
            ));
        }
        let idf = if config.sources.iter().any(|s| s.idf) {
            Some(match &config.idf_table {
                Some(p) => IdfTable::load(p)?,
                None => compute_idf(corpus)?,
            })
        } else {
            None
        };
        Embedder::new(sources, config.weights.clone(), config.ensemble, idf)
    }

    /// Token dimension `w`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed_token(&self, example_id: &str, position: usize, token: &str) -> Result<Vec<f64>> {
        let mut parts = Vec::with_capacity(self.sources.len());
        for (src, spec) in &self.sources {
            let idf = match (&self.idf, spec.idf) {
                (Some(table), true) => Some(table.weight(token)),
                _ => None,
            };
            let v = match src {
                Source::Bundle(b) => mixture(b.get(example_id, position)?, &spec.layers, spec.mix, idf)?,
                Source::Static(t) => mixture(&[t.lookup(token).to_vec()], &spec.layers, spec.mix, idf)?,
            };
            parts.push(v);
        }
        ensemble(&parts, &self.weights, self.ensemble)
    }

    /// The `[h, w]` token matrix of one text.
    pub fn embed_text<S: AsRef<str>>(&self, example_id: &str, tokens: &[S]) -> Result<Array> {
        if tokens.is_empty() {
            return Err(Error::Domain(format!("embed_text: `{example_id}` has no tokens")));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.dim);
        for (p, t) in tokens.iter().enumerate() {
            data.extend(self.embed_token(example_id, p, t.as_ref())?);
        }
        Array::new(vec![tokens.len(), self.dim], data)
    }
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(&[0xff]) {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Settings for [`synthetic_bundle`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub layers: usize,
    pub dim: usize,
    pub seed: u64,
    /// Magnitude of per-occurrence noise added before renormalizing; 0 makes
    /// every occurrence of a token identical.
    pub context_noise: f64,
}

/// Seeded unit-norm vectors that depend on `(seed, token, layer)` plus
/// optional per-occurrence noise. Marked synthetic in its metadata.
pub fn synthetic_bundle<'a>(
    spec: &SyntheticSpec,
    texts: impl IntoIterator<Item = (&'a str, &'a [String])>,
) -> Result<Bundle> {
    let mut bundle = Bundle::new(BundleMeta {
        source: format!("synthetic-{}", spec.seed),
        layers: spec.layers,
        dim: spec.dim,
        tokenizer: "whitespace".into(),
        synthetic: true,
    });
    let seed = spec.seed.to_le_bytes();
    for (id, tokens) in texts {
        for (p, token) in tokens.iter().enumerate() {
            let mut layers = Vec::with_capacity(spec.layers);
            for l in 0..spec.layers {
                let layer = (l as u64).to_le_bytes();
                let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&seed, token.as_bytes(), &layer]));
                let mut v = unit_vector(&mut rng, spec.dim);
                if spec.context_noise > 0.0 {
                    let pos = (p as u64).to_le_bytes();
                    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[&seed, id.as_bytes(), &pos, &layer]));
                    let noise = unit_vector(&mut rng, spec.dim);
                    v.iter_mut().zip(noise).for_each(|(a, n)| *a += spec.context_noise * n);
                    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter_mut().for_each(|a| *a /= norm);
                }
                layers.push(v);
            }
            bundle.insert(id, p, layers)?;
        }
    }
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn idf_examples() {
        let corpus = vec![toks("a b"), toks("a c"), toks("a a")];
        let idf = compute_idf(&corpus).unwrap();
        assert_eq!(idf.weight("a"), 1.0);
        assert!((idf.weight("b") - (2.0f64.ln() + 1.0)).abs() < 1e-15);
        assert!((idf.weight("b") - 1.6931).abs() < 1e-4);
        assert!((idf.weight("zzz") - 2.3863).abs() < 1e-4);
        assert!(matches!(compute_idf::<String>(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn idf_counts_documents_not_occurrences() {
        let idf = compute_idf(&[toks("x x x"), toks("y")]).unwrap();
        assert_eq!(idf.weight("x"), idf.weight("y"));
    }

    #[test]
    fn mixture_examples() {
        let one = vec![vec![1.0, -2.0]];
        assert_eq!(mixture(&one, &[1.0], MixOp::Sum, None).unwrap(), vec![1.0, -2.0]);
        let three = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, -1.0]];
        assert_eq!(mixture(&three, &[0.0, 0.0, 1.0], MixOp::Sum, Some(2.0)).unwrap(), vec![6.0, -2.0]);
        let two = vec![vec![1.0, 4.0], vec![3.0, 0.0]];
        assert_eq!(mixture(&two, &[0.5, 0.5], MixOp::Sum, None).unwrap(), vec![2.0, 2.0]);
        let uneven = vec![vec![1.0], vec![1.0, 2.0]];
        assert!(matches!(mixture(&uneven, &[1.0, 1.0], MixOp::Sum, None), Err(Error::Shape(_))));
        assert_eq!(mixture(&uneven, &[2.0, 1.0], MixOp::Concat, None).unwrap(), vec![2.0, 1.0, 2.0]);
    }

    #[test]
    fn concat_mixture_drops_zero_weight_layers() {
        let layers: Vec<Vec<f64>> = (0..12).map(|l| vec![l as f64; 3]).collect();
        let mut m = vec![0.25; 4];
        m.extend([0.0; 8]);
        let out = mixture(&layers, &m, MixOp::Concat, None).unwrap();
        assert_eq!(out.len(), 12);
        assert_eq!(out[9..], [0.75, 0.75, 0.75]);
    }

    #[test]
    fn ensemble_examples() {
        let parts = vec![vec![3.0, 3.0, 3.0], vec![6.0, 6.0], vec![9.0]];
        let third = 1.0 / 3.0;
        let out = ensemble(&parts, &[third; 3], MixOp::Concat).unwrap();
        assert_eq!(out.len(), 6);
        let expect = [3.0 * third, 3.0 * third, 3.0 * third, 6.0 * third, 6.0 * third, 9.0 * third];
        assert_eq!(out, expect);
        assert_eq!(ensemble(&parts[..1], &[1.0], MixOp::Concat).unwrap(), parts[0]);
        assert!(ensemble(&parts, &[1.0; 3], MixOp::Sum).is_err());
        assert_eq!(ensemble(&[vec![1.0], vec![2.0]], &[1.0, 0.5], MixOp::Sum).unwrap(), vec![2.0]);
    }

    fn three_source_embedder() -> (Embedder, Bundle, Bundle, StaticTable, IdfTable) {
        let text = toks("cats sleep");
        let mut bert = Bundle::new(BundleMeta {
            source: "deep".into(),
            layers: 12,
            dim: 2,
            tokenizer: String::new(),
            synthetic: false,
        });
        let mut elmo = Bundle::new(BundleMeta {
            source: "three".into(),
            layers: 3,
            dim: 3,
            tokenizer: String::new(),
            synthetic: false,
        });
        for p in 0..2 {
            let pf = p as f64;
            bert.insert("q:1", p, (0..12).map(|l| vec![pf + l as f64, -(l as f64)]).collect()).unwrap();
            elmo.insert("q:1", p, (0..3).map(|l| vec![pf, l as f64, 1.0]).collect()).unwrap();
        }
        let mut fast = StaticTable::new(1, vec![0.0]).unwrap();
        fast.insert("cats", vec![4.0]).unwrap();
        let idf = compute_idf(&[toks("cats sleep"), toks("dogs sleep")]).unwrap();
        let mut bert_m = vec![0.25; 4];
        bert_m.extend([0.0; 8]);
        let sources = vec![
            (Source::Bundle(bert.clone()), SourceSpec { layers: bert_m, idf: false, mix: MixOp::Concat }),
            (Source::Bundle(elmo.clone()), SourceSpec { layers: vec![0.0, 0.0, 1.0], idf: true, mix: MixOp::Sum }),
            (Source::Static(fast.clone()), SourceSpec { layers: vec![1.0], idf: true, mix: MixOp::Sum }),
        ];
        let third = 1.0 / 3.0;
        let e = Embedder::new(sources, vec![third; 3], MixOp::Concat, Some(idf.clone())).unwrap();
        assert_eq!(text.len(), 2);
        (e, bert, elmo, fast, idf)
    }

    #[test]
    fn full_mixture_and_ensemble_matches_stepwise_oracle() {
        let (e, bert, elmo, fast, idf) = three_source_embedder();
        assert_eq!(e.dim(), 4 * 2 + 3 + 1);
        let text = toks("cats sleep");
        let m = e.embed_text("q:1", &text).unwrap();
        assert_eq!(m.shape(), [2, 12]);
        let third = 1.0 / 3.0;
        for (p, tok) in text.iter().enumerate() {
            let mut row = Vec::new();
            for layer in &bert.get("q:1", p).unwrap()[..4] {
                row.extend(layer.iter().map(|v| third * (0.25 * v)));
            }
            let w = idf.weight(tok);
            row.extend(elmo.get("q:1", p).unwrap()[2].iter().map(|v| third * (v * w)));
            row.push(third * fast.lookup(tok)[0] * w);
            assert_eq!(m.row(p), row.as_slice(), "position {p}");
        }
    }

    #[test]
    fn identity_pipeline_returns_raw_vectors() {
        let mut b = Bundle::new(BundleMeta { source: "s".into(), layers: 1, dim: 4, tokenizer: String::new(), synthetic: false });
        let rows = [[1.0, 2.0, 3.0, 4.0], [0.5, 0.0, -1.0, 2.0], [9.0, 8.0, 7.0, 6.0]];
        for (p, r) in rows.iter().enumerate() {
            b.insert("d:x", p, vec![r.to_vec()]).unwrap();
        }
        let spec = SourceSpec { layers: vec![1.0], idf: false, mix: MixOp::Sum };
        let e = Embedder::new(vec![(Source::Bundle(b), spec)], vec![1.0], MixOp::Concat, None).unwrap();
        let m = e.embed_text("d:x", &toks("a b c")).unwrap();
        assert_eq!(m.shape(), [3, 4]);
        for (p, r) in rows.iter().enumerate() {
            assert_eq!(m.row(p), r);
        }
        let err = e.embed_text("d:x", &toks("a b c d")).unwrap_err();
        assert!(matches!(&err, Error::Data(msg) if msg.contains("(d:x, 3)")), "{err}");
    }

    #[test]
    fn embedder_rejects_inconsistent_specs() {
        let (e, ..) = three_source_embedder();
        let sources = e.sources.clone();
        assert!(Embedder::new(sources.clone(), vec![1.0], MixOp::Concat, e.idf.clone()).is_err());
        assert!(Embedder::new(sources.clone(), vec![1.0; 3], MixOp::Sum, e.idf.clone()).is_err());
        assert!(Embedder::new(sources, vec![1.0; 3], MixOp::Concat, None).is_err());
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let texts = [("q:1".to_string(), toks("the cat")), ("d:7".to_string(), toks("a dog sat"))];
        let spec = SyntheticSpec { layers: 2, dim: 5, seed: 3, context_noise: 0.1 };
        let b = synthetic_bundle(&spec, texts.iter().map(|(i, t)| (i.as_str(), t.as_slice()))).unwrap();
        assert!(b.meta.synthetic);
        assert_eq!(b.len(), 5);
        b.save(dir.path()).unwrap();
        let back = Bundle::load(dir.path()).unwrap();
        assert_eq!(back, b);
        let first = std::fs::read(dir.path().join("records.jsonl")).unwrap();
        back.save(dir.path()).unwrap();
        assert_eq!(std::fs::read(dir.path().join("records.jsonl")).unwrap(), first);
    }

    #[test]
    fn bundle_loader_reports_bad_records() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("meta.json"),
            r#"{"source":"x","layers":2,"dim":2,"tokenizer":"ws","synthetic":false}"#,
        )
        .unwrap();
        std::fs::write(
            dir.path().join("records.jsonl"),
            "{\"example_id\":\"q:1\",\"position\":0,\"layers\":[[1,2],[3,4]]}\n{\"example_id\":\"q:1\",\"position\":1,\"layers\":[[1,2]]}\n",
        )
        .unwrap();
        match Bundle::load(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_vectors_are_unit_norm_and_token_keyed() {
        let texts = [("a".to_string(), toks("x y x"))];
        let spec = SyntheticSpec { layers: 3, dim: 8, seed: 11, context_noise: 0.0 };
        let b = synthetic_bundle(&spec, texts.iter().map(|(i, t)| (i.as_str(), t.as_slice()))).unwrap();
        for p in 0..3 {
            for l in b.get("a", p).unwrap() {
                assert!((l.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(b.get("a", 0).unwrap(), b.get("a", 2).unwrap());
        assert_ne!(b.get("a", 0).unwrap(), b.get("a", 1).unwrap());
        let again = synthetic_bundle(&spec, texts.iter().map(|(i, t)| (i.as_str(), t.as_slice()))).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn static_table_and_idf_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("static.txt");
        std::fs::write(&path, "cat 1 2\ndog 3 4\n").unwrap();
        let t = StaticTable::load(&path).unwrap();
        assert_eq!(t.lookup("dog"), [3.0, 4.0]);
        assert_eq!(t.lookup("emu"), [0.0, 0.0]);
        t.save(&path).unwrap();
        let back = StaticTable::load(&path).unwrap();
        assert_eq!(back.lookup("cat"), [1.0, 2.0]);
        assert!(back.contains(UNK_TOKEN));
        std::fs::write(&path, "cat 1 2\ndog 3\n").unwrap();
        assert!(matches!(StaticTable::load(&path), Err(Error::Parse { line: 2, .. })));

        let idf = compute_idf(&[toks("a b"), toks("b c")]).unwrap();
        let ipath = dir.path().join("idf.txt");
        idf.save(&ipath).unwrap();
        assert_eq!(IdfTable::load(&ipath).unwrap(), idf);
    }
}
