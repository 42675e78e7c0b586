//! The full network: n-gram encoders for both sides, duplex attention, and the
//! scalar distance between a query and a document.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionTrace, Conducted, SoftmaxBlock};
use crate::config::ModelConfig;
use crate::dataset::{Candidate, Query};
use crate::diffcore::{Array, Graph, Mode, NodeId};
use crate::embeddings::{doc_key, query_key, Embedder};
use crate::error::{shape_err, Error, Result};
use crate::ngram::{self, NgramParams};
use crate::params::{Bound, ParamStore};

/// Encoder parameters for one side of the pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Side {
    pub ngram: NgramParams,
    pub conductor: SoftmaxBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SideKind {
    Query,
    Doc,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mrnn {
    pub config: ModelConfig,
    pub input_dim: usize,
    pub store: ParamStore,
    query: Side,
    /// `None` when the sides share parameters.
    doc: Option<Side>,
    scorer: SoftmaxBlock,
}

/// Per-text block maps (`[h, s]` each) and the batch-norm nodes of the batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub texts: Vec<Vec<NodeId>>,
    pub bn_nodes: Vec<NodeId>,
}

/// Graph nodes produced for one query–document pair.
#[derive(Clone, Copy, Debug)]
pub struct PairNodes {
    pub query: Conducted,
    pub doc: Conducted,
    pub doc_weights: NodeId,
    pub qe: NodeId,
    pub dist: NodeId,
}

fn init_side(store: &mut ParamStore, prefix: &str, config: &ModelConfig, w: usize, rng: &mut ChaCha8Rng) -> Side {
    let ngram = ngram::init_blocks(store, prefix, config, w, rng);
    let n = config.blocks;
    let conductor = SoftmaxBlock::init(store, &format!("{prefix}.conductor"), n, n, n, rng);
    Side { ngram, conductor }
}

/// Pads `texts` (each `[h_i, w]`) into `[B, max h, w]` with a position mask.
pub fn pad_batch(texts: &[&Array]) -> Result<(Array, Vec<bool>)> {
    let w = texts.first().ok_or_else(|| Error::Domain("empty batch".into()))?.last_dim();
    let hmax = texts.iter().map(|t| t.shape()[0]).max().unwrap_or(0);
    let mut data = vec![0.0; texts.len() * hmax * w];
    let mut mask = vec![false; texts.len() * hmax];
    for (b, t) in texts.iter().enumerate() {
        if t.rank() != 2 || t.last_dim() != w {
            return Err(shape_err!("pad_batch: text {b} is {:?}, expected [h, {w}]", t.shape()));
        }
        let h = t.shape()[0];
        data[b * hmax * w..(b * hmax + h) * w].copy_from_slice(t.data());
        mask[b * hmax..b * hmax + h].iter_mut().for_each(|m| *m = true);
    }
    Ok((Array::new(vec![texts.len(), hmax, w], data)?, mask))
}

impl Mrnn {
    pub fn new(config: ModelConfig, input_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let query = init_side(&mut store, if config.tie_sides { "enc" } else { "query" }, &config, input_dim, &mut rng);
        let doc = (!config.tie_sides).then(|| init_side(&mut store, "doc", &config, input_dim, &mut rng));
        let scorer = SoftmaxBlock::init_increasing(&mut store, "scorer", 1, config.scorer_hidden, 1, &mut rng);
        Ok(Mrnn {
            config,
            input_dim,
            store,
            query,
            doc,
            scorer,
        })
    }

    pub fn side(&self, kind: SideKind) -> &Side {
        match kind {
            SideKind::Query => &self.query,
            SideKind::Doc => self.doc.as_ref().unwrap_or(&self.query),
        }
    }

    pub fn scorer(&self) -> &SoftmaxBlock {
        &self.scorer
    }

    pub fn bind(&self, graph: &mut Graph, track: bool) -> Result<Bound> {
        self.store.bind(graph, track)
    }

    /// Runs the n-gram blocks of `kind` over a batch of texts and slices each
    /// text's maps back to its own length.
    pub fn encode(&self, graph: &mut Graph, bound: &Bound, kind: SideKind, texts: &[&Array], mode: Mode) -> Result<Encoded> {
        if texts.iter().any(|t| t.rank() != 2 || t.shape()[0] == 0) {
            return Err(Error::Domain("encode: every text needs at least one token".into()));
        }
        if texts.iter().any(|t| t.last_dim() != self.input_dim) {
            return Err(shape_err!("encode: model expects {}-dim tokens", self.input_dim));
        }
        let (batch, mask) = pad_batch(texts)?;
        let padded = mask.iter().any(|m| !m);
        let input = graph.constant(batch)?;
        let side = self.side(kind);
        let maps = ngram::multi_resolution_maps(
            graph,
            bound,
            &self.store,
            &side.ngram,
            input,
            mode,
            padded.then_some(mask.as_slice()),
        )?;
        let mut out = Vec::with_capacity(texts.len());
        for (b, t) in texts.iter().enumerate() {
            let h = t.shape()[0];
            let per_block = maps
                .maps
                .iter()
                .map(|m| graph.slice_sequence(*m, b, h))
                .collect::<Result<Vec<_>>>()?;
            out.push(per_block);
        }
        Ok(Encoded {
            texts: out,
            bn_nodes: maps.bn_nodes,
        })
    }

    pub fn conduct(&self, graph: &mut Graph, bound: &Bound, kind: SideKind, maps: &[NodeId]) -> Result<Conducted> {
        let adjusters = attention::transform(graph, maps)?;
        attention::conduct(graph, bound, &self.side(kind).conductor, maps, adjusters)
    }

    /// Document-aware matching and aggregation for conducted sides.
    pub fn pair(&self, graph: &mut Graph, bound: &Bound, query: Conducted, doc: Conducted) -> Result<PairNodes> {
        let da = attention::doc_aware_encode(graph, bound, &self.scorer, query.mra, doc.mra, None)?;
        let dist = attention::aggregate(graph, da.qe)?;
        Ok(PairNodes {
            query,
            doc,
            doc_weights: da.weights,
            qe: da.qe,
            dist,
        })
    }

    /// Full pipeline for already-bound parameters.
    pub fn pair_nodes(&self, graph: &mut Graph, bound: &Bound, query: &Array, doc: &Array, mode: Mode) -> Result<PairNodes> {
        let (q_maps, d_maps) = if self.doc.is_none() {
            let enc = self.encode(graph, bound, SideKind::Query, &[query, doc], mode)?;
            (enc.texts[0].clone(), enc.texts[1].clone())
        } else {
            let q = self.encode(graph, bound, SideKind::Query, &[query], mode)?;
            let d = self.encode(graph, bound, SideKind::Doc, &[doc], mode)?;
            (q.texts[0].clone(), d.texts[0].clone())
        };
        let cq = self.conduct(graph, bound, SideKind::Query, &q_maps)?;
        let cd = self.conduct(graph, bound, SideKind::Doc, &d_maps)?;
        self.pair(graph, bound, cq, cd)
    }

    /// Distance and attention trace for one pair.
    pub fn forward_pair(&self, query: &Array, doc: &Array, mode: Mode) -> Result<(f64, AttentionTrace)> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false)?;
        let p = self.pair_nodes(&mut graph, &bound, query, doc, mode)?;
        let dist = graph.scalar(p.dist)?;
        let trace = AttentionTrace {
            mr_weights_q: attention::transpose(graph.value(p.query.weights)),
            mr_weights_d: attention::transpose(graph.value(p.doc.weights)),
            doc_aware_weights: attention::rows(graph.value(p.doc_weights)),
            qe: graph.value(p.qe).data().to_vec(),
            dist,
        };
        Ok((dist, trace))
    }

    /// Eval-mode distances from one query to each document, in input order.
    pub fn score_candidates(&self, query: &Array, docs: &[Array]) -> Result<Vec<f64>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false)?;
        let q = self.encode(&mut graph, &bound, SideKind::Query, &[query], Mode::Eval)?;
        let cq = self.conduct(&mut graph, &bound, SideKind::Query, &q.texts[0])?;
        docs.iter()
            .map(|d| {
                let enc = self.encode(&mut graph, &bound, SideKind::Doc, &[d], Mode::Eval)?;
                let cd = self.conduct(&mut graph, &bound, SideKind::Doc, &enc.texts[0])?;
                let p = self.pair(&mut graph, &bound, cq, cd)?;
                graph.scalar(p.dist)
            })
            .collect()
    }

    /// Folds train-mode batch statistics into the running averages of `kind`:
    /// `running ← momentum·running + (1 − momentum)·batch`.
    pub fn update_running_stats(&mut self, graph: &Graph, kind: SideKind, bn_nodes: &[NodeId], momentum: f64) -> Result<()> {
        let blocks = self.side(kind).ngram.blocks.clone();
        if blocks.len() != bn_nodes.len() {
            return Err(Error::Usage(format!("{} batch-norm nodes for {} blocks", bn_nodes.len(), blocks.len())));
        }
        for (block, node) in blocks.iter().zip(bn_nodes) {
            let stats = graph
                .batch_stats(*node)
                .ok_or_else(|| Error::State("batch-norm node carries no batch statistics".into()))?
                .clone();
            for (id, batch) in [(block.running_mean, &stats.mean), (block.running_var, &stats.var)] {
                let run = self.store.get_mut(id);
                for (r, b) in run.data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
        Ok(())
    }

    /// Sets the running statistics of `kind` to the train-mode batch
    /// statistics of `texts`, encoded as one batch.
    pub fn calibrate_running_stats(&mut self, kind: SideKind, texts: &[&Array]) -> Result<()> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false)?;
        let enc = self.encode(&mut graph, &bound, kind, texts, Mode::Train)?;
        self.update_running_stats(&graph, kind, &enc.bn_nodes, 0.0)
    }

    pub fn tied(&self) -> bool {
        self.doc.is_none()
    }

    pub fn embed_query(&self, embedder: &Embedder, query: &Query) -> Result<Array> {
        let n = query.tokens.len().min(self.config.max_query_len);
        embedder.embed_text(&query_key(&query.query_id), &query.tokens[..n])
    }

    pub fn embed_doc(&self, embedder: &Embedder, doc: &Candidate) -> Result<Array> {
        let n = doc.tokens.len().min(self.config.max_doc_len);
        embedder.embed_text(&doc_key(&doc.doc_id), &doc.tokens[..n])
    }

    /// Replaces all stored arrays, checking names and shapes.
    pub fn load_values(&mut self, values: Vec<(String, Array)>) -> Result<()> {
        if values.len() != self.store.len() {
            return Err(Error::Data(format!("{} arrays for a model with {}", values.len(), self.store.len())));
        }
        for (entry, (name, value)) in self.store.entries_mut().iter_mut().zip(values) {
            if entry.name != name || entry.value.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "array `{name}` {:?} does not match `{}` {:?}",
                    value.shape(),
                    entry.name,
                    entry.value.shape()
                )));
            }
            entry.value = value;
        }
        Ok(())
    }
}
