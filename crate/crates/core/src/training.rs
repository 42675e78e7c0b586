//! Hard-mined triplet training with Adam, plus checkpoint files.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::dataset::{Dataset, Query, Subset};
use crate::diffcore::{Array, Graph, Mode, NodeId};
use crate::embeddings::Embedder;
use crate::error::{Error, Result};
use crate::evalrank::{self, RankedList};
use crate::model::{Mrnn, SideKind};
use crate::params::Role;

/// One mined `(Q, D⁺, D⁻)` triple with the distances it was chosen by.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub query_id: String,
    pub positive: String,
    pub negative: String,
    pub d_pos: f64,
    pub d_neg: f64,
}

/// Farthest positive and nearest negative; ties go to the smallest doc id.
/// `None` when the pool lacks a positive or a negative.
pub fn mine_hard_triplet(query_id: &str, scored: &[(String, f64, bool)]) -> Option<Triplet> {
    let pick = |relevant: bool, better: fn(f64, f64) -> bool| {
        let mut best: Option<&(String, f64, bool)> = None;
        for c in scored.iter().filter(|c| c.2 == relevant) {
            best = match best {
                Some(b) if !(better(c.1, b.1) || (c.1 == b.1 && c.0 < b.0)) => Some(b),
                _ => Some(c),
            };
        }
        best
    };
    let pos = pick(true, |a, b| a > b)?;
    let neg = pick(false, |a, b| a < b)?;
    Some(Triplet {
        query_id: query_id.to_string(),
        positive: pos.0.clone(),
        negative: neg.0.clone(),
        d_pos: pos.1,
        d_neg: neg.1,
    })
}

/// `max(0, d_pos − d_neg + margin)`.
pub fn triplet_loss(d_pos: f64, d_neg: f64, margin: f64) -> Result<f64> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    Ok((d_pos - d_neg + margin).max(0.0))
}

/// Graph form of [`triplet_loss`].
pub fn triplet_loss_node(graph: &mut Graph, d_pos: NodeId, d_neg: NodeId, margin: f64) -> Result<NodeId> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be > 0, got {margin}")));
    }
    let gap = graph.sub(d_pos, d_neg)?;
    let shifted = graph.add_const(gap, margin)?;
    graph.relu(shifted)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decoupled: bool,
}

impl From<&TrainConfig> for AdamHyper {
    fn from(c: &TrainConfig) -> Self {
        AdamHyper {
            lr: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
            weight_decay: c.weight_decay,
            decoupled: c.decoupled_weight_decay,
        }
    }
}

/// First/second moments per parameter and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Array>) -> Self {
        let m: Vec<Array> = params.into_iter().map(|p| Array::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Coupled weight decay adds `wd·θ` to the
/// gradient; decoupled decay subtracts `lr·wd·θ` from the weights directly.
pub fn adam_step(params: &mut [&mut Array], grads: &[Array], state: &mut AdamState, hp: &AdamHyper) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adam_step: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let (c1, c2) = (1.0 - hp.beta1.powi(t), 1.0 - hp.beta2.powi(t));
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[k].shape() {
            return Err(Error::Shape(format!("adam_step: parameter {k} shape mismatch")));
        }
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (i, theta) in p.data_mut().iter_mut().enumerate() {
            let mut gi = g.data()[i];
            if !hp.decoupled {
                gi += hp.weight_decay * *theta;
            }
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            let update = (m[i] / c1) / ((v[i] / c2).sqrt() + hp.eps);
            if hp.decoupled {
                *theta -= hp.lr * hp.weight_decay * *theta;
            }
            *theta -= hp.lr * update;
        }
    }
    Ok(())
}

const MAGIC: &[u8; 8] = b"MRNNCKPT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub input_dim: usize,
    pub seed: u64,
    /// Word position of the shuffling generator, decimal.
    pub rng_word_pos: String,
    pub epoch: usize,
    pub adam_step: u64,
    pub params: Vec<ParamMeta>,
}

/// Model arrays, optimizer moments and enough state to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub values: Vec<Array>,
    /// Moments of the weights, in store order.
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn capture(model: &Mrnn, train: &TrainConfig, seed: u64, rng: &ChaCha8Rng, epoch: usize, adam: &AdamState) -> Self {
        let entries = model.store.entries();
        Checkpoint {
            header: CheckpointHeader {
                version: 1,
                model: model.config.clone(),
                train: train.clone(),
                input_dim: model.input_dim,
                seed,
                rng_word_pos: rng.get_word_pos().to_string(),
                epoch,
                adam_step: adam.t,
                params: entries
                    .iter()
                    .map(|p| ParamMeta {
                        name: p.name.clone(),
                        shape: p.value.shape().to_vec(),
                        role: p.role,
                    })
                    .collect(),
            },
            values: entries.iter().map(|p| p.value.clone()).collect(),
            adam: adam.clone(),
        }
    }

    /// Rebuilds the model, verifying every array against a fresh construction.
    pub fn to_model(&self) -> Result<Mrnn> {
        let mut model = Mrnn::new(self.header.model.clone(), self.header.input_dim, self.header.seed)?;
        let values = self
            .header
            .params
            .iter()
            .zip(&self.values)
            .map(|(m, v)| (m.name.clone(), v.clone()))
            .collect();
        model.load_values(values)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in self.values.iter().chain(&self.adam.m).chain(&self.adam.v) {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut floats = bytes[16 + len..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        if !(bytes.len() - 16 - len).is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let mut read = |shape: &[usize]| -> Result<Array> {
            let n = shape.iter().product();
            let data: Vec<f64> = floats.by_ref().take(n).collect();
            if data.len() != n {
                return Err(bad("truncated payload"));
            }
            Array::new(shape.to_vec(), data)
        };
        let values = header.params.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?;
        let weights: Vec<&ParamMeta> = header.params.iter().filter(|p| p.role == Role::Weight).collect();
        let m = weights.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?;
        let v = weights.iter().map(|p| read(&p.shape)).collect::<Result<Vec<_>>>()?;
        if floats.next().is_some() {
            return Err(bad("trailing data"));
        }
        let adam = AdamState {
            m,
            v,
            t: header.adam_step,
        };
        Ok(Checkpoint { header, values, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub recall_at_1: f64,
    pub seconds: f64,
    pub triplets: usize,
}

pub fn write_metrics_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,loss,recall@1,seconds\n");
    for e in log {
        out.push_str(&format!("{},{:?},{:?},{:.3}\n", e.epoch, e.loss, e.recall_at_1, e.seconds));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Mrnn,
    pub checkpoint: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Queries skipped by mining because they lack a positive or a negative.
    pub skipped_queries: usize,
}

/// Embedded query and candidate matrices, computed once.
struct EmbeddedQuery<'a> {
    query: &'a Query,
    text: Array,
    docs: Vec<Array>,
    index: HashMap<&'a str, usize>,
}

fn embed_queries<'a>(model: &Mrnn, embedder: &Embedder, queries: &[&'a Query]) -> Result<Vec<EmbeddedQuery<'a>>> {
    queries
        .par_iter()
        .map(|q| {
            Ok(EmbeddedQuery {
                query: q,
                text: model.embed_query(embedder, q)?,
                docs: q.candidates.iter().map(|c| model.embed_doc(embedder, c)).collect::<Result<_>>()?,
                index: q.candidates.iter().enumerate().map(|(i, c)| (c.doc_id.as_str(), i)).collect(),
            })
        })
        .collect()
}

fn mine(model: &Mrnn, items: &[&EmbeddedQuery<'_>]) -> Result<Vec<Triplet>> {
    let mined: Vec<Option<Triplet>> = items
        .par_iter()
        .map(|e| {
            let dists = model.score_candidates(&e.text, &e.docs)?;
            let scored: Vec<(String, f64, bool)> = e
                .query
                .candidates
                .iter()
                .zip(dists)
                .map(|(c, d)| (c.doc_id.clone(), d, c.relevant()))
                .collect();
            Ok(mine_hard_triplet(&e.query.query_id, &scored))
        })
        .collect::<Result<_>>()?;
    Ok(mined.into_iter().flatten().collect())
}

fn rank_embedded(model: &Mrnn, items: &[EmbeddedQuery<'_>]) -> Result<Vec<RankedList>> {
    items
        .par_iter()
        .map(|e| {
            let dists = model.score_candidates(&e.text, &e.docs)?;
            let scored: Vec<(String, f64, bool)> = e
                .query
                .candidates
                .iter()
                .zip(dists)
                .map(|(c, d)| (c.doc_id.clone(), d, c.relevant()))
                .collect();
            evalrank::rank_by_distance(&e.query.query_id, &scored)
        })
        .collect()
}

/// Replaces the initial running statistics with batch statistics of up to
/// `limit` training texts per side, so eval-mode scoring matches the
/// train-mode function from the first epoch on.
fn calibrate(model: &mut Mrnn, items: &[EmbeddedQuery<'_>], limit: usize) -> Result<()> {
    if limit == 0 {
        return Ok(());
    }
    let queries: Vec<&Array> = items.iter().map(|e| &e.text).take(limit).collect();
    let docs: Vec<&Array> = items.iter().flat_map(|e| &e.docs).take(limit).collect();
    if model.tied() {
        let all: Vec<&Array> = queries.iter().chain(&docs).copied().collect();
        model.calibrate_running_stats(SideKind::Query, &all)
    } else {
        model.calibrate_running_stats(SideKind::Query, &queries)?;
        model.calibrate_running_stats(SideKind::Doc, &docs)
    }
}

/// Forward, backward and update for one batch of triplets. Returns the mean loss.
fn train_step(
    model: &mut Mrnn,
    batch: &[Triplet],
    lookup: &HashMap<&str, &EmbeddedQuery<'_>>,
    train: &TrainConfig,
    adam: &mut AdamState,
) -> Result<f64> {
    let mut graph = Graph::new();
    let bound = model.bind(&mut graph, true)?;
    let mut queries = Vec::with_capacity(batch.len());
    let mut docs = Vec::with_capacity(2 * batch.len());
    for t in batch {
        let e = lookup[t.query_id.as_str()];
        queries.push(&e.text);
        docs.push(&e.docs[e.index[t.positive.as_str()]]);
    }
    for t in batch {
        let e = lookup[t.query_id.as_str()];
        docs.push(&e.docs[e.index[t.negative.as_str()]]);
    }
    let b = batch.len();
    let (q_maps, d_maps, bn) = if model.tied() {
        let all: Vec<&Array> = queries.iter().chain(&docs).copied().collect();
        let enc = model.encode(&mut graph, &bound, SideKind::Query, &all, Mode::Train)?;
        let mut texts = enc.texts;
        let d = texts.split_off(b);
        (texts, d, vec![(SideKind::Query, enc.bn_nodes)])
    } else {
        let q = model.encode(&mut graph, &bound, SideKind::Query, &queries, Mode::Train)?;
        let d = model.encode(&mut graph, &bound, SideKind::Doc, &docs, Mode::Train)?;
        (q.texts, d.texts, vec![(SideKind::Query, q.bn_nodes), (SideKind::Doc, d.bn_nodes)])
    };
    let mut total: Option<NodeId> = None;
    for i in 0..b {
        let cq = model.conduct(&mut graph, &bound, SideKind::Query, &q_maps[i])?;
        let cp = model.conduct(&mut graph, &bound, SideKind::Doc, &d_maps[i])?;
        let cn = model.conduct(&mut graph, &bound, SideKind::Doc, &d_maps[b + i])?;
        let mut dp = model.pair(&mut graph, &bound, cq, cp)?.dist;
        let mut dn = model.pair(&mut graph, &bound, cq, cn)?.dist;
        if train.square_distance {
            dp = graph.square(dp)?;
            dn = graph.square(dn)?;
        }
        let l = triplet_loss_node(&mut graph, dp, dn, train.margin)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Usage("empty training batch".into()))?;
    let loss = graph.scale_const(total, 1.0 / b as f64)?;
    let value = graph.scalar(loss)?;
    let grads = graph.backward(loss)?;
    let all_grads = bound.gradients(&graph, &grads);
    let mut params = Vec::new();
    let mut weight_grads = Vec::new();
    for (entry, g) in model.store.entries_mut().iter_mut().zip(all_grads) {
        if entry.role == Role::Weight {
            params.push(&mut entry.value);
            weight_grads.push(g);
        }
    }
    adam_step(&mut params, &weight_grads, adam, &AdamHyper::from(train))?;
    for (kind, nodes) in bn {
        model.update_running_stats(&graph, kind, &nodes, train.bn_momentum)?;
    }
    Ok(value)
}

/// Trains from a fresh initialization under `seed`. `on_epoch` sees each log
/// row as soon as the epoch finishes.
pub fn train(
    dataset: &Dataset,
    embedder: &Embedder,
    model_config: &ModelConfig,
    train: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train.validate()?;
    let mut model = Mrnn::new(model_config.clone(), embedder.dim(), seed)?;
    let train_queries: Vec<&Query> = dataset.subset(Subset::Train).collect();
    let minable: Vec<&Query> = train_queries.iter().copied().filter(|q| q.minable()).collect();
    let skipped_queries = train_queries.len() - minable.len();
    if minable.is_empty() {
        return Err(Error::Data("no training query has both a positive and a negative candidate".into()));
    }
    let mut valid: Vec<&Query> = dataset.subset(Subset::Valid).filter(|q| q.has_positive()).collect();
    if valid.is_empty() {
        valid = minable.clone();
    }
    let train_items = embed_queries(&model, embedder, &minable)?;
    let valid_items = embed_queries(&model, embedder, &valid)?;
    let lookup: HashMap<&str, &EmbeddedQuery<'_>> = train_items.iter().map(|e| (e.query.query_id.as_str(), e)).collect();

    if train.epochs > 0 {
        calibrate(&mut model, &train_items, train.calibration_texts)?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam = AdamState::new(
        model.store.entries().iter().filter(|p| p.role == Role::Weight).map(|p| &p.value),
    );
    let mut log = Vec::new();
    let (mut best, mut stale) = (f64::NEG_INFINITY, 0usize);
    for epoch in 1..=train.epochs {
        let start = Instant::now();
        let mut order: Vec<&EmbeddedQuery<'_>> = train_items.iter().collect();
        order.shuffle(&mut rng);
        let mut epoch_triplets = if train.mine_every_step { Vec::new() } else { mine(&model, &order)? };
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for (k, chunk) in order.chunks(train.batch_size).enumerate() {
            let batch: Vec<Triplet> = if train.mine_every_step {
                mine(&model, chunk)?
            } else {
                let lo = k * train.batch_size;
                epoch_triplets[lo..lo + chunk.len()].to_vec()
            };
            let loss = train_step(&mut model, &batch, &lookup, train, &mut adam)?;
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
        }
        epoch_triplets.clear();
        let lists = rank_embedded(&model, &valid_items)?;
        let row = EpochLog {
            epoch,
            loss: loss_sum / count as f64,
            recall_at_1: evalrank::recall_at_k(&lists, 1)?,
            seconds: start.elapsed().as_secs_f64(),
            triplets: count,
        };
        on_epoch(&row);
        let improved = row.recall_at_1 > best;
        log.push(row);
        if improved {
            best = log.last().expect("pushed").recall_at_1;
            stale = 0;
        } else {
            stale += 1;
            if train.patience > 0 && stale >= train.patience {
                break;
            }
        }
    }
    let checkpoint = Checkpoint::capture(&model, train, seed, &rng, log.len(), &adam);
    Ok(TrainOutcome {
        model,
        checkpoint,
        log,
        skipped_queries,
    })
}
