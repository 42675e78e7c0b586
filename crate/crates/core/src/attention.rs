//! Duplex attention: per-position weighting over block resolutions, then
//! document-aware matching of query positions, reduced to one distance.
//!
//! All functions here work on single, unpadded texts: every map is `[h, s]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::ngram::PRELU_INIT;
use crate::params::{Bound, ParamId, ParamStore, Role};

/// Affine → PReLU → affine, followed by a softmax over the score axis.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxBlock {
    pub w1: ParamId,
    pub b1: ParamId,
    pub slopes: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl SoftmaxBlock {
    /// Registers an `input → hidden → output` perceptron.
    pub fn init(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut dense = |a: usize, b: usize| {
            let limit = (6.0 / (a + b) as f64).sqrt();
            let data = (0..a * b).map(|_| rng.gen_range(-limit..limit)).collect();
            Array::new(vec![a, b], data).expect("dense shape")
        };
        let (w1, w2) = (dense(input, hidden), dense(hidden, output));
        Self::register(store, prefix, w1, w2)
    }

    /// Like [`SoftmaxBlock::init`] with non-negative weights, so the block
    /// starts out increasing in every input: larger scores get more weight.
    pub fn init_increasing(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut dense = |a: usize, b: usize| {
            let limit = (6.0 / (a + b) as f64).sqrt();
            let data = (0..a * b).map(|_| rng.gen_range(0.0..limit)).collect();
            Array::new(vec![a, b], data).expect("dense shape")
        };
        let (w1, w2) = (dense(input, hidden), dense(hidden, output));
        Self::register(store, prefix, w1, w2)
    }

    fn register(store: &mut ParamStore, prefix: &str, w1: Array, w2: Array) -> Self {
        let (hidden, output) = (w1.shape()[1], w2.shape()[1]);
        SoftmaxBlock {
            w1: store.push(format!("{prefix}.w1"), Role::Weight, w1),
            b1: store.push(format!("{prefix}.b1"), Role::Weight, Array::zeros(&[hidden])),
            slopes: store.push(format!("{prefix}.slopes"), Role::Weight, Array::filled(&[hidden], PRELU_INIT)),
            w2: store.push(format!("{prefix}.w2"), Role::Weight, w2),
            b2: store.push(format!("{prefix}.b2"), Role::Weight, Array::zeros(&[output])),
        }
    }

    /// The perceptron without the softmax, applied to every row of `x`.
    pub fn scores(&self, graph: &mut Graph, bound: &Bound, x: NodeId) -> Result<NodeId> {
        let hidden = graph.affine(x, bound[self.w1], bound[self.b1])?;
        let act = graph.prelu(hidden, bound[self.slopes])?;
        graph.affine(act, bound[self.w2], bound[self.b2])
    }
}

/// Scalar adjusters `[h, N]`: entry `(i, n)` is the feature sum of `G_n` at position `i`.
pub fn transform(graph: &mut Graph, maps: &[NodeId]) -> Result<NodeId> {
    let sums = maps
        .iter()
        .map(|m| graph.sum_last(*m))
        .collect::<Result<Vec<_>>>()?;
    graph.stack_last(&sums)
}

/// Block weights `[h, N]` and the attention-refined features `[h, s]`.
#[derive(Clone, Copy, Debug)]
pub struct Conducted {
    pub weights: NodeId,
    pub mra: NodeId,
}

pub fn conduct(graph: &mut Graph, bound: &Bound, block: &SoftmaxBlock, maps: &[NodeId], adjusters: NodeId) -> Result<Conducted> {
    let n = graph.value(adjusters).last_dim();
    if n != maps.len() {
        return Err(shape_err!("conduct: {n} adjuster columns for {} maps", maps.len()));
    }
    let scores = block.scores(graph, bound, adjusters)?;
    let weights = graph.softmax_masked(scores, None)?;
    let mra = graph.block_mix(weights, maps)?;
    Ok(Conducted { weights, mra })
}

/// Per-query-position distances `qe` `[h_q]` and weights over the document `[h_q, h_d]`.
#[derive(Clone, Copy, Debug)]
pub struct DocAware {
    pub weights: NodeId,
    pub qe: NodeId,
}

/// Scores every query row against every document row, turns each score
/// through the shared scalar chain, and measures how far each query row is
/// from its attention-weighted document summary.
pub fn doc_aware_encode(
    graph: &mut Graph,
    bound: &Bound,
    block: &SoftmaxBlock,
    mra_q: NodeId,
    mra_d: NodeId,
    doc_mask: Option<&[bool]>,
) -> Result<DocAware> {
    let (qs, ds) = (graph.value(mra_q).shape().to_vec(), graph.value(mra_d).shape().to_vec());
    if qs.len() != 2 || ds.len() != 2 || qs[1] != ds[1] {
        return Err(shape_err!("doc_aware_encode: query {qs:?} vs document {ds:?}"));
    }
    let (hq, hd) = (qs[0], ds[0]);
    if hd == 0 || doc_mask.is_some_and(|m| !m.iter().any(|v| *v)) {
        return Err(Error::Domain("doc_aware_encode: document has no valid positions".into()));
    }
    let dots = graph.matmul_trans_b(mra_q, mra_d)?;
    let column = graph.reshape(dots, vec![hq * hd, 1])?;
    let scored = block.scores(graph, bound, column)?;
    let scored = graph.reshape(scored, vec![hq, hd])?;
    let weights = graph.softmax_masked(scored, doc_mask)?;
    let sae = graph.matmul(weights, mra_d)?;
    let qe = graph.euclidean(sae, mra_q)?;
    Ok(DocAware { weights, qe })
}

/// `dist = Σ qe`.
pub fn aggregate(graph: &mut Graph, qe: NodeId) -> Result<NodeId> {
    graph.sum_all(qe)
}

/// Every attention weight fired for one query–document pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    /// `[N][h_q]`: block weights per query position (each column sums to 1).
    pub mr_weights_q: Vec<Vec<f64>>,
    /// `[N][h_d]`.
    pub mr_weights_d: Vec<Vec<f64>>,
    /// `[h_q][h_d]`: each row sums to 1.
    pub doc_aware_weights: Vec<Vec<f64>>,
    pub qe: Vec<f64>,
    pub dist: f64,
}

/// `[h, N]` row-major values as `N` rows of length `h`.
pub(crate) fn transpose(a: &Array) -> Vec<Vec<f64>> {
    let (h, n) = (a.shape()[0], a.shape()[1]);
    (0..n).map(|j| (0..h).map(|i| a.data()[i * n + j]).collect()).collect()
}

pub(crate) fn rows(a: &Array) -> Vec<Vec<f64>> {
    let c = a.last_dim();
    a.data().chunks(c).map(<[f64]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n: usize) -> (ParamStore, SoftmaxBlock, SoftmaxBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let fc = SoftmaxBlock::init(&mut store, "fc", n, n, n, &mut rng);
        let fe = SoftmaxBlock::init(&mut store, "fe", 1, 4, 1, &mut rng);
        (store, fc, fe)
    }

    fn random(graph: &mut Graph, shape: &[usize], rng: &mut ChaCha8Rng) -> NodeId {
        let len = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        graph.constant(Array::new(shape.to_vec(), data).unwrap()).unwrap()
    }

    #[test]
    fn transform_sums_features() {
        let mut g = Graph::new();
        let ones = g.constant(Array::filled(&[3, 4], 1.0)).unwrap();
        let t = transform(&mut g, &[ones, ones]).unwrap();
        assert_eq!(g.value(t).shape(), [3, 2]);
        assert!(g.value(t).data().iter().all(|v| *v == 4.0));

        let single = g.constant(Array::new(vec![3, 1], vec![1.0, -2.0, 3.5]).unwrap()).unwrap();
        let t = transform(&mut g, &[single]).unwrap();
        assert_eq!(g.value(t).data(), [1.0, -2.0, 3.5]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let maps: Vec<NodeId> = (0..3).map(|_| random(&mut g, &[5, 6], &mut rng)).collect();
        let t = transform(&mut g, &maps).unwrap();
        for (n, m) in maps.iter().enumerate() {
            for i in 0..5 {
                let oracle: f64 = g.value(*m).row(i).iter().sum();
                assert_eq!(g.value(t).at(&[i, n]), oracle);
            }
        }
    }

    #[test]
    fn single_block_conduct_is_identity() {
        let (store, fc, _) = setup(1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = random(&mut g, &[4, 3], &mut rng);
        let t = transform(&mut g, &[m]).unwrap();
        let c = conduct(&mut g, &bound, &fc, &[m], t).unwrap();
        assert_eq!(g.value(c.mra), g.value(m));
    }

    #[test]
    fn uniform_weights_average_blocks() {
        let (mut store, fc, _) = setup(3);
        for id in [fc.w2, fc.b2] {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Array::zeros(&shape);
        }
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<NodeId> = (0..3).map(|_| random(&mut g, &[4, 2], &mut rng)).collect();
        let t = transform(&mut g, &maps).unwrap();
        let c = conduct(&mut g, &bound, &fc, &maps, t).unwrap();
        for i in 0..8 {
            let mean = maps.iter().map(|m| g.value(*m).data()[i]).sum::<f64>() / 3.0;
            assert!((g.value(c.mra).data()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn conduct_matches_composition_oracle() {
        let (store, fc, _) = setup(2);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<NodeId> = (0..2).map(|_| random(&mut g, &[3, 4], &mut rng)).collect();
        let t = transform(&mut g, &maps).unwrap();
        let c = conduct(&mut g, &bound, &fc, &maps, t).unwrap();
        let (w1, w2, sl) = (store.get(fc.w1), store.get(fc.w2), store.get(fc.slopes));
        for i in 0..3 {
            let tq: Vec<f64> = (0..2).map(|n| g.value(t).at(&[i, n])).collect();
            let hidden: Vec<f64> = (0..2)
                .map(|o| {
                    let z = (0..2).map(|a| tq[a] * w1.at(&[a, o])).sum::<f64>();
                    if z >= 0.0 { z } else { sl.data()[o] * z }
                })
                .collect();
            let out: Vec<f64> = (0..2).map(|o| (0..2).map(|a| hidden[a] * w2.at(&[a, o])).sum()).collect();
            let mx = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = out.iter().map(|v| (v - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..4 {
                let mra: f64 = (0..2).map(|n| e[n] / z * g.value(maps[n]).at(&[i, j])).sum();
                assert!((g.value(c.mra).at(&[i, j]) - mra).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_position_document() {
        let (store, _, fe) = setup(1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random(&mut g, &[3, 4], &mut rng);
        let d = random(&mut g, &[1, 4], &mut rng);
        let out = doc_aware_encode(&mut g, &bound, &fe, q, d, None).unwrap();
        assert!(g.value(out.weights).data().iter().all(|v| *v == 1.0));
        for i in 0..3 {
            let oracle = (0..4).map(|j| (g.value(q).at(&[i, j]) - g.value(d).at(&[0, j])).powi(2)).sum::<f64>().sqrt();
            assert!((g.value(out.qe).data()[i] - oracle).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_document_rows_and_identity_collapse() {
        let (store, _, fe) = setup(1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false).unwrap();
        let row = [0.3, -1.2, 0.7];
        let d = g.constant(Array::from_rows(&vec![row.to_vec(); 5]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let q = random(&mut g, &[2, 3], &mut rng);
        let out = doc_aware_encode(&mut g, &bound, &fe, q, d, None).unwrap();
        let sae_dist: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| (g.value(q).at(&[i, j]) - row[j]).powi(2)).sum::<f64>().sqrt())
            .collect();
        for (a, b) in g.value(out.qe).data().iter().zip(&sae_dist) {
            assert!((a - b).abs() < 1e-12);
        }
        let q_same = g.constant(Array::from_rows(&vec![row.to_vec(); 4]).unwrap()).unwrap();
        let one = g.constant(Array::from_rows(&[row.to_vec()]).unwrap()).unwrap();
        let out = doc_aware_encode(&mut g, &bound, &fe, q_same, one, None).unwrap();
        assert!(g.value(out.qe).data().iter().all(|v| *v == 0.0));
        let dist = aggregate(&mut g, out.qe).unwrap();
        assert_eq!(g.scalar(dist).unwrap(), 0.0);
    }

    #[test]
    fn masked_document_positions_get_no_attention() {
        let (store, _, fe) = setup(1);
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random(&mut g, &[2, 3], &mut rng);
        let d = random(&mut g, &[4, 3], &mut rng);
        let mask = [true, false, true, false];
        let out = doc_aware_encode(&mut g, &bound, &fe, q, d, Some(&mask)).unwrap();
        let w = g.value(out.weights);
        for i in 0..2 {
            assert_eq!(w.at(&[i, 1]), 0.0);
            assert_eq!(w.at(&[i, 3]), 0.0);
            assert!((w.at(&[i, 0]) + w.at(&[i, 2]) - 1.0).abs() < 1e-12);
        }
        let err = doc_aware_encode(&mut g, &bound, &fe, q, d, Some(&[false; 4])).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn aggregate_sums() {
        let mut g = Graph::new();
        let qe = g.constant(Array::vector(vec![0.5, 1.5])).unwrap();
        let d = aggregate(&mut g, qe).unwrap();
        assert_eq!(g.scalar(d).unwrap(), 2.0);
        let z = g.constant(Array::zeros(&[3])).unwrap();
        let d = aggregate(&mut g, z).unwrap();
        assert_eq!(g.scalar(d).unwrap(), 0.0);
    }
}
