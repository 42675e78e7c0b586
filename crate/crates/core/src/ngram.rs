//! Densely connected n-gram blocks producing multi-resolution feature maps.
//!
//! Block 1 projects each token (window 1, `w → s`). Block `n > 1` convolves the
//! concatenation of all earlier block outputs (`(n−1)·s` channels) with window
//! `ws`. Every block runs CONV → BN → PReLU → POOL → scale.

use rand::Rng;

use crate::config::ModelConfig;
use crate::diffcore::{Array, Graph, Mode, NodeId};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId, ParamStore, Role};

pub const PRELU_INIT: f64 = 0.25;

/// Kernel-bank geometry of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub window: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl BlockShape {
    /// `[c_out, win, c_in]`.
    pub fn kernel_shape(&self) -> [usize; 3] {
        [self.out_channels, self.window, self.in_channels]
    }

    pub fn param_count(&self) -> usize {
        let c = self.out_channels;
        // kernels, bias, gamma, beta, slopes, scale
        c * self.window * self.in_channels + 4 * c + 1
    }
}

/// Shapes of all `blocks` blocks for input dimension `w`, without allocating.
pub fn block_shapes(blocks: usize, window: usize, features: usize, w: usize) -> Vec<BlockShape> {
    (1..=blocks)
        .map(|n| BlockShape {
            window: if n == 1 { 1 } else { window },
            in_channels: if n == 1 { w } else { (n - 1) * features },
            out_channels: features,
        })
        .collect()
}

/// Store handles for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub shape: BlockShape,
    pub kernels: ParamId,
    pub bias: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub slopes: ParamId,
    pub scale: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NgramParams {
    pub blocks: Vec<BlockParams>,
    pub pool_width: usize,
}

/// Glorot-style uniform draw for a kernel bank.
fn uniform_kernels(shape: BlockShape, rng: &mut impl Rng) -> Array {
    let [c_out, win, c_in] = shape.kernel_shape();
    let limit = (6.0 / ((win * c_in + win * c_out) as f64)).sqrt();
    let data = (0..c_out * win * c_in).map(|_| rng.gen_range(-limit..limit)).collect();
    Array::new(vec![c_out, win, c_in], data).expect("kernel shape")
}

/// Registers every block's arrays in `store` under `prefix`.
pub fn init_blocks(store: &mut ParamStore, prefix: &str, config: &ModelConfig, w: usize, rng: &mut impl Rng) -> NgramParams {
    let blocks = block_shapes(config.blocks, config.window, config.features, w)
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let s = shape.out_channels;
            let name = |part: &str| format!("{prefix}.block{}.{part}", i + 1);
            BlockParams {
                shape,
                kernels: store.push(name("kernels"), Role::Weight, uniform_kernels(shape, rng)),
                bias: store.push(name("bias"), Role::Weight, Array::zeros(&[s])),
                gamma: store.push(name("gamma"), Role::Weight, Array::filled(&[s], 1.0)),
                beta: store.push(name("beta"), Role::Weight, Array::zeros(&[s])),
                slopes: store.push(name("slopes"), Role::Weight, Array::filled(&[s], PRELU_INIT)),
                scale: store.push(name("scale"), Role::Weight, Array::scalar(1.0)),
                running_mean: store.push(name("running_mean"), Role::Stat, Array::zeros(&[s])),
                running_var: store.push(name("running_var"), Role::Stat, Array::filled(&[s], 1.0)),
            }
        })
        .collect();
    NgramParams {
        blocks,
        pool_width: config.pool_width,
    }
}

/// Output of one block plus its batch-norm node (for running-stat updates).
#[derive(Clone, Copy, Debug)]
pub struct GramOutput {
    pub map: NodeId,
    pub bn: NodeId,
}

/// `G_n = SU(POOL(PReLU(BN(CONV(UB)))))` on a `[batch, h, c]` input.
#[allow(clippy::too_many_arguments)]
pub fn gram_block(
    graph: &mut Graph,
    bound: &Bound,
    store: &ParamStore,
    block: &BlockParams,
    upstream: NodeId,
    pool_width: usize,
    mode: Mode,
    mask: Option<&[bool]>,
) -> Result<GramOutput> {
    let c_in = graph.value(upstream).last_dim();
    if c_in != block.shape.in_channels {
        return Err(shape_err!(
            "gram_block: upstream has {c_in} channels, block expects {}",
            block.shape.in_channels
        ));
    }
    let conv = graph.conv1d_same(upstream, bound[block.kernels], bound[block.bias])?;
    let running = store.running_stats(block.running_mean, block.running_var);
    let bn = graph.batch_norm(conv, bound[block.gamma], bound[block.beta], mode, Some(&running), mask)?;
    let act = graph.prelu(bn, bound[block.slopes])?;
    let pooled = graph.pool_same(act, pool_width, mask)?;
    let map = graph.scale_unit(pooled, bound[block.scale])?;
    Ok(GramOutput { map, bn })
}

/// The stacked maps `G_1..G_N`, each `[batch, h, s]`.
#[derive(Clone, Debug)]
pub struct FeatureMaps {
    pub maps: Vec<NodeId>,
    pub bn_nodes: Vec<NodeId>,
}

pub fn multi_resolution_maps(
    graph: &mut Graph,
    bound: &Bound,
    store: &ParamStore,
    params: &NgramParams,
    embedded: NodeId,
    mode: Mode,
    mask: Option<&[bool]>,
) -> Result<FeatureMaps> {
    let mut maps = Vec::with_capacity(params.blocks.len());
    let mut bn_nodes = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let upstream = if maps.is_empty() {
            embedded
        } else {
            graph.concat_channels(&maps)?
        };
        let out = gram_block(graph, bound, store, block, upstream, params.pool_width, mode, mask)?;
        maps.push(out.map);
        bn_nodes.push(out.bn);
    }
    Ok(FeatureMaps { maps, bn_nodes })
}
