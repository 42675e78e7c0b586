//! Finite-difference gradient checks over every primitive and a tiny network.
//!
//! Each case reduces an op's output to a scalar through a fixed random
//! projection so that every output element reaches the loss with a distinct
//! weight.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::diffcore::{finite_diff_check, Array, GradReport, Graph, Mode, NodeId, RunningStats};
use crate::error::Result;
use crate::model::Mrnn;

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub report: GradReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<SuiteCase>,
}

impl SuiteReport {
    pub fn max_rel_error(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_error()).fold(0.0, f64::max)
    }

    pub fn passes(&self) -> bool {
        self.cases.iter().all(|c| c.report.passes(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&str> {
        self.cases
            .iter()
            .filter(|c| !c.report.passes(self.tolerance))
            .map(|c| c.name.as_str())
            .collect()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

/// Magnitudes in `[gap, 1)` with random sign, clear of the ReLU/PReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(gap..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).expect("shape matches data")
}

/// A permutation of well-separated values so max-pool argmaxes never tie.
fn separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37 - 1.0).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Array::new(shape.to_vec(), vals).expect("shape matches data")
}

fn project(g: &mut Graph, y: NodeId, w: &Array) -> Result<NodeId> {
    let wn = g.constant(w.clone())?;
    let z = g.mul(y, wn)?;
    g.sum_all(z)
}

fn case<F>(name: &str, params: Vec<(&str, Array)>, forward: F) -> Result<SuiteCase>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let params: Vec<(String, Array)> = params.into_iter().map(|(n, a)| (n.to_string(), a)).collect();
    Ok(SuiteCase {
        name: name.to_string(),
        report: finite_diff_check(forward, &params, GRAD_STEP)?,
    })
}

/// One case per differentiable primitive.
pub fn primitive_cases(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let w = random(r, &[3, 4]);
    out.push(case("add", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], |g, p| {
        let y = g.add(p[0], p[1])?;
        project(g, y, &w)
    })?);
    out.push(case("sub", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], |g, p| {
        let y = g.sub(p[0], p[1])?;
        project(g, y, &w)
    })?);
    out.push(case("mul", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], |g, p| {
        let y = g.mul(p[0], p[1])?;
        project(g, y, &w)
    })?);
    out.push(case("scale_const", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.scale_const(p[0], -1.7)?;
        project(g, y, &w)
    })?);
    out.push(case("add_const", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.add_const(p[0], 0.3)?;
        let y = g.square(y)?;
        project(g, y, &w)
    })?);
    out.push(case("relu", vec![("x", off_kink(r, &[3, 4], 1e-3))], |g, p| {
        let y = g.relu(p[0])?;
        project(g, y, &w)
    })?);
    out.push(case("square", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.square(p[0])?;
        project(g, y, &w)
    })?);
    let w3 = random(r, &[3]);
    out.push(case("sum_last", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.sum_last(p[0])?;
        project(g, y, &w3)
    })?);
    out.push(case("sum_all", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.square(p[0])?;
        g.sum_all(y)
    })?);
    out.push(case("dot", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], |g, p| {
        let y = g.dot(p[0], p[1])?;
        project(g, y, &w3)
    })?);
    out.push(case("euclidean", vec![("a", random(r, &[3, 4])), ("b", random(r, &[3, 4]))], |g, p| {
        let y = g.euclidean(p[0], p[1])?;
        project(g, y, &w3)
    })?);

    let wc = random(r, &[2, 3, 3]);
    out.push(case("concat_channels", vec![("a", random(r, &[2, 3, 2])), ("b", random(r, &[2, 3, 1]))], |g, p| {
        let y = g.concat_channels(&[p[0], p[1]])?;
        project(g, y, &wc)
    })?);
    let ws = random(r, &[3, 2]);
    out.push(case("stack_last", vec![("a", random(r, &[3])), ("b", random(r, &[3]))], |g, p| {
        let y = g.stack_last(&[p[0], p[1]])?;
        project(g, y, &ws)
    })?);
    let wr = random(r, &[12]);
    out.push(case("reshape", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.reshape(p[0], vec![12])?;
        project(g, y, &wr)
    })?);
    let wsl = random(r, &[2, 3]);
    out.push(case("slice_sequence", vec![("x", random(r, &[2, 4, 3]))], |g, p| {
        let y = g.slice_sequence(p[0], 1, 2)?;
        project(g, y, &wsl)
    })?);
    let mask6 = [true, false, true, true, true, false];
    let wm = random(r, &[2, 3, 2]);
    out.push(case("apply_mask", vec![("x", random(r, &[2, 3, 2]))], |g, p| {
        let y = g.apply_mask(p[0], &mask6)?;
        project(g, y, &wm)
    })?);

    let wconv = random(r, &[2, 4, 3]);
    out.push(case(
        "conv1d_same",
        vec![("x", random(r, &[2, 4, 2])), ("kernels", random(r, &[3, 3, 2])), ("bias", random(r, &[3]))],
        |g, p| {
            let y = g.conv1d_same(p[0], p[1], p[2])?;
            project(g, y, &wconv)
        },
    )?);
    let wbn = random(r, &[2, 3, 2]);
    out.push(case(
        "batch_norm/train",
        vec![("x", random(r, &[2, 3, 2])), ("gamma", random(r, &[2])), ("beta", random(r, &[2]))],
        |g, p| {
            let y = g.batch_norm(p[0], p[1], p[2], Mode::Train, None, Some(&mask6))?;
            project(g, y, &wbn)
        },
    )?);
    let stats = RunningStats {
        mean: vec![0.3, -0.1],
        var: vec![0.7, 1.4],
    };
    out.push(case(
        "batch_norm/eval",
        vec![("x", random(r, &[2, 3, 2])), ("gamma", random(r, &[2])), ("beta", random(r, &[2]))],
        |g, p| {
            let y = g.batch_norm(p[0], p[1], p[2], Mode::Eval, Some(&stats), None)?;
            project(g, y, &wbn)
        },
    )?);
    out.push(case("prelu", vec![("x", off_kink(r, &[3, 4], 1e-3)), ("slopes", random(r, &[4]))], |g, p| {
        let y = g.prelu(p[0], p[1])?;
        project(g, y, &w)
    })?);
    let wp = random(r, &[6, 2]);
    out.push(case("pool_same", vec![("x", separated(r, &[6, 2]))], |g, p| {
        let y = g.pool_same(p[0], 3, Some(&mask6))?;
        project(g, y, &wp)
    })?);
    out.push(case("scale_unit", vec![("x", random(r, &[3, 4])), ("scale", random(r, &[1]))], |g, p| {
        let y = g.scale_unit(p[0], p[1])?;
        project(g, y, &w)
    })?);
    let wa = random(r, &[4, 2]);
    out.push(case(
        "affine",
        vec![("x", random(r, &[4, 3])), ("weights", random(r, &[3, 2])), ("bias", random(r, &[2]))],
        |g, p| {
            let y = g.affine(p[0], p[1], p[2])?;
            project(g, y, &wa)
        },
    )?);
    out.push(case("softmax_masked", vec![("x", random(r, &[3, 4]))], |g, p| {
        let y = g.softmax_masked(p[0], Some(&[true, false, true, true]))?;
        project(g, y, &w)
    })?);
    let wmm = random(r, &[3, 2]);
    out.push(case("matmul", vec![("a", random(r, &[3, 4])), ("b", random(r, &[4, 2]))], |g, p| {
        let y = g.matmul(p[0], p[1])?;
        project(g, y, &wmm)
    })?);
    let wmt = random(r, &[3, 5]);
    out.push(case("matmul_trans_b", vec![("a", random(r, &[3, 4])), ("b", random(r, &[5, 4]))], |g, p| {
        let y = g.matmul_trans_b(p[0], p[1])?;
        project(g, y, &wmt)
    })?);
    out.push(case(
        "block_mix",
        vec![("weights", random(r, &[3, 2])), ("m0", random(r, &[3, 4])), ("m1", random(r, &[3, 4]))],
        |g, p| {
            let y = g.block_mix(p[0], &[p[1], p[2]])?;
            project(g, y, &w)
        },
    )?);
    Ok(out)
}

/// The tiny configuration used for the end-to-end check.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        blocks: 2,
        window: 3,
        features: 8,
        ..ModelConfig::default()
    }
}

/// Distance of one random `(h_q=4, h_d=6)` pair through a freshly
/// initialized tiny network, eval-mode batch norm, w.r.t. every weight.
pub fn tiny_model_case(seed: u64) -> Result<SuiteCase> {
    let w = 5;
    let model = Mrnn::new(tiny_config(), w, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let q = random(&mut rng, &[4, w]);
    let d = random(&mut rng, &[6, w]);
    let report = finite_diff_check(
        |g, nodes| {
            let bound = model.store.bind_with(g, nodes)?;
            Ok(model.pair_nodes(g, &bound, &q, &d, Mode::Eval)?.dist)
        },
        &model.store.weights(),
        GRAD_STEP,
    )?;
    Ok(SuiteCase {
        name: "mrnn/tiny".into(),
        report,
    })
}

/// Every primitive plus the tiny network.
pub fn run(seed: u64) -> Result<SuiteReport> {
    let mut cases = primitive_cases(seed)?;
    cases.push(tiny_model_case(seed)?);
    Ok(SuiteReport {
        tolerance: GRAD_TOLERANCE,
        cases,
    })
}
