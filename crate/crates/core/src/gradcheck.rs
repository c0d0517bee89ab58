//! Finite-difference verification of the backward passes.
//!
//! Every case records a small `f64` graph, reduces its output to a scalar
//! through a fixed random projection and compares the analytic gradient of
//! every input element with a central difference.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, OpKind, Var};
use crate::model::blocks::{BasicResidual, BlockBunch, Block, InformationPool, InvertedResidual};
use crate::model::{ActivationKeep, Model, ModelConfig};
use crate::nn::{ParamId, ParamStore, Recorder};
use crate::tensor::{Shape, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;
/// Inputs are redrawn while any relu input lies closer than this to zero.
pub const KINK_MARGIN: f64 = 1e-4;
const MAX_REDRAWS: usize = 200;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the input gradients of this op in the analytic pass.
    pub fault: Option<OpKind>,
    /// Restricts the run to cases of this op or composite.
    pub only: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: DEFAULT_EPS,
            tolerance: DEFAULT_TOLERANCE,
            seed: 0,
            fault: None,
            only: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseResult {
    pub op: &'static str,
    pub case: &'static str,
    pub elements: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Worst case per op, in suite order.
pub fn summarize(results: &[CaseResult]) -> Vec<(&'static str, f64, bool)> {
    let mut order = Vec::new();
    let mut worst: BTreeMap<&str, (f64, bool)> = BTreeMap::new();
    for r in results {
        let e = worst.entry(r.op).or_insert_with(|| {
            order.push(r.op);
            (0.0, true)
        });
        e.0 = e.0.max(r.max_rel_error);
        e.1 &= r.passed;
    }
    order
        .into_iter()
        .map(|op| {
            let (err, ok) = worst[op];
            (op, err, ok)
        })
        .collect()
}

type Builder = fn(&mut ChaCha8Rng) -> Problem;
type Recording = dyn Fn(&mut Graph<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)>;

/// Inputs of a case and a function recording it on a graph; the function
/// returns the output and the leaf for each input, in order.
pub struct Problem {
    inputs: Vec<Tensor<f64>>,
    record: Box<Recording>,
}

struct Case {
    op: &'static str,
    name: &'static str,
    build: Builder,
}

fn normal(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        // Box-Muller
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        scale * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

fn leaves(g: &mut Graph<f64>, inputs: &[Tensor<f64>]) -> Vec<Var> {
    inputs.iter().map(|t| g.leaf(t.clone().with_requires_grad())).collect()
}

fn simple(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Problem {
    Problem {
        inputs,
        record: Box::new(move |g, xs| {
            let vars = leaves(g, xs);
            let out = f(g, &vars)?;
            Ok((out, vars))
        }),
    }
}

/// A case over a parameter store: inputs are the activations followed by
/// every parameter in store order.
fn with_params(
    activations: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    f: impl Fn(&mut Recorder<'_, f64>, &[Var]) -> Result<Var> + 'static,
) -> Problem {
    let n_act = activations.len();
    let mut inputs = activations;
    inputs.extend(store.iter().map(|p| p.tensor.clone()));
    Problem {
        inputs,
        record: Box::new(move |g, xs| {
            let mut store = store.clone();
            for (p, t) in store.iter_mut().zip(&xs[n_act..]) {
                p.tensor = t.clone();
            }
            let acts = leaves(g, &xs[..n_act]);
            let mut rec = Recorder::new(g, &store, true);
            let params: Vec<Var> = (0..store.len()).map(|i| rec.param(ParamId(i))).collect();
            let out = f(&mut rec, &acts)?;
            Ok((out, acts.into_iter().chain(params).collect()))
        }),
    }
}

fn conv_case(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize) -> Problem {
    let x = normal(rng, Shape::new(2, c_in, 5, 6), 1.0);
    let w = normal(rng, Shape::new(c_out, c_in, k, k), 0.5);
    let b = normal(rng, Shape::new(c_out, 1, 1, 1), 0.5);
    simple(vec![x, w, b], move |g, v| g.conv2d(v[0], v[1], v[2], stride, pad))
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "conv2d",
            name: "3x3 stride 1 pad 1",
            build: |r| conv_case(r, 3, 4, 3, 1, 1),
        },
        Case {
            op: "conv2d",
            name: "3x3 stride 2 pad 1",
            build: |r| conv_case(r, 2, 3, 3, 2, 1),
        },
        Case {
            op: "conv2d",
            name: "1x1 pointwise",
            build: |r| conv_case(r, 4, 3, 1, 1, 0),
        },
        Case {
            op: "depthwise_conv2d",
            name: "3x3",
            build: |r| {
                let x = normal(r, Shape::new(2, 4, 5, 5), 1.0);
                let w = normal(r, Shape::new(4, 1, 3, 3), 0.5);
                let b = normal(r, Shape::new(4, 1, 1, 1), 0.5);
                simple(vec![x, w, b], |g, v| g.depthwise_conv2d(v[0], v[1], v[2]))
            },
        },
        Case {
            op: "relu",
            name: "elementwise",
            build: |r| simple(vec![normal(r, Shape::new(2, 3, 4, 4), 1.0)], |g, v| Ok(g.relu(v[0]))),
        },
        Case {
            op: "pixel_shuffle",
            name: "r = 2",
            build: |r| {
                simple(vec![normal(r, Shape::new(2, 8, 3, 4), 1.0)], |g, v| g.pixel_shuffle(v[0], 2))
            },
        },
        Case {
            op: "pixel_shuffle",
            name: "r = 3",
            build: |r| {
                simple(vec![normal(r, Shape::new(1, 9, 2, 3), 1.0)], |g, v| g.pixel_shuffle(v[0], 3))
            },
        },
        Case {
            op: "concat_channels",
            name: "three inputs",
            build: |r| {
                let xs = [2, 3, 1].map(|c| normal(r, Shape::new(2, c, 3, 3), 1.0)).to_vec();
                simple(xs, |g, v| g.concat_channels(v))
            },
        },
        Case {
            op: "add_scaled",
            name: "alpha 0.7",
            build: |r| {
                let xs = vec![normal(r, Shape::new(2, 3, 3, 3), 1.0), normal(r, Shape::new(2, 3, 3, 3), 1.0)];
                simple(xs, |g, v| g.add_scaled(v[0], v[1], 0.7))
            },
        },
        Case {
            op: "mul",
            name: "elementwise",
            build: |r| {
                let xs = vec![normal(r, Shape::new(2, 3, 3, 3), 1.0), normal(r, Shape::new(2, 3, 3, 3), 1.0)];
                simple(xs, |g, v| g.mul(v[0], v[1]))
            },
        },
        Case {
            op: "sum",
            name: "full reduction",
            build: |r| simple(vec![normal(r, Shape::new(2, 3, 3, 3), 1.0)], |g, v| Ok(g.sum(v[0]))),
        },
        Case {
            op: "l1_loss",
            name: "mean absolute error",
            build: |r| {
                let p = normal(r, Shape::new(2, 3, 4, 4), 1.0);
                let d = Tensor::from_fn(p.shape(), |_, _, _, _| {
                    let m: f64 = r.random_range(0.1..1.0);
                    if r.random_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                });
                let t = Tensor::new(p.shape(), p.data().iter().zip(d.data()).map(|(a, b)| a + b).collect())
                    .expect("same shape");
                simple(vec![p, t], |g, v| g.l1_loss(v[0], v[1]))
            },
        },
        Case {
            op: "channel_shift",
            name: "mean shift",
            build: |r| {
                simple(vec![normal(r, Shape::new(2, 3, 3, 3), 1.0)], |g, v| {
                    g.channel_shift(v[0], &[-0.4488, -0.4371, -0.4040])
                })
            },
        },
        Case {
            op: "basic_block",
            name: "relu, alpha 1",
            build: |r| basic_case(r, true, 1.0),
        },
        Case {
            op: "basic_block",
            name: "linear, alpha 0.5",
            build: |r| basic_case(r, false, 0.5),
        },
        Case {
            op: "inverted_block",
            name: "t = 2",
            build: |r| {
                let mut store = ParamStore::new();
                let block = InvertedResidual::new(&mut store, r, "i", 3, 2).expect("valid block");
                let x = normal(r, Shape::new(1, 3, 4, 4), 1.0);
                with_params(vec![x], store, move |rec, v| block.forward(rec, &v[0]))
            },
        },
        Case {
            op: "bunch",
            name: "three blocks",
            build: |r| bunch_case(r, 3),
        },
        Case {
            op: "bunch",
            name: "two blocks",
            build: |r| bunch_case(r, 2),
        },
        Case {
            op: "pool",
            name: "six taps",
            build: |r| {
                let mut store = ParamStore::new();
                let pool = InformationPool::new(&mut store, r, "pool", 6, 3).expect("valid pool");
                let taps = (0..6).map(|_| normal(r, Shape::new(1, 3, 3, 3), 1.0)).collect();
                with_params(taps, store, move |rec, v| pool.forward(rec, v))
            },
        },
        Case {
            op: "network",
            name: "tiny model",
            build: |r| {
                let cfg = ModelConfig {
                    n_feats: 2,
                    scale: 2,
                    n_bunches: 3,
                    blocks_per_bunch: vec![2, 2, 1],
                    compress_set: [1].into_iter().collect(),
                    activation_keep: ActivationKeep::All,
                    ..Default::default()
                };
                let model = Model::<f64>::new(cfg, r.random()).expect("valid config");
                let x = normal(r, Shape::new(1, 3, 3, 3), 0.5);
                let store = model.params().clone();
                with_params(vec![x], store, move |rec, v| model.forward(rec, &v[0]))
            },
        },
    ]
}

fn basic_case(r: &mut ChaCha8Rng, activation: bool, alpha: f64) -> Problem {
    let mut store = ParamStore::new();
    let block = BasicResidual::new(&mut store, r, "b", 3, activation, alpha).expect("valid block");
    let x = normal(r, Shape::new(1, 3, 4, 4), 1.0);
    with_params(vec![x], store, move |rec, v| block.forward(rec, &v[0]))
}

fn bunch_case(r: &mut ChaCha8Rng, n: usize) -> Problem {
    let mut store = ParamStore::new();
    let blocks = (0..n)
        .map(|k| {
            BasicResidual::new(&mut store, r, &format!("b{k}"), 3, k % 2 == 0, 1.0)
                .map(Block::Basic)
                .expect("valid block")
        })
        .collect();
    let bunch = BlockBunch::new(blocks).expect("1 to 3 blocks");
    let x = normal(r, Shape::new(1, 3, 4, 4), 1.0);
    with_params(vec![x], store, move |rec, v| Ok(bunch.forward(rec, &v[0])?.output))
}

/// Names of every op and composite covered, in suite order.
pub fn suite_ops() -> Vec<&'static str> {
    let mut ops: Vec<&'static str> = Vec::new();
    for c in cases() {
        if !ops.contains(&c.op) {
            ops.push(c.op);
        }
    }
    ops
}

fn scalar_loss(problem: &Problem, g: &mut Graph<f64>, xs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<(Var, Vec<Var>)> {
    let (out, vars) = (problem.record)(g, xs)?;
    if g.value(out).shape() != proj.shape() {
        return Err(Error::config("projection shape mismatch"));
    }
    let p = g.constant(proj.clone());
    let weighted = g.mul(out, p)?;
    Ok((g.sum(weighted), vars))
}

fn check_case(case: &Case, cfg: &GradcheckConfig, rng: &mut ChaCha8Rng) -> Result<CaseResult> {
    // redraw until every relu input clears the kink margin
    let mut attempt = 0;
    let (problem, proj, analytic) = loop {
        let problem = (case.build)(rng);
        let mut probe = Graph::new();
        let (out, _) = (problem.record)(&mut probe, &problem.inputs)?;
        let proj = normal(rng, probe.value(out).shape(), 1.0);
        let mut g = match cfg.fault {
            Some(kind) => Graph::new().with_fault(kind),
            None => Graph::new(),
        };
        let (loss, vars) = scalar_loss(&problem, &mut g, &problem.inputs, &proj)?;
        if g.min_relu_margin().is_none_or(|m| m >= KINK_MARGIN) {
            g.backward(loss)?;
            let grads: Vec<Vec<f64>> = vars
                .iter()
                .zip(&problem.inputs)
                .map(|(&v, t)| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
                .collect();
            break (problem, proj, grads);
        }
        attempt += 1;
        if attempt >= MAX_REDRAWS {
            return Err(Error::numeric(format!("{}: inputs kept landing on a relu kink", case.op)));
        }
    };

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = scalar_loss(&problem, &mut g, xs, &proj)?;
        g.value(loss).item()
    };
    let mut inputs = problem.inputs.clone();
    let mut worst: f64 = 0.0;
    let mut elements = 0;
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + cfg.eps;
            let up = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig - cfg.eps;
            let down = eval(&inputs)?;
            inputs[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * cfg.eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max(rel);
            elements += 1;
        }
    }
    Ok(CaseResult {
        op: case.op,
        case: case.name,
        elements,
        max_rel_error: worst,
        passed: worst < cfg.tolerance,
    })
}

/// Runs the suite, or the cases of `cfg.only`.
pub fn run(cfg: &GradcheckConfig) -> Result<Vec<CaseResult>> {
    let all = cases();
    if let Some(only) = &cfg.only {
        if !all.iter().any(|c| c.op == only) {
            return Err(Error::Usage(format!(
                "unknown op {only}; choose one of {}",
                suite_ops().join(", ")
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut results = Vec::new();
    for case in all.iter().filter(|c| cfg.only.as_deref().is_none_or(|o| o == c.op)) {
        results.push(check_case(case, cfg, &mut rng)?);
    }
    Ok(results)
}
