//! Central finite-difference checks of every differentiable graph op and
//! of the composed fusion, loss and end-to-end model paths.

use crate::distributions::{sequence_loss, AnnotatorLabelSet, LossConfig, LossMode, SequenceTargets, UtteranceTargets};
use crate::error::Result;
use crate::fusion::{fuse_rows, FusionVars};
use crate::model::{BoundModel, ModelConfig, ModelParams};
use crate::numerics::{Graph, OpKind, RngStream, Tensor, Var};
use std::fmt::Write as _;

pub const STEP: f64 = 1e-6;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSED_TOLERANCE: f64 = 1e-4;
pub const INSTANCES: usize = 100;
/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Var + 'a;

/// Largest relative error over `coords` (input index, element index).
/// `fault` corrupts the backward rule of one op in the analytic pass only.
pub fn check_gradient(
    build: &Build<'_>,
    inputs: &[Tensor],
    coords: &[(usize, usize)],
    fault: Option<OpKind>,
) -> Result<f64> {
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_fault(op);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let root = build(&mut g, &vars);
    let grads = g.backward(root)?;
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let r = build(&mut g, &vars);
        g.value(r).item()
    };
    let mut worst = 0.0f64;
    for &(i, j) in coords {
        let x = inputs[i].data()[j];
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] = x + STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] = x - STEP;
        let width = plus[i].data()[j] - minus[i].data()[j];
        let numeric = (eval(&plus) - eval(&minus)) / width;
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[j]);
        worst = worst.max(rel_error(analytic, numeric));
    }
    Ok(worst)
}

fn all_coords(inputs: &[Tensor]) -> Vec<(usize, usize)> {
    inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect()
}

fn random(rng: &mut RngStream, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.uniform_range(lo, hi)).collect())
}

/// Random values in `[-2, 2]` kept at least `gap` away from zero.
fn away_from_zero(rng: &mut RngStream, r: usize, c: usize, gap: f64) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c)
            .map(|_| {
                let m = rng.uniform_range(gap, 2.0);
                if rng.uniform() < 0.5 {
                    -m
                } else {
                    m
                }
            })
            .collect(),
    )
}

/// Reduces `y` to a scalar as `Σ y ⊙ w` with fixed random weights `w`.
fn weigh(g: &mut Graph, y: Var, rng_seed: u64) -> Var {
    let (r, c) = g.value(y).dims2();
    let w = random(&mut RngStream::new(rng_seed), r, c, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w);
    g.sum(p)
}

struct Case {
    name: &'static str,
    /// Builds the inputs of one instance and the function under test.
    make: fn(&mut RngStream) -> (Vec<Tensor>, Box<Build<'static>>),
}

fn dims(rng: &mut RngStream) -> (usize, usize) {
    (rng.range_inclusive(1, 4), rng.range_inclusive(1, 4))
}

macro_rules! unary {
    ($name:literal, $method:ident, $lo:expr, $hi:expr) => {
        Case {
            name: $name,
            make: |rng| {
                let (r, c) = dims(rng);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, $lo, $hi)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.$method(v[0]);
                        weigh(g, y, seed)
                    }),
                )
            },
        }
    };
}

macro_rules! binary {
    ($name:literal, $method:ident) => {
        Case {
            name: $name,
            make: |rng| {
                let (r, c) = dims(rng);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.$method(v[0], v[1]);
                        weigh(g, y, seed)
                    }),
                )
            },
        }
    };
}

fn op_cases() -> Vec<Case> {
    vec![
        Case {
            name: "matmul",
            make: |rng| {
                let (r, m) = dims(rng);
                let c = rng.range_inclusive(1, 4);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, m, -2.0, 2.0), random(rng, m, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.matmul(v[0], v[1]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "matmul_nt",
            make: |rng| {
                let (r, m) = dims(rng);
                let c = rng.range_inclusive(1, 4);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, m, -2.0, 2.0), random(rng, c, m, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.matmul_nt(v[0], v[1]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        binary!("add", add),
        binary!("sub", sub),
        binary!("hadamard", mul),
        Case {
            name: "add_row",
            make: |rng| {
                let (r, c) = dims(rng);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, -2.0, 2.0), random(rng, 1, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.add_row(v[0], v[1]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "scale",
            make: |rng| {
                let (r, c) = dims(rng);
                let (seed, s) = (rng.next_u64(), rng.uniform_range(-2.0, 2.0));
                (
                    vec![random(rng, r, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.scale(v[0], s);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "add_scalar",
            make: |rng| {
                let (r, c) = dims(rng);
                let (seed, s) = (rng.next_u64(), rng.uniform_range(-2.0, 2.0));
                (
                    vec![random(rng, r, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.add_scalar(v[0], s);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        unary!("tanh", tanh, -2.0, 2.0),
        Case {
            name: "relu",
            make: |rng| {
                let (r, c) = dims(rng);
                let seed = rng.next_u64();
                (
                    vec![away_from_zero(rng, r, c, 1e-3)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.relu(v[0]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        unary!("exp", exp, -2.0, 2.0),
        unary!("log", log, 0.1, 2.0),
        unary!("lgamma", lgamma, 0.1, 4.0),
        unary!("softmax", softmax, -2.0, 2.0),
        unary!("log_softmax", log_softmax, -2.0, 2.0),
        Case {
            name: "causal_softmax",
            make: |rng| {
                let n = rng.range_inclusive(1, 4);
                let seed = rng.next_u64();
                (
                    vec![random(rng, n, n, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.causal_softmax(v[0]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "layer_norm",
            make: |rng| {
                let r = rng.range_inclusive(1, 4);
                let c = rng.range_inclusive(2, 5);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, -2.0, 2.0), random(rng, 1, c, -2.0, 2.0), random(rng, 1, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.layer_norm(v[0], v[1], v[2], 1e-5);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "sum",
            make: |rng| {
                let (r, c) = dims(rng);
                let s = rng.uniform_range(-2.0, 2.0);
                (
                    vec![random(rng, r, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.sum(v[0]);
                        g.scale(y, s)
                    }),
                )
            },
        },
        Case {
            name: "mean",
            make: |rng| {
                let (r, c) = dims(rng);
                let s = rng.uniform_range(-2.0, 2.0);
                (
                    vec![random(rng, r, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.mean(v[0]);
                        g.scale(y, s)
                    }),
                )
            },
        },
        unary!("row_sum", row_sum, -2.0, 2.0),
        Case {
            name: "slice_cols",
            make: |rng| {
                let r = rng.range_inclusive(1, 4);
                let c = rng.range_inclusive(2, 5);
                let start = rng.below(c);
                let width = rng.range_inclusive(1, c - start);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.slice_cols(v[0], start, width);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "concat_cols",
            make: |rng| {
                let (r, c) = dims(rng);
                let c2 = rng.range_inclusive(1, 4);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, -2.0, 2.0), random(rng, r, c2, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.concat_cols(&[v[0], v[1]]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
        Case {
            name: "concat_rows",
            make: |rng| {
                let (r, c) = dims(rng);
                let r2 = rng.range_inclusive(1, 4);
                let seed = rng.next_u64();
                (
                    vec![random(rng, r, c, -2.0, 2.0), random(rng, r2, c, -2.0, 2.0)],
                    Box::new(move |g: &mut Graph, v: &[Var]| {
                        let y = g.concat_rows(&[v[0], v[1]]);
                        weigh(g, y, seed)
                    }),
                )
            },
        },
    ]
}

fn fusion_case(rng: &mut RngStream) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (n, q, d, o) =
        (rng.range_inclusive(1, 3), rng.range_inclusive(1, 3), rng.range_inclusive(1, 3), rng.range_inclusive(1, 3));
    let seed = rng.next_u64();
    let inputs = vec![
        random(rng, n, q, -2.0, 2.0),
        random(rng, n, q, -2.0, 2.0),
        random(rng, q, d, -1.0, 1.0),
        random(rng, q, d, -1.0, 1.0),
        random(rng, o, d, -1.0, 1.0),
        random(rng, 1, o, -1.0, 1.0),
        random(rng, o, q, -1.0, 1.0),
        random(rng, o, q, -1.0, 1.0),
    ];
    let build = move |g: &mut Graph, v: &[Var]| {
        let p = FusionVars { u1: v[2], u2: v[3], p: v[4], b: v[5], v1: v[6], v2: v[7] };
        let c = fuse_rows(g, v[0], v[1], &p);
        weigh(g, c, seed)
    };
    (inputs, Box::new(build))
}

fn random_targets(rng: &mut RngStream, n: usize, k: usize, annotators: usize, eps: f64) -> SequenceTargets {
    let rows: Vec<UtteranceTargets> = (0..n)
        .map(|_| {
            let labels =
                AnnotatorLabelSet::new((0..annotators).map(|_| rng.below(k)).collect(), k).expect("labels in range");
            UtteranceTargets::from_labels(&labels, k, eps).expect("valid targets")
        })
        .collect();
    SequenceTargets::new(&rows)
}

fn loss_case(rng: &mut RngStream, mode: LossMode) -> (Vec<Tensor>, Box<Build<'static>>) {
    let n = rng.range_inclusive(1, 4);
    let k = 5;
    let config = LossConfig { mode, lambda: rng.uniform_range(0.5, 20.0), smoothing_eps: 0.01 };
    let targets = random_targets(rng, n, k, 3, config.smoothing_eps);
    let build = move |g: &mut Graph, v: &[Var]| sequence_loss(g, v[0], &targets, &config).0;
    (vec![random(rng, n, k, -2.0, 2.0)], Box::new(build))
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        model_dim: 8,
        heads: 2,
        feedforward_dim: 16,
        encoder_blocks: 1,
        decoder_blocks: 1,
        feature_dim: 4,
        fusion_rank: 4,
        fusion_dim: 6,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

/// Fusion, Transformer and loss on a tiny model, checked at 10 randomly
/// chosen parameter entries.
fn end_to_end_instance(rng: &mut RngStream, fault: Option<OpKind>) -> Result<f64> {
    let cfg = tiny_config();
    let params = ModelParams::init(&cfg, rng)?;
    let n = rng.range_inclusive(1, 5);
    let audio = random(rng, n, cfg.feature_dim, -2.0, 2.0);
    let text = random(rng, n, cfg.feature_dim, -2.0, 2.0);
    let history = Tensor::from_rows(
        &(1..n)
            .map(|_| {
                let raw: Vec<f64> = (0..cfg.classes).map(|_| rng.uniform_range(0.05, 1.0)).collect();
                let t: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / t).collect::<Vec<_>>()
            })
            .collect::<Vec<_>>(),
    );
    let history = if n == 1 { Tensor::zeros(vec![0, cfg.classes]) } else { history };
    let modes = [LossMode::Hard, LossMode::Soft, LossMode::Dpn, LossMode::DpnKl];
    let config = LossConfig { mode: modes[rng.below(4)], ..LossConfig::default() };
    let targets = random_targets(rng, n, cfg.classes, 3, config.smoothing_eps);
    let inputs = params.tensors().to_vec();
    let coords: Vec<(usize, usize)> = (0..10)
        .map(|_| {
            let i = rng.below(inputs.len());
            (i, rng.below(inputs[i].len()))
        })
        .collect();
    let build = |g: &mut Graph, v: &[Var]| {
        let model = BoundModel::rebind(&params, v);
        let logits = model.forward(g, &audio, &text, &history, &mut None).expect("valid shapes");
        sequence_loss(g, logits, &targets, &config).0
    };
    check_gradient(&build, &inputs, &coords, fault)
}

fn run_case(
    name: &str,
    tolerance: f64,
    seed: u64,
    mut instance: impl FnMut(&mut RngStream) -> Result<f64>,
) -> Result<CheckReport> {
    let root = RngStream::new(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let mut rng = root.derive(name, i as u64);
        worst = worst.max(instance(&mut rng)?);
    }
    Ok(CheckReport { name: name.to_string(), instances: INSTANCES, max_rel_error: worst, tolerance })
}

/// Runs every check; `fault` corrupts one op's derivative to exercise
/// the checker itself.
pub fn run_suite(seed: u64, fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    for case in op_cases() {
        out.push(run_case(case.name, OP_TOLERANCE, seed, |rng| {
            let (inputs, build) = (case.make)(rng);
            check_gradient(build.as_ref(), &inputs, &all_coords(&inputs), fault)
        })?);
    }
    out.push(run_case("fusion", COMPOSED_TOLERANCE, seed, |rng| {
        let (inputs, build) = fusion_case(rng);
        check_gradient(build.as_ref(), &inputs, &all_coords(&inputs), fault)
    })?);
    for (name, mode) in [
        ("loss_hard", LossMode::Hard),
        ("loss_soft", LossMode::Soft),
        ("loss_dpn", LossMode::Dpn),
        ("loss_dpn_kl", LossMode::DpnKl),
    ] {
        out.push(run_case(name, OP_TOLERANCE, seed, |rng| {
            let (inputs, build) = loss_case(rng, mode);
            check_gradient(build.as_ref(), &inputs, &all_coords(&inputs), fault)
        })?);
    }
    out.push(run_case("end_to_end", COMPOSED_TOLERANCE, seed, |rng| end_to_end_instance(rng, fault))?);
    Ok(out)
}

pub fn format_table(reports: &[CheckReport]) -> String {
    let mut s = format!("{:<16} {:>9} {:>14} {:>10}  status\n", "op", "instances", "max_rel_error", "tolerance");
    for r in reports {
        let _ = writeln!(
            s,
            "{:<16} {:>9} {:>14.3e} {:>10.0e}  {}",
            r.name,
            r.instances,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    s
}
