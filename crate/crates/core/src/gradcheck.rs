//! Finite-difference verification of every primitive plus the composite
//! identities the training loop relies on.
//!
//! A gradient entry passes when `|analytic - numeric| <= 1e-4 * max(|analytic|,
//! |numeric|)` or `|analytic - numeric| <= 1e-6`. The reported error is
//! `|analytic - numeric| / max(|analytic|, |numeric|, 1e-2)`, so both rules
//! collapse to `error <= 1e-4`.

use alloc::boxed::Box;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Primitive, Tensor, Var};
use crate::distill::{soft_embed, ste_embed};
use crate::drift::{drift_loss, DriftConfig};
use crate::rng::Rng;
use crate::{Result, Token};

/// Central difference step.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Tolerance for the exact identities (STE, drift gradient).
pub const IDENTITY_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub cases: usize,
    pub max_error: f64,
    pub tolerance: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor>,
    build: Build,
}

fn entry_error(a: f64, n: f64) -> f64 {
    libm::fabs(a - n) / libm::fabs(a).max(libm::fabs(n)).max(1e-2)
}

fn projection(shape: &[usize]) -> Tensor {
    let mut rng = Rng::seeded(0x5eed);
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

/// `sum(out * W)` for a fixed random `W`, so every output entry matters.
fn scalar_loss(g: &mut Graph, out: Var) -> Result<Var> {
    let w = g.constant(projection(g.value(out).shape()));
    let prod = g.mul(out, w)?;
    Ok(g.sum_all(prod))
}

fn evaluate(inputs: &[Tensor], build: &Build) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let loss = scalar_loss(&mut g, out)?;
    Ok(g.value(loss).item())
}

/// Largest entry error of autodiff against central differences.
fn fd_case(case: &Case, fault: Option<&'static str>) -> Result<f64> {
    let mut g = Graph::new();
    if let Some(op) = fault {
        g.inject_gradient_fault(op);
    }
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    let loss = scalar_loss(&mut g, out)?;
    g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = g.grad(v);
        for j in 0..case.inputs[i].numel() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (evaluate(&plus, &case.build)? - evaluate(&minus, &case.build)?) / (2.0 * FD_STEP);
            worst = worst.max(entry_error(analytic.data()[j], numeric));
        }
    }
    Ok(worst)
}

fn rand(shape: &[usize], rng: &mut Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_in(lo, hi))
}

/// Values bounded away from zero, for kinks and poles.
fn away(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.uniform_in(0.2, 1.5);
        if rng.uniform() < 0.5 {
            -m
        } else {
            m
        }
    })
}

fn prim(p: Primitive) -> Build {
    Box::new(move |g, xs| g.apply(&p, xs))
}

fn unary_cases(p: &Primitive, rng: &mut Rng) -> Vec<Case> {
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    shapes
        .iter()
        .map(|s| {
            let x = match p {
                Primitive::Log | Primitive::Sqrt => rand(s, rng, 0.3, 2.0),
                Primitive::Relu => away(s, rng),
                Primitive::Exp => rand(s, rng, -1.5, 1.5),
                _ => rand(s, rng, -2.0, 2.0),
            };
            Case {
                inputs: vec![x],
                build: prim(p.clone()),
            }
        })
        .collect()
}

fn binary_cases(p: &Primitive, rng: &mut Rng) -> Vec<Case> {
    let pairs: [(&[usize], &[usize]); 4] = [(&[5], &[5]), (&[3, 4], &[4]), (&[2, 3, 4], &[3, 1]), (&[1, 4], &[3, 1])];
    pairs
        .iter()
        .map(|(a, b)| {
            let rhs = if matches!(p, Primitive::Div) {
                away(b, rng)
            } else {
                rand(b, rng, -2.0, 2.0)
            };
            Case {
                inputs: vec![rand(a, rng, -2.0, 2.0), rhs],
                build: prim(p.clone()),
            }
        })
        .collect()
}

fn cases_for(p: &Primitive, rng: &mut Rng) -> Vec<Case> {
    let r = |s: &[usize], rng: &mut Rng| rand(s, rng, -2.0, 2.0);
    match p {
        Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => binary_cases(p, rng),
        Primitive::MatMul => {
            let pairs: [(&[usize], &[usize]); 4] = [(&[2, 3], &[3, 4]), (&[2, 3, 4], &[4, 2]), (&[3, 4], &[2, 4, 5]), (&[2, 3, 4], &[2, 4, 3])];
            pairs
                .iter()
                .map(|(a, b)| Case {
                    inputs: vec![r(a, rng), r(b, rng)],
                    build: prim(Primitive::MatMul),
                })
                .collect()
        }
        Primitive::Softmax { .. } => [(&[5][..], 0), (&[3, 4][..], 1), (&[2, 3, 4][..], 1), (&[2, 3, 4][..], 2)]
            .iter()
            .map(|(s, axis)| Case {
                inputs: vec![r(s, rng)],
                build: prim(Primitive::Softmax { axis: *axis }),
            })
            .collect(),
        Primitive::GatherRows { .. } => [(&[4, 3][..], vec![2, 2, 0]), (&[3, 2, 2][..], vec![1, 0, 1, 2]), (&[6][..], vec![5, 5, 1])]
            .iter()
            .map(|(s, idx)| Case {
                inputs: vec![r(s, rng)],
                build: prim(Primitive::GatherRows { indices: idx.clone() }),
            })
            .collect(),
        Primitive::Sum { .. } | Primitive::Mean { .. } => [(&[5][..], 0), (&[3, 4][..], 0), (&[2, 3, 4][..], 1), (&[2, 3, 4][..], 2)]
            .iter()
            .map(|(s, axis)| Case {
                inputs: vec![r(s, rng)],
                build: prim(match p {
                    Primitive::Sum { .. } => Primitive::Sum { axis: *axis },
                    _ => Primitive::Mean { axis: *axis },
                }),
            })
            .collect(),
        Primitive::Concat { .. } => [(&[2][..], &[3][..], 0), (&[3, 2][..], &[3, 4][..], 1), (&[2, 1, 4][..], &[2, 3, 4][..], 1)]
            .iter()
            .map(|(a, b, axis)| Case {
                inputs: vec![r(a, rng), r(b, rng)],
                build: prim(Primitive::Concat { axis: *axis }),
            })
            .collect(),
        Primitive::Slice { .. } => [(&[6][..], 0, 1, 4), (&[3, 5][..], 1, 2, 5), (&[2, 3, 4][..], 0, 1, 2)]
            .iter()
            .map(|(s, axis, start, end)| Case {
                inputs: vec![r(s, rng)],
                build: prim(Primitive::Slice {
                    axis: *axis,
                    start: *start,
                    end: *end,
                }),
            })
            .collect(),
        Primitive::Broadcast { .. } => [(&[4][..], vec![3, 4]), (&[3, 1][..], vec![3, 5]), (&[1, 2, 1][..], vec![2, 2, 3])]
            .iter()
            .map(|(s, to)| Case {
                inputs: vec![r(s, rng)],
                build: prim(Primitive::Broadcast { shape: to.clone() }),
            })
            .collect(),
        Primitive::Reshape { .. } => [(&[6][..], vec![2, 3]), (&[3, 4][..], vec![12]), (&[2, 3, 4][..], vec![4, 6])]
            .iter()
            .map(|(s, to)| Case {
                inputs: vec![r(s, rng)],
                build: prim(Primitive::Reshape { shape: to.clone() }),
            })
            .collect(),
        _ => unary_cases(p, rng),
    }
}

/// Every differentiable primitive, in report order.
pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Div,
        Primitive::MatMul,
        Primitive::Exp,
        Primitive::Log,
        Primitive::Square,
        Primitive::Sqrt,
        Primitive::Tanh,
        Primitive::Relu,
        Primitive::Gelu,
        Primitive::Softplus,
        Primitive::Scale(-1.7),
        Primitive::Softmax { axis: 0 },
        Primitive::LayerNorm,
        Primitive::GatherRows { indices: vec![] },
        Primitive::Sum { axis: 0 },
        Primitive::Mean { axis: 0 },
        Primitive::SumAll,
        Primitive::MeanAll,
        Primitive::Concat { axis: 0 },
        Primitive::Slice { axis: 0, start: 0, end: 1 },
        Primitive::Broadcast { shape: vec![] },
        Primitive::Reshape { shape: vec![] },
    ]
}

/// Finite-difference row for one primitive over its randomized cases.
pub fn check_primitive(p: &Primitive, seed: u64, fault: Option<&'static str>) -> Result<CheckRow> {
    let mut rng = Rng::seeded(seed);
    let cases = cases_for(p, &mut rng);
    let mut worst = 0.0f64;
    for case in &cases {
        worst = worst.max(fd_case(case, fault)?);
    }
    Ok(CheckRow {
        name: p.name().to_string(),
        cases: cases.len(),
        max_error: worst,
        tolerance: FD_TOLERANCE,
    })
}

/// Forward identity and zero backward. The error is the larger of the
/// largest forward deviation and the largest gradient entry.
pub fn check_stop_gradient(seed: u64) -> Result<CheckRow> {
    let mut rng = Rng::seeded(seed);
    let shapes: [&[usize]; 3] = [&[5], &[3, 4], &[2, 3, 4]];
    let mut worst = 0.0f64;
    for s in shapes {
        let x = rand(s, &mut rng, -2.0, 2.0);
        let mut g = Graph::new();
        let v = g.param(x.clone());
        let sg = g.stop_gradient(v);
        if g.value(sg).data() != x.data() {
            worst = f64::INFINITY;
        }
        let loss = scalar_loss(&mut g, sg)?;
        g.backward(loss)?;
        worst = worst.max(g.grad(v).data().iter().fold(0.0, |m, a| m.max(libm::fabs(*a))));
    }
    Ok(CheckRow {
        name: "stop_gradient".to_string(),
        cases: shapes.len(),
        max_error: worst,
        tolerance: 0.0,
    })
}

/// Random 3-layer tanh/GELU MLP; every weight and bias is checked.
pub fn check_mlp(seed: u64, fault: Option<&'static str>) -> Result<CheckRow> {
    let mut rng = Rng::seeded(seed);
    let dims = [4, 6, 5, 1];
    let mut inputs = vec![rand(&[3, dims[0]], &mut rng, -1.0, 1.0)];
    for w in dims.windows(2) {
        inputs.push(rand(&[w[0], w[1]], &mut rng, -0.8, 0.8));
        inputs.push(rand(&[w[1]], &mut rng, -0.3, 0.3));
    }
    let build: Build = Box::new(|g, xs| {
        let mut h = xs[0];
        for layer in 0..3 {
            h = g.matmul(h, xs[1 + 2 * layer])?;
            h = g.add(h, xs[2 + 2 * layer])?;
            if layer == 0 {
                h = g.tanh(h);
            } else if layer == 1 {
                h = g.gelu(h);
            }
        }
        Ok(g.sum_all(h))
    });
    let worst = fd_case(&Case { inputs, build }, fault)?;
    Ok(CheckRow {
        name: "mlp".to_string(),
        cases: 1,
        max_error: worst,
        tolerance: FD_TOLERANCE,
    })
}

/// STE: forward equals the hard lookup bit for bit; logit gradients equal
/// those of the soft mixture alone. Error is the largest gradient gap, or
/// infinity on any forward mismatch.
pub fn check_ste(seed: u64) -> Result<CheckRow> {
    let mut rng = Rng::seeded(seed);
    let mut worst = 0.0f64;
    let cases = 5;
    for _ in 0..cases {
        let (b, l, k, d) = (2, 4, 3 + rng.below(3), 2 + rng.below(4));
        let codebook = rand(&[k, d], &mut rng, -1.0, 1.0);
        let logits = rand(&[b, l, k], &mut rng, -2.0, 2.0);
        let tokens: Vec<Token> = (0..b * l).map(|_| rng.below(k) as Token).collect();
        let probe = rand(&[b, l, d], &mut rng, -1.0, 1.0);
        let run = |hard: bool| -> Result<(Tensor, Tensor)> {
            let mut g = Graph::new();
            let lv = g.param(logits.clone());
            let p = g.softmax(lv, 2)?;
            let e = if hard {
                ste_embed(&mut g, &tokens, p, &codebook)?
            } else {
                soft_embed(&mut g, p, &codebook)?
            };
            let w = g.constant(probe.clone());
            let prod = g.mul(e, w)?;
            let loss = g.sum_all(prod);
            g.backward(loss)?;
            Ok((g.value(e).clone(), g.grad(lv)))
        };
        let (fwd, g_ste) = run(true)?;
        let (_, g_soft) = run(false)?;
        let d_ = codebook.shape()[1];
        for (i, &t) in tokens.iter().enumerate() {
            let row = &codebook.data()[t as usize * d_..(t as usize + 1) * d_];
            if &fwd.data()[i * d_..(i + 1) * d_] != row {
                worst = f64::INFINITY;
            }
        }
        for (a, s) in g_ste.data().iter().zip(g_soft.data()) {
            worst = worst.max(libm::fabs(a - s));
        }
    }
    Ok(CheckRow {
        name: "ste_identity".to_string(),
        cases,
        max_error: worst,
        tolerance: IDENTITY_TOLERANCE,
    })
}

/// Autodiff gradient of the drift loss against `-2 sum_h V_h / (Z_h N)`.
pub fn check_drift_identity(seed: u64) -> Result<CheckRow> {
    let mut rng = Rng::seeded(seed);
    let cases = 5;
    let mut worst = 0.0f64;
    let cfg = DriftConfig::default();
    for _ in 0..cases {
        let b = 2 + rng.below(5);
        let shape = [b, 1 + rng.below(3), 1 + rng.below(4), 2 + rng.below(4)];
        let x = rand(&shape, &mut rng, -0.3, 0.3);
        let y = rand(&shape, &mut rng, -0.3, 0.3);
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let terms = drift_loss(&mut g, xv, &y, &cfg)?;
        g.backward(terms.loss)?;
        let grad = g.grad(xv);
        let n = (x.numel() / shape[3]) as f64;
        let mut oracle = vec![0.0; x.numel()];
        for (v, z) in terms.drifts.iter().zip(&terms.normalizers) {
            for (o, a) in oracle.iter_mut().zip(v.data()) {
                *o -= 2.0 * a / (z * n);
            }
        }
        for (a, o) in grad.data().iter().zip(&oracle) {
            worst = worst.max(libm::fabs(a - o));
        }
    }
    Ok(CheckRow {
        name: "drift_identity".to_string(),
        cases,
        max_error: worst,
        tolerance: IDENTITY_TOLERANCE,
    })
}

/// The full table: one row per primitive, then the composite checks.
/// `fault` corrupts the backward pass of the named operator.
pub fn run_suite(seed: u64, fault: Option<&'static str>) -> Result<Vec<CheckRow>> {
    let mut rows = Vec::new();
    for (i, p) in primitives().iter().enumerate() {
        rows.push(check_primitive(p, seed.wrapping_add(i as u64), fault)?);
    }
    rows.push(check_stop_gradient(seed)?);
    rows.push(check_mlp(seed, fault)?);
    rows.push(check_ste(seed)?);
    rows.push(check_drift_identity(seed)?);
    Ok(rows)
}
