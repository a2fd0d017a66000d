//! Central finite-difference checks of every tape primitive.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Mask, Result, Tape, Tensor, Var};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;
/// Inputs are kept at least this far from kinks of clamp and minimum.
const KINK_MARGIN: f64 = 1e-2;

pub const PRIMITIVES: [&str; 22] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "add_scalar",
    "exp",
    "log",
    "gelu",
    "clamp",
    "minimum",
    "layer_norm",
    "embedding",
    "masked_softmax",
    "log_softmax",
    "cross_entropy",
    "gather",
    "select_rows",
    "sum",
    "mean",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Builds the primitive's output from its inputs on `tape`.
type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Scalar loss `Σ w ⊙ f(inputs)` with fixed random weights `w`.
fn loss_of(tape: &mut Tape, inputs: &[Var], build: &Build<'_>, weights: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<Var> {
    let out = build(tape, inputs)?;
    let shape = tape.value(out).shape().to_vec();
    let n = tape.value(out).len();
    let w = weights.get_or_insert_with(|| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let wv = tape.constant(Tensor::new(shape, w.clone())?);
    let prod = tape.mul(out, wv)?;
    tape.sum(prod)
}

/// Worst relative error between tape and central-difference gradients over
/// every entry of every input.
pub fn check(inputs: &[Tensor], build: &Build<'_>, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut weights = None;
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(Arc::new(t.clone()), true)).collect();
    let loss = loss_of(&mut tape, &vars, build, &mut weights, rng)?;
    let grads = tape.backward(loss)?;
    let eval = |values: &[Tensor], weights: &mut Option<Vec<f64>>, rng: &mut ChaCha8Rng| -> Result<f64> {
        let mut t = Tape::new();
        let v: Vec<Var> = values.iter().map(|x| t.constant(x.clone())).collect();
        let l = loss_of(&mut t, &v, build, weights, rng)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        for (k, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].values_mut()[k] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].values_mut()[k] -= STEP;
            let numeric = (eval(&plus, &mut weights, rng)? - eval(&minus, &mut weights, rng)?) / (2.0 * STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Uniform values kept away from `points` by the kink margin.
fn away_from(rng: &mut ChaCha8Rng, shape: &[usize], points: &[f64]) -> Tensor {
    let n = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if points.iter().all(|p| (v - p).abs() > KINK_MARGIN) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), values).expect("shape")
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(1..5))
}

/// One random instance of primitive `name`: inputs and builder.
#[allow(clippy::type_complexity)]
fn instance(name: &str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Box<Build<'static>>) {
    let (m, k, n) = dims(rng);
    match name {
        "matmul" => (
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[k, n], -1.0, 1.0)],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        "matmul_nt" => (
            vec![uniform(rng, &[m, k], -1.0, 1.0), uniform(rng, &[n, k], -1.0, 1.0)],
            Box::new(|t, v| t.matmul_nt(v[0], v[1])),
        ),
        "add" | "sub" | "mul" => {
            let a = uniform(rng, &[m, n], -2.0, 2.0);
            let b = uniform(rng, &[m, n], -2.0, 2.0);
            let op: Box<Build<'static>> = match name {
                "add" => Box::new(|t, v| t.add(v[0], v[1])),
                "sub" => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (vec![a, b], op)
        }
        "add_row" => (
            vec![uniform(rng, &[m, n], -1.0, 1.0), uniform(rng, &[n], -1.0, 1.0)],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        "scale" => {
            let c = rng.random_range(-3.0..3.0);
            (vec![uniform(rng, &[m, n], -1.0, 1.0)], Box::new(move |t, v| t.scale(v[0], c)))
        }
        "add_scalar" => {
            let c = rng.random_range(-3.0..3.0);
            (vec![uniform(rng, &[m, n], -1.0, 1.0)], Box::new(move |t, v| t.add_scalar(v[0], c)))
        }
        "exp" => (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.exp(v[0]))),
        "log" => (vec![uniform(rng, &[m, n], 0.2, 3.0)], Box::new(|t, v| t.log(v[0]))),
        "gelu" => (vec![uniform(rng, &[m, n], -3.0, 3.0)], Box::new(|t, v| t.gelu(v[0]))),
        "clamp" => {
            let lo = rng.random_range(-1.0..0.0);
            let hi = rng.random_range(0.1..1.0);
            (vec![away_from(rng, &[m, n], &[lo, hi])], Box::new(move |t, v| t.clamp(v[0], lo, hi)))
        }
        "minimum" => {
            let a = uniform(rng, &[m, n], -2.0, 2.0);
            let values: Vec<f64> = a
                .values()
                .iter()
                .map(|&x| {
                    let d: f64 = rng.random_range(KINK_MARGIN..1.0);
                    if rng.random::<bool>() { x + d } else { x - d }
                })
                .collect();
            let b = Tensor::new(vec![m, n], values).expect("shape");
            (vec![a, b], Box::new(|t, v| t.minimum(v[0], v[1])))
        }
        "layer_norm" => {
            let n = n + 1;
            (
                vec![
                    uniform(rng, &[m, n], -2.0, 2.0),
                    uniform(rng, &[n], 0.5, 1.5),
                    uniform(rng, &[n], -0.5, 0.5),
                ],
                Box::new(|t, v| t.layer_norm(v[0], v[1], v[2])),
            )
        }
        "embedding" => {
            let ids: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
            (vec![uniform(rng, &[m, n], -1.0, 1.0)], Box::new(move |t, v| t.embedding(v[0], &ids)))
        }
        "masked_softmax" => {
            let allow: Vec<bool> = (0..m * n).map(|i| i % n == 0 || rng.random::<bool>()).collect();
            let mask = Mask::new(m, n, allow).expect("mask");
            (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(move |t, v| t.masked_softmax(v[0], &mask)))
        }
        "log_softmax" => (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.log_softmax(v[0]))),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
            let mask: Vec<bool> = (0..m).map(|i| i == 0 || rng.random::<bool>()).collect();
            (
                vec![uniform(rng, &[m, n], -2.0, 2.0)],
                Box::new(move |t, v| t.cross_entropy(v[0], &targets, &mask)),
            )
        }
        "gather" => {
            let picks: Vec<(usize, usize)> = (0..k).map(|_| (rng.random_range(0..m), rng.random_range(0..n))).collect();
            (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(move |t, v| t.gather(v[0], &picks)))
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
            (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(move |t, v| t.select_rows(v[0], &rows)))
        }
        "sum" => (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.sum(v[0]))),
        "mean" => (vec![uniform(rng, &[m, n], -2.0, 2.0)], Box::new(|t, v| t.mean(v[0]))),
        other => panic!("unknown primitive {other}"),
    }
}

/// Checks `instances` random instances of one primitive.
pub fn check_primitive(name: &str, instances: usize, seed: u64) -> Result<PrimitiveReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let (inputs, build) = instance(name, &mut rng);
        worst = worst.max(check(&inputs, build.as_ref(), &mut rng)?);
    }
    Ok(PrimitiveReport {
        name: name.to_string(),
        instances,
        max_rel_error: worst,
    })
}

/// Every primitive in [`PRIMITIVES`].
pub fn check_all(instances: usize, seed: u64) -> Result<Vec<PrimitiveReport>> {
    PRIMITIVES
        .iter()
        .enumerate()
        .map(|(i, name)| check_primitive(name, instances, seed.wrapping_add(i as u64)))
        .collect()
}
