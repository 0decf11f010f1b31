//! Helpers shared by the integration suites.
#![allow(dead_code)]

pub mod cases;

use attndrop::rng::RngStream;
use attndrop::tensor::{Graph, Tensor, Var};
use attndrop::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so that entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const FD_FLOOR: f64 = 1e-3;

pub fn random_tensor(shape: &[usize], rng: &mut RngStream, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi)).unwrap()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FD_FLOOR)
}

/// Output of `f` contracted with fixed random weights, so every output
/// element contributes a distinct amount to the scalar.
fn scalarise(g: &mut Graph, out: Var, weights: &Tensor) -> Result<Var> {
    if g.value(out).numel() == 1 {
        return Ok(out);
    }
    let w = g.constant(weights.reshaped(g.shape(out))?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

fn output_weights<F>(inputs: &[Tensor], f: &F, rng: &mut RngStream) -> Tensor
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let n = g.value(out).numel();
    random_tensor(&[n], rng, 0.5, 1.5)
}

fn eval_scalar<F>(inputs: &[Tensor], f: &F, weights: &Tensor) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let s = scalarise(&mut g, out, weights).unwrap();
    g.value(s).item().unwrap()
}

/// Largest per-element relative error between the tape gradient and a
/// central difference of `f`, over every element of every input.
pub fn max_fd_error<F>(inputs: &[Tensor], f: F, rng: &mut RngStream) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let weights = output_weights(inputs, &f, rng);
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars).unwrap();
    let loss = scalarise(&mut g, out, &weights).unwrap();
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let x = inputs[i].data()[j];
            probe[i].data_mut()[j] = x + FD_STEP;
            let up = eval_scalar(&probe, &f, &weights);
            probe[i].data_mut()[j] = x - FD_STEP;
            let down = eval_scalar(&probe, &f, &weights);
            probe[i].data_mut()[j] = x;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Random inputs of the given shapes in `[lo, hi)`.
pub fn random_inputs(shapes: &[&[usize]], rng: &mut RngStream, lo: f64, hi: f64) -> Vec<Tensor> {
    shapes.iter().map(|s| random_tensor(s, rng, lo, hi)).collect()
}

/// Worst FD error of `f` over `points` independent random input draws.
pub fn fd_over_points<F>(shapes: &[&[usize]], lo: f64, hi: f64, points: usize, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = RngStream::new(seed);
    (0..points)
        .map(|_| {
            let inputs = random_inputs(shapes, &mut rng, lo, hi);
            max_fd_error(&inputs, &f, &mut rng)
        })
        .fold(0.0, f64::max)
}

/// Numerically stable softmax written directly from the definition.
pub fn softmax_oracle(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Zero-padded sliding-window convolution of one row.
pub fn conv_oracle(row: &[f64], kernel: &[f64]) -> Vec<f64> {
    let c = (kernel.len() / 2) as isize;
    (0..row.len() as isize)
        .map(|j| {
            kernel
                .iter()
                .enumerate()
                .map(|(t, &w)| {
                    let src = j + t as isize - c;
                    if src >= 0 && (src as usize) < row.len() {
                        w * row[src as usize]
                    } else {
                        0.0
                    }
                })
                .sum()
        })
        .collect()
}

/// Top-k by a full stable sort on (value descending, index ascending).
pub fn topk_oracle(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Trace of the sample covariance between paired vectors, computed with two
/// passes (means first, then centred products).
pub fn two_pass_cov_trace(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let m = a.len() as f64;
    let d = a[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let ma = a.iter().map(|v| v[j]).sum::<f64>() / m;
        let mb = b.iter().map(|v| v[j]).sum::<f64>() / m;
        total += a.iter().zip(b).map(|(x, y)| (x[j] - ma) * (y[j] - mb)).sum::<f64>() / (m - 1.0);
    }
    total
}

/// Prints one acceptance line and returns whether it passed.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] criterion {id}: {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    pass
}
