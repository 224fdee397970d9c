//! Independent reference implementations for the integration tests. None of
//! these call into the engine's numeric paths.
#![allow(dead_code)]

use linearconv::autodiff::{Tape, Var};
use linearconv::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `|a − b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element influences the loss differently.
pub fn project(tape: &mut Tape<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var> {
    let n = tape.value(out).len();
    let flat = tape.reshape(out, &[1, n])?;
    let w = tape.constant(weights.clone().reshape(&[n, 1])?)?;
    let dot = tape.matmul(flat, w)?;
    tape.reshape(dot, &[1])
}

/// Result of a finite-difference comparison.
#[derive(Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// Compares the tape's gradients of `build(inputs)` against central
/// differences on `coords` random coordinates of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], coords: usize, seed: u64, build: F) -> GradCheck
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut r = rng(seed);
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
    let out = build(&mut tape, &vars).unwrap();
    let weights = random(tape.value(out).shape(), &mut r);
    let loss = project(&mut tape, out, &weights).unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let loss = project(&mut tape, out, &weights).unwrap();
        tape.value(loss).data()[0]
    };

    let mut report = GradCheck {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for _ in 0..coords.min(input.len()) {
            let k = r.gen_range(0..input.len());
            let mut values = inputs.to_vec();
            values[i].data_mut()[k] = input.data()[k] + FD_STEP;
            let up = eval(&values);
            values[i].data_mut()[k] = input.data()[k] - FD_STEP;
            let down = eval(&values);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic.data()[k], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("input {i}[{k}]: analytic {} numeric {numeric}", analytic.data()[k]);
            }
        }
    }
    report
}

/// Direct quadruple-loop cross-correlation, `x: [N, C, H, W]`, `w: [F, C, kh, kw]`.
pub fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let [n, c, h, wd] = x.shape()[..] else { panic!("x rank") };
    let [f, c2, kh, kw] = w.shape()[..] else { panic!("w rank") };
    assert_eq!(c, c2);
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * oh * ow];
    for b in 0..n {
        for o in 0..f {
            for y in 0..oh {
                for xo in 0..ow {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xo * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[b, ch, iy as usize, ix as usize]) * w.at(&[o, ch, i, j]);
                            }
                        }
                    }
                    out[((b * f + o) * oh + y) * ow + xo] = acc;
                }
            }
        }
    }
    (vec![n, f, oh, ow], out)
}

/// Secondary filter `i` as `Σ_j a[j, i] · primary_j`, element by element.
pub fn naive_secondaries(primary: &Tensor<f64>, a: &[f64], secondaries: usize) -> Vec<f64> {
    let p = primary.shape()[0];
    let d = primary.len() / p;
    let mut out = vec![0.0; secondaries * d];
    for i in 0..secondaries {
        for e in 0..d {
            let mut acc = 0.0;
            for j in 0..p {
                acc += a[j * secondaries + i] * primary.data()[j * d + e];
            }
            out[i * d + e] = acc;
        }
    }
    out
}

/// Dense `[m × k] · [k × n]`.
pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    out
}

/// `Σ_{i,j} |cos(row_i, row_j) − δ_ij|` by explicit double loop.
pub fn pairwise_cosine_loss(data: &[f64], rows: usize) -> f64 {
    let d = data.len() / rows;
    let row = |i: usize| &data[i * d..(i + 1) * d];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            let dot: f64 = row(i).iter().zip(row(j)).map(|(a, b)| a * b).sum();
            let cos = dot / (norm(row(i)) * norm(row(j)));
            total += if i == j { (cos - 1.0).abs() } else { cos.abs() };
        }
    }
    total
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
