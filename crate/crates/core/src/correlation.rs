//! Correlation-based regularization of primary filters.
//!
//! For each layer the filters are flattened to rows, each row is scaled to
//! unit l2 norm, and the loss adds `‖N·Nᵀ − I‖₁` (entrywise absolute sum).
//! The normalization lives inside the loss graph; stored weights are never
//! modified.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `‖normalize_rows(W)·normalize_rows(W)ᵀ − I‖₁` for one weight tensor on the tape.
pub fn layer_corr_loss<T: Scalar>(tape: &mut Tape<T>, weights: Var) -> Result<Var> {
    let k = tape.shape(weights)[0];
    let d = tape.value(weights).row_len();
    let flat = tape.reshape(weights, &[k, d])?;
    let unit = tape.row_l2_normalize(flat)?;
    let gram = tape.matmul_nt(unit, unit)?;
    let eye = tape.constant(Tensor::eye(k))?;
    let diff = tape.sub(gram, eye)?;
    tape.l1_norm(diff)
}

/// Sum of [`layer_corr_loss`] over every primary-weight tensor. An empty
/// list yields a constant zero.
pub fn corr_loss<T: Scalar>(tape: &mut Tape<T>, primaries: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &w in primaries {
        let term = layer_corr_loss(tape, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => tape.constant(Tensor::scalar(T::zero())),
    }
}

/// Loss value without gradient tracking.
pub fn corr_loss_value<T: Scalar>(weights: &[&Tensor<T>]) -> Result<f64> {
    let mut tape = Tape::inference();
    let vars = weights
        .iter()
        .map(|w| tape.constant((*w).clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = corr_loss(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0].to_f64().unwrap_or(f64::NAN))
}

/// Row-normalized Gram matrix of a filter bank, with diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationReport {
    pub layer: usize,
    /// `k × k`, row-major.
    pub gram: Vec<f64>,
    pub filters: usize,
    pub loss_contribution: f64,
    /// Singular values of the normalized rows above `1e-6·σ_max`.
    pub numerical_rank: usize,
}

/// Builds the report for weights `[k × …]` (conv filters, primaries or
/// composed weights alike). Computed in 64-bit regardless of `T`.
pub fn correlation_report<T: Scalar>(layer: usize, weights: &Tensor<T>) -> Result<CorrelationReport> {
    let k = weights.rows();
    let d = weights.row_len();
    let mut rows: Vec<f64> = weights.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    for (r, row) in rows.chunks_mut(d).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::DegenerateFilter { row: r, norm });
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut gram = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let dot: f64 = rows[i * d..(i + 1) * d]
                .iter()
                .zip(&rows[j * d..(j + 1) * d])
                .map(|(a, b)| a * b)
                .sum();
            gram[i * k + j] = dot;
            gram[j * k + i] = dot;
        }
    }
    let loss_contribution = gram
        .iter()
        .enumerate()
        .map(|(idx, g)| if idx / k == idx % k { (g - 1.0).abs() } else { g.abs() })
        .sum();
    Ok(CorrelationReport {
        layer,
        gram,
        filters: k,
        loss_contribution,
        numerical_rank: numerical_rank(&rows, k, d),
    })
}

/// Count of singular values above `1e-6·σ_max` of a row-major `rows × cols` matrix.
pub fn numerical_rank(data: &[f64], rows: usize, cols: usize) -> usize {
    let m = DMatrix::from_row_slice(rows, cols, data);
    let sv = m.singular_values();
    let max = sv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > 1e-6 * max).count()
}

impl CorrelationReport {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.gram[i * self.filters + j]
    }

    pub fn max_off_diagonal(&self) -> f64 {
        let k = self.filters;
        (0..k * k)
            .filter(|idx| idx / k != idx % k)
            .map(|idx| self.gram[idx].abs())
            .fold(0.0, f64::max)
    }

    /// One line per Gram row.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.gram.chunks(self.filters) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{}", line.join(","));
        }
        out
    }

    /// Binary 8-bit grayscale PGM mapping `[-1, 1]` to `[0, 255]`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let k = self.filters;
        let mut out = format!("P5\n{k} {k}\n255\n").into_bytes();
        out.extend(self.gram.iter().map(|v| gray_level(*v)));
        out
    }
}

pub(crate) fn gray_level(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}
