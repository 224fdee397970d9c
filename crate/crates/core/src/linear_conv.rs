//! The LinearConv layer.
//!
//! A layer with `f` filters learns `αf` primary filters `Wᵖ` and a
//! coefficient matrix `A` of shape `αf × (1−α)f`. The remaining `(1−α)f`
//! secondary filters are `Aᵀ·Vᵖ`, where `Vᵖ` is `Wᵖ` flattened to one row
//! per filter. Optionally `A` is factored as `A₁·A₂` with inner rank `r`.
//!
//! Filters are stored `[filters × channels × kh × kw]` and flattened in
//! that order (channel-major, then kernel row, then kernel column). The
//! same order is used by composition, folding, the regularizer and every
//! diagnostic. Primaries occupy the first `αf` output channels.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::alpha::Alpha;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoeffMode {
    Full,
    LowRank { rank: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LinearConvGeometry {
    pub filters: usize,
    pub channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub alpha: Alpha,
    pub stride: usize,
    pub padding: usize,
}

impl LinearConvGeometry {
    pub fn new(filters: usize, channels: usize, kernel: (usize, usize), alpha: Alpha) -> Self {
        Self {
            filters,
            channels,
            kernel_h: kernel.0,
            kernel_w: kernel.1,
            alpha,
            stride: 1,
            padding: 0,
        }
    }

    pub fn with_stride_padding(mut self, stride: usize, padding: usize) -> Self {
        self.stride = stride;
        self.padding = padding;
        self
    }

    /// `h·w·c`, the length of one flattened filter.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    /// `(αf, (1−α)f)`.
    pub fn split(&self) -> Result<(usize, usize)> {
        self.alpha.split(self.filters)
    }

    pub fn validate(&self, mode: CoeffMode) -> Result<(usize, usize)> {
        if self.filters == 0 || self.channels == 0 || self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::config("layer extents must be positive"));
        }
        if self.stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        let (p, s) = self.split()?;
        if let CoeffMode::LowRank { rank } = mode {
            if rank == 0 || rank >= p.min(s) {
                return Err(Error::config(format!(
                    "rank {rank} must satisfy 0 < r < min(αf, (1−α)f) = min({p}, {s})"
                )));
            }
        }
        Ok((p, s))
    }

    pub fn primary_shape(&self, primaries: usize) -> [usize; 4] {
        [primaries, self.channels, self.kernel_h, self.kernel_w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Coefficients<T> {
    Full(Tensor<T>),
    LowRank { left: Tensor<T>, right: Tensor<T> },
}

impl<T: Scalar> Coefficients<T> {
    pub fn mode(&self) -> CoeffMode {
        match self {
            Coefficients::Full(_) => CoeffMode::Full,
            Coefficients::LowRank { left, .. } => CoeffMode::LowRank {
                rank: left.shape()[1],
            },
        }
    }

    /// The dense `αf × (1−α)f` matrix, multiplying out the factors if needed.
    pub fn dense(&self) -> Result<Tensor<T>> {
        match self {
            Coefficients::Full(a) => Ok(a.clone()),
            Coefficients::LowRank { left, right } => left.matmul(right),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Coefficients::Full(a) => a.len(),
            Coefficients::LowRank { left, right } => left.len() + right.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable state of one LinearConv layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConvParams<T> {
    geometry: LinearConvGeometry,
    primary: Tensor<T>,
    coefficients: Coefficients<T>,
}

/// Tape handles for one layer's learnable tensors.
#[derive(Clone, Copy, Debug)]
pub struct LinearConvVars {
    pub primary: Var,
    pub coefficients: CoeffVars,
}

#[derive(Clone, Copy, Debug)]
pub enum CoeffVars {
    Full(Var),
    LowRank { left: Var, right: Var },
}

impl<T: Scalar> LinearConvParams<T> {
    pub fn new(geometry: LinearConvGeometry, primary: Tensor<T>, coefficients: Coefficients<T>) -> Result<Self> {
        let (p, s) = geometry.validate(coefficients.mode())?;
        if primary.shape() != geometry.primary_shape(p) {
            return Err(Error::Dimension {
                op: "linear_conv",
                lhs: primary.shape().to_vec(),
                rhs: geometry.primary_shape(p).to_vec(),
            });
        }
        let coeff_ok = match &coefficients {
            Coefficients::Full(a) => a.shape() == [p, s],
            Coefficients::LowRank { left, right } => {
                let r = left.shape().get(1).copied().unwrap_or(0);
                left.shape() == [p, r] && right.shape() == [r, s]
            }
        };
        if !coeff_ok {
            return Err(Error::shape(
                "linear_conv",
                format!("coefficient shapes do not match {p} primary and {s} secondary filters"),
            ));
        }
        Ok(Self {
            geometry,
            primary,
            coefficients,
        })
    }

    /// Kaiming-uniform primaries (fan-in `h·w·c`) and coefficients drawn
    /// from `U(−1/√(αf), 1/√(αf))`.
    pub fn init<R: Rng>(geometry: LinearConvGeometry, mode: CoeffMode, rng: &mut R) -> Result<Self> {
        let (p, s) = geometry.validate(mode)?;
        let primary = kaiming_uniform(&geometry.primary_shape(p), geometry.patch_len(), rng);
        let bound = 1.0 / (p as f64).sqrt();
        let coefficients = match mode {
            CoeffMode::Full => Coefficients::Full(uniform(&[p, s], bound, rng)),
            CoeffMode::LowRank { rank } => Coefficients::LowRank {
                left: uniform(&[p, rank], bound, rng),
                right: uniform(&[rank, s], bound, rng),
            },
        };
        Self::new(geometry, primary, coefficients)
    }

    pub fn init_seeded(geometry: LinearConvGeometry, mode: CoeffMode, seed: u64) -> Result<Self> {
        Self::init(geometry, mode, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn geometry(&self) -> &LinearConvGeometry {
        &self.geometry
    }

    pub fn mode(&self) -> CoeffMode {
        self.coefficients.mode()
    }

    pub fn primary(&self) -> &Tensor<T> {
        &self.primary
    }

    pub fn coefficients(&self) -> &Coefficients<T> {
        &self.coefficients
    }

    /// Learnable tensors in registration order: primaries, then coefficients.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = vec![&self.primary];
        match &self.coefficients {
            Coefficients::Full(a) => out.push(a),
            Coefficients::LowRank { left, right } => {
                out.push(left);
                out.push(right);
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.primary];
        match &mut self.coefficients {
            Coefficients::Full(a) => out.push(a),
            Coefficients::LowRank { left, right } => {
                out.push(left);
                out.push(right);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.primary.len() + self.coefficients.len()
    }

    pub fn register(&self, tape: &mut Tape<T>) -> Result<LinearConvVars> {
        let primary = tape.param(self.primary.clone())?;
        let coefficients = match &self.coefficients {
            Coefficients::Full(a) => CoeffVars::Full(tape.param(a.clone())?),
            Coefficients::LowRank { left, right } => CoeffVars::LowRank {
                left: tape.param(left.clone())?,
                right: tape.param(right.clone())?,
            },
        };
        Ok(LinearConvVars { primary, coefficients })
    }

    /// Builds `[Wᵖ; reshape(Aᵀ·Vᵖ)]` on the tape.
    ///
    /// The rank-reduced form multiplies right to left, `A₂ᵀ·(A₁ᵀ·Vᵖ)`, so the
    /// intermediate is only `r × hwc`.
    pub fn compose_on(&self, tape: &mut Tape<T>, vars: &LinearConvVars) -> Result<Var> {
        let g = &self.geometry;
        let (p, s) = g.split()?;
        let flat = tape.reshape(vars.primary, &[p, g.patch_len()])?;
        let secondary = match vars.coefficients {
            CoeffVars::Full(a) => tape.matmul_tn(a, flat)?,
            CoeffVars::LowRank { left, right } => {
                let inner = tape.matmul_tn(left, flat)?;
                tape.matmul_tn(right, inner)?
            }
        };
        let secondary = tape.reshape(secondary, &[s, g.channels, g.kernel_h, g.kernel_w])?;
        tape.concat_dim0(&[vars.primary, secondary])
    }

    /// Composed weights `[f × c × kh × kw]` without gradient tracking.
    pub fn compose_weights(&self) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let vars = self.register(&mut tape)?;
        let w = self.compose_on(&mut tape, &vars)?;
        Ok(tape.value(w).clone())
    }

    /// Training forward: compose the weights on the tape, then run exactly
    /// one convolution over `x`.
    pub fn forward_train(&self, tape: &mut Tape<T>, vars: &LinearConvVars, x: Var) -> Result<Var> {
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.geometry.channels {
            return Err(Error::Dimension {
                op: "linear_conv",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.geometry.filters, self.geometry.channels, self.geometry.kernel_h, self.geometry.kernel_w],
            });
        }
        let w = self.compose_on(tape, vars)?;
        tape.conv2d(x, w, self.geometry.stride, self.geometry.padding)
    }

    /// Materializes the composed weights once for inference.
    pub fn fold(&self) -> Result<FoldedConv<T>> {
        Ok(FoldedConv {
            weight: self.compose_weights()?,
            stride: self.geometry.stride,
            padding: self.geometry.padding,
        })
    }
}

/// A LinearConv layer after folding: an ordinary frozen convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedConv<T> {
    pub weight: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> FoldedConv<T> {
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.constant(self.weight.clone())?;
        tape.conv2d(x, w, self.stride, self.padding)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len()
    }
}

/// `U(−√(6/fan_in), √(6/fan_in))`.
pub fn kaiming_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
}

pub fn uniform<T: Scalar, R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(f: usize, c: usize) -> LinearConvGeometry {
        LinearConvGeometry::new(f, c, (3, 3), Alpha::HALF).with_stride_padding(1, 1)
    }

    #[test]
    fn init_shapes() {
        let p = LinearConvParams::<f32>::init_seeded(geom(32, 3), CoeffMode::Full, 1).unwrap();
        assert_eq!(p.primary().shape(), &[16, 3, 3, 3]);
        match p.coefficients() {
            Coefficients::Full(a) => assert_eq!(a.shape(), &[16, 16]),
            _ => unreachable!(),
        }
        assert_eq!(p.param_count(), 432 + 256);
    }

    #[test]
    fn infeasible_alpha_is_a_config_error() {
        let g = LinearConvGeometry::new(32, 3, (3, 3), "0.3".parse().unwrap());
        let err = LinearConvParams::<f32>::init_seeded(g, CoeffMode::Full, 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn rank_must_be_below_both_group_sizes() {
        assert!(LinearConvParams::<f32>::init_seeded(geom(32, 3), CoeffMode::LowRank { rank: 16 }, 1).is_err());
        assert!(LinearConvParams::<f32>::init_seeded(geom(32, 3), CoeffMode::LowRank { rank: 15 }, 1).is_ok());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = LinearConvParams::<f32>::init_seeded(geom(16, 4), CoeffMode::Full, 9).unwrap();
        let b = LinearConvParams::<f32>::init_seeded(geom(16, 4), CoeffMode::Full, 9).unwrap();
        let c = LinearConvParams::<f32>::init_seeded(geom(16, 4), CoeffMode::Full, 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn identity_coefficients_duplicate_primaries() {
        let g = LinearConvGeometry::new(4, 1, (1, 2), Alpha::HALF);
        let primary = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = LinearConvParams::new(g, primary, Coefficients::Full(Tensor::eye(2))).unwrap();
        let w = p.compose_weights().unwrap();
        assert_eq!(w.shape(), &[4, 1, 1, 2]);
        assert_eq!(w.data(), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn averaging_column_gives_mean_filter() {
        let g = LinearConvGeometry::new(4, 1, (1, 2), Alpha::HALF);
        let primary = Tensor::<f64>::from_f64(&[2, 1, 1, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap();
        let a = Tensor::from_f64(&[2, 2], &[0.5, 1.0, 0.5, 0.0]).unwrap();
        let p = LinearConvParams::new(g, primary, Coefficients::Full(a)).unwrap();
        let w = p.compose_weights().unwrap();
        assert_eq!(&w.data()[4..6], &[2.0, 4.0]);
        assert_eq!(&w.data()[6..8], &[1.0, 2.0]);
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let p = LinearConvParams::<f64>::init_seeded(geom(8, 2), CoeffMode::Full, 3).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[2, 2, 5, 5])).unwrap();
        let y = p.forward_train(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 8, 5, 5]);
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let p = LinearConvParams::<f64>::init_seeded(geom(8, 2), CoeffMode::Full, 3).unwrap();
        let mut tape = Tape::new();
        let vars = p.register(&mut tape).unwrap();
        let x = tape.constant(Tensor::zeros(&[1, 3, 5, 5])).unwrap();
        assert!(p.forward_train(&mut tape, &vars, x).is_err());
    }

    #[test]
    fn folding_is_deterministic_and_rank_independent_in_size() {
        let p = LinearConvParams::<f32>::init_seeded(geom(32, 3), CoeffMode::LowRank { rank: 4 }, 5).unwrap();
        let a = p.fold().unwrap();
        let b = p.fold().unwrap();
        assert_eq!(a.weight.data(), b.weight.data());
        assert_eq!(a.param_count(), 32 * 3 * 3 * 3);
        let q = LinearConvParams::<f32>::init_seeded(geom(32, 3), CoeffMode::LowRank { rank: 10 }, 5).unwrap();
        assert_eq!(q.fold().unwrap().param_count(), a.param_count());
    }
}
