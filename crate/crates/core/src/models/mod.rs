//! Model construction over the autodiff engine.
//!
//! A [`Model`] owns its parameter tensors; every forward pass registers them
//! on a fresh [`Tape`] and returns the handles so the caller can read
//! gradients back in the same order as [`Model::learnable_mut`].

pub mod arch;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use arch::{ArchSpec, ConvRealization, ConvSpec, LayerSpec, ResolvedLayer, Variant};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linear_conv::{kaiming_uniform, uniform, Coefficients, FoldedConv, LinearConvGeometry, LinearConvParams};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub enum ConvKind<T> {
    Standard(Tensor<T>),
    Linear(LinearConvParams<T>),
    Folded(FoldedConv<T>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv {
        /// 0-based position among conv layers.
        index: usize,
        kind: ConvKind<T>,
        bn: Option<BatchNorm<T>>,
        stride: usize,
        padding: usize,
        /// Primary filter count when the layer is (or was) a LinearConv.
        primaries: Option<usize>,
    },
    MaxPool,
    Flatten,
    FullyConnected {
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
}

/// Which filters of a conv layer to look at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterSet {
    Primary,
    Secondary,
    Composed,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass<T> {
    pub logits: Var,
    /// Learnable tensors, in [`Model::learnable_mut`] order.
    pub params: Vec<Var>,
    /// LinearConv primary weights, for the correlation loss.
    pub primaries: Vec<Var>,
    /// Per batchnorm layer (in order): batch mean and unbiased variance.
    /// Empty in evaluation mode.
    pub batch_stats: Vec<(Vec<T>, Vec<T>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    spec: ArchSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Model<T> {
    /// Builds and initializes `spec` deterministically from `seed`.
    ///
    /// Conv weights are Kaiming-uniform (fan-in `h·w·c`), fc weights and
    /// biases `U(±1/√in)`, batchnorm starts at `γ = 1, β = 0`.
    pub fn build(spec: &ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for resolved in spec.resolve()? {
            layers.push(match resolved {
                ResolvedLayer::Conv {
                    index,
                    spec: c,
                    in_channels,
                    realization,
                    ..
                } => {
                    if c.groups != 1 {
                        return Err(Error::config(format!(
                            "conv layer {}: grouped convolution ({} groups) is supported by accounting only",
                            index + 1,
                            c.groups
                        )));
                    }
                    let (kind, primaries) = match realization {
                        ConvRealization::Conv => {
                            let shape = [c.filters, in_channels, c.kernel_h, c.kernel_w];
                            let fan_in = in_channels * c.kernel_h * c.kernel_w;
                            (ConvKind::Standard(kaiming_uniform(&shape, fan_in, &mut rng)), None)
                        }
                        ConvRealization::Linear { alpha, mode } => {
                            let geometry =
                                LinearConvGeometry::new(c.filters, in_channels, (c.kernel_h, c.kernel_w), alpha)
                                    .with_stride_padding(c.stride, c.padding);
                            let params = LinearConvParams::init(geometry, mode, &mut rng)?;
                            let p = params.primary().rows();
                            (ConvKind::Linear(params), Some(p))
                        }
                    };
                    Layer::Conv {
                        index,
                        kind,
                        bn: c.batchnorm.then(|| BatchNorm::new(c.filters)),
                        stride: c.stride,
                        padding: c.padding,
                        primaries,
                    }
                }
                ResolvedLayer::MaxPool { .. } => Layer::MaxPool,
                ResolvedLayer::Flatten { .. } => Layer::Flatten,
                ResolvedLayer::FullyConnected { inputs, outputs } => {
                    let bound = 1.0 / (inputs as f64).sqrt();
                    Layer::FullyConnected {
                        weight: uniform(&[outputs, inputs], bound, &mut rng),
                        bias: uniform(&[outputs], bound, &mut rng),
                    }
                }
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn is_folded(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                l,
                Layer::Conv {
                    kind: ConvKind::Folded(_),
                    ..
                }
            )
        })
    }

    pub fn has_linear_layers(&self) -> bool {
        self.layers.iter().any(|l| {
            matches!(
                l,
                Layer::Conv {
                    kind: ConvKind::Linear(_),
                    ..
                }
            )
        })
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    pub fn input_channels(&self) -> usize {
        self.spec.input_channels
    }

    /// Runs `x` (`[N × C × H × W]`) through the network.
    ///
    /// With `train` set, batchnorm normalizes with batch statistics (and
    /// needs `N ≥ 2`); otherwise it uses the running averages. Running
    /// averages are not touched here; see [`Model::update_running_stats`].
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, train: bool) -> Result<ForwardPass<T>> {
        let mut params = Vec::new();
        let mut primaries = Vec::new();
        let mut batch_stats = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv {
                    kind, bn, stride, padding, ..
                } => {
                    let mut out = match kind {
                        ConvKind::Standard(w) => {
                            let w = tape.param(w.clone())?;
                            params.push(w);
                            tape.conv2d(h, w, *stride, *padding)?
                        }
                        ConvKind::Linear(p) => {
                            let vars = p.register(tape)?;
                            params.push(vars.primary);
                            match vars.coefficients {
                                crate::linear_conv::CoeffVars::Full(a) => params.push(a),
                                crate::linear_conv::CoeffVars::LowRank { left, right } => {
                                    params.push(left);
                                    params.push(right);
                                }
                            }
                            primaries.push(vars.primary);
                            p.forward_train(tape, &vars, h)?
                        }
                        ConvKind::Folded(f) => f.forward(tape, h)?,
                    };
                    if let Some(bn) = bn {
                        let gamma = tape.param(bn.gamma.clone())?;
                        let beta = tape.param(bn.beta.clone())?;
                        params.push(gamma);
                        params.push(beta);
                        out = if train {
                            let (y, mean, var) = tape.batchnorm2d_train(out, gamma, beta, BN_EPS)?;
                            batch_stats.push((mean, var));
                            y
                        } else {
                            tape.batchnorm2d_eval(
                                out,
                                gamma,
                                beta,
                                bn.running_mean.data(),
                                bn.running_var.data(),
                                BN_EPS,
                            )?
                        };
                    }
                    tape.relu(out)?
                }
                Layer::MaxPool => tape.maxpool2d(h)?,
                Layer::Flatten => tape.flatten(h)?,
                Layer::FullyConnected { weight, bias } => {
                    let w = tape.param(weight.clone())?;
                    let b = tape.param(bias.clone())?;
                    params.push(w);
                    params.push(b);
                    let y = tape.matmul_nt(h, w)?;
                    tape.add_row_bias(y, b)?
                }
            };
        }
        Ok(ForwardPass {
            logits: h,
            params,
            primaries,
            batch_stats,
        })
    }

    /// `running ← (1 − m)·running + m·batch` with momentum 0.1.
    pub fn update_running_stats(&mut self, batch_stats: &[(Vec<T>, Vec<T>)]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let mut stats = batch_stats.iter();
        for layer in &mut self.layers {
            if let Layer::Conv { bn: Some(bn), .. } = layer {
                let (mean, var) = stats
                    .next()
                    .ok_or_else(|| Error::shape("batchnorm2d", "fewer batch statistics than batchnorm layers"))?;
                for (r, b) in bn.running_mean.data_mut().iter_mut().zip(mean) {
                    *r = keep * *r + m * *b;
                }
                for (r, b) in bn.running_var.data_mut().iter_mut().zip(var) {
                    *r = keep * *r + m * *b;
                }
            }
        }
        Ok(())
    }

    /// Logits for `x` in evaluation mode, without gradient state.
    pub fn predict(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let input = tape.constant(x)?;
        let pass = self.forward(&mut tape, input, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Optimizer-visible tensors, in the order [`ForwardPass::params`] lists them.
    pub fn learnable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { kind, bn, .. } => {
                    match kind {
                        ConvKind::Standard(w) => out.push(w),
                        ConvKind::Linear(p) => out.extend(p.tensors_mut()),
                        ConvKind::Folded(_) => {}
                    }
                    if let Some(bn) = bn {
                        out.push(&mut bn.gamma);
                        out.push(&mut bn.beta);
                    }
                }
                Layer::FullyConnected { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::MaxPool | Layer::Flatten => {}
            }
        }
        out
    }

    /// Total learnable element count (folded weights count as parameters).
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|layer| match layer {
                Layer::Conv { kind, bn, .. } => {
                    let conv = match kind {
                        ConvKind::Standard(w) => w.len(),
                        ConvKind::Linear(p) => p.param_count(),
                        ConvKind::Folded(f) => f.param_count(),
                    };
                    conv + bn.as_ref().map_or(0, |b| b.gamma.len() + b.beta.len())
                }
                Layer::FullyConnected { weight, bias } => weight.len() + bias.len(),
                Layer::MaxPool | Layer::Flatten => 0,
            })
            .sum()
    }

    /// Every stored tensor with a stable name, including batchnorm running
    /// statistics. Conv and batchnorm indices are 1-based.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        let mut fc = 0;
        for layer in &self.layers {
            match layer {
                Layer::Conv { index, kind, bn, .. } => {
                    let i = index + 1;
                    match kind {
                        ConvKind::Standard(w) => out.push((format!("conv{i}.weight"), w)),
                        ConvKind::Linear(p) => {
                            out.push((format!("conv{i}.primary"), p.primary()));
                            match p.coefficients() {
                                Coefficients::Full(a) => out.push((format!("conv{i}.coeff"), a)),
                                Coefficients::LowRank { left, right } => {
                                    out.push((format!("conv{i}.coeff_left"), left));
                                    out.push((format!("conv{i}.coeff_right"), right));
                                }
                            }
                        }
                        ConvKind::Folded(f) => out.push((format!("conv{i}.folded"), &f.weight)),
                    }
                    if let Some(bn) = bn {
                        out.push((format!("bn{i}.gamma"), &bn.gamma));
                        out.push((format!("bn{i}.beta"), &bn.beta));
                        out.push((format!("bn{i}.running_mean"), &bn.running_mean));
                        out.push((format!("bn{i}.running_var"), &bn.running_var));
                    }
                }
                Layer::FullyConnected { weight, bias } => {
                    fc += 1;
                    out.push((format!("fc{fc}.weight"), weight));
                    out.push((format!("fc{fc}.bias"), bias));
                }
                Layer::MaxPool | Layer::Flatten => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`Model::named_tensors`], same order and names.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let names: Vec<String> = self.named_tensors().into_iter().map(|(n, _)| n).collect();
        let mut tensors: Vec<&mut Tensor<T>> = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { kind, bn, .. } => {
                    match kind {
                        ConvKind::Standard(w) => tensors.push(w),
                        ConvKind::Linear(p) => tensors.extend(p.tensors_mut()),
                        ConvKind::Folded(f) => tensors.push(&mut f.weight),
                    }
                    if let Some(bn) = bn {
                        tensors.push(&mut bn.gamma);
                        tensors.push(&mut bn.beta);
                        tensors.push(&mut bn.running_mean);
                        tensors.push(&mut bn.running_var);
                    }
                }
                Layer::FullyConnected { weight, bias } => {
                    tensors.push(weight);
                    tensors.push(bias);
                }
                Layer::MaxPool | Layer::Flatten => {}
            }
        }
        names.into_iter().zip(tensors).collect()
    }

    /// Current values of the LinearConv primary weights.
    pub fn primary_tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Conv {
                    kind: ConvKind::Linear(p),
                    ..
                } => Some(p.primary()),
                _ => None,
            })
            .collect()
    }

    /// Replaces every LinearConv layer by its one-time folded convolution.
    /// Plain conv layers are left alone, so folding is idempotent.
    pub fn fold(&self) -> Result<Self> {
        let mut folded = self.clone();
        for layer in &mut folded.layers {
            if let Layer::Conv { kind, .. } = layer {
                if let ConvKind::Linear(p) = kind {
                    *kind = ConvKind::Folded(p.fold()?);
                }
            }
        }
        Ok(folded)
    }

    /// Flattened-able filters of conv layer `layer` (1-based).
    pub fn conv_filters(&self, layer: usize, which: FilterSet) -> Result<Tensor<T>> {
        let count = self.conv_count();
        let found = self.layers.iter().find_map(|l| match l {
            Layer::Conv {
                index, kind, primaries, ..
            } if index + 1 == layer => Some((kind, *primaries)),
            _ => None,
        });
        let Some((kind, primaries)) = found else {
            return Err(Error::config(format!(
                "conv layer {layer} out of range (model has {count} conv layers, numbered from 1)"
            )));
        };
        let composed = match kind {
            ConvKind::Standard(w) => w.clone(),
            ConvKind::Linear(p) => p.compose_weights()?,
            ConvKind::Folded(f) => f.weight.clone(),
        };
        let p = match (which, primaries) {
            (FilterSet::Composed, _) => return Ok(composed),
            (_, Some(p)) => p,
            (_, None) => {
                return Err(Error::config(format!(
                    "conv layer {layer} is a plain convolution; it has no primary/secondary split"
                )))
            }
        };
        let rows = match which {
            FilterSet::Primary => 0..p,
            _ => p..composed.rows(),
        };
        let d = composed.row_len();
        let mut shape = composed.shape().to_vec();
        shape[0] = rows.len();
        Tensor::new(&shape, composed.data()[rows.start * d..rows.end * d].to_vec())
    }
}

/// Draws a batch-sized standard-normal-ish input (uniform in `[-1, 1]`),
/// handy for shape and equivalence checks.
pub fn random_input<T: Scalar, R: Rng>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    uniform(shape, 1.0, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alpha::Alpha;
    use crate::linear_conv::CoeffMode;

    fn linear_base() -> ArchSpec {
        ArchSpec::base().with_variant(Variant::LinearFull { alpha: Alpha::HALF })
    }

    #[test]
    fn logits_shape_is_invariant_to_variant() {
        let x: Tensor<f32> = random_input(&[2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(1));
        for spec in [
            ArchSpec::base(),
            linear_base(),
            ArchSpec::base().with_variant(Variant::LinearLowRank {
                alpha: Alpha::HALF,
                rank: 10,
            }),
        ] {
            let model = Model::<f32>::build(&spec, 3).unwrap();
            assert_eq!(model.predict(x.clone()).unwrap().shape(), &[2, 10]);
        }
    }

    #[test]
    fn mnist_input_changes_only_the_first_layer() {
        let rgb = Model::<f32>::build(&ArchSpec::base(), 0).unwrap();
        let gray = Model::<f32>::build(&ArchSpec::base().with_input_channels(1), 0).unwrap();
        assert_eq!(rgb.param_count() - gray.param_count(), 864 - 288);
    }

    #[test]
    fn grouped_conv_is_rejected() {
        let mut spec = ArchSpec::base();
        if let LayerSpec::Conv(c) = &mut spec.layers[2] {
            c.groups = 2;
        }
        let msg = Model::<f32>::build(&spec, 0).unwrap_err().to_string();
        assert!(msg.contains("conv layer 2"), "{msg}");
    }

    #[test]
    fn names_line_up_with_tensors() {
        let mut model = Model::<f32>::build(
            &ArchSpec::base().with_variant(Variant::LinearLowRank {
                alpha: Alpha::HALF,
                rank: 10,
            }),
            0,
        )
        .unwrap();
        let shapes: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let mutable: Vec<(String, Vec<usize>)> = model
            .named_tensors_mut()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        assert_eq!(shapes, mutable);
        assert_eq!(shapes[0], ("conv1.primary".into(), vec![16, 3, 3, 3]));
        assert_eq!(shapes[1], ("conv1.coeff_left".into(), vec![16, 10]));
        assert!(shapes.iter().any(|(n, _)| n == "bn4.running_var"));
    }

    #[test]
    fn pass_params_match_learnable_order() {
        let mut model = Model::<f64>::build(&linear_base(), 5).unwrap();
        let mut tape = Tape::new();
        let x = tape
            .constant(random_input(&[2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(2)))
            .unwrap();
        let pass = model.forward(&mut tape, x, true).unwrap();
        assert_eq!(pass.primaries.len(), 4);
        assert_eq!(pass.batch_stats.len(), 4);
        let values: Vec<Tensor<f64>> = pass.params.iter().map(|v| tape.value(*v).clone()).collect();
        let learnable = model.learnable_mut();
        assert_eq!(values.len(), learnable.len());
        for (v, l) in values.iter().zip(learnable) {
            assert_eq!(v, &*l);
        }
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut model = Model::<f64>::build(&ArchSpec::base(), 0).unwrap();
        let stats: Vec<(Vec<f64>, Vec<f64>)> = [32, 64, 128, 256].iter().map(|&c| (vec![1.0; c], vec![3.0; c])).collect();
        model.update_running_stats(&stats).unwrap();
        let Layer::Conv { bn: Some(bn), .. } = &model.layers()[0] else { panic!() };
        assert!((bn.running_mean.data()[0] - 0.1).abs() < 1e-15);
        assert!((bn.running_var.data()[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn fold_preserves_predictions_and_count() {
        let model = Model::<f64>::build(&linear_base(), 9).unwrap();
        let folded = model.fold().unwrap();
        assert!(folded.is_folded() && !folded.has_linear_layers());
        let x: Tensor<f64> = random_input(&[3, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(4));
        let a = model.predict(x.clone()).unwrap();
        let b = folded.predict(x).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-10);
        assert_eq!(folded.fold().unwrap(), folded);
        assert_eq!(
            folded.param_count(),
            Model::<f64>::build(&ArchSpec::base(), 0).unwrap().param_count()
        );
    }

    #[test]
    fn identity_coefficients_duplicate_primaries() {
        let mut model = Model::<f64>::build(&linear_base(), 1).unwrap();
        let mut conv = model.clone();
        for (l, c) in model.layers_mut().iter_mut().zip(conv.layers_mut()) {
            if let (
                Layer::Conv {
                    kind: ConvKind::Linear(p),
                    ..
                },
                Layer::Conv { kind: ck, .. },
            ) = (l, c)
            {
                let g = *p.geometry();
                let w = p.primary().clone();
                let n = w.rows();
                *p = LinearConvParams::new(g, w.clone(), Coefficients::Full(Tensor::eye(n))).unwrap();
                let mut dup = w.data().to_vec();
                dup.extend_from_slice(w.data());
                let mut shape = w.shape().to_vec();
                shape[0] *= 2;
                *ck = ConvKind::Standard(Tensor::new(&shape, dup).unwrap());
            }
        }
        let x: Tensor<f64> = random_input(&[2, 3, 32, 32], &mut ChaCha8Rng::seed_from_u64(8));
        let a = model.predict(x.clone()).unwrap();
        let b = conv.predict(x).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(model.conv_filters(1, FilterSet::Secondary).unwrap(), model.conv_filters(1, FilterSet::Primary).unwrap());
        assert_eq!(CoeffMode::Full, match &model.layers()[0] {
            Layer::Conv { kind: ConvKind::Linear(p), .. } => p.mode(),
            _ => unreachable!(),
        });
    }

    #[test]
    fn conv_filters_guards() {
        let model = Model::<f32>::build(&ArchSpec::base(), 0).unwrap();
        assert!(model.conv_filters(99, FilterSet::Composed).is_err());
        assert!(model.conv_filters(1, FilterSet::Primary).is_err());
        assert_eq!(model.conv_filters(2, FilterSet::Composed).unwrap().shape(), &[64, 32, 3, 3]);
    }
}
