//! Closed-form parameter and FLOP accounting for Conv and LinearConv.
//!
//! All arithmetic is exact `u64`. Conventions:
//! - one multiply-accumulate is 2 FLOPs;
//! - a conv layer costs `2·H'·W'·f·h·w·(c/g)` per sample and has no bias;
//! - batchnorm has `2f` parameters and costs 2 FLOPs per output element;
//! - an fc layer has `in·out + out` parameters and costs `2·in·out`;
//! - LinearConv adds its weight-composition cost to every training forward
//!   pass and nothing at inference (the fold is a one-time cost).

use std::fmt::{self, Write as _};

use crate::alpha::Alpha;
use crate::error::{Error, Result};
use crate::linear_conv::CoeffMode;
use crate::models::arch::{ArchSpec, ConvRealization, ResolvedLayer, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    LinearConvFull,
    LinearConvLowRank,
    BatchNorm,
    FullyConnected,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LayerKind::Conv => "conv",
            LayerKind::LinearConvFull => "linearconv",
            LayerKind::LinearConvLowRank => "linearconv-lowrank",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::FullyConnected => "fc",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub kind: LayerKind,
    pub params: u64,
    pub inference_flops: u64,
    pub training_overhead_flops: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub arch: String,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_inference_flops: u64,
    pub total_training_overhead_flops: u64,
}

fn effective_channels(c: u64, f: u64, groups: u64) -> Result<u64> {
    if groups == 0 || !c.is_multiple_of(groups) || !f.is_multiple_of(groups) {
        return Err(Error::config(format!(
            "groups {groups} must divide both {c} channels and {f} filters"
        )));
    }
    Ok(c / groups)
}

/// `f·h·w·(c/g)`.
pub fn conv_params(f: u64, h: u64, w: u64, c: u64, groups: u64) -> Result<u64> {
    Ok(f * h * w * effective_channels(c, f, groups)?)
}

/// Checks integrality (and the rank bound) and returns `(αf, (1−α)f)`.
fn split(f: u64, alpha: Alpha, mode: CoeffMode) -> Result<(u64, u64)> {
    let p = alpha
        .primary_count(f as usize)
        .filter(|p| *p > 0)
        .ok_or_else(|| Error::config(format!("alpha {alpha} does not split {f} filters into integers")))?
        as u64;
    let s = f - p;
    if let CoeffMode::LowRank { rank } = mode {
        if rank == 0 || rank as u64 >= p.min(s) {
            return Err(Error::config(format!(
                "rank {rank} must satisfy 0 < r < min(αf, (1−α)f) = min({p}, {s})"
            )));
        }
    }
    Ok((p, s))
}

/// `αf·h·w·(c/g)` plus `α(1−α)f²` (full) or `r·f` (rank-reduced).
pub fn linearconv_params(
    f: u64,
    h: u64,
    w: u64,
    c: u64,
    alpha: Alpha,
    mode: CoeffMode,
    groups: u64,
) -> Result<u64> {
    let cg = effective_channels(c, f, groups)?;
    let (p, s) = split(f, alpha, mode)?;
    let coeff = match mode {
        CoeffMode::Full => p * s,
        CoeffMode::LowRank { rank } => rank as u64 * (p + s),
    };
    Ok(p * h * w * cg + coeff)
}

/// Per-forward-pass FLOPs of composing the secondary filters.
pub fn composition_flops(
    f: u64,
    h: u64,
    w: u64,
    c: u64,
    alpha: Alpha,
    mode: CoeffMode,
    groups: u64,
) -> Result<u64> {
    let hwc = h * w * effective_channels(c, f, groups)?;
    let (p, s) = split(f, alpha, mode)?;
    Ok(match mode {
        CoeffMode::Full => 2 * p * s * hwc,
        CoeffMode::LowRank { rank } => 2 * rank as u64 * (p + s) * hwc,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Reduction {
    pub reduces: bool,
    /// `p^C − p^LC`; negative when LinearConv inflates the layer.
    pub margin: i64,
    pub conv_params: u64,
    pub linearconv_params: u64,
}

/// Whether a full-coefficient LinearConv layer has no more parameters than
/// the convolution it replaces.
pub fn reduction_condition(f: u64, h: u64, w: u64, c: u64, alpha: Alpha, groups: u64) -> Result<Reduction> {
    let conv = conv_params(f, h, w, c, groups)?;
    let linear = linearconv_params(f, h, w, c, alpha, CoeffMode::Full, groups)?;
    Ok(Reduction {
        reduces: linear <= conv,
        margin: conv as i64 - linear as i64,
        conv_params: conv,
        linearconv_params: linear,
    })
}

/// Per-layer costs of an architecture under its variant.
pub fn cost_report(arch: &ArchSpec) -> Result<CostReport> {
    let mut layers = Vec::new();
    let mut fc_count = 0;
    for layer in arch.resolve()? {
        match layer {
            ResolvedLayer::Conv {
                index,
                spec,
                in_channels,
                out_h,
                out_w,
                realization,
                ..
            } => {
                let (f, h, w, c, g) = (
                    spec.filters as u64,
                    spec.kernel_h as u64,
                    spec.kernel_w as u64,
                    in_channels as u64,
                    spec.groups as u64,
                );
                let area = (out_h * out_w) as u64;
                let inference_flops = 2 * area * conv_params(f, h, w, c, g)?;
                let (kind, params, overhead) = match realization {
                    ConvRealization::Conv => (LayerKind::Conv, conv_params(f, h, w, c, g)?, 0),
                    ConvRealization::Linear { alpha, mode } => (
                        match mode {
                            CoeffMode::Full => LayerKind::LinearConvFull,
                            CoeffMode::LowRank { .. } => LayerKind::LinearConvLowRank,
                        },
                        linearconv_params(f, h, w, c, alpha, mode, g)?,
                        composition_flops(f, h, w, c, alpha, mode, g)?,
                    ),
                };
                layers.push(LayerCost {
                    layer: format!("conv{}", index + 1),
                    kind,
                    params,
                    inference_flops,
                    training_overhead_flops: overhead,
                });
                if spec.batchnorm {
                    layers.push(LayerCost {
                        layer: format!("bn{}", index + 1),
                        kind: LayerKind::BatchNorm,
                        params: 2 * f,
                        inference_flops: 2 * f * area,
                        training_overhead_flops: 0,
                    });
                }
            }
            ResolvedLayer::FullyConnected { inputs, outputs } => {
                fc_count += 1;
                let (i, o) = (inputs as u64, outputs as u64);
                layers.push(LayerCost {
                    layer: format!("fc{fc_count}"),
                    kind: LayerKind::FullyConnected,
                    params: i * o + o,
                    inference_flops: 2 * i * o,
                    training_overhead_flops: 0,
                });
            }
            ResolvedLayer::MaxPool { .. } | ResolvedLayer::Flatten { .. } => {}
        }
    }
    Ok(CostReport {
        arch: arch.name.clone(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_inference_flops: layers.iter().map(|l| l.inference_flops).sum(),
        total_training_overhead_flops: layers.iter().map(|l| l.training_overhead_flops).sum(),
        layers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FlopMode {
    Inference,
    Training,
}

/// Per-sample FLOPs of one forward pass.
pub fn flops(arch: &ArchSpec, mode: FlopMode) -> Result<u64> {
    let report = cost_report(arch)?;
    Ok(match mode {
        FlopMode::Inference => report.total_inference_flops,
        FlopMode::Training => report.training_flops(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepRow {
    pub alpha: Alpha,
    pub params: u64,
    pub inference_flops: u64,
    pub training_flops: u64,
}

/// Full-coefficient LinearConv totals for each α; α = 1 is the plain
/// convolutional network.
pub fn alpha_sweep(arch: &ArchSpec, grid: &[Alpha]) -> Result<Vec<SweepRow>> {
    grid.iter()
        .map(|&alpha| {
            let variant = if alpha.is_one() {
                Variant::Conv
            } else {
                Variant::LinearFull { alpha }
            };
            let report = cost_report(&arch.clone().with_variant(variant))
                .map_err(|e| Error::config(format!("alpha {alpha}: {e}")))?;
            Ok(SweepRow {
                alpha,
                params: report.total_params,
                inference_flops: report.total_inference_flops,
                training_flops: report.training_flops(),
            })
        })
        .collect()
}

/// Hundredths of a million, rounded half up: `399_146 → 40` (i.e. 0.40M).
pub fn centi_millions(n: u64) -> u64 {
    (n + 5_000) / 10_000
}

/// `"0.40"` for 399,146.
pub fn format_millions(n: u64) -> String {
    let c = centi_millions(n);
    format!("{}.{:02}", c / 100, c % 100)
}

/// `"0.043"` for 43,070,976.
pub fn format_billions(n: u64) -> String {
    let m = (n + 500_000) / 1_000_000;
    format!("{}.{:03}", m / 1000, m % 1000)
}

impl CostReport {
    pub fn training_flops(&self) -> u64 {
        self.total_inference_flops + self.total_training_overhead_flops
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,params,inf_flops,train_flops\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                l.layer,
                l.kind,
                l.params,
                l.inference_flops,
                l.inference_flops + l.training_overhead_flops
            );
        }
        let _ = writeln!(
            out,
            "total,,{},{},{}",
            self.total_params,
            self.total_inference_flops,
            self.training_flops()
        );
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<8} {:<20} {:>12} {:>16} {:>16}",
            "layer", "kind", "params", "inf_flops", "train_flops"
        );
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:<8} {:<20} {:>12} {:>16} {:>16}",
                l.layer,
                l.kind.to_string(),
                l.params,
                l.inference_flops,
                l.inference_flops + l.training_overhead_flops
            );
        }
        let _ = writeln!(
            out,
            "{:<8} {:<20} {:>12} {:>16} {:>16}",
            "total",
            "",
            self.total_params,
            self.total_inference_flops,
            self.training_flops()
        );
        let _ = writeln!(
            out,
            "params {}M, FLOPs (inference) {}B, (training) {}B",
            format_millions(self.total_params),
            format_billions(self.total_inference_flops),
            format_billions(self.training_flops())
        );
        out
    }
}
