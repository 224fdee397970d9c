//! Declarative architectures and their text form.
//!
//! ```text
//! arch base
//! input 3 32 32
//! variant linear alpha=1/2
//! regularized true
//! conv 32 3x3 stride=1 pad=1 bn
//! maxpool
//! flatten
//! fc 10
//! ```
//!
//! A conv line may also carry `nobn`, `groups=G` (accounting only),
//! `keep` (opt out of LinearConv replacement) and `alpha=R` (per-layer
//! override). `#` starts a comment.

use std::fmt::Write as _;

use crate::alpha::Alpha;
use crate::autodiff::ConvGeometry;
use crate::error::{Error, Result};
use crate::linear_conv::CoeffMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Conv,
    LinearFull { alpha: Alpha },
    LinearLowRank { alpha: Alpha, rank: usize },
}

impl Variant {
    pub fn alpha(&self) -> Option<Alpha> {
        match self {
            Variant::Conv => None,
            Variant::LinearFull { alpha } | Variant::LinearLowRank { alpha, .. } => Some(*alpha),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub batchnorm: bool,
    pub groups: usize,
    /// Stay a plain convolution under LinearConv variants.
    pub keep_conv: bool,
    pub alpha: Option<Alpha>,
}

impl ConvSpec {
    /// Square kernel, stride 1, "same" padding, batchnorm on.
    pub fn same(filters: usize, kernel: usize) -> Self {
        Self {
            filters,
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            padding: kernel / 2,
            batchnorm: true,
            groups: 1,
            keep_conv: false,
            alpha: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv(ConvSpec),
    MaxPool,
    Flatten,
    FullyConnected { outputs: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub layers: Vec<LayerSpec>,
    pub variant: Variant,
    pub regularized: bool,
}

/// How a conv layer is realized under the architecture's variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRealization {
    Conv,
    Linear { alpha: Alpha, mode: CoeffMode },
}

/// A layer with every extent resolved by shape propagation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResolvedLayer {
    Conv {
        /// 0-based position among conv layers.
        index: usize,
        spec: ConvSpec,
        in_channels: usize,
        in_h: usize,
        in_w: usize,
        out_h: usize,
        out_w: usize,
        realization: ConvRealization,
    },
    MaxPool {
        channels: usize,
        in_h: usize,
        in_w: usize,
    },
    Flatten {
        features: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Clone, Copy)]
enum Activation {
    Map { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl ArchSpec {
    /// Four 3×3 conv stages (32, 64, 128, 256 filters), each followed by
    /// batchnorm, ReLU and 2×2 max pooling, then a 10-way fc layer.
    pub fn base() -> Self {
        let mut layers = Vec::new();
        for f in [32, 64, 128, 256] {
            layers.push(LayerSpec::Conv(ConvSpec::same(f, 3)));
            layers.push(LayerSpec::MaxPool);
        }
        layers.push(LayerSpec::Flatten);
        layers.push(LayerSpec::FullyConnected { outputs: 10 });
        Self {
            name: "base".into(),
            input_channels: 3,
            input_h: 32,
            input_w: 32,
            layers,
            variant: Variant::Conv,
            regularized: false,
        }
    }

    /// VGG11 for 32×32 inputs: 64, M, 128, M, 256, 256, M, 512, 512, M,
    /// 512, 512, M, then a 10-way fc layer.
    pub fn vgg11() -> Self {
        let conv = |f| LayerSpec::Conv(ConvSpec::same(f, 3));
        let layers = vec![
            conv(64),
            LayerSpec::MaxPool,
            conv(128),
            LayerSpec::MaxPool,
            conv(256),
            conv(256),
            LayerSpec::MaxPool,
            conv(512),
            conv(512),
            LayerSpec::MaxPool,
            conv(512),
            conv(512),
            LayerSpec::MaxPool,
            LayerSpec::Flatten,
            LayerSpec::FullyConnected { outputs: 10 },
        ];
        Self {
            name: "vgg11".into(),
            input_channels: 3,
            input_h: 32,
            input_w: 32,
            layers,
            variant: Variant::Conv,
            regularized: false,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.regularized = !matches!(variant, Variant::Conv);
        self
    }

    pub fn with_regularized(mut self, regularized: bool) -> Self {
        self.regularized = regularized;
        self
    }

    pub fn with_input_channels(mut self, channels: usize) -> Self {
        self.input_channels = channels;
        self
    }

    pub fn conv_specs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            LayerSpec::Conv(c) => Some(c),
            _ => None,
        })
    }

    pub fn conv_count(&self) -> usize {
        self.conv_specs().count()
    }

    /// Propagates shapes and checks every layer against the variant.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.input_channels == 0 || self.input_h == 0 || self.input_w == 0 {
            return Err(Error::config("input extents must be positive"));
        }
        let mut act = Activation::Map {
            c: self.input_channels,
            h: self.input_h,
            w: self.input_w,
        };
        let mut out = Vec::with_capacity(self.layers.len());
        let mut conv_index = 0;
        for (pos, layer) in self.layers.iter().enumerate() {
            let resolved = match (*layer, act) {
                (LayerSpec::Conv(spec), Activation::Map { c, h, w }) => {
                    let index = conv_index;
                    conv_index += 1;
                    let name = format!("conv layer {} ({} filters)", index + 1, spec.filters);
                    if spec.filters == 0 || spec.groups == 0 {
                        return Err(Error::config(format!("{name}: filters and groups must be positive")));
                    }
                    if c % spec.groups != 0 || spec.filters % spec.groups != 0 {
                        return Err(Error::config(format!(
                            "{name}: groups {} must divide {c} input channels and {} filters",
                            spec.groups, spec.filters
                        )));
                    }
                    let geometry = |input, k| {
                        crate::autodiff::conv_output_extent(input, k, spec.stride, spec.padding)
                    };
                    let (Some(out_h), Some(out_w)) = (geometry(h, spec.kernel_h), geometry(w, spec.kernel_w))
                    else {
                        return Err(Error::config(format!(
                            "{name}: {h}×{w} input with {}×{} kernel, stride {}, padding {} \
                             gives a non-integral output",
                            spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
                        )));
                    };
                    let realization = self.realize(&spec, &name)?;
                    act = Activation::Map {
                        c: spec.filters,
                        h: out_h,
                        w: out_w,
                    };
                    ResolvedLayer::Conv {
                        index,
                        spec,
                        in_channels: c,
                        in_h: h,
                        in_w: w,
                        out_h,
                        out_w,
                        realization,
                    }
                }
                (LayerSpec::MaxPool, Activation::Map { c, h, w }) => {
                    if h < 2 || w < 2 {
                        return Err(Error::config(format!("layer {}: cannot pool a {h}×{w} map", pos + 1)));
                    }
                    act = Activation::Map { c, h: h / 2, w: w / 2 };
                    ResolvedLayer::MaxPool {
                        channels: c,
                        in_h: h,
                        in_w: w,
                    }
                }
                (LayerSpec::Flatten, Activation::Map { c, h, w }) => {
                    act = Activation::Flat(c * h * w);
                    ResolvedLayer::Flatten { features: c * h * w }
                }
                (LayerSpec::FullyConnected { outputs }, Activation::Flat(inputs)) => {
                    if outputs == 0 {
                        return Err(Error::config("fc layer needs at least one output"));
                    }
                    act = Activation::Flat(outputs);
                    ResolvedLayer::FullyConnected { inputs, outputs }
                }
                (layer, Activation::Flat(_)) => {
                    return Err(Error::config(format!(
                        "layer {}: {layer:?} needs a spatial input, found a flattened one",
                        pos + 1
                    )))
                }
                (LayerSpec::FullyConnected { .. }, Activation::Map { .. }) => {
                    return Err(Error::config(format!(
                        "layer {}: fc layer needs a flatten before it",
                        pos + 1
                    )))
                }
            };
            out.push(resolved);
        }
        Ok(out)
    }

    fn realize(&self, spec: &ConvSpec, name: &str) -> Result<ConvRealization> {
        let (alpha, mode) = match self.variant {
            Variant::Conv => return Ok(ConvRealization::Conv),
            _ if spec.keep_conv => return Ok(ConvRealization::Conv),
            Variant::LinearFull { alpha } => (spec.alpha.unwrap_or(alpha), CoeffMode::Full),
            Variant::LinearLowRank { alpha, rank } => (spec.alpha.unwrap_or(alpha), CoeffMode::LowRank { rank }),
        };
        let (p, s) = alpha.split(spec.filters).map_err(|e| Error::config(format!("{name}: {e}")))?;
        if let CoeffMode::LowRank { rank } = mode {
            if rank == 0 || rank >= p.min(s) {
                return Err(Error::config(format!(
                    "{name}: rank {rank} must satisfy 0 < r < min(αf, (1−α)f) = min({p}, {s})"
                )));
            }
        }
        Ok(ConvRealization::Linear { alpha, mode })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "arch {}", self.name);
        let _ = writeln!(out, "input {} {} {}", self.input_channels, self.input_h, self.input_w);
        let _ = match self.variant {
            Variant::Conv => writeln!(out, "variant conv"),
            Variant::LinearFull { alpha } => writeln!(out, "variant linear alpha={alpha}"),
            Variant::LinearLowRank { alpha, rank } => {
                writeln!(out, "variant linear-lowrank alpha={alpha} rank={rank}")
            }
        };
        let _ = writeln!(out, "regularized {}", self.regularized);
        for layer in &self.layers {
            let _ = match layer {
                LayerSpec::Conv(c) => {
                    let mut line = format!(
                        "conv {} {}x{} stride={} pad={} {}",
                        c.filters,
                        c.kernel_h,
                        c.kernel_w,
                        c.stride,
                        c.padding,
                        if c.batchnorm { "bn" } else { "nobn" }
                    );
                    if c.groups != 1 {
                        let _ = write!(line, " groups={}", c.groups);
                    }
                    if c.keep_conv {
                        line.push_str(" keep");
                    }
                    if let Some(a) = c.alpha {
                        let _ = write!(line, " alpha={a}");
                    }
                    writeln!(out, "{line}")
                }
                LayerSpec::MaxPool => writeln!(out, "maxpool"),
                LayerSpec::Flatten => writeln!(out, "flatten"),
                LayerSpec::FullyConnected { outputs } => writeln!(out, "fc {outputs}"),
            };
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = ArchSpec {
            name: "custom".into(),
            input_channels: 3,
            input_h: 32,
            input_w: 32,
            layers: Vec::new(),
            variant: Variant::Conv,
            regularized: false,
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::config(format!("arch line {}: {msg}: {raw:?}", lineno + 1));
            let mut tokens = line.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            let rest: Vec<&str> = tokens.collect();
            let num = |s: &str| s.parse::<usize>().map_err(|_| err("expected an integer"));
            match head {
                "arch" => spec.name = rest.first().ok_or_else(|| err("missing name"))?.to_string(),
                "input" => {
                    let [c, h, w] = rest[..] else { return Err(err("expected `input C H W`")) };
                    spec.input_channels = num(c)?;
                    spec.input_h = num(h)?;
                    spec.input_w = num(w)?;
                }
                "variant" => spec.variant = parse_variant(&rest).map_err(|e| err(&e.to_string()))?,
                "regularized" => {
                    spec.regularized = match rest.first().copied() {
                        Some("true") => true,
                        Some("false") => false,
                        _ => return Err(err("expected true or false")),
                    }
                }
                "conv" => spec.layers.push(LayerSpec::Conv(parse_conv(&rest).map_err(|e| err(&e.to_string()))?)),
                "maxpool" => spec.layers.push(LayerSpec::MaxPool),
                "flatten" => spec.layers.push(LayerSpec::Flatten),
                "fc" => {
                    let [n] = rest[..] else { return Err(err("expected `fc OUTPUTS`")) };
                    spec.layers.push(LayerSpec::FullyConnected { outputs: num(n)? });
                }
                _ => return Err(err("unknown directive")),
            }
        }
        spec.resolve()?;
        Ok(spec)
    }
}

pub(crate) fn parse_variant(tokens: &[&str]) -> Result<Variant> {
    let kind = tokens.first().copied().unwrap_or_default();
    let mut alpha = None;
    let mut rank = None;
    for t in &tokens[1.min(tokens.len())..] {
        match t.split_once('=') {
            Some(("alpha", v)) => alpha = Some(v.parse::<Alpha>()?),
            Some(("rank", v)) => {
                rank = Some(v.parse::<usize>().map_err(|_| Error::config(format!("bad rank {v:?}")))?)
            }
            _ => return Err(Error::config(format!("unknown variant option {t:?}"))),
        }
    }
    let alpha = alpha.unwrap_or(Alpha::HALF);
    match kind {
        "conv" => Ok(Variant::Conv),
        "linear" => Ok(Variant::LinearFull { alpha }),
        "linear-lowrank" => Ok(Variant::LinearLowRank {
            alpha,
            rank: rank.unwrap_or(10),
        }),
        other => Err(Error::config(format!("unknown variant {other:?}"))),
    }
}

fn parse_conv(tokens: &[&str]) -> Result<ConvSpec> {
    let bad = |t: &str| Error::config(format!("bad conv option {t:?}"));
    let [filters, kernel, opts @ ..] = tokens else {
        return Err(Error::config("expected `conv FILTERS HxW [options]`"));
    };
    let filters = filters.parse::<usize>().map_err(|_| bad(filters))?;
    let (kh, kw) = kernel.split_once('x').ok_or_else(|| bad(kernel))?;
    let kh = kh.parse::<usize>().map_err(|_| bad(kernel))?;
    let kw = kw.parse::<usize>().map_err(|_| bad(kernel))?;
    let mut spec = ConvSpec {
        filters,
        kernel_h: kh,
        kernel_w: kw,
        stride: 1,
        padding: 0,
        batchnorm: true,
        groups: 1,
        keep_conv: false,
        alpha: None,
    };
    for t in opts {
        match t.split_once('=') {
            Some(("stride", v)) => spec.stride = v.parse().map_err(|_| bad(t))?,
            Some(("pad", v)) => spec.padding = v.parse().map_err(|_| bad(t))?,
            Some(("groups", v)) => spec.groups = v.parse().map_err(|_| bad(t))?,
            Some(("alpha", v)) => spec.alpha = Some(v.parse()?),
            None if *t == "bn" => spec.batchnorm = true,
            None if *t == "nobn" => spec.batchnorm = false,
            None if *t == "keep" => spec.keep_conv = true,
            _ => return Err(bad(t)),
        }
    }
    if spec.stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    Ok(spec)
}

impl ConvGeometry {
    /// Geometry of a resolved conv layer for a given batch size.
    pub fn for_layer(layer: &ResolvedLayer, batch: usize) -> Option<Self> {
        match *layer {
            ResolvedLayer::Conv {
                spec,
                in_channels,
                in_h,
                in_w,
                out_h,
                out_w,
                ..
            } => Some(Self {
                batch,
                channels: in_channels,
                in_h,
                in_w,
                filters: spec.filters,
                kernel_h: spec.kernel_h,
                kernel_w: spec.kernel_w,
                stride: spec.stride,
                padding: spec.padding,
                out_h,
                out_w,
            }),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_propagates_to_1024_features() {
        let layers = ArchSpec::base().resolve().unwrap();
        assert!(layers.contains(&ResolvedLayer::Flatten { features: 1024 }));
        assert_eq!(
            layers.last(),
            Some(&ResolvedLayer::FullyConnected {
                inputs: 1024,
                outputs: 10
            })
        );
    }

    #[test]
    fn vgg11_propagates_to_512_features() {
        let layers = ArchSpec::vgg11().resolve().unwrap();
        assert!(layers.contains(&ResolvedLayer::Flatten { features: 512 }));
        assert_eq!(ArchSpec::vgg11().conv_count(), 8);
    }

    #[test]
    fn infeasible_alpha_names_the_layer() {
        let arch = ArchSpec::base().with_variant(Variant::LinearFull {
            alpha: "0.3".parse().unwrap(),
        });
        let msg = arch.resolve().unwrap_err().to_string();
        assert!(msg.contains("conv layer 1"), "{msg}");
    }

    #[test]
    fn rank_too_large_names_the_layer() {
        let arch = ArchSpec::base().with_variant(Variant::LinearLowRank {
            alpha: Alpha::HALF,
            rank: 20,
        });
        let msg = arch.resolve().unwrap_err().to_string();
        assert!(msg.contains("conv layer 1") && msg.contains("min(16, 16)"), "{msg}");
    }

    #[test]
    fn keep_flag_opts_out_of_replacement() {
        let mut arch = ArchSpec::base().with_variant(Variant::LinearFull { alpha: Alpha::HALF });
        if let LayerSpec::Conv(c) = &mut arch.layers[0] {
            c.keep_conv = true;
        }
        let layers = arch.resolve().unwrap();
        assert!(matches!(
            layers[0],
            ResolvedLayer::Conv {
                realization: ConvRealization::Conv,
                ..
            }
        ));
        assert!(matches!(
            layers[2],
            ResolvedLayer::Conv {
                realization: ConvRealization::Linear { .. },
                ..
            }
        ));
    }

    #[test]
    fn text_round_trip() {
        let mut arch = ArchSpec::vgg11().with_variant(Variant::LinearLowRank {
            alpha: Alpha::HALF,
            rank: 10,
        });
        if let LayerSpec::Conv(c) = &mut arch.layers[0] {
            c.keep_conv = true;
            c.alpha = Some(Alpha::new(1, 4).unwrap());
        }
        let parsed = ArchSpec::parse(&arch.to_text()).unwrap();
        assert_eq!(parsed, arch);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(ArchSpec::parse("conv 32 3y3").is_err());
        assert!(ArchSpec::parse("input 3 32").is_err());
        assert!(ArchSpec::parse("frobnicate").is_err());
        assert!(ArchSpec::parse("input 3 32 32\nfc 10").is_err());
    }
}
