//! Minimal CNN representation: layer specs, shape inference, weights, and
//! the substitution transform that swaps a convolution for its decomposed
//! 1x1 -> DxD -> 1x1 pipeline.
//!
//! Activations are `H x W x C` row-major tensors. The graph is an ordered
//! layer list; a layer may name earlier layers (or `"input"`) as its inputs,
//! and an empty input list means "the previous layer".

pub mod forward;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::Tensor;
use crate::tucker::KernelFactors;

/// Reserved input reference name.
pub const INPUT_NAME: &str = "input";

fn one() -> usize {
    1
}

/// What a layer does. Geometry only; weights live in [`LayerParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// `d x d` convolution, `s` input channels, `t` output channels.
    Conv {
        d: usize,
        s: usize,
        t: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
        #[serde(default = "one")]
        groups: usize,
    },
    /// Fully-connected layer over the flattened input.
    Fc {
        in_dim: usize,
        out_dim: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    AvgPool {
        window: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    /// Shape-preserving in the analyzer; unsupported in the numeric forward.
    Lrn,
    /// Shape-preserving in the analyzer; unsupported in the numeric forward.
    Softmax,
    /// Channel concatenation of all named inputs.
    Concat,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Conv { .. } | LayerKind::Fc { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    /// Earlier layer names (or `"input"`); empty means the previous layer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
}

/// Layer graph with shapes only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Input activation shape `[h, w, c]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Activation dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn count(&self) -> usize {
        self.h * self.w * self.c
    }
}

/// Per-layer inferred activation shapes.
#[derive(Debug, Clone)]
pub struct LayerShape {
    /// Shape of the (first) input activation.
    pub input: Dims,
    pub output: Dims,
}

/// `(side + 2*pad - window)/stride + 1`, required to be a positive integer.
pub fn out_side(side: usize, window: usize, stride: usize, pad: usize) -> Result<usize> {
    let eff = side + 2 * pad;
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if eff < window {
        return Err(Error::Shape(format!(
            "window {window} larger than padded side {eff}"
        )));
    }
    if (eff - window) % stride != 0 {
        return Err(Error::Shape(format!(
            "(side {side} + 2*{pad} - {window}) not divisible by stride {stride}"
        )));
    }
    Ok((eff - window) / stride + 1)
}

impl NetworkSpec {
    /// Validate the graph and compute every layer's activation shapes.
    pub fn infer_shapes(&self) -> Result<BTreeMap<String, LayerShape>> {
        let input_dims = Dims {
            h: self.input[0],
            w: self.input[1],
            c: self.input[2],
        };
        if input_dims.count() == 0 {
            return Err(Error::Shape(
                "network input extents must be positive".into(),
            ));
        }
        let mut known: BTreeMap<String, Dims> = BTreeMap::new();
        let mut out = BTreeMap::new();
        let mut prev: Option<String> = None;

        for layer in &self.layers {
            if layer.name == INPUT_NAME {
                return Err(Error::Shape(format!(
                    "layer name {INPUT_NAME:?} is reserved"
                )));
            }
            if out.contains_key(&layer.name) {
                return Err(Error::Shape(format!(
                    "duplicate layer name {:?}",
                    layer.name
                )));
            }
            let resolve = |name: &str| -> Result<Dims> {
                if name == INPUT_NAME {
                    Ok(input_dims)
                } else {
                    known.get(name).copied().ok_or_else(|| {
                        Error::Shape(format!(
                            "layer {:?} references unknown input {name:?}",
                            layer.name
                        ))
                    })
                }
            };
            let in_dims: Vec<Dims> = if layer.inputs.is_empty() {
                match &prev {
                    Some(p) => vec![known[p]],
                    None => vec![input_dims],
                }
            } else {
                layer
                    .inputs
                    .iter()
                    .map(|n| resolve(n))
                    .collect::<Result<_>>()?
            };
            if in_dims.len() != 1 && !matches!(layer.kind, LayerKind::Concat) {
                return Err(Error::Shape(format!(
                    "layer {:?} takes exactly one input",
                    layer.name
                )));
            }
            let d0 = in_dims[0];
            let output = match &layer.kind {
                LayerKind::Conv {
                    d,
                    s,
                    t,
                    stride,
                    pad,
                    groups,
                } => {
                    if *s != d0.c {
                        return Err(Error::Shape(format!(
                            "layer {:?} expects {s} input channels, got {}",
                            layer.name, d0.c
                        )));
                    }
                    if *groups == 0 || s % groups != 0 || t % groups != 0 {
                        return Err(Error::Shape(format!(
                            "layer {:?}: groups {groups} must divide s={s} and t={t}",
                            layer.name
                        )));
                    }
                    let h = out_side(d0.h, *d, *stride, *pad)
                        .map_err(|e| Error::Shape(format!("layer {:?}: {e}", layer.name)))?;
                    let w = out_side(d0.w, *d, *stride, *pad)
                        .map_err(|e| Error::Shape(format!("layer {:?}: {e}", layer.name)))?;
                    Dims { h, w, c: *t }
                }
                LayerKind::Fc { in_dim, out_dim } => {
                    if *in_dim != d0.count() {
                        return Err(Error::Shape(format!(
                            "layer {:?} expects in_dim {in_dim}, input has {} values",
                            layer.name,
                            d0.count()
                        )));
                    }
                    Dims {
                        h: 1,
                        w: 1,
                        c: *out_dim,
                    }
                }
                LayerKind::MaxPool {
                    window,
                    stride,
                    pad,
                }
                | LayerKind::AvgPool {
                    window,
                    stride,
                    pad,
                } => {
                    let h = out_side(d0.h, *window, *stride, *pad)
                        .map_err(|e| Error::Shape(format!("layer {:?}: {e}", layer.name)))?;
                    let w = out_side(d0.w, *window, *stride, *pad)
                        .map_err(|e| Error::Shape(format!("layer {:?}: {e}", layer.name)))?;
                    Dims { h, w, c: d0.c }
                }
                LayerKind::Relu | LayerKind::Lrn | LayerKind::Softmax => d0,
                LayerKind::Concat => {
                    let (h, w) = (d0.h, d0.w);
                    let mut c = 0;
                    for dims in &in_dims {
                        if dims.h != h || dims.w != w {
                            return Err(Error::Shape(format!(
                                "layer {:?}: concat inputs disagree on spatial size",
                                layer.name
                            )));
                        }
                        c += dims.c;
                    }
                    Dims { h, w, c }
                }
            };
            known.insert(layer.name.clone(), output);
            out.insert(layer.name.clone(), LayerShape { input: d0, output });
            prev = Some(layer.name.clone());
        }
        Ok(out)
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }
}

/// Weights attached to one layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum LayerParams {
    /// Dense kernel `[d, d, s/groups, t]` plus a length-`t` bias.
    Conv { kernel: Tensor, bias: Vec<f64> },
    /// Dense weight `out_dim x in_dim` plus a length-`out_dim` bias.
    Fc { weight: Matrix, bias: Vec<f64> },
    /// Substituted convolution: per-group Tucker factors; the bias rides on
    /// the final stage.
    DecomposedConv {
        factors: KernelFactors,
        bias: Vec<f64>,
    },
    /// Substituted fully-connected layer: `x -> expand * (reduce * x) + bias`.
    DecomposedFc {
        reduce: Matrix,
        expand: Matrix,
        bias: Vec<f64>,
    },
}

/// Spec plus weights.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: BTreeMap<String, LayerParams>,
}

impl Network {
    /// Wrap a spec with no weights (analyzer-style use).
    pub fn shell(spec: NetworkSpec) -> Result<Self> {
        spec.infer_shapes()?;
        Ok(Self {
            spec,
            params: BTreeMap::new(),
        })
    }

    /// Seeded random weights for every conv/fc layer (uniform, fan-in scaled).
    pub fn random_init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::shell(spec)?;
        for layer in net.spec.layers.clone() {
            match layer.kind {
                LayerKind::Conv {
                    d, s, t, groups, ..
                } => {
                    let fan_in = (d * d * s / groups) as f64;
                    let a = (3.0 / fan_in).sqrt();
                    let kernel = Tensor::from_fn(&[d, d, s / groups, t], |_| rng.gen_range(-a..a));
                    net.params.insert(
                        layer.name.clone(),
                        LayerParams::Conv {
                            kernel,
                            bias: vec![0.0; t],
                        },
                    );
                }
                LayerKind::Fc { in_dim, out_dim } => {
                    let a = (3.0 / in_dim as f64).sqrt();
                    let weight = Matrix::from_fn(out_dim, in_dim, |_, _| rng.gen_range(-a..a));
                    net.params.insert(
                        layer.name.clone(),
                        LayerParams::Fc {
                            weight,
                            bias: vec![0.0; out_dim],
                        },
                    );
                }
                _ => {}
            }
        }
        Ok(net)
    }

    /// Check that every weighted layer has parameters of the right shape.
    pub fn validate(&self) -> Result<()> {
        self.spec.infer_shapes()?;
        for layer in &self.spec.layers {
            match (&layer.kind, self.params.get(&layer.name)) {
                (LayerKind::Conv { .. } | LayerKind::Fc { .. }, None) => {
                    return Err(Error::Model(format!(
                        "layer {:?} has no weights",
                        layer.name
                    )));
                }
                (
                    LayerKind::Conv {
                        d, s, t, groups, ..
                    },
                    Some(p),
                ) => {
                    self.validate_conv(&layer.name, *d, *s, *t, *groups, p)?;
                }
                (LayerKind::Fc { in_dim, out_dim }, Some(p)) => match p {
                    LayerParams::Fc { weight, bias } => {
                        if weight.rows() != *out_dim
                            || weight.cols() != *in_dim
                            || bias.len() != *out_dim
                        {
                            return Err(Error::Model(format!(
                                "layer {:?}: fc weights {}x{} don't match {out_dim}x{in_dim}",
                                layer.name,
                                weight.rows(),
                                weight.cols()
                            )));
                        }
                    }
                    LayerParams::DecomposedFc {
                        reduce,
                        expand,
                        bias,
                    } => {
                        if reduce.cols() != *in_dim
                            || expand.rows() != *out_dim
                            || expand.cols() != reduce.rows()
                            || bias.len() != *out_dim
                        {
                            return Err(Error::Model(format!(
                                "layer {:?}: decomposed fc stages don't chain {in_dim}->{out_dim}",
                                layer.name
                            )));
                        }
                    }
                    _ => {
                        return Err(Error::Model(format!(
                            "layer {:?}: fc layer carries non-fc weights",
                            layer.name
                        )));
                    }
                },
                _ => {}
            }
        }
        Ok(())
    }

    fn validate_conv(
        &self,
        name: &str,
        d: usize,
        s: usize,
        t: usize,
        groups: usize,
        p: &LayerParams,
    ) -> Result<()> {
        let sg = s / groups;
        let tg = t / groups;
        match p {
            LayerParams::Conv { kernel, bias } => {
                if kernel.shape() != [d, d, sg, t] || bias.len() != t {
                    return Err(Error::Model(format!(
                        "layer {name:?}: kernel shape {:?} does not match [d,d,s/g,t] = [{d},{d},{sg},{t}]",
                        kernel.shape()
                    )));
                }
            }
            LayerParams::DecomposedConv { factors, bias } => {
                if factors.groups.len() != groups || bias.len() != t {
                    return Err(Error::Model(format!(
                        "layer {name:?}: decomposed kernel has {} groups, spec says {groups}",
                        factors.groups.len()
                    )));
                }
                for f in &factors.groups {
                    let orig = f.original_shape();
                    if orig != [d, d, sg, tg] {
                        return Err(Error::Model(format!(
                            "layer {name:?}: factor group reconstructs to {orig:?}, want [{d},{d},{sg},{tg}]"
                        )));
                    }
                }
            }
            _ => {
                return Err(Error::Model(format!(
                    "layer {name:?}: conv layer carries non-conv weights"
                )));
            }
        }
        Ok(())
    }
}

/// Replace one conv/fc layer's dense weights by Tucker factors. The bias is
/// reattached to the final 1x1 stage; no nonlinearity is inserted between
/// stages.
pub fn substitute_layer(net: &Network, layer: &str, factors: &KernelFactors) -> Result<Network> {
    let spec_layer = net
        .spec
        .layer(layer)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown layer {layer:?}")))?;
    let old = net
        .params
        .get(layer)
        .ok_or_else(|| Error::Model(format!("layer {layer:?} has no weights to substitute")))?;

    let mut out = net.clone();
    match &spec_layer.kind {
        LayerKind::Conv { .. } => {
            let bias = match old {
                LayerParams::Conv { bias, .. } => bias.clone(),
                LayerParams::DecomposedConv { bias, .. } => bias.clone(),
                _ => return Err(Error::Model(format!("layer {layer:?} is not a conv"))),
            };
            out.params.insert(
                layer.to_string(),
                LayerParams::DecomposedConv {
                    factors: factors.clone(),
                    bias,
                },
            );
        }
        LayerKind::Fc { in_dim, out_dim } => {
            let bias = match old {
                LayerParams::Fc { bias, .. } => bias.clone(),
                LayerParams::DecomposedFc { bias, .. } => bias.clone(),
                _ => return Err(Error::Model(format!("layer {layer:?} is not an fc"))),
            };
            let (reduce, expand) = fc_stages_from_factors(factors, *in_dim, *out_dim)?;
            out.params.insert(
                layer.to_string(),
                LayerParams::DecomposedFc {
                    reduce,
                    expand,
                    bias,
                },
            );
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "layer {layer:?} is neither conv nor fc"
            )));
        }
    }
    out.validate()?;
    Ok(out)
}

/// An fc layer decomposes through its `1 x 1 x in x out` kernel view; the
/// factors collapse to two matrix stages.
fn fc_stages_from_factors(
    factors: &KernelFactors,
    in_dim: usize,
    out_dim: usize,
) -> Result<(Matrix, Matrix)> {
    if factors.groups.len() != 1 {
        return Err(Error::Model("fc decomposition cannot be grouped".into()));
    }
    let f = &factors.groups[0];
    if f.original_shape() != [1, 1, in_dim, out_dim] {
        return Err(Error::Model(format!(
            "fc factors reconstruct to {:?}, want [1,1,{in_dim},{out_dim}]",
            f.original_shape()
        )));
    }
    let u4 = f.factors[3]
        .as_ref()
        .ok_or_else(|| Error::Model("fc decomposition needs a mode-4 factor".into()))?;
    if f.factors[2].is_some() {
        return Err(Error::Model(
            "fc decomposition uses a single mode; mode-3 factor not supported".into(),
        ));
    }
    let r = u4.cols();
    // core is [1,1,in,r]: reduce[r][in] = core[0,0,in,r]
    let reduce = Matrix::from_fn(r, in_dim, |ri, si| f.core.get(&[0, 0, si, ri]));
    Ok((reduce, u4.clone()))
}
