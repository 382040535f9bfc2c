//! Numeric forward pass. Convolution goes through explicit patch-matrix
//! construction followed by a matrix multiply, so the 1x1 stages of a
//! decomposed layer reduce to plain channel-mixing matmuls.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::Tensor;
use crate::tucker::KernelFactors;

use super::{LayerKind, LayerParams, Network, INPUT_NAME};

/// Patch matrix for one channel group: row per output position, column per
/// kernel tap `(i, j, s_local)`. Out-of-range taps read as zero.
pub(crate) fn im2col(
    x: &Tensor,
    d: usize,
    stride: usize,
    pad: usize,
    c0: usize,
    cg: usize,
    oh: usize,
    ow: usize,
) -> Matrix {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut out = Matrix::zeros(oh * ow, d * d * cg);
    let data = x.data();
    for ph in 0..oh {
        for pw in 0..ow {
            let row = ph * ow + pw;
            for i in 0..d {
                let hi = (ph * stride + i) as isize - pad as isize;
                if hi < 0 || hi >= h as isize {
                    continue;
                }
                for j in 0..d {
                    let wj = (pw * stride + j) as isize - pad as isize;
                    if wj < 0 || wj >= w as isize {
                        continue;
                    }
                    let base = ((hi as usize * w) + wj as usize) * c + c0;
                    for sc in 0..cg {
                        out.set(row, (i * d + j) * cg + sc, data[base + sc]);
                    }
                }
            }
        }
    }
    out
}

/// Scatter-add the patch-matrix gradient back onto the input (transpose of
/// [`im2col`]). Used by training.
pub(crate) fn col2im_add(
    grad_patches: &Matrix,
    x_grad: &mut Tensor,
    d: usize,
    stride: usize,
    pad: usize,
    c0: usize,
    cg: usize,
    oh: usize,
    ow: usize,
) {
    let (h, w, c) = (x_grad.shape()[0], x_grad.shape()[1], x_grad.shape()[2]);
    let data = x_grad.data_mut();
    for ph in 0..oh {
        for pw in 0..ow {
            let row = ph * ow + pw;
            for i in 0..d {
                let hi = (ph * stride + i) as isize - pad as isize;
                if hi < 0 || hi >= h as isize {
                    continue;
                }
                for j in 0..d {
                    let wj = (pw * stride + j) as isize - pad as isize;
                    if wj < 0 || wj >= w as isize {
                        continue;
                    }
                    let base = ((hi as usize * w) + wj as usize) * c + c0;
                    for sc in 0..cg {
                        data[base + sc] += grad_patches.get(row, (i * d + j) * cg + sc);
                    }
                }
            }
        }
    }
}

/// Kernel slab for one group as a `(d*d*sg) x tg` matrix whose row order
/// matches the patch columns of [`im2col`].
pub(crate) fn kernel_matrix(kernel: &Tensor, group: usize, groups: usize) -> Matrix {
    let shape = kernel.shape();
    let (d, sg, t) = (shape[0], shape[2], shape[3]);
    let tg = t / groups;
    let t0 = group * tg;
    Matrix::from_fn(d * d * sg, tg, |row, tc| {
        let i = row / (d * sg);
        let j = (row / sg) % d;
        let sc = row % sg;
        kernel.get(&[i, j, sc, t0 + tc])
    })
}

/// Direct convolution, `x: [h, w, s] -> [h', w', t]`. The kernel is
/// `[d, d, s/groups, t]`; an empty bias slice means no bias.
pub fn conv_forward(
    x: &Tensor,
    kernel: &Tensor,
    bias: &[f64],
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor> {
    if x.order() != 3 || kernel.order() != 4 {
        return Err(Error::Shape(
            "conv_forward wants a 3-way input and 4-way kernel".into(),
        ));
    }
    let (h, w, s) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let kd = kernel.shape();
    let (d, d2, sg, t) = (kd[0], kd[1], kd[2], kd[3]);
    if d != d2 {
        return Err(Error::Shape("kernel must be square".into()));
    }
    if groups == 0 || t % groups != 0 || sg * groups != s {
        return Err(Error::Shape(format!(
            "kernel [{d},{d},{sg},{t}] with {groups} groups does not match {s} input channels"
        )));
    }
    if !bias.is_empty() && bias.len() != t {
        return Err(Error::Shape(format!(
            "bias length {} does not match {t} output channels",
            bias.len()
        )));
    }
    let oh = super::out_side(h, d, stride, pad)?;
    let ow = super::out_side(w, d, stride, pad)?;
    let tg = t / groups;

    let mut out = Tensor::zeros(&[oh, ow, t]);
    for g in 0..groups {
        let patches = im2col(x, d, stride, pad, g * sg, sg, oh, ow);
        let km = kernel_matrix(kernel, g, groups);
        let y = patches.matmul(&km); // (oh*ow) x tg
        let out_data = out.data_mut();
        for row in 0..oh * ow {
            for tc in 0..tg {
                out_data[row * t + g * tg + tc] = y.get(row, tc);
            }
        }
    }
    if !bias.is_empty() {
        let out_data = out.data_mut();
        for row in 0..oh * ow {
            for tc in 0..t {
                out_data[row * t + tc] += bias[tc];
            }
        }
    }
    Ok(out)
}

/// The three stage kernels of a decomposed convolution, assembled across
/// groups: an optional input-side 1x1, the central DxD core, and an optional
/// output-side 1x1.
pub struct StageKernels {
    /// `[1, 1, s/g, r3*g]` channel reduction, when mode 3 was decomposed.
    pub pre: Option<Tensor>,
    /// `[d, d, c_in_per_group, c_out_per_group * g]` core stage; carries the
    /// original stride and padding.
    pub mid: Tensor,
    /// `[1, 1, r4, t]` channel expansion, when mode 4 was decomposed.
    pub post: Option<Tensor>,
}

pub fn stage_kernels(factors: &KernelFactors) -> Result<StageKernels> {
    let groups = factors.groups.len();
    if groups == 0 {
        return Err(Error::Model("no factor groups".into()));
    }
    let f0 = &factors.groups[0];
    if f0.core.order() != 4 {
        return Err(Error::Model("kernel factors must be 4-way".into()));
    }
    for f in &factors.groups {
        if f.core.shape() != f0.core.shape() {
            return Err(Error::Model("factor groups disagree on core shape".into()));
        }
        if f.factors[0].is_some() || f.factors[1].is_some() {
            return Err(Error::Model(
                "spatial modes are never decomposed in a substituted layer".into(),
            ));
        }
    }
    let core_shape = f0.core.shape();
    let (d, r3, r4) = (core_shape[0], core_shape[2], core_shape[3]);

    let pre = match &f0.factors[2] {
        Some(u3_0) => {
            let sg = u3_0.rows();
            Some(Tensor::from_fn(&[1, 1, sg, r3 * groups], |idx| {
                let g = idx[3] / r3;
                let u3 = factors.groups[g].factors[2].as_ref().unwrap();
                u3.get(idx[2], idx[3] % r3)
            }))
        }
        None => None,
    };
    let mid = Tensor::from_fn(&[d, d, r3, r4 * groups], |idx| {
        let g = idx[3] / r4;
        factors.groups[g]
            .core
            .get(&[idx[0], idx[1], idx[2], idx[3] % r4])
    });
    let post = match &f0.factors[3] {
        Some(u4_0) => {
            let tg = u4_0.rows();
            Some(Tensor::from_fn(&[1, 1, r4, tg * groups], |idx| {
                let g = idx[3] / tg;
                let u4 = factors.groups[g].factors[3].as_ref().unwrap();
                // Eq-style expansion: out_t = sum_r4 U4[t, r4] * z[r4]
                u4.get(idx[3] % tg, idx[2])
            }))
        }
        None => None,
    };
    Ok(StageKernels { pre, mid, post })
}

/// Run the decomposed pipeline: optional 1x1 reduction at stride 1, the DxD
/// core at the original stride/padding, optional 1x1 expansion, bias on the
/// last stage.
pub fn decomposed_forward(
    x: &Tensor,
    factors: &KernelFactors,
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let groups = factors.groups.len();
    let stages = stage_kernels(factors)?;
    let mut cur = x.clone();
    if let Some(pre) = &stages.pre {
        cur = conv_forward(&cur, pre, &[], 1, 0, groups)?;
    }
    let mid_is_last = stages.post.is_none();
    cur = conv_forward(
        &cur,
        &stages.mid,
        if mid_is_last { bias } else { &[] },
        stride,
        pad,
        groups,
    )?;
    if let Some(post) = &stages.post {
        cur = conv_forward(&cur, post, bias, 1, 0, groups)?;
    }
    Ok(cur)
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

pub fn maxpool_forward(x: &Tensor, window: usize, stride: usize, pad: usize) -> Result<Tensor> {
    pool(x, window, stride, pad, true)
}

pub fn avgpool_forward(x: &Tensor, window: usize, stride: usize, pad: usize) -> Result<Tensor> {
    pool(x, window, stride, pad, false)
}

/// Max pools take the max over in-range taps; average pools divide the
/// in-range sum by the full window area.
fn pool(x: &Tensor, window: usize, stride: usize, pad: usize, max: bool) -> Result<Tensor> {
    if x.order() != 3 {
        return Err(Error::Shape("pool wants a 3-way input".into()));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = super::out_side(h, window, stride, pad)?;
    let ow = super::out_side(w, window, stride, pad)?;
    let mut out = Tensor::zeros(&[oh, ow, c]);
    for ph in 0..oh {
        for pw in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut acc = 0.0;
                for i in 0..window {
                    let hi = (ph * stride + i) as isize - pad as isize;
                    if hi < 0 || hi >= h as isize {
                        continue;
                    }
                    for j in 0..window {
                        let wj = (pw * stride + j) as isize - pad as isize;
                        if wj < 0 || wj >= w as isize {
                            continue;
                        }
                        let v = x.get(&[hi as usize, wj as usize, ch]);
                        if v > best {
                            best = v;
                        }
                        acc += v;
                    }
                }
                let v = if max {
                    if best == f64::NEG_INFINITY {
                        0.0
                    } else {
                        best
                    }
                } else {
                    acc / (window * window) as f64
                };
                out.set(&[ph, pw, ch], v);
            }
        }
    }
    Ok(out)
}

pub fn fc_forward(x: &Tensor, weight: &Matrix, bias: &[f64]) -> Result<Tensor> {
    if x.len() != weight.cols() {
        return Err(Error::Shape(format!(
            "fc input has {} values, weight expects {}",
            x.len(),
            weight.cols()
        )));
    }
    let out_dim = weight.rows();
    let mut out = vec![0.0; out_dim];
    for (o, out_v) in out.iter_mut().enumerate() {
        let row = weight.row(o);
        let mut acc = 0.0;
        for (xi, wi) in x.data().iter().zip(row) {
            acc += xi * wi;
        }
        if !bias.is_empty() {
            acc += bias[o];
        }
        *out_v = acc;
    }
    Tensor::new(vec![1, 1, out_dim], out)
}

pub fn concat(xs: &[&Tensor]) -> Result<Tensor> {
    let (h, w) = (xs[0].shape()[0], xs[0].shape()[1]);
    let mut c_total = 0;
    for x in xs {
        if x.shape()[0] != h || x.shape()[1] != w {
            return Err(Error::Shape(
                "concat inputs disagree on spatial size".into(),
            ));
        }
        c_total += x.shape()[2];
    }
    let mut out = Tensor::zeros(&[h, w, c_total]);
    for row in 0..h * w {
        let mut c0 = 0;
        for x in xs {
            let cx = x.shape()[2];
            let src = &x.data()[row * cx..(row + 1) * cx];
            out.data_mut()[row * c_total + c0..row * c_total + c0 + cx].copy_from_slice(src);
            c0 += cx;
        }
    }
    Ok(out)
}

/// Apply every layer in order and return the final activation.
pub fn network_forward(net: &Network, x: &Tensor) -> Result<Tensor> {
    let dims = [x.shape()[0], x.shape()[1], x.shape()[2]];
    if x.order() != 3 || dims != net.spec.input {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match spec {:?}",
            x.shape(),
            net.spec.input
        )));
    }
    let mut acts: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut prev: Option<String> = None;
    let mut last = x.clone();
    for layer in &net.spec.layers {
        let inputs: Vec<&Tensor> = if layer.inputs.is_empty() {
            match &prev {
                Some(p) => vec![&acts[p]],
                None => vec![x],
            }
        } else {
            layer
                .inputs
                .iter()
                .map(|n| {
                    if n == INPUT_NAME {
                        Ok(x)
                    } else {
                        acts.get(n)
                            .ok_or_else(|| Error::Shape(format!("unknown input {n:?}")))
                    }
                })
                .collect::<Result<_>>()?
        };
        let out = layer_forward(net, &layer.name, &layer.kind, &inputs)?;
        acts.insert(layer.name.clone(), out.clone());
        prev = Some(layer.name.clone());
        last = out;
    }
    Ok(last)
}

pub(crate) fn layer_forward(
    net: &Network,
    name: &str,
    kind: &LayerKind,
    inputs: &[&Tensor],
) -> Result<Tensor> {
    let x = inputs[0];
    match kind {
        LayerKind::Conv { stride, pad, .. } => match net.params.get(name) {
            Some(LayerParams::Conv { kernel, bias }) => {
                let groups = conv_groups(kind);
                conv_forward(x, kernel, bias, *stride, *pad, groups)
            }
            Some(LayerParams::DecomposedConv { factors, bias }) => {
                decomposed_forward(x, factors, bias, *stride, *pad)
            }
            _ => Err(Error::Model(format!(
                "layer {name:?} has no usable weights"
            ))),
        },
        LayerKind::Fc { .. } => match net.params.get(name) {
            Some(LayerParams::Fc { weight, bias }) => fc_forward(x, weight, bias),
            Some(LayerParams::DecomposedFc {
                reduce,
                expand,
                bias,
            }) => {
                let mid = fc_forward(x, reduce, &[])?;
                fc_forward(&mid, expand, bias)
            }
            _ => Err(Error::Model(format!(
                "layer {name:?} has no usable weights"
            ))),
        },
        LayerKind::Relu => Ok(relu(x)),
        LayerKind::MaxPool {
            window,
            stride,
            pad,
        } => maxpool_forward(x, *window, *stride, *pad),
        LayerKind::AvgPool {
            window,
            stride,
            pad,
        } => avgpool_forward(x, *window, *stride, *pad),
        LayerKind::Concat => concat(inputs),
        LayerKind::Lrn | LayerKind::Softmax => Err(Error::InvalidArgument(format!(
            "layer {name:?}: kind is analyzer-only, not supported in the numeric forward pass"
        ))),
    }
}

fn conv_groups(kind: &LayerKind) -> usize {
    match kind {
        LayerKind::Conv { groups, .. } => *groups,
        _ => 1,
    }
}

/// Max absolute and relative (Frobenius) difference between two activations.
pub fn compare_outputs(a: &Tensor, b: &Tensor) -> Result<(f64, f64)> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "outputs have different shapes {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((a.max_abs_diff(b), a.rel_error(b)))
}
