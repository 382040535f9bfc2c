//! Desk-scale SGD fine-tuning of (compressed) networks on a synthetic
//! classification task: step (3) of the compression scheme, demonstrated at
//! toy size.
//!
//! Training runs on plain layer chains (no concat fan-in), single-threaded,
//! and is bitwise deterministic for a fixed seed. Plain SGD is the default;
//! momentum is available behind an option but off by default.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::forward::{
    col2im_add, conv_forward, im2col, kernel_matrix, stage_kernels, StageKernels,
};
use crate::net::{LayerKind, LayerParams, Network};
use crate::tensor::Tensor;

/// Learning-rate schedule and loop parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Divide the rate by `lr_drop_factor` every this many epochs.
    pub lr_drop_every: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Optional momentum coefficient; plain SGD when absent.
    pub momentum: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            lr_drop_every: 5,
            lr_drop_factor: 10.0,
            batch_size: 16,
            epochs: 10,
            seed: 0,
            momentum: None,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.base_lr.is_nan() || self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return Err(Error::InvalidArgument(
                "base_lr must be finite and >= 0".into(),
            ));
        }
        if self.lr_drop_every == 0 {
            return Err(Error::InvalidArgument("lr_drop_every must be >= 1".into()));
        }
        if self.lr_drop_factor.is_nan() || self.lr_drop_factor <= 1.0 {
            return Err(Error::InvalidArgument("lr_drop_factor must be > 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stepped schedule: `base_lr * factor^(-floor(epoch / drop_every))`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr / cfg.lr_drop_factor.powi((epoch / cfg.lr_drop_every) as i32)
}

/// One labelled activation.
pub type Sample = (Tensor, usize);

/// Seeded synthetic classification task: each class is a fixed random
/// template, samples are template plus Gaussian noise, labels round-robin so
/// classes stay balanced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub seed: u64,
    pub input: [usize; 3],
    pub classes: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub noise: f64,
}

impl SyntheticTask {
    pub fn generate(&self) -> (Vec<Sample>, Vec<Sample>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shape = [self.input[0], self.input[1], self.input[2]];
        let templates: Vec<Tensor> = (0..self.classes)
            .map(|_| Tensor::from_fn(&shape, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let draw = |rng: &mut ChaCha8Rng, label: usize| -> Sample {
            let t = &templates[label];
            let x = Tensor::from_fn(&shape, |idx| {
                t.get(idx) + self.noise * crate::tensor::test_support::normal(rng)
            });
            (x, label)
        };
        let train = (0..self.train_size)
            .map(|i| draw(&mut rng, i % self.classes))
            .collect();
        let val = (0..self.val_size)
            .map(|i| draw(&mut rng, i % self.classes))
            .collect();
        (train, val)
    }
}

/// Per-epoch training record; serialized as one JSON line each.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's batches.
    pub loss: f64,
    /// Validation accuracy after the epoch.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Gradients shaped exactly like [`LayerParams`].
#[derive(Debug, Clone)]
enum ParamGrads {
    Conv {
        kernel: Tensor,
        bias: Vec<f64>,
    },
    Fc {
        weight: Matrix,
        bias: Vec<f64>,
    },
    DecomposedConv {
        u3: Option<Vec<Matrix>>,
        core: Vec<Tensor>,
        u4: Option<Vec<Matrix>>,
        bias: Vec<f64>,
    },
    DecomposedFc {
        reduce: Matrix,
        expand: Matrix,
        bias: Vec<f64>,
    },
}

type GradMap = BTreeMap<String, ParamGrads>;

/// Numerically stable softmax cross-entropy; returns loss and
/// d(loss)/d(scores).
fn softmax_ce(scores: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = -(exps[label] / z).ln();
    let grad = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == label { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// Gradient of the dense convolution w.r.t. input, kernel and bias.
fn conv_backward(
    x: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    groups: usize,
    dy: &Tensor,
) -> (Tensor, Tensor, Vec<f64>) {
    let kd = kernel.shape();
    let (d, sg, t) = (kd[0], kd[2], kd[3]);
    let tg = t / groups;
    let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
    let mut dx = Tensor::zeros(x.shape());
    let mut dkernel = Tensor::zeros(kernel.shape());
    let mut dbias = vec![0.0; t];

    for row in 0..oh * ow {
        for tc in 0..t {
            dbias[tc] += dy.data()[row * t + tc];
        }
    }
    for g in 0..groups {
        let patches = im2col(x, d, stride, pad, g * sg, sg, oh, ow);
        let dy_g = Matrix::from_fn(oh * ow, tg, |row, tc| dy.data()[row * t + g * tg + tc]);
        // dK = P^T dY
        let dkm = patches.transpose().matmul(&dy_g);
        for i in 0..d {
            for j in 0..d {
                for sc in 0..sg {
                    for tc in 0..tg {
                        dkernel.set(&[i, j, sc, g * tg + tc], dkm.get((i * d + j) * sg + sc, tc));
                    }
                }
            }
        }
        // dP = dY K^T, scattered back
        let km = kernel_matrix(kernel, g, groups);
        let dpatches = dy_g.matmul(&km.transpose());
        col2im_add(&dpatches, &mut dx, d, stride, pad, g * sg, sg, oh, ow);
    }
    (dx, dkernel, dbias)
}

fn fc_backward(x: &Tensor, weight: &Matrix, dy: &[f64]) -> (Tensor, Matrix, Vec<f64>) {
    let dweight = Matrix::from_fn(weight.rows(), weight.cols(), |o, i| dy[o] * x.data()[i]);
    let mut dx = Tensor::zeros(x.shape());
    for (i, v) in dx.data_mut().iter_mut().enumerate() {
        let mut acc = 0.0;
        for (o, dyo) in dy.iter().enumerate() {
            acc += weight.get(o, i) * dyo;
        }
        *v = acc;
    }
    (dx, dweight, dy.to_vec())
}

/// Forward cache for one layer of the chain.
enum Cache {
    Conv {
        x: Tensor,
    },
    /// Stage inputs in execution order, plus the assembled stage kernels.
    Decomposed {
        stage_inputs: Vec<Tensor>,
        stages: StageKernels,
    },
    Fc {
        x: Tensor,
    },
    DecomposedFc {
        x: Tensor,
        mid: Tensor,
    },
    Relu {
        x: Tensor,
    },
    MaxPool {
        in_shape: Vec<usize>,
        /// flat source index per output element; usize::MAX for empty windows
        argmax: Vec<usize>,
    },
    AvgPool {
        in_shape: Vec<usize>,
        window: usize,
        stride: usize,
        pad: usize,
    },
}

/// Training requires a plain chain: every layer feeds the next.
fn check_chain(net: &Network) -> Result<()> {
    for layer in &net.spec.layers {
        if !layer.inputs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "training supports linear layer chains only; layer {:?} names explicit inputs",
                layer.name
            )));
        }
        if matches!(
            layer.kind,
            LayerKind::Concat | LayerKind::Lrn | LayerKind::Softmax
        ) {
            return Err(Error::InvalidArgument(format!(
                "layer {:?}: kind not supported in training",
                layer.name
            )));
        }
    }
    Ok(())
}

fn forward_with_cache(net: &Network, x: &Tensor) -> Result<(Tensor, Vec<Cache>)> {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(net.spec.layers.len());
    for layer in &net.spec.layers {
        let (next, cache) = match (&layer.kind, net.params.get(&layer.name)) {
            (
                LayerKind::Conv {
                    stride,
                    pad,
                    groups,
                    ..
                },
                Some(LayerParams::Conv { kernel, bias }),
            ) => {
                let y = conv_forward(&cur, kernel, bias, *stride, *pad, *groups)?;
                (y, Cache::Conv { x: cur })
            }
            (
                LayerKind::Conv { stride, pad, .. },
                Some(LayerParams::DecomposedConv { factors, bias }),
            ) => {
                let stages = stage_kernels(factors)?;
                let groups = factors.groups.len();
                let mut stage_inputs = Vec::new();
                let mut z = cur;
                if let Some(pre) = &stages.pre {
                    stage_inputs.push(z.clone());
                    z = conv_forward(&z, pre, &[], 1, 0, groups)?;
                }
                stage_inputs.push(z.clone());
                let mid_is_last = stages.post.is_none();
                z = conv_forward(
                    &z,
                    &stages.mid,
                    if mid_is_last { bias } else { &[] },
                    *stride,
                    *pad,
                    groups,
                )?;
                if let Some(post) = &stages.post {
                    stage_inputs.push(z.clone());
                    z = conv_forward(&z, post, bias, 1, 0, groups)?;
                }
                (
                    z,
                    Cache::Decomposed {
                        stage_inputs,
                        stages,
                    },
                )
            }
            (LayerKind::Fc { .. }, Some(LayerParams::Fc { weight, bias })) => {
                let y = crate::net::forward::fc_forward(&cur, weight, bias)?;
                (y, Cache::Fc { x: cur })
            }
            (
                LayerKind::Fc { .. },
                Some(LayerParams::DecomposedFc {
                    reduce,
                    expand,
                    bias,
                }),
            ) => {
                let mid = crate::net::forward::fc_forward(&cur, reduce, &[])?;
                let y = crate::net::forward::fc_forward(&mid, expand, bias)?;
                (y, Cache::DecomposedFc { x: cur, mid })
            }
            (LayerKind::Relu, _) => {
                let y = crate::net::forward::relu(&cur);
                (y, Cache::Relu { x: cur })
            }
            (
                LayerKind::MaxPool {
                    window,
                    stride,
                    pad,
                },
                _,
            ) => {
                let (y, argmax) = maxpool_with_indices(&cur, *window, *stride, *pad)?;
                (
                    y,
                    Cache::MaxPool {
                        in_shape: cur.shape().to_vec(),
                        argmax,
                    },
                )
            }
            (
                LayerKind::AvgPool {
                    window,
                    stride,
                    pad,
                },
                _,
            ) => {
                let y = crate::net::forward::avgpool_forward(&cur, *window, *stride, *pad)?;
                (
                    y,
                    Cache::AvgPool {
                        in_shape: cur.shape().to_vec(),
                        window: *window,
                        stride: *stride,
                        pad: *pad,
                    },
                )
            }
            (kind, _) => {
                return Err(Error::Model(format!(
                    "layer {:?} ({kind:?}) not trainable or missing weights",
                    layer.name
                )))
            }
        };
        caches.push(cache);
        cur = next;
    }
    Ok((cur, caches))
}

fn maxpool_with_indices(
    x: &Tensor,
    window: usize,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let oh = crate::net::out_side(h, window, stride, pad)?;
    let ow = crate::net::out_side(w, window, stride, pad)?;
    let mut out = Tensor::zeros(&[oh, ow, c]);
    let mut argmax = vec![usize::MAX; oh * ow * c];
    for ph in 0..oh {
        for pw in 0..ow {
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
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
                        let src = (hi as usize * w + wj as usize) * c + ch;
                        let v = x.data()[src];
                        if v > best {
                            best = v;
                            best_idx = src;
                        }
                    }
                }
                let dst = (ph * ow + pw) * c + ch;
                out.data_mut()[dst] = if best_idx == usize::MAX { 0.0 } else { best };
                argmax[dst] = best_idx;
            }
        }
    }
    Ok((out, argmax))
}

/// Backward over the cached chain; returns the loss gradient w.r.t. the
/// network input and per-layer parameter gradients.
fn backward(net: &Network, caches: &[Cache], dy_final: Tensor) -> Result<(Tensor, GradMap)> {
    let mut grads = GradMap::new();
    let mut dy = dy_final;
    for (layer, cache) in net.spec.layers.iter().zip(caches).rev() {
        match (cache, net.params.get(&layer.name)) {
            (Cache::Conv { x }, Some(LayerParams::Conv { kernel, .. })) => {
                let (stride, pad, groups) = conv_geometry(&layer.kind);
                let (dx, dk, db) = conv_backward(x, kernel, stride, pad, groups, &dy);
                grads.insert(
                    layer.name.clone(),
                    ParamGrads::Conv {
                        kernel: dk,
                        bias: db,
                    },
                );
                dy = dx;
            }
            (
                Cache::Decomposed {
                    stage_inputs,
                    stages,
                },
                Some(LayerParams::DecomposedConv { factors, .. }),
            ) => {
                let (stride, pad, _) = conv_geometry(&layer.kind);
                let groups = factors.groups.len();
                let mut stage_idx = stage_inputs.len();
                let mut dcur = dy;
                let mut dpost: Option<Tensor> = None;
                let mut bias_grad: Vec<f64> = Vec::new();

                if let Some(post) = &stages.post {
                    stage_idx -= 1;
                    let xin = &stage_inputs[stage_idx];
                    let (dx, dk, db) = conv_backward(xin, post, 1, 0, groups, &dcur);
                    dpost = Some(dk);
                    bias_grad = db;
                    dcur = dx;
                }

                stage_idx -= 1;
                let xin = &stage_inputs[stage_idx];
                let (dx, dmid, db) = conv_backward(xin, &stages.mid, stride, pad, groups, &dcur);
                if stages.post.is_none() {
                    bias_grad = db;
                }
                dcur = dx;

                let dpre = if let Some(pre) = &stages.pre {
                    stage_idx -= 1;
                    let xin0 = &stage_inputs[stage_idx];
                    let (dx0, dk0, _) = conv_backward(xin0, pre, 1, 0, groups, &dcur);
                    dcur = dx0;
                    Some(dk0)
                } else {
                    None
                };

                grads.insert(
                    layer.name.clone(),
                    stage_grads_to_factors(factors, dpre, dmid, dpost, bias_grad),
                );
                dy = dcur;
            }
            (Cache::Fc { x }, Some(LayerParams::Fc { weight, .. })) => {
                let (dx, dw, db) = fc_backward(x, weight, dy.data());
                grads.insert(
                    layer.name.clone(),
                    ParamGrads::Fc {
                        weight: dw,
                        bias: db,
                    },
                );
                dy = dx;
            }
            (
                Cache::DecomposedFc { x, mid },
                Some(LayerParams::DecomposedFc { reduce, expand, .. }),
            ) => {
                let (dmid, dexpand, db) = fc_backward(mid, expand, dy.data());
                let (dx, dreduce, _) = fc_backward(x, reduce, dmid.data());
                grads.insert(
                    layer.name.clone(),
                    ParamGrads::DecomposedFc {
                        reduce: dreduce,
                        expand: dexpand,
                        bias: db,
                    },
                );
                dy = dx;
            }
            (Cache::Relu { x }, _) => {
                let mut dx = dy.clone();
                for (g, xv) in dx.data_mut().iter_mut().zip(x.data()) {
                    if *xv <= 0.0 {
                        *g = 0.0;
                    }
                }
                dy = dx;
            }
            (Cache::MaxPool { in_shape, argmax }, _) => {
                let mut dx = Tensor::zeros(in_shape);
                for (dst, &src) in argmax.iter().enumerate() {
                    if src != usize::MAX {
                        dx.data_mut()[src] += dy.data()[dst];
                    }
                }
                dy = dx;
            }
            (
                Cache::AvgPool {
                    in_shape,
                    window,
                    stride,
                    pad,
                },
                _,
            ) => {
                let mut dx = Tensor::zeros(in_shape);
                let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (dy.shape()[0], dy.shape()[1]);
                let area = (window * window) as f64;
                for ph in 0..oh {
                    for pw in 0..ow {
                        for ch in 0..c {
                            let g = dy.data()[(ph * ow + pw) * c + ch] / area;
                            for i in 0..*window {
                                let hi = (ph * stride + i) as isize - *pad as isize;
                                if hi < 0 || hi >= h as isize {
                                    continue;
                                }
                                for j in 0..*window {
                                    let wj = (pw * stride + j) as isize - *pad as isize;
                                    if wj < 0 || wj >= w as isize {
                                        continue;
                                    }
                                    dx.data_mut()[(hi as usize * w + wj as usize) * c + ch] += g;
                                }
                            }
                        }
                    }
                }
                dy = dx;
            }
            _ => {
                return Err(Error::Model(format!(
                    "layer {:?}: cache/params mismatch in backward",
                    layer.name
                )))
            }
        }
    }
    Ok((dy, grads))
}

fn conv_geometry(kind: &LayerKind) -> (usize, usize, usize) {
    match kind {
        LayerKind::Conv {
            stride,
            pad,
            groups,
            ..
        } => (*stride, *pad, *groups),
        _ => (1, 0, 1),
    }
}

/// Map stage-kernel gradients back to the per-group factor layout.
fn stage_grads_to_factors(
    factors: &crate::tucker::KernelFactors,
    dpre: Option<Tensor>,
    dmid: Tensor,
    dpost: Option<Tensor>,
    dbias: Vec<f64>,
) -> ParamGrads {
    let groups = factors.groups.len();
    let core_shape = factors.groups[0].core.shape().to_vec();
    let (r3, r4) = (core_shape[2], core_shape[3]);
    let du3 = dpre.map(|dk| {
        let sg = dk.shape()[2];
        (0..groups)
            .map(|g| Matrix::from_fn(sg, r3, |s, r| dk.get(&[0, 0, s, g * r3 + r])))
            .collect()
    });
    let dcore = (0..groups)
        .map(|g| {
            Tensor::from_fn(&core_shape, |idx| {
                dmid.get(&[idx[0], idx[1], idx[2], g * r4 + idx[3]])
            })
        })
        .collect();
    let du4 = dpost.map(|dk| {
        let tg = dk.shape()[3] / groups;
        (0..groups)
            .map(|g| Matrix::from_fn(tg, r4, |t, r| dk.get(&[0, 0, r, g * tg + t])))
            .collect()
    });
    ParamGrads::DecomposedConv {
        u3: du3,
        core: dcore,
        u4: du4,
        bias: dbias,
    }
}

// ---------------------------------------------------------------------------
// Flat parameter views (SGD step, momentum, finite differences)
// ---------------------------------------------------------------------------

/// All trainable parameters flattened in a fixed order (spec layer order,
/// then the natural field order within each layer).
pub fn flatten_params(net: &Network) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &net.spec.layers {
        if let Some(p) = net.params.get(&layer.name) {
            match p {
                LayerParams::Conv { kernel, bias } => {
                    out.extend_from_slice(kernel.data());
                    out.extend_from_slice(bias);
                }
                LayerParams::Fc { weight, bias } => {
                    out.extend_from_slice(weight.data());
                    out.extend_from_slice(bias);
                }
                LayerParams::DecomposedConv { factors, bias } => {
                    for g in &factors.groups {
                        if let Some(u3) = &g.factors[2] {
                            out.extend_from_slice(u3.data());
                        }
                        out.extend_from_slice(g.core.data());
                        if let Some(u4) = &g.factors[3] {
                            out.extend_from_slice(u4.data());
                        }
                    }
                    out.extend_from_slice(bias);
                }
                LayerParams::DecomposedFc {
                    reduce,
                    expand,
                    bias,
                } => {
                    out.extend_from_slice(reduce.data());
                    out.extend_from_slice(expand.data());
                    out.extend_from_slice(bias);
                }
            }
        }
    }
    out
}

/// Inverse of [`flatten_params`].
pub fn assign_params(net: &mut Network, flat: &[f64]) -> Result<()> {
    let mut pos = 0usize;
    let layers: Vec<String> = net.spec.layers.iter().map(|l| l.name.clone()).collect();
    for name in layers {
        if let Some(p) = net.params.get_mut(&name) {
            match p {
                LayerParams::Conv { kernel, bias } => {
                    pos = copy_into(flat, pos, kernel.data_mut())?;
                    pos = copy_into(flat, pos, bias)?;
                }
                LayerParams::Fc { weight, bias } => {
                    pos = copy_into(flat, pos, weight.data_mut())?;
                    pos = copy_into(flat, pos, bias)?;
                }
                LayerParams::DecomposedConv { factors, bias } => {
                    for g in factors.groups.iter_mut() {
                        if let Some(u3) = g.factors[2].as_mut() {
                            pos = copy_into(flat, pos, u3.data_mut())?;
                        }
                        pos = copy_into(flat, pos, g.core.data_mut())?;
                        if let Some(u4) = g.factors[3].as_mut() {
                            pos = copy_into(flat, pos, u4.data_mut())?;
                        }
                    }
                    pos = copy_into(flat, pos, bias)?;
                }
                LayerParams::DecomposedFc {
                    reduce,
                    expand,
                    bias,
                } => {
                    pos = copy_into(flat, pos, reduce.data_mut())?;
                    pos = copy_into(flat, pos, expand.data_mut())?;
                    pos = copy_into(flat, pos, bias)?;
                }
            }
        }
    }
    if pos != flat.len() {
        return Err(Error::Model(format!(
            "parameter vector length {} does not match network ({} consumed)",
            flat.len(),
            pos
        )));
    }
    Ok(())
}

fn copy_into(flat: &[f64], pos: usize, dst: &mut [f64]) -> Result<usize> {
    let end = pos + dst.len();
    if end > flat.len() {
        return Err(Error::Model("parameter vector too short".into()));
    }
    dst.copy_from_slice(&flat[pos..end]);
    Ok(end)
}

/// Gradients flattened with the exact ordering of [`flatten_params`].
fn flatten_grads(net: &Network, grads: &GradMap) -> Vec<f64> {
    let mut out = Vec::new();
    for layer in &net.spec.layers {
        let Some(p) = net.params.get(&layer.name) else {
            continue;
        };
        match (p, grads.get(&layer.name)) {
            (LayerParams::Conv { kernel, bias }, g) => match g {
                Some(ParamGrads::Conv {
                    kernel: dk,
                    bias: db,
                }) => {
                    out.extend_from_slice(dk.data());
                    out.extend_from_slice(db);
                }
                _ => out.resize(out.len() + kernel.len() + bias.len(), 0.0),
            },
            (LayerParams::Fc { weight, bias }, g) => match g {
                Some(ParamGrads::Fc {
                    weight: dw,
                    bias: db,
                }) => {
                    out.extend_from_slice(dw.data());
                    out.extend_from_slice(db);
                }
                _ => out.resize(out.len() + weight.data().len() + bias.len(), 0.0),
            },
            (LayerParams::DecomposedConv { factors, bias }, g) => match g {
                Some(ParamGrads::DecomposedConv {
                    u3,
                    core,
                    u4,
                    bias: db,
                }) => {
                    for (gi, fg) in factors.groups.iter().enumerate() {
                        if fg.factors[2].is_some() {
                            out.extend_from_slice(u3.as_ref().unwrap()[gi].data());
                        }
                        out.extend_from_slice(core[gi].data());
                        if fg.factors[3].is_some() {
                            out.extend_from_slice(u4.as_ref().unwrap()[gi].data());
                        }
                    }
                    out.extend_from_slice(db);
                }
                _ => {
                    let mut n = bias.len();
                    for fg in &factors.groups {
                        n += fg.core.len();
                        if let Some(u3) = &fg.factors[2] {
                            n += u3.data().len();
                        }
                        if let Some(u4) = &fg.factors[3] {
                            n += u4.data().len();
                        }
                    }
                    out.resize(out.len() + n, 0.0);
                }
            },
            (
                LayerParams::DecomposedFc {
                    reduce,
                    expand,
                    bias,
                },
                g,
            ) => match g {
                Some(ParamGrads::DecomposedFc {
                    reduce: dr,
                    expand: de,
                    bias: db,
                }) => {
                    out.extend_from_slice(dr.data());
                    out.extend_from_slice(de.data());
                    out.extend_from_slice(db);
                }
                _ => out.resize(
                    out.len() + reduce.data().len() + expand.data().len() + bias.len(),
                    0.0,
                ),
            },
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Public training surface
// ---------------------------------------------------------------------------

/// Mean loss over a batch (pure forward; the finite-difference oracle calls
/// this).
pub fn loss_on_batch(net: &Network, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for (x, label) in batch {
        let (scores, _) = forward_with_cache(net, x)?;
        let (loss, _) = softmax_ce(scores.data(), *label);
        total += loss;
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and flattened mean gradients over a batch.
pub fn grads_on_batch(net: &Network, batch: &[Sample]) -> Result<(f64, Vec<f64>)> {
    let mut total_loss = 0.0;
    let mut total: Option<Vec<f64>> = None;
    for (x, label) in batch {
        let (scores, caches) = forward_with_cache(net, x)?;
        let (loss, dscores) = softmax_ce(scores.data(), *label);
        total_loss += loss;
        let dy = Tensor::new(scores.shape().to_vec(), dscores)?;
        let (_, grads) = backward(net, &caches, dy)?;
        let flat = flatten_grads(net, &grads);
        match &mut total {
            None => total = Some(flat),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(flat) {
                    *a += g;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut flat = total.unwrap_or_default();
    for g in flat.iter_mut() {
        *g /= n;
    }
    Ok((total_loss / n, flat))
}

/// Loss gradient w.r.t. the input activation of a single sample.
pub fn input_gradient(net: &Network, sample: &Sample) -> Result<Tensor> {
    let (scores, caches) = forward_with_cache(net, &sample.0)?;
    let (_, dscores) = softmax_ce(scores.data(), sample.1);
    let dy = Tensor::new(scores.shape().to_vec(), dscores)?;
    let (dx, _) = backward(net, &caches, dy)?;
    Ok(dx)
}

/// Classification accuracy of the network on a sample set.
pub fn accuracy(net: &Network, samples: &[Sample]) -> Result<f64> {
    let mut hits = 0usize;
    for (x, label) in samples {
        let (scores, _) = forward_with_cache(net, x)?;
        let pred = scores
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if pred == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

/// Mini-batch SGD with the stepped learning-rate schedule. Deterministic for
/// a fixed seed; aborts with a diagnostic if the loss turns non-finite.
pub fn train(
    net: &Network,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<(Network, TrainHistory)> {
    cfg.validate()?;
    net.validate()?;
    check_chain(net)?;
    let (train_set, val_set) = task.generate();
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(
            "task has no training samples".into(),
        ));
    }

    let mut model = net.clone();
    let mut history = TrainHistory::default();
    let mut velocity: Option<Vec<f64>> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_f17e);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = grads_on_batch(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}, batch {batches} (lr {lr})"
                )));
            }
            let mut params = flatten_params(&model);
            match (cfg.momentum, &mut velocity) {
                (Some(mu), v) => {
                    let vel = v.get_or_insert_with(|| vec![0.0; params.len()]);
                    for ((p, g), vv) in params.iter_mut().zip(&grads).zip(vel.iter_mut()) {
                        *vv = mu * *vv + g;
                        *p -= lr * *vv;
                    }
                }
                (None, _) => {
                    for (p, g) in params.iter_mut().zip(&grads) {
                        *p -= lr * g;
                    }
                }
            }
            assign_params(&mut model, &params)?;
            epoch_loss += loss;
            batches += 1;
        }
        let val_accuracy = if val_set.is_empty() {
            f64::NAN
        } else {
            accuracy(&model, &val_set)?
        };
        history.epochs.push(EpochStats {
            epoch,
            lr,
            loss: epoch_loss / batches.max(1) as f64,
            accuracy: val_accuracy,
        });
    }
    Ok((model, history))
}
