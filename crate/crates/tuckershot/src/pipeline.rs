//! The one-shot compression scheme end to end, plus the layerwise analyzer.
//!
//! Costs count one multiply-add as one FLOP, and biases are excluded from
//! FLOP counts. Weight totals are reported both without and with bias terms;
//! a substituted layer keeps a single bias vector on its final stage.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::net::{substitute_layer, LayerKind, LayerParams, Network, NetworkSpec};
use crate::tensor::Tensor;
use crate::tucker::{
    tucker1_kernel, tucker2_kernel, KernelFactors, KernelTensor, DEFAULT_MAX_SWEEPS, DEFAULT_TOL,
};
use crate::vbmf::vbmf_estimate;

/// Worker-count cap for the per-layer decomposition fan-out.
pub const THREADS_ENV: &str = "TUCKERSHOT_THREADS";

/// Ranks applied to one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRanks {
    /// Both channel modes decomposed (per group).
    Tucker2 { r3: usize, r4: usize },
    /// Single-mode decomposition (output side).
    Tucker1 { r: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSource {
    Vbmf,
    Manual,
}

/// Per-layer rank choices driving a compression run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSelection {
    pub source: RankSource,
    pub ranks: BTreeMap<String, LayerRanks>,
}

impl RankSelection {
    pub fn manual(ranks: BTreeMap<String, LayerRanks>) -> Self {
        Self {
            source: RankSource::Manual,
            ranks,
        }
    }

    /// Every named layer must exist, be weighted, and the ranks must fit its
    /// per-group extents.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        for (name, ranks) in &self.ranks {
            let layer = spec
                .layer(name)
                .ok_or_else(|| Error::Model(format!("rank entry for unknown layer {name:?}")))?;
            match (&layer.kind, ranks) {
                (LayerKind::Conv { s, t, groups, .. }, LayerRanks::Tucker2 { r3, r4 }) => {
                    let (sg, tg) = (s / groups, t / groups);
                    if *r3 == 0 || *r3 > sg {
                        return Err(Error::InvalidArgument(format!(
                            "layer {name:?}: r3 {r3} out of range 1..={sg}"
                        )));
                    }
                    if *r4 == 0 || *r4 > tg {
                        return Err(Error::InvalidArgument(format!(
                            "layer {name:?}: r4 {r4} out of range 1..={tg}"
                        )));
                    }
                }
                (LayerKind::Conv { t, groups, .. }, LayerRanks::Tucker1 { r }) => {
                    let tg = t / groups;
                    if *r == 0 || *r > tg {
                        return Err(Error::InvalidArgument(format!(
                            "layer {name:?}: rank {r} out of range 1..={tg}"
                        )));
                    }
                }
                (LayerKind::Fc { in_dim, out_dim }, LayerRanks::Tucker1 { r }) => {
                    let cap = *in_dim.min(out_dim);
                    if *r == 0 || *r > cap {
                        return Err(Error::InvalidArgument(format!(
                            "layer {name:?}: rank {r} out of range 1..={cap}"
                        )));
                    }
                }
                (LayerKind::Fc { .. }, LayerRanks::Tucker2 { .. }) => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {name:?}: fc layers take a single rank"
                    )));
                }
                _ => {
                    return Err(Error::InvalidArgument(format!(
                        "layer {name:?} is not a weighted layer"
                    )));
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Cost accounting
// ---------------------------------------------------------------------------

/// Weights/FLOPs cost of one stage of a (possibly decomposed) layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCost {
    pub weights: u64,
    pub flops: u64,
}

/// Dense convolution cost: `d^2 (s/g)(t/g) g` weights, times the output area
/// in FLOPs.
pub fn conv_cost(d: usize, s: usize, t: usize, groups: usize, out_hw: (usize, usize)) -> StageCost {
    let weights = (d * d * (s / groups) * (t / groups) * groups) as u64;
    StageCost {
        weights,
        flops: weights * (out_hw.0 * out_hw.1) as u64,
    }
}

/// Dense fully-connected cost.
pub fn fc_cost(in_dim: usize, out_dim: usize) -> StageCost {
    let weights = (in_dim * out_dim) as u64;
    StageCost {
        weights,
        flops: weights,
    }
}

/// Stage costs of a decomposed convolution. The 1x1 reduction runs at the
/// input area, the core and expansion at the output area.
pub fn compressed_conv_cost(
    d: usize,
    s: usize,
    t: usize,
    groups: usize,
    ranks: LayerRanks,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
) -> Vec<StageCost> {
    let g = groups as u64;
    let (sg, tg) = ((s / groups) as u64, (t / groups) as u64);
    let in_area = (in_hw.0 * in_hw.1) as u64;
    let out_area = (out_hw.0 * out_hw.1) as u64;
    let d2 = (d * d) as u64;
    match ranks {
        LayerRanks::Tucker2 { r3, r4 } => {
            let (r3, r4) = (r3 as u64, r4 as u64);
            vec![
                StageCost {
                    weights: g * sg * r3,
                    flops: g * sg * r3 * in_area,
                },
                StageCost {
                    weights: g * d2 * r3 * r4,
                    flops: g * d2 * r3 * r4 * out_area,
                },
                StageCost {
                    weights: g * tg * r4,
                    flops: g * tg * r4 * out_area,
                },
            ]
        }
        LayerRanks::Tucker1 { r } => {
            let r = r as u64;
            vec![
                StageCost {
                    weights: g * d2 * sg * r,
                    flops: g * d2 * sg * r * out_area,
                },
                StageCost {
                    weights: g * tg * r,
                    flops: g * tg * r * out_area,
                },
            ]
        }
    }
}

/// Stage costs of a rank-`r` fully-connected decomposition.
pub fn compressed_fc_cost(in_dim: usize, out_dim: usize, r: usize) -> Vec<StageCost> {
    let a = (in_dim * r) as u64;
    let b = (r * out_dim) as u64;
    vec![
        StageCost {
            weights: a,
            flops: a,
        },
        StageCost {
            weights: b,
            flops: b,
        },
    ]
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

/// One weighted layer's before/after accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: String,
    pub d: usize,
    pub s: usize,
    pub t: usize,
    pub groups: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
    pub ranks: Option<LayerRanks>,
    pub orig_weights: u64,
    pub orig_flops: u64,
    /// Bias parameters (t or out_dim); identical before and after.
    pub bias_terms: u64,
    pub comp_weights: Option<u64>,
    pub comp_flops: Option<u64>,
    pub stages: Option<Vec<StageCost>>,
    /// Compression ratio M (weights, bias excluded).
    pub ratio_m: Option<f64>,
    /// Speed-up ratio E (FLOPs).
    pub ratio_e: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub orig_weights: u64,
    pub comp_weights: u64,
    pub orig_flops: u64,
    pub comp_flops: u64,
    pub orig_weights_with_bias: u64,
    pub comp_weights_with_bias: u64,
    /// `sum(orig)/sum(comp)`, never a mean of per-layer ratios.
    pub weight_ratio: Option<f64>,
    pub flop_ratio: Option<f64>,
    pub weight_ratio_with_bias: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Counting conventions, echoed into every rendering.
    pub convention: String,
    /// Decomposition policy the costs correspond to.
    pub decomposition: String,
    pub layers: Vec<LayerReport>,
    pub totals: ReportTotals,
}

pub const CONVENTION: &str =
    "1 multiply-add = 1 FLOP; biases excluded from FLOPs; weight totals shown without and with biases";

/// Shapes-only analysis of a network spec under an optional rank selection.
pub fn analyze(spec: &NetworkSpec, selection: Option<&RankSelection>) -> Result<CompressionReport> {
    let shapes = spec.infer_shapes()?;
    if let Some(sel) = selection {
        sel.validate(spec)?;
    }
    let mut layers = Vec::new();
    for layer in &spec.layers {
        let shape = &shapes[&layer.name];
        let ranks = selection.and_then(|s| s.ranks.get(&layer.name).copied());
        let report = match &layer.kind {
            LayerKind::Conv {
                d, s, t, groups, ..
            } => {
                let in_hw = (shape.input.h, shape.input.w);
                let out_hw = (shape.output.h, shape.output.w);
                let orig = conv_cost(*d, *s, *t, *groups, out_hw);
                let stages =
                    ranks.map(|r| compressed_conv_cost(*d, *s, *t, *groups, r, in_hw, out_hw));
                Some(build_layer_report(
                    &layer.name,
                    "conv",
                    *d,
                    *s,
                    *t,
                    *groups,
                    in_hw,
                    out_hw,
                    ranks,
                    orig,
                    *t as u64,
                    stages,
                ))
            }
            LayerKind::Fc { in_dim, out_dim } => {
                let orig = fc_cost(*in_dim, *out_dim);
                let stages = match ranks {
                    Some(LayerRanks::Tucker1 { r }) => {
                        Some(compressed_fc_cost(*in_dim, *out_dim, r))
                    }
                    Some(LayerRanks::Tucker2 { .. }) => unreachable!("validated above"),
                    None => None,
                };
                Some(build_layer_report(
                    &layer.name,
                    "fc",
                    1,
                    *in_dim,
                    *out_dim,
                    1,
                    (1, 1),
                    (1, 1),
                    ranks,
                    orig,
                    *out_dim as u64,
                    stages,
                ))
            }
            _ => None,
        };
        if let Some(r) = report {
            layers.push(r);
        }
    }

    let mut totals = ReportTotals {
        orig_weights: 0,
        comp_weights: 0,
        orig_flops: 0,
        comp_flops: 0,
        orig_weights_with_bias: 0,
        comp_weights_with_bias: 0,
        weight_ratio: None,
        flop_ratio: None,
        weight_ratio_with_bias: None,
    };
    for l in &layers {
        totals.orig_weights += l.orig_weights;
        totals.orig_flops += l.orig_flops;
        totals.comp_weights += l.comp_weights.unwrap_or(l.orig_weights);
        totals.comp_flops += l.comp_flops.unwrap_or(l.orig_flops);
        totals.orig_weights_with_bias += l.orig_weights + l.bias_terms;
        totals.comp_weights_with_bias += l.comp_weights.unwrap_or(l.orig_weights) + l.bias_terms;
    }
    totals.weight_ratio = ratio(totals.orig_weights, totals.comp_weights);
    totals.flop_ratio = ratio(totals.orig_flops, totals.comp_flops);
    totals.weight_ratio_with_bias =
        ratio(totals.orig_weights_with_bias, totals.comp_weights_with_bias);

    Ok(CompressionReport {
        convention: CONVENTION.into(),
        decomposition: format!(
            "tucker-2/tucker-1 via HOSVD init + HOOI (max_sweeps={DEFAULT_MAX_SWEEPS}, tol={DEFAULT_TOL:e})"
        ),
        layers,
        totals,
    })
}

fn ratio(orig: u64, comp: u64) -> Option<f64> {
    if comp == 0 {
        None
    } else {
        Some(orig as f64 / comp as f64)
    }
}

#[allow(clippy::too_many_arguments)]
fn build_layer_report(
    name: &str,
    kind: &str,
    d: usize,
    s: usize,
    t: usize,
    groups: usize,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
    ranks: Option<LayerRanks>,
    orig: StageCost,
    bias_terms: u64,
    stages: Option<Vec<StageCost>>,
) -> LayerReport {
    let comp_weights = stages
        .as_ref()
        .map(|st| st.iter().map(|c| c.weights).sum::<u64>());
    let comp_flops = stages
        .as_ref()
        .map(|st| st.iter().map(|c| c.flops).sum::<u64>());
    LayerReport {
        name: name.into(),
        kind: kind.into(),
        d,
        s,
        t,
        groups,
        in_hw,
        out_hw,
        ranks,
        orig_weights: orig.weights,
        orig_flops: orig.flops,
        bias_terms,
        comp_weights,
        comp_flops,
        stages,
        ratio_m: comp_weights.and_then(|c| ratio(orig.weights, c)),
        ratio_e: comp_flops.and_then(|c| ratio(orig.flops, c)),
    }
}

// ---------------------------------------------------------------------------
// Rank selection (step 1)
// ---------------------------------------------------------------------------

/// VBMF rank of one matricization, clamped to at least 1. Degenerate
/// matricizations (a side smaller than 2) keep rank 1.
fn vbmf_rank(m: &Matrix) -> Result<usize> {
    if m.rows() < 2 || m.cols() < 2 {
        return Ok(1);
    }
    Ok(vbmf_estimate(m)?.rank.max(1))
}

/// Automatic per-layer rank selection on the trained weights: the channel
/// modes of each kernel are matricized and handed to VBMF. The first
/// convolution and every fully-connected layer get a single output-side
/// rank; every other convolution gets a Tucker-2 pair. Grouped layers run
/// VBMF per group and take the largest rank so all groups share one shape.
pub fn select_ranks(net: &Network) -> Result<RankSelection> {
    net.validate()?;
    let mut ranks = BTreeMap::new();
    let mut first_conv_seen = false;
    for layer in &net.spec.layers {
        match &layer.kind {
            LayerKind::Conv { groups, .. } => {
                let kernel = dense_kernel(net, &layer.name)?;
                let k = KernelTensor::new(kernel, *groups)?;
                let is_first = !first_conv_seen;
                first_conv_seen = true;
                let mut r3 = 1usize;
                let mut r4 = 1usize;
                for g in 0..*groups {
                    let slice = k.group_slice(g);
                    if !is_first {
                        r3 = r3.max(vbmf_rank(&slice.unfold(2)?)?);
                    }
                    r4 = r4.max(vbmf_rank(&slice.unfold(3)?)?);
                }
                let entry = if is_first {
                    LayerRanks::Tucker1 { r: r4 }
                } else {
                    LayerRanks::Tucker2 { r3, r4 }
                };
                ranks.insert(layer.name.clone(), entry);
            }
            LayerKind::Fc { .. } => {
                let w = match net.params.get(&layer.name) {
                    Some(LayerParams::Fc { weight, .. }) => weight.clone(),
                    _ => {
                        return Err(Error::Model(format!(
                            "layer {:?} has no dense weights for rank selection",
                            layer.name
                        )))
                    }
                };
                ranks.insert(
                    layer.name.clone(),
                    LayerRanks::Tucker1 { r: vbmf_rank(&w)? },
                );
            }
            _ => {}
        }
    }
    Ok(RankSelection {
        source: RankSource::Vbmf,
        ranks,
    })
}

/// Dense kernel of a conv layer (must not already be decomposed).
fn dense_kernel(net: &Network, name: &str) -> Result<Tensor> {
    match net.params.get(name) {
        Some(LayerParams::Conv { kernel, .. }) => Ok(kernel.clone()),
        Some(_) => Err(Error::Model(format!(
            "layer {name:?} is already decomposed"
        ))),
        None => Err(Error::Model(format!("layer {name:?} has no weights"))),
    }
}

// ---------------------------------------------------------------------------
// Compression (step 2)
// ---------------------------------------------------------------------------

/// Decompose and substitute every layer named in the selection (optionally
/// restricted to `layer_filter`), and assemble the compression report.
/// Layer decompositions are independent; they fan out over a small worker
/// pool capped by the `TUCKERSHOT_THREADS` environment variable.
pub fn compress(
    net: &Network,
    selection: &RankSelection,
    layer_filter: Option<&[String]>,
) -> Result<(Network, CompressionReport)> {
    net.validate()?;
    selection.validate(&net.spec)?;
    if let Some(filter) = layer_filter {
        for name in filter {
            if !selection.ranks.contains_key(name) {
                return Err(Error::InvalidArgument(format!(
                    "--layers names {name:?}, which has no rank entry"
                )));
            }
        }
    }

    let jobs: Vec<(String, LayerRanks)> = selection
        .ranks
        .iter()
        .filter(|(name, _)| {
            layer_filter
                .map(|f| f.iter().any(|n| n == *name))
                .unwrap_or(true)
        })
        .map(|(name, r)| (name.clone(), *r))
        .collect();

    let factors = decompose_layers(net, &jobs)?;

    let mut compressed = net.clone();
    for ((name, _), f) in jobs.iter().zip(factors) {
        compressed = substitute_layer(&compressed, name, &f)?;
    }

    // The report covers exactly the ranks that were applied.
    let applied = RankSelection {
        source: selection.source,
        ranks: jobs.iter().cloned().collect(),
    };
    let report = analyze(&net.spec, Some(&applied))?;
    Ok((compressed, report))
}

fn worker_count(jobs: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(available);
    cap.min(jobs).max(1)
}

/// Run the per-layer decompositions. Results are positionally collected, so
/// the outcome is independent of worker count and scheduling.
fn decompose_layers(net: &Network, jobs: &[(String, LayerRanks)]) -> Result<Vec<KernelFactors>> {
    if jobs.is_empty() {
        return Ok(Vec::new());
    }
    let workers = worker_count(jobs.len());
    let mut slots: Vec<Option<Result<KernelFactors>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);

    if workers == 1 {
        for (slot, job) in slots.iter_mut().zip(jobs) {
            *slot = Some(decompose_one(net, job));
        }
    } else {
        let slot_refs: Vec<_> = slots.iter_mut().collect();
        let mut chunks: Vec<Vec<(usize, &mut Option<Result<KernelFactors>>)>> =
            (0..workers).map(|_| Vec::new()).collect();
        for (i, slot) in slot_refs.into_iter().enumerate() {
            chunks[i % workers].push((i, slot));
        }
        std::thread::scope(|scope| {
            for chunk in chunks {
                scope.spawn(move || {
                    for (i, slot) in chunk {
                        *slot = Some(decompose_one(net, &jobs[i]));
                    }
                });
            }
        });
    }

    slots
        .into_iter()
        .map(|s| s.expect("worker filled every slot"))
        .collect()
}

fn decompose_one(net: &Network, job: &(String, LayerRanks)) -> Result<KernelFactors> {
    let (name, ranks) = job;
    let layer = net
        .spec
        .layer(name)
        .ok_or_else(|| Error::Model(format!("unknown layer {name:?}")))?;
    match &layer.kind {
        LayerKind::Conv { groups, .. } => {
            let k = KernelTensor::new(dense_kernel(net, name)?, *groups)?;
            match ranks {
                LayerRanks::Tucker2 { r3, r4 } => {
                    let (f, _) = tucker2_kernel(&k, *r3, *r4, DEFAULT_MAX_SWEEPS, DEFAULT_TOL)
                        .map_err(|e| annotate(name, e))?;
                    Ok(f)
                }
                LayerRanks::Tucker1 { r } => {
                    tucker1_kernel(&k, 3, *r).map_err(|e| annotate(name, e))
                }
            }
        }
        LayerKind::Fc { in_dim, out_dim } => {
            let LayerRanks::Tucker1 { r } = ranks else {
                return Err(Error::InvalidArgument(format!(
                    "layer {name:?}: fc layers take a single rank"
                )));
            };
            let weight = match net.params.get(name) {
                Some(LayerParams::Fc { weight, .. }) => weight,
                _ => return Err(Error::Model(format!("layer {name:?} has no dense weights"))),
            };
            // view the out x in weight as a 1 x 1 x in x out kernel
            let kernel =
                Tensor::from_fn(&[1, 1, *in_dim, *out_dim], |idx| weight.get(idx[3], idx[2]));
            let k = KernelTensor::new(kernel, 1)?;
            tucker1_kernel(&k, 3, *r).map_err(|e| annotate(name, e))
        }
        _ => Err(Error::InvalidArgument(format!(
            "layer {name:?} is not a weighted layer"
        ))),
    }
}

fn annotate(name: &str, e: Error) -> Error {
    Error::InvalidArgument(format!("layer {name:?}: {e}"))
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Json,
}

/// Render a report; pure and deterministic.
pub fn render_report(report: &CompressionReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Table => Ok(render_table(report)),
    }
}

fn human(n: u64) -> String {
    let x = n as f64;
    if x >= 1e6 {
        format!("{:.1}M", x / 1e6)
    } else if x >= 1e3 {
        format!("{:.1}K", x / 1e3)
    } else {
        format!("{n}")
    }
}

fn ranks_str(r: Option<LayerRanks>) -> String {
    match r {
        Some(LayerRanks::Tucker2 { r3, r4 }) => format!("({r3},{r4})"),
        Some(LayerRanks::Tucker1 { r }) => format!("r={r}"),
        None => "-".into(),
    }
}

fn side_str(total: usize, groups: usize) -> String {
    if groups > 1 {
        format!("{}x{}", total / groups, groups)
    } else {
        format!("{total}")
    }
}

fn stage_sum_str(stages: &[StageCost], pick: impl Fn(&StageCost) -> u64) -> String {
    let parts: Vec<String> = stages.iter().map(|s| human(pick(s))).collect();
    format!("(={})", parts.join("+"))
}

fn render_table(report: &CompressionReport) -> String {
    let mut rows: Vec<[String; 6]> = Vec::new();
    rows.push([
        "layer".into(),
        "S".into(),
        "T".into(),
        "ranks".into(),
        "weights".into(),
        "flops".into(),
    ]);
    for l in &report.layers {
        let weights = match (l.comp_weights, &l.stages) {
            (Some(c), Some(st)) => format!(
                "{} -> {} {} (x{:.2})",
                human(l.orig_weights),
                human(c),
                stage_sum_str(st, |s| s.weights),
                l.ratio_m.unwrap_or(f64::NAN)
            ),
            _ => human(l.orig_weights).to_string(),
        };
        let flops = match (l.comp_flops, &l.stages) {
            (Some(c), Some(st)) => format!(
                "{} -> {} {} (x{:.2})",
                human(l.orig_flops),
                human(c),
                stage_sum_str(st, |s| s.flops),
                l.ratio_e.unwrap_or(f64::NAN)
            ),
            _ => human(l.orig_flops).to_string(),
        };
        rows.push([
            l.name.clone(),
            side_str(l.s, l.groups),
            side_str(l.t, l.groups),
            ranks_str(l.ranks),
            weights,
            flops,
        ]);
    }
    let t = &report.totals;
    rows.push([
        "TOTAL".into(),
        "".into(),
        "".into(),
        "".into(),
        match t.weight_ratio {
            Some(r) => format!(
                "{} -> {} (x{:.2})",
                human(t.orig_weights),
                human(t.comp_weights),
                r
            ),
            None => format!("{} -> {}", human(t.orig_weights), human(t.comp_weights)),
        },
        match t.flop_ratio {
            Some(r) => format!(
                "{} -> {} (x{:.2})",
                human(t.orig_flops),
                human(t.comp_flops),
                r
            ),
            None => format!("{} -> {}", human(t.orig_flops), human(t.comp_flops)),
        },
    ]);
    rows.push([
        "TOTAL+bias".into(),
        "".into(),
        "".into(),
        "".into(),
        match t.weight_ratio_with_bias {
            Some(r) => format!(
                "{} -> {} (x{:.2})",
                human(t.orig_weights_with_bias),
                human(t.comp_weights_with_bias),
                r
            ),
            None => format!(
                "{} -> {}",
                human(t.orig_weights_with_bias),
                human(t.comp_weights_with_bias)
            ),
        },
        "".into(),
    ]);

    let mut widths = [0usize; 6];
    for row in &rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    out.push_str(&format!("# {}\n", report.convention));
    out.push_str(&format!("# {}\n", report.decomposition));
    for (ri, row) in rows.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(i, cell)| format!("{:<width$}", cell, width = widths[i]))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
        if ri == 0 {
            let sep: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&sep.join("  "));
            out.push('\n');
        }
    }
    out
}
