//! Tucker decomposition of dense tensors: HOSVD initialization, HOOI
//! refinement, and the Tucker-1/Tucker-2 kernel entry points used by the
//! compression pipeline.
//!
//! Only the kernel reconstruction error is minimized here; nothing in this
//! module looks at activations or labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::left_singular_basis;
use crate::matrix::Matrix;
use crate::tensor::Tensor;

/// Default HOOI sweep cap used by the pipeline.
pub const DEFAULT_MAX_SWEEPS: usize = 50;
/// Default relative fit-improvement stopping tolerance.
pub const DEFAULT_TOL: f64 = 1e-6;

/// Core tensor plus one optional orthonormal factor matrix per mode.
///
/// `factors[n]` is `shape[n] x R_n`; `None` means mode `n` is not decomposed
/// and the core keeps the original extent there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TuckerFactors {
    pub core: Tensor,
    pub factors: Vec<Option<Matrix>>,
}

impl TuckerFactors {
    /// Core extents; equals the rank at decomposed modes.
    pub fn ranks(&self) -> Vec<usize> {
        self.core.shape().to_vec()
    }

    /// Shape of the tensor this factorization reconstructs to.
    pub fn original_shape(&self) -> Vec<usize> {
        self.factors
            .iter()
            .zip(self.core.shape())
            .map(|(f, &c)| f.as_ref().map_or(c, |m| m.rows()))
            .collect()
    }
}

/// Per-decomposition quality record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecompositionQuality {
    /// Final relative reconstruction error `||K - K_hat||_F / ||K||_F`.
    pub rel_error: f64,
    /// HOOI sweeps executed.
    pub iterations: usize,
    /// Relative error after each sweep; non-increasing.
    pub fit_history: Vec<f64>,
}

fn check_ranks(t: &Tensor, ranks: &[Option<usize>]) -> Result<()> {
    if ranks.len() != t.order() {
        return Err(Error::InvalidArgument(format!(
            "expected {} per-mode ranks, got {}",
            t.order(),
            ranks.len()
        )));
    }
    for (mode, r) in ranks.iter().enumerate() {
        if let Some(r) = r {
            if *r == 0 || *r > t.shape()[mode] {
                return Err(Error::InvalidArgument(format!(
                    "rank {r} out of range 1..={} at mode {mode}",
                    t.shape()[mode]
                )));
            }
        }
    }
    Ok(())
}

/// Higher-order SVD: factor `n` is the top-`R_n` left singular vectors of the
/// mode-`n` unfolding; the core is the tensor contracted with every factor
/// transpose.
pub fn hosvd(t: &Tensor, ranks: &[Option<usize>]) -> Result<TuckerFactors> {
    check_ranks(t, ranks)?;
    let mut factors: Vec<Option<Matrix>> = Vec::with_capacity(t.order());
    for (mode, r) in ranks.iter().enumerate() {
        match r {
            Some(r) => {
                let unf = t.unfold(mode)?;
                factors.push(Some(left_singular_basis(&unf, *r)?));
            }
            None => factors.push(None),
        }
    }
    let core = contract_core(t, &factors)?;
    Ok(TuckerFactors { core, factors })
}

/// HOOI: alternating refinement starting from HOSVD. Each pass re-solves one
/// factor against all others; the reconstruction error never increases.
pub fn hooi(
    t: &Tensor,
    ranks: &[Option<usize>],
    max_sweeps: usize,
    tol: f64,
) -> Result<(TuckerFactors, DecompositionQuality)> {
    if max_sweeps == 0 {
        return Err(Error::InvalidArgument("max_sweeps must be >= 1".into()));
    }
    let mut f = hosvd(t, ranks)?;
    let norm = t.frobenius_norm();
    let decomposed: Vec<usize> = ranks
        .iter()
        .enumerate()
        .filter_map(|(m, r)| r.map(|_| m))
        .collect();

    let mut history = Vec::new();
    let mut prev = f64::INFINITY;
    let mut sweeps = 0;
    for _ in 0..max_sweeps {
        sweeps += 1;
        for &mode in &decomposed {
            // contract every other decomposed mode, then refresh this factor
            let mut w = t.clone();
            for &other in &decomposed {
                if other == mode {
                    continue;
                }
                let u = f.factors[other].as_ref().unwrap();
                w = w.mode_product(&u.transpose(), other)?;
            }
            let unf = w.unfold(mode)?;
            let r = ranks[mode].unwrap();
            f.factors[mode] = Some(left_singular_basis(&unf, r)?);
        }
        f.core = contract_core(t, &f.factors)?;
        let err = rel_error_from_core(norm, &f.core);
        history.push(err);
        if prev.is_finite() {
            let improvement = (prev - err) / prev.max(f64::MIN_POSITIVE);
            if improvement < tol {
                break;
            }
        }
        prev = err;
    }

    let rel_error = *history.last().unwrap();
    Ok((
        f,
        DecompositionQuality {
            rel_error,
            iterations: sweeps,
            fit_history: history,
        },
    ))
}

/// `t x_n U_n^T` over all present factors.
fn contract_core(t: &Tensor, factors: &[Option<Matrix>]) -> Result<Tensor> {
    let mut core = t.clone();
    for (mode, f) in factors.iter().enumerate() {
        if let Some(u) = f {
            core = core.mode_product(&u.transpose(), mode)?;
        }
    }
    Ok(core)
}

/// With orthonormal factors, `||K - K_hat||^2 = ||K||^2 - ||core||^2`.
fn rel_error_from_core(norm: f64, core: &Tensor) -> f64 {
    if norm == 0.0 {
        return 0.0;
    }
    let c = core.frobenius_norm();
    ((norm * norm - c * c).max(0.0)).sqrt() / norm
}

/// Multiply the core back through every present factor.
pub fn reconstruct(f: &TuckerFactors) -> Result<Tensor> {
    if f.factors.len() != f.core.order() {
        return Err(Error::Shape(format!(
            "{} factors for an order-{} core",
            f.factors.len(),
            f.core.order()
        )));
    }
    let mut out = f.core.clone();
    for (mode, factor) in f.factors.iter().enumerate() {
        if let Some(u) = factor {
            if u.cols() != out.shape()[mode] {
                return Err(Error::Shape(format!(
                    "factor at mode {mode} is {}x{}, core extent {}",
                    u.rows(),
                    u.cols(),
                    out.shape()[mode]
                )));
            }
            out = out.mode_product(u, mode)?;
        }
    }
    Ok(out)
}

/// Relative reconstruction error of a factorization against its source.
pub fn rel_error(t: &Tensor, f: &TuckerFactors) -> Result<f64> {
    Ok(t.rel_error(&reconstruct(f)?))
}

// ---------------------------------------------------------------------------
// Kernel-level entry points (4-way D x D x S/g x T kernels, grouped)
// ---------------------------------------------------------------------------

/// 4-way convolution kernel `D x D x (S/g) x T` with `g` channel groups.
/// Group `i` owns output channels `i*T/g .. (i+1)*T/g`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelTensor {
    pub tensor: Tensor,
    pub groups: usize,
}

impl KernelTensor {
    pub fn new(tensor: Tensor, groups: usize) -> Result<Self> {
        if tensor.order() != 4 {
            return Err(Error::Shape(format!(
                "kernel tensor must be 4-way, got order {}",
                tensor.order()
            )));
        }
        if groups == 0 || tensor.shape()[3] % groups != 0 {
            return Err(Error::Shape(format!(
                "groups {groups} must divide output channels {}",
                tensor.shape()[3]
            )));
        }
        Ok(Self { tensor, groups })
    }

    /// Output channels per group.
    pub fn t_per_group(&self) -> usize {
        self.tensor.shape()[3] / self.groups
    }

    /// Kernel slice for one group: `D x D x S/g x T/g`.
    pub fn group_slice(&self, g: usize) -> Tensor {
        let shape = self.tensor.shape();
        let (d1, d2, s, tg) = (shape[0], shape[1], shape[2], self.t_per_group());
        let t0 = g * tg;
        Tensor::from_fn(&[d1, d2, s, tg], |idx| {
            self.tensor.get(&[idx[0], idx[1], idx[2], t0 + idx[3]])
        })
    }
}

/// One Tucker factorization per group, all at the same ranks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelFactors {
    pub groups: Vec<TuckerFactors>,
}

impl KernelFactors {
    /// Reassemble the full `D x D x S/g x T` kernel from the group factors.
    pub fn reconstruct_kernel(&self) -> Result<KernelTensor> {
        let parts: Vec<Tensor> = self.groups.iter().map(reconstruct).collect::<Result<_>>()?;
        let shape = parts[0].shape().to_vec();
        let tg = shape[3];
        let total_t = tg * parts.len();
        let full = Tensor::from_fn(&[shape[0], shape[1], shape[2], total_t], |idx| {
            let g = idx[3] / tg;
            parts[g].get(&[idx[0], idx[1], idx[2], idx[3] % tg])
        });
        KernelTensor::new(full, self.groups.len())
    }
}

/// Tucker-2 on the channel modes: each group kernel becomes
/// `core (D x D x r3 x r4)`, `U3 (S/g x r3)`, `U4 (T/g x r4)`. Spatial modes
/// stay intact; they are small anyway.
pub fn tucker2_kernel(
    k: &KernelTensor,
    r3: usize,
    r4: usize,
    max_sweeps: usize,
    tol: f64,
) -> Result<(KernelFactors, Vec<DecompositionQuality>)> {
    let shape = k.tensor.shape();
    let (s, tg) = (shape[2], k.t_per_group());
    if r3 == 0 || r3 > s {
        return Err(Error::InvalidArgument(format!(
            "r3 {r3} out of range 1..={s}"
        )));
    }
    if r4 == 0 || r4 > tg {
        return Err(Error::InvalidArgument(format!(
            "r4 {r4} out of range 1..={tg} (per group)"
        )));
    }
    let mut groups = Vec::with_capacity(k.groups);
    let mut quality = Vec::with_capacity(k.groups);
    for g in 0..k.groups {
        let slice = k.group_slice(g);
        let (f, q) = hooi(&slice, &[None, None, Some(r3), Some(r4)], max_sweeps, tol)?;
        groups.push(f);
        quality.push(q);
    }
    Ok((KernelFactors { groups }, quality))
}

/// Single-mode Tucker: equivalent to a truncated SVD of the mode-`mode`
/// unfolding, refolded. Used for layers where only one side is worth
/// decomposing.
pub fn tucker1_kernel(k: &KernelTensor, mode: usize, r: usize) -> Result<KernelFactors> {
    if mode >= 4 {
        return Err(Error::InvalidArgument(format!(
            "mode {mode} out of range 0..=3"
        )));
    }
    let per_group_extent = if mode == 3 {
        k.t_per_group()
    } else {
        k.tensor.shape()[mode]
    };
    if r == 0 || r > per_group_extent {
        return Err(Error::InvalidArgument(format!(
            "rank {r} out of range 1..={per_group_extent} at mode {mode}"
        )));
    }
    let mut ranks = [None, None, None, None];
    ranks[mode] = Some(r);
    let mut groups = Vec::with_capacity(k.groups);
    for g in 0..k.groups {
        groups.push(hosvd(&k.group_slice(g), &ranks)?);
    }
    Ok(KernelFactors { groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormality_defect, svd, truncated_svd};
    use crate::tensor::test_support::{random_matrix, random_tensor};

    /// Orthonormal basis with `cols` columns (rows >= cols) from a seeded
    /// random matrix.
    fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Matrix {
        assert!(rows >= cols);
        svd(&random_matrix(rows, cols, seed)).unwrap().u
    }

    /// Kernel with exact multilinear rank (r3, r4) on the channel modes.
    fn planted_kernel(d: usize, s: usize, t: usize, r3: usize, r4: usize, seed: u64) -> Tensor {
        let core = random_tensor(&[d, d, r3, r4], seed);
        let u3 = random_orthonormal(s, r3, seed + 1);
        let u4 = random_orthonormal(t, r4, seed + 2);
        core.mode_product(&u3, 2)
            .unwrap()
            .mode_product(&u4, 3)
            .unwrap()
    }

    /// Direct nested sum over the Tucker factors; the brute-force oracle
    /// (evaluates the defining multilinear expansion entry by entry, no
    /// unfold/mode_product machinery).
    fn reconstruct_bruteforce(f: &TuckerFactors) -> Tensor {
        let shape = f.original_shape();
        let ranks = f.ranks();
        let order = ranks.len();
        let decomposed: Vec<usize> = (0..order).filter(|&m| f.factors[m].is_some()).collect();
        Tensor::from_fn(&shape, |idx| {
            // undecomposed modes act as identity: their core index is locked
            let mut r: Vec<usize> = idx.to_vec();
            for &m in &decomposed {
                r[m] = 0;
            }
            let mut total = 0.0;
            'entries: loop {
                let mut term = f.core.get(&r);
                for &m in &decomposed {
                    term *= f.factors[m].as_ref().unwrap().get(idx[m], r[m]);
                }
                total += term;
                for &m in decomposed.iter().rev() {
                    r[m] += 1;
                    if r[m] < ranks[m] {
                        continue 'entries;
                    }
                    r[m] = 0;
                }
                break;
            }
            total
        })
    }

    #[test]
    fn hosvd_full_rank_is_exact() {
        let t = random_tensor(&[3, 4, 5, 2], 1);
        let ranks: Vec<Option<usize>> = t.shape().iter().map(|&e| Some(e)).collect();
        let f = hosvd(&t, &ranks).unwrap();
        assert!(rel_error(&t, &f).unwrap() <= 1e-10);
        for factor in f.factors.iter().flatten() {
            assert!(orthonormality_defect(factor) <= 1e-8);
        }
    }

    #[test]
    fn hosvd_recovers_planted_multilinear_rank() {
        let k = planted_kernel(3, 12, 15, 4, 5, 7);
        let f = hosvd(&k, &[None, None, Some(4), Some(5)]).unwrap();
        assert!(rel_error(&k, &f).unwrap() <= 1e-8);
    }

    #[test]
    fn hosvd_partial_mode_shapes() {
        let t = random_tensor(&[3, 3, 8, 6], 2);
        let f = hosvd(&t, &[None, None, Some(4), None]).unwrap();
        assert_eq!(f.core.shape(), &[3, 3, 4, 6]);
        assert!(f.factors[0].is_none() && f.factors[3].is_none());
        assert!(hosvd(&t, &[None, None, Some(9), None]).is_err());
        assert!(hosvd(&t, &[None, None, Some(0), None]).is_err());
    }

    #[test]
    fn hooi_exact_rank_converges_first_sweep() {
        let k = planted_kernel(3, 10, 12, 3, 4, 9);
        let (f, q) = hooi(&k, &[None, None, Some(3), Some(4)], 50, 1e-6).unwrap();
        assert!(q.fit_history[0] <= 1e-8);
        assert!(rel_error(&k, &f).unwrap() <= 1e-8);
    }

    #[test]
    fn hooi_never_worse_than_hosvd() {
        for seed in 0..20u64 {
            let k = random_tensor(&[5, 5, 16, 32], 700 + seed);
            let ranks = [Some(5), Some(5), Some(8), Some(16)];
            let hs = hosvd(&k, &ranks).unwrap();
            let hs_err = rel_error(&k, &hs).unwrap();
            let (_, q) = hooi(&k, &ranks, 10, 1e-9).unwrap();
            assert!(
                q.rel_error <= hs_err + 1e-12,
                "seed {seed}: hooi {} hosvd {hs_err}",
                q.rel_error
            );
            for w in q.fit_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "fit history must not increase");
            }
        }
    }

    #[test]
    fn hooi_single_sweep_deterministic() {
        let k = random_tensor(&[4, 4, 9, 7], 77);
        let ranks = [None, None, Some(4), Some(3)];
        let (f1, q1) = hooi(&k, &ranks, 1, 0.0).unwrap();
        let (f2, q2) = hooi(&k, &ranks, 1, 0.0).unwrap();
        assert_eq!(q1.iterations, 1);
        assert_eq!(q1.rel_error.to_bits(), q2.rel_error.to_bits());
        assert_eq!(f1.core, f2.core);
        assert!(hooi(&k, &ranks, 0, 0.0).is_err());
    }

    #[test]
    fn tucker2_matches_triple_sum_oracle() {
        let k = KernelTensor::new(random_tensor(&[3, 3, 6, 8], 5), 1).unwrap();
        let (f, _) = tucker2_kernel(&k, 3, 4, 50, 1e-6).unwrap();
        let rec = reconstruct(&f.groups[0]).unwrap();
        let brute = reconstruct_bruteforce(&f.groups[0]);
        assert!(rec.max_abs_diff(&brute) <= 1e-10 * rec.frobenius_norm().max(1.0));
    }

    #[test]
    fn tucker2_full_rank_exact_with_groups() {
        let k = KernelTensor::new(random_tensor(&[3, 3, 4, 10], 6), 2).unwrap();
        let (f, q) = tucker2_kernel(&k, 4, 5, 50, 1e-6).unwrap();
        assert_eq!(f.groups.len(), 2);
        for qq in &q {
            assert!(qq.rel_error <= 1e-10);
        }
        let rec = f.reconstruct_kernel().unwrap();
        assert!(k.tensor.rel_error(&rec.tensor) <= 1e-10);
        assert!(tucker2_kernel(&k, 5, 5, 50, 1e-6).is_err());
        assert!(
            tucker2_kernel(&k, 4, 6, 50, 1e-6).is_err(),
            "r4 bounded per group"
        );
    }

    #[test]
    fn tucker1_equals_truncated_svd_of_unfolding() {
        let t = random_tensor(&[5, 5, 7, 9], 8);
        let k = KernelTensor::new(t.clone(), 1).unwrap();
        let f = tucker1_kernel(&k, 3, 4).unwrap();
        let rec = reconstruct(&f.groups[0]).unwrap();

        let unf = t.unfold(3).unwrap();
        let tr = truncated_svd(&unf, 4).unwrap();
        let direct = Tensor::fold(&tr.reconstruct(), 3, t.shape()).unwrap();
        assert!(rec.max_abs_diff(&direct) <= 1e-10);

        // Eckart-Young: tucker-1 error equals the discarded tail
        let full = svd(&unf).unwrap();
        let tail: f64 = full.s[4..].iter().map(|s| s * s).sum::<f64>().sqrt();
        let err = t.rel_error(&rec) * t.frobenius_norm();
        assert!((err - tail).abs() <= 1e-8 * t.frobenius_norm());
    }

    #[test]
    fn tucker1_full_rank_exact() {
        let k = KernelTensor::new(random_tensor(&[3, 3, 4, 6], 10), 1).unwrap();
        let f = tucker1_kernel(&k, 3, 6).unwrap();
        let rec = f.reconstruct_kernel().unwrap();
        assert!(k.tensor.rel_error(&rec.tensor) <= 1e-10);
    }

    #[test]
    fn reconstruct_identity_factors_returns_core() {
        let core = random_tensor(&[2, 3, 4], 11);
        let f = TuckerFactors {
            core: core.clone(),
            factors: vec![
                Some(Matrix::identity(2)),
                Some(Matrix::identity(3)),
                Some(Matrix::identity(4)),
            ],
        };
        assert_eq!(reconstruct(&f).unwrap(), core);
    }

    #[test]
    fn reconstruct_matches_quadruple_sum_oracle() {
        let t = random_tensor(&[3, 3, 4, 5], 12);
        let f = hosvd(&t, &[Some(2), Some(3), Some(3), Some(4)]).unwrap();
        let rec = reconstruct(&f).unwrap();
        let brute = reconstruct_bruteforce(&f);
        assert!(rec.max_abs_diff(&brute) <= 1e-10);
    }

    #[test]
    fn reconstruct_rejects_inconsistent_shapes() {
        let core = random_tensor(&[2, 2], 13);
        let f = TuckerFactors {
            core,
            factors: vec![Some(Matrix::identity(3)), None],
        };
        assert!(reconstruct(&f).is_err());
    }
}
