//! Global analytic variational Bayesian matrix factorization, used as a
//! one-shot rank selector.
//!
//! For an L x M observation (L <= M after internal transposition) with
//! singular values gamma_1 >= ... >= gamma_L, the empirical-VB solution keeps
//! gamma iff `gamma^2 > M * sigma^2 * (1 + taubar)(1 + alpha/taubar)` with
//! `alpha = L/M` and `taubar = 2.5129 sqrt(alpha)`, and shrinks every retained
//! value in closed form. The noise variance sigma^2 is either supplied or
//! found by minimizing the empirical-VB free energy in one dimension
//! (coarse log scan plus golden-section refinement), which is deliberately
//! reproducible: no random starts, no iterative matrix factorization.

use crate::error::{Error, Result};
use crate::linalg::singular_values;
use crate::matrix::Matrix;

/// Outcome of a VBMF rank estimation.
#[derive(Debug, Clone)]
pub struct VbmfResult {
    /// Number of singular values retained.
    pub rank: usize,
    /// Estimated (or supplied) noise variance sigma^2.
    pub noise_variance: f64,
    /// Posterior (shrunken) singular values for the retained components.
    pub shrunken_values: Vec<f64>,
    /// Retention cutoff on the observed singular values.
    pub threshold: f64,
}

const COARSE_SCAN_POINTS: usize = 100;
const GOLDEN_TOL: f64 = 1e-8;
/// Relative floor on the sigma^2 search bracket; keeps exactly low-rank
/// inputs away from the degenerate sigma^2 -> 0 solution.
const SIGMA2_FLOOR_REL: f64 = 1e-10;
/// Largest singular value below which the matrix counts as all-zero.
/// Entries at underflow magnitudes carry no usable signal.
const ZERO_GAMMA_FLOOR: f64 = 1e-290;

struct Problem {
    l: usize,
    m: usize,
    alpha: f64,
    xubar: f64,
    /// squared singular values, descending
    g2: Vec<f64>,
}

impl Problem {
    fn new(l: usize, m: usize, gammas: &[f64]) -> Self {
        let alpha = l as f64 / m as f64;
        let taubar = 2.5129 * alpha.sqrt();
        let xubar = (1.0 + taubar) * (1.0 + alpha / taubar);
        Problem {
            l,
            m,
            alpha,
            xubar,
            g2: gammas.iter().map(|g| g * g).collect(),
        }
    }

    fn threshold(&self, sigma2: f64) -> f64 {
        (self.m as f64 * sigma2 * self.xubar).sqrt()
    }

    /// Empirical-VB free energy at a given noise variance, up to terms
    /// constant in sigma^2. Below-threshold components contribute
    /// `x - log x`, retained components the shrunken-posterior terms.
    fn free_energy(&self, sigma2: f64) -> f64 {
        let mut f = 0.0;
        for &g2 in &self.g2 {
            let x = g2 / (self.m as f64 * sigma2);
            if x <= self.xubar {
                let x = x.max(1e-300);
                f += x - x.ln();
            } else {
                let tau = self.tau(x);
                f += x - tau + ((tau + 1.0) / x).ln() + self.alpha * (tau / self.alpha + 1.0).ln();
            }
        }
        f
    }

    /// Positive root of `tau^2 - (x - 1 - alpha) tau + alpha = 0` shifted; the
    /// posterior signal energy for an above-threshold component.
    fn tau(&self, x: f64) -> f64 {
        let b = x - (1.0 + self.alpha);
        0.5 * (b + (b * b - 4.0 * self.alpha).sqrt())
    }

    /// Shrunken singular value for a retained observation gamma.
    fn shrink(&self, gamma: f64, sigma2: f64) -> f64 {
        let g2 = gamma * gamma;
        let a = 1.0 - (self.l + self.m) as f64 * sigma2 / g2;
        let b = a * a - 4.0 * (self.l * self.m) as f64 * sigma2 * sigma2 / (g2 * g2);
        0.5 * gamma * (a + b.max(0.0).sqrt())
    }
}

/// Estimate noise variance, rank and shrunken values for a matrix.
///
/// An all-zero (or denormal) matrix yields rank 0 with the noise variance at
/// its search floor; non-finite entries are an error.
pub fn vbmf_estimate(m: &Matrix) -> Result<VbmfResult> {
    let (l, mm, gammas) = oriented_singular_values(m)?;
    let gmax = gammas[0];
    if gmax <= ZERO_GAMMA_FLOOR {
        // search floor for a zero matrix: nothing to scale against
        let sigma2 = f64::MIN_POSITIVE;
        let p = Problem::new(l, mm, &gammas);
        return Ok(VbmfResult {
            rank: 0,
            noise_variance: sigma2,
            shrunken_values: vec![],
            threshold: p.threshold(sigma2),
        });
    }

    // Normalize by the largest singular value so the 1-D search operates on
    // the same numbers for c*M as for M; the estimated sigma^2 then scales
    // back exactly with gmax^2, making the selected rank scale-invariant.
    let ynorm: Vec<f64> = gammas.iter().map(|g| g / gmax).collect();
    let p = Problem::new(l, mm, &ynorm);

    let sum2: f64 = p.g2.iter().sum();
    let mf = mm as f64;
    // Upper bracket: the all-noise variance ||Y||^2 / (L M).
    let upper = sum2 / (l as f64 * mf);
    // Lower bracket: below the smallest plausible noise level. At most
    // ceil(L/(1+alpha)) - 1 components can ever be retained, so singular
    // values from that index on bound the noise from below.
    let jstar = (((l as f64) / (1.0 + p.alpha)).ceil() as usize)
        .saturating_sub(1)
        .min(l - 1);
    let tail_mean = p.g2[jstar..].iter().sum::<f64>() / (p.g2.len() - jstar) as f64 / mf;
    let lower_raw = (p.g2[jstar] / (mf * p.xubar)).max(tail_mean);
    let floor = SIGMA2_FLOOR_REL / mf; // relative to gmax^2 = 1 after normalization
    let lower = lower_raw.max(floor);
    let upper = upper.max(lower * (1.0 + 1e-9));

    let sigma2_norm = minimize_free_energy(&p, lower, upper);
    let sigma2 = sigma2_norm * gmax * gmax;

    Ok(finish(l, mm, &gammas, sigma2))
}

/// Same as [`vbmf_estimate`] but with a fixed, known noise variance.
pub fn vbmf_estimate_with_sigma(m: &Matrix, sigma2: f64) -> Result<VbmfResult> {
    if sigma2.is_nan() || sigma2 <= 0.0 || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "sigma2 must be positive and finite, got {sigma2}"
        )));
    }
    let (l, mm, gammas) = oriented_singular_values(m)?;
    Ok(finish(l, mm, &gammas, sigma2))
}

fn finish(l: usize, mm: usize, gammas: &[f64], sigma2: f64) -> VbmfResult {
    let p = Problem::new(l, mm, gammas);
    let threshold = p.threshold(sigma2);
    let rank = gammas.iter().take_while(|&&g| g > threshold).count();
    let shrunken = gammas[..rank]
        .iter()
        .map(|&g| p.shrink(g, sigma2))
        .collect();
    VbmfResult {
        rank,
        noise_variance: sigma2,
        shrunken_values: shrunken,
        threshold,
    }
}

/// Singular values of `m` oriented so L <= M. Orientation does not change the
/// values, only which side counts as L.
fn oriented_singular_values(m: &Matrix) -> Result<(usize, usize, Vec<f64>)> {
    if m.rows() < 2 || m.cols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "vbmf needs at least a 2x2 matrix, got {}x{}",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numerical("vbmf: non-finite entries".into()));
    }
    let l = m.rows().min(m.cols());
    let mm = m.rows().max(m.cols());
    let gammas = singular_values(m)?;
    Ok((l, mm, gammas))
}

/// Coarse log-spaced scan followed by golden-section refinement of the
/// bracketing cell. Deterministic for fixed inputs.
fn minimize_free_energy(p: &Problem, lower: f64, upper: f64) -> f64 {
    let lo = lower.ln();
    let hi = upper.ln();
    let n = COARSE_SCAN_POINTS;
    let mut best_i = 0usize;
    let mut best_f = f64::INFINITY;
    for i in 0..n {
        let u = lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let f = p.free_energy(u.exp());
        if f < best_f {
            best_f = f;
            best_i = i;
        }
    }
    let cell = (hi - lo) / (n - 1) as f64;
    let mut a = lo + cell * best_i.saturating_sub(1) as f64;
    let mut b = (lo + cell * (best_i + 1) as f64).min(hi);

    // golden-section on log(sigma^2)
    let inv_phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let mut f1 = p.free_energy(x1.exp());
    let mut f2 = p.free_energy(x2.exp());
    while (b - a) > GOLDEN_TOL {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = p.free_energy(x1.exp());
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = p.free_energy(x2.exp());
        }
    }
    (0.5 * (a + b)).exp()
}
