//! Scaled log-moment diagnostics of the accumulated potential: the growth
//! rate in beta of E_x exp(beta int_0^T c1(X_s) ds), normalized by T.
//! The limiting curve's slope at zero recovers the stationary mean of c1,
//! and its sign just left of zero certifies that small positive multiples
//! of c1 discount enough for the path-integral solver to converge.
//!
//! All expectations of exponentials go through log-sum-exp with max
//! subtraction; one path ensemble is reused across every (beta, T) pair,
//! which both saves time and makes exact identities (value 0 at beta = 0)
//! hold bit-for-bit.

use serde::Serialize;

use crate::ergodics::{checkpoint_steps, sweep_paths, EnsembleOptions};
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::sde::DiffusionModel;
use crate::stats::{log_mean_exp, RunningStats};

#[derive(Debug, Clone, Serialize)]
pub struct LmgfOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub guard_radius: f64,
    /// Largest-T vs second-largest-T agreement required to call a beta
    /// column stabilized.
    pub stabilization_tol: f64,
}

impl Default for LmgfOptions {
    fn default() -> Self {
        LmgfOptions {
            n_paths: 100_000,
            dt: 1e-3,
            seed: 1,
            guard_radius: 1e6,
            stabilization_tol: 0.01,
        }
    }
}

impl LmgfOptions {
    fn ensemble(&self) -> EnsembleOptions {
        EnsembleOptions {
            n_paths: self.n_paths,
            dt: self.dt,
            seed: self.seed,
            guard_radius: self.guard_radius,
        }
    }
}

/// Normalized log-moment values on a (beta, T) grid from one base point.
#[derive(Debug, Clone, Serialize)]
pub struct LmgfCurve {
    pub betas: Vec<f64>,
    pub ts: Vec<f64>,
    pub x: Vec<f64>,
    /// `values[i][j]` is the estimate at `ts[i]`, `betas[j]`.
    pub values: Vec<Vec<f64>>,
    pub stderrs: Vec<Vec<f64>>,
    /// Largest-T column, the working limit curve.
    pub limit: Vec<f64>,
    pub limit_stderr: Vec<f64>,
    /// Per beta: the two largest horizons agree within the tolerance.
    pub stabilized: Vec<bool>,
    pub stabilization_tol: f64,
    pub warnings: Vec<String>,
}

impl LmgfCurve {
    pub fn beta_index(&self, beta: f64) -> Option<usize> {
        self.betas.iter().position(|&b| b == beta)
    }

    /// Limit value and stderr at an exact grid beta.
    pub fn limit_at(&self, beta: f64) -> Option<(f64, f64)> {
        let j = self.beta_index(beta)?;
        Some((self.limit[j], self.limit_stderr[j]))
    }
}

/// One (value, stderr) from per-path potential integrals at a fixed horizon.
/// The stderr is a delta-method error of the log of the mean exponential,
/// computed on the max-shifted scale.
fn point_from_integrals(a_t: &[f64], beta: f64, t: f64) -> Result<(f64, f64)> {
    let mut w = Vec::with_capacity(a_t.len());
    for &a in a_t {
        if !a.is_finite() {
            return Err(Error::WeightOverflow);
        }
        // beta = 0 must give exactly 0, even against huge integrals.
        w.push(if beta == 0.0 { 0.0 } else { beta * a });
    }
    let log_mean = log_mean_exp(&w);
    if !log_mean.is_finite() {
        return Err(Error::WeightOverflow);
    }
    let value = log_mean / t;
    let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut shifted = RunningStats::new();
    for &wi in &w {
        shifted.push((wi - m).exp());
    }
    let se = shifted.stddev() / (shifted.mean() * (w.len() as f64).sqrt() * t);
    Ok((value, se))
}

/// Per-path integrals of `c1` at the step-grid times `ts`, path-major.
fn integrals_at(
    model: &DiffusionModel,
    c1: &Expression,
    x: &[f64],
    ts: &[f64],
    opts: &LmgfOptions,
) -> Result<Vec<Vec<f64>>> {
    if ts.iter().any(|&t| t <= 0.0) {
        return Err(Error::Config("horizons must be positive".into()));
    }
    if opts.n_paths < 2 {
        return Err(Error::Config("need at least two paths".into()));
    }
    let steps = checkpoint_steps(ts, opts.dt)?;
    sweep_paths(model, c1, x, &steps, &opts.ensemble(), |_x, a| a)
}

/// Estimate at a single (beta, T).
pub fn estimate_point(
    model: &DiffusionModel,
    c1: &Expression,
    beta: f64,
    x: &[f64],
    t: f64,
    opts: &LmgfOptions,
) -> Result<(f64, f64)> {
    let per_path = integrals_at(model, c1, x, &[t], opts)?;
    let a_t: Vec<f64> = per_path.iter().map(|row| row[0]).collect();
    point_from_integrals(&a_t, beta, t)
}

/// Full grid from one reused path ensemble. The limit curve is the
/// largest-T column; a stabilization flag per beta compares the two largest
/// horizons instead of pretending to know a convergence rate.
pub fn estimate_curve(
    model: &DiffusionModel,
    c1: &Expression,
    betas: &[f64],
    x: &[f64],
    ts: &[f64],
    opts: &LmgfOptions,
) -> Result<LmgfCurve> {
    if betas.is_empty() || !betas.contains(&0.0) {
        return Err(Error::Config("beta grid must contain 0".into()));
    }
    if betas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("beta grid must be strictly increasing".into()));
    }
    let per_path = integrals_at(model, c1, x, ts, opts)?;

    let mut values = Vec::with_capacity(ts.len());
    let mut stderrs = Vec::with_capacity(ts.len());
    let mut a_t = vec![0.0; opts.n_paths];
    for (i, &t) in ts.iter().enumerate() {
        for (j, row) in per_path.iter().enumerate() {
            a_t[j] = row[i];
        }
        let mut row_v = Vec::with_capacity(betas.len());
        let mut row_se = Vec::with_capacity(betas.len());
        for &beta in betas {
            let (v, se) = point_from_integrals(&a_t, beta, t)?;
            row_v.push(v);
            row_se.push(se);
        }
        values.push(row_v);
        stderrs.push(row_se);
    }

    let mut warnings = Vec::new();
    let last = ts.len() - 1;
    let stabilized: Vec<bool> = if ts.len() < 2 {
        warnings.push("single horizon; stabilization cannot be assessed".into());
        vec![false; betas.len()]
    } else {
        (0..betas.len())
            .map(|j| (values[last][j] - values[last - 1][j]).abs() <= opts.stabilization_tol)
            .collect()
    };
    if stabilized.iter().any(|s| !s) && ts.len() >= 2 {
        warnings.push(format!(
            "columns not stabilized at tol {}: betas {:?}",
            opts.stabilization_tol,
            betas
                .iter()
                .zip(&stabilized)
                .filter(|(_, s)| !**s)
                .map(|(b, _)| *b)
                .collect::<Vec<_>>()
        ));
    }
    // Convexity on the grid, per horizon, within combined noise.
    for (i, &t) in ts.iter().enumerate() {
        for j in 1..betas.len() - 1 {
            let lam = (betas[j] - betas[j - 1]) / (betas[j + 1] - betas[j - 1]);
            let interp = (1.0 - lam) * values[i][j - 1] + lam * values[i][j + 1];
            let tol = 3.0
                * (stderrs[i][j].powi(2)
                    + ((1.0 - lam) * stderrs[i][j - 1]).powi(2)
                    + (lam * stderrs[i][j + 1]).powi(2))
                .sqrt()
                + 1e-12;
            if values[i][j] - interp > tol {
                warnings.push(format!(
                    "convexity violated beyond noise at t = {t}, beta = {}",
                    betas[j]
                ));
            }
        }
    }

    Ok(LmgfCurve {
        betas: betas.to_vec(),
        ts: ts.to_vec(),
        x: x.to_vec(),
        limit: values[last].clone(),
        limit_stderr: stderrs[last].clone(),
        values,
        stderrs,
        stabilized,
        stabilization_tol: opts.stabilization_tol,
        warnings,
    })
}

/// Central difference of the limit curve at zero; `h` and `-h` must be
/// exact grid entries.
pub fn derivative_at_zero(curve: &LmgfCurve, h: f64) -> Result<f64> {
    let hi = curve.limit_at(h).ok_or(Error::NotOnGrid(h))?;
    let lo = curve.limit_at(-h).ok_or(Error::NotOnGrid(-h))?;
    Ok((hi.0 - lo.0) / (2.0 * h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SignVerdict {
    /// Positive beyond noise right of zero, negative left of zero.
    Pass,
    /// Significantly the wrong sign on at least one side.
    Fail,
    /// Within noise of zero on either side.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct SignReport {
    pub verdict: SignVerdict,
    pub beta_neg: f64,
    pub value_neg: f64,
    pub stderr_neg: f64,
    pub beta_pos: f64,
    pub value_pos: f64,
    pub stderr_pos: f64,
}

/// Certificate that the limit curve crosses zero the right way: negative at
/// the largest negative grid beta, positive at the smallest positive one,
/// both beyond three standard errors.
pub fn sign_check(curve: &LmgfCurve) -> Result<SignReport> {
    let pos = curve
        .betas
        .iter()
        .position(|&b| b > 0.0)
        .ok_or_else(|| Error::Config("sign check needs a positive grid beta".into()))?;
    let neg = curve
        .betas
        .iter()
        .rposition(|&b| b < 0.0)
        .ok_or_else(|| Error::Config("sign check needs a negative grid beta".into()))?;
    let (vp, sp) = (curve.limit[pos], curve.limit_stderr[pos]);
    let (vn, sn) = (curve.limit[neg], curve.limit_stderr[neg]);
    let verdict = if vp > 3.0 * sp && vn < -3.0 * sn {
        SignVerdict::Pass
    } else if vp < -3.0 * sp || vn > 3.0 * sn {
        SignVerdict::Fail
    } else {
        SignVerdict::Inconclusive
    };
    Ok(SignReport {
        verdict,
        beta_neg: curve.betas[neg],
        value_neg: vn,
        stderr_neg: sn,
        beta_pos: curve.betas[pos],
        value_pos: vp,
        stderr_pos: sp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::unit_ou_model;

    fn opts(n: usize, dt: f64, seed: u64) -> LmgfOptions {
        LmgfOptions {
            n_paths: n,
            dt,
            seed,
            ..LmgfOptions::default()
        }
    }

    #[test]
    fn constant_potential_is_bit_exact() {
        // Dyadic dt and k: the potential integral, the weights, and the
        // normalization are all exact, so the whole grid is k*beta with
        // zero stderr.
        let model = unit_ou_model();
        let c1 = Expression::constant(0.5, 1);
        let betas = [-0.25, 0.0, 0.25];
        let ts = [1.0, 2.0];
        let curve =
            estimate_curve(&model, &c1, &betas, &[0.7], &ts, &opts(50, 1.0 / 64.0, 2)).unwrap();
        for i in 0..ts.len() {
            for j in 0..betas.len() {
                assert_eq!(curve.values[i][j], 0.5 * betas[j]);
                assert_eq!(curve.stderrs[i][j], 0.0);
            }
        }
        assert!(curve.stabilized.iter().all(|&s| s));
        assert_eq!(derivative_at_zero(&curve, 0.25).unwrap(), 0.5);
        let sign = sign_check(&curve).unwrap();
        assert_eq!(sign.verdict, SignVerdict::Pass);
        assert!(curve.warnings.is_empty(), "{:?}", curve.warnings);
    }

    #[test]
    fn zero_beta_is_exactly_zero_for_noisy_integrals() {
        let model = unit_ou_model();
        let c1 = Expression::parse("x^2", 1).unwrap();
        let (v, se) = estimate_point(&model, &c1, 0.0, &[1.5], 2.0, &opts(100, 0.01, 3)).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn ou_quadratic_matches_closed_form() {
        // Exact finite-horizon values for dX = -X dt + sqrt(2) dW, x0 = 0:
        // E exp(beta int X^2) = e^{T/2} [cosh(DT) + sinh(DT)/D]^{-1/2},
        // D = sqrt(1-4 beta).
        let model = unit_ou_model();
        let c1 = Expression::parse("x^2", 1).unwrap();
        let betas = [-0.1, -0.05, 0.0, 0.05, 0.1];
        let ts = [5.0, 10.0];
        let curve =
            estimate_curve(&model, &c1, &betas, &[0.0], &ts, &opts(5000, 2e-3, 4)).unwrap();
        let closed = |beta: f64, t: f64| {
            let d = (1.0 - 4.0 * beta).sqrt();
            let m = (t / 2.0).exp() * ((d * t).cosh() + (d * t).sinh() / d).powf(-0.5);
            m.ln() / t
        };
        for (i, &t) in ts.iter().enumerate() {
            for (j, &beta) in betas.iter().enumerate() {
                let diff = (curve.values[i][j] - closed(beta, t)).abs();
                assert!(
                    diff <= 3.0 * curve.stderrs[i][j] + 4e-3,
                    "beta {beta} t {t}: got {}, want {}, se {}",
                    curve.values[i][j],
                    closed(beta, t),
                    curve.stderrs[i][j]
                );
            }
        }
        // The -0.1 column moves by ~0.004 between T=5 and T=10: stabilized
        // at the default tolerance.
        assert!(curve.stabilized.iter().all(|&s| s), "{:?}", curve.stabilized);
        assert!(
            curve.warnings.iter().all(|w| !w.contains("convexity")),
            "{:?}",
            curve.warnings
        );

        // Slope at zero ~ stationary second moment 1; central difference of
        // the closed form at T=10 carries its own small finite-T offset.
        let d = derivative_at_zero(&curve, 0.05).unwrap();
        assert!((d - 1.0).abs() < 0.08, "derivative {d}");
        assert!(derivative_at_zero(&curve, 0.03).is_err());

        let sign = sign_check(&curve).unwrap();
        assert_eq!(sign.verdict, SignVerdict::Pass, "{sign:?}");
    }

    #[test]
    fn degenerate_sign_checks() {
        let model = unit_ou_model();
        let zero = Expression::constant(0.0, 1);
        let betas = [-0.1, 0.0, 0.1];
        let curve =
            estimate_curve(&model, &zero, &betas, &[0.0], &[1.0], &opts(20, 0.125, 5)).unwrap();
        assert_eq!(sign_check(&curve).unwrap().verdict, SignVerdict::Inconclusive);

        let negk = Expression::constant(-1.0, 1);
        let curve =
            estimate_curve(&model, &negk, &betas, &[0.0], &[1.0], &opts(20, 0.125, 5)).unwrap();
        assert_eq!(sign_check(&curve).unwrap().verdict, SignVerdict::Fail);

        // No positive beta on the grid: refused.
        let curve =
            estimate_curve(&model, &negk, &[-0.1, 0.0], &[0.0], &[1.0], &opts(20, 0.125, 5))
                .unwrap();
        assert!(sign_check(&curve).is_err());
    }

    #[test]
    fn overflowing_integrals_are_reported() {
        // Outward drift sends x to ~40 within T; exp(x^2) then overflows the
        // potential integral itself, which no log-sum-exp can absorb.
        let model = DiffusionModel::new(
            vec![Expression::parse("2*x", 1).unwrap()],
            vec![vec![Expression::constant(1.0, 1)]],
        )
        .unwrap();
        let c1 = Expression::parse("exp(x^2)", 1).unwrap();
        let mut o = opts(10, 0.125, 6);
        o.guard_radius = f64::INFINITY;
        match estimate_point(&model, &c1, 0.1, &[3.0], 2.0, &o) {
            Err(Error::WeightOverflow) => {}
            other => panic!("expected overflow report, got {other:?}"),
        }
    }

    #[test]
    fn grid_validation() {
        let model = unit_ou_model();
        let c1 = Expression::constant(1.0, 1);
        let o = opts(10, 0.25, 7);
        // Missing zero.
        assert!(estimate_curve(&model, &c1, &[-0.1, 0.1], &[0.0], &[1.0], &o).is_err());
        // Not increasing.
        assert!(estimate_curve(&model, &c1, &[0.1, 0.0], &[0.0], &[1.0], &o).is_err());
        // Horizon not on the step grid.
        assert!(estimate_curve(&model, &c1, &[0.0], &[0.0], &[1.1], &o).is_err());
        // Horizons not increasing.
        assert!(estimate_curve(&model, &c1, &[0.0], &[0.0], &[2.0, 1.0], &o).is_err());
    }
}
