//! Regime checks for the problem `Lu - cu = -f`: ellipticity of the
//! diffusion matrix, inward drift at large radii, and the sign structure of
//! the potential, summarized as a solvability verdict. The verdict decides
//! which truncation/discount strategy the solver may use; it is evidence
//! from probes and samples, not a proof.

use rayon::prelude::*;
use serde::Serialize;

use crate::ergodics::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::sde::DiffusionModel;
use crate::stats::batch_means;
use crate::stream::RandomStream;

/// The equation data: diffusion, potential, source, and (optionally) a
/// user-declared factorization c = epsilon * c1 for the small-potential
/// regime.
#[derive(Debug, Clone)]
pub struct PotentialProblem {
    pub model: DiffusionModel,
    pub c: Expression,
    pub f: Expression,
    pub epsilon: Option<f64>,
    pub c1: Option<Expression>,
}

impl PotentialProblem {
    pub fn new(model: DiffusionModel, c: Expression, f: Expression) -> Result<Self> {
        let dim = model.dim();
        if c.dim() != dim || f.dim() != dim {
            return Err(Error::Dimension(format!(
                "potential (dim {}) and source (dim {}) must match the model dimension {dim}",
                c.dim(),
                f.dim()
            )));
        }
        Ok(PotentialProblem {
            model,
            c,
            f,
            epsilon: None,
            c1: None,
        })
    }

    /// Declare the factorization c = epsilon * c1.
    pub fn with_factorization(mut self, epsilon: f64, c1: Expression) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!(
                "declared factor epsilon must be positive, got {epsilon}"
            )));
        }
        if c1.dim() != self.model.dim() {
            return Err(Error::Dimension(format!(
                "c1 has dimension {}, model has {}",
                c1.dim(),
                self.model.dim()
            )));
        }
        self.epsilon = Some(epsilon);
        self.c1 = Some(c1);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CaseLabel {
    /// inf c > 0: unconditional exponential discount.
    Simple,
    /// Declared small factorization c = epsilon * c1 with positive mean.
    Case1,
    /// c >= 0 with positive stationary mean.
    Case2,
    /// c a nonpositive constant, with centered source.
    Case3,
    Unsupported,
}

impl std::fmt::Display for CaseLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CaseLabel::Simple => "Simple",
            CaseLabel::Case1 => "Case1",
            CaseLabel::Case2 => "Case2",
            CaseLabel::Case3 => "Case3",
            CaseLabel::Unsupported => "Unsupported",
        };
        f.write_str(s)
    }
}

/// Numbers of probe values below, at, and above zero.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SignProfile {
    pub negative: usize,
    pub zero: usize,
    pub positive: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Evidence {
    /// Stationary mean of c with batch-means stderr.
    pub c_bar: Option<(f64, f64)>,
    /// Stationary mean of the declared c1.
    pub c1_bar: Option<(f64, f64)>,
    pub min_c_probe: f64,
    pub max_c_probe: f64,
    /// Set when all probes agree within the constancy tolerance.
    pub c_constant: Option<f64>,
    pub sign_profile: SignProfile,
    /// Stationary mean of the source, with stderr (the centering check).
    pub f_bar: (f64, f64),
    pub min_eigenvalue: f64,
    /// Estimated inward rate r from the radial-drift probe.
    pub recurrence_rate: f64,
    /// The case-relevant smallness parameter: declared epsilon for the
    /// factorized regime, -c for a nonpositive constant potential.
    pub epsilon: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseVerdict {
    pub label: CaseLabel,
    /// Other regimes whose predicates also hold, in precedence order.
    pub also: Vec<CaseLabel>,
    pub reasons: Vec<String>,
    pub warnings: Vec<String>,
    pub evidence: Evidence,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyThresholds {
    /// Probe minimum of c must exceed this for the always-discounted regime.
    pub simple_min_c: f64,
    /// Probe agreement tolerance for declaring c constant.
    pub constant_tol: f64,
    /// Smallest acceptable eigenvalue of sigma sigma^T.
    pub eigen_tol: f64,
    /// Fitted mixing rate, when available: a nonpositive-constant potential
    /// of magnitude >= half this rate draws a warning.
    pub mixing_rate: Option<f64>,
}

impl Default for ClassifyThresholds {
    fn default() -> Self {
        ClassifyThresholds {
            simple_min_c: 1e-6,
            constant_tol: 1e-12,
            eigen_tol: 1e-8,
            mixing_rate: None,
        }
    }
}

/// Evenly spaced lattice in [-5,5]^d (odd counts, so the origin is always
/// included). Coarsens with dimension to keep the probe count sane.
pub fn default_probe_lattice(dim: usize) -> Vec<Vec<f64>> {
    let per_dim: usize = match dim {
        1 => 21,
        2 => 11,
        3 => 7,
        4 | 5 => 5,
        _ => 3,
    };
    let axis: Vec<f64> = (0..per_dim)
        .map(|i| -5.0 + 10.0 * i as f64 / (per_dim - 1) as f64)
        .collect();
    let mut points = vec![vec![]];
    for _ in 0..dim {
        let mut next = Vec::with_capacity(points.len() * per_dim);
        for p in &points {
            for &v in &axis {
                let mut q = p.clone();
                q.push(v);
                next.push(q);
            }
        }
        points = next;
    }
    points
}

#[derive(Debug, Clone, Serialize)]
pub struct NondegeneracyReport {
    pub min_eigenvalue: f64,
    pub worst_point: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

/// Smallest eigenvalue of sigma sigma^T over the probe set.
pub fn check_nondegeneracy(
    model: &DiffusionModel,
    probes: &[Vec<f64>],
    tolerance: f64,
) -> Result<NondegeneracyReport> {
    if probes.is_empty() {
        return Err(Error::Config("nondegeneracy probe set is empty".into()));
    }
    let d = model.dim();
    let m = model.noise_dim();
    let mins: Vec<(f64, usize)> = probes
        .par_iter()
        .enumerate()
        .map(|(idx, p)| -> Result<(f64, usize)> {
            let s = model.sigma_at(p)?;
            let sm = nalgebra::DMatrix::from_row_slice(d, m, &s);
            let a = &sm * sm.transpose();
            let eig = a.symmetric_eigenvalues();
            Ok((eig.iter().cloned().fold(f64::INFINITY, f64::min), idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let (min_eigenvalue, worst) = mins
        .iter()
        .cloned()
        .fold((f64::INFINITY, 0), |acc, v| if v.0 < acc.0 { v } else { acc });
    Ok(NondegeneracyReport {
        min_eigenvalue,
        worst_point: probes[worst].clone(),
        tolerance,
        pass: min_eigenvalue > tolerance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RecurrenceReport {
    /// (radius, max over directions of <b(R u), u>).
    pub per_radius: Vec<(f64, f64)>,
    /// r estimate: minus the worst radial drift at the largest radius.
    pub rate: f64,
    pub pass: bool,
    /// Drift magnitude growing with radius: recurrence holds on the probes
    /// but the boundedness part of the assumption does not.
    pub unbounded_drift: bool,
}

/// Unit directions for the sphere probe. Deterministic: +-e1 axes in d=1,
/// a fixed-seed normalized Gaussian set otherwise.
fn probe_directions(dim: usize, n: usize) -> Vec<Vec<f64>> {
    if dim == 1 {
        return vec![vec![1.0], vec![-1.0]];
    }
    let mut out = Vec::with_capacity(n);
    let mut k = 0u64;
    while out.len() < n {
        let mut stream = RandomStream::new(0x5EED_D1EC, k);
        k += 1;
        let v: Vec<f64> = (0..dim).map(|_| stream.standard_normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    out
}

/// Radial drift <b(x), x/|x|> probed on spheres. Negative at large radii is
/// the inward-pull evidence; this is a probe on finitely many points, not a
/// proof about infinity.
pub fn check_recurrence(
    model: &DiffusionModel,
    radii: &[f64],
    n_directions: usize,
) -> Result<RecurrenceReport> {
    if radii.is_empty() || radii.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("radii must be increasing and non-empty".into()));
    }
    if *radii.last().unwrap() < 10.0 {
        return Err(Error::Config("largest probe radius must be at least 10".into()));
    }
    let dirs = probe_directions(model.dim(), n_directions.max(2));
    let mut per_radius = Vec::with_capacity(radii.len());
    let mut per_radius_abs = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst = f64::NEG_INFINITY;
        let mut biggest = 0.0_f64;
        for u in &dirs {
            let x: Vec<f64> = u.iter().map(|ui| r * ui).collect();
            let b = model.drift_at(&x)?;
            let radial: f64 = b.iter().zip(u).map(|(bi, ui)| bi * ui).sum();
            worst = worst.max(radial);
            biggest = biggest.max(radial.abs());
        }
        per_radius.push((r, worst));
        per_radius_abs.push(biggest);
    }
    let worst_at_largest = per_radius.last().unwrap().1;
    let unbounded_drift =
        per_radius_abs.last().unwrap() > &(1.5 * per_radius_abs.first().unwrap());
    Ok(RecurrenceReport {
        rate: -worst_at_largest,
        pass: worst_at_largest < 0.0,
        unbounded_drift,
        per_radius,
    })
}

fn eval_on<'a>(
    e: &Expression,
    points: impl Iterator<Item = &'a [f64]>,
) -> Result<Vec<f64>> {
    let compiled = e.compile();
    let mut scratch = crate::expr::EvalScratch::new();
    points
        .map(|p| compiled.eval(p, &mut scratch).map_err(Error::Eval))
        .collect()
}

/// Decide the solvable regime. Precedence when several predicates hold:
/// always-positive potential, declared factorization, nonnegative potential,
/// nonpositive-constant potential; everything else is unsupported. The
/// probe set is the default lattice plus the stationary samples.
pub fn classify_case(
    problem: &PotentialProblem,
    measure: &EmpiricalMeasure,
    thresholds: &ClassifyThresholds,
) -> Result<CaseVerdict> {
    let model = &problem.model;
    let lattice = default_probe_lattice(model.dim());

    let a2 = check_nondegeneracy(model, &lattice, thresholds.eigen_tol)?;
    let a5 = check_recurrence(model, &[10.0, 20.0, 50.0], 64)?;

    // Potential values on the lattice and on the stationary sample.
    let c_lattice = eval_on(&problem.c, lattice.iter().map(|p| p.as_slice()))?;
    let c_samples = eval_on(&problem.c, measure.iter())?;
    let all_c = || c_lattice.iter().chain(c_samples.iter()).cloned();
    let min_c = all_c().fold(f64::INFINITY, f64::min);
    let max_c = all_c().fold(f64::NEG_INFINITY, f64::max);
    let c_constant = if max_c - min_c <= thresholds.constant_tol {
        Some(c_lattice[0])
    } else {
        None
    };
    let sign_profile = SignProfile {
        negative: all_c().filter(|&v| v < 0.0).count(),
        zero: all_c().filter(|&v| v == 0.0).count(),
        positive: all_c().filter(|&v| v > 0.0).count(),
    };
    let (c_mean, c_se) = batch_means(&c_samples);

    let f_samples = eval_on(&problem.f, measure.iter())?;
    let (f_mean, f_se) = batch_means(&f_samples);

    let c1_bar = match &problem.c1 {
        Some(c1) => {
            let values = eval_on(c1, measure.iter())?;
            Some(batch_means(&values))
        }
        None => None,
    };

    let mut reasons = Vec::new();
    let mut warnings = Vec::new();

    let assumptions_ok = a2.pass && a5.pass;
    if !a2.pass {
        reasons.push(format!(
            "diffusion degenerates: min eigenvalue of sigma sigma^T is {:.3e} at {:?}",
            a2.min_eigenvalue, a2.worst_point
        ));
    }
    if !a5.pass {
        reasons.push(format!(
            "no inward drift at large radius: max radial drift {:.3e} at R = {}",
            -a5.rate,
            a5.per_radius.last().unwrap().0
        ));
    }
    if a5.unbounded_drift {
        warnings.push(
            "drift magnitude grows with radius; recurrence probes pass but drift is unbounded"
                .into(),
        );
    }

    // Predicates in precedence order.
    let p_simple = assumptions_ok && min_c > thresholds.simple_min_c;
    let p_case1 = assumptions_ok
        && match (problem.epsilon, &c1_bar) {
            (Some(_), Some((m, se))) => *m > 3.0 * se,
            _ => false,
        };
    let p_case2 = assumptions_ok && min_c >= 0.0 && c_mean > 3.0 * c_se;
    let a4_holds = f_mean.abs() <= 3.0 * f_se;
    let p_case3 = assumptions_ok && c_constant.is_some_and(|k| k <= 0.0) && a4_holds;

    let mut held: Vec<CaseLabel> = Vec::new();
    if p_simple {
        held.push(CaseLabel::Simple);
    }
    if p_case1 {
        held.push(CaseLabel::Case1);
    }
    if p_case2 {
        held.push(CaseLabel::Case2);
    }
    if p_case3 {
        held.push(CaseLabel::Case3);
    }

    let label = held.first().copied().unwrap_or(CaseLabel::Unsupported);
    let also = held.iter().skip(1).copied().collect();

    if label == CaseLabel::Unsupported && assumptions_ok {
        reasons.push(format!(
            "potential minimum {min_c:.6} not positive beyond {:.1e}",
            thresholds.simple_min_c
        ));
        if problem.epsilon.is_none() {
            reasons.push("no small-factor declaration provided".into());
        } else if let Some((m, se)) = c1_bar {
            reasons.push(format!(
                "declared factor mean {m:.6} not positive beyond noise (stderr {se:.2e})"
            ));
        }
        if min_c < 0.0 && c_constant.is_none() {
            reasons.push("potential takes negative values and is not constant".into());
        } else if c_mean <= 3.0 * c_se {
            reasons.push(format!(
                "stationary mean of the potential {c_mean:.6} not positive beyond noise (stderr {c_se:.2e})"
            ));
        }
        if c_constant.is_some_and(|k| k <= 0.0) && !a4_holds {
            reasons.push(format!(
                "source is not centered: stationary mean {f_mean:.6} (stderr {f_se:.2e})"
            ));
        }
    }

    let epsilon = match label {
        CaseLabel::Case1 => problem.epsilon,
        CaseLabel::Case3 => c_constant.map(|k| -k),
        _ => problem.epsilon,
    };
    if let (Some(eps), Some(lambda)) = (epsilon, thresholds.mixing_rate) {
        if matches!(label, CaseLabel::Case1 | CaseLabel::Case3) && eps >= lambda / 2.0 {
            warnings.push(format!(
                "smallness parameter {eps} is not small against the fitted mixing rate {lambda}; the representation may converge slowly or not at all"
            ));
        }
    }

    Ok(CaseVerdict {
        label,
        also,
        reasons,
        warnings,
        evidence: Evidence {
            c_bar: Some((c_mean, c_se)),
            c1_bar,
            min_c_probe: min_c,
            max_c_probe: max_c,
            c_constant,
            sign_profile,
            f_bar: (f_mean, f_se),
            min_eigenvalue: a2.min_eigenvalue,
            recurrence_rate: a5.rate,
            epsilon,
        },
    })
}
