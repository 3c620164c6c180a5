//! Monte Carlo evaluation of the path-integral solution
//! u(x) = integral over t of E_x[e^{-A_t} f(X_t)], A_t the running potential
//! integral, truncated at a horizon chosen from a decay-rate estimate.
//! Also houses the structural self-checks: the Markov splitting identity,
//! the stopped-ball (Dirichlet) variant, the exponential growth envelope,
//! and stationary centering of the solution.

use rayon::prelude::*;
use serde::Serialize;

use crate::classify::{CaseLabel, CaseVerdict, PotentialProblem};
use crate::ergodics::{DecayFit, EmpiricalMeasure};
use crate::error::{Error, Result};
use crate::expr::{CompiledExpr, Expression};
use crate::lmgf::LmgfCurve;
use crate::sde::{step_count, DiffusionModel, Stepper};
use crate::stats::{linear_fit, mean_and_stderr};
use crate::stream::{derived_seed, Mirrored, NoiseSource, RandomStream};

/// |log weight| is kept within this band; e^{700} is still a normal f64.
const EXPONENT_CAP: f64 = 700.0;

const SEMIGROUP_OUTER_TAG: u64 = 0x5E01;
const SEMIGROUP_INNER_TAG: u64 = 0x5E02;
const DIRICHLET_INNER_TAG: u64 = 0xD107;
const CENTERING_TAG: u64 = 0xCE17;

#[derive(Debug, Clone, Serialize)]
pub struct SolveOptions {
    pub seed: u64,
    pub guard_radius: f64,
    /// Average each path with its sign-flipped twin (requires even N).
    pub antithetic: bool,
    /// Estimated magnitude of the discarded time tail; recorded verbatim.
    pub tail_bound: f64,
    /// Verdict label the caller solved under. Unsupported is refused.
    pub case: CaseLabel,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            seed: 1,
            guard_radius: 1e6,
            antithetic: false,
            tail_bound: 0.0,
            case: CaseLabel::Simple,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionEstimate {
    pub x: Vec<f64>,
    pub value: f64,
    pub stderr: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub tail_bound: f64,
    pub dt: f64,
    #[serde(rename = "N")]
    pub n_paths: usize,
    pub case: CaseLabel,
    pub warnings: Vec<String>,
}

/// One path's contribution: the discounted time integral of the source, the
/// terminal state, and the terminal discount weight.
#[derive(Debug, Clone)]
pub struct PathIntegral {
    pub integral: f64,
    pub endpoint: Vec<f64>,
    /// Log of the terminal weight (-A_T), tracked additively and uncapped.
    pub log_weight: f64,
    /// Terminal weight as used, capped at e^{+-700}.
    pub weight: f64,
    pub clamped: bool,
}

/// Core stepping loop shared by the solver and its checks. Left-rectangle
/// rule throughout: the source and the potential are both read at the
/// departing point of each step. The weight is maintained multiplicatively
/// with the per-step factor memoized on the value of c*dt, so a constant
/// potential costs one exp for the whole path and the accumulated product
/// is a clean geometric sequence.
fn run_path<R: NoiseSource>(
    model: &DiffusionModel,
    c: &CompiledExpr,
    f: &CompiledExpr,
    x0: &[f64],
    n_steps: usize,
    dt: f64,
    guard_radius: f64,
    stream: &mut R,
) -> Result<PathIntegral> {
    let sqrt_dt = dt.sqrt();
    let guard2 = guard_radius * guard_radius;
    let max_w = EXPONENT_CAP.exp();
    let mut stepper = Stepper::new(model);
    stepper.reset(x0);

    let mut integral = 0.0_f64;
    let mut w = 1.0_f64;
    let mut a = 0.0_f64; // log weight, -A_t
    let mut clamped = false;
    let mut memo_cdt = f64::NAN;
    let mut memo_factor = 1.0_f64;

    for j in 0..n_steps {
        let c_here = stepper.eval(c)?;
        let f_here = stepper.eval(f)?;
        integral += w * f_here * dt;

        let cdt = c_here * dt;
        a -= cdt;
        if a > EXPONENT_CAP {
            // Discount exploding (possible when c < 0): freeze at the cap
            // and flag; the estimate is a known underestimate past here.
            w = max_w;
            clamped = true;
        } else if a < -EXPONENT_CAP {
            // True weight below 1e-304: contributes nothing measurable.
            w = 0.0;
        } else if w == 0.0 || w == max_w {
            // Re-entering the representable band after a capped stretch.
            w = a.exp();
        } else {
            if cdt != memo_cdt {
                memo_factor = (-cdt).exp();
                memo_cdt = cdt;
            }
            w *= memo_factor;
        }

        stepper.advance(dt, sqrt_dt, stream)?;
        let r2: f64 = stepper.x().iter().map(|v| v * v).sum();
        if !r2.is_finite() || r2 > guard2 {
            return Err(Error::TrajectoryBlowup {
                t: (j + 1) as f64 * dt,
                radius: guard_radius,
            });
        }
    }

    Ok(PathIntegral {
        integral,
        endpoint: stepper.x().to_vec(),
        log_weight: a,
        weight: w,
        clamped,
    })
}

/// One path of the truncated representation, replayable from `stream`.
/// Exposed so properties of the estimator (linearity in the source,
/// monotonicity, exact replay) can be checked path by path.
pub fn path_integral<R: NoiseSource>(
    problem: &PotentialProblem,
    x0: &[f64],
    t_end: f64,
    dt: f64,
    guard_radius: f64,
    stream: &mut R,
) -> Result<PathIntegral> {
    let n_steps = step_count(t_end, dt)?;
    if x0.len() != problem.model.dim() {
        return Err(Error::Dimension(format!(
            "start point has dimension {}, model has {}",
            x0.len(),
            problem.model.dim()
        )));
    }
    let c = problem.c.compile();
    let f = problem.f.compile();
    run_path(&problem.model, &c, &f, x0, n_steps, dt, guard_radius, stream)
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if !(v > 0.0) {
        return Err(Error::Config(format!("{name} must be positive, got {v}")));
    }
    Ok(())
}

/// Estimate u(x) by averaging the discounted source integral over N paths.
pub fn solve_fk(
    problem: &PotentialProblem,
    x: &[f64],
    t_end: f64,
    dt: f64,
    n_paths: usize,
    opts: &SolveOptions,
) -> Result<SolutionEstimate> {
    if opts.case == CaseLabel::Unsupported {
        return Err(Error::Refused(
            "no convergent representation for an unsupported verdict".into(),
        ));
    }
    check_positive("horizon", t_end)?;
    if n_paths == 0 {
        return Err(Error::Config("path count must be positive".into()));
    }
    if x.len() != problem.model.dim() {
        return Err(Error::Dimension(format!(
            "evaluation point has dimension {}, model has {}",
            x.len(),
            problem.model.dim()
        )));
    }
    if opts.antithetic && n_paths % 2 != 0 {
        return Err(Error::Config(
            "antithetic averaging needs an even path count".into(),
        ));
    }
    let n_steps = step_count(t_end, dt)?;
    let c = problem.c.compile();
    let f = problem.f.compile();
    let model = &problem.model;

    let n_units = if opts.antithetic { n_paths / 2 } else { n_paths };
    let per_unit: Vec<(f64, bool)> = (0..n_units as u64)
        .into_par_iter()
        .map(|k| -> Result<(f64, bool)> {
            if opts.antithetic {
                let mut s = RandomStream::new(opts.seed, k);
                let p = run_path(model, &c, &f, x, n_steps, dt, opts.guard_radius, &mut s)?;
                let mut s2 = RandomStream::new(opts.seed, k);
                let q = run_path(
                    model,
                    &c,
                    &f,
                    x,
                    n_steps,
                    dt,
                    opts.guard_radius,
                    &mut Mirrored(&mut s2),
                )?;
                Ok((0.5 * (p.integral + q.integral), p.clamped || q.clamped))
            } else {
                let mut s = RandomStream::new(opts.seed, k);
                let p = run_path(model, &c, &f, x, n_steps, dt, opts.guard_radius, &mut s)?;
                Ok((p.integral, p.clamped))
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let values: Vec<f64> = per_unit.iter().map(|u| u.0).collect();
    let n_clamped = per_unit.iter().filter(|u| u.1).count();
    let (value, stderr) = mean_and_stderr(&values);
    if !value.is_finite() {
        return Err(Error::WeightOverflow);
    }
    let mut warnings = Vec::new();
    if n_clamped > 0 {
        warnings.push(format!(
            "discount exponent capped at {EXPONENT_CAP} on {n_clamped} of {n_paths} paths; value is a lower bound there"
        ));
    }
    Ok(SolutionEstimate {
        x: x.to_vec(),
        value,
        stderr,
        horizon: t_end,
        tail_bound: opts.tail_bound,
        dt,
        n_paths,
        case: opts.case,
        warnings,
    })
}

/// Largest |f| over the stationary sample; stands in for the sup norm in
/// the tail bound.
pub fn probe_norm(f: &Expression, measure: &EmpiricalMeasure) -> Result<f64> {
    if measure.is_empty() {
        return Err(Error::Config("cannot probe a norm on an empty sample".into()));
    }
    let compiled = f.compile();
    let mut scratch = crate::expr::EvalScratch::new();
    let mut best = 0.0_f64;
    for p in measure.iter() {
        best = best.max(compiled.eval(p, &mut scratch)?.abs());
    }
    Ok(best)
}

/// Where the decay rate of the integrand comes from.
pub enum DecayEvidence<'a> {
    /// Log-moment curve with the grid point to read: beta = -epsilon when
    /// the curve is on the declared factor c1, beta = -1 when it is on c.
    Lmgf { curve: &'a LmgfCurve, beta: f64 },
    /// Mixing-decay fit; the rate enters net of the potential magnitude.
    Mixing(&'a DecayFit),
    /// No curve needed (potential bounded below by a positive constant).
    None,
}

#[derive(Debug, Clone, Serialize)]
pub struct Truncation {
    pub horizon: f64,
    pub rate: f64,
    pub tail_bound: f64,
    pub f_norm: f64,
    pub warnings: Vec<String>,
}

/// Pick the horizon T so the bound ||f|| e^{-rho T} / rho drops below tol.
/// The horizon is rounded up to the step grid.
pub fn choose_truncation(
    verdict: &CaseVerdict,
    tol: f64,
    dt: f64,
    evidence: DecayEvidence<'_>,
    f_norm: f64,
) -> Result<Truncation> {
    check_positive("tolerance", tol)?;
    check_positive("dt", dt)?;
    if !f_norm.is_finite() || f_norm < 0.0 {
        return Err(Error::Config(format!("bad source norm {f_norm}")));
    }
    let mut warnings = Vec::new();
    let rate = match verdict.label {
        CaseLabel::Simple => verdict.evidence.min_c_probe,
        CaseLabel::Case1 | CaseLabel::Case2 => match evidence {
            DecayEvidence::Lmgf { curve, beta } => {
                let (h, se) = curve.limit_at(beta).ok_or(Error::NotOnGrid(beta))?;
                if let Some(j) = curve.beta_index(beta) {
                    if !curve.stabilized[j] {
                        warnings.push(format!(
                            "log-moment value at beta = {beta} had not stabilized in T; the decay rate may be optimistic"
                        ));
                    }
                }
                if h.abs() <= 3.0 * se {
                    warnings.push(format!(
                        "log-moment value {h:.3e} at beta = {beta} is within noise ({se:.1e})"
                    ));
                }
                -h
            }
            _ => {
                return Err(Error::Config(
                    "this regime needs a log-moment curve to set the horizon".into(),
                ))
            }
        },
        CaseLabel::Case3 => match evidence {
            DecayEvidence::Mixing(fit) => {
                let eps = verdict.evidence.epsilon.ok_or_else(|| {
                    Error::Config("verdict carries no potential magnitude".into())
                })?;
                fit.rate - eps
            }
            _ => {
                return Err(Error::Config(
                    "the nonpositive-constant regime needs a mixing-decay fit".into(),
                ))
            }
        },
        CaseLabel::Unsupported => {
            return Err(Error::Refused(
                "no horizon exists for an unsupported verdict".into(),
            ))
        }
    };
    if !(rate > 0.0) {
        return Err(Error::DivergenceRisk { rate });
    }
    if f_norm == 0.0 {
        warnings.push("source vanishes on the probe sample; horizon set to one step".into());
        return Ok(Truncation {
            horizon: dt,
            rate,
            tail_bound: 0.0,
            f_norm,
            warnings,
        });
    }
    let t_raw = (f_norm / (rate * tol)).ln() / rate;
    let horizon = (t_raw.max(dt) / dt).ceil() * dt;
    let tail_bound = f_norm * (-rate * horizon).exp() / rate;
    Ok(Truncation {
        horizon,
        rate,
        tail_bound,
        f_norm,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SemigroupOptions {
    pub n_outer: usize,
    pub seed: u64,
    pub guard_radius: f64,
    /// Refuse nested work beyond this many Euler steps.
    pub max_step_budget: u64,
}

impl Default for SemigroupOptions {
    fn default() -> Self {
        SemigroupOptions {
            n_outer: 400,
            seed: 1,
            guard_radius: 1e6,
            max_step_budget: 2_000_000_000,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SemigroupReport {
    pub x: Vec<f64>,
    pub t_split: f64,
    /// The direct estimate u(x).
    pub lhs: f64,
    /// Mean of the head integral over [0, t_split].
    pub head: f64,
    /// Mean of weight * u(endpoint) at the split time.
    pub tail_term: f64,
    pub rhs: f64,
    pub residual: f64,
    pub stderr: f64,
    pub pass: bool,
    pub n_outer: usize,
    pub n_inner: usize,
    pub warnings: Vec<String>,
}

/// Markov splitting identity on the truncated object: the horizon-T value
/// must equal the head integral to t_split plus the discounted value of the
/// horizon-(T - t_split) solution restarted at the split endpoint. Inner
/// solves run a sqrt(N) path budget; their noise averages out across outer
/// endpoints.
pub fn semigroup_check(
    problem: &PotentialProblem,
    x: &[f64],
    t_split: f64,
    full: &SolutionEstimate,
    opts: &SemigroupOptions,
) -> Result<SemigroupReport> {
    if t_split < 0.0 || t_split > full.horizon {
        return Err(Error::Config(format!(
            "split time {t_split} outside [0, {}]",
            full.horizon
        )));
    }
    let pass_slack = |residual: f64, se: f64, scale: f64| -> bool {
        // The 1e-10 absolute term absorbs float re-association when the
        // residual is deterministically ~0 and the stderr is exactly 0.
        residual <= 3.0 * se + 1e-10 * (1.0 + scale.abs())
    };
    if t_split == 0.0 {
        return Ok(SemigroupReport {
            x: x.to_vec(),
            t_split,
            lhs: full.value,
            head: 0.0,
            tail_term: full.value,
            rhs: full.value,
            residual: 0.0,
            stderr: 0.0,
            pass: true,
            n_outer: 0,
            n_inner: 0,
            warnings: vec!["zero split is the identity; nothing was simulated".into()],
        });
    }
    let split_steps = step_count(t_split, full.dt)?;
    let rem = full.horizon - t_split;
    let rem_steps = step_count(rem, full.dt)?;
    if opts.n_outer == 0 {
        return Err(Error::Config("outer sample count must be positive".into()));
    }
    let n_inner = ((full.n_paths as f64).sqrt().round() as usize).max(8);
    let budget = opts.n_outer as u64 * (split_steps as u64 + n_inner as u64 * rem_steps as u64);
    if budget > opts.max_step_budget {
        return Err(Error::BudgetExceeded(format!(
            "semigroup check needs {budget} steps, budget is {}",
            opts.max_step_budget
        )));
    }

    let c = problem.c.compile();
    let f = problem.f.compile();
    let model = &problem.model;
    let outer_seed = derived_seed(opts.seed, &[SEMIGROUP_OUTER_TAG]);

    let parts: Vec<(f64, f64, f64)> = (0..opts.n_outer as u64)
        .into_par_iter()
        .map(|k| -> Result<(f64, f64, f64)> {
            let mut s = RandomStream::new(outer_seed, k);
            let head = run_path(
                model,
                &c,
                &f,
                x,
                split_steps,
                full.dt,
                opts.guard_radius,
                &mut s,
            )?;
            let inner = solve_fk(
                problem,
                &head.endpoint,
                rem,
                full.dt,
                n_inner,
                &SolveOptions {
                    seed: derived_seed(opts.seed, &[SEMIGROUP_INNER_TAG, k]),
                    guard_radius: opts.guard_radius,
                    antithetic: false,
                    tail_bound: 0.0,
                    case: full.case,
                },
            )?;
            Ok((head.integral, head.weight * inner.value, inner.stderr))
        })
        .collect::<Result<Vec<_>>>()?;

    let rhs_samples: Vec<f64> = parts.iter().map(|p| p.0 + p.1).collect();
    let head_mean = parts.iter().map(|p| p.0).sum::<f64>() / parts.len() as f64;
    let tail_mean = parts.iter().map(|p| p.1).sum::<f64>() / parts.len() as f64;
    let (rhs, rhs_se) = mean_and_stderr(&rhs_samples);
    let stderr = (rhs_se * rhs_se + full.stderr * full.stderr).sqrt();
    let residual = (full.value - rhs).abs();
    Ok(SemigroupReport {
        x: x.to_vec(),
        t_split,
        lhs: full.value,
        head: head_mean,
        tail_term: tail_mean,
        rhs,
        residual,
        stderr,
        pass: pass_slack(residual, stderr, full.value),
        n_outer: opts.n_outer,
        n_inner,
        warnings: Vec::new(),
    })
}

/// How to value a path once it leaves the ball.
pub enum BoundaryValues {
    /// Closed-form solution evaluated at the exit point (test mode).
    Analytic(Expression),
    /// Nested solve at the exit point with a sqrt(N) path budget.
    Nested,
}

#[derive(Debug, Clone, Serialize)]
pub struct DirichletOptions {
    pub seed: u64,
    pub guard_radius: f64,
    /// Paths still inside the ball at this time are valued where they stand
    /// and counted.
    pub t_max: f64,
    pub case: CaseLabel,
}

impl Default for DirichletOptions {
    fn default() -> Self {
        DirichletOptions {
            seed: 1,
            guard_radius: 1e6,
            t_max: 50.0,
            case: CaseLabel::Simple,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DirichletReport {
    pub x: Vec<f64>,
    pub center: Vec<f64>,
    pub radius: f64,
    pub value: f64,
    pub stderr: f64,
    pub residual: f64,
    pub combined_stderr: f64,
    pub pass: bool,
    pub n_paths: usize,
    pub n_no_exit: usize,
    pub warnings: Vec<String>,
}

/// Stopped-ball representation: integrate the discounted source until the
/// path leaves the ball, then add the discounted boundary value at the exit
/// point. Consistency with the global estimate is evidence the two
/// representations describe the same function.
#[allow(clippy::too_many_arguments)]
pub fn dirichlet_crosscheck(
    problem: &PotentialProblem,
    center: &[f64],
    radius: f64,
    x: &[f64],
    dt: f64,
    n_paths: usize,
    boundary: &BoundaryValues,
    reference: &SolutionEstimate,
    opts: &DirichletOptions,
) -> Result<DirichletReport> {
    check_positive("radius", radius)?;
    if n_paths == 0 {
        return Err(Error::Config("path count must be positive".into()));
    }
    let d = problem.model.dim();
    if x.len() != d || center.len() != d {
        return Err(Error::Dimension(format!(
            "point/center must have the model dimension {d}"
        )));
    }
    let dist0: f64 = x
        .iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    if dist0 >= radius {
        return Err(Error::Config(format!(
            "start point is outside the ball: |x - center| = {dist0}, radius {radius}"
        )));
    }
    let max_steps = step_count(opts.t_max, dt)?;
    if let BoundaryValues::Analytic(u) = boundary {
        if u.dim() != d {
            return Err(Error::Dimension(format!(
                "boundary expression has dimension {}, model has {d}",
                u.dim()
            )));
        }
    }
    let n_inner = ((n_paths as f64).sqrt().round() as usize).max(8);

    let c = problem.c.compile();
    let f = problem.f.compile();
    let u_boundary = match boundary {
        BoundaryValues::Analytic(u) => Some(u.compile()),
        BoundaryValues::Nested => None,
    };
    let model = &problem.model;
    let sqrt_dt = dt.sqrt();
    let guard2 = opts.guard_radius * opts.guard_radius;
    let max_w = EXPONENT_CAP.exp();
    let r2_ball = radius * radius;

    let per_path: Vec<(f64, bool)> = (0..n_paths as u64)
        .into_par_iter()
        .map(|k| -> Result<(f64, bool)> {
            let mut stream = RandomStream::new(opts.seed, k);
            let mut stepper = Stepper::new(model);
            stepper.reset(x);
            let mut integral = 0.0_f64;
            let mut w = 1.0_f64;
            let mut a = 0.0_f64;
            let mut memo_cdt = f64::NAN;
            let mut memo_factor = 1.0_f64;
            let mut exited = false;
            for j in 0..max_steps {
                let c_here = stepper.eval(&c)?;
                let f_here = stepper.eval(&f)?;
                integral += w * f_here * dt;
                let cdt = c_here * dt;
                a -= cdt;
                if a > EXPONENT_CAP {
                    w = max_w;
                } else if a < -EXPONENT_CAP {
                    w = 0.0;
                } else if w == 0.0 || w == max_w {
                    w = a.exp();
                } else {
                    if cdt != memo_cdt {
                        memo_factor = (-cdt).exp();
                        memo_cdt = cdt;
                    }
                    w *= memo_factor;
                }
                stepper.advance(dt, sqrt_dt, &mut stream)?;
                let r2: f64 = stepper.x().iter().map(|v| v * v).sum();
                if !r2.is_finite() || r2 > guard2 {
                    return Err(Error::TrajectoryBlowup {
                        t: (j + 1) as f64 * dt,
                        radius: opts.guard_radius,
                    });
                }
                let dist2: f64 = stepper
                    .x()
                    .iter()
                    .zip(center)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum();
                if dist2 >= r2_ball {
                    exited = true;
                    break;
                }
            }
            let endpoint = stepper.x().to_vec();
            let u_exit = match &u_boundary {
                Some(compiled) => {
                    let mut scratch = crate::expr::EvalScratch::new();
                    compiled.eval(&endpoint, &mut scratch)?
                }
                None => {
                    solve_fk(
                        problem,
                        &endpoint,
                        reference.horizon,
                        dt,
                        n_inner,
                        &SolveOptions {
                            seed: derived_seed(opts.seed, &[DIRICHLET_INNER_TAG, k]),
                            guard_radius: opts.guard_radius,
                            antithetic: false,
                            tail_bound: 0.0,
                            case: opts.case,
                        },
                    )?
                    .value
                }
            };
            Ok((integral + w * u_exit, exited))
        })
        .collect::<Result<Vec<_>>>()?;

    let values: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let n_no_exit = per_path.iter().filter(|p| !p.1).count();
    let (value, stderr) = mean_and_stderr(&values);
    let residual = (reference.value - value).abs();
    let combined_stderr = (stderr * stderr + reference.stderr * reference.stderr).sqrt();
    let mut warnings = Vec::new();
    if n_no_exit > 0 {
        warnings.push(format!(
            "{n_no_exit} of {n_paths} paths never left the ball by t = {}; valued in place",
            opts.t_max
        ));
    }
    Ok(DirichletReport {
        x: x.to_vec(),
        center: center.to_vec(),
        radius,
        value,
        stderr,
        residual,
        combined_stderr,
        pass: residual <= 3.0 * combined_stderr + 1e-10 * (1.0 + reference.value.abs()),
        n_paths,
        n_no_exit,
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GrowthReport {
    pub gamma: f64,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Smallest C with |u(x)| <= C e^{gamma |x|} on the scan.
    pub c_fitted: f64,
    /// The envelope is attained at the outermost point and significantly so:
    /// the scan cannot bound growth at this gamma.
    pub envelope_at_edge: bool,
    /// Slope of log|u| against |x| over points that clear their noise.
    pub log_slope: Option<(f64, f64)>,
    pub pass: bool,
}

/// Solve at points of increasing |x| and fit the exponential envelope.
pub fn growth_scan(
    problem: &PotentialProblem,
    points: &[Vec<f64>],
    gamma: f64,
    t_end: f64,
    dt: f64,
    n_paths: usize,
    opts: &SolveOptions,
) -> Result<GrowthReport> {
    if points.is_empty() {
        return Err(Error::Config("growth scan needs at least one point".into()));
    }
    if gamma < 0.0 {
        return Err(Error::Config(format!("gamma must be >= 0, got {gamma}")));
    }
    let norms: Vec<f64> = points
        .iter()
        .map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if norms.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Config(
            "scan points must be ordered by nondecreasing |x|".into(),
        ));
    }
    let mut values = Vec::with_capacity(points.len());
    let mut stderrs = Vec::with_capacity(points.len());
    for p in points {
        let est = solve_fk(problem, p, t_end, dt, n_paths, opts)?;
        values.push(est.value);
        stderrs.push(est.stderr);
    }
    let mut c_fitted = f64::NEG_INFINITY;
    let mut arg_max = 0;
    for (i, (&v, &r)) in values.iter().zip(&norms).enumerate() {
        let envelope = v.abs() * (-gamma * r).exp();
        if envelope > c_fitted {
            c_fitted = envelope;
            arg_max = i;
        }
    }
    let envelope_at_edge = arg_max == points.len() - 1
        && points.len() > 1
        && values[arg_max].abs() > 3.0 * stderrs[arg_max];
    let fit_pts: Vec<(f64, f64)> = values
        .iter()
        .zip(&stderrs)
        .zip(&norms)
        .filter(|((v, s), _)| v.abs() > 3.0 * **s && v.abs() > 0.0)
        .map(|((v, _), r)| (*r, v.abs().ln()))
        .collect();
    let log_slope = if fit_pts.len() >= 2 {
        let xs: Vec<f64> = fit_pts.iter().map(|p| p.0).collect();
        let ys: Vec<f64> = fit_pts.iter().map(|p| p.1).collect();
        linear_fit(&xs, &ys).map(|f| (f.slope, f.se_slope))
    } else {
        None
    };
    Ok(GrowthReport {
        gamma,
        points: points.to_vec(),
        values,
        stderrs,
        c_fitted,
        envelope_at_edge,
        log_slope,
        pass: !envelope_at_edge,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CenteringBudget {
    pub n_points: usize,
    pub n_paths: usize,
    pub t_end: f64,
    pub dt: f64,
    pub seed: u64,
    pub guard_radius: f64,
    pub case: CaseLabel,
    pub max_step_budget: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CenteringReport {
    pub estimate: f64,
    pub stderr: f64,
    pub n_points: usize,
    pub pass: bool,
}

/// Average the solution against the stationary sample: the nonpositive-
/// constant regime promises a centered solution, so the result should sit
/// within noise of zero. The sample stderr over evaluation points already
/// contains the per-point solve noise.
pub fn centering_check(
    problem: &PotentialProblem,
    measure: &EmpiricalMeasure,
    budget: &CenteringBudget,
) -> Result<CenteringReport> {
    if budget.case != CaseLabel::Case3 {
        return Err(Error::Config(
            "centering applies to the nonpositive-constant regime only".into(),
        ));
    }
    if measure.is_empty() {
        return Err(Error::Config("empty stationary sample".into()));
    }
    if budget.n_points == 0 || budget.n_paths == 0 {
        return Err(Error::Config("centering budget must be positive".into()));
    }
    let n_points = budget.n_points.min(measure.len());
    let steps = step_count(budget.t_end, budget.dt)? as u64;
    let total = n_points as u64 * budget.n_paths as u64 * steps;
    if total > budget.max_step_budget {
        return Err(Error::BudgetExceeded(format!(
            "centering check needs {total} steps, budget is {}",
            budget.max_step_budget
        )));
    }
    let stride = (measure.len() / n_points).max(1);
    let values: Vec<f64> = (0..n_points)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let p = measure.sample(i * stride);
            let est = solve_fk(
                problem,
                p,
                budget.t_end,
                budget.dt,
                budget.n_paths,
                &SolveOptions {
                    seed: derived_seed(budget.seed, &[CENTERING_TAG, i as u64]),
                    guard_radius: budget.guard_radius,
                    antithetic: false,
                    tail_bound: 0.0,
                    case: budget.case,
                },
            )?;
            Ok(est.value)
        })
        .collect::<Result<Vec<_>>>()?;
    let (estimate, stderr) = mean_and_stderr(&values);
    Ok(CenteringReport {
        estimate,
        stderr,
        n_points,
        pass: estimate.abs() <= 3.0 * stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{Evidence, SignProfile};
    use crate::ergodics::{estimate_invariant, InvariantOptions};
    use crate::sde::unit_ou_model;

    fn problem(c: &str, f: &str) -> PotentialProblem {
        PotentialProblem::new(
            unit_ou_model(),
            Expression::parse(c, 1).unwrap(),
            Expression::parse(f, 1).unwrap(),
        )
        .unwrap()
    }

    fn verdict(label: CaseLabel, min_c: f64, epsilon: Option<f64>) -> CaseVerdict {
        CaseVerdict {
            label,
            also: vec![],
            reasons: vec![],
            warnings: vec![],
            evidence: Evidence {
                c_bar: None,
                c1_bar: None,
                min_c_probe: min_c,
                max_c_probe: min_c,
                c_constant: Some(min_c),
                sign_profile: SignProfile {
                    negative: 0,
                    zero: 0,
                    positive: 1,
                },
                f_bar: (0.0, 0.0),
                min_eigenvalue: 2.0,
                recurrence_rate: 1.0,
                epsilon,
            },
        }
    }

    #[test]
    fn constant_coefficients_reproduce_geometric_sum() {
        // c and f constant: every path carries the same deterministic
        // integral, so the estimate equals the geometric sum and the
        // stderr is exactly zero.
        let p = problem("0.5", "1");
        let dt = 1.0 / 64.0;
        let est = solve_fk(&p, &[0.3], 16.0, dt, 10, &SolveOptions::default()).unwrap();
        let q = (-0.5 * dt).exp();
        let n = 1024;
        let expected = dt * (1.0 - q.powi(n)) / (1.0 - q);
        assert!((est.value - expected).abs() < 1e-12, "{}", est.value);
        assert_eq!(est.stderr, 0.0);
        assert!((est.value - 2.0).abs() < 0.01);
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn linear_ou_solution_and_case_labels() {
        let p = problem("0.1", "x");
        let opts = SolveOptions {
            seed: 7,
            ..SolveOptions::default()
        };
        let est = solve_fk(&p, &[1.0], 12.0, 1.0 / 128.0, 4000, &opts).unwrap();
        assert!(
            (est.value - 1.0 / 1.1).abs() < 3.0 * est.stderr + 0.005,
            "value {} stderr {}",
            est.value,
            est.stderr
        );
        assert_eq!(est.case, CaseLabel::Simple);
        assert_eq!(est.n_paths, 4000);
    }

    #[test]
    fn zero_source_is_exactly_zero() {
        let p = problem("0.1", "0");
        let est = solve_fk(&p, &[1.0], 4.0, 1.0 / 32.0, 50, &SolveOptions::default()).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.stderr, 0.0);
    }

    #[test]
    fn unsupported_verdict_is_refused() {
        let p = problem("0.1", "x");
        let opts = SolveOptions {
            case: CaseLabel::Unsupported,
            ..SolveOptions::default()
        };
        match solve_fk(&p, &[0.0], 1.0, 0.25, 4, &opts) {
            Err(Error::Refused(_)) => {}
            other => panic!("expected refusal, got {other:?}"),
        }
        // Antithetic averaging needs an even path count.
        let opts = SolveOptions {
            antithetic: true,
            ..SolveOptions::default()
        };
        assert!(solve_fk(&p, &[0.0], 1.0, 0.25, 5, &opts).is_err());
    }

    #[test]
    fn per_path_linearity() {
        let p1 = problem("0.2*step(abs(x)-1)", "x");
        let p2 = problem("0.2*step(abs(x)-1)", "tanh(x)");
        let p12 = problem("0.2*step(abs(x)-1)", "x+tanh(x)");
        let pdouble = problem("0.2*step(abs(x)-1)", "2*x");
        for k in 0..32u64 {
            let run = |pr: &PotentialProblem| {
                let mut s = RandomStream::new(11, k);
                path_integral(pr, &[0.7], 4.0, 1.0 / 32.0, 1e6, &mut s).unwrap()
            };
            let a = run(&p1);
            let b = run(&p2);
            let ab = run(&p12);
            // Doubling is exact in floating point.
            assert_eq!(run(&pdouble).integral.to_bits(), (2.0 * a.integral).to_bits());
            // A generic sum re-associates the rounding.
            let err = (ab.integral - (a.integral + b.integral)).abs();
            assert!(err <= 1e-12 * (1.0 + ab.integral.abs()), "path {k}: {err}");
            // Same noise, same endpoint.
            assert_eq!(a.endpoint, b.endpoint);
        }
    }

    #[test]
    fn monotonicity_under_nonnegative_data() {
        // f >= 0 and c >= 0: every path contribution is nonnegative.
        let p = problem("0.2*step(abs(x)-1)", "exp(-x^2)");
        for k in 0..64u64 {
            let mut s = RandomStream::new(3, k);
            let pi = path_integral(&p, &[0.0], 6.0, 1.0 / 32.0, 1e6, &mut s).unwrap();
            assert!(pi.integral >= 0.0);
            assert!(pi.weight > 0.0);
        }
    }

    #[test]
    fn antithetic_pairs_collapse_linear_noise() {
        // For linear drift and linear source the path integral is affine in
        // the Gaussian draws, so each antithetic pair averages to the
        // deterministic discrete mean m(dt) up to roundoff.
        let p = problem("0", "x");
        let dt = 1.0 / 64.0;
        let t = 8.0;
        let opts = SolveOptions {
            antithetic: true,
            case: CaseLabel::Case3,
            ..SolveOptions::default()
        };
        let est = solve_fk(&p, &[1.0], t, dt, 64, &opts).unwrap();
        let n = 512;
        let m = 1.0 - (1.0 - dt).powi(n); // x0 dt sum_j (1-dt)^j
        assert!(
            (est.value - m).abs() < 1e-12,
            "value {} expected {m}",
            est.value
        );
        assert!(est.stderr < 1e-13, "stderr {}", est.stderr);

        // Same estimator without antithetic averaging is plainly noisy.
        let plain = solve_fk(
            &p,
            &[1.0],
            t,
            dt,
            64,
            &SolveOptions {
                antithetic: false,
                case: CaseLabel::Case3,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        assert!(plain.stderr > 1e-3);
    }

    #[test]
    fn discount_cap_is_flagged() {
        // Strongly negative constant potential: -A_t = 2t exceeds 700 well
        // inside the horizon, so every path hits the cap.
        let p = problem("-2", "1");
        let est = solve_fk(
            &p,
            &[0.0],
            400.0,
            0.25,
            8,
            &SolveOptions {
                case: CaseLabel::Case3,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        assert!(!est.warnings.is_empty());
        assert!(est.value.is_finite());
    }

    #[test]
    fn truncation_from_constant_rate() {
        let v = verdict(CaseLabel::Simple, 0.5, None);
        let tr = choose_truncation(&v, 0.01, 1e-3, DecayEvidence::None, 1.0).unwrap();
        assert_eq!(tr.rate, 0.5);
        // ln(1/(0.5*0.01))/0.5, rounded up to the millisecond grid.
        assert!(tr.horizon >= 10.5966 && tr.horizon < 10.599, "{}", tr.horizon);
        let steps = tr.horizon / 1e-3;
        assert!((steps - steps.round()).abs() < 1e-6);
        assert!(tr.tail_bound <= 0.01 * (1.0 + 1e-12));
        assert!(tr.warnings.is_empty());

        // Vanishing source short-circuits.
        let tr0 = choose_truncation(&v, 0.01, 1e-3, DecayEvidence::None, 0.0).unwrap();
        assert_eq!(tr0.horizon, 1e-3);
        assert_eq!(tr0.tail_bound, 0.0);
    }

    #[test]
    fn truncation_from_curve_and_fit() {
        let curve = LmgfCurve {
            betas: vec![-1.0, 0.0],
            ts: vec![5.0, 10.0],
            x: vec![0.0],
            values: vec![vec![-0.059, 0.0], vec![-0.06, 0.0]],
            stderrs: vec![vec![0.004, 0.0], vec![0.005, 0.0]],
            limit: vec![-0.06, 0.0],
            limit_stderr: vec![0.005, 0.0],
            stabilized: vec![true, true],
            stabilization_tol: 0.01,
            warnings: vec![],
        };
        let v2 = verdict(CaseLabel::Case2, 0.0, None);
        let tr = choose_truncation(
            &v2,
            0.05,
            1e-3,
            DecayEvidence::Lmgf {
                curve: &curve,
                beta: -1.0,
            },
            1.0,
        )
        .unwrap();
        assert!((tr.rate - 0.06).abs() < 1e-15);
        assert!(tr.tail_bound <= 0.05 * (1.0 + 1e-12));
        // Off-grid beta is an error, not an interpolation.
        assert!(matches!(
            choose_truncation(
                &v2,
                0.05,
                1e-3,
                DecayEvidence::Lmgf {
                    curve: &curve,
                    beta: -0.5
                },
                1.0
            ),
            Err(Error::NotOnGrid(_))
        ));
        // Wrong evidence kind.
        assert!(choose_truncation(&v2, 0.05, 1e-3, DecayEvidence::None, 1.0).is_err());

        let fit = DecayFit {
            points: vec![],
            rate: 0.8,
            rate_stderr: 0.1,
            rate_ci: (0.6, 1.0),
            prefactor: 1.0,
            r_squared: 0.99,
            warnings: vec![],
        };
        let v3 = verdict(CaseLabel::Case3, -0.1, Some(0.1));
        let tr = choose_truncation(&v3, 0.01, 1e-3, DecayEvidence::Mixing(&fit), 2.0).unwrap();
        assert!((tr.rate - 0.7).abs() < 1e-15);

        // Magnitude at or above the mixing rate: divergence risk.
        let v_bad = verdict(CaseLabel::Case3, -0.9, Some(0.9));
        assert!(matches!(
            choose_truncation(&v_bad, 0.01, 1e-3, DecayEvidence::Mixing(&fit), 2.0),
            Err(Error::DivergenceRisk { .. })
        ));
        let v_un = verdict(CaseLabel::Unsupported, 0.0, None);
        assert!(matches!(
            choose_truncation(&v_un, 0.01, 1e-3, DecayEvidence::None, 1.0),
            Err(Error::Refused(_))
        ));
    }

    #[test]
    fn semigroup_zero_split_and_zero_source() {
        let p = problem("0.5", "1");
        let full = solve_fk(&p, &[0.0], 8.0, 0.125, 32, &SolveOptions::default()).unwrap();
        let rep = semigroup_check(&p, &[0.0], 0.0, &full, &SemigroupOptions::default()).unwrap();
        assert_eq!(rep.residual, 0.0);
        assert_eq!(rep.stderr, 0.0);
        assert!(rep.pass);

        let p0 = problem("0.5", "0");
        let full0 = solve_fk(&p0, &[0.0], 8.0, 0.125, 32, &SolveOptions::default()).unwrap();
        let rep0 = semigroup_check(
            &p0,
            &[0.0],
            2.0,
            &full0,
            &SemigroupOptions {
                n_outer: 16,
                ..SemigroupOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rep0.lhs, 0.0);
        assert_eq!(rep0.rhs, 0.0);
        assert!(rep0.pass);
    }

    #[test]
    fn semigroup_splits_constant_and_ou_cases() {
        // Deterministic integrand: the split must reproduce the geometric
        // sum identity to roundoff with zero spread.
        let p = problem("0.5", "1");
        let full = solve_fk(&p, &[0.0], 16.0, 1.0 / 64.0, 16, &SolveOptions::default()).unwrap();
        let rep = semigroup_check(
            &p,
            &[0.0],
            2.0,
            &full,
            &SemigroupOptions {
                n_outer: 8,
                ..SemigroupOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rep.stderr, 0.0);
        assert!(rep.residual < 1e-10, "residual {}", rep.residual);
        assert!(rep.pass);

        // Statistical case.
        let p = problem("0.1", "x");
        let opts = SolveOptions {
            seed: 5,
            ..SolveOptions::default()
        };
        let full = solve_fk(&p, &[1.0], 12.0, 1.0 / 64.0, 2000, &opts).unwrap();
        let rep = semigroup_check(
            &p,
            &[1.0],
            1.0,
            &full,
            &SemigroupOptions {
                n_outer: 300,
                seed: 5,
                ..SemigroupOptions::default()
            },
        )
        .unwrap();
        assert!(
            rep.pass,
            "residual {} vs stderr {}",
            rep.residual, rep.stderr
        );
        assert!(rep.residual < 0.1);

        // Budget guard.
        assert!(matches!(
            semigroup_check(
                &p,
                &[1.0],
                1.0,
                &full,
                &SemigroupOptions {
                    n_outer: 300,
                    max_step_budget: 1000,
                    ..SemigroupOptions::default()
                }
            ),
            Err(Error::BudgetExceeded(_))
        ));
    }

    #[test]
    fn dirichlet_ball_with_analytic_boundary() {
        // u(y) = y/1.1 solves the global problem; the stopped representation
        // evaluated with that boundary must agree at interior points.
        let p = problem("0.1", "x");
        let opts = SolveOptions {
            seed: 13,
            ..SolveOptions::default()
        };
        let reference = solve_fk(&p, &[0.5], 12.0, 1.0 / 256.0, 3000, &opts).unwrap();
        let boundary = BoundaryValues::Analytic(Expression::parse("x/1.1", 1).unwrap());
        let rep = dirichlet_crosscheck(
            &p,
            &[0.0],
            1.0,
            &[0.5],
            1.0 / 256.0,
            3000,
            &boundary,
            &reference,
            &DirichletOptions {
                seed: 14,
                ..DirichletOptions::default()
            },
        )
        .unwrap();
        assert_eq!(rep.n_no_exit, 0);
        assert!(
            (rep.value - 0.5 / 1.1).abs() < 3.0 * rep.stderr + 0.01,
            "value {} stderr {}",
            rep.value,
            rep.stderr
        );
        assert!(rep.pass, "residual {} vs {}", rep.residual, rep.combined_stderr);

        // Zero source, zero boundary: exactly zero.
        let p0 = problem("0.1", "0");
        let ref0 = solve_fk(&p0, &[0.5], 4.0, 0.125, 16, &SolveOptions::default()).unwrap();
        let rep0 = dirichlet_crosscheck(
            &p0,
            &[0.0],
            1.0,
            &[0.5],
            0.125,
            16,
            &BoundaryValues::Analytic(Expression::constant(0.0, 1)),
            &ref0,
            &DirichletOptions::default(),
        )
        .unwrap();
        assert_eq!(rep0.value, 0.0);
        assert_eq!(rep0.stderr, 0.0);

        // Starting outside the ball is rejected.
        assert!(dirichlet_crosscheck(
            &p,
            &[0.0],
            1.0,
            &[1.5],
            0.125,
            16,
            &boundary,
            &reference,
            &DirichletOptions::default()
        )
        .is_err());
    }

    #[test]
    fn growth_scan_envelopes() {
        let points: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        // u = x/1.1 against gamma = 0.5: envelope peaks at |x| = 2, interior.
        let p = problem("0.1", "x");
        let opts = SolveOptions {
            seed: 4,
            ..SolveOptions::default()
        };
        let rep = growth_scan(&p, &points, 0.5, 10.0, 1.0 / 64.0, 500, &opts).unwrap();
        assert!(rep.pass, "c at edge: {:?}", rep.values);
        assert!(
            (rep.c_fitted - 2.0 / 1.1 * (-1.0_f64).exp()).abs() < 0.1,
            "{}",
            rep.c_fitted
        );
        assert!(rep.log_slope.is_some());

        // gamma = 0 sees the raw |u|, which grows to the scan edge.
        let rep0 = growth_scan(&p, &points, 0.0, 10.0, 1.0 / 64.0, 500, &opts).unwrap();
        assert!(!rep0.pass);
        assert!(rep0.envelope_at_edge);

        // Constant solution: envelope peaks at the origin for any gamma > 0.
        let pc = problem("0.5", "1");
        let repc = growth_scan(&pc, &points, 0.25, 10.0, 1.0 / 64.0, 50, &opts).unwrap();
        assert!(repc.pass);
        assert!((repc.c_fitted - 2.0).abs() < 0.05);

        // Unordered points are rejected.
        let bad = vec![vec![2.0], vec![1.0]];
        assert!(growth_scan(&p, &bad, 0.5, 10.0, 1.0 / 64.0, 50, &opts).is_err());
    }

    #[test]
    fn centering_of_odd_solution() {
        let inv_opts = InvariantOptions {
            total_time: 300.0,
            dt: 2e-3,
            seed: 21,
            ..InvariantOptions::default()
        };
        let mu = estimate_invariant(&unit_ou_model(), &[0.0], &inv_opts).unwrap();
        let p = problem("-0.05", "x");
        let budget = CenteringBudget {
            n_points: 32,
            n_paths: 800,
            t_end: 6.0,
            dt: 1.0 / 64.0,
            seed: 22,
            guard_radius: 1e6,
            case: CaseLabel::Case3,
            max_step_budget: 2_000_000_000,
        };
        let rep = centering_check(&p, &mu, &budget).unwrap();
        assert_eq!(rep.n_points, 32);
        assert!(
            rep.pass,
            "estimate {} stderr {}",
            rep.estimate, rep.stderr
        );

        // Zero source: exact zero with zero spread.
        let p0 = problem("-0.05", "0");
        let rep0 = centering_check(&p0, &mu, &budget).unwrap();
        assert_eq!(rep0.estimate, 0.0);
        assert_eq!(rep0.stderr, 0.0);
        assert!(rep0.pass);

        // Wrong regime and blown budget are refused.
        let wrong = CenteringBudget {
            case: CaseLabel::Simple,
            ..budget.clone()
        };
        assert!(centering_check(&p, &mu, &wrong).is_err());
        let tiny = CenteringBudget {
            max_step_budget: 10,
            ..budget
        };
        assert!(matches!(
            centering_check(&p, &mu, &tiny),
            Err(Error::BudgetExceeded(_))
        ));
    }

    #[test]
    fn probe_norm_scans_the_sample() {
        let inv_opts = InvariantOptions {
            total_time: 100.0,
            dt: 2e-3,
            seed: 9,
            ..InvariantOptions::default()
        };
        let mu = estimate_invariant(&unit_ou_model(), &[0.0], &inv_opts).unwrap();
        let n = probe_norm(&Expression::parse("tanh(x)", 1).unwrap(), &mu).unwrap();
        assert!(n > 0.9 && n < 1.0, "{n}");
        let nc = probe_norm(&Expression::constant(-3.0, 1), &mu).unwrap();
        assert_eq!(nc, 3.0);
    }
}
