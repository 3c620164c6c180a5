//! Path simulation for the underlying diffusion.
//!
//! The state follows the explicit Euler scheme
//! `x' = x + b(x) dt + sigma(x) sqrt(dt) xi` with `xi` a vector of
//! independent standard normals, and the running potential integral is
//! accumulated by the left-endpoint rule `A' = A + c(x) dt`, matching the
//! discounted path integral the solver accumulates. Per step, the noise
//! coordinates are drawn from the stream in order, so a path is a pure
//! function of `(seed, path_index)`.

use crate::error::{Error, EvalError, Result};
use crate::expr::{CompiledExpr, EvalScratch, Expression};
use crate::stream::{NoiseSource, RandomStream};

/// Time-homogeneous diffusion with expression-valued coefficients.
/// Compiled forms are cached at construction; constant diffusion rows are
/// detected and skipped in the stepping loop.
#[derive(Debug, Clone)]
pub struct DiffusionModel {
    dim: usize,
    noise_dim: usize,
    drift: Vec<Expression>,
    sigma: Vec<Expression>,
    compiled_drift: Vec<CompiledExpr>,
    compiled_sigma: Vec<CompiledExpr>,
    /// Row-major `dim x noise_dim` values when every entry is constant.
    sigma_const: Option<Vec<f64>>,
}

impl DiffusionModel {
    /// `drift` has one entry per coordinate; `sigma` is a `dim x noise_dim`
    /// matrix given by rows. All expressions must use the same dimension.
    pub fn new(drift: Vec<Expression>, sigma: Vec<Vec<Expression>>) -> Result<Self> {
        let dim = drift.len();
        if dim == 0 {
            return Err(Error::Dimension("drift must have at least one entry".into()));
        }
        if sigma.len() != dim {
            return Err(Error::Dimension(format!(
                "sigma has {} rows, expected {dim}",
                sigma.len()
            )));
        }
        let noise_dim = sigma[0].len();
        if noise_dim == 0 {
            return Err(Error::Dimension("sigma must have at least one column".into()));
        }
        if sigma.iter().any(|row| row.len() != noise_dim) {
            return Err(Error::Dimension("sigma rows have unequal lengths".into()));
        }
        for e in drift.iter().chain(sigma.iter().flatten()) {
            if e.dim() != dim {
                return Err(Error::Dimension(format!(
                    "coefficient `{e}` is written in dimension {}, model has {dim}",
                    e.dim()
                )));
            }
        }
        let sigma: Vec<Expression> = sigma.into_iter().flatten().collect();
        let compiled_drift: Vec<CompiledExpr> = drift.iter().map(|e| e.compile()).collect();
        let compiled_sigma: Vec<CompiledExpr> = sigma.iter().map(|e| e.compile()).collect();
        let sigma_const = compiled_sigma
            .iter()
            .map(|c| c.as_constant())
            .collect::<Option<Vec<f64>>>();
        Ok(DiffusionModel {
            dim,
            noise_dim,
            drift,
            sigma,
            compiled_drift,
            compiled_sigma,
            sigma_const,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn drift(&self) -> &[Expression] {
        &self.drift
    }

    /// Row-major `dim x noise_dim` diffusion entries.
    pub fn sigma(&self) -> &[Expression] {
        &self.sigma
    }

    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.drift.iter().map(|e| e.evaluate(x)).collect()
    }

    /// Row-major `dim x noise_dim` diffusion matrix at `x`.
    pub fn sigma_at(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.sigma.iter().map(|e| e.evaluate(x)).collect()
    }
}

/// Position, time, and the running left-endpoint potential integral.
#[derive(Debug, Clone, PartialEq)]
pub struct PathState {
    pub t: f64,
    pub x: Vec<f64>,
    /// Integral of the potential along the path up to `t`.
    pub potential_integral: f64,
}

impl PathState {
    pub fn start(x0: &[f64]) -> Self {
        PathState {
            t: 0.0,
            x: x0.to_vec(),
            potential_integral: 0.0,
        }
    }
}

/// Reusable stepping engine: borrows the model's compiled coefficients and
/// owns the per-path buffers, so a long simulation allocates once.
pub struct Stepper<'m> {
    model: &'m DiffusionModel,
    x: Vec<f64>,
    x_next: Vec<f64>,
    bx: Vec<f64>,
    xi: Vec<f64>,
    scratch: EvalScratch,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m DiffusionModel) -> Self {
        Stepper {
            model,
            x: vec![0.0; model.dim],
            x_next: vec![0.0; model.dim],
            bx: vec![0.0; model.dim],
            xi: vec![0.0; model.noise_dim],
            scratch: EvalScratch::new(),
        }
    }

    pub fn reset(&mut self, x0: &[f64]) {
        self.x.copy_from_slice(x0);
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    /// Evaluate a compiled coefficient at the current position.
    #[inline]
    pub fn eval(&mut self, e: &CompiledExpr) -> std::result::Result<f64, EvalError> {
        e.eval(&self.x, &mut self.scratch)
    }

    /// One Euler move. `sqrt_dt` is passed in so the caller fixes it once.
    #[inline]
    pub fn advance<R: NoiseSource>(
        &mut self,
        dt: f64,
        sqrt_dt: f64,
        stream: &mut R,
    ) -> std::result::Result<(), EvalError> {
        let d = self.model.dim;
        let m = self.model.noise_dim;
        for i in 0..d {
            self.bx[i] = self.model.compiled_drift[i].eval(&self.x, &mut self.scratch)?;
        }
        for j in 0..m {
            self.xi[j] = stream.normal();
        }
        match &self.model.sigma_const {
            Some(s) => {
                for i in 0..d {
                    let mut noise = 0.0;
                    for j in 0..m {
                        noise += s[i * m + j] * self.xi[j];
                    }
                    self.x_next[i] = self.x[i] + self.bx[i] * dt + sqrt_dt * noise;
                }
            }
            None => {
                for i in 0..d {
                    let mut noise = 0.0;
                    for j in 0..m {
                        let s = self.model.compiled_sigma[i * m + j]
                            .eval(&self.x, &mut self.scratch)?;
                        noise += s * self.xi[j];
                    }
                    self.x_next[i] = self.x[i] + self.bx[i] * dt + sqrt_dt * noise;
                }
            }
        }
        std::mem::swap(&mut self.x, &mut self.x_next);
        Ok(())
    }
}

/// Number of steps covering `[0, t_end]`; `dt` must divide `t_end`.
pub(crate) fn step_count(t_end: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) {
        return Err(Error::Config(format!("dt must be positive, got {dt}")));
    }
    if t_end < 0.0 {
        return Err(Error::Config(format!("horizon must be >= 0, got {t_end}")));
    }
    let n = (t_end / dt).round();
    if ((n * dt) - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(Error::Config(format!(
            "dt = {dt} does not divide the horizon {t_end}"
        )));
    }
    Ok(n as usize)
}

/// One functional Euler step: a fresh state with `t' = t + dt`,
/// `A' = A + c(x) dt` evaluated at the departing position.
pub fn step(
    model: &DiffusionModel,
    c: &Expression,
    state: &PathState,
    dt: f64,
    stream: &mut RandomStream,
) -> Result<PathState> {
    let mut stepper = Stepper::new(model);
    stepper.reset(&state.x);
    let c_here = c.evaluate(&state.x)?;
    stepper.advance(dt, dt.sqrt(), stream)?;
    Ok(PathState {
        t: state.t + dt,
        x: stepper.x().to_vec(),
        potential_integral: state.potential_integral + c_here * dt,
    })
}

/// States at `0, dt, 2dt, ..., t_end` with the running potential integral.
pub fn simulate_path(
    model: &DiffusionModel,
    c: &Expression,
    x0: &[f64],
    dt: f64,
    t_end: f64,
    stream: &mut RandomStream,
) -> Result<Vec<PathState>> {
    let n = step_count(t_end, dt)?;
    let c_compiled = c.compile();
    let sqrt_dt = dt.sqrt();
    let mut stepper = Stepper::new(model);
    stepper.reset(x0);
    let mut out = Vec::with_capacity(n + 1);
    out.push(PathState::start(x0));
    let mut a = 0.0;
    for k in 0..n {
        a += stepper.eval(&c_compiled)? * dt;
        stepper.advance(dt, sqrt_dt, stream)?;
        out.push(PathState {
            t: (k + 1) as f64 * dt,
            x: stepper.x().to_vec(),
            potential_integral: a,
        });
    }
    Ok(out)
}

/// Result of running a path until it leaves a ball (or the clock runs out).
#[derive(Debug, Clone)]
pub struct ExitReport {
    /// State at the first grid time outside the ball, or at `t_max`.
    pub state: PathState,
    pub exited: bool,
    /// Distance beyond the boundary at detection; exits are only observed
    /// at grid times, so this is the discretization overshoot.
    pub overshoot: f64,
}

fn dist(x: &[f64], center: &[f64]) -> f64 {
    x.iter()
        .zip(center)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// First grid time at which the path leaves the open ball
/// `|x - center| < radius`. The start must lie inside.
pub fn first_exit(
    model: &DiffusionModel,
    c: &Expression,
    x0: &[f64],
    center: &[f64],
    radius: f64,
    dt: f64,
    t_max: f64,
    stream: &mut RandomStream,
) -> Result<ExitReport> {
    if x0.len() != model.dim || center.len() != model.dim {
        return Err(Error::Dimension(
            "start and center must match the model dimension".into(),
        ));
    }
    if dist(x0, center) >= radius {
        return Err(Error::Config(format!(
            "start lies outside the ball: |x0 - center| = {} >= {radius}",
            dist(x0, center)
        )));
    }
    let n = step_count(t_max, dt)?;
    let c_compiled = c.compile();
    let sqrt_dt = dt.sqrt();
    let mut stepper = Stepper::new(model);
    stepper.reset(x0);
    let mut a = 0.0;
    for k in 0..n {
        a += stepper.eval(&c_compiled)? * dt;
        stepper.advance(dt, sqrt_dt, stream)?;
        let t = (k + 1) as f64 * dt;
        let r = dist(stepper.x(), center);
        if r >= radius {
            return Ok(ExitReport {
                state: PathState {
                    t,
                    x: stepper.x().to_vec(),
                    potential_integral: a,
                },
                exited: true,
                overshoot: r - radius,
            });
        }
    }
    Ok(ExitReport {
        state: PathState {
            t: n as f64 * dt,
            x: stepper.x().to_vec(),
            potential_integral: a,
        },
        exited: false,
        overshoot: 0.0,
    })
}

/// The standard mean-reverting test model `b = -x`, `sigma = sqrt(2)`
/// (stationary law: standard normal). Used across the test suites.
pub fn unit_ou_model() -> DiffusionModel {
    DiffusionModel::new(
        vec![Expression::parse("-x", 1).unwrap()],
        vec![vec![Expression::parse("sqrt(2)", 1).unwrap()]],
    )
    .unwrap()
}
