//! Long-run behaviour of the diffusion: stationary-measure sampling and
//! averages, exponential moments, a histogram total-variation mixing proxy,
//! and time-average deviation probabilities. These feed the classifier
//! (mean potential, centering) and the solver's truncation choice
//! (mixing rate).

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::expr::Expression;
use crate::sde::{step_count, DiffusionModel, Stepper};
use crate::stats::{batch_means, linear_fit, log_mean_exp, mean_and_stderr};
use crate::stream::RandomStream;

/// Uniformly weighted positions drawn from one long trajectory: burn-in
/// discarded, then one state kept every `thinning` time units. Kept samples
/// are autocorrelated, so averages report batch-means standard errors.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    dim: usize,
    /// Row-major `len x dim`.
    data: Vec<f64>,
    pub burn_in: f64,
    pub thinning: f64,
    pub total_time: f64,
}

impl EmpiricalMeasure {
    pub fn from_samples(dim: usize, samples: Vec<Vec<f64>>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("empirical measure needs samples".into()));
        }
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Dimension("sample dimension mismatch".into()));
        }
        Ok(EmpiricalMeasure {
            dim,
            data: samples.into_iter().flatten().collect(),
            burn_in: 0.0,
            thinning: 0.0,
            total_time: 0.0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InvariantOptions {
    pub total_time: f64,
    pub burn_in: f64,
    /// Time between kept samples.
    pub thinning: f64,
    pub dt: f64,
    pub seed: u64,
    /// Exceeding this radius is treated as evidence of non-recurrence.
    pub guard_radius: f64,
}

impl Default for InvariantOptions {
    fn default() -> Self {
        InvariantOptions {
            total_time: 1000.0,
            burn_in: 10.0,
            thinning: 0.1,
            dt: 1e-3,
            seed: 1,
            guard_radius: 1e6,
        }
    }
}

/// Stationary-measure sample from a single long trajectory started at `x0`.
/// One trajectory rather than an ensemble: the burn-in cost is paid once and
/// batch means absorb the autocorrelation.
pub fn estimate_invariant(
    model: &DiffusionModel,
    x0: &[f64],
    opts: &InvariantOptions,
) -> Result<EmpiricalMeasure> {
    if x0.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "start point has dimension {}, model has {}",
            x0.len(),
            model.dim()
        )));
    }
    let n_steps = step_count(opts.total_time, opts.dt)?;
    let burn_steps = (opts.burn_in / opts.dt).round() as usize;
    let stride = ((opts.thinning / opts.dt).round() as usize).max(1);
    if opts.burn_in < 0.0 || burn_steps >= n_steps {
        return Err(Error::Config(format!(
            "burn-in {} must lie inside the simulated window {}",
            opts.burn_in, opts.total_time
        )));
    }
    let mut stepper = Stepper::new(model);
    stepper.reset(x0);
    let mut stream = RandomStream::new(opts.seed, 0);
    let sqrt_dt = opts.dt.sqrt();
    let mut data = Vec::new();
    for k in 1..=n_steps {
        stepper
            .advance(opts.dt, sqrt_dt, &mut stream)
            .map_err(Error::Eval)?;
        let r2: f64 = stepper.x().iter().map(|v| v * v).sum();
        if !r2.is_finite() || r2.sqrt() > opts.guard_radius {
            return Err(Error::TrajectoryBlowup {
                t: k as f64 * opts.dt,
                radius: r2.sqrt(),
            });
        }
        if k >= burn_steps && (k - burn_steps) % stride == 0 {
            data.extend_from_slice(stepper.x());
        }
    }
    if data.is_empty() {
        return Err(Error::Config(
            "no samples kept; increase total_time or reduce thinning".into(),
        ));
    }
    Ok(EmpiricalMeasure {
        dim: model.dim(),
        data,
        burn_in: opts.burn_in,
        thinning: opts.thinning,
        total_time: opts.total_time,
    })
}

/// Average of `g` under the empirical measure, with a batch-means standard
/// error (samples from one trajectory are correlated).
pub fn mu_average(measure: &EmpiricalMeasure, g: &Expression) -> Result<(f64, f64)> {
    let compiled = g.compile();
    let mut scratch = crate::expr::EvalScratch::new();
    let mut values = Vec::with_capacity(measure.len());
    for x in measure.iter() {
        values.push(compiled.eval(x, &mut scratch).map_err(Error::Eval)?);
    }
    Ok(batch_means(&values))
}

/// Ensemble simulation knobs shared by the time-indexed diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct EnsembleOptions {
    pub n_paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub guard_radius: f64,
}

impl Default for EnsembleOptions {
    fn default() -> Self {
        EnsembleOptions {
            n_paths: 10_000,
            dt: 1e-3,
            seed: 1,
            guard_radius: 1e6,
        }
    }
}

/// Map requested observation times onto the step grid.
pub(crate) fn checkpoint_steps(times: &[f64], dt: f64) -> Result<Vec<usize>> {
    if times.is_empty() {
        return Err(Error::Config("at least one observation time required".into()));
    }
    let mut steps = Vec::with_capacity(times.len());
    for &t in times {
        let s = step_count(t, dt)?;
        if let Some(&prev) = steps.last() {
            if s <= prev {
                return Err(Error::Config(
                    "observation times must be strictly increasing".into(),
                ));
            }
        }
        steps.push(s);
    }
    Ok(steps)
}

/// Simulate `n_paths` independent paths from `x0` and extract a value per
/// checkpoint. Returns `[path][checkpoint]`, collected in path order so
/// downstream reductions are deterministic regardless of worker count.
/// Positions are guarded (finite, inside `guard_radius`) at checkpoints only.
pub(crate) fn sweep_paths<T, F>(
    model: &DiffusionModel,
    c: &Expression,
    x0: &[f64],
    steps: &[usize],
    opts: &EnsembleOptions,
    extract: F,
) -> Result<Vec<Vec<T>>>
where
    T: Send,
    F: Fn(&[f64], f64) -> T + Sync,
{
    if x0.len() != model.dim() {
        return Err(Error::Dimension(format!(
            "start point has dimension {}, model has {}",
            x0.len(),
            model.dim()
        )));
    }
    if opts.n_paths == 0 {
        return Err(Error::Config("ensemble size must be positive".into()));
    }
    let c_compiled = c.compile();
    let dt = opts.dt;
    let sqrt_dt = dt.sqrt();
    let max_step = *steps.last().unwrap();
    (0..opts.n_paths)
        .into_par_iter()
        .map(|j| {
            let mut stepper = Stepper::new(model);
            stepper.reset(x0);
            let mut stream = RandomStream::new(opts.seed, j as u64);
            let mut a = 0.0;
            let mut out = Vec::with_capacity(steps.len());
            let mut next = 0;
            if steps[0] == 0 {
                out.push(extract(stepper.x(), 0.0));
                next = 1;
            }
            for k in 1..=max_step {
                a += stepper.eval(&c_compiled).map_err(Error::Eval)? * dt;
                stepper.advance(dt, sqrt_dt, &mut stream).map_err(Error::Eval)?;
                if next < steps.len() && k == steps[next] {
                    let r2: f64 = stepper.x().iter().map(|v| v * v).sum();
                    if !r2.is_finite() || r2.sqrt() > opts.guard_radius {
                        return Err(Error::TrajectoryBlowup {
                            t: k as f64 * dt,
                            radius: r2.sqrt(),
                        });
                    }
                    out.push(extract(stepper.x(), a));
                    next += 1;
                }
            }
            Ok(out)
        })
        .collect()
}

/// Monte Carlo curve of the exponential moment E exp(gamma |X_t|).
#[derive(Debug, Clone, Serialize)]
pub struct ExpMomentReport {
    pub gamma: f64,
    pub x0: Vec<f64>,
    pub times: Vec<f64>,
    /// ln E exp(gamma |X_t|); always finite when paths stay finite.
    pub log_values: Vec<f64>,
    /// Plain values; may overflow to infinity (the log stays usable).
    pub values: Vec<f64>,
    pub stderrs: Vec<f64>,
    /// Smallest C with sup_t value <= C exp(gamma |x0|) over the scanned times.
    pub c_fitted: f64,
    /// No statistically significant growth of the log-curve in time.
    pub stabilizing: bool,
    pub warnings: Vec<String>,
}

/// Exponential-moment curve with overflow-safe accumulation. `gamma_guard`
/// rejects exponents the estimator cannot be trusted for (default 0.5).
pub fn exp_moment_curve(
    model: &DiffusionModel,
    gamma: f64,
    x0: &[f64],
    times: &[f64],
    gamma_guard: f64,
    opts: &EnsembleOptions,
) -> Result<ExpMomentReport> {
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("gamma must be positive, got {gamma}")));
    }
    if gamma > gamma_guard {
        return Err(Error::Config(format!(
            "gamma = {gamma} exceeds the guard {gamma_guard}; raise the guard explicitly to probe harder exponents"
        )));
    }
    let steps = checkpoint_steps(times, opts.dt)?;
    let zero_c = Expression::constant(0.0, model.dim());
    let per_path = sweep_paths(model, &zero_c, x0, &steps, opts, |x, _a| {
        gamma * x.iter().map(|v| v * v).sum::<f64>().sqrt()
    })?;

    let n = opts.n_paths;
    let mut log_values = Vec::with_capacity(times.len());
    let mut values = Vec::with_capacity(times.len());
    let mut stderrs = Vec::with_capacity(times.len());
    let mut w = vec![0.0; n];
    for ti in 0..times.len() {
        for (j, row) in per_path.iter().enumerate() {
            w[j] = row[ti];
        }
        let lv = log_mean_exp(&w);
        log_values.push(lv);
        values.push(lv.exp());
        // Delta-method error on the shifted scale e^{w-m}: the reported
        // stderr is for the plain value and may overflow with it.
        let m = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let shifted: Vec<f64> = w.iter().map(|&v| (v - m).exp()).collect();
        let (_, se_shifted) = mean_and_stderr(&shifted);
        stderrs.push(m.exp() * se_shifted);
    }

    let mut warnings = Vec::new();
    let scale = (gamma * x0.iter().map(|v| v * v).sum::<f64>().sqrt()).exp();
    let c_fitted = values.iter().cloned().fold(0.0_f64, f64::max) / scale;
    let stabilizing = match linear_fit(times, &log_values) {
        Some(fit) => fit.slope <= 2.0 * fit.se_slope,
        None => {
            warnings.push("too few times to test stabilization".into());
            true
        }
    };
    if !stabilizing {
        warnings.push("log exponential moment still growing at the largest time".into());
    }
    Ok(ExpMomentReport {
        gamma,
        x0: x0.to_vec(),
        times: times.to_vec(),
        log_values,
        values,
        stderrs,
        c_fitted,
        stabilizing,
        warnings,
    })
}

/// One observation of a decaying quantity.
#[derive(Debug, Clone, Serialize)]
pub struct DecayPoint {
    pub t: f64,
    pub value: f64,
    pub stderr: f64,
    /// Resolution floor at this time; values at or below it are censored.
    pub floor: f64,
    pub censored: bool,
    pub used_in_fit: bool,
}

/// Exponential-decay fit `value ~ prefactor * exp(-rate * t)` on the usable
/// (positive, uncensored, unsaturated) points.
#[derive(Debug, Clone, Serialize)]
pub struct DecayFit {
    pub points: Vec<DecayPoint>,
    /// Fitted rate, clamped to be nonnegative.
    pub rate: f64,
    pub rate_stderr: f64,
    /// 95% normal interval for the rate before clamping.
    pub rate_ci: (f64, f64),
    pub prefactor: f64,
    pub r_squared: f64,
    pub warnings: Vec<String>,
}

/// Saturated values carry no decay information; everything at or above this
/// is left out of the fit.
const FIT_SATURATION: f64 = 0.95;

fn fit_decay(mut points: Vec<DecayPoint>, mut warnings: Vec<String>) -> DecayFit {
    let mut ts = Vec::new();
    let mut logs = Vec::new();
    for p in points.iter_mut() {
        let usable = !p.censored && p.value > p.floor && p.value < FIT_SATURATION;
        p.used_in_fit = usable;
        if usable {
            ts.push(p.t);
            logs.push(p.value.ln());
        }
    }
    if ts.len() < points.len() {
        warnings.push(format!(
            "{} of {} points censored or saturated, excluded from the fit",
            points.len() - ts.len(),
            points.len()
        ));
    }
    match linear_fit(&ts, &logs) {
        Some(fit) => {
            let raw_rate = -fit.slope;
            if raw_rate < 0.0 {
                warnings.push("fitted rate was negative; clamped to 0".into());
            }
            DecayFit {
                points,
                rate: raw_rate.max(0.0),
                rate_stderr: fit.se_slope,
                rate_ci: (raw_rate - 1.96 * fit.se_slope, raw_rate + 1.96 * fit.se_slope),
                prefactor: fit.intercept.exp(),
                r_squared: fit.r_squared,
                warnings,
            }
        }
        None => {
            warnings.push("fewer than two usable points; no decay fit".into());
            DecayFit {
                points,
                rate: 0.0,
                rate_stderr: f64::INFINITY,
                rate_ci: (f64::NEG_INFINITY, f64::INFINITY),
                prefactor: f64::NAN,
                r_squared: 0.0,
                warnings,
            }
        }
    }
}

/// Sparse common-partition histogram over integer cell indices.
fn tv_between(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    dim: usize,
    bins_override: Option<usize>,
) -> (f64, f64, f64, usize) {
    use std::collections::BTreeMap;
    let n = a.len();
    let m = 2 * n;
    // Per-dimension widths from Freedman-Diaconis on the pooled sample
    // (a common partition is required for a meaningful TV estimate).
    let mut origins = vec![0.0; dim];
    let mut widths = vec![0.0; dim];
    for k in 0..dim {
        let mut pooled: Vec<f64> = a.iter().chain(b.iter()).map(|x| x[k]).collect();
        pooled.sort_by(|p, q| p.partial_cmp(q).unwrap());
        let lo = pooled[0];
        let hi = pooled[m - 1];
        origins[k] = lo;
        widths[k] = match bins_override {
            Some(bins) => (hi - lo) / bins as f64,
            None => {
                let iqr = pooled[(3 * m) / 4] - pooled[m / 4];
                2.0 * iqr / (m as f64).cbrt()
            }
        };
    }
    let cell = |x: &[f64]| -> Vec<i64> {
        (0..dim)
            .map(|k| {
                if widths[k] > 0.0 {
                    ((x[k] - origins[k]) / widths[k]).floor() as i64
                } else {
                    0
                }
            })
            .collect()
    };
    let mut counts: BTreeMap<Vec<i64>, (u64, u64)> = BTreeMap::new();
    for x in a {
        counts.entry(cell(x)).or_default().0 += 1;
    }
    for x in b {
        counts.entry(cell(x)).or_default().1 += 1;
    }
    let occupied = counts.len();
    let nf = n as f64;
    let mut tv = 0.0;
    let mut var = 0.0;
    for (p_cnt, q_cnt) in counts.values() {
        let p = *p_cnt as f64 / nf;
        let q = *q_cnt as f64 / nf;
        tv += (p - q).abs();
        var += (p * (1.0 - p) + q * (1.0 - q)) / nf;
    }
    tv *= 0.5;
    let stderr = var.sqrt() / 2.0;
    // Expected TV of two samples from identical laws scales like
    // sqrt(K / (pi n)) for K occupied cells; below that the signal is noise.
    let floor = (occupied as f64 / (std::f64::consts::PI * nf)).sqrt();
    (tv, stderr, floor, occupied)
}

/// Histogram total-variation distance between the time-t laws started from
/// two points, with an exponential-decay fit over the usable times.
pub fn tv_mixing_decay(
    model: &DiffusionModel,
    x0: &[f64],
    x0_alt: &[f64],
    times: &[f64],
    bins: Option<usize>,
    opts: &EnsembleOptions,
) -> Result<DecayFit> {
    let steps = checkpoint_steps(times, opts.dt)?;
    let zero_c = Expression::constant(0.0, model.dim());
    let snap = |x: &[f64], _a: f64| x.to_vec();
    let ens_a = sweep_paths(model, &zero_c, x0, &steps, opts, snap)?;
    let alt_opts = EnsembleOptions {
        // Independent noise for the second ensemble.
        seed: crate::stream::derived_seed(opts.seed, &[0x7601]),
        ..opts.clone()
    };
    let ens_b = sweep_paths(model, &zero_c, x0_alt, &steps, &alt_opts, snap)?;

    let dim = model.dim();
    let n = opts.n_paths;
    let mut warnings = Vec::new();
    let mut points = Vec::with_capacity(times.len());
    let mut a_t: Vec<Vec<f64>> = vec![Vec::with_capacity(dim); n];
    let mut b_t: Vec<Vec<f64>> = vec![Vec::with_capacity(dim); n];
    for (ti, &t) in times.iter().enumerate() {
        for j in 0..n {
            a_t[j] = ens_a[j][ti].clone();
            b_t[j] = ens_b[j][ti].clone();
        }
        let (tv, stderr, floor, occupied) = tv_between(&a_t, &b_t, dim, bins);
        if occupied > 0 && (2 * n) / occupied < 5 {
            warnings.push(format!(
                "t = {t}: under 5 samples per occupied bin on average ({occupied} bins)"
            ));
        }
        points.push(DecayPoint {
            t,
            value: tv,
            stderr,
            // Censor when indistinguishable from the identical-law noise level.
            floor: 2.0 * floor,
            censored: tv <= 2.0 * floor,
            used_in_fit: false,
        });
    }
    Ok(fit_decay(points, warnings))
}

/// Lower and upper deviation probabilities of the running time-average of a
/// potential around its stationary mean.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationReport {
    pub c_bar: f64,
    pub delta: f64,
    /// P(average < c_bar - delta) per time.
    pub lower: DecayFit,
    /// P(average > c_bar + delta) per time.
    pub upper: DecayFit,
}

/// Deviation probabilities of t^{-1} int_0^t c(X_s) ds from `c_bar` by at
/// least `delta`, each side fitted for exponential decay. Zero-hit
/// estimates are censored at 1/n and excluded from fits.
pub fn deviation_prob(
    model: &DiffusionModel,
    c: &Expression,
    x0: &[f64],
    c_bar: f64,
    delta: f64,
    times: &[f64],
    opts: &EnsembleOptions,
) -> Result<DeviationReport> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("delta must be positive, got {delta}")));
    }
    if times.iter().any(|&t| t <= 0.0) {
        return Err(Error::Config(
            "deviation probabilities need strictly positive times".into(),
        ));
    }
    let steps = checkpoint_steps(times, opts.dt)?;
    let per_path = sweep_paths(model, c, x0, &steps, opts, |_x, a| a)?;

    let n = opts.n_paths as f64;
    let mut lower_points = Vec::with_capacity(times.len());
    let mut upper_points = Vec::with_capacity(times.len());
    for (ti, &t) in times.iter().enumerate() {
        let mut below = 0u64;
        let mut above = 0u64;
        for row in &per_path {
            let avg = row[ti] / t;
            if avg < c_bar - delta {
                below += 1;
            }
            if avg > c_bar + delta {
                above += 1;
            }
        }
        for (hits, out) in [(below, &mut lower_points), (above, &mut upper_points)] {
            let p = hits as f64 / n;
            out.push(DecayPoint {
                t,
                value: p,
                stderr: (p * (1.0 - p) / n).sqrt(),
                floor: 1.0 / n,
                censored: hits == 0,
                used_in_fit: false,
            });
        }
    }
    Ok(DeviationReport {
        c_bar,
        delta,
        lower: fit_decay(lower_points, Vec::new()),
        upper: fit_decay(upper_points, Vec::new()),
    })
}
