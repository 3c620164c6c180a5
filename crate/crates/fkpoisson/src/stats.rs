//! Shared numerical helpers: stable log-sum-exp, online moments,
//! batch-means standard errors for correlated samples, and ordinary
//! least squares for exponential-decay fits.

/// log(sum(exp(x))) with max subtraction. Empty input and all `-inf`
/// give `-inf`; any `+inf` gives `+inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    max + sum.ln()
}

/// log(mean(exp(x))). Exact (no rounding at all) when every entry is the
/// same value, which keeps deterministic-integrand expectations exact.
pub fn log_mean_exp(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NEG_INFINITY;
    }
    let first = xs[0];
    if xs.iter().all(|&x| x == first) {
        return first;
    }
    let mut max = f64::NEG_INFINITY;
    for &x in xs {
        if x > max {
            max = x;
        }
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let mut sum = 0.0;
    for &x in xs {
        sum += (x - max).exp();
    }
    max + (sum / xs.len() as f64).ln()
}

/// Welford online mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningStats {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; 0 for fewer than two samples.
    pub fn sample_variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn stddev(&self) -> f64 {
        self.sample_variance().sqrt()
    }

    /// Standard error of the mean under independent sampling.
    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.sample_variance() / self.n as f64).sqrt()
        }
    }
}

pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let mut s = RunningStats::new();
    for &x in xs {
        s.push(x);
    }
    (s.mean(), s.stderr())
}

/// Mean and standard error of a time-ordered, autocorrelated sample via
/// non-overlapping batch means: `B = floor(sqrt(M))` batches of equal
/// length (a short tail beyond `B*L` is dropped). The batch count is
/// clamped to at least 2 so the error is defined.
pub fn batch_means(xs: &[f64]) -> (f64, f64) {
    let m = xs.len();
    if m < 4 {
        return mean_and_stderr(xs);
    }
    let b = ((m as f64).sqrt().floor() as usize).max(2);
    let l = m / b;
    let mut batches = RunningStats::new();
    for k in 0..b {
        let slice = &xs[k * l..(k + 1) * l];
        let mean = slice.iter().sum::<f64>() / l as f64;
        batches.push(mean);
    }
    (batches.mean(), batches.stderr())
}

/// Ordinary least squares for `y = intercept + slope * x`.
#[derive(Debug, Clone, Copy)]
pub struct LinFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope (infinite when fewer than 3 points).
    pub se_slope: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// `None` when fewer than 2 points or degenerate abscissae.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Option<LinFit> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for i in 0..n {
        let dx = xs[i] - mx;
        let dy = ys[i] - my;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr = (syy - slope * sxy).max(0.0);
    let se_slope = if n > 2 {
        (ssr / (n - 2) as f64 / sxx).sqrt()
    } else {
        f64::INFINITY
    };
    let r_squared = if syy == 0.0 { 1.0 } else { 1.0 - ssr / syy };
    Some(LinFit {
        slope,
        intercept,
        se_slope,
        r_squared,
        n,
    })
}
