//! Per-point, per-class confidence intervals over a spreading session.
//!
//! Wilson intervals treat the floored scores as virtual binomial counts.
//! Hoeffding intervals bound the sampling deviation of the weighted estimate
//! and add a Lipschitz bias bound.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::SpreadSession;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    Wilson,
    Hoeffding,
}

impl CiMethod {
    pub fn name(self) -> &'static str {
        match self {
            CiMethod::Wilson => "wilson",
            CiMethod::Hoeffding => "hoeffding",
        }
    }
}

impl std::str::FromStr for CiMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wilson" => Ok(CiMethod::Wilson),
            "hoeffding" => Ok(CiMethod::Hoeffding),
            other => Err(Error::InvalidArgument(format!("unknown interval method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub method: CiMethod,
    /// Nominal coverage, `1 - delta` for Hoeffding; for Wilson the z value is reported instead.
    pub level: f64,
    /// Set when the interval is the vacuous `[0, 1]` because nothing was received.
    pub vacuous: bool,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, p: f64) -> bool {
        self.lower <= p && p <= self.upper
    }

    fn clipped(lower: f64, upper: f64, method: CiMethod, level: f64) -> Self {
        Self {
            lower: lower.clamp(0.0, 1.0),
            upper: upper.clamp(0.0, 1.0),
            method,
            level,
            vacuous: false,
        }
    }

    fn full(method: CiMethod, level: f64) -> Self {
        Self {
            lower: 0.0,
            upper: 1.0,
            method,
            level,
            vacuous: true,
        }
    }
}

/// Wilson score interval for `successes` out of `trials` at critical value `z`.
pub fn wilson_interval(successes: f64, trials: f64, z: f64) -> (f64, f64) {
    if trials <= 0.0 {
        return (0.0, 1.0);
    }
    let z2 = z * z;
    let denom = trials + z2;
    let center = (successes + z2 / 2.0) / denom;
    let half = z * (successes * (trials - successes) / trials + z2 / 4.0).sqrt() / denom;
    ((center - half).clamp(0.0, 1.0), (center + half).clamp(0.0, 1.0))
}

/// Wilson interval over `floor(Y_q^c)` successes in `floor(N_q)` virtual trials.
pub fn wilson_ci(session: &SpreadSession, q: usize, c: usize, z: f64) -> Result<ConfidenceInterval> {
    check_index(session, q, c)?;
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::InvalidArgument(format!("z must be positive, got {z}")));
    }
    let trials = session.received()[q].floor();
    if trials == 0.0 {
        return Ok(ConfidenceInterval::full(CiMethod::Wilson, z));
    }
    // Y^c <= N elementwise, but floor(Y^c) can exceed floor(N) only through round-off.
    let successes = session.class_scores(c)[q].floor().min(trials);
    let (lower, upper) = wilson_interval(successes, trials, z);
    Ok(ConfidenceInterval::clipped(lower, upper, CiMethod::Wilson, z))
}

/// Smallest `eps` with `2 exp(-2 eps^2 / s) <= delta`, where `s` is the sum of
/// squared normalized weights.
pub fn hoeffding_epsilon(sum_sq_weights: f64, delta: f64) -> f64 {
    (sum_sq_weights * (2.0 / delta).ln() / 2.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoeffdingParams {
    pub delta: f64,
    /// Split `delta` evenly over the classes (union bound).
    pub union_bound: bool,
}

/// Interval `p_hat +- (eps_0 + B)` with `eps_0` from Hoeffding's inequality on
/// the weights `phi / N_q` and `B = B_acc / N_q` the Lipschitz bias bound.
pub fn hoeffding_ci(
    session: &SpreadSession,
    q: usize,
    c: usize,
    params: HoeffdingParams,
) -> Result<ConfidenceInterval> {
    check_index(session, q, c)?;
    let delta = params.delta;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {delta}")));
    }
    let bias = session.bias_scores().ok_or_else(|| {
        Error::InvalidArgument("Hoeffding intervals need a Lipschitz constant configured on the session".into())
    })?;
    let level = 1.0 - delta;
    let total = session.received()[q];
    if total <= 0.0 {
        return Ok(ConfidenceInterval::full(CiMethod::Hoeffding, level));
    }
    let delta = if params.union_bound {
        delta / session.classes() as f64
    } else {
        delta
    };
    let eps = hoeffding_epsilon(session.squared_scores()[q] / (total * total), delta);
    let b = bias[q] / total;
    let p = session.class_scores(c)[q] / total;
    Ok(ConfidenceInterval::clipped(p - eps - b, p + eps + b, CiMethod::Hoeffding, level))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CiLevel {
    Wilson { z: f64 },
    Hoeffding(HoeffdingParams),
}

impl CiLevel {
    pub fn method(&self) -> CiMethod {
        match self {
            CiLevel::Wilson { .. } => CiMethod::Wilson,
            CiLevel::Hoeffding(_) => CiMethod::Hoeffding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CiRow {
    pub point: usize,
    pub class: usize,
    pub interval: ConfidenceInterval,
}

/// Intervals for every `(point, class)` pair, point-major.
pub fn ci_report(session: &SpreadSession, level: CiLevel) -> Result<Vec<CiRow>> {
    let mut rows = Vec::with_capacity(session.len() * session.classes());
    for point in 0..session.len() {
        for class in 0..session.classes() {
            let interval = match level {
                CiLevel::Wilson { z } => wilson_ci(session, point, class, z)?,
                CiLevel::Hoeffding(params) => hoeffding_ci(session, point, class, params)?,
            };
            rows.push(CiRow { point, class, interval });
        }
    }
    Ok(rows)
}

fn check_index(session: &SpreadSession, q: usize, c: usize) -> Result<()> {
    if q >= session.len() {
        return Err(Error::OutOfRange {
            index: q,
            size: session.len(),
        });
    }
    if c >= session.classes() {
        return Err(Error::OutOfRange {
            index: c,
            size: session.classes(),
        });
    }
    Ok(())
}
