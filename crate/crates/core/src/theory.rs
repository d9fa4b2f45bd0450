//! Rate schedules coupling spreading intensity, graph bandwidth and budget to
//! the dataset size, and an empirical harness for the resulting consistency
//! behaviour on unit-weight bandwidth graphs.
//!
//! With `alpha_n = 1 - n^{-1/(d+1)}`, path length `l_n = ceil(log_{alpha_n} eps)`
//! and bandwidth `h_n = eps / l_n`, any node farther than `eps` from a seed is
//! at least `l_n` hops away, so the random-walk heat kernel (scaled by
//! `1 - alpha_n`) puts at most `alpha_n^{l_n} < eps` of its mass there. The
//! budget `m_n ~ n^{1 - 1/(2(d+1))} log n` is what the concentration
//! arguments require; its constant is unknown and exposed as `kappa`.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{build_epsilon_graph, normalize, Normalization};
use crate::metrics::{kl_divergence, rmse, DEFAULT_KL_FLOOR};
use crate::session::SoftLabelEstimate;
use crate::sim::{make_sine_1d, rng_stream, FeedbackOracle};
use crate::solver::{solve_combination, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    /// `l_n = ceil(log_alpha eps)`, `h_n = eps / l_n`.
    #[default]
    ProofBody,
    /// `l_n = ceil(log_alpha (eps / (12 sqrt 2)))`, `h_n = eps / (3 L_y l_n)`.
    TheoremStatement,
}

impl std::str::FromStr for ScheduleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proof_body" | "proof-body" => Ok(ScheduleVariant::ProofBody),
            "theorem_statement" | "theorem-statement" => Ok(ScheduleVariant::TheoremStatement),
            other => Err(Error::InvalidArgument(format!("unknown schedule variant '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSchedule {
    pub n: usize,
    pub d: usize,
    pub eps: f64,
    pub lipschitz: f64,
    pub kappa: f64,
    pub alpha: f64,
    pub path_length: u64,
    pub bandwidth: f64,
    pub budget: usize,
    pub variant: ScheduleVariant,
}

/// `1 - n^{-1/(d+1)}`.
pub fn schedule_alpha(n: usize, d: usize) -> f64 {
    1.0 - (n as f64).powf(-1.0 / (d as f64 + 1.0))
}

/// Smallest integer `l` with `alpha^l < target`.
fn path_length(alpha: f64, target: f64) -> u64 {
    let ln_alpha = (-(1.0 - alpha)).ln_1p();
    let mut l = (target.ln() / ln_alpha).ceil().max(1.0) as u64;
    // the ceiling can land exactly on the boundary when the ratio is integral
    while alpha.powf(l as f64) >= target {
        l += 1;
    }
    while l > 1 && alpha.powf((l - 1) as f64) < target {
        l -= 1;
    }
    l
}

pub fn rate_schedule(
    n: usize,
    d: usize,
    eps: f64,
    lipschitz: f64,
    kappa: f64,
    variant: ScheduleVariant,
) -> Result<RateSchedule> {
    if n < 2 || d == 0 {
        return Err(Error::InvalidArgument(format!("need n >= 2 and d >= 1, got n = {n}, d = {d}")));
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidArgument(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(lipschitz > 0.0 && lipschitz.is_finite()) || !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::InvalidArgument("Lipschitz constant and kappa must be positive".into()));
    }
    let alpha = schedule_alpha(n, d);
    let (path_length, bandwidth) = match variant {
        ScheduleVariant::ProofBody => {
            let l = path_length(alpha, eps);
            (l, eps / l as f64)
        }
        ScheduleVariant::TheoremStatement => {
            let l = path_length(alpha, eps / (12.0 * 2f64.sqrt()));
            (l, eps / (3.0 * lipschitz * l as f64))
        }
    };
    if variant == ScheduleVariant::ProofBody {
        assert!(alpha.powf(path_length as f64) < eps, "alpha^l >= eps at n = {n}");
    }
    let nf = n as f64;
    let exponent = 1.0 - 1.0 / (2.0 * (d as f64 + 1.0));
    let budget = (kappa * nf.powf(exponent) * nf.ln()).ceil() as usize;
    Ok(RateSchedule {
        n,
        d,
        eps,
        lipschitz,
        kappa,
        alpha,
        path_length,
        bandwidth,
        budget,
        variant,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub eps: f64,
    pub lipschitz: f64,
    pub kappa: f64,
    pub variant: ScheduleVariant,
    pub reps: usize,
    pub rng_seed: u64,
    /// Domain of the sine target.
    pub lo: f64,
    pub hi: f64,
    pub tolerance: f64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        Self {
            eps: 0.2,
            lipschitz: 0.5,
            kappa: 1.0,
            variant: ScheduleVariant::ProofBody,
            reps: 10,
            rng_seed: 0,
            lo: 0.0,
            hi: 1.0,
            tolerance: 1e-8,
        }
    }
}

/// One repetition at one dataset size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRecord {
    pub n: usize,
    pub repetition: usize,
    pub schedule: RateSchedule,
    /// `max_q ||p_hat_q - p_q||_2`
    pub max_error: f64,
    pub mean_error: f64,
    pub rmse: f64,
    pub kl: f64,
    pub components: usize,
    pub isolated: usize,
    /// Largest relative deviation of a heat-kernel row sum from `1 / (1 - alpha)`
    /// over nodes with at least one edge.
    pub row_sum_error: f64,
    pub wall_ms: f64,
    /// Set when the repetition could not be evaluated.
    pub failure: Option<String>,
}

/// Per-`n` summary over repetitions that completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub n: usize,
    pub mean_max_error: f64,
    pub mean_mean_error: f64,
    pub completed: usize,
}

/// Estimates `Y^c / N` with `Y^c = (1 - alpha) K counts_c` on the random-walk kernel `K`.
pub fn heat_kernel_estimate(
    op: &crate::graph::NormalizedOperator,
    config: &SolverConfig,
    classes: usize,
    events: &[(usize, usize)],
) -> Result<SoftLabelEstimate> {
    let scale = 1.0 - config.alpha;
    let mut class_scores = Vec::with_capacity(classes);
    for c in 0..classes {
        let seeds: Vec<(usize, f64)> = events.iter().filter(|e| e.1 == c).map(|e| (e.0, 1.0)).collect();
        let y = if seeds.is_empty() {
            vec![0.0; op.len()]
        } else {
            solve_combination(op, config, &seeds)?
        };
        class_scores.push(y.into_iter().map(|v| v * scale).collect::<Vec<_>>());
    }
    let received: Vec<f64> = (0..op.len()).map(|q| class_scores.iter().map(|y| y[q]).sum()).collect();
    Ok(SoftLabelEstimate::from_scores(&class_scores, &received, 0.0))
}

fn run_repetition(n: usize, repetition: usize, config: &ConsistencyConfig) -> Result<ConsistencyRecord> {
    let start = Instant::now();
    let schedule = rate_schedule(n, 1, config.eps, config.lipschitz, config.kappa, config.variant)?;
    let base = config.rng_seed ^ ((n as u64) << 20) ^ repetition as u64;
    let dataset = make_sine_1d(n, config.lo, config.hi, base)?;
    let graph = Arc::new(build_epsilon_graph(&dataset, schedule.bandwidth)?);
    let components = graph.components().into_iter().max().map_or(0, |c| c + 1);
    let op = normalize(graph.clone(), Normalization::RandomWalk);
    let isolated = op.degrees().iter().filter(|&&d| d == 0.0).count();
    let solver = SolverConfig {
        alpha: schedule.alpha,
        tolerance: config.tolerance,
        max_iterations: Some(20 * n.max(100)),
    };

    let truth = dataset.truth().expect("sine data has truth").clone();
    let mut oracle = FeedbackOracle::with_rng(truth.clone(), rng_stream(base, 1))?;
    let mut point_rng: ChaCha8Rng = rng_stream(base, 2);
    let events = (0..schedule.budget)
        .map(|_| {
            let q = point_rng.random_range(0..n);
            oracle.sample(q).map(|c| (q, c))
        })
        .collect::<Result<Vec<_>>>()?;

    let estimate = heat_kernel_estimate(&op, &solver, 2, &events)?;
    let errors: Vec<f64> = (0..n)
        .map(|q| {
            estimate
                .row(q)
                .iter()
                .zip(truth.row(q))
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                .sqrt()
        })
        .collect();

    let ones = vec![1.0; n];
    let row_sums = {
        let seeds: Vec<(usize, f64)> = ones.iter().enumerate().map(|(q, &w)| (q, w)).collect();
        solve_combination(&op, &solver, &seeds)?
    };
    let expected = 1.0 / (1.0 - schedule.alpha);
    let row_sum_error = row_sums
        .iter()
        .zip(op.degrees())
        .filter(|(_, &d)| d > 0.0)
        .map(|(s, _)| (s - expected).abs() / expected)
        .fold(0.0, f64::max);

    Ok(ConsistencyRecord {
        n,
        repetition,
        schedule,
        max_error: errors.iter().copied().fold(0.0, f64::max),
        mean_error: errors.iter().sum::<f64>() / n as f64,
        rmse: rmse(&estimate.probabilities, &truth)?,
        kl: kl_divergence(&estimate.probabilities, &truth, DEFAULT_KL_FLOOR)?,
        components,
        isolated,
        row_sum_error,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        failure: None,
    })
}

/// Runs `reps` repetitions for each `n` on the sine target. Failed repetitions
/// are recorded with `failure` set instead of aborting the table.
pub fn consistency_experiment(ns: &[usize], config: &ConsistencyConfig) -> Result<Vec<ConsistencyRecord>> {
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("dataset sizes must be strictly ascending".into()));
    }
    if config.reps == 0 {
        return Err(Error::InvalidArgument("need at least one repetition".into()));
    }
    // validate schedule parameters up front
    for &n in ns {
        rate_schedule(n, 1, config.eps, config.lipschitz, config.kappa, config.variant)?;
    }
    let jobs: Vec<(usize, usize)> = ns.iter().flat_map(|&n| (0..config.reps).map(move |r| (n, r))).collect();
    Ok(jobs
        .into_par_iter()
        .map(|(n, r)| {
            run_repetition(n, r, config).unwrap_or_else(|e| ConsistencyRecord {
                n,
                repetition: r,
                schedule: rate_schedule(n, 1, config.eps, config.lipschitz, config.kappa, config.variant)
                    .expect("validated above"),
                max_error: f64::NAN,
                mean_error: f64::NAN,
                rmse: f64::NAN,
                kl: f64::NAN,
                components: 0,
                isolated: 0,
                row_sum_error: f64::NAN,
                wall_ms: 0.0,
                failure: Some(e.to_string()),
            })
        })
        .collect())
}

pub fn summarize(records: &[ConsistencyRecord]) -> Vec<ConsistencySummary> {
    let mut ns: Vec<usize> = records.iter().map(|r| r.n).collect();
    ns.sort_unstable();
    ns.dedup();
    ns.into_iter()
        .map(|n| {
            let done: Vec<&ConsistencyRecord> =
                records.iter().filter(|r| r.n == n && r.failure.is_none()).collect();
            let k = done.len().max(1) as f64;
            ConsistencySummary {
                n,
                mean_max_error: done.iter().map(|r| r.max_error).sum::<f64>() / k,
                mean_mean_error: done.iter().map(|r| r.mean_error).sum::<f64>() / k,
                completed: done.len(),
            }
        })
        .collect()
}
