//! Heat-kernel columns `(I - alpha S)^{-1} e_q`.
//!
//! Both normalizations are solved with conjugate gradients on the symmetric
//! system `I - alpha D^{-1/2} A D^{-1/2}`, which is positive definite with
//! eigenvalues in `[1 - alpha, 1 + alpha]`. The random-walk system is similar
//! to it through `D^{1/2}`. Nodes of degree zero decouple and keep their
//! right-hand side.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Normalization, NormalizedOperator};

pub const DEFAULT_TOLERANCE: f64 = 1e-6;
/// Entries in `(NEGATIVE_CLAMP, 0)` are treated as round-off and set to zero.
pub const NEGATIVE_CLAMP: f64 = -1e-10;
/// Largest system accepted by [`dense_heat_kernel`].
pub const DENSE_LIMIT: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub alpha: f64,
    pub tolerance: f64,
    /// `None` means `10 sqrt(n) + 100`.
    pub max_iterations: Option<usize>,
}

impl SolverConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        let config = Self {
            alpha,
            tolerance: DEFAULT_TOLERANCE,
            max_iterations: None,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Result<Self> {
        self.tolerance = tolerance;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {}", self.alpha)));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", self.tolerance)));
        }
        if self.max_iterations == Some(0) {
            return Err(Error::InvalidArgument("max_iterations must be positive".into()));
        }
        Ok(())
    }

    pub fn iteration_limit(&self, n: usize) -> usize {
        self.max_iterations
            .unwrap_or_else(|| (10.0 * (n as f64).sqrt()).ceil() as usize + 100)
    }
}

/// One seed's heat-kernel column, raw and rescaled to unit maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationVector {
    pub seed: usize,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

/// Solves `(I - alpha S) x = e_q` and rescales the result by its maximum.
pub fn spread_seed(op: &NormalizedOperator, config: &SolverConfig, seed: usize) -> Result<PropagationVector> {
    let raw = solve_combination(op, config, &[(seed, 1.0)])?;
    let max = raw.iter().copied().fold(0.0, f64::max);
    debug_assert!(max >= 1.0 - config.tolerance, "seed entry lost: {max}");
    let normalized = raw.iter().map(|v| v / max).collect();
    Ok(PropagationVector { seed, raw, normalized })
}

/// Solves `(I - alpha S) x = sum_i w_i e_{q_i}` in one pass.
///
/// Linear in the weights, so summing several seeds before solving equals
/// summing their individual solutions up to solver error.
pub fn solve_combination(
    op: &NormalizedOperator,
    config: &SolverConfig,
    seeds: &[(usize, f64)],
) -> Result<Vec<f64>> {
    config.validate()?;
    let n = op.len();
    let mut rhs = vec![0.0; n];
    for &(q, w) in seeds {
        if q >= n {
            return Err(Error::OutOfRange { index: q, size: n });
        }
        rhs[q] += w;
    }
    let rhs_norm = norm(&rhs);
    if config.alpha == 0.0 || rhs_norm == 0.0 {
        return Ok(rhs);
    }
    let degrees = op.degrees();
    if seeds.iter().all(|&(q, _)| degrees[q] == 0.0) {
        return Ok(rhs);
    }

    let alpha = config.alpha;
    let limit = config.iteration_limit(n);

    let mut x = match op.variant() {
        Normalization::Symmetric => {
            let target = 0.5 * config.tolerance * rhs_norm;
            conjugate_gradient(op, alpha, &rhs, None, target, limit, config.tolerance)?
        }
        Normalization::RandomWalk => {
            let inv_sqrt = op.inv_sqrt_degrees();
            // r_rw = D^{-1/2} r_sym; the margin absorbs drift of the recurrence residual
            let target = 0.5 * config.tolerance * rhs_norm;
            let scaled: Vec<f64> = rhs
                .iter()
                .zip(degrees)
                .map(|(b, &d)| if d > 0.0 { b * d.sqrt() } else { 0.0 })
                .collect();
            let y = conjugate_gradient(op, alpha, &scaled, Some(inv_sqrt), target, limit, config.tolerance)?;
            y.iter()
                .zip(inv_sqrt)
                .zip(&rhs)
                .zip(degrees)
                .map(|(((yi, s), b), &d)| if d > 0.0 { yi * s } else { *b })
                .collect()
        }
    };

    let residual = relative_residual(op, alpha, &x, &rhs);
    if residual > config.tolerance {
        return Err(Error::NonConvergence {
            iterations: limit,
            residual,
            tolerance: config.tolerance,
        });
    }
    clamp_negatives(&mut x)?;
    Ok(x)
}

fn clamp_negatives(x: &mut [f64]) -> Result<()> {
    for (node, v) in x.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v > NEGATIVE_CLAMP {
                *v = 0.0;
            } else {
                return Err(Error::NegativeScore { node, value: *v });
            }
        }
    }
    Ok(())
}

/// `||(I - alpha S) x - b|| / ||b||` for the operator's own variant.
pub fn relative_residual(op: &NormalizedOperator, alpha: f64, x: &[f64], b: &[f64]) -> f64 {
    let mut sx = vec![0.0; x.len()];
    op.apply(x, &mut sx);
    let r: f64 = x
        .iter()
        .zip(&sx)
        .zip(b)
        .map(|((xi, si), bi)| {
            let d = xi - alpha * si - bi;
            d * d
        })
        .sum();
    r.sqrt() / norm(b)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Rows reachable from the right-hand side's support, grown one hop at a time.
///
/// After `t` products the Krylov iterates are supported on the `t`-hop ball, so
/// restricting work to these rows leaves the arithmetic unchanged. Rows are
/// kept ascending so the restricted products still stream through memory.
struct Frontier {
    rows: Vec<u32>,
    layer: Vec<u32>,
    seen: Vec<bool>,
    complete: bool,
}

impl Frontier {
    fn new(b: &[f64]) -> Self {
        let mut seen = vec![false; b.len()];
        let mut rows = Vec::new();
        for (i, &v) in b.iter().enumerate() {
            if v != 0.0 {
                seen[i] = true;
                rows.push(i as u32);
            }
        }
        Self {
            layer: rows.clone(),
            rows,
            seen,
            complete: false,
        }
    }

    fn grow(&mut self, offsets: &[usize], columns: &[u32]) {
        if self.complete {
            return;
        }
        let mut next = Vec::new();
        for &i in &self.layer {
            let i = i as usize;
            for &j in &columns[offsets[i]..offsets[i + 1]] {
                if !self.seen[j as usize] {
                    self.seen[j as usize] = true;
                    next.push(j);
                }
            }
        }
        if next.is_empty() {
            self.complete = true;
            return;
        }
        next.sort_unstable();
        let mut merged = Vec::with_capacity(self.rows.len() + next.len());
        let (mut a, mut b) = (self.rows.iter().peekable(), next.iter().peekable());
        while let (Some(&&x), Some(&&y)) = (a.peek(), b.peek()) {
            if x < y {
                merged.push(x);
                a.next();
            } else {
                merged.push(y);
                b.next();
            }
        }
        merged.extend(a);
        merged.extend(b);
        self.rows = merged;
        self.layer = next;
    }

    fn is_everything(&self) -> bool {
        self.rows.len() == self.seen.len()
    }
}

/// Conjugate gradients on `I - alpha D^{-1/2} A D^{-1/2}`.
///
/// Iterates until `||W (b - A x)|| <= target`, with `W` the optional diagonal
/// `residual_scale` (identity when absent), then keeps iterating (within the
/// same budget) while the iterate has entries below [`NEGATIVE_CLAMP`]; for
/// heat kernels the exact solution is nonnegative, so such entries are
/// unresolved error rather than signal.
fn conjugate_gradient(
    op: &NormalizedOperator,
    alpha: f64,
    b: &[f64],
    residual_scale: Option<&[f64]>,
    target: f64,
    max_iterations: usize,
    tolerance: f64,
) -> Result<Vec<f64>> {
    let n = b.len();
    let (offsets, columns, values) = op.symmetric_csr();
    let mut frontier = Frontier::new(b);
    let mut x = vec![0.0; n];
    let mut ap = vec![0.0; n];
    let mut r = b.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let b_norm = norm(b);
    let scaled_norm = |rows: &[u32], r: &[f64], rr: f64| match residual_scale {
        None => rr.sqrt(),
        Some(w) => rows
            .iter()
            .map(|&i| {
                let v = r[i as usize] * w[i as usize];
                v * v
            })
            .sum::<f64>()
            .sqrt(),
    };
    let mut bound = target;
    for _ in 0..max_iterations {
        if scaled_norm(&frontier.rows, &r, rr) <= bound {
            if frontier.rows.iter().all(|&i| x[i as usize] > NEGATIVE_CLAMP) {
                return Ok(x);
            }
            bound *= 0.01;
        }
        frontier.grow(offsets, columns);
        let rows = &frontier.rows;
        let pap = if frontier.is_everything() {
            op.apply_shifted_symmetric(alpha, &p, &mut ap)
        } else {
            let mut pap = 0.0;
            for &i in rows {
                let i = i as usize;
                let range = offsets[i]..offsets[i + 1];
                let s: f64 = columns[range.clone()]
                    .iter()
                    .zip(&values[range])
                    .map(|(&j, &v)| v * p[j as usize])
                    .sum();
                ap[i] = p[i] - alpha * s;
                pap += p[i] * ap[i];
            }
            pap
        };
        if pap <= 0.0 {
            break;
        }
        let step = rr / pap;
        let mut rr_next = 0.0;
        for &i in rows {
            let i = i as usize;
            x[i] += step * p[i];
            r[i] -= step * ap[i];
            rr_next += r[i] * r[i];
        }
        let beta = rr_next / rr;
        rr = rr_next;
        for &i in rows {
            let i = i as usize;
            p[i] = r[i] + beta * p[i];
        }
    }
    if scaled_norm(&frontier.rows, &r, rr) <= target {
        // Converged in residual; negative entries are judged by the caller.
        return Ok(x);
    }
    Err(Error::NonConvergence {
        iterations: max_iterations,
        residual: rr.sqrt() / b_norm,
        tolerance,
    })
}

/// Dense `(I - alpha S)^{-1}` by LU factorization. Reference for small graphs.
pub fn dense_heat_kernel(op: &NormalizedOperator, alpha: f64) -> Result<DMatrix<f64>> {
    let n = op.len();
    if n > DENSE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "dense heat kernel limited to n <= {DENSE_LIMIT}, got {n}"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0, 1), got {alpha}")));
    }
    let system = DMatrix::identity(n, n) - op.to_dense() * alpha;
    let inverse = system.lu().try_inverse();
    assert!(inverse.is_some(), "I - alpha S is singular for alpha = {alpha}");
    Ok(inverse.expect("checked above"))
}

/// `sum_{i=0}^{t} (alpha S)^i e_q` by `t` sparse products.
pub fn neumann_partial_sum(op: &NormalizedOperator, alpha: f64, seed: usize, terms: usize) -> Result<Vec<f64>> {
    let n = op.len();
    if seed >= n {
        return Err(Error::OutOfRange { index: seed, size: n });
    }
    let mut term = vec![0.0; n];
    term[seed] = 1.0;
    Ok(neumann_apply(op, alpha, term, terms))
}

/// `sum_{i=0}^{t} (alpha S)^i v`.
pub fn neumann_apply(op: &NormalizedOperator, alpha: f64, mut term: Vec<f64>, terms: usize) -> Vec<f64> {
    let mut sum = term.clone();
    let mut next = vec![0.0; term.len()];
    for _ in 0..terms {
        op.apply(&term, &mut next);
        next.iter_mut().for_each(|v| *v *= alpha);
        std::mem::swap(&mut term, &mut next);
        sum.iter_mut().zip(&term).for_each(|(s, t)| *s += t);
    }
    sum
}
