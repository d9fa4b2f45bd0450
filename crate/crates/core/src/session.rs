//! Incremental probabilistic label spreading.
//!
//! Every annotation `(q, c)` spreads the heat-kernel column of `q`, rescaled
//! so the largest entry is 1, into the class-`c` score vector and into the
//! total received mass. Alongside the scores the session keeps the running
//! sum of squared scores and, when a Lipschitz constant is configured, the
//! bias accumulator consumed by the Hoeffding intervals.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::graph::{build_graph, normalize, GraphKind, Normalization, NormalizedOperator};
use crate::matrix::{squared_distance, RowMatrix};
use crate::sim::FeedbackOracle;
use crate::solver::{solve_combination, SolverConfig};

/// Added to every class score when forming estimates.
pub const SCORE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationSource {
    Simulated,
    Human,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub point: usize,
    pub class: usize,
    pub sequence: u64,
    pub source: AnnotationSource,
}

/// Row-stochastic `n x C` estimate plus the received mass behind each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelEstimate {
    pub probabilities: RowMatrix,
    pub received: Vec<f64>,
}

impl SoftLabelEstimate {
    pub fn len(&self) -> usize {
        self.probabilities.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> usize {
        self.probabilities.cols()
    }

    pub fn row(&self, q: usize) -> &[f64] {
        self.probabilities.row(q)
    }

    /// Builds an estimate from per-class scores and totals; rows with zero
    /// total become uniform.
    pub(crate) fn from_scores(class_scores: &[Vec<f64>], received: &[f64], floor: f64) -> Self {
        let classes = class_scores.len();
        let n = received.len();
        let mut probabilities = RowMatrix::zeros(n, classes);
        for q in 0..n {
            let row = probabilities.row_mut(q);
            if received[q] > 0.0 {
                let denom = received[q] + classes as f64 * floor;
                for (c, p) in row.iter_mut().enumerate() {
                    *p = (class_scores[c][q] + floor) / denom;
                }
            } else {
                row.fill(1.0 / classes as f64);
            }
        }
        Self {
            probabilities,
            received: received.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub solver: SolverConfig,
    pub classes: usize,
    /// Lipschitz constant of the soft labels; enables the bias accumulator.
    pub lipschitz: Option<f64>,
}

impl SessionConfig {
    pub fn new(solver: SolverConfig, classes: usize) -> Self {
        Self {
            solver,
            classes,
            lipschitz: None,
        }
    }

    pub fn with_lipschitz(mut self, lipschitz: f64) -> Self {
        self.lipschitz = Some(lipschitz);
        self
    }
}

#[derive(Debug, Clone)]
pub struct SpreadSession {
    op: Arc<NormalizedOperator>,
    dataset: Option<Arc<EmbeddedDataset>>,
    config: SessionConfig,
    class_scores: Vec<Vec<f64>>,
    received: Vec<f64>,
    squared: Vec<f64>,
    bias: Option<Vec<f64>>,
    log: Vec<AnnotationEvent>,
    cache: HashMap<usize, Arc<Vec<f64>>>,
}

impl SpreadSession {
    /// `dataset` is required only when a Lipschitz constant is configured.
    pub fn new(
        op: Arc<NormalizedOperator>,
        dataset: Option<Arc<EmbeddedDataset>>,
        config: SessionConfig,
    ) -> Result<Self> {
        config.solver.validate()?;
        if config.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", config.classes)));
        }
        let n = op.len();
        let bias = match config.lipschitz {
            None => None,
            Some(l) => {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(Error::InvalidArgument(format!("Lipschitz constant must be nonnegative, got {l}")));
                }
                match &dataset {
                    Some(ds) if ds.len() == n => Some(vec![0.0; n]),
                    Some(ds) => {
                        return Err(Error::ShapeMismatch {
                            expected: format!("{n} points"),
                            actual: format!("{}", ds.len()),
                        })
                    }
                    None => {
                        return Err(Error::InvalidArgument(
                            "a Lipschitz constant needs the dataset features".into(),
                        ))
                    }
                }
            }
        };
        Ok(Self {
            op,
            dataset,
            class_scores: vec![vec![0.0; n]; config.classes],
            received: vec![0.0; n],
            squared: vec![0.0; n],
            bias,
            log: Vec::new(),
            cache: HashMap::new(),
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.op.len()
    }

    pub fn is_empty(&self) -> bool {
        self.op.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn operator(&self) -> &Arc<NormalizedOperator> {
        &self.op
    }

    pub fn dataset(&self) -> Option<&Arc<EmbeddedDataset>> {
        self.dataset.as_ref()
    }

    pub fn log(&self) -> &[AnnotationEvent] {
        &self.log
    }

    /// Cumulative score of class `c` at every point.
    pub fn class_scores(&self, c: usize) -> &[f64] {
        &self.class_scores[c]
    }

    /// Total received mass per point.
    pub fn received(&self) -> &[f64] {
        &self.received
    }

    /// Sum of squared per-event scores per point.
    pub fn squared_scores(&self) -> &[f64] {
        &self.squared
    }

    /// Sum of `score * min(1, L * dist)` per point, when configured.
    pub fn bias_scores(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    /// Propagation column for `seed` rescaled to unit maximum, solved once and cached.
    pub fn propagation(&mut self, seed: usize) -> Result<Arc<Vec<f64>>> {
        if let Some(v) = self.cache.get(&seed) {
            return Ok(v.clone());
        }
        let v = Arc::new(self.solve(seed, 1.0)?);
        self.cache.insert(seed, v.clone());
        Ok(v)
    }

    fn solve(&self, seed: usize, weight: f64) -> Result<Vec<f64>> {
        let raw = solve_combination(&self.op, &self.config.solver, &[(seed, weight)])?;
        let scale = weight / raw.iter().copied().fold(0.0, f64::max);
        Ok(raw.into_iter().map(|v| v * scale).collect())
    }

    /// Solves the propagation columns of all `seeds` in parallel ahead of use.
    pub fn prefetch(&mut self, seeds: impl IntoIterator<Item = usize>) -> Result<()> {
        let mut missing: Vec<usize> = seeds.into_iter().filter(|s| !self.cache.contains_key(s)).collect();
        missing.sort_unstable();
        missing.dedup();
        let n = self.len();
        if let Some(&bad) = missing.iter().find(|&&s| s >= n) {
            return Err(Error::OutOfRange { index: bad, size: n });
        }
        let this = &*self;
        let solved: Vec<(usize, Vec<f64>)> = missing
            .par_iter()
            .map(|&s| this.solve(s, 1.0).map(|v| (s, v)))
            .collect::<Result<_>>()?;
        self.cache.extend(solved.into_iter().map(|(s, v)| (s, Arc::new(v))));
        Ok(())
    }

    fn check(&self, point: usize, class: usize) -> Result<()> {
        if point >= self.len() {
            return Err(Error::OutOfRange {
                index: point,
                size: self.len(),
            });
        }
        if class >= self.classes() {
            return Err(Error::OutOfRange {
                index: class,
                size: self.classes(),
            });
        }
        Ok(())
    }

    /// Applies one annotation and returns the logged event.
    ///
    /// On error the session is unchanged.
    pub fn annotate(&mut self, point: usize, class: usize, source: AnnotationSource) -> Result<AnnotationEvent> {
        self.check(point, class)?;
        let scores = self.propagation(point)?;
        Ok(self.commit(point, class, source, &scores))
    }

    /// Applies an externally sequenced event; its sequence number must be the next one.
    pub fn apply_event(&mut self, event: &AnnotationEvent) -> Result<()> {
        let expected = self.log.len() as u64;
        if event.sequence != expected {
            return Err(Error::InvalidArgument(format!(
                "event sequence {} out of order, expected {expected}",
                event.sequence
            )));
        }
        self.annotate(event.point, event.class, event.source).map(|_| ())
    }

    /// Applies `count` identical annotations with a single solve of weight `count`.
    pub fn annotate_repeated(
        &mut self,
        point: usize,
        class: usize,
        count: usize,
        source: AnnotationSource,
    ) -> Result<Vec<AnnotationEvent>> {
        self.check(point, class)?;
        if count == 0 {
            return Ok(Vec::new());
        }
        let batched = self.solve(point, count as f64)?;
        let per_event: Vec<f64> = batched.iter().map(|v| v / count as f64).collect();
        let mut events = Vec::with_capacity(count);
        for _ in 0..count {
            events.push(self.commit(point, class, source, &per_event));
        }
        Ok(events)
    }

    /// Adds an already-solved column. Cannot fail.
    pub(crate) fn commit(
        &mut self,
        point: usize,
        class: usize,
        source: AnnotationSource,
        scores: &[f64],
    ) -> AnnotationEvent {
        let target = &mut self.class_scores[class];
        for (q, &s) in scores.iter().enumerate() {
            if s != 0.0 {
                target[q] += s;
                self.received[q] += s;
                self.squared[q] += s * s;
            }
        }
        if let (Some(bias), Some(l), Some(ds)) = (&mut self.bias, self.config.lipschitz, &self.dataset) {
            let seed = ds.point(point);
            for (q, &s) in scores.iter().enumerate() {
                if s != 0.0 {
                    let dist = squared_distance(ds.point(q), seed).sqrt();
                    bias[q] += s * (l * dist).min(1.0);
                }
            }
        }
        let event = AnnotationEvent {
            point,
            class,
            sequence: self.log.len() as u64,
            source,
        };
        self.log.push(event);
        event
    }

    /// Floored estimates `(Y_q^c + f) / (N_q + C f)`; uniform where nothing was received.
    pub fn estimates(&self) -> SoftLabelEstimate {
        SoftLabelEstimate::from_scores(&self.class_scores, &self.received, SCORE_FLOOR)
    }

    /// Estimates without the score floor, `Y_q^c / N_q`.
    pub fn unfloored_estimates(&self) -> SoftLabelEstimate {
        SoftLabelEstimate::from_scores(&self.class_scores, &self.received, 0.0)
    }

    /// Estimate row for one point, floored.
    pub fn estimate_at(&self, q: usize) -> Vec<f64> {
        let c = self.classes();
        if self.received[q] > 0.0 {
            let denom = self.received[q] + c as f64 * SCORE_FLOOR;
            (0..c).map(|k| (self.class_scores[k][q] + SCORE_FLOOR) / denom).collect()
        } else {
            vec![1.0 / c as f64; c]
        }
    }

    /// Hash of every accumulator and the log, for change detection.
    pub fn state_digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for scores in &self.class_scores {
            scores.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        self.received.iter().for_each(|v| v.to_bits().hash(&mut h));
        self.squared.iter().for_each(|v| v.to_bits().hash(&mut h));
        if let Some(b) = &self.bias {
            b.iter().for_each(|v| v.to_bits().hash(&mut h));
        }
        self.log.hash(&mut h);
        h.finish()
    }
}

/// Builds the graph over `dataset` and an empty session on it.
pub fn session_for_dataset(
    dataset: Arc<EmbeddedDataset>,
    graph: GraphKind,
    normalization: Normalization,
    config: SessionConfig,
) -> Result<SpreadSession> {
    let g = build_graph(&dataset, graph)?;
    let op = Arc::new(normalize(Arc::new(g), normalization));
    SpreadSession::new(op, Some(dataset), config)
}

/// Point indices drawn uniformly with replacement, with oracle-sampled classes.
pub fn draw_events(n: usize, m: usize, oracle: &mut FeedbackOracle, rng_seed: u64) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::InvalidArgument("cannot sample from an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    (0..m)
        .map(|_| {
            let q = rng.random_range(0..n);
            oracle.sample(q).map(|c| (q, c))
        })
        .collect()
}

/// Runs `m` simulated annotations and snapshots estimates at each checkpoint.
///
/// The whole event sequence is drawn first; any oracle failure aborts before
/// the session is touched.
pub fn run_budget(
    session: &mut SpreadSession,
    oracle: &mut FeedbackOracle,
    m: usize,
    rng_seed: u64,
    checkpoints: &[usize],
) -> Result<Vec<(usize, SoftLabelEstimate)>> {
    if m == 0 {
        return Err(Error::InvalidArgument("budget must be at least 1".into()));
    }
    if checkpoints.windows(2).any(|w| w[0] > w[1]) || checkpoints.last().is_some_and(|&c| c > m) {
        return Err(Error::InvalidArgument("checkpoints must be ascending and at most m".into()));
    }
    let events = draw_events(session.len(), m, oracle, rng_seed)?;
    replay_with_checkpoints(session, &events, AnnotationSource::Simulated, checkpoints)
}

/// Applies `events` in order, snapshotting estimates after each checkpoint count.
pub fn replay_with_checkpoints(
    session: &mut SpreadSession,
    events: &[(usize, usize)],
    source: AnnotationSource,
    checkpoints: &[usize],
) -> Result<Vec<(usize, SoftLabelEstimate)>> {
    session.prefetch(events.iter().map(|e| e.0))?;
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut next = checkpoints.iter().peekable();
    while next.peek().is_some_and(|&&c| c == 0) {
        next.next();
        out.push((0, session.estimates()));
    }
    for (used, &(q, c)) in events.iter().enumerate() {
        session.annotate(q, c, source)?;
        while next.peek().is_some_and(|&&cp| cp == used + 1) {
            next.next();
            out.push((used + 1, session.estimates()));
        }
    }
    Ok(out)
}
