//! Reference estimators: Gaussian kernel regression, k-NN regression over
//! annotated points, and the per-point histogram (no spreading).

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::dataset::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::kdtree::Neighbor;
use crate::matrix::{squared_distance, RowMatrix};
use crate::session::{AnnotationEvent, SoftLabelEstimate};

/// Point/class pairs in annotation order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationLog {
    n: usize,
    classes: usize,
    events: Vec<(usize, usize)>,
}

impl AnnotationLog {
    pub fn new(n: usize, classes: usize, events: Vec<(usize, usize)>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        for &(q, c) in &events {
            if q >= n {
                return Err(Error::OutOfRange { index: q, size: n });
            }
            if c >= classes {
                return Err(Error::OutOfRange {
                    index: c,
                    size: classes,
                });
            }
        }
        Ok(Self { n, classes, events })
    }

    pub fn from_events(n: usize, classes: usize, events: &[AnnotationEvent]) -> Result<Self> {
        Self::new(n, classes, events.iter().map(|e| (e.point, e.class)).collect())
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[(usize, usize)] {
        &self.events
    }

    /// Event-count histogram per annotated point, ascending by point index.
    fn histograms(&self) -> Vec<(usize, Vec<f64>)> {
        let mut counts: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for &(q, c) in &self.events {
            counts.entry(q).or_insert_with(|| vec![0.0; self.classes])[c] += 1.0;
        }
        counts.into_iter().collect()
    }
}

fn check_dataset(dataset: &EmbeddedDataset, log: &AnnotationLog) -> Result<()> {
    if dataset.len() != log.n {
        return Err(Error::ShapeMismatch {
            expected: format!("{} points", log.n),
            actual: format!("{}", dataset.len()),
        });
    }
    Ok(())
}

fn estimate_from_rows(rows: Vec<(Vec<f64>, f64)>, classes: usize) -> SoftLabelEstimate {
    let n = rows.len();
    let mut probabilities = RowMatrix::zeros(n, classes);
    let mut received = Vec::with_capacity(n);
    for (q, (scores, total)) in rows.into_iter().enumerate() {
        let row = probabilities.row_mut(q);
        if total > 0.0 {
            row.iter_mut().zip(&scores).for_each(|(p, s)| *p = s / total);
        } else {
            row.fill(1.0 / classes as f64);
        }
        received.push(total);
    }
    SoftLabelEstimate {
        probabilities,
        received,
    }
}

/// Kernel-regression estimate plus the rows whose kernel weights all underflowed.
#[derive(Debug, Clone, PartialEq)]
pub struct GkrEstimate {
    pub estimate: SoftLabelEstimate,
    /// Rows that fell back to uniform because every weight was zero.
    pub underflow_rows: Vec<usize>,
}

/// Nadaraya-Watson estimate with weights `exp(-gamma ||x_q - x_i||^2)` over annotation events.
pub fn gkr_estimate(dataset: &EmbeddedDataset, log: &AnnotationLog, gamma: f64) -> Result<GkrEstimate> {
    check_dataset(dataset, log)?;
    if log.is_empty() {
        return Err(Error::InvalidArgument("kernel regression needs at least one annotation".into()));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma must be positive, got {gamma}")));
    }
    let annotated = log.histograms();
    let classes = log.classes;
    let rows: Vec<(Vec<f64>, f64)> = (0..dataset.len())
        .into_par_iter()
        .map(|q| {
            let x = dataset.point(q);
            let mut scores = vec![0.0; classes];
            for (i, counts) in &annotated {
                let w = (-gamma * squared_distance(x, dataset.point(*i))).exp();
                scores.iter_mut().zip(counts).for_each(|(s, c)| *s += w * c);
            }
            let total = scores.iter().sum();
            (scores, total)
        })
        .collect();
    let underflow_rows = rows
        .iter()
        .enumerate()
        .filter(|(_, (_, total))| *total == 0.0)
        .map(|(q, _)| q)
        .collect();
    Ok(GkrEstimate {
        estimate: estimate_from_rows(rows, classes),
        underflow_rows,
    })
}

/// Sums the event histograms of the `k` nearest distinct annotated points
/// (ties by index) and normalizes.
pub fn knn_estimate(dataset: &EmbeddedDataset, log: &AnnotationLog, k: usize) -> Result<SoftLabelEstimate> {
    check_dataset(dataset, log)?;
    let annotated = log.histograms();
    if k == 0 || annotated.len() < k {
        return Err(Error::InvalidArgument(format!(
            "k-NN regression needs k >= 1 distinct annotated points, have {} for k = {k}",
            annotated.len()
        )));
    }
    let classes = log.classes;
    let rows = (0..dataset.len())
        .into_par_iter()
        .map(|q| {
            let x = dataset.point(q);
            let mut candidates: Vec<Neighbor> = annotated
                .iter()
                .enumerate()
                .map(|(slot, (i, _))| Neighbor {
                    index: slot,
                    dist2: squared_distance(x, dataset.point(*i)),
                })
                .collect();
            // slots are ascending in point index, so ordering by slot breaks ties by index
            if k < candidates.len() {
                candidates.select_nth_unstable(k - 1);
                candidates.truncate(k);
            }
            let mut scores = vec![0.0; classes];
            for nb in &candidates {
                scores.iter_mut().zip(&annotated[nb.index].1).for_each(|(s, c)| *s += c);
            }
            let total = scores.iter().sum();
            (scores, total)
        })
        .collect();
    Ok(estimate_from_rows(rows, classes))
}

/// Relative class frequencies per point; uniform where a point has no events.
pub fn histogram_estimate(log: &AnnotationLog) -> SoftLabelEstimate {
    let mut rows = vec![(vec![0.0; log.classes], 0.0); log.n];
    for &(q, c) in &log.events {
        rows[q].0[c] += 1.0;
        rows[q].1 += 1.0;
    }
    estimate_from_rows(rows, log.classes)
}
