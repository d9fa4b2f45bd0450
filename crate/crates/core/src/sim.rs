//! Synthetic soft-label datasets and the simulated crowdsourcing oracle.
//!
//! All randomness comes from [`RNG_ALGORITHM`] streams seeded with a `u64`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::EmbeddedDataset;
use crate::error::{Error, Result};
use crate::matrix::RowMatrix;

/// Identifier of the generator behind every seeded stream in this crate.
pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9";

/// Default logistic sharpness of the two-moons ground truth.
pub const DEFAULT_SHARPNESS: f64 = 6.0;

/// Seeded generator for stream `stream` of `seed`. Streams of one seed are independent.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// First word of [`rng_stream`], for APIs that take a plain `u64` seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    rng_stream(seed, stream).random()
}

/// Draws classes from the ground-truth soft labels.
#[derive(Debug, Clone)]
pub struct FeedbackOracle {
    truth: RowMatrix,
    rng: ChaCha8Rng,
}

impl FeedbackOracle {
    pub fn new(truth: RowMatrix, rng_seed: u64) -> Result<Self> {
        Self::with_rng(truth, ChaCha8Rng::seed_from_u64(rng_seed))
    }

    pub fn with_rng(truth: RowMatrix, rng: ChaCha8Rng) -> Result<Self> {
        for (row, values) in truth.iter_rows().enumerate() {
            let sum: f64 = values.iter().sum();
            if values.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Validation {
                    row,
                    message: "oracle truth rows must be probability vectors".into(),
                });
            }
        }
        Ok(Self { truth, rng })
    }

    /// Oracle over a dataset's ground truth.
    pub fn for_dataset(dataset: &EmbeddedDataset, rng_seed: u64) -> Result<Self> {
        let truth = dataset
            .truth()
            .ok_or_else(|| Error::InvalidArgument("dataset has no ground-truth soft labels".into()))?;
        Self::new(truth.clone(), rng_seed)
    }

    pub fn truth(&self) -> &RowMatrix {
        &self.truth
    }

    /// Inverse-CDF categorical draw from row `q`.
    pub fn sample(&mut self, q: usize) -> Result<usize> {
        if q >= self.truth.rows() {
            return Err(Error::OutOfRange {
                index: q,
                size: self.truth.rows(),
            });
        }
        let u: f64 = self.rng.random();
        let row = self.truth.row(q);
        let mut acc = 0.0;
        for (c, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(c);
            }
        }
        // u landed in the rounding gap above the final cumulative sum
        Ok(row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1))
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distance from `p` to the noiseless upper arc (unit half circle at the origin).
fn outer_arc_distance(p: [f64; 2]) -> f64 {
    if p[1] >= 0.0 {
        ((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs()
    } else {
        let to_end = |ex: f64| ((p[0] - ex).powi(2) + p[1] * p[1]).sqrt();
        to_end(1.0).min(to_end(-1.0))
    }
}

/// Distance from `p` to the noiseless lower arc (unit half circle at (1, 0.5)).
fn inner_arc_distance(p: [f64; 2]) -> f64 {
    let q = [p[0] - 1.0, p[1] - 0.5];
    if q[1] <= 0.0 {
        ((q[0] * q[0] + q[1] * q[1]).sqrt() - 1.0).abs()
    } else {
        let to_end = |ex: f64| ((q[0] - ex).powi(2) + q[1] * q[1]).sqrt();
        to_end(1.0).min(to_end(-1.0))
    }
}

/// Ground truth `(1 - s, s)` with `s = logistic(sharpness * (d_upper - d_lower))`.
pub fn two_moons_truth(p: [f64; 2], sharpness: f64) -> [f64; 2] {
    let s = logistic(sharpness * (outer_arc_distance(p) - inner_arc_distance(p)));
    [1.0 - s, s]
}

/// Two interleaved half circles with isotropic Gaussian noise; the first
/// `n / 2` points lie on the upper arc (class 0), the rest on the lower arc.
pub fn make_two_moons(n: usize, noise: f64, sharpness: f64, rng_seed: u64) -> Result<EmbeddedDataset> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be nonnegative, got {noise}")));
    }
    if !(sharpness > 0.0) {
        return Err(Error::InvalidArgument(format!("sharpness must be positive, got {sharpness}")));
    }
    let n_outer = n / 2;
    let n_inner = n - n_outer;
    let spaced = |i: usize, count: usize| {
        if count == 1 {
            0.0
        } else {
            PI * i as f64 / (count - 1) as f64
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, noise).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut features = Vec::with_capacity(2 * n);
    let mut truth = Vec::with_capacity(2 * n);
    for i in 0..n {
        let base = if i < n_outer {
            let t = spaced(i, n_outer);
            [t.cos(), t.sin()]
        } else {
            let t = spaced(i - n_outer, n_inner);
            [1.0 - t.cos(), 1.0 - t.sin() - 0.5]
        };
        let p = [base[0] + normal.sample(&mut rng), base[1] + normal.sample(&mut rng)];
        features.extend_from_slice(&p);
        truth.extend_from_slice(&two_moons_truth(p, sharpness));
    }
    EmbeddedDataset::new(
        (0..n).map(|i| i.to_string()).collect(),
        RowMatrix::from_vec(n, 2, features)?,
        Some(RowMatrix::from_vec(n, 2, truth)?),
        None,
    )
}

/// Ground truth `(1 + sin x, 1 - sin x) / 2`.
pub fn sine_truth(x: f64) -> [f64; 2] {
    let s = x.sin();
    [0.5 * (1.0 + s), 0.5 * (1.0 - s)]
}

/// `n` points uniform on `[lo, hi]` with the sine ground truth.
pub fn make_sine_1d(n: usize, lo: f64, hi: f64, rng_seed: u64) -> Result<EmbeddedDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::InvalidArgument(format!("need lo < hi, got [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..=hi)).collect();
    let truth: Vec<f64> = xs.iter().flat_map(|&x| sine_truth(x)).collect();
    EmbeddedDataset::new(
        (0..n).map(|i| i.to_string()).collect(),
        RowMatrix::from_vec(n, 1, xs)?,
        Some(RowMatrix::from_vec(n, 2, truth)?),
        None,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equidistant_point_is_half_half() {
        // (0.5, 0.25) is symmetric between the arcs by the point reflection through it
        let t = two_moons_truth([0.5, 0.25], 3.0);
        assert!((t[0] - 0.5).abs() < 1e-12 && (t[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sharp_truth_is_nearly_one_hot() {
        let on_upper = two_moons_truth([0.0, 1.0], 1e4);
        let on_lower = two_moons_truth([1.0, -0.5], 1e4);
        assert!(on_upper[0] > 1.0 - 1e-12);
        assert!(on_lower[1] > 1.0 - 1e-12);
    }

    #[test]
    fn sine_truth_values() {
        assert!((sine_truth(PI / 2.0)[0] - 1.0).abs() < 1e-15);
        assert_eq!(sine_truth(0.0), [0.5, 0.5]);
    }

    #[test]
    fn sine_dataset_in_range() {
        let ds = make_sine_1d(2000, 0.0, 10.0, 1).unwrap();
        assert_eq!(ds.len(), 2000);
        assert!(ds.features().as_slice().iter().all(|&x| (0.0..=10.0).contains(&x)));
        assert!(make_sine_1d(10, 1.0, 1.0, 1).is_err());
    }

    #[test]
    fn one_hot_row_always_returns_its_class() {
        let truth = RowMatrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        let mut oracle = FeedbackOracle::new(truth, 9).unwrap();
        assert!((0..1000).all(|_| oracle.sample(0).unwrap() == 1));
        assert!(oracle.sample(1).is_err());
    }

    #[test]
    fn fair_row_frequency() {
        let truth = RowMatrix::from_rows(&[[0.5, 0.5]]).unwrap();
        let mut oracle = FeedbackOracle::new(truth, 11).unwrap();
        let draws = 100_000;
        let zeros = (0..draws).filter(|_| oracle.sample(0).unwrap() == 0).count();
        assert!((zeros as f64 / draws as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn seeded_streams_reproduce() {
        let truth = RowMatrix::from_rows(&[[0.2, 0.3, 0.5]]).unwrap();
        let mut a = FeedbackOracle::new(truth.clone(), 4).unwrap();
        let mut b = FeedbackOracle::new(truth, 4).unwrap();
        let xs: Vec<usize> = (0..200).map(|_| a.sample(0).unwrap()).collect();
        let ys: Vec<usize> = (0..200).map(|_| b.sample(0).unwrap()).collect();
        assert_eq!(xs, ys);
        let m1 = make_two_moons(100, 0.1, 6.0, 3).unwrap();
        let m2 = make_two_moons(100, 0.1, 6.0, 3).unwrap();
        assert_eq!(m1, m2);
    }
}
