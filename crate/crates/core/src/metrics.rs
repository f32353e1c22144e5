//! Q-error and summary statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `max(c / ĉ, ĉ / c)` for strictly positive runtimes.
pub fn qerror(actual: f64, predicted: f64) -> Result<f64> {
    if !(actual > 0.0 && actual.is_finite()) || !(predicted > 0.0 && predicted.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "q-error needs positive finite runtimes, got {actual} and {predicted}"
        )));
    }
    Ok((actual / predicted).max(predicted / actual))
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 50.0)
}

/// Percentile with linear interpolation between closest ranks
/// (rank `p/100 * (n-1)` on the sorted values).
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=100.0).contains(&p) {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return Some(sorted[lo]);
    }
    // Halfway points use the plain average so that medians are exact.
    if rank - lo as f64 == 0.5 {
        return Some((sorted[lo] + sorted[hi]) / 2.0);
    }
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64))
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Option<f64> {
    let m = mean(values)?;
    Some((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QErrorSummary {
    pub count: usize,
    pub median: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
}

impl QErrorSummary {
    pub fn from_qerrors(q: &[f64]) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InsufficientData("no q-errors to summarize".into()));
        }
        Ok(QErrorSummary {
            count: q.len(),
            median: median(q).expect("non-empty"),
            p95: percentile(q, 95.0).expect("non-empty"),
            max: q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: mean(q).expect("non-empty"),
        })
    }

    pub fn from_pairs(actual: &[f64], predicted: &[f64]) -> Result<Self> {
        if actual.len() != predicted.len() {
            return Err(Error::Dimension {
                context: "q-error pairs",
                expected: actual.len(),
                actual: predicted.len(),
            });
        }
        let q = actual
            .iter()
            .zip(predicted)
            .map(|(a, p)| qerror(*a, *p))
            .collect::<Result<Vec<_>>>()?;
        Self::from_qerrors(&q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn qerror_anchors() {
        assert_eq!(qerror(2.0, 1.0).unwrap(), 2.0);
        assert_eq!(qerror(0.5, 2.0).unwrap(), 4.0);
        assert_eq!(qerror(2.0, 0.5).unwrap(), 4.0);
        assert_eq!(qerror(3.7, 3.7).unwrap(), 1.0);
        assert!(qerror(0.0, 1.0).is_err());
        assert!(qerror(1.0, -1.0).is_err());
        assert!(qerror(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn percentiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0, 5.0], 95.0), Some(4.8));
        assert_eq!(median(&[]), None);
        let s = QErrorSummary::from_qerrors(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!((s.median, s.p95, s.max), (1.0, 1.0, 1.0));
    }

    proptest! {
        #[test]
        fn qerror_properties(c in 1e-6f64..1e6, p in 1e-6f64..1e6, k in 1e-3f64..1e3) {
            let q = qerror(c, p).unwrap();
            prop_assert!(q >= 1.0);
            prop_assert_eq!(q, qerror(p, c).unwrap());
            prop_assert!((qerror(k * c, k * p).unwrap() - q).abs() <= 1e-9 * q);
        }

        #[test]
        fn p95_not_below_median(v in proptest::collection::vec(1.0f64..100.0, 1..50)) {
            let s = QErrorSummary::from_qerrors(&v).unwrap();
            prop_assert!(s.p95 >= s.median);
            prop_assert!(s.max >= s.p95);
        }
    }
}
