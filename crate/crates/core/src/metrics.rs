//! Evaluation metrics: malicious-user F1, inter-class reputation distance
//! and the noise reduction ratio of the kept data.

use serde::{Deserialize, Serialize};

use crate::engine::{classify_reputation, UserLabel};
use crate::error::{Error, Result};
use crate::features::PREDICTION_EPSILON;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    /// Malicious is the positive class.
    pub fn from_labels(predicted: &[UserLabel], malicious: &[bool]) -> Self {
        let mut c = Confusion::default();
        for (p, &m) in predicted.iter().zip(malicious) {
            match (*p == UserLabel::Malicious, m) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn f1_score(predicted: &[UserLabel], malicious: &[bool]) -> f64 {
    Confusion::from_labels(predicted, malicious).f1()
}

/// F1 with labels derived from final reputations.
pub fn f1_from_reputations(reputations: &[f64], malicious: &[bool]) -> f64 {
    let labels: Vec<UserLabel> = reputations.iter().map(|&r| classify_reputation(r)).collect();
    f1_score(&labels, malicious)
}

/// Mean final reputation of normal users minus that of malicious users.
pub fn reputation_distance(reputations: &[f64], malicious: &[bool]) -> Result<f64> {
    let mean = |want: bool| {
        let (s, c) = reputations
            .iter()
            .zip(malicious)
            .filter(|(_, &m)| m == want)
            .fold((0.0, 0usize), |(s, c), (r, _)| (s + r, c + 1));
        (c > 0).then(|| s / c as f64)
    };
    match (mean(false), mean(true)) {
        (Some(n), Some(m)) => Ok(n - m),
        (None, _) => Err(Error::UndefinedMetric("reputation distance needs normal users")),
        (_, None) => Err(Error::UndefinedMetric("reputation distance needs malicious users")),
    }
}

/// Relative noise `|v - G| / max(|G|, τ_g)` of one report.
pub fn noise(value: f64, truth: f64) -> f64 {
    (value - truth).abs() / truth.abs().max(PREDICTION_EPSILON)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseReduction {
    pub ratio: f64,
    pub original_noise: f64,
    pub kept_noise: f64,
    /// Set when every report was removed; the ratio is then 1.
    pub all_removed: bool,
}

/// `1 - mean_noise(kept) / mean_noise(original)` over `(value, truth)` pairs.
pub fn noise_reduction_ratio(original: &[(f64, f64)], kept: &[(f64, f64)]) -> NoiseReduction {
    let mean_noise = |xs: &[(f64, f64)]| {
        if xs.is_empty() {
            0.0
        } else {
            xs.iter().map(|&(v, g)| noise(v, g)).sum::<f64>() / xs.len() as f64
        }
    };
    let original_noise = mean_noise(original);
    let kept_noise = mean_noise(kept);
    if kept.is_empty() {
        return NoiseReduction {
            ratio: 1.0,
            original_noise,
            kept_noise,
            all_removed: true,
        };
    }
    let ratio = if original_noise == 0.0 {
        0.0
    } else {
        1.0 - kept_noise / original_noise
    };
    NoiseReduction {
        ratio,
        original_noise,
        kept_noise,
        all_removed: false,
    }
}

/// The three headline metrics of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub f1: f64,
    pub reputation_distance: f64,
    pub noise_reduction_ratio: f64,
}

impl RunMetrics {
    pub fn mean(runs: &[RunMetrics]) -> Option<RunMetrics> {
        if runs.is_empty() {
            return None;
        }
        let n = runs.len() as f64;
        let sum = runs.iter().fold((0.0, 0.0, 0.0), |acc, m| {
            (
                acc.0 + m.f1,
                acc.1 + m.reputation_distance,
                acc.2 + m.noise_reduction_ratio,
            )
        });
        Some(RunMetrics {
            f1: sum.0 / n,
            reputation_distance: sum.1 / n,
            noise_reduction_ratio: sum.2 / n,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn labels(flags: &[bool]) -> Vec<UserLabel> {
        flags
            .iter()
            .map(|&m| if m { UserLabel::Malicious } else { UserLabel::Normal })
            .collect()
    }

    #[test]
    fn f1_examples() {
        let truth: Vec<bool> = (0..100).map(|i| i < 10).collect();
        assert_eq!(f1_score(&labels(&truth), &truth), 1.0);

        let mut pred = truth.clone();
        pred[0] = false; // FN
        pred[50] = true; // FP
        let c = Confusion::from_labels(&labels(&pred), &truth);
        assert_eq!((c.tp, c.fp, c.fn_), (9, 1, 1));
        assert_abs_diff_eq!(c.precision(), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(c.recall(), 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(c.f1(), 0.9, epsilon = 1e-12);

        assert_eq!(f1_score(&labels(&[false; 100]), &truth), 0.0);
    }

    #[test]
    fn reputation_distance_examples() {
        let reps = [0.8, 0.8, 0.3];
        let mal = [false, false, true];
        assert_abs_diff_eq!(reputation_distance(&reps, &mal).unwrap(), 0.5, epsilon = 1e-12);
        assert_eq!(reputation_distance(&[0.6, 0.6], &[false, true]).unwrap(), 0.0);
        assert!(matches!(
            reputation_distance(&[0.6], &[false]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn noise_reduction_examples() {
        // ten reports with mean noise 0.10; kept subset with mean noise 0.019
        let original: Vec<(f64, f64)> = (0..10).map(|_| (110.0, 100.0)).collect();
        let kept: Vec<(f64, f64)> = (0..10).map(|_| (101.9, 100.0)).collect();
        let nr = noise_reduction_ratio(&original, &kept);
        assert_abs_diff_eq!(nr.ratio, 0.81, epsilon = 1e-9);

        assert_eq!(noise_reduction_ratio(&original, &original).ratio, 0.0);

        let mixed = [(100.0, 100.0), (50.0, 50.0), (130.0, 100.0)];
        let clean = [(100.0, 100.0), (50.0, 50.0)];
        assert_eq!(noise_reduction_ratio(&mixed, &clean).ratio, 1.0);

        let empty = noise_reduction_ratio(&mixed, &[]);
        assert!(empty.all_removed);
        assert_eq!(empty.ratio, 1.0);

        let exact = [(1.0, 1.0)];
        assert_eq!(noise_reduction_ratio(&exact, &exact).ratio, 0.0);
    }

    proptest! {
        #[test]
        fn f1_matches_brute_force(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
            let pred: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            let tp = pairs.iter().filter(|p| p.0 && p.1).count() as f64;
            let pp = pred.iter().filter(|&&p| p).count() as f64;
            let ap = truth.iter().filter(|&&t| t).count() as f64;
            let expect = if pp + ap == 0.0 { 0.0 } else { 2.0 * tp / (pp + ap) };
            prop_assert!((f1_score(&labels(&pred), &truth) - expect).abs() < 1e-12);
        }

        #[test]
        fn dropping_clean_reports_never_beats_dropping_noisiest(
            noises in prop::collection::vec(0.0f64..1.0, 2..9),
            zeros in 1usize..4,
        ) {
            let mut original: Vec<(f64, f64)> = noises.iter().map(|&e| (100.0 * (1.0 + e), 100.0)).collect();
            original.extend((0..zeros).map(|_| (100.0, 100.0)));
            let total = original.len();
            // drop one zero-noise report
            let drop_clean = &original[..total - 1];
            // brute force: best single drop
            let best = (0..total)
                .map(|skip| {
                    let kept: Vec<(f64, f64)> = original.iter().enumerate().filter(|(i, _)| *i != skip).map(|(_, x)| *x).collect();
                    noise_reduction_ratio(&original, &kept).ratio
                })
                .fold(f64::MIN, f64::max);
            prop_assert!(noise_reduction_ratio(&original, drop_clean).ratio <= best + 1e-12);
        }
    }
}
