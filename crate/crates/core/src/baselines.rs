//! Distance-based comparators.
//!
//! Each comparator estimates the ground truth of a report's cell, maps the
//! relative distance between the reported value and the estimate to a
//! quality level, and feeds that quality into the shared reputation update.
//!
//! - WEI: mean of every report in the region so far, this slot included.
//! - CNB: the predicted ground truth itself.
//! - TD: CRH-style weighted truth discovery over the region's reports in the
//!   cache window, starting from the providers' reputations as weights.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::engine::{self, QualityRecord, ReputationLedger, SlotOutcome, TdConfig};
use crate::error::{Error, Result};
use crate::features::PREDICTION_EPSILON;
use crate::model::SlotBatch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Wei,
    Cnb,
    Td,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceQualityMap {
    /// Decay scale in relative-error units.
    pub lambda: f64,
}

impl Default for DistanceQualityMap {
    fn default() -> Self {
        Self { lambda: 0.3 }
    }
}

impl DistanceQualityMap {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("baseline.lambda", "must be positive"));
        }
        Ok(())
    }

    pub fn quality(&self, value: f64, estimate: f64) -> f64 {
        distance_quality(value, estimate, self.lambda)
    }
}

/// `e^{-δ/λ}` with `δ = |v - ĝ| / max(|ĝ|, τ_g)`.
pub fn distance_quality(value: f64, estimate: f64, lambda: f64) -> f64 {
    let delta = (value - estimate).abs() / estimate.abs().max(PREDICTION_EPSILON);
    (-delta / lambda).exp()
}

/// Arithmetic mean of the given values, `None` if there are none.
pub fn wei_estimate(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// The prediction for the cell; absence is resolved upstream.
pub fn cnb_estimate(predicted: &[Option<f64>], region: u32) -> Option<f64> {
    predicted.get(region as usize - 1).copied().flatten()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TdEstimate {
    pub estimate: f64,
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Alternates a weighted mean with log-ratio weights
/// `w_j = max(0, -ln((e_j + ε̃) / Σ_k (e_k + ε̃)))`, `e_j = |v_j - ĝ|`,
/// until the estimate moves by less than `epsilon` (relative).
pub fn td_estimate(values: &[f64], weights: &[f64], epsilon: f64, max_iters: usize) -> Option<TdEstimate> {
    if values.is_empty() || values.len() != weights.len() {
        return None;
    }
    let weighted = |w: &[f64]| {
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            values.iter().zip(w).map(|(v, w)| v * w).sum::<f64>() / total
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        }
    };
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-9 * scale;
    let mut w = weights.to_vec();
    let mut estimate = weighted(&w);
    if values.len() == 1 {
        return Some(TdEstimate {
            estimate,
            weights: w,
            iterations: 0,
            converged: true,
        });
    }
    for it in 1..=max_iters {
        let errors: Vec<f64> = values.iter().map(|v| (v - estimate).abs() + floor).collect();
        let total: f64 = errors.iter().sum();
        w = errors.iter().map(|e| (-(e / total).ln()).max(0.0)).collect();
        let next = weighted(&w);
        let moved = (next - estimate).abs();
        estimate = next;
        if moved <= epsilon * estimate.abs().max(1.0) {
            return Some(TdEstimate {
                estimate,
                weights: w,
                iterations: it,
                converged: true,
            });
        }
    }
    Some(TdEstimate {
        estimate,
        weights: w,
        iterations: max_iters,
        converged: false,
    })
}

/// Slot-by-slot driver for one comparator.
#[derive(Debug, Clone)]
pub struct BaselineRunner {
    kind: BaselineKind,
    map: DistanceQualityMap,
    cfg: TdConfig,
    ledger: ReputationLedger,
    region_sums: Vec<(f64, usize)>,
    window: VecDeque<SlotBatch>,
}

impl BaselineRunner {
    pub fn new(kind: BaselineKind, map: DistanceQualityMap, cfg: TdConfig, users: usize, regions: u32) -> Result<Self> {
        cfg.validate()?;
        map.validate()?;
        Ok(Self {
            kind,
            map,
            ledger: ReputationLedger::new(users, cfg.clamp_reputation(cfg.initial_reputation)),
            region_sums: vec![(0.0, 0); regions as usize],
            window: VecDeque::with_capacity(cfg.cache_slots + 1),
            cfg,
        })
    }

    pub fn ledger(&self) -> &ReputationLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> ReputationLedger {
        self.ledger
    }

    /// Scores one slot. Reports whose cell has no estimate are kept and
    /// leave their provider's reputation untouched.
    pub fn run_slot(&mut self, batch: SlotBatch, predicted: &[Option<f64>]) -> Result<SlotOutcome> {
        let regions = self.region_sums.len();
        if predicted.len() != regions {
            return Err(Error::config(
                "predictions",
                format!("expected {regions} regions, got {}", predicted.len()),
            ));
        }
        if let Some(r) = batch
            .reports()
            .iter()
            .find(|r| r.region == 0 || r.region as usize > regions)
        {
            return Err(Error::config(
                "reports",
                format!("region {} outside 1..={regions}", r.region),
            ));
        }
        if let Some(last) = self.window.back() {
            if batch.slot() != last.slot() + 1 {
                return Err(Error::Sequencing {
                    expected: last.slot() + 1,
                    got: batch.slot(),
                });
            }
        }
        self.window.push_back(batch);
        if self.window.len() > self.cfg.cache_slots {
            self.window.pop_front();
        }
        let batch = self.window.back().expect("just pushed");
        let slot = batch.slot();

        for r in batch.reports() {
            let entry = &mut self.region_sums[r.region as usize - 1];
            entry.0 += r.value;
            entry.1 += 1;
        }

        let mut estimates: Vec<Option<f64>> = vec![None; regions];
        let mut iterations = 0usize;
        let mut converged = true;
        for region in 1..=regions as u32 {
            if batch.in_region(region).next().is_none() {
                continue;
            }
            let i = region as usize - 1;
            estimates[i] = match self.kind {
                BaselineKind::Wei => {
                    let (sum, count) = self.region_sums[i];
                    (count > 0).then(|| sum / count as f64)
                }
                BaselineKind::Cnb => cnb_estimate(predicted, region),
                BaselineKind::Td => {
                    // pooled over the cache window, seeded with the providers' reputations
                    let (values, weights): (Vec<f64>, Vec<f64>) = self
                        .window
                        .iter()
                        .flat_map(|b| b.in_region(region))
                        .map(|r| (r.value, self.ledger.get(r.mu)))
                        .unzip();
                    td_estimate(&values, &weights, self.cfg.epsilon, self.cfg.max_iters).map(|est| {
                        iterations = iterations.max(est.iterations);
                        converged &= est.converged;
                        est.estimate
                    })
                }
            };
        }

        let qualities: Vec<Option<f64>> = batch
            .reports()
            .iter()
            .map(|r| estimates[r.region as usize - 1].map(|g| self.map.quality(r.value, g)))
            .collect();
        let kept = engine::apply_fixed_quality(&mut self.ledger, batch.reports(), &qualities, &self.cfg)?;

        let records = batch
            .reports()
            .iter()
            .zip(qualities.iter().zip(kept))
            .map(|(r, (q, kept))| {
                let quality = q.unwrap_or(self.cfg.gamma);
                QualityRecord {
                    report: *r,
                    expected_quality: quality,
                    expected_score: -(1.0 - quality).ln(),
                    score: -(1.0 - quality).ln(),
                    quality,
                    kept,
                }
            })
            .collect();
        Ok(SlotOutcome {
            slot,
            records,
            iterations: iterations.max(1),
            converged,
            deltas: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SensingReport;
    use approx::assert_abs_diff_eq;

    #[test]
    fn distance_quality_examples() {
        assert_eq!(distance_quality(100.0, 100.0, 0.3), 1.0);
        assert_abs_diff_eq!(distance_quality(130.0, 100.0, 0.3), (-1.0f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(distance_quality(130.0, 100.0, 0.3), 0.3679, epsilon = 1e-4);
        assert!(distance_quality(1e12, 1.0, 0.3) < 1e-300);
        // boundary used to pick the default λ
        assert!(distance_quality(120.7, 100.0, 0.3) > 0.5);
        assert!(distance_quality(121.0, 100.0, 0.3) < 0.5);
    }

    #[test]
    fn distance_quality_strictly_decreasing() {
        let mut last = 1.0 + 1e-12;
        for i in 0..200 {
            let q = distance_quality(100.0 + i as f64, 100.0, 0.3);
            assert!(q < last);
            last = q;
        }
    }

    #[test]
    fn wei_and_cnb_examples() {
        assert_eq!(wei_estimate(&[100.0, 110.0, 120.0]), Some(110.0));
        assert_eq!(wei_estimate(&[42.0]), Some(42.0));
        assert_eq!(wei_estimate(&[]), None);
        assert_eq!(cnb_estimate(&[None, Some(120.5)], 2), Some(120.5));
        assert_eq!(cnb_estimate(&[None, Some(120.5)], 1), None);
    }

    #[test]
    fn td_estimate_examples() {
        let single = td_estimate(&[7.5], &[1.0], 1e-3, 100).unwrap();
        assert_eq!(single.estimate, 7.5);
        assert_eq!(single.iterations, 0);

        let outlier = td_estimate(&[10.0, 10.0, 100.0], &[1.0; 3], 1e-3, 100).unwrap();
        assert!(outlier.converged);
        assert!((outlier.estimate - 10.0).abs() < 0.1, "{}", outlier.estimate);
        assert!(outlier.weights[2] < outlier.weights[0]);

        let same = td_estimate(&[4.0; 5], &[1.0; 5], 1e-3, 100).unwrap();
        assert_eq!(same.estimate, 4.0);
        assert!(td_estimate(&[], &[], 1e-3, 10).is_none());
    }

    #[test]
    fn td_estimate_reference_iteration() {
        // hand iteration of the log-ratio scheme on {10, 10, 100}
        let v = [10.0, 10.0, 100.0];
        let floor = 1e-9 * 100.0;
        let mut g = 40.0;
        for _ in 0..3 {
            let e: Vec<f64> = v.iter().map(|x: &f64| (x - g).abs() + floor).collect();
            let s: f64 = e.iter().sum();
            let w: Vec<f64> = e.iter().map(|x| -(x / s).ln()).collect();
            g = v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
        }
        let est = td_estimate(&v, &[1.0; 3], 0.0, 3).unwrap();
        assert_abs_diff_eq!(est.estimate, g, epsilon = 1e-12);
        assert!(g < 15.0);
    }

    #[test]
    fn td_estimate_symmetric_inputs_stay_centred() {
        let est = td_estimate(&[8.0, 9.0, 10.0, 11.0, 12.0], &[1.0; 5], 1e-6, 50).unwrap();
        assert_abs_diff_eq!(est.estimate, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn runner_scores_and_updates() {
        let cfg = TdConfig::default();
        let mut run = BaselineRunner::new(BaselineKind::Cnb, DistanceQualityMap::default(), cfg, 2, 1).unwrap();
        let batch = SlotBatch::new(
            1,
            vec![SensingReport::new(1, 1, 1, 100.0), SensingReport::new(2, 1, 1, 140.0)],
        )
        .unwrap();
        let out = run.run_slot(batch, &[Some(100.0)]).unwrap();
        assert!(out.records[0].kept);
        assert!(!out.records[1].kept);
        assert!(run.ledger().get(1) > 0.5);
        assert!(run.ledger().get(2) < 0.5);
    }

    #[test]
    fn td_pool_leans_on_reputable_providers() {
        let cfg = TdConfig {
            cache_slots: 1,
            ..TdConfig::default()
        };
        let mut run = BaselineRunner::new(BaselineKind::Td, DistanceQualityMap::default(), cfg, 3, 1).unwrap();
        let b1 = SlotBatch::new(
            1,
            vec![
                SensingReport::new(1, 1, 1, 100.0),
                SensingReport::new(2, 1, 1, 200.0),
                SensingReport::new(3, 1, 1, 100.0),
            ],
        )
        .unwrap();
        run.run_slot(b1, &[None]).unwrap();
        assert!(run.ledger().get(1) > 0.5 && run.ledger().get(2) < 0.5);
        // two values: equal weights would settle on the midpoint and keep both
        let b2 = SlotBatch::new(
            2,
            vec![SensingReport::new(1, 2, 1, 100.0), SensingReport::new(2, 2, 1, 130.0)],
        )
        .unwrap();
        let out = run.run_slot(b2, &[None]).unwrap();
        assert!(out.records[0].kept);
        assert!(!out.records[1].kept);
    }

    #[test]
    fn wei_includes_the_current_slot() {
        let cfg = TdConfig::default();
        let mut run = BaselineRunner::new(BaselineKind::Wei, DistanceQualityMap::default(), cfg, 2, 1).unwrap();
        // a lone first report is its own estimate
        let b1 = SlotBatch::new(1, vec![SensingReport::new(1, 1, 1, 100.0)]).unwrap();
        let out = run.run_slot(b1, &[None]).unwrap();
        assert_eq!(out.records[0].quality, 1.0);
        assert!(run.ledger().get(1) > 0.5);
        // mean of {100, 100, 160} = 120
        let b2 = SlotBatch::new(
            2,
            vec![SensingReport::new(1, 2, 1, 100.0), SensingReport::new(2, 2, 1, 160.0)],
        )
        .unwrap();
        let out = run.run_slot(b2, &[None]).unwrap();
        assert_abs_diff_eq!(
            out.records[1].quality,
            distance_quality(160.0, 120.0, 0.3),
            epsilon = 1e-15
        );
    }
}
