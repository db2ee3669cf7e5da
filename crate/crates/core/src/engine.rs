//! Reputation-based truth discovery with implication-adjusted data quality.
//!
//! Each slot, every report gets an expected quality from the reputations of
//! the users who submitted the same value, adjusted by the implication-
//! weighted expected quality of everything in the data cache. Quality levels
//! and reputations are then re-evaluated alternately until the largest
//! reputation change drops below `epsilon`.

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{self, CircumstanceState, DataFeature};
use crate::model::{self, DataCache, SensingReport, SlotBatch};

/// Users whose final reputation falls strictly below this are flagged.
pub const MALICIOUS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TdConfig {
    /// Reputation increase rate.
    pub alpha: f64,
    /// Reputation decrease rate.
    pub beta: f64,
    /// Quality threshold separating kept from rejected data.
    pub gamma: f64,
    /// Weight of the implication term in the quality score.
    pub rho: f64,
    /// Data cache length `l` in slots.
    pub cache_slots: usize,
    /// Convergence threshold on the largest per-iteration reputation change.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Reputations are kept within `[clamp, 1 - clamp]`.
    pub reputation_clamp: f64,
    /// Relative tolerance under which two values count as equal.
    pub value_tolerance: f64,
    pub initial_reputation: f64,
}

impl Default for TdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.018,
            beta: 0.06,
            gamma: 0.5,
            rho: 0.02,
            cache_slots: 5,
            epsilon: 0.001,
            max_iters: 100,
            reputation_clamp: 0.001,
            value_tolerance: 1e-9,
            initial_reputation: 0.5,
        }
    }
}

impl TdConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !(open_unit(self.alpha) && open_unit(self.beta) && self.alpha < self.beta) {
            return Err(Error::config("td.alpha/td.beta", "require 0 < alpha < beta < 1"));
        }
        if !open_unit(self.gamma) {
            return Err(Error::config("td.gamma", "must lie in (0, 1)"));
        }
        if !open_unit(self.rho) {
            return Err(Error::config("td.rho", "must lie in (0, 1)"));
        }
        if self.cache_slots == 0 {
            return Err(Error::config("td.cache_slots", "must be at least 1"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("td.epsilon", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("td.max_iters", "must be at least 1"));
        }
        if !(self.reputation_clamp > 0.0 && self.reputation_clamp < 0.5) {
            return Err(Error::config("td.reputation_clamp", "must lie in (0, 0.5)"));
        }
        if !(self.value_tolerance >= 0.0 && self.value_tolerance.is_finite()) {
            return Err(Error::config("td.value_tolerance", "must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.initial_reputation) {
            return Err(Error::config("td.initial_reputation", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn clamp_reputation(&self, r: f64) -> f64 {
        r.clamp(self.reputation_clamp, 1.0 - self.reputation_clamp)
    }
}

/// `R = -ln(1 - r)` after clamping `r` into `[clamp, 1 - clamp]`.
pub fn reputation_score(r: f64, clamp: f64) -> f64 {
    -(1.0 - r.clamp(clamp, 1.0 - clamp)).ln()
}

/// Piecewise-linear reputation update without the final clamp.
pub fn reputation_update_unclamped(r: f64, q: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    if q >= gamma {
        0.5 * (1.0 + alpha * ((q - gamma) / (1.0 - gamma)) + (1.0 - alpha) * (2.0 * r - 1.0))
    } else {
        0.5 * (1.0 + beta * ((q - gamma) / gamma) + (1.0 - beta) * (2.0 * r - 1.0))
    }
}

pub fn reputation_update(r: f64, q: f64, cfg: &TdConfig) -> f64 {
    cfg.clamp_reputation(reputation_update_unclamped(r, q, cfg.alpha, cfg.beta, cfg.gamma))
}

/// Users in `batch` who reported a value equal to `report`'s (within the
/// relative tolerance) in the same region. Always contains `report.mu`.
pub fn matching_set(report: &SensingReport, batch: &SlotBatch, tolerance: f64) -> Vec<u32> {
    let scale = report.value.abs().max(1.0);
    let mut ids: Vec<u32> = batch
        .in_region(report.region)
        .filter(|o| o.mu == report.mu || (o.value - report.value).abs() <= tolerance * scale)
        .map(|o| o.mu)
        .collect();
    if !ids.contains(&report.mu) {
        ids.push(report.mu);
    }
    ids
}

/// `Q̂ = Σ R_j` over the matching users; `reputation` maps a user to `r`.
pub fn expected_quality_score(matching: &[u32], reputation: impl Fn(u32) -> f64, clamp: f64) -> f64 {
    matching.iter().map(|&mu| reputation_score(reputation(mu), clamp)).sum()
}

/// `q̂ = 1 - Π(1 - r_j)` over the matching users.
pub fn expected_quality_product(matching: &[u32], reputation: impl Fn(u32) -> f64, clamp: f64) -> f64 {
    1.0 - matching
        .iter()
        .map(|&mu| 1.0 - reputation(mu).clamp(clamp, 1.0 - clamp))
        .product::<f64>()
}

/// Overall quality score `max(Q̂ + ρ·Σ Q̂_j·imp_j, 0)` and its level `1 - e^{-Q}`.
pub fn overall_quality(expected_score: f64, support: impl IntoIterator<Item = (f64, f64)>, rho: f64) -> (f64, f64) {
    let sum: f64 = support.into_iter().map(|(score, imp)| score * imp).sum();
    let score = (expected_score + rho * sum).max(0.0);
    (score, 1.0 - (-score).exp())
}

/// Per-user reputation trajectories. Users are numbered `1..=count`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReputationLedger {
    current: Vec<f64>,
    history: Vec<Vec<f64>>,
}

impl ReputationLedger {
    pub fn new(users: usize, initial: f64) -> Self {
        let current = vec![initial; users];
        Self {
            history: vec![current.clone()],
            current,
        }
    }

    pub fn users(&self) -> usize {
        self.current.len()
    }

    pub fn get(&self, mu: u32) -> f64 {
        self.current[mu as usize - 1]
    }

    pub fn current(&self) -> &[f64] {
        &self.current
    }

    /// Snapshots after slot `s` live at index `s`; index 0 is the initial state.
    pub fn history(&self) -> &[Vec<f64>] {
        &self.history
    }

    pub fn slots_processed(&self) -> usize {
        self.history.len() - 1
    }

    fn check_user(&self, mu: u32) -> Result<()> {
        if mu == 0 || mu as usize > self.current.len() {
            return Err(Error::UnknownUser {
                mu,
                count: self.current.len(),
            });
        }
        Ok(())
    }

    fn commit(&mut self, reputations: Vec<f64>) {
        self.history.push(reputations.clone());
        self.current = reputations;
    }

    pub fn write_trajectory<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["slot", "mu", "reputation"]).map_err(model::csv_io)?;
        for (slot, reps) in self.history.iter().enumerate() {
            for (i, r) in reps.iter().enumerate() {
                w.write_record([slot.to_string(), (i + 1).to_string(), r.to_string()])
                    .map_err(model::csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserLabel {
    Normal,
    Malicious,
}

/// Labels each user from their final reputation.
pub fn classify_mus(ledger: &ReputationLedger) -> Vec<UserLabel> {
    ledger.current().iter().map(|&r| classify_reputation(r)).collect()
}

pub fn classify_reputation(r: f64) -> UserLabel {
    if r < MALICIOUS_THRESHOLD {
        UserLabel::Malicious
    } else {
        UserLabel::Normal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QualityRecord {
    pub report: SensingReport,
    pub expected_quality: f64,
    pub expected_score: f64,
    pub score: f64,
    pub quality: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotOutcome {
    pub slot: u32,
    pub records: Vec<QualityRecord>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest reputation change of each iteration.
    pub deltas: Vec<f64>,
}

impl SlotOutcome {
    pub fn kept(&self) -> impl Iterator<Item = &SensingReport> {
        self.records.iter().filter(|r| r.kept).map(|r| &r.report)
    }
}

pub const QUALITY_HEADER: [&str; 8] = ["slot", "mu", "region", "value", "q", "kept", "iterations", "converged"];

/// Writes per-report outcomes. With `method`, a leading `method` column is
/// added so several evaluators can share one table.
pub fn write_quality_records<W: Write>(out: W, outcomes: &[SlotOutcome], method: Option<&str>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = method.map(|_| "method").into_iter().collect();
    header.extend(QUALITY_HEADER);
    w.write_record(&header).map_err(model::csv_io)?;
    for o in outcomes {
        for rec in &o.records {
            let mut row: Vec<String> = method.map(str::to_string).into_iter().collect();
            row.extend([
                o.slot.to_string(),
                rec.report.mu.to_string(),
                rec.report.region.to_string(),
                rec.report.value.to_string(),
                rec.quality.to_string(),
                u8::from(rec.kept).to_string(),
                o.iterations.to_string(),
                u8::from(o.converged).to_string(),
            ]);
            w.write_record(&row).map_err(model::csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

struct CachedEntry {
    feature: Option<DataFeature>,
    matching: Vec<u32>,
}

/// Slot-by-slot truth discovery state: reputations, circumstance errors and
/// the data cache with each cached slot's predictions.
#[derive(Debug, Clone)]
pub struct TruthDiscovery {
    cfg: TdConfig,
    regions: u32,
    ledger: ReputationLedger,
    circumstance: CircumstanceState,
    cache: DataCache,
    cached_predictions: VecDeque<Vec<Option<f64>>>,
}

impl TruthDiscovery {
    pub fn new(cfg: TdConfig, users: usize, regions: u32) -> Result<Self> {
        cfg.validate()?;
        let ledger = ReputationLedger::new(users, cfg.clamp_reputation(cfg.initial_reputation));
        Ok(Self {
            cache: DataCache::new(cfg.cache_slots)?,
            circumstance: CircumstanceState::new(regions as usize),
            cached_predictions: VecDeque::with_capacity(cfg.cache_slots + 1),
            regions,
            ledger,
            cfg,
        })
    }

    pub fn config(&self) -> &TdConfig {
        &self.cfg
    }

    pub fn ledger(&self) -> &ReputationLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> ReputationLedger {
        self.ledger
    }

    pub fn circumstance(&self) -> &CircumstanceState {
        &self.circumstance
    }

    pub fn cache(&self) -> &DataCache {
        &self.cache
    }

    /// Processes one slot. `predicted` holds the (fallback-resolved)
    /// predicted ground truth per region; absent entries mean the region's
    /// reports are scored from reputations alone.
    pub fn run_slot(&mut self, batch: SlotBatch, predicted: &[Option<f64>]) -> Result<SlotOutcome> {
        if predicted.len() != self.regions as usize {
            return Err(Error::config(
                "predictions",
                format!("expected {} regions, got {}", self.regions, predicted.len()),
            ));
        }
        for r in batch.reports() {
            self.ledger.check_user(r.mu)?;
            if r.region == 0 || r.region > self.regions {
                return Err(Error::config(
                    "reports",
                    format!("region {} outside 1..={}", r.region, self.regions),
                ));
            }
        }
        let slot = batch.slot();
        if self.cache.push(batch)?.is_some() {
            self.cached_predictions.pop_front();
        }
        self.cached_predictions.push_back(predicted.to_vec());
        let batch = self.cache.batches().last().expect("just pushed");

        if batch.is_empty() {
            self.ledger.commit(self.ledger.current.clone());
            return Ok(SlotOutcome {
                slot,
                records: Vec::new(),
                iterations: 0,
                converged: true,
                deltas: Vec::new(),
            });
        }

        for region in 1..=self.regions {
            let errors: Vec<f64> = batch
                .in_region(region)
                .filter_map(|r| predicted[region as usize - 1].and_then(|g| features::sensing_error(r.value, g)))
                .collect();
            self.circumstance.update(region, &errors);
        }

        let tolerance = self.cfg.value_tolerance;
        let entries: Vec<CachedEntry> = self
            .cache
            .batches()
            .zip(&self.cached_predictions)
            .flat_map(|(b, preds)| {
                let circumstance = &self.circumstance;
                b.reports().iter().map(move |r| CachedEntry {
                    feature: preds[r.region as usize - 1]
                        .map(|g| features::scaled_feature(r.value, g, circumstance.circumstance_error(r.region))),
                    matching: matching_set(r, b, tolerance),
                })
            })
            .collect();
        let offset = entries.len() - batch.len();

        let implications: Vec<Vec<f64>> = entries[offset..]
            .iter()
            .map(|current| match &current.feature {
                Some(f) => entries
                    .iter()
                    .map(|e| e.feature.as_ref().map_or(0.0, |g| features::implication(f, g)))
                    .collect(),
                None => vec![0.0; entries.len()],
            })
            .collect();

        let cfg = &self.cfg;
        let base = self.ledger.current.clone();
        let mut reps = base.clone();
        let mut scored = vec![(0.0, 0.0, 0.0); batch.len()];
        let mut deltas = Vec::new();
        let mut converged = false;
        while deltas.len() < cfg.max_iters {
            let scores: Vec<f64> = reps
                .iter()
                .map(|&r| reputation_score(r, cfg.reputation_clamp))
                .collect();
            let expected: Vec<f64> = entries
                .iter()
                .map(|e| e.matching.iter().map(|&mu| scores[mu as usize - 1]).sum())
                .collect();
            let updated: Vec<f64> = batch
                .reports()
                .iter()
                .enumerate()
                .map(|(k, r)| {
                    let own = expected[offset + k];
                    let (score, q) = overall_quality(
                        own,
                        expected.iter().copied().zip(implications[k].iter().copied()),
                        cfg.rho,
                    );
                    scored[k] = (own, score, q);
                    reputation_update(base[r.mu as usize - 1], q, cfg)
                })
                .collect();
            let mut delta_max = 0.0f64;
            for (r, new) in batch.reports().iter().zip(updated) {
                let slot_rep = &mut reps[r.mu as usize - 1];
                delta_max = delta_max.max((new - *slot_rep).abs());
                *slot_rep = new;
            }
            deltas.push(delta_max);
            if delta_max < cfg.epsilon {
                converged = true;
                break;
            }
        }

        let records = batch
            .reports()
            .iter()
            .zip(&scored)
            .map(|(r, &(expected_score, score, quality))| QualityRecord {
                report: *r,
                expected_quality: 1.0 - (-expected_score).exp(),
                expected_score,
                score,
                quality,
                kept: quality >= cfg.gamma,
            })
            .collect();
        self.ledger.commit(reps);
        Ok(SlotOutcome {
            slot,
            records,
            iterations: deltas.len(),
            converged,
            deltas,
        })
    }
}

/// Applies one reputation update per report from externally assessed quality
/// levels, as the distance-based comparators do. Unassessed reports (`None`)
/// are kept without touching the reputation. Returns the kept flags.
pub fn apply_fixed_quality(
    ledger: &mut ReputationLedger,
    reports: &[SensingReport],
    qualities: &[Option<f64>],
    cfg: &TdConfig,
) -> Result<Vec<bool>> {
    let mut reps = ledger.current.clone();
    for (r, q) in reports.iter().zip(qualities) {
        ledger.check_user(r.mu)?;
        if let Some(q) = q {
            reps[r.mu as usize - 1] = reputation_update(ledger.get(r.mu), *q, cfg);
        }
    }
    ledger.commit(reps);
    Ok(qualities.iter().map(|q| q.is_none_or(|q| q >= cfg.gamma)).collect())
}
