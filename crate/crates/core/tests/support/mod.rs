//! A literal, unoptimised transcription of the per-slot algorithm: every
//! quantity (circumstance errors, features, implications, matching sets) is
//! recomputed inside the alternating loop. Production hoists the loop
//! invariants; outputs must agree bit for bit.

use std::collections::VecDeque;

use crowdtruth::engine::{SlotOutcome, TdConfig, TruthDiscovery};
use crowdtruth::model::{SensingReport, SlotBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const USERS: usize = 5;
pub const REGIONS: u32 = 2;
pub const SLOTS: u32 = 10;

pub struct Instance {
    pub batches: Vec<SlotBatch>,
    pub predictions: Vec<Vec<Option<f64>>>,
}

pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let malicious: Vec<bool> = (0..USERS).map(|i| i == 0 || rng.random_bool(0.2)).collect();
    let mut batches = Vec::new();
    let mut predictions = Vec::new();
    for slot in 1..=SLOTS {
        let truth: Vec<f64> = (0..REGIONS).map(|_| rng.random_range(20..80) as f64).collect();
        let mut reports = Vec::new();
        if !rng.random_bool(0.1) {
            for mu in 1..=USERS as u32 {
                if !rng.random_bool(0.75) {
                    continue;
                }
                let region = rng.random_range(1..=REGIONS);
                let g = truth[region as usize - 1];
                let value = if malicious[mu as usize - 1] {
                    g * (1.0 + rng.random_range(0.1..0.5))
                } else if rng.random_bool(0.8) {
                    g
                } else {
                    g * (1.0 + rng.random_range(-0.05..0.05))
                };
                reports.push(SensingReport::new(mu, slot, region, value));
            }
        }
        batches.push(SlotBatch::new(slot, reports).unwrap());
        predictions.push(
            truth
                .iter()
                .map(|&g| (!rng.random_bool(0.1)).then(|| g * (1.0 + rng.random_range(-0.2..0.2))))
                .collect(),
        );
    }
    Instance { batches, predictions }
}

struct RefOutcome {
    quality: Vec<f64>,
    expected_score: Vec<f64>,
    score: Vec<f64>,
    kept: Vec<bool>,
    iterations: usize,
    converged: bool,
    deltas: Vec<f64>,
}

fn rep_score(r: f64, clamp: f64) -> f64 {
    let r = r.clamp(clamp, 1.0 - clamp);
    -(1.0 - r).ln()
}

fn update(r: f64, q: f64, c: &TdConfig) -> f64 {
    let next = if q >= c.gamma {
        0.5 * (1.0 + c.alpha * ((q - c.gamma) / (1.0 - c.gamma)) + (1.0 - c.alpha) * (2.0 * r - 1.0))
    } else {
        0.5 * (1.0 + c.beta * ((q - c.gamma) / c.gamma) + (1.0 - c.beta) * (2.0 * r - 1.0))
    };
    next.clamp(c.reputation_clamp, 1.0 - c.reputation_clamp)
}

fn feature(v: f64, g: f64, dc: f64) -> [f64; 2] {
    [g * dc, v - (1.0 + dc) * g]
}

fn cosine(a: [f64; 2], b: [f64; 2]) -> f64 {
    let na = a[0].hypot(a[1]);
    let nb = b[0].hypot(b[1]);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    ((a[0] * b[0] + a[1] * b[1]) / (na * nb)).clamp(-1.0, 1.0)
}

/// Expected quality score of `report` given the reputations `reps`.
fn expected(report: &SensingReport, slot_reports: &[SensingReport], reps: &[f64], c: &TdConfig) -> f64 {
    let scale = report.value.abs().max(1.0);
    let mut total = 0.0;
    for other in slot_reports {
        if other.region == report.region
            && (other.mu == report.mu || (other.value - report.value).abs() <= c.value_tolerance * scale)
        {
            total += rep_score(reps[other.mu as usize - 1], c.reputation_clamp);
        }
    }
    total
}

struct Reference {
    cfg: TdConfig,
    reps: Vec<f64>,
    circ_count: Vec<u64>,
    circ_mean: Vec<f64>,
    cache: VecDeque<(Vec<SensingReport>, Vec<Option<f64>>)>,
}

impl Reference {
    fn new(cfg: TdConfig) -> Self {
        Self {
            reps: vec![cfg.initial_reputation; USERS],
            circ_count: vec![0; REGIONS as usize],
            circ_mean: vec![0.0; REGIONS as usize],
            cache: VecDeque::new(),
            cfg,
        }
    }

    fn slot(&mut self, reports: &[SensingReport], preds: &[Option<f64>]) -> RefOutcome {
        let c = self.cfg.clone();
        self.cache.push_back((reports.to_vec(), preds.to_vec()));
        if self.cache.len() > c.cache_slots {
            self.cache.pop_front();
        }
        if reports.is_empty() {
            return RefOutcome {
                quality: vec![],
                expected_score: vec![],
                score: vec![],
                kept: vec![],
                iterations: 0,
                converged: true,
                deltas: vec![],
            };
        }
        for (n, pred) in preds.iter().enumerate() {
            let mut sum = 0.0;
            let mut added = 0u64;
            for r in reports.iter().filter(|r| r.region as usize == n + 1) {
                if let Some(g) = *pred {
                    if g.abs() >= 1e-9 {
                        sum += (r.value - g) / g;
                        added += 1;
                    }
                }
            }
            let count = self.circ_count[n] + added;
            if count > 0 {
                self.circ_mean[n] = (self.circ_mean[n] * self.circ_count[n] as f64 + sum) / count as f64;
            }
            self.circ_count[n] = count;
        }

        let previous = self.reps.clone();
        let mut current = previous.clone();
        let mut out = RefOutcome {
            quality: vec![0.0; reports.len()],
            expected_score: vec![0.0; reports.len()],
            score: vec![0.0; reports.len()],
            kept: vec![false; reports.len()],
            iterations: 0,
            converged: false,
            deltas: vec![],
        };
        while out.iterations < c.max_iters {
            let mut next = current.clone();
            for (i, rep) in reports.iter().enumerate() {
                let own = expected(rep, reports, &current, &c);
                let mut support = 0.0;
                for (cached, cached_preds) in &self.cache {
                    for other in cached {
                        let q_j = expected(other, cached, &current, &c);
                        let imp = match (preds[rep.region as usize - 1], cached_preds[other.region as usize - 1]) {
                            (Some(g_i), Some(g_j)) => cosine(
                                feature(rep.value, g_i, self.circ_mean[rep.region as usize - 1]),
                                feature(other.value, g_j, self.circ_mean[other.region as usize - 1]),
                            ),
                            _ => 0.0,
                        };
                        support += q_j * imp;
                    }
                }
                let score = (own + c.rho * support).max(0.0);
                let q = 1.0 - (-score).exp();
                out.expected_score[i] = own;
                out.score[i] = score;
                out.quality[i] = q;
                out.kept[i] = q >= c.gamma;
                next[rep.mu as usize - 1] = update(previous[rep.mu as usize - 1], q, &c);
            }
            let delta = reports
                .iter()
                .map(|r| (next[r.mu as usize - 1] - current[r.mu as usize - 1]).abs())
                .fold(0.0, f64::max);
            current = next;
            out.iterations += 1;
            out.deltas.push(delta);
            if delta < c.epsilon {
                out.converged = true;
                break;
            }
        }
        self.reps = current;
        out
    }
}

fn bits(xs: &[f64]) -> Vec<u64> {
    xs.iter().map(|x| x.to_bits()).collect()
}

fn same(got: &SlotOutcome, want: &RefOutcome) -> Result<(), &'static str> {
    let field = |f: fn(&crowdtruth::engine::QualityRecord) -> f64| bits(&got.records.iter().map(f).collect::<Vec<_>>());
    if got.iterations != want.iterations {
        return Err("iterations");
    }
    if got.converged != want.converged {
        return Err("converged");
    }
    if bits(&got.deltas) != bits(&want.deltas) {
        return Err("deltas");
    }
    if field(|r| r.quality) != bits(&want.quality) {
        return Err("quality");
    }
    if field(|r| r.expected_score) != bits(&want.expected_score) {
        return Err("expected score");
    }
    if field(|r| r.score) != bits(&want.score) {
        return Err("score");
    }
    if got.records.iter().map(|r| r.kept).collect::<Vec<_>>() != want.kept {
        return Err("kept");
    }
    Ok(())
}

/// Runs production and reference side by side over one seeded instance and
/// reports the first diverging quantity.
pub fn compare(seed: u64, cfg: TdConfig) -> Result<(), String> {
    let inst = instance(seed);
    let mut prod = TruthDiscovery::new(cfg.clone(), USERS, REGIONS).unwrap();
    let mut reference = Reference::new(cfg);
    for (batch, preds) in inst.batches.iter().zip(&inst.predictions) {
        let want = reference.slot(batch.reports(), preds);
        let got = prod.run_slot(batch.clone(), preds).map_err(|e| e.to_string())?;
        same(&got, &want).map_err(|what| format!("seed {seed} slot {}: {what}", got.slot))?;
        if bits(prod.ledger().current()) != bits(&reference.reps) {
            return Err(format!("seed {seed} slot {}: reputations", got.slot));
        }
    }
    Ok(())
}
