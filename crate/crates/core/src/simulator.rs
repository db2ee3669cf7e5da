//! Reproducible synthetic crowdsensing world.
//!
//! A scenario is a pure function of its configuration and seed: a seasonal,
//! spatially correlated ground-truth field, a population of normal and
//! malicious users with fixed submission schedules, the reports they emit,
//! and the optional scenario injectors (bursty level drops, sparsity, noisy
//! history, low-noise attackers).

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, MeanVector, RegionGrid, SensingReport, SlotBatch};

// independent RNG streams derived from one scenario seed
const STREAM_TRUTH: u64 = 1;
const STREAM_POPULATION: u64 = 2;
const STREAM_EMISSION: u64 = 3;
const STREAM_BURSTY: u64 = 4;
const STREAM_SPARSITY: u64 = 5;
const STREAM_HISTORY: u64 = 6;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// True values `G_n^t` for slots `1..=slots` and regions `1..=regions`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSeries {
    slots: u32,
    regions: u32,
    values: Vec<f64>,
}

impl GroundTruthSeries {
    pub fn from_fn(slots: u32, regions: u32, mut f: impl FnMut(u32, u32) -> f64) -> Self {
        let mut values = Vec::with_capacity((slots * regions) as usize);
        for t in 1..=slots {
            for n in 1..=regions {
                values.push(f(t, n));
            }
        }
        Self { slots, regions, values }
    }

    pub fn slots(&self) -> u32 {
        self.slots
    }

    pub fn regions(&self) -> u32 {
        self.regions
    }

    fn offset(&self, slot: u32, region: u32) -> usize {
        assert!(
            (1..=self.slots).contains(&slot) && (1..=self.regions).contains(&region),
            "cell ({slot}, {region}) outside the series"
        );
        ((slot - 1) * self.regions + (region - 1)) as usize
    }

    pub fn value(&self, slot: u32, region: u32) -> f64 {
        self.values[self.offset(slot, region)]
    }

    pub fn scale(&mut self, slot: u32, region: u32, factor: f64) {
        let i = self.offset(slot, region);
        self.values[i] *= factor;
    }

    pub fn slot_vector(&self, slot: u32) -> MeanVector {
        MeanVector {
            slot: i64::from(slot),
            means: (1..=self.regions).map(|n| Some(self.value(slot, n))).collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRUTH_HEADER).map_err(model::csv_io)?;
        for t in 1..=self.slots {
            for n in 1..=self.regions {
                w.write_record([t.to_string(), n.to_string(), self.value(t, n).to_string()])
                    .map_err(model::csv_io)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a dense `slot,region,value` table. Every cell of the
    /// `max slot × max region` rectangle must be present.
    pub fn read_csv<R: Read>(input: R, origin: &str) -> Result<Self> {
        let rows = model::read_rows(input, origin, &TRUTH_HEADER)?;
        let mut cells = Vec::with_capacity(rows.len());
        for (line, f) in rows {
            let slot: u32 = model::parse_field(&f[0], origin, line, "slot")?;
            let region: u32 = model::parse_field(&f[1], origin, line, "region")?;
            let value = model::parse_finite(&f[2], origin, line, "value")?;
            if slot == 0 || region == 0 {
                return Err(Error::Format {
                    path: origin.into(),
                    line,
                    reason: "slots and regions are 1-based".into(),
                });
            }
            cells.push((slot, region, value));
        }
        let slots = cells.iter().map(|c| c.0).max().unwrap_or(0);
        let regions = cells.iter().map(|c| c.1).max().unwrap_or(0);
        let mut values = vec![f64::NAN; (slots * regions) as usize];
        for (s, n, v) in cells {
            values[((s - 1) * regions + (n - 1)) as usize] = v;
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Format {
                path: origin.into(),
                line: 0,
                reason: format!("ground truth must cover every cell of {slots} slots x {regions} regions"),
            });
        }
        Ok(Self { slots, regions, values })
    }
}

pub const TRUTH_HEADER: [&str; 3] = ["slot", "region", "value"];

/// Parameters of the synthetic ground-truth field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TruthModel {
    /// Mean base level across regions.
    pub base_level: f64,
    /// Log-scale spread of regional base levels.
    pub base_spread: f64,
    /// Relative amplitude of the daily cycle.
    pub amplitude: f64,
    /// Period of the daily cycle in slots.
    pub season: u32,
    /// Spread of regional phase offsets (radians).
    pub phase_spread: f64,
    /// Stationary std of the city-wide relative level drift.
    pub global_noise: f64,
    /// Per-slot autocorrelation of the city-wide drift.
    pub global_persistence: f64,
    /// Stationary std of per-region relative fluctuations.
    pub regional_noise: f64,
    /// Per-slot autocorrelation of the per-region fluctuations.
    pub regional_persistence: f64,
}

impl Default for TruthModel {
    fn default() -> Self {
        Self {
            base_level: 100.0,
            base_spread: 0.3,
            amplitude: 0.3,
            season: 48,
            phase_spread: 0.3,
            global_noise: 0.0,
            global_persistence: 0.98,
            regional_noise: 0.01,
            regional_persistence: 0.9,
        }
    }
}

/// Largest allowed base-level ratio between grid neighbours.
const NEIGHBOUR_RATIO: f64 = 1.2;

impl TruthModel {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("truth.base_level", self.base_level > 0.0),
            ("truth.base_spread", self.base_spread >= 0.0),
            ("truth.amplitude", (0.0..1.0).contains(&self.amplitude)),
            ("truth.season", self.season >= 1),
            ("truth.phase_spread", self.phase_spread >= 0.0),
            ("truth.global_noise", self.global_noise >= 0.0),
            (
                "truth.global_persistence",
                (0.0..1.0).contains(&self.global_persistence),
            ),
            ("truth.regional_noise", self.regional_noise >= 0.0),
            (
                "truth.regional_persistence",
                (0.0..1.0).contains(&self.regional_persistence),
            ),
        ];
        match checks.iter().find(|(_, ok)| !ok) {
            Some((field, _)) => Err(Error::config(*field, "out of range")),
            None => Ok(()),
        }
    }

    /// Spatially smooth base levels: neighbours differ by at most 20%.
    pub fn base_levels(&self, grid: RegionGrid, rng: &mut impl Rng) -> Vec<f64> {
        let (h, w) = (grid.height as usize, grid.width as usize);
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let mut field: Vec<f64> = (0..h * w).map(|_| std.sample(rng)).collect();
        // two box-filter passes produce the spatial correlation
        for _ in 0..2 {
            field = (0..h * w)
                .map(|i| {
                    let (r, c) = (i / w, i % w);
                    let mut acc = 0.0;
                    let mut cnt = 0.0;
                    for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                            if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                                acc += field[rr as usize * w + cc as usize];
                                cnt += 1.0;
                            }
                        }
                    }
                    acc / cnt
                })
                .collect();
        }
        let mean = field.iter().sum::<f64>() / field.len() as f64;
        let var = field.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / field.len() as f64;
        let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
        let mut logs: Vec<f64> = field.iter().map(|z| (z - mean) / sd * self.base_spread).collect();

        let limit = NEIGHBOUR_RATIO.ln() * 0.99;
        for _ in 0..200 {
            let mut changed = false;
            for i in 0..h * w {
                let (r, c) = (i / w, i % w);
                for j in [(r + 1 < h).then(|| i + w), (c + 1 < w).then(|| i + 1)]
                    .into_iter()
                    .flatten()
                {
                    let diff = logs[i] - logs[j];
                    if diff.abs() > limit {
                        let excess = (diff.abs() - limit) / 2.0 * diff.signum();
                        logs[i] -= excess;
                        logs[j] += excess;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        logs.into_iter().map(|l| self.base_level * l.exp()).collect()
    }

    /// Generates slots `first..=last` (both may be non-positive) and returns
    /// them row-major per slot.
    fn generate(&self, grid: RegionGrid, first: i64, last: i64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rng_for(seed, STREAM_TRUTH);
        let regions = grid.region_count() as usize;
        let base = self.base_levels(grid, &mut rng);
        let phase0 = rng.random_range(0.0..TAU);
        let phase_noise = Normal::new(0.0, self.phase_spread.max(0.0)).expect("finite");
        let phases: Vec<f64> = (0..regions).map(|_| phase0 + phase_noise.sample(&mut rng)).collect();
        let std = Normal::new(0.0, 1.0).expect("unit normal");

        let innov = |sd: f64, phi: f64| sd * (1.0 - phi * phi).sqrt();
        let g_innov = innov(self.global_noise, self.global_persistence);
        let u_innov = innov(self.regional_noise, self.regional_persistence);
        let mut global = self.global_noise * std.sample(&mut rng);
        let mut local: Vec<f64> = (0..regions)
            .map(|_| self.regional_noise * std.sample(&mut rng))
            .collect();

        let period = f64::from(self.season);
        (first..=last)
            .map(|t| {
                if t > first {
                    global = self.global_persistence * global + g_innov * std.sample(&mut rng);
                    for u in local.iter_mut() {
                        *u = self.regional_persistence * *u + u_innov * std.sample(&mut rng);
                    }
                }
                (0..regions)
                    .map(|i| {
                        let cycle = 1.0 + self.amplitude * (TAU * t as f64 / period + phases[i]).sin();
                        let g = base[i] * cycle * (1.0 + global + local[i]);
                        g.max(0.01 * base[i])
                    })
                    .collect()
            })
            .collect()
    }
}

/// Synthetic ground truth for task slots `1..=slots` using the default model.
pub fn generate_truth(slots: u32, grid: RegionGrid, seed: u64) -> GroundTruthSeries {
    generate_truth_with(&TruthModel::default(), slots, 0, grid, seed).0
}

/// Task truth plus `history` slots of pre-task truth (slots `1-history..=0`).
pub fn generate_truth_with(
    model: &TruthModel,
    slots: u32,
    history: u32,
    grid: RegionGrid,
    seed: u64,
) -> (GroundTruthSeries, Vec<MeanVector>) {
    let first = 1 - i64::from(history);
    let rows = model.generate(grid, first, i64::from(slots), seed);
    let regions = grid.region_count();
    let (past, task) = rows.split_at(history as usize);
    let history = past
        .iter()
        .enumerate()
        .map(|(i, row)| MeanVector {
            slot: first + i as i64,
            means: row.iter().map(|&v| Some(v)).collect(),
        })
        .collect();
    let truth = GroundTruthSeries {
        slots,
        regions,
        values: task.iter().flatten().copied().collect(),
    };
    (truth, history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BurstyConfig {
    pub sets: u32,
    pub slots: u32,
    pub regions: u32,
    pub factor: f64,
}

impl Default for BurstyConfig {
    fn default() -> Self {
        Self {
            sets: 3,
            slots: 7,
            regions: 4,
            factor: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Injectors {
    pub bursty: Option<BurstyConfig>,
    /// Fraction of emitted reports retained.
    pub sparsity: Option<f64>,
    /// Fraction of history cells left unperturbed.
    pub clean_fraction: Option<f64>,
    /// Replacement mean of the malicious error distribution.
    pub low_noise_mu: Option<f64>,
}

/// Relative std of the multiplicative noise applied to perturbed history.
pub const HISTORY_NOISE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub users: u32,
    pub malicious_fraction: f64,
    /// Submissions per user `k`.
    pub submissions: u32,
    /// Task length `T` in slots.
    pub slots: u32,
    pub grid: RegionGrid,
    /// Mean relative error of malicious reports.
    pub mu: f64,
    /// Std of the relative error of malicious reports.
    pub sigma: f64,
    /// Relative std of normal users' errors (zero: exact reports).
    pub normal_noise: f64,
    /// Slots of pre-task history available to the predictor.
    pub history_slots: u32,
    pub seed: u64,
    pub truth: TruthModel,
    pub injectors: Injectors,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            users: 100,
            malicious_fraction: 0.1,
            submissions: 30,
            slots: 120,
            grid: RegionGrid { height: 4, width: 8 },
            mu: 0.3,
            sigma: 0.1,
            normal_noise: 0.0,
            history_slots: 48,
            seed: 1,
            truth: TruthModel::default(),
            injectors: Injectors::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.users == 0 {
            return Err(Error::config("scenario.users", "must be positive"));
        }
        if !(0.0..0.5).contains(&self.malicious_fraction) {
            return Err(Error::config("scenario.malicious_fraction", "must lie in [0, 0.5)"));
        }
        if !(self.submissions > 0 && self.submissions < self.slots) {
            return Err(Error::config("scenario.submissions", "require 0 < k < T"));
        }
        if self.grid.height == 0 || self.grid.width == 0 {
            return Err(Error::config("scenario.grid", "height and width must be positive"));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(Error::config("scenario.mu", "must be finite and >= 0"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("scenario.sigma", "must be finite and >= 0"));
        }
        if !(self.normal_noise >= 0.0 && self.normal_noise.is_finite()) {
            return Err(Error::config("scenario.normal_noise", "must be finite and >= 0"));
        }
        self.truth.validate()?;
        let inj = &self.injectors;
        if let Some(b) = &inj.bursty {
            if b.sets == 0 || b.slots == 0 || b.regions == 0 {
                return Err(Error::config("scenario.injectors.bursty", "sizes must be positive"));
            }
            if b.slots > self.slots || b.regions > self.grid.region_count() {
                return Err(Error::config(
                    "scenario.injectors.bursty",
                    "window larger than the task",
                ));
            }
            if u64::from(b.sets) * u64::from(b.slots) * u64::from(b.regions)
                > u64::from(self.slots) * u64::from(self.grid.region_count()) / 2
            {
                return Err(Error::config(
                    "scenario.injectors.bursty",
                    "windows cover too much of the task",
                ));
            }
            if !(b.factor > 0.0 && b.factor.is_finite()) {
                return Err(Error::config("scenario.injectors.bursty.factor", "must be positive"));
            }
        }
        if let Some(s) = inj.sparsity {
            if !(s > 0.0 && s <= 1.0) {
                return Err(Error::config("scenario.injectors.sparsity", "must lie in (0, 1]"));
            }
        }
        if let Some(c) = inj.clean_fraction {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::config("scenario.injectors.clean_fraction", "must lie in [0, 1]"));
            }
        }
        if let Some(m) = inj.low_noise_mu {
            if !(m >= 0.0 && m.is_finite()) {
                return Err(Error::config(
                    "scenario.injectors.low_noise_mu",
                    "must be finite and >= 0",
                ));
            }
        }
        Ok(())
    }

    pub fn regions(&self) -> u32 {
        self.grid.region_count()
    }

    pub fn malicious_count(&self) -> u32 {
        (f64::from(self.users) * self.malicious_fraction).floor() as u32
    }

    /// Malicious error mean after the low-noise injector.
    pub fn effective_mu(&self) -> f64 {
        self.injectors.low_noise_mu.unwrap_or(self.mu)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuProfile {
    pub id: u32,
    pub is_malicious: bool,
    /// `(slot, region)` assignments sorted by slot.
    pub schedule: Vec<(u32, u32)>,
}

/// Decides where a user senses at an assigned slot.
pub trait PlacementPolicy {
    fn region(&self, mu: u32, slot: u32, regions: u32, rng: &mut dyn rand::RngCore) -> u32;
}

/// Uniformly random region per submission.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformPlacement;

impl PlacementPolicy for UniformPlacement {
    fn region(&self, _mu: u32, _slot: u32, regions: u32, rng: &mut dyn rand::RngCore) -> u32 {
        rng.random_range(1..=regions)
    }
}

pub fn build_population(cfg: &ScenarioConfig) -> Vec<MuProfile> {
    build_population_with(cfg, &UniformPlacement)
}

pub fn build_population_with(cfg: &ScenarioConfig, placement: &dyn PlacementPolicy) -> Vec<MuProfile> {
    let mut rng = rng_for(cfg.seed, STREAM_POPULATION);
    let malicious: std::collections::HashSet<usize> =
        sample(&mut rng, cfg.users as usize, cfg.malicious_count() as usize)
            .into_iter()
            .collect();
    (0..cfg.users)
        .map(|i| {
            let mut slots: Vec<u32> = sample(&mut rng, cfg.slots as usize, cfg.submissions as usize)
                .into_iter()
                .map(|s| s as u32 + 1)
                .collect();
            slots.sort_unstable();
            let schedule = slots
                .into_iter()
                .map(|s| (s, placement.region(i + 1, s, cfg.regions(), &mut rng)))
                .collect();
            MuProfile {
                id: i + 1,
                is_malicious: malicious.contains(&(i as usize)),
                schedule,
            }
        })
        .collect()
}

/// Emits one batch per slot. Normal users report the truth (optionally with
/// small relative noise); malicious users report `G·(1 + e)`, `e ~ N(μ, σ²)`.
pub fn emit_reports(truth: &GroundTruthSeries, profiles: &[MuProfile], cfg: &ScenarioConfig) -> Result<Vec<SlotBatch>> {
    let mut rng = rng_for(cfg.seed, STREAM_EMISSION);
    let attack =
        Normal::new(cfg.effective_mu(), cfg.sigma).map_err(|e| Error::config("scenario.sigma", e.to_string()))?;
    let honest =
        Normal::new(0.0, cfg.normal_noise).map_err(|e| Error::config("scenario.normal_noise", e.to_string()))?;
    let mut per_slot: Vec<Vec<SensingReport>> = vec![Vec::new(); truth.slots() as usize];
    for p in profiles {
        for &(slot, region) in &p.schedule {
            let g = truth.value(slot, region);
            let value = if p.is_malicious {
                g * (1.0 + attack.sample(&mut rng))
            } else if cfg.normal_noise > 0.0 {
                g * (1.0 + honest.sample(&mut rng))
            } else {
                g
            };
            per_slot[(slot - 1) as usize].push(SensingReport::new(p.id, slot, region, value));
        }
    }
    per_slot
        .into_iter()
        .enumerate()
        .map(|(i, rs)| SlotBatch::new(i as u32 + 1, rs))
        .collect()
}

/// A bursty window: `slots` consecutive slots × consecutive regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BurstWindow {
    pub first_slot: u32,
    pub first_region: u32,
    pub slots: u32,
    pub regions: u32,
}

impl BurstWindow {
    pub fn cells(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (self.first_slot..self.first_slot + self.slots)
            .flat_map(move |t| (self.first_region..self.first_region + self.regions).map(move |n| (t, n)))
    }

    fn overlaps(&self, other: &BurstWindow) -> bool {
        self.first_slot < other.first_slot + other.slots
            && other.first_slot < self.first_slot + self.slots
            && self.first_region < other.first_region + other.regions
            && other.first_region < self.first_region + self.regions
    }
}

/// Scales the truth inside randomly placed, disjoint windows. Region runs
/// stay within one grid row when the row is wide enough.
pub fn apply_bursty(
    truth: &mut GroundTruthSeries,
    grid: RegionGrid,
    bursty: &BurstyConfig,
    seed: u64,
) -> Vec<BurstWindow> {
    let mut rng = rng_for(seed, STREAM_BURSTY);
    let mut windows: Vec<BurstWindow> = Vec::new();
    while windows.len() < bursty.sets as usize {
        let first_slot = rng.random_range(1..=truth.slots() - bursty.slots + 1);
        let first_region = if bursty.regions <= grid.width {
            let row = rng.random_range(0..grid.height);
            let col = rng.random_range(1..=grid.width - bursty.regions + 1);
            row * grid.width + col
        } else {
            rng.random_range(1..=truth.regions() - bursty.regions + 1)
        };
        let w = BurstWindow {
            first_slot,
            first_region,
            slots: bursty.slots,
            regions: bursty.regions,
        };
        if windows.iter().all(|o| !o.overlaps(&w)) {
            windows.push(w);
        }
    }
    for w in &windows {
        for (t, n) in w.cells() {
            truth.scale(t, n, bursty.factor);
        }
    }
    windows
}

/// Keeps `round(fraction · total)` reports chosen uniformly at random.
pub fn apply_sparsity(batches: &mut [SlotBatch], fraction: f64, seed: u64) {
    let mut rng = rng_for(seed, STREAM_SPARSITY);
    let total: usize = batches.iter().map(SlotBatch::len).sum();
    let keep = ((fraction * total as f64).round() as usize).min(total);
    let mut chosen = vec![false; total];
    for i in sample(&mut rng, total, keep) {
        chosen[i] = true;
    }
    let mut idx = 0;
    for b in batches.iter_mut() {
        b.retain(|_| {
            let k = chosen[idx];
            idx += 1;
            k
        });
    }
}

/// Multiplies `round((1 - clean) · cells)` history cells by `1 + ξ`,
/// `ξ ~ N(0, 0.1²)`. Returns the number of perturbed cells.
pub fn apply_noisy_history(history: &mut [MeanVector], clean_fraction: f64, seed: u64) -> usize {
    let mut rng = rng_for(seed, STREAM_HISTORY);
    let cells: Vec<(usize, usize)> = history
        .iter()
        .enumerate()
        .flat_map(|(s, mv)| {
            mv.means
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_some())
                .map(move |(n, _)| (s, n))
        })
        .collect();
    let noisy = (((1.0 - clean_fraction) * cells.len() as f64).round() as usize).min(cells.len());
    let xi = Normal::new(0.0, HISTORY_NOISE).expect("finite");
    let mut picked: Vec<usize> = sample(&mut rng, cells.len(), noisy).into_iter().collect();
    picked.sort_unstable();
    for i in picked {
        let (s, n) = cells[i];
        if let Some(v) = history[s].means[n].as_mut() {
            *v *= 1.0 + xi.sample(&mut rng);
        }
    }
    noisy
}

/// A fully realised scenario.
#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    /// Task-slot ground truth after any bursty scaling.
    pub truth: GroundTruthSeries,
    /// Pre-task observations available to the predictor.
    pub history: Vec<MeanVector>,
    pub profiles: Vec<MuProfile>,
    pub batches: Vec<SlotBatch>,
    pub bursts: Vec<BurstWindow>,
}

impl World {
    pub fn malicious_flags(&self) -> Vec<bool> {
        self.profiles.iter().map(|p| p.is_malicious).collect()
    }

    pub fn reports(&self) -> impl Iterator<Item = &SensingReport> {
        self.batches.iter().flat_map(|b| b.reports().iter())
    }
}

/// Builds the whole scenario from its configuration.
pub fn simulate(cfg: &ScenarioConfig) -> Result<World> {
    cfg.validate()?;
    let (mut truth, mut history) = generate_truth_with(&cfg.truth, cfg.slots, cfg.history_slots, cfg.grid, cfg.seed);
    let bursts = match &cfg.injectors.bursty {
        Some(b) => apply_bursty(&mut truth, cfg.grid, b, cfg.seed),
        None => Vec::new(),
    };
    let profiles = build_population(cfg);
    let mut batches = emit_reports(&truth, &profiles, cfg)?;
    if let Some(f) = cfg.injectors.sparsity {
        apply_sparsity(&mut batches, f, cfg.seed);
    }
    if let Some(c) = cfg.injectors.clean_fraction {
        apply_noisy_history(&mut history, c, cfg.seed);
    }
    Ok(World {
        config: cfg.clone(),
        truth,
        history,
        profiles,
        batches,
        bursts,
    })
}

pub fn write_history<W: Write>(out: W, history: &[MeanVector]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRUTH_HEADER).map_err(model::csv_io)?;
    for mv in history {
        for (i, v) in mv.means.iter().enumerate() {
            if let Some(v) = v {
                w.write_record([mv.slot.to_string(), (i + 1).to_string(), v.to_string()])
                    .map_err(model::csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads pre-task history (`slot,region,value`, slots ≤ 0).
pub fn read_history<R: Read>(input: R, origin: &str, regions: u32) -> Result<Vec<MeanVector>> {
    let mut out: Vec<MeanVector> = Vec::new();
    for (line, f) in model::read_rows(input, origin, &TRUTH_HEADER)? {
        let slot: i64 = model::parse_field(&f[0], origin, line, "slot")?;
        let region: u32 = model::parse_field(&f[1], origin, line, "region")?;
        let value = model::parse_finite(&f[2], origin, line, "value")?;
        if slot > 0 || region == 0 || region > regions {
            return Err(Error::Format {
                path: origin.into(),
                line,
                reason: "history rows need slot <= 0 and a valid region".into(),
            });
        }
        match out.binary_search_by_key(&slot, |mv| mv.slot) {
            Ok(i) => out[i].means[region as usize - 1] = Some(value),
            Err(i) => {
                let mut means = vec![None; regions as usize];
                means[region as usize - 1] = Some(value);
                out.insert(i, MeanVector { slot, means });
            }
        }
    }
    Ok(out)
}

pub fn write_population<W: Write>(out: W, profiles: &[MuProfile]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mu", "malicious"]).map_err(model::csv_io)?;
    for p in profiles {
        w.write_record([p.id.to_string(), u8::from(p.is_malicious).to_string()])
            .map_err(model::csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads `mu,malicious` labels; users must be numbered `1..=count`.
pub fn read_population<R: Read>(input: R, origin: &str) -> Result<Vec<bool>> {
    let mut labels = Vec::new();
    for (line, f) in model::read_rows(input, origin, &["mu", "malicious"])? {
        let mu: usize = model::parse_field(&f[0], origin, line, "mu")?;
        let flag: u8 = model::parse_field(&f[1], origin, line, "malicious")?;
        if mu != labels.len() + 1 || flag > 1 {
            return Err(Error::Format {
                path: origin.into(),
                line,
                reason: "users must be listed in order 1..=I with malicious in {0,1}".into(),
            });
        }
        labels.push(flag == 1);
    }
    Ok(labels)
}

pub fn read_truth_file(path: &Path) -> Result<GroundTruthSeries> {
    let f = model::open_input(path)?;
    GroundTruthSeries::read_csv(f, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            users: 20,
            submissions: 10,
            slots: 40,
            ..Default::default()
        }
    }

    #[test]
    fn truth_is_deterministic_and_positive() {
        let grid = RegionGrid::new(4, 8).unwrap();
        let a = generate_truth(120, grid, 7);
        let b = generate_truth(120, grid, 7);
        assert_eq!(a, b);
        assert_ne!(a, generate_truth(120, grid, 8));
        assert!(a.values.iter().all(|&v| v > 0.0 && v.is_finite()));
    }

    #[test]
    fn neighbouring_bases_within_twenty_percent() {
        let grid = RegionGrid::new(4, 8).unwrap();
        for seed in 0..20 {
            let base = TruthModel::default().base_levels(grid, &mut rng_for(seed, 0));
            for h in 1..=4 {
                for w in 1..=8 {
                    let i = (grid.region_index(h, w).unwrap() - 1) as usize;
                    if w < 8 {
                        let r = base[i] / base[i + 1];
                        assert!((1.0 / 1.2..=1.2).contains(&r), "{r}");
                    }
                    if h < 4 {
                        let r = base[i] / base[i + 8];
                        assert!((1.0 / 1.2..=1.2).contains(&r), "{r}");
                    }
                }
            }
        }
    }

    #[test]
    fn adjacent_bases_are_correlated() {
        let grid = RegionGrid::new(4, 8).unwrap();
        for seed in 0..10 {
            let base = TruthModel::default().base_levels(grid, &mut rng_for(seed, STREAM_TRUTH));
            let mut pairs = Vec::new();
            for i in 0..32usize {
                if i % 8 < 7 {
                    pairs.push((base[i], base[i + 1]));
                }
                if i + 8 < 32 {
                    pairs.push((base[i], base[i + 8]));
                }
            }
            // symmetric: each adjacency counted in both orders
            let xs: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
            let ys: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [b, a]).collect();
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
            let pearson = cov / (vx * vy).sqrt();
            assert!(pearson >= 0.5, "seed {seed}: {pearson}");
        }
    }

    #[test]
    fn malicious_error_mean_matches_mu() {
        let draws = 10_000u32;
        let truth = GroundTruthSeries::from_fn(draws, 1, |_, _| 100.0);
        let profile = MuProfile {
            id: 1,
            is_malicious: true,
            schedule: (1..=draws).map(|t| (t, 1)).collect(),
        };
        let cfg = ScenarioConfig::default();
        let batches = emit_reports(&truth, &[profile], &cfg).unwrap();
        let mean = batches
            .iter()
            .flat_map(|b| b.reports())
            .map(|r| r.value / 100.0 - 1.0)
            .sum::<f64>()
            / f64::from(draws);
        assert!((mean - cfg.mu).abs() <= 3.0 * cfg.sigma / 100.0, "{mean}");
    }

    #[test]
    fn population_counts_and_schedules() {
        let cfg = ScenarioConfig::default();
        let pop = build_population(&cfg);
        assert_eq!(pop.len(), 100);
        assert_eq!(pop.iter().filter(|p| p.is_malicious).count(), 10);
        for p in &pop {
            assert_eq!(p.schedule.len(), 30);
            let slots: HashSet<u32> = p.schedule.iter().map(|s| s.0).collect();
            assert_eq!(slots.len(), 30);
            assert!(p
                .schedule
                .iter()
                .all(|&(t, n)| (1..=120).contains(&t) && (1..=32).contains(&n)));
        }
        assert_eq!(pop, build_population(&cfg));
    }

    #[test]
    fn normal_reports_equal_truth() {
        let world = simulate(&small()).unwrap();
        let malicious = world.malicious_flags();
        for r in world.reports() {
            if !malicious[r.mu as usize - 1] {
                assert_eq!(r.value, world.truth.value(r.slot, r.region));
            }
        }
        assert_eq!(world.reports().count(), 20 * 10);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let ok = ScenarioConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            ScenarioConfig {
                submissions: 120,
                ..ok.clone()
            },
            ScenarioConfig {
                submissions: 0,
                ..ok.clone()
            },
            ScenarioConfig {
                malicious_fraction: 0.5,
                ..ok.clone()
            },
            ScenarioConfig {
                sigma: -0.1,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn bursty_windows_are_disjoint_and_scaled() {
        let cfg = ScenarioConfig::default();
        let (mut truth, _) = generate_truth_with(&cfg.truth, 120, 0, cfg.grid, 3);
        let orig = truth.clone();
        let windows = apply_bursty(&mut truth, cfg.grid, &BurstyConfig::default(), 3);
        assert_eq!(windows.len(), 3);
        let cells: HashSet<(u32, u32)> = windows.iter().flat_map(|w| w.cells()).collect();
        assert_eq!(cells.len(), 84);
        for w in &windows {
            let row = |n: u32| (n - 1) / cfg.grid.width;
            assert_eq!(row(w.first_region), row(w.first_region + w.regions - 1));
        }
        for t in 1..=120 {
            for n in 1..=32 {
                let expect = if cells.contains(&(t, n)) { 0.5 } else { 1.0 };
                assert_eq!(truth.value(t, n), orig.value(t, n) * expect);
            }
        }
    }

    #[test]
    fn sparsity_keeps_requested_fraction() {
        let world = simulate(&ScenarioConfig::default()).unwrap();
        let mut batches = world.batches.clone();
        apply_sparsity(&mut batches, 0.6, 9);
        let kept: usize = batches.iter().map(SlotBatch::len).sum();
        assert_eq!(kept, 1800);
    }

    #[test]
    fn noisy_history_leaves_clean_fraction() {
        let cfg = ScenarioConfig::default();
        let (_, clean) = generate_truth_with(&cfg.truth, 120, 48, cfg.grid, 4);
        let mut noisy = clean.clone();
        let perturbed = apply_noisy_history(&mut noisy, 0.5, 4);
        let cells = 48 * 32;
        assert_eq!(perturbed, cells / 2);
        let unchanged = clean
            .iter()
            .zip(&noisy)
            .flat_map(|(a, b)| a.means.iter().zip(&b.means))
            .filter(|(a, b)| a == b)
            .count();
        assert_eq!(unchanged, cells / 2);
    }

    #[test]
    fn history_and_population_files_roundtrip() {
        let world = simulate(&small()).unwrap();
        let mut buf = Vec::new();
        write_history(&mut buf, &world.history).unwrap();
        assert_eq!(read_history(&buf[..], "m", 32).unwrap(), world.history);
        let mut buf = Vec::new();
        write_population(&mut buf, &world.profiles).unwrap();
        assert_eq!(read_population(&buf[..], "m").unwrap(), world.malicious_flags());
        let mut buf = Vec::new();
        world.truth.write_csv(&mut buf).unwrap();
        assert_eq!(GroundTruthSeries::read_csv(&buf[..], "m").unwrap(), world.truth);
    }
}
