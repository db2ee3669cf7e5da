//! Ground-truth prediction behind a pluggable interface.
//!
//! A predictor consumes the per-region slot means of the slots preceding the
//! target and emits one optional prediction per region. The classical
//! forecasters here stand in for a learned spatio-temporal network; a
//! separately trained model can be plugged in through [`load_external`].

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, MeanVector};
use crate::simulator::GroundTruthSeries;

/// Predicted ground truth per `(slot, region)`. Unlisted cells are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionGrid {
    cells: BTreeMap<(u32, u32), f64>,
}

impl PredictionGrid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot: u32, region: u32, value: f64) {
        debug_assert!(value.is_finite());
        self.cells.insert((slot, region), value);
    }

    pub fn get(&self, slot: u32, region: u32) -> Option<f64> {
        self.cells.get(&(slot, region)).copied()
    }

    /// Predictions for `slot` as a dense per-region vector (`regions` long).
    pub fn slot_vector(&self, slot: u32, regions: u32) -> Vec<Option<f64>> {
        (1..=regions).map(|n| self.get(slot, n)).collect()
    }

    pub fn set_slot(&mut self, slot: u32, values: &[Option<f64>]) {
        for (i, v) in values.iter().enumerate() {
            if let Some(v) = v {
                self.insert(slot, i as u32 + 1, *v);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        self.cells.iter().map(|(&(s, n), &v)| (s, n, v))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(PREDICTION_HEADER).map_err(model::csv_io)?;
        for (s, n, v) in self.iter() {
            w.write_record([s.to_string(), n.to_string(), v.to_string()])
                .map_err(model::csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, origin: &str) -> Result<Self> {
        let mut grid = Self::new();
        for (line, f) in model::read_rows(input, origin, &PREDICTION_HEADER)? {
            let slot = model::parse_field(&f[0], origin, line, "slot")?;
            let region = model::parse_field(&f[1], origin, line, "region")?;
            let ghat = model::parse_finite(&f[2], origin, line, "ghat")?;
            grid.insert(slot, region, ghat);
        }
        Ok(grid)
    }
}

pub const PREDICTION_HEADER: [&str; 3] = ["slot", "region", "ghat"];

/// Loads an external prediction file with header `slot,region,ghat`.
pub fn load_external(path: &Path) -> Result<PredictionGrid> {
    let file = model::open_input(path)?;
    PredictionGrid::read_csv(file, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Persistence,
    MovingAverage,
    SeasonalNaive,
    OracleNoisy,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    /// Input window `p` for the moving average (and the seasonal fallback).
    pub window: usize,
    /// Seasonal period `S` in slots.
    pub season: usize,
    /// Relative noise level of the oracle predictor.
    pub oracle_noise: f64,
    /// Prediction file for the `external` kind.
    pub path: Option<PathBuf>,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            kind: PredictorKind::SeasonalNaive,
            window: 5,
            season: 48,
            oracle_noise: 0.05,
            path: None,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::config("predictor.window", "must be at least 1"));
        }
        if self.season == 0 {
            return Err(Error::config("predictor.season", "must be at least 1"));
        }
        if !(self.oracle_noise >= 0.0 && self.oracle_noise.is_finite()) {
            return Err(Error::config("predictor.oracle_noise", "must be finite and >= 0"));
        }
        if self.kind == PredictorKind::External && self.path.is_none() {
            return Err(Error::config("predictor.path", "required for the external predictor"));
        }
        Ok(())
    }
}

/// Produces the predicted ground truth for the slot following `history`.
///
/// `history` is chronological and contiguous; its last entry is slot
/// `target - 1`. The result has one entry per region; `None` means no
/// prediction could be formed for that region.
pub trait Predictor: Send + Sync {
    fn predict(&self, history: &[MeanVector], target: i64, regions: usize) -> Vec<Option<f64>>;
}

/// Carries the latest slot means forward.
#[derive(Debug, Clone, Copy, Default)]
pub struct Persistence;

impl Predictor for Persistence {
    fn predict(&self, history: &[MeanVector], target: i64, regions: usize) -> Vec<Option<f64>> {
        match lookup(history, target - 1) {
            Some(mv) => (1..=regions as u32).map(|n| mv.get(n)).collect(),
            None => vec![None; regions],
        }
    }
}

/// Mean of each region's available means over the last `window` slots.
#[derive(Debug, Clone, Copy)]
pub struct MovingAverage {
    pub window: usize,
}

impl Predictor for MovingAverage {
    fn predict(&self, history: &[MeanVector], target: i64, regions: usize) -> Vec<Option<f64>> {
        let lo = target - self.window as i64;
        let recent: Vec<&MeanVector> = history
            .iter()
            .rev()
            .take_while(|mv| mv.slot >= lo)
            .filter(|mv| mv.slot < target)
            .collect();
        (1..=regions as u32)
            .map(|n| {
                let (sum, count) = recent
                    .iter()
                    .rev()
                    .filter_map(|mv| mv.get(n))
                    .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
                (count > 0).then(|| sum / count as f64)
            })
            .collect()
    }
}

/// `Ĝ^t = M^{t-S}` entrywise.
#[derive(Debug, Clone, Copy)]
pub struct SeasonalNaive {
    pub season: usize,
}

impl Predictor for SeasonalNaive {
    fn predict(&self, history: &[MeanVector], target: i64, regions: usize) -> Vec<Option<f64>> {
        match lookup(history, target - self.season as i64) {
            Some(mv) => (1..=regions as u32).map(|n| mv.get(n)).collect(),
            None => vec![None; regions],
        }
    }
}

/// Uses `primary` wherever it yields a value and `fallback` elsewhere.
pub struct Chain<P, F> {
    pub primary: P,
    pub fallback: F,
}

impl<P: Predictor, F: Predictor> Predictor for Chain<P, F> {
    fn predict(&self, history: &[MeanVector], target: i64, regions: usize) -> Vec<Option<f64>> {
        let first = self.primary.predict(history, target, regions);
        if first.iter().all(Option::is_some) {
            return first;
        }
        let second = self.fallback.predict(history, target, regions);
        first.into_iter().zip(second).map(|(a, b)| a.or(b)).collect()
    }
}

/// Serves a precomputed grid, ignoring the history.
#[derive(Debug, Clone)]
pub struct GridPredictor(pub PredictionGrid);

impl Predictor for GridPredictor {
    fn predict(&self, _history: &[MeanVector], target: i64, regions: usize) -> Vec<Option<f64>> {
        match u32::try_from(target) {
            Ok(slot) => self.0.slot_vector(slot, regions as u32),
            Err(_) => vec![None; regions],
        }
    }
}

fn lookup(history: &[MeanVector], slot: i64) -> Option<&MeanVector> {
    let last = history.last()?.slot;
    let back = usize::try_from(last - slot).ok()?;
    let idx = history.len().checked_sub(back + 1)?;
    let mv = &history[idx];
    if mv.slot == slot {
        Some(mv)
    } else {
        history.iter().find(|mv| mv.slot == slot)
    }
}

/// Fills absent predictions with the region's most recent available mean.
/// Regions that were never observed stay absent.
pub fn fill_from_latest_mean(predicted: &mut [Option<f64>], history: &[MeanVector]) {
    for (i, slot) in predicted.iter_mut().enumerate() {
        if slot.is_none() {
            let region = i as u32 + 1;
            *slot = history.iter().rev().find_map(|mv| mv.get(region));
        }
    }
}

/// Perturbs the true series cell by cell: `Ĝ = G · (1 + η)`, `η ~ N(0, σ²)`.
pub fn oracle_predict(truth: &GroundTruthSeries, noise: f64, seed: u64) -> PredictionGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite standard deviation");
    let mut grid = PredictionGrid::new();
    for slot in 1..=truth.slots() {
        for region in 1..=truth.regions() {
            let g = truth.value(slot, region);
            let eta = if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
            grid.insert(slot, region, g * (1.0 + eta));
        }
    }
    grid
}
