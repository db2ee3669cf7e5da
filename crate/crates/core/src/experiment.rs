//! End-to-end experiment pipeline: dataset → predictions → per-method slot
//! loop → metrics, plus the seeded repetition harness and parameter sweeps.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BaselineKind, BaselineRunner, DistanceQualityMap};
use crate::engine::{ReputationLedger, SlotOutcome, TdConfig, TruthDiscovery};
use crate::error::{Error, Result};
use crate::metrics::{self, RunMetrics};
use crate::model::{self, MeanVector, SlotBatch};
use crate::predictor::{
    self, Chain, GridPredictor, MovingAverage, Persistence, Predictor, PredictorConfig, PredictorKind, SeasonalNaive,
};
use crate::simulator::{self, GroundTruthSeries, ScenarioConfig, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Prbtd,
    Td,
    Cnb,
    Wei,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Prbtd, Method::Td, Method::Cnb, Method::Wei];

    pub fn name(self) -> &'static str {
        match self {
            Method::Prbtd => "prbtd",
            Method::Td => "td",
            Method::Cnb => "cnb",
            Method::Wei => "wei",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config("methods", format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub repetitions: usize,
    pub output: PathBuf,
    /// Directory with `truth.csv`, `reports.csv`, `users.csv` and optionally
    /// `history.csv`; when set, the data are read instead of simulated.
    pub inputs: Option<PathBuf>,
    pub scenario: ScenarioConfig,
    pub td: TdConfig,
    pub predictor: PredictorConfig,
    pub baseline: DistanceQualityMap,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            methods: Method::ALL.to_vec(),
            repetitions: 6,
            output: PathBuf::from("runs/default"),
            inputs: None,
            scenario: ScenarioConfig::default(),
            td: TdConfig::default(),
            predictor: PredictorConfig::default(),
            baseline: DistanceQualityMap::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method is required"));
        }
        if self.repetitions == 0 {
            return Err(Error::config("repetitions", "must be at least 1"));
        }
        self.scenario.validate()?;
        self.td.validate()?;
        self.predictor.validate()?;
        self.baseline.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config("config", e.to_string().trim_end()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::config("--config", format!("{} not found", path.display()))
            } else {
                Error::Io(e)
            }
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serialises")
    }

    /// Seeds of the repetitions: `seed, seed + 1, ...`.
    pub fn seeds(&self) -> Vec<u64> {
        (0..self.repetitions as u64).map(|i| self.scenario.seed + i).collect()
    }
}

/// Inputs of one run, whether simulated or read from disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub truth: GroundTruthSeries,
    pub history: Vec<MeanVector>,
    pub batches: Vec<SlotBatch>,
    pub malicious: Vec<bool>,
}

impl Dataset {
    pub fn regions(&self) -> u32 {
        self.truth.regions()
    }

    pub fn users(&self) -> usize {
        self.malicious.len()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let truth = simulator::read_truth_file(&dir.join(files::TRUTH))?;
        let reports = model::read_reports_file(&dir.join(files::REPORTS))?;
        let users = dir.join(files::USERS);
        let malicious = simulator::read_population(model::open_input(&users)?, &users.display().to_string())?;
        let history_path = dir.join(files::HISTORY);
        let history = if history_path.exists() {
            simulator::read_history(
                model::open_input(&history_path)?,
                &history_path.display().to_string(),
                truth.regions(),
            )?
        } else {
            Vec::new()
        };
        if let Some(r) = reports.iter().find(|r| r.region == 0 || r.region > truth.regions()) {
            return Err(Error::config(
                "reports",
                format!("region {} outside the truth grid", r.region),
            ));
        }
        let batches = model::batches_from_reports(&reports, truth.slots())?;
        Ok(Self {
            truth,
            history,
            batches,
            malicious,
        })
    }
}

impl From<World> for Dataset {
    fn from(w: World) -> Self {
        let malicious = w.malicious_flags();
        Self {
            truth: w.truth,
            history: w.history,
            batches: w.batches,
            malicious,
        }
    }
}

pub mod files {
    pub const TRUTH: &str = "truth.csv";
    pub const REPORTS: &str = "reports.csv";
    pub const HISTORY: &str = "history.csv";
    pub const USERS: &str = "users.csv";
    pub const MANIFEST: &str = "config.toml";
    pub const METRICS_JSON: &str = "metrics.jsonl";
    pub const METRICS_TABLE: &str = "metrics.csv";
    pub const PREDICTIONS: &str = "predictions.csv";
}

fn build_predictor(cfg: &PredictorConfig, truth: &GroundTruthSeries, seed: u64) -> Result<Box<dyn Predictor>> {
    Ok(match cfg.kind {
        PredictorKind::Persistence => Box::new(Persistence),
        PredictorKind::MovingAverage => Box::new(MovingAverage { window: cfg.window }),
        PredictorKind::SeasonalNaive => Box::new(Chain {
            primary: SeasonalNaive { season: cfg.season },
            fallback: MovingAverage { window: cfg.window },
        }),
        PredictorKind::OracleNoisy => Box::new(GridPredictor(predictor::oracle_predict(truth, cfg.oracle_noise, seed))),
        PredictorKind::External => {
            let path = cfg
                .path
                .as_deref()
                .ok_or_else(|| Error::config("predictor.path", "missing"))?;
            Box::new(GridPredictor(predictor::load_external(path)?))
        }
    })
}

/// Predicted ground truth for every task slot (index `t - 1`), computed
/// online from the history and the means of all reports before `t`, with
/// absent cells filled from the region's latest mean.
pub fn compute_predictions(data: &Dataset, cfg: &PredictorConfig, seed: u64) -> Result<Vec<Vec<Option<f64>>>> {
    let model = build_predictor(cfg, &data.truth, seed)?;
    let regions = data.regions();
    let mut history = data.history.clone();
    let mut out = Vec::with_capacity(data.batches.len());
    for batch in &data.batches {
        let target = i64::from(batch.slot());
        let mut predicted = model.predict(&history, target, regions as usize);
        predictor::fill_from_latest_mean(&mut predicted, &history);
        out.push(predicted);
        history.push(batch.mean_vector(regions));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct MethodRun {
    pub method: Method,
    pub outcomes: Vec<SlotOutcome>,
    pub ledger: ReputationLedger,
    pub slot_seconds: Vec<f64>,
}

impl MethodRun {
    pub fn mean_slot_seconds(&self) -> f64 {
        if self.slot_seconds.is_empty() {
            0.0
        } else {
            self.slot_seconds.iter().sum::<f64>() / self.slot_seconds.len() as f64
        }
    }

    pub fn nonconverged_slots(&self) -> usize {
        self.outcomes.iter().filter(|o| !o.converged).count()
    }
}

enum Evaluator {
    Prbtd(TruthDiscovery),
    Baseline(BaselineRunner),
}

impl Evaluator {
    fn run_slot(&mut self, batch: SlotBatch, predicted: &[Option<f64>]) -> Result<SlotOutcome> {
        match self {
            Evaluator::Prbtd(td) => td.run_slot(batch, predicted),
            Evaluator::Baseline(b) => b.run_slot(batch, predicted),
        }
    }

    fn into_ledger(self) -> ReputationLedger {
        match self {
            Evaluator::Prbtd(td) => td.into_ledger(),
            Evaluator::Baseline(b) => b.into_ledger(),
        }
    }
}

pub fn run_method(
    data: &Dataset,
    method: Method,
    cfg: &ExperimentConfig,
    predictions: &[Vec<Option<f64>>],
) -> Result<MethodRun> {
    let users = data.users();
    let regions = data.regions();
    let mut eval = match method {
        Method::Prbtd => Evaluator::Prbtd(TruthDiscovery::new(cfg.td.clone(), users, regions)?),
        Method::Td | Method::Cnb | Method::Wei => {
            let kind = match method {
                Method::Td => BaselineKind::Td,
                Method::Cnb => BaselineKind::Cnb,
                _ => BaselineKind::Wei,
            };
            Evaluator::Baseline(BaselineRunner::new(kind, cfg.baseline, cfg.td.clone(), users, regions)?)
        }
    };
    let mut outcomes = Vec::with_capacity(data.batches.len());
    let mut slot_seconds = Vec::with_capacity(data.batches.len());
    for (batch, predicted) in data.batches.iter().zip(predictions) {
        let started = Instant::now();
        let outcome = eval.run_slot(batch.clone(), predicted)?;
        let secs = started.elapsed().as_secs_f64();
        log::trace!("{method} slot {} took {secs:.6}s", outcome.slot);
        if !outcome.converged {
            log::debug!(
                "{method} slot {} stopped after {} iterations without converging",
                outcome.slot,
                outcome.iterations
            );
        }
        slot_seconds.push(secs);
        outcomes.push(outcome);
    }
    let run = MethodRun {
        method,
        outcomes,
        ledger: eval.into_ledger(),
        slot_seconds,
    };
    log::info!("{method}: mean slot time {:.6}s", run.mean_slot_seconds());
    Ok(run)
}

/// F1, reputation distance and noise reduction ratio of one run.
pub fn evaluate(data: &Dataset, run: &MethodRun) -> Result<(RunMetrics, bool)> {
    let pair = |r: &model::SensingReport| (r.value, data.truth.value(r.slot, r.region));
    let original: Vec<(f64, f64)> = data.batches.iter().flat_map(|b| b.reports().iter().map(pair)).collect();
    let kept: Vec<(f64, f64)> = run.outcomes.iter().flat_map(|o| o.kept().map(pair)).collect();
    let nr = metrics::noise_reduction_ratio(&original, &kept);
    if nr.all_removed {
        log::warn!("{}: every report was removed", run.method);
    }
    let reps = run.ledger.current();
    Ok((
        RunMetrics {
            f1: metrics::f1_from_reputations(reps, &data.malicious),
            reputation_distance: metrics::reputation_distance(reps, &data.malicious)?,
            noise_reduction_ratio: nr.ratio,
        },
        nr.all_removed,
    ))
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub run: MethodRun,
    pub metrics: RunMetrics,
    pub all_removed: bool,
}

#[derive(Debug)]
pub struct Repetition {
    pub index: usize,
    pub seed: u64,
    pub results: Result<Vec<MethodResult>>,
}

pub fn dataset_for(cfg: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    match &cfg.inputs {
        Some(dir) => Dataset::load(dir),
        None => {
            let scenario = ScenarioConfig {
                seed,
                ..cfg.scenario.clone()
            };
            Ok(simulator::simulate(&scenario)?.into())
        }
    }
}

/// Runs every configured method on the dataset for `seed`.
pub fn run_repetition(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<MethodResult>> {
    let data = dataset_for(cfg, seed)?;
    let predictions = compute_predictions(&data, &cfg.predictor, seed)?;
    cfg.methods
        .iter()
        .map(|&m| {
            let run = run_method(&data, m, cfg, &predictions)?;
            let (metrics, all_removed) = evaluate(&data, &run)?;
            Ok(MethodResult {
                run,
                metrics,
                all_removed,
            })
        })
        .collect()
}

/// Runs the repetitions in parallel; results come back in seed order.
pub fn repeat_harness(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Repetition> {
    seeds
        .par_iter()
        .enumerate()
        .map(|(index, &seed)| Repetition {
            index,
            seed,
            results: run_repetition(cfg, seed),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub runs: Vec<(u64, RunMetrics)>,
    pub failures: Vec<(u64, String)>,
    pub mean: Option<RunMetrics>,
}

/// Per-method means over the successful repetitions.
pub fn summarize(methods: &[Method], reps: &[Repetition]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let mut runs = Vec::new();
            let mut failures = Vec::new();
            for rep in reps {
                match &rep.results {
                    Ok(results) => {
                        if let Some(r) = results.iter().find(|r| r.run.method == method) {
                            runs.push((rep.seed, r.metrics));
                        }
                    }
                    Err(e) => failures.push((rep.seed, e.to_string())),
                }
            }
            let values: Vec<RunMetrics> = runs.iter().map(|r| r.1).collect();
            MethodSummary {
                method,
                mean: RunMetrics::mean(&values),
                runs,
                failures,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Sparsity,
    CleanFraction,
    Mu,
    Bursty,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Sparsity => "sparsity",
            SweepAxis::CleanFraction => "clean_fraction",
            SweepAxis::Mu => "mu",
            SweepAxis::Bursty => "bursty",
        }
    }

    /// The levels studied for each axis.
    pub fn default_values(self) -> Vec<f64> {
        match self {
            SweepAxis::Sparsity => vec![1.0, 0.9, 0.8, 0.7, 0.6],
            SweepAxis::CleanFraction => vec![0.5, 0.6, 0.7, 0.8, 0.9],
            SweepAxis::Mu => vec![0.3, 0.15],
            SweepAxis::Bursty => vec![0.0, 1.0],
        }
    }

    /// Configuration with this axis set to `value` (bursty: non-zero = on).
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> ExperimentConfig {
        let mut cfg = base.clone();
        let inj = &mut cfg.scenario.injectors;
        match self {
            SweepAxis::Sparsity => inj.sparsity = (value < 1.0).then_some(value),
            SweepAxis::CleanFraction => inj.clean_fraction = Some(value),
            SweepAxis::Mu => inj.low_noise_mu = Some(value),
            SweepAxis::Bursty => {
                inj.bursty = (value != 0.0).then(|| inj.bursty.clone().unwrap_or_default());
            }
        }
        cfg
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::Sparsity,
            SweepAxis::CleanFraction,
            SweepAxis::Mu,
            SweepAxis::Bursty,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| {
            Error::config(
                "--axis",
                format!("unknown axis `{s}` (sparsity, clean_fraction, mu, bursty)"),
            )
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub summary: MethodSummary,
}

pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    let seeds = base.seeds();
    let mut rows = Vec::new();
    for &value in values {
        let cfg = axis.apply(base, value);
        cfg.validate()?;
        let reps = repeat_harness(&cfg, &seeds);
        for summary in summarize(&cfg.methods, &reps) {
            rows.push(SweepRow { axis, value, summary });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        ExperimentConfig {
            repetitions: 2,
            scenario: ScenarioConfig {
                users: 30,
                submissions: 10,
                slots: 30,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn method_and_axis_parsing() {
        assert_eq!("PRBTD".parse::<Method>().unwrap(), Method::Prbtd);
        assert!("dti".parse::<Method>().is_err());
        assert_eq!("clean_fraction".parse::<SweepAxis>().unwrap(), SweepAxis::CleanFraction);
        assert!("bogus".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn config_toml_roundtrip_and_defaults() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
        assert!(matches!(
            ExperimentConfig::from_toml("repetitions = 0"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("methods = []"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("[td]\nalpha = 2.0"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            ExperimentConfig::from_toml("nonsense = 1"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn predictions_cover_every_slot_and_region() {
        let cfg = quick();
        let data = dataset_for(&cfg, 3).unwrap();
        let preds = compute_predictions(&data, &cfg.predictor, 3).unwrap();
        assert_eq!(preds.len(), 30);
        assert!(preds.iter().all(|p| p.len() == 32 && p.iter().all(Option::is_some)));
        // with a full history, early slots are exact seasonal copies of history
        let h = data.history.iter().find(|mv| mv.slot == 1 - 48).unwrap();
        assert_eq!(preds[0], h.means);
    }

    #[test]
    fn harness_is_deterministic() {
        let cfg = quick();
        let a = summarize(&cfg.methods, &repeat_harness(&cfg, &cfg.seeds()));
        let b = summarize(&cfg.methods, &repeat_harness(&cfg, &cfg.seeds()));
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|s| s.runs.len() == 2 && s.failures.is_empty()));
    }

    #[test]
    fn single_repetition_mean_equals_run() {
        let cfg = ExperimentConfig {
            repetitions: 1,
            methods: vec![Method::Prbtd],
            ..quick()
        };
        let s = summarize(&cfg.methods, &repeat_harness(&cfg, &cfg.seeds()));
        assert_eq!(s[0].mean, Some(s[0].runs[0].1));
    }

    #[test]
    fn failures_are_annotated() {
        let cfg = ExperimentConfig {
            inputs: Some(PathBuf::from("/nonexistent/inputs")),
            ..quick()
        };
        let reps = repeat_harness(&cfg, &[1]);
        let s = summarize(&cfg.methods, &reps);
        assert!(s[0].mean.is_none());
        assert_eq!(s[0].failures.len(), 1);
    }

    #[test]
    fn sweep_axes_edit_injectors() {
        let base = quick();
        assert_eq!(SweepAxis::Sparsity.apply(&base, 1.0).scenario.injectors.sparsity, None);
        assert_eq!(
            SweepAxis::Sparsity.apply(&base, 0.7).scenario.injectors.sparsity,
            Some(0.7)
        );
        assert!(SweepAxis::Bursty.apply(&base, 1.0).scenario.injectors.bursty.is_some());
        assert!(SweepAxis::Bursty.apply(&base, 0.0).scenario.injectors.bursty.is_none());
        assert_eq!(SweepAxis::Mu.apply(&base, 0.15).scenario.effective_mu(), 0.15);
    }
}
