//! Error-based data features and the implication degree between reports.
//!
//! A report's relative error against the predicted ground truth splits into
//! a region-wide circumstance component, estimated as the running mean of all
//! errors seen in the region, and a per-user remainder. The pair, scaled by
//! the prediction, is the report's feature; implication is the cosine
//! similarity of two features.

/// Predictions with magnitude below this are treated as zero: relative
/// errors are undefined there and only the scaled feature is used.
pub const PREDICTION_EPSILON: f64 = 1e-9;

/// Relative sensing error `(v - ĝ) / ĝ`, or `None` when `|ĝ| < τ_g`.
pub fn sensing_error(value: f64, predicted: f64) -> Option<f64> {
    (predicted.abs() >= PREDICTION_EPSILON).then(|| (value - predicted) / predicted)
}

/// User-related error `(v - (1 + δ̇)ĝ) / ĝ`, or `None` when `|ĝ| < τ_g`.
pub fn user_error(value: f64, predicted: f64, circumstance: f64) -> Option<f64> {
    (predicted.abs() >= PREDICTION_EPSILON).then(|| (value - (1.0 + circumstance) * predicted) / predicted)
}

/// Running per-region circumstance error estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct CircumstanceState {
    counts: Vec<u64>,
    errors: Vec<f64>,
}

impl CircumstanceState {
    pub fn new(regions: usize) -> Self {
        Self {
            counts: vec![0; regions],
            errors: vec![0.0; regions],
        }
    }

    pub fn regions(&self) -> usize {
        self.counts.len()
    }

    /// `c_n` for 1-based `region`.
    pub fn count(&self, region: u32) -> u64 {
        self.counts[region as usize - 1]
    }

    /// `δ̇_n` for 1-based `region`; zero while the region has no errors.
    pub fn circumstance_error(&self, region: u32) -> f64 {
        self.errors[region as usize - 1]
    }

    /// Folds one slot's defined errors for `region` into the running mean.
    pub fn update(&mut self, region: u32, errors: &[f64]) {
        let i = region as usize - 1;
        let prev_count = self.counts[i];
        let count = prev_count + errors.len() as u64;
        self.errors[i] = if count == 0 {
            0.0
        } else {
            let sum: f64 = errors.iter().sum();
            (self.errors[i] * prev_count as f64 + sum) / count as f64
        };
        self.counts[i] = count;
    }
}

/// Scaled error feature `[ĝ·δ̇, v - (1 + δ̇)·ĝ]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataFeature {
    pub circumstance: f64,
    pub user: f64,
}

impl DataFeature {
    pub fn norm(&self) -> f64 {
        self.circumstance.hypot(self.user)
    }

    pub fn is_degenerate(&self) -> bool {
        self.circumstance == 0.0 && self.user == 0.0
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            circumstance: self.circumstance * k,
            user: self.user * k,
        }
    }
}

pub fn scaled_feature(value: f64, predicted: f64, circumstance: f64) -> DataFeature {
    DataFeature {
        circumstance: predicted * circumstance,
        user: value - (1.0 + circumstance) * predicted,
    }
}

/// Cosine similarity of two features, clamped to `[-1, 1]`. Zero-norm
/// features carry no implication.
pub fn implication(a: &DataFeature, b: &DataFeature) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot = a.circumstance * b.circumstance + a.user * b.user;
    (dot / (na * nb)).clamp(-1.0, 1.0)
}
