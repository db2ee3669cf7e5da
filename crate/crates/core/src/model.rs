//! Domain types shared by every stage of the pipeline: the region grid,
//! individual sensing reports, per-slot batches, the rolling data cache and
//! per-slot regional means.
//!
//! Slots and regions are 1-based everywhere, including the text formats.

use std::collections::{HashSet, VecDeque};
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular grid of sensing regions, numbered row-major from 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    pub height: u32,
    pub width: u32,
}

impl RegionGrid {
    pub fn new(height: u32, width: u32) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("grid", "height and width must be positive"));
        }
        Ok(Self { height, width })
    }

    pub fn region_count(&self) -> u32 {
        self.height * self.width
    }

    /// `n = (h - 1) * W + w` for 1-based row `h` and column `w`.
    pub fn region_index(&self, row: u32, col: u32) -> Result<u32> {
        if row == 0 || row > self.height || col == 0 || col > self.width {
            return Err(Error::OutOfGrid {
                row,
                col,
                height: self.height,
                width: self.width,
            });
        }
        Ok((row - 1) * self.width + col)
    }

    /// Inverse of [`RegionGrid::region_index`].
    pub fn coordinates(&self, region: u32) -> Option<(u32, u32)> {
        if region == 0 || region > self.region_count() {
            return None;
        }
        let zero = region - 1;
        Some((zero / self.width + 1, zero % self.width + 1))
    }
}

/// One submission `(mu, slot, region, value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingReport {
    pub mu: u32,
    pub slot: u32,
    pub region: u32,
    pub value: f64,
}

impl SensingReport {
    pub fn new(mu: u32, slot: u32, region: u32, value: f64) -> Self {
        Self {
            mu,
            slot,
            region,
            value,
        }
    }
}

/// All reports submitted during one slot. At most one report per user.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotBatch {
    slot: u32,
    reports: Vec<SensingReport>,
}

impl SlotBatch {
    pub fn new(slot: u32, reports: Vec<SensingReport>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(reports.len());
        for r in &reports {
            if r.slot != slot {
                return Err(Error::SlotMismatch {
                    batch: slot,
                    got: r.slot,
                });
            }
            if !r.value.is_finite() {
                return Err(Error::NonFiniteValue { mu: r.mu, slot });
            }
            if !seen.insert(r.mu) {
                return Err(Error::DuplicateReport { mu: r.mu, slot });
            }
        }
        Ok(Self { slot, reports })
    }

    pub fn empty(slot: u32) -> Self {
        Self {
            slot,
            reports: Vec::new(),
        }
    }

    pub fn slot(&self) -> u32 {
        self.slot
    }

    pub fn reports(&self) -> &[SensingReport] {
        &self.reports
    }

    pub fn len(&self) -> usize {
        self.reports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reports.is_empty()
    }

    pub fn in_region(&self, region: u32) -> impl Iterator<Item = &SensingReport> {
        self.reports.iter().filter(move |r| r.region == region)
    }

    /// Mean of the values reported in `region`, or `None` if nobody sensed it.
    pub fn slot_mean(&self, region: u32) -> Option<f64> {
        let (sum, count) = self
            .in_region(region)
            .fold((0.0, 0usize), |(s, c), r| (s + r.value, c + 1));
        (count > 0).then(|| sum / count as f64)
    }

    pub fn mean_vector(&self, regions: u32) -> MeanVector {
        let mut sums = vec![0.0; regions as usize];
        let mut counts = vec![0usize; regions as usize];
        for r in &self.reports {
            if let Some(i) = (r.region as usize).checked_sub(1).filter(|&i| i < sums.len()) {
                sums[i] += r.value;
                counts[i] += 1;
            }
        }
        MeanVector {
            slot: i64::from(self.slot),
            means: sums
                .into_iter()
                .zip(counts)
                .map(|(s, c)| (c > 0).then(|| s / c as f64))
                .collect(),
        }
    }

    /// Keeps only the reports accepted by `keep`.
    pub fn retain(&mut self, keep: impl FnMut(&SensingReport) -> bool) {
        self.reports.retain(keep);
    }
}

/// Per-region means for one slot. Slots at or below zero denote history
/// preceding the sensing task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVector {
    pub slot: i64,
    pub means: Vec<Option<f64>>,
}

impl MeanVector {
    pub fn get(&self, region: u32) -> Option<f64> {
        (region as usize)
            .checked_sub(1)
            .and_then(|i| self.means.get(i).copied().flatten())
    }
}

/// Rolling window over the most recent `window` slot batches.
#[derive(Debug, Clone)]
pub struct DataCache {
    window: usize,
    batches: VecDeque<SlotBatch>,
}

impl DataCache {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::config("l", "cache window must hold at least one slot"));
        }
        Ok(Self {
            window,
            batches: VecDeque::with_capacity(window + 1),
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Appends the next consecutive slot and evicts the oldest batch once the
    /// window overflows. Returns the evicted batch, if any.
    pub fn push(&mut self, batch: SlotBatch) -> Result<Option<SlotBatch>> {
        if let Some(last) = self.batches.back() {
            let expected = last.slot + 1;
            if batch.slot != expected {
                return Err(Error::Sequencing {
                    expected,
                    got: batch.slot,
                });
            }
        }
        self.batches.push_back(batch);
        Ok(if self.batches.len() > self.window {
            self.batches.pop_front()
        } else {
            None
        })
    }

    pub fn batches(&self) -> impl ExactSizeIterator<Item = &SlotBatch> {
        self.batches.iter()
    }

    pub fn slots(&self) -> Vec<u32> {
        self.batches.iter().map(SlotBatch::slot).collect()
    }

    pub fn latest_slot(&self) -> Option<u32> {
        self.batches.back().map(SlotBatch::slot)
    }

    pub fn reports(&self) -> impl Iterator<Item = &SensingReport> {
        self.batches.iter().flat_map(|b| b.reports.iter())
    }

    pub fn report_count(&self) -> usize {
        self.batches.iter().map(SlotBatch::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Groups a flat report list into consecutive batches for slots `1..=slots`.
/// Slots without reports yield empty batches.
pub fn batches_from_reports(reports: &[SensingReport], slots: u32) -> Result<Vec<SlotBatch>> {
    let mut grouped: Vec<Vec<SensingReport>> = vec![Vec::new(); slots as usize];
    for r in reports {
        if r.slot == 0 || r.slot > slots {
            return Err(Error::config("reports", format!("slot {} outside 1..={slots}", r.slot)));
        }
        grouped[(r.slot - 1) as usize].push(*r);
    }
    grouped
        .into_iter()
        .enumerate()
        .map(|(i, rs)| SlotBatch::new(i as u32 + 1, rs))
        .collect()
}

pub const REPORT_HEADER: [&str; 4] = ["mu", "slot", "region", "value"];

pub fn write_reports<W: Write>(out: W, reports: &[SensingReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER).map_err(csv_io)?;
    for r in reports {
        w.write_record([
            r.mu.to_string(),
            r.slot.to_string(),
            r.region.to_string(),
            r.value.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports<R: Read>(input: R, origin: &str) -> Result<Vec<SensingReport>> {
    let rows = read_rows(input, origin, &REPORT_HEADER)?;
    rows.into_iter()
        .map(|(line, f)| {
            Ok(SensingReport {
                mu: parse_field(&f[0], origin, line, "mu")?,
                slot: parse_field(&f[1], origin, line, "slot")?,
                region: parse_field(&f[2], origin, line, "region")?,
                value: parse_finite(&f[3], origin, line, "value")?,
            })
        })
        .collect()
}

pub fn read_reports_file(path: &Path) -> Result<Vec<SensingReport>> {
    let file = open_input(path)?;
    read_reports(file, &path.display().to_string())
}

pub(crate) fn open_input(path: &Path) -> Result<std::fs::File> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(std::fs::File::open(path)?)
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

/// Reads a headed, comma-delimited file into `(line number, fields)` rows.
/// An empty input (no header) is accepted and yields no rows.
pub(crate) fn read_rows<R: Read>(input: R, origin: &str, header: &[&str]) -> Result<Vec<(usize, Vec<String>)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut rows = Vec::new();
    let mut header_seen = false;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            Error::Format {
                path: origin.to_string(),
                line,
                reason: e.to_string(),
            }
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if !header_seen {
            header_seen = true;
            let got: Vec<&str> = rec.iter().collect();
            if got != header {
                return Err(Error::Format {
                    path: origin.to_string(),
                    line,
                    reason: format!("expected header `{}`", header.join(",")),
                });
            }
            continue;
        }
        if rec.len() != header.len() {
            return Err(Error::Format {
                path: origin.to_string(),
                line,
                reason: format!("expected {} fields, found {}", header.len(), rec.len()),
            });
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok(rows)
}

pub(crate) fn parse_field<T: std::str::FromStr>(raw: &str, origin: &str, line: usize, name: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Format {
        path: origin.to_string(),
        line,
        reason: format!("cannot parse {name} from `{raw}`"),
    })
}

pub(crate) fn parse_finite(raw: &str, origin: &str, line: usize, name: &str) -> Result<f64> {
    let v: f64 = parse_field(raw, origin, line, name)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Format {
            path: origin.to_string(),
            line,
            reason: format!("{name} must be finite"),
        })
    }
}
