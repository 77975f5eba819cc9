use std::fmt;

use super::{CorridorDataset, IngestReport, Provenance, SLOTS_PER_DAY};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MonthRow {
    /// e.g. `Sep-17`, or `Total`.
    pub label: String,
    pub weekdays: usize,
    pub valid: usize,
    pub expected: usize,
}

impl MonthRow {
    pub fn missing_rate(&self) -> f64 {
        if self.expected == 0 {
            0.0
        } else {
            (self.expected - self.valid) as f64 / self.expected as f64
        }
    }
}

/// Record-count summary per month over the kept sites.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QaReport {
    pub months: Vec<MonthRow>,
    pub total: Option<MonthRow>,
    pub kept_sites: usize,
    /// Dropped site ids with their missing fraction.
    pub dropped: Vec<(String, f64)>,
    pub invalid_rows: usize,
    pub consistency_warnings: usize,
}

impl QaReport {
    pub fn with_ingest(mut self, ingest: &IngestReport) -> Self {
        self.invalid_rows = ingest.invalid.len();
        self.consistency_warnings = ingest.consistency_warnings.len();
        self
    }

    pub fn total(&self) -> &MonthRow {
        self.total.as_ref().expect("report built by quality_filter")
    }
}

impl fmt::Display for QaReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>8} {:>14} {:>17} {:>12}",
            "Month", "Weekdays", "Valid records", "Expected records", "Missing rate"
        )?;
        for row in self.months.iter().chain(self.total.as_ref()) {
            writeln!(
                f,
                "{:<8} {:>8} {:>14} {:>17} {:>11.2}%",
                row.label,
                row.weekdays,
                row.valid,
                row.expected,
                100.0 * row.missing_rate()
            )?;
        }
        writeln!(f, "Sites kept: {}", self.kept_sites)?;
        for (site, frac) in &self.dropped {
            writeln!(f, "Dropped site {site}: {:.2}% missing", 100.0 * frac)?;
        }
        writeln!(f, "Invalid rows: {}", self.invalid_rows)?;
        write!(f, "Total-flow consistency warnings: {}", self.consistency_warnings)
    }
}

/// Drop sites whose missing fraction exceeds `max_missing` (and any site
/// with no valid slot at all), then summarize the rest.
pub fn quality_filter(ds: &CorridorDataset, max_missing: f64) -> Result<(CorridorDataset, QaReport)> {
    let per_site = ds.n_days() * SLOTS_PER_DAY;
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    for s in 0..ds.n_sites() {
        let valid = (0..ds.n_days())
            .flat_map(|d| (0..SLOTS_PER_DAY).map(move |k| (d, k)))
            .filter(|&(d, k)| ds.provenance(s, d, k) == Provenance::Observed)
            .count();
        let frac = 1.0 - valid as f64 / per_site as f64;
        if valid == 0 || frac > max_missing {
            dropped.push((ds.sites[s].clone(), frac));
        } else {
            keep.push(s);
        }
    }
    if keep.is_empty() {
        return Err(Error::Config(format!(
            "every site exceeds the missing-data threshold {max_missing}"
        )));
    }
    let kept = ds.select_sites(&keep);

    let mut months: Vec<MonthRow> = Vec::new();
    for (d, date) in kept.days.iter().enumerate() {
        let label = date.format("%b-%y").to_string();
        if months.last().map_or(true, |m| m.label != label) {
            months.push(MonthRow {
                label,
                weekdays: 0,
                valid: 0,
                expected: 0,
            });
        }
        let row = months.last_mut().expect("pushed above");
        row.weekdays += 1;
        row.expected += kept.n_sites() * SLOTS_PER_DAY;
        row.valid += (0..kept.n_sites())
            .flat_map(|s| (0..SLOTS_PER_DAY).map(move |k| (s, k)))
            .filter(|&(s, k)| kept.provenance(s, d, k) == Provenance::Observed)
            .count();
    }
    let total = MonthRow {
        label: "Total".into(),
        weekdays: months.iter().map(|m| m.weekdays).sum(),
        valid: months.iter().map(|m| m.valid).sum(),
        expected: months.iter().map(|m| m.expected).sum(),
    };
    let report = QaReport {
        months,
        total: Some(total),
        kept_sites: kept.n_sites(),
        dropped,
        invalid_rows: 0,
        consistency_warnings: 0,
    };
    Ok((kept, report))
}
