//! Corridor data: ingestion, quality control, infill, scaling, windowing
//! and a synthetic generator.

mod cache;
mod infill;
mod ingest;
mod quality;
mod samples;
mod scaler;
pub mod synth;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{load_dataset, save_dataset};
pub use infill::{infill, InfillPolicy, InfillReport};
pub use ingest::{assemble, ingest_csv, ingest_reader, IngestReport, RowIssue, SiteDay};
pub use quality::{quality_filter, MonthRow, QaReport};
pub use samples::{encode_marker, make_samples, Anchor, Batch, DaySplit, Sample, SampleConfig, SampleSet};
pub use scaler::Scaler;

/// Usable 15-minute slots per day (00:00-01:00 excluded).
pub const SLOTS_PER_DAY: usize = 92;
/// Four axle-length bands, total flow, average speed.
pub const CHANNELS: usize = 6;
pub const FLOW_CHANNELS: usize = 5;
pub const SPEED: usize = 5;
pub const TOTAL_FLOW: usize = 4;
pub const MARKER_DIM: usize = 8;
/// Speeds are divided by this before entering the model.
pub const SPEED_DIVISOR: f64 = 100.0;

pub const CHANNEL_NAMES: [&str; CHANNELS] = [
    "flow_0_52",
    "flow_52_66",
    "flow_66_116",
    "flow_116p",
    "total_flow",
    "avg_speed_mph",
];

/// Slot index for a wall-clock time, `None` for the dropped midnight hour.
pub fn slot_of(hour: u32, minute: u32) -> Option<usize> {
    if hour == 0 || hour > 23 || minute % 15 != 0 || minute > 45 {
        return None;
    }
    Some((hour * 4 + minute / 15 - 4) as usize)
}

/// Minutes after midnight at the start of `slot`.
pub fn slot_minutes(slot: usize) -> usize {
    (slot + 4) * 15
}

pub fn is_weekday(date: NaiveDate) -> bool {
    !matches!(date.weekday(), Weekday::Sat | Weekday::Sun)
}

/// Which input channels a model consumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelSet {
    All,
    SpeedOnly,
    FlowOnly,
}

impl ChannelSet {
    pub fn indices(self) -> std::ops::Range<usize> {
        match self {
            ChannelSet::All => 0..CHANNELS,
            ChannelSet::SpeedOnly => SPEED..CHANNELS,
            ChannelSet::FlowOnly => 0..FLOW_CHANNELS,
        }
    }
}

/// Where a slot's values came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Observed,
    Missing,
    /// Filled from neighbouring slots of the same day.
    SameDay,
    /// Copied from the same weekday one week earlier.
    PrevWeek,
    /// Copied from the same weekday one week later (fallback).
    NextWeek,
}

impl Provenance {
    pub fn code(self) -> f64 {
        match self {
            Provenance::Observed => 0.0,
            Provenance::Missing => 1.0,
            Provenance::SameDay => 2.0,
            Provenance::PrevWeek => 3.0,
            Provenance::NextWeek => 4.0,
        }
    }

    pub fn from_code(code: f64) -> Option<Self> {
        Some(match code as i64 {
            0 => Provenance::Observed,
            1 => Provenance::Missing,
            2 => Provenance::SameDay,
            3 => Provenance::PrevWeek,
            4 => Provenance::NextWeek,
            _ => return None,
        })
    }
}

/// Sites x weekdays x slots x channels, sites ordered downstream to
/// upstream.
#[derive(Clone, Debug, PartialEq)]
pub struct CorridorDataset {
    pub sites: Vec<String>,
    pub days: Vec<NaiveDate>,
    values: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl CorridorDataset {
    /// All cells missing.
    pub fn empty(sites: Vec<String>, days: Vec<NaiveDate>) -> Result<Self> {
        if let Some(d) = days.iter().find(|d| !is_weekday(**d)) {
            return Err(Error::Data(format!("{d} is not a weekday")));
        }
        if days.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("days must be strictly increasing".into()));
        }
        let cells = sites.len() * days.len() * SLOTS_PER_DAY;
        Ok(Self {
            values: vec![f64::NAN; cells * CHANNELS],
            provenance: vec![Provenance::Missing; cells],
            sites,
            days,
        })
    }

    pub(crate) fn from_parts(
        sites: Vec<String>,
        days: Vec<NaiveDate>,
        values: Vec<f64>,
        provenance: Vec<Provenance>,
    ) -> Result<Self> {
        let cells = sites.len() * days.len() * SLOTS_PER_DAY;
        if values.len() != cells * CHANNELS || provenance.len() != cells {
            return Err(Error::Data("dataset arrays do not match the site/day extents".into()));
        }
        Ok(Self {
            sites,
            days,
            values,
            provenance,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_days(&self) -> usize {
        self.days.len()
    }

    fn cell(&self, site: usize, day: usize, slot: usize) -> usize {
        debug_assert!(site < self.n_sites() && day < self.n_days() && slot < SLOTS_PER_DAY);
        (site * self.n_days() + day) * SLOTS_PER_DAY + slot
    }

    pub fn get(&self, site: usize, day: usize, slot: usize, ch: usize) -> f64 {
        self.values[self.cell(site, day, slot) * CHANNELS + ch]
    }

    pub fn slot_values(&self, site: usize, day: usize, slot: usize) -> &[f64] {
        let c = self.cell(site, day, slot) * CHANNELS;
        &self.values[c..c + CHANNELS]
    }

    pub fn provenance(&self, site: usize, day: usize, slot: usize) -> Provenance {
        self.provenance[self.cell(site, day, slot)]
    }

    pub fn set_slot(&mut self, site: usize, day: usize, slot: usize, values: &[f64], prov: Provenance) {
        let c = self.cell(site, day, slot);
        self.values[c * CHANNELS..(c + 1) * CHANNELS].copy_from_slice(values);
        self.provenance[c] = prov;
    }

    /// Mark a cell missing, discarding its values.
    pub fn mark_missing(&mut self, site: usize, day: usize, slot: usize) {
        self.set_slot(site, day, slot, &[f64::NAN; CHANNELS], Provenance::Missing);
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance_flags(&self) -> &[Provenance] {
        &self.provenance
    }

    pub(crate) fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn count(&self, prov: Provenance) -> usize {
        self.provenance.iter().filter(|p| **p == prov).count()
    }

    /// Keep only the listed sites, in the given order.
    pub fn select_sites(&self, keep: &[usize]) -> Self {
        let per_site = self.n_days() * SLOTS_PER_DAY;
        let mut values = Vec::with_capacity(keep.len() * per_site * CHANNELS);
        let mut provenance = Vec::with_capacity(keep.len() * per_site);
        for &s in keep {
            values.extend_from_slice(&self.values[s * per_site * CHANNELS..(s + 1) * per_site * CHANNELS]);
            provenance.extend_from_slice(&self.provenance[s * per_site..(s + 1) * per_site]);
        }
        Self {
            sites: keep.iter().map(|&s| self.sites[s].clone()).collect(),
            days: self.days.clone(),
            values,
            provenance,
        }
    }

    /// Index of the day exactly `offset` days from `day`, if present.
    pub fn day_offset(&self, day: usize, offset: i64) -> Option<usize> {
        let target = self.days[day] + chrono::Duration::days(offset);
        self.days.binary_search(&target).ok()
    }

    pub fn ensure_complete(&self) -> Result<()> {
        let missing = self.count(Provenance::Missing);
        if missing > 0 {
            return Err(Error::Data(format!("{missing} slots are still missing; run infill first")));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset contains non-finite values".into()));
        }
        Ok(())
    }
}
