use serde::{Deserialize, Serialize};

use super::{CorridorDataset, Provenance, CHANNELS, SLOTS_PER_DAY};
use crate::error::{Error, Result};

/// Gaps up to this many slots are filled from the same day.
pub const SHORT_GAP_MAX: usize = 3;

/// Rule for short same-day gaps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InfillPolicy {
    /// Repeat the most recent valid slot (the next one at the start of a day).
    #[default]
    CarryForward,
    /// Straight line between the bracketing valid slots.
    Linear,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct InfillReport {
    pub same_day: usize,
    pub prev_week: usize,
    pub next_week: usize,
    pub warnings: Vec<String>,
}

fn gaps(ds: &CorridorDataset, site: usize, day: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut k = 0;
    while k < SLOTS_PER_DAY {
        if ds.provenance(site, day, k) == Provenance::Missing {
            let start = k;
            while k < SLOTS_PER_DAY && ds.provenance(site, day, k) == Provenance::Missing {
                k += 1;
            }
            out.push((start, k));
        } else {
            k += 1;
        }
    }
    out
}

fn fill_same_day(ds: &mut CorridorDataset, site: usize, day: usize, (a, b): (usize, usize), policy: InfillPolicy) -> bool {
    let before = a.checked_sub(1).map(|k| ds.slot_values(site, day, k).to_vec());
    let after = (b < SLOTS_PER_DAY).then(|| ds.slot_values(site, day, b).to_vec());
    let rows: Vec<Vec<f64>> = match (before, after, policy) {
        (None, None, _) => return false,
        (Some(l), Some(r), InfillPolicy::Linear) => (a..b)
            .map(|k| {
                let w = (k + 1 - a) as f64 / (b - a + 1) as f64;
                l.iter().zip(&r).map(|(x, y)| x + w * (y - x)).collect()
            })
            .collect(),
        (Some(v), _, _) | (None, Some(v), _) => vec![v; b - a],
    };
    for (k, row) in (a..b).zip(rows) {
        ds.set_slot(site, day, k, &row, Provenance::SameDay);
    }
    true
}

fn fill_from(ds: &mut CorridorDataset, site: usize, day: usize, donor: usize, (a, b): (usize, usize), prov: Provenance) -> bool {
    if (a..b).any(|k| ds.provenance(site, donor, k) == Provenance::Missing) {
        return false;
    }
    for k in a..b {
        let row: [f64; CHANNELS] = ds.slot_values(site, donor, k).try_into().expect("slot width");
        ds.set_slot(site, day, k, &row, prov);
    }
    true
}

/// Fill every missing slot. Short gaps use the same day; longer gaps copy
/// the same weekday one week earlier, falling back to the same-day rule and
/// then to the following week.
pub fn infill(ds: &CorridorDataset, policy: InfillPolicy) -> Result<(CorridorDataset, InfillReport)> {
    let mut out = ds.clone();
    let mut report = InfillReport::default();
    for day in 0..out.n_days() {
        for site in 0..out.n_sites() {
            for gap in gaps(&out, site, day) {
                let len = gap.1 - gap.0;
                if len <= SHORT_GAP_MAX && fill_same_day(&mut out, site, day, gap, policy) {
                    report.same_day += len;
                    continue;
                }
                let label = format!("site {} on {} slots {}..{}", out.sites[site], out.days[day], gap.0, gap.1);
                if len > SHORT_GAP_MAX {
                    if let Some(prev) = out.day_offset(day, -7) {
                        if fill_from(&mut out, site, day, prev, gap, Provenance::PrevWeek) {
                            report.prev_week += len;
                            continue;
                        }
                    }
                    if fill_same_day(&mut out, site, day, gap, policy) {
                        report.same_day += len;
                        report.warnings.push(format!("{label}: no previous-week donor, filled from same day"));
                        continue;
                    }
                }
                if let Some(next) = out.day_offset(day, 7) {
                    if fill_from(&mut out, site, day, next, gap, Provenance::NextWeek) {
                        report.next_week += len;
                        report.warnings.push(format!("{label}: filled from the following week"));
                        continue;
                    }
                }
                return Err(Error::Data(format!("{label}: no donor data for infill")));
            }
        }
    }
    Ok((out, report))
}
