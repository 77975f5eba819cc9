//! Seeded synthetic motorway corridor.
//!
//! Flows follow a daily demand curve with morning and evening peaks and
//! per-weekday peak modifiers, stepping up downstream of on-ramps. Speeds
//! come from a flat-then-falling speed-flow relation plus noise. Recurrent
//! congestion forms at bottleneck sites whenever demand runs close to
//! capacity, and random incidents add short severe slowdowns; both spread
//! upstream at a fixed queue speed.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{is_weekday, slot_minutes, CorridorDataset, Provenance, CHANNELS, SLOTS_PER_DAY};
use crate::error::{Error, Result};

/// A slowdown starting at `site` and spreading upstream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CongestionEvent {
    pub site: usize,
    pub day: usize,
    /// Fractional slot index at which the head of the queue forms.
    pub start_slot: f64,
    pub duration_slots: f64,
    pub drop_mph: f64,
    /// Upstream sites reached by the queue.
    pub extent_sites: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub sites: usize,
    /// Number of weekdays, counted from `start`.
    pub days: usize,
    pub start: NaiveDate,
    pub free_flow_mph: f64,
    /// Mainline vehicles per 15 minutes at the most upstream site at peak.
    pub base_flow: f64,
    pub noise_mph: f64,
    /// Monday morning and Friday evening peak amplification.
    pub dow_modifiers: bool,
    /// `(site, step)`: sites downstream of `site` carry `step` more flow.
    pub ramps: Vec<(usize, f64)>,
    /// Sites where recurrent peak-hour queues form.
    pub bottlenecks: Vec<usize>,
    /// Demand ratio above which a bottleneck starts queueing.
    pub congestion_threshold: f64,
    pub queue_extent_sites: usize,
    pub recurrent_drop_mph: f64,
    pub incidents_per_day: f64,
    pub queue_speed_kmh: f64,
    pub spacing_km: f64,
    /// Probability that a site-day contains one missing gap.
    pub missing_rate: f64,
    pub events: Vec<CongestionEvent>,
}

impl SynthConfig {
    pub fn new(seed: u64, sites: usize, days: usize) -> Self {
        Self {
            seed,
            sites,
            days,
            start: NaiveDate::from_ymd_opt(2017, 9, 4).expect("valid date"),
            free_flow_mph: 70.0,
            base_flow: 1500.0,
            noise_mph: 2.0,
            dow_modifiers: true,
            ramps: vec![(sites / 3, 0.12), (2 * sites / 3, 0.10)],
            bottlenecks: vec![sites / 4, (2 * sites) / 3],
            congestion_threshold: 0.95,
            queue_extent_sites: (sites / 3).clamp(1, 10),
            recurrent_drop_mph: 35.0,
            incidents_per_day: 0.5,
            queue_speed_kmh: 12.0,
            spacing_km: 0.5,
            missing_rate: 0.0,
            events: Vec::new(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.sites == 0 || self.days == 0 {
            return Err(Error::Config("synthetic corridor needs at least one site and one day".into()));
        }
        if !is_weekday(self.start) {
            return Err(Error::Config(format!("start date {} is not a weekday", self.start)));
        }
        if self.queue_speed_kmh <= 0.0 || self.spacing_km <= 0.0 || self.noise_mph < 0.0 {
            return Err(Error::Config("queue speed and spacing must be positive".into()));
        }
        if let Some(e) = self.events.iter().find(|e| e.site >= self.sites || e.day >= self.days) {
            return Err(Error::Config(format!("event outside the corridor: {e:?}")));
        }
        Ok(())
    }

    /// Queue travel time between adjacent sites, in slots.
    pub fn lag_per_site(&self) -> f64 {
        self.spacing_km / self.queue_speed_kmh * 4.0
    }
}

pub struct Synthetic {
    pub dataset: CorridorDataset,
    /// Random and explicit incidents (recurrent queues are not listed).
    pub incidents: Vec<CongestionEvent>,
}

/// The first `n` weekdays on or after `start`.
pub fn weekdays_from(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    start.iter_days().filter(|d| is_weekday(*d)).take(n).collect()
}

fn bump(h: f64, centre: f64, width: f64) -> f64 {
    (-((h - centre) / width).powi(2)).exp()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Demand relative to capacity at hour `h`.
fn demand(h: f64, weekday: Weekday, modifiers: bool) -> f64 {
    let (am, pm) = match (modifiers, weekday) {
        (true, Weekday::Mon) => (1.25, 1.0),
        (true, Weekday::Fri) => (1.0, 1.3),
        _ => (1.0, 1.0),
    };
    let daytime = 0.35 * sigmoid(2.0 * (h - 6.0)) * sigmoid(1.5 * (20.5 - h));
    0.12 + daytime + am * 0.55 * bump(h, 7.75, 1.1) + pm * 0.5 * bump(h, 17.25, 1.3)
}

/// Fraction of the slot `[k, k+1)` covered by `[a, b)`.
fn overlap(k: f64, a: f64, b: f64) -> f64 {
    ((k + 1.0).min(b) - k.max(a)).clamp(0.0, 1.0)
}

pub fn synthesize_corridor(cfg: &SynthConfig) -> Result<Synthetic> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let p = cfg.sites;
    let days = weekdays_from(cfg.start, cfg.days);
    let sites = (0..p).map(|s| format!("site-{s:03}")).collect();
    let mut ds = CorridorDataset::empty(sites, days.clone())?;
    let lag = cfg.lag_per_site();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let ramp_factor: Vec<f64> = (0..p)
        .map(|s| cfg.ramps.iter().filter(|(r, _)| s < *r).map(|(_, step)| 1.0 + step).product())
        .collect();
    let site_vf: Vec<f64> = (0..p).map(|_| cfg.free_flow_mph + 1.5 * unit.sample(&mut rng)).collect();

    let mut incidents = cfg.events.clone();
    if cfg.incidents_per_day > 0.0 {
        let poisson = Poisson::new(cfg.incidents_per_day).map_err(|e| Error::Config(e.to_string()))?;
        for day in 0..days.len() {
            let count = poisson.sample(&mut rng) as usize;
            for _ in 0..count {
                incidents.push(CongestionEvent {
                    site: rng.random_range(0..p),
                    day,
                    start_slot: rng.random_range(8.0..84.0),
                    duration_slots: rng.random_range(2.0..6.0),
                    drop_mph: rng.random_range(20.0..40.0),
                    extent_sites: rng.random_range(3..=cfg.queue_extent_sites.max(3)),
                });
            }
        }
    }

    for (d, date) in days.iter().enumerate() {
        let weekday = date.weekday();
        let day_mult = 1.0 + 0.04 * unit.sample(&mut rng);
        let ratio = |slot: f64| {
            let h = (slot + 4.5) / 4.0;
            demand(h, weekday, cfg.dow_modifiers) * day_mult
        };
        let queue = |slot: f64| ((ratio(slot) - cfg.congestion_threshold) / 0.12).clamp(0.0, 1.0);
        let shares: Vec<[f64; 4]> = (0..p)
            .map(|_| {
                let raw = [0.80, 0.08, 0.05, 0.07].map(|x: f64| x * (1.0 + 0.05 * unit.sample(&mut rng)).max(0.1));
                let sum: f64 = raw.iter().sum();
                raw.map(|x| x / sum)
            })
            .collect();
        for k in 0..SLOTS_PER_DAY {
            let kf = k as f64;
            let r = ratio(kf);
            for s in 0..p {
                // Speed drop in mph, and downstream relief in [0, 1].
                let mut depth: f64 = 0.0;
                let mut relief: f64 = 0.0;
                for &b in &cfg.bottlenecks {
                    if s >= b {
                        let j = s - b;
                        if j <= cfg.queue_extent_sites {
                            let taper = 1.0 - j as f64 / (cfg.queue_extent_sites + 1) as f64;
                            depth = depth.max(taper * queue(kf - j as f64 * lag) * cfg.recurrent_drop_mph);
                        }
                    } else if b - s <= 2 {
                        relief = relief.max(queue(kf));
                    }
                }
                for e in incidents.iter().filter(|e| e.day == d) {
                    if s >= e.site && s - e.site <= e.extent_sites {
                        let j = (s - e.site) as f64;
                        let taper = 1.0 - j / (e.extent_sites + 1) as f64;
                        let a = e.start_slot + j * lag;
                        let cover = overlap(kf, a, a + e.duration_slots);
                        depth = depth.max(taper * cover * e.drop_mph);
                    } else if s < e.site && e.site - s <= 2 {
                        relief = relief.max(overlap(kf, e.start_slot, e.start_slot + e.duration_slots));
                    }
                }
                let congested = (depth / 40.0).min(1.0);
                let flow_mean = cfg.base_flow * ramp_factor[s] * r * (1.0 - 0.25 * congested);
                let flow_sd = flow_mean.max(1.0).sqrt();
                let total = (flow_mean + flow_sd * unit.sample(&mut rng)).max(0.0).round();
                let free = site_vf[s] - 8.0 * r.min(1.3).powi(4);
                let speed = (free - depth + 3.0 * relief + cfg.noise_mph * unit.sample(&mut rng)).clamp(3.0, 120.0);
                let mut row = [0.0; CHANNELS];
                split_bands(total, &shares[s], &mut row[..4]);
                row[4] = total;
                row[5] = speed;
                ds.set_slot(s, d, k, &row, Provenance::Observed);
            }
        }
    }

    if cfg.missing_rate > 0.0 {
        for s in 0..p {
            for d in 0..days.len() {
                if rng.random_bool(cfg.missing_rate.min(1.0)) {
                    let len = rng.random_range(1..=8usize);
                    let start = rng.random_range(0..SLOTS_PER_DAY - len);
                    for k in start..start + len {
                        ds.mark_missing(s, d, k);
                    }
                }
            }
        }
    }
    Ok(Synthetic { dataset: ds, incidents })
}

/// Integer band counts summing exactly to `total` (largest remainder).
fn split_bands(total: f64, shares: &[f64; 4], out: &mut [f64]) {
    let exact: Vec<f64> = shares.iter().map(|s| s * total).collect();
    let mut floors: Vec<f64> = exact.iter().map(|x| x.floor()).collect();
    let mut left = (total - floors.iter().sum::<f64>()).round() as usize;
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (exact[b] - floors[b]).total_cmp(&(exact[a] - floors[a])).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        floors[i] += 1.0;
        left -= 1;
    }
    out.copy_from_slice(&floors);
}

/// Clock time of a slot's start, for labels.
pub fn slot_label(slot: usize) -> String {
    let m = slot_minutes(slot);
    format!("{:02}:{:02}", m / 60, m % 60)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SPEED;

    fn quiet(seed: u64) -> SynthConfig {
        let mut c = SynthConfig::new(seed, 12, 5);
        c.incidents_per_day = 0.0;
        c
    }

    #[test]
    fn same_seed_same_data() {
        let a = synthesize_corridor(&SynthConfig::new(7, 8, 3)).unwrap();
        let b = synthesize_corridor(&SynthConfig::new(7, 8, 3)).unwrap();
        assert_eq!(a.dataset, b.dataset);
        let c = synthesize_corridor(&SynthConfig::new(8, 8, 3)).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn bands_sum_to_total() {
        let s = synthesize_corridor(&SynthConfig::new(1, 6, 2)).unwrap().dataset;
        for site in 0..6 {
            for k in 0..SLOTS_PER_DAY {
                let v = s.slot_values(site, 1, k);
                assert_eq!(v[..4].iter().sum::<f64>(), v[4]);
                assert!(v[..4].iter().all(|x| *x >= 0.0));
            }
        }
    }

    #[test]
    fn calendar_starts_on_first_weekday() {
        let d = weekdays_from(NaiveDate::from_ymd_opt(2017, 9, 4).unwrap(), 42);
        assert_eq!(d.last().unwrap().to_string(), "2017-10-31");
        assert_eq!(d.iter().filter(|x| x.month() == 9).count(), 20);
    }

    #[test]
    fn off_peak_speed_near_free_flow() {
        let cfg = quiet(3);
        let s = synthesize_corridor(&cfg).unwrap().dataset;
        // 03:00, demand far below capacity; site free-flow offsets are
        // N(0, 1.5), so allow 3 sigma of both terms.
        let bound = 3.0 * (cfg.noise_mph.powi(2) + 1.5f64.powi(2)).sqrt() + 0.1;
        for site in 0..12 {
            let v = s.get(site, 1, 8, SPEED);
            assert!((v - cfg.free_flow_mph).abs() < bound, "{v}");
        }
    }

    #[test]
    fn queue_moves_upstream() {
        let mut cfg = quiet(4);
        cfg.bottlenecks.clear();
        cfg.noise_mph = 1.0;
        cfg.events.push(CongestionEvent {
            site: 2,
            day: 1,
            start_slot: 40.0,
            duration_slots: 3.0,
            drop_mph: 40.0,
            extent_sites: 8,
        });
        let s = synthesize_corridor(&cfg).unwrap().dataset;
        let argmin = |site: usize| {
            (0..SLOTS_PER_DAY)
                .min_by(|&a, &b| s.get(site, 1, a, SPEED).total_cmp(&s.get(site, 1, b, SPEED)))
                .unwrap()
        };
        for j in 0..=8 {
            assert!(argmin(2 + j) >= 40, "site {} min before the event", 2 + j);
        }
        // Onset (first slot 10 mph below the pre-event level) moves upstream.
        let onset = |site: usize| {
            let base = s.get(site, 1, 30, SPEED);
            (30..SLOTS_PER_DAY).find(|&k| s.get(site, 1, k, SPEED) < base - 10.0).unwrap()
        };
        let onsets: Vec<usize> = (0..=5).map(|j| onset(2 + j)).collect();
        assert!(onsets.windows(2).all(|w| w[0] <= w[1]), "{onsets:?}");
        assert!(onsets[5] > onsets[0], "{onsets:?}");
    }

    #[test]
    fn monday_morning_is_more_congested() {
        let cfg = quiet(5);
        let s = synthesize_corridor(&cfg).unwrap().dataset;
        let b = cfg.bottlenecks[0];
        // Mean 07:00-09:00 speed at the bottleneck, Monday vs Wednesday.
        let am = |d: usize| (24..32).map(|k| s.get(b, d, k, SPEED)).sum::<f64>() / 8.0;
        assert!(am(0) < am(2) - 5.0, "{} vs {}", am(0), am(2));
    }

    #[test]
    fn missing_gaps_are_marked() {
        let mut cfg = quiet(6);
        cfg.missing_rate = 1.0;
        let s = synthesize_corridor(&cfg).unwrap().dataset;
        assert!(s.count(Provenance::Missing) >= 12 * 5);
    }
}
