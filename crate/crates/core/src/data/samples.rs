use std::f64::consts::PI;

use chrono::{Datelike, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorridorDataset, Provenance, Scaler, CHANNELS, MARKER_DIM, SLOTS_PER_DAY, SPEED};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Window length and lead time, both in slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleConfig {
    pub window: usize,
    pub horizon: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { window: 4, horizon: 1 }
    }
}

impl SampleConfig {
    pub fn new(window: usize, horizon: usize) -> Result<Self> {
        let cfg = Self { window, horizon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 || self.horizon < 1 {
            return Err(Error::Config(format!(
                "window must be at least 2 and horizon at least 1 (got {} and {})",
                self.window, self.horizon
            )));
        }
        if self.window + self.horizon > SLOTS_PER_DAY {
            return Err(Error::Config(format!(
                "window {} plus horizon {} exceeds {SLOTS_PER_DAY} slots",
                self.window, self.horizon
            )));
        }
        Ok(())
    }

    pub fn per_day(&self) -> usize {
        SLOTS_PER_DAY - self.window - self.horizon + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub day: usize,
    pub date: NaiveDate,
    /// First slot after the input window.
    pub slot: usize,
    /// Slot whose speed is the target.
    pub target_slot: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[sites, window, CHANNELS]`
    pub space: Tensor,
    /// `[window, sites, CHANNELS]`
    pub time: Tensor,
    /// `[sites, MARKER_DIM]`, one row repeated per site.
    pub marker: Tensor,
    /// `[sites, 1]` speed at the target slot.
    pub target: Tensor,
    pub anchor: Anchor,
    /// Whether values are in model units.
    pub scaled: bool,
}

impl Sample {
    pub fn sites(&self) -> usize {
        self.space.shape()[0]
    }

    pub fn window(&self) -> usize {
        self.space.shape()[1]
    }

    /// Speed in the last input slot, per site.
    pub fn last_speed(&self) -> Vec<f64> {
        let n = self.window();
        (0..self.sites()).map(|s| self.space.at(&[s, n - 1, SPEED])).collect()
    }

    /// Rebuild the time-major view after editing `space`.
    pub fn sync_time(&mut self) {
        self.time = self.space.transpose(0, 1).expect("rank-3 sample");
    }
}

pub struct SampleSet {
    pub samples: Vec<Sample>,
    /// Samples whose target slot is mostly previous-week infill.
    pub prev_week_heavy: usize,
}

/// Five weekday one-hot features, linear time of day, and a 24-hour
/// sine/cosine pair.
pub fn encode_marker(date: NaiveDate, slot: usize) -> Result<[f64; MARKER_DIM]> {
    if slot >= SLOTS_PER_DAY {
        return Err(Error::invalid(format!("slot {slot} out of range")));
    }
    let dow = match date.weekday() {
        Weekday::Sat | Weekday::Sun => {
            return Err(Error::Data(format!("{date} is a weekend day; only weekdays are modelled")))
        }
        d => d.num_days_from_monday() as usize,
    };
    let mut m = [0.0; MARKER_DIM];
    m[dow] = 1.0;
    m[5] = slot as f64 / (SLOTS_PER_DAY - 1) as f64;
    let phase = 2.0 * PI * (slot + 4) as f64 / 96.0;
    m[6] = phase.sin();
    m[7] = phase.cos();
    Ok(m)
}

/// Slide the window over each listed day without crossing midnight.
/// Values are scaled on the fly when `scaler` is given.
pub fn make_samples(
    ds: &CorridorDataset,
    cfg: SampleConfig,
    days: &[usize],
    scaler: Option<&Scaler>,
    prev_week_limit: f64,
) -> Result<SampleSet> {
    cfg.validate()?;
    ds.ensure_complete()?;
    let p = ds.n_sites();
    let n = cfg.window;
    let mut samples = Vec::with_capacity(days.len() * cfg.per_day());
    let mut prev_week_heavy = 0;
    let tx = |ch: usize, x: f64| scaler.map_or(x, |s| s.transform(ch, x));
    for &day in days {
        if day >= ds.n_days() {
            return Err(Error::invalid(format!("day index {day} out of range")));
        }
        let date = ds.days[day];
        for t in n..=SLOTS_PER_DAY - cfg.horizon {
            let target_slot = t + cfg.horizon - 1;
            let mut space = Vec::with_capacity(p * n * CHANNELS);
            for s in 0..p {
                for k in t - n..t {
                    for (ch, &v) in ds.slot_values(s, day, k).iter().enumerate() {
                        space.push(tx(ch, v));
                    }
                }
            }
            let space = Tensor::new(vec![p, n, CHANNELS], space)?;
            let time = space.transpose(0, 1)?;
            let row = encode_marker(date, t)?;
            let marker = Tensor::new(vec![p, MARKER_DIM], row.repeat(p))?;
            let target: Vec<f64> = (0..p).map(|s| tx(SPEED, ds.get(s, day, target_slot, SPEED))).collect();
            let infilled = (0..p)
                .filter(|&s| ds.provenance(s, day, target_slot) == Provenance::PrevWeek)
                .count();
            if infilled as f64 > prev_week_limit * p as f64 {
                prev_week_heavy += 1;
            }
            samples.push(Sample {
                space,
                time,
                marker,
                target: Tensor::new(vec![p, 1], target)?,
                anchor: Anchor {
                    day,
                    date,
                    slot: t,
                    target_slot,
                },
                scaled: scaler.is_some(),
            });
        }
    }
    Ok(SampleSet {
        samples,
        prev_week_heavy,
    })
}

/// Samples stacked along a new leading axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub space: Tensor,
    pub time: Tensor,
    pub marker: Tensor,
    pub target: Tensor,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let stack = |f: fn(&Sample) -> &Tensor| -> Result<Tensor> {
            Tensor::stack(&samples.iter().map(|s| f(s)).collect::<Vec<_>>())
        };
        Ok(Self {
            space: stack(|s| &s.space)?,
            time: stack(|s| &s.time)?,
            marker: stack(|s| &s.marker)?,
            target: stack(|s| &s.target)?,
        })
    }

    pub fn zeros(batch: usize, sites: usize, window: usize, outputs: usize) -> Self {
        Self {
            space: Tensor::zeros(&[batch, sites, window, CHANNELS]),
            time: Tensor::zeros(&[batch, window, sites, CHANNELS]),
            marker: Tensor::zeros(&[batch, sites, MARKER_DIM]),
            target: Tensor::zeros(&[batch, sites, outputs]),
        }
    }

    pub fn len(&self) -> usize {
        self.space.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Assignment of day indices to train / validation / test.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DaySplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DaySplit {
    /// The last `n_test` days are held out for test; `n_val` validation days
    /// are drawn at random (seeded) from the rest.
    pub fn seeded(n_days: usize, n_train: usize, n_val: usize, n_test: usize, seed: u64) -> Result<Self> {
        if n_train + n_val + n_test != n_days || n_train == 0 || n_val == 0 {
            return Err(Error::Config(format!(
                "split {n_train}/{n_val}/{n_test} does not partition {n_days} days with nonempty train and validation"
            )));
        }
        let pool = n_days - n_test;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut val = rand::seq::index::sample(&mut rng, pool, n_val).into_vec();
        val.sort_unstable();
        let train = (0..pool).filter(|d| !val.contains(d)).collect();
        Ok(Self {
            train,
            val,
            test: (pool..n_days).collect(),
        })
    }

    /// 35/5/2 at 42 days, scaled proportionally (rounding validation and
    /// test up) for other lengths.
    pub fn proportional(n_days: usize, seed: u64) -> Result<Self> {
        if n_days < 3 {
            return Err(Error::Config(format!("need at least 3 days to split, got {n_days}")));
        }
        let n_val = (n_days * 5).div_ceil(42);
        let n_test = (n_days * 2).div_ceil(42);
        Self::seeded(n_days, n_days - n_val - n_test, n_val, n_test, seed)
    }

    /// As [`DaySplit::proportional`], but redraws validation until every
    /// weekday present before the test days still appears in training.
    /// Otherwise a weekday seen only at validation time would reach the
    /// model through an untrained marker weight. When no draw can cover
    /// them all (fewer training days than weekdays), the draw covering the
    /// most weekdays wins.
    pub fn covering(dates: &[NaiveDate], seed: u64) -> Result<Self> {
        const DRAWS: u64 = 1000;
        let n = dates.len();
        let first = Self::proportional(n, seed)?;
        let pool = n - first.test.len();
        let wanted = weekday_mask(dates[..pool].iter());
        let mut best = (0, first.clone());
        for k in 0..DRAWS {
            let s = if k == 0 { first.clone() } else { Self::proportional(n, seed.wrapping_add(k << 32))? };
            let got = weekday_mask(s.train.iter().map(|&d| &dates[d]));
            if got == wanted {
                return Ok(s);
            }
            if got.count_ones() > best.0 {
                best = (got.count_ones(), s);
            }
        }
        Ok(best.1)
    }

    pub fn explicit(n_days: usize, train: Vec<usize>, val: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let mut all: Vec<usize> = train.iter().chain(&val).chain(&test).copied().collect();
        all.sort_unstable();
        let before = all.len();
        all.dedup();
        if all.len() != before || all.last().is_some_and(|&d| d >= n_days) || train.is_empty() || val.is_empty() {
            return Err(Error::Config("day split must be disjoint, in range, with nonempty train and validation".into()));
        }
        Ok(Self { train, val, test })
    }
}

fn weekday_mask<'a>(dates: impl Iterator<Item = &'a NaiveDate>) -> u8 {
    dates.fold(0, |m, d| m | 1 << d.weekday().num_days_from_monday())
}
