//! Non-neural comparators: persistence (naive) and a calibrated
//! speed-flow curve `t = t0 + A * V^n`.

use std::io::Read;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Sample, Scaler, SPEED, SPEED_DIVISOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const KPH_PER_MPH: f64 = 1.609_344;
/// Passenger-car-unit weight for the 11.6 m+ band.
pub const HGV_PCU: f64 = 2.3;
/// Slots aggregated into one hourly flow.
pub const HOUR_SLOTS: usize = 4;

/// Last observed speed per site, in the sample's own units.
pub fn naive_forecast(sample: &Sample) -> Tensor {
    let last = sample.last_speed();
    let p = last.len();
    Tensor::new(vec![p, 1], last).expect("one value per site")
}

/// Calibrated rows of the speed-flow parameter table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Table3Row {
    /// Four-lane motorway.
    D4,
    /// Three-lane motorway.
    D3,
}

impl FromStr for Table3Row {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "D4" => Ok(Table3Row::D4),
            "D3" => Ok(Table3Row::D3),
            other => Err(Error::Data(format!("unknown speed-flow row {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SfcParams {
    pub s0_kph: f64,
    pub s2_kph: f64,
    /// pcu per hour.
    pub capacity: f64,
    pub power: f64,
    pub length_km: f64,
    pub pcu_factor: f64,
    /// Derived so that travel time at capacity is `L / S2`.
    pub a: f64,
}

impl SfcParams {
    pub fn calibrate(s0_kph: f64, s2_kph: f64, capacity: f64, power: f64, length_km: f64) -> Result<Self> {
        if !(s2_kph > 0.0 && s2_kph < s0_kph) {
            return Err(Error::Config(format!(
                "speed at capacity {s2_kph} must lie strictly between 0 and free-flow speed {s0_kph}"
            )));
        }
        if capacity <= 0.0 || power <= 0.0 || length_km <= 0.0 {
            return Err(Error::Config("capacity, power and link length must be positive".into()));
        }
        let a = length_km * (1.0 / s2_kph - 1.0 / s0_kph) / capacity.powf(power);
        Ok(Self {
            s0_kph,
            s2_kph,
            capacity,
            power,
            length_km,
            pcu_factor: HGV_PCU,
            a,
        })
    }

    pub fn table3(row: Table3Row, length_km: f64) -> Self {
        let capacity = match row {
            Table3Row::D4 => 9320.0,
            Table3Row::D3 => 6990.0,
        };
        Self::calibrate(113.0, 81.0, capacity, 2.8, length_km).expect("table rows are valid")
    }

    /// Link travel time in hours for hourly flow `v` (pcu).
    pub fn travel_time(&self, v: f64) -> f64 {
        self.length_km / self.s0_kph + self.a * v.max(0.0).powf(self.power)
    }

    pub fn speed_kph(&self, v: f64) -> f64 {
        self.length_km / self.travel_time(v)
    }
}

/// Hourly pcu flow per site from the last four window slots of a raw
/// sample.
pub fn hourly_pcu(raw: &Sample, pcu_factor: f64) -> Result<Vec<f64>> {
    let n = raw.window();
    if n < HOUR_SLOTS {
        return Err(Error::Config(format!(
            "speed-flow baseline needs a window of at least {HOUR_SLOTS} slots, got {n}"
        )));
    }
    Ok((0..raw.sites())
        .map(|s| {
            (n - HOUR_SLOTS..n)
                .map(|k| {
                    let b = |ch| raw.space.at(&[s, k, ch]);
                    b(0) + b(1) + b(2) + pcu_factor * b(3)
                })
                .sum()
        })
        .collect())
}

/// Speed-flow prediction per site in the sample's own units (mph for raw
/// samples, mph / 100 for scaled ones).
pub fn sfc_predict(sample: &Sample, params: &[SfcParams], scaler: Option<&Scaler>) -> Result<Tensor> {
    if params.len() != sample.sites() {
        return Err(Error::invalid(format!(
            "{} speed-flow parameter sets for {} sites",
            params.len(),
            sample.sites()
        )));
    }
    let raw = if sample.scaled {
        let sc = scaler.ok_or_else(|| Error::invalid("scaled sample needs the scaler to recover flows"))?;
        sc.invert_sample(sample)?
    } else {
        sample.clone()
    };
    let out = params
        .iter()
        .zip(hourly_pcu(&raw, HGV_PCU)?)
        .map(|(p, v)| {
            let mph = p.speed_kph(v) / KPH_PER_MPH;
            if sample.scaled {
                mph / scaler.map_or(SPEED_DIVISOR, |s| s.speed_divisor)
            } else {
                mph
            }
        })
        .collect();
    Tensor::new(vec![sample.sites(), 1], out)
}

/// Per-site parameters: D4 everywhere unless a `site_id,table3_row` CSV
/// names another row.
pub fn site_params<R: Read>(sites: &[String], overrides: Option<R>, length_km: f64) -> Result<Vec<SfcParams>> {
    let mut rows = vec![Table3Row::D4; sites.len()];
    if let Some(r) = overrides {
        let mut rdr = csv::Reader::from_reader(r);
        for rec in rdr.records() {
            let rec = rec?;
            if rec.len() != 2 {
                return Err(Error::Data(format!("override row needs 2 fields: {rec:?}")));
            }
            let Some(i) = sites.iter().position(|s| s == rec[0].trim()) else {
                return Err(Error::Data(format!("override names unknown site {:?}", &rec[0])));
            };
            rows[i] = rec[1].parse()?;
        }
    }
    Ok(rows.into_iter().map(|r| SfcParams::table3(r, length_km)).collect())
}

/// Mean absolute change between the last input speed and the target,
/// computed directly.
pub fn naive_mae_closed_form(samples: &[Sample]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in samples {
        let w = s.window();
        for site in 0..s.sites() {
            total += (s.target.at(&[site, 0]) - s.space.at(&[site, w - 1, SPEED])).abs();
            n += 1;
        }
    }
    total / n as f64
}
