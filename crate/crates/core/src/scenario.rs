//! Incident what-if: override flow and speed at some sites and window
//! slots, then compare the model's forecasts with and without the change.

use std::collections::BTreeMap;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::data::{Sample, Scaler, SPEED, TOTAL_FLOW};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentSpec {
    pub sites: Vec<usize>,
    /// Window positions, 0 = oldest input slot.
    pub slots: Vec<usize>,
    /// Vehicles per 15-minute slot.
    pub flow: f64,
    pub speed_mph: f64,
}

impl IncidentSpec {
    pub fn validate(&self, sites: usize, window: usize) -> Result<()> {
        if self.sites.is_empty() || self.slots.is_empty() {
            return Err(Error::Config("incident needs at least one site and one slot".into()));
        }
        if let Some(s) = self.sites.iter().find(|&&s| s >= sites) {
            return Err(Error::Config(format!("incident site {s} outside a {sites}-site corridor")));
        }
        if let Some(k) = self.slots.iter().find(|&&k| k >= window) {
            return Err(Error::Config(format!("incident slot {k} outside the {window}-slot window")));
        }
        let mut sorted = self.slots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.slots.len() || sorted.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config("incident slots must be a contiguous range".into()));
        }
        if self.flow < 0.0 || !(0.0..=120.0).contains(&self.speed_mph) {
            return Err(Error::Config("override flow must be nonnegative and speed within [0, 120]".into()));
        }
        Ok(())
    }
}

/// Apply the override to a raw sample and return the scaled result.
pub fn inject(raw: &Sample, incident: &IncidentSpec, scaler: &Scaler) -> Result<Sample> {
    if raw.scaled {
        return Err(Error::Data("inject expects a sample in raw units".into()));
    }
    incident.validate(raw.sites(), raw.window())?;
    let mut s = raw.clone();
    for &site in &incident.sites {
        for &k in &incident.slots {
            let bands: Vec<f64> = (0..4).map(|ch| s.space.at(&[site, k, ch])).collect();
            let sum: f64 = bands.iter().sum();
            for (ch, b) in bands.iter().enumerate() {
                let v = if sum > 0.0 {
                    b * (incident.flow / sum)
                } else if ch == 0 {
                    incident.flow
                } else {
                    0.0
                };
                s.space.set(&[site, k, ch], v);
            }
            s.space.set(&[site, k, TOTAL_FLOW], incident.flow);
            s.space.set(&[site, k, SPEED], incident.speed_mph);
        }
    }
    s.sync_time();
    scaler.apply_sample(&s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssessConfig {
    /// Sites count as queued when the forecast drops by at least this.
    pub threshold_mph: f64,
    pub spacing_km: f64,
    /// Forecast lead time in slots.
    pub horizon: usize,
    /// Upstream sites averaged for the mean delta.
    pub upstream_window: usize,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            threshold_mph: 5.0,
            spacing_km: 0.5,
            horizon: 1,
            upstream_window: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactReport {
    pub baseline_mph: Vec<f64>,
    pub incident_mph: Vec<f64>,
    /// Incident minus baseline.
    pub delta_mph: Vec<f64>,
    /// Contiguous upstream sites past the threshold.
    pub upstream_extent: usize,
    pub propagation_kmh: f64,
    pub mean_upstream_delta: f64,
}

impl ImpactReport {
    pub fn csv(&self, observed_mph: Option<&[f64]>) -> String {
        let mut s = String::from("site,observed_mph,baseline_mph,incident_mph,delta_mph\n");
        for i in 0..self.delta_mph.len() {
            let obs = observed_mph.map_or(String::new(), |o| o[i].to_string());
            s.push_str(&format!(
                "{i},{obs},{},{},{}\n",
                self.baseline_mph[i], self.incident_mph[i], self.delta_mph[i]
            ));
        }
        s
    }
}

/// Forecast both samples and summarize the difference upstream of the most
/// upstream incident site.
pub fn compare(
    model: &Model,
    baseline: &Sample,
    incident: &Sample,
    incident_sites: &[usize],
    cfg: &AssessConfig,
) -> Result<ImpactReport> {
    if !model.is_trained() {
        return Err(Error::ModelState("incident assessment needs a trained model".into()));
    }
    let preds = model.predict(&[baseline.clone(), incident.clone()])?;
    let to_mph = |t: &crate::tensor::Tensor| -> Vec<f64> { t.data().iter().map(|v| v * crate::data::SPEED_DIVISOR).collect() };
    let baseline_mph = to_mph(&preds[0]);
    let incident_mph = to_mph(&preds[1]);
    let delta_mph: Vec<f64> = incident_mph.iter().zip(&baseline_mph).map(|(a, b)| a - b).collect();
    let head = incident_sites.iter().copied().max().unwrap_or(0);
    let upstream = &delta_mph[(head + 1).min(delta_mph.len())..];
    let upstream_extent = upstream.iter().take_while(|&&d| d <= -cfg.threshold_mph).count();
    let near: Vec<f64> = upstream.iter().take(cfg.upstream_window).copied().collect();
    let mean_upstream_delta = if near.is_empty() {
        0.0
    } else {
        near.iter().sum::<f64>() / near.len() as f64
    };
    let hours = cfg.horizon as f64 * 0.25;
    Ok(ImpactReport {
        baseline_mph,
        incident_mph,
        delta_mph,
        upstream_extent,
        propagation_kmh: upstream_extent as f64 * cfg.spacing_km / hours,
        mean_upstream_delta,
    })
}

/// Inject the incident into `raw` and compare against the untouched sample.
pub fn assess(model: &Model, raw: &Sample, incident: &IncidentSpec, scaler: &Scaler, cfg: &AssessConfig) -> Result<ImpactReport> {
    let base = scaler.apply_sample(raw)?;
    let hit = inject(raw, incident, scaler)?;
    compare(model, &base, &hit, &incident.sites, cfg)
}

/// Parsed scenario file: `key = value` lines, `#` comments.
///
/// ```text
/// date = 2017-10-31
/// target_slot = 29
/// sites = 8,9
/// slots = 3
/// flow = 220
/// speed_mph = 5
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioFile {
    pub date: Option<NaiveDate>,
    /// First slot after the input window (slot of the first forecast).
    pub target_slot: usize,
    pub incident: IncidentSpec,
}

fn parse_list(v: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in v.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once('-') {
            let (a, b): (usize, usize) = (num(a)?, num(b)?);
            if b < a {
                return Err(Error::Config(format!("descending range {part}")));
            }
            out.extend(a..=b);
        } else {
            out.push(num(part)?);
        }
    }
    Ok(out)
}

fn num<T: std::str::FromStr>(v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse {v:?}")))
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("scenario line {}: expected key = value", i + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("scenario file is missing {k}")));
        let known = ["date", "target_slot", "sites", "slots", "flow", "speed_mph"];
        if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown scenario key {k}")));
        }
        let date = kv
            .get("date")
            .map(|d| NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|_| Error::Config(format!("bad date {d}"))))
            .transpose()?;
        Ok(Self {
            date,
            target_slot: num(get("target_slot")?)?,
            incident: IncidentSpec {
                sites: parse_list(get("sites")?)?,
                slots: parse_list(get("slots")?)?,
                flow: num(get("flow")?)?,
                speed_mph: num(get("speed_mph")?)?,
            },
        })
    }
}
