use serde::{Deserialize, Serialize};

use super::{CorridorDataset, Sample, CHANNELS, CHANNEL_NAMES, FLOW_CHANNELS, SLOTS_PER_DAY, SPEED, SPEED_DIVISOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Standardizes the five flow channels and divides speed by 100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: [f64; FLOW_CHANNELS],
    pub std: [f64; FLOW_CHANNELS],
    pub speed_divisor: f64,
}

impl Scaler {
    /// Population statistics over `train_days` only.
    pub fn fit(ds: &CorridorDataset, train_days: &[usize]) -> Result<Self> {
        if train_days.is_empty() {
            return Err(Error::Data("cannot fit a scaler on zero training days".into()));
        }
        let n = (ds.n_sites() * train_days.len() * SLOTS_PER_DAY) as f64;
        let cells = || {
            (0..ds.n_sites()).flat_map(move |s| {
                train_days
                    .iter()
                    .flat_map(move |&d| (0..SLOTS_PER_DAY).map(move |k| ds.slot_values(s, d, k)))
            })
        };
        let mut mean = [0.0; FLOW_CHANNELS];
        for row in cells() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; FLOW_CHANNELS];
        for row in cells() {
            for ch in 0..FLOW_CHANNELS {
                var[ch] += (row[ch] - mean[ch]).powi(2);
            }
        }
        let mut std = [0.0; FLOW_CHANNELS];
        for ch in 0..FLOW_CHANNELS {
            std[ch] = (var[ch] / n).sqrt();
            if !(std[ch] > 0.0 && std[ch].is_finite()) {
                return Err(Error::Data(format!(
                    "channel {} has zero variance on the training split",
                    CHANNEL_NAMES[ch]
                )));
            }
        }
        Ok(Self {
            mean,
            std,
            speed_divisor: SPEED_DIVISOR,
        })
    }

    pub fn transform(&self, ch: usize, x: f64) -> f64 {
        if ch == SPEED {
            x / self.speed_divisor
        } else {
            (x - self.mean[ch]) / self.std[ch]
        }
    }

    pub fn inverse(&self, ch: usize, x: f64) -> f64 {
        if ch == SPEED {
            x * self.speed_divisor
        } else {
            x * self.std[ch] + self.mean[ch]
        }
    }

    fn map_last_axis(&self, t: &Tensor, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let mut out = t.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = f(i % CHANNELS, *v);
        }
        out
    }

    pub fn apply(&self, ds: &CorridorDataset) -> CorridorDataset {
        let mut out = ds.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v = self.transform(i % CHANNELS, *v);
        }
        out
    }

    pub fn invert(&self, ds: &CorridorDataset) -> CorridorDataset {
        let mut out = ds.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            *v = self.inverse(i % CHANNELS, *v);
        }
        out
    }

    /// Scale a raw-unit sample.
    pub fn apply_sample(&self, s: &Sample) -> Result<Sample> {
        if s.scaled {
            return Err(Error::Data("sample is already scaled".into()));
        }
        Ok(Sample {
            space: self.map_last_axis(&s.space, |ch, x| self.transform(ch, x)),
            time: self.map_last_axis(&s.time, |ch, x| self.transform(ch, x)),
            marker: s.marker.clone(),
            target: s.target.map(|x| x / self.speed_divisor),
            anchor: s.anchor,
            scaled: true,
        })
    }

    /// Undo [`Scaler::apply_sample`].
    pub fn invert_sample(&self, s: &Sample) -> Result<Sample> {
        if !s.scaled {
            return Err(Error::Data("sample is already in raw units".into()));
        }
        Ok(Sample {
            space: self.map_last_axis(&s.space, |ch, x| self.inverse(ch, x)),
            time: self.map_last_axis(&s.time, |ch, x| self.inverse(ch, x)),
            marker: s.marker.clone(),
            target: s.target.map(|x| x * self.speed_divisor),
            anchor: s.anchor,
            scaled: false,
        })
    }

    /// Flat layout used by checkpoints: means, stds, speed divisor.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.mean.to_vec();
        v.extend_from_slice(&self.std);
        v.push(self.speed_divisor);
        v
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 2 * FLOW_CHANNELS + 1 {
            return Err(Error::Container(format!("scaler array has {} values", v.len())));
        }
        let mut mean = [0.0; FLOW_CHANNELS];
        let mut std = [0.0; FLOW_CHANNELS];
        mean.copy_from_slice(&v[..FLOW_CHANNELS]);
        std.copy_from_slice(&v[FLOW_CHANNELS..2 * FLOW_CHANNELS]);
        Ok(Self {
            mean,
            std,
            speed_divisor: v[2 * FLOW_CHANNELS],
        })
    }
}
