//! Seeded synthetic experiments shared by the acceptance tests, the CLI
//! and the benches.

use serde::{Deserialize, Serialize};

use crate::baselines::{naive_forecast, sfc_predict, site_params, SfcParams, HOUR_SLOTS};
use crate::data::synth::{synthesize_corridor, SynthConfig};
use crate::data::{make_samples, CorridorDataset, DaySplit, Sample, SampleConfig, Scaler};
use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec, Variant};
use crate::train::{evaluate, fit, EpochRecord, EvalReport, FitResult, TrainConfig};

/// Corridor size and model width for a synthetic run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub name: String,
    pub sites: usize,
    pub days: usize,
    pub filters: [usize; 3],
    pub lstm_units: usize,
    pub max_epochs: usize,
}

impl Profile {
    /// 12 sites, 10 days, narrow layers. Minutes on one core.
    pub fn reduced() -> Self {
        Self {
            name: "reduced".into(),
            sites: 12,
            days: 10,
            filters: [8, 16, 16],
            lstm_units: 16,
            max_epochs: 15,
        }
    }

    /// 60 sites, 42 days, the published layer widths.
    pub fn full() -> Self {
        let canonical = ModelSpec::canonical(Variant::DclstmT);
        Self {
            name: "full".into(),
            sites: 60,
            days: 42,
            filters: canonical.filters,
            lstm_units: canonical.lstm_units,
            max_epochs: 15,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "reduced" => Some(Self::reduced()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn spec(&self, variant: Variant, window: usize, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(variant, self.sites, window);
        spec.filters = self.filters;
        spec.lstm_units = self.lstm_units;
        spec.init_seed = seed;
        spec
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            max_epochs: self.max_epochs,
            seed,
            ..TrainConfig::default()
        }
    }

    pub fn synth_config(&self, seed: u64) -> SynthConfig {
        SynthConfig::new(seed, self.sites, self.days)
    }
}

/// A corridor split, scaled and windowed.
pub struct Prepared {
    pub dataset: CorridorDataset,
    pub split: DaySplit,
    pub scaler: Scaler,
    pub sample_config: SampleConfig,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Link length per site for the speed-flow baseline.
    pub spacing_km: f64,
}

/// Synthesize the profile's corridor for `seed` and prepare it.
pub fn prepare(profile: &Profile, seed: u64, sample_config: SampleConfig) -> Result<Prepared> {
    let cfg = profile.synth_config(seed);
    let synthetic = synthesize_corridor(&cfg)?;
    Prepared::new(synthetic.dataset, seed, sample_config, cfg.spacing_km)
}

impl Prepared {
    /// Split days (seeded), fit the scaler on training days and window
    /// every split.
    pub fn new(dataset: CorridorDataset, seed: u64, sample_config: SampleConfig, spacing_km: f64) -> Result<Self> {
        let split = DaySplit::covering(&dataset.days, seed)?;
        Self::with_split(dataset, split, sample_config, spacing_km)
    }

    pub fn with_split(dataset: CorridorDataset, split: DaySplit, sample_config: SampleConfig, spacing_km: f64) -> Result<Self> {
        let scaler = Scaler::fit(&dataset, &split.train)?;
        let windows = |days: &[usize]| -> Result<Vec<Sample>> {
            Ok(make_samples(&dataset, sample_config, days, Some(&scaler), 1.0)?.samples)
        };
        let (train, val, test) = (windows(&split.train)?, windows(&split.val)?, windows(&split.test)?);
        Ok(Self {
            dataset,
            split,
            scaler,
            sample_config,
            train,
            val,
            test,
            spacing_km,
        })
    }

    /// Samples of the named split (`train`, `val` or `test`).
    pub fn samples(&self, which: &str) -> Result<&[Sample]> {
        match which {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}; use train, val or test"))),
        }
    }

    /// Raw-unit samples for the given days.
    pub fn raw(&self, days: &[usize]) -> Result<Vec<Sample>> {
        Ok(make_samples(&self.dataset, self.sample_config, days, None, 1.0)?.samples)
    }
}

pub struct Outcome {
    pub model: Model,
    pub fit: FitResult,
    pub val: EvalReport,
}

pub fn train_model(
    prep: &Prepared,
    spec: ModelSpec,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Outcome> {
    let mut model = Model::build(spec)?;
    let fit = fit(&mut model, &prep.train, &prep.val, cfg, on_epoch)?;
    let val = evaluate(&model, &prep.val)?;
    Ok(Outcome { model, fit, val })
}

pub fn train_variant(
    prep: &Prepared,
    profile: &Profile,
    variant: Variant,
    seed: u64,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<Outcome> {
    let spec = profile.spec(variant, prep.sample_config.window, seed);
    train_model(prep, spec, &profile.train_config(seed), on_epoch)
}

/// Naive and speed-flow forecasts scored on `samples`. The speed-flow
/// report is `None` when the window is shorter than an hour.
pub fn baseline_reports(
    prep: &Prepared,
    samples: &[Sample],
    params: Option<&[SfcParams]>,
) -> Result<(EvalReport, Option<EvalReport>)> {
    let naive: Vec<_> = samples.iter().map(naive_forecast).collect();
    let naive = EvalReport::from_predictions(samples, &naive)?;
    if prep.sample_config.window < HOUR_SLOTS {
        return Ok((naive, None));
    }
    let default;
    let params = match params {
        Some(p) => p,
        None => {
            default = site_params::<&[u8]>(&prep.dataset.sites, None, prep.spacing_km)?;
            &default
        }
    };
    let sfc = samples
        .iter()
        .map(|s| sfc_predict(s, params, Some(&prep.scaler)))
        .collect::<Result<Vec<_>>>()?;
    Ok((naive, Some(EvalReport::from_predictions(samples, &sfc)?)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineMae {
    pub naive: f64,
    pub sfc: f64,
}

/// Validation MAE of the naive and speed-flow forecasts, scaled units.
pub fn baseline_mae(prep: &Prepared) -> Result<BaselineMae> {
    let (naive, sfc) = baseline_reports(prep, &prep.val, None)?;
    let sfc = sfc.ok_or_else(|| Error::Config("speed-flow baseline needs a window of at least 4 slots".into()))?;
    Ok(BaselineMae {
        naive: naive.mae,
        sfc: sfc.mae,
    })
}
