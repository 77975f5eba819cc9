//! Fixtures shared by the benches.

use speedcast_core::data::synth::{synthesize_corridor, SynthConfig};
use speedcast_core::data::{make_samples, SampleConfig};
use speedcast_core::{Batch, DaySplit, Sample, Scaler};

/// Scaled samples from one synthetic day of a `sites`-site corridor.
pub fn day_samples(sites: usize, seed: u64) -> Vec<Sample> {
    let ds = synthesize_corridor(&SynthConfig::new(seed, sites, 10)).expect("valid config").dataset;
    let split = DaySplit::proportional(ds.n_days(), seed).expect("ten days split");
    let scaler = Scaler::fit(&ds, &split.train).expect("training days vary");
    make_samples(&ds, SampleConfig::default(), &split.val[..1], Some(&scaler), 1.0)
        .expect("complete corridor")
        .samples
}

pub fn batch(samples: &[Sample], size: usize) -> Batch {
    let refs: Vec<&Sample> = samples.iter().take(size).collect();
    Batch::from_samples(&refs).expect("same-shape samples")
}
