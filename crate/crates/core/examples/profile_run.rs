//! Train one variant on a synthetic profile and print it next to the
//! baselines.
//!
//! `cargo run --release --example profile_run -- reduced dclstm-t 1`

use std::time::Instant;

use speedcast_core::data::SampleConfig;
use speedcast_core::experiment::{baseline_mae, prepare, train_variant, Profile};
use speedcast_core::Variant;

fn main() -> speedcast_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let profile = Profile::by_name(args.first().map_or("reduced", String::as_str)).expect("reduced or full");
    let variant = Variant::from_cli_name(args.get(1).map_or("dclstm-t", String::as_str)).expect("known variant");
    let seed = args.get(2).map_or(1, |s| s.parse().expect("integer seed"));
    let t0 = Instant::now();
    let prep = prepare(&profile, seed, SampleConfig::default())?;
    let base = baseline_mae(&prep)?;
    let out = train_variant(&prep, &profile, variant, seed, |e| {
        eprintln!("epoch {} train {:.5} val mae {:.5} at {:.0?}", e.epoch, e.train_loss, e.val_mae, t0.elapsed())
    })?;
    println!(
        "{} {variant} seed {seed}: mae {:.5} naive {:.5} sfc {:.5} best epoch {} in {:.1?}",
        profile.name,
        out.val.mae,
        base.naive,
        base.sfc,
        out.fit.best_epoch,
        t0.elapsed()
    );
    Ok(())
}
