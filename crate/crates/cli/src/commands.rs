use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::json;
use speedcast_core::baselines::site_params;
use speedcast_core::data::synth::{slot_label, synthesize_corridor, SynthConfig};
use speedcast_core::data::{
    assemble, infill, ingest_csv, load_dataset, make_samples, quality_filter, save_dataset, CorridorDataset, DaySplit,
    InfillPolicy, Provenance, SampleConfig, SLOTS_PER_DAY, SPEED, SPEED_DIVISOR, TOTAL_FLOW,
};
use speedcast_core::experiment::{baseline_reports, train_model, Prepared};
use speedcast_core::scenario::{assess, AssessConfig, ScenarioFile};
use speedcast_core::train::EvalReport;
use speedcast_core::{evaluate, Checkpoint, Error, Model, ModelSpec, TrainConfig, Variant};

use crate::config::{parse_list, Settings};
use crate::run::RunDir;
use crate::svg::{heatmap, stacked, Chart, Mark, Series};
use crate::{
    AblateArgs, Cli, Command, EvaluateArgs, Failure, IngestArgs, ModelArgs, PlotArgs, SimulateArgs, SweepArgs, SynthArgs,
    TrainArgs,
};

const DATASET: &str = "dataset.spdc";
const CHECKPOINT: &str = "checkpoint.spdc";
const DEFAULT_SPACING_KM: f64 = 0.5;

type Out = Result<PathBuf, Failure>;

pub fn dispatch(cli: Cli) -> Out {
    let mut st = Settings::load(cli.config.as_deref())?;
    let seed = st.get("seed", cli.seed, 1u64)?;
    let threads = cli.threads.unwrap_or(1);
    if threads == 0 {
        return Err(Failure::Usage("--threads must be at least 1".into()));
    }
    let out = cli.out_dir.as_deref();
    match cli.command {
        Command::Synth(a) => synth(a, st, seed, out),
        Command::Ingest(a) => ingest(a, st, seed, out),
        Command::Train(a) => train(a, st, seed, out),
        Command::Evaluate(a) => evaluate_cmd(a, st, seed, out),
        Command::Ablate(a) => ablate(a, st, seed, out, threads),
        Command::SweepHorizon(a) => sweep(a, st, seed, out, threads, Sweep::Horizon),
        Command::SweepWindow(a) => sweep(a, st, seed, out, threads, Sweep::Window),
        Command::Simulate(a) => simulate(a, st, seed, out),
        Command::Plot(a) => plot(a, st, seed, out),
    }
}

fn path_arg(st: &mut Settings, key: &str, flag: Option<&Path>) -> Result<PathBuf, Failure> {
    let s: String = st.require(key, flag.map(|p| p.to_string_lossy().into_owned()))?;
    Ok(PathBuf::from(s))
}

fn infill_policy(s: &str) -> Result<InfillPolicy, Failure> {
    match s {
        "carry-forward" => Ok(InfillPolicy::CarryForward),
        "linear" => Ok(InfillPolicy::Linear),
        other => Err(Failure::Usage(format!("unknown infill policy {other:?}; use carry-forward or linear"))),
    }
}

/// Quality filter, infill and cache `ds`; shared by `synth` and `ingest`.
fn clean_and_cache(
    run: &mut RunDir,
    ds: &CorridorDataset,
    max_missing: f64,
    policy: InfillPolicy,
    note: serde_json::Value,
    ingest: Option<&speedcast_core::data::IngestReport>,
) -> Result<CorridorDataset, Failure> {
    let (kept, qa) = quality_filter(ds, max_missing)?;
    let qa = match ingest {
        Some(r) => qa.with_ingest(r),
        None => qa,
    };
    let (filled, rep) = infill(&kept, policy)?;
    save_dataset(&run.path(DATASET), &filled, note)?;
    run.record(DATASET)?;
    run.write("qa.txt", format!("{qa}\n"))?;
    let mut s = format!(
        "same_day,{}\nprev_week,{}\nnext_week,{}\n",
        rep.same_day, rep.prev_week, rep.next_week
    );
    for w in &rep.warnings {
        let _ = writeln!(s, "# {w}");
    }
    run.write("infill.csv", s)?;
    eprintln!("{qa}");
    Ok(filled)
}

fn synth(a: SynthArgs, mut st: Settings, seed: u64, out: Option<&Path>) -> Out {
    let sites = st.get("sites", a.sites, 60usize)?;
    let days = st.get("days", a.days, 42usize)?;
    let missing_rate = st.get("missing_rate", a.missing_rate, 0.0f64)?;
    let max_missing = st.get("max_missing", a.max_missing, 0.10f64)?;
    let policy = infill_policy(&st.get("infill", a.infill, "carry-forward".to_string())?)?;
    let mut cfg = SynthConfig::new(seed, sites, days);
    cfg.missing_rate = missing_rate;
    let mut run = RunDir::create(out, "synth")?;
    let syn = synthesize_corridor(&cfg)?;
    let note = json!({ "source": "synthetic", "seed": seed, "spacing_km": cfg.spacing_km });
    clean_and_cache(&mut run, &syn.dataset, max_missing, policy, note, None)?;
    let mut ev = String::from("site,day,start_slot,duration_slots,drop_mph,extent_sites\n");
    for e in &syn.incidents {
        let _ = writeln!(
            ev,
            "{},{},{},{},{},{}",
            e.site, e.day, e.start_slot, e.duration_slots, e.drop_mph, e.extent_sites
        );
    }
    run.write("incidents.csv", ev)?;
    run.finish(seed, st.snapshot())
}

fn ingest(a: IngestArgs, mut st: Settings, seed: u64, out: Option<&Path>) -> Out {
    let max_missing = st.get("max_missing", a.max_missing, 0.10f64)?;
    let policy = infill_policy(&st.get("infill", a.infill, "carry-forward".to_string())?)?;
    let mut run = RunDir::create(out, "ingest")?;
    for f in &a.files {
        run.input(f)?;
    }
    let order = match &a.site_order {
        Some(p) => {
            run.input(p)?;
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Io(p.clone(), e))?;
            Some(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect::<Vec<_>>())
        }
        None => None,
    };
    let (site_days, report) = ingest_csv(&a.files)?;
    let ds = assemble(&site_days, order.as_deref())?;
    let note = json!({ "source": "ingest", "files": a.files.len(), "spacing_km": DEFAULT_SPACING_KM });
    clean_and_cache(&mut run, &ds, max_missing, policy, note, Some(&report))?;
    let mut bad = String::from("line,reason\n");
    for r in &report.invalid {
        let _ = writeln!(bad, "{},\"{}\"", r.line, r.reason.replace('"', "'"));
    }
    run.write("invalid_rows.csv", bad)?;
    run.finish(seed, st.snapshot())
}

fn load(run: &mut RunDir, path: &Path) -> Result<(CorridorDataset, f64), Failure> {
    run.input(path)?;
    let (ds, note) = load_dataset(path)?;
    let spacing = note.get("spacing_km").and_then(|v| v.as_f64()).unwrap_or(DEFAULT_SPACING_KM);
    Ok((ds, spacing))
}

struct ModelChoice {
    variant: Variant,
    sample: SampleConfig,
    train: TrainConfig,
    filters: [usize; 3],
    lstm_units: usize,
}

impl ModelChoice {
    fn resolve(st: &mut Settings, m: &ModelArgs, seed: u64) -> Result<Self, Failure> {
        let name = st.get("variant", m.variant.clone(), Variant::DclstmT.cli_name().to_string())?;
        let variant = Variant::from_cli_name(&name).ok_or_else(|| {
            let known: Vec<_> = Variant::ALL.iter().map(|v| v.cli_name()).collect();
            Failure::Usage(format!("unknown variant {name:?}; one of {}", known.join(", ")))
        })?;
        let sample = SampleConfig::new(st.get("window", m.window, 4usize)?, st.get("horizon", m.horizon, 1usize)?)?;
        let d = TrainConfig::default();
        let train = TrainConfig {
            max_epochs: st.get("epochs", m.epochs, d.max_epochs)?,
            batch_size: st.get("batch_size", m.batch_size, d.batch_size)?,
            learning_rate: st.get("learning_rate", m.learning_rate, d.learning_rate)?,
            l2: st.get("l2", m.l2, d.l2)?,
            patience: st.get("patience", m.patience, d.patience)?,
            seed,
            ..d
        };
        train.validate()?;
        let canonical = ModelSpec::canonical(variant);
        let f = st.get(
            "filters",
            m.filters.clone(),
            canonical.filters.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
        )?;
        let f: Vec<usize> = parse_list(&f)?;
        let filters: [usize; 3] = f
            .try_into()
            .map_err(|_| Failure::Usage("--filters needs exactly three values".into()))?;
        let lstm_units = st.get("lstm_units", m.lstm_units, canonical.lstm_units)?;
        Ok(Self {
            variant,
            sample,
            train,
            filters,
            lstm_units,
        })
    }

    fn spec(&self, variant: Variant, sites: usize, window: usize, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::new(variant, sites, window);
        spec.filters = self.filters;
        spec.lstm_units = self.lstm_units;
        spec.l2 = self.train.l2;
        spec.init_seed = seed;
        spec
    }
}

fn train(a: TrainArgs, mut st: Settings, seed: u64, out: Option<&Path>) -> Out {
    let ds_path = path_arg(&mut st, "dataset", a.dataset.as_deref())?;
    let choice = ModelChoice::resolve(&mut st, &a.model, seed)?;
    let mut run = RunDir::create(out, "train")?;
    let (ds, spacing) = load(&mut run, &ds_path)?;
    let prep = Prepared::new(ds, seed, choice.sample, spacing)?;
    let spec = choice.spec(choice.variant, prep.dataset.n_sites(), choice.sample.window, seed);
    let header = Model::build(spec.clone())?.summary();
    eprintln!("{header}");
    let mut log = header.clone();
    let _ = writeln!(
        log,
        "samples/day {}; train {} val {} test {}",
        choice.sample.per_day(),
        prep.train.len(),
        prep.val.len(),
        prep.test.len()
    );
    let outcome = train_model(&prep, spec, &choice.train, |e| {
        let line = format!(
            "epoch {:>3}  train {:.6}  val mse {:.6}  val mae {:.6}",
            e.epoch, e.train_loss, e.val_mse, e.val_mae
        );
        eprintln!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    let (naive, sfc) = baseline_reports(&prep, &prep.val, None)?;
    let best = outcome.fit.best();
    let _ = writeln!(log, "best epoch {} val mae {:.6}", outcome.fit.best_epoch, best.val_mae);
    run.write("train_log.txt", log)?;
    run.write("epoch_log.csv", outcome.fit.epoch_log())?;
    let ck = Checkpoint {
        model: outcome.model,
        scaler: Some(prep.scaler.clone()),
        seed,
        epoch: outcome.fit.best_epoch,
        val_history: outcome.fit.history.iter().map(|e| e.val_mse).collect(),
        train_config: Some(choice.train.clone()),
        sample_config: Some(choice.sample),
    };
    ck.save(&run.path(CHECKPOINT))?;
    run.record(CHECKPOINT)?;
    let metrics = json!({
        "variant": choice.variant.cli_name(),
        "test_id": choice.variant.test_id(),
        "parameters": ck.model.param_total(),
        "best_epoch": outcome.fit.best_epoch,
        "stopped_early": outcome.fit.stopped_early,
        "val_mse": outcome.val.mse,
        "val_mae": outcome.val.mae,
        "val_mae_mph": outcome.val.mae_mph,
        "naive_val_mae": naive.mae,
        "sfc_val_mae": sfc.map(|r| r.mae),
        "samples_per_day": choice.sample.per_day(),
    });
    run.write("metrics.json", serde_json::to_string_pretty(&metrics).expect("json"))?;
    run.write("split.json", serde_json::to_string_pretty(&prep.split).expect("json"))?;
    run.finish(seed, st.snapshot())
}

/// Rebuild the split a checkpoint was trained on and check its scaler.
fn prepare_for(ck: &Checkpoint, ds: CorridorDataset, spacing: f64) -> Result<Prepared, Failure> {
    let sample = ck
        .sample_config
        .ok_or_else(|| Error::Data("checkpoint has no sample configuration".into()))?;
    let prep = Prepared::new(ds, ck.seed, sample, spacing)?;
    if ck.scaler.as_ref() != Some(&prep.scaler) {
        return Err(Error::Data("dataset does not match the one this checkpoint was trained on".into()).into());
    }
    Ok(prep)
}

fn evaluate_cmd(a: EvaluateArgs, mut st: Settings, seed: u64, out: Option<&Path>) -> Out {
    let ck_path = path_arg(&mut st, "checkpoint", a.checkpoint.as_deref())?;
    let ds_path = path_arg(&mut st, "dataset", a.dataset.as_deref())?;
    let split = st.get("split", a.split, "test".to_string())?;
    let mut run = RunDir::create(out, "evaluate")?;
    run.input(&ck_path)?;
    let ck = Checkpoint::load(&ck_path)?;
    let (ds, spacing) = load(&mut run, &ds_path)?;
    let prep = prepare_for(&ck, ds, spacing)?;
    let samples = prep.samples(&split)?;
    let params = match &a.sfc_rows {
        Some(p) => {
            run.input(p)?;
            let f = std::fs::File::open(p).map_err(|e| Failure::Io(p.clone(), e))?;
            Some(site_params(&prep.dataset.sites, Some(f), prep.spacing_km)?)
        }
        None => None,
    };
    let report = evaluate(&ck.model, samples)?;
    let (naive, sfc) = baseline_reports(&prep, samples, params.as_deref())?;
    let row = |r: &EvalReport| json!({ "mse": r.mse, "mae": r.mae, "mse_mph": r.mse_mph, "mae_mph": r.mae_mph });
    let metrics = json!({
        "split": split,
        "predictions": report.n_predictions,
        "model": row(&report),
        "naive": row(&naive),
        "speed_flow": sfc.as_ref().map(row),
    });
    run.write("metrics.json", serde_json::to_string_pretty(&metrics).expect("json"))?;
    run.write("predictions.csv", report.predictions_csv())?;
    println!(
        "{split}: model mae {:.5} ({:.2} mph), naive {:.5}{}",
        report.mae,
        report.mae_mph,
        naive.mae,
        sfc.map_or(String::new(), |r| format!(", speed-flow {:.5}", r.mae))
    );
    run.finish(seed, st.snapshot())
}

/// Run `f` over `items` on `threads` workers, keeping input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.min(items.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("no worker panicked").into_iter().map(|r| r.expect("every item ran")).collect()
}

fn ablate(a: AblateArgs, mut st: Settings, seed: u64, out: Option<&Path>, threads: usize) -> Out {
    let ds_path = path_arg(&mut st, "dataset", a.dataset.as_deref())?;
    let choice = ModelChoice::resolve(&mut st, &a.model, seed)?;
    let mut run = RunDir::create(out, "ablate")?;
    let (ds, spacing) = load(&mut run, &ds_path)?;
    let prep = Prepared::new(ds, seed, choice.sample, spacing)?;
    let mut rows: Vec<(String, String, f64, f64)> = Vec::new();
    let (naive, sfc) = baseline_reports(&prep, &prep.val, None)?;
    rows.push(("h".into(), "Naive forecast (last observed speed)".into(), naive.mse, naive.mae));
    if let Some(sfc) = sfc {
        rows.push(("i".into(), "Speed-flow curve".into(), sfc.mse, sfc.mae));
    }
    if !a.skip_training {
        let results = parallel_map(&Variant::ALL, threads, |&v| {
            let spec = choice.spec(v, prep.dataset.n_sites(), choice.sample.window, seed);
            let r = train_model(&prep, spec, &choice.train, |_| {});
            if let Ok(o) = &r {
                eprintln!("test {} ({}): val mae {:.5}", v.test_id(), v.cli_name(), o.val.mae);
            }
            r
        });
        for (v, r) in Variant::ALL.iter().zip(results) {
            let o = r?;
            rows.push((v.test_id().into(), v.description().into(), o.val.mse, o.val.mae));
        }
    }
    rows.sort_by(|x, y| x.0.cmp(&y.0));
    let mut csv = String::from("test_id,description,mse,mae\n");
    for (id, desc, mse, mae) in &rows {
        let _ = writeln!(csv, "{id},\"{desc}\",{mse},{mae}");
    }
    run.write("ablation.csv", csv)?;
    run.finish(seed, st.snapshot())
}

#[derive(Clone, Copy)]
enum Sweep {
    Horizon,
    Window,
}

fn sweep(a: SweepArgs, mut st: Settings, seed: u64, out: Option<&Path>, threads: usize, kind: Sweep) -> Out {
    let ds_path = path_arg(&mut st, "dataset", a.dataset.as_deref())?;
    let choice = ModelChoice::resolve(&mut st, &a.model, seed)?;
    let (key, default, name) = match kind {
        Sweep::Horizon => ("horizons", "1,2,3,4,5,6", "sweep-horizon"),
        Sweep::Window => ("windows", "2,4,6,8,10,12", "sweep-window"),
    };
    let values: Vec<usize> = parse_list(&st.get(key, a.values, default.to_string())?)?;
    if values.is_empty() {
        return Err(Failure::Usage(format!("--values lists nothing to sweep for {name}")));
    }
    let mut run = RunDir::create(out, if matches!(kind, Sweep::Horizon) { "sweep-horizon" } else { "sweep-window" })?;
    let (ds, spacing) = load(&mut run, &ds_path)?;
    let results = parallel_map(&values, threads, |&v| -> Result<(f64, f64, f64), Failure> {
        let sample = match kind {
            Sweep::Horizon => SampleConfig::new(choice.sample.window, v)?,
            Sweep::Window => SampleConfig::new(v, choice.sample.horizon)?,
        };
        let prep = Prepared::new(ds.clone(), seed, sample, spacing)?;
        let spec = choice.spec(choice.variant, prep.dataset.n_sites(), sample.window, seed);
        let o = train_model(&prep, spec, &choice.train, |_| {})?;
        let (naive, _) = baseline_reports(&prep, &prep.val, None)?;
        eprintln!("{name} {v}: val mae {:.5} (naive {:.5})", o.val.mae, naive.mae);
        Ok((o.val.mse, o.val.mae, naive.mae))
    });
    let unit = if matches!(kind, Sweep::Horizon) { "horizon" } else { "window" };
    let mut csv = format!("{unit}_slots,minutes,mse,mae,naive_mae\n");
    let (mut model_pts, mut naive_pts) = (Vec::new(), Vec::new());
    for (v, r) in values.iter().zip(results) {
        let (mse, mae, nmae) = r?;
        let minutes = 15 * v;
        let _ = writeln!(csv, "{v},{minutes},{mse},{mae},{nmae}");
        model_pts.push((minutes as f64, mae * SPEED_DIVISOR));
        naive_pts.push((minutes as f64, nmae * SPEED_DIVISOR));
    }
    run.write(&format!("{unit}_sweep.csv"), csv)?;
    let chart = Chart::new(
        &format!("Validation MAE by {unit} ({})", choice.variant.cli_name()),
        &format!("{unit} (minutes)"),
        "MAE (mph)",
        Mark::Line,
    )
    .with(Series::new(choice.variant.cli_name(), model_pts))
    .with(Series::new("naive", naive_pts).dashed());
    run.write(&format!("{unit}_sweep.svg"), chart.render())?;
    run.finish(seed, st.snapshot())
}

fn simulate(a: SimulateArgs, mut st: Settings, seed: u64, out: Option<&Path>) -> Out {
    let ck_path = path_arg(&mut st, "checkpoint", a.checkpoint.as_deref())?;
    let ds_path = path_arg(&mut st, "dataset", a.dataset.as_deref())?;
    let d = AssessConfig::default();
    let threshold_mph = st.get("threshold_mph", a.threshold_mph, d.threshold_mph)?;
    let spacing_km = st.get("spacing_km", a.spacing_km, d.spacing_km)?;
    let upstream_window = st.get("upstream_window", a.upstream_window, d.upstream_window)?;
    let mut run = RunDir::create(out, "simulate")?;
    run.input(&ck_path)?;
    let ck = Checkpoint::load(&ck_path)?;
    let (ds, _) = load(&mut run, &ds_path)?;
    run.input(&a.scenario)?;
    let text = std::fs::read_to_string(&a.scenario).map_err(|e| Failure::Io(a.scenario.clone(), e))?;
    let scenario = ScenarioFile::parse(&text)?;
    let sample_cfg = ck
        .sample_config
        .ok_or_else(|| Error::Data("checkpoint has no sample configuration".into()))?;
    let scaler = ck
        .scaler
        .clone()
        .ok_or_else(|| Error::Data("checkpoint has no scaler".into()))?;
    let day = match scenario.date {
        Some(date) => ds
            .days
            .iter()
            .position(|d| *d == date)
            .ok_or_else(|| Error::Data(format!("{date} is not in the dataset")))?,
        None => *DaySplit::covering(&ds.days, ck.seed)?
            .test
            .first()
            .ok_or_else(|| Error::Data("no held-out test day".into()))?,
    };
    let raw = make_samples(&ds, sample_cfg, &[day], None, 1.0)?.samples;
    let sample = raw.iter().find(|s| s.anchor.slot == scenario.target_slot).ok_or_else(|| {
        Error::Config(format!(
            "target_slot {} has no full window; valid range {}..={}",
            scenario.target_slot,
            sample_cfg.window,
            SLOTS_PER_DAY - sample_cfg.horizon
        ))
    })?;
    let cfg = AssessConfig {
        threshold_mph,
        spacing_km,
        horizon: sample_cfg.horizon,
        upstream_window,
    };
    let report = assess(&ck.model, sample, &scenario.incident, &scaler, &cfg)?;
    let observed: Vec<f64> = sample.target.data().to_vec();
    run.write("impact.csv", report.csv(Some(&observed)))?;
    run.write("impact.json", serde_json::to_string_pretty(&report).expect("json"))?;
    let pts = |v: &[f64]| v.iter().enumerate().map(|(i, &y)| (i as f64, y)).collect::<Vec<_>>();
    let chart = Chart::new(
        &format!(
            "{} {} forecast, incident at sites {:?}",
            ds.days[day],
            slot_label(sample.anchor.target_slot),
            scenario.incident.sites
        ),
        "site (0 = most downstream)",
        "speed (mph)",
        Mark::Line,
    )
    .with(Series::new("observed", pts(&observed)))
    .with(Series::new("baseline forecast", pts(&report.baseline_mph)))
    .with(Series::new("incident forecast", pts(&report.incident_mph)).dashed());
    run.write("impact.svg", chart.render())?;
    println!(
        "upstream extent {} sites, mean upstream delta {:.2} mph, implied propagation {:.1} km/h",
        report.upstream_extent, report.mean_upstream_delta, report.propagation_kmh
    );
    run.finish(seed, st.snapshot())
}

fn plot(a: PlotArgs, mut st: Settings, seed: u64, out: Option<&Path>) -> Out {
    let ds_path = path_arg(&mut st, "dataset", a.dataset.as_deref())?;
    let day = st.get("day", a.day, 0usize)?;
    let site = match a.site {
        Some(s) => Some(st.get("site", Some(s), 0usize)?),
        None => None,
    };
    let mut run = RunDir::create(out, "plot")?;
    let (ds, _) = load(&mut run, &ds_path)?;
    if day >= ds.n_days() {
        return Err(Failure::Usage(format!("--day {day} outside 0..{}", ds.n_days())));
    }
    if let Some(s) = site.filter(|&s| s >= ds.n_sites()) {
        return Err(Failure::Usage(format!("--site {s} outside 0..{}", ds.n_sites())));
    }

    let sites: Vec<usize> = site.map_or_else(|| (0..ds.n_sites()).collect(), |s| vec![s]);
    let mut csv = String::from("site,day,slot,total_flow,speed_mph\n");
    let mut pts = Vec::new();
    for &s in &sites {
        for d in 0..ds.n_days() {
            for k in 0..SLOTS_PER_DAY {
                if ds.provenance(s, d, k) != Provenance::Observed {
                    continue;
                }
                let (f, v) = (ds.get(s, d, k, TOTAL_FLOW), ds.get(s, d, k, SPEED));
                let _ = writeln!(csv, "{s},{d},{k},{f},{v}");
                pts.push((f, v));
            }
        }
    }
    run.write("flow_speed.csv", csv)?;
    let scatter = Chart::new("Flow-speed relation", "total flow (veh / 15 min)", "speed (mph)", Mark::Dot)
        .with(Series::new(format!("{} observed slots", pts.len()), pts));
    run.write("flow_speed.svg", scatter.render())?;

    for (ch, name, label) in [(SPEED, "speed", "speed (mph)"), (TOTAL_FLOW, "flow", "total flow")] {
        let grid: Vec<Vec<f64>> = (0..ds.n_sites())
            .map(|s| (0..SLOTS_PER_DAY).map(|k| ds.get(s, day, k, ch)).collect())
            .collect();
        let mut csv = String::from("site");
        for k in 0..SLOTS_PER_DAY {
            let _ = write!(csv, ",{}", slot_label(k));
        }
        csv.push('\n');
        for (s, row) in grid.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(csv, "{s},{}", cells.join(","));
        }
        run.write(&format!("heatmap_{name}.csv"), csv)?;
        let title = format!("{label}, {} (rows: sites downstream to upstream)", ds.days[day]);
        run.write(&format!("heatmap_{name}.svg"), heatmap(&title, "slot (01:00 onwards)", "site", &grid))?;
    }

    if let Some(ck_path) = &a.checkpoint {
        run.input(ck_path)?;
        let ck = Checkpoint::load(ck_path)?;
        let sample_cfg = ck
            .sample_config
            .ok_or_else(|| Error::Data("checkpoint has no sample configuration".into()))?;
        let scaler = ck.scaler.as_ref().ok_or_else(|| Error::Data("checkpoint has no scaler".into()))?;
        let samples = make_samples(&ds, sample_cfg, &[day], Some(scaler), 1.0)?.samples;
        let report = evaluate(&ck.model, &samples)?;
        let s = site.unwrap_or(0);
        let mut csv = String::from("target_slot,observed_mph,predicted_mph,residual_mph\n");
        let (mut obs, mut pred, mut res) = (Vec::new(), Vec::new(), Vec::new());
        for p in report.predictions.iter().filter(|p| p.site == s) {
            let (o, y) = (p.observed * SPEED_DIVISOR, p.predicted * SPEED_DIVISOR);
            let _ = writeln!(csv, "{},{o},{y},{}", p.target_slot, o - y);
            let x = p.target_slot as f64;
            obs.push((x, o));
            pred.push((x, y));
            res.push((x, o - y));
        }
        run.write("prediction.csv", csv)?;
        let top = Chart::new(
            &format!("Site {s}, {}: observed and predicted speed", ds.days[day]),
            "target slot",
            "speed (mph)",
            Mark::Line,
        )
        .with(Series::new("observed", obs))
        .with(Series::new("predicted", pred).dashed());
        let bottom = Chart::new("Residual (observed - predicted)", "target slot", "mph", Mark::Bar).with(Series::new("residual", res));
        run.write("prediction.svg", stacked(&[top, bottom]))?;
    }
    run.finish(seed, st.snapshot())
}
