use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgnet_core::evaluation::{baseline_persistence, fit_atypical_thresholds, HistoricalAverage, MetricsReport};
use tgnet_core::grid::io::{read_holidays_file, read_logs_file, read_tensor_file, write_logs_file, write_tensor_file};
use tgnet_core::grid::{rasterize, temporal_keys, DemandTensor, GridSpec, HolidayCalendar, LogKind, TemporalKey};
use tgnet_core::model::write_tge_csv;
use tgnet_core::synth::{export_logs, generate, read_config, Preset, SynthConfig};
use tgnet_core::training::{make_examples, predict_set, train, History};
use tgnet_core::{Error, Result, TgNet64};

use crate::config::RunConfig;

pub const DATASET_FILE: &str = "dataset.json";
pub const PICKUP_FILE: &str = "pickup.stgd";
pub const DROPOFF_FILE: &str = "dropoff.stgd";
pub const CHECKPOINT_FILE: &str = "model.tgck";

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    spec: GridSpec,
    holidays: HolidayCalendar,
}

/// Tensors plus the calendar context needed to key every interval.
pub struct Dataset {
    pub spec: GridSpec,
    pub pickup: DemandTensor,
    pub dropoff: DemandTensor,
    pub keys: Vec<TemporalKey>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_dataset(
    dir: &Path,
    spec: &GridSpec,
    holidays: &HolidayCalendar,
    pickup: &DemandTensor,
    dropoff: &DemandTensor,
) -> Result<()> {
    create_dir(dir)?;
    write_tensor_file(&dir.join(PICKUP_FILE), pickup)?;
    write_tensor_file(&dir.join(DROPOFF_FILE), dropoff)?;
    write_json(
        &dir.join(DATASET_FILE),
        &DatasetMeta {
            spec: spec.clone(),
            holidays: holidays.clone(),
        },
    )
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join(DATASET_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
    meta.spec.validate()?;
    let pickup = read_tensor_file(&dir.join(PICKUP_FILE))?;
    let dropoff = read_tensor_file(&dir.join(DROPOFF_FILE))?;
    for t in [&pickup, &dropoff] {
        if t.periods() != meta.spec.n_intervals() || t.nodes() != meta.spec.n_nodes() {
            return Err(Error::Data(format!(
                "{} tensor is {}x{} but {} describes {}x{}",
                t.kind().as_str(),
                t.periods(),
                t.nodes(),
                meta_path.display(),
                meta.spec.n_intervals(),
                meta.spec.n_nodes()
            )));
        }
    }
    if pickup.kind() != LogKind::Pickup || dropoff.kind() != LogKind::Dropoff {
        return Err(Error::Data(format!("tensor kinds in {} are swapped", dir.display())));
    }
    let keys = temporal_keys(&meta.spec, &meta.holidays)?;
    Ok(Dataset {
        spec: meta.spec,
        pickup,
        dropoff,
        keys,
    })
}

pub fn ingest(run: &RunConfig, logs: Option<&Path>, holidays: Option<&Path>, out_dir: &Path) -> Result<()> {
    let spec = run
        .grid
        .as_ref()
        .ok_or_else(|| Error::Config("ingest needs a `grid` block in the config".into()))?;
    let logs_path = logs
        .or(run.paths.logs.as_deref())
        .ok_or_else(|| Error::Config("no log file given (argument or paths.logs)".into()))?;
    let calendar = match holidays.or(run.paths.holidays.as_deref()) {
        Some(p) => read_holidays_file(p)?,
        None => HolidayCalendar::default(),
    };
    let logs = read_logs_file(logs_path)?;
    let pickup = rasterize(&logs, spec, LogKind::Pickup)?;
    let dropoff = rasterize(&logs, spec, LogKind::Dropoff)?;
    log::info!(
        "rasterized {} logs into {} intervals x {} regions ({} pick-ups and {} drop-offs outside the grid or period)",
        logs.len(),
        spec.n_intervals(),
        spec.n_nodes(),
        pickup.dropped,
        dropoff.dropped
    );
    write_dataset(out_dir, spec, &calendar, &pickup.tensor, &dropoff.tensor)
}

pub fn synth(
    run: &RunConfig,
    preset: Option<&str>,
    synth_config: Option<&Path>,
    seed: Option<u64>,
    with_logs: bool,
    out_dir: &Path,
) -> Result<()> {
    let mut cfg = match (synth_config, preset) {
        (Some(path), _) => read_config(path)?,
        (None, Some(name)) => SynthConfig::preset(name.parse::<Preset>()?, 0),
        (None, None) => run.synth.clone().unwrap_or_default(),
    };
    if let Some(s) = seed {
        cfg = match preset {
            // presets derive their spatial layout from the seed as well
            Some(name) if synth_config.is_none() => SynthConfig::preset(name.parse::<Preset>()?, s),
            _ => SynthConfig { seed: s, ..cfg },
        };
    }
    let out = generate(&cfg)?;
    write_dataset(out_dir, &out.spec, &out.calendar, &out.pickup, &out.dropoff)?;
    write_json(&out_dir.join("labels.json"), &out.labels)?;
    write_json(&out_dir.join("synth_config.json"), &cfg)?;
    if with_logs {
        let mut logs = export_logs(&out.pickup, &out.spec, cfg.seed)?;
        logs.extend(export_logs(&out.dropoff, &out.spec, cfg.seed)?);
        logs.sort_by_key(|l| l.timestamp);
        write_logs_file(&out_dir.join("logs.csv"), &logs)?;
    }
    log::info!(
        "generated {} intervals x {} regions, {} pick-ups, {} events",
        out.pickup.periods(),
        out.pickup.nodes(),
        out.pickup.total(),
        out.labels.events.len()
    );
    Ok(())
}

pub fn train_model(data: &Dataset, run: &RunConfig, seed: u64) -> Result<(TgNet64, History)> {
    let splits = make_examples(&data.pickup, &data.dropoff, &data.keys, &run.model, &run.train.split)?;
    log::info!(
        "examples: {} train, {} val, {} test",
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    );
    let mut model = TgNet64::new(run.model.clone(), data.spec.dims(), seed)?;
    model.scale = splits.scale;
    model.dropoff_scale = splits.dropoff_scale;
    log::info!("model has {} parameters", model.param_count());
    let mut tc = run.train.clone();
    tc.seed = seed;
    let history = train(&mut model, &splits.train, &splits.val, &tc)?;
    Ok((model, history))
}

pub fn train_cmd(run: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let data = read_dataset(data_dir)?;
    let (model, history) = train_model(&data, run, run.train.seed)?;
    create_dir(out_dir)?;
    model.save(&out_dir.join(CHECKPOINT_FILE))?;
    history.write_csv_file(&out_dir.join("history.csv"))?;
    match (history.best_epoch, history.best_val_loss) {
        (Some(e), Some(l)) => log::info!("best validation loss {l:.6} at epoch {e}"),
        _ => log::info!("trained {} epochs without a validation set", history.epochs.len()),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub persistence: MetricsReport,
    pub historical_average: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test_examples: usize,
    pub n_parameters: usize,
    pub model: MetricsReport,
    pub baselines: Baselines,
}

pub fn evaluate(model: &TgNet64, data: &Dataset, run: &RunConfig) -> Result<EvalReport> {
    let splits = make_examples(&data.pickup, &data.dropoff, &data.keys, model.config(), &run.train.split)?;
    if splits.test.is_empty() {
        return Err(Error::Data("the test split is empty".into()));
    }
    if splits.scale != model.scale {
        log::warn!(
            "checkpoint scale {} differs from this dataset's training max {}",
            model.scale.max_train,
            splits.scale.max_train
        );
    }
    let opts = &run.eval;
    let preds = predict_set(model, &splits.test, opts.batch_size)?;
    let truths: Vec<f64> = splits
        .test
        .examples
        .iter()
        .flat_map(|e| e.target_raw.iter().map(|&x| x as f64))
        .collect();
    let targets: Vec<usize> = splits.test.targets().collect();
    let mut slices = Vec::with_capacity(opts.quantiles.len());
    for &q in &opts.quantiles {
        let th = fit_atypical_thresholds(
            &data.pickup,
            &data.keys,
            splits.train_range.clone(),
            q,
            opts.min_bucket,
            opts.scheme,
        )?;
        slices.push((q, th.select(&data.pickup, &targets, &data.keys)));
    }
    let persistence = baseline_persistence(&data.pickup, &targets)?;
    let ha = HistoricalAverage::fit(&data.pickup, &data.keys, splits.train_range.clone(), opts.scheme)?
        .predict(&targets, &data.keys);
    Ok(EvalReport {
        n_test_examples: splits.test.len(),
        n_parameters: model.param_count(),
        model: MetricsReport::build(&preds, &truths, opts.k, &slices)?,
        baselines: Baselines {
            persistence: MetricsReport::build(&persistence, &truths, opts.k, &slices)?,
            historical_average: MetricsReport::build(&ha, &truths, opts.k, &slices)?,
        },
    })
}

pub fn checkpoint_path(run: &RunConfig, flag: Option<PathBuf>, out_dir: &Path) -> PathBuf {
    flag.or_else(|| run.paths.checkpoint.clone())
        .unwrap_or_else(|| out_dir.join(CHECKPOINT_FILE))
}

pub fn eval_cmd(run: &RunConfig, data_dir: &Path, checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let model = TgNet64::load(checkpoint)?;
    let data = read_dataset(data_dir)?;
    let report = evaluate(&model, &data, run)?;
    log::info!(
        "test RMSE {:.3}, MAPE {:.2}% over {} samples",
        report.model.overall.rmse,
        report.model.overall.mape,
        report.model.overall.n_evaluated
    );
    create_dir(out_dir)?;
    write_json(&out_dir.join("report.json"), &report)
}

pub fn export_tge(checkpoint: &Path, out_dir: &Path) -> Result<()> {
    let model = TgNet64::load(checkpoint)?;
    let interval_len = tgnet_core::grid::SECONDS_PER_DAY / model.config().slots_per_day as i64;
    let rows = model.export_tge(interval_len)?;
    create_dir(out_dir)?;
    let path = out_dir.join("tge_vectors.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_tge_csv(std::io::BufWriter::new(file), &rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation; a single value has zero spread.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Some(Self { mean, std: var.sqrt() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceSummary {
    pub quantile: f64,
    pub rmse: Option<MeanStd>,
    pub mape: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproReport {
    pub seeds: Vec<u64>,
    pub rmse: MeanStd,
    pub mape: MeanStd,
    pub atypical: Vec<SliceSummary>,
    pub runs: Vec<EvalReport>,
}

pub fn summarize(seeds: Vec<u64>, runs: Vec<EvalReport>) -> Result<ReproReport> {
    let collect = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> { runs.iter().filter_map(f).collect() };
    let rmse = MeanStd::of(&collect(&|r| Some(r.model.overall.rmse)))
        .ok_or_else(|| Error::Config("repro needs at least one seed".into()))?;
    let mape = MeanStd::of(&collect(&|r| Some(r.model.overall.mape))).expect("same length as rmse");
    let n_slices = runs[0].model.atypical.len();
    let atypical = (0..n_slices)
        .map(|i| SliceSummary {
            quantile: runs[0].model.atypical[i].quantile,
            rmse: MeanStd::of(&collect(&|r| r.model.atypical[i].metrics.as_ref().map(|m| m.rmse))),
            mape: MeanStd::of(&collect(&|r| r.model.atypical[i].metrics.as_ref().map(|m| m.mape))),
        })
        .collect();
    Ok(ReproReport {
        seeds,
        rmse,
        mape,
        atypical,
        runs,
    })
}

/// Trains and evaluates one model per seed `seed, seed + 1, ..` and aggregates the reports.
pub fn repro(run: &RunConfig, data_dir: &Path, n_seeds: usize, seed: u64, out_dir: &Path) -> Result<()> {
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let data = read_dataset(data_dir)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| seed.wrapping_add(i)).collect();
    let mut runs = Vec::with_capacity(n_seeds);
    for &s in &seeds {
        log::info!("seed {s}");
        let (model, _) = train_model(&data, run, s)?;
        runs.push(evaluate(&model, &data, run)?);
    }
    let report = summarize(seeds, runs)?;
    log::info!("RMSE {:.3} ± {:.3}", report.rmse.mean, report.rmse.std);
    create_dir(out_dir)?;
    write_json(&out_dir.join("repro.json"), &report)
}
