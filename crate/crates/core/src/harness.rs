//! Experiment orchestration: JSON configs, dataset preparation, the
//! train/evaluate loop with early stopping, and CSV artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::graph::{batch_indices, read_dataset, BatchLimits, Graph};
use crate::metrics::{self, direction, Direction, LayerDiversityProfile, MadTarget};
use crate::models::{Model, ModelConfig};
use crate::synthetic::{self, SyntheticSpec, SyntheticTask};
use crate::tensor::Tensor;
use crate::train::{
    checkpoint_load, checkpoint_save, evaluate, predict, train_step, EvalRecord, Task, TrainConfig, TrainState,
};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MAD_FILE: &str = "mad_profile.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.gnnd";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";

fn d_val_fraction() -> f64 {
    0.2
}

/// Either a synthetic generator or a newline-delimited JSON dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Generator seed; the experiment seed when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default = "d_val_fraction")]
    pub val_fraction: f64,
}

fn d_max_steps() -> u64 {
    500
}
fn d_eval_interval() -> u64 {
    50
}
fn d_patience() -> usize {
    10
}
fn d_true() -> bool {
    true
}
fn d_probe() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub batch: BatchLimits,
    #[serde(default = "d_max_steps")]
    pub max_steps: u64,
    #[serde(default = "d_eval_interval")]
    pub eval_interval: u64,
    /// Evaluations without improvement before stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,
    #[serde(default = "d_true")]
    pub use_ema: bool,
    /// Validation graphs used for the MAD profile.
    #[serde(default = "d_probe")]
    pub probe_graphs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

const KEYS: [&str; 11] = [
    "seed",
    "dataset",
    "model",
    "train",
    "batch",
    "max_steps",
    "eval_interval",
    "patience",
    "use_ema",
    "probe_graphs",
    "output_dir",
];

fn section<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, key: &str, bad: &mut Vec<String>) -> Option<T> {
    let v = obj.get(key)?;
    match serde_path_to_error::deserialize::<_, T>(v) {
        Ok(t) => Some(t),
        Err(e) => {
            let path = e.path().to_string();
            let field = if path == "." {
                key.to_string()
            } else {
                format!("{key}.{path}")
            };
            bad.push(format!("{field}: {}", e.inner()));
            None
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a config, reporting every bad field at once.
    /// Relative paths are resolved against `base_dir`.
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let root: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(vec![format!("config is not valid JSON: {e}")]))?;
        let obj = root
            .as_object()
            .ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
        let mut bad: Vec<String> = obj
            .keys()
            .filter(|k| !KEYS.contains(&k.as_str()))
            .map(|k| format!("{k}: unknown field"))
            .collect();
        for required in ["seed", "dataset", "model"] {
            if !obj.contains_key(required) {
                bad.push(format!("{required}: required field is missing"));
            }
        }
        let seed = section::<u64>(obj, "seed", &mut bad);
        let dataset = section::<DatasetSpec>(obj, "dataset", &mut bad);
        let model = section::<ModelConfig>(obj, "model", &mut bad);
        let train = section::<TrainConfig>(obj, "train", &mut bad);
        let batch = section::<BatchLimits>(obj, "batch", &mut bad);
        let max_steps = section::<u64>(obj, "max_steps", &mut bad);
        let eval_interval = section::<u64>(obj, "eval_interval", &mut bad);
        let patience = section::<usize>(obj, "patience", &mut bad);
        let use_ema = section::<bool>(obj, "use_ema", &mut bad);
        let probe_graphs = section::<usize>(obj, "probe_graphs", &mut bad);
        let output_dir = section::<PathBuf>(obj, "output_dir", &mut bad);
        let (Some(seed), Some(mut dataset), Some(model)) = (seed, dataset, model) else {
            return Err(Error::Config(bad));
        };
        if let Some(p) = &dataset.path {
            if p.is_relative() {
                dataset.path = Some(base_dir.join(p));
            }
        }
        let mut train = train.unwrap_or_default();
        if let (None, Some(s)) = (train.cutoff, &dataset.synthetic) {
            if s.task != SyntheticTask::Categorical {
                train.cutoff = Some(s.cutoff);
            }
        }
        let cfg = Self {
            seed,
            dataset,
            model,
            train,
            batch: batch.unwrap_or_default(),
            max_steps: max_steps.unwrap_or_else(d_max_steps),
            eval_interval: eval_interval.unwrap_or_else(d_eval_interval),
            patience: patience.unwrap_or_else(d_patience),
            use_ema: use_ema.unwrap_or(true),
            probe_graphs: probe_graphs.unwrap_or_else(d_probe),
            output_dir: output_dir.map(|p| if p.is_relative() { base_dir.join(p) } else { p }),
        };
        bad.extend(cfg.validate());
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Vec<String> {
        let mut bad = Vec::new();
        let d = &self.dataset;
        match (&d.synthetic, &d.path) {
            (Some(s), None) => bad.extend(s.validate()),
            (None, Some(p)) if !p.is_file() => bad.push(format!("dataset.path: {} does not exist", p.display())),
            (None, Some(_)) => {}
            _ => bad.push("dataset: exactly one of `synthetic` and `path` is required".into()),
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            bad.push(format!(
                "dataset.val_fraction: must lie in (0, 1), got {}",
                d.val_fraction
            ));
        }
        bad.extend(self.model.validate());
        bad.extend(self.train.validate(&self.model));
        if self.eval_interval == 0 {
            bad.push("eval_interval: must be positive".into());
        }
        if self.batch.max_graphs == 0 || self.batch.max_nodes == 0 {
            bad.push("batch: max_graphs and max_nodes must be positive".into());
        }
        if self.probe_graphs == 0 {
            bad.push("probe_graphs: must be positive".into());
        }
        bad
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Loads or generates the dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Vec<Graph>> {
    match (&cfg.dataset.synthetic, &cfg.dataset.path) {
        (Some(s), _) => synthetic::generate(s, cfg.dataset.seed.unwrap_or(cfg.seed)),
        (None, Some(p)) => read_dataset(p),
        (None, None) => Err(Error::Config(vec!["dataset: no source".into()])),
    }
}

/// Deterministic train/validation split.
pub fn split_dataset(graphs: Vec<Graph>, val_fraction: f64, seed: u64) -> Result<(Vec<Graph>, Vec<Graph>)> {
    let n = graphs.len();
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Validation(format!(
            "{n} graphs cannot be split with validation fraction {val_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    order.shuffle(&mut rng);
    let mut slots: Vec<Option<Graph>> = graphs.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index once");
    let val: Vec<Graph> = order[..n_val].iter().map(|&i| take(i)).collect();
    let train: Vec<Graph> = order[n_val..].iter().map(|&i| take(i)).collect();
    Ok((train, val))
}

/// Training order of one epoch, a function of `(seed, epoch)` only.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1000 + epoch);
    order.shuffle(&mut rng);
    order
}

/// Per-layer MAD of the latents and of the residual updates on a probe set.
#[derive(Clone, Debug, PartialEq)]
pub struct MadReport {
    pub latents: LayerDiversityProfile,
    pub residuals: LayerDiversityProfile,
}

impl MadReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["layer", "mad_latents", "mad_residuals"])?;
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for k in 0..self.latents.len() {
            w.write_record([
                (k + 1).to_string(),
                cell(self.latents.values[k]),
                cell(self.residuals.values[k]),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// MAD profiles of `probe` under the given parameters (EMA when `use_ema`).
pub fn probe_mad(
    model: &Model,
    state: &TrainState,
    probe: &[Graph],
    cfg: &TrainConfig,
    limits: BatchLimits,
    use_ema: bool,
) -> Result<MadReport> {
    let ema;
    let params = if use_ema {
        ema = state.ema_params();
        &ema
    } else {
        &state.params
    };
    let p = predict(model, params, state, probe, cfg, limits)?;
    let layers = p.snapshots.first().map_or(0, Vec::len);
    let counts: Vec<usize> = probe.iter().map(Graph::num_nodes).collect();
    let snaps: Vec<Tensor> = (0..layers)
        .map(|k| {
            let rows: Vec<Vec<f64>> = p
                .snapshots
                .iter()
                .flat_map(|g| (0..g[k].rows()).map(move |i| g[k].row(i).to_vec()))
                .collect();
            Tensor::from_rows(&rows)
        })
        .collect();
    Ok(MadReport {
        latents: metrics::mad_profile(&snaps, &counts, MadTarget::Latents)?,
        residuals: metrics::mad_profile(&snaps, &counts, MadTarget::ResidualUpdates)?,
    })
}

/// Outcome of a completed run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps: u64,
    pub best_step: u64,
    /// Validation value of the early-stopping metric at `best_step`.
    pub best_metric: f64,
    pub best_eval: EvalRecord,
    pub final_eval: EvalRecord,
    pub mad: MadReport,
    pub stopped_early: bool,
}

fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::GraphRegression => "mae",
        Task::GraphClassification => "accuracy",
    }
}

fn improves(name: &str, new: f64, best: Option<f64>) -> bool {
    match best {
        None => true,
        Some(b) => match direction(name) {
            Direction::Maximize => new > b,
            _ => new < b,
        },
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    name: &'static str,
    version: &'static str,
    checkpoint_format: u32,
    train_graphs: usize,
    val_graphs: usize,
    config: &'a ExperimentConfig,
}

fn write_diagnostics(out: &Path, step: u64, err: &Error) {
    let text = format!("run aborted at step {step}\n{err}\n");
    // best effort: the original error is what gets reported
    let _ = fs::write(out.join(DIAGNOSTICS_FILE), text);
}

/// The prepared pieces of a run: model, fresh state and data split.
pub struct RunSetup {
    pub model: Model,
    pub state: TrainState,
    pub train: Vec<Graph>,
    pub val: Vec<Graph>,
}

pub fn setup_run(cfg: &ExperimentConfig) -> Result<RunSetup> {
    let data = load_dataset(cfg)?;
    let (train, val) = split_dataset(data, cfg.dataset.val_fraction, cfg.seed)?;
    let (model, state) = TrainState::init(&cfg.model, &cfg.train, cfg.seed, &train)?;
    Ok(RunSetup {
        model,
        state,
        train,
        val,
    })
}

/// Trains per `cfg`, writing metrics, MAD profile, checkpoint and manifest
/// into `out` (created if missing). A non-finite loss aborts the run and
/// leaves a diagnostics file.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let bad = cfg.validate();
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    fs::create_dir_all(out)?;
    let RunSetup {
        model,
        mut state,
        train,
        val,
    } = setup_run(cfg)?;
    let manifest = Manifest {
        name: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        checkpoint_format: crate::train::CHECKPOINT_VERSION,
        train_graphs: train.len(),
        val_graphs: val.len(),
        config: cfg,
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    let _ = fs::remove_file(out.join(DIAGNOSTICS_FILE));

    let metric = primary_metric(cfg.train.task);
    let mut writer: Option<(csv::Writer<fs::File>, Vec<String>)> = None;
    let mut best: Option<f64> = None;
    let mut best_step = 0;
    let mut best_eval = EvalRecord::default();
    let mut last_eval = EvalRecord::default();
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let (mut loss_sum, mut aux_sum, mut count) = (0.0, 0.0, 0usize);
    let mut epoch = 0u64;
    'train: while state.step < cfg.max_steps {
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let ordered: Vec<Graph> = order.iter().map(|&i| train[i].clone()).collect();
        for idx in batch_indices(&ordered, cfg.batch)? {
            let members: Vec<Graph> = idx.iter().map(|&i| ordered[i].clone()).collect();
            let rec = train_step(&model, &mut state, &members, &cfg.train).inspect_err(|e| {
                if matches!(e, Error::Numeric(_)) {
                    write_diagnostics(out, state.step, e);
                }
            })?;
            loss_sum += rec.primary;
            aux_sum += rec.aux;
            count += 1;
            if state.step % cfg.eval_interval == 0 || state.step == cfg.max_steps {
                let ev = evaluate(&model, &state, &val, &cfg.train, cfg.batch, cfg.use_ema).inspect_err(|e| {
                    if matches!(e, Error::Numeric(_)) {
                        write_diagnostics(out, state.step, e);
                    }
                })?;
                let (w, names) = match &mut writer {
                    Some(w) => w,
                    None => {
                        let names: Vec<String> = ev.metrics.keys().cloned().collect();
                        let mut w = csv::Writer::from_path(out.join(METRICS_FILE))?;
                        let mut header = vec!["step".to_string(), "lr".into(), "train_loss".into(), "aux_loss".into()];
                        header.extend(names.iter().map(|n| format!("val_{n}")));
                        w.write_record(&header)?;
                        writer.insert((w, names))
                    }
                };
                let mut row = vec![
                    state.step.to_string(),
                    rec.lr.to_string(),
                    (loss_sum / count as f64).to_string(),
                    (aux_sum / count as f64).to_string(),
                ];
                row.extend(
                    names
                        .iter()
                        .map(|n| ev.get(n).map(|v| v.to_string()).unwrap_or_default()),
                );
                w.write_record(&row)?;
                w.flush()?;
                (loss_sum, aux_sum, count) = (0.0, 0.0, 0);
                let value = ev
                    .get(metric)
                    .ok_or_else(|| Error::UndefinedMetric(format!("validation {metric} unavailable")))?;
                if improves(metric, value, best) {
                    best = Some(value);
                    best_step = state.step;
                    best_eval = ev.clone();
                    since_best = 0;
                } else {
                    since_best += 1;
                }
                last_eval = ev;
                if since_best >= cfg.patience {
                    stopped_early = true;
                    break 'train;
                }
            }
            if state.step >= cfg.max_steps {
                break 'train;
            }
        }
        epoch += 1;
    }
    checkpoint_save(&state, &out.join(CHECKPOINT_FILE))?;
    let probe: Vec<Graph> = val.iter().take(cfg.probe_graphs).cloned().collect();
    let mad = probe_mad(&model, &state, &probe, &cfg.train, cfg.batch, cfg.use_ema)?;
    mad.write_csv(&out.join(MAD_FILE))?;
    Ok(RunSummary {
        steps: state.step,
        best_step,
        best_metric: best.unwrap_or(f64::NAN),
        best_eval,
        final_eval: last_eval,
        mad,
        stopped_early,
    })
}

/// Reads the manifest of a finished run and restores its final state.
pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, RunSetup)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let v: Value = serde_json::from_str(&text)?;
    let cfg_value = v
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Validation(format!("{}: manifest has no config", dir.display())))?;
    let cfg = ExperimentConfig::from_json(&cfg_value.to_string(), dir)?;
    let mut setup = setup_run(&cfg)?;
    setup.state = checkpoint_load(&dir.join(CHECKPOINT_FILE), &setup.state)?;
    Ok((cfg, setup))
}

/// A metrics table: header and rows of raw string cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn run_label(dir: &Path, seen: &mut BTreeMap<String, usize>) -> String {
    let base = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    let n = seen.entry(base.clone()).or_insert(0);
    *n += 1;
    if *n == 1 {
        base
    } else {
        format!("{base}#{n}")
    }
}

/// Merges the metric CSVs of several runs by step, with one column per
/// (run, metric) and a final `best` row holding each column's best value.
pub fn compare_runs(dirs: &[PathBuf]) -> Result<Table> {
    if dirs.is_empty() {
        return Err(Error::Comparison("no runs to compare".into()));
    }
    let tables: Vec<Table> = dirs
        .iter()
        .map(|d| Table::read(&d.join(METRICS_FILE)))
        .collect::<Result<_>>()?;
    let metric_sets: Vec<BTreeSet<&str>> = tables
        .iter()
        .map(|t| t.header.iter().skip(1).map(String::as_str).collect())
        .collect();
    let shared: Vec<&str> = tables[0]
        .header
        .iter()
        .skip(1)
        .map(String::as_str)
        .filter(|m| direction(m) != Direction::Neutral && metric_sets.iter().all(|s| s.contains(m)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Comparison("runs share no metric columns".into()));
    }
    let mut seen = BTreeMap::new();
    let labels: Vec<String> = dirs.iter().map(|d| run_label(d, &mut seen)).collect();
    let mut header = vec!["step".to_string()];
    for l in &labels {
        header.extend(shared.iter().map(|m| format!("{l}:{m}")));
    }
    let mut by_step: BTreeMap<u64, Vec<String>> = BTreeMap::new();
    let width = labels.len() * shared.len();
    for (r, t) in tables.iter().enumerate() {
        let cols: Vec<usize> = shared
            .iter()
            .map(|m| t.header.iter().position(|h| h == m).expect("shared column"))
            .collect();
        for row in &t.rows {
            let step: u64 = row[0]
                .parse()
                .map_err(|_| Error::Comparison(format!("{}: bad step {:?}", dirs[r].display(), row[0])))?;
            let cells = by_step.entry(step).or_insert_with(|| vec![String::new(); width]);
            for (k, &c) in cols.iter().enumerate() {
                cells[r * shared.len() + k] = row.get(c).cloned().unwrap_or_default();
            }
        }
    }
    let mut rows: Vec<Vec<String>> = by_step
        .into_iter()
        .map(|(s, cells)| std::iter::once(s.to_string()).chain(cells).collect())
        .collect();
    let mut summary = vec!["best".to_string()];
    for col in 0..width {
        let m = shared[col % shared.len()];
        let values = rows
            .iter()
            .filter_map(|r| r[col + 1].parse::<f64>().ok())
            .filter(|v| !v.is_nan());
        let best = match direction(m) {
            Direction::Maximize => values.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.max(v)))),
            _ => values.fold(None, |a: Option<f64>, v| Some(a.map_or(v, |a| a.min(v)))),
        };
        summary.push(best.map(|v| v.to_string()).unwrap_or_default());
    }
    rows.push(summary);
    Ok(Table { header, rows })
}
