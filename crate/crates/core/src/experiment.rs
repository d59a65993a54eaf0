//! Experiment grids: (model × augmentation × seed) cells trained by a
//! worker pool, with rows appended to `results.csv` as they finish.
//! Rerunning a grid skips rows already present.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::arch::ModelSpec;
use crate::checkpoint;
use crate::error::{config_err, Result};
use crate::mnist::{self, AugmentSpec, IdxDataset, Split};
use crate::model::Model;
use crate::optim::SgdConfig;
use crate::train::{init_seed, train, MetricsLog, RunMetrics, TrainConfig};

pub const RESULTS_FILE: &str = "results.csv";
pub const RESULTS_HEADER: [&str; 8] = [
    "model",
    "theta_deg",
    "trans_px",
    "seed",
    "epochs",
    "test_err",
    "train_err",
    "seconds",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub models: Vec<ModelSpec>,
    pub augments: Vec<AugmentSpec>,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    /// First `train_subset` training images; `None` for all 60k.
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub sgd: SgdConfig,
    /// Falls back to `PRCN_MNIST_DIR`, then `data/mnist`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Save each trained model under `output_dir/checkpoints`.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_workers() -> usize {
    1
}

fn default_eval_every() -> usize {
    1
}

impl ExperimentConfig {
    /// 10k training images, 2k test images, 30 epochs.
    pub fn desk_scale(models: Vec<ModelSpec>, augments: Vec<AugmentSpec>, seeds: Vec<u64>, output_dir: PathBuf) -> Self {
        Self {
            models,
            augments,
            seeds,
            epochs: 30,
            train_subset: Some(10_000),
            test_subset: Some(2_000),
            sgd: SgdConfig::default(),
            data_dir: None,
            output_dir,
            workers: 1,
            eval_every: 1,
            save_checkpoints: false,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(mnist::default_dir)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Cells in grid order: model, then augmentation, then seed.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for m in &self.models {
            for a in &self.augments {
                for &s in &self.seeds {
                    out.push(Cell {
                        model: m.clone(),
                        augment: *a,
                        seed: s,
                    });
                }
            }
        }
        out
    }

    pub fn checkpoint_path(&self, cell: &Cell) -> PathBuf {
        self.output_dir.join("checkpoints").join(format!("{}.ckpt", cell.slug()))
    }

    pub fn train_config(&self, cell: &Cell) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            sgd: self.sgd.clone(),
            augment: cell.augment,
            seed: cell.seed,
            eval_every: self.eval_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub model: ModelSpec,
    pub augment: AugmentSpec,
    pub seed: u64,
}

impl Cell {
    pub fn slug(&self) -> String {
        let m: String = self
            .model
            .to_string()
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        format!(
            "{m}_r{}_t{}_s{}",
            self.augment.max_rotation_deg, self.augment.max_translation_px, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub theta_deg: f64,
    pub trans_px: usize,
    pub seed: u64,
    pub epochs: usize,
    /// NaN when the cell errored.
    pub test_err: f64,
    pub train_err: f64,
    pub seconds: f64,
}

impl ResultRow {
    pub fn errored(&self) -> bool {
        self.test_err.is_nan()
    }

    fn key(&self) -> (String, u64, usize, u64, usize) {
        (self.model.clone(), self.theta_deg.to_bits(), self.trans_px, self.seed, self.epochs)
    }

    fn for_cell(cell: &Cell, epochs: usize, run: Option<&RunMetrics>) -> Self {
        Self {
            model: cell.model.to_string(),
            theta_deg: cell.augment.max_rotation_deg,
            trans_px: cell.augment.max_translation_px,
            seed: cell.seed,
            epochs,
            test_err: run.map_or(f64::NAN, |r| r.test_err),
            train_err: run.map_or(f64::NAN, |r| r.train_err),
            seconds: run.map_or(f64::NAN, |r| r.seconds),
        }
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    Ok(rdr.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>()?)
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends rows to an existing or new results file, writing the header
/// only once.
struct Appender {
    writer: csv::Writer<fs::File>,
}

impl Appender {
    fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || fs::metadata(path)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer.write_record(RESULTS_HEADER)?;
            writer.flush()?;
        }
        Ok(Self { writer })
    }

    fn push(&mut self, row: &ResultRow) -> Result<()> {
        self.writer.serialize(row)?;
        self.writer.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    /// All rows for this grid's cells, in grid order.
    pub rows: Vec<ResultRow>,
    pub ran: usize,
    pub skipped: usize,
}

impl GridOutcome {
    pub fn errored(&self) -> usize {
        self.rows.iter().filter(|r| r.errored()).count()
    }
}

/// Loads the two splits, truncated to the configured subsets.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(IdxDataset, IdxDataset)> {
    let dir = cfg.data_dir();
    let mut tr = mnist::load_split(&dir, Split::Train)?;
    let mut te = mnist::load_split(&dir, Split::Test)?;
    if let Some(n) = cfg.train_subset {
        tr = tr.take(n)?;
    }
    if let Some(n) = cfg.test_subset {
        te = te.take(n)?;
    }
    Ok((tr, te))
}

/// Config echo stored in checkpoints written by [`train_model`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// Trains `model` from scratch, logging per-epoch metrics and saving a
/// checkpoint at the end when paths are given.
pub fn train_model(
    model: &ModelSpec,
    tcfg: &TrainConfig,
    train_set: &IdxDataset,
    test_set: &IdxDataset,
    metrics_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
) -> Result<RunMetrics> {
    let mut net = model.compile(init_seed(tcfg.seed))?;
    let mut log = metrics_path.map(MetricsLog::create).transpose()?;
    let run = train(&mut net, train_set, test_set, tcfg, |m, _| {
        if let Some(l) = &mut log {
            l.append(m)?;
        }
        Ok(())
    })?;
    if let Some(p) = checkpoint_path {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        let meta = CheckpointMeta {
            model: model.clone(),
            train: tcfg.clone(),
        };
        checkpoint::save(p, &net, &serde_json::to_value(meta)?)?;
    }
    Ok(run)
}

/// Rebuilds a model saved by [`train_model`].
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let meta: CheckpointMeta = serde_json::from_value(checkpoint::read_config(&bytes)?)?;
    let mut model = meta.model.compile(init_seed(meta.train.seed))?;
    checkpoint::load_into(&bytes, &mut model)?;
    Ok((model, meta))
}

/// Trains one cell from scratch.
pub fn run_cell(
    cfg: &ExperimentConfig,
    cell: &Cell,
    train_set: &IdxDataset,
    test_set: &IdxDataset,
    metrics_path: Option<&Path>,
) -> Result<RunMetrics> {
    let ckpt = cfg.save_checkpoints.then(|| cfg.checkpoint_path(cell));
    train_model(&cell.model, &cfg.train_config(cell), train_set, test_set, metrics_path, ckpt.as_deref())
}

/// Runs every missing cell and returns the full table. Per-cell failures
/// are recorded as NaN rows and reported through `on_row`; they do not
/// stop the grid.
pub fn run_grid(
    cfg: &ExperimentConfig,
    data: Option<(&IdxDataset, &IdxDataset)>,
    mut on_row: impl FnMut(&ResultRow, Option<&crate::Error>) + Send,
) -> Result<GridOutcome> {
    cfg.sgd.batch_size.checked_sub(1).ok_or_else(|| config_err("batch size must be positive"))?;
    for a in &cfg.augments {
        a.validate()?;
    }
    fs::create_dir_all(&cfg.output_dir)?;
    let cells = cfg.cells();
    let results_path = cfg.output_dir.join(RESULTS_FILE);
    let existing = if results_path.exists() {
        read_results(&results_path)?
    } else {
        Vec::new()
    };
    let done: HashSet<_> = existing.iter().map(ResultRow::key).collect();
    let todo: Vec<&Cell> = cells
        .iter()
        .filter(|c| !done.contains(&ResultRow::for_cell(c, cfg.epochs, None).key()))
        .collect();
    let skipped = cells.len() - todo.len();

    let appender = Mutex::new(Appender::open(&results_path)?);
    let loaded;
    let (train_set, test_set) = match data {
        Some(d) => d,
        None if todo.is_empty() => {
            return Ok(GridOutcome {
                rows: collect_rows(&cells, cfg.epochs, &existing),
                ran: 0,
                skipped,
            })
        }
        None => {
            loaded = load_data(cfg)?;
            (&loaded.0, &loaded.1)
        }
    };

    let metrics_dir = cfg.output_dir.join("metrics");
    fs::create_dir_all(&metrics_dir)?;
    let queue = Mutex::new(todo.iter());
    let new_rows = Mutex::new(Vec::new());
    let on_row = Mutex::new(&mut on_row);
    let io_error = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..cfg.workers.max(1).min(todo.len().max(1)) {
            s.spawn(|| loop {
                let Some(cell) = queue.lock().unwrap().next() else { break };
                let metrics = metrics_dir.join(format!("{}.csv", cell.slug()));
                let outcome = run_cell(cfg, cell, train_set, test_set, Some(&metrics));
                let row = ResultRow::for_cell(cell, cfg.epochs, outcome.as_ref().ok());
                if let Err(e) = appender.lock().unwrap().push(&row) {
                    io_error.lock().unwrap().get_or_insert(e);
                    break;
                }
                (on_row.lock().unwrap())(&row, outcome.as_ref().err());
                new_rows.lock().unwrap().push(row);
            });
        }
    });
    if let Some(e) = io_error.into_inner().unwrap() {
        return Err(e);
    }
    let mut all = existing;
    all.extend(new_rows.into_inner().unwrap());
    Ok(GridOutcome {
        rows: collect_rows(&cells, cfg.epochs, &all),
        ran: todo.len(),
        skipped,
    })
}

fn collect_rows(cells: &[Cell], epochs: usize, rows: &[ResultRow]) -> Vec<ResultRow> {
    cells
        .iter()
        .filter_map(|c| {
            let key = ResultRow::for_cell(c, epochs, None).key();
            rows.iter().find(|r| r.key() == key).cloned()
        })
        .collect()
}
