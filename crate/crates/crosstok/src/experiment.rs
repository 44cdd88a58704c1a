//! The finetuning loop on disk: metric log, best and last checkpoints, resume.
//!
//! A run directory holds
//!
//! * `metrics.jsonl`: one record per line, `{epoch, split, oa, macc, miou, loss, lr}`.
//!   Epoch 0 is the validation pass before any update.
//! * `best.*`: the archive with the highest validation metric so far.
//! * `last.*`: the archive after the most recent epoch, with optimizer moments
//!   and progress, which `resume` continues from.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crosstok_core::data::{gen_parts4, gen_shapes8, Family, Split};
use crosstok_core::model::PointModel;
use crosstok_core::train::{check_labels, evaluate, EpochStats, Progress, Trainer};
use crosstok_core::transfer::TransferReport;
use crosstok_core::{NamedTensors, Params, PointCloud};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::archive::{self, ArchiveError};
use crate::config::{ConfigError, ExperimentConfig, Resolved, SelectMetric};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST: &str = "best";
pub const LAST: &str = "last";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] crosstok_core::Error),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
}

impl RunError {
    /// Whether the failure is the caller's configuration rather than the run.
    pub fn is_config(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
    pub loss: f64,
    pub lr: f64,
}

impl MetricRecord {
    pub fn new(epoch: usize, split: &str, stats: &EpochStats, lr: f64) -> Self {
        MetricRecord {
            epoch,
            split: split.into(),
            oa: stats.metrics.oa,
            macc: stats.metrics.macc,
            miou: stats.metrics.miou,
            loss: stats.loss,
            lr,
        }
    }

    pub fn metric(&self, which: SelectMetric) -> f64 {
        match which {
            SelectMetric::Oa => self.oa,
            SelectMetric::Macc => self.macc,
            SelectMetric::Miou => self.miou,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Best {
    pub epoch: usize,
    pub metric: SelectMetric,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub records: Vec<MetricRecord>,
    pub best: Best,
    pub transfer: Option<TransferReport>,
    /// Epoch the run started from; nonzero after a resume.
    pub started_at: usize,
}

impl RunSummary {
    pub fn final_val(&self) -> Option<&MetricRecord> {
        self.records.iter().rev().find(|r| r.split == "val")
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Continue from `last.*` when the run directory has one.
    pub resume: bool,
    /// Stop after this many epochs of the schedule even if it is longer.
    /// The learning-rate schedule still spans the configured length.
    pub stop_after: Option<usize>,
}

/// Generates the configured synthetic split in single precision.
pub fn load_data(cfg: &Resolved) -> Result<Split<PointCloud<f32>>, RunError> {
    let split = match cfg.data.family {
        Family::Shapes8 => gen_shapes8(&cfg.data)?,
        Family::Parts4 => gen_parts4(&cfg.data)?,
        Family::Patches2d => unreachable!("rejected by resolve"),
    };
    check_labels(&split.train, cfg.model.task, cfg.model.n_classes)?;
    check_labels(&split.val, cfg.model.task, cfg.model.n_classes)?;
    Ok(split)
}

/// Metadata stored next to every run checkpoint.
pub fn checkpoint_metadata(cfg: &ExperimentConfig, progress: Progress, best: &Best) -> serde_json::Value {
    json!({
        "kind": "point-model",
        "config": cfg,
        "progress": {"epoch": progress.epoch, "step": progress.step},
        "best": best,
    })
}

/// Reads `config` and `progress` back from checkpoint metadata.
pub fn parse_metadata(
    path: &Path,
    meta: &serde_json::Value,
) -> Result<(ExperimentConfig, Progress, Option<Best>), RunError> {
    let bad = |msg: &str| RunError::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.into(),
    };
    let cfg: ExperimentConfig = serde_json::from_value(
        meta.get("config")
            .cloned()
            .ok_or_else(|| bad("no run config in metadata"))?,
    )
    .map_err(|e| bad(&format!("run config: {e}")))?;
    let p = meta.get("progress").ok_or_else(|| bad("no progress in metadata"))?;
    let get = |k: &str| {
        p.get(k)
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("malformed progress"))
    };
    let progress = Progress {
        epoch: get("epoch")? as usize,
        step: get("step")? as usize,
    };
    let best = meta.get("best").and_then(|b| serde_json::from_value(b.clone()).ok());
    Ok((cfg, progress, best))
}

/// Installs a checkpoint's tensors into a freshly built model, requiring
/// every model tensor and buffer to be present with the right shape.
pub fn install(model: &mut PointModel<f32>, state: &NamedTensors<f32>, path: &Path) -> Result<(), RunError> {
    let installed = model.load_state(state);
    let expected = model.named().len() + model.buffers().len();
    if installed.len() != expected {
        return Err(RunError::Checkpoint {
            path: path.to_path_buf(),
            msg: format!(
                "{} of {expected} model tensors found with matching shapes",
                installed.len()
            ),
        });
    }
    Ok(())
}

struct Log {
    path: PathBuf,
    file: File,
}

impl Log {
    fn fresh(path: PathBuf) -> Result<Self, RunError> {
        let file = File::create(&path).map_err(io_err(&path))?;
        Ok(Log { path, file })
    }

    /// Keeps the records up to `epoch` and appends after them.
    fn truncated(path: PathBuf, epoch: usize) -> Result<(Self, Vec<MetricRecord>), RunError> {
        let mut kept = Vec::new();
        if path.is_file() {
            let f = File::open(&path).map_err(io_err(&path))?;
            for line in BufReader::new(f).lines() {
                let line = line.map_err(io_err(&path))?;
                if let Ok(r) = serde_json::from_str::<MetricRecord>(&line) {
                    if r.epoch <= epoch {
                        kept.push(r);
                    }
                }
            }
        }
        let mut log = Log::fresh(path)?;
        for r in &kept {
            log.write(r)?;
        }
        Ok((log, kept))
    }

    fn write(&mut self, r: &MetricRecord) -> Result<(), RunError> {
        writeln!(self.file, "{}", r.to_line()).map_err(io_err(&self.path))
    }
}

/// Runs (or resumes) the experiment described by `cfg`. Paths in the config
/// are relative to `workdir`. `on_record` sees every metric record as it is
/// written.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    workdir: &Path,
    opts: RunOptions,
    mut on_record: impl FnMut(&MetricRecord),
) -> Result<RunSummary, RunError> {
    let resolved = cfg.resolve()?;
    let dir = workdir.join(&cfg.output.dir);
    let last_path = dir.join(LAST);
    let best_path = dir.join(BEST);

    // Everything that can be rejected is checked before data generation.
    let init_path = cfg.init.as_ref().map(|i| workdir.join(&i.path));
    if let Some(p) = &init_path {
        if !archive::exists(p) {
            return Err(ConfigError::Invalid(format!("init archive {} not found", p.display())).into());
        }
    }

    let data = load_data(&resolved)?;
    let mut trainer = Trainer::<f32>::new(
        resolved.model.clone(),
        resolved.preset.clone(),
        cfg.seed,
        data.train.len(),
    )?;

    let mut transfer = None;
    if let (Some(init), Some(path)) = (&cfg.init, &init_path) {
        let ckpt = archive::load_archive(path)?;
        let report = trainer.model.transfer_from(&ckpt, &init.policy())?;
        for w in &report.warnings {
            log::warn!("{w}");
        }
        log::info!(
            "transferred {} tensors from {} ({} skipped, {} mismatched)",
            report.matched.len(),
            path.display(),
            report.skipped.len(),
            report.mismatched.len()
        );
        trainer.frozen = report.frozen.clone();
        transfer = Some(report);
    }

    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let log_path = dir.join(METRICS_FILE);
    let mut records = Vec::new();
    let select = resolved.select;
    let resuming = opts.resume && archive::exists(&last_path);

    let (mut log, mut best) = if resuming {
        let arch = archive::read_archive(&last_path)?;
        let (_, progress, best) = parse_metadata(&last_path, &arch.metadata)?;
        trainer.restore(&arch.to_f32(), progress)?;
        let (log, kept) = Log::truncated(log_path, progress.epoch)?;
        records = kept;
        let best = best.unwrap_or(Best {
            epoch: 0,
            metric: select,
            value: f64::NEG_INFINITY,
        });
        log::info!("resuming {} at epoch {}", dir.display(), progress.epoch);
        (log, best)
    } else {
        let mut log = Log::fresh(log_path)?;
        let stats = trainer.evaluate(&data.val)?;
        let r = MetricRecord::new(0, "val", &stats, trainer.lr_at(0));
        log.write(&r)?;
        on_record(&r);
        let best = Best {
            epoch: 0,
            metric: select,
            value: r.metric(select),
        };
        records.push(r);
        let meta = checkpoint_metadata(cfg, trainer.progress, &best);
        let state = trainer.state();
        archive::save_archive(&best_path, &state, meta.clone())?;
        archive::save_archive(&last_path, &state, meta)?;
        (log, best)
    };
    let started_at = trainer.progress.epoch;

    let epochs = resolved.preset.epochs;
    let stop = opts.stop_after.map_or(epochs, |n| (started_at + n).min(epochs));
    while trainer.progress.epoch < stop {
        let stats = trainer.train_epoch(&data.train)?;
        let epoch = trainer.progress.epoch;
        let r = MetricRecord::new(epoch, "train", &stats, stats.lr);
        log.write(&r)?;
        on_record(&r);
        records.push(r);

        if epoch % cfg.output.val_every == 0 || epoch == epochs {
            let v = trainer.evaluate(&data.val)?;
            let r = MetricRecord::new(epoch, "val", &v, stats.lr);
            log.write(&r)?;
            on_record(&r);
            if r.metric(select) > best.value {
                best = Best {
                    epoch,
                    metric: select,
                    value: r.metric(select),
                };
                let meta = checkpoint_metadata(cfg, trainer.progress, &best);
                archive::save_archive(&best_path, &trainer.state(), meta)?;
            }
            records.push(r);
        }
        let meta = checkpoint_metadata(cfg, trainer.progress, &best);
        archive::save_archive(&last_path, &trainer.state(), meta)?;
    }
    log.file.flush().map_err(io_err(&log.path))?;

    Ok(RunSummary {
        dir,
        records,
        best,
        transfer,
        started_at,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
}

/// Evaluates a run checkpoint on a split of its own data configuration, or
/// of `data_override`'s when given.
pub fn evaluate_checkpoint(
    path: &Path,
    data_override: Option<&ExperimentConfig>,
    split: EvalSplit,
) -> Result<EpochStats, RunError> {
    let arch = archive::read_archive(path)?;
    let (stored, _, _) = parse_metadata(path, &arch.metadata)?;
    let mut cfg = stored.clone();
    if let Some(o) = data_override {
        cfg.data = o.data.clone();
    }
    let resolved = cfg.resolve()?;
    let mut model = PointModel::<f32>::new(&resolved.model, &mut crosstok_core::RngStream::new(0, 0))?;
    install(&mut model, &arch.to_f32(), path)?;
    let data = load_data(&resolved)?;
    let clouds = match split {
        EvalSplit::Train => &data.train,
        EvalSplit::Val => &data.val,
    };
    Ok(evaluate(&model, &resolved.model, &resolved.preset, clouds)?)
}

pub fn read_log(dir: &Path) -> Result<String, RunError> {
    let p = dir.join(METRICS_FILE);
    fs::read_to_string(&p).map_err(io_err(&p))
}
