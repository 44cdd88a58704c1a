//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a
//! command fails while running.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use crosstok_core::data::{gen_parts4, gen_patches2d, gen_shapes8, Family, SyntheticTaskSpec};
use crosstok_core::geometry::{dist2, farthest_point_sample, knn_brute, knn_query, Interpolation, INTERP_EPS};
use crosstok_core::gradcheck::{run_suite, CheckStats, SUITES, TOLERANCE};
use crosstok_core::model::PointModel;
use crosstok_core::transfer::SkipReason;
use crosstok_core::{InputMode, Params, RngStream};

use crate::archive::{self, ArchiveError};
use crate::config::{ConfigError, ExperimentConfig, InitSection};
use crate::dataset_io::{write_clouds, write_images};
use crate::experiment::{
    checkpoint_metadata, evaluate_checkpoint, run_experiment, Best, EvalSplit, RunError, RunOptions,
};
use crate::points_io::{PointFormat, PointsError};
use crate::pretrain::run_pretrain;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Caps the number of worker threads a command may start.
pub const THREADS_ENV: &str = "P4P_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "crosstok",
    version,
    about = "Point-cloud transformer with image-pretrained weight transfer"
)]
pub struct Cli {
    /// Seed for every random stream; overrides `seed` in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML or JSON experiment config (relative to --workdir).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the encoder on synthetic images and save an image checkpoint.
    PretrainToy(PretrainArgs),
    /// Finetune a point model; writes metrics.jsonl and best/last checkpoints.
    Train(TrainArgs),
    /// Evaluate a run checkpoint.
    Eval(EvalArgs),
    /// Transfer an image checkpoint into a fresh point model and report.
    Transfer(TransferArgs),
    /// Finite-difference gradient checks of every layer and the full loss.
    Gradcheck(GradcheckArgs),
    /// Time the geometry kernels against brute force.
    Bench(BenchArgs),
    /// Write a synthetic dataset to disk.
    GenData(GenDataArgs),
    /// Print an archive's manifest as a table.
    InspectCkpt(InspectArgs),
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Output archive prefix.
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Initialize the encoder from this image checkpoint.
    #[arg(long)]
    pub init: Option<String>,
    /// Keep transferred encoder tensors fixed.
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long, value_parser = parse_mode)]
    pub tokenizer_mode: Option<InputMode>,
    /// Segmentation decoder without the appended global features.
    #[arg(long)]
    pub no_globals: bool,
    /// No positional embedding on the point tokens.
    #[arg(long)]
    pub no_pos: bool,
    /// Run directory.
    #[arg(long)]
    pub out: Option<String>,
    /// Continue from the run directory's last checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Archive prefix of a run checkpoint.
    pub ckpt: PathBuf,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    /// Archive prefix of an image checkpoint.
    pub ckpt: PathBuf,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub freeze_backbone: bool,
    /// Leave the class token at its fresh initialization.
    #[arg(long)]
    pub no_cls: bool,
    #[arg(long)]
    pub transfer_pos: bool,
    /// Save the initialized point model here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    /// Seeds per suite, starting at --seed.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Run only this suite.
    #[arg(long)]
    pub suite: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub points: usize,
    /// Sampled centers; points / 16 when unset.
    #[arg(long)]
    pub centers: Option<usize>,
    #[arg(long, default_value_t = 16)]
    pub k: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = parse_family)]
    pub family: Option<Family>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    /// Points per cloud, or image side for patches2d.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, default_value = "xyz", value_parser = parse_format)]
    pub format: PointFormat,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub ckpt: PathBuf,
}

fn parse_mode(s: &str) -> Result<InputMode, String> {
    s.parse().map_err(|e: crosstok_core::Error| e.to_string())
}

fn parse_family(s: &str) -> Result<Family, String> {
    s.parse().map_err(|e: crosstok_core::Error| e.to_string())
}

fn parse_format(s: &str) -> Result<PointFormat, String> {
    s.parse()
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<RunError> for CliError {
    fn from(e: RunError) -> Self {
        if e.is_config() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<ArchiveError> for CliError {
    fn from(e: ArchiveError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<PointsError> for CliError {
    fn from(e: PointsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<crosstok_core::Error> for CliError {
    fn from(e: crosstok_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Config(m) => eprintln!("error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}

/// The worker cap from the environment: unset means the machine's
/// parallelism.
pub fn thread_cap() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Config(format!(
                "{THREADS_ENV}={v:?} is not a positive integer"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let threads = thread_cap()?;
    let workdir = cli.workdir.clone();
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_path(&workdir.join(p))?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::PretrainToy(a) => pretrain(cfg, &workdir, a),
        Command::Train(a) => train(cfg, &workdir, a),
        Command::Eval(a) => eval(cfg, cli.config.is_some(), &workdir, a),
        Command::Transfer(a) => transfer(cfg, &workdir, a),
        Command::Gradcheck(a) => gradcheck(cfg.seed, a, threads),
        Command::Bench(a) => bench(cfg.seed, a),
        Command::GenData(a) => gen_data(cfg, &workdir, a),
        Command::InspectCkpt(a) => inspect(&workdir, a),
    }
}

fn pretrain(mut cfg: ExperimentConfig, workdir: &Path, a: PretrainArgs) -> Result<(), CliError> {
    if let Some(o) = a.out {
        cfg.pretrain.out = o;
    }
    if let Some(n) = a.images {
        cfg.pretrain.images = n;
    }
    if let Some(e) = a.epochs {
        cfg.pretrain.epochs = e;
    }
    let s = run_pretrain(&cfg, workdir, |e| {
        log::info!(
            "pretrain epoch {} loss {:.4} train acc {:.2}",
            e.epoch + 1,
            e.loss,
            e.accuracy
        );
    })?;
    println!("saved {} tensors to {}", s.tensors, s.path.display());
    println!("val_accuracy {:.2}", s.val_accuracy);
    Ok(())
}

fn train(mut cfg: ExperimentConfig, workdir: &Path, a: TrainArgs) -> Result<(), CliError> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = Some(e);
    }
    if let Some(p) = a.init {
        cfg.init.get_or_insert_with(InitSection::default).path = p;
    }
    if a.freeze_backbone {
        match cfg.init.as_mut() {
            Some(i) => i.freeze_backbone = true,
            None => return Err(CliError::Config("--freeze-backbone needs --init".into())),
        }
    }
    if let Some(m) = a.tokenizer_mode {
        cfg.model.input_mode = m;
    }
    if a.no_globals {
        cfg.model.globals = false;
    }
    if a.no_pos {
        cfg.model.pos_embed = false;
    }
    if let Some(o) = a.out {
        cfg.output.dir = o;
    }
    let opts = RunOptions {
        resume: a.resume,
        stop_after: None,
    };
    let summary = run_experiment(&cfg, workdir, opts, |r| println!("{}", r.to_line()))?;
    log::info!(
        "best {:?} {:.2} at epoch {}; run directory {}",
        summary.best.metric,
        summary.best.value,
        summary.best.epoch,
        summary.dir.display()
    );
    Ok(())
}

fn eval(cfg: ExperimentConfig, has_config: bool, workdir: &Path, a: EvalArgs) -> Result<(), CliError> {
    let split = match a.split {
        SplitArg::Train => EvalSplit::Train,
        SplitArg::Val => EvalSplit::Val,
    };
    let path = workdir.join(&a.ckpt);
    let stats = evaluate_checkpoint(&path, has_config.then_some(&cfg), split)?;
    let m = stats.metrics;
    println!(
        "{}",
        serde_json::json!({"split": format!("{split:?}").to_lowercase(), "oa": m.oa, "macc": m.macc, "miou": m.miou, "loss": stats.loss})
    );
    Ok(())
}

fn transfer(cfg: ExperimentConfig, workdir: &Path, a: TransferArgs) -> Result<(), CliError> {
    let resolved = cfg.resolve()?;
    let ckpt = archive::load_archive(&workdir.join(&a.ckpt))?;
    let mut model = PointModel::<f32>::new(
        &resolved.model,
        &mut RngStream::keyed(cfg.seed, crosstok_core::rng::Purpose::Init, 0, 0),
    )?;
    let init = InitSection {
        path: a.ckpt.display().to_string(),
        transfer_cls: !a.no_cls,
        transfer_pos: a.transfer_pos,
        freeze_backbone: a.freeze_backbone,
        strict: a.strict,
    };
    let report = model.transfer_from(&ckpt, &init.policy())?;
    for n in &report.matched {
        println!("matched   {n}");
    }
    for (n, why) in &report.skipped {
        let why = match why {
            SkipReason::Policy => "policy",
            SkipReason::Disabled => "disabled",
            SkipReason::Unknown => "unknown",
        };
        println!("skipped   {n} ({why})");
    }
    for m in &report.mismatched {
        println!(
            "mismatch  {} checkpoint {:?} target {:?}",
            m.name, m.checkpoint, m.target
        );
    }
    for w in &report.warnings {
        println!("warning   {w}");
    }
    println!(
        "matched {} skipped {} mismatched {} frozen {}",
        report.matched.len(),
        report.skipped.len(),
        report.mismatched.len(),
        report.frozen.len()
    );
    if let Some(out) = a.out {
        let mut cfg = cfg;
        cfg.init = Some(init);
        let best = Best {
            epoch: 0,
            metric: resolved.select,
            value: f64::NEG_INFINITY,
        };
        let meta = checkpoint_metadata(&cfg, Default::default(), &best);
        archive::save_archive(&workdir.join(out), &model.state(), meta)?;
    }
    Ok(())
}

/// Runs the suites on up to `threads` workers; output order is fixed.
fn gradcheck(seed: u64, a: GradcheckArgs, threads: usize) -> Result<(), CliError> {
    if a.precision != Precision::F64 {
        return Err(CliError::Config(
            "gradient checks need --precision f64; single precision cannot resolve a 1e-4 relative error".into(),
        ));
    }
    if a.seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let suites: Vec<&str> = match &a.suite {
        Some(s) if SUITES.contains(&s.as_str()) => vec![SUITES.iter().find(|n| *n == s).unwrap()],
        Some(s) => {
            return Err(CliError::Config(format!(
                "unknown suite '{s}'; one of {}",
                SUITES.join(", ")
            )))
        }
        None => SUITES.to_vec(),
    };
    let started = Instant::now();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<CheckStats, crosstok_core::Error>>>> = Mutex::new(vec![None; suites.len()]);
    std::thread::scope(|s| {
        for _ in 0..threads.min(suites.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(name) = suites.get(i) else { break };
                let mut total = CheckStats::default();
                let r = (seed..seed + a.seeds).try_for_each(|sd| {
                    total.merge(&run_suite(name, sd)?);
                    Ok(())
                });
                results.lock().unwrap()[i] = Some(r.map(|_| total));
            });
        }
    });
    let mut all_ok = true;
    println!(
        "{:<16} {:>12} {:>8} {:>6}  result",
        "suite", "max_rel_err", "checked", "kinks"
    );
    for (name, r) in suites.iter().zip(results.into_inner().unwrap()) {
        let stats = r.expect("every suite ran")?;
        let ok = stats.passed();
        all_ok &= ok;
        println!(
            "{:<16} {:>12.3e} {:>8} {:>6}  {}",
            name,
            stats.max_rel_err,
            stats.checked,
            stats.kinks,
            if ok { "ok" } else { "FAIL" }
        );
    }
    println!(
        "{} seeds per suite, tolerance {:.0e}, {:.1}s",
        a.seeds,
        TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    if all_ok {
        Ok(())
    } else {
        Err(CliError::Runtime("gradient check failed".into()))
    }
}

fn time_ms<T>(reps: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        out = Some(f());
        best = best.min(t.elapsed().as_secs_f64() * 1e3);
    }
    (best, out.unwrap())
}

/// Farthest point sampling that recomputes every candidate's distance to
/// the whole picked set at each step.
fn fps_rescan(pts: &[[f32; 3]], m: usize) -> Vec<usize> {
    let mut picked = vec![0usize];
    while picked.len() < m {
        let mut best = (-1.0f32, 0usize);
        for (i, p) in pts.iter().enumerate() {
            if picked.contains(&i) {
                continue;
            }
            let d = picked.iter().map(|&j| dist2(p, &pts[j])).fold(f32::INFINITY, f32::min);
            if d > best.0 {
                best = (d, i);
            }
        }
        picked.push(best.1);
    }
    picked
}

fn bench(seed: u64, a: BenchArgs) -> Result<(), CliError> {
    let m = a.centers.unwrap_or(a.points / 16).max(1);
    if a.points == 0 || m > a.points || a.k == 0 {
        return Err(CliError::Config("need points > 0, k > 0 and centers <= points".into()));
    }
    let mut rng = RngStream::new(seed, 0);
    let pts: Vec<[f32; 3]> = (0..a.points)
        .map(|_| [rng.normal() as f32, rng.normal() as f32, rng.normal() as f32])
        .collect();

    println!(
        "{:<8} {:>10} {:>10} {:>8}  identical",
        "kernel", "fast_ms", "brute_ms", "speedup"
    );
    let row = |name: &str, fast: f64, brute: f64, same: bool| {
        println!(
            "{name:<8} {fast:>10.3} {brute:>10.3} {:>8.1}  {same}",
            brute / fast.max(1e-9)
        );
    };

    let (tf, ids) = time_ms(a.reps, || farthest_point_sample(&pts, m, 0));
    let ids = ids?;
    let (tb, brute) = time_ms(1, || fps_rescan(&pts, m));
    let fps_same = ids == brute;
    row("fps", tf, tb, fps_same);

    let centers: Vec<[f32; 3]> = ids.iter().map(|&i| pts[i]).collect();
    let (tf, fast) = time_ms(a.reps, || knn_query(&pts, &centers, a.k));
    let (tb, slow) = time_ms(a.reps, || knn_brute(&pts, &centers, a.k));
    let knn_same = fast? == slow?;
    row("knn", tf, tb, knn_same);

    let (tf, fast) = time_ms(a.reps, || Interpolation::new(&centers, &pts));
    let fast = fast?;
    let (tb, nb) = time_ms(a.reps, || knn_brute(&centers, &pts, 3));
    let nb = nb?;
    let mut interp_same = true;
    for q in 0..pts.len() {
        let w: Vec<f64> = (0..3)
            .map(|j| 1.0 / ((nb.dist2[q * 3 + j] as f64).sqrt() + INTERP_EPS))
            .collect();
        let total: f64 = w.iter().sum();
        for j in 0..3 {
            interp_same &= fast.ids[q][j] == nb.ids[q * 3 + j];
            let want = w[j] / total;
            interp_same &= ((fast.weights[q][j] as f64) - want).abs() <= 1e-5 * want.max(1e-6);
        }
    }
    row("interp", tf, tb, interp_same);

    if fps_same && knn_same && interp_same {
        Ok(())
    } else {
        Err(CliError::Runtime("fast kernels disagree with brute force".into()))
    }
}

fn gen_data(cfg: ExperimentConfig, workdir: &Path, a: GenDataArgs) -> Result<(), CliError> {
    let family = a.family.unwrap_or(cfg.data.family);
    let mut spec = SyntheticTaskSpec {
        family,
        seed: cfg.seed,
        ..cfg.data.spec()
    };
    if family == Family::Patches2d {
        spec.points = cfg.pretrain.side;
        spec.noise = cfg.pretrain.noise;
    }
    spec.n_train = a.n_train.unwrap_or(spec.n_train);
    spec.n_val = a.n_val.unwrap_or(spec.n_val);
    spec.points = a.points.unwrap_or(spec.points);
    let out = workdir.join(&a.out);
    let files = match family {
        Family::Shapes8 | Family::Parts4 => {
            let split = if family == Family::Shapes8 {
                gen_shapes8(&spec)
            } else {
                gen_parts4(&spec)
            }
            .map_err(|e| CliError::Config(e.to_string()))?;
            write_clouds(&out.join("train"), &split.train, a.format)?
                + write_clouds(&out.join("val"), &split.val, a.format)?
        }
        Family::Patches2d => {
            let split = gen_patches2d(&spec).map_err(|e| CliError::Config(e.to_string()))?;
            write_images(&out.join("train"), &split.train)? + write_images(&out.join("val"), &split.val)?
        }
    };
    println!(
        "wrote {files} files for {} train and {} val samples to {}",
        spec.n_train,
        spec.n_val,
        out.display()
    );
    Ok(())
}

fn inspect(workdir: &Path, a: InspectArgs) -> Result<(), CliError> {
    let path = workdir.join(&a.ckpt);
    let m = archive::read_manifest(&path)?;
    println!(
        "# {:<40} {:>5} {:>16} {:>12} {:>10}",
        "name", "dtype", "shape", "offset", "byte_len"
    );
    for e in &m.entries {
        let dtype = format!("{:?}", e.dtype).to_lowercase();
        let shape = format!("{:?}", e.shape);
        println!(
            "{:<42} {:>5} {:>16} {:>12} {:>10}",
            e.name, dtype, shape, e.offset, e.byte_len
        );
    }
    log::info!("{} entries, {} bytes", m.entries.len(), m.blob_len());
    Ok(())
}
