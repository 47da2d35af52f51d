//! Command implementations behind the `clipvid` binary.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use clipvid::checkpoint;
use clipvid::eval::{self, evaluate, ClipDetections, EvalReport};
use clipvid::gradcheck::{suite, GradCheckOptions};
use clipvid::model::{check_loss_gradient, ModelConfig, Params};
use clipvid::synthvid::{generate_dataset, read_dataset, write_dataset, Dataset, GenConfig, Speed};
use clipvid::train::{detect_dataset, train, LogLine, TrainConfig, Variant};
use clipvid::{Error, OpKind, Precision, Scalar};

pub const PRECISION_ENV: &str = "CLIPVID_PRECISION";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(Error::Io { .. } | Error::Parse { .. } | Error::Format { .. }) => 2,
            CliError::Core(Error::Config(_) | Error::Input(_)) => 1,
            CliError::Check(_) | CliError::Core(_) => 3,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(
    name = "clipvid",
    version,
    about = "Clip-wise video object detection on synthetic clips"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train one stage of a model variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate one model per grid value.
    Ablate(AblateArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generator override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Run configuration (`key=value` lines, model and training keys).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Configuration override, `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 1)]
    pub stage: u8,
    #[arg(long, default_value = "full")]
    pub variant: String,
    #[arg(long)]
    pub ckpt_in: Option<PathBuf>,
    #[arg(long)]
    pub ckpt_out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads (defaults to the number of logical cores).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Print every n-th loss line (0 silences progress).
    #[arg(long, default_value_t = 100)]
    pub print_every: usize,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Defaults to the snapshot written next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value = "full")]
    pub variant: String,
    /// Inference frames per forward pass.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Debug, Clone)]
pub struct GradcheckArgs {
    /// Model configuration of the checked network (defaults to the micro model).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Coordinates sampled per parameter tensor in the model check.
    #[arg(long, default_value_t = 400)]
    pub coords: usize,
    #[arg(long, hide = true)]
    pub corrupt: Option<String>,
}

#[derive(Args, Debug, Clone)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Evaluation dataset (defaults to `--data`).
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    /// `key=v1,v2,...` with key one of topk, ica_layers, frames, queries,
    /// decoder_layers.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Trained checkpoint reused by the `frames` grid.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Multiplies both stages' iteration counts.
    #[arg(long, default_value_t = 1.0)]
    pub scale: f64,
    /// Inference frames for grids other than `frames`.
    #[arg(long, default_value_t = 8)]
    pub eval_frames: usize,
    #[arg(long)]
    pub threads: Option<usize>,
}

/// Parses arguments and runs one command.
pub fn run<I, T>(args: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            print!("{e}");
            CliError::Usage(String::new())
        }
        _ => CliError::Usage(e.to_string()),
    })?;
    match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Gradcheck(a) => cmd_gradcheck(&a, &mut std::io::stdout()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
    }
}

/// Storage precision selected by the environment (32 unless overridden).
pub fn precision() -> CliResult<Precision> {
    match std::env::var(PRECISION_ENV) {
        Err(_) => Ok(Precision::F32),
        Ok(v) => match v.trim() {
            "32" => Ok(Precision::F32),
            "64" => Ok(Precision::F64),
            other => Err(CliError::Usage(format!(
                "{PRECISION_ENV} must be 32 or 64, got `{other}`"
            ))),
        },
    }
}

fn parse_set(s: &str) -> CliResult<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| CliError::Usage(format!("expected KEY=VALUE, got `{s}`")))
}

fn kv_lines(text: &str) -> impl Iterator<Item = (&str, &str)> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

fn ensure_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Model and training settings of one run, stored as one flat file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::stage1(),
        }
    }
}

const TRAIN_KEYS: &[&str] = &[
    "stage",
    "variant",
    "iters",
    "lr",
    "lr_milestones",
    "lr_factor",
    "batch",
    "seed",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "clip_norm",
];

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        if key == "precision" {
            return Ok(());
        }
        if TRAIN_KEYS.contains(&key) {
            self.train.set(key, value)?;
        } else {
            self.model.set(key, value)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, text: &str) -> CliResult<()> {
        for (k, v) in kv_lines(text) {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn to_text(&self, precision: Precision) -> String {
        format!(
            "precision={}\n{}{}",
            precision.tag(),
            self.model.to_kv(),
            self.train.to_kv()
        )
    }
}

fn load_run_config(mut rc: RunConfig, path: Option<&Path>, sets: &[String]) -> CliResult<RunConfig> {
    if let Some(p) = path {
        rc.apply(&read_text(p)?)?;
    }
    for s in sets {
        let (k, v) = parse_set(s)?;
        rc.set(k, v)?;
    }
    Ok(rc)
}

fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> CliResult<R> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("cannot start {n} worker threads: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn parse_variant(s: &str) -> CliResult<Variant> {
    Variant::parse(s).ok_or_else(|| {
        let all: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        CliError::Usage(format!("unknown variant `{s}` (expected one of {})", all.join(", ")))
    })
}

pub fn cmd_gen(a: &GenArgs) -> CliResult<Dataset> {
    let mut cfg = GenConfig {
        seed: a.seed,
        ..GenConfig::default()
    };
    for s in &a.set {
        let (k, v) = parse_set(s)?;
        cfg.set(k, v)?;
    }
    let ds = generate_dataset(&cfg, a.clips)?;
    write_dataset(&ds, &a.out)?;
    write_text(&a.out.join("gen.config"), &cfg.to_kv())?;
    let tracks: usize = ds.clips.iter().map(|c| c.tracks.len()).sum();
    println!(
        "wrote {} clips with {tracks} tracks to {}",
        ds.clips.len(),
        a.out.display()
    );
    Ok(ds)
}

/// Sidecar file `<path><suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_params<T: Scalar>(cfg: &ModelConfig, path: &Path) -> CliResult<Params<T>> {
    Ok(Params::from_entries(cfg, checkpoint::load(path)?)?)
}

pub fn cmd_train(a: &TrainArgs) -> CliResult<Vec<LogLine>> {
    let base = RunConfig {
        model: ModelConfig::desk(),
        train: if a.stage == 2 {
            TrainConfig::stage2()
        } else {
            TrainConfig::stage1()
        },
    };
    let mut rc = load_run_config(base, a.config.as_deref(), &a.set)?;
    rc.train.stage = a.stage;
    rc.train.variant = parse_variant(&a.variant)?;
    rc.train.seed = a.seed;
    if a.stage == 2 && a.ckpt_in.is_none() {
        return Err(CliError::Usage(
            "stage 2 starts from a stage-1 checkpoint; pass --ckpt-in".into(),
        ));
    }
    rc.model = rc.train.variant.model_config(&rc.model);
    let data = read_dataset(&a.data)?;
    let prec = precision()?;
    write_text(&sidecar(&a.ckpt_out, ".config"), &rc.to_text(prec))?;
    let log_path = sidecar(&a.ckpt_out, ".loss.log");
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    writeln!(log_file, "{}", LogLine::HEADER).map_err(|e| Error::Io {
        path: log_path.clone(),
        source: e,
    })?;
    let every = a.print_every;
    let run = |log_file: &mut fs::File| -> CliResult<Vec<LogLine>> {
        macro_rules! go {
            ($t:ty) => {{
                let mut params: Params<$t> = match &a.ckpt_in {
                    Some(p) => load_params(&rc.model, p)?,
                    None => Params::init(&rc.model, a.seed)?,
                };
                let mut io_err = None;
                let log = with_threads(a.threads, || {
                    train(&mut params, &rc.model, &rc.train, &data, |l| {
                        if let Err(e) = writeln!(log_file, "{l}") {
                            io_err.get_or_insert(e);
                        }
                        if every > 0 && l.iter % every == 0 {
                            println!("{l}");
                        }
                    })
                })??;
                if let Some(e) = io_err {
                    return Err(Error::Io {
                        path: log_path.clone(),
                        source: e,
                    }
                    .into());
                }
                checkpoint::save(&a.ckpt_out, &params.checkpoint_entries())?;
                log
            }};
        }
        Ok(match prec {
            Precision::F32 => go!(f32),
            Precision::F64 => go!(f64),
        })
    };
    let log = run(&mut log_file)?;
    if let Some(last) = log.last() {
        println!("final {last}");
    }
    Ok(log)
}

/// Detections for `clips` from a checkpoint, `frames` frames per pass.
pub fn infer<T: Scalar>(
    params: &Params<T>,
    cfg: &ModelConfig,
    variant: Variant,
    clips: &[clipvid::synthvid::ClipSample],
    frames: usize,
) -> CliResult<Vec<ClipDetections>> {
    Ok(detect_dataset(params, cfg, variant, clips, frames)?)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult<EvalReport> {
    if a.frames == 0 {
        return Err(CliError::Usage("--frames must be positive".into()));
    }
    let data = read_dataset(&a.data)?;
    ensure_dir(&a.out)?;
    let report = if a.variant == "oracle_detections" {
        let dets: Vec<ClipDetections> = data.clips.iter().map(eval::oracle_detections).collect();
        write_text(
            &a.out.join("eval.config"),
            &format!("variant={}\nframes={}\n", a.variant, a.frames),
        )?;
        evaluate(&dets, &data.clips, data.classes)?
    } else {
        let variant = parse_variant(&a.variant)?;
        let ckpt = a
            .ckpt
            .as_deref()
            .ok_or_else(|| CliError::Usage("--ckpt is required for model variants".into()))?;
        let snapshot = sidecar(ckpt, ".config");
        let config = a.config.clone().or_else(|| snapshot.exists().then_some(snapshot));
        let mut rc = load_run_config(RunConfig::default(), config.as_deref(), &a.set)?;
        rc.model = variant.model_config(&rc.model);
        let prec = precision()?;
        write_text(
            &a.out.join("eval.config"),
            &format!("{}variant={variant}\nframes={}\n", rc.model.to_kv(), a.frames),
        )?;
        let dets = with_threads(a.threads, || -> CliResult<_> {
            match prec {
                Precision::F32 => infer(
                    &load_params::<f32>(&rc.model, ckpt)?,
                    &rc.model,
                    variant,
                    &data.clips,
                    a.frames,
                ),
                Precision::F64 => infer(
                    &load_params::<f64>(&rc.model, ckpt)?,
                    &rc.model,
                    variant,
                    &data.clips,
                    a.frames,
                ),
            }
        })??;
        evaluate(&dets, &data.clips, data.classes)?
    };
    write_text(&a.out.join("report.txt"), &report.to_text())?;
    write_text(&a.out.join("buckets.tsv"), &report.to_table())?;
    print!("{}", report.to_text());
    Ok(report)
}

pub fn cmd_gradcheck(a: &GradcheckArgs, out: &mut impl std::io::Write) -> CliResult<()> {
    let fault = match &a.corrupt {
        None => None,
        Some(name) => {
            Some(OpKind::from_name(name).ok_or_else(|| CliError::Usage(format!("unknown operation `{name}`")))?)
        }
    };
    let cfg = match &a.config {
        Some(p) => ModelConfig::from_kv(&read_text(p)?)?,
        None => ModelConfig::micro(),
    };
    let opts = GradCheckOptions {
        seed: a.seed,
        fault,
        ..GradCheckOptions::default()
    };
    let io = |e: std::io::Error| {
        CliError::Core(Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })
    };
    let mut failed = Vec::new();
    let mut line = |name: &str, r: Result<clipvid::gradcheck::GradCheckReport, Error>| -> CliResult<()> {
        match r {
            Ok(r) => {
                writeln!(
                    out,
                    "{name:<14} {} max_rel_err={:.3e} checked={}",
                    if r.passed { "ok  " } else { "FAIL" },
                    r.max_rel_err,
                    r.checked
                )
                .map_err(io)?;
                if !r.passed {
                    failed.push(name.to_string());
                }
            }
            Err(e) => {
                writeln!(out, "{name:<14} FAIL {e}").map_err(io)?;
                failed.push(name.to_string());
            }
        }
        Ok(())
    };
    for (kind, r) in suite::check_primitives(a.seed, &opts) {
        line(kind.name(), r)?;
    }
    let model_opts = GradCheckOptions {
        max_coords: Some(a.coords),
        ..opts
    };
    line("model_loss", check_loss_gradient(&cfg, a.seed, &model_opts))?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient mismatch in {}", failed.join(", "))))
    }
}

/// Knobs an ablation grid can sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKey {
    Topk,
    IcaLayers,
    Frames,
    Queries,
    DecoderLayers,
}

impl GridKey {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "topk" => GridKey::Topk,
            "ica_layers" => GridKey::IcaLayers,
            "frames" => GridKey::Frames,
            "queries" => GridKey::Queries,
            "decoder_layers" => GridKey::DecoderLayers,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GridKey::Topk => "topk",
            GridKey::IcaLayers => "ica_layers",
            GridKey::Frames => "frames",
            GridKey::Queries => "queries",
            GridKey::DecoderLayers => "decoder_layers",
        }
    }
}

pub fn parse_grid(s: &str) -> CliResult<(GridKey, Vec<usize>)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("grid must look like key=v1,v2,...; got `{s}`")))?;
    let key = GridKey::parse(k.trim()).ok_or_else(|| CliError::Usage(format!("unknown grid key `{}`", k.trim())))?;
    let values = v
        .split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse()
                .map_err(|_| CliError::Usage(format!("grid value `{x}` is not a positive integer")))
        })
        .collect::<CliResult<Vec<usize>>>()?;
    if values.is_empty() || values.contains(&0) {
        return Err(CliError::Usage("grid needs at least one positive value".into()));
    }
    Ok((key, values))
}

/// One ablation row.
#[derive(Clone, Debug, PartialEq)]
pub struct AblateRow {
    pub value: usize,
    pub report: EvalReport,
}

/// Stage 1 then stage 2 of the full variant. Iterations and schedules come
/// from the stage presets scaled by `scale`; seed, batch and optimizer
/// settings from `base`.
pub fn train_two_stage<T: Scalar>(
    cfg: &ModelConfig,
    base: &TrainConfig,
    data: &Dataset,
    scale: f64,
) -> CliResult<Params<T>> {
    let mut params = Params::init(cfg, base.seed)?;
    for preset in [TrainConfig::stage1(), TrainConfig::stage2()] {
        let tc = TrainConfig {
            seed: base.seed,
            batch: base.batch,
            adamw: base.adamw.clone(),
            variant: Variant::Full,
            ..preset
        }
        .scaled(scale);
        train(&mut params, cfg, &tc, data, |_| {})?;
    }
    Ok(params)
}

pub fn cmd_ablate(a: &AblateArgs) -> CliResult<Vec<AblateRow>> {
    let (key, values) = parse_grid(&a.grid)?;
    if a.scale.is_nan() || a.scale <= 0.0 {
        return Err(CliError::Usage("--scale must be positive".into()));
    }
    let rc = load_run_config(RunConfig::default(), a.config.as_deref(), &a.set)?;
    let data = read_dataset(&a.data)?;
    let test = match &a.eval_data {
        Some(p) => read_dataset(p)?,
        None => data.clone(),
    };
    ensure_dir(&a.out)?;
    let base = TrainConfig {
        seed: a.seed,
        ..rc.train.clone()
    };
    write_text(
        &a.out.join("ablate.config"),
        &format!(
            "grid={}\nscale={}\neval_frames={}\n{}",
            a.grid,
            a.scale,
            a.eval_frames,
            rc.to_text(Precision::F32)
        ),
    )?;
    let rows = with_threads(a.threads, || -> CliResult<Vec<AblateRow>> {
        let score = |params: &Params<f32>, cfg: &ModelConfig, frames: usize| -> CliResult<EvalReport> {
            let dets = infer(params, cfg, Variant::Full, &test.clips, frames)?;
            Ok(evaluate(&dets, &test.clips, test.classes)?)
        };
        let mut rows = Vec::new();
        if key == GridKey::Frames {
            let params = match &a.ckpt {
                Some(p) => load_params::<f32>(&rc.model, p)?,
                None => train_two_stage(&rc.model, &base, &data, a.scale)?,
            };
            for &v in &values {
                rows.push(AblateRow {
                    value: v,
                    report: score(&params, &rc.model, v)?,
                });
            }
        } else {
            for &v in &values {
                let mut cfg = rc.model.clone();
                match key {
                    GridKey::Topk => cfg.ica_topk = v,
                    GridKey::IcaLayers => cfg.ica_layers = v,
                    GridKey::Queries => cfg.queries = v,
                    GridKey::DecoderLayers => cfg.decoder_layers = v,
                    GridKey::Frames => unreachable!("handled above"),
                }
                cfg.validate()?;
                let params = train_two_stage(&cfg, &base, &data, a.scale)?;
                rows.push(AblateRow {
                    value: v,
                    report: score(&params, &cfg, a.eval_frames)?,
                });
            }
        }
        Ok(rows)
    })??;
    let mut table = format!("{}\tmap\tmap_slow\tmap_medium\tmap_fast\n", key.as_str());
    for r in &rows {
        let b = |s| r.report.bucket(s).map;
        table.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.value,
            r.report.overall.map,
            b(Speed::Slow),
            b(Speed::Medium),
            b(Speed::Fast)
        ));
    }
    write_text(&a.out.join(format!("ablate_{}.tsv", key.as_str())), &table)?;
    print!("{table}");
    Ok(rows)
}
