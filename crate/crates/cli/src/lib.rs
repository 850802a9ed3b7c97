//! Command-line front end: dataset generation, training, evaluation,
//! ablation sweeps and the HTTP service.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 numeric failure during training or inference.

pub mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use promptseg::dataio::{
    generate_synthetic, load_dataset, prompt_budget, save_dataset, Dataset, Subsequence, SynthConfig, WindowSpec,
};
use promptseg::eval::{
    iterative_eval, level_agreement, single_iteration_eval, single_iteration_predictions, EvalReport, EvalSettings,
    IterativeSettings, LevelPredictions,
};
use promptseg::model::{load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig};
use promptseg::training::{fit, write_history, FitOutcome};
use promptseg::Error;

pub use config::{parse_grid, read_config_file, DataConfig, RunConfig};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// A failed command with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Budget(_) => 1,
        Error::Numeric(_) | Error::Attention(_) => 3,
        Error::Data(_) | Error::Shape(_) | Error::Parse { .. } | Error::Version { .. } | Error::Io { .. } | Error::Json(_) => 2,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self { code: exit_code(&e), message: e.to_string() }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "promptseg", version, about = "Prompt-guided time series state segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labelled dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate once per grid point.
    Sweep(SweepArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub series: usize,
    #[arg(long, default_value_t = 20_000)]
    pub len: usize,
    #[arg(long, default_value_t = 3)]
    pub channels: usize,
    /// Fine-level state count.
    #[arg(long, default_value_t = 8)]
    pub states: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 50)]
    pub min_seg: usize,
    #[arg(long, default_value_t = 400)]
    pub max_seg: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    /// Coarser levels to derive from the fine one, e.g. `2,4`.
    #[arg(long, value_delimiter = ',', default_value = "2")]
    pub coarse_factors: Vec<usize>,
}

/// Settings shared by `train` and `sweep`; unset flags fall back to the
/// config file, then to built-in defaults.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// JSON config: flat, sectioned (`data`/`model`/`train`) or a run manifest.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; defaults to `runs/<timestamp>-<command>`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "epochs")]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Prompts per iteration.
    #[arg(long = "np")]
    pub n_prompts: Option<usize>,
    /// Iterations per subsequence.
    #[arg(long = "nr")]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub window_len: Option<usize>,
    #[arg(long)]
    pub hop: Option<usize>,
    #[arg(long)]
    pub windows: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub enc_layers: Option<usize>,
    #[arg(long)]
    pub dec_blocks: Option<usize>,
    #[arg(long)]
    pub patch_len: Option<usize>,
    #[arg(long)]
    pub patch_hop: Option<usize>,
    #[arg(long)]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ProtocolArg {
    Single,
    Iterative,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Training config or manifest whose split fractions to reuse.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
    #[arg(long, value_enum, default_value = "single")]
    pub protocol: ProtocolArg,
    /// Prompt density for the single-iteration protocol.
    #[arg(long, default_value_t = 0.05)]
    pub density: f64,
    #[arg(long = "np", default_value_t = 4)]
    pub n_prompts: usize,
    #[arg(long = "nr", default_value_t = 8)]
    pub iterations: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// `tctx=0.5T,1T,2T,4T` or `windows=4,8,16,32`.
    #[arg(long)]
    pub grid: String,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Directory for session event logs; sessions are in-memory without it.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Dataset whose test-split subsequences become bundled sessions.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub max_concurrent: Option<usize>,
    #[arg(long, default_value_t = 30_000)]
    pub busy_timeout_ms: u64,
    #[arg(long)]
    pub cors_origin: Option<String>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a).map(|_| ()),
        Command::Train(a) => train(&a.run).map(|_| ()),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::Sweep(a) => sweep(&a).map(|_| ()),
        Command::Serve(a) => serve(&a),
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// `runs/<timestamp>-<command>`, suffixed when that name is taken.
fn run_dir(out_dir: Option<&Path>, command: &str) -> CliResult<PathBuf> {
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
            let base = PathBuf::from("runs").join(format!("{stamp}-{command}"));
            let mut dir = base.clone();
            let mut n = 1;
            while dir.exists() {
                n += 1;
                dir = PathBuf::from(format!("{}-{n}", base.display()));
            }
            dir
        }
    };
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config: Value,
    seed: u64,
    code_version: &'a str,
    started_at: String,
    finished_at: String,
    outputs: Vec<String>,
    timing: Value,
}

/// Defaults, then the config file, then flags. Model shape fields that the
/// data determines (`channels`, `num_states`, `window_len`) are filled in by
/// [`prepare_data`].
pub fn resolve_config(args: &RunArgs) -> CliResult<(RunConfig, bool)> {
    let (mut c, mut ctx_set) = match &args.config {
        Some(path) => {
            let f = read_config_file(path)?;
            (f.config, f.sets_context_len)
        }
        None => (RunConfig::default(), false),
    };
    macro_rules! set {
        ($flag:ident => $($field:tt)+) => {
            if let Some(v) = args.$flag.clone() {
                c.$($field)+ = v;
            }
        };
    }
    set!(data => data.dir);
    set!(seed => train.seed);
    set!(max_epochs => train.max_epochs);
    set!(patience => train.patience);
    set!(lr => train.lr);
    set!(batch_size => train.batch_size);
    set!(n_prompts => train.n_prompts);
    set!(iterations => train.iterations);
    set!(density => train.density_target);
    set!(window_len => data.window_len);
    set!(hop => data.hop);
    set!(windows => data.windows);
    set!(d_model => model.d_model);
    set!(heads => model.heads);
    set!(enc_layers => model.enc_layers);
    set!(dec_blocks => model.dec_blocks);
    set!(patch_len => model.patch_len);
    set!(patch_hop => model.patch_hop);
    set!(context_len => model.context_len);
    set!(dropout => model.dropout);
    ctx_set |= args.context_len.is_some();
    if c.data.dir.as_os_str().is_empty() {
        return Err(CliError::usage("no dataset given: pass --data or set `dir` in the config"));
    }
    Ok((c, ctx_set))
}

/// A loaded dataset and its chronological splits.
pub struct Prepared {
    pub dataset: Dataset,
    pub spec: WindowSpec,
    pub train: Vec<Subsequence>,
    pub val: Vec<Subsequence>,
    pub test: Vec<Subsequence>,
}

pub fn split_dataset(dataset: Dataset, data: &DataConfig) -> promptseg::Result<Prepared> {
    let spec = data.spec()?;
    let (tr, va, te) = dataset.chronological_split(data.split)?;
    let prepared = Prepared {
        train: tr.subsequences(&spec)?,
        val: va.subsequences(&spec)?,
        test: te.subsequences(&spec)?,
        spec,
        dataset,
    };
    for (name, part) in [("train", &prepared.train), ("validation", &prepared.val), ("test", &prepared.test)] {
        if part.is_empty() {
            return Err(Error::Data(format!(
                "{name} split holds no subsequence of length {}",
                spec.subsequence_len()
            )));
        }
    }
    Ok(prepared)
}

/// Load and split the dataset and make the model config agree with it.
pub fn prepare_data(config: &mut RunConfig, context_set: bool) -> promptseg::Result<Prepared> {
    let dataset = load_dataset(&config.data.dir)?;
    config.model.window_len = config.data.window_len;
    config.model.channels = dataset.num_channels();
    config.model.num_states = dataset.label_space();
    if !context_set {
        config.model.context_len = config.data.window_len;
    }
    config.model.validate()?;
    config.train.validate(&config.data.spec()?)?;
    split_dataset(dataset, &config.data)
}

pub fn checkpoint_meta(config: &RunConfig, prepared: &Prepared) -> CheckpointMeta {
    CheckpointMeta {
        seed: config.train.seed,
        window_spec: Some(prepared.spec),
        granularities: prepared.dataset.granularities.clone(),
        channel_names: prepared.dataset.channels.clone(),
    }
}

/// Fine/coarse factor `f` such that every coarse label is the fine label
/// divided by `f`, if any.
pub fn coarsening_factor(subseqs: &[Subsequence], fine: usize, coarse: usize) -> Option<usize> {
    let first = subseqs.first()?;
    let (gf, gc) = (first.granularities.get(fine)?, first.granularities.get(coarse)?);
    (2..=gf.num_states.max(2)).find(|&f| {
        subseqs.iter().all(|s| {
            s.labels[fine]
                .iter()
                .zip(&s.labels[coarse])
                .all(|(a, b)| (a - gf.state_offset) / f == b - gc.state_offset)
        })
    })
}

/// Agreement between the first two levels, when the second is a coarsening
/// of the first.
pub fn first_level_agreement(levels: &[LevelPredictions], subseqs: &[Subsequence]) -> promptseg::Result<Option<f64>> {
    if levels.len() < 2 {
        return Ok(None);
    }
    match coarsening_factor(subseqs, levels[0].level.level, levels[1].level.level) {
        Some(f) => level_agreement(&levels[0], &levels[1], f).map(Some),
        None => Ok(None),
    }
}

/// Validation record of the best epoch plus test metrics without and with
/// prompts. Holds no wall-clock data so that reruns compare byte for byte.
#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub optimizer_steps: u64,
    pub val_acc: f64,
    pub val_mf1: f64,
    pub val_ari: f64,
    pub test_no_prompts: EvalReport,
    pub test: EvalReport,
}

pub struct TrainRun {
    pub dir: PathBuf,
    pub outcome: FitOutcome,
    pub report: TrainReport,
}

pub fn train(args: &RunArgs) -> CliResult<TrainRun> {
    let started_at = now();
    let clock = Instant::now();
    let (mut config, ctx_set) = resolve_config(args)?;
    let prepared = prepare_data(&mut config, ctx_set)?;
    let dir = run_dir(args.out_dir.as_deref(), "train")?;

    let history_path = dir.join("history.jsonl");
    let mut history = fs::File::create(&history_path).map_err(|e| io_err(&history_path, e))?;
    let mut write_err = None;
    let outcome = fit(&prepared.train, &prepared.val, &config.model, &config.train, &prepared.spec, |r| {
        eprintln!(
            "epoch {:>3}  loss {:.4}  val acc {:.4}  mf1 {:.4}  ari {:.4}",
            r.epoch, r.train_loss, r.val_acc, r.val_mf1, r.val_ari
        );
        if let Err(e) = write_history(std::slice::from_ref(r), &mut history) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    history.flush().map_err(|e| io_err(&history_path, e))?;

    save_checkpoint(&outcome.model, &checkpoint_meta(&config, &prepared), dir.join("checkpoint"))?;
    let eval_settings = |density| EvalSettings {
        density,
        seed: config.train.seed,
        sampler: config.train.sampler(),
    };
    let test_no_prompts = single_iteration_eval(&outcome.model, &prepared.test, &prepared.spec, &eval_settings(0.0))?;
    let test = single_iteration_eval(
        &outcome.model,
        &prepared.test,
        &prepared.spec,
        &eval_settings(config.train.density_target),
    )?;
    let best = &outcome.history[outcome.best_epoch - 1];
    let report = TrainReport {
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        optimizer_steps: outcome.optimizer_steps,
        val_acc: best.val_acc,
        val_mf1: best.val_mf1,
        val_ari: best.val_ari,
        test_no_prompts,
        test,
    };
    write_json(&dir.join("report.json"), &report)?;
    print!("{}", report.test.to_table());
    println!("best epoch {}  run directory {}", report.best_epoch, dir.display());

    let manifest = Manifest {
        command: "train",
        config: serde_json::to_value(&config).map_err(|e| CliError::data(e.to_string()))?,
        seed: config.train.seed,
        code_version: CODE_VERSION,
        started_at,
        finished_at: now(),
        outputs: vec!["history.jsonl".into(), "checkpoint".into(), "report.json".into()],
        timing: json!({
            "train_seconds": outcome.train_seconds,
            "seconds_per_batch": outcome.seconds_per_batch(),
            "total_seconds": clock.elapsed().as_secs_f64(),
        }),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(TrainRun { dir, outcome, report })
}

pub fn gen_data(args: &GenDataArgs) -> CliResult<Dataset> {
    let started_at = now();
    let synth = SynthConfig {
        num_series: args.series,
        length: args.len,
        channels: args.channels,
        num_fine_states: args.states,
        segment_len_range: (args.min_seg, args.max_seg),
        noise_std: args.noise,
        seed: args.seed,
    };
    let mut dataset = generate_synthetic(&synth)?;
    for &f in &args.coarse_factors {
        dataset.add_coarse_level(f)?;
    }
    save_dataset(&dataset, &args.out)?;
    let manifest = Manifest {
        command: "gen-data",
        config: json!({ "synth": synth, "coarse_factors": args.coarse_factors }),
        seed: args.seed,
        code_version: CODE_VERSION,
        started_at,
        finished_at: now(),
        outputs: vec!["meta.json".into()],
        timing: json!({}),
    };
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!(
        "wrote {} series x {} steps, {} channels, {} levels, {} unified states to {}",
        args.series,
        args.len,
        args.channels,
        dataset.num_levels(),
        dataset.label_space(),
        args.out.display()
    );
    Ok(dataset)
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level_agreement: Option<f64>,
    pub report: EvalReport,
}

pub fn eval(args: &EvalArgs) -> CliResult<EvalOutput> {
    let started_at = now();
    let (model, meta) = load_checkpoint(&args.checkpoint)?;
    let spec = meta
        .window_spec
        .ok_or_else(|| CliError::usage("checkpoint records no window spec"))?;
    let split = match &args.config {
        Some(p) => read_config_file(p)?.config.data.split,
        None => DataConfig::default().split,
    };
    let dataset = load_dataset(&args.data)?;
    check_compatible(model.config(), &dataset)?;
    let data = DataConfig {
        dir: args.data.clone(),
        window_len: spec.window_len,
        hop: spec.hop,
        windows: spec.windows,
        split,
    };
    let prepared = split_dataset(dataset, &data)?;
    let subseqs = match args.split {
        SplitName::Train => &prepared.train,
        SplitName::Val => &prepared.val,
        SplitName::Test => &prepared.test,
    };
    let dir = run_dir(args.out_dir.as_deref(), "eval")?;
    let mut outputs = vec!["report.json".to_string()];
    let (report, agreement) = match args.protocol {
        ProtocolArg::Single => {
            let settings = EvalSettings {
                density: args.density,
                seed: args.seed,
                ..EvalSettings::default()
            };
            let levels = single_iteration_predictions(&model, subseqs, &spec, &settings)?;
            let agreement = first_level_agreement(&levels, subseqs)?;
            (single_iteration_eval(&model, subseqs, &spec, &settings)?, agreement)
        }
        ProtocolArg::Iterative => {
            let settings = IterativeSettings {
                n_prompts: args.n_prompts,
                iterations: args.iterations,
                seed: args.seed,
                ..IterativeSettings::default()
            };
            let budget = prompt_budget(1.0, spec.subsequence_len());
            if settings.n_prompts * settings.iterations > budget {
                return Err(CliError::usage(format!(
                    "{} x {} prompts exceed the {budget} timesteps of a subsequence",
                    settings.n_prompts, settings.iterations
                )));
            }
            let (curve, report) = iterative_eval(&model, subseqs, &spec, &settings)?;
            write_json(&dir.join("curve.json"), &curve)?;
            outputs.push("curve.json".into());
            (report, None)
        }
    };
    print!("{}", report.to_table());
    if let Some(a) = agreement {
        println!("level agreement {a:.4}");
    }
    let out = EvalOutput {
        checkpoint: args.checkpoint.display().to_string(),
        split: format!("{:?}", args.split).to_lowercase(),
        level_agreement: agreement,
        report,
    };
    write_json(&dir.join("report.json"), &out)?;
    let manifest = Manifest {
        command: "eval",
        config: json!({
            "checkpoint": out.checkpoint,
            "data": args.data,
            "split": out.split,
            "split_fractions": split,
            "protocol": format!("{:?}", args.protocol).to_lowercase(),
            "density": args.density,
            "n_prompts": args.n_prompts,
            "iterations": args.iterations,
        }),
        seed: args.seed,
        code_version: CODE_VERSION,
        started_at,
        finished_at: now(),
        outputs,
        timing: json!({}),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(out)
}

fn check_compatible(model: &ModelConfig, dataset: &Dataset) -> CliResult<()> {
    if model.channels != dataset.num_channels() || model.num_states != dataset.label_space() {
        return Err(CliError::usage(format!(
            "checkpoint expects C = {} channels and K = {} states, dataset has C = {} and K = {}",
            model.channels,
            model.num_states,
            dataset.num_channels(),
            dataset.label_space()
        )));
    }
    Ok(())
}

/// One trained and evaluated grid point.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub key: String,
    pub value: usize,
    pub context_len: usize,
    pub windows: usize,
    pub n_prompts: usize,
    pub iterations: usize,
    pub acc: f64,
    pub mf1: f64,
    pub ari: f64,
    pub best_epoch: usize,
    pub seconds_per_batch: f64,
    pub train_seconds: f64,
}

pub fn sweep(args: &SweepArgs) -> CliResult<Vec<SweepRow>> {
    let started_at = now();
    let (base, ctx_set) = resolve_config(&args.run)?;
    let (key, values) = parse_grid(&args.grid, base.data.window_len)?;
    let dataset = load_dataset(&base.data.dir)?;
    let dir = run_dir(args.run.out_dir.as_deref(), "sweep")?;
    let mut rows = Vec::new();
    for &value in &values {
        let mut c = base.clone();
        let mut ctx = ctx_set;
        if key == "tctx" {
            c.model.context_len = value;
            ctx = true;
        } else {
            c.data.windows = value;
            // fewer windows shrink the budget; keep N_p and trim N_r to fit
            let budget = prompt_budget(c.train.density_target, c.data.spec()?.subsequence_len());
            c.train.iterations = c.train.iterations.min(budget / c.train.n_prompts.max(1));
            if c.train.iterations == 0 {
                return Err(Error::Budget(format!(
                    "windows = {value}: budget {budget} cannot hold one iteration of {} prompts",
                    c.train.n_prompts
                ))
                .into());
            }
        }
        c.model.window_len = c.data.window_len;
        c.model.channels = dataset.num_channels();
        c.model.num_states = dataset.label_space();
        if !ctx {
            c.model.context_len = c.data.window_len;
        }
        c.model.validate()?;
        let prepared = split_dataset(dataset.clone(), &c.data)?;
        c.train.validate(&prepared.spec)?;
        eprintln!("{key} = {value}: training");
        let outcome = fit(&prepared.train, &prepared.val, &c.model, &c.train, &prepared.spec, |r| {
            eprintln!("  epoch {:>3}  loss {:.4}  val acc {:.4}", r.epoch, r.train_loss, r.val_acc)
        })?;
        let settings = EvalSettings {
            density: c.train.density_target,
            seed: c.train.seed,
            sampler: c.train.sampler(),
        };
        let report = single_iteration_eval(&outcome.model, &prepared.test, &prepared.spec, &settings)?;
        rows.push(SweepRow {
            key: key.clone(),
            value,
            context_len: c.model.context_len,
            windows: c.data.windows,
            n_prompts: c.train.n_prompts,
            iterations: c.train.iterations,
            acc: report.acc,
            mf1: report.mf1,
            ari: report.ari,
            best_epoch: outcome.best_epoch,
            seconds_per_batch: outcome.seconds_per_batch(),
            train_seconds: outcome.train_seconds,
        });
    }
    println!(
        "{:<8} {:>7} {:>5} {:>4} {:>8} {:>8} {:>8} {:>10} {:>10}",
        key, "T_ctx", "W", "N_r", "ACC", "MF1", "ARI", "s/batch", "train s"
    );
    for r in &rows {
        println!(
            "{:<8} {:>7} {:>5} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>10.3} {:>10.1}",
            r.value, r.context_len, r.windows, r.iterations, r.acc, r.mf1, r.ari, r.seconds_per_batch, r.train_seconds
        );
    }
    write_json(&dir.join("sweep.json"), &rows)?;
    let manifest = Manifest {
        command: "sweep",
        config: json!({ "base": base, "grid": args.grid }),
        seed: base.train.seed,
        code_version: CODE_VERSION,
        started_at,
        finished_at: now(),
        outputs: vec!["sweep.json".into()],
        timing: json!({ "train_seconds": rows.iter().map(|r| r.train_seconds).sum::<f64>() }),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(rows)
}

pub fn serve(args: &ServeArgs) -> CliResult<()> {
    let mut options = promptseg_service::ServiceOptions {
        data_dir: args.data_dir.clone(),
        busy_timeout: Duration::from_millis(args.busy_timeout_ms),
        cors_origin: args.cors_origin.clone(),
        ..Default::default()
    };
    if let Some(n) = args.max_concurrent {
        options.max_concurrent = n;
    }
    if !args.checkpoint.is_dir() {
        return Err(CliError::data(format!("checkpoint directory {} not found", args.checkpoint.display())));
    }
    if let Some(path) = &args.dataset {
        let (model, meta) = load_checkpoint(&args.checkpoint)?;
        let spec = meta
            .window_spec
            .ok_or_else(|| CliError::usage("checkpoint records no window spec"))?;
        let dataset = load_dataset(path)?;
        check_compatible(model.config(), &dataset)?;
        let data = DataConfig {
            dir: path.clone(),
            window_len: spec.window_len,
            hop: spec.hop,
            windows: spec.windows,
            ..DataConfig::default()
        };
        options.bundled = split_dataset(dataset, &data)?.test;
    }
    let state = promptseg_service::AppState::from_checkpoint(&args.checkpoint, options).map_err(CliError::data)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::data(e.to_string()))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| CliError::data(format!("cannot listen on {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| CliError::data(e.to_string()))?;
        println!("listening on http://{local}");
        let _ = std::io::stdout().flush();
        promptseg_service::serve(listener, state)
            .await
            .map_err(|e| CliError::data(format!("server: {e}")))
    })
}

