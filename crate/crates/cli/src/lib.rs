//! The `cocobot` command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric
//! failure (divergence, failed gradient check, non-finite sampling), 4
//! environment error (I/O, address in use).

pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use cocobot::energymodel::{ConceptSpec, InterventionSpec};
use cocobot::evalsuite::{concept_accuracy, run_eval, EvalConfig, Intent};
use cocobot::sampler::{format_spec, parse_spec, run_batch, SamplerConfig, TrajectoryRecord};
use cocobot::synthworld::{make_dataset, save_dataset, World, GLYPH_ATTRIBUTES};
use cocobot::trainer::{append_metrics, Checkpoint, Trainer, MANIFEST_FILE};
use cocobot::Error;
use serde::Serialize;

pub use config::RunConfig;

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

/// Trajectories sampled together; bounds memory for large `--n`.
const INTERVENE_CHUNK: usize = 64;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub msg: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self { code: 2, msg: msg.into() }
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Self { code: 3, msg: msg.into() }
    }

    pub fn env(msg: impl Into<String>) -> Self {
        Self { code: 4, msg: msg.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } => 4,
            Error::NonFinite { .. } | Error::Diverged { .. } | Error::GradientCheck { .. } | Error::Engine(_) => 3,
            _ => 2,
        };
        Self { code, msg: e.to_string() }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "cocobot", version, about = "Concept-bottleneck energy models on a synthetic latent world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the world description and a labelled dataset.
    World(WorldArgs),
    /// Train a model; writes a checkpoint, the metric log and the resolved config.
    Train(TrainArgs),
    /// Sample under an intervention expression such as `+Smile,-Male`.
    Intervene(InterveneArgs),
    /// Concept accuracy and MMD for a list of intervention expressions.
    Eval(EvalArgs),
    /// Serve the playground HTTP API for a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct WorldArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Dataset seed; defaults to the config's top-level seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    /// A checkpoint directory, or a training output directory holding one.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed of the first sample; sample `i` uses `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Takes sampler settings from this run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// File with one intervention expression per line; `#` starts a comment.
    #[arg(long, required_unless_present = "spec")]
    pub specs: Option<PathBuf>,
    /// An expression to evaluate; may be repeated.
    #[arg(long)]
    pub spec: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Samples per expression.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Takes sampler and eval settings from this run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = DEFAULT_BIND)]
    pub bind: String,
    /// Takes default sampler settings from this run config.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::World(a) => cmd_world(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Intervene(a) => cmd_intervene(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Serve(a) => cmd_serve(&a),
    }
}

fn out_dir(flag: &Option<PathBuf>, cfg: &RunConfig) -> CliResult<PathBuf> {
    flag.clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::config("no output directory: pass --out or set `out` in the config"))
}

fn create_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| CliError::env(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::env(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

pub fn cmd_world(a: &WorldArgs) -> CliResult {
    let cfg = RunConfig::load(&a.config)?;
    let dir = out_dir(&a.out, &cfg)?;
    let world = World::new(cfg.world.clone())?;
    for w in world.warnings() {
        eprintln!("warning: {w}");
    }
    let samples = make_dataset(&world, a.n, a.seed.unwrap_or(cfg.seed))?;
    save_dataset(&dir, &world, &samples)?;
    println!("wrote {} samples to {}", samples.len(), dir.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> CliResult {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    let dir = out_dir(&a.out, &cfg)?;
    let ck_dir = dir.join(CHECKPOINT_DIR);
    if ck_dir.join(MANIFEST_FILE).exists() || dir.join(METRICS_FILE).exists() {
        return Err(CliError::config(format!("{} already holds a training run", dir.display())));
    }
    create_dir(&dir)?;
    write_file(&dir.join(RESOLVED_CONFIG_FILE), &to_json(&cfg))?;
    let world = World::new(cfg.world.clone())?;
    for w in world.warnings() {
        eprintln!("warning: {w}");
    }
    let schedule = cfg.schedule.build()?;
    let mut trainer = Trainer::new(cfg.train.clone(), &cfg.model, &world, &schedule)?;
    let metrics = dir.join(METRICS_FILE);
    let result = trainer.run(|r| {
        eprintln!(
            "step {:>6}  L_score {:.4}  L_concept {:.4}  held-out CE/concept {:.4}",
            r.step, r.score_loss, r.concept_loss, r.heldout_concept_loss
        );
        append_metrics(&metrics, std::slice::from_ref(r))
    });
    match result {
        Ok(()) => {
            trainer.checkpoint().save(&ck_dir)?;
            if trainer.history().is_empty() {
                append_metrics(&metrics, &[])?;
            }
            println!("checkpoint {} written to {}", trainer.checkpoint().hash()?, ck_dir.display());
            Ok(())
        }
        Err(Error::Diverged { step, reason, last_good }) => {
            last_good.save(&ck_dir)?;
            Err(CliError::numeric(format!(
                "training diverged at step {step}: {reason}; last good checkpoint saved to {}",
                ck_dir.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// Accepts a checkpoint directory or a training output directory.
pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let nested = path.join(CHECKPOINT_DIR);
    let dir = if !path.join(MANIFEST_FILE).exists() && nested.join(MANIFEST_FILE).exists() { nested } else { path.to_path_buf() };
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(CliError::env(format!("{}: no checkpoint found", path.display())));
    }
    Ok(Checkpoint::load(&dir)?)
}

fn sampler_from(config: &Option<PathBuf>) -> CliResult<(SamplerConfig, Option<EvalConfig>)> {
    match config {
        Some(p) => {
            let c = RunConfig::load(p)?;
            Ok((c.sampler, Some(c.eval)))
        }
        None => Ok((SamplerConfig::default(), None)),
    }
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    sample: usize,
    seed: u64,
    #[serde(flatten)]
    record: &'a TrajectoryRecord,
}

#[derive(Serialize)]
struct InterveneRun<'a> {
    checkpoint_hash: String,
    spec: String,
    intervention: &'a InterventionSpec,
    sampler: &'a SamplerConfig,
    n: usize,
}

pub fn cmd_intervene(a: &InterveneArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let world = ck.build_world()?;
    let concepts = ck.network.concepts();
    let spec = parse_spec(&a.spec, concepts)?;
    if a.n == 0 {
        return Err(CliError::config("--n must be at least 1"));
    }
    let (mut sampler, _) = sampler_from(&a.config)?;
    if let Some(s) = a.seed {
        sampler.seed = s;
    }
    sampler.validate(ck.schedule.timesteps)?;
    create_dir(&a.out)?;

    let run = InterveneRun { checkpoint_hash: ck.hash()?, spec: format_spec(&spec, concepts), intervention: &spec, sampler: &sampler, n: a.n };
    write_file(&a.out.join(RUN_FILE), &to_json(&run))?;

    let traj_path = a.out.join(TRAJECTORIES_FILE);
    let mut traj_out = BufWriter::new(File::create(&traj_path).map_err(|e| CliError::env(format!("{}: {e}", traj_path.display())))?);
    let mut csv = csv_header(&world);
    let mut finals = Vec::with_capacity(a.n);
    let seeds: Vec<u64> = (0..a.n as u64).map(|i| sampler.seed.wrapping_add(i)).collect();
    for (c, chunk) in seeds.chunks(INTERVENE_CHUNK).enumerate() {
        for (j, traj) in run_batch(&ck.network, &spec, &sampler, chunk, true)?.iter().enumerate() {
            let sample = c * INTERVENE_CHUNK + j;
            for record in &traj.records {
                serde_json::to_writer(&mut traj_out, &TrajectoryLine { sample, seed: traj.seed, record })
                    .map_err(|e| CliError::env(format!("{}: {e}", traj_path.display())))?;
                traj_out.write_all(b"\n").map_err(|e| CliError::env(format!("{}: {e}", traj_path.display())))?;
            }
            csv_row(&mut csv, &world, sample, traj.seed, traj.final_latent());
            finals.push(traj.final_latent().to_vec());
        }
    }
    traj_out.flush().map_err(|e| CliError::env(format!("{}: {e}", traj_path.display())))?;
    write_file(&a.out.join(SAMPLES_FILE), csv.as_bytes())?;

    let acc = concept_accuracy(&world, &finals, &Intent::from_spec(&spec))?;
    println!("{} samples of {} written to {}", a.n, run.spec, a.out.display());
    for (k, c) in concepts.concepts().iter().enumerate() {
        let agree = acc.per_concept[k].map_or("-".to_string(), |x| format!("{x:.3}"));
        println!("  {:<12} intended agreement {agree:>6}  positive rate {:.3}", c.name, acc.positive_rate[k]);
    }
    Ok(())
}

fn csv_header(world: &World) -> String {
    let mut cols = vec!["sample".to_string(), "seed".to_string()];
    cols.extend((0..world.latent_dim()).map(|i| format!("v{i}")));
    cols.extend(GLYPH_ATTRIBUTES.iter().map(|s| s.to_string()));
    cols.extend(world.concepts().names());
    cols.join(",") + "\n"
}

fn csv_row(out: &mut String, world: &World, sample: usize, seed: u64, v: &[f64]) {
    let mut cols = vec![sample.to_string(), seed.to_string()];
    cols.extend(v.iter().map(f64::to_string));
    cols.extend(world.render_glyph(v).to_array().iter().map(f64::to_string));
    cols.extend(world.oracle_label(v).values().iter().map(usize::to_string));
    out.push_str(&cols.join(","));
    out.push('\n');
}

/// One expression per non-blank line; `#` starts a comment.
pub fn parse_specs(text: &str, origin: &str, concepts: &ConceptSpec) -> CliResult<Vec<InterventionSpec>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let expr = line.split('#').next().unwrap_or("").trim();
        if expr.is_empty() {
            continue;
        }
        let spec = parse_spec(expr, concepts).map_err(|e| CliError::config(format!("{origin}:{}: {e}", i + 1)))?;
        out.push(spec);
    }
    if out.is_empty() {
        return Err(CliError::config(format!("{origin}: no intervention expressions")));
    }
    Ok(out)
}

pub fn cmd_eval(a: &EvalArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let world = ck.build_world()?;
    let concepts = ck.network.concepts();
    let mut specs = Vec::new();
    if let Some(p) = &a.specs {
        let text = fs::read_to_string(p).map_err(|e| CliError::env(format!("{}: {e}", p.display())))?;
        specs.extend(parse_specs(&text, &p.display().to_string(), concepts)?);
    }
    for s in &a.spec {
        specs.push(parse_spec(s, concepts)?);
    }
    let (sampler, eval) = sampler_from(&a.config)?;
    let mut cfg = EvalConfig { sampler, ..eval.unwrap_or_default() };
    if let Some(n) = a.n {
        cfg.n = n;
    }
    if let Some(s) = a.seed {
        cfg.sampler.seed = s;
    }
    let report = run_eval(&ck, &world, &specs, &cfg)?;
    report.save(&a.out)?;
    println!("{:<32} {:>8} {:>8} {:>10} {:>8}", "spec", "mean", "joint", "mmd", "p");
    for s in &report.specs {
        println!("{:<32} {:>8.3} {:>8.3} {:>10.5} {:>8.4}", s.spec, s.accuracy.mean, s.accuracy.joint, s.mmd.statistic, s.mmd.p_value);
    }
    println!("unconditioned readout accuracy {:.3}", report.unconditioned.mean);
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> CliResult {
    let ck = load_checkpoint(&a.checkpoint)?;
    let (sampler, _) = sampler_from(&a.config)?;
    let state = cocobot_service::AppState::new(ck, sampler)?;
    let listener = std::net::TcpListener::bind(&a.bind).map_err(|e| match e.kind() {
        std::io::ErrorKind::InvalidInput => CliError::config(format!("--bind {}: {e}", a.bind)),
        _ => CliError::env(format!("cannot bind {}: {e}", a.bind)),
    })?;
    listener.set_nonblocking(true).map_err(|e| CliError::env(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| CliError::env(e.to_string()))?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| CliError::env(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener).map_err(|e| CliError::env(e.to_string()))?;
        println!("listening on http://{addr} (checkpoint {})", state.checkpoint_hash());
        std::io::stdout().flush().ok();
        cocobot_service::serve(listener, state, shutdown_signal()).await.map_err(|e| CliError::env(e.to_string()))
    })?;
    eprintln!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        tokio::signal::ctrl_c().await.ok();
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}
