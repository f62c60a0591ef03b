//! `ris-muxer` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use ris_core::channel::{load_dataset, save_dataset, synthesize_dataset, ChannelDataset, Split};
use ris_core::evaluation::{
    default_tsnr_grid, evaluate, rate_region, robustness_curve, tsnr_sweep, EvalReport, PhaseSource,
};
use ris_core::fcn::{init_model, load_checkpoint, save_checkpoint, FcnModel};
use ris_core::precoding::UserWeights;
use ris_core::seed::derive_seed;
use ris_core::training::{train_discrete, train_two_phase, TrainTrace};

pub use config::{parse_config, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "ris-muxer",
    version,
    about = "RIS phase optimization with a fully convolutional network"
)]
pub struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a channel dataset.
    GenChannels {
        /// Output file (default `<out>/channels.txt`).
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Two-phase training (MMSE, then WMMSE with refreshed precoders).
    Train(TrainArgs),
    /// Training with a discretization penalty.
    TrainDiscrete {
        #[command(flatten)]
        common: TrainArgs,
        /// Phase codebook, e.g. `0,pi`.
        #[arg(long)]
        codebook: Option<String>,
        #[arg(long)]
        penalty_threshold: Option<f64>,
    },
    /// Per-sample rates on one split.
    Eval(EvalArgs),
    /// One evaluation per user-weight vector.
    RateRegion {
        #[arg(long)]
        channels: PathBuf,
        /// `w1,w2=path`, once per weight vector.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
    },
    /// One evaluation per transmit SNR.
    TsnrSweep {
        #[command(flatten)]
        common: EvalArgs,
        /// Comma-separated TSNR values.
        #[arg(long)]
        rhos: Option<String>,
    },
    /// Empirical CDF of the per-sample sum rate.
    Ecdf(EvalArgs),
    /// One evaluation per channel-error ratio.
    Robustness {
        #[command(flatten)]
        common: EvalArgs,
        /// Comma-separated error ratios.
        #[arg(long)]
        gammas: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenChannels { .. } => "gen-channels",
            Command::Train(_) => "train",
            Command::TrainDiscrete { .. } => "train-discrete",
            Command::Eval(_) => "eval",
            Command::RateRegion { .. } => "rate-region",
            Command::TsnrSweep { .. } => "tsnr-sweep",
            Command::Ecdf(_) => "ecdf",
            Command::Robustness { .. } => "robustness",
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub channels: PathBuf,
    /// Checkpoint path (default `<out>/model.ckpt`).
    #[arg(long)]
    pub out_model: Option<PathBuf>,
    /// Trace CSV path (default `<out>/<command>.trace.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Random,
    AltGradient,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub channels: PathBuf,
    /// Trained checkpoint; mutually exclusive with `--baseline`.
    #[arg(long, conflicts_with = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Snap phases to this codebook before precoding, e.g. `0,pi`.
    #[arg(long)]
    pub round: Option<String>,
    /// Channel-error ratio.
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    command: String,
    version: &'static str,
    config_sha256: String,
    seed: u64,
    sub_seeds: BTreeMap<&'static str, u64>,
    threads: Option<usize>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_seconds: f64,
}

/// SHA-256 of the effective configuration, independent of the output path.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.out = PathBuf::new();
    let canonical = serde_json::to_string(&c).expect("config serializes");
    let digest = Sha256::digest(canonical.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
    command: &'static str,
    sub_seeds: BTreeMap<&'static str, u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl Ctx {
    fn seed(&mut self, tag: &'static str) -> u64 {
        let s = derive_seed(self.cfg.seed, tag, 0);
        self.sub_seeds.insert(tag, s);
        s
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.display().to_string());
    }

    fn output(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_channels(&mut self, p: &Path) -> anyhow::Result<ChannelDataset> {
        self.input(p);
        load_dataset(p).with_context(|| format!("cannot load channels from {}", p.display()))
    }

    fn load_model(&mut self, p: &Path) -> anyhow::Result<FcnModel> {
        self.input(p);
        Ok(load_checkpoint(p)
            .with_context(|| format!("cannot load model from {}", p.display()))?
            .0)
    }

    fn split(&self) -> Split {
        match self.cfg.eval.split.as_str() {
            "train" => Split::Train,
            "all" => Split::All,
            _ => Split::Test,
        }
    }

    fn write_report(&mut self, report: &EvalReport, with_ecdf: bool) -> anyhow::Result<()> {
        report.write(&self.out, self.command)?;
        self.output(&self.path(&format!("{}.records.csv", self.command)));
        self.output(&self.path(&format!("{}.summary.csv", self.command)));
        if with_ecdf {
            let p = self.path(&format!("{}.ecdf.csv", self.command));
            fs::write(&p, report.ecdf_csv())
                .with_context(|| format!("cannot write {}", p.display()))?;
            self.output(&p);
        }
        for run in &report.runs {
            println!(
                "{} gamma={} rho={} weights={} mean_wsr={:.6} mean_sum_rate={:.6}",
                run.algorithm,
                run.gamma,
                run.link.rho,
                run.weights.key(),
                run.mean_wsr(),
                run.mean_sum_rate()
            );
        }
        Ok(())
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> anyhow::Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let mut cfg = match &cli.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be >= 1");
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build()?;
    pool.install(|| dispatch(&cli, cfg))
}

fn dispatch(cli: &Cli, cfg: RunConfig) -> anyhow::Result<()> {
    let start = Instant::now();
    let out = cfg.out.clone();
    fs::create_dir_all(&out)
        .with_context(|| format!("cannot create output directory {}", out.display()))?;
    let mut ctx = Ctx {
        cfg,
        out,
        command: cli.command.name(),
        sub_seeds: BTreeMap::new(),
        inputs: Vec::new(),
        outputs: Vec::new(),
    };
    match &cli.command {
        Command::GenChannels { file } => gen_channels(&mut ctx, file.as_deref())?,
        Command::Train(a) => train(&mut ctx, a, None)?,
        Command::TrainDiscrete {
            common,
            codebook,
            penalty_threshold,
        } => {
            if let Some(cb) = codebook {
                ctx.cfg.train.codebook = config::parse_phase_list(cb)?;
            }
            if let Some(t) = penalty_threshold {
                if !(*t > 0.0) {
                    bail!("--penalty-threshold must be > 0, got {t}");
                }
                ctx.cfg.train.penalty_threshold = *t;
            }
            train(&mut ctx, common, Some(()))?
        }
        Command::Eval(a) => {
            let rep = eval_common(&mut ctx, a, |ctx, src, ds, opts| {
                Ok(evaluate(
                    src,
                    ds,
                    ctx.split(),
                    &ctx.cfg.system.weights,
                    &ctx.cfg.link(),
                    opts,
                )?)
            })?;
            ctx.write_report(&rep, false)?;
        }
        Command::Ecdf(a) => {
            let rep = eval_common(&mut ctx, a, |ctx, src, ds, opts| {
                Ok(evaluate(
                    src,
                    ds,
                    ctx.split(),
                    &ctx.cfg.system.weights,
                    &ctx.cfg.link(),
                    opts,
                )?)
            })?;
            ctx.write_report(&rep, true)?;
        }
        Command::TsnrSweep { common, rhos } => {
            let grid = match rhos {
                Some(s) => config::parse_number_list(s)?,
                None if !ctx.cfg.eval.rhos.is_empty() => ctx.cfg.eval.rhos.clone(),
                None => default_tsnr_grid(),
            };
            let rep = eval_common(&mut ctx, common, |ctx, src, ds, opts| {
                Ok(tsnr_sweep(
                    src,
                    ds,
                    ctx.split(),
                    &ctx.cfg.system.weights,
                    &grid,
                    ctx.cfg.system.power,
                    opts,
                )?)
            })?;
            ctx.write_report(&rep, false)?;
        }
        Command::Robustness { common, gammas } => {
            let list = match gammas {
                Some(s) => config::parse_number_list(s)?,
                None => ctx.cfg.eval.gammas.clone(),
            };
            let rep = eval_common(&mut ctx, common, |ctx, src, ds, opts| {
                Ok(robustness_curve(
                    src,
                    ds,
                    ctx.split(),
                    &ctx.cfg.system.weights,
                    &ctx.cfg.link(),
                    &list,
                    opts,
                )?)
            })?;
            ctx.write_report(&rep, false)?;
        }
        Command::RateRegion { channels, models } => {
            let ds = ctx.load_channels(channels)?;
            let mut registry = BTreeMap::new();
            for spec in models {
                let (w, path) = spec
                    .split_once('=')
                    .ok_or_else(|| anyhow!("--model expects `w1,w2=path`, got {spec:?}"))?;
                let weights = UserWeights::new(config::parse_number_list(w)?)?;
                let model = ctx.load_model(Path::new(path))?;
                registry.insert(weights.key(), model);
            }
            let grid = ctx
                .cfg
                .eval
                .weight_grid
                .iter()
                .map(|w| UserWeights::new(w.clone()))
                .collect::<ris_core::Result<Vec<_>>>()?;
            let eval_seed = ctx.seed("eval");
            let opts = ctx.cfg.eval_options(eval_seed);
            let rep = rate_region(&registry, &ds, ctx.split(), &grid, &ctx.cfg.link(), &opts)?;
            ctx.write_report(&rep, false)?;
        }
    }
    write_manifest(&ctx, start)
}

fn write_manifest(ctx: &Ctx, start: Instant) -> anyhow::Result<()> {
    let echo = ctx.path(&format!("{}.config.toml", ctx.command));
    fs::write(&echo, ctx.cfg.to_toml())
        .with_context(|| format!("cannot write {}", echo.display()))?;
    let manifest = Manifest {
        command: ctx.command.to_string(),
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: config_hash(&ctx.cfg),
        seed: ctx.cfg.seed,
        sub_seeds: ctx.sub_seeds.clone(),
        threads: Some(rayon::current_num_threads()),
        inputs: ctx.inputs.clone(),
        outputs: ctx.outputs.clone(),
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    let path = ctx.path(&format!("{}.manifest.json", ctx.command));
    let body = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, body).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn gen_channels(ctx: &mut Ctx, file: Option<&Path>) -> anyhow::Result<()> {
    let seed = ctx.seed("channels");
    let ds = synthesize_dataset(&ctx.cfg.channel, seed)?;
    let path = file.map_or_else(|| ctx.path("channels.txt"), Path::to_path_buf);
    save_dataset(&ds, &path)
        .with_context(|| format!("cannot write channels to {}", path.display()))?;
    ctx.output(&path);
    println!(
        "wrote {} samples ({} train) to {}",
        ds.len(),
        ds.train_count(),
        path.display()
    );
    Ok(())
}

fn train(ctx: &mut Ctx, a: &TrainArgs, discrete: Option<()>) -> anyhow::Result<()> {
    let ds = ctx.load_channels(&a.channels)?;
    let arch = ctx.cfg.model.arch(ds.geometry());
    let init_seed = ctx.seed("init");
    let train_seed = ctx.seed("train");
    let model = init_model(&arch, init_seed)?;
    let tcfg = ctx.cfg.train_config(train_seed);
    let (model, trace): (FcnModel, TrainTrace) = match discrete {
        None => train_two_phase(model, &ds, &tcfg)?,
        Some(()) => train_discrete(model, &ds, &tcfg)?,
    };
    let model_path = a
        .out_model
        .clone()
        .unwrap_or_else(|| ctx.path("model.ckpt"));
    save_checkpoint(&model, &[ctx.cfg.seed, init_seed, train_seed], &model_path)
        .with_context(|| format!("cannot write model to {}", model_path.display()))?;
    ctx.output(&model_path);
    let trace_path = a
        .trace
        .clone()
        .unwrap_or_else(|| ctx.path(&format!("{}.trace.csv", ctx.command)));
    trace.write_csv(&trace_path)?;
    ctx.output(&trace_path);
    if let Some(last) = trace.epochs.last() {
        println!(
            "trained {} epochs; last epoch objective={:.6} wsr={:.6} penalty={:.6}",
            trace.epochs.len(),
            last.objective,
            last.wsr,
            last.penalty
        );
    }
    Ok(())
}

fn eval_common(
    ctx: &mut Ctx,
    a: &EvalArgs,
    f: impl FnOnce(
        &Ctx,
        PhaseSource<'_>,
        &ChannelDataset,
        &ris_core::evaluation::EvalOptions,
    ) -> anyhow::Result<EvalReport>,
) -> anyhow::Result<EvalReport> {
    let ds = ctx.load_channels(&a.channels)?;
    let model = match &a.model {
        Some(p) => Some(ctx.load_model(p)?),
        None => None,
    };
    let source = match (&model, a.baseline) {
        (Some(m), _) => PhaseSource::Model(m),
        (None, Some(Baseline::Random)) => PhaseSource::Random,
        (None, Some(Baseline::AltGradient)) => PhaseSource::AlternatingGradient {
            steps: ctx.cfg.eval.baseline_steps,
            step_size: ctx.cfg.eval.baseline_step_size,
        },
        (None, None) => bail!("either --model or --baseline is required"),
    };
    if let Some(r) = &a.round {
        ctx.cfg.eval.rounding = Some(config::parse_phase_list(r)?);
    }
    if let Some(g) = a.gamma {
        if !(g >= 0.0) {
            bail!("--gamma must be >= 0, got {g}");
        }
        ctx.cfg.eval.gamma = g;
    }
    let eval_seed = ctx.seed("eval");
    let opts = ctx.cfg.eval_options(eval_seed);
    f(ctx, source, &ds, &opts)
}
