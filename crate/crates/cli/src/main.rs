//! `gridcast`: synthesize or import traffic movies, inspect sampling, run
//! training plans, predict with an ensemble, derive masks and score.

mod plan;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use gridcast::checkpoint::Checkpoint;
use gridcast::data::{self, Frames, MaskSource, Profile, Strategy, SynthConfig, TrafficMovie};
use gridcast::model::{DualUNet, ModelConfig};
use gridcast::trainer::{ensemble_predict, DEFAULT_BATCH};
use gridcast::Tensor;

/// A bad flag, plan or input shape: exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "gridcast", version, about = "Traffic movie forecasting with a dual-encoder ConvLSTM U-Net")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Pre,
    Covid,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Nonoverlap,
    Overlap,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Core,
    Extended,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic city movie.
    Synth {
        #[arg(long)]
        city: Option<String>,
        #[arg(long, env = "GRIDCAST_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        days: usize,
        #[arg(long, value_enum, default_value = "pre")]
        profile: ProfileArg,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = data::FRAMES_PER_DAY)]
        frames_per_day: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count the sample windows a set of movies yields.
    Sample {
        /// GCMV files or globs.
        #[arg(required = true)]
        inputs: Vec<String>,
        #[arg(long, value_enum, default_value = "nonoverlap")]
        strategy: StrategyArg,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = data::FRAMES_PER_DAY)]
        frames_per_day: usize,
    },
    /// Run a training plan.
    Train {
        #[arg(long)]
        plan: PathBuf,
        /// Dotted-path override, e.g. `model.skip_mode=addition`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (default: runs/<plan name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel fine-tunes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Start from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Predict every non-overlapping input window of a movie.
    Predict {
        /// Checkpoint; repeat for an ensemble mean.
        #[arg(long = "ckpt", required = true)]
        ckpts: Vec<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        /// Movie whose road pixels form the output mask.
        #[arg(long)]
        mask_from: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean squared error between two u8 movies on the 0-255 scale.
    Score {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Derive a road mask from one or more movies.
    Mask {
        #[arg(long = "from", required = true)]
        from: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a GCMV movie from headerless u8 chunks, concatenated in path order.
    Import {
        #[arg(required = true)]
        chunks: Vec<String>,
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = data::CHANNELS)]
        channels: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print layer census and parameter counts of a checkpoint or a default config.
    Inspect {
        #[arg(long, conflicts_with = "variant")]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum)]
        variant: Option<VariantArg>,
    },
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn expand_all(patterns: &[String]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in patterns {
        let found = plan::expand_glob(p)?;
        if found.is_empty() {
            return Err(usage(format!("no file matches `{p}`")));
        }
        out.extend(found);
    }
    Ok(out)
}

fn read_movie(path: &Path) -> Result<Frames> {
    data::read_gcmv(path).with_context(|| format!("reading {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    city: Option<String>,
    seed: u64,
    days: usize,
    profile: ProfileArg,
    height: usize,
    width: usize,
    frames_per_day: usize,
    out: &Path,
) -> Result<()> {
    if days == 0 {
        return Err(usage("--days must be at least 1"));
    }
    if height < 8 || width < 8 {
        return Err(usage("--height and --width must be at least 8"));
    }
    let profile = match profile {
        ProfileArg::Pre => Profile::Pre,
        ProfileArg::Covid => Profile::Covid,
    };
    let mut cfg = SynthConfig::new(seed, height, width, days, profile);
    cfg.frames_per_day = frames_per_day;
    if let Some(c) = city {
        cfg.city = c;
    }
    eprintln!("{}", serde_json::to_string_pretty(&cfg)?);
    let movie = data::synth_city_with(&cfg)?;
    data::write_gcmv(out, &movie.frames).with_context(|| format!("writing {}", out.display()))?;
    log::info!("wrote {} ({:?})", out.display(), movie.frames.shape());
    Ok(())
}

fn cmd_sample(inputs: &[String], strategy: StrategyArg, stride: usize, frames_per_day: usize) -> Result<()> {
    let strategy = match strategy {
        StrategyArg::Nonoverlap => Strategy::Nonoverlap,
        StrategyArg::Overlap => Strategy::Overlap { stride },
    };
    strategy.validate().map_err(|e| usage(e.to_string()))?;
    let mut movies = Vec::new();
    for p in expand_all(inputs)? {
        let mut m = TrafficMovie::new(p.display().to_string(), 0, read_movie(&p)?);
        m.frames_per_day = frames_per_day;
        movies.push(m);
    }
    let (origins, skipped) = data::sample_origins(&movies, strategy);
    println!("{} pairs", origins.len());
    if !skipped.is_empty() {
        eprintln!("{} segments shorter than {} frames were skipped", skipped.len(), data::WINDOW);
    }
    Ok(())
}

fn cmd_train(
    plan_path: &Path,
    overrides: &[String],
    out: Option<PathBuf>,
    jobs: usize,
    resume: Option<PathBuf>,
) -> Result<()> {
    let plan = plan::load_plan(plan_path, overrides)?;
    let mut resolved = serde_json::to_value(&plan)?;
    resolved["model"] = serde_json::to_value(plan.resolved_model())?;
    eprintln!("{}", serde_json::to_string_pretty(&resolved)?);
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&plan.name));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("plan.resolved.json"), serde_json::to_string_pretty(&resolved)?)?;
    let datasets = plan.load_datasets(&plan::expand_glob).map_err(|e| match e {
        gridcast::Error::Config(m) => usage(m),
        other => other.into(),
    })?;
    for (k, d) in &datasets {
        log::info!("dataset {k}: {} movies, {} windows", d.movies.len(), d.len());
    }
    let start = match resume {
        Some(p) => Some(Checkpoint::<f32>::load(&p).with_context(|| format!("loading {}", p.display()))?),
        None => None,
    };
    let outcome = plan.run::<f32>(&datasets, start, jobs.max(1))?;
    outcome.pretrained.save(out.join("pretrained.gckp"))?;
    for (name, c) in &outcome.finetuned {
        c.save(out.join(format!("finetuned-{name}.gckp")))?;
    }
    fs::write(out.join("report.csv"), outcome.report.to_csv())?;
    let summary = outcome.report.summary();
    fs::write(out.join("summary.txt"), &summary)?;
    eprint!("{summary}");
    log::info!("outputs in {}", out.display());
    Ok(())
}

fn cmd_predict(ckpts: &[PathBuf], input: &Path, mask_from: Option<&Path>, out: &Path) -> Result<()> {
    let models = ckpts
        .iter()
        .map(|p| {
            Checkpoint::<f32>::load(p)
                .map(|c| c.model)
                .with_context(|| format!("loading {}", p.display()))
        })
        .collect::<Result<Vec<DualUNet<f32>>>>()?;
    let cfg = &models[0].config;
    if let Some(other) = models.iter().find(|m| m.config.output_frames != cfg.output_frames || m.config.input_frames != cfg.input_frames) {
        return Err(usage(format!(
            "ensemble members disagree on frame counts: {}->{} vs {}->{}",
            cfg.input_frames, cfg.output_frames, other.config.input_frames, other.config.output_frames
        )));
    }
    let movie = read_movie(input)?;
    let [t, h, w, c] = movie.shape();
    let t_in = cfg.input_frames;
    if t < t_in {
        return Err(usage(format!("input has {t} frames, a window needs {t_in}")));
    }
    if c != cfg.channels {
        return Err(usage(format!("input has {c} channels, model expects {}", cfg.channels)));
    }
    let mask = match mask_from {
        Some(p) => {
            let m = data::derive_mask(&read_movie(p)?, MaskSource::Test)?;
            if (m.height, m.width) != (h, w) {
                return Err(usage(format!("mask source is {}x{}, input is {h}x{w}", m.height, m.width)));
            }
            Some(m)
        }
        None => None,
    };
    let members: Vec<&DualUNet<f32>> = models.iter().collect();
    let mut windows = Vec::new();
    for start in (0..=t - t_in).step_by(t_in) {
        let x: Tensor<f32> = movie.slice_time(start, start + t_in)?.normalize();
        windows.push(ensemble_predict(&members, &x, mask.as_ref())?);
    }
    let parts: Vec<&Frames> = windows.iter().collect();
    let pred = Frames::concat_time(&parts)?;
    data::write_gcmv(out, &pred).with_context(|| format!("writing {}", out.display()))?;
    log::info!(
        "{} windows x {} frames from {} model(s) -> {}",
        windows.len(),
        cfg.output_frames,
        models.len(),
        out.display()
    );
    Ok(())
}

fn cmd_score(pred: &Path, truth: &Path) -> Result<()> {
    let (p, t) = (read_movie(pred)?, read_movie(truth)?);
    if p.shape() != t.shape() {
        return Err(usage(format!("prediction {:?} and truth {:?} differ in shape", p.shape(), t.shape())));
    }
    println!("{:.4}", data::score(&p, &t)?);
    Ok(())
}

fn cmd_mask(from: &[String], out: &Path) -> Result<()> {
    let mut mask: Option<data::Mask> = None;
    for p in expand_all(from)? {
        let m = data::derive_mask(&read_movie(&p)?, MaskSource::Test)?;
        mask = Some(match mask {
            None => m,
            Some(acc) => acc.or(&m).map_err(|e| usage(e.to_string()))?,
        });
    }
    let mask = mask.expect("at least one source");
    data::write_mask(out, &mask).with_context(|| format!("writing {}", out.display()))?;
    log::info!("{} of {} pixels on the road network", mask.count(), mask.height * mask.width);
    Ok(())
}

fn cmd_import(chunks: &[String], height: usize, width: usize, channels: usize, out: &Path) -> Result<()> {
    let bytes = expand_all(chunks)?
        .iter()
        .map(|p| fs::read(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let frames = data::import_raw(&bytes, height, width, channels)?;
    data::write_gcmv(out, &frames).with_context(|| format!("writing {}", out.display()))?;
    log::info!("imported {:?} into {}", frames.shape(), out.display());
    Ok(())
}

fn cmd_inspect(ckpt: Option<PathBuf>, variant: Option<VariantArg>) -> Result<()> {
    let (model, phase) = match (ckpt, variant) {
        (Some(p), _) => {
            let c = Checkpoint::<f32>::load(&p).with_context(|| format!("loading {}", p.display()))?;
            let phase = format!("{:?}", c.phase).to_lowercase();
            (c.model, Some(phase))
        }
        (None, v) => {
            let cfg = match v.unwrap_or(VariantArg::Core) {
                VariantArg::Core => ModelConfig::core(),
                VariantArg::Extended => ModelConfig::extended(),
            };
            (DualUNet::<f32>::build(&cfg)?, None)
        }
    };
    let census = model.census();
    let counts = model.count_parameters();
    let report = serde_json::json!({
        "phase": phase,
        "config": model.config,
        "census": census,
        "convolutional_layers": census.convolutional(),
        "parameters": counts,
        "batch_size_default": DEFAULT_BATCH,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            city,
            seed,
            days,
            profile,
            height,
            width,
            frames_per_day,
            out,
        } => cmd_synth(city, seed, days, profile, height, width, frames_per_day, &out),
        Command::Sample {
            inputs,
            strategy,
            stride,
            frames_per_day,
        } => cmd_sample(&inputs, strategy, stride, frames_per_day),
        Command::Train {
            plan,
            overrides,
            out,
            jobs,
            resume,
        } => cmd_train(&plan, &overrides, out, jobs, resume),
        Command::Predict {
            ckpts,
            input,
            mask_from,
            out,
        } => cmd_predict(&ckpts, &input, mask_from.as_deref(), &out),
        Command::Score { pred, truth } => cmd_score(&pred, &truth),
        Command::Mask { from, out } => cmd_mask(&from, &out),
        Command::Import {
            chunks,
            height,
            width,
            channels,
            out,
        } => cmd_import(&chunks, height, width, channels, &out),
        Command::Inspect { ckpt, variant } => cmd_inspect(ckpt, variant),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<gridcast::Error>() {
            return match e {
                gridcast::Error::Divergence { .. } => 3,
                gridcast::Error::Io(_) | gridcast::Error::Format(_) | gridcast::Error::Checkpoint(_) => 4,
                _ => 2,
            };
        }
        if cause.is::<std::io::Error>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
