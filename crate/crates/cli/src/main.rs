use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use privad::{Error, Result};
use privad_cli::{Method, Pipeline, RunConfig};

/// Privacy-preserving weakly supervised video anomaly detection.
///
/// Each subcommand is one pipeline stage. Stages read their inputs from the
/// run directory (`output_dir` in the config) and refuse to run when an
/// upstream output is missing or stale.
#[derive(Parser)]
#[command(name = "privad", version)]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(short, long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    /// Use a built-in configuration preset instead of a file (default, toy, tiny).
    #[arg(long, global = true)]
    preset: Option<String>,

    /// Override `output_dir` from the configuration.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// More log output; repeat for debug detail.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct FeatureSource {
    /// Features of raw frames.
    #[arg(long)]
    raw: bool,
    /// Features of frames passed through the trained anonymizer.
    #[arg(long)]
    anon: bool,
    /// Features of frames under a baseline transform
    /// (downsample2, downsample4, blacken, blur, blacken_all).
    #[arg(long, value_name = "NAME")]
    baseline: Option<String>,
}

impl FeatureSource {
    fn method(&self) -> Result<Method> {
        match (&self.baseline, self.raw, self.anon) {
            (Some(name), _, _) => match Method::parse(name)? {
                Method::Baseline(t) => Ok(Method::Baseline(t)),
                m => Err(Error::Config(format!("`{m}` is not a baseline; use --{m}"))),
            },
            (None, true, _) => Ok(Method::Raw),
            _ => Ok(Method::Anon),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Print a built-in configuration preset.
    Config {
        /// Preset name.
        #[arg(default_value = "default")]
        name: String,
    },
    /// Generate (or validate) every dataset split.
    GenData,
    /// Pretrain the anonymizer towards the identity.
    PretrainAnon,
    /// Initialize the encoders and run the anonymization minimax.
    TrainAnon,
    /// Extract per-segment features of the anomaly splits.
    ExtractFeatures(FeatureSource),
    /// Train the anomaly head on one feature set.
    TrainAd {
        /// Feature set: raw, anon or a baseline name.
        #[arg(long, default_value = "anon")]
        features: String,
    },
    /// Frame-level AUC and AP of a trained anomaly head.
    EvalAd {
        /// Feature set: raw, anon or a baseline name.
        #[arg(long, default_value = "anon")]
        features: String,
    },
    /// Train and score a privacy attribute attack on transformed images.
    EvalPrivacy {
        /// raw, anon or a baseline name.
        #[arg(long, default_value = "anon")]
        transform: String,
    },
    /// Attribute probes on utility features of raw and anonymized images.
    ProbeFeatures,
    /// Privacy/utility trade-off table over every evaluated method.
    Report,
    /// Per-frame anomaly score trace of one video (CSV and SVG).
    PlotScores {
        /// Id of an anomaly video.
        video_id: String,
        /// Feature set: raw, anon or a baseline name.
        #[arg(long, default_value = "anon")]
        features: String,
    },
    /// Every stage in order.
    Run {
        /// Methods to evaluate, comma separated; raw is always included.
        #[arg(long, value_delimiter = ',', default_value = "raw,anon,downsample2,downsample4,blacken,blur,blacken_all")]
        methods: Vec<String>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, &cli.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => return Err(Error::Config("no configuration given; pass --config <FILE> or --preset <NAME>".into())),
    };
    if let Some(out) = &cli.output {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn print_metrics(records: &[privad::evaluation::MetricRecord]) {
    for r in records {
        println!("{}\t{:.6}\t{}", r.metric, r.value, r.dataset);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::Config { name } = &cli.command {
        print!("{}", RunConfig::preset_text(name)?);
        return Ok(());
    }
    let p = Pipeline::new(load_config(&cli)?);
    match &cli.command {
        Command::Config { .. } => unreachable!(),
        Command::GenData => p.gen_data()?,
        Command::PretrainAnon => print_metrics(&p.pretrain_anon()?),
        Command::TrainAnon => print_metrics(&p.train_anon()?),
        Command::ExtractFeatures(src) => p.extract_features(src.method()?)?,
        Command::TrainAd { features } => print_metrics(&p.train_ad(Method::parse(features)?)?),
        Command::EvalAd { features } => print_metrics(&p.eval_ad(Method::parse(features)?)?),
        Command::EvalPrivacy { transform } => print_metrics(&p.eval_privacy(Method::parse(transform)?)?),
        Command::ProbeFeatures => print_metrics(&p.probe_features()?),
        Command::Report => print!("{}", p.report()?.to_csv()),
        Command::PlotScores { video_id, features } => {
            let (csv, svg) = p.plot_scores(video_id, Method::parse(features)?)?;
            println!("{}\n{}", csv.display(), svg.display());
        }
        Command::Run { methods } => {
            let methods = methods.iter().map(|m| Method::parse(m)).collect::<Result<Vec<_>>>()?;
            print!("{}", p.run_all(&methods)?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
