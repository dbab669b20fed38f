use amecam::cam::MapSource;
use amecam::data::Split;
use amecam::pipeline::{self, EvalArgs, Sweep, TrainArgs};
use amecam::Error;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::str::FromStr;

/// `D,H,W` volume dimensions.
#[derive(Debug, Clone, Copy)]
struct Dims(usize, usize, usize);

impl FromStr for Dims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::InvalidConfig(format!("bad dims {s:?} (want D,H,W)")))?;
        match parts[..] {
            [d, h, w] => Ok(Dims(d, h, w)),
            _ => Err(Error::InvalidConfig(format!("bad dims {s:?} (want D,H,W)"))),
        }
    }
}

/// `train,val,test` split fractions.
#[derive(Debug, Clone, Copy)]
struct Ratios(f64, f64, f64);

impl FromStr for Ratios {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| Error::InvalidConfig(format!("bad ratios {s:?} (want A,B,C)")))?;
        match parts[..] {
            [a, b, c] => Ok(Ratios(a, b, c)),
            _ => Err(Error::InvalidConfig(format!("bad ratios {s:?} (want A,B,C)"))),
        }
    }
}

#[derive(Parser)]
#[command(name = "amecam", version, about = "Weakly supervised tumor segmentation from classifier activation maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct TrainCli {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Where to write the trained checkpoint.
    #[arg(long)]
    ckpt_out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl From<TrainCli> for TrainArgs {
    fn from(c: TrainCli) -> Self {
        TrainArgs { config: c.config, ckpt_out: c.ckpt_out, resume: c.resume }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic volume dataset with ground-truth masks.
    Synth {
        #[arg(long)]
        cases: usize,
        /// Volume shape as depth,height,width.
        #[arg(long, default_value = "20,64,64")]
        dims: Dims,
        /// Fraction of cases containing a tumor.
        #[arg(long, default_value_t = 0.6)]
        tumor_frac: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split a volume directory into train/val/test by case.
    Manifest {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "0.8,0.1,0.1")]
        ratios: Ratios,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Contrastive pretraining of the shared backbone.
    Pretrain(TrainCli),
    /// Train the multi-exit classifier.
    TrainClassifier(TrainCli),
    /// Train the attention aggregator on a frozen classifier.
    TrainAggregator(TrainCli),
    /// Export activation maps for a split.
    Cam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// One of exit1..exit4, avg, attentive, gradcam.
        #[arg(long)]
        mode: MapSource,
        #[arg(long)]
        out: PathBuf,
        /// Override the volume directory recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the manifest recorded in the checkpoint.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score exported maps against ground-truth masks.
    Eval {
        #[arg(long)]
        cams: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Volume directory; defaults to the manifest's directory.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Also score thresholds A:B:STEP and report the best.
        #[arg(long)]
        threshold_sweep: Option<Sweep>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        csv: PathBuf,
    },
    /// Render PNG overlays of maps (and mask contours) on the slices.
    Overlay {
        #[arg(long)]
        cams: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> amecam::Result<()> {
    match cli.command {
        Command::Synth { cases, dims, tumor_frac, seed, out } => {
            pipeline::cmd_synth(cases, (dims.0, dims.1, dims.2), tumor_frac, seed, &out)
        }
        Command::Manifest { data, ratios, seed, out } => {
            pipeline::cmd_manifest(&data, (ratios.0, ratios.1, ratios.2), seed, &out)
        }
        Command::Pretrain(args) => pipeline::cmd_pretrain(&args.into()),
        Command::TrainClassifier(args) => pipeline::cmd_train_classifier(&args.into()),
        Command::TrainAggregator(args) => pipeline::cmd_train_aggregator(&args.into()),
        Command::Cam { ckpt, split, mode, out, data, manifest } => {
            pipeline::cmd_cam(&ckpt, split, mode, &out, data.as_deref(), manifest.as_deref())
        }
        Command::Eval { cams, manifest, data, threshold, threshold_sweep, report, csv } => {
            pipeline::cmd_eval(&EvalArgs {
                cams,
                manifest,
                data,
                threshold,
                sweep: threshold_sweep,
                report,
                csv,
            })
            .map(|_| ())
        }
        Command::Overlay { cams, images, out } => pipeline::cmd_overlay(&cams, &images, &out),
    }
}

fn main() {
    env_logger::init();
    if let Err(err) = run(Cli::parse()) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
