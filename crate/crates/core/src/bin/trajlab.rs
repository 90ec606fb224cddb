//! `trajlab` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or file
//! format error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use trajlab::config::ExperimentConfig;
use trajlab::harness::{self, Study};
use trajlab::loss::LossVariant;
use trajlab::raster::LayerSpec;
use trajlab::scenegen::SceneFamily;
use trajlab::Error;

#[derive(Parser, Debug)]
#[command(name = "trajlab", version, about = "Multi-mode trajectory prediction lab")]
struct Cli {
    /// Seed for data generation and training (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "trajlab-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        count: usize,
        /// Comma-separated scene families (straight, curve, t_junction, four_way).
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<String>>,
        /// File name inside the output directory.
        #[arg(long, default_value = "data.jsonl")]
        file: String,
    },
    /// Write raster layers and drivable masks as PPM images.
    Rasterize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train a model and score its best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Explicit validation dataset instead of the hash split.
        #[arg(long)]
        val: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Score a checkpoint.
    Eval {
        /// Re-run the evaluation recorded in a training manifest.
        #[arg(long, conflicts_with_all = ["checkpoint", "data"])]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Run an ablation study grid.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        /// loss, layers or both.
        #[arg(long, default_value = "both")]
        study: String,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Emit per-sample predictions and loss curves for external plotting.
    PlotData {
        #[arg(long, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        #[arg(long)]
        limit: Option<usize>,
    },
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    #[arg(long)]
    modes: Option<usize>,
    /// mtp or angle_scaled.
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Layer codebook indices, e.g. 1,2,3,4.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    k: Option<Vec<usize>>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) -> trajlab::Result<()> {
        if let Some(m) = self.modes {
            cfg.model.modes = m;
        }
        if let Some(l) = &self.loss {
            cfg.train.loss = LossVariant::parse(l)?;
        }
        if let Some(lr) = self.lr {
            cfg.train.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(l) = &self.layers {
            cfg.layers = LayerSpec::from_codebook(l)?;
        }
        if let Some(k) = &self.k {
            cfg.k_list = k.clone();
        }
        Ok(())
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) | Error::Config(_) => 1,
        Error::Io { .. } | Error::Format { .. } => 2,
        Error::Numerical(_) => 3,
    }
}

fn load_config(cli: &Cli) -> trajlab::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> trajlab::Result<()> {
    let mut cfg = load_config(cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData { count, families, file } => {
            let fams = families
                .as_ref()
                .map(|v| v.iter().map(|s| SceneFamily::parse(s)).collect::<trajlab::Result<Vec<_>>>())
                .transpose()?;
            let summary = harness::gen_data(&cfg, *count, cli.seed.unwrap_or(0), fams.as_deref(), &out.join(file))?;
            print!("{summary}");
        }
        Command::Rasterize { data, ids, limit } => {
            let written = harness::rasterize(&cfg, data, ids, *limit, out)?;
            println!("wrote {} images to {}", written.len(), out.display());
        }
        Command::Train { data, val, overrides } => {
            overrides.apply(&mut cfg)?;
            let run = harness::train_run(&cfg, data, val.as_deref(), out, "train")?;
            println!("{}", run.manifest.report.csv_header());
            println!("{}", run.manifest.report.csv_row());
            println!("manifest: {}", run.manifest_path.display());
        }
        Command::Eval {
            manifest,
            checkpoint,
            data,
            k,
        } => {
            let report = match (manifest, checkpoint, data) {
                (Some(m), _, _) => harness::eval_manifest(m, Some(out))?,
                (None, Some(c), Some(d)) => {
                    let k_list = k.clone().unwrap_or_else(|| cfg.k_list.clone());
                    harness::eval_checkpoint(c, d, &k_list, &cfg.metrics, Some(out))?
                }
                _ => return Err(Error::Argument("eval needs --manifest or --checkpoint with --data".into())),
            };
            println!("{}", report.csv_header());
            println!("{}", report.csv_row());
        }
        Command::Ablate { data, study, overrides } => {
            overrides.apply(&mut cfg)?;
            let studies = match study.as_str() {
                "both" => vec![Study::Loss, Study::Layers],
                s => vec![Study::parse(s)?],
            };
            let mut failed = 0;
            for s in studies {
                let table = harness::ablate(&cfg, s, data, out)?;
                print!("{}", table.to_text());
                println!();
                failed += table.failed();
            }
            if failed > 0 {
                return Err(Error::Numerical(format!("{failed} ablation cell(s) failed")));
            }
        }
        Command::PlotData { manifest, ids, limit } => {
            let written = harness::plot_data(manifest, ids, *limit, out)?;
            println!("wrote {} files to {}", written.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
