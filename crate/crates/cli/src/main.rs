//! `mfid`: generate paired datasets, evaluate fidelity, calibrate the
//! generator and render reports.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use mfid_core::calibration::read_checkpoint;
use mfid_core::pipeline::{
    self, calibrate, checkpoint_hash, evaluate, render_report, write_calibration, write_evaluation, ReportInput,
    ThresholdMode, CHECKPOINT_FILE,
};
use mfid_core::scene::load_dataset;
use mfid_core::sut::{read_weights, train_reference, write_weights, TrainConfig};
use mfid_core::{Error, ReferenceSut, RunConfig, SutId, Variant};

#[derive(Parser)]
#[command(name = "mfid", version, about = "Decisive-feature fidelity toolkit")]
struct Cli {
    /// Run configuration (TOML with [scene], [cf], [fidelity], [calibration], [stats]).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `user` or `percentile:P1,P2`; overrides [fidelity] thresholds.
    #[arg(long, global = true)]
    thresholds: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SutArg {
    Steer,
    Da,
    Ll,
}

impl From<SutArg> for SutId {
    fn from(s: SutArg) -> Self {
        match s {
            SutArg::Steer => SutId::Steer,
            SutArg::Da => SutId::Da,
            SutArg::Ll => SutId::Ll,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Baseline,
    Ovf,
    Dff,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Baseline => Variant::Baseline,
            VariantArg::Ovf => Variant::Ovf,
            VariantArg::Dff => Variant::Dff,
        }
    }
}

#[derive(Args)]
struct SutSel {
    #[arg(long, value_enum, default_value = "steer")]
    sut: SutArg,
    /// Weight file to use instead of the built-in weights.
    #[arg(long)]
    weights: Option<PathBuf>,
}

impl SutSel {
    fn load(&self) -> Result<ReferenceSut> {
        let id = SutId::from(self.sut);
        let sut = match &self.weights {
            Some(p) => read_weights(p)?,
            None => ReferenceSut::builtin(id)?,
        };
        if sut.kind() != id.kind() {
            return Err(Error::config(format!("weights are a {:?} SUT, not {id}", sut.kind())).into());
        }
        Ok(sut)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the paired dataset and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure IV/OV/LF/DFF fidelity for every pair of a manifest.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        sut: SutSel,
        #[arg(long, value_enum, default_value = "baseline")]
        variant: VariantArg,
        /// Calibration checkpoint of the ovf/dff variants.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator calibrator on the calibration split.
    Calibrate {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        sut: SutSel,
        #[arg(long, value_enum, default_value = "dff")]
        variant: VariantArg,
        /// Output directory; an existing checkpoint there is resumed.
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarise evaluation and calibration outputs.
    Report {
        /// Output directories of evaluate or calibrate.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reference SUT weights.
    Sut {
        #[command(subcommand)]
        action: SutAction,
    },
}

#[derive(Subcommand)]
enum SutAction {
    /// Train a reference SUT from scratch.
    Train {
        #[arg(long, value_enum)]
        sut: SutArg,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the built-in weights to a file.
    Export {
        #[arg(long, value_enum)]
        sut: SutArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a weight file and print its identity.
    Import { file: PathBuf },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(t) = &cli.thresholds {
        cfg.fidelity.thresholds = t.parse::<ThresholdMode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_cache(manifest: &Path) -> Result<mfid_core::MapCache> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new(".")).join("cache");
    Ok(pipeline::open_cache(&dir)?)
}

fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::config("--jobs must be at least 1").into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global().context("thread pool")?;
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Generate { out } => {
            let manifest = pipeline::generate(&cfg, out)?;
            println!("wrote {} pairs to {}", cfg.scene.pairs, manifest.display());
        }
        Command::Evaluate { manifest, sut, variant, checkpoint, out } => {
            let sut = sut.load()?;
            let variant = Variant::from(*variant);
            let (m, pairs) = load_dataset(manifest)?;
            let params = match (variant, checkpoint) {
                (Variant::Baseline, None) => None,
                (Variant::Baseline, Some(_)) => bail!(Error::config("the baseline variant takes no checkpoint")),
                (_, None) => bail!(Error::config(format!("--variant {variant} needs --checkpoint"))),
                (_, Some(p)) => Some(read_checkpoint(p, checkpoint_hash(&cfg, variant, &sut))?.params),
            };
            let cache = dataset_cache(manifest)?;
            let eval = evaluate(&pairs, &m.config_hash, &sut, &cfg, variant, params.as_ref(), &cache)?;
            write_evaluation(out, &eval)?;
            for (split, pr) in &eval.aggregate.pass_rates {
                println!("{split}: n={} pass iv={} ov={} dff={} overall={}", pr.n, pr.iv, pr.ov, pr.dff, pr.overall);
            }
        }
        Command::Calibrate { manifest, sut, variant, out } => {
            let sut = sut.load()?;
            let (m, pairs) = load_dataset(manifest)?;
            let cache = dataset_cache(manifest)?;
            let run = calibrate(&pairs, &m.config_hash, &sut, &cfg, Variant::from(*variant), &cache, Some(out))?;
            write_calibration(out, &run)?;
            let h = &run.summary.heldout;
            println!("held-out deltas: iv={} ov={} dff={} (n={})", h.delta_iv, h.delta_ov, h.delta_dff, h.n);
            if let Some(ni) = &run.summary.ni_ov {
                println!("OV non-inferiority: bound {} vs margin {}: {}", ni.ci_low_one_sided, ni.margin, ni.pass);
            }
            info!("checkpoint at {}", out.join(CHECKPOINT_FILE).display());
        }
        Command::Report { inputs, out } => {
            let inputs = inputs.iter().map(|d| ReportInput::load(d)).collect::<mfid_core::Result<Vec<_>>>()?;
            let report = render_report(&inputs)?;
            mfid_core::numerics::io::write_atomic(&out.join("summary.txt"), report.text.as_bytes())?;
            mfid_core::numerics::io::write_atomic(&out.join("cdf.csv"), &report.cdf_csv()?)?;
            print!("{}", report.text);
        }
        Command::Sut { action } => match action {
            SutAction::Train { sut, steps, out } => {
                let id = SutId::from(*sut);
                let mut tc = TrainConfig::default();
                if let Some(s) = steps {
                    tc.steps = *s;
                }
                let (trained, report) = train_reference(id, &tc)?;
                write_weights(out, &trained)?;
                println!(
                    "{id}: loss {} -> {}, held-out metric {}",
                    report.first_loss, report.final_loss, report.heldout_metric
                );
            }
            SutAction::Export { sut, out } => {
                write_weights(out, &ReferenceSut::builtin(SutId::from(*sut))?)?;
            }
            SutAction::Import { file } => {
                let sut = read_weights(file)?;
                println!("{} {:?} {:016x}", sut.name(), sut.kind(), sut.checksum());
            }
        },
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain().find_map(|e| e.downcast_ref::<Error>()).map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
