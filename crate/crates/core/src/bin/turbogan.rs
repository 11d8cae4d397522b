use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use turbogan::field::ensemble_paths;
use turbogan::generator::generate;
use turbogan::nn::Checkpoint;
use turbogan::oracles::{OracleKind, OracleSpec};
use turbogan::report::{analyze, compare, write_analysis, write_comparison, AnalyzeOptions};
use turbogan::training::{load_generator, train, TrainConfig, FINAL_CHECKPOINT, LOSS_CSV};
use turbogan::{Error, FieldEnsemble, Result};

/// Turbulent-field synthesis, adversarial training and multiscale statistics.
#[derive(Parser)]
#[command(name = "turbogan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Gaussian,
    Fbm,
    Mrw,
}

#[derive(Subcommand)]
enum Command {
    /// Write an oracle ensemble (`<out>.f32` plus `<out>.meta`).
    Synth {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Hurst exponent (fbm, mrw).
        #[arg(long = "H")]
        hurst: Option<f64>,
        /// Intermittency coefficient (mrw).
        #[arg(long)]
        lambda2: Option<f64>,
        /// Correlation length in samples (mrw).
        #[arg(long = "Lc")]
        lc: Option<usize>,
        #[arg(long = "R")]
        realizations: usize,
        #[arg(long = "N")]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator on an ensemble; writes checkpoints and `losses.csv`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// `key=value` configuration; defaults apply to missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Sample a trained generator and keep the middle `N` samples.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "R")]
        realizations: usize,
        #[arg(long = "N")]
        samples: usize,
        /// Samples discarded in total, half at each end.
        #[arg(long, default_value_t = 0)]
        nb: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stat-curve, exponent and PDF tables with plots for one ensemble.
    Analyze {
        #[arg(long = "in")]
        input: PathBuf,
        /// Use the default 24-lag grid (the only grid currently offered).
        #[arg(long, default_value_t = true)]
        grid_default: bool,
        #[arg(long, default_value_t = 17.0)]
        fit_min: f64,
        #[arg(long, default_value_t = 274.0)]
        fit_max: f64,
        /// Integral scale in samples for the l/L axis.
        #[arg(long)]
        integral_scale: Option<f64>,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-lag differences of two ensembles; prints the maxima.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "a")]
        label_a: String,
        #[arg(long, default_value = "b")]
        label_b: String,
        #[arg(long, default_value_t = 17.0)]
        fit_min: f64,
        #[arg(long, default_value_t = 274.0)]
        fit_max: f64,
        /// Also write difference tables and overlay plots here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn oracle_kind(kind: Kind, hurst: Option<f64>, lambda2: Option<f64>, lc: Option<usize>) -> Result<OracleKind> {
    let need_h = || hurst.ok_or_else(|| usage("--H is required for this kind"));
    Ok(match kind {
        Kind::Gaussian => OracleKind::Gaussian,
        Kind::Fbm => OracleKind::Fbm { hurst: need_h()? },
        Kind::Mrw => OracleKind::Mrw {
            hurst: need_h()?,
            lambda2: lambda2.ok_or_else(|| usage("--lambda2 is required for mrw"))?,
            correlation_length: lc.ok_or_else(|| usage("--Lc is required for mrw"))?,
        },
    })
}

fn analyze_options(samples: usize, fit_min: f64, fit_max: f64, integral_scale: Option<f64>) -> Result<AnalyzeOptions> {
    if !(fit_min > 0.0 && fit_min < fit_max) {
        return Err(usage(format!("fit range [{fit_min}, {fit_max}] is empty")));
    }
    let mut o = AnalyzeOptions::default_for(samples)?;
    o.grid.check_fits(samples)?;
    o.fit_range = [fit_min, fit_max];
    o.integral_scale = integral_scale;
    Ok(o)
}

fn stem_label(p: &Path) -> String {
    ensemble_paths(p)
        .0
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ensemble".into())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth {
            kind,
            hurst,
            lambda2,
            lc,
            realizations,
            samples,
            seed,
            out,
        } => {
            let spec = OracleSpec {
                kind: oracle_kind(kind, hurst, lambda2, lc)?,
                realizations,
                samples,
                seed,
            };
            let mut ens = spec.generate()?;
            if let OracleKind::Mrw { correlation_length, .. } = spec.kind {
                ens.meta.integral_scale = Some(correlation_length as f64);
            }
            ens.write(&out)?;
            println!("wrote {realizations} x {samples} ensemble to {}", ensemble_paths(&out).0.display());
        }
        Command::Train {
            data,
            config,
            out_dir,
            resume,
            seed,
        } => {
            let mut c = match &config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                c.seed = s;
            }
            c.validate()?;
            let ens = FieldEnsemble::read(&data)?;
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            let out = train(&ens, c, Some(&out_dir), ck.as_ref())?;
            println!(
                "trained {} steps; wrote {} and {}",
                out.trainer.step(),
                out_dir.join(FINAL_CHECKPOINT).display(),
                out_dir.join(LOSS_CSV).display()
            );
        }
        Command::Generate {
            checkpoint,
            realizations,
            samples,
            nb,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let (g, store) = load_generator(&ck)?;
            let ens = generate(&g, &store, realizations, samples, nb, seed)?;
            ens.write(&out)?;
            println!("wrote {realizations} x {samples} ensemble to {}", ensemble_paths(&out).0.display());
        }
        Command::Analyze {
            input,
            grid_default: _,
            fit_min,
            fit_max,
            integral_scale,
            label,
            out_dir,
        } => {
            let ens = FieldEnsemble::read(&input)?;
            let opts = analyze_options(ens.samples(), fit_min, fit_max, integral_scale)?;
            let a = analyze(&ens, &opts)?;
            let label = label.unwrap_or_else(|| stem_label(&input));
            for p in write_analysis(&a, &label, &out_dir)? {
                println!("{}", p.display());
            }
        }
        Command::Compare {
            a,
            b,
            label_a,
            label_b,
            fit_min,
            fit_max,
            out_dir,
        } => {
            let ea = FieldEnsemble::read(&a)?;
            let eb = FieldEnsemble::read(&b)?;
            if out_dir.is_some() && label_a == label_b {
                return Err(usage("--label-a and --label-b must differ"));
            }
            let n = ea.samples().min(eb.samples());
            let opts = analyze_options(n, fit_min, fit_max, None)?;
            let ra = analyze(&ea, &opts)?;
            let rb = analyze(&eb, &opts)?;
            let c = compare(&ra, &rb)?;
            print!("{}", c.format_curves());
            print!("{}", c.summary());
            if let Some(d) = out_dir {
                write_comparison(&c, (&label_a, &ra), (&label_b, &rb), &d)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
