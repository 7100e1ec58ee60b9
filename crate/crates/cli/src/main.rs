use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use flexdti::io;
use flexdti::pipeline::{self, OutputLock, RunConfig};
use flexdti::Error;

#[derive(Parser)]
#[command(name = "flexdti", version, about = "Diffusion tensor reconstruction experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a uniform gradient scheme and write bvals/bvecs.
    Scheme {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Single b-value in s/mm².
        #[arg(long, default_value = "1000")]
        b: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate phantoms and the test acquisition for a run config.
    Phantom(RunArgs),
    /// Fit tensors with log-linear least squares.
    Fit {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        bvals: PathBuf,
        #[arg(long)]
        bvecs: PathBuf,
        /// Comma-separated direction indices; all directions when omitted.
        #[arg(long)]
        subset: Option<String>,
        /// Ground-truth tensor container; enables metrics.csv.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Slice to render.
        #[arg(long, default_value_t = 0)]
        slice: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the network on the phantom dataset of a run config.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, hide = true)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint against LLS on unseen test-pool directions.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Defaults to checkpoint.fdti in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated direction counts; defaults to the config's list.
        #[arg(long)]
        dirs: Option<String>,
        #[arg(long)]
        subset_seed: Option<u64>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> flexdti::Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        Ok(cfg)
    }
}

fn parse_list(s: &str, what: &str) -> flexdti::Result<Vec<usize>> {
    s.split(',').map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad {what} entry {t:?}")))).collect()
}

fn run(cli: Cli) -> flexdti::Result<()> {
    match cli.cmd {
        Cmd::Scheme { n, seed, b, out } => {
            let bs = b.split(',').map(|t| t.trim().parse::<f64>()).collect::<Result<Vec<_>, _>>();
            let b = match bs.as_deref() {
                Ok([b]) => *b,
                Ok(_) => return Err(Error::Config("multi-shell schemes are not supported; pass one b-value".into())),
                Err(e) => return Err(Error::Config(format!("bad --b: {e}"))),
            };
            let _lock = OutputLock::acquire(&out)?;
            let s = pipeline::make_scheme(n, 1, b, seed)?;
            io::write_gradient_table(&s, &out.join("bvals"), &out.join("bvecs"))?;
            println!("directions {n}");
            println!("condition_number {:.6}", s.condition_number()?);
            println!("min_line_angle_deg {:.4}", s.min_line_angle_deg());
        }
        Cmd::Phantom(args) => {
            let cfg = args.load()?;
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let ds = pipeline::phantom_command(&cfg)?;
            eprintln!(
                "wrote {} train, {} val, {} test slices to {}",
                ds.train.nz,
                ds.val.nz,
                ds.test.nz,
                cfg.output_dir.display()
            );
        }
        Cmd::Fit { volume, bvals, bvecs, subset, truth, slice, out } => {
            let scheme = io::read_gradient_table(&bvals, &bvecs)?;
            let v = io::read_container(&volume)?.to_volume(&scheme)?;
            let subset = subset.map(|s| parse_list(&s, "--subset")).transpose()?;
            let truth = truth.map(|p| io::read_container(&p)?.to_field()).transpose()?;
            let _lock = OutputLock::acquire(&out)?;
            let s = pipeline::fit_command(&v, subset.as_deref(), truth.as_ref(), slice, &out)?;
            eprintln!("fit {} voxels, {} clamped, {} failed", v.nx * v.ny * v.nz, s.clamped, s.failed);
            for r in &s.rows {
                println!("{} nrmse {:.3e}", r.map, r.report.nrmse);
            }
        }
        Cmd::Train { run, resume } => {
            if resume.is_some() {
                return Err(Error::Config("resuming training is not supported".into()));
            }
            let cfg = run.load()?;
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let t0 = Instant::now();
            let ck = pipeline::train_command(&cfg, |log| {
                let val = log.val_loss.map_or(String::new(), |v| format!(" val {v:.6}"));
                eprintln!(
                    "epoch {}/{} lr {:e} train {:.6}{val} ({:.0?})",
                    log.epoch,
                    cfg.net.epochs,
                    log.lr,
                    log.train_loss,
                    t0.elapsed()
                );
            })?;
            eprintln!("saved checkpoint after {} epochs", ck.history.len());
        }
        Cmd::Eval { run, checkpoint, dirs, subset_seed } => {
            let cfg = run.load()?;
            let dirs = match dirs {
                Some(s) => parse_list(&s, "--dirs")?,
                None => cfg.eval.dirs.clone(),
            };
            let ck = checkpoint.unwrap_or_else(|| cfg.output_dir.join("checkpoint.fdti"));
            let _lock = OutputLock::acquire(&cfg.output_dir)?;
            let eval = pipeline::eval_command(&cfg, &ck, &dirs, subset_seed.unwrap_or(cfg.eval.subset_seed))?;
            eprintln!("wrote {} rows to {}", eval.rows.len(), cfg.output_dir.join("metrics.csv").display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
