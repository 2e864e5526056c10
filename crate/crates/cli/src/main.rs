use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use subdip_core::harness::{ablate_basis, compare_methods, BasisKind, ExperimentConfig, RunReport, Session, Summary};
use subdip_core::{Error, Result};

#[derive(Parser)]
#[command(name = "subdip", version, about = "Deep image prior reconstruction in a sparse parameter subspace")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the network on synthetic phantoms and cache the trajectory.
    Pretrain { config: PathBuf },
    /// Extract and cache the sparse subspace from the pre-training trajectory.
    Extract {
        config: PathBuf,
        #[arg(long)]
        d_sub: Option<usize>,
        #[arg(long)]
        d_lev_frac: Option<f64>,
        #[arg(long)]
        incremental: bool,
        #[arg(long, value_enum)]
        basis: Option<Basis>,
    },
    /// Run one reconstruction and write its run directory.
    Reconstruct {
        config: PathBuf,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several configurations over several seeds and summarise them.
    Compare {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        batch: Batch,
    },
    /// Compare basis constructions on one configuration.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        batch: Batch,
    },
}

#[derive(Args)]
struct Batch {
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    /// Ground-truth phantom seeds; each is crossed with every run seed.
    #[arg(long, value_delimiter = ',')]
    phantoms: Vec<u64>,
    #[arg(long, default_value = "runs/compare")]
    out: PathBuf,
    #[arg(long, default_value_t = default_workers())]
    workers: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Basis {
    Svd,
    Random,
    RandomOrthonormal,
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<i32> {
    let session = Session::new();
    match command {
        Command::Pretrain { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let pre = session.pretrained(&cfg)?;
            for (epoch, loss) in pre.epoch_losses.iter().enumerate() {
                println!("epoch {epoch}: loss {loss:.6e}");
            }
            println!(
                "{} checkpoints of {} parameters cached under {}",
                pre.store.len(),
                pre.theta_pre.len(),
                cfg.cache_dir().display()
            );
            Ok(0)
        }
        Command::Extract {
            config,
            d_sub,
            d_lev_frac,
            incremental,
            basis,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            let sub = &mut cfg.subspace;
            sub.d_sub = d_sub.unwrap_or(sub.d_sub);
            sub.d_lev_frac = d_lev_frac.unwrap_or(sub.d_lev_frac);
            sub.incremental |= incremental;
            if let Some(b) = basis {
                sub.basis = match b {
                    Basis::Svd => BasisKind::Svd,
                    Basis::Random => BasisKind::Random,
                    Basis::RandomOrthonormal => BasisKind::RandomOrthonormal,
                };
            }
            cfg.validate()?;
            let model = session.subspace(&cfg)?;
            let s = &model.singular_values;
            println!(
                "d_sub {}, d_lev {} of {}, {} non-zeros",
                model.d_sub(),
                model.d_lev(),
                model.d_theta(),
                model.basis.nnz()
            );
            if let (Some(first), Some(last)) = (s.first(), s.last()) {
                println!("singular values {first:.4e} .. {last:.4e}");
            }
            Ok(0)
        }
        Command::Reconstruct { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                // Keep sharing the cache of the other stages.
                cfg.pretrain.cache_dir = Some(cfg.cache_dir());
                cfg.output_dir = out;
            }
            let report = session.run(&cfg)?;
            print_report(&report);
            println!("run directory: {}", cfg.output_dir.display());
            Ok(report.exit_code())
        }
        Command::Compare { configs, batch } => {
            let cfgs = load_all(&configs, &batch.phantoms)?;
            let summary = compare_methods(&session, &cfgs, &batch.seeds, &batch.out, batch.workers)?;
            finish(&summary, &batch)
        }
        Command::Ablate { config, batch } => {
            let cfgs = load_all(&[config], &batch.phantoms)?;
            let summary = ablate_basis(&session, &cfgs, &batch.seeds, &batch.out, batch.workers)?;
            finish(&summary, &batch)
        }
    }
}

/// Loads every config, replicated once per phantom seed when given.
fn load_all(paths: &[PathBuf], phantoms: &[u64]) -> Result<Vec<ExperimentConfig>> {
    let mut out = Vec::new();
    for p in paths {
        let cfg = ExperimentConfig::load(p)?;
        if phantoms.is_empty() {
            out.push(cfg.clone());
        }
        for &k in phantoms {
            let mut c = cfg.clone();
            c.ground_truth.seed = k;
            out.push(c);
        }
    }
    Ok(out)
}

fn finish(summary: &Summary, batch: &Batch) -> Result<i32> {
    print!("{}", summary.to_table());
    println!("summary written to {}", batch.out.display());
    let failed: Vec<String> = summary
        .runs
        .iter()
        .filter_map(|(name, r)| match r {
            Err(e) => Some(format!("{name}: {e}")),
            Ok(rep) => rep.failure.as_ref().map(|f| format!("{name}: {}", f.message)),
        })
        .collect();
    for f in &failed {
        eprintln!("failed run {f}");
    }
    if failed.is_empty() {
        Ok(0)
    } else {
        Err(Error::Numerical(format!("{} of {} runs failed", failed.len(), summary.runs.len())))
    }
}

fn print_report(r: &RunReport) {
    println!(
        "{}: max PSNR {:.2} dB at step {}, conv PSNR {:.2} dB at step {} (gap {:.2} dB), {} steps, {:.1} s",
        r.name, r.max_psnr, r.max_step, r.conv_psnr, r.conv_step, r.gap, r.steps, r.total_time_s
    );
    if let Some(f) = &r.failure {
        eprintln!("run failed: {}", f.message);
    }
}
