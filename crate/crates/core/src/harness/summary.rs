use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::config::{BasisKind, ExperimentConfig, Method, Task};
use super::pipeline::{RunReport, Session};
use crate::error::{Error, Result};
use crate::network::Unet;

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat {
                mean: f64::NAN,
                std: f64::NAN,
            };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Stat { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug)]
pub struct MethodSummary {
    pub name: String,
    /// Runs that were scheduled.
    pub expected: usize,
    /// Runs that finished without failure; statistics cover only these.
    pub completed: usize,
    pub max_psnr: Stat,
    pub conv_psnr: Stat,
    pub gap: Stat,
    pub time_to_conv_s: Stat,
    pub conv_step: Stat,
    /// Not dominated in (time to convergence, conv PSNR) by another method.
    pub pareto: bool,
}

impl MethodSummary {
    pub fn incomplete(&self) -> bool {
        self.completed < self.expected
    }
}

pub struct Summary {
    pub header: String,
    pub methods: Vec<MethodSummary>,
    /// Every scheduled run in schedule order, grouped by method name.
    pub runs: Vec<(String, Result<RunReport>)>,
}

impl Summary {
    /// Groups runs by name in order of first appearance.
    pub fn from_runs(header: String, runs: Vec<(String, Result<RunReport>)>) -> Summary {
        let mut names: Vec<&String> = Vec::new();
        for (n, _) in &runs {
            if !names.contains(&n) {
                names.push(n);
            }
        }
        let mut methods: Vec<MethodSummary> = names
            .iter()
            .map(|&name| {
                let ok: Vec<&RunReport> = runs
                    .iter()
                    .filter(|(n, _)| n == name)
                    .filter_map(|(_, r)| r.as_ref().ok())
                    .filter(|r| r.failure.is_none())
                    .collect();
                let stat = |f: &dyn Fn(&RunReport) -> f64| Stat::of(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
                MethodSummary {
                    name: name.clone(),
                    expected: runs.iter().filter(|(n, _)| n == name).count(),
                    completed: ok.len(),
                    max_psnr: stat(&|r| r.max_psnr),
                    conv_psnr: stat(&|r| r.conv_psnr),
                    gap: stat(&|r| r.gap),
                    time_to_conv_s: stat(&|r| r.time_to_conv_s),
                    conv_step: stat(&|r| r.conv_step as f64),
                    pareto: false,
                }
            })
            .collect();
        let points: Vec<Option<(f64, f64)>> = methods
            .iter()
            .map(|m| (m.completed > 0).then_some((m.time_to_conv_s.mean, m.conv_psnr.mean)))
            .collect();
        for (i, m) in methods.iter_mut().enumerate() {
            m.pareto = points[i].is_some_and(|p| !points.iter().flatten().any(|&q| dominates(q, p)));
        }
        Summary { header, methods, runs }
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.name == name)
    }

    /// Successful reports of one method.
    pub fn reports(&self, name: &str) -> Vec<&RunReport> {
        self.runs
            .iter()
            .filter(|(n, _)| n == name)
            .filter_map(|(_, r)| r.as_ref().ok())
            .filter(|r| r.failure.is_none())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,expected,completed,incomplete,max_psnr_mean,max_psnr_std,conv_psnr_mean,conv_psnr_std,\
             gap_mean,gap_std,time_to_conv_mean,time_to_conv_std,conv_step_mean,conv_step_std,pareto\n",
        );
        for m in &self.methods {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                m.name,
                m.expected,
                m.completed,
                m.incomplete(),
                m.max_psnr.mean,
                m.max_psnr.std,
                m.conv_psnr.mean,
                m.conv_psnr.std,
                m.gap.mean,
                m.gap.std,
                m.time_to_conv_s.mean,
                m.time_to_conv_s.std,
                m.conv_step.mean,
                m.conv_step.std,
                m.pareto
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        for line in self.header.lines() {
            let _ = writeln!(s, "# {line}");
        }
        let _ = writeln!(
            s,
            "{:<24} {:>5} {:>16} {:>16} {:>14} {:>18} {:>7}",
            "method", "runs", "max PSNR", "conv PSNR", "gap", "time to conv (s)", "pareto"
        );
        let pm = |st: Stat| format!("{:.2} ± {:.2}", st.mean, st.std);
        for m in &self.methods {
            let runs = if m.incomplete() {
                format!("{}/{}!", m.completed, m.expected)
            } else {
                m.completed.to_string()
            };
            let _ = writeln!(
                s,
                "{:<24} {:>5} {:>16} {:>16} {:>14} {:>18} {:>7}",
                m.name,
                runs,
                pm(m.max_psnr),
                pm(m.conv_psnr),
                pm(m.gap),
                pm(m.time_to_conv_s),
                if m.pareto { "yes" } else { "no" }
            );
        }
        s
    }

    /// Writes `summary.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (file, text) in [("summary.csv", self.to_csv()), ("summary.txt", self.to_table())] {
            let path = dir.join(file);
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// `a` is no slower and no worse than `b`, and strictly better in one.
fn dominates(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.0 && a.1 >= b.1 && (a.0 < b.0 || a.1 > b.1)
}

/// Problem size, stage settings and their ratio to the full-scale setting
/// (183 detectors, 2000 checkpoints).
pub fn scale_header(cfg: &ExperimentConfig) -> String {
    let d_theta = Unet::new(&cfg.arch, cfg.size, cfg.size).map_or(0, |n| n.num_params());
    let task = match cfg.task {
        Task::Ct => format!(
            "ct, {} angles x {} detectors (x{:.2} detectors)",
            cfg.geometry.n_angles,
            cfg.geometry.n_detectors,
            cfg.geometry.n_detectors as f64 / 183.0
        ),
        Task::Deblur => format!("deblur, kappa {}", cfg.kappa),
        Task::Denoise => "denoise".to_string(),
    };
    format!(
        "{task}, {0}x{0} images, p {1}\n\
         d_theta {2}, pre-training {3} epochs x {4} images, d_pre {5} (x{6:.2}), d_sub {7}, d_lev/d_theta {8}",
        cfg.size,
        cfg.p,
        d_theta,
        cfg.pretrain.epochs,
        cfg.pretrain.images,
        cfg.pretrain.d_pre,
        cfg.pretrain.d_pre as f64 / 2000.0,
        cfg.subspace.d_sub,
        cfg.subspace.d_lev_frac
    )
}

/// Runs `jobs` over at most `workers` threads; results keep job order.
fn run_jobs(session: &Session, jobs: &[ExperimentConfig], workers: usize) -> Vec<Result<RunReport>> {
    let slots: Vec<Mutex<Option<Result<RunReport>>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = jobs.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(session.run(cfg));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock").expect("every job ran"))
        .collect()
}

/// Runs every configuration under every seed and aggregates per
/// configuration name. Runs land in `out/runs/<name>/gt<k>-s<seed>`; a
/// shared cache under `out/cache` is used unless a configuration names its
/// own.
pub fn compare_methods(
    session: &Session,
    configs: &[ExperimentConfig],
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<Summary> {
    if configs.is_empty() || seeds.is_empty() {
        return Err(Error::Config("comparison needs at least one config and one seed".into()));
    }
    let mut jobs = Vec::with_capacity(configs.len() * seeds.len());
    for cfg in configs {
        cfg.validate()?;
        for &seed in seeds {
            let mut c = cfg.with_seed(seed);
            c.output_dir = out
                .join("runs")
                .join(&cfg.name)
                .join(format!("gt{}-s{seed}", cfg.ground_truth.seed));
            if c.pretrain.cache_dir.is_none() {
                c.pretrain.cache_dir = Some(out.join("cache"));
            }
            jobs.push(c);
        }
    }
    let results = run_jobs(session, &jobs, workers);
    let runs = jobs.iter().map(|c| c.name.clone()).zip(results).collect();
    let summary = Summary::from_runs(scale_header(&configs[0]), runs);
    summary.write(out)?;
    Ok(summary)
}

/// Basis variants compared by [`ablate_basis`].
pub const BASIS_VARIANTS: [&str; 4] = ["svd", "svd-incremental", "random", "random-orthonormal"];

/// `cfg` with only the basis construction changed to `variant`.
pub fn basis_variant(cfg: &ExperimentConfig, variant: &str) -> Result<ExperimentConfig> {
    let mut c = cfg.clone();
    c.method = Method::Subspace;
    c.name = variant.to_string();
    let (basis, incremental) = match variant {
        "svd" => (BasisKind::Svd, false),
        "svd-incremental" => (BasisKind::Svd, true),
        "random" => (BasisKind::Random, false),
        "random-orthonormal" => (BasisKind::RandomOrthonormal, false),
        other => return Err(Error::Config(format!("unknown basis variant {other:?}"))),
    };
    c.subspace.basis = basis;
    c.subspace.incremental = incremental;
    Ok(c)
}

/// Identical subspace reconstructions differing only in how the basis is
/// built.
pub fn ablate_basis(
    session: &Session,
    cfgs: &[ExperimentConfig],
    seeds: &[u64],
    out: &Path,
    workers: usize,
) -> Result<Summary> {
    let mut variants = Vec::new();
    for v in BASIS_VARIANTS {
        for cfg in cfgs {
            variants.push(basis_variant(cfg, v)?);
        }
    }
    compare_methods(session, &variants, seeds, out, workers)
}
