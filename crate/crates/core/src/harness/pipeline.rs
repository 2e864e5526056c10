use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{BasisKind, ExperimentConfig, Method, OptimizerKind, StopKind, Task};
use super::phantoms::PhantomSpec;
use crate::error::{Error, Result};
use crate::io;
use crate::network::{ParamVector, Unet};
use crate::objective::{psnr, DipProblem, FullObjective, PsnrTracker, SubspaceObjective};
use crate::operators::{
    add_noise, assemble_parallel_beam, gaussian_blur_operator, AssemblyOptions, Image, LinearOperator, Measurement,
    NoiseModel,
};
use crate::optim::{
    adam_run, lbfgs_run, ngd_run, Control, Objective, RunResult, StepInfo, StopState, VarianceStopState,
};
use crate::subspace::{
    batch_svd, build_model, incremental_svd, init_coefficients, pretrain, random_sparse_basis, PretrainConfig,
    SubspaceModel, TrainingPair, TrajectoryStore,
};

pub fn build_operator(cfg: &ExperimentConfig) -> Result<LinearOperator> {
    let opts = AssemblyOptions::default();
    match cfg.task {
        Task::Ct => assemble_parallel_beam(&cfg.geometry, cfg.size, cfg.size, &opts),
        Task::Deblur => gaussian_blur_operator(cfg.kappa, cfg.size, cfg.size, &opts),
        Task::Denoise => Ok(LinearOperator::identity(cfg.size, cfg.size)),
    }
}

/// Noisy data `y = A x + ε` and the network input `A†y`.
pub fn simulate(op: &LinearOperator, x: &Image, p: f64, noise_seed: u64) -> Result<(Measurement, Image)> {
    let y = add_noise(&op.apply(x)?, &NoiseModel { p, seed: noise_seed });
    let input = op.pseudo_inverse(&y)?;
    Ok((y, input))
}

/// Everything a single reconstruction needs besides the network.
pub struct Problem {
    pub op: LinearOperator,
    pub ground_truth: Image,
    pub y: Measurement,
    pub input: Image,
}

pub fn ground_truth(cfg: &ExperimentConfig) -> Result<Image> {
    let gt = match &cfg.ground_truth.path {
        Some(p) => io::read_pgm(p)?,
        None => cfg
            .ground_truth
            .spec(cfg.size)
            .stream()?
            .next()
            .expect("phantom streams are endless"),
    };
    if gt.height != cfg.size || gt.width != cfg.size {
        return Err(Error::Config(format!(
            "ground truth is {}x{} but size is {}",
            gt.height, gt.width, cfg.size
        )));
    }
    Ok(gt)
}

pub fn build_problem(cfg: &ExperimentConfig) -> Result<Problem> {
    let op = build_operator(cfg)?;
    let gt = ground_truth(cfg)?;
    let (y, input) = simulate(&op, &gt, cfg.p, cfg.seeds.noise)?;
    Ok(Problem {
        op,
        ground_truth: gt,
        y,
        input,
    })
}

/// splitmix64 finaliser, used to derive independent per-item seeds.
fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x6a09_e667_f3bc_c909);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable 64-bit FNV-1a, used to name cache directories.
fn fnv1a(text: &str) -> u64 {
    text.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Supervised pairs `(A†y_k, x_k)` from the pre-training phantom family.
pub fn training_pairs(cfg: &ExperimentConfig, op: &LinearOperator) -> Result<Vec<TrainingPair>> {
    let pre = &cfg.pretrain;
    PhantomSpec::new(pre.phantom, cfg.size, pre.seed)
        .stream()?
        .take(pre.images)
        .enumerate()
        .map(|(k, x)| {
            let (_, input) = simulate(op, &x, cfg.p, mix(pre.seed, k as u64))?;
            Ok(TrainingPair { input, target: x })
        })
        .collect()
}

/// Pre-trained parameters and their training trajectory.
pub struct Pretrained {
    pub theta_pre: ParamVector,
    pub store: TrajectoryStore,
    pub epoch_losses: Vec<f64>,
}

#[derive(Serialize)]
struct PretrainKey<'a> {
    task: Task,
    size: usize,
    geometry: &'a crate::operators::ParallelBeamGeometry,
    kappa: f64,
    p: f64,
    arch: &'a crate::network::ArchConfig,
    epochs: usize,
    images: usize,
    d_pre: usize,
    lr: f64,
    phantom: super::phantoms::PhantomKind,
    seed: u64,
}

fn pretrain_key(cfg: &ExperimentConfig) -> String {
    let pre = &cfg.pretrain;
    toml::to_string(&PretrainKey {
        task: cfg.task,
        size: cfg.size,
        geometry: &cfg.geometry,
        kappa: cfg.kappa,
        p: cfg.p,
        arch: &cfg.arch,
        epochs: pre.epochs,
        images: pre.images,
        d_pre: pre.d_pre,
        lr: pre.lr,
        phantom: pre.phantom,
        seed: pre.seed,
    })
    .expect("key serialises")
}

fn subspace_key(cfg: &ExperimentConfig) -> String {
    let mut key = pretrain_key(cfg);
    key.push_str("\n[subspace]\n");
    key.push_str(&toml::to_string(&cfg.subspace).expect("key serialises"));
    key
}

fn cache_path(cfg: &ExperimentConfig, stage: &str, key: &str) -> PathBuf {
    cfg.cache_dir().join(format!("{stage}-{:016x}", fnv1a(key)))
}

/// A cache directory is complete once its `key.toml` matches.
fn cache_hit(dir: &Path, key: &str) -> bool {
    fs::read_to_string(dir.join("key.toml")).is_ok_and(|k| k == key)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Shares pre-training runs and subspaces between reconstructions, in
/// memory and through the on-disk cache.
#[derive(Default)]
pub struct Session {
    pretrained: Mutex<HashMap<String, Arc<Pretrained>>>,
    models: Mutex<HashMap<String, Arc<SubspaceModel>>>,
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    /// Pre-trains (or loads) the network described by `cfg`.
    pub fn pretrained(&self, cfg: &ExperimentConfig) -> Result<Arc<Pretrained>> {
        let key = pretrain_key(cfg);
        let mut memo = self.pretrained.lock().expect("cache lock");
        if let Some(p) = memo.get(&key) {
            return Ok(p.clone());
        }
        let dir = cache_path(cfg, "pretrain", &key);
        let p = if cache_hit(&dir, &key) {
            load_pretrained(&dir)?
        } else {
            run_pretrain(cfg, &dir, &key)?
        };
        let p = Arc::new(p);
        memo.insert(key, p.clone());
        Ok(p)
    }

    /// Extracts (or loads) the subspace described by `cfg`.
    pub fn subspace(&self, cfg: &ExperimentConfig) -> Result<Arc<SubspaceModel>> {
        let key = subspace_key(cfg);
        if let Some(m) = self.models.lock().expect("cache lock").get(&key) {
            return Ok(m.clone());
        }
        let pre = self.pretrained(cfg)?;
        let mut memo = self.models.lock().expect("cache lock");
        if let Some(m) = memo.get(&key) {
            return Ok(m.clone());
        }
        let dir = cache_path(cfg, "subspace", &key);
        let model = if cache_hit(&dir, &key) {
            SubspaceModel::load(&dir)?
        } else {
            let model = extract_subspace(cfg, &pre)?;
            model.save(&dir)?;
            write_file(&dir.join("key.toml"), &key)?;
            model
        };
        let model = Arc::new(model);
        memo.insert(key, model.clone());
        Ok(model)
    }

    /// Runs one reconstruction and writes its run directory. Failures of
    /// the optimiser are reported in [`RunReport::failure`]; failures before
    /// it starts are returned as errors.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunReport> {
        cfg.validate()?;
        let problem = build_problem(cfg)?;
        let net = Unet::new(&cfg.arch, cfg.size, cfg.size)?;
        let dip = DipProblem::new(&net, &problem.op, &problem.y.data, &problem.input, cfg.objective_config())?;
        let steps = cfg.max_steps;
        let report = match cfg.method {
            Method::Dip | Method::Edip => {
                let theta0 = match cfg.method {
                    Method::Dip => net.init_params(cfg.seeds.init).data,
                    _ => self.pretrained(cfg)?.theta_pre.data.clone(),
                };
                let obj = FullObjective { problem: dip };
                let mut rec = Recorder::new(&problem.ground_truth, cfg);
                let out = first_order(cfg, &obj, &theta0, steps, &mut rec);
                rec.finish(cfg, &problem, out)
            }
            Method::Subspace => {
                let model = self.subspace(cfg)?;
                let obj = SubspaceObjective::new(dip, &model)?;
                let c0 = init_coefficients(model.d_sub(), cfg.seeds.init)?;
                let mut rec = Recorder::new(&problem.ground_truth, cfg);
                let out = match cfg.optimizer {
                    OptimizerKind::Ngd => {
                        ngd_run(&obj, &c0, cfg.ngd_config(), steps, |i| rec.observe(i)).map(|(r, _)| r)
                    }
                    _ => first_order(cfg, &obj, &c0, steps, &mut rec),
                };
                rec.finish(cfg, &problem, out)
            }
        };
        report.write(cfg, &cfg.output_dir)?;
        Ok(report)
    }
}

fn first_order<O: Objective>(
    cfg: &ExperimentConfig,
    obj: &O,
    x0: &[f64],
    steps: usize,
    rec: &mut Recorder<'_>,
) -> Result<RunResult> {
    match cfg.optimizer {
        OptimizerKind::Adam => adam_run(obj, x0, cfg.adam_config(), steps, |i| rec.observe(i)),
        OptimizerKind::Lbfgs => lbfgs_run(obj, x0, cfg.lbfgs, steps, |i| rec.observe(i)).map(|(r, _)| r),
        OptimizerKind::Ngd => Err(Error::Config(
            "natural gradient descent needs the subspace method".into(),
        )),
    }
}

/// Convenience wrapper running one configuration in a fresh [`Session`].
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    Session::new().run(cfg)
}

fn run_pretrain(cfg: &ExperimentConfig, dir: &Path, key: &str) -> Result<Pretrained> {
    let op = build_operator(cfg)?;
    let net = Unet::new(&cfg.arch, cfg.size, cfg.size)?;
    let data = training_pairs(cfg, &op)?;
    create_dir(dir)?;
    let _ = fs::remove_file(dir.join("key.toml"));
    let store = TrajectoryStore::on_disk(&dir.join("trajectory.bin"))?;
    let pcfg = PretrainConfig {
        epochs: cfg.pretrain.epochs,
        lr: cfg.pretrain.lr,
        d_pre: cfg.pretrain.d_pre,
        seed: cfg.pretrain.seed,
    };
    let out = pretrain(&net, &data, &pcfg, net.init_params(cfg.pretrain.seed), store)?;
    io::write_checkpoint(&dir.join("theta_pre.sdip"), &out.theta_pre)?;
    let steps: String = out.store.steps().iter().map(|s| format!("{s}\n")).collect();
    write_file(&dir.join("steps.txt"), &steps)?;
    let losses: String = out.epoch_losses.iter().map(|l| format!("{l}\n")).collect();
    write_file(&dir.join("epoch_losses.txt"), &losses)?;
    write_file(&dir.join("key.toml"), key)?;
    Ok(Pretrained {
        theta_pre: out.theta_pre,
        store: out.store,
        epoch_losses: out.epoch_losses,
    })
}

fn read_column<T: std::str::FromStr>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| l.trim().parse().map_err(|_| Error::format(path, format!("bad value {l:?}"))))
        .collect()
}

fn load_pretrained(dir: &Path) -> Result<Pretrained> {
    let theta_pre = io::read_checkpoint(&dir.join("theta_pre.sdip"))?;
    let steps = read_column(&dir.join("steps.txt"))?;
    let store = TrajectoryStore::open(&dir.join("trajectory.bin"), theta_pre.layout.clone(), steps)?;
    Ok(Pretrained {
        epoch_losses: read_column(&dir.join("epoch_losses.txt"))?,
        theta_pre,
        store,
    })
}

/// Builds the configured basis from a pre-training run.
pub fn extract_subspace(cfg: &ExperimentConfig, pre: &Pretrained) -> Result<SubspaceModel> {
    let sub = &cfg.subspace;
    let d_theta = pre.theta_pre.len();
    let d_lev = cfg.d_lev(d_theta);
    match sub.basis {
        BasisKind::Svd => {
            let svd = if sub.incremental {
                incremental_svd(pre.store.iter(), sub.d_sub, sub.buffer)?.0
            } else {
                batch_svd(&pre.store, sub.d_sub)?
            };
            if svd.rank_deficient {
                return Err(Error::Numerical(format!(
                    "the trajectory spans only {} of the requested {} directions",
                    svd.s.len(),
                    sub.d_sub
                )));
            }
            build_model(pre.theta_pre.clone(), &svd, d_lev)
        }
        BasisKind::Random | BasisKind::RandomOrthonormal => {
            let orth = sub.basis == BasisKind::RandomOrthonormal;
            let basis = random_sparse_basis(d_theta, sub.d_sub, d_lev, orth, sub.seed)?;
            SubspaceModel::new(pre.theta_pre.clone(), basis, vec![1.0; sub.d_sub])
        }
    }
}

/// One logged iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub raw_psnr: f64,
    /// PSNR of the lowest-loss iterate so far.
    pub minloss_psnr: f64,
    /// Value fed to the stopping rule at this step, if any.
    pub stop_metric: Option<f64>,
    /// Seconds since the optimiser started.
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub message: String,
    pub exit_code: i32,
}

/// Outcome of one reconstruction. `max_*` are oracle values over the whole
/// run; `conv_*` are taken at the stopping index.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub name: String,
    pub method: Method,
    pub optimizer: OptimizerKind,
    pub stop: StopKind,
    /// Last logged step.
    pub steps: usize,
    pub max_psnr: f64,
    pub max_psnr_raw: f64,
    pub max_step: usize,
    pub conv_step: usize,
    pub conv_psnr: f64,
    pub conv_psnr_raw: f64,
    /// `max_psnr - conv_psnr`, both in the min-loss convention.
    pub gap: f64,
    pub time_to_conv_s: f64,
    pub total_time_s: f64,
    /// Whether the stopping rule ended the run.
    pub stopped: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub failure: Option<RunFailure>,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
    #[serde(skip)]
    pub ground_truth: Image,
    #[serde(skip)]
    pub input: Image,
    #[serde(skip)]
    pub conv_image: Option<Image>,
    #[serde(skip)]
    pub best_image: Option<Image>,
    #[serde(skip)]
    pub final_image: Option<Image>,
}

impl RunReport {
    /// First step whose min-loss PSNR is within `db` of the conv PSNR.
    pub fn first_step_within(&self, db: f64) -> Option<usize> {
        self.trace
            .iter()
            .find(|r| r.minloss_psnr >= self.conv_psnr - db)
            .map(|r| r.step)
    }

    pub fn exit_code(&self) -> i32 {
        self.failure.as_ref().map_or(0, |f| f.exit_code)
    }

    /// `step,loss,raw_psnr,minloss_psnr,stop_metric` with round-trip
    /// formatting; deterministic for a fixed configuration.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("step,loss,raw_psnr,minloss_psnr,stop_metric\n");
        for r in &self.trace {
            let metric = r.stop_metric.map_or(String::new(), |m| m.to_string());
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.loss, r.raw_psnr, r.minloss_psnr, metric);
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("step,wall_clock_s\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{}", r.step, r.wall_clock_s);
        }
        s
    }

    /// Writes the config snapshot, traces, report and images into `dir`.
    pub fn write(&self, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_file(&dir.join("config.toml"), &cfg.to_toml())?;
        write_file(&dir.join("trace.csv"), &self.trace_csv())?;
        write_file(&dir.join("timing.csv"), &self.timing_csv())?;
        let report = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        write_file(&dir.join("report.toml"), &report)?;
        let images = [
            ("ground_truth", Some(&self.ground_truth)),
            ("input", Some(&self.input)),
            ("conv", self.conv_image.as_ref()),
            ("best", self.best_image.as_ref()),
            ("final", self.final_image.as_ref()),
        ];
        for (name, img) in images {
            if let Some(img) = img {
                io::write_image(&dir.join(format!("{name}.sdip")), img)?;
                io::write_pgm16(&dir.join(format!("{name}.pgm")), img)?;
            }
        }
        Ok(())
    }
}

enum StopRule {
    Loss(StopState),
    Variance { state: StopState, window: VarianceStopState },
    Never,
}

/// Observer that logs PSNR, applies the stopping rule and keeps the
/// images the report needs.
struct Recorder<'a> {
    gt: &'a Image,
    start: Instant,
    tracker: PsnrTracker,
    rows: Vec<TraceRow>,
    rule: StopRule,
    conv: Option<(usize, Image)>,
    best: Option<(usize, f64, Image)>,
    last: Option<Image>,
    stopped: bool,
    error: Option<Error>,
}

impl<'a> Recorder<'a> {
    fn new(gt: &'a Image, cfg: &ExperimentConfig) -> Self {
        let stop = cfg.stop_config();
        let rule = match stop.kind {
            StopKind::Loss => StopRule::Loss(stop.state()),
            StopKind::Variance => StopRule::Variance {
                state: stop.state(),
                window: VarianceStopState::new(stop.window),
            },
            StopKind::None => StopRule::Never,
        };
        Recorder {
            gt,
            start: Instant::now(),
            tracker: PsnrTracker::new(),
            rows: Vec::new(),
            rule,
            conv: None,
            best: None,
            last: None,
            stopped: false,
            error: None,
        }
    }

    fn observe(&mut self, info: &StepInfo<'_>) -> Control {
        match self.try_observe(info) {
            Ok(c) => c,
            Err(e) => {
                self.error = Some(e);
                Control::Stop
            }
        }
    }

    fn try_observe(&mut self, info: &StepInfo<'_>) -> Result<Control> {
        let image = info
            .image
            .ok_or_else(|| Error::Numerical("objective reported no reconstruction".into()))?;
        let step = self.rows.len();
        let raw = psnr(image, self.gt)?;
        let minloss = self.tracker.track(info.loss, raw);
        let (metric, improved, cont) = match &mut self.rule {
            StopRule::Loss(st) => {
                let before = st.best_index();
                let cont = st.observe(info.loss);
                (Some(info.loss), st.best_index() != before, cont)
            }
            StopRule::Variance { state, window } => match window.push(image)? {
                Some(m) => {
                    let before = state.best_index();
                    let cont = state.observe(m);
                    (Some(m), state.best_index() != before, cont)
                }
                None => (None, false, true),
            },
            StopRule::Never => (None, false, true),
        };
        if improved {
            self.conv = Some((step, image.clone()));
        }
        if self.best.as_ref().is_none_or(|b| raw > b.1) {
            self.best = Some((step, raw, image.clone()));
        }
        self.last = Some(image.clone());
        self.rows.push(TraceRow {
            step,
            loss: info.loss,
            raw_psnr: raw,
            minloss_psnr: minloss,
            stop_metric: metric,
            wall_clock_s: self.start.elapsed().as_secs_f64(),
        });
        if cont {
            Ok(Control::Continue)
        } else {
            self.stopped = true;
            Ok(Control::Stop)
        }
    }

    fn finish(self, cfg: &ExperimentConfig, problem: &Problem, outcome: Result<RunResult>) -> RunReport {
        let total_time_s = self.start.elapsed().as_secs_f64();
        let failure = self.error.or(outcome.err()).map(|e| RunFailure {
            message: e.to_string(),
            exit_code: e.exit_code(),
        });
        let last_step = self.rows.len().saturating_sub(1);
        // Without a stopping decision the run converges at its last step.
        let conv = self.conv.or_else(|| self.last.clone().map(|img| (last_step, img)));
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .fold((0, f64::NAN), |acc, (i, &x)| if acc.1.is_nan() || x > acc.1 { (i, x) } else { acc })
        };
        let (max_step, max_psnr) = argmax(&self.tracker.min_loss);
        let max_psnr_raw = argmax(&self.tracker.raw).1;
        let conv_step = conv.as_ref().map_or(0, |c| c.0);
        let at = |v: &[f64]| v.get(conv_step).copied().unwrap_or(f64::NAN);
        let conv_psnr = at(&self.tracker.min_loss);
        RunReport {
            name: cfg.name.clone(),
            method: cfg.method,
            optimizer: cfg.optimizer,
            stop: cfg.stop_config().kind,
            steps: last_step,
            max_psnr,
            max_psnr_raw,
            max_step,
            conv_step,
            conv_psnr,
            conv_psnr_raw: at(&self.tracker.raw),
            gap: max_psnr - conv_psnr,
            time_to_conv_s: self.rows.get(conv_step).map_or(f64::NAN, |r| r.wall_clock_s),
            total_time_s,
            stopped: self.stopped,
            failure,
            trace: self.rows,
            ground_truth: problem.ground_truth.clone(),
            input: problem.input.clone(),
            conv_image: conv.map(|c| c.1),
            best_image: self.best.map(|b| b.2),
            final_image: self.last,
        }
    }
}
