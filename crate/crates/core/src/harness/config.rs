use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::phantoms::{PhantomKind, PhantomSpec};
use crate::error::{Error, Result};
use crate::network::ArchConfig;
use crate::objective::ObjectiveConfig;
use crate::operators::ParallelBeamGeometry;
use crate::optim::{AdamConfig, LbfgsConfig, NgdConfig, StopState, VarianceStopState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ct,
    Denoise,
    Deblur,
}

/// Which parameters are optimised and where they start.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// All network parameters from a random initialisation.
    Dip,
    /// All network parameters from the pre-trained point.
    Edip,
    /// Subspace coefficients around the pre-trained point.
    Subspace,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Ngd,
    Lbfgs,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopKind {
    Loss,
    Variance,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Svd,
    Random,
    RandomOrthonormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopConfig {
    pub kind: StopKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default = "window")]
    pub window: usize,
}

fn window() -> usize {
    VarianceStopState::DEFAULT_WINDOW
}

impl StopConfig {
    pub fn of_kind(kind: StopKind) -> Self {
        StopConfig {
            kind,
            delta: None,
            patience: None,
            window: window(),
        }
    }

    /// Stopping state with per-kind defaults filled in.
    pub fn state(&self) -> StopState {
        let d = match self.kind {
            StopKind::Variance => StopState::variance_default(),
            _ => StopState::loss_default(),
        };
        StopState::new(self.delta.unwrap_or(d.delta), self.patience.unwrap_or(d.patience))
    }
}

/// The image to reconstruct: the first phantom of a seeded stream, or a
/// user-supplied PGM.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruthConfig {
    #[serde(default = "piecewise")]
    pub kind: PhantomKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shapes: Option<usize>,
    #[serde(default = "intensity")]
    pub intensity: [f64; 2],
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

fn piecewise() -> PhantomKind {
    PhantomKind::Piecewise
}

fn intensity() -> [f64; 2] {
    [0.1, 1.0]
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        GroundTruthConfig {
            kind: piecewise(),
            shapes: None,
            intensity: intensity(),
            seed: 0,
            path: None,
        }
    }
}

impl GroundTruthConfig {
    pub fn spec(&self, size: usize) -> PhantomSpec {
        PhantomSpec {
            kind: self.kind,
            shapes: self.shapes,
            size,
            intensity: self.intensity,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainStage {
    #[serde(default = "epochs")]
    pub epochs: usize,
    /// Number of synthetic training phantoms.
    #[serde(default = "images")]
    pub images: usize,
    #[serde(default = "d_pre")]
    pub d_pre: usize,
    #[serde(default = "pretrain_lr")]
    pub lr: f64,
    #[serde(default = "ellipses")]
    pub phantom: PhantomKind,
    #[serde(default)]
    pub seed: u64,
    /// Where pre-training and subspace artifacts are cached; defaults to
    /// `<output_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
}

fn epochs() -> usize {
    5
}
fn images() -> usize {
    2000
}
fn d_pre() -> usize {
    500
}
fn pretrain_lr() -> f64 {
    1e-3
}
fn ellipses() -> PhantomKind {
    PhantomKind::Ellipses
}

impl Default for PretrainStage {
    fn default() -> Self {
        PretrainStage {
            epochs: epochs(),
            images: images(),
            d_pre: d_pre(),
            lr: pretrain_lr(),
            phantom: ellipses(),
            seed: 0,
            cache_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubspaceStage {
    #[serde(default = "d_sub")]
    pub d_sub: usize,
    /// Retained parameter coordinates as a fraction of all parameters.
    #[serde(default = "d_lev_frac")]
    pub d_lev_frac: f64,
    /// Single-pass incremental SVD instead of a batch SVD.
    #[serde(default)]
    pub incremental: bool,
    /// Checkpoints per incremental update.
    #[serde(default = "buffer")]
    pub buffer: usize,
    #[serde(default = "svd")]
    pub basis: BasisKind,
    /// Seed of random bases.
    #[serde(default)]
    pub seed: u64,
}

fn d_sub() -> usize {
    256
}
fn d_lev_frac() -> f64 {
    0.5
}
fn buffer() -> usize {
    32
}
fn svd() -> BasisKind {
    BasisKind::Svd
}

impl Default for SubspaceStage {
    fn default() -> Self {
        SubspaceStage {
            d_sub: d_sub(),
            d_lev_frac: d_lev_frac(),
            incremental: false,
            buffer: buffer(),
            basis: svd(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default)]
    pub noise: u64,
    /// Network initialisation (DIP) or starting coefficients (subspace).
    #[serde(default)]
    pub init: u64,
    /// Fisher probes; overrides `ngd.seed`.
    #[serde(default)]
    pub probes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "name")]
    pub name: String,
    pub task: Task,
    #[serde(default = "size")]
    pub size: usize,
    #[serde(default = "geometry")]
    pub geometry: ParallelBeamGeometry,
    /// Blur standard deviation in pixels.
    #[serde(default = "kappa")]
    pub kappa: f64,
    /// Relative noise level.
    #[serde(default = "noise_p")]
    pub p: f64,
    #[serde(default)]
    pub ground_truth: GroundTruthConfig,
    #[serde(default = "arch")]
    pub arch: ArchConfig,
    #[serde(default)]
    pub pretrain: PretrainStage,
    #[serde(default)]
    pub subspace: SubspaceStage,
    /// Defaults to the task's TV weight.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objective: Option<ObjectiveConfig>,
    #[serde(default = "subspace")]
    pub method: Method,
    #[serde(default = "ngd")]
    pub optimizer: OptimizerKind,
    #[serde(default = "max_steps")]
    pub max_steps: usize,
    #[serde(default)]
    pub ngd: NgdConfig,
    #[serde(default)]
    pub lbfgs: LbfgsConfig,
    /// Defaults to the method's learning rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamConfig>,
    /// Defaults to variance stopping for full-parameter methods and loss
    /// stopping for subspace methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop: Option<StopConfig>,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "output_dir")]
    pub output_dir: PathBuf,
}

fn name() -> String {
    "run".into()
}
fn size() -> usize {
    64
}
fn geometry() -> ParallelBeamGeometry {
    ParallelBeamGeometry::new(30, 95)
}
fn kappa() -> f64 {
    1.6
}
fn noise_p() -> f64 {
    0.05
}
fn arch() -> ArchConfig {
    ArchConfig::reference(16)
}
fn subspace() -> Method {
    Method::Subspace
}
fn ngd() -> OptimizerKind {
    OptimizerKind::Ngd
}
fn max_steps() -> usize {
    2000
}
fn output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    /// Desk-scale defaults for `task`.
    pub fn new(task: Task) -> Self {
        ExperimentConfig {
            name: name(),
            task,
            size: size(),
            geometry: geometry(),
            kappa: kappa(),
            p: noise_p(),
            ground_truth: GroundTruthConfig::default(),
            arch: arch(),
            pretrain: PretrainStage::default(),
            subspace: SubspaceStage::default(),
            objective: None,
            method: subspace(),
            optimizer: ngd(),
            max_steps: max_steps(),
            ngd: NgdConfig::default(),
            lbfgs: LbfgsConfig::default(),
            adam: None,
            stop: None,
            seeds: Seeds::default(),
            output_dir: output_dir(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // Relative ground-truth paths are resolved against the config file.
        if let (Some(p), Some(dir)) = (&cfg.ground_truth.path, path.parent()) {
            if p.is_relative() {
                cfg.ground_truth.path = Some(dir.join(p));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serialises")
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        self.objective.unwrap_or(match self.task {
            Task::Ct => ObjectiveConfig::tomography(),
            Task::Denoise | Task::Deblur => ObjectiveConfig::restoration(),
        })
    }

    pub fn adam_config(&self) -> AdamConfig {
        self.adam.unwrap_or(match self.method {
            Method::Dip => AdamConfig::dip(),
            Method::Edip => AdamConfig::edip(),
            Method::Subspace => AdamConfig::subspace(),
        })
    }

    pub fn stop_config(&self) -> StopConfig {
        self.stop.unwrap_or(StopConfig::of_kind(match self.method {
            Method::Dip | Method::Edip => StopKind::Variance,
            Method::Subspace => StopKind::Loss,
        }))
    }

    pub fn ngd_config(&self) -> NgdConfig {
        NgdConfig {
            seed: self.seeds.probes,
            ..self.ngd
        }
    }

    /// Retained coordinates for a network with `d_theta` parameters.
    pub fn d_lev(&self, d_theta: usize) -> usize {
        ((self.subspace.d_lev_frac * d_theta as f64).round() as usize).clamp(1, d_theta.max(1))
    }

    /// Uses `seed` for noise, initialisation and probes.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = Seeds {
            noise: seed,
            init: seed,
            probes: seed,
        };
        c
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.pretrain.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.size < 4 {
            return bad(format!("image size must be at least 4, got {}", self.size));
        }
        if self.size % (1 << (self.arch.scales.max(1) - 1)) != 0 {
            return bad(format!(
                "image size {} must be divisible by 2^(scales - 1) = {}",
                self.size,
                1 << (self.arch.scales - 1)
            ));
        }
        match self.task {
            Task::Ct => self.geometry.validate()?,
            Task::Deblur if !(self.kappa > 0.0 && self.kappa.is_finite()) => {
                return bad(format!("kappa must be positive, got {}", self.kappa));
            }
            _ => {}
        }
        if !(self.p >= 0.0 && self.p.is_finite()) {
            return bad(format!("noise level p must be >= 0, got {}", self.p));
        }
        self.arch.validate()?;
        self.ground_truth.spec(self.size).validate()?;
        if let Some(p) = &self.ground_truth.path {
            if !p.is_file() {
                return bad(format!("ground-truth image {} does not exist", p.display()));
            }
        }
        self.objective_config().validate()?;
        let pre = &self.pretrain;
        if self.method != Method::Dip {
            if pre.images == 0 || pre.epochs == 0 {
                return bad("pre-training needs at least one image and one epoch".into());
            }
            if !(pre.lr > 0.0 && pre.lr.is_finite()) {
                return bad(format!("pretrain.lr must be positive, got {}", pre.lr));
            }
        }
        if self.method == Method::Subspace {
            let sub = &self.subspace;
            if sub.d_sub == 0 || sub.d_sub > pre.d_pre {
                return bad(format!("subspace.d_sub = {} must lie in [1, d_pre = {}]", sub.d_sub, pre.d_pre));
            }
            if pre.d_pre > pre.epochs * pre.images + 1 {
                return bad(format!(
                    "d_pre = {} exceeds the {} available pre-training steps",
                    pre.d_pre,
                    pre.epochs * pre.images + 1
                ));
            }
            if !(sub.d_lev_frac > 0.0 && sub.d_lev_frac <= 1.0) {
                return bad(format!("subspace.d_lev_frac must lie in (0, 1], got {}", sub.d_lev_frac));
            }
            if sub.buffer == 0 {
                return bad("subspace.buffer must be positive".into());
            }
        }
        if self.optimizer == OptimizerKind::Ngd {
            if self.method != Method::Subspace {
                return bad("natural gradient descent is only available for the subspace method".into());
            }
            self.ngd_config().validate()?;
        }
        if self.optimizer == OptimizerKind::Lbfgs && self.lbfgs.history == 0 {
            return bad("lbfgs.history must be at least 1".into());
        }
        let adam = self.adam_config();
        if !(adam.lr > 0.0 && adam.lr.is_finite()) {
            return bad(format!("adam.lr must be positive, got {}", adam.lr));
        }
        let stop = self.stop_config();
        if stop.kind == StopKind::Variance && stop.window == 0 {
            return bad("stop.window must be positive".into());
        }
        if let Some(d) = stop.delta {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("stop.delta must be positive, got {d}"));
            }
        }
        Ok(())
    }
}
