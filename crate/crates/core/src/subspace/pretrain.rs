use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::network::{ParamLayout, ParamVector, Unet};
use crate::operators::Image;
use crate::optim::{AdamConfig, AdamState};
use crate::rng::{stream, stream_rng};

enum Backing {
    Memory(Vec<Vec<f64>>),
    /// Checkpoints appended back to back as little-endian `f64`.
    Disk { path: PathBuf, count: usize },
}

/// Ordered parameter snapshots from a training run, held in memory or
/// spilled to a file.
pub struct TrajectoryStore {
    layout: Option<Arc<ParamLayout>>,
    steps: Vec<usize>,
    backing: Backing,
}

impl TrajectoryStore {
    pub fn in_memory() -> Self {
        TrajectoryStore {
            layout: None,
            steps: Vec::new(),
            backing: Backing::Memory(Vec::new()),
        }
    }

    /// Spills checkpoints to `path`, truncating any existing file.
    pub fn on_disk(path: &Path) -> Result<Self> {
        File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(TrajectoryStore {
            layout: None,
            steps: Vec::new(),
            backing: Backing::Disk {
                path: path.to_path_buf(),
                count: 0,
            },
        })
    }

    /// Reopens checkpoints spilled by an earlier [`TrajectoryStore::on_disk`]
    /// store with the given layout and step list.
    pub fn open(path: &Path, layout: Arc<ParamLayout>, steps: Vec<usize>) -> Result<Self> {
        let bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
        let expected = (steps.len() * layout.total_len() * 8) as u64;
        if bytes != expected {
            return Err(Error::format(
                path,
                format!("expected {expected} bytes for {} checkpoints, found {bytes}", steps.len()),
            ));
        }
        Ok(TrajectoryStore {
            layout: Some(layout),
            backing: Backing::Disk {
                path: path.to_path_buf(),
                count: steps.len(),
            },
            steps,
        })
    }

    /// Records the parameters after `step` optimisation steps.
    pub fn push(&mut self, step: usize, theta: &ParamVector) -> Result<()> {
        match &self.layout {
            None => self.layout = Some(theta.layout.clone()),
            Some(l) => {
                if **l != *theta.layout {
                    return Err(Error::Config("checkpoint layout differs from earlier checkpoints".into()));
                }
            }
        }
        match &mut self.backing {
            Backing::Memory(v) => v.push(theta.data.clone()),
            Backing::Disk { path, count } => {
                let file = OpenOptions::new().append(true).open(&*path).map_err(|e| Error::io(path.as_path(), e))?;
                let mut w = BufWriter::new(file);
                for x in &theta.data {
                    w.write_all(&x.to_le_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
                }
                w.flush().map_err(|e| Error::io(path.as_path(), e))?;
                *count += 1;
            }
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Optimisation step of every checkpoint.
    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn layout(&self) -> Option<&Arc<ParamLayout>> {
        self.layout.as_ref()
    }

    pub fn d_theta(&self) -> usize {
        self.layout.as_ref().map_or(0, |l| l.total_len())
    }

    /// Streams checkpoints in order without loading them all.
    pub fn iter(&self) -> Box<dyn Iterator<Item = Result<Vec<f64>>> + '_> {
        let d = self.d_theta();
        match &self.backing {
            Backing::Memory(v) => Box::new(v.iter().map(|x| Ok(x.clone()))),
            Backing::Disk { path, count } => {
                let mut reader = match File::open(path) {
                    Ok(f) => BufReader::new(f),
                    Err(e) => return Box::new(std::iter::once(Err(Error::io(path, e)))),
                };
                let mut buf = vec![0u8; d * 8];
                Box::new((0..*count).map(move |_| {
                    reader.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                    Ok(buf
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                        .collect())
                }))
            }
        }
    }

    /// Stacks the checkpoints as the columns of a `d_θ x d_pre` matrix.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        let d = self.d_theta();
        let mut m = DMatrix::zeros(d, self.len());
        for (j, v) in self.iter().enumerate() {
            let v = v?;
            check_len("checkpoint", d, v.len())?;
            m.column_mut(j).copy_from_slice(&v);
        }
        Ok(m)
    }
}

/// Steps (after that many updates) at which to snapshot a run of `total`
/// updates so that `d_pre` checkpoints are spread uniformly, including the
/// initial point. Fewer are returned when the run is too short.
pub fn checkpoint_steps(total: usize, d_pre: usize) -> Vec<usize> {
    match d_pre {
        0 => Vec::new(),
        1 => vec![total],
        _ => {
            let mut out: Vec<usize> = (0..d_pre)
                .map(|i| ((i as f64) * total as f64 / (d_pre - 1) as f64).round() as usize)
                .collect();
            out.dedup();
            out
        }
    }
}

/// Network input and the image it should reproduce.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub input: Image,
    pub target: Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    #[serde(default = "lr")]
    pub lr: f64,
    pub d_pre: usize,
    #[serde(default)]
    pub seed: u64,
}

fn lr() -> f64 {
    1e-3
}

pub struct PretrainOutput {
    pub theta_pre: ParamVector,
    pub store: TrajectoryStore,
    /// Mean per-sample loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Supervised training of `net` with Adam on the per-pixel mean squared
/// error, one pair per step, visiting pairs in a fresh random order each
/// epoch. Checkpoints are written to `store` on the uniform schedule of
/// [`checkpoint_steps`].
pub fn pretrain(
    net: &Unet,
    data: &[TrainingPair],
    cfg: &PretrainConfig,
    init: ParamVector,
    mut store: TrajectoryStore,
) -> Result<PretrainOutput> {
    check_len("initial parameters", net.num_params(), init.len())?;
    if cfg.epochs > 0 && data.is_empty() {
        return Err(Error::Config("pre-training needs at least one training pair".into()));
    }
    let total = cfg.epochs * data.len();
    let schedule = checkpoint_steps(total, cfg.d_pre);
    let mut next = schedule.iter().peekable();
    let mut theta = init;
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr), theta.len())?;
    let mut rng = stream_rng(cfg.seed, stream::PRETRAIN);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    if next.next_if_eq(&&0).is_some() {
        store.push(0, &theta)?;
    }
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for &k in &order {
            let pair = &data[k];
            let tape = net.tape(&theta.data, &pair.input)?;
            let out = tape.output();
            check_len("training target", out.len(), pair.target.data.len())?;
            let n = out.len() as f64;
            let resid: Vec<f64> = out.iter().zip(&pair.target.data).map(|(a, b)| a - b).collect();
            let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite pre-training loss at epoch {epoch}, step {step}"
                )));
            }
            sum += loss;
            let cot: Vec<f64> = resid.iter().map(|r| 2.0 * r / n).collect();
            let grad = net.vjp(&tape, &cot)?;
            adam.step(&mut theta.data, &grad);
            step += 1;
            if next.next_if_eq(&&step).is_some() {
                store.push(step, &theta)?;
            }
        }
        epoch_losses.push(sum / data.len() as f64);
    }
    Ok(PretrainOutput {
        theta_pre: theta,
        store,
        epoch_losses,
    })
}
