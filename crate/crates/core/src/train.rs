//! Datasets on disk, the deterministic training loop and cross-validation.
//!
//! Data order and flips are pure functions of `(seed, step)`, so a trainer
//! restored from a checkpoint continues exactly where the original left off.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{combined_loss, MetricReport};
use crate::model;
use crate::optim::AdamW;
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{kfold, Mask, Volume};

pub const CASE_LIST: &str = "cases.txt";
pub const IMAGE_EXT: &str = "img";
pub const MASK_EXT: &str = "seg";

#[derive(Debug, Clone)]
pub struct Case {
    pub id: String,
    pub image: Volume,
    pub mask: Mask,
}

impl Case {
    pub fn new(id: impl Into<String>, image: Volume, mask: Mask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::shape(
                "case",
                format!("image {:?} vs mask {:?}", image.dims(), mask.dims()),
            ));
        }
        Ok(Self {
            id: id.into(),
            image,
            mask,
        })
    }
}

/// Writes `cases.txt` plus `<id>.img` / `<id>.seg` for every case.
pub fn save_dataset(dir: impl AsRef<Path>, cases: &[Case]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut list = String::new();
    for c in cases {
        c.image.write(dir.join(format!("{}.{IMAGE_EXT}", c.id)))?;
        c.mask.write(dir.join(format!("{}.{MASK_EXT}", c.id)))?;
        list.push_str(&c.id);
        list.push('\n');
    }
    let p = dir.join(CASE_LIST);
    std::fs::write(&p, list).map_err(|e| Error::io(p, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    let p = dir.join(CASE_LIST);
    let list = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    list.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|id| {
            let image = Volume::read(dir.join(format!("{id}.{IMAGE_EXT}")))?;
            let mask = Mask::read(dir.join(format!("{id}.{MASK_EXT}")))?;
            Case::new(id, image, mask)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseReport {
    pub id: String,
    pub metrics: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    /// Mean validation metrics, when evaluated this epoch.
    pub val: Option<MetricReport>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub history: Vec<EpochLog>,
    /// Highest mean validation DICE, or the final state without validation data.
    pub best: Checkpoint<T>,
}

pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub store: ParameterStore<T>,
    opt: AdamW<T>,
    step: u64,
    best_dice: Option<f64>,
}

fn steps_per_epoch(n: usize, batch: usize) -> u64 {
    n.div_ceil(batch) as u64
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let store = model::build(&cfg.model, cfg.train.seed)?.cast::<T>();
        let opt = AdamW::new(cfg.train.optim, &store);
        Ok(Self {
            cfg,
            store,
            opt,
            step: 0,
            best_dice: None,
        })
    }

    pub fn from_checkpoint(ck: Checkpoint<T>) -> Result<Self> {
        let cfg = RunConfig::from_text(&ck.config)?;
        let reference = model::build(&cfg.model, cfg.train.seed)?;
        let same_layout = reference.len() == ck.store.len()
            && reference
                .iter()
                .zip(ck.store.iter())
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape() && a.frozen == b.frozen);
        if !same_layout {
            return Err(Error::InvalidArgument(
                "checkpoint parameters do not match its own config".into(),
            ));
        }
        let opt = AdamW::from_state(cfg.train.optim, ck.step, ck.moments, &ck.store)?;
        Ok(Self {
            cfg,
            store: ck.store,
            opt,
            step: ck.step,
            best_dice: ck.best_dice,
        })
    }

    pub fn checkpoint(&self, epoch: u64) -> Checkpoint<T> {
        Checkpoint {
            config: self.cfg.to_text(),
            step: self.step,
            epoch,
            best_dice: self.best_dice,
            store: self.store.clone(),
            moments: self.opt.moments().to_vec(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Case indices and flip axes used by global step `step`.
    pub fn batch_plan(&self, step: u64, n_cases: usize) -> Vec<(usize, [bool; 3])> {
        let t = &self.cfg.train;
        let spe = steps_per_epoch(n_cases, t.batch_size);
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..n_cases).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(t.seed);
        rng.set_stream(1 + epoch);
        order.shuffle(&mut rng);
        let mut flips = ChaCha8Rng::seed_from_u64(t.seed);
        flips.set_stream((1 << 40) + step);
        let end = ((pos + 1) * t.batch_size).min(n_cases);
        order[pos * t.batch_size..end]
            .iter()
            .map(|&i| (i, t.flip_prob.map(|p| flips.random_bool(p))))
            .collect()
    }

    fn sample_loss(&self, case: &Case, flip: [bool; 3]) -> Result<(f64, Graph<T>)> {
        let image = case.image.flipped(flip).to_tensor::<T>();
        let gt = case.mask.flipped(flip).to_tensor::<T>();
        let mut g = Graph::new();
        let x = g.constant(image)?;
        let diverged = |e| match e {
            Error::NonFinite { op } => Error::Diverged {
                step: self.step,
                reason: format!("non-finite value from {op} on case {}", case.id),
            },
            e => e,
        };
        let y = model::forward(&mut g, &self.store, &self.cfg.model, x).map_err(diverged)?;
        let loss = combined_loss(&mut g, y, &gt, &self.cfg.train.loss).map_err(diverged)?;
        let value = g.value(loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                reason: format!("non-finite loss on case {}", case.id),
            });
        }
        g.backward(loss)?;
        Ok((value, g))
    }

    /// One optimizer step on the next batch. Returns the mean batch loss.
    /// On error the parameters are left as they were before the call.
    pub fn train_step(&mut self, cases: &[Case]) -> Result<f64> {
        if cases.is_empty() {
            return Err(Error::InvalidArgument("no training cases".into()));
        }
        let plan = self.batch_plan(self.step, cases.len());
        let w = T::of(1.0 / plan.len() as f64);
        self.store.zero_grads();
        let mut total = 0.0;
        for &(i, flip) in &plan {
            let (loss, g) = self.sample_loss(&cases[i], flip)?;
            total += loss;
            self.store.accumulate_grads(&g, w);
        }
        self.opt.step(&mut self.store).map_err(|e| match e {
            Error::NonFiniteGradient(name) => Error::Diverged {
                step: self.step,
                reason: format!("non-finite gradient for {name}"),
            },
            e => e,
        })?;
        self.step += 1;
        Ok(total / plan.len() as f64)
    }

    /// Probability map `[H, W, D, 1]` for one volume.
    pub fn predict(&self, image: &Volume) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor::<T>())?;
        let y = model::forward(&mut g, &self.store, &self.cfg.model, x)?;
        Ok(g.value(y).clone())
    }

    pub fn evaluate(&self, cases: &[Case]) -> Result<Vec<CaseReport>> {
        cases
            .iter()
            .map(|c| {
                let p = self.predict(&c.image)?;
                Ok(CaseReport {
                    id: c.id.clone(),
                    metrics: MetricReport::from_probabilities(&p, &c.mask, self.cfg.train.tau)?,
                })
            })
            .collect()
    }

    /// Runs the configured number of epochs from the current step.
    pub fn fit(
        &mut self,
        train: &[Case],
        val: &[Case],
        on_epoch: &mut dyn FnMut(&EpochLog),
    ) -> Result<TrainOutcome<T>> {
        let t = self.cfg.train.clone();
        let spe = steps_per_epoch(train.len().max(1), t.batch_size);
        let mut history = Vec::new();
        let mut best = None;
        let first_epoch = (self.step / spe) as usize;
        for epoch in first_epoch..t.epochs {
            let mut sum = 0.0;
            let mut steps = 0;
            while self.step < (epoch as u64 + 1) * spe {
                sum += self.train_step(train)?;
                steps += 1;
            }
            let last = epoch + 1 == t.epochs;
            let due = last || (t.eval_every > 0 && (epoch + 1) % t.eval_every == 0);
            let val_report = if !val.is_empty() && due {
                let reports: Vec<MetricReport> = self.evaluate(val)?.into_iter().map(|r| r.metrics).collect();
                MetricReport::mean(&reports)
            } else {
                None
            };
            if let Some(v) = val_report {
                if self.best_dice.is_none_or(|b| v.dice > b) {
                    self.best_dice = Some(v.dice);
                    best = Some(self.checkpoint(epoch as u64 + 1));
                }
            }
            let log = EpochLog {
                epoch: epoch + 1,
                train_loss: sum / steps.max(1) as f64,
                val: val_report,
            };
            on_epoch(&log);
            history.push(log);
        }
        let best = best.unwrap_or_else(|| self.checkpoint(t.epochs as u64));
        Ok(TrainOutcome { history, best })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldReport {
    pub fold: usize,
    pub cases: Vec<CaseReport>,
    pub mean: MetricReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    /// Arithmetic mean of the per-fold means.
    pub mean: MetricReport,
}

/// Trains one model per fold on its training part and scores the holdout.
pub fn crossvalidate<T: Scalar>(
    cfg: &RunConfig,
    cases: &[Case],
    k: usize,
    on_epoch: &mut dyn FnMut(usize, &EpochLog),
) -> Result<CvReport> {
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let folds = kfold(&ids, k, cfg.train.seed)?;
    let pick = |names: &[String]| -> Vec<Case> {
        names
            .iter()
            .map(|n| cases[ids.iter().position(|i| i == n).unwrap()].clone())
            .collect()
    };
    let mut reports = Vec::with_capacity(k);
    for (f, fold) in folds.iter().enumerate() {
        let (train, hold) = (pick(&fold.train), pick(&fold.holdout));
        let mut trainer = Trainer::<T>::new(cfg.clone())?;
        trainer.fit(&train, &[], &mut |log| on_epoch(f + 1, log))?;
        let case_reports = trainer.evaluate(&hold)?;
        let metrics: Vec<MetricReport> = case_reports.iter().map(|r| r.metrics).collect();
        reports.push(FoldReport {
            fold: f + 1,
            cases: case_reports,
            mean: MetricReport::mean(&metrics).expect("holdout is nonempty"),
        });
    }
    let means: Vec<MetricReport> = reports.iter().map(|r| r.mean).collect();
    Ok(CvReport {
        mean: MetricReport::mean(&means).expect("k >= 2"),
        folds: reports,
    })
}
