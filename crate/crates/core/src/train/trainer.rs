use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::encoder::{assemble, topk_cells, ArgumentSet};
use crate::error::{Error, Result};
use crate::flow::{fm_loss, FlowBatch};
use crate::metrics::{evaluate_set, MetricReport, Reduction};
use crate::ode::SolverConfig;
use crate::parallel::{map_indexed, stream_rng, Parallelism};
use crate::pose::{center_pose, Dataset, HypothesisSet, Pose3D, Sample, Standardizer};

use super::adamw::{AdamW, AdamWConfig};
use super::model::{FlowLifter, ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay_factor: f64,
    /// First (zero-based) epoch trained at the decayed rate. Equal to
    /// `epochs` means no decay.
    pub lr_decay_at_epoch: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub dropout_rate: f32,
    pub k: usize,
    pub embed_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub solver: SolverConfig,
    pub variant: Variant,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let opt = AdamWConfig::default();
        TrainConfig {
            epochs: 100,
            batch_size: 64,
            lr: 1e-4,
            lr_decay_factor: 0.1,
            lr_decay_at_epoch: 90,
            weight_decay: opt.weight_decay,
            adam_beta1: opt.beta1,
            adam_beta2: opt.beta2,
            adam_eps: opt.eps,
            dropout_rate: m.dropout,
            k: m.k,
            embed_dim: m.embed_dim,
            cond_dim: m.cond_dim,
            hidden: m.hidden,
            blocks: m.blocks,
            solver: SolverConfig::default(),
            variant: Variant::Full,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if !(self.lr_decay_factor > 0.0) {
            return bad(format!("lr_decay_factor {} must be positive", self.lr_decay_factor));
        }
        if self.lr_decay_at_epoch > self.epochs {
            return bad(format!(
                "lr_decay_at_epoch {} beyond {} epochs",
                self.lr_decay_at_epoch, self.epochs
            ));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("AdamW needs betas in [0, 1) and positive eps".into());
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        self.solver.validate()
    }

    /// Changes the epoch count and keeps the decay step at the same
    /// fraction of training (90 of 100 epochs by default).
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let frac = self.lr_decay_at_epoch as f64 / self.epochs.max(1) as f64;
        self.epochs = epochs;
        self.lr_decay_at_epoch = ((epochs as f64 * frac).round() as usize).min(epochs);
        self
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_at_epoch {
            self.lr * self.lr_decay_factor
        } else {
            self.lr
        }
    }

    pub fn model_config(&self, joints: usize) -> ModelConfig {
        ModelConfig {
            joints,
            k: self.k,
            embed_dim: self.embed_dim,
            cond_dim: self.cond_dim,
            hidden: self.hidden,
            blocks: self.blocks,
            dropout: self.dropout_rate,
            variant: self.variant,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

pub fn loss_csv(losses: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for l in losses {
        let _ = writeln!(s, "{},{},{}", l.epoch, l.mean_loss, l.lr);
    }
    s
}

pub struct TrainOutput {
    pub model: FlowLifter,
    pub losses: Vec<EpochLoss>,
}

/// Per-sample argument extraction with the deterministic part precomputed.
enum ArgumentSource {
    TopK(Vec<Vec<Vec<usize>>>),
    Random(Vec<Vec<WeightedIndex<f32>>>),
}

impl ArgumentSource {
    fn build(ds: &Dataset, variant: Variant, k: usize, mode: Parallelism) -> Result<Self> {
        let n = ds.len();
        Ok(if variant == Variant::RandomSampling {
            let per = map_indexed(n, mode, |i| {
                ds.samples[i]
                    .heatmaps
                    .iter()
                    .enumerate()
                    .map(|(j, h)| {
                        WeightedIndex::new(&h.values).map_err(|e| {
                            Error::Data(format!(
                                "sample {} joint {j}: heatmap cannot be sampled: {e}",
                                ds.samples[i].id
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            });
            ArgumentSource::Random(per.into_iter().collect::<Result<_>>()?)
        } else {
            let per = map_indexed(n, mode, |i| {
                ds.samples[i]
                    .heatmaps
                    .iter()
                    .map(|h| topk_cells(h, k))
                    .collect::<Result<Vec<_>>>()
            });
            ArgumentSource::TopK(per.into_iter().collect::<Result<_>>()?)
        })
    }

    /// Training arguments: top-k shuffled per joint, or fresh random draws.
    fn draw<R: Rng + ?Sized>(&self, s: &Sample, i: usize, k: usize, norm: &Standardizer, rng: &mut R) -> ArgumentSet {
        let cells: Vec<Vec<usize>> = match self {
            ArgumentSource::TopK(c) => c[i]
                .iter()
                .map(|cells| {
                    let mut cells = cells.clone();
                    cells.shuffle(rng);
                    cells
                })
                .collect(),
            ArgumentSource::Random(d) => d[i]
                .iter()
                .map(|dist| (0..k).map(|_| dist.sample(rng)).collect())
                .collect(),
        };
        assemble(&s.heatmaps, &cells, k, norm)
    }
}

fn relabel(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Training { reason, .. } => Error::Training { epoch, batch, reason },
        other => other,
    }
}

/// Trains a fresh model on `dataset`. With `out_dir`, writes `model.fmck`,
/// its `model.json` sidecar, `loss.csv` and periodic checkpoints.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mode: Parallelism,
) -> Result<TrainOutput> {
    train_with(dataset, config, out_dir, mode, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    dataset: &Dataset,
    config: &TrainConfig,
    out_dir: Option<&Path>,
    mode: Parallelism,
    mut on_epoch: impl FnMut(&EpochLoss),
) -> Result<TrainOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    dataset.validate(true)?;
    let standardizer = dataset.fit_standardizer()?;
    let targets: Vec<Vec<f32>> = dataset
        .samples
        .iter()
        .map(|s| center_pose(s.pose.as_ref().expect("validated")).map(|p| p.flat()))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = FlowLifter::new(
        config.model_config(dataset.joint_count()),
        dataset.skeleton.clone(),
        standardizer,
        &mut rng,
    )?;
    let source = ArgumentSource::build(dataset, config.variant, config.k, mode)?;
    let mut opt = AdamW::new(config.optimizer(), &model.store);
    let echo = serde_json::to_value(config).expect("config serializes");
    let dim = model.flow.config.state_dim();

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let args: Vec<ArgumentSet> = chunk
                .iter()
                .map(|&i| source.draw(&dataset.samples[i], i, config.k, &standardizer, &mut rng))
                .collect();
            let refs: Vec<&ArgumentSet> = args.iter().collect();
            let mut batch = FlowBatch {
                x0: Vec::with_capacity(chunk.len() * dim),
                x1: Vec::with_capacity(chunk.len() * dim),
                t: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                batch.x0.extend((0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)));
                batch.x1.extend_from_slice(&targets[i]);
                batch.t.push(rng.random::<f32>());
            }
            let (loss, grads) = {
                let mut tape = Tape::new(&model.store);
                let c = model.encoder.encode(&mut tape, &refs)?;
                let l = fm_loss(&mut tape, &model.flow, c, &batch, true, &mut rng)?;
                let value = tape.value(l).data()[0];
                if !value.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        batch: b,
                        reason: format!("loss is {value}"),
                    });
                }
                (value, tape.backward(l, 1.0)?)
            };
            model.store.replace_grads(grads);
            opt.step(&mut model.store, lr).map_err(|e| relabel(e, epoch, b))?;
            total += loss as f64 * chunk.len() as f64;
        }
        let record = EpochLoss {
            epoch,
            mean_loss: total / dataset.len() as f64,
            lr,
        };
        losses.push(record);
        on_epoch(&record);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (epoch + 1) % config.checkpoint_every == 0 && epoch + 1 < config.epochs {
                model.save(
                    &dir.join(format!("checkpoint-epoch{:04}.fmck", epoch + 1)),
                    Some(echo.clone()),
                )?;
                write_losses(dir, &losses)?;
            }
        }
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(&dir.join("model.fmck"), Some(echo))?;
        write_losses(dir, &losses)?;
    }
    Ok(TrainOutput { model, losses })
}

fn write_losses(dir: &Path, losses: &[EpochLoss]) -> Result<()> {
    let path = dir.join("loss.csv");
    std::fs::write(&path, loss_csv(losses)).map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub hypotheses: usize,
    pub solver: SolverConfig,
    pub seed: u64,
    pub reduction: Reduction,
    /// With a single hypothesis, start from the zero pose instead of noise.
    pub deterministic_zero: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            hypotheses: 200,
            solver: SolverConfig::default(),
            seed: 0,
            reduction: Reduction::Best,
            deterministic_zero: true,
        }
    }
}

pub struct Evaluation {
    pub report: MetricReport,
    pub sets: Vec<HypothesisSet>,
    /// Field evaluations per trajectory.
    pub field_evaluations: usize,
    /// Wall-clock sampling time summed over samples.
    pub sampling_seconds: f64,
}

pub fn check_compatible(model: &FlowLifter, dataset: &Dataset) -> Result<()> {
    if dataset.joint_count() != model.config.joints || dataset.skeleton.parents != model.skeleton.parents {
        return Err(Error::Incompatible(format!(
            "dataset skeleton ({} joints) does not match the model's ({} joints)",
            dataset.joint_count(),
            model.config.joints
        )));
    }
    dataset.validate(true)
}

/// Samples hypotheses for every sample and scores them. Sample `i` uses
/// its own random stream derived from `(seed, i)`, so results do not
/// depend on `mode`.
pub fn evaluate(model: &FlowLifter, dataset: &Dataset, config: &EvalConfig, mode: Parallelism) -> Result<Evaluation> {
    check_compatible(model, dataset)?;
    if dataset.is_empty() {
        return Err(Error::Data("evaluation set is empty".into()));
    }
    let root = model.skeleton.root;
    let results = map_indexed(dataset.len(), mode, |i| -> Result<_> {
        let s = &dataset.samples[i];
        let mut rng = stream_rng(config.seed, i as u64);
        let start = Instant::now();
        let sampled = model.sample(
            &s.id,
            &s.heatmaps,
            config.hypotheses,
            config.solver,
            &mut rng,
            config.deterministic_zero,
            false,
        )?;
        let secs = start.elapsed().as_secs_f64();
        let gt: Pose3D = center_pose(s.pose.as_ref().expect("validated"))?;
        let metrics = evaluate_set(&sampled.set, &gt, root, config.reduction)?;
        Ok((sampled, metrics, secs))
    });
    let mut sets = Vec::with_capacity(dataset.len());
    let mut per_sample = Vec::with_capacity(dataset.len());
    let mut seconds = 0.0;
    let mut evals = 0;
    for r in results {
        let (sampled, m, secs) = r?;
        evals = sampled.field_evaluations;
        sets.push(sampled.set);
        per_sample.push(m);
        seconds += secs;
    }
    Ok(Evaluation {
        report: MetricReport::aggregate(config.hypotheses, config.reduction, per_sample)?,
        sets,
        field_evaluations: evals,
        sampling_seconds: seconds,
    })
}
