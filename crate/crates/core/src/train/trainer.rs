use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{Adam, AdamConfig};
use super::loss::cross_entropy_loss;
use super::metrics::{ConfusionMatrix, Metrics};
use crate::data::{CoRegisteredSet, Flip, LabelMap, SitsSample};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

/// One model input: the configured modalities, in configuration order, on
/// the common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Example<S> {
    pub inputs: Vec<SitsSample<S>>,
    pub labels: LabelMap,
}

impl<S: Scalar> Example<S> {
    pub fn flipped(&self, flip: Flip) -> Result<Self> {
        Ok(Self {
            inputs: self.inputs.iter().map(|s| flip.apply_sample(s)).collect::<Result<_>>()?,
            labels: flip.apply_labels(&self.labels)?,
        })
    }
}

/// Selects `model`'s modalities from prepared sets.
pub fn examples_for<S: Scalar>(model: &Model<S>, sets: &[CoRegisteredSet<S>]) -> Result<Vec<Example<S>>> {
    sets.iter()
        .map(|set| {
            if set.num_classes != model.config.tsvit.num_classes {
                return Err(Error::Config(format!(
                    "dataset has {} classes, model {}",
                    set.num_classes, model.config.tsvit.num_classes
                )));
            }
            Ok(Example {
                inputs: model.select(&set.samples)?.into_iter().cloned().collect(),
                labels: set.labels.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: AdamConfig,
    pub seed: u64,
    pub augment: bool,
    pub ignore_background: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            optim: AdamConfig::default(),
            seed: 0,
            augment: true,
            ignore_background: false,
        }
    }
}

impl TrainConfig {
    fn ignore(&self) -> &'static [u16] {
        if self.ignore_background {
            &[0]
        } else {
            &[]
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(rename = "val_MA")]
    pub val_ma: f64,
    #[serde(rename = "val_OA")]
    pub val_oa: f64,
    #[serde(rename = "val_mIoU")]
    pub val_miou: f64,
}

/// What one training epoch observed, with parameters as they were when
/// each sample was visited.
#[derive(Clone, Debug)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub confusion: ConfusionMatrix,
}

pub struct Trainer<S> {
    pub model: Model<S>,
    pub config: TrainConfig,
    opt: Adam<S>,
    rng: ChaCha8Rng,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(model: Model<S>, config: TrainConfig) -> Result<Self> {
        if config.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        let opt = Adam::new(config.optim, &model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        // stream 0 seeds the weights; shuffling and flips draw from stream 1
        rng.set_stream(1);
        Ok(Self { model, config, opt, rng })
    }

    /// Per-sample loss and parameter gradients; the prediction is tallied
    /// into `cm`.
    fn loss_and_grads(&self, ex: &Example<S>, cm: &mut ConfusionMatrix) -> Result<(f64, Vec<Tensor<S>>)> {
        let tape = Tape::new();
        let g = self.model.store.bind(&tape, true);
        let probs = self.model.forward(&g, &ex.inputs)?;
        cm.add_map(&probs.value_ref(), &ex.labels)?;
        let loss = cross_entropy_loss(probs, &ex.labels, self.config.ignore())?;
        let value = loss.value_ref().data()[0].as_f64();
        let grads = tape.backward(loss)?;
        Ok((value, g.collect_grads(&grads)))
    }

    /// One pass over `train` in seeded order.
    pub fn run_epoch(&mut self, train: &[Example<S>]) -> Result<EpochStats> {
        if train.is_empty() {
            return Err(Error::Contract("empty training split".into()));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        let mut cm = ConfusionMatrix::new(self.model.config.tsvit.num_classes);
        for batch in order.chunks(self.config.batch_size) {
            let mut acc: Option<Vec<Tensor<S>>> = None;
            for &i in batch {
                let flip = if self.config.augment {
                    Flip::sample(&mut self.rng)
                } else {
                    Flip::default()
                };
                let ex = train[i].flipped(flip)?;
                let (loss, grads) = self.loss_and_grads(&ex, &mut cm)?;
                total += loss;
                acc = Some(match acc {
                    None => grads,
                    Some(mut a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            for (p, q) in x.data_mut().iter_mut().zip(y.data()) {
                                *p += *q;
                            }
                        }
                        a
                    }
                });
            }
            let inv = S::one() / S::from_usize(batch.len()).unwrap();
            let mut grads = acc.expect("batches are non-empty");
            for t in &mut grads {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            self.opt.step(&mut self.model.store, &grads)?;
        }
        Ok(EpochStats {
            mean_loss: total / train.len() as f64,
            confusion: cm,
        })
    }

    /// Mean loss without updating anything.
    pub fn mean_loss(&self, examples: &[Example<S>]) -> Result<f64> {
        let mut total = 0.0;
        for ex in examples {
            let tape = Tape::new();
            let g = self.model.store.bind(&tape, false);
            let probs = self.model.forward(&g, &ex.inputs)?;
            total += cross_entropy_loss(probs, &ex.labels, self.config.ignore())?.value_ref().data()[0].as_f64();
        }
        Ok(total / examples.len() as f64)
    }
}

pub fn confusion<S: Scalar>(model: &Model<S>, examples: &[Example<S>]) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.tsvit.num_classes);
    for ex in examples {
        cm.add_map(&model.predict(&ex.inputs)?, &ex.labels)?;
    }
    Ok(cm)
}

/// Metrics of `model` on a split; an empty split is a contract error.
pub fn evaluate<S: Scalar>(model: &Model<S>, examples: &[Example<S>]) -> Result<Metrics> {
    if examples.is_empty() {
        return Err(Error::Contract("empty evaluation split".into()));
    }
    confusion(model, examples)?.metrics()
}

pub struct TrainOutcome<S> {
    pub records: Vec<EpochRecord>,
    /// Model after the last epoch.
    pub last: Model<S>,
    /// Model after the epoch with the highest validation MA; the earliest
    /// such epoch wins ties.
    pub best: Model<S>,
    pub best_epoch: usize,
}

/// Trains with validation after every epoch. With an empty validation
/// split the training split stands in for it.
pub fn train<S: Scalar>(
    model: Model<S>,
    train: &[Example<S>],
    val: &[Example<S>],
    config: TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<TrainOutcome<S>> {
    let val = if val.is_empty() { train } else { val };
    let mut trainer = Trainer::new(model, config)?;
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Model<S>)> = None;
    for epoch in 1..=trainer.config.epochs {
        let train_loss = trainer.run_epoch(train)?.mean_loss;
        let m = evaluate(&trainer.model, val)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_ma: m.ma,
            val_oa: m.oa,
            val_miou: m.miou,
        };
        on_epoch(&record)?;
        records.push(record);
        if best.as_ref().is_none_or(|(ma, _, _)| m.ma > *ma) {
            best = Some((m.ma, epoch, trainer.model.clone()));
        }
    }
    let (_, best_epoch, best) = best.ok_or_else(|| Error::Config("training needs at least one epoch".into()))?;
    Ok(TrainOutcome {
        records,
        last: trainer.model,
        best,
        best_epoch,
    })
}
