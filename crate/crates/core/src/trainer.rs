//! SGD with momentum under a constant-warmup, cosine-decay schedule.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::{cross_entropy, full_backward, ClassifierConfig, Model};
use crate::conditioners::PromptParams;
use crate::encoders::ClassEmbeddingTable;
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::synthdata::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.002,
            warmup_lr: 1e-5,
            warmup_epochs: 1,
            epochs: 10,
            batch_size: 1,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return Err(Error::invalid("warmup_lr must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::invalid("warmup_epochs must not exceed epochs"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Learning rate at optimizer step `step` of `total_steps`.
pub fn lr_at(cfg: &SgdConfig, step: usize, total_steps: usize) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::invalid(format!(
            "step {step} outside schedule of {total_steps} steps"
        )));
    }
    if cfg.epochs == 0 {
        return Err(Error::invalid("schedule needs at least one epoch"));
    }
    let per_epoch = total_steps / cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    if step < warmup {
        return Ok(cfg.warmup_lr);
    }
    let t = (step - warmup) as f64;
    let horizon = (total_steps - warmup) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (PI * t / horizon).cos()))
}

/// `v ← μ v + g; w ← w − lr v`, group by group.
pub fn sgd_step(
    params: &mut PromptParams,
    grads: &PromptParams,
    velocity: &mut PromptParams,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.dims() != grads.dims() || params.dims() != velocity.dims() {
        return Err(Error::shape("gradient and parameter dimensions differ"));
    }
    for ((w, g), v) in params
        .groups_mut()
        .into_iter()
        .zip(grads.groups())
        .zip(velocity.groups_mut())
    {
        for ((wi, gi), vi) in w.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vi = momentum * *vi + gi;
            *wi -= lr * *vi;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// `(step, epoch, lr, loss)`, one entry per optimizer step; loss is the
    /// batch mean.
    pub steps: Vec<(usize, usize, f64, f64)>,
    pub epoch_loss: Vec<f64>,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "epoch", "lr", "loss"]).map_err(csv_err)?;
        for (step, epoch, lr, loss) in &self.steps {
            w.write_record([step.to_string(), epoch.to_string(), format!("{lr:e}"), loss.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Trains the learnable groups of `model` on `samples` in place.
///
/// Sample order is reshuffled each epoch from `seed ^ epoch`. Frozen
/// encoders are only read.
pub fn train(
    model: &mut Model,
    samples: &[&Sample],
    classes: &ClassEmbeddingTable,
    clf: &ClassifierConfig,
    cfg: &SgdConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    if samples.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let per_epoch = cfg.steps_per_epoch(samples.len());
    let total = per_epoch * cfg.epochs;
    let mut velocity = model.params.zeros_like();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        Rng::new(cfg.seed ^ epoch as u64).shuffle(&mut order);
        let mut epoch_total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let lr = lr_at(cfg, step, total)?;
            let mut grads = model.params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in batch {
                let s = samples[i];
                let target = clf
                    .position(s.label)
                    .ok_or_else(|| Error::invalid(format!("label {} outside the training label space", s.label)))?;
                let pass = model.forward(&s.patches, classes, clf)?;
                let loss = cross_entropy(&pass.posterior, target)?.loss;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { step, lr });
                }
                batch_loss += loss;
                let g = full_backward(model, &pass, target)?;
                for (acc, gi) in grads.groups_mut().into_iter().zip(g.groups()) {
                    acc.add_scaled(1.0, gi)?;
                }
            }
            let n = batch.len() as f64;
            if batch.len() > 1 {
                grads.groups_mut().into_iter().for_each(|t| t.scale(1.0 / n));
            }
            sgd_step(&mut model.params, &grads, &mut velocity, lr, cfg.momentum)?;
            if !model.params.is_finite() {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            history.steps.push((step, epoch, lr, batch_loss / n));
            epoch_total += batch_loss;
            step += 1;
        }
        history.epoch_loss.push(epoch_total / samples.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioners::{Method, PatchAggregation, PromptDims};
    use crate::encoders::FrozenEncoders;
    use crate::numerics::Tensor;
    use crate::synthdata::{generate, sample_kshot, DatasetDescriptor, Split};

    fn dims() -> PromptDims {
        PromptDims {
            prompt_len: 2,
            token_dim: 3,
            image_dim: 2,
            meta_hidden: 4,
        }
    }

    #[test]
    fn schedule_examples() {
        let cfg = SgdConfig::default();
        let total = 100;
        for step in 0..10 {
            assert_eq!(lr_at(&cfg, step, total).unwrap(), 1e-5);
        }
        assert_eq!(lr_at(&cfg, 10, total).unwrap(), 0.002);
        assert!((lr_at(&cfg, 55, total).unwrap() - 0.001).abs() < 1e-15);
        assert!(lr_at(&cfg, total, total).is_err());
        let post: Vec<f64> = (10..total).map(|s| lr_at(&cfg, s, total).unwrap()).collect();
        assert!(post.windows(2).all(|w| w[1] <= w[0]));
        assert!(post.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sgd_examples() {
        let one = |v: f64| {
            let mut p = PromptParams::zeros(PromptDims {
                prompt_len: 1,
                token_dim: 1,
                image_dim: 1,
                meta_hidden: 1,
            });
            p.prompts.tokens = Tensor::matrix(1, 1, vec![v]).unwrap();
            p
        };
        let mut w = one(5.0);
        let mut vel = w.zeros_like();
        sgd_step(&mut w, &one(2.0), &mut vel, 1.0, 0.0).unwrap();
        assert_eq!(w.prompts.tokens.data(), &[3.0]);

        let mut w = one(5.0);
        let before = w.clone();
        let mut vel = w.zeros_like();
        sgd_step(&mut w, &one(0.0), &mut vel, 0.5, 0.9).unwrap();
        assert_eq!(w, before);

        let mut w = one(0.0);
        let mut vel = w.zeros_like();
        for _ in 0..2 {
            sgd_step(&mut w, &one(1.0), &mut vel, 1.0, 0.9).unwrap();
        }
        assert!((w.prompts.tokens.data()[0] + 2.9).abs() < 1e-15);

        let mut other = PromptParams::zeros(dims());
        assert!(sgd_step(&mut other, &one(1.0), &mut one(0.0), 1.0, 0.0).is_err());
    }

    fn setup(method: Method) -> (Model, Vec<Sample>, ClassEmbeddingTable, ClassifierConfig) {
        let desc = DatasetDescriptor {
            num_classes: 4,
            image_dim: 4,
            samples_per_class: 16,
            seed: 11,
            ..Default::default()
        };
        let ds = generate(&desc).unwrap();
        let dims = PromptDims {
            prompt_len: 4,
            token_dim: 4,
            image_dim: 4,
            meta_hidden: 4,
        };
        let encoders = FrozenEncoders::new(3, 4, 4, 4, 4, 16);
        let classes = encoders.class_table(&ds.prototypes()).unwrap();
        let model = Model {
            method,
            params: PromptParams::init(dims, 5),
            encoders,
            aggregation: PatchAggregation::Sum,
        };
        let picked = sample_kshot(&ds, 16, 1).unwrap();
        let samples = picked.iter().map(|&i| ds.samples[i].clone()).collect();
        let clf = ClassifierConfig::new(0.01, ds.ids_in(Split::Base)).unwrap();
        (model, samples, classes, clf)
    }

    #[test]
    fn zero_epochs_is_noop_and_runs_are_reproducible() {
        let (mut model, samples, classes, clf) = setup(Method::Copl);
        let refs: Vec<&Sample> = samples.iter().collect();
        let init = model.params.to_bytes();
        let cfg = SgdConfig {
            epochs: 0,
            warmup_epochs: 0,
            ..Default::default()
        };
        train(&mut model, &refs, &classes, &clf, &cfg).unwrap();
        assert_eq!(model.params.to_bytes(), init);

        let cfg = SgdConfig {
            epochs: 2,
            ..Default::default()
        };
        let (mut a, ..) = setup(Method::Copl);
        let (mut b, ..) = setup(Method::Copl);
        let encoders = a.encoders.clone();
        let ha = train(&mut a, &refs, &classes, &clf, &cfg).unwrap();
        let hb = train(&mut b, &refs, &classes, &clf, &cfg).unwrap();
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
        assert_eq!(ha, hb);
        assert_eq!(a.encoders, encoders);
        assert_eq!(ha.steps.len(), 2 * refs.len());
        assert_ne!(a.params.to_bytes(), init);
    }

    #[test]
    fn training_reduces_loss() {
        for method in [Method::Coop, Method::Copl] {
            let (mut model, samples, classes, clf) = setup(method);
            let refs: Vec<&Sample> = samples.iter().collect();
            let h = train(&mut model, &refs, &classes, &clf, &SgdConfig::default()).unwrap();
            assert!(h.epoch_loss[9] < h.epoch_loss[0], "{method}: {:?}", h.epoch_loss);
        }
    }

    #[test]
    fn history_csv_header() {
        let h = TrainHistory {
            steps: vec![(0, 0, 1e-5, 0.5)],
            epoch_loss: vec![0.5],
        };
        let mut out = Vec::new();
        h.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,epoch,lr,loss\n0,0,1e-5,0.5\n"));
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SgdConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            warmup_epochs: 11,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            base_lr: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
