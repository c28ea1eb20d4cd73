//! Optimization and evaluation loops.

pub mod adamw;
pub mod checkpoint;
pub mod config;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{synth_sample, Sample};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::model::SsFormer;
use crate::par;
use crate::tensor::Tape;

pub use adamw::{AdamW, AdamWConfig};
pub use checkpoint::Checkpoint;
pub use config::{RunConfig, SynthConfig, TrainConfig};

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogEvent {
    Train { iter: usize, loss: f64, lr: f64 },
    Eval { iter: usize, miou: f64, pixel_acc: f64 },
}

/// Loss and per-parameter gradients of one batch.
pub struct BatchGrads {
    pub loss: f64,
    /// Labelled (non-ignored) pixels in the batch.
    pub pixels: usize,
    pub grads: Vec<Vec<f32>>,
}

fn sample_grads(model: &SsFormer, sample: &Sample) -> Result<(f64, usize, Vec<Option<Vec<f32>>>)> {
    let ignore = model.config.decoder.ignore_index;
    let pixels = sample.label.data.iter().filter(|&&l| l != ignore).count();
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(sample.image.clone());
    let logits = model.forward(&mut tape, x)?;
    let loss = tape.cross_entropy(logits, &sample.label.data, ignore)?;
    let value = tape.value(loss).item() as f64;
    if pixels == 0 {
        return Ok((0.0, 0, vec![None; model.num_param_tensors()]));
    }
    tape.backward(loss)?;
    Ok((value, pixels, tape.param_grads(model.num_param_tensors())))
}

/// Mean cross-entropy over every labelled pixel of the batch and its
/// gradient. Samples run independently (in parallel with the `parallel`
/// feature) and are combined in batch order, so the result does not depend
/// on scheduling.
pub fn batch_gradients(model: &SsFormer, batch: &[&Sample]) -> Result<BatchGrads> {
    let per_sample = par::map(batch, |s| sample_grads(model, s));
    combine(model, per_sample)
}

pub fn batch_gradients_sequential(model: &SsFormer, batch: &[&Sample]) -> Result<BatchGrads> {
    let per_sample = par::map_sequential(batch, |s| sample_grads(model, s));
    combine(model, per_sample)
}

fn combine(model: &SsFormer, per_sample: Vec<Result<(f64, usize, Vec<Option<Vec<f32>>>)>>) -> Result<BatchGrads> {
    let per_sample = per_sample.into_iter().collect::<Result<Vec<_>>>()?;
    let pixels: usize = per_sample.iter().map(|s| s.1).sum();
    let mut grads: Vec<Vec<f32>> = model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
    let mut loss = 0.0;
    if pixels == 0 {
        return Ok(BatchGrads { loss, pixels, grads });
    }
    for (l, n, g) in per_sample {
        let w = n as f64 / pixels as f64;
        loss += w * l;
        for (acc, g) in grads.iter_mut().zip(g) {
            if let Some(g) = g {
                let w = w as f32;
                acc.iter_mut().zip(g).for_each(|(a, v)| *a += w * v);
            }
        }
    }
    Ok(BatchGrads { loss, pixels, grads })
}

/// Synthetic train and held-out splits for a run.
pub fn synth_splits(cfg: &SynthConfig, n_classes: usize) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let make = |range: std::ops::Range<usize>| -> Result<Vec<Sample>> {
        let idx: Vec<usize> = range.collect();
        par::map(&idx, |&i| synth_sample(cfg.seed, i as u64, cfg.height, cfg.width, n_classes))
            .into_iter()
            .collect()
    };
    let train = make(0..cfg.train_samples)?;
    let held_out = make(cfg.train_samples..cfg.train_samples + cfg.eval_samples)?;
    Ok((train, held_out))
}

pub struct TrainOutcome {
    pub model: SsFormer,
    pub optimizer: AdamW,
    pub final_metrics: Option<Metrics>,
}

/// Runs `cfg.train.max_iters` AdamW steps over `train_set`, reporting every
/// loss and every held-out evaluation to `log`. Batches are drawn from a
/// seeded reshuffle of the training set each epoch.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    held_out: &[Sample],
    mut log: impl FnMut(&LogEvent) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let tc = &cfg.train;
    let mut model = SsFormer::new(&cfg.model(), tc.seed)?;
    let mut opt = AdamW::new(&model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed_0f_ba7c4);
    let mut order: Vec<usize> = Vec::new();
    let mut final_metrics = None;

    for iter in 0..tc.max_iters {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(&train_set[order.pop().expect("refilled")]);
        }
        let step = batch_gradients(&model, &batch).map_err(|e| match e {
            Error::Numeric(msg) => Error::Divergence { iter, msg },
            e => e,
        })?;
        if !step.loss.is_finite() {
            return Err(Error::Divergence {
                iter,
                msg: format!("loss is {}", step.loss),
            });
        }
        let lr = tc.lr_at(iter);
        log(&LogEvent::Train { iter, loss: step.loss, lr })?;
        let adam = AdamWConfig {
            lr,
            beta1: tc.betas.0,
            beta2: tc.betas.1,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
        };
        opt.step(&mut model.params_mut(), &step.grads, &adam).map_err(|e| match e {
            Error::Numeric(msg) => Error::Divergence { iter, msg },
            e => e,
        })?;

        let done = iter + 1;
        let eval_now = tc.eval_interval > 0 && (done % tc.eval_interval == 0 || done == tc.max_iters);
        if eval_now && !held_out.is_empty() {
            let m = evaluate(&model, held_out)?;
            log(&LogEvent::Eval {
                iter: done,
                miou: m.miou,
                pixel_acc: m.pixel_acc,
            })?;
            final_metrics = Some(m);
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer: opt,
        final_metrics,
    })
}

/// Confusion matrix of the model's argmax predictions over `samples`.
pub fn confusion(model: &SsFormer, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let per_sample = par::map(samples, |s| model.predict(&s.image));
    confusion_from_predictions(model.config.decoder.num_classes, model.config.decoder.ignore_index, samples, per_sample)
}

pub fn confusion_sequential(model: &SsFormer, samples: &[Sample]) -> Result<ConfusionMatrix> {
    let per_sample = par::map_sequential(samples, |s| model.predict(&s.image));
    confusion_from_predictions(model.config.decoder.num_classes, model.config.decoder.ignore_index, samples, per_sample)
}

/// Accumulates externally produced predictions, one `Vec` per sample.
pub fn confusion_from_predictions(
    num_classes: usize,
    ignore_index: u32,
    samples: &[Sample],
    predictions: Vec<Result<Vec<u32>>>,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for (s, pred) in samples.iter().zip(predictions) {
        cm.update(&pred?, &s.label.data, ignore_index)?;
    }
    Ok(cm)
}

pub fn evaluate(model: &SsFormer, samples: &[Sample]) -> Result<Metrics> {
    confusion(model, samples)?.metrics()
}

/// Evaluates `shards` contiguous slices separately and merges their
/// matrices.
pub fn evaluate_sharded(model: &SsFormer, samples: &[Sample], shards: usize) -> Result<Metrics> {
    let shards = shards.clamp(1, samples.len().max(1));
    let size = samples.len().div_ceil(shards).max(1);
    let parts: Vec<&[Sample]> = samples.chunks(size).collect();
    let mut total = ConfusionMatrix::new(model.config.decoder.num_classes);
    for cm in par::map(&parts, |part| confusion_sequential(model, part)) {
        total.add(&cm?)?;
    }
    total.metrics()
}
