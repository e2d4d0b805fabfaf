//! Mini-batch training of the aspect classifier.
//!
//! Each epoch visits the training examples in a fresh shuffled order drawn
//! from the run's generator; a step takes the next `batch` of them.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_checkpoint, Checkpoint, MetricRow, MetricsLog, TrainConfig, TrainOutputs};
use crate::cells::StepContext;
use crate::error::{Error, Result};
use crate::model::AspectModel;
use crate::numerics::{global_norm_clip, ParamStore, Real, Tape};
use crate::objective::{bpc, lm_loss, training_loss, AspectExample, Sentiment};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AspectReport {
    pub accuracy: f64,
    /// Mean cross-entropy in nats.
    pub loss_nats: f64,
    pub dzone_mean: f64,
    pub examples: usize,
}

/// Predicted label of every example, in order.
pub fn predict_aspects<R: Real>(model: &AspectModel, store: &ParamStore<R>, examples: &[AspectExample]) -> Result<Vec<Sentiment>> {
    examples
        .iter()
        .map(|ex| {
            let (tape, logits, _) = score(model, store, ex)?;
            let best = argmax(&tape.value(logits).to_f64_vec());
            Ok(Sentiment::from_index(best).expect("four logits"))
        })
        .collect()
}

/// First index of the largest value.
fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
}

fn score<R: Real>(model: &AspectModel, store: &ParamStore<R>, ex: &AspectExample) -> Result<(Tape<R>, crate::numerics::Var, Option<(f64, usize)>)> {
    let mut tape = Tape::inference();
    // dropout is off, the generator is never drawn from
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = StepContext {
        training: false,
        capture: false,
        rng: &mut unused,
    };
    let (logits, d, terms) = model.logits(&mut tape, store, ex, &mut ctx)?;
    let d = d.map(|d| (tape.scalar(d).as_f64(), terms));
    Ok((tape, logits, d))
}

pub fn evaluate_aspect<R: Real>(model: &AspectModel, store: &ParamStore<R>, examples: &[AspectExample]) -> Result<AspectReport> {
    if examples.is_empty() {
        return Err(Error::Data("no examples to evaluate".into()));
    }
    let (mut correct, mut nll, mut dsum, mut terms) = (0usize, 0.0, 0.0, 0usize);
    for ex in examples {
        let (mut tape, logits, d) = score(model, store, ex)?;
        correct += usize::from(argmax(&tape.value(logits).to_f64_vec()) == ex.label.index());
        let loss = lm_loss(&mut tape, logits, &[ex.label.index()])?;
        nll += tape.scalar(loss).as_f64();
        if let Some((s, n)) = d {
            dsum += s;
            terms += n;
        }
    }
    let n = examples.len() as f64;
    Ok(AspectReport {
        accuracy: correct as f64 / n,
        loss_nats: nll / n,
        dzone_mean: if terms == 0 { 0.0 } else { dsum / terms as f64 },
        examples: examples.len(),
    })
}

/// Classifier checkpoints carry no validation BPC; the field holds infinity.
fn snapshot(outputs: &TrainOutputs, step: u64, store: &ParamStore<f32>, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        config: outputs.config_echo.clone(),
        step,
        best_valid_bpc: f64::INFINITY,
        params: store.clone(),
        extras: Vec::new(),
        rng: rng.clone(),
    }
}

#[derive(Clone, Debug)]
pub struct AspectSummary {
    pub steps: u64,
    pub last_train_nats: f64,
    pub last_valid: Option<AspectReport>,
    pub best_valid_accuracy: f64,
    pub store: ParamStore<f32>,
}

/// Trains for `config.steps` updates. The disagreement term counts every
/// token of the batch in both directions. Validation runs every
/// `eval_interval` steps and at the end when `valid` is non-empty; the
/// checkpoint is rewritten each time, with a `.best` copy on a new best
/// accuracy.
pub fn aspect_train(
    model: &AspectModel,
    train: &[AspectExample],
    valid: &[AspectExample],
    config: &TrainConfig,
    log: &mut MetricsLog,
    outputs: &TrainOutputs,
) -> Result<AspectSummary> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::<f32>::new();
    model.init(&mut store, &mut rng)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = train.len();
    let start = Instant::now();
    let elapsed = || if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let lr = config.adam.lr;
    let (mut last_train_nats, mut last_valid, mut best) = (f64::NAN, None, f64::NEG_INFINITY);
    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(train.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&train[order[cursor]]);
            cursor += 1;
        }
        let mut tape = Tape::new();
        let mut ctx = StepContext {
            training: true,
            capture: false,
            rng: &mut rng,
        };
        let (mut rows, mut labels, mut dsum, mut tokens, mut terms) = (Vec::new(), Vec::new(), None, 0, 0);
        for ex in &batch {
            let (logits, d, n) = model.logits(&mut tape, &store, ex, &mut ctx)?;
            rows.push(logits);
            labels.push(ex.label.index());
            tokens += ex.tokens.len();
            terms += n;
            if let Some(d) = d {
                dsum = Some(match dsum {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
        }
        let logits = tape.concat(&rows, 0)?;
        let task = lm_loss(&mut tape, logits, &labels)?;
        let m = if tokens == 0 { 0 } else { terms / tokens };
        let loss = training_loss(&mut tape, task, dsum, config.lambda, tokens, m, config.dzone_scale)?;
        let objective = tape.scalar(loss).as_f64();
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!("training loss {objective} at step {step}")));
        }
        last_train_nats = tape.scalar(task).as_f64();
        let dzone_mean = match dsum {
            Some(d) if terms > 0 => tape.scalar(d).as_f64() / terms as f64,
            _ => 0.0,
        };
        let mut grads = tape.backward(loss)?;
        grads.fill_missing(&store);
        let norm = global_norm_clip(&mut grads, config.clip);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {norm} at step {step}")));
        }
        config.adam.update(&mut store, &grads)?;
        if step % config.log_interval == 0 {
            log.push(MetricRow {
                step,
                split: "train".into(),
                loss_nats: last_train_nats,
                bpc: bpc(last_train_nats),
                dzone_mean,
                lr,
                elapsed_s: elapsed(),
            })?;
        }
        if (step % config.eval_interval == 0 || step == config.steps) && !valid.is_empty() {
            let report = evaluate_aspect(model, &store, valid)?;
            log.push(MetricRow {
                step,
                split: "valid".into(),
                loss_nats: report.loss_nats,
                bpc: bpc(report.loss_nats),
                dzone_mean: report.dzone_mean,
                lr,
                elapsed_s: elapsed(),
            })?;
            let improved = report.accuracy > best;
            if improved {
                best = report.accuracy;
            }
            if let Some(path) = &outputs.checkpoint {
                let ckpt = snapshot(outputs, step, &store, &rng);
                save_checkpoint(path, &ckpt)?;
                if improved {
                    save_checkpoint(&super::best_path(path), &ckpt)?;
                }
            }
            last_valid = Some(report);
        }
    }
    if valid.is_empty() {
        if let Some(path) = &outputs.checkpoint {
            save_checkpoint(path, &snapshot(outputs, config.steps, &store, &rng))?;
        }
    }
    log.flush()?;
    Ok(AspectSummary {
        steps: config.steps,
        last_train_nats,
        last_valid,
        best_valid_accuracy: best,
        store,
    })
}
