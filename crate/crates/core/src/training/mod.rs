//! Optimization: Adam, truncated BPTT with carried state, clipping,
//! evaluation and checkpoints.
//!
//! A training step takes the next `batch × tbptt` chunk of the parallel
//! streams, runs it from the state carried out of the previous chunk (as a
//! constant, so no gradient crosses the boundary), minimizes
//! `NLL − λ·ΣD_zone`, clips and applies Adam. The stream position is a pure
//! function of the step counter: chunk `step mod chunks`, with the state reset
//! to zero whenever a pass over the streams starts again.

mod adam;
mod aspect;
mod checkpoint;
mod eval;
mod metrics;

pub use adam::Adam;
pub use aspect::{aspect_train, evaluate_aspect, predict_aspects, AspectReport, AspectSummary};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};
pub use eval::{evaluate_bpc, evaluate_by_length, EvalReport, LengthBucket};
pub use metrics::{MetricRow, MetricsLog, METRICS_HEADER};

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cells::StepContext;
use crate::data::{make_streams, CharCorpus, Streams};
use crate::error::{Error, Result};
use crate::model::CharLm;
use crate::numerics::{global_norm_clip, Gradients, ParamStore, Real, Slots, Tape, Tensor};
use crate::objective::{bpc, training_loss, DisagreementScale};

/// Name of the carried recurrent state in checkpoints.
pub const CARRY: &str = "carry/h";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: Adam,
    pub batch: usize,
    pub tbptt: usize,
    pub clip: f64,
    pub lambda: f64,
    pub dzone_scale: DisagreementScale,
    pub steps: u64,
    /// Validation every this many steps (and after the last one).
    pub eval_interval: u64,
    /// A training row goes to the metrics log every this many steps.
    pub log_interval: u64,
    /// Parallel streams during evaluation.
    pub eval_batch: usize,
    pub seed: u64,
    /// Write wall-clock seconds to the metrics log; off keeps logs
    /// byte-reproducible.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: Adam::default(),
            batch: 256,
            tbptt: 150,
            clip: 5.0,
            lambda: 1.0,
            dzone_scale: DisagreementScale::Sum,
            steps: 1000,
            eval_interval: 500,
            log_interval: 10,
            eval_batch: 1,
            seed: 1,
            record_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, "must be positive"))
            }
        };
        positive("lr", self.adam.lr > 0.0 && self.adam.lr.is_finite())?;
        positive("batch", self.batch > 0)?;
        positive("tbptt", self.tbptt > 0)?;
        positive("clip", self.clip > 0.0)?;
        positive("adam_eps", self.adam.eps > 0.0)?;
        positive("eval_interval", self.eval_interval > 0)?;
        positive("log_interval", self.log_interval > 0)?;
        positive("eval_batch", self.eval_batch > 0)?;
        for (field, b) in [("beta1", self.adam.beta1), ("beta2", self.adam.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, format!("{b} is outside [0, 1)")));
            }
        }
        if !self.lambda.is_finite() {
            return Err(Error::config("lambda", "must be finite"));
        }
        Ok(())
    }
}

/// Gradients and statistics of one chunk.
#[derive(Clone, Debug)]
pub struct ChunkGradients<R> {
    pub grads: Gradients<R>,
    /// Mean NLL per position.
    pub loss_nats: f64,
    /// The minimized per-token loss.
    pub objective: f64,
    pub disagreement_sum: f64,
    pub tokens: usize,
    pub m: usize,
    pub final_h: Tensor<R>,
}

impl<R> ChunkGradients<R> {
    pub fn dzone_mean(&self) -> f64 {
        let n = self.tokens * self.m;
        if n == 0 {
            0.0
        } else {
            self.disagreement_sum / n as f64
        }
    }
}

/// Forward and reverse sweep over one chunk from the detached state `h0`.
#[allow(clippy::too_many_arguments)]
pub fn chunk_gradients<R: Real, G: Rng + ?Sized>(
    model: &CharLm,
    store: &ParamStore<R>,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
    h0: &Tensor<R>,
    lambda: f64,
    scale: DisagreementScale,
    rng: &mut G,
) -> Result<ChunkGradients<R>> {
    let mut tape = Tape::new();
    let h = tape.constant(h0.clone());
    let mut ctx = StepContext {
        training: true,
        capture: false,
        rng,
    };
    let out = model.run_chunk(&mut tape, store, inputs, targets, h, &mut ctx)?;
    let loss = training_loss(&mut tape, out.mean_nll, out.disagreement, lambda, out.tokens, out.m, scale)?;
    let objective = tape.scalar(loss).as_f64();
    if !objective.is_finite() {
        return Err(Error::NonFinite(format!("training loss {objective}")));
    }
    let mut grads = tape.backward(loss)?;
    grads.fill_missing(store);
    Ok(ChunkGradients {
        grads,
        loss_nats: tape.scalar(out.mean_nll).as_f64(),
        objective,
        disagreement_sum: out.disagreement.map_or(0.0, |d| tape.scalar(d).as_f64()),
        tokens: out.tokens,
        m: if out.disagreement.is_some() { out.m } else { 0 },
        final_h: tape.value(out.final_h).clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Step counter after the update.
    pub step: u64,
    pub loss_nats: f64,
    pub objective: f64,
    pub dzone_mean: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Owns the parameters, optimizer state, generator and carried state of one
/// language-model training run.
pub struct Trainer<'m, R> {
    model: &'m CharLm,
    config: TrainConfig,
    store: ParamStore<R>,
    rng: ChaCha8Rng,
    step: u64,
    best_valid_bpc: f64,
    carry: Tensor<R>,
    streams: Streams,
}

impl<'m, R: Real> Trainer<'m, R> {
    /// Fresh parameters drawn from the generator seeded with `config.seed`;
    /// dropout masks continue from the same generator.
    pub fn new(model: &'m CharLm, config: TrainConfig, train_ids: &[usize]) -> Result<Self> {
        config.validate()?;
        let streams = make_streams(train_ids, config.batch, config.tbptt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        model.init(&mut store, &mut rng)?;
        Ok(Trainer {
            carry: model.zero_state(config.batch),
            model,
            config,
            store,
            rng,
            step: 0,
            best_valid_bpc: f64::INFINITY,
            streams,
        })
    }

    /// Continues a run exactly where `ckpt` left it.
    pub fn resume(model: &'m CharLm, config: TrainConfig, train_ids: &[usize], ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        model.check_store(&ckpt.params)?;
        let streams = make_streams(train_ids, config.batch, config.tbptt)?;
        let carry = match ckpt.extra(CARRY) {
            Some(t) if t.shape() == [config.batch, model.d_h()] => t.cast(),
            Some(t) => {
                return Err(Error::shape(
                    "resume",
                    format!("carried state {:?} for batch {} and width {}", t.shape(), config.batch, model.d_h()),
                ))
            }
            None => model.zero_state(config.batch),
        };
        Ok(Trainer {
            model,
            store: convert_store(&ckpt.params),
            rng: ckpt.rng.clone(),
            step: ckpt.step,
            best_valid_bpc: ckpt.best_valid_bpc,
            carry,
            streams,
            config,
        })
    }

    pub fn store(&self) -> &ParamStore<R> {
        &self.store
    }

    pub fn into_store(self) -> ParamStore<R> {
        self.store
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn best_valid_bpc(&self) -> f64 {
        self.best_valid_bpc
    }

    /// Records a validation result; true when it is the best so far.
    pub fn note_validation(&mut self, bpc: f64) -> bool {
        let better = bpc < self.best_valid_bpc;
        if better {
            self.best_valid_bpc = bpc;
        }
        better
    }

    pub fn chunks_per_pass(&self) -> usize {
        self.streams.num_chunks()
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let n = self.streams.num_chunks() as u64;
        let index = (self.step % n) as usize;
        if index == 0 {
            self.carry = self.model.zero_state(self.config.batch);
        }
        let (inputs, targets) = self.streams.chunk(index).expect("index below chunk count");
        let mut cg = chunk_gradients(
            self.model,
            &self.store,
            &inputs,
            &targets,
            &self.carry,
            self.config.lambda,
            self.config.dzone_scale,
            &mut self.rng,
        )?;
        let grad_norm = global_norm_clip(&mut cg.grads, self.config.clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {}", self.step + 1)));
        }
        self.config.adam.update(&mut self.store, &cg.grads)?;
        self.step += 1;
        let dzone_mean = cg.dzone_mean();
        self.carry = cg.final_h;
        Ok(StepStats {
            step: self.step,
            loss_nats: cg.loss_nats,
            objective: cg.objective,
            dzone_mean,
            grad_norm,
        })
    }

    /// Snapshot from which [`Trainer::resume`] continues bit-exactly when
    /// `R` is `f32`.
    pub fn checkpoint(&self, config_echo: &str) -> Checkpoint {
        Checkpoint {
            config: config_echo.to_owned(),
            step: self.step,
            best_valid_bpc: self.best_valid_bpc,
            params: convert_store(&self.store),
            extras: vec![(CARRY.to_owned(), self.carry.cast())],
            rng: self.rng.clone(),
        }
    }
}

/// Values and optimizer slots at another precision.
pub fn convert_store<A: Real, B: Real>(store: &ParamStore<A>) -> ParamStore<B> {
    let mut out = store.cast::<B>();
    for name in store.names() {
        let s = store.slots(name).expect("every parameter has slots");
        out.set_slots(
            name,
            Slots {
                m: s.m.cast(),
                v: s.v.cast(),
                step: s.step,
            },
        )
        .expect("same shapes");
    }
    out
}

/// Where a run writes its checkpoints.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Latest state, rewritten at every validation; the best-so-far copy goes
    /// next to it with a `.best` suffix.
    pub checkpoint: Option<PathBuf>,
    /// `key=value` description stored in every checkpoint.
    pub config_echo: String,
}

#[derive(Clone, Debug)]
pub struct TrainSummary<R> {
    pub steps: u64,
    pub last_train_nats: f64,
    pub last_valid: Option<EvalReport>,
    pub best_valid_bpc: f64,
    pub store: ParamStore<R>,
}

fn best_path(path: &std::path::Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".best");
    PathBuf::from(s)
}

/// Trains until `config.steps`, logging training rows every
/// `log_interval` steps and validation rows every `eval_interval` steps.
/// Starts from `resume` when given.
pub fn tbptt_train(
    model: &CharLm,
    corpus: &CharCorpus,
    config: &TrainConfig,
    log: &mut MetricsLog,
    outputs: &TrainOutputs,
    resume: Option<&Checkpoint>,
) -> Result<TrainSummary<f32>> {
    let mut trainer = match resume {
        Some(ckpt) => Trainer::<f32>::resume(model, config.clone(), &corpus.train.ids, ckpt)?,
        None => Trainer::<f32>::new(model, config.clone(), &corpus.train.ids)?,
    };
    let start = Instant::now();
    let elapsed = |start: &Instant| if config.record_time { start.elapsed().as_secs_f64() } else { 0.0 };
    let lr = config.adam.lr;
    let mut last_train_nats = f64::NAN;
    let mut last_valid = None;
    while trainer.step() < config.steps {
        let stats = trainer.train_step()?;
        last_train_nats = stats.loss_nats;
        if stats.step % config.log_interval == 0 {
            log.push(MetricRow {
                step: stats.step,
                split: "train".into(),
                loss_nats: stats.loss_nats,
                bpc: bpc(stats.loss_nats),
                dzone_mean: stats.dzone_mean,
                lr,
                elapsed_s: elapsed(&start),
            })?;
        }
        let last = stats.step == config.steps;
        if (stats.step % config.eval_interval == 0 || last) && corpus.valid.len() >= 2 {
            let report = evaluate_bpc(model, trainer.store(), &corpus.valid.ids, config.eval_batch, config.tbptt)?;
            log.push(MetricRow {
                step: stats.step,
                split: "valid".into(),
                loss_nats: report.nats,
                bpc: report.bpc,
                dzone_mean: report.dzone_mean,
                lr,
                elapsed_s: elapsed(&start),
            })?;
            let best = trainer.note_validation(report.bpc);
            if let Some(path) = &outputs.checkpoint {
                let ckpt = trainer.checkpoint(&outputs.config_echo);
                save_checkpoint(path, &ckpt)?;
                if best {
                    save_checkpoint(&best_path(path), &ckpt)?;
                }
            }
            last_valid = Some(report);
        }
    }
    log.flush()?;
    Ok(TrainSummary {
        steps: trainer.step(),
        last_train_nats,
        last_valid,
        best_valid_bpc: trainer.best_valid_bpc(),
        store: trainer.into_store(),
    })
}
