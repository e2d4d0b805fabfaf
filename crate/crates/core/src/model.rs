//! Task models assembled from an embedding, recurrent core(s) and an output
//! head: the character language model and the aspect classifier.

use rand::Rng;

use crate::cells::{encode_sequence, CellConfig, Direction, RecurrentCore, StepContext, StepOutput};
use crate::error::{Error, Result};
use crate::numerics::{count_params, init_params, Init, ParamSpec, ParamStore, Real, Tape, Tensor, Var};
use crate::objective::{aspect_logits, lm_loss, mean_embedding, AspectExample, Sentiment};

pub const EMBED: &str = "embed";
const EMBED_STD_MILLI: u32 = 20;

/// Embedding → recurrent core → softmax over the vocabulary.
#[derive(Clone, Debug)]
pub struct CharLm {
    core: RecurrentCore,
    vocab: usize,
}

/// One forward pass over a `B × K` chunk.
#[derive(Clone, Debug)]
pub struct ChunkOutput {
    /// Mean NLL in nats over the `B·K` positions.
    pub mean_nll: Var,
    /// `Σ_s Σ_m D_zone` over the chunk, if any M-function ran.
    pub disagreement: Option<Var>,
    /// `[B, d_h]` state after the last position.
    pub final_h: Var,
    pub tokens: usize,
    /// M-functions per position.
    pub m: usize,
    /// Per-step outputs, time-major.
    pub steps: Vec<StepOutput>,
}

impl CharLm {
    /// `cell.d_x` is the embedding width.
    pub fn new(cell: CellConfig, vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::config("vocab", "vocabulary is empty"));
        }
        if cell.d_x == 0 {
            return Err(Error::config("embed", "embedding width must be positive"));
        }
        Ok(CharLm {
            core: RecurrentCore::new(cell, "")?,
            vocab,
        })
    }

    pub fn core(&self) -> &RecurrentCore {
        &self.core
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn d_h(&self) -> usize {
        self.core.d_h()
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.core.config();
        let mut specs = vec![ParamSpec::new(EMBED, &[self.vocab, c.d_x], Init::Normal { milli: EMBED_STD_MILLI })];
        specs.extend(self.core.param_specs());
        specs.push(ParamSpec::new(
            "out/w",
            &[c.d_h, self.vocab],
            Init::Glorot {
                fan_in: c.d_h,
                fan_out: self.vocab,
            },
        ));
        specs.push(ParamSpec::new("out/b", &[self.vocab], Init::Zeros));
        specs
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.param_specs())
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, store: &mut ParamStore<R>, rng: &mut G) -> Result<()> {
        init_params(store, &self.param_specs(), rng)
    }

    /// Checks that `store` holds every parameter with the expected shape.
    pub fn check_store<R: Real>(&self, store: &ParamStore<R>) -> Result<()> {
        for spec in self.param_specs() {
            match store.get(&spec.name) {
                None => return Err(Error::shape("model", format!("missing parameter {}", spec.name))),
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::shape(
                        "model",
                        format!("{} is {:?}, config expects {:?}", spec.name, t.shape(), spec.shape),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn zero_state<R: Real>(&self, batch: usize) -> Tensor<R> {
        Tensor::zeros(&[batch, self.d_h()])
    }

    /// Runs `inputs[b][t]` for every stream `b` from state `h0` and scores
    /// `targets[b][t]`. All rows must have the same length `K ≥ 1`.
    pub fn run_chunk<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        inputs: &[Vec<usize>],
        targets: &[Vec<usize>],
        h0: Var,
        ctx: &mut StepContext<'_, G>,
    ) -> Result<ChunkOutput> {
        let batch = inputs.len();
        let k = inputs.first().map_or(0, Vec::len);
        if batch == 0 || k == 0 || targets.len() != batch {
            return Err(Error::shape("run_chunk", format!("{batch} input rows, {} target rows", targets.len())));
        }
        if inputs.iter().chain(targets).any(|r| r.len() != k) {
            return Err(Error::shape("run_chunk", "ragged chunk rows"));
        }
        let table = tape.param(store, EMBED)?;
        let mut h = h0;
        let mut states = Vec::with_capacity(k);
        let mut steps = Vec::with_capacity(k);
        let mut disagreement: Option<Var> = None;
        let mut ids = vec![0; batch];
        for t in 0..k {
            for (b, row) in inputs.iter().enumerate() {
                ids[b] = row[t];
            }
            let x = tape.gather(table, &ids)?;
            let step = self.core.step(tape, store, x, h, ctx)?;
            h = step.h;
            states.push(h);
            if let Some(d) = step.disagreement {
                disagreement = Some(match disagreement {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
            steps.push(step);
        }
        let logits = self.logits(tape, store, &states)?;
        let flat_targets: Vec<usize> = (0..k).flat_map(|t| targets.iter().map(move |r| r[t])).collect();
        let mean_nll = lm_loss(tape, logits, &flat_targets)?;
        Ok(ChunkOutput {
            mean_nll,
            disagreement,
            final_h: h,
            tokens: batch * k,
            m: self.core.m_per_step(),
            steps,
        })
    }

    /// Output logits `[Σ rows, V]` for a list of `[rows, d_h]` states,
    /// stacked in order.
    pub fn logits<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, states: &[Var]) -> Result<Var> {
        let stacked = if states.len() == 1 {
            states[0]
        } else {
            tape.concat(states, 0)?
        };
        let w = tape.param(store, "out/w")?;
        let b = tape.param(store, "out/b")?;
        tape.affine(stacked, w, b)
    }
}

/// Bidirectional encoder, mean pooling, aspect embedding, 4-way head.
#[derive(Clone, Debug)]
pub struct AspectModel {
    forward: RecurrentCore,
    backward: RecurrentCore,
    vocab: usize,
}

pub const HEAD: &str = "head";

impl AspectModel {
    pub fn new(cell: CellConfig, vocab: usize) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::config("vocab", "vocabulary is empty"));
        }
        Ok(AspectModel {
            forward: RecurrentCore::new(cell.clone(), "fwd")?,
            backward: RecurrentCore::new(cell, "bwd")?,
            vocab,
        })
    }

    pub fn core(&self) -> &RecurrentCore {
        &self.forward
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = self.forward.config();
        let width = 2 * c.d_h + c.d_x;
        let mut specs = vec![ParamSpec::new(EMBED, &[self.vocab, c.d_x], Init::Normal { milli: EMBED_STD_MILLI })];
        specs.extend(self.forward.param_specs());
        specs.extend(self.backward.param_specs());
        specs.push(ParamSpec::new(
            format!("{HEAD}/w"),
            &[width, Sentiment::ALL.len()],
            Init::Glorot {
                fan_in: width,
                fan_out: Sentiment::ALL.len(),
            },
        ));
        specs.push(ParamSpec::new(format!("{HEAD}/b"), &[Sentiment::ALL.len()], Init::Zeros));
        specs
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.param_specs())
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, store: &mut ParamStore<R>, rng: &mut G) -> Result<()> {
        init_params(store, &self.param_specs(), rng)
    }

    /// Label logits `[1, 4]` for one example, plus the summed disagreement
    /// and the number of `D_zone` terms it covers.
    pub fn logits<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        example: &AspectExample,
        ctx: &mut StepContext<'_, G>,
    ) -> Result<(Var, Option<Var>, usize)> {
        let fwd = encode_sequence(tape, store, &self.forward, EMBED, &example.tokens, Direction::Forward, ctx)?;
        let bwd = encode_sequence(tape, store, &self.backward, EMBED, &example.tokens, Direction::Backward, ctx)?;
        let mut states = Vec::with_capacity(fwd.len());
        let mut disagreement: Option<Var> = None;
        for (f, b) in fwd.iter().zip(&bwd) {
            states.push(tape.concat(&[f.h, b.h], 1)?);
            for d in [f.disagreement, b.disagreement].into_iter().flatten() {
                disagreement = Some(match disagreement {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
        }
        let table = tape.param(store, EMBED)?;
        let aspect = mean_embedding(tape, table, &example.aspect)?;
        let logits = aspect_logits(tape, store, &states, aspect, HEAD)?;
        let terms = example.tokens.len() * 2 * self.forward.m_per_step();
        Ok((logits, disagreement, terms))
    }
}
