//! Task losses and the disagreement-regularized training objective.
//!
//! Sign convention: `D_zone` is non-positive and larger means more diverse
//! zones. Training maximizes likelihood plus `λ·ΣD`, which is carried out by
//! minimizing `NLL − λ·ΣD`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Real, Tape, Tensor, Var};

/// Mean cross-entropy in nats per position. `logits` is `[n, V]`.
pub fn lm_loss<R: Real>(tape: &mut Tape<R>, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = tape.shape(logits).first().copied().unwrap_or(0);
    if rows != targets.len() {
        return Err(Error::shape(
            "lm_loss",
            format!("{rows} logit rows for {} targets", targets.len()),
        ));
    }
    tape.cross_entropy(logits, targets)
}

/// [`lm_loss`] on plain values.
pub fn lm_loss_value<R: Real>(logits: &Tensor<R>, targets: &[usize]) -> Result<f64> {
    let mut tape = Tape::inference();
    let l = tape.constant(logits.clone());
    let loss = lm_loss(&mut tape, l, targets)?;
    Ok(tape.scalar(loss).as_f64())
}

/// Bits per character from nats per character.
pub fn bpc(nats_per_char: f64) -> f64 {
    nats_per_char / std::f64::consts::LN_2
}

/// `task − λ·ΣD`, the quantity minimized during training.
pub fn combined_objective(task_loss: f64, disagreement_sum: f64, lambda: f64) -> f64 {
    task_loss - lambda * disagreement_sum
}

/// How the summed disagreement enters a per-token training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DisagreementScale {
    /// `(ΣNLL − λ·Σ_s Σ_m D) / s`: the double sum, per token.
    Sum,
    /// `ΣNLL/s − λ·Σ_s Σ_m D / (s·m)`: mean over tokens and M-functions.
    Mean,
}

impl FromStr for DisagreementScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sum" => Ok(DisagreementScale::Sum),
            "mean" => Ok(DisagreementScale::Mean),
            other => Err(Error::config("dzone_scale", format!("unknown scale '{other}' (sum|mean)"))),
        }
    }
}

impl fmt::Display for DisagreementScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DisagreementScale::Sum => "sum",
            DisagreementScale::Mean => "mean",
        })
    }
}

/// Builds the per-token training loss on the tape from a mean task loss over
/// `tokens` positions and a summed disagreement over `tokens·m` terms.
pub fn training_loss<R: Real>(
    tape: &mut Tape<R>,
    mean_task: Var,
    disagreement_sum: Option<Var>,
    lambda: f64,
    tokens: usize,
    m: usize,
    scale: DisagreementScale,
) -> Result<Var> {
    let Some(d) = disagreement_sum else {
        return Ok(mean_task);
    };
    if lambda == 0.0 || tokens == 0 {
        return Ok(mean_task);
    }
    let denom = match scale {
        DisagreementScale::Sum => tokens as f64,
        DisagreementScale::Mean => (tokens * m.max(1)) as f64,
    };
    let reg = tape.scale(d, R::lit(-lambda / denom));
    tape.add(mean_task, reg)
}

/// Components of one evaluation of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Summed task loss in nats.
    pub task_loss: f64,
    /// `Σ_s Σ_m D_zone`.
    pub disagreement_sum: f64,
    pub lambda: f64,
    pub combined: f64,
    pub tokens: usize,
    /// M-functions per token.
    pub m: usize,
}

impl LossBreakdown {
    pub fn new(task_loss: f64, disagreement_sum: f64, lambda: f64, tokens: usize, m: usize) -> Self {
        LossBreakdown {
            task_loss,
            disagreement_sum,
            lambda,
            combined: combined_objective(task_loss, disagreement_sum, lambda),
            tokens,
            m,
        }
    }

    /// Mean `D_zone` per term, in `[-1, 0]`; zero when nothing was counted.
    pub fn mean_disagreement(&self) -> f64 {
        let n = self.tokens * self.m;
        if n == 0 {
            0.0
        } else {
            self.disagreement_sum / n as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
    Conflict,
}

impl Sentiment {
    pub const ALL: [Sentiment; 4] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral, Sentiment::Conflict];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            "conflict" => Ok(Sentiment::Conflict),
            other => Err(format!("unknown label '{other}'")),
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
            Sentiment::Conflict => "conflict",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AspectExample {
    pub sentence: String,
    pub tokens: Vec<usize>,
    pub aspect: Vec<usize>,
    pub label: Sentiment,
}

/// Label logits `[1, 4]`: mean-pool `states` (each `[1, d]`), append the
/// aspect vector (`[1, d_a]`), one affine map.
pub fn aspect_logits<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    states: &[Var],
    aspect: Var,
    head: &str,
) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::domain("classify_aspect", "empty sentence"));
    }
    let stacked = tape.concat(states, 0)?;
    let pooled = tape.sum_axis_keep(stacked, 0)?;
    let pooled = tape.scale(pooled, R::lit(1.0 / states.len() as f64));
    let features = tape.concat(&[pooled, aspect], 1)?;
    let w = tape.param(store, &format!("{head}/w"))?;
    let b = tape.param(store, &format!("{head}/b"))?;
    tape.affine(features, w, b)
}

/// Label distribution `[1, 4]`.
pub fn classify_aspect<R: Real>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    states: &[Var],
    aspect: Var,
    head: &str,
) -> Result<Var> {
    let logits = aspect_logits(tape, store, states, aspect, head)?;
    tape.softmax(logits)
}

/// Mean of the embedding rows of `ids`, `[1, d]`.
pub fn mean_embedding<R: Real>(tape: &mut Tape<R>, table: Var, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::domain("aspect_embedding", "empty aspect term"));
    }
    let rows = tape.gather(table, ids)?;
    let sum = tape.sum_axis_keep(rows, 0)?;
    Ok(tape.scale(sum, R::lit(1.0 / ids.len() as f64)))
}
