use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::StepContext;
use crate::data::{eval_streams, Split};
use crate::error::{Error, Result};
use crate::model::CharLm;
use crate::numerics::{ParamStore, Real, Tape, Tensor};
use crate::objective::bpc;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    /// Mean NLL per scored character.
    pub nats: f64,
    pub bpc: f64,
    /// Mean `D_zone` per term; zero for models without M-functions.
    pub dzone_mean: f64,
    pub tokens: usize,
}

#[derive(Default)]
struct Totals {
    nll: f64,
    dsum: f64,
    tokens: usize,
    terms: usize,
}

impl Totals {
    fn report(&self) -> EvalReport {
        let nats = if self.tokens == 0 { 0.0 } else { self.nll / self.tokens as f64 };
        EvalReport {
            nats,
            bpc: bpc(nats),
            dzone_mean: if self.terms == 0 { 0.0 } else { self.dsum / self.terms as f64 },
            tokens: self.tokens,
        }
    }
}

/// Runs one chunk without recording and adds its totals. Returns the final
/// state.
fn score_chunk<R: Real>(
    model: &CharLm,
    store: &ParamStore<R>,
    inputs: &[Vec<usize>],
    targets: &[Vec<usize>],
    h0: Tensor<R>,
    totals: &mut Totals,
) -> Result<Tensor<R>> {
    let mut tape = Tape::inference();
    let h = tape.constant(h0);
    // dropout is off, the generator is never drawn from
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = StepContext {
        training: false,
        capture: false,
        rng: &mut unused,
    };
    let out = model.run_chunk(&mut tape, store, inputs, targets, h, &mut ctx)?;
    let mean = tape.scalar(out.mean_nll).as_f64();
    if !mean.is_finite() {
        return Err(Error::NonFinite(format!("evaluation loss {mean}")));
    }
    totals.nll += mean * out.tokens as f64;
    totals.tokens += out.tokens;
    if let Some(d) = out.disagreement {
        totals.dsum += tape.scalar(d).as_f64();
        totals.terms += out.tokens * out.m;
    }
    Ok(tape.value(out.final_h).clone())
}

/// BPC over a whole split with the state carried from chunk to chunk.
/// `batch` parallel streams are scored; with `batch = 1` every symbol after
/// the first is predicted exactly once, in order.
pub fn evaluate_bpc<R: Real>(
    model: &CharLm,
    store: &ParamStore<R>,
    ids: &[usize],
    batch: usize,
    chunk: usize,
) -> Result<EvalReport> {
    if ids.len() < 2 {
        return Err(Error::Data(format!("{} symbols, nothing to predict", ids.len())));
    }
    let batch = batch.clamp(1, ids.len() / 2);
    let streams = eval_streams(ids, batch, chunk)?;
    let mut totals = Totals::default();
    let mut h = model.zero_state(batch);
    for (inputs, targets) in streams {
        h = score_chunk(model, store, &inputs, &targets, h, &mut totals)?;
    }
    Ok(totals.report())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LengthBucket {
    /// Lines with `lo < length ≤ hi`.
    pub lo: usize,
    pub hi: usize,
    pub lines: usize,
    /// Predicted characters: each line of length `L` contributes `L − 1`.
    pub chars: usize,
    pub nats: f64,
    pub bpc: f64,
}

/// Per-line BPC grouped by line length in buckets `(0, w], (w, 2w], …`.
/// Each line starts from the zero state; its first character is context
/// only. Buckets without predictions are omitted.
pub fn evaluate_by_length<R: Real>(
    model: &CharLm,
    store: &ParamStore<R>,
    split: &Split,
    width: usize,
    batch: usize,
) -> Result<Vec<LengthBucket>> {
    if width == 0 {
        return Err(Error::config("bucket_width", "must be positive"));
    }
    let mut by_len: BTreeMap<usize, Vec<&[usize]>> = BTreeMap::new();
    for i in 0..split.lines.len() {
        let line = split.line(i);
        if line.len() >= 2 {
            by_len.entry(line.len()).or_default().push(line);
        }
    }
    let mut buckets: BTreeMap<usize, (usize, Totals)> = BTreeMap::new();
    for (len, lines) in by_len {
        let (count, totals) = buckets.entry((len - 1) / width).or_default();
        *count += lines.len();
        for group in lines.chunks(batch.max(1)) {
            let inputs: Vec<Vec<usize>> = group.iter().map(|l| l[..len - 1].to_vec()).collect();
            let targets: Vec<Vec<usize>> = group.iter().map(|l| l[1..].to_vec()).collect();
            score_chunk(model, store, &inputs, &targets, model.zero_state(group.len()), totals)?;
        }
    }
    Ok(buckets
        .into_iter()
        .map(|(b, (lines, totals))| {
            let r = totals.report();
            LengthBucket {
                lo: b * width,
                hi: (b + 1) * width,
                lines,
                chars: r.tokens,
                nats: r.nats,
                bpc: r.bpc,
            }
        })
        .collect())
}
