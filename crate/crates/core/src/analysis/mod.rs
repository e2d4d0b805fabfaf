//! Relevance maps: how strongly the candidate activation at a query
//! position points along each earlier hidden state, optionally split into
//! per-zone contributions.
//!
//! Candidates are taken from the first transition depth (the cell that
//! reads the character), after layer norm and tanh and before dropout.
//! Hidden states are the per-step outputs after the last depth.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cells::{encode_sequence, Direction, StepContext, StepOutput};
use crate::error::{Error, Result};
use crate::model::{CharLm, EMBED};
use crate::numerics::{ParamStore, Real, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceMap {
    /// Token ids of the whole text.
    pub tokens: Vec<usize>,
    /// Query positions, ascending.
    pub queries: Vec<usize>,
    /// `rows[i][p]` for `p < queries[i]`, each in `[-1, 1]`.
    pub rows: Vec<Vec<f64>>,
    /// Set for a zone-specific map.
    pub zone: Option<usize>,
}

impl RelevanceMap {
    /// Number of context columns: positions before the last query.
    pub fn context_len(&self) -> usize {
        self.queries.last().copied().unwrap_or(0)
    }
}

/// Cosine similarity; zero when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

struct Encoded<R: Real> {
    tape: Tape<R>,
    steps: Vec<StepOutput>,
}

fn check_queries(tokens: &[usize], last_q: usize) -> Result<()> {
    if last_q == 0 {
        return Err(Error::config("last_q", "must be positive"));
    }
    if tokens.len() <= last_q {
        return Err(Error::Data(format!(
            "text of {} symbols is too short for {last_q} query positions",
            tokens.len()
        )));
    }
    Ok(())
}

fn encode<R: Real>(model: &CharLm, store: &ParamStore<R>, tokens: &[usize]) -> Result<Encoded<R>> {
    if tokens.is_empty() {
        return Err(Error::Data("empty text".into()));
    }
    model.check_store(store)?;
    let mut tape = Tape::inference();
    // dropout is off, the generator is never drawn from
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut ctx = StepContext {
        training: false,
        capture: true,
        rng: &mut unused,
    };
    let steps = encode_sequence(&mut tape, store, model.core(), EMBED, tokens, Direction::Forward, &mut ctx)?;
    Ok(Encoded { tape, steps })
}

impl<R: Real> Encoded<R> {
    fn hidden(&self, p: usize) -> Vec<f64> {
        self.tape.value(self.steps[p].h).to_f64_vec()
    }

    fn first_depth(&self, t: usize) -> &crate::cells::DepthTrace {
        &self.steps[t].trace.as_ref().expect("captured").depths[0]
    }

    fn map(&self, tokens: &[usize], last_q: usize, zone: Option<usize>, query: impl Fn(usize) -> Vec<f64>) -> RelevanceMap {
        let n = tokens.len();
        let hidden: Vec<Vec<f64>> = (0..n - 1).map(|p| self.hidden(p)).collect();
        let queries: Vec<usize> = (n - last_q..n).collect();
        let rows = queries
            .iter()
            .map(|&t| {
                let q = query(t);
                hidden[..t].iter().map(|h| cosine(&q, h)).collect()
            })
            .collect();
        RelevanceMap {
            tokens: tokens.to_vec(),
            queries,
            rows,
            zone,
        }
    }
}

/// `relevance[t][p] = cos(candidate_t, h_p)` for each of the last `last_q`
/// positions `t` and every `p < t`.
pub fn relevance_map<R: Real>(model: &CharLm, store: &ParamStore<R>, tokens: &[usize], last_q: usize) -> Result<RelevanceMap> {
    check_queries(tokens, last_q)?;
    let enc = encode(model, store, tokens)?;
    Ok(enc.map(tokens, last_q, None, |t| enc.tape.value(enc.first_depth(t).candidate).to_f64_vec()))
}

/// Per-zone split of the candidate pre-activation at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneContributions {
    /// `zones[k]` is `F` with every zone but `k` zeroed, pushed through the
    /// aggregation weights without bias. Width `d_h` each.
    pub zones: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    /// The pre-activation as computed by the cell.
    pub candidate_pre: Vec<f64>,
}

fn contributions<R: Real>(enc: &Encoded<R>, store: &ParamStore<R>, agg_w: &str, agg_b: &str, t: usize) -> Result<ZoneContributions> {
    let trace = enc.first_depth(t);
    let f = enc.tape.value(trace.abstracted.expect("zone transform")).clone();
    let (j, d_o) = (f.shape()[1], f.shape()[2]);
    let param = |name: &str| store.get(name).ok_or_else(|| Error::config("checkpoint", format!("missing parameter {name}")));
    let w = param(agg_w)?;
    let d_h = w.shape()[1];
    let f = f.to_f64_vec();
    let w = w.to_f64_vec();
    let zones = (0..j)
        .map(|k| {
            let mut out = vec![0.0; d_h];
            for i in k * d_o..(k + 1) * d_o {
                for (o, &wv) in out.iter_mut().zip(&w[i * d_h..(i + 1) * d_h]) {
                    *o += f[i] * wv;
                }
            }
            out
        })
        .collect();
    Ok(ZoneContributions {
        zones,
        bias: param(agg_b)?.to_f64_vec(),
        candidate_pre: enc.tape.value(trace.candidate_pre).to_f64_vec(),
    })
}

fn candidate_scope(model: &CharLm) -> Result<(String, String)> {
    let m = model
        .core()
        .candidate_transform(0)
        .ok_or_else(|| Error::config("model", "zone relevance needs an mzu model with a multi-zone candidate"))?;
    Ok((m.name("agg_w"), m.name("agg_b")))
}

/// Zone contributions for every position of `tokens`.
pub fn zone_contributions<R: Real>(model: &CharLm, store: &ParamStore<R>, tokens: &[usize]) -> Result<Vec<ZoneContributions>> {
    let (w, b) = candidate_scope(model)?;
    let enc = encode(model, store, tokens)?;
    (0..tokens.len()).map(|t| contributions(&enc, store, &w, &b, t)).collect()
}

/// One map per abstracted zone (`J` for capsules, `N` otherwise): the
/// query vector is that zone's contribution to the candidate
/// pre-activation.
pub fn zone_relevance_map<R: Real>(
    model: &CharLm,
    store: &ParamStore<R>,
    tokens: &[usize],
    last_q: usize,
) -> Result<Vec<RelevanceMap>> {
    let (w, b) = candidate_scope(model)?;
    check_queries(tokens, last_q)?;
    let enc = encode(model, store, tokens)?;
    let n = tokens.len();
    let per_t: Vec<ZoneContributions> = (n - last_q..n)
        .map(|t| contributions(&enc, store, &w, &b, t))
        .collect::<Result<_>>()?;
    let zones = per_t[0].zones.len();
    Ok((0..zones)
        .map(|k| enc.map(tokens, last_q, Some(k), |t| per_t[t - (n - last_q)].zones[k].clone()))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MapFormat {
    Pgm,
    Csv,
}

impl FromStr for MapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pgm" => Ok(MapFormat::Pgm),
            "csv" => Ok(MapFormat::Csv),
            other => Err(Error::config("format", format!("unknown map format '{other}' (pgm|csv)"))),
        }
    }
}

impl fmt::Display for MapFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MapFormat::Pgm => "pgm",
            MapFormat::Csv => "csv",
        })
    }
}

/// Gray level of a relevance value: `round(255 (r + 1) / 2)`.
pub fn pixel(r: f64) -> u8 {
    (255.0 * (r.clamp(-1.0, 1.0) + 1.0) / 2.0).round() as u8
}

/// Binary P5 image, one row per query and one column per context position.
/// Cells at or after the query position are white.
pub fn pgm_bytes(map: &RelevanceMap) -> Vec<u8> {
    let width = map.context_len();
    let mut out = format!("P5\n{width} {}\n255\n", map.rows.len()).into_bytes();
    for row in &map.rows {
        out.extend(row.iter().map(|&r| pixel(r)));
        out.extend(std::iter::repeat_n(255u8, width - row.len()));
    }
    out
}

/// Header `query,<label of position 0>,…`; each row starts with the query
/// position and leaves cells at or after it empty. Values are written in
/// shortest round-trip form.
pub fn csv_bytes(map: &RelevanceMap, label: &dyn Fn(usize) -> String) -> Result<Vec<u8>> {
    let width = map.context_len();
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    let mut header = vec!["query".to_string()];
    header.extend(map.tokens[..width].iter().map(|&id| label(id)));
    w.write_record(&header).map_err(csv_err)?;
    for (&t, row) in map.queries.iter().zip(&map.rows) {
        let mut rec = vec![t.to_string()];
        rec.extend(row.iter().map(|r| r.to_string()));
        rec.resize(width + 1, String::new());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn export_map(map: &RelevanceMap, path: &Path, format: MapFormat, label: &dyn Fn(usize) -> String) -> Result<()> {
    let bytes = match format {
        MapFormat::Pgm => pgm_bytes(map),
        MapFormat::Csv => csv_bytes(map, label)?,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
