//! The individual stages of the multi-zone transformation, written against
//! the tape so every stage is differentiable. All stages are batched: zone
//! sets carry a leading batch axis, `[B, zones, width]`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Var};

/// Degree floor applied before `D^{-1/2}`; cosine edges may be negative.
pub const DEGREE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcnActivation {
    Sigmoid,
    Relu,
}

impl FromStr for GcnActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(GcnActivation::Sigmoid),
            "relu" => Ok(GcnActivation::Relu),
            other => Err(Error::config("gcn_activation", format!("unknown activation '{other}' (sigmoid|relu)"))),
        }
    }
}

impl fmt::Display for GcnActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GcnActivation::Sigmoid => "sigmoid",
            GcnActivation::Relu => "relu",
        })
    }
}

/// `z_i = W_i [x, h]` for every zone, returned as `[B, N, d_z]`.
///
/// `w_x` is `[d_x, N·d_z]` and `w_h` is `[d_h, N·d_z]`; column block `i`
/// of the pair stacked row-wise is `W_i`. A missing `x` (transition cells)
/// skips the input half entirely.
pub fn generate_zones<R: Real>(
    tape: &mut Tape<R>,
    x: Option<(Var, Var)>,
    h: Var,
    w_h: Var,
    zones: usize,
) -> Result<Var> {
    let hs = tape.shape(h).to_vec();
    let ws = tape.shape(w_h).to_vec();
    if hs.len() != 2 || ws.len() != 2 || hs[1] != ws[0] || ws[1] % zones != 0 {
        return Err(Error::shape(
            "generate_zones",
            format!("state {hs:?}, projection {ws:?}, {zones} zones"),
        ));
    }
    let mut z = tape.matmul(h, w_h)?;
    if let Some((x, w_x)) = x {
        let xs = tape.shape(x);
        if xs.len() != 2 || xs[0] != hs[0] {
            return Err(Error::shape(
                "generate_zones",
                format!("input {xs:?} vs state {hs:?}"),
            ));
        }
        let zx = tape.matmul(x, w_x)?;
        z = tape.add(zx, z)?;
    }
    tape.reshape(z, &[hs[0], zones, ws[1] / zones])
}

/// Scaled dot-product self-attention over zones. Returns the new zones and
/// the attention weights `[B, N, N]`.
pub fn compose_sat<R: Real>(tape: &mut Tape<R>, z: Var, w_q: Var, w_k: Var, w_v: Var) -> Result<(Var, Var)> {
    let dz = zone_width(tape, z, "compose_sat")?;
    let q = tape.matmul(z, w_q)?;
    let k = tape.matmul(z, w_k)?;
    let v = tape.matmul(z, w_v)?;
    let scores = tape.bmm(q, k, true)?;
    let scaled = tape.scale(scores, R::lit(1.0 / (dz as f64).sqrt()));
    let attn = tape.softmax(scaled)?;
    let out = tape.bmm(attn, v, false)?;
    Ok((out, attn))
}

/// Cosine adjacency between zones with the diagonal set to 1 afterwards.
pub fn build_adjacency<R: Real>(tape: &mut Tape<R>, z: Var) -> Result<Var> {
    zone_width(tape, z, "build_adjacency")?;
    let zn = tape.l2_normalize(z);
    let a = tape.bmm(zn, zn, true)?;
    tape.fill_diagonal(a, R::one())
}

/// One graph-convolution layer over the zone graph:
/// `act(D^{-1/2} Ã D^{-1/2} Z W_g)`. Returns the new zones and `Ã`.
pub fn compose_gcn<R: Real>(tape: &mut Tape<R>, z: Var, w_g: Var, activation: GcnActivation) -> Result<(Var, Var)> {
    let shape = tape.shape(z).to_vec();
    let adj = build_adjacency(tape, z)?;
    let deg = tape.sum_axis_keep(adj, 2)?;
    let deg = tape.clamp_min(deg, R::lit(DEGREE_FLOOR));
    let d_col = tape.rsqrt(deg)?;
    let d_row = tape.reshape(d_col, &[shape[0], 1, shape[1]])?;
    let left = tape.mul(adj, d_col)?;
    let norm = tape.mul(left, d_row)?;
    let mixed = tape.bmm(norm, z, false)?;
    let pre = tape.matmul(mixed, w_g)?;
    let out = match activation {
        GcnActivation::Sigmoid => tape.sigmoid(pre),
        GcnActivation::Relu => tape.relu(pre),
    };
    Ok((out, adj))
}

/// Capsule squash over the last axis.
pub fn squash<R: Real>(tape: &mut Tape<R>, s: Var) -> Var {
    tape.squash(s)
}

/// Dynamic routing from `N` input zones to `J` output capsules.
///
/// `w_c` is `[d_z, J·d_o]`; column block `j` is the transform shared by all
/// inputs for output capsule `j`. Logits start at zero on every call.
/// Returns the output capsules `[B, J, d_o]` and the final couplings
/// `[B, N, J]`.
pub fn compose_cap<R: Real>(tape: &mut Tape<R>, z: Var, w_c: Var, out_zones: usize, iters: usize) -> Result<(Var, Var)> {
    if iters == 0 {
        return Err(Error::domain("compose_cap", "routing needs at least one iteration"));
    }
    zone_width(tape, z, "compose_cap")?;
    let zs = tape.shape(z).to_vec();
    let (batch, n) = (zs[0], zs[1]);
    let width = tape.shape(w_c)[1];
    if width % out_zones != 0 {
        return Err(Error::shape(
            "compose_cap",
            format!("routing width {width} not divisible by {out_zones} capsules"),
        ));
    }
    let d_o = width / out_zones;
    let pred = tape.matmul(z, w_c)?;
    let pred = tape.reshape(pred, &[batch, n, out_zones, d_o])?;
    let mut logits = tape.constant(crate::numerics::Tensor::zeros(&[batch, n, out_zones]));
    let mut out = None;
    let mut coupling = logits;
    for it in 0..iters {
        coupling = tape.softmax(logits)?;
        let c = tape.reshape(coupling, &[batch, n, out_zones, 1])?;
        let weighted = tape.mul(c, pred)?;
        let s = tape.sum_axis(weighted, 1)?;
        let o = tape.squash(s);
        out = Some(o);
        if it + 1 < iters {
            let o4 = tape.reshape(o, &[batch, 1, out_zones, d_o])?;
            let agree = tape.mul(pred, o4)?;
            let agree = tape.sum_axis(agree, 3)?;
            logits = tape.add(logits, agree)?;
        }
    }
    Ok((out.expect("iters >= 1"), coupling))
}

/// Weights of the shared position-wise FFN and the final aggregation map.
#[derive(Clone, Copy, Debug)]
pub struct AggregationWeights {
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub agg_w: Var,
    pub agg_b: Var,
}

/// `f_j = relu(o_j W1 + b1) W2 + b2` per zone, then `[f_1 … f_J] · W + b`.
/// Returns the aggregated `[B, d_h]` output and the abstracted zones `F`.
pub fn aggregate_zones<R: Real>(tape: &mut Tape<R>, o: Var, w: &AggregationWeights) -> Result<(Var, Var)> {
    let os = tape.shape(o).to_vec();
    if os.len() != 3 {
        return Err(Error::shape("aggregate_zones", format!("zones {os:?}")));
    }
    let hidden = tape.affine(o, w.ffn_w1, w.ffn_b1)?;
    let hidden = tape.relu(hidden);
    let f = tape.affine(hidden, w.ffn_w2, w.ffn_b2)?;
    let fs = tape.shape(f).to_vec();
    let flat = tape.reshape(f, &[fs[0], fs[1] * fs[2]])?;
    let out = tape.affine(flat, w.agg_w, w.agg_b)?;
    Ok((out, f))
}

/// Sum over the batch of `D_zone = -(1/N²) Σ_i Σ_j cos(z_i, z_j)`.
pub fn zone_disagreement<R: Real>(tape: &mut Tape<R>, z: Var) -> Result<Var> {
    zone_width(tape, z, "zone_disagreement")?;
    let n = tape.shape(z)[1];
    let zn = tape.l2_normalize(z);
    let gram = tape.bmm(zn, zn, true)?;
    let total = tape.sum_all(gram);
    Ok(tape.scale(total, R::lit(-1.0 / (n * n) as f64)))
}

fn zone_width<R: Real>(tape: &Tape<R>, z: Var, op: &'static str) -> Result<usize> {
    let s = tape.shape(z);
    if s.len() != 3 || s[1] == 0 {
        return Err(Error::shape(op, format!("zone set must be [B, N>0, d], got {s:?}")));
    }
    Ok(s[2])
}
