//! Straight-line reference implementations used as test oracles. They work
//! on nested `Vec<f64>` and share no code with the library.

#![allow(dead_code)]

use mzu::numerics::{ParamStore, Tensor};
use mzu::zones::Composition;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor<f64>) -> Mat {
    let cols = t.last_dim();
    t.data().chunks(cols.max(1)).map(|r| r.to_vec()).collect()
}

pub fn from_mat(m: &Mat) -> Tensor<f64> {
    let rows = m.len();
    let cols = m.first().map_or(0, |r| r.len());
    let flat: Vec<f64> = m.iter().flatten().copied().collect();
    Tensor::from_f64(&[rows, cols], &flat).unwrap()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let k = b.len();
    let n = b.first().map_or(0, |r| r.len());
    a.iter()
        .map(|row| {
            assert_eq!(row.len(), k);
            (0..n).map(|j| (0..k).map(|p| row[p] * b[p][j]).sum()).collect()
        })
        .collect()
}

pub fn vecmat(v: &[f64], m: &Mat) -> Vec<f64> {
    matmul(&vec![v.to_vec()], m).remove(0)
}

pub fn transpose(a: &Mat) -> Mat {
    if a.is_empty() {
        return Vec::new();
    }
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn cols(m: &Mat, start: usize, len: usize) -> Mat {
    m.iter().map(|r| r[start..start + len].to_vec()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn add_vec(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn squash(s: &[f64]) -> Vec<f64> {
    let n2 = dot(s, s);
    let n = n2.sqrt();
    if n == 0.0 {
        return vec![0.0; s.len()];
    }
    s.iter().map(|v| n2 / (1.0 + n2) * v / n).collect()
}

/// Zones for one example: `z_i = x · Wx_i + h · Wh_i`.
pub fn zones(x: &[f64], h: &[f64], wx: Option<&Mat>, wh: &Mat, n: usize) -> Mat {
    let dz = wh[0].len() / n;
    (0..n)
        .map(|i| {
            let mut z = vecmat(h, &cols(wh, i * dz, dz));
            if let Some(wx) = wx {
                z = add_vec(&z, &vecmat(x, &cols(wx, i * dz, dz)));
            }
            z
        })
        .collect()
}

pub fn attention(z: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> (Mat, Mat) {
    let q = matmul(z, wq);
    let k = matmul(z, wk);
    let v = matmul(z, wv);
    let scale = (z[0].len() as f64).sqrt();
    let mut weights = Vec::new();
    let mut out = Vec::new();
    for qi in &q {
        let logits: Vec<f64> = k.iter().map(|kj| dot(qi, kj) / scale).collect();
        let a = softmax(&logits);
        let mut o = vec![0.0; v[0].len()];
        for (j, vj) in v.iter().enumerate() {
            for (oc, vc) in o.iter_mut().zip(vj) {
                *oc += a[j] * vc;
            }
        }
        weights.push(a);
        out.push(o);
    }
    (out, weights)
}

pub fn adjacency(z: &Mat) -> Mat {
    let n = z.len();
    let mut a = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            a[i][j] = if i == j { 1.0 } else { cosine(&z[i], &z[j]) };
        }
    }
    a
}

pub fn gcn(z: &Mat, wg: &Mat, relu: bool) -> Mat {
    let a = adjacency(z);
    let n = z.len();
    let d: Vec<f64> = a.iter().map(|r| r.iter().sum::<f64>().max(1e-3)).collect();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            l[i][j] = a[i][j] / (d[i].sqrt() * d[j].sqrt());
        }
    }
    let pre = matmul(&matmul(&l, z), wg);
    pre.into_iter()
        .map(|r| r.into_iter().map(|v| if relu { v.max(0.0) } else { sigmoid(v) }).collect())
        .collect()
}

/// Dynamic routing, one literal pass per iteration. Returns outputs and the
/// couplings used in every iteration.
pub fn routing(z: &Mat, wc: &Mat, j_out: usize, iters: usize) -> (Mat, Vec<Mat>) {
    let n = z.len();
    let d_o = wc[0].len() / j_out;
    let pred: Vec<Mat> = z
        .iter()
        .map(|zi| (0..j_out).map(|j| vecmat(zi, &cols(wc, j * d_o, d_o))).collect())
        .collect();
    let mut b = vec![vec![0.0; j_out]; n];
    let mut out = Vec::new();
    let mut history = Vec::new();
    for _ in 0..iters {
        let c: Mat = b.iter().map(|r| softmax(r)).collect();
        out = (0..j_out)
            .map(|j| {
                let mut s = vec![0.0; d_o];
                for i in 0..n {
                    for k in 0..d_o {
                        s[k] += c[i][j] * pred[i][j][k];
                    }
                }
                squash(&s)
            })
            .collect();
        for i in 0..n {
            for j in 0..j_out {
                b[i][j] += dot(&pred[i][j], &out[j]);
            }
        }
        history.push(c);
    }
    (out, history)
}

pub struct AggOracle<'a> {
    pub w1: &'a Mat,
    pub b1: &'a [f64],
    pub w2: &'a Mat,
    pub b2: &'a [f64],
    pub w: &'a Mat,
    pub b: &'a [f64],
}

/// Per-zone FFN, concatenation, final linear map. Returns output and F.
pub fn aggregate(o: &Mat, p: &AggOracle) -> (Vec<f64>, Mat) {
    let f: Mat = o
        .iter()
        .map(|oj| {
            let hidden: Vec<f64> = add_vec(&vecmat(oj, p.w1), p.b1).into_iter().map(|v| v.max(0.0)).collect();
            add_vec(&vecmat(&hidden, p.w2), p.b2)
        })
        .collect();
    let flat: Vec<f64> = f.iter().flatten().copied().collect();
    (add_vec(&vecmat(&flat, p.w), p.b), f)
}

pub fn disagreement(z: &Mat) -> f64 {
    let n = z.len() as f64;
    let mut s = 0.0;
    for a in z {
        for b in z {
            s += cosine(a, b);
        }
    }
    -s / (n * n)
}

pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) / (var + 1e-5).sqrt() * g + b)
        .collect()
}

pub fn random_mat<G: rand::Rng>(rows: usize, cols: usize, rng: &mut G) -> Mat {
    (0..rows).map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

pub fn random_vec<G: rand::Rng>(n: usize, rng: &mut G) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn flat(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

pub fn param_mat(store: &ParamStore<f64>, name: &str) -> Mat {
    to_mat(store.get(name).unwrap_or_else(|| panic!("missing {name}")))
}

pub fn param_vec(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.get(name).unwrap_or_else(|| panic!("missing {name}")).to_f64_vec()
}

/// End-to-end M-function for one example, composed from the stage oracles.
/// Returns the output and the generated zones.
pub fn m_apply(
    store: &ParamStore<f64>,
    scope: &str,
    kind: Composition,
    x: Option<&[f64]>,
    h: &[f64],
    n: usize,
    j: usize,
    iters: usize,
) -> (Vec<f64>, Mat) {
    let (out, z, _) = m_apply_full(store, scope, kind, x, h, n, j, iters);
    (out, z)
}

/// As [`m_apply`], also returning the abstracted zones.
#[allow(clippy::too_many_arguments)]
pub fn m_apply_full(
    store: &ParamStore<f64>,
    scope: &str,
    kind: Composition,
    x: Option<&[f64]>,
    h: &[f64],
    n: usize,
    j: usize,
    iters: usize,
) -> (Vec<f64>, Mat, Mat) {
    let g = |leaf: &str| param_mat(store, &format!("{scope}/{leaf}"));
    let gv = |leaf: &str| param_vec(store, &format!("{scope}/{leaf}"));
    let wx = x.map(|_| g("zone_x"));
    let z = zones(x.unwrap_or(&[]), h, wx.as_ref(), &g("zone_h"), n);
    let o = match kind {
        Composition::Sat => attention(&z, &g("query"), &g("key"), &g("value")).0,
        Composition::Gcn => gcn(&z, &g("gcn"), false),
        Composition::Cap => routing(&z, &g("route"), j, iters).0,
    };
    let (w1, w2, w) = (g("ffn_w1"), g("ffn_w2"), g("agg_w"));
    let (b1, b2, b) = (gv("ffn_b1"), gv("ffn_b2"), gv("agg_b"));
    let agg = AggOracle {
        w1: &w1,
        b1: &b1,
        w2: &w2,
        b2: &b2,
        w: &w,
        b: &b,
    };
    let (out, f) = aggregate(&o, &agg);
    (out, z, f)
}

/// `(1 − g) h + g c`, coordinate-wise.
pub fn mix(h: &[f64], g: &[f64], c: &[f64]) -> Vec<f64> {
    h.iter().zip(g.iter().zip(c)).map(|(h, (g, c))| (1.0 - g) * h + g * c).collect()
}

/// Moves a freshly initialised store to a generic point: every rank-1
/// parameter gets `base + 0.5u` (base 1 for gains), so no bias is zero and
/// no layer norm is the identity.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    use rand::SeedableRng;
    let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let t = store.get(&name).unwrap().clone();
        if t.rank() == 1 {
            let base = if name.ends_with("gain") { 1.0 } else { 0.0 };
            let v: Vec<f64> = random_vec(t.numel(), &mut r).iter().map(|x| base + 0.5 * x).collect();
            store.set(&name, Tensor::vector(&v)).unwrap();
        }
    }
}
