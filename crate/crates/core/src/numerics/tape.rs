//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each node
//! remembers the primitive that produced it, so [`Tape::backward`] can replay
//! the record in reverse and accumulate vector-Jacobian products.

use std::collections::{BTreeMap, HashMap};

use super::{broadcast, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Guard below which a vector norm counts as zero (cosine, normalize, squash).
pub const NORM_GUARD: f64 = 1e-12;

#[derive(Clone, Debug)]
enum Op<R> {
    Constant,
    Param,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, R),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Rsqrt(Var),
    ClampMin(Var, R),
    Softmax(Var),
    L2Normalize { x: Var, norms: Vec<R> },
    Squash { x: Var, norms: Vec<R> },
    LayerNorm { x: Var, inv_std: Vec<R> },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<R> },
    FillDiagonal(Var),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
}

/// Append-only record of one forward pass.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
    recording: bool,
}

/// Gradients keyed by parameter name, in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<R> {
    map: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    pub fn new() -> Self {
        Gradients {
            map: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.map.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<R>) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.map.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds zero tensors for every store parameter the tape never touched.
    pub fn fill_missing(&mut self, store: &ParamStore<R>) {
        for (name, value) in store.iter() {
            self.map
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(value.shape()));
        }
    }

    /// Global L2 norm over every gradient tensor.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .map(|g| g.sq_norm().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Elementwise sum of two gradient maps (union of keys).
    pub fn merged(mut self, other: &Gradients<R>) -> Self {
        for (name, g) in &other.map {
            match self.map.get_mut(name) {
                Some(mine) => mine.add_assign(g),
                None => {
                    self.map.insert(name.clone(), g.clone());
                }
            }
        }
        self
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&d, lead)) => (lead.iter().product(), d),
        None => (1, 1),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
            recording: true,
        }
    }

    /// A tape that keeps values but records no derivative information.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> R {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        let op = if self.recording || matches!(op, Op::Param) {
            op
        } else {
            Op::Constant
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Registers a store parameter as a leaf. Repeated calls with the same
    /// name return the same handle so gradients accumulate over fan-out.
    pub fn param(&mut self, store: &ParamStore<R>, name: &str) -> Result<Var> {
        if let Some(&v) = self.param_index.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::domain("param", format!("unknown parameter `{name}`")))?
            .clone();
        let v = self.push(value, Op::Param);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_vars(&self) -> &[(String, Var)] {
        &self.params
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = split_last(sa);
        let n = sb[1];
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut c = vec![R::zero(); m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        R::gemm(m, k, n, R::one(), av, k as isize, 1, bv, n as isize, 1, R::zero(), &mut c, n as isize, 1);
        Ok(self.push(Tensor::new(&out_shape, c)?, Op::MatMul(a, b)))
    }

    /// Batched product over the leading axis: `a[B,m,k] · b[B,k,n]`, or
    /// `a[B,m,k] · b[B,n,k]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(
                "bmm",
                format!("{sa:?} x {sb:?} (transpose_b={transpose_b})"),
            ));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut c = vec![R::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (rsb, csb) = if transpose_b { (1, k as isize) } else { (n as isize, 1) };
        for i in 0..batch {
            R::gemm(
                m,
                k,
                n,
                R::one(),
                &av[i * m * k..(i + 1) * m * k],
                k as isize,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                R::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        Ok(self.push(
            Tensor::new(&[batch, m, n], c)?,
            Op::BatchMatMul { a, b, transpose_b },
        ))
    }

    // ---- broadcasting elementwise --------------------------------------

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(R, R) -> R) -> Result<Tensor<R>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast::shape(sa, sb)
            .ok_or_else(|| Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![R::zero(); out.iter().product()];
        broadcast::for_each(&out, sa, sb, |o, ia, ib| data[o] = f(av[ia], bv[ib]));
        Tensor::new(&out, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: R) -> Var {
        let t = self.value(x).map(|v| v * k);
        self.push(t, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: R) -> Var {
        let t = self.value(x).map(|v| v + k);
        self.push(t, Op::AddScalar(x))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -R::one());
        self.add_scalar(neg, R::one())
    }

    // ---- pointwise nonlinearities --------------------------------------

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| R::one() / (R::one() + (-v).exp()));
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.tanh());
        self.push(t, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(R::zero()));
        self.push(t, Op::Relu(x))
    }

    /// `x^(-1/2)`; every entry must be positive.
    pub fn rsqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= R::zero()) {
            return Err(Error::domain("rsqrt", "non-positive input"));
        }
        let t = self.value(x).map(|v| v.sqrt().recip());
        Ok(self.push(t, Op::Rsqrt(x)))
    }

    /// `max(x, lo)`; the gradient is cut where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, lo: R) -> Var {
        let t = self.value(x).map(|v| v.max(lo));
        self.push(t, Op::ClampMin(x, lo))
    }

    // ---- row-wise (last axis) primitives --------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, d) = split_last(xv.shape());
        if d == 0 || xv.rank() == 0 {
            return Err(Error::domain("softmax", "softmax over an empty row"));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut total = R::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, Op::Softmax(x)))
    }

    /// Scales each last-axis row to unit L2 norm; rows with norm below
    /// [`NORM_GUARD`] map to zero and pass no gradient.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        let mut norms = Vec::new();
        if d > 0 {
            for row in out.data_mut().chunks_exact_mut(d) {
                let n = row.iter().map(|&v| v * v).sum::<R>().sqrt();
                norms.push(n);
                if n > R::lit(NORM_GUARD) {
                    row.iter_mut().for_each(|v| *v /= n);
                } else {
                    row.iter_mut().for_each(|v| *v = R::zero());
                }
            }
        }
        self.push(out, Op::L2Normalize { x, norms })
    }

    /// Capsule squash over the last axis: `|s|²/(1+|s|²) · s/|s|`, zero at 0.
    pub fn squash(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.clone();
        let mut norms = Vec::new();
        if d > 0 {
            for row in out.data_mut().chunks_exact_mut(d) {
                let sq = row.iter().map(|&v| v * v).sum::<R>();
                let n = sq.sqrt();
                norms.push(n);
                let k = if n > R::lit(NORM_GUARD) { n / (R::one() + sq) } else { R::zero() };
                row.iter_mut().for_each(|v| *v *= k);
            }
        }
        self.push(out, Op::Squash { x, norms })
    }

    /// Normalizes each last-axis row to zero mean and unit variance
    /// (population variance, `eps` inside the square root).
    pub fn layer_norm(&mut self, x: Var, eps: R) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::domain("layer_norm", "empty row"));
        }
        let dn = R::from_usize(d).unwrap();
        let mut out = xv.clone();
        let mut inv_std = Vec::new();
        for row in out.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().copied().sum::<R>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let is = (var + eps).sqrt().recip();
            inv_std.push(is);
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        Ok(self.push(out, Op::LayerNorm { x, inv_std }))
    }

    // ---- reductions & structure -----------------------------------------

    /// Sums over `axis`, dropping it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.push(Tensor::new(&out_shape, out)?, Op::SumAxis { x, axis }))
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis_keep(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let s = self.sum_axis(x, axis)?;
        shape[axis] = 1;
        self.reshape(s, &shape)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::domain("mean", "mean of an empty tensor"));
        }
        let s = self.sum_all(x);
        Ok(self.scale(s, R::one() / R::from_usize(n).unwrap()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Slice { x, axis, start }))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape("gather", format!("table must be 2-d, got {shape:?}")));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::domain(
                "gather",
                format!("id {bad} out of range for {rows} rows"),
            ));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy (nats) of `logits[n, V]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::shape(
                "cross_entropy",
                format!("logits {shape:?} vs {} targets", targets.len()),
            ));
        }
        let (n, v) = (shape[0], shape[1]);
        if n == 0 || v == 0 {
            return Err(Error::domain("cross_entropy", "empty logits"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::domain("cross_entropy", format!("target {bad} >= {v}")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![R::zero(); n * v];
        let mut total = R::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut z = R::zero();
            for (p, &l) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (l - max).exp();
                z += *p;
            }
            probs[r * v..(r + 1) * v].iter_mut().for_each(|p| *p /= z);
            total += z.ln() + max - row[t];
        }
        let loss = total / R::from_usize(n).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Sets the diagonal of every trailing `n × n` block to `value`.
    pub fn fill_diagonal(&mut self, x: Var, value: R) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        if r < 2 || shape[r - 1] != shape[r - 2] {
            return Err(Error::shape("fill_diagonal", format!("{shape:?} is not square")));
        }
        let n = shape[r - 1];
        let mut t = self.value(x).clone();
        for block in t.data_mut().chunks_exact_mut((n * n).max(1)) {
            for i in 0..n {
                block[i * n + i] = value;
            }
        }
        Ok(self.push(t, Op::FillDiagonal(x)))
    }

    // ---- composites ------------------------------------------------------

    /// Row-wise cosine similarity over the last axis; zero-norm rows give 0.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.l2_normalize(a);
        let nb = self.l2_normalize(b);
        let p = self.mul(na, nb)?;
        let last = self.shape(p).len().saturating_sub(1);
        if self.shape(p).is_empty() {
            return Ok(p);
        }
        self.sum_axis(p, last)
    }

    /// `layer_norm(x) * gain + bias` with gain/bias over the last axis.
    pub fn layer_norm_affine(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "x last dim {d}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let n = self.layer_norm(x, eps)?;
        let g = self.mul(n, gain)?;
        self.add(g, bias)
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    // ---- reverse sweep ---------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor<R>>>> {
        if !self.recording {
            return Err(Error::domain("backward", "tape was not recording"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<R>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(grads)
    }

    /// Reverse sweep from a scalar loss to every registered parameter.
    /// Parameters the loss does not reach receive zero tensors.
    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        let mut all = self.gradients(loss)?;
        let mut out = Gradients::new();
        for (name, v) in &self.params {
            let g = all[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.shape(*v)));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = split_last(av.shape());
                let n = bv.shape()[1];
                {
                    let ga = acc(grads, *a, av.shape());
                    R::gemm(m, n, k, R::one(), gd, n as isize, 1, bv.data(), 1, n as isize, R::one(), ga, k as isize, 1);
                }
                let gb = acc(grads, *b, bv.shape());
                R::gemm(k, m, n, R::one(), av.data(), 1, k as isize, gd, n as isize, 1, R::one(), gb, n as isize, 1);
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                {
                    let ga = acc(grads, *a, av.shape());
                    for t in 0..batch {
                        let gt = &gd[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        // ga = g · bᵀ (b: [k,n]) or g · b (b: [n,k])
                        let (rsb, csb) = if *transpose_b { (k as isize, 1) } else { (1, n as isize) };
                        R::gemm(m, n, k, R::one(), gt, n as isize, 1, bt, rsb, csb, R::one(), &mut ga[t * m * k..(t + 1) * m * k], k as isize, 1);
                    }
                }
                let gb = acc(grads, *b, bv.shape());
                for t in 0..batch {
                    let gt = &gd[t * m * n..(t + 1) * m * n];
                    let at = &ad[t * m * k..(t + 1) * m * k];
                    let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        // gb[n,k] = gᵀ · a
                        R::gemm(n, m, k, R::one(), gt, 1, n as isize, at, k as isize, 1, R::one(), gbt, k as isize, 1);
                    } else {
                        // gb[k,n] = aᵀ · g
                        R::gemm(k, m, n, R::one(), at, 1, k as isize, gt, n as isize, 1, R::one(), gbt, n as isize, 1);
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -R::one() } else { R::one() };
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                {
                    let ga = acc(grads, *a, &sa);
                    broadcast::for_each(y.shape(), &sa, &sb, |o, ia, _| ga[ia] += gd[o]);
                }
                let gb = acc(grads, *b, &sb);
                broadcast::for_each(y.shape(), &sa, &sb, |o, _, ib| gb[ib] += sign * gd[o]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ad, bd) = (av.data(), bv.data());
                {
                    let ga = acc(grads, *a, av.shape());
                    broadcast::for_each(y.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                        ga[ia] += gd[o] * bd[ib]
                    });
                }
                let gb = acc(grads, *b, bv.shape());
                broadcast::for_each(y.shape(), av.shape(), bv.shape(), |o, ia, ib| {
                    gb[ib] += gd[o] * ad[ia]
                });
            }
            Op::Scale(x, k) => {
                let gx = acc(grads, *x, y.shape());
                gx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * *k);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                let gx = acc(grads, *x, &shape);
                gx.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
            }
            Op::Sigmoid(x) => {
                let gx = acc(grads, *x, y.shape());
                for ((d, &g), &s) in gx.iter_mut().zip(gd).zip(y.data()) {
                    *d += g * s * (R::one() - s);
                }
            }
            Op::Tanh(x) => {
                let gx = acc(grads, *x, y.shape());
                for ((d, &g), &t) in gx.iter_mut().zip(gd).zip(y.data()) {
                    *d += g * (R::one() - t * t);
                }
            }
            Op::Relu(x) => {
                let gx = acc(grads, *x, y.shape());
                for ((d, &g), &v) in gx.iter_mut().zip(gd).zip(y.data()) {
                    if v > R::zero() {
                        *d += g;
                    }
                }
            }
            Op::Rsqrt(x) => {
                let half = R::lit(0.5);
                let gx = acc(grads, *x, y.shape());
                for ((d, &g), &r) in gx.iter_mut().zip(gd).zip(y.data()) {
                    *d -= g * half * r * r * r;
                }
            }
            Op::ClampMin(x, lo) => {
                let xd = self.value(*x).data();
                let gx = acc(grads, *x, y.shape());
                for ((d, &g), &v) in gx.iter_mut().zip(gd).zip(xd) {
                    if v > *lo {
                        *d += g;
                    }
                }
            }
            Op::Softmax(x) => {
                let d = y.last_dim();
                let gx = acc(grads, *x, y.shape());
                for ((gxr, yr), gr) in gx.chunks_exact_mut(d).zip(y.rows()).zip(gd.chunks_exact(d)) {
                    let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let d = y.last_dim();
                if d > 0 {
                    let gx = acc(grads, *x, y.shape());
                    for (((gxr, yr), gr), &n) in gx
                        .chunks_exact_mut(d)
                        .zip(y.rows())
                        .zip(gd.chunks_exact(d))
                        .zip(norms)
                    {
                        if n <= R::lit(NORM_GUARD) {
                            continue;
                        }
                        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                            *o += (gv - yv * dot) / n;
                        }
                    }
                }
            }
            Op::Squash { x, norms } => {
                let xv = self.value(*x);
                let d = y.last_dim();
                if d > 0 {
                    let gx = acc(grads, *x, y.shape());
                    for (((gxr, xr), gr), &n) in gx
                        .chunks_exact_mut(d)
                        .zip(xv.rows())
                        .zip(gd.chunks_exact(d))
                        .zip(norms)
                    {
                        if n <= R::lit(NORM_GUARD) {
                            continue;
                        }
                        let sq = n * n;
                        let denom = R::one() + sq;
                        let f = n / denom;
                        let fp = (R::one() - sq) / (denom * denom);
                        let xg: R = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let k = fp / n * xg;
                        for ((o, &xv), &gv) in gxr.iter_mut().zip(xr).zip(gr) {
                            *o += f * gv + k * xv;
                        }
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let d = y.last_dim();
                let dn = R::from_usize(d).unwrap();
                let gx = acc(grads, *x, y.shape());
                for (((gxr, yr), gr), &is) in gx
                    .chunks_exact_mut(d)
                    .zip(y.rows())
                    .zip(gd.chunks_exact(d))
                    .zip(inv_std)
                {
                    let mg = gr.iter().copied().sum::<R>() / dn;
                    let mgy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<R>() / dn;
                    for ((o, &yv), &gv) in gxr.iter_mut().zip(yr).zip(gr) {
                        *o += is * (gv - mg - yv * mgy);
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = axis_split(&shape, *axis);
                let gx = acc(grads, *x, &shape);
                for o in 0..outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for (dst, &s) in gx[base..base + inner].iter_mut().zip(src) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                let g0 = gd[0];
                let gx = acc(grads, *x, &shape);
                gx.iter_mut().for_each(|d| *d += g0);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let shape = self.shape(p).to_vec();
                    let len = shape[*axis];
                    let gp = acc(grads, p, &shape);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        for (dst, &s) in gp[o * len * inner..(o + 1) * len * inner]
                            .iter_mut()
                            .zip(&gd[src..src + len * inner])
                        {
                            *dst += s;
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, full, inner) = axis_split(&shape, *axis);
                let len = y.shape()[*axis];
                let gx = acc(grads, *x, &shape);
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    for (dst, &s) in gx[base..base + len * inner]
                        .iter_mut()
                        .zip(&gd[o * len * inner..(o + 1) * len * inner])
                    {
                        *dst += s;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let shape = self.shape(*table).to_vec();
                let d = shape[1];
                let gt = acc(grads, *table, &shape);
                for (r, &id) in ids.iter().enumerate() {
                    for (dst, &s) in gt[id * d..(id + 1) * d].iter_mut().zip(&gd[r * d..(r + 1) * d]) {
                        *dst += s;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let v = shape[1];
                let k = gd[0] / R::from_usize(targets.len()).unwrap();
                let gl = acc(grads, *logits, &shape);
                for (dst, &p) in gl.iter_mut().zip(probs) {
                    *dst += k * p;
                }
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= k;
                }
            }
            Op::FillDiagonal(x) => {
                let n = y.last_dim();
                let gx = acc(grads, *x, y.shape());
                for (gb, gr) in gx.chunks_exact_mut((n * n).max(1)).zip(gd.chunks_exact((n * n).max(1))) {
                    for (j, (dst, &s)) in gb.iter_mut().zip(gr).enumerate() {
                        if j / n != j % n {
                            *dst += s;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn acc<'a, R: Real>(grads: &'a mut [Option<Tensor<R>>], v: Var, shape: &[usize]) -> &'a mut [R] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape))
        .data_mut()
}

/// Primitive selector for [`forward_primitive`].
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    BatchMatMul { transpose_b: bool },
    Add,
    Sub,
    Mul,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sigmoid,
    Tanh,
    Relu,
    Softmax,
    L2Normalize,
    Cosine,
    Squash,
    Scale(f64),
    SumAll,
    SumAxis(usize),
    MeanAll,
    Gather(Vec<usize>),
    LayerNorm { eps: f64 },
    CrossEntropy(Vec<usize>),
    FillDiagonal(f64),
    ClampMin(f64),
    Rsqrt,
}

impl<R: Real> Tape<R> {
    /// Applies `prim` to values already on the tape.
    pub fn apply(&mut self, prim: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match prim {
            Primitive::MatMul
            | Primitive::BatchMatMul { .. }
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Cosine => 2,
            Primitive::Concat { .. } => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::shape(
                "apply",
                format!("{prim:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        let x = inputs[0];
        Ok(match prim {
            Primitive::MatMul => self.matmul(x, inputs[1])?,
            Primitive::BatchMatMul { transpose_b } => self.bmm(x, inputs[1], *transpose_b)?,
            Primitive::Add => self.add(x, inputs[1])?,
            Primitive::Sub => self.sub(x, inputs[1])?,
            Primitive::Mul => self.mul(x, inputs[1])?,
            Primitive::Cosine => self.cosine(x, inputs[1])?,
            Primitive::Concat { axis } => self.concat(inputs, *axis)?,
            Primitive::Slice { axis, start, len } => self.slice(x, *axis, *start, *len)?,
            Primitive::Sigmoid => self.sigmoid(x),
            Primitive::Tanh => self.tanh(x),
            Primitive::Relu => self.relu(x),
            Primitive::Softmax => self.softmax(x)?,
            Primitive::L2Normalize => self.l2_normalize(x),
            Primitive::Squash => self.squash(x),
            Primitive::Scale(k) => self.scale(x, R::lit(*k)),
            Primitive::SumAll => self.sum_all(x),
            Primitive::SumAxis(axis) => self.sum_axis(x, *axis)?,
            Primitive::MeanAll => self.mean_all(x)?,
            Primitive::Gather(ids) => self.gather(x, ids)?,
            Primitive::LayerNorm { eps } => self.layer_norm(x, R::lit(*eps))?,
            Primitive::CrossEntropy(targets) => self.cross_entropy(x, targets)?,
            Primitive::FillDiagonal(v) => self.fill_diagonal(x, R::lit(*v))?,
            Primitive::ClampMin(lo) => self.clamp_min(x, R::lit(*lo)),
            Primitive::Rsqrt => self.rsqrt(x)?,
        })
    }
}

/// Evaluates one primitive on plain tensors without keeping a record.
pub fn forward_primitive<R: Real>(prim: &Primitive, inputs: &[Tensor<R>]) -> Result<Tensor<R>> {
    let mut tape = Tape::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = tape.apply(prim, &vars)?;
    Ok(tape.value(out).clone())
}
