//! Right-aligned (numpy-style) broadcasting helpers.

/// Broadcast result shape, or `None` when extents conflict.
pub fn shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let pad = rank - shape.len();
    let mut s = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    s
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
pub fn for_each(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    if n == 0 {
        return;
    }
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    // trailing-suffix broadcast (bias add, per-row scaling)
    if a == out && out.ends_with(b) {
        (0..n).for_each(|i| f(i, i, i % nb));
        return;
    }
    if b == out && out.ends_with(a) {
        (0..n).for_each(|i| f(i, i % na, i));
        return;
    }
    let r = out.len();
    let (sa, sb) = (strides(a, r), strides(b, r));
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        let mut d = r - 1;
        loop {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] || d == 0 {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
            d -= 1;
        }
    }
}
