use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub tol: f64,
    /// Coordinates sampled per parameter (all of them when the parameter is smaller).
    pub max_coords: usize,
    /// Denominator floor for the relative error, so that two near-zero
    /// derivatives compare by their absolute difference.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: 200,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` at the largest error.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compares reverse-mode gradients of `f` with central differences
/// `(f(θ+εe) − f(θ−εe)) / 2ε` on sampled coordinates of every parameter.
///
/// `f` must be deterministic and build a scalar loss on the tape it is given.
pub fn gradient_check<F>(params: &ParamStore<f64>, f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let base = tape.scalar(loss);
    if !base.is_finite() {
        return Err(Error::NonFinite(format!("gradient check loss {base}")));
    }
    let mut grads = tape.backward(loss)?;
    grads.fill_missing(params);

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let l = f(&mut t, store)?;
        let v = t.scalar(l);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("gradient check loss {v}")))
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
    };
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let n = params.get(&name).unwrap().numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let analytic = grads.get(&name).unwrap().data().to_vec();
        for i in coords {
            let orig = params.get(&name).unwrap().data()[i];
            work.value_mut(&name).unwrap().data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.value_mut(&name).unwrap().data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.value_mut(&name).unwrap().data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < opts.tol;
    Ok(report)
}
