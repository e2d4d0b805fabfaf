//! Dense tensors, differentiable primitives, reverse-mode gradients and the
//! finite-difference checker everything else is validated against.

pub mod broadcast;
mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

use rand::Rng;

pub use gradcheck::{gradient_check, GradCheckOptions, GradCheckReport};
pub use params::{count_params, init_params, Init, ParamSpec, ParamStore, Slots};
pub use real::Real;
pub use tape::{forward_primitive, Gradients, Primitive, Tape, Var, NORM_GUARD};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn global_norm_clip<R: Real>(grads: &mut Gradients<R>, max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "max_norm must be positive");
    let norm = grads.global_norm();
    if norm > max_norm {
        let k = R::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}

/// `(x - mean) / sqrt(var + eps) * gain + bias` over a single vector.
pub fn layer_norm<R: Real>(x: &Tensor<R>, gain: &Tensor<R>, bias: &Tensor<R>, eps: f64) -> Result<Tensor<R>> {
    if x.rank() != 1 || gain.shape() != x.shape() || bias.shape() != x.shape() {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::domain("layer_norm", "eps must be positive"));
    }
    let mut tape = Tape::inference();
    let (xv, g, b) = (
        tape.constant(x.clone()),
        tape.constant(gain.clone()),
        tape.constant(bias.clone()),
    );
    let y = tape.layer_norm_affine(xv, g, b, R::lit(eps))?;
    Ok(tape.value(y).clone())
}

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`. Outside training the mask is all ones.
pub fn dropout_mask<R: Real, G: Rng + ?Sized>(
    shape: &[usize],
    rate: f64,
    training: bool,
    rng: &mut G,
) -> Result<Tensor<R>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::domain("dropout", format!("rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(Tensor::ones(shape));
    }
    let keep = R::lit(1.0 / (1.0 - rate));
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < rate { R::zero() } else { keep })
        .collect();
    Tensor::new(shape, data)
}
