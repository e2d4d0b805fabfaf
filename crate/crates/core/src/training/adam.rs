use crate::error::{Error, Result};
use crate::numerics::{Gradients, ParamStore, Real};

/// Adam with bias correction and a constant learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One update of every parameter that has a gradient. Each parameter's
    /// step counter advances; parameters without a gradient are untouched.
    pub fn update<R: Real>(&self, store: &mut ParamStore<R>, grads: &Gradients<R>) -> Result<()> {
        let (b1, b2) = (R::lit(self.beta1), R::lit(self.beta2));
        let (one, eps) = (R::one(), R::lit(self.eps));
        for (name, g) in grads.iter() {
            let (value, slots) = store
                .entry_mut(name)
                .ok_or_else(|| Error::domain("adam", format!("gradient for unknown parameter `{name}`")))?;
            if g.shape() != value.shape() {
                return Err(Error::shape(
                    "adam",
                    format!("`{name}` is {:?}, gradient {:?}", value.shape(), g.shape()),
                ));
            }
            slots.step += 1;
            let t = slots.step as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            // lr·m̂/(√v̂+ε) folded into one scale on m and one on √v
            let step_size = R::lit(self.lr / c1);
            let root_c2 = R::lit(c2.sqrt());
            let (m, v) = (slots.m.data_mut(), slots.v.data_mut());
            for (i, (w, &gi)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (one - b1) * gi;
                v[i] = b2 * v[i] + (one - b2) * gi * gi;
                *w -= step_size * m[i] / (v[i].sqrt() / root_c2 + eps);
            }
        }
        Ok(())
    }
}
