//! Multi-zone transformation: zone generation, composition (attention,
//! graph convolution or capsule routing), aggregation, and the zone
//! disagreement score.

mod stages;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use stages::{
    aggregate_zones, build_adjacency, compose_cap, compose_gcn, compose_sat, generate_zones, squash,
    zone_disagreement, AggregationWeights, GcnActivation, DEGREE_FLOOR,
};

use crate::error::{Error, Result};
use crate::numerics::{count_params, init_params, Init, ParamSpec, ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Composition {
    Sat,
    Gcn,
    Cap,
}

impl Composition {
    pub const ALL: [Composition; 3] = [Composition::Sat, Composition::Gcn, Composition::Cap];

    pub fn name(self) -> &'static str {
        match self {
            Composition::Sat => "sat",
            Composition::Gcn => "gcn",
            Composition::Cap => "cap",
        }
    }
}

impl fmt::Display for Composition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Composition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sat" => Ok(Composition::Sat),
            "gcn" => Ok(Composition::Gcn),
            "cap" => Ok(Composition::Cap),
            other => Err(Error::config("backend", format!("unknown backend '{other}' (sat|gcn|cap)"))),
        }
    }
}

/// Everything that fixes the shapes of one multi-zone transformation.
#[derive(Clone, Debug, PartialEq)]
pub struct MFunctionConfig {
    /// Input width; zero for transition cells.
    pub d_x: usize,
    pub d_h: usize,
    pub zones: usize,
    pub composition: Composition,
    /// Output capsules. Only consulted for `Cap`; the other backends keep one
    /// output zone per input zone.
    pub out_zones: usize,
    pub routing_iters: usize,
    pub d_ff: usize,
    pub gcn_activation: GcnActivation,
}

impl MFunctionConfig {
    pub fn new(d_x: usize, d_h: usize, zones: usize, composition: Composition) -> Self {
        MFunctionConfig {
            d_x,
            d_h,
            zones,
            composition,
            out_zones: 2,
            routing_iters: 3,
            d_ff: d_h,
            gcn_activation: GcnActivation::Sigmoid,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(Error::config("hidden", "state width must be positive"));
        }
        if self.zones == 0 || self.d_h % self.zones != 0 {
            return Err(Error::config(
                "zones",
                format!("{} zones do not divide hidden width {}", self.zones, self.d_h),
            ));
        }
        if self.d_ff == 0 {
            return Err(Error::config("filter", "FFN width must be positive"));
        }
        if self.composition == Composition::Cap {
            if self.out_zones == 0 || self.d_h % self.out_zones != 0 {
                return Err(Error::config(
                    "out_capsules",
                    format!("{} output capsules do not divide hidden width {}", self.out_zones, self.d_h),
                ));
            }
            if self.routing_iters == 0 {
                return Err(Error::config("routing_iters", "capsule routing needs at least one iteration"));
            }
        }
        Ok(())
    }

    pub fn zone_width(&self) -> usize {
        self.d_h / self.zones
    }

    /// Number of composed zones `J`.
    pub fn output_zones(&self) -> usize {
        match self.composition {
            Composition::Cap => self.out_zones,
            _ => self.zones,
        }
    }

    /// Width of each composed zone.
    pub fn output_width(&self) -> usize {
        match self.composition {
            Composition::Cap => self.d_h / self.out_zones,
            _ => self.zone_width(),
        }
    }
}

/// One multi-zone transformation bound to a parameter scope.
///
/// Parameters live under `{scope}/…`. Transition cells that share weights
/// with the first cell use the same scope with `d_x = 0`; the input
/// projection is then simply never touched.
#[derive(Clone, Debug)]
pub struct MFunction {
    config: MFunctionConfig,
    scope: String,
}

/// Intermediate results of one M-function application.
#[derive(Clone, Copy, Debug)]
pub struct MOutput {
    /// `[B, d_h]`, before any activation.
    pub output: Var,
    /// Generated zones `[B, N, d_z]`.
    pub zones: Var,
    /// Composed zones `[B, J, d_o]`.
    pub composed: Var,
    /// Abstracted zones after the FFN, `[B, J, d_o]`.
    pub abstracted: Var,
    /// Attention weights, normalized adjacency input, or routing couplings.
    pub mixing: Var,
}

impl MFunction {
    pub fn new(config: MFunctionConfig, scope: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(MFunction {
            config,
            scope: scope.into(),
        })
    }

    pub fn config(&self) -> &MFunctionConfig {
        &self.config
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    pub fn name(&self, leaf: &str) -> String {
        format!("{}/{}", self.scope, leaf)
    }

    /// Every parameter this instance touches.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let (n, dz, j, d_o) = (c.zones, c.zone_width(), c.output_zones(), c.output_width());
        let glorot = |fan_in, fan_out| Init::Glorot { fan_in, fan_out };
        let mut specs = Vec::new();
        if c.d_x > 0 {
            specs.push(ParamSpec::new(self.name("zone_x"), &[c.d_x, n * dz], glorot(c.d_x + c.d_h, dz)));
        }
        specs.push(ParamSpec::new(self.name("zone_h"), &[c.d_h, n * dz], glorot(c.d_x + c.d_h, dz)));
        match c.composition {
            Composition::Sat => {
                for leaf in ["query", "key", "value"] {
                    specs.push(ParamSpec::new(self.name(leaf), &[dz, dz], glorot(dz, dz)));
                }
            }
            Composition::Gcn => specs.push(ParamSpec::new(self.name("gcn"), &[dz, dz], glorot(dz, dz))),
            Composition::Cap => specs.push(ParamSpec::new(self.name("route"), &[dz, j * d_o], glorot(dz, d_o))),
        }
        specs.push(ParamSpec::new(self.name("ffn_w1"), &[d_o, c.d_ff], glorot(d_o, c.d_ff)));
        specs.push(ParamSpec::new(self.name("ffn_b1"), &[c.d_ff], Init::Zeros));
        specs.push(ParamSpec::new(self.name("ffn_w2"), &[c.d_ff, d_o], glorot(c.d_ff, d_o)));
        specs.push(ParamSpec::new(self.name("ffn_b2"), &[d_o], Init::Zeros));
        specs.push(ParamSpec::new(self.name("agg_w"), &[j * d_o, c.d_h], glorot(j * d_o, c.d_h)));
        specs.push(ParamSpec::new(self.name("agg_b"), &[c.d_h], Init::Zeros));
        specs
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.param_specs())
    }

    /// Adds any missing parameters: uniform Glorot weights, zero biases.
    /// Parameters already present (shared scope) are left alone.
    pub fn init<R: Real, G: Rng + ?Sized>(&self, store: &mut ParamStore<R>, rng: &mut G) -> Result<()> {
        init_params(store, &self.param_specs(), rng)
    }

    /// Applies the transformation to a batch. `x` is `[B, d_x]` (ignored
    /// when `d_x = 0`), `h` is `[B, d_h]`.
    pub fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Option<Var>, h: Var) -> Result<MOutput> {
        let c = &self.config;
        let hs = tape.shape(h);
        if hs.len() != 2 || hs[1] != c.d_h {
            return Err(Error::shape("m_function", format!("state {hs:?}, expected [B, {}]", c.d_h)));
        }
        let input = match (x, c.d_x) {
            (Some(x), d) if d > 0 => {
                let xs = tape.shape(x);
                if xs.len() != 2 || xs[1] != d {
                    return Err(Error::shape("m_function", format!("input {xs:?}, expected [B, {d}]")));
                }
                Some((x, tape.param(store, &self.name("zone_x"))?))
            }
            (None, d) if d > 0 => {
                return Err(Error::shape("m_function", format!("missing input of width {d}")));
            }
            _ => None,
        };
        let w_h = tape.param(store, &self.name("zone_h"))?;
        let zones = generate_zones(tape, input, h, w_h, c.zones)?;
        let (composed, mixing) = match c.composition {
            Composition::Sat => {
                let q = tape.param(store, &self.name("query"))?;
                let k = tape.param(store, &self.name("key"))?;
                let v = tape.param(store, &self.name("value"))?;
                compose_sat(tape, zones, q, k, v)?
            }
            Composition::Gcn => {
                let w = tape.param(store, &self.name("gcn"))?;
                compose_gcn(tape, zones, w, c.gcn_activation)?
            }
            Composition::Cap => {
                let w = tape.param(store, &self.name("route"))?;
                compose_cap(tape, zones, w, c.out_zones, c.routing_iters)?
            }
        };
        let weights = AggregationWeights {
            ffn_w1: tape.param(store, &self.name("ffn_w1"))?,
            ffn_b1: tape.param(store, &self.name("ffn_b1"))?,
            ffn_w2: tape.param(store, &self.name("ffn_w2"))?,
            ffn_b2: tape.param(store, &self.name("ffn_b2"))?,
            agg_w: tape.param(store, &self.name("agg_w"))?,
            agg_b: tape.param(store, &self.name("agg_b"))?,
        };
        let (output, abstracted) = aggregate_zones(tape, composed, &weights)?;
        Ok(MOutput {
            output,
            zones,
            composed,
            abstracted,
            mixing,
        })
    }
}

/// `D_zone` of a single zone set given as rows of `zones` (`[N, d]`).
pub fn zone_disagreement_value<R: Real>(zones: &Tensor<R>) -> Result<f64> {
    if zones.rank() != 2 || zones.shape()[0] == 0 {
        return Err(Error::shape("zone_disagreement", format!("zones {:?}", zones.shape())));
    }
    let mut tape = Tape::inference();
    let n = zones.shape()[0];
    let z = tape.constant(zones.clone().reshape(&[1, n, zones.shape()[1]])?);
    let d = zone_disagreement(&mut tape, z)?;
    Ok(tape.scalar(d).as_f64())
}
