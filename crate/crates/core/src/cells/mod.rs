//! Recurrent cells: the gated multi-zone cell, its input-less transition
//! variant stacked for deep transition, a GRU baseline, and sequence
//! encoders built on top of them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{count_params, dropout_mask, init_params, Init, ParamSpec, ParamStore, Real, Tape, Var, LAYER_NORM_EPS};
use crate::zones::{zone_disagreement, Composition, GcnActivation, MFunction, MFunctionConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Mzu,
}

/// Which M-function, if any, is swapped for a plain affine map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    None,
    RegularGate,
    RegularTrans,
}

impl FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "mzu" => Ok(CellKind::Mzu),
            other => Err(Error::config("model", format!("unknown model '{other}' (gru|mzu)"))),
        }
    }
}

impl fmt::Display for CellKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellKind::Gru => "gru",
            CellKind::Mzu => "mzu",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(Ablation::None),
            "regular_gate" => Ok(Ablation::RegularGate),
            "regular_trans" => Ok(Ablation::RegularTrans),
            other => Err(Error::config(
                "ablation",
                format!("unknown ablation '{other}' (none|regular_gate|regular_trans)"),
            )),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::RegularGate => "regular_gate",
            Ablation::RegularTrans => "regular_trans",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellConfig {
    pub kind: CellKind,
    pub d_x: usize,
    pub d_h: usize,
    pub zones: usize,
    pub composition: Composition,
    pub out_zones: usize,
    pub routing_iters: usize,
    pub d_ff: usize,
    pub gcn_activation: GcnActivation,
    /// Transition cells after the first cell of every step.
    pub depth: usize,
    pub share_depth_params: bool,
    pub ablation: Ablation,
    pub dropout: f64,
    pub layer_norm: bool,
}

impl CellConfig {
    pub fn mzu(d_x: usize, d_h: usize, composition: Composition) -> Self {
        CellConfig {
            kind: CellKind::Mzu,
            d_x,
            d_h,
            zones: 4,
            composition,
            out_zones: 2,
            routing_iters: 3,
            d_ff: d_h,
            gcn_activation: GcnActivation::Sigmoid,
            depth: 0,
            share_depth_params: true,
            ablation: Ablation::None,
            dropout: 0.0,
            layer_norm: true,
        }
    }

    pub fn gru(d_x: usize, d_h: usize) -> Self {
        CellConfig {
            kind: CellKind::Gru,
            ..Self::mzu(d_x, d_h, Composition::Sat)
        }
    }

    fn m_config(&self, d_x: usize) -> MFunctionConfig {
        MFunctionConfig {
            d_x,
            d_h: self.d_h,
            zones: self.zones,
            composition: self.composition,
            out_zones: self.out_zones,
            routing_iters: self.routing_iters,
            d_ff: self.d_ff,
            gcn_activation: self.gcn_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(Error::config("hidden", "state width must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("rate {} outside [0, 1)", self.dropout)));
        }
        match self.kind {
            CellKind::Gru => {
                if self.ablation != Ablation::None {
                    return Err(Error::config("ablation", "ablations only apply to the mzu model"));
                }
                if self.depth != 0 {
                    return Err(Error::config("depth", "transition depth only applies to the mzu model"));
                }
                Ok(())
            }
            CellKind::Mzu => self.m_config(self.d_x).validate(),
        }
    }
}

/// Source of the gate or candidate pre-activation.
#[derive(Clone, Debug)]
enum Transform {
    Zones(MFunction),
    Affine { scope: String, d_x: usize, d_h: usize },
}

impl Transform {
    fn specs(&self) -> Vec<ParamSpec> {
        match self {
            Transform::Zones(m) => m.param_specs(),
            Transform::Affine { scope, d_x, d_h } => affine_specs(scope, *d_x, *d_h, *d_h),
        }
    }

    fn forward<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Option<Var>, h: Var) -> Result<(Var, Option<crate::zones::MOutput>)> {
        match self {
            Transform::Zones(m) => {
                let out = m.forward(tape, store, x, h)?;
                Ok((out.output, Some(out)))
            }
            Transform::Affine { scope, d_x, .. } => {
                let x = if *d_x > 0 { x } else { None };
                Ok((affine_pair(tape, store, scope, x, h)?, None))
            }
        }
    }
}

fn affine_specs(scope: &str, d_x: usize, d_h: usize, d_out: usize) -> Vec<ParamSpec> {
    let init = Init::Glorot {
        fan_in: d_x + d_h,
        fan_out: d_out,
    };
    let mut specs = Vec::new();
    if d_x > 0 {
        specs.push(ParamSpec::new(format!("{scope}/w_x"), &[d_x, d_out], init));
    }
    specs.push(ParamSpec::new(format!("{scope}/w_h"), &[d_h, d_out], init));
    specs.push(ParamSpec::new(format!("{scope}/b"), &[d_out], Init::Zeros));
    specs
}

/// `x W_x + h W_h + b`, i.e. one affine map of `[x, h]`.
fn affine_pair<R: Real>(tape: &mut Tape<R>, store: &ParamStore<R>, scope: &str, x: Option<Var>, h: Var) -> Result<Var> {
    let w_h = tape.param(store, &format!("{scope}/w_h"))?;
    let b = tape.param(store, &format!("{scope}/b"))?;
    let mut pre = tape.affine(h, w_h, b)?;
    if let Some(x) = x {
        let w_x = tape.param(store, &format!("{scope}/w_x"))?;
        let px = tape.matmul(x, w_x)?;
        pre = tape.add(px, pre)?;
    }
    Ok(pre)
}

fn ln_specs(scope: &str, d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{scope}/gain"), &[d], Init::Ones),
        ParamSpec::new(format!("{scope}/bias"), &[d], Init::Zeros),
    ]
}

#[derive(Clone, Debug)]
struct Depth {
    candidate: Transform,
    gate: Transform,
    ln_candidate: String,
    ln_gate: String,
    has_input: bool,
}

/// Per-call switches for one step.
pub struct StepContext<'a, G: ?Sized> {
    pub training: bool,
    pub capture: bool,
    pub rng: &'a mut G,
}

/// Analysis captures for one depth of one step.
#[derive(Clone, Copy, Debug)]
pub struct DepthTrace {
    /// Candidate pre-activation before layer norm (the M_h output).
    pub candidate_pre: Var,
    /// Candidate activation after layer norm and tanh, before dropout.
    pub candidate: Var,
    pub gate: Var,
    /// Generated zones of the candidate transformation.
    pub zones: Option<Var>,
    /// Abstracted zones of the candidate transformation.
    pub abstracted: Option<Var>,
    /// Generated zones of the gate transformation.
    pub gate_zones: Option<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    pub depths: Vec<DepthTrace>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub h: Var,
    /// Sum of `D_zone` over the batch and every M-function applied.
    pub disagreement: Option<Var>,
    /// Number of M-functions applied per sequence.
    pub m_count: usize,
    pub trace: Option<StepTrace>,
}

/// `(1 − g) ⊙ h_prev + g ⊙ candidate`.
pub fn gated_update<R: Real>(tape: &mut Tape<R>, h_prev: Var, gate: Var, candidate: Var) -> Result<Var> {
    let keep = tape.one_minus(gate);
    let old = tape.mul(keep, h_prev)?;
    let new = tape.mul(gate, candidate)?;
    tape.add(old, new)
}

fn apply_dropout<R: Real, G: Rng + ?Sized>(tape: &mut Tape<R>, x: Var, rate: f64, ctx: &mut StepContext<'_, G>) -> Result<Var> {
    if !ctx.training || rate == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask::<R, G>(tape.shape(x), rate, true, ctx.rng)?;
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// The recurrent core: one cell per time step, plus transition cells for
/// the multi-zone kind.
#[derive(Clone, Debug)]
pub struct RecurrentCore {
    config: CellConfig,
    prefix: String,
    depths: Vec<Depth>,
}

impl RecurrentCore {
    /// `prefix` namespaces every parameter (`""` for none).
    pub fn new(config: CellConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let p = if prefix.is_empty() {
            String::new()
        } else {
            format!("{prefix}/")
        };
        let mut depths = Vec::new();
        if config.kind == CellKind::Mzu {
            for l in 0..=config.depth {
                let d_x = if l == 0 { config.d_x } else { 0 };
                let scope = |role: &str| {
                    if l == 0 || config.share_depth_params {
                        format!("{p}{role}")
                    } else {
                        format!("{p}d{l}/{role}")
                    }
                };
                let make = |role: &str, regular: bool| -> Result<Transform> {
                    Ok(if regular {
                        Transform::Affine {
                            scope: scope(&format!("{role}_affine")),
                            d_x,
                            d_h: config.d_h,
                        }
                    } else {
                        Transform::Zones(MFunction::new(config.m_config(d_x), scope(role))?)
                    })
                };
                depths.push(Depth {
                    candidate: make("mh", config.ablation == Ablation::RegularTrans)?,
                    gate: make("mg", config.ablation == Ablation::RegularGate)?,
                    ln_candidate: format!("{p}ln/d{l}/h"),
                    ln_gate: format!("{p}ln/d{l}/g"),
                    has_input: d_x > 0,
                });
            }
        }
        Ok(RecurrentCore {
            config,
            prefix: p,
            depths,
        })
    }

    pub fn config(&self) -> &CellConfig {
        &self.config
    }

    pub fn d_h(&self) -> usize {
        self.config.d_h
    }

    /// The candidate M-function at `depth`, if that depth uses one.
    pub fn candidate_transform(&self, depth: usize) -> Option<&MFunction> {
        match &self.depths.get(depth)?.candidate {
            Transform::Zones(m) => Some(m),
            Transform::Affine { .. } => None,
        }
    }

    fn gru_name(&self, leaf: &str) -> String {
        format!("{}gru/{leaf}", self.prefix)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let mut specs = Vec::new();
        match c.kind {
            CellKind::Gru => {
                for gate in ["z", "r", "n"] {
                    specs.extend(affine_specs(&self.gru_name(gate), c.d_x, c.d_h, c.d_h));
                    if c.layer_norm {
                        specs.extend(ln_specs(&self.gru_name(&format!("ln_{gate}")), c.d_h));
                    }
                }
            }
            CellKind::Mzu => {
                for d in &self.depths {
                    specs.extend(d.candidate.specs());
                    specs.extend(d.gate.specs());
                    if c.layer_norm {
                        specs.extend(ln_specs(&d.ln_candidate, c.d_h));
                        specs.extend(ln_specs(&d.ln_gate, c.d_h));
                    }
                }
            }
        }
        specs
    }

    pub fn param_count(&self) -> usize {
        count_params(&self.param_specs())
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, store: &mut ParamStore<R>, rng: &mut G) -> Result<()> {
        init_params(store, &self.param_specs(), rng)
    }

    /// M-functions applied per step and sequence (zero for the GRU).
    pub fn m_per_step(&self) -> usize {
        self.depths
            .iter()
            .map(|d| {
                matches!(d.candidate, Transform::Zones(_)) as usize + matches!(d.gate, Transform::Zones(_)) as usize
            })
            .sum()
    }

    fn norm<R: Real>(&self, tape: &mut Tape<R>, store: &ParamStore<R>, x: Var, scope: &str) -> Result<Var> {
        if !self.config.layer_norm {
            return Ok(x);
        }
        let gain = tape.param(store, &format!("{scope}/gain"))?;
        let bias = tape.param(store, &format!("{scope}/bias"))?;
        tape.layer_norm_affine(x, gain, bias, R::lit(LAYER_NORM_EPS))
    }

    /// One time step for a batch: `x` is `[B, d_x]`, `h` is `[B, d_h]`.
    pub fn step<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
        h: Var,
        ctx: &mut StepContext<'_, G>,
    ) -> Result<StepOutput> {
        self.check_widths(tape, x, h)?;
        match self.config.kind {
            CellKind::Gru => self.gru_step(tape, store, x, h, ctx),
            CellKind::Mzu => self.deep_transition_step(tape, store, x, h, ctx),
        }
    }

    fn check_widths<R: Real>(&self, tape: &Tape<R>, x: Var, h: Var) -> Result<()> {
        let (xs, hs) = (tape.shape(x), tape.shape(h));
        if xs.len() != 2 || hs.len() != 2 || xs[0] != hs[0] || xs[1] != self.config.d_x || hs[1] != self.config.d_h {
            return Err(Error::shape(
                "cell_step",
                format!("input {xs:?} and state {hs:?} for d_x={} d_h={}", self.config.d_x, self.config.d_h),
            ));
        }
        Ok(())
    }

    fn deep_transition_step<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
        h: Var,
        ctx: &mut StepContext<'_, G>,
    ) -> Result<StepOutput> {
        let mut state = h;
        let mut disagreement: Option<Var> = None;
        let mut trace = ctx.capture.then(StepTrace::default);
        for depth in &self.depths {
            let input = depth.has_input.then_some(x);
            let (cand_pre, cand_m) = depth.candidate.forward(tape, store, input, state)?;
            let (gate_pre, gate_m) = depth.gate.forward(tape, store, input, state)?;
            for m in [cand_m, gate_m].into_iter().flatten() {
                let d = zone_disagreement(tape, m.zones)?;
                disagreement = Some(match disagreement {
                    Some(acc) => tape.add(acc, d)?,
                    None => d,
                });
            }
            let cand_norm = self.norm(tape, store, cand_pre, &depth.ln_candidate)?;
            let candidate = tape.tanh(cand_norm);
            let gate_norm = self.norm(tape, store, gate_pre, &depth.ln_gate)?;
            let gate = tape.sigmoid(gate_norm);
            let dropped = apply_dropout(tape, candidate, self.config.dropout, ctx)?;
            let next = gated_update(tape, state, gate, dropped)?;
            if let Some(t) = trace.as_mut() {
                t.depths.push(DepthTrace {
                    candidate_pre: cand_pre,
                    candidate,
                    gate,
                    zones: cand_m.map(|m| m.zones),
                    abstracted: cand_m.map(|m| m.abstracted),
                    gate_zones: gate_m.map(|m| m.zones),
                });
            }
            state = next;
        }
        Ok(StepOutput {
            h: state,
            disagreement,
            m_count: self.m_per_step(),
            trace,
        })
    }

    fn gru_step<R: Real, G: Rng + ?Sized>(
        &self,
        tape: &mut Tape<R>,
        store: &ParamStore<R>,
        x: Var,
        h: Var,
        ctx: &mut StepContext<'_, G>,
    ) -> Result<StepOutput> {
        let x_in = (self.config.d_x > 0).then_some(x);
        let z_pre = affine_pair(tape, store, &self.gru_name("z"), x_in, h)?;
        let z_norm = self.norm(tape, store, z_pre, &self.gru_name("ln_z"))?;
        let update = tape.sigmoid(z_norm);
        let r_pre = affine_pair(tape, store, &self.gru_name("r"), x_in, h)?;
        let r_norm = self.norm(tape, store, r_pre, &self.gru_name("ln_r"))?;
        let reset = tape.sigmoid(r_norm);
        let reset_h = tape.mul(reset, h)?;
        let n_pre = affine_pair(tape, store, &self.gru_name("n"), x_in, reset_h)?;
        let n_norm = self.norm(tape, store, n_pre, &self.gru_name("ln_n"))?;
        let candidate = tape.tanh(n_norm);
        let dropped = apply_dropout(tape, candidate, self.config.dropout, ctx)?;
        let next = gated_update(tape, h, update, dropped)?;
        let trace = ctx.capture.then(|| StepTrace {
            depths: vec![DepthTrace {
                candidate_pre: n_pre,
                candidate,
                gate: update,
                zones: None,
                abstracted: None,
                gate_zones: None,
            }],
        });
        Ok(StepOutput {
            h: next,
            disagreement: None,
            m_count: 0,
            trace,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// Runs `core` over `tokens` from a zero state, one sequence (`B = 1`).
/// Returns the state after every position, in input order.
pub fn encode_sequence<R: Real, G: Rng + ?Sized>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    core: &RecurrentCore,
    embedding: &str,
    tokens: &[usize],
    direction: Direction,
    ctx: &mut StepContext<'_, G>,
) -> Result<Vec<StepOutput>> {
    let table = tape.param(store, embedding)?;
    let vocab = tape.shape(table)[0];
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::domain("encode_sequence", format!("token id {bad} outside vocabulary of {vocab}")));
    }
    let order: Vec<usize> = match direction {
        Direction::Forward => tokens.to_vec(),
        Direction::Backward => tokens.iter().rev().copied().collect(),
    };
    let mut h = tape.constant(crate::numerics::Tensor::zeros(&[1, core.d_h()]));
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let x = tape.gather(table, &[id])?;
        let step = core.step(tape, store, x, h, ctx)?;
        h = step.h;
        out.push(step);
    }
    if direction == Direction::Backward {
        out.reverse();
    }
    Ok(out)
}

/// Per-position `[fwd; bwd]` states, `[1, 2·d_h]` each. Passing the same
/// core twice ties the two directions.
pub fn bidirectional_encode<R: Real, G: Rng + ?Sized>(
    tape: &mut Tape<R>,
    store: &ParamStore<R>,
    forward: &RecurrentCore,
    backward: &RecurrentCore,
    embedding: &str,
    tokens: &[usize],
    ctx: &mut StepContext<'_, G>,
) -> Result<Vec<Var>> {
    let fwd = encode_sequence(tape, store, forward, embedding, tokens, Direction::Forward, ctx)?;
    let bwd = encode_sequence(tape, store, backward, embedding, tokens, Direction::Backward, ctx)?;
    fwd.iter().zip(&bwd).map(|(f, b)| tape.concat(&[f.h, b.h], 1)).collect()
}
