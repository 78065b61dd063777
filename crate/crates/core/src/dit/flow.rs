//! Rectified-flow interpolant, velocity loss and the Euler sampler.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{DitInput, StyleCondition, StyleDit};
use crate::error::{Error, Result};
use crate::moe::RouteRecord;
use crate::numeric::{Array, Bound, Tape, Var};

pub const DEFAULT_SAMPLER_STEPS: usize = 20;

/// `x_t = (1 − t)·x₀ + t·ε` with regression target `ε − x₀`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x_t: Array,
    pub target: Array,
}

impl FlowState {
    pub fn new(x0: &Array, noise: &Array, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
        }
        if x0.shape() != noise.shape() {
            return Err(Error::Shape {
                op: "flow_state",
                lhs: x0.shape().to_vec(),
                rhs: noise.shape().to_vec(),
            });
        }
        Ok(Self {
            t,
            x_t: x0.zip_map(noise, "flow_state", |a, e| (1.0 - t) * a + t * e)?,
            target: noise.sub(x0)?,
        })
    }
}

/// Standard-normal array drawn from a seeded stream.
pub fn gaussian(shape: &[usize], seed: u64) -> Array {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_from(shape, &mut rng)
}

pub fn gaussian_from(shape: &[usize], rng: &mut impl rand::Rng) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Array::from_parts(shape.to_vec(), data)
}

/// Mean squared error between `pred` and a constant target.
pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: &Array) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// One training example in patch space.
#[derive(Clone, Debug)]
pub struct FlowExample<'a> {
    /// Clean target `x₀`.
    pub target: &'a Array,
    /// Content control `z_c`.
    pub content: &'a Array,
    pub category: usize,
}

/// Velocity MSE of one example at time `t` with noise `noise`, recorded on `tape`.
pub fn flow_loss_on_tape(
    model: &StyleDit,
    tape: &mut Tape,
    bound: &Bound,
    example: &FlowExample<'_>,
    style: Option<StyleCondition<'_>>,
    noise: &Array,
    t: f64,
    trace: Option<&mut Vec<RouteRecord>>,
) -> Result<Var> {
    let state = FlowState::new(example.target, noise, t)?;
    let input = DitInput {
        noisy: state.x_t,
        content: example.content.clone(),
        category: example.category,
        t,
    };
    let pred = model.forward(tape, bound, &input, style, trace)?;
    mse_on_tape(tape, pred, &state.target)
}

/// Velocity loss for a style embedding `e_s` (a `[1, D]` row), noise drawn from `seed`.
pub fn flow_loss(model: &StyleDit, example: &FlowExample<'_>, e_s: Option<&Array>, t: f64, seed: u64) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.store().bind(&mut tape);
    let style = e_s.map(|e| StyleCondition {
        embedding: tape.constant(e.clone()),
        style_id: "",
    });
    let noise = gaussian(example.target.shape(), seed);
    let loss = flow_loss_on_tape(model, &mut tape, &bound, example, style, &noise, t, None)?;
    let value = tape.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("flow loss at t={t}")));
    }
    Ok(value)
}

/// Fixed-step Euler integration from `t = 1` (noise) to `t = 0`.
///
/// Routing is decided once from `e_s`; the decisions are returned with the
/// sample. Without `e_s` (or without MoE sites) the plain model is used.
pub fn sample(
    model: &StyleDit,
    content: &Array,
    category: usize,
    e_s: Option<(&Array, &str)>,
    steps: usize,
    seed: u64,
) -> Result<(Array, Vec<RouteRecord>)> {
    if steps == 0 {
        return Err(Error::invalid("sampler needs at least one step"));
    }
    let mut x = gaussian(content.shape(), seed);
    let mut trace = Vec::new();
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let mut tape = Tape::new();
        let bound = model.store().bind_with(&mut tape, &[]);
        let style = e_s.map(|(e, id)| StyleCondition {
            embedding: tape.constant(e.clone()),
            style_id: id,
        });
        let input = DitInput {
            noisy: x.clone(),
            content: content.clone(),
            category,
            t,
        };
        let record = if i == 0 { Some(&mut trace) } else { None };
        let v = model.forward(&mut tape, &bound, &input, style, record)?;
        x = x.sub(&tape.value(v).scale(dt))?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state at step {i}")));
        }
    }
    Ok((x, trace))
}
