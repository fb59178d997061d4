//! Velocity network, straight-line probability path and the
//! flow-matching regression objective.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::encoder::uniform_init;
use crate::error::{Error, Result};

pub const PREFIX: &str = "flow.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityConfig {
    pub joints: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f32,
}

impl Default for VelocityConfig {
    fn default() -> Self {
        VelocityConfig {
            joints: 17,
            cond_dim: 144,
            hidden: 1024,
            blocks: 2,
            dropout: 0.1,
        }
    }
}

impl VelocityConfig {
    pub fn state_dim(&self) -> usize {
        3 * self.joints
    }

    pub fn input_dim(&self) -> usize {
        self.state_dim() + 1 + self.cond_dim
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn build<R: Rng + ?Sized>(name: &str, inp: usize, out: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        Ok(Linear {
            weight: store.add(
                format!("{PREFIX}{name}.weight"),
                uniform_init(vec![out, inp], inp, rng),
                true,
            )?,
            bias: store.add(format!("{PREFIX}{name}.bias"), uniform_init(vec![out], inp, rng), true)?,
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.weight), tape.param(self.bias));
        tape.affine(x, w, Some(b))
    }
}

/// `f(x_t, t, c)`: input layer and SiLU, residual blocks
/// `h + drop(silu(fc2(drop(silu(fc1(h))))))`, then a linear read-out.
#[derive(Clone, Debug)]
pub struct VelocityNet {
    pub config: VelocityConfig,
    input: Linear,
    blocks: Vec<(Linear, Linear)>,
    output: Linear,
}

impl VelocityNet {
    pub fn build<R: Rng + ?Sized>(config: VelocityConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        if config.joints == 0 || config.hidden == 0 {
            return Err(Error::Parameter("velocity net needs joints and hidden width".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Parameter(format!(
                "dropout rate {} outside [0, 1)",
                config.dropout
            )));
        }
        let h = config.hidden;
        let input = Linear::build("input", config.input_dim(), h, store, rng)?;
        let blocks = (0..config.blocks)
            .map(|i| {
                Ok((
                    Linear::build(&format!("block{i}.fc1"), h, h, store, rng)?,
                    Linear::build(&format!("block{i}.fc2"), h, h, store, rng)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let output = Linear::build("output", h, config.state_dim(), store, rng)?;
        Ok(VelocityNet {
            config,
            input,
            blocks,
            output,
        })
    }

    /// Velocities `[B, 3J]` for states `x [B, 3J]`, times `t [B, 1]` and
    /// conditions `c [B, d']`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        x: Var,
        t: Var,
        c: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let b = tape.value(x).rows();
        for (name, v, width) in [
            ("state x_t", x, self.config.state_dim()),
            ("time t", t, 1),
            ("condition c", c, self.config.cond_dim),
        ] {
            let s = tape.value(v);
            if s.rank() != 2 || s.rows() != b || s.cols() != width {
                return Err(Error::dim(format!("velocity input {name}"), &[b, width], s.shape()));
            }
        }
        let rate = self.config.dropout;
        let z = tape.concat_cols(&[x, t, c])?;
        let a = self.input.apply(tape, z)?;
        let mut h = tape.silu(a);
        for (fc1, fc2) in &self.blocks {
            let y = fc1.apply(tape, h)?;
            let y = tape.silu(y);
            let y = tape.dropout(y, rate, training, rng)?;
            let y = fc2.apply(tape, y)?;
            let y = tape.silu(y);
            let y = tape.dropout(y, rate, training, rng)?;
            h = tape.add(h, y)?;
        }
        self.output.apply(tape, h)
    }
}

/// `(1 - t) x0 + t x1`.
pub fn interpolate(x0: &[f32], x1: &[f32], t: f32) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!("time {t} outside [0, 1]")));
    }
    if x0.len() != x1.len() {
        return Err(Error::dim("interpolate endpoints", &[x0.len()], &[x1.len()]));
    }
    Ok(x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// `x1 - x0`, the time-independent velocity of the straight path.
pub fn ot_velocity(x0: &[f32], x1: &[f32]) -> Vec<f32> {
    x0.iter().zip(x1).map(|(a, b)| b - a).collect()
}

/// Single-state velocity with no gradient bookkeeping.
pub fn velocity<R: Rng + ?Sized>(
    net: &VelocityNet,
    store: &ParamStore,
    x_t: &[f32],
    t: f32,
    c: &[f32],
    training: bool,
    rng: &mut R,
) -> Result<Vec<f32>> {
    let mut tape = Tape::inference(store);
    let x = tape.input(Tensor::new(vec![1, x_t.len()], x_t.to_vec())?);
    let tv = tape.input(Tensor::scalar(t).reshaped(vec![1, 1])?);
    let cv = tape.input(Tensor::new(vec![1, c.len()], c.to_vec())?);
    let v = net.forward(&mut tape, x, tv, cv, training, rng)?;
    Ok(tape.value(v).data().to_vec())
}

/// Noise, data and time of one flow-matching batch, row-major `[B, 3J]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub x0: Vec<f32>,
    pub x1: Vec<f32>,
    pub t: Vec<f32>,
}

impl FlowBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self) -> Result<usize> {
        let b = self.len();
        if b == 0 {
            return Err(Error::Usage("flow-matching loss of an empty batch".into()));
        }
        if self.x0.len() != self.x1.len() || !self.x0.len().is_multiple_of(b) {
            return Err(Error::dim("flow batch x0 vs x1", &[self.x0.len()], &[self.x1.len()]));
        }
        Ok(self.x0.len() / b)
    }

    /// Interpolated states `x_t`, one row per sample.
    pub fn states(&self) -> Result<Tensor> {
        let n = self.check()?;
        let mut out = Vec::with_capacity(self.x0.len());
        for (i, &t) in self.t.iter().enumerate() {
            out.extend(interpolate(
                &self.x0[i * n..(i + 1) * n],
                &self.x1[i * n..(i + 1) * n],
                t,
            )?);
        }
        Tensor::new(vec![self.len(), n], out)
    }

    pub fn targets(&self) -> Result<Tensor> {
        let n = self.check()?;
        Tensor::new(vec![self.len(), n], ot_velocity(&self.x0, &self.x1))
    }
}

/// Mean squared error between predicted velocities `[B, 3J]` and the
/// straight-path targets.
pub fn fm_objective(tape: &mut Tape, pred: Var, batch: &FlowBatch) -> Result<Var> {
    let target = tape.input(batch.targets()?);
    tape.mse(pred, target)
}

/// Flow-matching loss for a batch with condition rows `c [B, d']`.
pub fn fm_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    net: &VelocityNet,
    c: Var,
    batch: &FlowBatch,
    training: bool,
    rng: &mut R,
) -> Result<Var> {
    let x = tape.input(batch.states()?);
    let t = tape.input(Tensor::new(vec![batch.len(), 1], batch.t.clone())?);
    let pred = net.forward(tape, x, t, c, training, rng)?;
    fm_objective(tape, pred, batch)
}
