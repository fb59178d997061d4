//! Fixed-step explicit Runge-Kutta integration over `t in [0, 1]` and
//! multi-hypothesis sampling from a trained velocity network.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Tensor};
use crate::error::{Error, Result};
use crate::flow::VelocityNet;
use crate::pose::{HypothesisSet, Pose3D};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Forward Euler.
    Rk1,
    /// Explicit midpoint.
    Rk2,
    /// Kutta's third-order scheme.
    Rk3,
    /// Classical fourth-order scheme.
    Rk4,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Rk1, Method::Rk2, Method::Rk3, Method::Rk4];

    /// Field evaluations per step, which is also the order of accuracy.
    pub fn stages(self) -> usize {
        match self {
            Method::Rk1 => 1,
            Method::Rk2 => 2,
            Method::Rk3 => 3,
            Method::Rk4 => 4,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rk{}", self.stages())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk1" | "euler" => Ok(Method::Rk1),
            "rk2" | "midpoint" => Ok(Method::Rk2),
            "rk3" => Ok(Method::Rk3),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Parameter(format!(
                "unknown solver '{other}' (expected rk1, rk2, rk3 or rk4)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            method: Method::Rk2,
            steps: 25,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Parameter("solver needs at least one step".into()));
        }
        Ok(())
    }

    /// Field evaluations for one trajectory.
    pub fn evaluations(&self) -> usize {
        self.steps * self.method.stages()
    }
}

/// States at every grid time, `t_0 = 0` through `t_steps = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Vec<T>>,
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

fn axpy<T: Float>(out: &mut [T], x: &[T], a: T, k: &[T]) {
    for ((o, &xi), &ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

fn eval<T, F>(field: &mut F, x: &[T], t: T, out: &mut [T], step: usize) -> Result<()>
where
    T: Float,
    F: FnMut(&[T], T, &mut [T]) -> Result<()>,
{
    field(x, t, out)?;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            step,
            t: t.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(())
}

/// Advances `x` from `t` by `dt` in place. `step` labels divergence errors.
pub fn step<T, F>(method: Method, field: &mut F, x: &mut [T], t: T, dt: T, step: usize) -> Result<()>
where
    T: Float,
    F: FnMut(&[T], T, &mut [T]) -> Result<()>,
{
    let n = x.len();
    let half = cast::<T>(0.5) * dt;
    let mut k1 = vec![T::zero(); n];
    eval(field, x, t, &mut k1, step)?;
    match method {
        Method::Rk1 => {
            for (xi, &a) in x.iter_mut().zip(&k1) {
                *xi = *xi + dt * a;
            }
        }
        Method::Rk2 => {
            let mut mid = vec![T::zero(); n];
            axpy(&mut mid, x, half, &k1);
            let mut k2 = vec![T::zero(); n];
            eval(field, &mid, t + half, &mut k2, step)?;
            for (xi, &b) in x.iter_mut().zip(&k2) {
                *xi = *xi + dt * b;
            }
        }
        Method::Rk3 => {
            let mut y = vec![T::zero(); n];
            axpy(&mut y, x, half, &k1);
            let mut k2 = vec![T::zero(); n];
            eval(field, &y, t + half, &mut k2, step)?;
            let two = cast::<T>(2.0);
            for i in 0..n {
                y[i] = x[i] - dt * k1[i] + two * dt * k2[i];
            }
            let mut k3 = vec![T::zero(); n];
            eval(field, &y, t + dt, &mut k3, step)?;
            let (sixth, four) = (dt / cast(6.0), cast::<T>(4.0));
            for i in 0..n {
                x[i] = x[i] + sixth * (k1[i] + four * k2[i] + k3[i]);
            }
        }
        Method::Rk4 => {
            let mut y = vec![T::zero(); n];
            axpy(&mut y, x, half, &k1);
            let mut k2 = vec![T::zero(); n];
            eval(field, &y, t + half, &mut k2, step)?;
            axpy(&mut y, x, half, &k2);
            let mut k3 = vec![T::zero(); n];
            eval(field, &y, t + half, &mut k3, step)?;
            axpy(&mut y, x, dt, &k3);
            let mut k4 = vec![T::zero(); n];
            eval(field, &y, t + dt, &mut k4, step)?;
            let (sixth, two) = (dt / cast(6.0), cast::<T>(2.0));
            for i in 0..n {
                x[i] = x[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]);
            }
        }
    }
    Ok(())
}

/// One midpoint step `x + dt f(x + dt/2 f(x, t), t + dt/2)`.
pub fn step_rk2<T, F>(field: &mut F, x: &[T], t: T, dt: T) -> Result<Vec<T>>
where
    T: Float,
    F: FnMut(&[T], T, &mut [T]) -> Result<()>,
{
    if (t + dt).to_f64().unwrap_or(f64::NAN) > 1.0 + 1e-9 {
        return Err(Error::Parameter(format!(
            "step from t = {} by {} passes t = 1",
            t.to_f64().unwrap_or(f64::NAN),
            dt.to_f64().unwrap_or(f64::NAN)
        )));
    }
    let mut out = x.to_vec();
    step(Method::Rk2, field, &mut out, t, dt, 0)?;
    Ok(out)
}

/// Integrates from `t = 0` to `t = 1` in `config.steps` uniform steps.
pub fn integrate<T, F>(
    mut field: F,
    x0: &[T],
    config: &SolverConfig,
    record: bool,
) -> Result<(Vec<T>, Option<Trajectory<T>>)>
where
    T: Float,
    F: FnMut(&[T], T, &mut [T]) -> Result<()>,
{
    config.validate()?;
    let n: T = cast(config.steps as f64);
    let time = |i: usize| cast::<T>(i as f64) / n;
    let mut x = x0.to_vec();
    let mut traj = record.then(|| Trajectory {
        times: vec![T::zero()],
        states: vec![x.clone()],
    });
    for i in 0..config.steps {
        let (t, t_next) = (time(i), time(i + 1));
        step(config.method, &mut field, &mut x, t, t_next - t, i)?;
        if let Some(tr) = traj.as_mut() {
            tr.times.push(t_next);
            tr.states.push(x.clone());
        }
    }
    Ok((x, traj))
}

/// Writes one JSON object `{"t": .., "x_t": [..]}` per line.
pub fn write_trajectory<T: Float + Serialize>(path: &Path, traj: &Trajectory<T>) -> Result<()> {
    let mut out = String::new();
    for (t, x) in traj.times.iter().zip(&traj.states) {
        let line = serde_json::json!({ "t": t, "x_t": x });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Draws hypotheses for a fixed condition by integrating the learned field
/// from Gaussian starting points. All `H` trajectories advance together as
/// one batch.
#[derive(Clone, Copy, Debug)]
pub struct Sampler<'a> {
    pub net: &'a VelocityNet,
    pub store: &'a ParamStore,
    pub solver: SolverConfig,
}

/// Sampled hypotheses plus the number of field evaluations per trajectory.
#[derive(Clone, Debug)]
pub struct Sampled {
    pub set: HypothesisSet,
    pub field_evaluations: usize,
    pub trajectory: Option<Trajectory<f32>>,
}

impl Sampler<'_> {
    /// `H` starting points from `rng`; with `deterministic_zero` and
    /// `H = 1` the single start is the zero pose.
    pub fn initial_states<R: Rng + ?Sized>(&self, h: usize, rng: &mut R, deterministic_zero: bool) -> Result<Vec<f32>> {
        if h == 0 {
            return Err(Error::Parameter("need at least one hypothesis".into()));
        }
        let n = h * self.net.config.state_dim();
        if deterministic_zero && h == 1 {
            return Ok(vec![0.0; n]);
        }
        Ok((0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        source_id: &str,
        c: &[f32],
        h: usize,
        rng: &mut R,
        deterministic_zero: bool,
        record: bool,
    ) -> Result<Sampled> {
        let x0 = self.initial_states(h, rng, deterministic_zero)?;
        self.sample_from(source_id, c, &x0, record)
    }

    /// Integrates the given starting points, `[H * 3J]` row-major.
    pub fn sample_from(&self, source_id: &str, c: &[f32], x0: &[f32], record: bool) -> Result<Sampled> {
        let cfg = &self.net.config;
        let dim = cfg.state_dim();
        if c.len() != cfg.cond_dim {
            return Err(Error::dim("sampling condition", &[cfg.cond_dim], &[c.len()]));
        }
        if x0.is_empty() || !x0.len().is_multiple_of(dim) {
            return Err(Error::dim("sampling start states", &[dim], &[x0.len()]));
        }
        let h = x0.len() / dim;
        let cond = Tensor::new(vec![h, c.len()], c.repeat(h))?;
        let mut evals = 0usize;
        // dropout is inactive outside training, so this stream is never drawn from
        let mut no_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let field = |x: &[f32], t: f32, out: &mut [f32]| -> Result<()> {
            evals += 1;
            let mut tape = Tape::inference(self.store);
            let xv = tape.input(Tensor::new(vec![h, dim], x.to_vec())?);
            let tv = tape.input(Tensor::filled(vec![h, 1], t));
            let cv = tape.input(cond.clone());
            let v = self.net.forward(&mut tape, xv, tv, cv, false, &mut no_rng)?;
            out.copy_from_slice(tape.value(v).data());
            Ok(())
        };
        let (x1, trajectory) = integrate(field, x0, &self.solver, record)?;
        let hypotheses = x1.chunks(dim).map(Pose3D::from_flat).collect::<Result<Vec<_>>>()?;
        Ok(Sampled {
            set: HypothesisSet::new(source_id, hypotheses)?,
            field_evaluations: evals,
            trajectory,
        })
    }
}
