//! Linear-flow primitives.
//!
//! Time runs from `t = 1` (pure noise) to `t = 0` (data) along
//! `z_t = (1 - t) z_0 + t eps`; samplers integrate with decreasing `t`.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg;
use crate::oracle::Instruction;
use crate::rng;

/// Slack allowed when comparing a step size against the remaining time.
const TIME_EPS: f64 = 1e-12;

/// A conditional velocity `v(z, t, c)` with a vector-Jacobian product in `z`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, z: &[f64], t: f64, cond: &Instruction) -> Result<Vec<f64>>;

    /// `(dv/dz)^T w` at fixed `(t, cond)`.
    fn vjp_z(&self, z: &[f64], t: f64, cond: &Instruction, w: &[f64]) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: f64,
}

impl LatentState {
    pub fn new(z: Vec<f64>, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTime {
                context: "latent state",
                t,
            });
        }
        check_finite("latent state", &z)?;
        Ok(Self { z, t })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
}

impl Schedule {
    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }
}

/// Uniform schedule `times[i] = 1 - i / N`.
pub fn make_schedule(num_steps: usize) -> Result<Schedule> {
    if num_steps == 0 {
        return Err(Error::InvalidConfig(
            "schedule needs at least one step".into(),
        ));
    }
    let n = num_steps as f64;
    let times = (0..=num_steps).map(|i| 1.0 - i as f64 / n).collect();
    Ok(Schedule { times })
}

/// Per-state record kept alongside a trajectory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// Similarity of the look-ahead decode with the user instruction.
    pub alignment_score: Option<f64>,
    /// Norm of the unclipped rectification gradient at the step's first iterate.
    pub grad_norm: Option<f64>,
    pub selected_candidate: Option<usize>,
    pub candidate_scores: Vec<f64>,
    pub c_ideal: Option<Instruction>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<LatentState>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl Trajectory {
    pub fn final_state(&self) -> &LatentState {
        self.states
            .last()
            .expect("trajectory has at least one state")
    }

    /// Bit-level equality of every latent coordinate and time.
    pub fn same_path(&self, other: &Trajectory) -> bool {
        self.states.len() == other.states.len()
            && self.states.iter().zip(&other.states).all(|(a, b)| {
                a.t.to_bits() == b.t.to_bits()
                    && a.z.len() == b.z.len()
                    && a.z
                        .iter()
                        .zip(&b.z)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Writes `step,t,alignment_score,grad_norm,selected_candidate`; missing
    /// values are empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "t",
            "alignment_score",
            "grad_norm",
            "selected_candidate",
        ])?;
        for (i, (s, d)) in self.states.iter().zip(&self.diagnostics).enumerate() {
            w.write_record([
                i.to_string(),
                s.t.to_string(),
                opt_to_string(d.alignment_score),
                opt_to_string(d.grad_norm),
                d.selected_candidate
                    .map(|c| c.to_string())
                    .unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// One JSON object per state: `{"step", "t", "z"}`.
    pub fn write_latents_jsonl(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for (i, s) in self.states.iter().enumerate() {
            let line = serde_json::json!({ "step": i, "t": s.t, "z": s.z });
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn interpolate(z0: &[f64], eps: &[f64], t: f64) -> Result<Vec<f64>> {
    check_dim("interpolate", z0.len(), eps.len())?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTime {
            context: "interpolate",
            t,
        });
    }
    if t == 0.0 {
        return Ok(z0.to_vec());
    }
    if t == 1.0 {
        return Ok(eps.to_vec());
    }
    Ok(z0
        .iter()
        .zip(eps)
        .map(|(a, e)| (1.0 - t) * a + t * e)
        .collect())
}

/// Clean-sample estimate `z - t v(z, t, c)`. At `t = 0` the field is not
/// evaluated and `z` is returned as is.
pub fn look_ahead(
    field: &dyn VectorField,
    state: &LatentState,
    cond: &Instruction,
) -> Result<Vec<f64>> {
    check_dim("look-ahead latent", field.dim(), state.z.len())?;
    if state.t == 0.0 {
        return Ok(state.z.clone());
    }
    let v = field.velocity(&state.z, state.t, cond)?;
    check_finite("velocity", &v)?;
    Ok(linalg::sub_scaled(&state.z, state.t, &v))
}

/// One explicit Euler step toward `t = 0`.
pub fn euler_step(
    field: &dyn VectorField,
    state: &LatentState,
    dt: f64,
    cond: &Instruction,
) -> Result<LatentState> {
    if !(dt > 0.0) || dt > state.t + TIME_EPS {
        return Err(Error::StepTooLarge { dt, t: state.t });
    }
    euler_step_to(field, state, (state.t - dt).max(0.0), cond)
}

/// Euler step landing exactly on `t_next`.
pub fn euler_step_to(
    field: &dyn VectorField,
    state: &LatentState,
    t_next: f64,
    cond: &Instruction,
) -> Result<LatentState> {
    check_dim("euler latent", field.dim(), state.z.len())?;
    let dt = state.t - t_next;
    if !(dt > 0.0) || t_next < 0.0 {
        return Err(Error::StepTooLarge { dt, t: state.t });
    }
    let v = field.velocity(&state.z, state.t, cond)?;
    check_finite("velocity", &v)?;
    let z = linalg::sub_scaled(&state.z, dt, &v);
    check_finite("euler state", &z)?;
    Ok(LatentState { z, t: t_next })
}

/// Standard-normal starting latent for a seed.
pub fn initial_noise(dim: usize, seed: u64) -> Vec<f64> {
    rng::normal_vec(&mut rng::seeded(seed), dim)
}

/// Unguided sampler: seeded noise at `t = 1`, then Euler steps along the schedule.
pub fn sample(
    field: &dyn VectorField,
    cond: &Instruction,
    schedule: &Schedule,
    seed: u64,
) -> Result<Trajectory> {
    let mut state = LatentState::new(initial_noise(field.dim(), seed), schedule.time(0))?;
    let mut states = Vec::with_capacity(schedule.times().len());
    for &t_next in &schedule.times()[1..] {
        let next = euler_step_to(field, &state, t_next, cond)?;
        states.push(std::mem::replace(&mut state, next));
    }
    states.push(state);
    let diagnostics = vec![StepDiagnostics::default(); states.len()];
    Ok(Trajectory {
        states,
        diagnostics,
    })
}
