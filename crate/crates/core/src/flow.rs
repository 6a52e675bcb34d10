//! The learned Hamiltonian flow.
//!
//! A flow is `L` leapfrog steps of `H(q, p) = V(q) + a^2/2 |p|^2` with the
//! Deep Set potential `V`. Integrating with `-dt` maps observed final states
//! back to the initial time, where the Gaussian initial density is known. The
//! leapfrog map has unit Jacobian determinant, so the model log-density of a
//! final state is the base log-density of its pre-image and the training loss
//! is `-ln N(flow_inverse(q_T, p_T); spec)`.
//!
//! Positions are never wrapped: the potential is defined on the whole line.

use crate::error::{Error, Result};
use crate::nn::{FlowModel, ParamGradient};
use crate::phase::{gaussian_log_density, neg_log_density_grad, GaussianInitSpec, ParticleSystem};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    pub steps: usize,
    pub dt: f64,
}

impl FlowConfig {
    pub const TRAINING: FlowConfig = FlowConfig { steps: 25, dt: 0.04 };

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("flow.steps", "must be >= 1"));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("flow.dt", format!("{} must be positive", self.dt)));
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    /// Enforces `steps * dt == horizon` to within `1e-9`.
    pub fn check_horizon(&self, horizon: f64) -> Result<()> {
        self.validate()?;
        if (self.horizon() - horizon).abs() > 1e-9 {
            return Err(Error::config(
                "flow",
                format!(
                    "L x dt must equal the data horizon T = {horizon}; got L = {}, dt = {} (L x dt = {})",
                    self.steps,
                    self.dt,
                    self.horizon()
                ),
            ));
        }
        Ok(())
    }

    /// Step index reached at time `t`, or an error naming the neighbouring
    /// representable times.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let x = t / self.dt;
        let r = x.round();
        if (x - r).abs() < 1e-6 && r >= 0.0 && r as usize <= self.steps {
            return Ok(r as usize);
        }
        let lo = x.floor().clamp(0.0, self.steps as f64);
        let hi = x.ceil().clamp(0.0, self.steps as f64);
        Err(Error::OffGrid {
            requested: t,
            dt: self.dt,
            steps: self.steps,
            below: lo * self.dt,
            above: hi * self.dt,
        })
    }
}

/// Every state visited by an integration, with `grad_q V` at each state.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTrajectory {
    /// Signed timestep used (`-dt` for the inverse direction).
    pub step: f64,
    pub states: Vec<ParticleSystem>,
    pub forces: Vec<Vec<f64>>,
}

impl FlowTrajectory {
    pub fn end(&self) -> &ParticleSystem {
        self.states.last().expect("trajectory is non-empty")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

fn potential_gradient(model: &FlowModel, q: &[f64], step: usize) -> Result<Vec<f64>> {
    let g = model.potential.grad_q(q).map_err(|e| match e {
        Error::InvalidState(_) => Error::Diverged { step },
        other => other,
    })?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged { step });
    }
    Ok(g)
}

fn kick(p: &[f64], g: &[f64], half: f64) -> Vec<f64> {
    p.iter().zip(g).map(|(&p, &g)| p - half * g).collect()
}

fn drift(q: &[f64], p_half: &[f64], scale: f64) -> Vec<f64> {
    q.iter().zip(p_half).map(|(&q, &p)| q + scale * p).collect()
}

/// One kick-drift-kick step with signed timestep `dt`, evaluating the force twice.
pub fn leapfrog_step(state: &ParticleSystem, model: &FlowModel, dt: f64) -> Result<ParticleSystem> {
    let g0 = potential_gradient(model, &state.q, 0)?;
    let p_half = kick(&state.p, &g0, 0.5 * dt);
    let q = drift(&state.q, &p_half, dt * model.kinetic.inverse_mass());
    let g1 = potential_gradient(model, &q, 1)?;
    let p = kick(&p_half, &g1, 0.5 * dt);
    let next = ParticleSystem { q, p };
    if !next.is_finite() {
        return Err(Error::Diverged { step: 1 });
    }
    Ok(next)
}

/// `steps` leapfrog steps with signed timestep `step`.
///
/// The force at the end of one step is reused as the force at the start of
/// the next; both half-kicks see identical values either way.
pub fn integrate(start: &ParticleSystem, model: &FlowModel, steps: usize, step: f64) -> Result<FlowTrajectory> {
    start.check_finite()?;
    let half = 0.5 * step;
    let drift_scale = step * model.kinetic.inverse_mass();
    let mut states = Vec::with_capacity(steps + 1);
    let mut forces = Vec::with_capacity(steps + 1);
    forces.push(potential_gradient(model, &start.q, 0)?);
    states.push(start.clone());
    for k in 1..=steps {
        let (s, g) = (&states[k - 1], &forces[k - 1]);
        let p_half = kick(&s.p, g, half);
        let q = drift(&s.q, &p_half, drift_scale);
        let g_next = potential_gradient(model, &q, k)?;
        let p = kick(&p_half, &g_next, half);
        let next = ParticleSystem { q, p };
        if !next.is_finite() {
            return Err(Error::Diverged { step: k });
        }
        states.push(next);
        forces.push(g_next);
    }
    Ok(FlowTrajectory { step, states, forces })
}

pub fn flow_forward(initial: &ParticleSystem, model: &FlowModel, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    cfg.validate()?;
    integrate(initial, model, cfg.steps, cfg.dt)
}

/// Integrates `final_state` backwards; `states[L]` is the reconstructed initial state.
pub fn flow_inverse(final_state: &ParticleSystem, model: &FlowModel, cfg: &FlowConfig) -> Result<FlowTrajectory> {
    cfg.validate()?;
    integrate(final_state, model, cfg.steps, -cfg.dt)
}

/// Negative log-likelihood of `final_state` under the flow pushed-forward base density.
pub fn nll_loss(
    final_state: &ParticleSystem,
    spec: &GaussianInitSpec,
    model: &FlowModel,
    cfg: &FlowConfig,
) -> Result<(f64, FlowTrajectory)> {
    let traj = flow_inverse(final_state, model, cfg)?;
    let loss = -gaussian_log_density(traj.end(), spec)?;
    Ok((loss, traj))
}

/// Loss and its exact gradient with respect to every potential parameter and `ln a`.
///
/// Reverse sweep over the stored inverse trajectory. The two half-kicks that
/// meet at an interior state see the same momentum cotangent, so each state
/// contributes a single Hessian-vector pullback with a full-step weight; the
/// endpoints get half-step weights.
pub fn nll_loss_grad(
    final_state: &ParticleSystem,
    spec: &GaussianInitSpec,
    model: &FlowModel,
    cfg: &FlowConfig,
) -> Result<(f64, ParamGradient)> {
    let (loss, traj) = nll_loss(final_state, spec, model, cfg)?;
    let h = traj.step;
    let half = 0.5 * h;
    let a2 = model.kinetic.inverse_mass();
    let steps = traj.steps();

    let mut grad = ParamGradient::zeros_like(model);
    let (mut q_bar, mut p_bar) = neg_log_density_grad(traj.end(), spec);
    let mut a2_bar = 0.0;

    // kick p <- p - c grad V(q): q_bar += H(q) (-c p_bar), theta_bar likewise
    let mut pull_kick = |q_bar: &mut Vec<f64>, p_bar: &[f64], at: usize, c: f64| -> Result<()> {
        let u: Vec<f64> = p_bar.iter().map(|v| -c * v).collect();
        let hq = model
            .potential
            .grad_pullback_into(&traj.states[at].q, &u, &mut grad.potential)?;
        for (a, b) in q_bar.iter_mut().zip(&hq) {
            *a += b;
        }
        Ok(())
    };

    pull_kick(&mut q_bar, &p_bar, steps, half)?;
    for k in (1..=steps).rev() {
        let prev = &traj.states[k - 1];
        let p_half = kick(&prev.p, &traj.forces[k - 1], half);
        a2_bar += h * q_bar.iter().zip(&p_half).map(|(a, b)| a * b).sum::<f64>();
        for (pb, qb) in p_bar.iter_mut().zip(&q_bar) {
            *pb += h * a2 * qb;
        }
        let c = if k == 1 { half } else { h };
        pull_kick(&mut q_bar, &p_bar, k - 1, c)?;
    }
    // a^2 = exp(2 ln a)
    grad.log_a = 2.0 * a2 * a2_bar;
    if !grad.is_finite() {
        return Err(Error::Diverged { step: steps });
    }
    Ok((loss, grad))
}
