//! Particle-in-cell integrator for the 1D electrostatic Vlasov-Poisson system.
//!
//! One step is kick-drift-kick leapfrog. The force at the particles comes from
//! cloud-in-cell deposition onto a periodic grid, a spectral Poisson solve
//! (`F_k = -i rho_k / (eps0 k)`, zero mean and Nyquist modes removed) and a
//! cloud-in-cell gather with the same kernel. Like charges repel.

pub mod fft;

use rayon::prelude::*;
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::phase::{derive_seed, sample_initial, sample_sigma, GaussianInitSpec, ParticleSystem, RngState, SnapshotSeries};
pub use fft::{fft_forward, fft_inverse, FftPlan};

use std::f64::consts::PI;

/// Periodic 1D grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub cells: usize,
    pub box_length: f64,
}

impl GridSpec {
    pub fn new(cells: usize, box_length: f64) -> Result<Self> {
        let g = GridSpec { cells, box_length };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells < 2 || !self.cells.is_power_of_two() {
            return Err(Error::config("cells", format!("{} is not a power of two >= 2", self.cells)));
        }
        if !(self.box_length > 0.0 && self.box_length.is_finite()) {
            return Err(Error::config("box_length", format!("{} must be positive", self.box_length)));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.box_length / self.cells as f64
    }

    /// Wave number of FFT bin `bin`.
    pub fn wavenumber(&self, bin: usize) -> f64 {
        2.0 * PI * fft::signed_mode(bin, self.cells) as f64 / self.box_length
    }

    /// Left grid index and normalized offset `delta` in `[0, 1)` of position `x`.
    fn locate(&self, x: f64) -> (usize, f64) {
        let dx = self.dx();
        let s = x.rem_euclid(self.box_length) / dx;
        let i = s.floor();
        let delta = s - i;
        let i = i as usize;
        if i >= self.cells {
            (i - self.cells, delta)
        } else {
            (i, delta)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhysicsParams {
    pub charge: f64,
    pub eps0: f64,
    pub dt: f64,
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps0 > 0.0 && self.eps0.is_finite()) {
            return Err(Error::config("eps0", format!("{} must be positive", self.eps0)));
        }
        if !self.charge.is_finite() {
            return Err(Error::config("charge", "must be finite"));
        }
        if !self.dt.is_finite() {
            return Err(Error::config("dt", "must be finite"));
        }
        Ok(())
    }
}

/// Values at the grid nodes (density or force).
#[derive(Clone, Debug, PartialEq)]
pub struct GridField(pub Vec<f64>);

impl GridField {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_positions(state: &ParticleSystem) -> Result<()> {
    if let Some(i) = state.q.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidState(format!("non-finite position at index {i}")));
    }
    Ok(())
}

/// Cloud-in-cell charge density. Positions are wrapped into the box.
pub fn cic_deposit(state: &ParticleSystem, grid: &GridSpec, phys: &PhysicsParams) -> Result<GridField> {
    check_positions(state)?;
    let mut rho = vec![0.0; grid.cells];
    let w = phys.charge / grid.dx();
    for &x in &state.q {
        let (i, d) = grid.locate(x);
        rho[i] += w * (1.0 - d);
        rho[(i + 1) % grid.cells] += w * d;
    }
    Ok(GridField(rho))
}

/// Cloud-in-cell interpolation of a grid field to the particles.
pub fn cic_gather(state: &ParticleSystem, field: &GridField, grid: &GridSpec) -> Result<Vec<f64>> {
    check_positions(state)?;
    if field.len() != grid.cells {
        return Err(Error::LengthMismatch {
            expected: grid.cells,
            actual: field.len(),
        });
    }
    let f = field.values();
    Ok(state
        .q
        .iter()
        .map(|&x| {
            let (i, d) = grid.locate(x);
            (1.0 - d) * f[i] + d * f[(i + 1) % grid.cells]
        })
        .collect())
}

/// Spectral Poisson solver with cached FFT plans.
#[derive(Clone, Debug)]
pub struct PoissonSolver {
    grid: GridSpec,
    eps0: f64,
    plan: FftPlan,
}

impl PoissonSolver {
    pub fn new(grid: GridSpec, eps0: f64) -> Result<Self> {
        grid.validate()?;
        Ok(PoissonSolver {
            grid,
            eps0,
            plan: FftPlan::new(grid.cells)?,
        })
    }

    fn spectrum(&self, density: &GridField) -> Result<Vec<Complex64>> {
        if density.len() != self.grid.cells {
            return Err(Error::LengthMismatch {
                expected: self.grid.cells,
                actual: density.len(),
            });
        }
        self.plan.forward(density.values())
    }

    /// Complex force before dropping the imaginary residue.
    pub fn force_complex(&self, density: &GridField) -> Result<Vec<Complex64>> {
        let mut spec = self.spectrum(density)?;
        let n = self.grid.cells;
        for (bin, c) in spec.iter_mut().enumerate() {
            if bin == 0 || bin == n / 2 {
                *c = Complex64::new(0.0, 0.0);
            } else {
                let k = self.grid.wavenumber(bin);
                *c = Complex64::new(0.0, -1.0) * *c / (self.eps0 * k);
            }
        }
        self.plan.inverse_complex(&spec)
    }

    pub fn force(&self, density: &GridField) -> Result<GridField> {
        Ok(GridField(self.force_complex(density)?.into_iter().map(|c| c.re).collect()))
    }

    /// Electrostatic potential `V_k = rho_k / (eps0 k^2)` with the mean removed.
    pub fn potential(&self, density: &GridField) -> Result<GridField> {
        let mut spec = self.spectrum(density)?;
        for (bin, c) in spec.iter_mut().enumerate() {
            if bin == 0 {
                *c = Complex64::new(0.0, 0.0);
            } else {
                let k = self.grid.wavenumber(bin);
                *c /= self.eps0 * k * k;
            }
        }
        Ok(GridField(self.plan.inverse(&spec)?))
    }
}

pub fn solve_force(density: &GridField, grid: &GridSpec, phys: &PhysicsParams) -> Result<GridField> {
    PoissonSolver::new(*grid, phys.eps0)?.force(density)
}

/// Kick-drift-kick stepper reusing one solver.
#[derive(Clone, Debug)]
pub struct Simulator {
    grid: GridSpec,
    phys: PhysicsParams,
    solver: PoissonSolver,
}

impl Simulator {
    pub fn new(grid: GridSpec, phys: PhysicsParams) -> Result<Self> {
        phys.validate()?;
        Ok(Simulator {
            solver: PoissonSolver::new(grid, phys.eps0)?,
            grid,
            phys,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn physics(&self) -> &PhysicsParams {
        &self.phys
    }

    /// Force at every particle: deposit, solve, gather.
    pub fn particle_force(&self, state: &ParticleSystem) -> Result<Vec<f64>> {
        let rho = cic_deposit(state, &self.grid, &self.phys)?;
        let f = self.solver.force(&rho)?;
        cic_gather(state, &f, &self.grid)
    }

    pub fn step(&self, state: &ParticleSystem) -> Result<ParticleSystem> {
        self.step_counting(state).map(|(s, _)| s)
    }

    /// One step; also returns how many particles were wrapped by the boundary.
    pub fn step_counting(&self, state: &ParticleSystem) -> Result<(ParticleSystem, usize)> {
        let dt = self.phys.dt;
        let half = 0.5 * dt;
        let f0 = self.particle_force(state)?;
        let p_half: Vec<f64> = state.p.iter().zip(&f0).map(|(&p, &f)| p + half * f).collect();
        let l = self.grid.box_length;
        let mut wraps = 0;
        let q: Vec<f64> = state
            .q
            .iter()
            .zip(&p_half)
            .map(|(&q, &p)| {
                let x = q + dt * p;
                if (0.0..l).contains(&x) {
                    x
                } else {
                    wraps += 1;
                    x.rem_euclid(l)
                }
            })
            .collect();
        let moved = ParticleSystem { q, p: p_half };
        let f1 = self.particle_force(&moved)?;
        let p: Vec<f64> = moved.p.iter().zip(&f1).map(|(&p, &f)| p + half * f).collect();
        let next = ParticleSystem { q: moved.q, p };
        next.check_finite()?;
        Ok((next, wraps))
    }

    /// Kinetic plus field energy, `0.5 sum p^2 + (0.5 / c) sum_i rho_i V_i dx`.
    ///
    /// The field term is divided by the particle charge because the kick
    /// applies the grid force directly as an acceleration.
    pub fn total_energy(&self, state: &ParticleSystem) -> Result<f64> {
        let kinetic = 0.5 * state.p.iter().map(|p| p * p).sum::<f64>();
        if self.phys.charge == 0.0 {
            return Ok(kinetic);
        }
        let rho = cic_deposit(state, &self.grid, &self.phys)?;
        let v = self.solver.potential(&rho)?;
        let field: f64 = rho.values().iter().zip(v.values()).map(|(r, v)| r * v).sum::<f64>() * self.grid.dx();
        Ok(kinetic + 0.5 * field / self.phys.charge)
    }

    /// Runs `steps` steps from a fresh draw of `spec`, keeping every `stride`-th state.
    pub fn simulate(
        &self,
        spec: &GaussianInitSpec,
        n_particles: usize,
        steps: usize,
        stride: usize,
        rng: &mut RngState,
    ) -> Result<SnapshotSeries> {
        if steps == 0 {
            return Err(Error::config("steps", "must be >= 1"));
        }
        if stride == 0 || steps % stride != 0 {
            return Err(Error::config("snapshot_stride", format!("{stride} does not divide {steps}")));
        }
        let mut state = sample_initial(spec, n_particles, rng)?;
        let mut times = vec![0.0];
        let mut states = vec![state.clone()];
        let mut wraps = 0;
        for k in 1..=steps {
            let (next, w) = self.step_counting(&state)?;
            wraps += w;
            state = next;
            if k % stride == 0 {
                times.push(k as f64 * self.phys.dt);
                states.push(state.clone());
            }
        }
        if wraps > 0 {
            log::warn!("{wraps} boundary wrap events during simulation");
        }
        SnapshotSeries::new(times, states, *spec)
    }
}

pub fn pic_step(state: &ParticleSystem, grid: &GridSpec, phys: &PhysicsParams) -> Result<ParticleSystem> {
    Simulator::new(*grid, *phys)?.step(state)
}

pub fn total_energy(state: &ParticleSystem, grid: &GridSpec, phys: &PhysicsParams) -> Result<f64> {
    Simulator::new(*grid, *phys)?.total_energy(state)
}

#[allow(clippy::too_many_arguments)]
pub fn simulate(
    spec: &GaussianInitSpec,
    n_particles: usize,
    steps: usize,
    grid: &GridSpec,
    phys: &PhysicsParams,
    snapshot_stride: usize,
    rng: &mut RngState,
) -> Result<SnapshotSeries> {
    Simulator::new(*grid, *phys)?.simulate(spec, n_particles, steps, snapshot_stride, rng)
}

/// Everything needed to generate a dataset split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatasetSpec {
    pub grid: GridSpec,
    pub physics: PhysicsParams,
    pub n_particles: usize,
    pub steps: usize,
    pub snapshot_stride: usize,
    pub mu_q: f64,
    pub mu_p: f64,
}

/// Generates `count` examples; example `i` uses seed `derive_seed(seed, stream, i)`.
///
/// Each example draws `(sigma_q, sigma_p)` uniformly on `[0.5, 1.5]` and then
/// its particles from the resulting Gaussian.
pub fn generate_dataset(spec: &DatasetSpec, count: usize, seed: u64, stream: u64) -> Result<Vec<SnapshotSeries>> {
    let sim = Simulator::new(spec.grid, spec.physics)?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngState::new(derive_seed(seed, stream, i as u64));
            let (sq, sp) = sample_sigma(&mut rng);
            let init = GaussianInitSpec::new(spec.mu_q, sq, spec.mu_p, sp)?;
            sim.simulate(&init, spec.n_particles, spec.steps, spec.snapshot_stride, &mut rng)
        })
        .collect()
}
