//! Fixtures shared by the benchmarks.

use vpflow_core::flow::FlowConfig;
use vpflow_core::nn::{DeepSetArch, FlowModel};
use vpflow_core::pic::{GridSpec, PhysicsParams};
use vpflow_core::train::init_model;
use vpflow_core::{sample_initial, GaussianInitSpec, ParticleSystem, RngState};

pub fn desk_grid() -> GridSpec {
    GridSpec::new(64, 64.0).expect("valid grid")
}

pub fn physics() -> PhysicsParams {
    PhysicsParams {
        charge: 0.1,
        eps0: 1.0,
        dt: 0.04,
    }
}

pub fn spec(mu_q: f64) -> GaussianInitSpec {
    GaussianInitSpec::new(mu_q, 1.0, 0.0, 1.0).expect("valid spec")
}

pub fn state(n: usize, mu_q: f64, seed: u64) -> ParticleSystem {
    sample_initial(&spec(mu_q), n, &mut RngState::new(seed)).expect("valid sample")
}

pub fn model(arch: &DeepSetArch) -> FlowModel {
    init_model(arch, 0.5, 7).expect("valid model")
}

pub const FLOW: FlowConfig = FlowConfig::TRAINING;
