//! Neural building blocks: softplus MLPs, the Deep Set potential and the
//! learnable kinetic scale.

pub mod deepset;
pub mod mlp;

pub use deepset::{DeepSetArch, DeepSetPotential};
pub use mlp::{Activation, Layer, Mlp};

use crate::error::{Error, Result};

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Derivative of [`softplus`].
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Second derivative of [`softplus`].
#[inline]
pub fn logistic_prime(x: f64) -> f64 {
    let s = logistic(x);
    s * (1.0 - s)
}

/// Kinetic energy scale `a` in `K(p) = a^2/2 sum p^2`, stored as `ln a`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KineticScale {
    pub log_a: f64,
}

impl KineticScale {
    pub fn from_a(a: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(Error::config("init_a", format!("{a} must be positive")));
        }
        Ok(KineticScale { log_a: a.ln() })
    }

    pub fn a(&self) -> f64 {
        self.log_a.exp()
    }

    /// `a^2`, the inverse mass.
    pub fn inverse_mass(&self) -> f64 {
        (2.0 * self.log_a).exp()
    }
}

/// Flat view over every trainable tensor, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn squared_norm(&self) -> f64 {
        self.tensors().iter().flat_map(|t| t.iter()).map(|v| v * v).sum()
    }
}

/// Learned Hamiltonian: Deep Set potential plus kinetic scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub potential: DeepSetPotential,
    pub kinetic: KineticScale,
}

impl FlowModel {
    /// `V = 0`, `a = 1`: free streaming.
    pub fn free_streaming(arch: &DeepSetArch) -> Result<Self> {
        Ok(FlowModel {
            potential: DeepSetPotential::zeros(arch)?,
            kinetic: KineticScale { log_a: 0.0 },
        })
    }

    pub fn is_finite(&self) -> bool {
        self.potential.is_finite() && self.kinetic.log_a.is_finite()
    }
}

impl Parameters for FlowModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.potential.tensors();
        v.push(std::slice::from_ref(&self.kinetic.log_a));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.potential.tensors_mut();
        v.push(std::slice::from_mut(&mut self.kinetic.log_a));
        v
    }
}

/// Gradient with the shape of a [`FlowModel`]; `log_a` holds `d loss / d ln a`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGradient {
    pub potential: DeepSetPotential,
    pub log_a: f64,
}

impl ParamGradient {
    pub fn zeros_like(model: &FlowModel) -> Self {
        ParamGradient {
            potential: model.potential.zeros_like(),
            log_a: 0.0,
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGradient, scale: f64) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl Parameters for ParamGradient {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut v = self.potential.tensors();
        v.push(std::slice::from_ref(&self.log_a));
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v = self.potential.tensors_mut();
        v.push(std::slice::from_mut(&mut self.log_a));
        v
    }
}
