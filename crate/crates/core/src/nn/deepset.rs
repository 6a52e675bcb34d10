//! Translation- and permutation-invariant potential
//! `V(q) = psi( sum_j phi(q_j - mean(q)) )`.
//!
//! Every reduction over particles (the mean, the sum of `phi` outputs and the
//! per-parameter accumulations) runs in ascending order of `q`, so permuting
//! the particles leaves `V` bit-identical and permutes the gradient exactly.

use crate::error::{Error, Result};
use crate::nn::mlp::{DualTrace, Mlp, Trace};
use crate::nn::Parameters;
use crate::phase::RngState;

/// Widths of the Deep Set: `phi: 1 -> hidden -> set_dim`, `psi: set_dim -> hidden -> 1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeepSetArch {
    pub hidden: usize,
    pub set_dim: usize,
}

impl DeepSetArch {
    /// One hidden layer of 256 and a 250-wide set embedding (~129k parameters).
    pub const FULL: DeepSetArch = DeepSetArch {
        hidden: 256,
        set_dim: 250,
    };

    pub fn param_count(&self) -> usize {
        let (h, s) = (self.hidden, self.set_dim);
        (h + h) + (h * s + s) + (s * h + h) + (h + 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.set_dim == 0 {
            return Err(Error::config("model", "hidden and set_dim must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeepSetPotential {
    pub phi: Mlp,
    pub psi: Mlp,
}

struct Centered {
    order: Vec<usize>,
    c: Vec<f64>,
}

impl Centered {
    fn new(q: &[f64]) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidState("no particles".into()));
        }
        if let Some(i) = q.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite position at index {i}")));
        }
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
        let centered = Centered { order, c: Vec::new() };
        let mean = centered.mean(q);
        Ok(Centered {
            c: q.iter().map(|x| x - mean).collect(),
            ..centered
        })
    }

    fn mean(&self, v: &[f64]) -> f64 {
        self.order.iter().map(|&i| v[i]).sum::<f64>() / v.len() as f64
    }

    /// `v - mean(v)`: the centering projector applied to `v`.
    fn project(&self, v: &[f64]) -> Vec<f64> {
        let m = self.mean(v);
        v.iter().map(|x| x - m).collect()
    }

    fn sum_outputs<'a>(&self, outputs: impl Fn(usize) -> &'a [f64], dim: usize) -> Vec<f64> {
        let mut s = vec![0.0; dim];
        for &j in &self.order {
            for (a, b) in s.iter_mut().zip(outputs(j)) {
                *a += b;
            }
        }
        s
    }
}

impl Parameters for DeepSetPotential {
    fn tensors(&self) -> Vec<&[f64]> {
        self.phi.tensors().chain(self.psi.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.phi.tensors_mut().chain(self.psi.tensors_mut()).collect()
    }
}

impl DeepSetPotential {
    pub fn zeros(arch: &DeepSetArch) -> Result<Self> {
        arch.validate()?;
        Ok(DeepSetPotential {
            phi: Mlp::zeros(&[1, arch.hidden, arch.set_dim])?,
            psi: Mlp::zeros(&[arch.set_dim, arch.hidden, 1])?,
        })
    }

    /// Fan-in scaled normal weights, zero biases.
    pub fn init(arch: &DeepSetArch, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        Ok(DeepSetPotential {
            phi: Mlp::init(&[1, arch.hidden, arch.set_dim], rng)?,
            psi: Mlp::init(&[arch.set_dim, arch.hidden, 1], rng)?,
        })
    }

    pub fn from_parts(phi: Mlp, psi: Mlp) -> Result<Self> {
        if phi.input_dim() != 1 {
            return Err(Error::ArchitectureMismatch(format!("phi input dim {} != 1", phi.input_dim())));
        }
        if psi.output_dim() != 1 {
            return Err(Error::ArchitectureMismatch(format!("psi output dim {} != 1", psi.output_dim())));
        }
        if phi.output_dim() != psi.input_dim() {
            return Err(Error::ArchitectureMismatch(format!(
                "phi output dim {} != psi input dim {}",
                phi.output_dim(),
                psi.input_dim()
            )));
        }
        Ok(DeepSetPotential { phi, psi })
    }

    pub fn set_dim(&self) -> usize {
        self.phi.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.phi.param_count() + self.psi.param_count()
    }

    pub fn zeros_like(&self) -> Self {
        DeepSetPotential {
            phi: self.phi.zeros_like(),
            psi: self.psi.zeros_like(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.psi.is_finite()
    }

    pub fn value(&self, q: &[f64]) -> Result<f64> {
        let cen = Centered::new(q)?;
        let outs: Vec<Vec<f64>> = cen.c.iter().map(|&c| self.phi.forward(&[c])).collect();
        let s = cen.sum_outputs(|j| &outs[j], self.set_dim());
        Ok(self.psi.forward(&s)[0])
    }

    /// `grad_q V`; its components sum to zero.
    pub fn grad_q(&self, q: &[f64]) -> Result<Vec<f64>> {
        let cen = Centered::new(q)?;
        let traces: Vec<Trace> = cen.c.iter().map(|&c| self.phi.forward_trace(&[c])).collect();
        let s = cen.sum_outputs(|j| &traces[j].output, self.set_dim());
        let pt = self.psi.forward_trace(&s);
        let w = self.psi.backward(&pt, &[1.0], None);
        let g: Vec<f64> = traces.iter().map(|t| self.phi.backward(t, &w, None)[0]).collect();
        Ok(cen.project(&g))
    }

    /// Returns `(H(q) u, (d grad_q V / d theta)^T u)`.
    pub fn grad_pullback(&self, q: &[f64], u: &[f64]) -> Result<(Vec<f64>, DeepSetPotential)> {
        let mut grad = self.zeros_like();
        let hq = self.grad_pullback_into(q, u, &mut grad)?;
        Ok((hq, grad))
    }

    /// As [`grad_pullback`](Self::grad_pullback), accumulating the parameter
    /// part into `grad`.
    pub fn grad_pullback_into(&self, q: &[f64], u: &[f64], grad: &mut DeepSetPotential) -> Result<Vec<f64>> {
        let cen = Centered::new(q)?;
        if u.len() != q.len() {
            return Err(Error::LengthMismatch {
                expected: q.len(),
                actual: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidState("non-finite cotangent".into()));
        }
        // d/dtheta and d/dq of f = u . grad_q V = (P u) . dV/dc
        let u_c = cen.project(u);
        let duals: Vec<DualTrace> = cen
            .c
            .iter()
            .zip(&u_c)
            .map(|(&c, &du)| self.phi.jvp(&[c], &[du]))
            .collect();
        let dim = self.set_dim();
        let s = cen.sum_outputs(|j| &duals[j].output, dim);
        let s_dot = cen.sum_outputs(|j| &duals[j].output_dot, dim);
        let pt = self.psi.jvp(&s, &s_dot);
        let (s_bar, s_dot_bar) = self.psi.jvp_backward(&pt, &[0.0], &[1.0], Some(&mut grad.psi));
        let mut c_bar = vec![0.0; q.len()];
        for &j in &cen.order {
            let (cb, _) = self.phi.jvp_backward(&duals[j], &s_bar, &s_dot_bar, Some(&mut grad.phi));
            c_bar[j] = cb[0];
        }
        Ok(cen.project(&c_bar))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{FlowModel, KineticScale};

    fn tiny() -> DeepSetPotential {
        DeepSetPotential::init(&DeepSetArch { hidden: 4, set_dim: 3 }, &mut RngState::new(17)).unwrap()
    }

    fn softplus(x: f64) -> f64 {
        (1.0 + x.exp()).ln()
    }

    /// Straight-line forward pass written against the raw weight arrays.
    fn oracle_value(m: &DeepSetPotential, q: &[f64]) -> f64 {
        let n = q.len() as f64;
        let mean = q.iter().sum::<f64>() / n;
        let (p0, p1) = (&m.phi.layers[0], &m.phi.layers[1]);
        let (s0, s1) = (&m.psi.layers[0], &m.psi.layers[1]);
        let mut s = vec![0.0; p1.outputs];
        for &x in q {
            let c = x - mean;
            let h: Vec<f64> = (0..p0.outputs).map(|i| softplus(p0.weight[i] * c + p0.bias[i])).collect();
            for o in 0..p1.outputs {
                let mut acc = p1.bias[o];
                for i in 0..p1.inputs {
                    acc += p1.weight[o * p1.inputs + i] * h[i];
                }
                s[o] += acc;
            }
        }
        let h: Vec<f64> = (0..s0.outputs)
            .map(|o| {
                let mut acc = s0.bias[o];
                for i in 0..s0.inputs {
                    acc += s0.weight[o * s0.inputs + i] * s[i];
                }
                softplus(acc)
            })
            .collect();
        s1.bias[0] + (0..s1.inputs).map(|i| s1.weight[i] * h[i]).sum::<f64>()
    }

    #[test]
    fn value_matches_oracle() {
        let m = tiny();
        let q = [0.5, -0.2, 1.1];
        let v = m.value(&q).unwrap();
        let o = oracle_value(&m, &q);
        assert!((v - o).abs() < 1e-12 * o.abs().max(1.0), "{v} {o}");
    }

    #[test]
    fn full_param_count() {
        let arch = DeepSetArch::FULL;
        let m = DeepSetPotential::zeros(&arch).unwrap();
        assert_eq!(m.param_count(), arch.param_count());
        assert!((120_000..=140_000).contains(&m.param_count()), "{}", m.param_count());
    }

    #[test]
    fn init_is_seeded() {
        let arch = DeepSetArch { hidden: 8, set_dim: 5 };
        let a = DeepSetPotential::init(&arch, &mut RngState::new(1)).unwrap();
        let b = DeepSetPotential::init(&arch, &mut RngState::new(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.phi.layers.iter().chain(&a.psi.layers).all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_network_is_constant() {
        let m = DeepSetPotential::zeros(&DeepSetArch { hidden: 8, set_dim: 5 }).unwrap();
        assert_eq!(m.value(&[1.0, 2.0]).unwrap(), m.value(&[-3.0, 7.0]).unwrap());
        assert!(m.grad_q(&[1.0, 2.0, 5.0]).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_particle_has_zero_gradient() {
        assert_eq!(tiny().grad_q(&[3.7]).unwrap(), vec![0.0]);
    }

    #[test]
    fn rejects_bad_input() {
        let m = tiny();
        assert!(m.value(&[f64::NAN]).is_err());
        assert!(m.value(&[]).is_err());
        assert!(m.grad_pullback(&[1.0, 2.0], &[1.0]).is_err());
    }

    fn fd_grad(m: &DeepSetPotential, q: &[f64], h: f64) -> Vec<f64> {
        (0..q.len())
            .map(|i| {
                let mut qp = q.to_vec();
                let mut qm = q.to_vec();
                qp[i] += h;
                qm[i] -= h;
                (m.value(&qp).unwrap() - m.value(&qm).unwrap()) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = tiny();
        let q = [0.5, -0.2, 1.1, 0.3];
        let g = m.grad_q(&q).unwrap();
        let fd = fd_grad(&m, &q, 1e-5);
        let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-6 * scale, "{a} {b}");
        }
        assert!(g.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn zero_cotangent_pullback() {
        let m = tiny();
        let (hq, ht) = m.grad_pullback(&[0.1, 0.4, -0.3], &[0.0; 3]).unwrap();
        assert!(hq.iter().all(|&v| v == 0.0));
        assert!(ht.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hvp_matches_directional_difference() {
        let m = tiny();
        let q = [0.5, -0.2, 1.1, 0.3];
        let u = [0.3, -0.8, 0.1, 0.6];
        let (hq, _) = m.grad_pullback(&q, &u).unwrap();
        let h = 1e-5;
        let qp: Vec<f64> = q.iter().zip(&u).map(|(a, b)| a + h * b).collect();
        let qm: Vec<f64> = q.iter().zip(&u).map(|(a, b)| a - h * b).collect();
        let gp = m.grad_q(&qp).unwrap();
        let gm = m.grad_q(&qm).unwrap();
        let scale = hq.iter().map(|v| v.abs()).fold(0.0, f64::max);
        for i in 0..4 {
            let fd = (gp[i] - gm[i]) / (2.0 * h);
            assert!((fd - hq[i]).abs() < 1e-5 * scale, "{fd} {}", hq[i]);
        }
    }

    #[test]
    fn param_pullback_matches_finite_differences() {
        let m = tiny();
        assert!(m.param_count() <= 50);
        let q = [0.5, -0.2, 1.1];
        let u = [0.3, -0.8, 0.1];
        let (_, ht) = m.grad_pullback(&q, &u).unwrap();
        let contracted = |m: &DeepSetPotential| -> f64 {
            m.grad_q(&q).unwrap().iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let h = 1e-5;
        let analytic: Vec<f64> = ht.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let scale = analytic.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let mut k = 0;
        let n_tensors = m.tensors().len();
        for t in 0..n_tensors {
            for i in 0..m.tensors()[t].len() {
                let mut mp = m.clone();
                mp.tensors_mut()[t][i] += h;
                let mut mm = m.clone();
                mm.tensors_mut()[t][i] -= h;
                let fd = (contracted(&mp) - contracted(&mm)) / (2.0 * h);
                assert!((fd - analytic[k]).abs() < 1e-5 * scale.max(1e-3), "param {k}: {fd} {}", analytic[k]);
                k += 1;
            }
        }
    }

    #[test]
    fn constant_phi_bias_gradient_vanishes() {
        // phi with zero weights makes V constant in q; its output bias then
        // cannot influence grad_q V.
        let mut m = tiny();
        for l in &mut m.phi.layers {
            l.weight.iter_mut().for_each(|w| *w = 0.0);
        }
        m.phi.layers[1].bias = vec![0.2, -0.4, 0.7];
        let (_, ht) = m.grad_pullback(&[0.1, 0.9, -0.5], &[0.4, -0.1, 0.3]).unwrap();
        assert!(ht.phi.layers[1].bias.iter().all(|&b| b == 0.0));
        let _ = FlowModel {
            potential: m,
            kinetic: KineticScale { log_a: 0.0 },
        };
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn small_net(seed: u64) -> DeepSetPotential {
            DeepSetPotential::init(&DeepSetArch { hidden: 6, set_dim: 4 }, &mut RngState::new(seed)).unwrap()
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn permutation_invariance_is_exact(
                q in proptest::collection::vec(-5.0f64..5.0, 1..24),
                seed in any::<u64>(),
            ) {
                let m = small_net(seed % 7);
                let perm = RngState::new(seed).permutation(q.len());
                let qs: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
                prop_assert_eq!(m.value(&q).unwrap(), m.value(&qs).unwrap());
                let g = m.grad_q(&q).unwrap();
                let gs = m.grad_q(&qs).unwrap();
                for (k, &i) in perm.iter().enumerate() {
                    prop_assert_eq!(gs[k], g[i]);
                }
            }

            #[test]
            fn translation_invariance(
                q in proptest::collection::vec(-5.0f64..5.0, 1..24),
                c in -100.0f64..100.0,
                seed in 0u64..7,
            ) {
                let m = small_net(seed);
                let shifted: Vec<f64> = q.iter().map(|x| x + c).collect();
                prop_assert!((m.value(&q).unwrap() - m.value(&shifted).unwrap()).abs() < 1e-10);
                let g = m.grad_q(&q).unwrap();
                prop_assert!(g.iter().sum::<f64>().abs() < 1e-10);
            }

            #[test]
            fn hvp_is_symmetric(
                qu in proptest::collection::vec((-3.0f64..3.0, -1.0f64..1.0, -1.0f64..1.0), 2..12),
                seed in 0u64..7,
            ) {
                let m = small_net(seed);
                let q: Vec<f64> = qu.iter().map(|t| t.0).collect();
                let u: Vec<f64> = qu.iter().map(|t| t.1).collect();
                let v: Vec<f64> = qu.iter().map(|t| t.2).collect();
                let (hu, _) = m.grad_pullback(&q, &u).unwrap();
                let (hv, _) = m.grad_pullback(&q, &v).unwrap();
                let vhu: f64 = v.iter().zip(&hu).map(|(a, b)| a * b).sum();
                let uhv: f64 = u.iter().zip(&hv).map(|(a, b)| a * b).sum();
                prop_assert!((vhu - uhv).abs() < 1e-10);
            }
        }
    }
}
