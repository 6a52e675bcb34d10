//! Dense multilayer perceptron with first- and second-order derivative passes.
//!
//! Besides the usual forward/backward pair, an [`Mlp`] can push a tangent
//! through the network ([`Mlp::jvp`]) and then pull cotangents of both the
//! primal output and the tangent output back to inputs and parameters
//! ([`Mlp::jvp_backward`]). Composing the two gives Hessian-vector products
//! and mixed second derivatives without a general autodiff tape.

use crate::error::{Error, Result};
use crate::nn::{logistic, softplus};
use crate::phase::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Softplus,
    Identity,
}

/// Affine layer followed by an activation. `weight` is row-major `outputs x inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Layer {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            activation,
        }
    }

    /// `W x + b`
    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (o, row) in out.iter_mut().zip(self.weight.chunks_exact(self.inputs)) {
            *o += dot(row, x);
        }
        out
    }

    /// `W x`
    fn linear(&self, x: &[f64]) -> Vec<f64> {
        self.weight.chunks_exact(self.inputs).map(|row| dot(row, x)).collect()
    }

    /// `W^T y`
    fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.inputs];
        for (&yo, row) in y.iter().zip(self.weight.chunks_exact(self.inputs)) {
            if yo != 0.0 {
                axpy(yo, row, &mut out);
            }
        }
        out
    }

    /// `grad.W += y_bar x^T`, `grad.b += y_bar`
    fn accumulate(grad: &mut Layer, y_bar: &[f64], x: &[f64], with_bias: bool) {
        for (&yo, row) in y_bar.iter().zip(grad.weight.chunks_exact_mut(x.len())) {
            if yo != 0.0 {
                axpy(yo, x, row);
            }
        }
        if with_bias {
            for (b, &yo) in grad.bias.iter_mut().zip(y_bar) {
                *b += yo;
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Intermediate values of a forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Intermediate values of a forward pass carrying one tangent.
#[derive(Clone, Debug)]
pub struct DualTrace {
    inputs: Vec<Vec<f64>>,
    tangents: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    pre_dot: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    pub output_dot: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Softplus on every layer but the last, which is linear.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::ShapeMismatch(format!("invalid widths {widths:?}")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let act = if l + 1 == n { Activation::Identity } else { Activation::Softplus };
                Layer::zeros(widths[l], widths[l + 1], act)
            })
            .collect();
        Ok(Mlp { layers })
    }

    /// Weights `N(0, 1/fan_in)`, zero biases.
    pub fn init(widths: &[usize], rng: &mut RngState) -> Result<Self> {
        let mut mlp = Mlp::zeros(widths)?;
        for layer in &mut mlp.layers {
            let std = 1.0 / (layer.inputs as f64).sqrt();
            for w in &mut layer.weight {
                *w = std * rng.standard_normal();
            }
        }
        Ok(mlp)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::ShapeMismatch("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weight.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::ShapeMismatch(format!("layer {i} storage does not match {}x{}", l.outputs, l.inputs)));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} outputs {} but layer {} takes {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").outputs
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs, l.activation))
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in &self.layers {
            let z = l.affine(&a);
            a = activate(l.activation, z);
        }
        a
    }

    pub fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        for l in &self.layers {
            let z = l.affine(&a);
            inputs.push(a);
            a = activate(l.activation, z.clone());
            pre.push(z);
        }
        Trace { inputs, pre, output: a }
    }

    /// Reverse pass: returns the input cotangent, accumulating parameter
    /// gradients into `grad` when given.
    pub fn backward(&self, trace: &Trace, out_bar: &[f64], mut grad: Option<&mut Mlp>) -> Vec<f64> {
        let mut bar = out_bar.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Softplus {
                for (b, &z) in bar.iter_mut().zip(&trace.pre[li]) {
                    *b *= logistic(z);
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                Layer::accumulate(&mut g.layers[li], &bar, &trace.inputs[li], true);
            }
            bar = l.transpose_mul(&bar);
        }
        bar
    }

    /// Forward pass of `(x, x_dot)`; the output tangent is `J(x) x_dot`.
    pub fn jvp(&self, x: &[f64], x_dot: &[f64]) -> DualTrace {
        let n = self.layers.len();
        let mut t = DualTrace {
            inputs: Vec::with_capacity(n),
            tangents: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            pre_dot: Vec::with_capacity(n),
            output: Vec::new(),
            output_dot: Vec::new(),
        };
        let mut a = x.to_vec();
        let mut a_dot = x_dot.to_vec();
        for l in &self.layers {
            let z = l.affine(&a);
            let z_dot = l.linear(&a_dot);
            let (next, next_dot) = match l.activation {
                Activation::Identity => (z.clone(), z_dot.clone()),
                Activation::Softplus => (
                    z.iter().map(|&v| softplus(v)).collect(),
                    z.iter().zip(&z_dot).map(|(&v, &d)| logistic(v) * d).collect(),
                ),
            };
            t.inputs.push(std::mem::replace(&mut a, next));
            t.tangents.push(std::mem::replace(&mut a_dot, next_dot));
            t.pre.push(z);
            t.pre_dot.push(z_dot);
        }
        t.output = a;
        t.output_dot = a_dot;
        t
    }

    /// Reverse pass through a [`DualTrace`]. Given cotangents of the primal
    /// output and of the tangent output, returns `(x_bar, x_dot_bar)` and
    /// accumulates parameter gradients into `grad` when given.
    pub fn jvp_backward(
        &self,
        trace: &DualTrace,
        out_bar: &[f64],
        out_dot_bar: &[f64],
        mut grad: Option<&mut Mlp>,
    ) -> (Vec<f64>, Vec<f64>) {
        let mut bar = out_bar.to_vec();
        let mut dot_bar = out_dot_bar.to_vec();
        for (li, l) in self.layers.iter().enumerate().rev() {
            if l.activation == Activation::Softplus {
                for k in 0..bar.len() {
                    let z = trace.pre[li][k];
                    let s = logistic(z);
                    // d/dz of softplus'(z) * z_dot
                    bar[k] = bar[k] * s + dot_bar[k] * s * (1.0 - s) * trace.pre_dot[li][k];
                    dot_bar[k] *= s;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                let gl = &mut g.layers[li];
                Layer::accumulate(gl, &bar, &trace.inputs[li], true);
                Layer::accumulate(gl, &dot_bar, &trace.tangents[li], false);
            }
            bar = l.transpose_mul(&bar);
            dot_bar = l.transpose_mul(&dot_bar);
        }
        (bar, dot_bar)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub(crate) fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
    }
}

fn activate(act: Activation, mut z: Vec<f64>) -> Vec<f64> {
    if act == Activation::Softplus {
        for v in &mut z {
            *v = softplus(*v);
        }
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> Mlp {
        Mlp::init(&[3, 5, 4, 2], &mut RngState::new(2)).unwrap()
    }

    fn perturbed(m: &Mlp, layer: usize, idx: usize, weight: bool, h: f64) -> Mlp {
        let mut c = m.clone();
        if weight {
            c.layers[layer].weight[idx] += h;
        } else {
            c.layers[layer].bias[idx] += h;
        }
        c
    }

    #[test]
    fn shapes() {
        let m = net();
        assert_eq!(m.widths(), vec![3, 5, 4, 2]);
        assert_eq!(m.param_count(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        assert!(Mlp::zeros(&[3]).is_err());
        let mut bad = m.layers.clone();
        bad.swap(0, 1);
        assert!(Mlp::from_layers(bad).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let m = net();
        let x = [0.3, -0.7, 1.1];
        let w = [0.6, -1.3];
        let f = |m: &Mlp, x: &[f64]| dot(&m.forward(x), &w);
        let trace = m.forward_trace(&x);
        let mut g = m.zeros_like();
        let xb = m.backward(&trace, &w, Some(&mut g));
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (f(&m, &xp) - f(&m, &xm)) / (2.0 * h);
            assert!((fd - xb[i]).abs() < 1e-8);
        }
        for l in 0..3 {
            for idx in 0..m.layers[l].weight.len() {
                let fd = (f(&perturbed(&m, l, idx, true, h), &x) - f(&perturbed(&m, l, idx, true, -h), &x)) / (2.0 * h);
                assert!((fd - g.layers[l].weight[idx]).abs() < 1e-8);
            }
            for idx in 0..m.layers[l].bias.len() {
                let fd = (f(&perturbed(&m, l, idx, false, h), &x) - f(&perturbed(&m, l, idx, false, -h), &x)) / (2.0 * h);
                assert!((fd - g.layers[l].bias[idx]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn jvp_matches_directional_difference() {
        let m = net();
        let x = [0.3, -0.7, 1.1];
        let v = [0.2, 0.5, -0.4];
        let t = m.jvp(&x, &v);
        let h = 1e-6;
        let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
        let (yp, ym) = (m.forward(&xp), m.forward(&xm));
        for k in 0..2 {
            assert!(((yp[k] - ym[k]) / (2.0 * h) - t.output_dot[k]).abs() < 1e-8);
        }
        assert_eq!(t.output, m.forward(&x));
    }

    #[test]
    fn jvp_backward_matches_finite_differences() {
        // scalar objective: w . y + r . y_dot, differentiated in x, v and parameters
        let m = net();
        let x = [0.3, -0.7, 1.1];
        let v = [0.2, 0.5, -0.4];
        let w = [0.6, -1.3];
        let r = [-0.9, 0.4];
        let obj = |m: &Mlp, x: &[f64], v: &[f64]| {
            let t = m.jvp(x, v);
            dot(&t.output, &w) + dot(&t.output_dot, &r)
        };
        let t = m.jvp(&x, &v);
        let mut g = m.zeros_like();
        let (xb, vb) = m.jvp_backward(&t, &w, &r, Some(&mut g));
        let h = 1e-6;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let fd = (obj(&m, &xp, &v) - obj(&m, &xm, &v)) / (2.0 * h);
            assert!((fd - xb[i]).abs() < 1e-7, "x {i}: {fd} {}", xb[i]);
            let mut vp = v;
            let mut vm = v;
            vp[i] += h;
            vm[i] -= h;
            let fd = (obj(&m, &x, &vp) - obj(&m, &x, &vm)) / (2.0 * h);
            assert!((fd - vb[i]).abs() < 1e-7);
        }
        for l in 0..3 {
            for idx in 0..m.layers[l].weight.len() {
                let fd = (obj(&perturbed(&m, l, idx, true, h), &x, &v) - obj(&perturbed(&m, l, idx, true, -h), &x, &v))
                    / (2.0 * h);
                assert!((fd - g.layers[l].weight[idx]).abs() < 1e-7);
            }
            for idx in 0..m.layers[l].bias.len() {
                let fd = (obj(&perturbed(&m, l, idx, false, h), &x, &v) - obj(&perturbed(&m, l, idx, false, -h), &x, &v))
                    / (2.0 * h);
                assert!((fd - g.layers[l].bias[idx]).abs() < 1e-7);
            }
        }
    }
}
