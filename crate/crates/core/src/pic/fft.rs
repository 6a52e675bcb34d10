//! Real-input discrete Fourier transforms on power-of-two grids.
//!
//! Convention: `X[m] = sum_n x[n] exp(-2 pi i m n / len)` forward and
//! `x[n] = (1/len) sum_m X[m] exp(+2 pi i m n / len)` inverse, so that a
//! spatial derivative maps to multiplication by `i k` with
//! `k = 2 pi m / box_length` for the signed mode index `m`.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

fn check_len(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(n));
    }
    Ok(())
}

/// Cached forward/inverse plans for one transform length.
#[derive(Clone)]
pub struct FftPlan {
    len: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("len", &self.len).finish()
    }
}

impl FftPlan {
    pub fn new(len: usize) -> Result<Self> {
        check_len(len)?;
        let mut planner = FftPlanner::new();
        Ok(FftPlan {
            len,
            forward: planner.plan_fft_forward(len),
            inverse: planner.plan_fft_inverse(len),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn forward(&self, values: &[f64]) -> Result<Vec<Complex64>> {
        if values.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                actual: values.len(),
            });
        }
        let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        Ok(buf)
    }

    /// Inverse transform; returns the full complex result.
    pub fn inverse_complex(&self, spectrum: &[Complex64]) -> Result<Vec<Complex64>> {
        if spectrum.len() != self.len {
            return Err(Error::LengthMismatch {
                expected: self.len,
                actual: spectrum.len(),
            });
        }
        let mut buf = spectrum.to_vec();
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.len as f64;
        for c in &mut buf {
            *c *= scale;
        }
        Ok(buf)
    }

    pub fn inverse(&self, spectrum: &[Complex64]) -> Result<Vec<f64>> {
        Ok(self.inverse_complex(spectrum)?.into_iter().map(|c| c.re).collect())
    }
}

pub fn fft_forward(values: &[f64]) -> Result<Vec<Complex64>> {
    FftPlan::new(values.len())?.forward(values)
}

/// Inverse transform keeping the real part.
pub fn fft_inverse(spectrum: &[Complex64]) -> Result<Vec<f64>> {
    FftPlan::new(spectrum.len())?.inverse(spectrum)
}

/// Signed mode index of bin `bin` for a transform of length `len`:
/// `0, 1, .., len/2 - 1, -len/2, .., -1`.
pub fn signed_mode(bin: usize, len: usize) -> i64 {
    if bin < len / 2 {
        bin as i64
    } else {
        bin as i64 - len as i64
    }
}
