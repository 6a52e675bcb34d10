//! Phase-space value types shared by the simulator and the flow.
//!
//! Everything here is one-dimensional: a state is a pair of flat arrays
//! `q` (positions) and `p` (momenta) of equal length.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Description of the normal sampler, recorded in run metadata.
pub const NORMAL_METHOD: &str = "ChaCha8 stream, rand_distr::StandardNormal (ziggurat)";

/// Positions and momenta of `N` particles.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    pub(crate) q: Vec<f64>,
    pub(crate) p: Vec<f64>,
}

impl ParticleSystem {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Result<Self> {
        if q.len() != p.len() {
            return Err(Error::LengthMismatch {
                expected: q.len(),
                actual: p.len(),
            });
        }
        if q.is_empty() {
            return Err(Error::InvalidState("no particles".into()));
        }
        let state = ParticleSystem { q, p };
        state.check_finite()?;
        Ok(state)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn into_parts(self) -> (Vec<f64>, Vec<f64>) {
        (self.q, self.p)
    }

    pub fn total_momentum(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.q.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite position at index {i}")));
        }
        if let Some(i) = self.p.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidState(format!("non-finite momentum at index {i}")));
        }
        Ok(())
    }
}

/// Parameters of the factorized Gaussian base density of one example.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianInitSpec {
    pub mu_q: f64,
    pub sigma_q: f64,
    pub mu_p: f64,
    pub sigma_p: f64,
}

impl GaussianInitSpec {
    pub fn new(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> Result<Self> {
        let spec = GaussianInitSpec {
            mu_q,
            sigma_q,
            mu_p,
            sigma_p,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_q > 0.0 && self.sigma_q.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma_q = {}", self.sigma_q)));
        }
        if !(self.sigma_p > 0.0 && self.sigma_p.is_finite()) {
            return Err(Error::InvalidSpec(format!("sigma_p = {}", self.sigma_p)));
        }
        if !self.mu_q.is_finite() || !self.mu_p.is_finite() {
            return Err(Error::InvalidSpec("non-finite mean".into()));
        }
        Ok(())
    }
}

/// Simulated phase-space states at a ladder of times.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSeries {
    pub times: Vec<f64>,
    pub states: Vec<ParticleSystem>,
    pub spec: GaussianInitSpec,
}

impl SnapshotSeries {
    pub fn new(times: Vec<f64>, states: Vec<ParticleSystem>, spec: GaussianInitSpec) -> Result<Self> {
        if times.len() != states.len() {
            return Err(Error::LengthMismatch {
                expected: times.len(),
                actual: states.len(),
            });
        }
        if times.is_empty() {
            return Err(Error::Empty("snapshot series"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidState("snapshot times must be strictly increasing".into()));
        }
        let n = states[0].len();
        if let Some(s) = states.iter().find(|s| s.len() != n) {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: s.len(),
            });
        }
        spec.validate()?;
        Ok(SnapshotSeries { times, states, spec })
    }

    pub fn n_particles(&self) -> usize {
        self.states[0].len()
    }

    pub fn initial(&self) -> &ParticleSystem {
        &self.states[0]
    }

    pub fn last(&self) -> &ParticleSystem {
        self.states.last().expect("series is non-empty")
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().expect("series is non-empty")
    }

    /// State whose time matches `t` to within `1e-9`.
    pub fn at_time(&self, t: f64) -> Option<&ParticleSystem> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() < 1e-9)
            .map(|i| &self.states[i])
    }
}

/// Seeded, single-owner pseudorandom stream.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Mixes `(base, stream, index)` into an independent seed (splitmix64 finalizer).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Log-density of `state` under the factorized Gaussian `spec`.
pub fn gaussian_log_density(state: &ParticleSystem, spec: &GaussianInitSpec) -> Result<f64> {
    state.check_finite()?;
    spec.validate()?;
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    let term = |x: f64, mu: f64, sigma: f64| {
        let z = (x - mu) / sigma;
        -half_ln_2pi - sigma.ln() - 0.5 * z * z
    };
    let lq: f64 = state.q.iter().map(|&x| term(x, spec.mu_q, spec.sigma_q)).sum();
    let lp: f64 = state.p.iter().map(|&x| term(x, spec.mu_p, spec.sigma_p)).sum();
    Ok(lq + lp)
}

/// Gradient of the negative log-density with respect to `(q, p)`.
pub(crate) fn neg_log_density_grad(state: &ParticleSystem, spec: &GaussianInitSpec) -> (Vec<f64>, Vec<f64>) {
    let vq = spec.sigma_q * spec.sigma_q;
    let vp = spec.sigma_p * spec.sigma_p;
    (
        state.q.iter().map(|&x| (x - spec.mu_q) / vq).collect(),
        state.p.iter().map(|&x| (x - spec.mu_p) / vp).collect(),
    )
}

/// Draws `n_particles` independent positions and momenta from `spec`.
///
/// All positions are drawn first, then all momenta.
pub fn sample_initial(spec: &GaussianInitSpec, n_particles: usize, rng: &mut RngState) -> Result<ParticleSystem> {
    spec.validate()?;
    if n_particles == 0 {
        return Err(Error::InvalidState("no particles".into()));
    }
    let q = (0..n_particles)
        .map(|_| spec.mu_q + spec.sigma_q * rng.standard_normal())
        .collect();
    let p = (0..n_particles)
        .map(|_| spec.mu_p + spec.sigma_p * rng.standard_normal())
        .collect();
    Ok(ParticleSystem { q, p })
}

/// Two independent uniform draws on `[0.5, 1.5]`: `(sigma_q, sigma_p)`.
pub fn sample_sigma(rng: &mut RngState) -> (f64, f64) {
    let sq = rng.uniform(0.5, 1.5);
    let sp = rng.uniform(0.5, 1.5);
    (sq, sp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
        let z = (x - mu) / sigma;
        -(sigma * (2.0 * PI).sqrt()).ln() - z * z / 2.0
    }

    fn spec(sq: f64, sp: f64) -> GaussianInitSpec {
        GaussianInitSpec::new(64.0, sq, 0.0, sp).unwrap()
    }

    #[test]
    fn density_at_mean() {
        let s = ParticleSystem::new(vec![64.0], vec![0.0]).unwrap();
        let v = gaussian_log_density(&s, &spec(1.0, 1.0)).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
        assert!((v + 1.8378770664).abs() < 1e-10);

        let s2 = ParticleSystem::new(vec![64.0, 64.0], vec![0.0, 0.0]).unwrap();
        let v2 = gaussian_log_density(&s2, &spec(1.0, 1.0)).unwrap();
        assert!((v2 + 2.0 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn density_matches_scalar_oracle() {
        let s = ParticleSystem::new(vec![65.0], vec![1.0]).unwrap();
        let v = gaussian_log_density(&s, &spec(2.0, 0.5)).unwrap();
        let expected = scalar_log_pdf(65.0, 64.0, 2.0) + scalar_log_pdf(1.0, 0.0, 0.5);
        // -ln(2 sqrt(2pi)) - 1/8 - ln(0.5 sqrt(2pi)) - 2
        assert!((expected - (-2.0 * 0.5 * (2.0 * PI).ln() - 0.125 - 2.0)).abs() < 1e-12);
        assert!((v - expected).abs() < 1e-12 * expected.abs());
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        assert!(matches!(
            GaussianInitSpec::new(0.0, 0.0, 0.0, 1.0),
            Err(Error::InvalidSpec(_))
        ));
        let bad = GaussianInitSpec {
            mu_q: 0.0,
            sigma_q: 1.0,
            mu_p: 0.0,
            sigma_p: -1.0,
        };
        let s = ParticleSystem::new(vec![0.0], vec![0.0]).unwrap();
        assert!(matches!(gaussian_log_density(&s, &bad), Err(Error::InvalidSpec(_))));
        let nan = ParticleSystem {
            q: vec![f64::NAN],
            p: vec![0.0],
        };
        assert!(matches!(
            gaussian_log_density(&nan, &spec(1.0, 1.0)),
            Err(Error::InvalidState(_))
        ));
        assert!(ParticleSystem::new(vec![1.0], vec![]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_seed_sensitive() {
        let sp = spec(1.0, 1.0);
        let a = sample_initial(&sp, 32, &mut RngState::new(7)).unwrap();
        let b = sample_initial(&sp, 32, &mut RngState::new(7)).unwrap();
        let c = sample_initial(&sp, 32, &mut RngState::new(8)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(sample_sigma(&mut RngState::new(3)), sample_sigma(&mut RngState::new(3)));
    }

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        (m, var.sqrt())
    }

    #[test]
    fn sample_moments() {
        let s = sample_initial(&spec(1.0, 1.5), 100_000, &mut RngState::new(11)).unwrap();
        let (mq, sq) = mean_std(s.q());
        let (_, sp) = mean_std(s.p());
        assert!((mq - 64.0).abs() < 0.02, "{mq}");
        assert!((sq - 1.0).abs() < 0.02, "{sq}");
        assert!((sp - 1.5).abs() < 0.03, "{sp}");
    }

    #[test]
    fn sigma_draws() {
        let mut rng = RngState::new(5);
        let mut sum = 0.0;
        for _ in 0..50_000 {
            let (a, b) = sample_sigma(&mut rng);
            assert!((0.5..=1.5).contains(&a) && (0.5..=1.5).contains(&b));
            sum += a + b;
        }
        assert!((sum / 100_000.0 - 1.0).abs() < 0.01);
    }

    #[test]
    fn permutation_is_a_permutation() {
        let mut p = RngState::new(1).permutation(100);
        p.sort_unstable();
        assert_eq!(p, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn snapshot_series_validation() {
        let s = ParticleSystem::new(vec![0.0], vec![0.0]).unwrap();
        let sp = spec(1.0, 1.0);
        assert!(SnapshotSeries::new(vec![0.0, 0.0], vec![s.clone(), s.clone()], sp).is_err());
        let two = ParticleSystem::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!(SnapshotSeries::new(vec![0.0, 1.0], vec![s.clone(), two], sp).is_err());
        let ok = SnapshotSeries::new(vec![0.0, 1.0], vec![s.clone(), s], sp).unwrap();
        assert!(ok.at_time(1.0).is_some());
        assert!(ok.at_time(0.5).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn density_is_pair_permutation_invariant(
                pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
                seed in any::<u64>(),
            ) {
                let sp = GaussianInitSpec::new(0.3, 0.8, -0.1, 1.3).unwrap();
                let (q, p): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
                let base = gaussian_log_density(&ParticleSystem::new(q.clone(), p.clone()).unwrap(), &sp).unwrap();
                let perm = RngState::new(seed).permutation(q.len());
                let qs = perm.iter().map(|&i| q[i]).collect();
                let ps = perm.iter().map(|&i| p[i]).collect();
                let permuted = gaussian_log_density(&ParticleSystem::new(qs, ps).unwrap(), &sp).unwrap();
                prop_assert!((base - permuted).abs() <= 1e-12 * base.abs().max(1.0));

                let oracle: f64 = q.iter().map(|&x| scalar_log_pdf(x, 0.3, 0.8)).sum::<f64>()
                    + p.iter().map(|&x| scalar_log_pdf(x, -0.1, 1.3)).sum::<f64>();
                prop_assert!((base - oracle).abs() <= 1e-12 * oracle.abs());
            }
        }
    }
}
