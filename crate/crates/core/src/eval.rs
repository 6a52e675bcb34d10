//! Wasserstein evaluation of sampled trajectories and the sorted-input MLP
//! baseline.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{flow_forward, FlowConfig};
use crate::nn::{FlowModel, Mlp, Parameters};
use crate::phase::{derive_seed, sample_initial, ParticleSystem, RngState, SnapshotSeries};
use crate::train::{adam_step, AdamConfig, AdamState};

const EVAL_STREAM: u64 = 0x4556_414c;
const BASELINE_STREAM: u64 = 0x4241_5345;

/// Mean absolute difference of order statistics.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.is_empty() {
        return Err(Error::Empty("sample"));
    }
    Ok(sorted_w1(&sorted(a), &sorted(b)))
}

fn sorted(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    v
}

fn sorted_w1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Where the model-side initial particles come from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialSource {
    /// The simulator's own initial snapshot of each test example.
    Snapshot,
    /// Fresh draws from each example's Gaussian, seeded per example index.
    Fresh { seed: u64 },
}

impl InitialSource {
    fn initial(&self, example: &SnapshotSeries, index: usize) -> Result<ParticleSystem> {
        match *self {
            InitialSource::Snapshot => Ok(example.initial().clone()),
            InitialSource::Fresh { seed } => {
                let mut rng = RngState::new(derive_seed(seed, EVAL_STREAM, index as u64));
                sample_initial(&example.spec, example.n_particles(), &mut rng)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub time: f64,
    pub w1_q: f64,
    pub w1_p: f64,
    pub n_examples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    /// Sampling configuration; `None` for models that do not integrate.
    pub flow: Option<FlowConfig>,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn row(&self, time: f64) -> Option<&EvalRow> {
        self.rows.iter().find(|r| (r.time - time).abs() < 1e-9)
    }
}

fn check_test_set(test: &[SnapshotSeries]) -> Result<()> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    Ok(())
}

/// Per-example `(w1_q, w1_p)` for every requested time.
fn flow_distances(
    model: &FlowModel,
    example: &SnapshotSeries,
    index: usize,
    cfg: &FlowConfig,
    steps: &[usize],
    times: &[f64],
    source: InitialSource,
) -> Result<Vec<(f64, f64)>> {
    let start = source.initial(example, index)?;
    let traj = flow_forward(&start, model, cfg)?;
    steps
        .iter()
        .zip(times)
        .map(|(&k, &t)| {
            let truth = example.at_time(t).ok_or(Error::MissingSnapshot(t))?;
            let s = &traj.states[k];
            Ok((wasserstein1(s.q(), truth.q())?, wasserstein1(s.p(), truth.p())?))
        })
        .collect()
}

fn average(model_id: &str, flow: Option<FlowConfig>, times: &[f64], per_example: Vec<Vec<(f64, f64)>>) -> EvalReport {
    let n = per_example.len();
    let rows = times
        .iter()
        .enumerate()
        .map(|(j, &time)| {
            let (mut sq, mut sp) = (0.0, 0.0);
            for ex in &per_example {
                sq += ex[j].0;
                sp += ex[j].1;
            }
            EvalRow {
                time,
                w1_q: sq / n as f64,
                w1_p: sp / n as f64,
                n_examples: n,
            }
        })
        .collect();
    EvalReport {
        model_id: model_id.to_string(),
        flow,
        rows,
    }
}

/// Mean W1 between flow samples and simulator snapshots at each time.
///
/// Every time must land on the integration grid of `cfg` and on a stored
/// snapshot of every test example.
pub fn evaluate_flow(
    model: &FlowModel,
    model_id: &str,
    test: &[SnapshotSeries],
    cfg: &FlowConfig,
    times: &[f64],
    source: InitialSource,
) -> Result<EvalReport> {
    check_test_set(test)?;
    cfg.validate()?;
    let steps = times.iter().map(|&t| cfg.step_index(t)).collect::<Result<Vec<_>>>()?;
    let per_example = test
        .par_iter()
        .enumerate()
        .map(|(i, ex)| flow_distances(model, ex, i, cfg, &steps, times, source))
        .collect::<Result<Vec<_>>>()?;
    Ok(average(model_id, Some(*cfg), times, per_example))
}

/// Two MLPs mapping sorted initial phase-space samples to the sorted final
/// positions and momenta.
///
/// Inputs are `[sorted q0 - mu_q, sorted p0 - mu_p]`; outputs are centred the
/// same way.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub mlp_q: Mlp,
    pub mlp_p: Mlp,
}

impl BaselineModel {
    /// `2N -> hidden -> hidden -> N` for each marginal.
    pub fn init(n_particles: usize, hidden: usize, rng: &mut RngState) -> Result<Self> {
        let widths = [2 * n_particles, hidden, hidden, n_particles];
        Ok(BaselineModel {
            mlp_q: Mlp::init(&widths, rng)?,
            mlp_p: Mlp::init(&widths, rng)?,
        })
    }

    pub fn from_parts(mlp_q: Mlp, mlp_p: Mlp) -> Result<Self> {
        let n = mlp_q.output_dim();
        for (name, m) in [("mlp_q", &mlp_q), ("mlp_p", &mlp_p)] {
            if m.input_dim() != 2 * n || m.output_dim() != n {
                return Err(Error::ArchitectureMismatch(format!(
                    "{name}: expected {} -> {n}, found {} -> {}",
                    2 * n,
                    m.input_dim(),
                    m.output_dim()
                )));
            }
        }
        Ok(BaselineModel { mlp_q, mlp_p })
    }

    pub fn n_particles(&self) -> usize {
        self.mlp_q.output_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mlp_q.param_count() + self.mlp_p.param_count()
    }

    fn zeros_like(&self) -> Self {
        BaselineModel {
            mlp_q: self.mlp_q.zeros_like(),
            mlp_p: self.mlp_p.zeros_like(),
        }
    }

    fn check_input(&self, initial: &ParticleSystem) -> Result<()> {
        if initial.len() != self.n_particles() {
            return Err(Error::LengthMismatch {
                expected: self.n_particles(),
                actual: initial.len(),
            });
        }
        Ok(())
    }

    /// Predicted final `(q, p)` samples, in absolute coordinates.
    pub fn predict(&self, initial: &ParticleSystem, mu_q: f64, mu_p: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(initial)?;
        let x = baseline_input(initial, mu_q, mu_p);
        let q = self.mlp_q.forward(&x).into_iter().map(|v| v + mu_q).collect();
        let p = self.mlp_p.forward(&x).into_iter().map(|v| v + mu_p).collect();
        Ok((q, p))
    }
}

impl Parameters for BaselineModel {
    fn tensors(&self) -> Vec<&[f64]> {
        self.mlp_q.tensors().chain(self.mlp_p.tensors()).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.mlp_q.tensors_mut().chain(self.mlp_p.tensors_mut()).collect()
    }
}

fn baseline_input(initial: &ParticleSystem, mu_q: f64, mu_p: f64) -> Vec<f64> {
    let mut x: Vec<f64> = sorted(initial.q()).into_iter().map(|v| v - mu_q).collect();
    x.extend(sorted(initial.p()).into_iter().map(|v| v - mu_p));
    x
}

/// Centred sorted final positions and momenta.
fn baseline_targets(example: &SnapshotSeries) -> (Vec<f64>, Vec<f64>) {
    let s = example.last();
    let spec = &example.spec;
    let q = sorted(s.q()).into_iter().map(|v| v - spec.mu_q).collect();
    let p = sorted(s.p()).into_iter().map(|v| v - spec.mu_p).collect();
    (q, p)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("hidden", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        self.adam.validate()
    }
}

/// Mean squared error over both networks' outputs, with its gradient.
fn baseline_loss_grad(model: &BaselineModel, data: &[SnapshotSeries], batch: &[usize]) -> (f64, BaselineModel) {
    let parts: Vec<(f64, BaselineModel)> = batch
        .par_iter()
        .map(|&i| {
            let ex = &data[i];
            let x = baseline_input(ex.initial(), ex.spec.mu_q, ex.spec.mu_p);
            let (tq, tp) = baseline_targets(ex);
            let mut g = model.zeros_like();
            let mut loss = 0.0;
            for (mlp, grad, target) in [(&model.mlp_q, &mut g.mlp_q, &tq), (&model.mlp_p, &mut g.mlp_p, &tp)] {
                let trace = mlp.forward_trace(&x);
                let r: Vec<f64> = trace.output.iter().zip(target.iter()).map(|(y, t)| y - t).collect();
                loss += r.iter().map(|v| v * v).sum::<f64>();
                let bar: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
                mlp.backward(&trace, &bar, Some(grad));
            }
            (loss, g)
        })
        .collect();
    let scale = 1.0 / (batch.len() * 2 * model.n_particles()) as f64;
    let mut grad = model.zeros_like();
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.tensors_mut().into_iter().zip(g.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
    for t in grad.tensors_mut() {
        for x in t {
            *x *= scale;
        }
    }
    (loss * scale, grad)
}

/// Mean squared error of `model` over a whole split.
pub fn baseline_mse(model: &BaselineModel, data: &[SnapshotSeries]) -> f64 {
    let idx: Vec<usize> = (0..data.len()).collect();
    baseline_loss_grad(model, data, &idx).0
}

/// Fits the baseline by Adam on mean squared error; returns the model and
/// the per-epoch training loss.
pub fn train_baseline(train: &[SnapshotSeries], cfg: &BaselineConfig) -> Result<(BaselineModel, Vec<f64>)> {
    cfg.validate()?;
    let first = train.first().ok_or(Error::Empty("training set"))?;
    let n = first.n_particles();
    if let Some(bad) = train.iter().find(|e| e.n_particles() != n) {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: bad.n_particles(),
        });
    }
    let mut rng = RngState::new(derive_seed(cfg.seed, BASELINE_STREAM, 0));
    let mut model = BaselineModel::init(n, cfg.hidden, &mut rng)?;
    let mut adam = AdamState::new(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let order = RngState::new(derive_seed(cfg.seed, BASELINE_STREAM, epoch as u64)).permutation(train.len());
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grad) = baseline_loss_grad(&model, train, batch);
            adam_step(&mut model, &grad, &mut adam, &cfg.adam)?;
            total += loss * batch.len() as f64;
        }
        let mean = total / train.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Diverged { step: epoch });
        }
        log::info!("baseline epoch {epoch}: mse {mean:.6}");
        history.push(mean);
    }
    Ok((model, history))
}

/// Mean W1 of baseline predictions against the final snapshot.
pub fn evaluate_baseline(model: &BaselineModel, test: &[SnapshotSeries], source: InitialSource) -> Result<EvalReport> {
    check_test_set(test)?;
    let time = test[0].final_time();
    let per_example = test
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let start = source.initial(ex, i)?;
            let (q, p) = model.predict(&start, ex.spec.mu_q, ex.spec.mu_p)?;
            let truth = ex.last();
            Ok(vec![(wasserstein1(&q, truth.q())?, wasserstein1(&p, truth.p())?)])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average("baseline", None, &[time], per_example))
}

/// Sorted truth and model samples for one example, one column group per
/// `(time, marginal, source)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histograms {
    pub times: Vec<f64>,
    /// `[time][0 = q, 1 = p]` -> `(truth, model)` sorted samples.
    pub columns: Vec<[(Vec<f64>, Vec<f64>); 2]>,
}

/// Sorted samples of the true and flowed distributions at each time.
pub fn histograms(
    model: &FlowModel,
    example: &SnapshotSeries,
    index: usize,
    cfg: &FlowConfig,
    times: &[f64],
    source: InitialSource,
) -> Result<Histograms> {
    let steps = times.iter().map(|&t| cfg.step_index(t)).collect::<Result<Vec<_>>>()?;
    let start = source.initial(example, index)?;
    let traj = flow_forward(&start, model, cfg)?;
    let columns = steps
        .iter()
        .zip(times)
        .map(|(&k, &t)| {
            let truth = example.at_time(t).ok_or(Error::MissingSnapshot(t))?;
            let s = &traj.states[k];
            Ok([
                (sorted(truth.q()), sorted(s.q())),
                (sorted(truth.p()), sorted(s.p())),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Histograms {
        times: times.to_vec(),
        columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::DeepSetArch;
    use crate::phase::GaussianInitSpec;
    use crate::pic::{generate_dataset, DatasetSpec, GridSpec, PhysicsParams};
    use proptest::prelude::*;

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        let a = [0.3, -1.0, 2.5, 0.0];
        assert_eq!(wasserstein1(&a, &a).unwrap(), 0.0);
        assert_eq!(wasserstein1(&a, &[2.5, 0.0, 0.3, -1.0]).unwrap(), 0.0);
        assert!(wasserstein1(&a, &[1.0]).is_err());
    }

    fn triple() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (1usize..20).prop_flat_map(|n| {
            let v = || prop::collection::vec(-50.0f64..50.0, n);
            (v(), v(), v())
        })
    }

    proptest! {
        #[test]
        fn w1_is_a_metric((a, b, c) in triple()) {
            let ab = wasserstein1(&a, &b).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - wasserstein1(&b, &a).unwrap()).abs() < 1e-12);
            let ac = wasserstein1(&a, &c).unwrap();
            let bc = wasserstein1(&b, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn w1_scales((a, b, _) in triple(), c in -10.0f64..10.0) {
            let ca: Vec<f64> = a.iter().map(|v| c * v).collect();
            let cb: Vec<f64> = b.iter().map(|v| c * v).collect();
            let lhs = wasserstein1(&ca, &cb).unwrap();
            let rhs = c.abs() * wasserstein1(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs));
        }
    }

    #[test]
    fn sampling_noise_shrinks_with_n() {
        let spec = GaussianInitSpec::new(0.0, 1.0, 0.0, 1.0).unwrap();
        let mean_w1 = |n: usize| {
            let mut rng = RngState::new(9);
            let reps = 200;
            (0..reps)
                .map(|_| {
                    let a = sample_initial(&spec, n, &mut rng).unwrap();
                    let b = sample_initial(&spec, n, &mut rng).unwrap();
                    wasserstein1(a.q(), b.q()).unwrap()
                })
                .sum::<f64>()
                / reps as f64
        };
        assert!(mean_w1(256) < mean_w1(64));
    }

    fn data(count: usize) -> Vec<SnapshotSeries> {
        let spec = DatasetSpec {
            grid: GridSpec::new(16, 16.0).unwrap(),
            physics: PhysicsParams {
                charge: 0.1,
                eps0: 1.0,
                dt: 0.1,
            },
            n_particles: 5,
            steps: 4,
            snapshot_stride: 2,
            mu_q: 8.0,
            mu_p: 0.0,
        };
        generate_dataset(&spec, count, 1, 0).unwrap()
    }

    #[test]
    fn evaluate_flow_times_and_grid() {
        let test = data(3);
        let model = FlowModel::free_streaming(&DeepSetArch { hidden: 3, set_dim: 2 }).unwrap();
        let cfg = FlowConfig { steps: 4, dt: 0.1 };
        let r = evaluate_flow(&model, "free", &test, &cfg, &[0.0, 0.2, 0.4], InitialSource::Snapshot).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.rows[0].w1_q, 0.0);
        assert_eq!(r.rows[0].w1_p, 0.0);
        assert!(r.rows.iter().all(|row| row.w1_q >= 0.0 && row.n_examples == 3));
        assert!(matches!(
            evaluate_flow(&model, "free", &test, &cfg, &[0.25], InitialSource::Snapshot),
            Err(Error::OffGrid { .. })
        ));
        assert!(matches!(
            evaluate_flow(&model, "free", &test, &cfg, &[0.1], InitialSource::Snapshot),
            Err(Error::MissingSnapshot(_))
        ));
        let fresh = evaluate_flow(&model, "free", &test, &cfg, &[0.4], InitialSource::Fresh { seed: 2 }).unwrap();
        let again = evaluate_flow(&model, "free", &test, &cfg, &[0.4], InitialSource::Fresh { seed: 2 }).unwrap();
        assert_eq!(fresh, again);
    }

    #[test]
    fn baseline_fits_identity_targets() {
        let mut train = data(16);
        for ex in &mut train {
            let first = ex.initial().clone();
            ex.states.iter_mut().for_each(|s| *s = first.clone());
        }
        let cfg = BaselineConfig {
            hidden: 32,
            epochs: 400,
            batch_size: 8,
            adam: AdamConfig {
                learning_rate: 3e-3,
                ..AdamConfig::default()
            },
            seed: 4,
        };
        let (model, history) = train_baseline(&train, &cfg).unwrap();
        assert!(history[history.len() - 1] < 1e-3 * history[0]);
        assert!(baseline_mse(&model, &train) < 1e-3);
        let r = evaluate_baseline(&model, &train, InitialSource::Snapshot).unwrap();
        assert!(r.rows[0].w1_q < 0.05);
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        let train = data(2);
        let mut rng = RngState::new(3);
        let model = BaselineModel::init(5, 3, &mut rng).unwrap();
        let idx = [0, 1];
        let (_, g) = baseline_loss_grad(&model, &train, &idx);
        let h = 1e-6;
        for (t, tensor) in model.tensors().iter().enumerate() {
            for j in 0..tensor.len().min(4) {
                let mut plus = model.clone();
                plus.tensors_mut()[t][j] += h;
                let mut minus = model.clone();
                minus.tensors_mut()[t][j] -= h;
                let fd = (baseline_loss_grad(&plus, &train, &idx).0 - baseline_loss_grad(&minus, &train, &idx).0) / (2.0 * h);
                let an = g.tensors()[t][j];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{t}/{j}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn histogram_columns_are_sorted() {
        let test = data(1);
        let model = FlowModel::free_streaming(&DeepSetArch { hidden: 3, set_dim: 2 }).unwrap();
        let cfg = FlowConfig { steps: 4, dt: 0.1 };
        let h = histograms(&model, &test[0], 0, &cfg, &[0.2, 0.4], InitialSource::Fresh { seed: 1 }).unwrap();
        for group in &h.columns {
            for (truth, model) in group {
                assert_eq!(truth.len(), 5);
                assert!(truth.windows(2).all(|w| w[0] <= w[1]));
                assert!(model.windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }
}
