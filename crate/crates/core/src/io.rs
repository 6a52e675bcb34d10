//! Binary dataset and checkpoint formats, atomic file writes and CSV output.
//!
//! Both binary formats are little-endian. A dataset file is
//!
//! ```text
//! "PNHF" u32 version u32 examples u32 n_particles u32 snapshots
//! snapshots x f64 time
//! per example: f64 mu_q sigma_q mu_p sigma_p, then per snapshot N x f64 q, N x f64 p
//! ```
//!
//! and a checkpoint is a list of named tensors:
//!
//! ```text
//! "PNHW" u32 version u32 tensors
//! per tensor: u16 name_len, name, u8 rank, rank x u32 dims, f64 data
//! ```

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{BaselineModel, EvalReport, Histograms};
use crate::flow::FlowTrajectory;
use crate::nn::{Activation, DeepSetArch, DeepSetPotential, FlowModel, KineticScale, Layer, Mlp, Parameters};
use crate::phase::{GaussianInitSpec, ParticleSystem, SnapshotSeries};
use crate::train::{AdamState, EpochMetrics};

pub const DATASET_MAGIC: &[u8; 4] = b"PNHF";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PNHW";
pub const FORMAT_VERSION: u32 = 1;

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    corrupt: fn(String) -> Error,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], corrupt: fn(String) -> Error) -> Self {
        Reader { bytes, pos: 0, corrupt }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err((self.corrupt)(format!(
                "truncated: needed {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| (self.corrupt)("length overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let found = self.take(4)?;
        if found != magic {
            return Err((self.corrupt)(format!("bad magic {found:?}")));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err((self.corrupt)(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err((self.corrupt)(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidState(format!("{what} {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_dataset(examples: &[SnapshotSeries]) -> Result<Vec<u8>> {
    let first = examples.first().ok_or(Error::Empty("dataset"))?;
    let n = first.n_particles();
    let times = &first.times;
    for ex in examples {
        if ex.n_particles() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: ex.n_particles(),
            });
        }
        if ex.times != *times {
            return Err(Error::InvalidState("examples disagree on snapshot times".into()));
        }
    }
    let mut out = Vec::with_capacity(24 + examples.len() * (32 + times.len() * 16 * n));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, examples.len(), "example count")?;
    put_u32(&mut out, n, "particle count")?;
    put_u32(&mut out, times.len(), "snapshot count")?;
    put_f64s(&mut out, times);
    for ex in examples {
        let s = &ex.spec;
        put_f64s(&mut out, &[s.mu_q, s.sigma_q, s.mu_p, s.sigma_p]);
        for state in &ex.states {
            put_f64s(&mut out, state.q());
            put_f64s(&mut out, state.p());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SnapshotSeries>> {
    let corrupt = Error::CorruptDataset as fn(String) -> Error;
    let mut r = Reader::new(bytes, corrupt);
    r.header(DATASET_MAGIC)?;
    let count = r.u32()? as usize;
    let n = r.u32()? as usize;
    let snaps = r.u32()? as usize;
    let times = r.f64s(snaps)?;
    let mut out = Vec::with_capacity(count.min(bytes.len() / 8));
    for i in 0..count {
        let v = r.f64s(4)?;
        let spec = GaussianInitSpec {
            mu_q: v[0],
            sigma_q: v[1],
            mu_p: v[2],
            sigma_p: v[3],
        };
        let mut states = Vec::with_capacity(snaps);
        for _ in 0..snaps {
            let q = r.f64s(n)?;
            let p = r.f64s(n)?;
            states.push(ParticleSystem::new(q, p).map_err(|e| corrupt(format!("example {i}: {e}")))?);
        }
        let series = SnapshotSeries::new(times.clone(), states, spec).map_err(|e| corrupt(format!("example {i}: {e}")))?;
        out.push(series);
    }
    r.finish()?;
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[SnapshotSeries]) -> Result<()> {
    write_atomic(path, &encode_dataset(examples)?)
}

pub fn read_dataset(path: &Path) -> Result<Vec<SnapshotSeries>> {
    decode_dataset(&read_file(path)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        NamedTensor {
            name: name.into(),
            dims,
            data,
        }
    }
}

pub fn encode_tensors(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, tensors.len(), "tensor count")?;
    for t in tensors {
        if t.dims.iter().product::<usize>() != t.data.len() {
            return Err(Error::ShapeMismatch(format!("tensor {} dims {:?} hold {} values", t.name, t.dims, t.data.len())));
        }
        let name_len = u16::try_from(t.name.len()).map_err(|_| Error::InvalidState(format!("tensor name too long: {}", t.name)))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::InvalidState(format!("tensor {} rank too large", t.name)))?;
        out.push(rank);
        for &d in &t.dims {
            put_u32(&mut out, d, "tensor dimension")?;
        }
        put_f64s(&mut out, &t.data);
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let corrupt = Error::CorruptCheckpoint as fn(String) -> Error;
    let mut r = Reader::new(bytes, corrupt);
    r.header(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut out: Vec<NamedTensor> = Vec::with_capacity(count.min(bytes.len()));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let size = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| corrupt(format!("tensor {name} is too large")))?;
        let data = r.f64s(size)?;
        if out.iter().any(|t| t.name == name) {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
        out.push(NamedTensor { name, dims, data });
    }
    r.finish()?;
    Ok(out)
}

fn mlp_tensors(prefix: &str, mlp: &Mlp, out: &mut Vec<NamedTensor>) {
    for (l, layer) in mlp.layers.iter().enumerate() {
        out.push(NamedTensor::new(
            format!("{prefix}.{l}.weight"),
            vec![layer.outputs, layer.inputs],
            layer.weight.clone(),
        ));
        out.push(NamedTensor::new(format!("{prefix}.{l}.bias"), vec![layer.outputs], layer.bias.clone()));
    }
}

/// Tensors keyed by name; every lookup removes its entry so leftovers can be
/// reported.
struct TensorSet(Vec<NamedTensor>);

impl TensorSet {
    fn take(&mut self, name: &str) -> Option<NamedTensor> {
        let i = self.0.iter().position(|t| t.name == name)?;
        Some(self.0.swap_remove(i))
    }

    fn require(&mut self, name: &str) -> Result<NamedTensor> {
        self.take(name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor {name}")))
    }

    fn mlp(&mut self, prefix: &str) -> Result<Mlp> {
        let mut layers = Vec::new();
        while let Some(w) = self.take(&format!("{prefix}.{}.weight", layers.len())) {
            let b = self.require(&format!("{prefix}.{}.bias", layers.len()))?;
            if w.dims.len() != 2 || b.dims.len() != 1 || b.dims[0] != w.dims[0] {
                return Err(Error::CorruptCheckpoint(format!("{} has inconsistent shapes", w.name)));
            }
            layers.push(Layer {
                inputs: w.dims[1],
                outputs: w.dims[0],
                weight: w.data,
                bias: b.data,
                activation: Activation::Softplus,
            });
        }
        match layers.last_mut() {
            Some(last) => last.activation = Activation::Identity,
            None => return Err(Error::CorruptCheckpoint(format!("missing tensor {prefix}.0.weight"))),
        }
        Mlp::from_layers(layers).map_err(|e| Error::CorruptCheckpoint(format!("{prefix}: {e}")))
    }

    fn scalar(&mut self, name: &str) -> Result<f64> {
        let t = self.require(name)?;
        if t.data.len() != 1 {
            return Err(Error::CorruptCheckpoint(format!("{name} must hold one value")));
        }
        Ok(t.data[0])
    }

    fn finish(self) -> Result<()> {
        match self.0.first() {
            Some(t) => Err(Error::CorruptCheckpoint(format!("unexpected tensor {}", t.name))),
            None => Ok(()),
        }
    }
}

fn model_names(model: &FlowModel) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    mlp_tensors("phi", &model.potential.phi, &mut out);
    mlp_tensors("psi", &model.potential.psi, &mut out);
    out.push(NamedTensor::new("log_a", vec![1], vec![model.kinetic.log_a]));
    out
}

pub fn flow_tensors(model: &FlowModel, adam: Option<&AdamState>) -> Vec<NamedTensor> {
    let mut out = model_names(model);
    if let Some(adam) = adam {
        let n = out.len();
        for i in 0..n {
            let (name, dims) = (out[i].name.clone(), out[i].dims.clone());
            out.push(NamedTensor::new(format!("adam.m.{name}"), dims.clone(), adam.m[i].clone()));
            out.push(NamedTensor::new(format!("adam.v.{name}"), dims, adam.v[i].clone()));
        }
        out.push(NamedTensor::new("adam.step", vec![1], vec![adam.step as f64]));
    }
    out
}

/// Rebuilds a model (and optimizer state when present). With `expected`, the
/// stored architecture must match it.
pub fn flow_from_tensors(
    tensors: Vec<NamedTensor>,
    expected: Option<&DeepSetArch>,
) -> Result<(FlowModel, Option<AdamState>)> {
    let mut set = TensorSet(tensors);
    let phi = set.mlp("phi")?;
    let psi = set.mlp("psi")?;
    if phi.layers.len() != 2 || psi.layers.len() != 2 {
        return Err(Error::ArchitectureMismatch(format!(
            "expected two layers in phi and psi, found {} and {}",
            phi.layers.len(),
            psi.layers.len()
        )));
    }
    let found = DeepSetArch {
        hidden: phi.layers[0].outputs,
        set_dim: phi.output_dim(),
    };
    if psi.layers[0].outputs != found.hidden {
        return Err(Error::ArchitectureMismatch(format!(
            "hidden: phi uses {}, psi uses {}",
            found.hidden, psi.layers[0].outputs
        )));
    }
    if let Some(want) = expected {
        if want.hidden != found.hidden {
            return Err(Error::ArchitectureMismatch(format!(
                "hidden: checkpoint has {}, config expects {}",
                found.hidden, want.hidden
            )));
        }
        if want.set_dim != found.set_dim {
            return Err(Error::ArchitectureMismatch(format!(
                "set_dim: checkpoint has {}, config expects {}",
                found.set_dim, want.set_dim
            )));
        }
    }
    let potential = DeepSetPotential::from_parts(phi, psi)?;
    let log_a = set.scalar("log_a")?;
    let model = FlowModel {
        potential,
        kinetic: KineticScale { log_a },
    };
    let adam = match set.take("adam.step") {
        None => None,
        Some(step) => {
            let step = step.data.first().copied().unwrap_or(f64::NAN);
            if !(step >= 0.0 && step.fract() == 0.0) {
                return Err(Error::CorruptCheckpoint(format!("adam.step {step} is not a count")));
            }
            let names = model_names(&model);
            let mut m = Vec::with_capacity(names.len());
            let mut v = Vec::with_capacity(names.len());
            for (t, p) in names.iter().zip(model.tensors()) {
                for (buf, kind) in [(&mut m, "m"), (&mut v, "v")] {
                    let x = set.require(&format!("adam.{kind}.{}", t.name))?;
                    if x.data.len() != p.len() {
                        return Err(Error::CorruptCheckpoint(format!("{} has the wrong size", x.name)));
                    }
                    buf.push(x.data);
                }
            }
            Some(AdamState {
                m,
                v,
                step: step as u64,
            })
        }
    };
    set.finish()?;
    Ok((model, adam))
}

pub fn save_checkpoint(path: &Path, model: &FlowModel, adam: Option<&AdamState>) -> Result<()> {
    write_atomic(path, &encode_tensors(&flow_tensors(model, adam))?)
}

pub fn load_checkpoint(path: &Path, expected: Option<&DeepSetArch>) -> Result<(FlowModel, Option<AdamState>)> {
    flow_from_tensors(decode_tensors(&read_file(path)?)?, expected)
}

pub fn save_baseline(path: &Path, model: &BaselineModel) -> Result<()> {
    let mut out = Vec::new();
    mlp_tensors("mlp_q", &model.mlp_q, &mut out);
    mlp_tensors("mlp_p", &model.mlp_p, &mut out);
    write_atomic(path, &encode_tensors(&out)?)
}

pub fn load_baseline(path: &Path) -> Result<BaselineModel> {
    let mut set = TensorSet(decode_tensors(&read_file(path)?)?);
    let mlp_q = set.mlp("mlp_q")?;
    let mlp_p = set.mlp("mlp_p")?;
    set.finish()?;
    BaselineModel::from_parts(mlp_q, mlp_p)
}

/// `epoch,train_loss,val_loss,a,wall_seconds`
pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from("epoch,train_loss,val_loss,a,wall_seconds\n");
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.a, r.wall_seconds).unwrap();
    }
    s
}

/// `time,w1_q,w1_p,n_examples,L,dt,model_id`; `L` and `dt` are empty for
/// models that do not integrate.
pub fn report_csv(report: &EvalReport) -> String {
    let mut s = String::from("time,w1_q,w1_p,n_examples,L,dt,model_id\n");
    let (l, dt) = match report.flow {
        Some(f) => (f.steps.to_string(), f.dt.to_string()),
        None => (String::new(), String::new()),
    };
    for r in &report.rows {
        writeln!(s, "{},{},{},{},{l},{dt},{}", r.time, r.w1_q, r.w1_p, r.n_examples, report.model_id).unwrap();
    }
    s
}

/// One row per particle: `rank,cdf` and then a sorted column per
/// `(marginal, source, time)`.
pub fn histograms_csv(h: &Histograms) -> String {
    let n = h.columns.first().map_or(0, |c| c[0].0.len());
    let mut s = String::from("rank,cdf");
    for t in &h.times {
        for m in ["q", "p"] {
            write!(s, ",{m}_truth_t{t},{m}_model_t{t}").unwrap();
        }
    }
    s.push('\n');
    for j in 0..n {
        write!(s, "{},{}", j, (j + 1) as f64 / n as f64).unwrap();
        for group in &h.columns {
            for (truth, model) in group {
                write!(s, ",{},{}", truth[j], model[j]).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

/// `step,time,q0..,p0..`, one row per state.
pub fn trajectory_csv(traj: &FlowTrajectory) -> String {
    let n = traj.states[0].len();
    let mut s = String::from("step,time");
    for i in 0..n {
        write!(s, ",q{i}").unwrap();
    }
    for i in 0..n {
        write!(s, ",p{i}").unwrap();
    }
    s.push('\n');
    for (k, state) in traj.states.iter().enumerate() {
        write!(s, "{k},{}", k as f64 * traj.step).unwrap();
        for v in state.q().iter().chain(state.p()) {
            write!(s, ",{v}").unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::RngState;
    use crate::pic::{generate_dataset, DatasetSpec, GridSpec, PhysicsParams};
    use crate::train::init_model;
    use proptest::prelude::*;

    fn data(count: usize, n: usize, seed: u64) -> Vec<SnapshotSeries> {
        let spec = DatasetSpec {
            grid: GridSpec::new(8, 8.0).unwrap(),
            physics: PhysicsParams {
                charge: 0.1,
                eps0: 1.0,
                dt: 0.1,
            },
            n_particles: n,
            steps: 4,
            snapshot_stride: 2,
            mu_q: 4.0,
            mu_p: 0.0,
        };
        generate_dataset(&spec, count, seed, 0).unwrap()
    }

    fn bits(x: &[SnapshotSeries]) -> Vec<u64> {
        x.iter()
            .flat_map(|e| {
                let s = e.spec;
                let mut v: Vec<u64> = e.times.iter().map(|t| t.to_bits()).collect();
                v.extend([s.mu_q, s.sigma_q, s.mu_p, s.sigma_p].map(f64::to_bits));
                for st in &e.states {
                    v.extend(st.q().iter().chain(st.p()).map(|x| x.to_bits()));
                }
                v
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn dataset_round_trip(count in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
            let d = data(count, n, seed);
            let bytes = encode_dataset(&d).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            prop_assert_eq!(bits(&back), bits(&d));
            prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }

        #[test]
        fn checkpoint_round_trip(hidden in 1usize..6, set_dim in 1usize..4, seed in any::<u64>()) {
            let model = init_model(&DeepSetArch { hidden, set_dim }, 0.7, seed).unwrap();
            let mut adam = AdamState::new(&model);
            adam.step = 9;
            adam.m[1][0] = 0.25;
            let bytes = encode_tensors(&flow_tensors(&model, Some(&adam))).unwrap();
            let (back, back_adam) = flow_from_tensors(decode_tensors(&bytes).unwrap(), None).unwrap();
            let a: Vec<u64> = model.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect();
            let b: Vec<u64> = back.tensors().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(back_adam, Some(adam));
        }
    }

    #[test]
    fn dataset_errors() {
        let bytes = encode_dataset(&data(2, 3, 1)).unwrap();
        for cut in [0, 3, 10, bytes.len() - 1] {
            let e = decode_dataset(&bytes[..cut]).unwrap_err();
            assert!(e.to_string().starts_with("corrupt dataset"), "{e}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_dataset(&bad), Err(Error::CorruptDataset(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(decode_dataset(&bad).unwrap_err().to_string().contains("version 2"));
        let mut long = bytes;
        long.push(0);
        assert!(decode_dataset(&long).is_err());
        let mut mixed = data(1, 3, 1);
        mixed.extend(data(1, 4, 1));
        assert!(encode_dataset(&mixed).is_err());
    }

    #[test]
    fn checkpoint_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pnhw");
        let arch = DeepSetArch { hidden: 4, set_dim: 3 };
        let model = init_model(&arch, 0.5, 2).unwrap();
        save_checkpoint(&path, &model, None).unwrap();
        let (back, adam) = load_checkpoint(&path, Some(&arch)).unwrap();
        assert_eq!(back, model);
        assert!(adam.is_none());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let e = load_checkpoint(&path, None).unwrap_err();
        assert!(e.to_string().starts_with("corrupt checkpoint"), "{e}");

        std::fs::write(&path, &bytes).unwrap();
        let e = load_checkpoint(&path, Some(&DeepSetArch { hidden: 4, set_dim: 5 })).unwrap_err();
        assert!(matches!(e, Error::ArchitectureMismatch(_)));
        assert!(e.to_string().contains("set_dim"), "{e}");
        let e = load_checkpoint(&path, Some(&DeepSetArch { hidden: 8, set_dim: 3 })).unwrap_err();
        assert!(e.to_string().contains("hidden"), "{e}");

        let missing = dir.path().join("nope.pnhw");
        assert!(matches!(load_checkpoint(&missing, None), Err(Error::Io { .. })));
    }

    #[test]
    fn baseline_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.pnhw");
        let model = BaselineModel::init(3, 4, &mut RngState::new(1)).unwrap();
        save_baseline(&path, &model).unwrap();
        assert_eq!(load_baseline(&path).unwrap(), model);
        let flow = init_model(&DeepSetArch { hidden: 2, set_dim: 2 }, 1.0, 0).unwrap();
        save_checkpoint(&path, &flow, None).unwrap();
        assert!(load_baseline(&path).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn csv_shapes() {
        let m = metrics_csv(&[EpochMetrics {
            epoch: 0,
            train_loss: 1.5,
            val_loss: 2.0,
            a: 0.5,
            wall_seconds: 0.0,
        }]);
        assert_eq!(m, "epoch,train_loss,val_loss,a,wall_seconds\n0,1.5,2,0.5,0\n");
        let h = Histograms {
            times: vec![1.0],
            columns: vec![[(vec![0.0, 1.0], vec![0.5, 2.0]), (vec![-1.0, 1.0], vec![0.0, 0.0])]],
        };
        let csv = histograms_csv(&h);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "rank,cdf,q_truth_t1,q_model_t1,p_truth_t1,p_model_t1");
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[2], "1,1,1,2,1,0");
    }
}
