//! Checkpoint directories: `manifest.json` plus one little-endian blob per tensor.

use std::fs;
use std::path::Path;

use dpn_core::model::{BnState, Model};
use dpn_core::{Real, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, RunError};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    Velocity,
    BnMean,
    BnVar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    file: String,
}

/// Where the per-epoch random streams restart from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub epoch: usize,
    pub top1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    dtype: String,
    /// Completed epochs.
    epoch: usize,
    steps: u64,
    rng: RngState,
    config_hash: String,
    momentum: f64,
    weight_decay: f64,
    best: Option<BestSoFar>,
    tensors: Vec<Entry>,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub velocity: Vec<Tensor<T>>,
    pub epoch: usize,
    pub steps: u64,
    pub rng: RngState,
    pub best: Option<BestSoFar>,
}

/// Run-level facts stored beside the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub steps: u64,
    pub rng: RngState,
    pub config_hash: String,
    pub best: Option<BestSoFar>,
}

fn blob_name(i: usize) -> String {
    format!("{i:04}.bin")
}

/// Writes `state` into `dir`, replacing any previous checkpoint there as a whole.
pub fn save<T: Real>(dir: &Path, state: &TrainState<T>, config_hash: &str, momentum: f64, weight_decay: f64) -> Result<()> {
    let params = state.model.params();
    let mut tensors: Vec<(String, Role, Tensor<T>)> = Vec::new();
    for (name, t) in params.names().iter().zip(params.tensors()) {
        if !t.is_finite() {
            return Err(RunError::Core(dpn_core::Error::NonFinite(format!(
                "refusing to checkpoint non-finite parameter {name}"
            ))));
        }
        tensors.push((name.clone(), Role::Param, t.clone()));
    }
    for (name, v) in params.names().iter().zip(&state.velocity) {
        tensors.push((name.clone(), Role::Velocity, v.clone()));
    }
    for (i, bn) in state.model.bn_states().iter().enumerate() {
        let c = bn.running_mean.len();
        tensors.push((format!("bn{i}"), Role::BnMean, Tensor::new(&[c], bn.running_mean.clone())?));
        tensors.push((format!("bn{i}"), Role::BnVar, Tensor::new(&[c], bn.running_var.clone())?));
    }

    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| RunError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| RunError::io(&tmp, e))?;
    let mut entries = Vec::new();
    for (i, (name, role, t)) in tensors.iter().enumerate() {
        let file = blob_name(i);
        let path = tmp.join(&file);
        let mut bytes = Vec::with_capacity(t.len() * core::mem::size_of::<T>());
        for &v in t.data() {
            v.to_le_bytes_vec(&mut bytes);
        }
        fs::write(&path, bytes).map_err(|e| RunError::io(&path, e))?;
        entries.push(Entry {
            name: name.clone(),
            role: *role,
            shape: t.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        dtype: T::DTYPE.into(),
        epoch: state.epoch,
        steps: state.steps,
        rng: state.rng,
        config_hash: config_hash.into(),
        momentum,
        weight_decay,
        best: state.best.clone(),
        tensors: entries,
    };
    let path = tmp.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
        .map_err(|e| RunError::io(&path, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| RunError::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| RunError::io(dir, e))
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| RunError::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| RunError::Format(format!("{}: {e}", path.display())))?;
    if m.format != FORMAT_VERSION {
        return Err(RunError::Format(format!("{}: unsupported format {}", path.display(), m.format)));
    }
    Ok(m)
}

pub fn info(dir: &Path) -> Result<CheckpointInfo> {
    let m = read_manifest(dir)?;
    Ok(CheckpointInfo {
        epoch: m.epoch,
        steps: m.steps,
        rng: m.rng,
        config_hash: m.config_hash,
        best: m.best,
    })
}

fn read_blob<T: Real>(dir: &Path, e: &Entry) -> Result<Tensor<T>> {
    let path = dir.join(&e.file);
    let bytes = fs::read(&path).map_err(|err| RunError::io(&path, err))?;
    let width = core::mem::size_of::<T>();
    let n: usize = e.shape.iter().product();
    if bytes.len() != n * width {
        return Err(RunError::Format(format!(
            "{}: {} bytes for shape {:?} of {}",
            path.display(),
            bytes.len(),
            e.shape,
            T::DTYPE
        )));
    }
    let data = bytes.chunks_exact(width).map(T::from_le_slice).collect();
    Ok(Tensor::new(&e.shape, data)?)
}

/// Loads a checkpoint into `model`, which must have been built from a
/// compatible model spec; any name, shape or dtype difference is a mismatch.
pub fn load<T: Real>(dir: &Path, mut model: Model<T>) -> Result<(TrainState<T>, CheckpointInfo)> {
    let m = read_manifest(dir)?;
    if m.dtype != T::DTYPE {
        return Err(RunError::Mismatch(format!(
            "{}: checkpoint holds {} tensors, expected {}",
            dir.display(),
            m.dtype,
            T::DTYPE
        )));
    }
    let by_role = |r: Role| m.tensors.iter().filter(move |e| e.role == r).collect::<Vec<_>>();
    let (params, vel, means, vars) = (by_role(Role::Param), by_role(Role::Velocity), by_role(Role::BnMean), by_role(Role::BnVar));
    let names = model.params().names().to_vec();
    let shapes: Vec<Vec<usize>> = model.params().tensors().iter().map(|t| t.shape().to_vec()).collect();
    if params.len() != names.len() || vel.len() != names.len() || means.len() != model.bn_states().len() || vars.len() != means.len() {
        return Err(RunError::Mismatch(format!(
            "{}: checkpoint has {} parameter tensors and {} batch norms, the configured model has {} and {}",
            dir.display(),
            params.len(),
            means.len(),
            names.len(),
            model.bn_states().len()
        )));
    }
    for (i, e) in params.iter().enumerate() {
        if e.name != names[i] || e.shape != shapes[i] || vel[i].shape != shapes[i] {
            return Err(RunError::Mismatch(format!(
                "{}: tensor {i} is {} {:?} in the checkpoint but {} {:?} in the configured model",
                dir.display(),
                e.name,
                e.shape,
                names[i],
                shapes[i]
            )));
        }
    }
    let mut velocity = Vec::with_capacity(vel.len());
    for (i, (p, v)) in params.iter().zip(&vel).enumerate() {
        model.params_mut().tensors_mut()[i] = read_blob(dir, p)?;
        velocity.push(read_blob(dir, v)?);
    }
    let mut bn = Vec::with_capacity(means.len());
    for (i, (mean, var)) in means.iter().zip(&vars).enumerate() {
        let c = model.bn_states()[i].running_mean.len();
        if mean.shape != [c] || var.shape != [c] {
            return Err(RunError::Mismatch(format!("{}: batch norm {i} width differs", dir.display())));
        }
        bn.push(BnState {
            running_mean: read_blob::<T>(dir, mean)?.into_data(),
            running_var: read_blob::<T>(dir, var)?.into_data(),
        });
    }
    model.bn_states_mut().clone_from_slice(&bn);
    let info = CheckpointInfo {
        epoch: m.epoch,
        steps: m.steps,
        rng: m.rng,
        config_hash: m.config_hash,
        best: m.best,
    };
    let state = TrainState {
        model,
        velocity,
        epoch: m.epoch,
        steps: m.steps,
        rng: m.rng,
        best: info.best.clone(),
    };
    Ok((state, info))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dpn_core::model::{build, ModelSpec, Preset};

    fn state(seed: u64) -> TrainState<f32> {
        let model = build::<f32>(&ModelSpec::new(Preset::PlainCnn, true, 4), seed).unwrap();
        let velocity = model.params().tensors().iter().map(|t| t.map(|v| v * 0.5)).collect();
        TrainState {
            model,
            velocity,
            epoch: 3,
            steps: 42,
            rng: RngState { seed: 9, next_epoch: 3 },
            best: Some(BestSoFar { epoch: 1, top1: 0.1 + 0.2 }),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("latest");
        let mut s = state(1);
        s.model.bn_states_mut()[0].running_mean[0] = 0.125;
        save(&ck, &s, "abc", 0.9, 5e-4).unwrap();
        let fresh = build::<f32>(s.model.spec(), 77).unwrap();
        let (back, info) = load(&ck, fresh).unwrap();
        assert_eq!(back.model.params().tensors(), s.model.params().tensors());
        assert_eq!(back.model.bn_states(), s.model.bn_states());
        assert_eq!(back.velocity, s.velocity);
        assert_eq!(info.config_hash, "abc");
        assert_eq!(info.best.unwrap().top1, 0.1 + 0.2);
        assert_eq!((back.epoch, back.steps, back.rng), (3, 42, s.rng));
    }

    #[test]
    fn incompatible_model_is_a_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("latest");
        save(&ck, &state(1), "abc", 0.9, 5e-4).unwrap();
        let other = build::<f32>(&ModelSpec::new(Preset::PlainCnn, false, 4), 0).unwrap();
        assert!(matches!(load(&ck, other), Err(RunError::Mismatch(_))));
        let wide = build::<f64>(&ModelSpec::new(Preset::PlainCnn, true, 4), 0).unwrap();
        assert!(matches!(load(&ck, wide), Err(RunError::Mismatch(_))));
    }

    #[test]
    fn non_finite_parameters_are_not_written() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("latest");
        let mut s = state(1);
        save(&ck, &s, "abc", 0.9, 5e-4).unwrap();
        s.model.params_mut().tensors_mut()[0].data_mut()[0] = f32::NAN;
        assert!(save(&ck, &s, "abc", 0.9, 5e-4).is_err());
        // the previous checkpoint survives
        assert_eq!(info(&ck).unwrap().epoch, 3);
    }
}
