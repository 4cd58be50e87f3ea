//! Checkpoint and dataset persistence on top of the FCAP container.

use crate::container::{Container, ContainerWriter};
use crate::data::{DatasetManifest, Source, Split, VolumeSample};
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, NamedTensor};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Loss/metric row recorded once per epoch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_loss: f64,
    pub test_error_rate: f64,
    pub val_loss: f64,
    pub val_error_rate: f64,
}

/// Optimizer moments, aligned with the model's parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(model: &Model<T>) -> Result<Self> {
        let zeros = |p: &NamedTensor<T>| Tensor::zeros(p.tensor.dims());
        Ok(AdamState {
            m: model.params().iter().map(zeros).collect::<Result<_>>()?,
            v: model.params().iter().map(zeros).collect::<Result<_>>()?,
            step: 0,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub metrics_history: Vec<EpochMetrics>,
    /// Full run configuration for provenance, as emitted by the CLI.
    pub run_config: serde_json::Value,
    pub build_version: String,
}

pub fn build_version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&AdamState<T>>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let mut w = ContainerWriter::new();
    for p in model.params() {
        w.add(&p.name, &p.tensor);
    }
    if let Some(a) = adam {
        for (p, m) in model.params().iter().zip(&a.m) {
            w.add(&format!("adam.m.{}", p.name), m);
        }
        for (p, v) in model.params().iter().zip(&a.v) {
            w.add(&format!("adam.v.{}", p.name), v);
        }
    }
    let mut meta_json = serde_json::to_value(meta)?;
    meta_json["adam_step"] = serde_json::json!(adam.map(|a| a.step).unwrap_or(0));
    meta_json["has_adam"] = serde_json::json!(adam.is_some());
    meta_json["dtype"] = serde_json::json!(T::DTYPE.tag());
    w.write(path, "checkpoint", meta_json)
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(Model<T>, Option<AdamState<T>>, CheckpointMeta)> {
    let c = Container::open(path)?;
    if c.kind != "checkpoint" {
        return Err(Error::BadFormat(format!(
            "{}: container kind '{}' is not a checkpoint",
            path.display(),
            c.kind
        )));
    }
    let dtype = c.meta["dtype"].as_str().unwrap_or("f32");
    if dtype != T::DTYPE.tag() {
        return Err(Error::BadFormat(format!(
            "checkpoint stores {dtype} parameters, requested {}",
            T::DTYPE.tag()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_value(c.meta.clone())?;
    // rebuild deterministically, then overwrite every parameter from the file
    let mut model = Model::<T>::build(meta.config.clone(), meta.seed)?;
    for p in model.params_mut() {
        let stored = c.tensor::<T>(&p.name)?;
        if stored.dims() != p.tensor.dims() {
            return Err(Error::shape("checkpoint parameter", p.tensor.shape(), stored.shape()));
        }
        p.tensor = stored;
    }
    let adam = if c.meta["has_adam"].as_bool().unwrap_or(false) {
        let mut a = AdamState::new(&model)?;
        a.step = c.meta["adam_step"].as_u64().unwrap_or(0);
        for (i, p) in model.params().iter().enumerate() {
            a.m[i] = c.tensor::<T>(&format!("adam.m.{}", p.name))?;
            a.v[i] = c.tensor::<T>(&format!("adam.v.{}", p.name))?;
        }
        Some(a)
    } else {
        None
    };
    Ok((model, adam, meta))
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    seed: u64,
    source: Source,
    assignments: Vec<u8>,
    labels: Vec<u8>,
    ids: Vec<u64>,
}

pub fn save_dataset(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    if manifest.is_empty() {
        return Err(Error::InvalidArgument("refusing to save an empty dataset".into()));
    }
    let sp = manifest.samples[0].voxels.dims().to_vec();
    let mut dims = vec![manifest.len()];
    dims.extend_from_slice(&sp);
    let mut data = Vec::with_capacity(dims.iter().product());
    for s in &manifest.samples {
        if s.voxels.dims() != sp {
            return Err(Error::shape("save_dataset", format!("{sp:?}"), s.voxels.shape()));
        }
        data.extend_from_slice(s.voxels.data());
    }
    let stacked = Tensor::from_vec(&dims, data)?;
    let meta = DatasetMeta {
        seed: manifest.seed,
        source: manifest.source,
        assignments: manifest
            .assignments
            .iter()
            .map(|&a| match a {
                Split::Train => 0u8,
                Split::Val => 1,
                Split::Test => 2,
            })
            .collect(),
        labels: manifest.samples.iter().map(|s| s.label).collect(),
        ids: manifest.samples.iter().map(|s| s.id).collect(),
    };
    let mut w = ContainerWriter::new();
    w.add("voxels", &stacked);
    w.write(path, "dataset", serde_json::to_value(meta)?)
}

pub fn load_dataset(path: &Path) -> Result<DatasetManifest> {
    let c = Container::open(path)?;
    if c.kind != "dataset" {
        return Err(Error::BadFormat(format!(
            "{}: container kind '{}' is not a dataset",
            path.display(),
            c.kind
        )));
    }
    let meta: DatasetMeta = serde_json::from_value(c.meta.clone())?;
    let stacked = c.tensor::<f32>("voxels")?;
    let dims = stacked.dims();
    let n = dims[0];
    if meta.labels.len() != n || meta.assignments.len() != n || meta.ids.len() != n {
        return Err(Error::BadFormat("dataset metadata length mismatch".into()));
    }
    let sp = &dims[1..];
    let per = sp.iter().product::<usize>();
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        samples.push(VolumeSample {
            voxels: Tensor::from_vec(sp, stacked.data()[i * per..(i + 1) * per].to_vec())?,
            label: meta.labels[i],
            id: meta.ids[i],
        });
    }
    let assignments = meta
        .assignments
        .iter()
        .map(|&a| match a {
            0 => Ok(Split::Train),
            1 => Ok(Split::Val),
            2 => Ok(Split::Test),
            _ => Err(Error::BadFormat("bad split tag".into())),
        })
        .collect::<Result<_>>()?;
    Ok(DatasetManifest {
        samples,
        assignments,
        seed: meta.seed,
        source: meta.source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_nodules, SynthParams};
    use crate::network::Variant;

    fn meta_for(model: &Model<f32>) -> CheckpointMeta {
        CheckpointMeta {
            config: model.config.clone(),
            epoch: 3,
            seed: 5,
            metrics_history: vec![EpochMetrics {
                epoch: 1,
                train_loss: 0.5,
                test_loss: 0.6,
                test_error_rate: 20.0,
                val_loss: 0.55,
                val_error_rate: 18.0,
            }],
            run_config: serde_json::json!({"cmd": "test"}),
            build_version: build_version(),
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcap");
        let model = Model::<f32>::build(ModelConfig::preset(Variant::TinyTest), 5).unwrap();
        let mut adam = AdamState::new(&model).unwrap();
        adam.step = 42;
        adam.m[0] = Tensor::filled(adam.m[0].dims(), 0.125).unwrap();
        save_checkpoint(&path, &model, Some(&adam), &meta_for(&model)).unwrap();

        let (loaded, adam2, meta) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(meta.epoch, 3);
        assert_eq!(loaded.params().len(), model.params().len());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(
                a.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        let adam2 = adam2.unwrap();
        assert_eq!(adam2.step, 42);
        assert_eq!(adam2.m[0].data(), adam.m[0].data());
    }

    #[test]
    fn wrong_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.fcap");
        let model = Model::<f32>::build(ModelConfig::preset(Variant::TinyTest), 5).unwrap();
        save_checkpoint(&path, &model, None, &meta_for(&model)).unwrap();
        assert!(load_checkpoint::<f64>(&path).is_err());
        assert!(load_checkpoint::<f32>(&path).is_ok());
    }

    #[test]
    fn dataset_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.fcap");
        let mut m = synth_nodules(12, 31, &SynthParams::default()).unwrap();
        crate::data::split(&mut m, (0.5, 0.25, 0.25), 2).unwrap();
        save_dataset(&path, &m).unwrap();
        let l = load_dataset(&path).unwrap();
        assert_eq!(l.len(), 12);
        assert_eq!(l.seed, m.seed);
        assert_eq!(l.assignments, m.assignments);
        for (a, b) in m.samples.iter().zip(&l.samples) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.id, b.id);
            assert_eq!(a.voxels.data(), b.voxels.data());
        }
    }
}
