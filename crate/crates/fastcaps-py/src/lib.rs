//! Python bindings for the capsule-network engine.
//!
//! Tensors cross the boundary as flat row-major `list[float]` plus a shape
//! list, so the module has no numpy dependency. See python/smoke_test.py
//! for usage.

use fastcaps::checkpoint::AdamState;
use fastcaps::data::synth::{synth_nodules, SynthParams};
use fastcaps::data::{DatasetManifest, Split};
use fastcaps::loss::LossConfig;
use fastcaps::network::{predict, Model, ModelConfig, Variant};
use fastcaps::routing::{self, PredictionTensor, RoutingGrouping};
use fastcaps::tensor::{ops, Tensor};
use fastcaps::train::{train, TrainOptions};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: fastcaps::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor_from(values: Vec<f32>, shape: Vec<usize>) -> PyResult<Tensor<f32>> {
    Tensor::from_vec(&shape, values).map_err(err)
}

/// squash(values, shape) -> list[float]
///
/// The capsule nonlinearity over the last axis.
#[pyfunction]
fn squash(values: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<f32>> {
    let t = tensor_from(values, shape)?;
    Ok(routing::squash(&t).into_data())
}

/// softmax(values, shape, axis) -> list[float]
#[pyfunction]
fn softmax(values: Vec<f32>, shape: Vec<usize>, axis: usize) -> PyResult<Vec<f32>> {
    let t = tensor_from(values, shape)?;
    Ok(ops::softmax(&t, axis).map_err(err)?.into_data())
}

/// conv_forward(input, input_shape, kernel, kernel_shape, stride, bias)
/// -> (values, shape)
#[pyfunction]
fn conv_forward(
    input: Vec<f32>,
    input_shape: Vec<usize>,
    kernel: Vec<f32>,
    kernel_shape: Vec<usize>,
    stride: usize,
    bias: Vec<f32>,
) -> PyResult<(Vec<f32>, Vec<usize>)> {
    let x = tensor_from(input, input_shape)?;
    let k = tensor_from(kernel, kernel_shape)?;
    let blen = bias.len();
    let b = tensor_from(bias, vec![blen])?;
    let out = ops::conv_forward(&x, &k, stride, &b).map_err(err)?;
    let dims = out.dims().to_vec();
    Ok((out.into_data(), dims))
}

/// conv_transpose_forward(input, input_shape, kernel, kernel_shape, stride,
/// bias) -> (values, shape)
#[pyfunction]
fn conv_transpose_forward(
    input: Vec<f32>,
    input_shape: Vec<usize>,
    kernel: Vec<f32>,
    kernel_shape: Vec<usize>,
    stride: usize,
    bias: Vec<f32>,
) -> PyResult<(Vec<f32>, Vec<usize>)> {
    let x = tensor_from(input, input_shape)?;
    let k = tensor_from(kernel, kernel_shape)?;
    let blen = bias.len();
    let b = tensor_from(bias, vec![blen])?;
    let out = ops::conv_transpose_forward(&x, &k, stride, &b).map_err(err)?;
    let dims = out.dims().to_vec();
    Ok((out.into_data(), dims))
}

/// predict_votes(u, children, d_in, w, parents, d_out) -> flat [I, J, D_out]
#[pyfunction]
fn predict_votes(
    u: Vec<f32>,
    children: usize,
    d_in: usize,
    w: Vec<f32>,
    parents: usize,
    d_out: usize,
) -> PyResult<Vec<f32>> {
    let u = tensor_from(u, vec![children, d_in])?;
    let w = tensor_from(w, vec![children, parents, d_in, d_out])?;
    let votes = routing::predict_votes(&u, &w).map_err(err)?;
    Ok(votes.tensor().data().to_vec())
}

/// route(votes, children, parents, dim, capsules_per_location, iterations)
/// -> (activations [J*D], coefficients [G*J], logits [G*J])
///
/// capsules_per_location = 1 gives the consistent (fast) routing layout;
/// it must divide the child count.
#[pyfunction]
fn route(
    votes: Vec<f32>,
    children: usize,
    parents: usize,
    dim: usize,
    capsules_per_location: usize,
    iterations: usize,
) -> PyResult<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    if capsules_per_location == 0 || children % capsules_per_location != 0 {
        return Err(PyValueError::new_err(
            "capsules_per_location must divide the child count",
        ));
    }
    let votes =
        PredictionTensor::new(tensor_from(votes, vec![children, parents, dim])?).map_err(err)?;
    let grouping =
        RoutingGrouping::by_location(children / capsules_per_location, capsules_per_location);
    let (out, state) = routing::route(&votes, &grouping, iterations).map_err(err)?;
    Ok((
        out.activations.into_data(),
        state.coefficients.into_data(),
        state.logits.into_data(),
    ))
}

/// coefficient_count(children, parents, capsules_per_location) -> int
#[pyfunction]
fn coefficient_count(children: usize, parents: usize, capsules_per_location: usize) -> PyResult<usize> {
    if capsules_per_location == 0 || children % capsules_per_location != 0 {
        return Err(PyValueError::new_err(
            "capsules_per_location must divide the child count",
        ));
    }
    let grouping =
        RoutingGrouping::by_location(children / capsules_per_location, capsules_per_location);
    Ok(routing::coefficient_count(&grouping, parents))
}

/// margin_loss(lengths, batch, classes, targets) -> float
#[pyfunction]
fn margin_loss(lengths: Vec<f32>, batch: usize, classes: usize, targets: Vec<usize>) -> PyResult<f32> {
    let t = tensor_from(lengths, vec![batch, classes])?;
    fastcaps::loss::margin_loss(&t, &targets, &LossConfig::default()).map_err(err)
}

/// synth_dataset(n, seed) -> (voxels flat [n*32^3], labels, volume_shape)
#[pyfunction]
fn synth_dataset(n: usize, seed: u64) -> PyResult<(Vec<f32>, Vec<u8>, Vec<usize>)> {
    let m = synth_nodules(n, seed, &SynthParams::default()).map_err(err)?;
    let mut voxels = Vec::with_capacity(n * 32 * 32 * 32);
    let mut labels = Vec::with_capacity(n);
    for s in &m.samples {
        voxels.extend_from_slice(s.voxels.data());
        labels.push(s.label);
    }
    Ok((voxels, labels, vec![32, 32, 32]))
}

/// A built capsule network.
#[pyclass]
struct CapsNet {
    model: Model<f32>,
}

#[pymethods]
impl CapsNet {
    /// CapsNet(variant, seed): variant is one of "original-2d", "fast-2d",
    /// "fast-3d", "tiny-test", "fast-3d-tiny".
    #[new]
    fn new(variant: &str, seed: u64) -> PyResult<Self> {
        let config = if variant == "fast-3d-tiny" {
            ModelConfig::fast3d_tiny()
        } else {
            ModelConfig::preset(Variant::parse(variant).map_err(err)?)
        };
        Ok(CapsNet {
            model: Model::build(config, seed).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.model.config)
            .map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// forward(batch, shape [N, spatial...]) -> (lengths [N*J], J)
    fn forward(&self, batch: Vec<f32>, shape: Vec<usize>) -> PyResult<(Vec<f32>, usize)> {
        let input = tensor_from(batch, shape)?;
        let fwd = self.model.forward(&input).map_err(err)?;
        Ok((fwd.lengths().data().to_vec(), self.model.config.classes))
    }

    /// predict(batch, shape) -> list[int]
    fn predict(&self, batch: Vec<f32>, shape: Vec<usize>) -> PyResult<Vec<usize>> {
        let input = tensor_from(batch, shape)?;
        let fwd = self.model.forward(&input).map_err(err)?;
        Ok(predict(fwd.lengths()))
    }

    /// fit_synthetic(n, seed, epochs, batch_size) -> final test error (%)
    ///
    /// Convenience training loop on a generated dataset; 2D variants see
    /// the middle slice along x.
    fn fit_synthetic(&mut self, n: usize, seed: u64, epochs: usize, batch_size: usize) -> PyResult<f64> {
        let mut data = synth_nodules(n, seed, &SynthParams::default()).map_err(err)?;
        fastcaps::data::split(&mut data, (0.8, 0.1, 0.1), seed).map_err(err)?;
        let slice_axis = (self.model.config.spatial_rank() == 2).then_some(0);
        let opts = TrainOptions {
            epochs,
            batch_size,
            seed,
            slice_axis,
            ..Default::default()
        };
        let adam = AdamState::new(&self.model).map_err(err)?;
        let out = train(&mut self.model, &data, &opts, adam, 0).map_err(err)?;
        Ok(out.history.last().map(|m| m.test_error_rate).unwrap_or(f64::NAN))
    }

    /// evaluate_synthetic(n, seed) -> dict-like tuple
    /// (precision, recall, error_rate, accuracy)
    fn evaluate_synthetic(&self, n: usize, seed: u64) -> PyResult<(f64, f64, f64, f64)> {
        let mut data: DatasetManifest = synth_nodules(n, seed, &SynthParams::default()).map_err(err)?;
        fastcaps::data::split(&mut data, (0.0, 0.0, 1.0), seed).map_err(err)?;
        let slice_axis = (self.model.config.spatial_rank() == 2).then_some(0);
        let r = fastcaps::train::evaluate(&self.model, &data, Split::Test, 16, slice_axis)
            .map_err(err)?;
        Ok((r.precision, r.recall, r.error_rate, r.accuracy))
    }
}

#[pymodule]
fn fastcaps_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CapsNet>()?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(conv_forward, m)?)?;
    m.add_function(wrap_pyfunction!(conv_transpose_forward, m)?)?;
    m.add_function(wrap_pyfunction!(predict_votes, m)?)?;
    m.add_function(wrap_pyfunction!(route, m)?)?;
    m.add_function(wrap_pyfunction!(coefficient_count, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    Ok(())
}
