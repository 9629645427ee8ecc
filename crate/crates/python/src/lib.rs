//! Python bindings: model load/save/fusion/inference, weight projections,
//! and one-shot kernel tuning.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use cadm_core::autotune::{bucket_of, tune_layer, KernelId, ShapeKey, TuneCache, TunerOptions};
use cadm_core::engine::{execute_graph, ExecOptions};
use cadm_core::fusion::run_fusion_pipeline;
use cadm_core::graph::{validate_graph, Graph};
use cadm_core::model::{load_model, save_model};
use cadm_core::reference::{build_reference_graph, ReferenceModel};
use cadm_core::tensor::{Layout, Tensor};

fn err(e: cadm_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A layer graph in the CADM model format.
#[pyclass]
struct Model {
    graph: Graph,
}

#[pymethods]
impl Model {
    /// Load a CADM v1 model file.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { graph: load_model(path.as_ref()).map_err(err)? })
    }

    /// Build a reference topology: mobilenet_v1, mobilenet_v2_stub, lenet5,
    /// or lenet_300_100.
    #[staticmethod]
    fn reference(name: &str) -> PyResult<Self> {
        let graph =
            build_reference_graph(ReferenceModel::parse(name).map_err(err)?).map_err(err)?;
        Ok(Self { graph })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_model(&self.graph, path.as_ref()).map_err(err)
    }

    #[getter]
    fn layer_count(&self) -> usize {
        self.graph.layer_count()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.graph.nodes.len()
    }

    #[getter]
    fn input_dims(&self) -> PyResult<Vec<usize>> {
        let id = self
            .graph
            .inputs
            .first()
            .ok_or_else(|| PyValueError::new_err("model has no input node"))?;
        match &self.graph.node(*id).unwrap().kind {
            cadm_core::graph::LayerKind::Input { dims } => Ok(dims.clone()),
            _ => Err(PyValueError::new_err("input id is not an Input node")),
        }
    }

    /// Structural diagnostics; an empty list means the graph is valid.
    fn validate(&self) -> Vec<String> {
        validate_graph(&self.graph).iter().map(|d| d.to_string()).collect()
    }

    /// Run the fusion pipeline in place; returns one line per rewrite.
    fn fuse(&mut self) -> PyResult<Vec<String>> {
        let (fused, report) = run_fusion_pipeline(&self.graph).map_err(err)?;
        self.graph = fused;
        Ok(report
            .rewrites
            .iter()
            .map(|r| format!("{}: {:?} -> {}", r.pass, r.consumed, r.produced))
            .collect())
    }

    /// Execute the graph on a flat input of the given dims (NCHW).
    #[pyo3(signature = (data, dims, threads = 1))]
    fn infer(&self, data: Vec<f32>, dims: Vec<usize>, threads: usize) -> PyResult<Vec<f32>> {
        let x = Tensor::new(dims, Layout::Nchw, data).map_err(err)?;
        let opts = ExecOptions { workers: threads, profile: false };
        Ok(execute_graph(&self.graph, &x, None, &opts).map_err(err)?.data)
    }
}

/// Keep the k largest-magnitude entries, zero the rest (ties keep the lower
/// index).
#[pyfunction]
fn project_sparsity(w: Vec<f32>, k: usize) -> PyResult<Vec<f32>> {
    cadm_core::compress::project_sparsity(&w, k).map_err(err)
}

/// Map each entry to the nearest level of an ascending grid; midpoints round
/// toward the smaller-magnitude level.
#[pyfunction]
fn project_quantization(w: Vec<f32>, levels: Vec<f32>) -> PyResult<Vec<f32>> {
    cadm_core::compress::project_quantization(&w, &levels).map_err(err)
}

/// Symmetric uniform quantization grid for `bits`-bit weights.
#[pyfunction]
fn quant_levels(w: Vec<f32>, bits: u8) -> PyResult<Vec<f32>> {
    cadm_core::compress::quant_levels(&w, bits).map_err(err)
}

/// Tune one kernel shape; returns the chosen config as a dict-like tuple
/// (tile_m, tile_n, tile_k, unroll, loop_order).
#[pyfunction]
#[pyo3(signature = (m, n, k, sparsity = 0.0, budget = 32))]
fn tune_shape(
    m: usize,
    n: usize,
    k: usize,
    sparsity: f64,
    budget: usize,
) -> PyResult<(usize, usize, usize, usize, String)> {
    let kind = if sparsity > 0.0 { KernelId::SpmmCsr } else { KernelId::GemmDense };
    let key = ShapeKey { kind, m, n, k, sparsity_bucket: bucket_of(sparsity) };
    let mut cache = TuneCache::default();
    let cfg = tune_layer(&key, budget, &mut cache, &TunerOptions::default()).map_err(err)?;
    Ok((cfg.tile_m, cfg.tile_n, cfg.tile_k, cfg.unroll, cfg.loop_order.as_str().to_string()))
}

#[pymodule]
fn cadm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(project_sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(project_quantization, m)?)?;
    m.add_function(wrap_pyfunction!(quant_levels, m)?)?;
    m.add_function(wrap_pyfunction!(tune_shape, m)?)?;
    Ok(())
}
