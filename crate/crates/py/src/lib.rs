//! Python bindings: pipeline commands and the numeric building blocks.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use read_core::mean_teacher::{self, MeanTeacherConfig, RampShape};
use read_core::pipeline::{self, Command, PipelineConfig};
use read_core::spatial_stats::{self, ReducedDistrict};
use read_core::{geo_tiles, imagery_store, pca, regression, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Range(_) | Error::Shape(_) | Error::Parse { .. } => {
            PyValueError::new_err(e.to_string())
        }
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs one pipeline command and returns the workdir-relative outputs.
#[pyfunction]
#[pyo3(signature = (command, config, seed=None, variable=None))]
fn run_command(command: &str, config: &str, seed: Option<u64>, variable: Option<&str>) -> PyResult<Vec<String>> {
    let command: Command = command.parse().map_err(to_py)?;
    let mut cfg = PipelineConfig::load(Path::new(config)).map_err(to_py)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    let summary = pipeline::run(&cfg, command, variable).map_err(to_py)?;
    Ok(summary.outputs)
}

/// Maps each district id to its selected `(z, x, y)` tiles.
#[pyfunction]
fn select_tiles(geojson: &str, zoom: u8) -> PyResult<BTreeMap<String, Vec<(u8, u32, u32)>>> {
    let districts = imagery_store::parse_districts(geojson).map_err(to_py)?;
    let mut out = BTreeMap::new();
    for d in &districts {
        let sel = geo_tiles::select_tiles(d, zoom).map_err(to_py)?;
        out.insert(sel.district_id, sel.tiles.iter().map(|t| (t.z, t.x, t.y)).collect());
    }
    Ok(out)
}

#[pyfunction]
fn supervised_loss(probs: Vec<Vec<f64>>, labels: Vec<Vec<f64>>) -> PyResult<f64> {
    mean_teacher::supervised_loss(matrix(probs)?.view(), matrix(labels)?.view()).map_err(to_py)
}

#[pyfunction]
fn consistency_loss(student: Vec<Vec<f64>>, teacher: Vec<Vec<f64>>) -> PyResult<f64> {
    mean_teacher::consistency_loss(matrix(student)?.view(), matrix(teacher)?.view()).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (epoch, rampup_epochs=40, target=12.5, shape="linear"))]
fn rampup_weight(epoch: usize, rampup_epochs: usize, target: f64, shape: &str) -> PyResult<f64> {
    let ramp = match shape {
        "sigmoid" => RampShape::Sigmoid,
        "linear" => RampShape::Linear,
        other => return Err(PyValueError::new_err(format!("unknown ramp shape `{other}`"))),
    };
    let cfg = MeanTeacherConfig {
        rampup_epochs,
        rampup_target: target,
        ramp,
        ..MeanTeacherConfig::default()
    };
    cfg.validate().map_err(to_py)?;
    Ok(mean_teacher::rampup_weight(epoch, &cfg))
}

/// Full representation of one district from its `n × k` reduced tiles.
#[pyfunction]
fn representation(features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let district = ReducedDistrict {
        district_id: String::new(),
        features: matrix(features)?,
    };
    Ok(spatial_stats::represent(&district).map_err(to_py)?.vector())
}

#[pyfunction]
fn repr_len(k: usize) -> usize {
    spatial_stats::repr_len(k)
}

/// Returns `(mean, components, explained_variance_ratio)`.
#[pyfunction]
fn pca_fit(x: Vec<Vec<f64>>, k: usize) -> PyResult<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let m = pca::fit(matrix(x)?.view(), k).map_err(to_py)?;
    Ok((
        m.mean.to_vec(),
        m.components.rows().into_iter().map(|r| r.to_vec()).collect(),
        m.explained_variance_ratio.to_vec(),
    ))
}

#[pyfunction]
fn r2(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    regression::r2(&y, &y_hat).map_err(to_py)
}

#[pyfunction]
fn mse(y: Vec<f64>, y_hat: Vec<f64>) -> PyResult<f64> {
    regression::mse(&y, &y_hat).map_err(to_py)
}

#[pymodule]
fn read_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    m.add_function(wrap_pyfunction!(select_tiles, m)?)?;
    m.add_function(wrap_pyfunction!(supervised_loss, m)?)?;
    m.add_function(wrap_pyfunction!(consistency_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rampup_weight, m)?)?;
    m.add_function(wrap_pyfunction!(representation, m)?)?;
    m.add_function(wrap_pyfunction!(repr_len, m)?)?;
    m.add_function(wrap_pyfunction!(pca_fit, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(mse, m)?)?;
    Ok(())
}
