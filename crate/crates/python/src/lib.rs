//! Python bindings. Images are nested lists `[H][W][3]` of floats in `[0, 1]`,
//! flows are nested lists `[H][W][2]`.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sciflow::config::RunConfig;
use sciflow::data::{synth_pair as synth, SynthConfig};
use sciflow::io::{self, RgbImage};
use sciflow::metrics;
use sciflow::model::{load_checkpoint, AnyModel};
use sciflow::{Element, Error, FlowField, FlowModel, ModelConfig, Tensor};

type Image = Vec<Vec<[f64; 3]>>;
type Flow = Vec<Vec<[f64; 2]>>;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dims<const N: usize>(rows: &[Vec<[f64; N]>], what: &str) -> PyResult<(usize, usize)> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err(format!("{what} must be a non-empty rectangular [H][W][{N}] list")));
    }
    Ok((h, w))
}

/// `[H][W][N]` rows to a planar `[1,N,H,W]` tensor.
fn planar<T: Element, const N: usize>(rows: &[Vec<[f64; N]>], what: &str) -> PyResult<Tensor<T>> {
    let (h, w) = dims(rows, what)?;
    let plane = h * w;
    Ok(Tensor::from_fn(&[1, N, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        T::lit(rows[p / w][p % w][c])
    }))
}

fn flow_field(rows: &[Vec<[f64; 2]>], valid: Option<Vec<Vec<bool>>>) -> PyResult<FlowField<f64>> {
    let valid = valid.map(|v| v.into_iter().flatten().collect());
    FlowField::new(planar::<f64, 2>(rows, "flow")?, valid).map_err(py_err)
}

fn flow_rows<T: Element>(flow: &FlowField<T>) -> Flow {
    (0..flow.height())
        .map(|y| {
            (0..flow.width())
                .map(|x| {
                    let (u, v) = flow.at(0, y, x);
                    [u.as_f64(), v.as_f64()]
                })
                .collect()
        })
        .collect()
}

fn valid_rows(flow: &FlowField<f64>) -> Vec<Vec<bool>> {
    (0..flow.height())
        .map(|y| (0..flow.width()).map(|x| flow.is_valid(0, y, x)).collect())
        .collect()
}

fn image_rows(img: &RgbImage) -> Image {
    (0..img.height)
        .map(|y| (0..img.width).map(|x| img.pixel(x, y).map(|c| f64::from(c) / 255.0)).collect())
        .collect()
}

/// Recurrent flow estimator.
#[pyclass(name = "Model")]
struct PyModel {
    inner: AnyModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (
        feature_channels = 16,
        hidden_channels = 24,
        correlation_radius = 2,
        iterations = 4,
        downsample_factor = 4,
        sci_enabled = true,
        seed = 0
    ))]
    fn new(
        feature_channels: usize,
        hidden_channels: usize,
        correlation_radius: usize,
        iterations: usize,
        downsample_factor: usize,
        sci_enabled: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            feature_channels,
            hidden_channels,
            correlation_radius,
            iterations,
            downsample_factor,
            sci_enabled,
            seed,
        };
        let model = FlowModel::<f64>::new(config).map_err(py_err)?;
        Ok(Self { inner: AnyModel::F64(model) })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_checkpoint(path).map_err(py_err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        match &self.inner {
            AnyModel::F32(m) => m.save(path),
            AnyModel::F64(m) => m.save(path),
        }
        .map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        match &self.inner {
            AnyModel::F32(m) => m.parameter_count(),
            AnyModel::F64(m) => m.parameter_count(),
        }
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.config().iterations
    }

    #[getter]
    fn sci_enabled(&self) -> bool {
        self.inner.config().sci_enabled
    }

    /// One flow per refinement iteration, last one final.
    fn estimate_flow(&self, image1: Image, image2: Image) -> PyResult<Vec<Flow>> {
        fn go<T: Element>(m: &FlowModel<T>, image1: &Image, image2: &Image) -> PyResult<Vec<Flow>> {
            let i1 = planar(image1, "image1")?;
            let i2 = planar(image2, "image2")?;
            let trace = m.estimate_flow(&i1, &i2).map_err(py_err)?;
            Ok(trace.flows.iter().map(flow_rows).collect())
        }
        match &self.inner {
            AnyModel::F32(m) => go(m, &image1, &image2),
            AnyModel::F64(m) => go(m, &image1, &image2),
        }
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(feature_channels={}, hidden_channels={}, correlation_radius={}, iterations={}, downsample_factor={}, sci_enabled={}, seed={})",
            c.feature_channels,
            c.hidden_channels,
            c.correlation_radius,
            c.iterations,
            c.downsample_factor,
            if c.sci_enabled { "True" } else { "False" },
            c.seed
        )
    }
}

/// Train from `key=value` config text. Returns the model and a report dict.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &str) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let cfg = RunConfig::from_kv_text(config).map_err(py_err)?;
    let result = py
        .detach(|| sciflow::train::train::<f64>(&cfg, &mut |_| Ok(())))
        .map_err(py_err)?;
    let report = PyDict::new(py);
    report.set_item("epe", result.report.epe_mean)?;
    report.set_item("fl_all", result.report.fl_all)?;
    report.set_item("pixel_count", result.report.pixel_count)?;
    report.set_item("per_iteration_epe", result.report.per_iteration_epe.clone())?;
    report.set_item("final_loss", result.final_loss)?;
    Ok((PyModel { inner: AnyModel::F64(result.model) }, report))
}

#[pyfunction]
fn epe(pred: Flow, gt: Flow) -> PyResult<f64> {
    metrics::epe(&flow_field(&pred, None)?, &flow_field(&gt, None)?).map_err(py_err)
}

/// Outlier percentage in `[0, 100]`.
#[pyfunction]
fn fl_all(pred: Flow, gt: Flow) -> PyResult<f64> {
    metrics::fl_all(&flow_field(&pred, None)?, &flow_field(&gt, None)?).map_err(py_err)
}

/// Self-assessed confidence `[H][W]` from features given as `[C][H][W]`.
#[pyfunction]
fn sci_map(f1: Vec<Vec<Vec<f64>>>, f2: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let to_tensor = |f: &Vec<Vec<Vec<f64>>>| -> PyResult<Tensor<f64>> {
        let c = f.len();
        let h = f.first().map_or(0, Vec::len);
        let w = f.first().and_then(|p| p.first()).map_or(0, Vec::len);
        let data: Vec<f64> = f.iter().flatten().flatten().copied().collect();
        if c == 0 || data.len() != c * h * w {
            return Err(PyValueError::new_err("features must be a non-empty rectangular [C][H][W] list"));
        }
        Tensor::new(data, &[1, c, h, w]).map_err(py_err)
    };
    let map = sciflow::flow::sci_map(&to_tensor(&f1)?, &to_tensor(&f2)?).map_err(py_err)?;
    let t = map.tensor();
    let w = t.shape()[3];
    Ok(t.data().chunks(w).map(<[f64]>::to_vec).collect())
}

/// Color-wheel rendering as `[H][W]` rows of `(r, g, b)` tuples.
#[pyfunction]
#[pyo3(signature = (flow, max_magnitude = None))]
fn flow_to_color(flow: Flow, max_magnitude: Option<f64>) -> PyResult<Vec<Vec<(u8, u8, u8)>>> {
    let img = io::flow_to_color(&flow_field(&flow, None)?, max_magnitude);
    Ok((0..img.height)
        .map(|y| (0..img.width).map(|x| img.pixel(x, y).into()).collect())
        .collect())
}

/// Returns `(flow, valid)`.
#[pyfunction]
fn read_flo(path: &str) -> PyResult<(Flow, Vec<Vec<bool>>)> {
    let f = io::read_flo(path).map_err(py_err)?;
    Ok((flow_rows(&f), valid_rows(&f)))
}

#[pyfunction]
#[pyo3(signature = (path, flow, valid = None))]
fn write_flo(path: &str, flow: Flow, valid: Option<Vec<Vec<bool>>>) -> PyResult<()> {
    io::write_flo(path, &flow_field(&flow, valid)?).map_err(py_err)
}

/// Returns `(flow, valid)`.
#[pyfunction]
fn read_kitti_png(path: &str) -> PyResult<(Flow, Vec<Vec<bool>>)> {
    let f = io::read_kitti_png(path).map_err(py_err)?;
    Ok((flow_rows(&f), valid_rows(&f)))
}

#[pyfunction]
#[pyo3(signature = (path, flow, valid = None))]
fn write_kitti_png(path: &str, flow: Flow, valid: Option<Vec<Vec<bool>>>) -> PyResult<()> {
    io::write_kitti_png(path, &flow_field(&flow, valid)?).map_err(py_err)
}

#[pyfunction]
fn read_image(path: &str) -> PyResult<Image> {
    Ok(image_rows(&io::read_png_rgb(path).map_err(py_err)?))
}

/// Synthetic pair `(image1, image2, flow)` from the training generator.
#[pyfunction]
#[pyo3(signature = (index, seed = 0, width = 32, height = 32, max_displacement = 4.0))]
fn synth_pair(index: u64, seed: u64, width: usize, height: usize, max_displacement: f64) -> PyResult<(Image, Image, Flow)> {
    let cfg = SynthConfig {
        width,
        height,
        max_displacement,
        seed,
        ..SynthConfig::default()
    };
    let s = synth(&cfg, index).map_err(py_err)?;
    let flow = s.flow_gt.as_ref().map(flow_rows).unwrap_or_default();
    Ok((image_rows(&s.image1), image_rows(&s.image2), flow))
}

#[pymodule]
#[pyo3(name = "sciflow")]
fn sciflow_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(epe, m)?)?;
    m.add_function(wrap_pyfunction!(fl_all, m)?)?;
    m.add_function(wrap_pyfunction!(sci_map, m)?)?;
    m.add_function(wrap_pyfunction!(flow_to_color, m)?)?;
    m.add_function(wrap_pyfunction!(read_flo, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo, m)?)?;
    m.add_function(wrap_pyfunction!(read_kitti_png, m)?)?;
    m.add_function(wrap_pyfunction!(write_kitti_png, m)?)?;
    m.add_function(wrap_pyfunction!(read_image, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pair, m)?)?;
    Ok(())
}
