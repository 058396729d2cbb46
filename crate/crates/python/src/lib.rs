//! Python bindings for the `oamlink` simulator.

use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use oamlink::field::{self, Aperture, ComplexField, GridSpec};
use oamlink::harness::{self, LinkScenario, RunReport, SweepParam};
use oamlink::modes::{self, BasisKind};
use oamlink::security::{self, CrosstalkMatrix, FidelityModel, Strategy};
use oamlink::turbulence;

fn err(e: oamlink::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn basis(kind: &str) -> PyResult<BasisKind> {
    match kind.to_ascii_uppercase().as_str() {
        "OAM" => Ok(BasisKind::Oam),
        "ANG" => Ok(BasisKind::Ang),
        other => Err(PyValueError::new_err(format!("unknown basis `{other}`"))),
    }
}

/// Square sampling grid.
#[pyclass(name = "Grid", module = "oamlink", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyGrid(GridSpec);

#[pymethods]
impl PyGrid {
    #[new]
    fn new(n: usize, extent: f64, wavelength: f64) -> PyResult<Self> {
        field::make_grid(n, extent, wavelength).map(PyGrid).map_err(err)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n
    }

    #[getter]
    fn extent(&self) -> f64 {
        self.0.extent
    }

    #[getter]
    fn wavelength(&self) -> f64 {
        self.0.wavelength
    }

    #[getter]
    fn pitch(&self) -> f64 {
        self.0.pitch()
    }

    fn __repr__(&self) -> String {
        format!("Grid(n={}, extent={}, wavelength={})", self.0.n, self.0.extent, self.0.wavelength)
    }
}

/// Sampled complex field.
#[pyclass(name = "Field", module = "oamlink", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyField(ComplexField);

#[pymethods]
impl PyField {
    #[staticmethod]
    #[pyo3(signature = (grid, waist, center=(0.0, 0.0)))]
    fn gaussian(grid: &PyGrid, waist: f64, center: (f64, f64)) -> Self {
        PyField(ComplexField::gaussian(grid.0, waist, center))
    }

    /// LG (p = 0) mode with azimuthal index `ell`.
    #[staticmethod]
    fn oam(grid: &PyGrid, ell: i32, waist: f64) -> PyResult<Self> {
        let spec = modes::ModeSpec::new(ell, waist).map_err(err)?;
        modes::oam_field(&spec, &grid.0).map(PyField).map_err(err)
    }

    /// ANG state `j` of the space `{-L..L}`.
    #[staticmethod]
    fn ang(grid: &PyGrid, j: usize, max_ell: i32, waist: f64) -> PyResult<Self> {
        let space = modes::build_space(max_ell, 1, waist, BasisKind::Ang).map_err(err)?;
        modes::ang_field(j, &space, &grid.0).map(PyField).map_err(err)
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        PyGrid(self.0.grid)
    }

    fn power(&self) -> f64 {
        field::power(&self.0)
    }

    /// `⟨self|other⟩` as a Python complex.
    fn overlap(&self, other: &PyField) -> PyResult<Complex64> {
        field::overlap(&self.0, &other.0).map_err(err)
    }

    fn propagate(&self, distance: f64) -> PyResult<Self> {
        field::propagate(&self.0, distance).map(PyField).map_err(err)
    }

    #[pyo3(signature = (diameter, center=(0.0, 0.0)))]
    fn aperture(&self, diameter: f64, center: (f64, f64)) -> PyResult<Self> {
        let a = Aperture::new(diameter, center).map_err(err)?;
        Ok(PyField(field::apply_aperture(&self.0, &a)))
    }

    fn centroid(&self) -> PyResult<(f64, f64)> {
        field::centroid(&self.0).map_err(err)
    }

    /// Intensity as a list of rows.
    fn intensity(&self) -> Vec<Vec<f64>> {
        self.0.intensity().outer_iter().map(|r| r.to_vec()).collect()
    }
}

/// Conditional detection probabilities.
#[pyclass(name = "Crosstalk", module = "oamlink", frozen, from_py_object)]
#[derive(Clone)]
struct PyCrosstalk(CrosstalkMatrix);

#[pymethods]
impl PyCrosstalk {
    #[new]
    #[pyo3(signature = (raw, labels, basis="OAM"))]
    fn new(raw: Vec<Vec<f64>>, labels: Vec<i32>, basis: &str) -> PyResult<Self> {
        CrosstalkMatrix::from_raw(self::basis(basis)?, labels, raw)
            .map(PyCrosstalk)
            .map_err(err)
    }

    #[getter]
    fn p(&self) -> Vec<Vec<f64>> {
        self.0.p.clone()
    }

    #[getter]
    fn efficiency(&self) -> Vec<f64> {
        self.0.efficiency.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<i32> {
        self.0.labels.clone()
    }

    fn fidelity(&self) -> PyResult<f64> {
        security::fidelity(&self.0).map_err(err)
    }
}

/// Send every basis state of `{-L..L}` (spacing 1) through free space and
/// return the crosstalk matrix.
#[pyfunction]
#[pyo3(signature = (grid, max_ell, waist, distance, basis="OAM"))]
fn free_space_crosstalk(grid: &PyGrid, max_ell: i32, waist: f64, distance: f64, basis: &str) -> PyResult<PyCrosstalk> {
    let space = modes::build_space(max_ell, 1, waist, self::basis(basis)?).map_err(err)?;
    security::crosstalk(&space, &grid.0, |f| field::propagate(f, distance))
        .map(PyCrosstalk)
        .map_err(err)
}

/// Evaluate `strategy` ("none", "spacing", "hybrid") over an ensemble.
/// Returns `(dimension, threshold, mean, std, secure)`.
#[pyfunction]
#[pyo3(signature = (ensemble, strategy, k=1, pol_fidelity=1.0))]
fn evaluate_strategy(
    ensemble: Vec<PyCrosstalk>,
    strategy: &str,
    k: i32,
    pol_fidelity: f64,
) -> PyResult<(usize, f64, f64, f64, bool)> {
    let s = match strategy {
        "none" => Strategy::None,
        "spacing" => Strategy::Spacing { k },
        "hybrid" => Strategy::Hybrid { pol_fidelity },
        other => return Err(PyValueError::new_err(format!("unknown strategy `{other}`"))),
    };
    let base: Vec<CrosstalkMatrix> = ensemble.into_iter().map(|m| m.0).collect();
    let o = security::evaluate_strategy(&base, s).map_err(err)?;
    Ok((o.dimension, o.threshold, o.stats.mean, o.stats.std, o.secure))
}

#[pyfunction]
fn fidelity_threshold(d: usize) -> PyResult<f64> {
    security::fidelity_threshold(d).map_err(err)
}

#[pyfunction]
fn key_rate(d: usize, error_rate: f64) -> PyResult<f64> {
    security::key_rate(d, error_rate).map_err(err)
}

/// Least-squares coefficient for model "A" or "B".
#[pyfunction]
#[pyo3(signature = (points, model="B"))]
fn fit_fidelity_model(points: Vec<(f64, f64)>, model: &str) -> PyResult<f64> {
    let m: FidelityModel = model.parse().map_err(err)?;
    security::fit_fidelity_model(&points, m).map_err(err)
}

#[pyfunction]
fn cn2_to_r0(cn2: f64, path_length: f64, wavelength: f64) -> PyResult<f64> {
    turbulence::cn2_to_r0(cn2, path_length, wavelength).map_err(err)
}

#[pyfunction]
fn r0_to_cn2(r0: f64, path_length: f64, wavelength: f64) -> PyResult<f64> {
    turbulence::r0_to_cn2(r0, path_length, wavelength).map_err(err)
}

#[pyfunction]
fn greenwood_frequency(wind_speed: f64, r0: f64) -> PyResult<f64> {
    turbulence::greenwood_frequency(wind_speed, r0).map_err(err)
}

/// One Kolmogorov phase screen as a list of rows (radians).
#[pyfunction]
#[pyo3(signature = (grid, r0, seed, subharmonic_levels=3))]
fn phase_screen(grid: &PyGrid, r0: f64, seed: u64, subharmonic_levels: usize) -> PyResult<Vec<Vec<f64>>> {
    let params = turbulence::TurbulenceParams {
        cn2: 0.0,
        path_length: 1.0,
        wavelength: grid.0.wavelength,
        wind_velocity: (0.0, 0.0),
        n_screens: 1,
        outer_scale: None,
        subharmonic_levels,
    }
    .with_r0(r0)
    .map_err(err)?;
    let s = turbulence::make_screen(&params, &grid.0, seed).map_err(err)?;
    Ok(s.phase.outer_iter().map(|r| r.to_vec()).collect())
}

/// Full link description; build from a preset or JSON.
#[pyclass(name = "Scenario", module = "oamlink", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario(LinkScenario);

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        harness::preset(name).map(PyScenario).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        LinkScenario::from_json(text).map(PyScenario).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    #[getter]
    fn d_over_r0(&self) -> PyResult<f64> {
        self.0.d_over_r0().map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.0.seed = seed;
    }

    #[getter]
    fn n_realizations(&self) -> usize {
        self.0.n_realizations
    }

    #[setter]
    fn set_n_realizations(&mut self, n: usize) {
        self.0.n_realizations = n;
    }

    /// Set frames per realization and warmup frames together.
    fn set_frames(&mut self, frames: usize, warmup: usize) -> PyResult<()> {
        let mut s = self.0.clone();
        s.frames_per_realization = frames;
        s.warmup_frames = warmup;
        s.validate().map_err(err)?;
        self.0 = s;
        Ok(())
    }

    fn without_ao(&self) -> Self {
        let mut s = self.0.clone();
        s.ao = None;
        PyScenario(s)
    }

    fn with_d_over_r0(&self, x: f64) -> PyResult<Self> {
        self.0.with_d_over_r0(x).map(PyScenario).map_err(err)
    }

    fn with_cn2(&self, cn2: f64) -> PyResult<Self> {
        self.0.with_cn2(cn2).map(PyScenario).map_err(err)
    }

    fn run(&self, py: Python<'_>) -> PyResult<PyReport> {
        let s = self.0.clone();
        py.detach(|| harness::run_scenario(&s)).map(PyReport).map_err(err)
    }

    /// `(mean, std)` of the power fraction of mode `ell` at the receiver.
    fn mode_efficiency(&self, ell: i32) -> PyResult<(f64, f64)> {
        harness::mode_efficiency(&self.0, ell).map_err(err)
    }

    fn sweep(&self, py: Python<'_>, param: &str, values: Vec<f64>) -> PyResult<Vec<PyReport>> {
        let p: SweepParam = param.parse().map_err(err)?;
        let s = self.0.clone();
        let reports = py.detach(|| harness::sweep(&s, p, &values)).map_err(err)?;
        Ok(reports.into_iter().map(PyReport).collect())
    }
}

#[pyclass(name = "Report", module = "oamlink", frozen)]
struct PyReport(RunReport);

#[pymethods]
impl PyReport {
    #[getter]
    fn oam_mean(&self) -> f64 {
        self.0.results.oam.mean
    }

    #[getter]
    fn oam_series(&self) -> Vec<f64> {
        self.0.results.oam.series.clone()
    }

    #[getter]
    fn mub_mean(&self) -> Option<f64> {
        self.0.results.mub.as_ref().map(|s| s.mean)
    }

    #[getter]
    fn uncorrected_oam_mean(&self) -> Option<f64> {
        self.0.uncorrected.as_ref().map(|u| u.oam.mean)
    }

    #[getter]
    fn d_over_r0(&self) -> f64 {
        self.0.d_over_r0
    }

    /// `(label, basis, dimension, mean fidelity, threshold, secure)`.
    #[getter]
    fn verdicts(&self) -> Vec<(String, String, usize, f64, f64, bool)> {
        self.0
            .verdicts
            .iter()
            .map(|v| (v.label.clone(), v.basis.clone(), v.dimension, v.mean_fidelity, v.threshold, v.secure))
            .collect()
    }

    fn crosstalk_oam(&self) -> Option<PyCrosstalk> {
        self.0.results.crosstalk_oam.clone().map(PyCrosstalk)
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Write the report files into `dir`; returns their paths.
    fn emit(&self, dir: PathBuf) -> PyResult<Vec<PathBuf>> {
        harness::emit_report(&self.0, &dir).map_err(err)
    }
}

#[pymodule]
#[pyo3(name = "oamlink")]
fn oamlink_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PyField>()?;
    m.add_class::<PyCrosstalk>()?;
    m.add_class::<PyScenario>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(fidelity_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(key_rate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_fidelity_model, m)?)?;
    m.add_function(wrap_pyfunction!(cn2_to_r0, m)?)?;
    m.add_function(wrap_pyfunction!(r0_to_cn2, m)?)?;
    m.add_function(wrap_pyfunction!(greenwood_frequency, m)?)?;
    m.add_function(wrap_pyfunction!(phase_screen, m)?)?;
    m.add_function(wrap_pyfunction!(free_space_crosstalk, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_strategy, m)?)?;
    m.add("PRESETS", harness::PRESETS.to_vec())?;
    Ok(())
}
