//! Python bindings for `elight_core`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use elight_core as core;
use elight_core::deploy::{assign_with, partition};

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<core::Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    core::Matrix::new(r, c, rows.into_iter().flatten().collect()).map_err(err)
}

fn nested(m: &core::Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// A PCM cell with `bits` bits per wire array and transmission factor `base_c`.
#[pyclass(name = "CellConfig", module = "elight", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyCellConfig(core::CellConfig);

#[pymethods]
impl PyCellConfig {
    #[new]
    fn new(bits: u32, base_c: f64) -> PyResult<Self> {
        core::CellConfig::new(bits, base_c).map(Self).map_err(err)
    }

    #[staticmethod]
    fn from_delta_e_db(bits: u32, delta_e_db: f64) -> PyResult<Self> {
        core::CellConfig::from_delta_e_db(bits, delta_e_db).map(Self).map_err(err)
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.0.bits()
    }

    #[getter]
    fn base_c(&self) -> f64 {
        self.0.base()
    }

    #[getter]
    fn max_level(&self) -> i32 {
        self.0.max_level()
    }

    /// Nearest codebook weight.
    fn quantize(&self, w: f64) -> PyResult<f64> {
        self.0.quantize(w).map(|(q, _)| q).map_err(err)
    }

    /// `(l_pos, l_neg)` for `w`.
    fn levels(&self, w: f64) -> PyResult<(i32, i32)> {
        self.0.levels(w).map(|l| (l.pos, l.neg)).map_err(err)
    }

    fn dequantize(&self, pos: i32, neg: i32) -> PyResult<f64> {
        self.0.dequantize(core::LevelPair::new(pos, neg)).map_err(err)
    }

    /// All representable weights, ascending.
    fn codebook(&self) -> Vec<f64> {
        self.0.build_codebook().weights().collect()
    }

    /// Wire toggles needed to go from `w_old` to `w_new`.
    fn wt(&self, w_new: f64, w_old: f64) -> PyResult<u64> {
        core::wt_scalar(&self.0, w_new, w_old).map_err(err)
    }

    fn wt_block(&self, new: Vec<f64>, old: Vec<f64>) -> PyResult<u64> {
        core::wt_block(&self.0, &new, &old).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("CellConfig(bits={}, base_c={})", self.0.bits(), self.0.base())
    }
}

/// Write counts of one simulated layer.
#[pyclass(name = "WriteStats", module = "elight", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyWriteStats {
    total_writes: u64,
    max_writes: u64,
    writes_a_to_c: u64,
    writes_c_to_a: u64,
    energy_units: f64,
    initial_writes: u64,
    max_rewrites: u64,
}

impl From<&core::WriteStats> for PyWriteStats {
    fn from(s: &core::WriteStats) -> Self {
        PyWriteStats {
            total_writes: s.total_writes,
            max_writes: s.max_cell_writes,
            writes_a_to_c: s.writes_a_to_c,
            writes_c_to_a: s.writes_c_to_a,
            energy_units: s.energy_units,
            initial_writes: s.initial_writes,
            max_rewrites: s.max_cell_rewrites,
        }
    }
}

#[pymethods]
impl PyWriteStats {
    fn __repr__(&self) -> String {
        format!(
            "WriteStats(total_writes={}, max_writes={}, energy_units={})",
            self.total_writes, self.max_writes, self.energy_units
        )
    }
}

/// Stuck-wire counts of one k x k PTC.
#[pyclass(name = "AgedProfile", module = "elight", frozen, from_py_object)]
#[derive(Clone)]
struct PyAgedProfile(core::AgedProfile);

#[pymethods]
impl PyAgedProfile {
    /// `f_pos` and `f_neg` are k x k nested lists of stuck-wire counts.
    #[new]
    fn new(f_pos: Vec<Vec<u32>>, f_neg: Vec<Vec<u32>>) -> PyResult<Self> {
        let k = f_pos.len();
        if f_neg.len() != k || f_pos.iter().chain(&f_neg).any(|r| r.len() != k) {
            return Err(PyValueError::new_err("f_pos and f_neg must both be k x k"));
        }
        let cells = f_pos.iter().flatten().copied().zip(f_neg.iter().flatten().copied()).collect();
        core::AgedProfile::from_cells(k, cells).map(Self).map_err(err)
    }

    #[staticmethod]
    fn fresh(k: usize) -> Self {
        Self(core::AgedProfile::fresh(k))
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    fn cells(&self) -> Vec<(u32, u32)> {
        self.0.cells().to_vec()
    }
}

/// Blocks of one weight matrix assigned to PTCs, in programming order.
#[pyclass(name = "Schedule", module = "elight", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PySchedule(core::LayerSchedule);

#[pymethods]
impl PySchedule {
    /// Tiles `weights` into k x k blocks. `ptcs` caps the PTC count
    /// (round-robin over block-rows); by default each block-row gets one.
    #[staticmethod]
    #[pyo3(signature = (weights, k, ptcs=None))]
    fn from_matrix(weights: Vec<Vec<f64>>, k: usize, ptcs: Option<usize>) -> PyResult<Self> {
        let mode = match ptcs {
            Some(n) => core::Assignment::RoundRobin { ptcs: n },
            None => core::Assignment::RowPerPtc,
        };
        let grid = partition(&matrix(weights)?, k).map_err(err)?;
        Ok(Self(assign_with(&grid, mode)))
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k
    }

    #[getter]
    fn ptc_count(&self) -> usize {
        self.0.ptcs.len()
    }

    /// Column-based reordering: every cell's values sorted ascending.
    fn reorder(&self) -> PyResult<Self> {
        core::column_reorder(&self.0).map(|r| Self(r.into_schedule())).map_err(err)
    }

    /// Row remapping onto aged PTCs, one profile per PTC. Needs a reordered
    /// schedule.
    #[pyo3(signature = (cell, profiles, verbatim_md=false))]
    fn remap(&self, cell: &PyCellConfig, profiles: Vec<PyAgedProfile>, verbatim_md: bool) -> PyResult<Self> {
        let profiles: Vec<_> = profiles.into_iter().map(|p| p.0).collect();
        let form = if verbatim_md {
            core::MdForm::Verbatim
        } else {
            core::MdForm::Corrected
        };
        core::remap_schedule(&cell.0, &self.0, &profiles, form).map(Self).map_err(err)
    }

    /// Row permutations chosen by `remap`, one per PTC.
    fn row_orders(&self) -> Option<Vec<Vec<usize>>> {
        self.0
            .row_orders
            .as_ref()
            .map(|o| o.iter().map(|r| r.perm.clone()).collect())
    }

    #[pyo3(signature = (cell, profiles=None))]
    fn simulate(&self, cell: &PyCellConfig, profiles: Option<Vec<PyAgedProfile>>) -> PyResult<PyWriteStats> {
        let profiles: Option<Vec<_>> = profiles.map(|p| p.into_iter().map(|p| p.0).collect());
        let run = core::simulate_schedule(&cell.0, &self.0, &core::SimOptions::default(), profiles.as_deref())
            .map_err(err)?;
        Ok((&run.stats).into())
    }

    /// Output of the layer on `inputs` (columns are samples).
    fn execute(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        core::execute_layer(&self.0, &matrix(inputs)?).map(|m| nested(&m)).map_err(err)
    }
}

/// Run settings; see the CLI help for fields and defaults.
#[pyclass(name = "RunConfig", module = "elight", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig(core::RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new(base_c: f64) -> Self {
        Self(core::RunConfig::with_base_c(base_c))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let cfg: core::RunConfig = serde_json::from_str(text).map_err(json_err)?;
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        core::RunConfig::load(&path).map(Self).map_err(err)
    }

    fn to_json(&self) -> String {
        core::report::render_json(&self.0)
    }

    #[getter]
    fn get_bit_width(&self) -> u32 {
        self.0.bit_width
    }

    #[setter]
    fn set_bit_width(&mut self, v: u32) {
        self.0.bit_width = v;
    }

    #[getter]
    fn get_ptc_size(&self) -> usize {
        self.0.ptc_size
    }

    #[setter]
    fn set_ptc_size(&mut self, v: usize) {
        self.0.ptc_size = v;
    }

    #[getter(lambda_)]
    fn get_lambda(&self) -> f64 {
        self.0.lambda
    }

    #[setter(lambda_)]
    fn set_lambda(&mut self, v: f64) {
        self.0.lambda = v;
    }

    #[getter]
    fn get_seed(&self) -> u64 {
        self.0.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.0.seed = v;
    }

    #[getter]
    fn get_endurance(&self) -> Option<u64> {
        self.0.endurance
    }

    #[setter]
    fn set_endurance(&mut self, v: Option<u64>) {
        self.0.endurance = v;
    }

    #[getter]
    fn get_reorder(&self) -> bool {
        self.0.reorder
    }

    #[setter]
    fn set_reorder(&mut self, v: bool) {
        self.0.reorder = v;
    }

    #[getter]
    fn get_remap(&self) -> bool {
        self.0.remap
    }

    #[setter]
    fn set_remap(&mut self, v: bool) {
        self.0.remap = v;
    }

    #[getter]
    fn get_epochs(&self) -> usize {
        self.0.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.0.train.epochs = v;
    }

    fn cell(&self) -> PyResult<PyCellConfig> {
        self.0.cell().map(PyCellConfig).map_err(err)
    }
}

/// A checkpoint loaded from a manifest.
#[pyclass(name = "Model", module = "elight", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyModel(core::NetworkModel);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        core::load_model(&path).map(Self).map_err(err)
    }

    /// A model of dense layers given as `(name, nested rows)` pairs, taken
    /// as already normalized.
    #[staticmethod]
    #[pyo3(signature = (layers, name="model".to_string()))]
    fn from_dense(layers: Vec<(String, Vec<Vec<f64>>)>, name: String) -> PyResult<Self> {
        let layers = layers
            .into_iter()
            .map(|(n, rows)| {
                let m = matrix(rows)?;
                Ok(core::Layer {
                    name: n,
                    shape: core::LayerShape::Dense {
                        rows: m.rows(),
                        cols: m.cols(),
                    },
                    weights: m.into_data(),
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self(core::NetworkModel { name, layers }))
    }

    /// Writes a manifest and weight blobs into `dir`; returns the manifest path.
    fn save(&self, dir: PathBuf) -> PyResult<PathBuf> {
        core::save_model(&self.0, &dir).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    fn layer_names(&self) -> Vec<String> {
        self.0.layers.iter().map(|l| l.name.clone()).collect()
    }
}

/// Per-layer write and energy report.
#[pyclass(name = "Report", module = "elight", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyReport(core::Report);

#[pymethods]
impl PyReport {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        core::Report::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> String {
        self.0.to_json()
    }

    fn to_csv(&self) -> String {
        self.0.to_csv()
    }

    #[getter]
    fn total_writes(&self) -> u64 {
        self.0.totals.total_writes
    }

    #[getter]
    fn max_writes(&self) -> u64 {
        self.0.totals.max_writes
    }

    #[getter]
    fn energy_units(&self) -> f64 {
        self.0.totals.energy_units
    }

    /// `(name, total_writes, max_writes, energy_units)` per layer.
    fn layers(&self) -> Vec<(String, u64, u64, f64)> {
        self.0
            .layers
            .iter()
            .map(|l| (l.name.clone(), l.total_writes, l.max_writes, l.energy_units))
            .collect()
    }
}

/// Runs deployment, then reorder and remap as enabled. `reorder` and
/// `remap` override the config; `aging` is one profile for every PTC.
#[pyfunction]
#[pyo3(signature = (config, model, reorder=None, remap=None, aging=None))]
fn run_pipeline(
    py: Python<'_>,
    config: &PyRunConfig,
    model: &PyModel,
    reorder: Option<bool>,
    remap: Option<bool>,
    aging: Option<PyAgedProfile>,
) -> PyResult<PyReport> {
    let phases = core::Phases {
        reorder: reorder.unwrap_or(config.0.reorder),
        remap: remap.unwrap_or(config.0.remap),
    };
    let source = match aging {
        Some(p) => core::AgingSource::Profile(p.0),
        None => core::AgingSource::FromConfig,
    };
    let (cfg, m) = (&config.0, &model.0);
    py.detach(|| core::run_pipeline(cfg, m, Some(phases), &source))
        .map(PyReport)
        .map_err(err)
}

/// Trains the toy MLP once per lambda; returns the report as JSON.
#[pyfunction]
fn train_toy(py: Python<'_>, config: &PyRunConfig, lambdas: Vec<f64>) -> PyResult<String> {
    let tc = config.0.train_config().map_err(err)?;
    let report = py.detach(|| core::train_toy(&tc, &lambdas)).map_err(err)?;
    Ok(core::report::render_json(&report))
}

/// Minimum-cost assignment of rows to columns: `(cols, cost)`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    core::hungarian(&cost).map(|m| (m.cols, m.cost)).map_err(err)
}

/// `tanh(w)` scaled so the largest magnitude is 1.
#[pyfunction]
fn normalize_weights(w: Vec<f64>) -> Vec<f64> {
    core::normalize_weights(&w)
}

/// Block-matching loss over groups of flattened k x k blocks.
#[pyfunction]
fn block_matching_loss(cell: &PyCellConfig, groups: Vec<Vec<Vec<f64>>>) -> PyResult<f64> {
    core::block_matching_loss(&cell.0, &groups).map_err(err)
}

/// Gradient of `block_matching_loss`; `smooth` drops level rounding.
#[pyfunction]
#[pyo3(signature = (cell, groups, smooth=false))]
fn grad_block_matching(cell: &PyCellConfig, groups: Vec<Vec<Vec<f64>>>, smooth: bool) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let mode = if smooth {
        core::LevelMode::Smooth
    } else {
        core::LevelMode::Rounded
    };
    core::grad_block_matching(&cell.0, &groups, mode).map_err(err)
}

/// Energy of a write mix under the default pulse profiles.
#[pyfunction]
fn write_energy(writes_a_to_c: u64, writes_c_to_a: u64) -> f64 {
    core::EnergyModel::default().energy(writes_a_to_c, writes_c_to_a)
}

#[pymodule]
fn elight(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyCellConfig>()?;
    m.add_class::<PyWriteStats>()?;
    m.add_class::<PyAgedProfile>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(block_matching_loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad_block_matching, m)?)?;
    m.add_function(wrap_pyfunction!(write_energy, m)?)?;
    Ok(())
}
