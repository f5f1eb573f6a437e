//! Python module `dtvg`: prompts, task prompt vectors, grouping, merging,
//! TPVF files and whole experiment runs. Matrices cross the boundary as
//! lists of rows (`d` rows of `r` floats).

use std::collections::BTreeMap;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use dtvg_core::config::ExperimentConfig;
use dtvg_core::experiment::{compare, format_table, prepare, run_mode, summarize};
use dtvg_core::grouping::{self, GreedyOptions, GroupingResult};
use dtvg_core::merging::{self, MergeInputs};
use dtvg_core::numkit::{Mat, Vec64};
use dtvg_core::store_io::{self, TpvfObject};
use dtvg_core::tpv;
use dtvg_core::transfer::TransferMode;
use dtvg_core::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_rows(&rows).map_err(to_py)
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[pyclass(name = "SoftPrompt", module = "dtvg", frozen, from_py_object)]
#[derive(Clone)]
struct PySoftPrompt(tpv::SoftPrompt);

#[pymethods]
impl PySoftPrompt {
    #[new]
    fn new(weights: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(PySoftPrompt(tpv::SoftPrompt::new(mat(weights)?)))
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn r(&self) -> usize {
        self.0.r()
    }

    #[getter]
    fn fingerprint(&self) -> u64 {
        self.0.fingerprint()
    }

    fn weights(&self) -> Vec<Vec<f64>> {
        rows(self.0.weights())
    }

    fn __repr__(&self) -> String {
        format!("SoftPrompt(d={}, r={})", self.0.d(), self.0.r())
    }
}

#[pyclass(name = "TaskPromptVector", module = "dtvg", frozen, from_py_object)]
#[derive(Clone)]
struct PyTpv(tpv::TaskPromptVector);

#[pymethods]
impl PyTpv {
    #[new]
    fn new(task_id: String, delta: Vec<Vec<f64>>, init_fingerprint: u64) -> PyResult<Self> {
        Ok(PyTpv(tpv::TaskPromptVector::new(task_id, mat(delta)?, init_fingerprint)))
    }

    #[getter]
    fn task_id(&self) -> String {
        self.0.task_id.clone()
    }

    #[getter]
    fn init_fingerprint(&self) -> u64 {
        self.0.init_fingerprint()
    }

    fn delta(&self) -> Vec<Vec<f64>> {
        rows(self.0.delta())
    }

    /// `p_init + delta`.
    fn apply(&self, p_init: &PySoftPrompt) -> PyResult<PySoftPrompt> {
        self.0.apply(&p_init.0).map(PySoftPrompt).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("TaskPromptVector({:?}, d={}, r={})", self.0.task_id, self.0.d(), self.0.r())
    }
}

#[pyclass(name = "SimTable", module = "dtvg", frozen)]
struct PySimTable(grouping::SimTable);

#[pymethods]
impl PySimTable {
    #[new]
    #[pyo3(signature = (s2t, s2s, source_ids=None))]
    fn new(s2t: Vec<f64>, s2s: Vec<Vec<f64>>, source_ids: Option<Vec<String>>) -> PyResult<Self> {
        let s2s = if s2s.is_empty() { Mat::zeros(0, 0) } else { mat(s2s)? };
        let ids = source_ids.unwrap_or_else(|| (0..s2t.len()).map(|i| format!("s{i}")).collect());
        let s2t = Vec64::new(s2t).map_err(to_py)?;
        grouping::SimTable::new(ids, s2t, s2s).map(PySimTable).map_err(to_py)
    }

    /// Table of similarities between (already rescaled) vectors.
    #[staticmethod]
    fn from_vectors(sources: Vec<PyTpv>, target: &PyTpv) -> PyResult<Self> {
        let srcs: Vec<tpv::TaskPromptVector> = sources.into_iter().map(|s| s.0).collect();
        grouping::SimTable::from_tpvs(&srcs, &target.0).map(PySimTable).map_err(to_py)
    }

    #[getter]
    fn n(&self) -> usize {
        self.0.n()
    }

    #[getter]
    fn source_ids(&self) -> Vec<String> {
        self.0.source_ids().to_vec()
    }

    #[getter]
    fn s2t(&self) -> Vec<f64> {
        self.0.s2t().to_vec()
    }
}

fn group_dict<'py>(py: Python<'py>, g: &GroupingResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("selected", g.selected.clone())?;
    d.set_item("selected_ids", g.selected_ids.clone())?;
    d.set_item("rank_list", g.rank_list.clone())?;
    d.set_item("ts", g.ts)?;
    d.set_item("kc", g.kc)?;
    d.set_item("objective", g.objective)?;
    d.set_item("lambda", g.lambda)?;
    Ok(d)
}

#[pyfunction]
fn sim(t1: &PyTpv, t2: &PyTpv) -> PyResult<f64> {
    tpv::sim(&t1.0, &t2.0).map_err(to_py)
}

#[pyfunction]
fn cosine_prompt_sim(p1: &PySoftPrompt, p2: &PySoftPrompt) -> PyResult<f64> {
    tpv::cosine_prompt_sim(&p1.0, &p2.0).map_err(to_py)
}

#[pyfunction]
fn compute_tpv(p_star: &PySoftPrompt, p_init: &PySoftPrompt, task_id: String) -> PyResult<PyTpv> {
    tpv::compute_tpv(&p_star.0, &p_init.0, task_id).map(PyTpv).map_err(to_py)
}

/// Per-token rescaling: column `j` is multiplied by `alpha[j]`.
#[pyfunction]
fn rescale(t: &PyTpv, alpha: Vec<f64>) -> PyResult<PyTpv> {
    let a = tpv::ScalingTerm { task_id: t.0.task_id.clone(), alpha: Vec64::new(alpha).map_err(to_py)? };
    tpv::rescale(&t.0, &a).map(PyTpv).map_err(to_py)
}

#[pyfunction]
fn knowledge_consistency(table: &PySimTable, subset: Vec<usize>) -> PyResult<f64> {
    grouping::knowledge_consistency(&table.0, &subset).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (table, early_stop=false, strict=false))]
fn greedy_group<'py>(py: Python<'py>, table: &PySimTable, early_stop: bool, strict: bool) -> PyResult<Bound<'py, PyDict>> {
    group_dict(py, &grouping::greedy_group_with(&table.0, GreedyOptions { early_stop, strict }))
}

#[pyfunction]
#[pyo3(signature = (table, lam=1.0))]
fn exact_group<'py>(py: Python<'py>, table: &PySimTable, lam: f64) -> PyResult<Bound<'py, PyDict>> {
    let g = grouping::exact_group(&table.0, lam).map_err(to_py)?;
    group_dict(py, &g)
}

/// `p_init + α_t ⊙ target + Σ α_s ⊙ source`; `sources` is a list of
/// `(vector, alpha)` pairs and `target_alpha` defaults to ones.
#[pyfunction]
#[pyo3(signature = (p_init, target, sources, target_alpha=None))]
fn merge(p_init: &PySoftPrompt, target: &PyTpv, sources: Vec<(PyTpv, Vec<f64>)>, target_alpha: Option<Vec<f64>>) -> PyResult<PySoftPrompt> {
    let r = p_init.0.r();
    let term = |id: &str, a: Option<Vec<f64>>| -> PyResult<tpv::ScalingTerm> {
        Ok(match a {
            Some(v) => tpv::ScalingTerm { task_id: id.into(), alpha: Vec64::new(v).map_err(to_py)? },
            None => tpv::ScalingTerm::ones(id, r),
        })
    };
    let t_alpha = term(&target.0.task_id, target_alpha)?;
    let srcs = sources
        .into_iter()
        .map(|(t, a)| Ok((term(&t.0.task_id, Some(a))?, t.0)))
        .collect::<PyResult<Vec<_>>>()?;
    let inputs = MergeInputs {
        p_init: &p_init.0,
        target_tpv: &target.0,
        target_alpha: &t_alpha,
        sources: srcs.iter().map(|(a, t)| (t, a)).collect(),
    };
    merging::merge(&inputs).map(PySoftPrompt).map_err(to_py)
}

/// Reads a TPVF file as a `SoftPrompt` or a `TaskPromptVector`.
#[pyfunction]
fn read_tpvf(py: Python<'_>, path: std::path::PathBuf) -> PyResult<Py<PyAny>> {
    match store_io::read_tpvf(&path).map_err(to_py)? {
        TpvfObject::Vector(t) => Ok(Py::new(py, PyTpv(t))?.into_any()),
        TpvfObject::Prompt { prompt, .. } => Ok(Py::new(py, PySoftPrompt(prompt))?.into_any()),
    }
}

#[pyfunction]
#[pyo3(signature = (path, obj, task_id=None))]
fn write_tpvf(path: std::path::PathBuf, obj: &Bound<'_, PyAny>, task_id: Option<String>) -> PyResult<()> {
    let file = if let Ok(t) = obj.cast::<PyTpv>() {
        TpvfObject::Vector(t.get().0.clone())
    } else if let Ok(p) = obj.cast::<PySoftPrompt>() {
        TpvfObject::Prompt { task_id: task_id.unwrap_or_default(), prompt: p.get().0.clone() }
    } else {
        return Err(PyValueError::new_err("expected a SoftPrompt or a TaskPromptVector"));
    };
    store_io::write_tpvf(&path, &file).map_err(to_py)
}

fn config(toml: Option<&str>) -> PyResult<ExperimentConfig> {
    match toml {
        Some(text) => ExperimentConfig::from_toml_str(text).map_err(to_py),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Stage 1 and stage 2 for one seed and mode on the configured fixture.
#[pyfunction]
#[pyo3(signature = (seed=0, mode="dtvg_dynamic", config_toml=None))]
fn run_experiment<'py>(py: Python<'py>, seed: u64, mode: &str, config_toml: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config(config_toml)?;
    let mode: TransferMode = mode.parse().map_err(to_py)?;
    let out = py
        .detach(|| prepare(&cfg, seed).and_then(|p| run_mode(&cfg, &p, mode).map(|o| (p, o))))
        .map_err(to_py)?;
    let (p, out) = out;
    let d = PyDict::new(py);
    d.set_item("mode", mode.as_str())?;
    d.set_item("seed", seed)?;
    d.set_item("best_step", out.best_step)?;
    d.set_item("best_val_accuracy", out.best_val_accuracy)?;
    d.set_item("test_accuracy", out.test_accuracy)?;
    d.set_item("final_group", out.state.selected_ids(&p.sources))?;
    d.set_item("losses", out.losses.clone())?;
    d.set_item("regroups", out.state.history.len())?;
    d.set_item("best_prompt", Py::new(py, PySoftPrompt(out.best_prompt))?)?;
    Ok(d)
}

/// Every requested mode over `seeds`; returns per-mode test accuracy by
/// seed and the formatted summary table.
#[pyfunction]
#[pyo3(signature = (seeds, modes=None, config_toml=None))]
fn compare_modes(py: Python<'_>, seeds: Vec<u64>, modes: Option<Vec<String>>, config_toml: Option<&str>) -> PyResult<(BTreeMap<String, BTreeMap<u64, f64>>, String)> {
    let cfg = config(config_toml)?;
    let modes: Vec<TransferMode> = match modes {
        Some(m) => m.iter().map(|s| s.parse()).collect::<Result<_, _>>().map_err(to_py)?,
        None => TransferMode::ALL.to_vec(),
    };
    let cmp = py.detach(|| compare(&cfg, &seeds, &modes)).map_err(to_py)?;
    let summary = summarize(&cmp.records);
    let per_mode = summary.iter().map(|s| (s.mode.clone(), s.per_seed.clone())).collect();
    Ok((per_mode, format_table(&summary)))
}

#[pymodule]
fn dtvg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySoftPrompt>()?;
    m.add_class::<PyTpv>()?;
    m.add_class::<PySimTable>()?;
    m.add_function(wrap_pyfunction!(sim, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_prompt_sim, m)?)?;
    m.add_function(wrap_pyfunction!(compute_tpv, m)?)?;
    m.add_function(wrap_pyfunction!(rescale, m)?)?;
    m.add_function(wrap_pyfunction!(knowledge_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_group, m)?)?;
    m.add_function(wrap_pyfunction!(exact_group, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(read_tpvf, m)?)?;
    m.add_function(wrap_pyfunction!(write_tpvf, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(compare_modes, m)?)?;
    m.add("MODES", TransferMode::ALL.iter().map(|m| m.as_str()).collect::<Vec<_>>())?;
    Ok(())
}
