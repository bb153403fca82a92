//! Python bindings for `diarkit`.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`);
//! annotations and codecs are wrapped as Python classes.

use std::collections::BTreeMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyModule;

use diarkit::synth::{generate_chunk_predictions, generate_conversation, SynthConfig};
use diarkit::{io, pipeline, pit, Error, Segment, SpeakerPermutation};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyOSError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_array(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), cols), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(values: &Array2<f64>) -> Vec<Vec<f64>> {
    values.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// Speaker turns of one recording.
#[pyclass(name = "Annotation", module = "pydiarkit", from_py_object)]
#[derive(Clone)]
pub struct PyAnnotation {
    inner: diarkit::Annotation,
}

#[pymethods]
impl PyAnnotation {
    #[new]
    #[pyo3(signature = (uri, segments = Vec::new()))]
    fn new(uri: String, segments: Vec<(f64, f64, String)>) -> PyResult<Self> {
        let mut inner = diarkit::Annotation::new(uri);
        for (start, end, label) in segments {
            inner.insert(Segment::new(start, end).map_err(to_py)?, label);
        }
        Ok(Self { inner })
    }

    /// Adds a turn; overlapping or touching turns of one label are merged.
    fn add(&mut self, start: f64, end: f64, label: String) -> PyResult<()> {
        self.inner.insert(Segment::new(start, end).map_err(to_py)?, label);
        Ok(())
    }

    #[getter]
    fn uri(&self) -> String {
        self.inner.uri().to_string()
    }

    fn labels(&self) -> Vec<String> {
        self.inner.labels()
    }

    /// `(start, end, label)` triples sorted by start time.
    fn segments(&self) -> Vec<(f64, f64, String)> {
        self.inner
            .segments()
            .into_iter()
            .map(|(s, l)| (s.start(), s.end(), l))
            .collect()
    }

    fn total_speech(&self) -> f64 {
        self.inner.total_speech()
    }

    fn to_rttm(&self) -> String {
        io::write_rttm([&self.inner])
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Annotation(uri={:?}, speakers={}, segments={})",
            self.inner.uri(),
            self.inner.labels().len(),
            self.inner.len()
        )
    }
}

/// Mapping between speaker subsets and powerset classes.
#[pyclass(name = "PowersetCodec", module = "pydiarkit")]
pub struct PyPowersetCodec {
    inner: diarkit::PowersetCodec,
}

#[pymethods]
impl PyPowersetCodec {
    #[new]
    #[pyo3(signature = (num_speakers = 3, max_overlap = 2))]
    fn new(num_speakers: usize, max_overlap: usize) -> PyResult<Self> {
        Ok(Self {
            inner: diarkit::PowersetCodec::new(num_speakers, max_overlap).map_err(to_py)?,
        })
    }

    #[getter]
    fn num_speakers(&self) -> usize {
        self.inner.num_speakers()
    }

    #[getter]
    fn max_overlap(&self) -> usize {
        self.inner.max_overlap()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Active speakers of every class, in class order.
    fn classes(&self) -> Vec<Vec<usize>> {
        self.inner.classes()
    }

    /// Class of one multi-label frame (speakers beyond the maximum overlap
    /// are dropped, highest index first).
    fn encode(&self, frame: Vec<f64>) -> PyResult<usize> {
        self.inner.encode_frame(&frame).map_err(to_py)
    }

    fn decode(&self, class_index: usize) -> PyResult<Vec<f64>> {
        self.inner.decode_class(class_index).map_err(to_py)
    }

    /// Class permutation induced by relabelling speaker `i` as `perm[i]`.
    fn induced_class_permutation(&self, perm: Vec<usize>) -> PyResult<Vec<usize>> {
        let perm = SpeakerPermutation::new(perm).map_err(to_py)?;
        self.inner.induced_class_permutation(&perm).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "PowersetCodec(num_speakers={}, max_overlap={}, num_classes={})",
            self.inner.num_speakers(),
            self.inner.max_overlap(),
            self.inner.num_classes()
        )
    }
}

/// Minimum-cost assignment of a square cost matrix: `(perm, cost)` where row
/// `i` is assigned to column `perm[i]`.
#[pyfunction]
fn hungarian(cost: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, f64)> {
    let cost = pit::CostMatrix::from_rows(&cost).map_err(to_py)?;
    let (perm, total) = pit::hungarian(&cost);
    Ok((perm.mapping().to_vec(), total))
}

/// Permutation-invariant BCE: `(value, permutation, gradient)`.
#[pyfunction]
fn multilabel_pit_loss(target: Vec<Vec<f64>>, pred: Vec<Vec<f64>>) -> PyResult<(f64, Vec<usize>, Vec<Vec<f64>>)> {
    let result = pit::multilabel_pit_loss(to_array(&target)?.view(), to_array(&pred)?.view()).map_err(to_py)?;
    Ok((result.value, result.permutation.mapping().to_vec(), to_rows(&result.gradient)))
}

/// Permutation-invariant powerset cross-entropy: `(value, permutation, gradient)`.
#[pyfunction]
fn powerset_pit_loss(
    codec: &PyPowersetCodec,
    target_classes: Vec<usize>,
    logits: Vec<Vec<f64>>,
) -> PyResult<(f64, Vec<usize>, Vec<Vec<f64>>)> {
    let result = pit::powerset_pit_loss(&codec.inner, &target_classes, to_array(&logits)?.view()).map_err(to_py)?;
    Ok((result.value, result.permutation.mapping().to_vec(), to_rows(&result.gradient)))
}

/// Diarization error rate report as a dict.
#[pyfunction]
#[pyo3(signature = (reference, hypothesis, collar = 0.0, uem = None))]
fn der<'py>(
    py: Python<'py>,
    reference: &PyAnnotation,
    hypothesis: &PyAnnotation,
    collar: f64,
    uem: Option<Vec<(f64, f64)>>,
) -> PyResult<Bound<'py, PyAny>> {
    let regions = uem
        .map(|r| r.into_iter().map(|(s, e)| Segment::new(s, e)).collect::<diarkit::Result<Vec<_>>>())
        .transpose()
        .map_err(to_py)?;
    let report = diarkit::der(&reference.inner, &hypothesis.inner, collar, regions.as_deref()).map_err(to_py)?;
    json_to_py(py, &serde_json::to_string(&report).expect("report serializes"))
}

/// Parses RTTM text into `{uri: Annotation}`.
#[pyfunction]
fn parse_rttm(text: &str) -> PyResult<BTreeMap<String, PyAnnotation>> {
    Ok(io::parse_rttm(text)
        .map_err(to_py)?
        .into_iter()
        .map(|(uri, inner)| (uri, PyAnnotation { inner }))
        .collect())
}

#[pyfunction]
fn write_rttm(annotations: Vec<PyAnnotation>) -> String {
    io::write_rttm(annotations.iter().map(|a| &a.inner))
}

/// Synthetic conversation: `(annotation, realized_overlap)`.
#[pyfunction]
#[pyo3(signature = (seed = 0, num_speakers = 3, total_duration = 300.0, overlap_target = 0.1))]
fn synth_conversation(
    seed: u64,
    num_speakers: usize,
    total_duration: f64,
    overlap_target: f64,
) -> PyResult<(PyAnnotation, f64)> {
    let config = SynthConfig {
        seed,
        num_speakers,
        total_duration,
        overlap_target,
        ..SynthConfig::default()
    };
    let conversation = generate_conversation(&config).map_err(to_py)?;
    Ok((PyAnnotation { inner: conversation.annotation }, conversation.realized_overlap))
}

/// Simulates segmentation outputs for `reference` and stitches them back
/// with the powerset pipeline; returns the hypothesis annotation.
#[pyfunction]
#[pyo3(signature = (reference, seed = 0, logit_noise = 0.0))]
fn synth_pipeline(reference: &PyAnnotation, seed: u64, logit_noise: f64) -> PyResult<PyAnnotation> {
    let synth = SynthConfig {
        seed,
        logit_noise,
        ..SynthConfig::default()
    };
    let config = pipeline::PipelineConfig::default();
    let chunks = generate_chunk_predictions(&reference.inner, &synth, &config).map_err(to_py)?;
    let output = pipeline::run_pipeline(&chunks.chunks, &config, reference.inner.uri()).map_err(to_py)?;
    Ok(PyAnnotation { inner: output.annotation })
}

/// Runs the pipeline on a chunk directory with a TOML config file.
#[pyfunction]
#[pyo3(signature = (chunks_dir, config_path, uri = "recording".to_string()))]
fn run_pipeline(chunks_dir: PathBuf, config_path: PathBuf, uri: String) -> PyResult<PyAnnotation> {
    let config = io::read_text(&config_path)
        .and_then(|t| io::parse_pipeline_config(&t))
        .map_err(to_py)?;
    let chunks = io::read_chunk_dir(&chunks_dir).map_err(to_py)?;
    let output = pipeline::run_pipeline(&chunks, &config, &uri).map_err(to_py)?;
    Ok(PyAnnotation { inner: output.annotation })
}

#[pymodule]
fn pydiarkit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAnnotation>()?;
    m.add_class::<PyPowersetCodec>()?;
    m.add_function(wrap_pyfunction!(hungarian, m)?)?;
    m.add_function(wrap_pyfunction!(multilabel_pit_loss, m)?)?;
    m.add_function(wrap_pyfunction!(powerset_pit_loss, m)?)?;
    m.add_function(wrap_pyfunction!(der, m)?)?;
    m.add_function(wrap_pyfunction!(parse_rttm, m)?)?;
    m.add_function(wrap_pyfunction!(write_rttm, m)?)?;
    m.add_function(wrap_pyfunction!(synth_conversation, m)?)?;
    m.add_function(wrap_pyfunction!(synth_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
