//! Python bindings. Structured values cross the boundary as plain dicts and lists with
//! the same field names as the JSON file formats.

use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use partaog_core::eval::{evaluate as core_evaluate, EvalSummary};
use partaog_core::fmap::{read_fmap as core_read_fmap, Corpus as CoreCorpus, NormStatistic};
use partaog_core::geometry::{BBox, Point};
use partaog_core::miner::{learn_model, MinerConfig};
use partaog_core::model::{load_model, save_model, AogModel, ScoreWeights};
use partaog_core::oracle::{OracleRecord, ScriptedOracle};
use partaog_core::parser::{parse_all, ParseRecord};
use partaog_core::qa::{run_session as core_run_session, Answer, AnswerRecord, QaConfig, QaSession, Question, SelectionStrategy};
use partaog_core::records::AnnotationRecord;
use partaog_core::synth::{synth_generate, write_synth, SynthSpec};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(partaog, PartaogError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PartaogError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(err)?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (value,))?.extract()?;
    serde_json::from_str(&text).map_err(err)
}

/// Normalized feature maps of a directory of `.fmap` files.
#[pyclass(frozen)]
struct Corpus {
    inner: Arc<CoreCorpus>,
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (dir, statistic = "mean_positive"))]
    fn new(dir: PathBuf, statistic: &str) -> PyResult<Self> {
        let statistic: NormStatistic = serde_json::from_value(serde_json::Value::String(statistic.into())).map_err(err)?;
        let inner = CoreCorpus::load_dir(&dir, statistic).map_err(err)?;
        Ok(Corpus { inner: Arc::new(inner) })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids().map(str::to_string).collect()
    }

    /// Per-layer, per-channel normalizers.
    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.stats())
    }
}

#[pyclass(frozen)]
struct Model {
    inner: AogModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Model {
            inner: load_model(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(err)?)
    }

    fn to_json(&self) -> PyResult<String> {
        save_model(&self.inner).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        fs::write(path, self.to_json()?).map_err(err)
    }

    #[getter]
    fn semantic_part(&self) -> String {
        self.inner.semantic_part.clone()
    }

    #[getter]
    fn pattern_count(&self) -> usize {
        self.inner.pattern_count()
    }

    /// Templates with their patterns and annotations.
    fn templates(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.templates)
    }

    /// Full parse of every image: center, box, score, unit assignments.
    fn parse(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<Py<PyAny>> {
        let parses = py.detach(|| parse_all(&self.inner, corpus.inner.maps())).map_err(err)?;
        to_py(py, &parses)
    }

    /// One export record per image, as written by `partaog parse`.
    fn parse_records(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<Py<PyAny>> {
        let parses = py.detach(|| parse_all(&self.inner, corpus.inner.maps())).map_err(err)?;
        let records: Vec<ParseRecord> = parses.iter().map(ParseRecord::from).collect();
        to_py(py, &records)
    }

    fn __eq__(&self, other: &Model) -> bool {
        self.inner == other.inner
    }
}

/// An active question-answering session.
#[pyclass]
struct Session {
    inner: QaSession,
}

fn qa_config(budget: usize, alpha: f64, beta: f64, strategy: &str, seed: u64, layers: usize) -> PyResult<QaConfig> {
    let selection = match strategy {
        "kl" => SelectionStrategy::KlGain,
        "random" => SelectionStrategy::Random { seed },
        other => return Err(err(format!("unknown strategy {other:?}; expected \"kl\" or \"random\""))),
    };
    let mut cfg = QaConfig {
        alpha,
        beta,
        budget,
        selection,
        ..QaConfig::default()
    };
    cfg.miner.valid_layers = layers;
    Ok(cfg)
}

#[pymethods]
impl Session {
    #[new]
    #[pyo3(signature = (corpus, budget, part = "part", alpha = 4.0, beta = 1.0, strategy = "kl", seed = 0, layers = 9))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        corpus: &Corpus,
        budget: usize,
        part: &str,
        alpha: f64,
        beta: f64,
        strategy: &str,
        seed: u64,
        layers: usize,
    ) -> PyResult<Self> {
        let cfg = qa_config(budget, alpha, beta, strategy, seed, layers)?;
        Ok(Session {
            inner: QaSession::new(corpus.inner.clone(), part, cfg).map_err(err)?,
        })
    }

    #[getter]
    fn finished(&self) -> bool {
        self.inner.is_finished()
    }

    #[getter]
    fn questions_asked(&self) -> usize {
        self.inner.questions_asked()
    }

    fn select_question(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let q = self.inner.select_question().map_err(err)?;
        to_py(py, &q)
    }

    /// Applies an answer (a dict in the `POST /answer` format) to a question dict.
    fn apply_answer(&mut self, py: Python<'_>, question: &Bound<'_, PyAny>, answer: &Bound<'_, PyAny>) -> PyResult<()> {
        let q: Question = from_py(py, question)?;
        let record: AnswerRecord = from_py(py, answer)?;
        let a = Answer::try_from(record).map_err(err)?;
        self.inner.apply_answer(&q, &a).map_err(err)
    }

    fn model(&self) -> Model {
        Model {
            inner: self.inner.model().clone(),
        }
    }

    fn log(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.log())
    }

    fn prior(&self, image_id: &str) -> Option<f64> {
        self.inner.prior(image_id)
    }

    fn estimate(&self, image_id: &str) -> Option<f64> {
        self.inner.estimate(image_id)
    }

    fn kl_divergence(&self) -> f64 {
        self.inner.kl_divergence()
    }
}

/// Mines one template per template id from annotation dicts.
#[pyfunction]
#[pyo3(signature = (corpus, annotations, part = "part", layers = 9, epsilon = 2))]
fn learn(py: Python<'_>, corpus: &Corpus, annotations: &Bound<'_, PyAny>, part: &str, layers: usize, epsilon: usize) -> PyResult<Model> {
    let records: Vec<AnnotationRecord> = from_py(py, annotations)?;
    let cfg = MinerConfig {
        valid_layers: layers,
        epsilon_cells: epsilon,
        ..MinerConfig::default()
    };
    let model = py
        .detach(|| learn_model(part, &corpus.inner, &records, &cfg, ScoreWeights::default()))
        .map_err(err)?;
    Ok(Model { inner: model })
}

/// Runs a session against ground-truth records; returns the model and the question log.
#[pyfunction]
#[pyo3(signature = (corpus, oracle, budget, part = "part", strategy = "kl", seed = 0))]
fn run_session(
    py: Python<'_>,
    corpus: &Corpus,
    oracle: &Bound<'_, PyAny>,
    budget: usize,
    part: &str,
    strategy: &str,
    seed: u64,
) -> PyResult<(Model, Py<PyAny>)> {
    let records: Vec<OracleRecord> = from_py(py, oracle)?;
    let cfg = qa_config(budget, 4.0, 1.0, strategy, seed, 9)?;
    let mut oracle = ScriptedOracle::new(records);
    let (model, log) = core_run_session(corpus.inner.clone(), part, &mut oracle, cfg).map_err(err)?;
    Ok((Model { inner: model }, to_py(py, &log)?))
}

/// Writes a planted-motif corpus into `out` and returns its oracle records.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, images = 50, templates = 3, noise = 0.2, absent_rate = 0.0))]
fn synth(py: Python<'_>, out: PathBuf, seed: u64, images: usize, templates: usize, noise: f64, absent_rate: f64) -> PyResult<Py<PyAny>> {
    let spec = SynthSpec {
        absent_rate,
        ..SynthSpec::standard(seed, images, templates, noise)
    };
    let corpus = synth_generate(&spec).map_err(err)?;
    write_synth(&spec, &corpus, &out).map_err(err)?;
    to_py(py, &corpus.oracle)
}

/// Summary of parse records against ground-truth records.
#[pyfunction]
fn evaluate(py: Python<'_>, parses: &Bound<'_, PyAny>, oracle: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let parses: Vec<ParseRecord> = from_py(py, parses)?;
    let oracle: Vec<OracleRecord> = from_py(py, oracle)?;
    let records = core_evaluate(&parses, &oracle).map_err(err)?;
    to_py(py, &EvalSummary::of(&records))
}

/// Header and layer geometry of one `.fmap` file.
#[pyfunction]
fn read_fmap(py: Python<'_>, path: PathBuf) -> PyResult<Py<PyAny>> {
    let set = core_read_fmap(&fs::read(path).map_err(err)?).map_err(err)?;
    let layers: Vec<_> = set.layers.iter().map(|l| &l.meta).collect();
    to_py(
        py,
        &serde_json::json!({ "image_id": set.image_id, "image_size": set.image_size, "layers": layers }),
    )
}

#[pyfunction]
fn normalized_distance(pred: (f64, f64), gt: (f64, f64), diagonal: f64) -> PyResult<f64> {
    partaog_core::eval::normalized_distance(Point::new(pred.0, pred.1), Point::new(gt.0, gt.1), diagonal).map_err(err)
}

/// Boxes are `(cx, cy, w, h)`.
#[pyfunction]
fn pcp_correct(pred: (f64, f64, f64, f64), gt: (f64, f64, f64, f64)) -> PyResult<bool> {
    let b = |t: (f64, f64, f64, f64)| BBox::new(t.0, t.1, t.2, t.3);
    partaog_core::eval::pcp_correct(&b(pred), &b(gt)).map_err(err)
}

#[pymodule]
fn partaog(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PartaogError", m.py().get_type::<PartaogError>())?;
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_class::<Session>()?;
    m.add_function(wrap_pyfunction!(learn, m)?)?;
    m.add_function(wrap_pyfunction!(run_session, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(read_fmap, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_distance, m)?)?;
    m.add_function(wrap_pyfunction!(pcp_correct, m)?)?;
    Ok(())
}
