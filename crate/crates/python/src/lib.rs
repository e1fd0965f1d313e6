use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use spanlight_core::eval;
use spanlight_core::index::{build_index_with, read_manifest};
use spanlight_core::trainer::{self, read_params, ModelWeights, TrainConfig};
use spanlight_core::{EmbedderConfig, Encoder, Error, HeadParams, Matrix, SearchOptions, Threshold};

/// `(token_start, token_end, char_start, char_end, score)`.
type SpanTuple = (usize, usize, usize, usize, f32);

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_user_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Matrix> {
    Matrix::from_rows(&rows).map_err(to_py)
}

fn embedder(dim: usize, seed: u64) -> EmbedderConfig {
    EmbedderConfig {
        dim,
        seed,
        ..EmbedderConfig::default()
    }
}

/// Tokens as `(surface, start, end)` with character offsets.
#[pyfunction]
fn tokenize(text: &str) -> PyResult<Vec<(String, usize, usize)>> {
    let tok = spanlight_core::tokenize(text).map_err(to_py)?;
    Ok(tok.tokens.into_iter().map(|t| (t.surface, t.start, t.end)).collect())
}

#[pyfunction]
#[pyo3(signature = (text, dim = 128, seed = 0))]
fn encode(text: &str, dim: usize, seed: u64) -> PyResult<Vec<Vec<f32>>> {
    let (_, emb) = Encoder::new(embedder(dim, seed)).encode(text).map_err(to_py)?;
    Ok(emb.iter_rows().map(<[f32]>::to_vec).collect())
}

#[pyfunction]
fn maxsim_score(q: Vec<Vec<f32>>, d: Vec<Vec<f32>>) -> PyResult<f32> {
    spanlight_core::maxsim_score(&matrix(q)?, &matrix(d)?).map_err(to_py)
}

/// Per-document-token relevance probabilities, optionally through a head.
#[pyfunction]
#[pyo3(signature = (q, d, w1 = None, w2 = None))]
fn token_relevance(
    q: Vec<Vec<f32>>,
    d: Vec<Vec<f32>>,
    w1: Option<Vec<Vec<f32>>>,
    w2: Option<Vec<Vec<f32>>>,
) -> PyResult<Vec<f32>> {
    let head = match (w1, w2) {
        (Some(a), Some(b)) => Some(HeadParams::new(matrix(a)?, matrix(b)?).map_err(to_py)?),
        (None, None) => None,
        _ => return Err(PyValueError::new_err("w1 and w2 must be given together")),
    };
    let profile = spanlight_core::token_relevance(&matrix(q)?, &matrix(d)?, head.as_ref()).map_err(to_py)?;
    Ok(profile.probs)
}

/// Spans as `(token_start, token_end, char_start, char_end, score)`.
#[pyfunction]
#[pyo3(signature = (probs, text, threshold = 0.5))]
fn select_spans(probs: Vec<f32>, text: &str, threshold: f32) -> PyResult<Vec<SpanTuple>> {
    let tok = spanlight_core::tokenize(text).map_err(to_py)?;
    if tok.len() != probs.len() {
        return Err(PyValueError::new_err(format!(
            "{} probabilities for {} tokens",
            probs.len(),
            tok.len()
        )));
    }
    let threshold = Threshold::new(threshold).map_err(to_py)?;
    let spans = spanlight_core::scoring::select_spans_with_gap(&probs, &tok, threshold, 0);
    Ok(spans
        .into_iter()
        .map(|s| (s.token_start, s.token_end, s.char_start, s.char_end, s.score))
        .collect())
}

#[pyfunction]
fn flops_estimate(n: u64, h: u64, h2: u64) -> u64 {
    eval::flops_estimate(n, h, h2)
}

/// `(precision, recall, f1)` over token masks.
#[pyfunction]
fn token_f1(pred: Vec<bool>, gold: Vec<bool>) -> PyResult<(f64, f64, f64)> {
    let prf = eval::token_f1(&pred, &gold).map_err(to_py)?;
    Ok((prf.precision, prf.recall, prf.f1))
}

#[pyclass(get_all, frozen)]
struct Hit {
    id: String,
    score: f32,
    text: String,
    tokens: Vec<(String, usize, usize, f32)>,
    spans: Vec<SpanTuple>,
}

#[pymethods]
impl Hit {
    fn __repr__(&self) -> String {
        format!("Hit(id={:?}, score={:.4}, spans={})", self.id, self.score, self.spans.len())
    }
}

#[pyclass(frozen)]
struct Index {
    inner: spanlight_core::Index,
    head: Option<HeadParams>,
}

#[pymethods]
impl Index {
    /// Builds an index from a JSON-lines corpus of `{id, text}`.
    #[staticmethod]
    #[pyo3(signature = (corpus, out_dir, dim = 128, seed = 0, params = None))]
    fn build(corpus: PathBuf, out_dir: PathBuf, dim: usize, seed: u64, params: Option<PathBuf>) -> PyResult<Self> {
        let mut encoder = Encoder::new(embedder(dim, seed));
        if let Some(p) = &params {
            encoder = encoder.with_projection(read_params(p).map_err(to_py)?.projection).map_err(to_py)?;
        }
        build_index_with(&corpus, &encoder, &out_dir).map_err(to_py)?;
        Self::open(out_dir, params)
    }

    #[staticmethod]
    #[pyo3(signature = (dir, params = None))]
    fn open(dir: PathBuf, params: Option<PathBuf>) -> PyResult<Self> {
        match params {
            Some(p) => {
                let ModelWeights { projection, head } = read_params(&p).map_err(to_py)?;
                let manifest = read_manifest(&dir).map_err(to_py)?;
                let encoder = Encoder::new(manifest.embedder).with_projection(projection).map_err(to_py)?;
                let inner = spanlight_core::Index::open_with(&dir, encoder).map_err(to_py)?;
                Ok(Self { inner, head: Some(head) })
            }
            None => Ok(Self {
                inner: spanlight_core::Index::open(&dir).map_err(to_py)?,
                head: None,
            }),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn has_head(&self) -> bool {
        self.head.is_some()
    }

    /// Ranked hits with per-token probabilities and spans. Without trained
    /// weights the probabilities come from the raw embeddings.
    #[pyo3(signature = (query, k = 10, threshold = 0.5))]
    fn search(&self, py: Python<'_>, query: &str, k: usize, threshold: f32) -> PyResult<Vec<Hit>> {
        let threshold = Threshold::new(threshold).map_err(to_py)?;
        py.detach(|| {
            let opts = SearchOptions {
                k,
                head: self.head.as_ref(),
                threshold,
            };
            let hits = spanlight_core::search(&self.inner, query, &opts)?;
            let (_, q) = self.inner.encoder().encode(query)?;
            hits.into_iter()
                .map(|hit| {
                    let rec = &self.inner.passages()[hit.passage];
                    let profile = match hit.profile {
                        Some(p) => p,
                        None => spanlight_core::token_relevance(&q, &rec.emb, None)?,
                    };
                    let spans = match hit.spans {
                        Some(s) => s,
                        None => spanlight_core::select_spans(&profile, &rec.tok, threshold),
                    };
                    Ok(Hit {
                        id: hit.id,
                        score: hit.score,
                        text: rec.text().to_string(),
                        tokens: rec
                            .tok
                            .tokens
                            .iter()
                            .zip(&profile.probs)
                            .map(|(t, &p)| (t.surface.clone(), t.start, t.end, p))
                            .collect(),
                        spans: spans
                            .into_iter()
                            .map(|s| (s.token_start, s.token_end, s.char_start, s.char_end, s.score))
                            .collect(),
                    })
                })
                .collect::<spanlight_core::Result<Vec<Hit>>>()
        })
        .map_err(to_py)
    }
}

/// Trains on a JSON-lines distillation dataset and writes the weights.
/// Returns `(initial_total, final_total)` losses.
#[pyfunction]
#[pyo3(signature = (data, out, dim = 128, seed = 0, epochs = 100, learning_rate = 0.5, hidden_dim = 256, lambda_ = 1.0))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: PathBuf,
    out: PathBuf,
    dim: usize,
    seed: u64,
    epochs: usize,
    learning_rate: f64,
    hidden_dim: usize,
    lambda_: f64,
) -> PyResult<(f64, f64)> {
    let cfg = TrainConfig {
        seed,
        epochs,
        learning_rate,
        hidden_dim,
        lambda: lambda_,
        ..TrainConfig::default()
    };
    py.detach(|| {
        let instances = trainer::read_dataset(&data)?;
        let encoded = trainer::encode_instances(&instances, &embedder(dim, 0))?;
        let outcome = trainer::train(&encoded, &cfg)?;
        trainer::write_params(&out, &outcome.params.to_weights())?;
        let last = outcome.curve.last().map_or(outcome.initial.total, |e| e.loss.total);
        Ok((outcome.initial.total, last))
    })
    .map_err(to_py)
}

/// Writes the planted-evidence dataset (corpus, queries, train, qrels, gold)
/// as JSON lines into `out_dir`.
#[pyfunction]
#[pyo3(signature = (out_dir, seed = 7, queries = 50, corpus_size = 500, dim = 128))]
fn make_synthetic(out_dir: PathBuf, seed: u64, queries: usize, corpus_size: usize, dim: usize) -> PyResult<()> {
    let cfg = trainer::SyntheticConfig {
        seed,
        num_queries: queries,
        corpus_size,
        ..trainer::SyntheticConfig::default()
    };
    let ds = trainer::make_synthetic_dataset(&cfg, &embedder(dim, 0)).map_err(to_py)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyOSError::new_err(e.to_string()))?;
    use spanlight_core::io::write_jsonl;
    write_jsonl(&out_dir.join("corpus.jsonl"), &ds.corpus).map_err(to_py)?;
    write_jsonl(&out_dir.join("queries.jsonl"), &ds.queries).map_err(to_py)?;
    write_jsonl(&out_dir.join("train.jsonl"), &ds.instances).map_err(to_py)?;
    write_jsonl(&out_dir.join("qrels.jsonl"), &ds.qrels).map_err(to_py)?;
    write_jsonl(&out_dir.join("gold.jsonl"), &ds.gold).map_err(to_py)?;
    Ok(())
}

#[pymodule]
fn spanlight(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Index>()?;
    m.add_class::<Hit>()?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(maxsim_score, m)?)?;
    m.add_function(wrap_pyfunction!(token_relevance, m)?)?;
    m.add_function(wrap_pyfunction!(select_spans, m)?)?;
    m.add_function(wrap_pyfunction!(flops_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    Ok(())
}
