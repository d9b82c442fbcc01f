//! Python bindings: corpus, vocabulary, sampler, model, training and the
//! evaluation probes of the `sentorder` crate.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use sentorder::corpus::CorpusStore;
use sentorder::eval::{make_synthetic_corpus, order_accuracy, swap_probe, FinetuneConfig, PairTaskDataset, SyntheticSpec};
use sentorder::model::{check_gradients, predict_order_logits, Batch, Model, ModelConfig, GRAD_CHECK_EPS};
use sentorder::numerics::softmax_rows;
use sentorder::rng::{stream, Domain};
use sentorder::sampler::{self, MaskingConfig, OrderScheme, PairExample, SchemeKind};
use sentorder::tokenizer::{self, Vocab};
use sentorder::train::{self, OptimizerConfig, SchedulePlan, TrainConfig};

fn err(e: sentorder::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn scheme_of(name: &str, smoothing: f64) -> PyResult<OrderScheme> {
    let kind: SchemeKind = name.parse().map_err(err)?;
    let s = OrderScheme { smoothing_factor: smoothing, ..OrderScheme::new(kind) };
    s.validate().map_err(err)?;
    Ok(s)
}

/// A corpus of documents, each a list of sentences.
#[pyclass(name = "Corpus", module = "sentorder_py")]
struct PyCorpus {
    inner: CorpusStore,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    fn from_documents(docs: Vec<Vec<String>>) -> PyResult<Self> {
        Ok(Self { inner: CorpusStore::from_documents(docs).map_err(err)? })
    }

    /// Parses blank-line separated, one-sentence-per-line text.
    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        Self::from_documents(sentorder::corpus::parse_documents(text))
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: CorpusStore::load(&dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    fn documents(&self) -> Vec<Vec<String>> {
        self.inner.documents().iter().map(|d| d.sentences.clone()).collect()
    }

    fn sentence_count(&self) -> usize {
        self.inner.sentence_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(name = "Vocab", module = "sentorder_py")]
struct PyVocab {
    inner: Vocab,
}

#[pymethods]
impl PyVocab {
    #[staticmethod]
    #[pyo3(signature = (corpus, size = 30000))]
    fn build(corpus: &PyCorpus, size: usize) -> PyResult<Self> {
        Ok(Self { inner: tokenizer::build_vocab(&corpus.inner, size).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Vocab::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn encode(&self, sentence: &str) -> Vec<u32> {
        self.inner.encode(sentence)
    }

    fn token(&self, id: u32) -> Option<String> {
        self.inner.token(id).map(str::to_string)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// One `[CLS] A [SEP] B [SEP]` training example.
#[pyclass(name = "PairExample", module = "sentorder_py", get_all)]
struct PyPairExample {
    tokens: Vec<u32>,
    segment_ids: Vec<u8>,
    label: String,
    target: Vec<f64>,
    mlm_positions: Vec<u32>,
    mlm_labels: Vec<u32>,
}

impl From<&PairExample> for PyPairExample {
    fn from(e: &PairExample) -> Self {
        Self {
            tokens: e.tokens.clone(),
            segment_ids: e.segment_ids.clone(),
            label: e.label.name().to_string(),
            target: e.target.clone(),
            mlm_positions: e.mlm_positions.clone(),
            mlm_labels: e.mlm_labels.clone(),
        }
    }
}

#[pyclass(name = "Sampler", module = "sentorder_py")]
struct PySampler {
    inner: sampler::Sampler,
}

#[pymethods]
impl PySampler {
    #[new]
    #[pyo3(signature = (corpus, vocab, scheme, max_len = 128, smoothing_factor = 0.8))]
    fn new(corpus: &PyCorpus, vocab: &PyVocab, scheme: &str, max_len: usize, smoothing_factor: f64) -> PyResult<Self> {
        let scheme = scheme_of(scheme, smoothing_factor)?;
        Ok(Self { inner: sampler::Sampler::new(&corpus.inner, &vocab.inner, scheme, max_len, MaskingConfig::default()).map_err(err)? })
    }

    /// `count` masked examples; the output depends only on `(seed, workers)`.
    #[pyo3(signature = (count, seed, workers = 4))]
    fn sample(&self, py: Python<'_>, count: usize, seed: u64, workers: usize) -> PyResult<Vec<PyPairExample>> {
        let ex = py.detach(|| sampler::sample_examples(&self.inner, seed, count, workers)).map_err(err)?;
        Ok(ex.iter().map(PyPairExample::from).collect())
    }

    fn labels(&self) -> Vec<String> {
        self.inner.scheme().labels().iter().map(|l| l.name().to_string()).collect()
    }
}

#[pyclass(name = "Model", module = "sentorder_py")]
struct PyModel {
    inner: Model,
    scheme: OrderScheme,
}

#[pymethods]
impl PyModel {
    /// Fresh model; `preset` is desk, base or tiny.
    #[new]
    #[pyo3(signature = (vocab_size, scheme, preset = "desk", seed = 0))]
    fn new(vocab_size: usize, scheme: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let scheme = scheme_of(scheme, 0.8)?;
        let classes = scheme.num_classes();
        let cfg = match preset {
            "desk" => ModelConfig::desk(vocab_size, classes),
            "base" => ModelConfig::base(vocab_size, classes),
            "tiny" => ModelConfig::tiny(vocab_size, classes),
            other => return Err(PyValueError::new_err(format!("unknown preset {other:?}"))),
        };
        Ok(Self { inner: Model::new(cfg, seed).map_err(err)?, scheme })
    }

    /// Loads a checkpoint directory written by pre-training (`<out>/final`).
    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (inner, scheme) = train::load_checkpoint(&checkpoint).map_err(err)?;
        Ok(Self { inner, scheme })
    }

    fn config(&self) -> HashMap<String, String> {
        self.inner.config.kv_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    fn scheme(&self) -> String {
        self.scheme.kind.name().to_string()
    }

    fn classes(&self) -> Vec<String> {
        self.scheme.classes().iter().map(|l| l.name().to_string()).collect()
    }

    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    /// Order-class probabilities for the sentence pair `(a, b)`.
    fn predict(&self, vocab: &PyVocab, a: &str, b: &str) -> PyResult<Vec<f64>> {
        let cfg = &self.inner.config;
        let ex = PairExample::for_inference(vocab.inner.encode(a), vocab.inner.encode(b), cfg.max_position, cfg.num_order_classes);
        let batch = Batch::from_examples(&[ex], cfg.num_order_classes, cfg.max_position).map_err(err)?;
        batch.check_vocab(cfg.vocab_size).map_err(err)?;
        Ok(softmax_rows(&predict_order_logits(&self.inner, &batch)).into_data())
    }
}

/// Pre-trains a desk-scale model and returns it with its metrics rows
/// `(step, lr, mlm_loss, order_loss, order_acc)`.
#[pyfunction]
#[pyo3(signature = (corpus, vocab, scheme, steps, seed, out, lr = None, batch_size = 32, max_len = 128, metrics_every = 20))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    py: Python<'_>,
    corpus: &PyCorpus,
    vocab: &PyVocab,
    scheme: &str,
    steps: u64,
    seed: u64,
    out: PathBuf,
    lr: Option<f64>,
    batch_size: usize,
    max_len: usize,
    metrics_every: u64,
) -> PyResult<(PyModel, Vec<(u64, f64, f64, f64, f64)>)> {
    let scheme = scheme_of(scheme, 0.8)?;
    let sampler = sampler::Sampler::new(&corpus.inner, &vocab.inner, scheme, max_len, MaskingConfig::default()).map_err(err)?;
    let cfg = ModelConfig { max_position: max_len.max(128), ..ModelConfig::desk(vocab.inner.len(), scheme.num_classes()) };
    let opt = OptimizerConfig { lr_max: lr.unwrap_or(OptimizerConfig::desk().lr_max), ..OptimizerConfig::desk() };
    let tc = TrainConfig { batch_size, metrics_every, ..TrainConfig::new(seed) };
    let summary = py
        .detach(|| train::pretrain(&sampler, &cfg, &opt, &SchedulePlan::single(steps, max_len), &tc, &out, None))
        .map_err(err)?;
    let rows = summary.metrics.iter().map(|m| (m.step, m.lr, m.mlm_loss, m.order_loss, m.order_acc)).collect();
    Ok((PyModel { inner: summary.model, scheme }, rows))
}

/// Held-out order accuracy over `n` unmasked pairs drawn from `corpus`.
/// Returns `(accuracy, {label: accuracy})`.
#[pyfunction]
#[pyo3(signature = (model, corpus, vocab, n = 1500, seed = 1))]
fn evaluate_order(py: Python<'_>, model: &PyModel, corpus: &PyCorpus, vocab: &PyVocab, n: usize, seed: u64) -> PyResult<(f64, HashMap<String, f64>)> {
    let s = sampler::Sampler::new(&corpus.inner, &vocab.inner, model.scheme, model.inner.config.max_position, MaskingConfig::default()).map_err(err)?;
    let mut r = stream(seed, Domain::Heldout, 0);
    let ex = (0..n).map(|_| s.sample_unmasked(&mut r)).collect::<sentorder::Result<Vec<_>>>().map_err(err)?;
    let rep = py.detach(|| order_accuracy(&model.inner, &model.scheme, &ex)).map_err(err)?;
    Ok((rep.accuracy_original, rep.per_label.into_iter().map(|l| (l.label, l.accuracy)).collect()))
}

/// Input-swap probe on a pair-task TSV; returns the report fields.
#[pyfunction]
#[pyo3(signature = (model, vocab, dataset, seed, runs = 5, protocol = "refit"))]
fn probe_swap(py: Python<'_>, model: &PyModel, vocab: &PyVocab, dataset: PathBuf, seed: u64, runs: usize, protocol: &str) -> PyResult<HashMap<String, f64>> {
    let ds = PairTaskDataset::load(&dataset).map_err(err)?;
    let cfg = FinetuneConfig { runs, protocol: protocol.parse().map_err(err)?, ..FinetuneConfig::new(seed) };
    let rep = py.detach(|| swap_probe(&model.inner, &model.scheme, &vocab.inner, &ds, &cfg)).map_err(err)?;
    let mut out = HashMap::from([("n".to_string(), rep.n as f64), ("accuracy_original".to_string(), rep.accuracy_original)]);
    if let (Some(s), Some(d)) = (rep.accuracy_swapped, rep.delta) {
        out.insert("accuracy_swapped".into(), s);
        out.insert("delta".into(), d);
    }
    Ok(out)
}

/// Writes the synthetic corpus under `out`; returns (documents, held-out
/// documents, pair examples).
#[pyfunction]
#[pyo3(signature = (out, seed, docs = 200, sentences = 12, pairs = 1000))]
fn make_synthetic(out: PathBuf, seed: u64, docs: usize, sentences: usize, pairs: usize) -> PyResult<(usize, usize, usize)> {
    let spec = SyntheticSpec { docs, sentences, pairs_per_split: pairs, ..SyntheticSpec::default() };
    let c = make_synthetic_corpus(&spec, seed).map_err(err)?;
    c.save(&out).map_err(err)?;
    Ok((c.train.len(), c.heldout.len(), c.pairs.examples.len()))
}

/// Learning rate at 0-based update `step` under warmup plus linear decay.
#[pyfunction]
#[pyo3(signature = (step, total_steps, lr_max = 1e-4, warmup = 0.1))]
fn lr_at(step: u64, total_steps: u64, lr_max: f64, warmup: f64) -> f64 {
    let plan = SchedulePlan { warmup_fraction: warmup, ..SchedulePlan::single(total_steps, 128) };
    train::lr_at(step, &plan, &OptimizerConfig { lr_max, ..OptimizerConfig::default() })
}

/// Soft target of `label` under `scheme`.
#[pyfunction]
#[pyo3(signature = (label, scheme, smoothing_factor = 0.8))]
fn build_target(label: &str, scheme: &str, smoothing_factor: f64) -> PyResult<Vec<f64>> {
    let s = scheme_of(scheme, smoothing_factor)?;
    let l = s
        .labels()
        .iter()
        .copied()
        .find(|l| l.name().eq_ignore_ascii_case(label))
        .ok_or_else(|| PyValueError::new_err(format!("label {label:?} is not emitted by {}", s.kind)))?;
    Ok(sampler::build_target(l, &s))
}

/// Max relative error of the full-model gradient on the tiny config.
#[pyfunction]
#[pyo3(signature = (seed = 10))]
fn grad_check(py: Python<'_>, seed: u64) -> PyResult<f64> {
    py.detach(|| {
        let spec = SyntheticSpec { docs: 4, sentences: 6, heldout_docs: 2, pair_docs: 0, pairs_per_split: 0, vocab_size: 30, cycle: 5, words_min: 2, words_max: 4 };
        let c = make_synthetic_corpus(&spec, seed)?;
        let v = tokenizer::build_vocab(&c.train, 1000)?;
        let scheme = OrderScheme::new(SchemeKind::Pn3);
        let s = sampler::Sampler::new(&c.train, &v, scheme, 24, MaskingConfig::default())?;
        let ex = sampler::sample_examples(&s, seed, 2, 1)?;
        let model = Model::new(ModelConfig::tiny(v.len(), 3), seed)?;
        let batch = Batch::from_examples(&ex, 3, model.config.max_position)?;
        Ok(check_gradients(&model, &batch, GRAD_CHECK_EPS)?.max_rel_error)
    })
    .map_err(err)
}

#[pymodule]
fn sentorder_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyVocab>()?;
    m.add_class::<PyPairExample>()?;
    m.add_class::<PySampler>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_order, m)?)?;
    m.add_function(wrap_pyfunction!(probe_swap, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(build_target, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
