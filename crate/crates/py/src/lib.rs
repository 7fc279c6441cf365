//! Python bindings: corpus generation, training, decoding, the EPGS
//! detector, the curvature oracle, and AUROC, exposed as `epgs_py`.
//!
//! Build with `cargo build --release -p epgs-py`; the produced
//! `libepgs_py.so` imports as `epgs_py` once named/linked accordingly
//! (see python/smoke_test.py).

use epgs_lab::epgs::EpgsConfig;
use epgs_lab::eval::BenchmarkConfig;
use epgs_lab::model::{Model as CoreModel, ModelConfig, ParamLocation};
use epgs_lab::taskgen::{self, Corpus as CoreCorpus, CorruptionMode, TaskSpec, END_TOKEN};
use epgs_lab::trainer::{self, TrainConfig};
use epgs_lab::{checkpoint, curvature, epgs, eval};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::Path;

fn err(e: epgs_lab::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Synthetic fact-recall corpus with train/eval splits.
#[pyclass]
struct Corpus {
    inner: CoreCorpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (n_facts, n_singletons, n_transient, redundancy=4, n_templates=8, corruption_mode="wrong_value", seed=0, vocab_limit=256))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        n_facts: usize,
        n_singletons: usize,
        n_transient: usize,
        redundancy: usize,
        n_templates: usize,
        corruption_mode: &str,
        seed: u64,
        vocab_limit: usize,
    ) -> PyResult<Self> {
        let spec = TaskSpec {
            n_facts,
            n_singletons,
            n_transient,
            redundancy,
            n_templates,
            corruption_mode: CorruptionMode::parse(corruption_mode).map_err(err)?,
            seed,
        };
        Ok(Corpus { inner: taskgen::generate_corpus(&spec, vocab_limit).map_err(err)? })
    }

    fn train_sequence_count(&self) -> usize {
        self.inner.train_sequences.len()
    }

    fn eval_example_count(&self) -> usize {
        self.inner.eval_examples.len()
    }

    /// (prompt_ids, reference_ids, category) of one eval example.
    fn example(&self, index: usize) -> PyResult<(Vec<usize>, Vec<usize>, String)> {
        let e = self
            .inner
            .eval_examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no eval example {index}")))?;
        Ok((e.prompt_ids.clone(), e.reference_ids.clone(), e.category.name().to_string()))
    }

    /// Write train.jsonl and eval.jsonl into a directory.
    fn save(&self, dir: &str) -> PyResult<()> {
        let d = Path::new(dir);
        std::fs::create_dir_all(d).map_err(|e| PyValueError::new_err(e.to_string()))?;
        self.inner.save_train_jsonl(&d.join("train.jsonl")).map_err(err)?;
        self.inner.save_eval_jsonl(&d.join("eval.jsonl")).map_err(err)?;
        Ok(())
    }
}

/// The tiny decoder-only transformer.
#[pyclass]
struct Model {
    inner: CoreModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (vocab_size=256, d_model=64, n_layers=4, n_heads=4, d_ff=256, max_seq_len=32, seed=0))]
    fn init(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_ff: usize,
        max_seq_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig { vocab_size, d_model, n_layers, n_heads, d_ff, max_seq_len, seed };
        Ok(Model { inner: CoreModel::init(cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model { inner: checkpoint::load(Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.inner, Path::new(path)).map_err(err)
    }

    fn num_params(&self) -> usize {
        self.inner.total_params()
    }

    /// Train in place; returns (final_train_loss, full_gradient_norm).
    #[pyo3(signature = (corpus, steps=1500, batch_size=32, learning_rate=3e-4, seed=0))]
    fn train(
        &mut self,
        corpus: &Corpus,
        steps: usize,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        let cfg = TrainConfig { steps, batch_size, learning_rate, seed, ..TrainConfig::default() };
        let (trained, report) =
            trainer::train(self.inner.clone(), &corpus.inner, &cfg).map_err(err)?;
        self.inner = trained;
        Ok((report.final_train_loss, report.final_grad_norm))
    }

    /// Greedy decode; returns (ids, per-token probabilities).
    #[pyo3(signature = (prompt, max_new=6))]
    fn greedy(&self, prompt: Vec<usize>, max_new: usize) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let out = self.inner.greedy_decode(&prompt, max_new, Some(END_TOKEN)).map_err(err)?;
        Ok((out.ids, out.probs))
    }

    #[pyo3(signature = (prompt, temperature=1.0, seed=0, max_new=6))]
    fn sample(
        &self,
        prompt: Vec<usize>,
        temperature: f64,
        seed: u64,
        max_new: usize,
    ) -> PyResult<Vec<usize>> {
        let out = self
            .inner
            .sample_decode(&prompt, temperature, seed, max_new, Some(END_TOKEN))
            .map_err(err)?;
        Ok(out.ids)
    }

    /// EPGS for one eval example; returns (score, grad_norm_clean, cos_sim).
    #[pyo3(signature = (corpus, index, sigma=0.1, location="last_block", seed=0))]
    fn epgs_score(
        &self,
        corpus: &Corpus,
        index: usize,
        sigma: f64,
        location: &str,
        seed: u64,
    ) -> PyResult<(f64, f64, f64)> {
        let example = corpus
            .inner
            .eval_examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no eval example {index}")))?;
        let cfg = EpgsConfig {
            sigma,
            location: ParamLocation::parse(location).map_err(err)?,
            noise_seed: seed,
            ..EpgsConfig::default()
        };
        let rec = epgs::epgs_score(&self.inner, index, example, &cfg).map_err(err)?;
        Ok((rec.epgs, rec.grad_norm_clean, rec.cos_sim))
    }

    /// Power-iteration top Hessian eigenvalue of the masked loss for one
    /// eval example.
    #[pyo3(signature = (corpus, index, location="last_block", iters=15, seed=0))]
    fn lambda_max(
        &self,
        corpus: &Corpus,
        index: usize,
        location: &str,
        iters: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let example = corpus
            .inner
            .eval_examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no eval example {index}")))?;
        let loc = ParamLocation::parse(location).map_err(err)?;
        let report =
            curvature::lambda_max_at(&self.inner, index, example, &loc, iters, 1e-4, seed, 6)
                .map_err(err)?;
        Ok(report.lambda_max)
    }

    /// Monte-Carlo output-space stability under uniform-ball embedding noise.
    #[pyo3(signature = (corpus, index, rho, n_samples=8, seed=0))]
    fn kl_stability(
        &self,
        corpus: &Corpus,
        index: usize,
        rho: f64,
        n_samples: usize,
        seed: u64,
    ) -> PyResult<f64> {
        let example = corpus
            .inner
            .eval_examples
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no eval example {index}")))?;
        epgs::kl_stability(&self.inner, example, rho, n_samples, seed).map_err(err)
    }
}

/// Mann-Whitney AUROC (labels: 1 = hallucination).
#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auroc(&scores, &labels).map_err(err)
}

/// Full benchmark (detectors, baselines, stubborn subset, curvature);
/// returns the report as a JSON string.
#[pyfunction]
#[pyo3(signature = (model, corpus, seed=42, k=5, temperature=1.0, sigma=0.1))]
fn benchmark_json(
    model: &Model,
    corpus: &Corpus,
    seed: u64,
    k: usize,
    temperature: f64,
    sigma: f64,
) -> PyResult<String> {
    let cfg = BenchmarkConfig {
        epgs: EpgsConfig { sigma, noise_seed: seed, ..EpgsConfig::default() },
        k,
        temperature,
        seed,
        ..BenchmarkConfig::default()
    };
    let out = eval::run_benchmark(&model.inner, &corpus.inner, &cfg).map_err(err)?;
    serde_json::to_string_pretty(&out.report).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn epgs_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(benchmark_json, m)?)?;
    m.add("END_TOKEN", END_TOKEN)?;
    Ok(())
}
