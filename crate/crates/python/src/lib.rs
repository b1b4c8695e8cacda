// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: models, circuits, datasets and the three discovery
//! methods.

use std::path::PathBuf;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::edgeprune::baselines::{acdc as acdc_search, eap_scores, eap_top_k, EapOptions};
use ::edgeprune::metrics::{circuit_kl, evaluate as evaluate_circuit};
use ::edgeprune::model::{self, AblationMode, DisentangledTransformer, ModelConfig};
use ::edgeprune::pruner::{self, PruneConfig};
use ::edgeprune::tasks::{self, ExamplePair, Splits, TaskKind, TaskSpec};
use ::edgeprune::zoo::Program;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn ablation(name: &str) -> PyResult<AblationMode> {
    match name {
        "interchange" => Ok(AblationMode::Interchange),
        "zero" => Ok(AblationMode::Zero),
        _ => Err(PyValueError::new_err(format!("unknown ablation `{name}`"))),
    }
}

/// A transformer whose residual stream can be disentangled per edge.
#[pyclass(frozen)]
struct Model {
    inner: DisentangledTransformer,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_model(&path).map_err(err)?,
        })
    }

    /// Randomly initialized pre-LN GELU model.
    #[staticmethod]
    #[pyo3(signature = (n_layers, n_heads, d_model, vocab_size, max_seq, seed=0))]
    fn random(
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        vocab_size: usize,
        max_seq: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig::toy(n_layers, n_heads, d_model, vocab_size, max_seq);
        Ok(Self {
            inner: DisentangledTransformer::random(cfg, seed).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_model(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.graph().model_hash().to_string()
    }

    #[getter]
    fn n_edges(&self) -> usize {
        self.inner.graph().n_edges()
    }

    /// Every edge as a `(source, reader)` pair of names, in canonical order.
    fn edges(&self) -> Vec<(String, String)> {
        self.inner
            .graph()
            .edges()
            .iter()
            .map(|e| (e.src.to_string(), e.dst.to_string()))
            .collect()
    }

    /// Logits `[batch][position][vocab]` for equal-length token sequences.
    fn logits(&self, tokens: Vec<Vec<u32>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let t = self.inner.logits(&tokens).map_err(err)?;
        let (s, v) = (t.shape()[1], t.shape()[2]);
        Ok(t.data()
            .chunks(s * v)
            .map(|b| b.chunks(v).map(<[f32]>::to_vec).collect())
            .collect())
    }

    /// Logits of `circuit`, with removed edges ablated from `corrupted`.
    #[pyo3(signature = (clean, corrupted, circuit, ablation="interchange"))]
    fn circuit_logits(
        &self,
        clean: Vec<Vec<u32>>,
        corrupted: Vec<Vec<u32>>,
        circuit: &Circuit,
        ablation: &str,
    ) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let mode = self::ablation(ablation)?;
        let t = self
            .inner
            .circuit_forward(&clean, &corrupted, &circuit.inner, mode)
            .map_err(err)?;
        let (s, v) = (t.shape()[1], t.shape()[2]);
        Ok(t.data()
            .chunks(s * v)
            .map(|b| b.chunks(v).map(<[f32]>::to_vec).collect())
            .collect())
    }
}

/// A set of kept edges.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Circuit {
    inner: model::Circuit,
}

#[pymethods]
impl Circuit {
    #[staticmethod]
    fn full(model: &Model) -> Self {
        Self {
            inner: model::Circuit::full(&model.inner.graph()),
        }
    }

    #[staticmethod]
    fn empty(model: &Model) -> Self {
        Self {
            inner: model::Circuit::empty(&model.inner.graph()),
        }
    }

    /// Circuit keeping the edges at the given canonical indices.
    #[staticmethod]
    fn from_indices(model: &Model, indices: Vec<usize>) -> PyResult<Self> {
        let g = model.inner.graph();
        let mut mask = vec![false; g.n_edges()];
        for i in indices {
            *mask
                .get_mut(i)
                .ok_or_else(|| PyValueError::new_err(format!("edge index {i} out of range")))? = true;
        }
        Ok(Self {
            inner: model::Circuit::from_mask(&g, mask).map_err(err)?,
        })
    }

    #[staticmethod]
    fn from_json(model: &Model, json: &str) -> PyResult<Self> {
        Ok(Self {
            inner: model::Circuit::from_json(&model.inner.graph(), json).map_err(err)?,
        })
    }

    fn to_json(&self, model: &Model) -> String {
        self.inner.to_json(&model.inner.graph())
    }

    fn to_dot(&self, model: &Model) -> PyResult<String> {
        ::edgeprune::export::circuit_to_dot(&model.inner.graph(), &self.inner).map_err(err)
    }

    #[getter]
    fn n_kept(&self) -> usize {
        self.inner.n_kept()
    }

    #[getter]
    fn sparsity(&self) -> f32 {
        self.inner.sparsity()
    }

    fn kept_indices(&self) -> Vec<usize> {
        self.inner.kept_edge_indices()
    }

    /// `(common, overlap, chance_factor)`.
    fn intersection(&self, other: &Circuit) -> PyResult<(Circuit, f32, f32)> {
        let (c, overlap, chance) = self.inner.intersection(&other.inner).map_err(err)?;
        Ok((Circuit { inner: c }, overlap, chance))
    }

    fn __eq__(&self, other: &Circuit) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Circuit({} of {} edges)",
            self.inner.n_kept(),
            self.inner.n_edges_total()
        )
    }
}

/// Clean/corrupted example pairs.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct Pairs {
    inner: Vec<ExamplePair>,
}

#[pymethods]
impl Pairs {
    #[staticmethod]
    fn from_jsonl(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tasks::read_jsonl(&path).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn clean_tokens(&self) -> Vec<Vec<u32>> {
        self.inner.iter().map(|p| p.clean_tokens.clone()).collect()
    }

    fn corrupted_tokens(&self) -> Vec<Vec<u32>> {
        self.inner.iter().map(|p| p.corrupted_tokens.clone()).collect()
    }
}

/// A generated task: vocabulary plus train, validation and test splits.
#[pyclass(frozen)]
struct Task {
    inner: tasks::TaskData,
}

#[pymethods]
impl Task {
    /// `task` is one of ioi, greater-than, gendered-pronoun, boolean.
    #[staticmethod]
    #[pyo3(signature = (task, seed=0, n_names=20, train=None, validation=None, test=None))]
    fn generate(
        task: &str,
        seed: u64,
        n_names: usize,
        train: Option<usize>,
        validation: Option<usize>,
        test: Option<usize>,
    ) -> PyResult<Self> {
        let kind: TaskKind = task.parse().map_err(err)?;
        let (spec, d) = match kind {
            TaskKind::Ioi => (TaskSpec::ioi(1, n_names.min(tasks::IOI_NAMES.len())), Splits::IOI),
            TaskKind::GreaterThan => (TaskSpec::greater_than(), Splits::GREATER_THAN),
            TaskKind::GenderedPronoun => (TaskSpec::gendered_pronoun(), Splits::GENDERED_PRONOUN),
            TaskKind::Boolean => (
                TaskSpec::Boolean,
                Splits {
                    train: 150,
                    validation: 150,
                    test: 200,
                },
            ),
        };
        let splits = Splits {
            train: train.unwrap_or(d.train),
            validation: validation.unwrap_or(d.validation),
            test: test.unwrap_or(d.test),
        };
        Ok(Self {
            inner: tasks::TaskData::generate(spec, splits, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: tasks::TaskData::load(&dir).map_err(err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.len()
    }

    fn split(&self, name: &str) -> PyResult<Pairs> {
        Ok(Pairs {
            inner: self.inner.split(name).map_err(err)?.to_vec(),
        })
    }

    fn encode(&self, text: &str) -> PyResult<Vec<u32>> {
        self.inner.vocab.encode(text).map_err(err)
    }

    /// Trains a fresh model until validation accuracy reaches `accuracy_bar`.
    #[pyo3(signature = (n_layers=2, n_heads=4, d_model=32, max_steps=5000, accuracy_bar=0.95, seed=0))]
    fn train_model(
        &self,
        n_layers: usize,
        n_heads: usize,
        d_model: usize,
        max_steps: usize,
        accuracy_bar: f32,
        seed: u64,
    ) -> PyResult<(Model, f32)> {
        let d = &self.inner;
        let max_seq = d
            .train
            .iter()
            .chain(&d.validation)
            .chain(&d.test)
            .map(|p| p.clean_tokens.len())
            .max()
            .unwrap_or(1);
        let cfg = ModelConfig::toy(n_layers, n_heads, d_model, d.vocab.len(), max_seq);
        let train = tasks::TrainConfig {
            max_steps,
            accuracy_bar,
            seed,
            ..tasks::TrainConfig::default()
        };
        let (m, report) = tasks::train_toy_lm(d, cfg, &train).map_err(err)?;
        Ok((Model { inner: m }, report.validation_accuracy))
    }

    /// Task metrics of `circuit` on a split, as a dict.
    #[pyo3(signature = (model, circuit, split="test", ablation="interchange"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        model: &Model,
        circuit: &Circuit,
        split: &str,
        ablation: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pairs = self.inner.split(split).map_err(err)?;
        let r = evaluate_circuit(
            &model.inner,
            &circuit.inner,
            &self.inner,
            pairs,
            self::ablation(ablation)?,
        )
        .map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("kl", r.kl)?;
        d.set_item("exact_match", r.exact_match)?;
        d.set_item("accuracy", r.accuracy)?;
        d.set_item("logit_diff", r.logit_diff)?;
        d.set_item("prob_diff", r.prob_diff)?;
        d.set_item("prob_diff_10", r.prob_diff_10)?;
        d.set_item("kendall_tau", r.kendall_tau)?;
        d.set_item("sparsity", r.sparsity)?;
        d.set_item("n_examples", r.n_examples)?;
        Ok(d)
    }
}

/// A hand-weighted model with a known circuit.
#[pyclass(frozen)]
struct Compiled {
    inner: ::edgeprune::zoo::CompiledModel,
}

#[pymethods]
impl Compiled {
    /// `program` is `xproportion` or `reverse`.
    #[new]
    fn new(program: &str) -> PyResult<Self> {
        let p: Program = program.parse().map_err(err)?;
        Ok(Self { inner: p.build() })
    }

    #[getter]
    fn model(&self) -> Model {
        Model {
            inner: self.inner.model.clone(),
        }
    }

    #[getter]
    fn ground_truth(&self) -> Circuit {
        Circuit {
            inner: self.inner.ground_truth.clone(),
        }
    }

    /// Token ids of a symbol string, with the leading BOS.
    fn encode(&self, symbols: Vec<String>) -> PyResult<Vec<u32>> {
        let refs: Vec<&str> = symbols.iter().map(String::as_str).collect();
        self.inner.encode(&refs).map_err(err)
    }

    #[pyo3(signature = (n=256, seed=0))]
    fn dataset(&self, n: usize, seed: u64) -> PyResult<Pairs> {
        Ok(Pairs {
            inner: self.inner.dataset(n, 1..=self.inner.max_len(), seed).map_err(err)?,
        })
    }

    /// The recommended pruning configuration as JSON.
    fn prune_config(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.prune_config()).map_err(err)
    }
}

/// Edge Pruning. `config` is a preset name or a JSON configuration;
/// returns the circuit and the per-step edge sparsity.
#[pyfunction]
#[pyo3(signature = (model, pairs, config="toy-ioi", seed=None))]
fn prune(model: &Model, pairs: &Pairs, config: &str, seed: Option<u64>) -> PyResult<(Circuit, Vec<f32>)> {
    let mut cfg = if config.trim_start().starts_with('{') {
        serde_json::from_str::<PruneConfig>(config).map_err(err)?
    } else {
        PruneConfig::preset(config).map_err(err)?
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let out = pruner::prune(&model.inner, &pairs.inner, &cfg).map_err(err)?;
    let s = out.log.records.iter().map(|r| r.edge_sparsity).collect();
    Ok((Circuit { inner: out.circuit }, s))
}

/// Greedy edge ablation with threshold `tau`.
#[pyfunction]
#[pyo3(signature = (model, pairs, tau, ablation="interchange"))]
fn acdc(model: &Model, pairs: &Pairs, tau: f64, ablation: &str) -> PyResult<Circuit> {
    let out = acdc_search(&model.inner, &pairs.inner, tau, self::ablation(ablation)?).map_err(err)?;
    Ok(Circuit { inner: out.circuit })
}

/// Edge attribution patching scores, one per edge in canonical order.
#[pyfunction]
fn eap(model: &Model, pairs: &Pairs) -> PyResult<Vec<f32>> {
    Ok(eap_scores(&model.inner, &pairs.inner, &EapOptions::default())
        .map_err(err)?
        .scores)
}

/// The `k` edges with the highest attribution scores.
#[pyfunction]
fn eap_circuit(model: &Model, pairs: &Pairs, k: usize) -> PyResult<Circuit> {
    let table = eap_scores(&model.inner, &pairs.inner, &EapOptions::default()).map_err(err)?;
    Ok(Circuit {
        inner: eap_top_k(&model.inner.graph(), &table, k).map_err(err)?,
    })
}

/// Mean answer-position KL of the circuit from the full model.
#[pyfunction]
#[pyo3(signature = (model, circuit, pairs, ablation="interchange"))]
fn kl(model: &Model, circuit: &Circuit, pairs: &Pairs, ablation: &str) -> PyResult<f64> {
    circuit_kl(&model.inner, &circuit.inner, &pairs.inner, self::ablation(ablation)?).map_err(err)
}

#[pymodule]
#[pyo3(name = "edgeprune")]
pub fn edgeprune_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Circuit>()?;
    m.add_class::<Pairs>()?;
    m.add_class::<Task>()?;
    m.add_class::<Compiled>()?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(acdc, m)?)?;
    m.add_function(wrap_pyfunction!(eap, m)?)?;
    m.add_function(wrap_pyfunction!(eap_circuit, m)?)?;
    m.add_function(wrap_pyfunction!(kl, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names() {
        assert_eq!(ablation("zero").unwrap(), AblationMode::Zero);
        assert_eq!(ablation("interchange").unwrap(), AblationMode::Interchange);
        Python::initialize();
        assert!(ablation("mean").is_err());
    }
}
