//! Python bindings for the steering toolkit.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(steervec, SteervecError, PyException);

fn err(e: steervec::Error) -> PyErr {
    SteervecError::new_err(e.to_string())
}

#[pymodule(name = "steervec")]
mod steervec_module {
    use super::*;

    use steervec::corpus::{generate_synthetic_corpus, load_corpus, save_corpus, CorpusFormat, SyntheticSpec};
    use steervec::model::{load_model, pretrain_toy, save_model, LayerHook, ModelConfig, PretrainOptions};
    use steervec::steering::{self, make_hook, SteeringArtifact, SteeringConfig, SteeringMode};
    use steervec::vectors::{build_bank, cluster_languages, load_bank, save_bank, LanguageVectorBank};

    #[pymodule_export]
    use super::SteervecError;

    fn format(name: &str) -> PyResult<CorpusFormat> {
        name.parse().map_err(err)
    }

    /// Write a synthetic multi-parallel token corpus and return its language
    /// codes.
    #[pyfunction]
    #[pyo3(signature = (path, languages=6, families=2, alphabet=32, samples=2000, min_len=8, max_len=16, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn gen_synth(
        path: PathBuf,
        languages: usize,
        families: usize,
        alphabet: u32,
        samples: usize,
        min_len: usize,
        max_len: usize,
        seed: u64,
    ) -> PyResult<Vec<String>> {
        let spec = SyntheticSpec {
            n_languages: languages,
            n_families: families,
            content_alphabet: alphabet,
            samples,
            min_len,
            max_len,
            seed,
        };
        let syn = generate_synthetic_corpus(&spec).map_err(err)?;
        save_corpus(&syn.corpus, &path, CorpusFormat::Jsonl).map_err(err)?;
        Ok(syn.codes())
    }

    #[pyclass(name = "Model", frozen)]
    struct PyModel(steervec::model::Model);

    #[pymethods]
    impl PyModel {
        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            let mut model = load_model(&path).map_err(err)?;
            model.freeze();
            Ok(PyModel(model))
        }

        /// Train the toy transformer on a token corpus.
        #[staticmethod]
        #[pyo3(signature = (corpus, format="jsonl", d_model=64, n_layers=4, heads=4, max_seq_len=64, epochs=2, lr=1e-3, seed=0))]
        #[allow(clippy::too_many_arguments)]
        fn pretrain(
            py: Python<'_>,
            corpus: PathBuf,
            format: &str,
            d_model: usize,
            n_layers: usize,
            heads: usize,
            max_seq_len: usize,
            epochs: usize,
            lr: f64,
            seed: u64,
        ) -> PyResult<Self> {
            let corpus = load_corpus(&corpus, super::steervec_module::format(format)?).map_err(err)?;
            let vocab = corpus
                .languages()
                .iter()
                .filter_map(|t| t.script.token_range())
                .map(|(_, hi)| hi as usize)
                .max()
                .ok_or_else(|| SteervecError::new_err("pretraining needs languages with token ranges"))?;
            let config = ModelConfig {
                d_model,
                n_layers,
                n_heads: heads,
                vocab_size: vocab,
                max_seq_len,
                seed,
            };
            let opts = PretrainOptions {
                epochs,
                lr,
                seed,
                ..Default::default()
            };
            let (mut model, _) = py.detach(|| pretrain_toy(config, &corpus, &opts)).map_err(err)?;
            model.freeze();
            Ok(PyModel(model))
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            save_model(&self.0, &path).map_err(err)
        }

        #[getter]
        fn hash(&self) -> String {
            self.0.hash_hex()
        }

        #[getter]
        fn n_layers(&self) -> usize {
            self.0.config().n_layers
        }

        #[getter]
        fn d_model(&self) -> usize {
            self.0.config().d_model
        }

        #[getter]
        fn vocab_size(&self) -> usize {
            self.0.config().vocab_size
        }

        /// Greedy continuation; returns only the new tokens.
        #[pyo3(signature = (prompt, max_new=8))]
        fn generate(&self, prompt: Vec<u32>, max_new: usize) -> PyResult<Vec<u32>> {
            let out = self.0.generate(&prompt, None, max_new).map_err(err)?;
            Ok(out[prompt.len()..].to_vec())
        }

        /// Residual states as `[layer][position][dim]`, layers 1-based in
        /// order.
        fn hidden_states(&self, tokens: Vec<u32>) -> PyResult<Vec<Vec<Vec<f32>>>> {
            let (states, _) = self.0.forward_collect(&tokens, None).map_err(err)?;
            Ok((1..=states.n_layers())
                .map(|l| (0..states.seq_len()).map(|p| states.at(l, p).to_vec()).collect())
                .collect())
        }
    }

    #[pyclass(name = "Bank", frozen)]
    struct PyBank(LanguageVectorBank);

    #[pymethods]
    impl PyBank {
        #[staticmethod]
        #[pyo3(signature = (model, corpus, format="jsonl"))]
        fn build(py: Python<'_>, model: &PyModel, corpus: PathBuf, format: &str) -> PyResult<Self> {
            let corpus = load_corpus(&corpus, super::steervec_module::format(format)?).map_err(err)?;
            py.detach(|| build_bank(&model.0, &corpus)).map(PyBank).map_err(err)
        }

        #[staticmethod]
        fn load(path: PathBuf) -> PyResult<Self> {
            load_bank(&path).map(PyBank).map_err(err)
        }

        fn save(&self, path: PathBuf) -> PyResult<()> {
            save_bank(&self.0, &path).map_err(err)
        }

        fn languages(&self) -> Vec<String> {
            self.0.codes().into_iter().map(String::from).collect()
        }

        fn __len__(&self) -> usize {
            self.0.len()
        }

        fn vector(&self, code: &str, layer: usize) -> PyResult<Vec<f32>> {
            self.0.vector(code, layer).map(<[f32]>::to_vec).map_err(err)
        }

        fn content_vector(&self, layer: usize) -> PyResult<Vec<f32>> {
            self.0.content_vector(layer).map_err(err)
        }

        fn representation(&self, code: &str, layer: usize) -> PyResult<Vec<f32>> {
            self.0.language_representation(code, layer).map_err(err)
        }

        /// Average-linkage dendrogram of the representations, as text.
        #[pyo3(signature = (layer=None))]
        fn cluster(&self, layer: Option<usize>) -> PyResult<String> {
            cluster_languages(&self.0, layer).map(|d| d.render_text()).map_err(err)
        }
    }

    /// Generate with unsupervised steering towards `target`. Returns only the
    /// new tokens.
    #[pyfunction]
    #[pyo3(signature = (model, bank, prompt, target, source=None, mode="cross", alpha=1.0, norm_restore=false, layers=None, max_new=8))]
    #[allow(clippy::too_many_arguments)]
    fn steer(
        model: &PyModel,
        bank: &PyBank,
        prompt: Vec<u32>,
        target: &str,
        source: Option<&str>,
        mode: &str,
        alpha: f64,
        norm_restore: bool,
        layers: Option<Vec<usize>>,
        max_new: usize,
    ) -> PyResult<Vec<u32>> {
        let mode: SteeringMode = mode.parse().map_err(err)?;
        let config = SteeringConfig {
            mode,
            alpha,
            norm_restore,
            active_layers: layers.map(|l| l.into_iter().collect()),
            ..Default::default()
        };
        let hook = make_hook(SteeringArtifact::Bank(&bank.0), &config, target, source).map_err(err)?;
        let out = model
            .0
            .generate(&prompt, Some(&hook as &dyn LayerHook), max_new)
            .map_err(err)?;
        Ok(out[prompt.len()..].to_vec())
    }

    #[pyfunction]
    #[pyo3(signature = (h, r, alpha, norm_restore=false))]
    fn steer_mono(h: Vec<f64>, r: Vec<f64>, alpha: f64, norm_restore: bool) -> PyResult<Vec<f64>> {
        steering::steer_mono(&h, &r, alpha, norm_restore, SteeringConfig::default().epsilon).map_err(err)
    }

    #[pyfunction]
    #[pyo3(signature = (h, r_target, r_source, alpha, norm_restore=false))]
    fn steer_cross(
        h: Vec<f64>,
        r_target: Vec<f64>,
        r_source: Vec<f64>,
        alpha: f64,
        norm_restore: bool,
    ) -> PyResult<Vec<f64>> {
        steering::steer_cross(
            &h,
            &r_target,
            &r_source,
            alpha,
            norm_restore,
            SteeringConfig::default().epsilon,
        )
        .map_err(err)
    }
}
