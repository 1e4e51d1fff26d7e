//! Shared fixtures for integration tests. The pretrained toy model and its
//! bank are cached under the cargo target tmpdir, keyed by everything that
//! determines them.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use steervec::corpus::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
use steervec::fsutil::sha256;
use steervec::model::{load_model, pretrain_toy, save_model, Model, ModelConfig, PretrainOptions};
use steervec::vectors::{build_bank, load_bank, save_bank, LanguageVectorBank};

pub struct Toy {
    pub syn: SyntheticCorpus,
    pub model: Model,
    pub bank: LanguageVectorBank,
}

pub fn toy_spec() -> SyntheticSpec {
    SyntheticSpec::default()
}

pub fn toy_config(spec: &SyntheticSpec) -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 4,
        n_heads: 4,
        vocab_size: spec.vocab_size(),
        max_seq_len: 64,
        seed: 0,
    }
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("steervec-fixtures")
}

/// d=64, N=4 model pretrained on 6 synthetic languages × 2000 samples.
pub fn toy() -> &'static Toy {
    static TOY: OnceLock<Toy> = OnceLock::new();
    TOY.get_or_init(|| {
        let spec = toy_spec();
        let syn = generate_synthetic_corpus(&spec).expect("synthetic corpus");
        let cfg = toy_config(&spec);
        let opts = PretrainOptions::default();
        let key = format!("{}{:?}{:?}", hex::encode(syn.corpus.content_hash()), cfg, opts);
        let key = hex::encode(sha256(key.as_bytes()))[..16].to_string();
        let dir = cache_dir();
        std::fs::create_dir_all(&dir).expect("cache dir");
        let model_path = dir.join(format!("toy-{key}.stvm"));
        let model = match load_model(&model_path) {
            Ok(m) if *m.config() == cfg => m,
            _ => {
                let (m, _) = pretrain_toy(cfg, &syn.corpus, &opts).expect("pretrain");
                save_model(&m, &model_path).expect("save model");
                m
            }
        };
        let bank_path = dir.join(format!("toy-{key}.stvb"));
        let bank = match load_bank(&bank_path) {
            Ok(b) if b.model_hash() == &model.hash() => b,
            _ => {
                let b = build_bank(&model, &syn.corpus).expect("bank");
                save_bank(&b, &bank_path).expect("save bank");
                b
            }
        };
        Toy { syn, model, bank }
    })
}
