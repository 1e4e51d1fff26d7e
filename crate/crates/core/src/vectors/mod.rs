//! Per-language, per-layer mean hidden states and the quantities derived from
//! them.
//!
//! Only the language vectors `v` are stored. The content vector (mean of all
//! language vectors at a layer) and each language representation (`v - c`)
//! are computed on demand, so adding a language never touches the stored
//! state of the others.

mod cluster;
mod io;
mod positional;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Cell, LanguageTag, ParallelCorpus};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{tokenize, Model};

pub use cluster::{cluster_languages, Dendrogram, Merge};
pub use io::{load_bank, save_bank, BANK_MAGIC, BANK_VERSION};
pub use positional::{build_positional_bank, PositionalBank};

/// Which positions are left out of the per-sample mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionPolicy {
    /// Skip the first position of every sample, BOS token or not.
    FirstPosition,
}

/// Running sum of per-sample means. Reduction order is the order in which
/// samples are added; merging two accumulators is exact up to f64 rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorAccumulator {
    n_layers: usize,
    d: usize,
    sums: Vec<f64>,
    samples: u64,
}

impl VectorAccumulator {
    pub fn new(n_layers: usize, d: usize) -> Self {
        VectorAccumulator {
            n_layers,
            d,
            sums: vec![0.0; n_layers * d],
            samples: 0,
        }
    }

    /// Add one sample's per-layer mean, laid out `[n_layers, d]`.
    pub fn add_sample_mean(&mut self, mean: &[f64]) {
        debug_assert_eq!(mean.len(), self.sums.len());
        for (s, m) in self.sums.iter_mut().zip(mean) {
            *s += m;
        }
        self.samples += 1;
    }

    pub fn merge(&mut self, other: &VectorAccumulator) {
        for (s, o) in self.sums.iter_mut().zip(&other.sums) {
            *s += o;
        }
        self.samples += other.samples;
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn finish(&self) -> Result<Vec<f32>> {
        if self.samples == 0 {
            return Err(Error::EmptySlice);
        }
        let n = self.samples as f64;
        Ok(self.sums.iter().map(|s| (s / n) as f32).collect())
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn d_model(&self) -> usize {
        self.d
    }
}

/// Mean of a set of rows, accumulated in f64.
pub fn positions_mean<'a>(rows: impl IntoIterator<Item = &'a [f32]>, d: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; d];
    let mut n = 0usize;
    for row in rows {
        for (o, h) in out.iter_mut().zip(row) {
            *o += *h as f64;
        }
        n += 1;
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    out
}

/// Nested mean over already-excluded states `[sample][position][dim]`: each
/// sample is averaged over its positions first, then samples are averaged.
pub fn nested_mean(samples: &[Vec<Vec<f32>>]) -> Result<Vec<f32>> {
    let d = samples
        .first()
        .and_then(|s| s.first())
        .map(|r| r.len())
        .ok_or(Error::EmptySlice)?;
    let mut acc = VectorAccumulator::new(1, d);
    for s in samples {
        if s.is_empty() {
            return Err(Error::EmptySlice);
        }
        acc.add_sample_mean(&positions_mean(s.iter().map(|r| r.as_slice()), d));
    }
    acc.finish()
}

/// Mean over positions `1..P` (the first position excluded) of each layer's
/// hidden states, in f64, `[n_layers, d]`.
pub fn sample_mean(model: &Model, tokens: &[u32]) -> Result<Vec<f64>> {
    let (states, _) = model.forward_collect(tokens, None)?;
    let cfg = model.config();
    let d = cfg.d_model;
    let mut out = Vec::with_capacity(cfg.n_layers * d);
    for layer in 1..=cfg.n_layers {
        out.extend(positions_mean((1..tokens.len()).map(|p| states.at(layer, p)), d));
    }
    Ok(out)
}

/// Accumulate the nested mean (mean over samples of the mean over positions)
/// for one language slice.
pub fn accumulate_slice(model: &Model, slice: &[(&str, &Cell)]) -> Result<VectorAccumulator> {
    let cfg = model.config();
    let means: Vec<Result<Vec<f64>>> = slice
        .par_iter()
        .map(|(id, cell)| {
            let tokens = tokenize(cell);
            if tokens.len() < 2 {
                return Err(Error::DegenerateSample((*id).to_string()));
            }
            sample_mean(model, &tokens)
        })
        .collect();
    let mut acc = VectorAccumulator::new(cfg.n_layers, cfg.d_model);
    for m in means {
        acc.add_sample_mean(&m?);
    }
    Ok(acc)
}

/// Language vector for every layer, `[n_layers, d]`, plus the sample count.
pub fn compute_language_vector(model: &Model, slice: &[(&str, &Cell)]) -> Result<(Vec<f32>, u64)> {
    if slice.is_empty() {
        return Err(Error::EmptySlice);
    }
    let acc = accumulate_slice(model, slice)?;
    Ok((acc.finish()?, acc.samples()))
}

/// Hash of a language slice: ids and cells in order.
pub(crate) fn slice_hash(slice: &[(&str, &Cell)]) -> [u8; 32] {
    let body = serde_json::to_vec(slice).expect("slice serializes");
    fsutil::sha256(&body)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub tag: LanguageTag,
    /// `[n_layers, d]`, layer 1 first.
    pub vectors: Vec<f32>,
    pub samples: u64,
    pub slice_hash: [u8; 32],
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageVectorBank {
    n_layers: usize,
    d_model: usize,
    model_hash: [u8; 32],
    exclusion: ExclusionPolicy,
    entries: Vec<BankEntry>,
}

impl LanguageVectorBank {
    pub fn from_entries(
        n_layers: usize,
        d_model: usize,
        model_hash: [u8; 32],
        entries: Vec<BankEntry>,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            if !seen.insert(e.tag.code.clone()) {
                return Err(Error::DuplicateLanguage(e.tag.code.clone()));
            }
            if e.vectors.len() != n_layers * d_model {
                return Err(Error::ShapeMismatch {
                    expected: n_layers * d_model,
                    found: e.vectors.len(),
                });
            }
            if e.vectors.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("non-finite vector for {}", e.tag.code)));
            }
        }
        Ok(LanguageVectorBank {
            n_layers,
            d_model,
            model_hash,
            exclusion: ExclusionPolicy::FirstPosition,
            entries,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }
    pub fn d_model(&self) -> usize {
        self.d_model
    }
    pub fn model_hash(&self) -> &[u8; 32] {
        &self.model_hash
    }
    pub fn exclusion(&self) -> ExclusionPolicy {
        self.exclusion
    }
    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }
    pub fn languages(&self) -> Vec<&LanguageTag> {
        self.entries.iter().map(|e| &e.tag).collect()
    }
    pub fn codes(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.tag.code.as_str()).collect()
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn contains(&self, code: &str) -> bool {
        self.entries.iter().any(|e| e.tag.code == code)
    }

    /// Combined corpus provenance: hash of the per-language slice hashes in
    /// code order, so it does not depend on how the bank was assembled.
    pub fn corpus_hash(&self) -> [u8; 32] {
        let mut hashes: Vec<(&str, &[u8; 32])> = self
            .entries
            .iter()
            .map(|e| (e.tag.code.as_str(), &e.slice_hash))
            .collect();
        hashes.sort();
        let mut buf = Vec::new();
        for (code, h) in hashes {
            buf.extend_from_slice(code.as_bytes());
            buf.push(0);
            buf.extend_from_slice(h);
        }
        fsutil::sha256(&buf)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer {layer} outside 1..={}",
                self.n_layers
            )));
        }
        Ok(())
    }

    fn entry(&self, code: &str) -> Result<&BankEntry> {
        self.entries
            .iter()
            .find(|e| e.tag.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.into()))
    }

    /// Stored language vector `v` of `code` at `layer` (1-based).
    pub fn vector(&self, code: &str, layer: usize) -> Result<&[f32]> {
        self.check_layer(layer)?;
        let e = self.entry(code)?;
        let d = self.d_model;
        Ok(&e.vectors[(layer - 1) * d..layer * d])
    }

    /// Mean of all language vectors at `layer`.
    pub fn content_vector(&self, layer: usize) -> Result<Vec<f32>> {
        self.check_layer(layer)?;
        if self.entries.is_empty() {
            return Err(Error::EmptySlice);
        }
        let d = self.d_model;
        let mut acc = vec![0.0f64; d];
        for e in &self.entries {
            for (a, v) in acc.iter_mut().zip(&e.vectors[(layer - 1) * d..layer * d]) {
                *a += *v as f64;
            }
        }
        let n = self.entries.len() as f64;
        Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
    }

    /// `v - c` for `code` at `layer`.
    pub fn language_representation(&self, code: &str, layer: usize) -> Result<Vec<f32>> {
        let c = self.content_vector(layer)?;
        let v = self.vector(code, layer)?;
        Ok(v.iter().zip(&c).map(|(v, c)| v - c).collect())
    }

    /// All layers' representations of `code`, `[n_layers][d]`.
    pub fn representations(&self, code: &str) -> Result<Vec<Vec<f32>>> {
        (1..=self.n_layers)
            .map(|l| self.language_representation(code, l))
            .collect()
    }

    /// New bank with one more language. Stored vectors of existing languages
    /// are carried over untouched.
    pub fn add_language(&self, model: &Model, tag: LanguageTag, slice: &[(&str, &Cell)]) -> Result<Self> {
        if self.contains(&tag.code) {
            return Err(Error::DuplicateLanguage(tag.code));
        }
        let found = model.hash();
        if found != self.model_hash {
            return Err(Error::ModelMismatch {
                expected: hex::encode(self.model_hash),
                found: hex::encode(found),
            });
        }
        let (vectors, samples) = compute_language_vector(model, slice)?;
        let mut out = self.clone();
        out.entries.push(BankEntry {
            tag,
            vectors,
            samples,
            slice_hash: slice_hash(slice),
        });
        Ok(out)
    }
}

/// Vectors for every language of a multi-parallel corpus.
pub fn build_bank(model: &Model, corpus: &ParallelCorpus) -> Result<LanguageVectorBank> {
    if corpus.languages().len() < 2 {
        return Err(Error::InsufficientLanguages {
            needed: 2,
            found: corpus.languages().len(),
        });
    }
    let cfg = model.config();
    let mut entries = Vec::with_capacity(corpus.languages().len());
    for tag in corpus.languages() {
        let slice = corpus.slice(&tag.code)?;
        let (vectors, samples) = compute_language_vector(model, &slice)?;
        entries.push(BankEntry {
            tag: tag.clone(),
            vectors,
            samples,
            slice_hash: slice_hash(&slice),
        });
    }
    LanguageVectorBank::from_entries(cfg.n_layers, cfg.d_model, model.hash(), entries)
}


#[cfg(test)]
mod tests {
    use super::testutil::bank_from;
    use super::*;

    #[test]
    fn content_vector_examples() {
        let b = bank_from(&[("a", vec![vec![1.0, 0.0]]), ("b", vec![vec![-1.0, 0.0]])]);
        assert_eq!(b.content_vector(1).unwrap(), vec![0.0, 0.0]);
        assert_eq!(b.language_representation("a", 1).unwrap(), vec![1.0, 0.0]);

        let single = bank_from(&[("a", vec![vec![0.25, -3.0]])]);
        assert_eq!(single.content_vector(1).unwrap(), vec![0.25, -3.0]);

        let three = bank_from(&[
            ("a", vec![vec![1.0, 0.0]]),
            ("b", vec![vec![0.0, 1.0]]),
            ("c", vec![vec![2.0, 2.0]]),
        ]);
        assert_eq!(three.content_vector(1).unwrap(), vec![1.0, 1.0]);
        assert_eq!(three.language_representation("c", 1).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn unknown_language_and_bad_layer() {
        let b = bank_from(&[("a", vec![vec![1.0]]), ("b", vec![vec![2.0]])]);
        assert!(matches!(
            b.language_representation("zz", 1),
            Err(Error::UnknownLanguage(_))
        ));
        assert!(b.content_vector(0).is_err());
        assert!(b.content_vector(2).is_err());
    }

    #[test]
    fn nested_mean_examples() {
        let one = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0]]];
        assert_eq!(nested_mean(&one).unwrap(), vec![2.0, 3.0]);
        let two = vec![vec![vec![2.0, 0.0]], vec![vec![0.0, 2.0], vec![0.0, 0.0]]];
        assert_eq!(nested_mean(&two).unwrap(), vec![1.0, 0.5]);
        // the token-pooled mean would be (2/3, 2/3)
        assert_ne!(nested_mean(&two).unwrap(), vec![2.0 / 3.0, 2.0 / 3.0]);
    }

    #[test]
    fn accumulator_merge_equals_single_pass() {
        let mut one = VectorAccumulator::new(1, 2);
        let mut a = VectorAccumulator::new(1, 2);
        let mut b = VectorAccumulator::new(1, 2);
        let samples = [[2.0, 0.0], [0.0, 1.0], [0.5, 0.25]];
        for (i, s) in samples.iter().enumerate() {
            one.add_sample_mean(s);
            if i < 2 {
                a.add_sample_mean(s)
            } else {
                b.add_sample_mean(s)
            }
        }
        a.merge(&b);
        assert_eq!(a.finish().unwrap(), one.finish().unwrap());
        assert!(matches!(VectorAccumulator::new(1, 2).finish(), Err(Error::EmptySlice)));
    }
}
