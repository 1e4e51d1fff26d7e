//! Position-specific variant: one vector per language, layer and position
//! instead of one averaged over positions.

use rayon::prelude::*;

use crate::corpus::{LanguageTag, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{tokenize, Model};

/// Buckets cover 1-based positions `2..=k + 1`; position 1 is excluded as in
/// the layer-level bank.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalBank {
    k: usize,
    n_layers: usize,
    d_model: usize,
    model_hash: [u8; 32],
    languages: Vec<LanguageTag>,
    // [language][bucket][layer * d]
    vectors: Vec<Vec<Vec<f32>>>,
    counts: Vec<Vec<u64>>,
}

impl PositionalBank {
    pub fn k(&self) -> usize {
        self.k
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
    pub fn languages(&self) -> &[LanguageTag] {
        &self.languages
    }
    pub fn contains(&self, code: &str) -> bool {
        self.languages.iter().any(|t| t.code == code)
    }

    /// Number of stored f32 values; `k` times the layer-level bank's.
    pub fn stored_values(&self) -> usize {
        self.languages.len() * self.k * self.n_layers * self.d_model
    }

    fn index(&self, code: &str) -> Result<usize> {
        self.languages
            .iter()
            .position(|t| t.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.into()))
    }

    /// Bucket used for a 0-based sequence position. Positions beyond the last
    /// bucket reuse it.
    pub fn bucket_for(&self, position: usize) -> usize {
        position.saturating_sub(1).min(self.k - 1)
    }

    /// Mean hidden state of `code` at `layer` (1-based) and 1-based
    /// `position` in `2..=k + 1`.
    pub fn vector(&self, code: &str, layer: usize, position: usize) -> Result<&[f32]> {
        let li = self.index(code)?;
        if position < 2 || position > self.k + 1 || layer == 0 || layer > self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "no bucket for layer {layer}, position {position}"
            )));
        }
        let d = self.d_model;
        Ok(&self.vectors[li][position - 2][(layer - 1) * d..layer * d])
    }

    pub fn count(&self, code: &str, position: usize) -> Result<u64> {
        let li = self.index(code)?;
        Ok(self.counts[li][position - 2])
    }

    /// `v[l, p] - mean over languages of v[·, p]` for a bucket.
    pub fn representation(&self, code: &str, layer: usize, bucket: usize) -> Result<Vec<f32>> {
        let li = self.index(code)?;
        let d = self.d_model;
        let range = (layer - 1) * d..layer * d;
        let mut c = vec![0.0f64; d];
        for lang in &self.vectors {
            for (a, v) in c.iter_mut().zip(&lang[bucket][range.clone()]) {
                *a += *v as f64;
            }
        }
        let n = self.vectors.len() as f64;
        Ok(self.vectors[li][bucket][range]
            .iter()
            .zip(&c)
            .map(|(v, c)| v - (c / n) as f32)
            .collect())
    }
}

pub fn build_positional_bank(model: &Model, corpus: &ParallelCorpus, k: usize) -> Result<PositionalBank> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let cfg = model.config();
    let (n_layers, d) = (cfg.n_layers, cfg.d_model);
    let mut vectors = Vec::new();
    let mut counts = Vec::new();
    for tag in corpus.languages() {
        let slice = corpus.slice(&tag.code)?;
        if slice.is_empty() {
            return Err(Error::EmptySlice);
        }
        let per_sample: Vec<Result<Vec<Vec<f32>>>> = slice
            .par_iter()
            .map(|(id, cell)| {
                let tokens = tokenize(cell);
                if tokens.len() < 2 {
                    return Err(Error::DegenerateSample((*id).to_string()));
                }
                let (states, _) = model.forward_collect(&tokens, None)?;
                Ok((1..tokens.len().min(k + 1))
                    .map(|p| (1..=n_layers).flat_map(|l| states.at(l, p).to_vec()).collect())
                    .collect())
            })
            .collect();
        let mut sums = vec![vec![0.0f64; n_layers * d]; k];
        let mut n = vec![0u64; k];
        for s in per_sample {
            for (b, row) in s?.into_iter().enumerate() {
                for (a, x) in sums[b].iter_mut().zip(&row) {
                    *a += *x as f64;
                }
                n[b] += 1;
            }
        }
        if let Some(b) = n.iter().position(|&c| c == 0) {
            return Err(Error::EmptyPositionBucket(b + 2));
        }
        vectors.push(
            sums.iter()
                .zip(&n)
                .map(|(s, &c)| s.iter().map(|x| (x / c as f64) as f32).collect())
                .collect(),
        );
        counts.push(n);
    }
    Ok(PositionalBank {
        k,
        n_layers,
        d_model: d,
        model_hash: model.hash(),
        languages: corpus.languages().to_vec(),
        vectors,
        counts,
    })
}
