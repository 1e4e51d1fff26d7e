//! Baseline: probe-selected dimensions with a contrastive, unnormalized shift.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SteeringConfig;
use crate::corpus::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::model::{LayerHook, Model};
use crate::numeric::{hash_words, Real};
use crate::vectors::sample_mean;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeSample {
    pub code: String,
    pub tokens: Vec<u32>,
}

/// An instruction prompt with and without a preceding target-language example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContrastPair {
    pub with_example: Vec<u32>,
    pub instruction_only: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsiOptions {
    /// Fraction of dimensions kept per language and layer.
    pub tau: f64,
    /// Scale of the added shift.
    pub gamma: f64,
    pub heldout_fraction: f64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub probe_l2: f64,
    pub seed: u64,
}

impl Default for LsiOptions {
    fn default() -> Self {
        LsiOptions {
            tau: 0.06,
            gamma: 0.6,
            heldout_fraction: 0.25,
            probe_epochs: 200,
            probe_lr: 0.5,
            probe_l2: 1e-4,
            seed: 0,
        }
    }
}

/// Masks and shift vectors for every language, `[layer - 1][d]` each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsiArtifacts {
    pub tau: f64,
    pub gamma: f64,
    pub n_layers: usize,
    pub d_model: usize,
    pub masks: BTreeMap<String, Vec<Vec<bool>>>,
    pub shifts: BTreeMap<String, Vec<Vec<f32>>>,
    /// Held-out probe accuracy per layer.
    pub probe_accuracy: Vec<f64>,
    /// Majority-class share of the held-out split.
    pub chance: f64,
}

impl LsiArtifacts {
    /// `ceil(tau * d)`; products within 1e-9 of an integer are not rounded up.
    pub fn mask_size(tau: f64, d: usize) -> usize {
        ((tau * d as f64 - 1e-9).ceil().max(0.0) as usize).min(d)
    }

    pub fn mask(&self, code: &str, layer: usize) -> Result<&[bool]> {
        self.lookup(&self.masks, code, layer)
    }

    pub fn shift(&self, code: &str, layer: usize) -> Result<&[f32]> {
        self.lookup(&self.shifts, code, layer)
    }

    fn lookup<'a, T>(&self, map: &'a BTreeMap<String, Vec<Vec<T>>>, code: &str, layer: usize) -> Result<&'a [T]> {
        if layer == 0 || layer > self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "layer {layer} outside 1..={}",
                self.n_layers
            )));
        }
        map.get(code)
            .map(|v| v[layer - 1].as_slice())
            .ok_or_else(|| Error::UnknownLanguage(code.into()))
    }

    pub fn languages(&self) -> impl Iterator<Item = &str> {
        self.shifts.keys().map(|s| s.as_str())
    }
}

/// `h + gamma * r`, no normalization.
pub fn lsi_steer<F: Real>(h: &[F], r: &[F], gamma: F) -> Result<Vec<F>> {
    if h.len() != r.len() {
        return Err(Error::ShapeMismatch {
            expected: h.len(),
            found: r.len(),
        });
    }
    Ok(h.iter().zip(r).map(|(h, r)| *h + gamma * *r).collect())
}

struct Probe {
    /// `[classes][d]`, on standardized features.
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Probe {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let z = self.standardize(x);
        let scores = logits(&self.weights, &self.bias, &z);
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }
}

fn logits(w: &[Vec<f64>], b: &[f64], x: &[f64]) -> Vec<f64> {
    w.iter()
        .zip(b)
        .map(|(wc, bc)| bc + wc.iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Softmax regression by full-batch gradient descent.
fn train_probe(xs: &[&[f64]], ys: &[usize], classes: usize, opts: &LsiOptions) -> Probe {
    let d = xs[0].len();
    let n = xs.len() as f64;
    let mut mean = vec![0.0; d];
    for x in xs {
        for (m, v) in mean.iter_mut().zip(x.iter()) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; d];
    for x in xs {
        for ((s, v), m) in std.iter_mut().zip(x.iter()).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = std.into_iter().map(|v| v.sqrt().max(1e-6)).collect();
    let mut probe = Probe {
        weights: vec![vec![0.0; d]; classes],
        bias: vec![0.0; classes],
        mean,
        std,
    };
    let zs: Vec<Vec<f64>> = xs.iter().map(|x| probe.standardize(x)).collect();
    for _ in 0..opts.probe_epochs {
        let mut gw = vec![vec![0.0; d]; classes];
        let mut gb = vec![0.0; classes];
        for (z, &y) in zs.iter().zip(ys) {
            let s = logits(&probe.weights, &probe.bias, z);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let tot: f64 = e.iter().sum();
            for c in 0..classes {
                let g = e[c] / tot - if c == y { 1.0 } else { 0.0 };
                gb[c] += g / n;
                for (gw, zj) in gw[c].iter_mut().zip(z) {
                    *gw += g * zj / n;
                }
            }
        }
        for c in 0..classes {
            probe.bias[c] -= opts.probe_lr * gb[c];
            for (w, g) in probe.weights[c].iter_mut().zip(&gw[c]) {
                *w -= opts.probe_lr * (g + opts.probe_l2 * *w);
            }
        }
    }
    probe
}

/// Indices of the `m` largest `|w|`, lower index first on ties.
fn top_dims(w: &[f64], m: usize) -> Vec<bool> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; w.len()];
    for &i in &idx[..m] {
        mask[i] = true;
    }
    mask
}

/// Fit a language probe per layer on mean-pooled hidden states (first
/// position excluded), keep each language's `ceil(tau * d)` highest-weight
/// dimensions, and average the masked final-position difference between
/// prompts with and without an in-language example.
pub fn lsi_build(
    model: &Model,
    probe: &[ProbeSample],
    contrast: &BTreeMap<String, Vec<ContrastPair>>,
    opts: &LsiOptions,
) -> Result<LsiArtifacts> {
    if !(opts.tau > 0.0 && opts.tau <= 1.0) {
        return Err(Error::InvalidConfig(format!("tau must be in (0, 1], got {}", opts.tau)));
    }
    if !(opts.heldout_fraction > 0.0 && opts.heldout_fraction < 1.0) {
        return Err(Error::InvalidConfig("heldout_fraction must be in (0, 1)".into()));
    }
    let cfg = model.config();
    let (n_layers, d) = (cfg.n_layers, cfg.d_model);
    let codes: Vec<String> = probe
        .iter()
        .map(|s| s.code.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if codes.len() < 2 {
        return Err(Error::InsufficientLanguages {
            needed: 2,
            found: codes.len(),
        });
    }
    for code in contrast.keys() {
        if !codes.contains(code) {
            return Err(Error::UnknownLanguage(code.clone()));
        }
    }
    let labels: Vec<usize> = probe.iter().map(|s| codes.binary_search(&s.code).unwrap()).collect();
    let features: Vec<Vec<f64>> = probe
        .par_iter()
        .map(|s| sample_mean(model, &s.tokens))
        .collect::<Result<_>>()?;

    // Per class, a hashed order decides which samples are held out.
    let mut heldout = vec![false; probe.len()];
    for c in 0..codes.len() {
        let mut idx: Vec<usize> = (0..probe.len()).filter(|&i| labels[i] == c).collect();
        if idx.len() < 2 {
            return Err(Error::InvalidConfig(format!("probe needs two samples of {}", codes[c])));
        }
        idx.sort_by_key(|&i| hash_words(&[opts.seed, i as u64]));
        let n_held = ((idx.len() as f64 * opts.heldout_fraction).ceil() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..n_held] {
            heldout[i] = true;
        }
    }
    let mut held_counts = vec![0usize; codes.len()];
    for (i, &h) in heldout.iter().enumerate() {
        if h {
            held_counts[labels[i]] += 1;
        }
    }
    let n_held: usize = held_counts.iter().sum();
    let chance = *held_counts.iter().max().unwrap() as f64 / n_held as f64;

    let m = LsiArtifacts::mask_size(opts.tau, d);
    let mut masks: BTreeMap<String, Vec<Vec<bool>>> = codes.iter().map(|c| (c.clone(), Vec::new())).collect();
    let mut probe_accuracy = Vec::with_capacity(n_layers);
    for layer in 1..=n_layers {
        let range = (layer - 1) * d..layer * d;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for i in (0..probe.len()).filter(|&i| !heldout[i]) {
            xs.push(&features[i][range.clone()]);
            ys.push(labels[i]);
        }
        let p = train_probe(&xs, &ys, codes.len(), opts);
        let correct = (0..probe.len())
            .filter(|&i| heldout[i] && p.predict(&features[i][range.clone()]) == labels[i])
            .count();
        let accuracy = correct as f64 / n_held as f64;
        if accuracy <= chance {
            return Err(Error::ProbeDegenerate { accuracy, chance });
        }
        probe_accuracy.push(accuracy);
        for (c, code) in codes.iter().enumerate() {
            masks.get_mut(code).unwrap().push(top_dims(&p.weights[c], m));
        }
    }

    let mut shifts = BTreeMap::new();
    for (code, pairs) in contrast {
        if pairs.is_empty() {
            return Err(Error::EmptySlice);
        }
        let diffs: Vec<Vec<f64>> = pairs
            .par_iter()
            .map(|pair| {
                let with = final_states(model, &pair.with_example)?;
                let without = final_states(model, &pair.instruction_only)?;
                Ok(with.iter().zip(&without).map(|(a, b)| a - b).collect())
            })
            .collect::<Result<_>>()?;
        let k = pairs.len() as f64;
        let mask = &masks[code];
        let per_layer = (0..n_layers)
            .map(|l| {
                (0..d)
                    .map(|j| {
                        if mask[l][j] {
                            (diffs.iter().map(|v| v[l * d + j]).sum::<f64>() / k) as f32
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        shifts.insert(code.clone(), per_layer);
    }
    Ok(LsiArtifacts {
        tau: opts.tau,
        gamma: opts.gamma,
        n_layers,
        d_model: d,
        masks,
        shifts,
        probe_accuracy,
        chance,
    })
}

fn final_states(model: &Model, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (states, _) = model.forward_collect(tokens, None)?;
    let last = tokens.len() - 1;
    Ok((1..=model.config().n_layers)
        .flat_map(|l| states.at(l, last).iter().map(|x| *x as f64).collect::<Vec<_>>())
        .collect())
}

/// `k` contrast pairs per language on the synthetic task. The instruction is
/// content rendered in `instruction_lang`; the example is fresh content in
/// the language itself. Content comes from a held-out stream, so it never
/// overlaps the training corpus.
pub fn synthetic_contrast_pairs(
    syn: &SyntheticCorpus,
    instruction_lang: &str,
    k: usize,
    len: usize,
    stream: u64,
) -> Result<BTreeMap<String, Vec<ContrastPair>>> {
    let content = syn.held_out_content(2 * k, len, stream);
    let mut out = BTreeMap::new();
    for code in syn.codes() {
        let mut pairs = Vec::with_capacity(k);
        for j in 0..k {
            let instruction = syn.render(instruction_lang, &content[2 * j])?;
            let mut with_example = syn.render(&code, &content[2 * j + 1])?;
            with_example.extend_from_slice(&instruction);
            pairs.push(ContrastPair {
                with_example,
                instruction_only: instruction,
            });
        }
        out.insert(code, pairs);
    }
    Ok(out)
}

/// Adds `gamma * r_target` at the configured layers.
#[derive(Debug, Clone)]
pub struct LsiHook {
    shifts: Vec<Option<Vec<f32>>>,
    gamma: f32,
    exclude_first: bool,
}

impl LsiHook {
    pub fn new(art: &LsiArtifacts, target: &str, config: &SteeringConfig) -> Result<Self> {
        let mut shifts = Vec::with_capacity(art.n_layers);
        for l in 1..=art.n_layers {
            let s = art.shift(target, l)?;
            shifts.push(config.layer_active(l).then(|| s.to_vec()));
        }
        Ok(LsiHook {
            shifts,
            gamma: art.gamma as f32,
            exclude_first: config.exclude_first_token,
        })
    }
}

impl LayerHook<f32> for LsiHook {
    fn touches(&self, layer: usize) -> bool {
        self.shifts.get(layer.wrapping_sub(1)).is_some_and(|s| s.is_some())
    }

    fn rewrite(&self, layer: usize, position: usize, h: &mut [f32]) {
        if self.exclude_first && position == 0 {
            return;
        }
        if let Some(Some(r)) = self.shifts.get(layer - 1) {
            for (x, r) in h.iter_mut().zip(r) {
                *x += self.gamma * *r;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_size_rounds_up() {
        assert_eq!(LsiArtifacts::mask_size(0.06, 64), 4);
        assert_eq!(LsiArtifacts::mask_size(0.1, 50), 5);
        assert_eq!(LsiArtifacts::mask_size(1.0, 64), 64);
        assert_eq!(LsiArtifacts::mask_size(0.02, 10), 1);
    }

    #[test]
    fn top_dims_breaks_ties_by_index() {
        assert_eq!(top_dims(&[0.5, -2.0, 0.5, 0.1], 2), vec![true, true, false, false]);
        assert_eq!(top_dims(&[1.0, 1.0, 1.0], 1), vec![true, false, false]);
    }

    #[test]
    fn lsi_steer_is_unnormalized() {
        assert_eq!(lsi_steer(&[1.0f32, 0.0], &[2.0, 4.0], 0.5).unwrap(), vec![2.0, 2.0]);
        assert!(lsi_steer(&[1.0f32], &[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn probe_separates_planted_classes() {
        let xs: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                let c = (i % 2) as f64;
                vec![c * 3.0 + (i as f64 * 0.37).sin() * 0.1, (i as f64 * 1.3).cos()]
            })
            .collect();
        let ys: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let p = train_probe(&refs, &ys, 2, &LsiOptions::default());
        assert!((0..40).all(|i| p.predict(&xs[i]) == ys[i]));
        assert_eq!(top_dims(&p.weights[1], 1), vec![true, false]);
    }
}
