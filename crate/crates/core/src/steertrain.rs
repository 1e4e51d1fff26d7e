//! Training the learned steering factors against a frozen model.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CellKind, ParallelCorpus};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{tokenize, LayerHook, Model};
use crate::numeric::{hash_words, Real};
use crate::steering::{
    grad_steering_params, LearnedHook, LearnedSteering, RepresentationTable, SteeringConfig, SteeringExample,
};
use crate::vectors::LanguageVectorBank;

/// A prompt in `source` continued by a response in `target`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainItem {
    pub source: String,
    pub target: String,
    pub prompt: Vec<u32>,
    pub response: Vec<u32>,
}

impl TrainItem {
    /// Concatenated tokens with the loss restricted to response tokens.
    pub fn to_example(&self) -> SteeringExample {
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.response);
        let loss_mask = (0..tokens.len())
            .map(|p| p + 1 >= self.prompt.len() && p + 1 < tokens.len())
            .collect();
        SteeringExample {
            source: self.source.clone(),
            target: self.target.clone(),
            tokens,
            loss_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringTrainSet {
    pub items: Vec<TrainItem>,
    pub mono_fraction: f64,
}

impl SteeringTrainSet {
    pub fn examples(&self) -> Vec<SteeringExample> {
        self.items.iter().map(TrainItem::to_example).collect()
    }

    pub fn languages(&self) -> BTreeSet<&str> {
        self.items
            .iter()
            .flat_map(|i| [i.source.as_str(), i.target.as_str()])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSampling {
    pub items: usize,
    /// Probability that an item keeps the prompt language for the response.
    pub mono_fraction: f64,
    /// Languages never used as source or target.
    pub deny: BTreeSet<String>,
    /// Share of each sample used as the prompt; the rest is the response.
    pub prompt_share: f64,
}

impl Default for PairSampling {
    fn default() -> Self {
        PairSampling {
            items: 500,
            mono_fraction: 0.5,
            deny: BTreeSet::new(),
            prompt_share: 0.5,
        }
    }
}

/// Split each sampled parallel row into a prompt (in the source language)
/// and its continuation (in the target language). Prompts carry no marker of
/// the target language.
pub fn make_steering_trainset(corpus: &ParallelCorpus, spec: &PairSampling, seed: u64) -> Result<SteeringTrainSet> {
    if corpus.kind() != CellKind::Tokens {
        return Err(Error::CellKindMismatch {
            expected: "tokens",
            found: corpus.kind().name(),
        });
    }
    if !(0.0..=1.0).contains(&spec.mono_fraction) {
        return Err(Error::InvalidConfig(format!(
            "mono_fraction must be in [0, 1], got {}",
            spec.mono_fraction
        )));
    }
    if !(spec.prompt_share > 0.0 && spec.prompt_share < 1.0) {
        return Err(Error::InvalidConfig("prompt_share must be in (0, 1)".into()));
    }
    let codes: Vec<&str> = corpus
        .languages()
        .iter()
        .map(|t| t.code.as_str())
        .filter(|c| !spec.deny.contains(*c))
        .collect();
    if codes.len() < 2 {
        return Err(Error::InsufficientLanguages {
            needed: 2,
            found: codes.len(),
        });
    }
    let ids = corpus.alignment();
    if ids.is_empty() {
        return Err(Error::EmptySlice);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::with_capacity(spec.items);
    while items.len() < spec.items {
        let id = &ids[rng.random_range(0..ids.len())];
        let source = codes[rng.random_range(0..codes.len())];
        let target = if rng.random_bool(spec.mono_fraction) {
            source
        } else {
            let mut t = codes[rng.random_range(0..codes.len() - 1)];
            if t == source {
                t = codes[codes.len() - 1];
            }
            t
        };
        let src = tokenize(corpus.cell(id, source).expect("aligned"));
        let tgt = tokenize(corpus.cell(id, target).expect("aligned"));
        let n = src.len().min(tgt.len());
        if n < 3 {
            continue;
        }
        let cut = ((n as f64 * spec.prompt_share).round() as usize).clamp(2, n - 1);
        items.push(TrainItem {
            source: source.to_string(),
            target: target.to_string(),
            prompt: src[..cut].to_vec(),
            response: tgt[cut..].to_vec(),
        });
    }
    Ok(SteeringTrainSet {
        items,
        mono_fraction: spec.mono_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Plain SGD step size.
    pub lr: f64,
    pub dropout: f64,
    pub rank: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            lr: 1e-3,
            dropout: 0.2,
            rank: 32,
            batch: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidConfig("rank must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

pub fn write_loss_log(curve: &[LossPoint], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in curve {
        out.push_str(&serde_json::to_string(p)?);
        out.push('\n');
    }
    fsutil::write_atomic(path, out.as_bytes())
}

/// Plain SGD over mini-batches; only `A` and `B` move. Strength, `beta`
/// and norm restoration are taken from `steering` and stored with the result.
pub fn train_learned_steering(
    model: &Model,
    bank: &LanguageVectorBank,
    trainset: &SteeringTrainSet,
    config: &TrainConfig,
    steering: &SteeringConfig,
) -> Result<(LearnedSteering, Vec<LossPoint>)> {
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::ModelNotFrozen);
    }
    let cfg = model.config();
    steering.validate(cfg.n_layers)?;
    for code in trainset.languages() {
        if !bank.contains(code) {
            return Err(Error::UnknownLanguage(code.into()));
        }
    }
    let reps = RepresentationTable::from_bank(bank)?;
    let mut params = LearnedSteering::new(
        cfg.n_layers,
        cfg.d_model,
        config.rank,
        steering.alpha,
        steering.beta,
        steering.norm_restore,
        config.seed,
    )?;
    let examples = trainset.examples();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0001);
    let mut curve = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let step = curve.len();
            let batch: Vec<SteeringExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let dropout = (config.dropout > 0.0).then(|| (config.dropout, hash_words(&[config.seed, step as u64])));
            let (loss, grads) = grad_steering_params(model, &reps, &params, &batch, steering, dropout)?;
            if !loss.is_finite() {
                return Err(Error::DivergedTraining { step });
            }
            params.sgd_step(&grads, config.lr);
            if !params.is_finite() {
                return Err(Error::DivergedTraining { step });
            }
            log::debug!("steering step {step}: loss {loss:.5}");
            curve.push(LossPoint { step, loss });
        }
    }
    Ok((params, curve))
}

/// Mean response-token loss of `examples` under `params` without dropout.
pub fn steering_loss<F: Real>(
    model: &Model<F>,
    reps: &RepresentationTable<F>,
    params: &LearnedSteering<F>,
    examples: &[SteeringExample],
    steering: &SteeringConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for ex in examples {
        let hook = LearnedHook::new(params, reps.get(&ex.target)?, reps.get(&ex.source)?, steering, None)?;
        let (l, n) = model.sequence_loss(&ex.tokens, &ex.loss_mask, Some(&hook as &dyn LayerHook<F>))?;
        total += l;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyInput);
    }
    let mean = total / count as f64;
    if !mean.is_finite() {
        return Err(Error::NonFiniteLoss);
    }
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub max_rel_error: f64,
    pub entries: Vec<GradCheckEntry>,
}

/// `|a - n| / max(|a| + |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compare the analytic gradient with central differences, both on an f64
/// copy of the model and parameters, over
/// `n_entries` parameters drawn with `seed`, half from `A` and half from `B`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_check(
    model: &Model,
    bank: &LanguageVectorBank,
    params: &LearnedSteering,
    batch: &[SteeringExample],
    steering: &SteeringConfig,
    epsilon: f64,
    n_entries: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("epsilon must be positive".into()));
    }
    let model64: Model<f64> = model.cast();
    let reps64 = RepresentationTable::<f64>::from_bank(bank)?;
    let p64: LearnedSteering<f64> = params.cast();
    let (_, grads) = grad_steering_params(&model64, &reps64, &p64, batch, steering, None)?;
    let analytic = grads.flat();
    let n_a = params.n_layers * 3 * params.d_model * params.rank;
    let n_total = params.n_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = Vec::with_capacity(n_entries);
    let mut a_pool: Vec<usize> = (0..n_a).collect();
    let mut b_pool: Vec<usize> = (n_a..n_total).collect();
    a_pool.shuffle(&mut rng);
    b_pool.shuffle(&mut rng);
    picks.extend(a_pool.iter().take(n_entries.div_ceil(2)));
    picks.extend(b_pool.iter().take(n_entries / 2));

    let mut entries = Vec::with_capacity(picks.len());
    for index in picks {
        let mut plus = p64.clone();
        *plus.param_mut(index) += epsilon;
        let mut minus = p64.clone();
        *minus.param_mut(index) -= epsilon;
        let lp = steering_loss(&model64, &reps64, &plus, batch, steering)?;
        let lm = steering_loss(&model64, &reps64, &minus, batch, steering)?;
        let numeric = (lp - lm) / (2.0 * epsilon);
        let a = analytic[index];
        entries.push(GradCheckEntry {
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        epsilon,
        max_rel_error,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};

    fn corpus() -> ParallelCorpus {
        generate_synthetic_corpus(&SyntheticSpec {
            n_languages: 4,
            samples: 40,
            ..Default::default()
        })
        .unwrap()
        .corpus
    }

    #[test]
    fn trainset_respects_knobs() {
        let c = corpus();
        let mono = make_steering_trainset(
            &c,
            &PairSampling {
                mono_fraction: 1.0,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(mono.items.iter().all(|i| i.source == i.target));
        let cross = make_steering_trainset(
            &c,
            &PairSampling {
                mono_fraction: 0.0,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        assert!(cross.items.iter().all(|i| i.source != i.target));
        let deny: BTreeSet<String> = ["f1l2".to_string()].into();
        let d = make_steering_trainset(
            &c,
            &PairSampling {
                deny: deny.clone(),
                ..Default::default()
            },
            2,
        )
        .unwrap();
        assert!(d.items.iter().all(|i| i.source != "f1l2" && i.target != "f1l2"));
        assert_eq!(
            d,
            make_steering_trainset(
                &c,
                &PairSampling {
                    deny,
                    ..Default::default()
                },
                2
            )
            .unwrap()
        );
        let all: BTreeSet<String> = c.languages().iter().skip(1).map(|t| t.code.clone()).collect();
        assert!(matches!(
            make_steering_trainset(
                &c,
                &PairSampling {
                    deny: all,
                    ..Default::default()
                },
                0
            ),
            Err(Error::InsufficientLanguages { .. })
        ));
    }

    #[test]
    fn loss_mask_covers_response_only() {
        let item = TrainItem {
            source: "a".into(),
            target: "b".into(),
            prompt: vec![1, 2, 3],
            response: vec![7, 8],
        };
        let ex = item.to_example();
        assert_eq!(ex.tokens, vec![1, 2, 3, 7, 8]);
        // Position 2 predicts 7, position 3 predicts 8.
        assert_eq!(ex.loss_mask, vec![false, false, true, true, false]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 2.1).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            rank: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            dropout: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
