use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{line_pass_rate, word_pass_rate, LanguageIdentifier, PassRate, Response};
use crate::corpus::SyntheticCorpus;
use crate::error::{Error, Result};
use crate::model::{detokenize, LayerHook, Model};
use crate::steering::{make_hook, SteeringArtifact, SteeringConfig, SteeringMode};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPrompt {
    pub source: String,
    pub target: String,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub source: String,
    pub target: String,
    pub lpr: Option<f64>,
    pub lpr_counts: PassRate,
    pub wpr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wpr_reason: Option<String>,
    pub n: usize,
    pub alpha: f64,
    pub layers: Vec<usize>,
    /// Share of generated tokens inside the target's token range; token
    /// identifiers only.
    pub target_token_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_out: Option<usize>,
}

impl EvalRun {
    /// Measured quantities only, without the configuration echo.
    pub fn metrics(&self) -> (&str, &str, PassRate, Option<f64>, usize, Option<f64>) {
        (
            &self.source,
            &self.target,
            self.lpr_counts,
            self.wpr,
            self.n,
            self.target_token_fraction,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<EvalRun>,
    pub config: serde_json::Value,
    pub model_hash: String,
    pub n_prompts: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

fn group(prompts: &[EvalPrompt]) -> BTreeMap<(&str, &str), Vec<&EvalPrompt>> {
    let mut out: BTreeMap<(&str, &str), Vec<&EvalPrompt>> = BTreeMap::new();
    for p in prompts {
        out.entry((p.source.as_str(), p.target.as_str())).or_default().push(p);
    }
    out
}

fn run_pairs(
    model: &Model,
    artifact: Option<SteeringArtifact<'_>>,
    config: &SteeringConfig,
    prompts: &[EvalPrompt],
    identifier: &LanguageIdentifier,
    max_new: usize,
) -> Result<Vec<EvalRun>> {
    let n_layers = model.config().n_layers;
    config.validate(n_layers)?;
    let token_ids = matches!(identifier, LanguageIdentifier::TokenRange { .. });
    let mut runs = Vec::new();
    for ((source, target), items) in group(prompts) {
        let tag = identifier.language(target)?.clone();
        identifier.language(source)?;
        let hook = match artifact {
            Some(a) => {
                let src = (config.mode != SteeringMode::Mono).then_some(source);
                Some(make_hook(a, config, target, src)?)
            }
            None => None,
        };
        let outputs: Vec<Vec<u32>> = items
            .par_iter()
            .map(|p| {
                let out = model.generate(&p.tokens, hook.as_ref().map(|h| h as &dyn LayerHook), max_new)?;
                Ok(out[p.tokens.len()..].to_vec())
            })
            .collect::<Result<_>>()?;
        let responses: Vec<Response> = outputs
            .iter()
            .map(|t| {
                if token_ids {
                    Response::Tokens(t.clone())
                } else {
                    Response::Text(detokenize(t))
                }
            })
            .collect();
        let lpr = line_pass_rate(&responses, target, identifier)?;
        let wpr = word_pass_rate(&responses, target, identifier)?;
        let target_token_fraction = token_ids.then(|| {
            let total: usize = outputs.iter().map(Vec::len).sum();
            let hits: usize = outputs.iter().flatten().filter(|t| tag.owns_token(**t)).count();
            if total == 0 {
                0.0
            } else {
                hits as f64 / total as f64
            }
        });
        runs.push(EvalRun {
            source: source.into(),
            target: target.into(),
            lpr: lpr.value(),
            lpr_counts: lpr,
            wpr: wpr.value(),
            wpr_reason: wpr.reason,
            n: items.len(),
            alpha: config.alpha,
            layers: config.layers(n_layers),
            target_token_fraction,
            left_out: None,
        });
    }
    Ok(runs)
}

fn snapshot(config: &SteeringConfig, identifier: &LanguageIdentifier, max_new: usize) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(config)?;
    v["max_new"] = max_new.into();
    v["identifier"] = identifier.name().into();
    Ok(v)
}

/// Generate greedily for every prompt under the configured steering and
/// score each (source, target) pair. Without an artifact the run is recorded
/// with `alpha = 0`, the strength it effectively has.
pub fn run_eval(
    model: &Model,
    artifact: Option<SteeringArtifact<'_>>,
    config: &SteeringConfig,
    prompts: &[EvalPrompt],
    identifier: &LanguageIdentifier,
    max_new: usize,
) -> Result<EvalReport> {
    let unsteered;
    let config = match artifact {
        Some(_) => config,
        None => {
            unsteered = config.with_alpha(0.0);
            &unsteered
        }
    };
    Ok(EvalReport {
        runs: run_pairs(model, artifact, config, prompts, identifier, max_new)?,
        config: snapshot(config, identifier, max_new)?,
        model_hash: model.hash_hex(),
        n_prompts: prompts.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `None` for the run with every configured layer.
    pub left_out: Option<usize>,
    pub layers: Vec<usize>,
    /// Pooled over all pairs.
    pub lpr: Option<f64>,
    pub target_token_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub report: EvalReport,
}

impl AblationTable {
    pub fn render_text(&self) -> String {
        let mut out = String::from("left_out  lpr      target_frac\n");
        for r in &self.rows {
            let key = r.left_out.map_or("none".to_string(), |l| l.to_string());
            let f = |v: Option<f64>| v.map_or("null".to_string(), |x| format!("{x:.4}"));
            out.push_str(&format!("{key:<9} {:<8} {}\n", f(r.lpr), f(r.target_token_fraction)));
        }
        out
    }
}

/// Steering at all configured layers, then once with each layer left out.
pub fn layer_ablation(
    model: &Model,
    artifact: SteeringArtifact<'_>,
    config: &SteeringConfig,
    prompts: &[EvalPrompt],
    identifier: &LanguageIdentifier,
    max_new: usize,
) -> Result<AblationTable> {
    let n_layers = model.config().n_layers;
    if n_layers < 2 {
        return Err(Error::InvalidConfig("layer ablation needs at least two layers".into()));
    }
    let base = config.layers(n_layers);
    let mut rows = Vec::with_capacity(n_layers + 1);
    let mut all_runs = Vec::new();
    for left_out in std::iter::once(None).chain((1..=n_layers).map(Some)) {
        let layers: Vec<usize> = base.iter().copied().filter(|l| Some(*l) != left_out).collect();
        let cfg = config.with_layers(layers.iter().copied());
        let mut runs = run_pairs(model, Some(artifact), &cfg, prompts, identifier, max_new)?;
        let pooled = runs.iter().fold(PassRate { passed: 0, total: 0 }, |acc, r| PassRate {
            passed: acc.passed + r.lpr_counts.passed,
            total: acc.total + r.lpr_counts.total,
        });
        let frac = pooled_fraction(&runs);
        for r in &mut runs {
            r.left_out = left_out;
        }
        all_runs.extend(runs);
        rows.push(AblationRow {
            left_out,
            layers,
            lpr: pooled.value(),
            target_token_fraction: frac,
        });
    }
    Ok(AblationTable {
        rows,
        report: EvalReport {
            runs: all_runs,
            config: snapshot(config, identifier, max_new)?,
            model_hash: model.hash_hex(),
            n_prompts: prompts.len(),
        },
    })
}

/// Prompt-weighted mean of the per-pair fractions.
fn pooled_fraction(runs: &[EvalRun]) -> Option<f64> {
    let mut num = 0.0;
    let mut den = 0usize;
    for r in runs {
        num += r.target_token_fraction? * r.n as f64;
        den += r.n;
    }
    (den > 0).then(|| num / den as f64)
}

/// Steering is the only cue for the output language: prompts must not
/// contain target-language tokens. One run per pair and strength.
pub fn steer_only_eval(
    model: &Model,
    artifact: SteeringArtifact<'_>,
    config: &SteeringConfig,
    prompts: &[EvalPrompt],
    identifier: &LanguageIdentifier,
    alphas: &[f64],
    max_new: usize,
) -> Result<EvalReport> {
    if config.mode != SteeringMode::SteerOnly {
        return Err(Error::ModeMismatch(format!(
            "steering-only evaluation needs steer_only mode, got {:?}",
            config.mode
        )));
    }
    if let LanguageIdentifier::TokenRange { .. } = identifier {
        for p in prompts.iter().filter(|p| p.source != p.target) {
            let tag = identifier.language(&p.target)?;
            if p.tokens.iter().any(|t| tag.owns_token(*t)) {
                return Err(Error::InvalidConfig(format!(
                    "prompt for {} already contains target tokens",
                    p.target
                )));
            }
        }
    }
    let mut runs = Vec::new();
    for &alpha in alphas {
        runs.extend(run_pairs(
            model,
            Some(artifact),
            &config.with_alpha(alpha),
            prompts,
            identifier,
            max_new,
        )?);
    }
    let mut cfg = snapshot(config, identifier, max_new)?;
    cfg["alphas"] = serde_json::to_value(alphas)?;
    Ok(EvalReport {
        runs,
        config: cfg,
        model_hash: model.hash_hex(),
        n_prompts: prompts.len(),
    })
}

/// `n` held-out prompts per pair, rendered in each pair's source language.
/// Every pair sees the same contents.
pub fn synthetic_prompts(
    syn: &SyntheticCorpus,
    pairs: &[(String, String)],
    n: usize,
    len: usize,
    stream: u64,
) -> Result<Vec<EvalPrompt>> {
    let content = syn.held_out_content(n, len, stream);
    let mut out = Vec::with_capacity(pairs.len() * n);
    for (s, t) in pairs {
        if !syn.offsets.contains_key(t) {
            return Err(Error::UnknownLanguage(t.clone()));
        }
        for c in &content {
            out.push(EvalPrompt {
                source: s.clone(),
                target: t.clone(),
                tokens: syn.render(s, c)?,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDelta {
    pub source: String,
    pub target: String,
    pub alpha: f64,
    pub left_out: Option<usize>,
    pub field: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub delta: Option<f64>,
}

/// Per-cell changes from report `a` to report `b`, matching runs by pair,
/// strength and left-out layer.
pub fn diff_reports(a: &EvalReport, b: &EvalReport) -> Vec<CellDelta> {
    type Key = (String, String, u64, Option<usize>);
    let key = |r: &EvalRun| -> Key { (r.source.clone(), r.target.clone(), r.alpha.to_bits(), r.left_out) };
    let index = |rep: &EvalReport| -> BTreeMap<Key, EvalRun> { rep.runs.iter().map(|r| (key(r), r.clone())).collect() };
    let (ia, ib) = (index(a), index(b));
    let mut keys: Vec<&Key> = ia.keys().chain(ib.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut out = Vec::new();
    for k in keys {
        let (ra, rb) = (ia.get(k), ib.get(k));
        let fields: [(&str, fn(&EvalRun) -> Option<f64>); 3] = [
            ("lpr", |r| r.lpr),
            ("wpr", |r| r.wpr),
            ("target_token_fraction", |r| r.target_token_fraction),
        ];
        for (name, get) in fields {
            let (va, vb) = (ra.and_then(get), rb.and_then(get));
            if va.is_none() && vb.is_none() {
                continue;
            }
            out.push(CellDelta {
                source: k.0.clone(),
                target: k.1.clone(),
                alpha: f64::from_bits(k.2),
                left_out: k.3,
                field: name.into(),
                a: va,
                b: vb,
                delta: va.zip(vb).map(|(x, y)| y - x),
            });
        }
    }
    out
}
