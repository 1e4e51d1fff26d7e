//! Steering functions and the hooks that apply them.
//!
//! The free functions here are the per-vector formulas; [`make_hook`] binds
//! one of them to a vector artifact and a language pair so the model can call
//! it at every layer and position.

mod hooks;
mod learned;
mod lsi;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Real;

pub use crate::vectors::{build_positional_bank, PositionalBank};
pub use hooks::{make_hook, PositionalHook, SteeringArtifact, SteeringHook, UnsupervisedHook};
pub use learned::{
    grad_steering_params, load_learned, save_learned, steer_learned, LearnedGrads, LearnedHook, LearnedSteering,
    RepresentationTable, SteeringExample, LEARNED_MAGIC, LEARNED_VERSION,
};
pub use lsi::{
    lsi_build, lsi_steer, synthetic_contrast_pairs, ContrastPair, LsiArtifacts, LsiHook, LsiOptions, ProbeSample,
};

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SteeringMode {
    /// Towards the target language only.
    Mono,
    /// Towards the target and away from the declared source language.
    Cross,
    /// Cross steering on prompts that carry no language instruction.
    SteerOnly,
}

impl std::str::FromStr for SteeringMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mono" => Ok(SteeringMode::Mono),
            "cross" => Ok(SteeringMode::Cross),
            "steer-only" | "steer_only" => Ok(SteeringMode::SteerOnly),
            other => Err(Error::InvalidConfig(format!("unknown steering mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringConfig {
    pub mode: SteeringMode,
    pub alpha: f64,
    pub beta: f64,
    pub norm_restore: bool,
    /// `None` steers every layer.
    pub active_layers: Option<BTreeSet<usize>>,
    pub exclude_first_token: bool,
    pub epsilon: f64,
}

impl Default for SteeringConfig {
    /// No-op configuration: cross mode with `alpha = 0`.
    fn default() -> Self {
        SteeringConfig {
            mode: SteeringMode::Cross,
            alpha: 0.0,
            beta: 0.9,
            norm_restore: false,
            active_layers: None,
            exclude_first_token: true,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SteeringConfig {
    /// Tuned settings reported for the 8B, 7B and 2B instruction models.
    /// `model` is one of `llama-3.1`, `qwen-2.5`, `gemma-2`; `task` is
    /// `cross`, `mono`, or `learned`.
    pub fn preset(model: &str, task: &str) -> Option<SteeringConfig> {
        let (alpha, beta, norm_restore, mode) = match (model, task) {
            ("llama-3.1", "cross") => (0.2, 0.9, true, SteeringMode::Cross),
            ("llama-3.1", "mono") => (0.05, 0.9, true, SteeringMode::Mono),
            ("llama-3.1", "learned") => (0.1, 0.9, true, SteeringMode::Cross),
            ("qwen-2.5", "cross") => (1.0, 0.9, true, SteeringMode::Cross),
            ("qwen-2.5", "mono") => (2.0, 0.9, true, SteeringMode::Mono),
            ("qwen-2.5", "learned") => (1.0, 0.9, true, SteeringMode::Cross),
            ("gemma-2", "cross") => (2.0, 0.9, false, SteeringMode::Cross),
            ("gemma-2", "mono") => (0.5, 0.9, true, SteeringMode::Mono),
            ("gemma-2", "learned") => (2.0, 0.9, true, SteeringMode::Cross),
            _ => return None,
        };
        Some(SteeringConfig {
            mode,
            alpha,
            beta,
            norm_restore,
            ..Default::default()
        })
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must be in [0, 1], got {}",
                self.beta
            )));
        }
        if let Some(layers) = &self.active_layers {
            if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > n_layers) {
                return Err(Error::InvalidConfig(format!("layer {bad} outside 1..={n_layers}")));
            }
        }
        Ok(())
    }

    pub fn layer_active(&self, layer: usize) -> bool {
        self.active_layers.as_ref().is_none_or(|s| s.contains(&layer))
    }

    /// The configured layer set, resolved against `n_layers`.
    pub fn layers(&self, n_layers: usize) -> Vec<usize> {
        (1..=n_layers).filter(|l| self.layer_active(*l)).collect()
    }

    pub fn with_alpha(&self, alpha: f64) -> SteeringConfig {
        SteeringConfig { alpha, ..self.clone() }
    }

    pub fn with_layers(&self, layers: impl IntoIterator<Item = usize>) -> SteeringConfig {
        SteeringConfig {
            active_layers: Some(layers.into_iter().collect()),
            ..self.clone()
        }
    }
}

pub(crate) fn norm_f64<F: Real>(v: &[F]) -> f64 {
    v.iter().map(|x| x.widen() * x.widen()).sum::<f64>().sqrt()
}

fn check_len<F>(expected: usize, v: &[F]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::ShapeMismatch {
            expected,
            found: v.len(),
        });
    }
    Ok(())
}

/// `v / ‖v‖`, or `None` when the norm is below `epsilon`.
pub(crate) fn unit<F: Real>(v: &[F], epsilon: f64) -> Option<Vec<F>> {
    let n = norm_f64(v);
    if n < epsilon || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|x| F::of(x.widen() / n)).collect())
}

/// Rescale `h_hat` in place so its norm equals `target_norm`; a zero target
/// norm (or a zero `h_hat`) yields the zero vector.
pub(crate) fn restore_norm<F: Real>(h_hat: &mut [F], target_norm: f64) {
    let n = norm_f64(h_hat);
    if target_norm == 0.0 || n == 0.0 {
        h_hat.iter_mut().for_each(|x| *x = F::zero());
        return;
    }
    let s = target_norm / n;
    h_hat.iter_mut().for_each(|x| *x = F::of(x.widen() * s));
}

/// `h += alpha * unit`, then optionally restore the original norm. The one
/// code path shared by every unsupervised steering variant.
pub(crate) fn apply_unit<F: Real>(h: &mut [F], unit: &[F], alpha: F, norm_restore: bool) {
    let before = if norm_restore { norm_f64(h) } else { 0.0 };
    for (x, u) in h.iter_mut().zip(unit) {
        *x = *x + alpha * *u;
    }
    if norm_restore {
        restore_norm(h, before);
    }
}

/// `h + alpha * r / ‖r‖`, optionally rescaled to `‖h‖`.
pub fn steer_mono<F: Real>(h: &[F], r: &[F], alpha: F, norm_restore: bool, epsilon: f64) -> Result<Vec<F>> {
    check_len(h.len(), r)?;
    let u = unit(r, epsilon).ok_or(Error::NoLanguageSignal)?;
    let mut out = h.to_vec();
    apply_unit(&mut out, &u, alpha, norm_restore);
    Ok(out)
}

/// `h + alpha * (r_t - r_s) / ‖r_t - r_s‖`, optionally rescaled to `‖h‖`.
pub fn steer_cross<F: Real>(
    h: &[F],
    r_target: &[F],
    r_source: &[F],
    alpha: F,
    norm_restore: bool,
    epsilon: f64,
) -> Result<Vec<F>> {
    check_len(h.len(), r_target)?;
    check_len(h.len(), r_source)?;
    let diff: Vec<F> = r_target.iter().zip(r_source).map(|(t, s)| *t - *s).collect();
    let u = unit(&diff, epsilon).ok_or(Error::DegenerateDirection)?;
    let mut out = h.to_vec();
    apply_unit(&mut out, &u, alpha, norm_restore);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mono_examples() {
        assert_eq!(
            steer_mono(&[0.0, 0.0], &[3.0, 4.0], 1.0f64, false, 1e-8).unwrap(),
            vec![0.6, 0.8]
        );
        assert_eq!(
            steer_mono(&[1.0, 1.0], &[0.0, 2.0], 0.5f64, false, 1e-8).unwrap(),
            vec![1.0, 1.5]
        );
        let r = steer_mono(&[1.0, 1.0], &[0.0, 2.0], 0.5f64, true, 1e-8).unwrap();
        let s = 2f64.sqrt() / 3.25f64.sqrt();
        assert!((r[0] - s).abs() < 1e-12 && (r[1] - 1.5 * s).abs() < 1e-12);
        assert!((r[0] - 0.78446).abs() < 1e-5 && (r[1] - 1.17670).abs() < 1e-5);
        assert!(matches!(
            steer_mono(&[1.0f32], &[0.0], 1.0, false, 1e-8),
            Err(Error::NoLanguageSignal)
        ));
    }

    #[test]
    fn cross_examples() {
        let r = steer_cross(&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], 1.0f64, false, 1e-8).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((r[0] - s).abs() < 1e-5 && (r[1] + s).abs() < 1e-5);
        assert!(matches!(
            steer_cross(&[1.0f32, 2.0], &[1.0, 1.0], &[1.0, 1.0], 1.0, false, 1e-8),
            Err(Error::DegenerateDirection)
        ));
        for nr in [false, true] {
            let h = [0.3f32, -1.25, 4.0];
            assert_eq!(
                steer_cross(&h, &[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], 0.0, nr, 1e-8).unwrap(),
                h.to_vec()
            );
        }
    }

    #[test]
    fn zero_h_with_norm_restore_is_zero() {
        let r = steer_mono(&[0.0f32, 0.0, 0.0], &[1.0, 2.0, 3.0], 2.0, true, 1e-8).unwrap();
        assert_eq!(r, vec![0.0; 3]);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(
            steer_mono(&[1.0f32, 2.0], &[1.0], 1.0, false, 1e-8),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_json_is_flat() {
        let c = SteeringConfig::default().with_layers([1, 3]);
        let v: serde_json::Value = serde_json::to_value(&c).unwrap();
        for k in [
            "mode",
            "alpha",
            "beta",
            "norm_restore",
            "active_layers",
            "exclude_first_token",
            "epsilon",
        ] {
            assert!(v.get(k).is_some(), "{k}");
        }
        assert_eq!(v["active_layers"], serde_json::json!([1, 3]));
        let back: SteeringConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn config_validation() {
        let c = SteeringConfig::default();
        assert!(c.validate(4).is_ok());
        assert!(c.with_layers([0]).validate(4).is_err());
        assert!(c.with_layers([5]).validate(4).is_err());
        assert!(c.with_alpha(f64::NAN).validate(4).is_err());
        assert!(SteeringConfig { beta: 1.5, ..c.clone() }.validate(4).is_err());
        assert_eq!(c.with_layers([2, 4]).layers(4), vec![2, 4]);
        assert_eq!(c.layers(3), vec![1, 2, 3]);
    }

    #[test]
    fn presets_exist_for_reported_models() {
        let p = SteeringConfig::preset("llama-3.1", "cross").unwrap();
        assert_eq!((p.alpha, p.norm_restore), (0.2, true));
        let g = SteeringConfig::preset("gemma-2", "cross").unwrap();
        assert_eq!((g.alpha, g.norm_restore), (2.0, false));
        assert!(SteeringConfig::preset("gpt-2", "cross").is_none());
    }
}
