use super::learned::{LearnedHook, LearnedSteering, RepresentationTable};
use super::lsi::{LsiArtifacts, LsiHook};
use super::{apply_unit, unit, SteeringConfig, SteeringMode};
use crate::error::{Error, Result};
use crate::model::LayerHook;
use crate::numeric::Real;
use crate::vectors::{LanguageVectorBank, PositionalBank};

/// Anything a steering hook can be built from.
#[derive(Clone, Copy)]
pub enum SteeringArtifact<'a> {
    Bank(&'a LanguageVectorBank),
    Positional(&'a PositionalBank),
    Lsi(&'a LsiArtifacts),
    /// Learned factors plus the representations they were trained with.
    /// Strength, `beta` and norm restoration come from the factors.
    Learned {
        reps: &'a RepresentationTable,
        params: &'a LearnedSteering,
    },
}

/// Adds a fixed unit direction per layer, `h + alpha * u`, with optional norm
/// restoration. Serves monolingual, cross and steering-only modes.
#[derive(Debug, Clone)]
pub struct UnsupervisedHook<F: Real = f32> {
    units: Vec<Option<Vec<F>>>,
    alpha: F,
    norm_restore: bool,
    exclude_first: bool,
}

impl<F: Real> UnsupervisedHook<F> {
    /// `targets[l - 1]` and `sources[l - 1]` are representations at layer
    /// `l`; `sources = None` means monolingual steering.
    pub fn new(targets: &[Vec<F>], sources: Option<&[Vec<F>]>, config: &SteeringConfig) -> Result<Self> {
        let mut units = Vec::with_capacity(targets.len());
        for (i, t) in targets.iter().enumerate() {
            if !config.layer_active(i + 1) {
                units.push(None);
                continue;
            }
            let u = match sources {
                None => unit(t, config.epsilon).ok_or(Error::NoLanguageSignal)?,
                Some(s) => {
                    let diff: Vec<F> = t.iter().zip(&s[i]).map(|(a, b)| *a - *b).collect();
                    unit(&diff, config.epsilon).ok_or(Error::DegenerateDirection)?
                }
            };
            units.push(Some(u));
        }
        Ok(UnsupervisedHook {
            units,
            alpha: F::of(config.alpha),
            norm_restore: config.norm_restore,
            exclude_first: config.exclude_first_token,
        })
    }
}

impl<F: Real> LayerHook<F> for UnsupervisedHook<F> {
    fn touches(&self, layer: usize) -> bool {
        self.units.get(layer.wrapping_sub(1)).is_some_and(|u| u.is_some())
    }

    fn rewrite(&self, layer: usize, position: usize, h: &mut [F]) {
        if self.exclude_first && position == 0 {
            return;
        }
        if let Some(Some(u)) = self.units.get(layer - 1) {
            apply_unit(h, u, self.alpha, self.norm_restore);
        }
    }
}

/// Unsupervised steering with one direction per layer and position bucket.
#[derive(Debug, Clone)]
pub struct PositionalHook {
    /// `[layer - 1][bucket]`.
    units: Vec<Option<Vec<Vec<f32>>>>,
    k: usize,
    alpha: f32,
    norm_restore: bool,
    exclude_first: bool,
}

impl LayerHook<f32> for PositionalHook {
    fn touches(&self, layer: usize) -> bool {
        self.units.get(layer.wrapping_sub(1)).is_some_and(|u| u.is_some())
    }

    fn rewrite(&self, layer: usize, position: usize, h: &mut [f32]) {
        if position == 0 && self.exclude_first {
            return;
        }
        if let Some(Some(per_bucket)) = self.units.get(layer - 1) {
            let b = position.saturating_sub(1).min(self.k - 1);
            apply_unit(h, &per_bucket[b], self.alpha, self.norm_restore);
        }
    }
}

pub enum SteeringHook<'a> {
    Unsupervised(UnsupervisedHook),
    Positional(PositionalHook),
    Lsi(LsiHook),
    Learned(LearnedHook<'a>),
}

impl LayerHook<f32> for SteeringHook<'_> {
    fn touches(&self, layer: usize) -> bool {
        match self {
            SteeringHook::Unsupervised(h) => h.touches(layer),
            SteeringHook::Positional(h) => h.touches(layer),
            SteeringHook::Lsi(h) => h.touches(layer),
            SteeringHook::Learned(h) => h.touches(layer),
        }
    }

    fn rewrite(&self, layer: usize, position: usize, x: &mut [f32]) {
        match self {
            SteeringHook::Unsupervised(h) => h.rewrite(layer, position, x),
            SteeringHook::Positional(h) => h.rewrite(layer, position, x),
            SteeringHook::Lsi(h) => h.rewrite(layer, position, x),
            SteeringHook::Learned(h) => h.rewrite(layer, position, x),
        }
    }
}

/// Resolve the language pair for `mode`: monolingual steering takes no
/// distinct source, the other modes require one.
fn resolve_source<'s>(mode: SteeringMode, target: &str, source: Option<&'s str>) -> Result<Option<&'s str>> {
    match (mode, source) {
        (SteeringMode::Mono, None) => Ok(None),
        (SteeringMode::Mono, Some(s)) if s == target => Ok(None),
        (SteeringMode::Mono, Some(s)) => Err(Error::ModeMismatch(format!(
            "monolingual steering towards {target} was given a different source {s}"
        ))),
        (_, Some(s)) => Ok(Some(s)),
        (m, None) => Err(Error::ModeMismatch(format!("{m:?} steering needs a source language"))),
    }
}

/// Build the hook that steers generation towards `target`, away from
/// `source` where the mode uses one.
pub fn make_hook<'a>(
    artifact: SteeringArtifact<'a>,
    config: &SteeringConfig,
    target: &str,
    source: Option<&str>,
) -> Result<SteeringHook<'a>> {
    match artifact {
        SteeringArtifact::Bank(bank) => {
            config.validate(bank.n_layers())?;
            let targets = bank.representations(target)?;
            let source = resolve_source(config.mode, target, source)?;
            let sources = source.map(|s| bank.representations(s)).transpose()?;
            Ok(SteeringHook::Unsupervised(UnsupervisedHook::new(
                &targets,
                sources.as_deref(),
                config,
            )?))
        }
        SteeringArtifact::Positional(bank) => {
            config.validate(bank.n_layers())?;
            let source = resolve_source(config.mode, target, source)?;
            let mut units = Vec::with_capacity(bank.n_layers());
            for l in 1..=bank.n_layers() {
                if !config.layer_active(l) {
                    units.push(None);
                    continue;
                }
                let mut per_bucket = Vec::with_capacity(bank.k());
                for b in 0..bank.k() {
                    let t = bank.representation(target, l, b)?;
                    let u = match source {
                        None => unit(&t, config.epsilon).ok_or(Error::NoLanguageSignal)?,
                        Some(s) => {
                            let s = bank.representation(s, l, b)?;
                            let diff: Vec<f32> = t.iter().zip(&s).map(|(a, b)| a - b).collect();
                            unit(&diff, config.epsilon).ok_or(Error::DegenerateDirection)?
                        }
                    };
                    per_bucket.push(u);
                }
                units.push(Some(per_bucket));
            }
            Ok(SteeringHook::Positional(PositionalHook {
                units,
                k: bank.k(),
                alpha: config.alpha as f32,
                norm_restore: config.norm_restore,
                exclude_first: config.exclude_first_token,
            }))
        }
        SteeringArtifact::Lsi(art) => {
            config.validate(art.n_layers)?;
            Ok(SteeringHook::Lsi(LsiHook::new(art, target, config)?))
        }
        SteeringArtifact::Learned { reps, params } => {
            config.validate(params.n_layers)?;
            let source = resolve_source(config.mode, target, source)?.unwrap_or(target);
            Ok(SteeringHook::Learned(LearnedHook::new(
                params,
                reps.get(target)?,
                reps.get(source)?,
                config,
                None,
            )?))
        }
    }
}
