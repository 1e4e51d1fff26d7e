//! Language identification, pass-rate metrics and evaluation runs.

mod ngram;
mod run;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::corpus::{LanguageTag, Script};
use crate::error::{Error, Result};
use crate::model::detokenize;

pub use ngram::CharNgramModel;
pub use run::{
    diff_reports, layer_ablation, run_eval, steer_only_eval, synthetic_prompts, AblationRow, AblationTable, CellDelta,
    EvalPrompt, EvalReport, EvalRun,
};

/// Something to identify: decoded text or raw token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Utterance<'a> {
    Text(&'a str),
    Tokens(&'a [u32]),
}

/// A generated response. Token responses are a single line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Text(String),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum LanguageIdentifier {
    /// Exact on synthetic corpora: each language owns a token range.
    TokenRange { languages: Vec<LanguageTag> },
    /// Share of letters in each language's script.
    ScriptHeuristic { languages: Vec<LanguageTag> },
    CharNgram {
        languages: Vec<LanguageTag>,
        model: CharNgramModel,
    },
}

impl LanguageIdentifier {
    pub fn languages(&self) -> &[LanguageTag] {
        match self {
            LanguageIdentifier::TokenRange { languages }
            | LanguageIdentifier::ScriptHeuristic { languages }
            | LanguageIdentifier::CharNgram { languages, .. } => languages,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LanguageIdentifier::TokenRange { .. } => "token_range",
            LanguageIdentifier::ScriptHeuristic { .. } => "script_heuristic",
            LanguageIdentifier::CharNgram { .. } => "char_ngram",
        }
    }

    pub fn language(&self, code: &str) -> Result<&LanguageTag> {
        self.languages()
            .iter()
            .find(|t| t.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.into()))
    }

    /// Order-3 character model trained on `(code, line)` pairs.
    pub fn char_ngram<'a>(
        languages: Vec<LanguageTag>,
        lines: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let model = CharNgramModel::train(lines, 3)?;
        for code in model.codes() {
            if !languages.iter().any(|t| t.code == code) {
                return Err(Error::UnknownLanguage(code.into()));
            }
        }
        Ok(LanguageIdentifier::CharNgram { languages, model })
    }
}

/// Pick the highest score; equal scores go to the smallest code.
fn best<'a>(scores: impl IntoIterator<Item = (&'a str, f64)>) -> Option<(&'a str, f64)> {
    let mut out: Option<(&str, f64)> = None;
    for (c, s) in scores {
        out = match out {
            None => Some((c, s)),
            Some((bc, bs)) => match s.partial_cmp(&bs) {
                Some(Ordering::Greater) => Some((c, s)),
                Some(Ordering::Equal) if c < bc => Some((c, s)),
                _ => Some((bc, bs)),
            },
        };
    }
    out
}

/// Most likely language of `input` and a confidence in `[0, 1]`: the share
/// of tokens or letters for the counting strategies, the posterior for the
/// n-gram model.
pub fn identify_language(identifier: &LanguageIdentifier, input: Utterance<'_>) -> Result<(String, f64)> {
    let is_empty = match input {
        Utterance::Text(t) => t.trim().is_empty(),
        Utterance::Tokens(t) => t.is_empty(),
    };
    if is_empty {
        return Err(Error::EmptyInput);
    }
    let text = || match input {
        Utterance::Text(t) => t.to_string(),
        Utterance::Tokens(t) => detokenize(t),
    };
    match identifier {
        LanguageIdentifier::TokenRange { languages } => {
            let Utterance::Tokens(tokens) = input else {
                return Err(Error::CellKindMismatch {
                    expected: "tokens",
                    found: "text",
                });
            };
            let counts = languages.iter().map(|t| {
                (
                    t.code.as_str(),
                    tokens.iter().filter(|&&x| t.owns_token(x)).count() as f64,
                )
            });
            let (code, n) = best(counts).ok_or(Error::NoLanguageSignal)?;
            if n == 0.0 {
                return Err(Error::NoLanguageSignal);
            }
            Ok((code.to_string(), n / tokens.len() as f64))
        }
        LanguageIdentifier::ScriptHeuristic { languages } => {
            let text = text();
            let letters: Vec<Script> = text.chars().filter_map(Script::of_char).collect();
            if letters.is_empty() {
                return Err(Error::NoLanguageSignal);
            }
            let counts = languages.iter().map(|t| {
                (
                    t.code.as_str(),
                    letters.iter().filter(|s| t.script.accepts(**s)).count() as f64,
                )
            });
            let (code, n) = best(counts).ok_or(Error::NoLanguageSignal)?;
            if n == 0.0 {
                return Err(Error::NoLanguageSignal);
            }
            Ok((code.to_string(), n / letters.len() as f64))
        }
        LanguageIdentifier::CharNgram { model, .. } => {
            let scores = model.scores(&text());
            let (code, top) = best(scores.iter().copied()).ok_or(Error::NoLanguageSignal)?;
            let z: f64 = scores.iter().map(|(_, s)| (s - top).exp()).sum();
            Ok((code.to_string(), 1.0 / z))
        }
    }
}

/// Exact count of passing units; `value()` is `passed / total`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PassRate {
    pub passed: u64,
    pub total: u64,
}

impl PassRate {
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.passed as f64 / self.total as f64)
    }

    /// Equality of `passed / total` with `num / den`, by cross-multiplication.
    pub fn equals_ratio(&self, num: u64, den: u64) -> bool {
        self.passed as u128 * den as u128 == num as u128 * self.total as u128 && (self.total == 0) == (den == 0)
    }

    fn add(&mut self, pass: bool) {
        self.total += 1;
        self.passed += pass as u64;
    }
}

/// Non-empty, trimmed lines of a response; a response with none yields one
/// empty line that fails identification.
fn lines(response: &Response) -> Vec<Utterance<'_>> {
    match response {
        Response::Tokens(t) => vec![Utterance::Tokens(t)],
        Response::Text(s) => {
            let ls: Vec<Utterance<'_>> = s
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(Utterance::Text)
                .collect();
            if ls.is_empty() {
                vec![Utterance::Text("")]
            } else {
                ls
            }
        }
    }
}

fn line_passes(identifier: &LanguageIdentifier, line: Utterance<'_>, expected: &str) -> Result<bool> {
    match identify_language(identifier, line) {
        Ok((code, _)) => Ok(code == expected),
        Err(Error::EmptyInput | Error::NoLanguageSignal) => Ok(false),
        Err(e) => Err(e),
    }
}

/// Lines identified as `expected` over all non-empty lines, pooled across
/// responses.
pub fn line_pass_rate(responses: &[Response], expected: &str, identifier: &LanguageIdentifier) -> Result<PassRate> {
    identifier.language(expected)?;
    let mut rate = PassRate { passed: 0, total: 0 };
    for r in responses {
        for line in lines(r) {
            rate.add(line_passes(identifier, line, expected)?);
        }
    }
    Ok(rate)
}

/// Line-level rate averaged per response rather than pooled.
pub fn line_pass_rate_per_response(
    responses: &[Response],
    expected: &str,
    identifier: &LanguageIdentifier,
) -> Result<Option<f64>> {
    if responses.is_empty() {
        return Ok(None);
    }
    let mut sum = 0.0;
    for r in responses {
        let rate = line_pass_rate(std::slice::from_ref(r), expected, identifier)?;
        sum += rate.value().unwrap_or(0.0);
    }
    Ok(Some(sum / responses.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordPassRate {
    pub rate: Option<PassRate>,
    /// Why `rate` is absent.
    pub reason: Option<String>,
}

impl WordPassRate {
    fn null(reason: &str) -> Self {
        WordPassRate {
            rate: None,
            reason: Some(reason.into()),
        }
    }

    pub fn value(&self) -> Option<f64> {
        self.rate.and_then(|r| r.value())
    }
}

/// Whether more than half of a word's letters belong to `script`; `None` for
/// words without letters.
fn word_in_script(word: &str, script: Script) -> Option<bool> {
    let letters: Vec<Script> = word.chars().filter_map(Script::of_char).collect();
    if letters.is_empty() {
        return None;
    }
    let hits = letters.iter().filter(|s| script.accepts(**s)).count();
    Some(2 * hits > letters.len())
}

/// Share of words in the expected script within the lines that passed
/// [`line_pass_rate`]. Null for Latin-script targets and when no line passed.
/// For token responses each token is a word.
pub fn word_pass_rate(responses: &[Response], expected: &str, identifier: &LanguageIdentifier) -> Result<WordPassRate> {
    let tag = identifier.language(expected)?.clone();
    if tag.script.is_latin() {
        return Ok(WordPassRate::null("latin script"));
    }
    let mut rate = PassRate { passed: 0, total: 0 };
    let mut passing_lines = 0;
    for r in responses {
        for line in lines(r) {
            if !line_passes(identifier, line, expected)? {
                continue;
            }
            passing_lines += 1;
            match line {
                Utterance::Tokens(ts) => ts.iter().for_each(|t| rate.add(tag.owns_token(*t))),
                Utterance::Text(s) => s
                    .split_whitespace()
                    .filter_map(|w| word_in_script(w, tag.script))
                    .for_each(|ok| rate.add(ok)),
            }
        }
    }
    if passing_lines == 0 {
        return Ok(WordPassRate::null("no correct lines"));
    }
    if rate.total == 0 {
        return Ok(WordPassRate::null("no words"));
    }
    Ok(WordPassRate {
        rate: Some(rate),
        reason: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags() -> Vec<LanguageTag> {
        ["en", "es", "ja", "ru"]
            .iter()
            .zip([Script::Latin, Script::Latin, Script::HiraganaKatakana, Script::Cyrillic])
            .map(|(c, s)| LanguageTag::new(*c, s).unwrap())
            .collect()
    }

    /// Identifies a line by a fixed lookup table, standing in for a perfect
    /// classifier.
    fn oracle() -> LanguageIdentifier {
        let lines: &[(&str, &str)] = &[
            ("es", "hola mundo"),
            ("es", "buenos dias amigo"),
            ("es", "que tal estas hoy"),
            ("en", "hello world"),
            ("en", "good morning friend"),
            ("en", "how are you today"),
            ("ja", "こんにちは"),
            ("ja", "おはよう"),
            ("ru", "привет мир"),
        ];
        LanguageIdentifier::char_ngram(tags(), lines.iter().copied()).unwrap()
    }

    fn text(lines: &[&str]) -> Response {
        Response::Text(lines.join("\n"))
    }

    #[test]
    fn lpr_examples() {
        let id = oracle();
        let r = line_pass_rate(&[text(&["Hola mundo", "Hello world"])], "es", &id).unwrap();
        assert_eq!(r, PassRate { passed: 1, total: 2 });
        let r = line_pass_rate(&[text(&["hola mundo", "buenos dias amigo"])], "es", &id).unwrap();
        assert_eq!(r.value(), Some(1.0));
        // 2/1/1 lines with three correct: pooled 3/4, per-response mean 5/6.
        let rs = [
            text(&["hola mundo", "hello world"]),
            text(&["que tal estas hoy"]),
            text(&["buenos dias amigo"]),
        ];
        let r = line_pass_rate(&rs, "es", &id).unwrap();
        assert!(r.equals_ratio(3, 4));
        let per = line_pass_rate_per_response(&rs, "es", &id).unwrap().unwrap();
        assert!((per - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_response_is_one_failing_line() {
        let id = oracle();
        let r = line_pass_rate(&[text(&["hola mundo"]), Response::Text(" \n ".into())], "es", &id).unwrap();
        assert_eq!(r, PassRate { passed: 1, total: 2 });
        assert!(matches!(line_pass_rate(&[], "xx", &id), Err(Error::UnknownLanguage(_))));
    }

    #[test]
    fn wpr_examples() {
        let id = LanguageIdentifier::ScriptHeuristic { languages: tags() };
        let no_latin = LanguageIdentifier::ScriptHeuristic {
            languages: tags()[2..].to_vec(),
        };
        let w = word_pass_rate(&[text(&["こんにちは world"])], "ja", &no_latin).unwrap();
        assert_eq!(w.rate, Some(PassRate { passed: 1, total: 2 }));
        let w = word_pass_rate(&[text(&["hola"])], "es", &id).unwrap();
        assert_eq!((w.rate, w.reason.as_deref()), (None, Some("latin script")));
        let w = word_pass_rate(&[text(&["hello world"])], "ja", &id).unwrap();
        assert_eq!((w.rate, w.reason.as_deref()), (None, Some("no correct lines")));
        // Punctuation-only words are outside the denominator.
        let w = word_pass_rate(&[text(&["привет , мир 42"])], "ru", &id).unwrap();
        assert_eq!(w.rate, Some(PassRate { passed: 2, total: 2 }));
    }

    #[test]
    fn wpr_ignores_failing_lines() {
        let id = LanguageIdentifier::ScriptHeuristic { languages: tags() };
        let a = word_pass_rate(&[text(&["привет мир", "hello there"])], "ru", &id).unwrap();
        let b = word_pass_rate(&[text(&["привет мир", "something else entirely"])], "ru", &id).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn token_range_identification() {
        let langs = vec![
            LanguageTag::new("a", Script::Synthetic { lo: 0, hi: 10 }).unwrap(),
            LanguageTag::new("b", Script::Synthetic { lo: 10, hi: 20 }).unwrap(),
        ];
        let id = LanguageIdentifier::TokenRange { languages: langs };
        assert_eq!(
            identify_language(&id, Utterance::Tokens(&[1, 2, 3])).unwrap(),
            ("a".into(), 1.0)
        );
        assert_eq!(
            identify_language(&id, Utterance::Tokens(&[11, 12, 13, 4])).unwrap(),
            ("b".into(), 0.75)
        );
        assert_eq!(identify_language(&id, Utterance::Tokens(&[1, 11])).unwrap().0, "a");
        assert!(matches!(
            identify_language(&id, Utterance::Tokens(&[])),
            Err(Error::EmptyInput)
        ));
        let r = word_pass_rate(&[Response::Tokens(vec![11, 12, 3])], "b", &id).unwrap();
        assert_eq!(r.rate, Some(PassRate { passed: 2, total: 3 }));
    }

    #[test]
    fn script_ties_go_to_smallest_code() {
        let id = LanguageIdentifier::ScriptHeuristic { languages: tags() };
        assert_eq!(
            identify_language(&id, Utterance::Text("hello")).unwrap(),
            ("en".into(), 1.0)
        );
        assert_eq!(identify_language(&id, Utterance::Text("日本")).unwrap().0, "ja");
        assert!(matches!(
            identify_language(&id, Utterance::Text("  ")),
            Err(Error::EmptyInput)
        ));
    }
}
