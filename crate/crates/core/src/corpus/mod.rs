//! Multi-parallel corpora, the language registry, and the synthetic corpus
//! generator used for desk-scale experiments.

mod script;
mod synthetic;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

pub use script::{majority_script, Script};
pub use synthetic::{generate_synthetic_corpus, MarkovChain, SyntheticCorpus, SyntheticSpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LanguageTag {
    pub code: String,
    pub script: Script,
}

impl LanguageTag {
    pub fn new(code: impl Into<String>, script: Script) -> Result<Self> {
        let code = code.into();
        if code.trim().is_empty() {
            return Err(Error::InvalidLanguage("empty language code".into()));
        }
        if let Script::Synthetic { lo, hi } = script {
            if hi <= lo {
                return Err(Error::InvalidLanguage(format!(
                    "{code}: synthetic range [{lo}, {hi}) is empty"
                )));
            }
        }
        Ok(LanguageTag { code, script })
    }

    pub fn owns_token(&self, token: u32) -> bool {
        self.script
            .token_range()
            .is_some_and(|(lo, hi)| (lo..hi).contains(&token))
    }
}

/// One corpus entry: raw text, or token ids for corpora that bypass the
/// tokenizer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Text(String),
    Tokens(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellKind {
    Text,
    Tokens,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Text => "text",
            CellKind::Tokens => "tokens",
        }
    }
}

impl Cell {
    pub fn kind(&self) -> CellKind {
        match self {
            Cell::Text(_) => CellKind::Text,
            Cell::Tokens(_) => CellKind::Tokens,
        }
    }

    fn is_blank(&self) -> bool {
        match self {
            Cell::Text(t) => t.trim().is_empty(),
            Cell::Tokens(t) => t.is_empty(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "tsv" => Ok(CorpusFormat::Tsv),
            other => Err(Error::InvalidConfig(format!("unknown corpus format {other:?}"))),
        }
    }
}

/// Strictly multi-parallel corpus: every aligned sample id has exactly one
/// cell per declared language, and all cells share one kind.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    languages: Vec<LanguageTag>,
    ids: Vec<String>,
    // rows[sample][language], aligned with `ids` and `languages`
    rows: Vec<Vec<Cell>>,
    kind: CellKind,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    lang: String,
    text: Cell,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    script: Option<Script>,
}

impl ParallelCorpus {
    /// Build from `(sample_id, code, cell)` triples. Languages and ids are
    /// kept in first-seen order.
    pub fn from_records(
        languages: Vec<LanguageTag>,
        records: impl IntoIterator<Item = (String, String, Cell)>,
    ) -> Result<Self> {
        let mut seen = HashMap::new();
        for (i, tag) in languages.iter().enumerate() {
            if seen.insert(tag.code.clone(), i).is_some() {
                return Err(Error::DuplicateLanguage(tag.code.clone()));
            }
        }
        let mut ids: Vec<String> = Vec::new();
        let mut id_index: HashMap<String, usize> = HashMap::new();
        let mut cells: Vec<Vec<Option<Cell>>> = Vec::new();
        let mut kind = None;
        for (n, (id, code, cell)) in records.into_iter().enumerate() {
            let li = *seen.get(&code).ok_or_else(|| Error::UnknownLanguage(code.clone()))?;
            if cell.is_blank() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("empty entry for ({id}, {code})"),
                });
            }
            match kind {
                None => kind = Some(cell.kind()),
                Some(k) if k != cell.kind() => {
                    return Err(Error::CellKindMismatch {
                        expected: k.name(),
                        found: cell.kind().name(),
                    })
                }
                _ => {}
            }
            let si = *id_index.entry(id.clone()).or_insert_with(|| {
                ids.push(id.clone());
                cells.push(vec![None; languages.len()]);
                ids.len() - 1
            });
            if cells[si][li].is_some() {
                return Err(Error::Parse {
                    line: n + 1,
                    message: format!("duplicate entry for ({id}, {code})"),
                });
            }
            cells[si][li] = Some(cell);
        }
        let mut rows = Vec::with_capacity(cells.len());
        for (id, row) in ids.iter().zip(cells) {
            let mut full = Vec::with_capacity(row.len());
            for (tag, cell) in languages.iter().zip(row) {
                full.push(cell.ok_or_else(|| Error::MissingTranslation {
                    sample_id: id.clone(),
                    code: tag.code.clone(),
                })?);
            }
            rows.push(full);
        }
        Ok(ParallelCorpus {
            languages,
            ids,
            rows,
            kind: kind.unwrap_or(CellKind::Tokens),
        })
    }

    pub fn languages(&self) -> &[LanguageTag] {
        &self.languages
    }

    pub fn language(&self, code: &str) -> Option<&LanguageTag> {
        self.languages.iter().find(|t| t.code == code)
    }

    pub fn alignment(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn cell(&self, sample_id: &str, code: &str) -> Option<&Cell> {
        let si = self.ids.iter().position(|i| i == sample_id)?;
        let li = self.languages.iter().position(|t| t.code == code)?;
        Some(&self.rows[si][li])
    }

    /// The monolingual portion for `code`, in alignment order.
    pub fn slice(&self, code: &str) -> Result<Vec<(&str, &Cell)>> {
        let li = self
            .languages
            .iter()
            .position(|t| t.code == code)
            .ok_or_else(|| Error::UnknownLanguage(code.into()))?;
        Ok(self
            .ids
            .iter()
            .zip(&self.rows)
            .map(|(id, row)| (id.as_str(), &row[li]))
            .collect())
    }

    /// Keep only the listed sample ids (in corpus order).
    pub fn select(&self, keep: impl Fn(usize, &str) -> bool) -> ParallelCorpus {
        let (ids, rows) = self
            .ids
            .iter()
            .zip(&self.rows)
            .enumerate()
            .filter(|(i, (id, _))| keep(*i, id))
            .map(|(_, (id, row))| (id.clone(), row.clone()))
            .unzip();
        ParallelCorpus {
            languages: self.languages.clone(),
            ids,
            rows,
            kind: self.kind,
        }
    }

    /// Restrict to a subset of languages, in the given order.
    pub fn with_languages(&self, codes: &[&str]) -> Result<ParallelCorpus> {
        let idx = codes
            .iter()
            .map(|c| {
                self.languages
                    .iter()
                    .position(|t| t.code == *c)
                    .ok_or_else(|| Error::UnknownLanguage((*c).into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ParallelCorpus {
            languages: idx.iter().map(|&i| self.languages[i].clone()).collect(),
            ids: self.ids.clone(),
            rows: self
                .rows
                .iter()
                .map(|row| idx.iter().map(|&i| row[i].clone()).collect())
                .collect(),
            kind: self.kind,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, row) in self.ids.iter().zip(&self.rows) {
            for (tag, cell) in self.languages.iter().zip(row) {
                let rec = Record {
                    id: id.clone(),
                    lang: tag.code.clone(),
                    text: cell.clone(),
                    script: Some(tag.script),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }

    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        for (id, row) in self.ids.iter().zip(&self.rows) {
            for (tag, cell) in self.languages.iter().zip(row) {
                let Cell::Text(text) = cell else {
                    return Err(Error::CellKindMismatch {
                        expected: "text",
                        found: "tokens",
                    });
                };
                if text.contains(['\t', '\n']) {
                    return Err(Error::InvalidConfig(format!(
                        "({id}, {}) contains a tab or newline and cannot be written as TSV",
                        tag.code
                    )));
                }
                writeln!(out, "{id}\t{}\t{text}", tag.code).unwrap();
            }
        }
        Ok(out)
    }

    /// SHA-256 of the canonical JSONL rendering.
    pub fn content_hash(&self) -> [u8; 32] {
        fsutil::sha256(self.to_jsonl().as_bytes())
    }
}

pub fn parse_corpus(text: &str, format: CorpusFormat) -> Result<ParallelCorpus> {
    let mut records = Vec::new();
    let mut declared: Vec<(String, Option<Script>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match format {
            CorpusFormat::Jsonl => serde_json::from_str::<Record>(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
            CorpusFormat::Tsv => {
                let mut cols = line.splitn(3, '\t');
                match (cols.next(), cols.next(), cols.next()) {
                    (Some(id), Some(lang), Some(text)) => Record {
                        id: id.to_string(),
                        lang: lang.to_string(),
                        text: Cell::Text(text.to_string()),
                        script: None,
                    },
                    _ => {
                        return Err(Error::Parse {
                            line: line_no,
                            message: "expected three tab-separated columns".into(),
                        })
                    }
                }
            }
        };
        if rec.id.is_empty() || rec.lang.is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty id or language".into(),
            });
        }
        if rec.text.is_blank() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("empty entry for ({}, {})", rec.id, rec.lang),
            });
        }
        match declared.iter_mut().find(|(c, _)| *c == rec.lang) {
            Some((_, s)) => match (*s, rec.script) {
                (Some(a), Some(b)) if a != b => {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("conflicting scripts for {}", rec.lang),
                    })
                }
                (None, Some(b)) => *s = Some(b),
                _ => {}
            },
            None => declared.push((rec.lang.clone(), rec.script)),
        }
        records.push((rec.id, rec.lang, rec.text));
    }

    let mut languages = Vec::with_capacity(declared.len());
    for (code, script) in declared {
        let script = match script {
            Some(s) => s,
            None => infer_script(&code, &records)?,
        };
        languages.push(LanguageTag::new(code, script)?);
    }
    ParallelCorpus::from_records(languages, records)
}

fn infer_script(code: &str, records: &[(String, String, Cell)]) -> Result<Script> {
    let cells = records.iter().filter(|(_, l, _)| l == code).map(|(_, _, c)| c);
    let mut text = String::new();
    let (mut lo, mut hi) = (u32::MAX, 0u32);
    for cell in cells {
        match cell {
            Cell::Text(t) => {
                text.push_str(t);
                text.push(' ');
            }
            Cell::Tokens(ts) => {
                for &t in ts {
                    lo = lo.min(t);
                    hi = hi.max(t + 1);
                }
            }
        }
    }
    if hi > lo {
        return Ok(Script::Synthetic { lo, hi });
    }
    Ok(majority_script(&text).map(|(s, _)| s).unwrap_or(Script::Latin))
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<ParallelCorpus> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 0,
        message: format!("file is not utf-8: {e}"),
    })?;
    parse_corpus(&text, format)
}

pub fn save_corpus(corpus: &ParallelCorpus, path: &Path, format: CorpusFormat) -> Result<()> {
    let body = match format {
        CorpusFormat::Jsonl => corpus.to_jsonl(),
        CorpusFormat::Tsv => corpus.to_tsv()?,
    };
    fsutil::write_atomic(path, body.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn jsonl(rows: &[(&str, &str, &str)]) -> String {
        rows.iter()
            .map(|(i, l, t)| format!("{{\"id\":\"{i}\",\"lang\":\"{l}\",\"text\":\"{t}\"}}\n"))
            .collect()
    }

    #[test]
    fn two_languages_three_ids() {
        let text = jsonl(&[
            ("1", "en", "one"),
            ("1", "de", "eins"),
            ("2", "en", "two"),
            ("2", "de", "zwei"),
            ("3", "en", "three"),
            ("3", "de", "drei"),
        ]);
        let c = parse_corpus(&text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.alignment().len(), 3);
        assert_eq!(c.languages().len(), 2);
        assert_eq!(c.languages()[0].script, Script::Latin);
        assert_eq!(c.cell("2", "de"), Some(&Cell::Text("zwei".into())));
    }

    #[test]
    fn missing_record_is_reported() {
        let text = jsonl(&[
            ("1", "en", "one"),
            ("1", "de", "eins"),
            ("2", "en", "two"),
            ("3", "en", "three"),
            ("3", "de", "drei"),
        ]);
        match parse_corpus(&text, CorpusFormat::Jsonl) {
            Err(Error::MissingTranslation { sample_id, code }) => {
                assert_eq!(sample_id, "2");
                assert_eq!(code, "de");
            }
            other => panic!("expected MissingTranslation, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_line_number() {
        let text = format!("{}not json\n", jsonl(&[("1", "en", "one")]));
        match parse_corpus(&text, CorpusFormat::Jsonl) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse_corpus("1\ten\n", CorpusFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn blank_text_rejected() {
        let text = jsonl(&[("1", "en", "  ")]);
        assert!(matches!(
            parse_corpus(&text, CorpusFormat::Jsonl),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn mixed_cell_kinds_rejected() {
        let text = "{\"id\":\"1\",\"lang\":\"a\",\"text\":\"x\"}\n{\"id\":\"1\",\"lang\":\"b\",\"text\":[1,2]}\n";
        assert!(matches!(
            parse_corpus(text, CorpusFormat::Jsonl),
            Err(Error::CellKindMismatch { .. })
        ));
    }

    #[test]
    fn token_cells_infer_synthetic_range() {
        let text = "{\"id\":\"1\",\"lang\":\"a\",\"text\":[3,4]}\n{\"id\":\"1\",\"lang\":\"b\",\"text\":[10,12]}\n";
        let c = parse_corpus(text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.language("b").unwrap().script, Script::Synthetic { lo: 10, hi: 13 });
    }

    #[test]
    fn script_is_inferred_for_text() {
        let text = jsonl(&[("1", "ru", "Привет мир"), ("1", "en", "hello world")]);
        let c = parse_corpus(&text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.language("ru").unwrap().script, Script::Cyrillic);
        assert_eq!(c.language("en").unwrap().script, Script::Latin);
    }

    #[test]
    fn jsonl_and_tsv_roundtrip() {
        let text = jsonl(&[
            ("a", "en", "hi there"),
            ("a", "fr", "salut"),
            ("b", "en", "bye"),
            ("b", "fr", "au revoir"),
        ]);
        let c = parse_corpus(&text, CorpusFormat::Jsonl).unwrap();
        assert_eq!(parse_corpus(&c.to_jsonl(), CorpusFormat::Jsonl).unwrap(), c);
        assert_eq!(parse_corpus(&c.to_tsv().unwrap(), CorpusFormat::Tsv).unwrap(), c);
    }

    #[test]
    fn empty_language_code_rejected() {
        assert!(LanguageTag::new("", Script::Latin).is_err());
        assert!(LanguageTag::new("x", Script::Synthetic { lo: 4, hi: 4 }).is_err());
    }
}
