use serde::{Deserialize, Serialize};

/// Writing system of a language. `Synthetic` languages own a half-open
/// token-id range instead of a code-point table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Script {
    Latin,
    Cyrillic,
    Arabic,
    Devanagari,
    Han,
    HiraganaKatakana,
    Hangul,
    Thai,
    Hebrew,
    Bengali,
    Tamil,
    Synthetic { lo: u32, hi: u32 },
}

// Letter ranges per script. Kept deliberately coarse: combining marks that
// live inside a block count for that block.
const TABLE: &[(u32, u32, Script)] = &[
    (0x0041, 0x005A, Script::Latin),
    (0x0061, 0x007A, Script::Latin),
    (0x00C0, 0x024F, Script::Latin),
    (0x1E00, 0x1EFF, Script::Latin),
    (0x0400, 0x052F, Script::Cyrillic),
    (0x0590, 0x05FF, Script::Hebrew),
    (0x0600, 0x06FF, Script::Arabic),
    (0x0750, 0x077F, Script::Arabic),
    (0x08A0, 0x08FF, Script::Arabic),
    (0xFB50, 0xFDFF, Script::Arabic),
    (0xFE70, 0xFEFF, Script::Arabic),
    (0x0900, 0x097F, Script::Devanagari),
    (0x0980, 0x09FF, Script::Bengali),
    (0x0B80, 0x0BFF, Script::Tamil),
    (0x0E00, 0x0E7F, Script::Thai),
    (0x1100, 0x11FF, Script::Hangul),
    (0x3130, 0x318F, Script::Hangul),
    (0xAC00, 0xD7AF, Script::Hangul),
    (0x3040, 0x309F, Script::HiraganaKatakana),
    (0x30A0, 0x30FF, Script::HiraganaKatakana),
    (0x31F0, 0x31FF, Script::HiraganaKatakana),
    (0xFF66, 0xFF9F, Script::HiraganaKatakana),
    (0x3400, 0x4DBF, Script::Han),
    (0x4E00, 0x9FFF, Script::Han),
    (0xF900, 0xFAFF, Script::Han),
];

impl Script {
    /// Script of a single character, `None` for digits, punctuation,
    /// whitespace and anything outside the table.
    pub fn of_char(c: char) -> Option<Script> {
        let cp = c as u32;
        TABLE
            .iter()
            .find(|(lo, hi, _)| (*lo..=*hi).contains(&cp))
            .map(|(_, _, s)| *s)
    }

    /// Whether a character written in `found` counts as this script. Japanese
    /// text mixes kana with Han characters, so Han is accepted for kana.
    pub fn accepts(&self, found: Script) -> bool {
        match self {
            Script::HiraganaKatakana => {
                matches!(found, Script::HiraganaKatakana | Script::Han)
            }
            other => *other == found,
        }
    }

    pub fn is_latin(&self) -> bool {
        matches!(self, Script::Latin)
    }

    pub fn token_range(&self) -> Option<(u32, u32)> {
        match self {
            Script::Synthetic { lo, hi } => Some((*lo, *hi)),
            _ => None,
        }
    }

    pub(crate) fn to_byte(self) -> u8 {
        match self {
            Script::Latin => 0,
            Script::Cyrillic => 1,
            Script::Arabic => 2,
            Script::Devanagari => 3,
            Script::Han => 4,
            Script::HiraganaKatakana => 5,
            Script::Hangul => 6,
            Script::Thai => 7,
            Script::Hebrew => 8,
            Script::Bengali => 9,
            Script::Tamil => 10,
            Script::Synthetic { .. } => 11,
        }
    }

    pub(crate) fn from_byte(b: u8, lo: u32, hi: u32) -> Option<Script> {
        Some(match b {
            0 => Script::Latin,
            1 => Script::Cyrillic,
            2 => Script::Arabic,
            3 => Script::Devanagari,
            4 => Script::Han,
            5 => Script::HiraganaKatakana,
            6 => Script::Hangul,
            7 => Script::Thai,
            8 => Script::Hebrew,
            9 => Script::Bengali,
            10 => Script::Tamil,
            11 if hi > lo => Script::Synthetic { lo, hi },
            _ => return None,
        })
    }
}

/// Majority script among the letters of `text`; ties go to the script that
/// appears first in the text.
pub fn majority_script(text: &str) -> Option<(Script, f64)> {
    let mut counts: Vec<(Script, usize)> = Vec::new();
    let mut total = 0usize;
    for s in text.chars().filter_map(Script::of_char) {
        total += 1;
        match counts.iter_mut().find(|(k, _)| *k == s) {
            Some((_, n)) => *n += 1,
            None => counts.push((s, 1)),
        }
    }
    let mut best: Option<(Script, usize)> = None;
    for (s, n) in counts {
        if best.is_none_or(|(_, m)| n > m) {
            best = Some((s, n));
        }
    }
    best.map(|(s, n)| (s, n as f64 / total as f64))
}
