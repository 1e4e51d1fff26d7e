use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Character n-gram language model per class with add-one smoothing and
/// log class priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharNgramModel {
    pub order: usize,
    classes: BTreeMap<String, ClassModel>,
    vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ClassModel {
    log_prior: f64,
    /// n-gram -> count and (n-1)-gram context -> count.
    grams: HashMap<String, u32>,
    contexts: HashMap<String, u32>,
}

const PAD: char = '\u{2}';

fn padded(text: &str, order: usize) -> Vec<char> {
    let mut chars: Vec<char> = std::iter::repeat_n(PAD, order - 1).collect();
    chars.extend(text.to_lowercase().chars());
    chars.push('\u{3}');
    chars
}

impl CharNgramModel {
    pub fn train<'a>(lines: impl IntoIterator<Item = (&'a str, &'a str)>, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidConfig("n-gram order must be at least 1".into()));
        }
        let mut per_class: BTreeMap<String, (u64, HashMap<String, u32>, HashMap<String, u32>)> = BTreeMap::new();
        let mut alphabet: HashSet<char> = HashSet::new();
        let mut total = 0u64;
        for (code, text) in lines {
            let chars = padded(text, order);
            alphabet.extend(chars.iter().copied());
            let entry = per_class.entry(code.to_string()).or_default();
            entry.0 += 1;
            total += 1;
            for w in chars.windows(order) {
                let gram: String = w.iter().collect();
                let ctx: String = w[..order - 1].iter().collect();
                *entry.1.entry(gram).or_insert(0) += 1;
                *entry.2.entry(ctx).or_insert(0) += 1;
            }
        }
        if per_class.is_empty() {
            return Err(Error::EmptyInput);
        }
        let classes = per_class
            .into_iter()
            .map(|(code, (n, grams, contexts))| {
                let model = ClassModel {
                    log_prior: (n as f64 / total as f64).ln(),
                    grams,
                    contexts,
                };
                (code, model)
            })
            .collect();
        Ok(CharNgramModel {
            order,
            classes,
            // One extra symbol for characters never seen in training.
            vocab_size: alphabet.len() + 1,
        })
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(|s| s.as_str())
    }

    /// Log joint score of `text` under each class, in code order.
    pub fn scores(&self, text: &str) -> Vec<(&str, f64)> {
        let chars = padded(text, self.order);
        let v = self.vocab_size as f64;
        self.classes
            .iter()
            .map(|(code, m)| {
                let mut s = m.log_prior;
                for w in chars.windows(self.order) {
                    let gram: String = w.iter().collect();
                    let ctx: String = w[..self.order - 1].iter().collect();
                    let num = m.grams.get(&gram).copied().unwrap_or(0) as f64 + 1.0;
                    let den = m.contexts.get(&ctx).copied().unwrap_or(0) as f64 + v;
                    s += (num / den).ln();
                }
                (code.as_str(), s)
            })
            .collect()
    }
}
