use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cell, LanguageTag, ParallelCorpus, Script};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_languages: usize,
    pub n_families: usize,
    pub content_alphabet: u32,
    pub samples: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_languages: 6,
            n_families: 2,
            content_alphabet: 32,
            samples: 2000,
            min_len: 8,
            max_len: 16,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_languages == 0 {
            return bad("n_languages must be positive");
        }
        if self.n_families == 0 || self.n_families > self.n_languages {
            return bad("n_families must be in 1..=n_languages");
        }
        if self.content_alphabet < 2 {
            return bad("content alphabet needs at least 2 symbols");
        }
        if self.min_len < 2 || self.max_len < self.min_len {
            return bad("need 2 <= min_len <= max_len");
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.n_languages * self.content_alphabet as usize
    }

    /// Code of language `i`; the family index is part of the code so related
    /// languages sort together.
    pub fn language_code(&self, i: usize) -> String {
        format!("f{}l{}", self.family_of(i), i)
    }

    /// Families are contiguous blocks of language indices, which makes their
    /// token offsets adjacent.
    pub fn family_of(&self, i: usize) -> usize {
        i * self.n_families / self.n_languages
    }
}

/// Order-1 Markov chain over content symbols. Each symbol has a handful of
/// weighted successors so that continuations are predictable but not fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    // cumulative successor distribution per symbol
    successors: Vec<Vec<(u32, f64)>>,
}

const FAN_OUT: usize = 3;

impl MarkovChain {
    pub fn random(alphabet: u32, rng: &mut impl Rng) -> Self {
        let fan = FAN_OUT.min(alphabet as usize);
        let successors = (0..alphabet)
            .map(|_| {
                let mut picks: Vec<u32> = Vec::with_capacity(fan);
                while picks.len() < fan {
                    let s = rng.random_range(0..alphabet);
                    if !picks.contains(&s) {
                        picks.push(s);
                    }
                }
                let weights: Vec<f64> = (0..fan).map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                picks
                    .into_iter()
                    .zip(weights)
                    .map(|(s, w)| {
                        acc += w / total;
                        (s, acc)
                    })
                    .collect()
            })
            .collect();
        MarkovChain { successors }
    }

    pub fn alphabet(&self) -> u32 {
        self.successors.len() as u32
    }

    pub fn next(&self, current: u32, rng: &mut impl Rng) -> u32 {
        let u: f64 = rng.random();
        let row = &self.successors[current as usize];
        row.iter().find(|(_, c)| u < *c).unwrap_or(row.last().unwrap()).0
    }

    pub fn sample(&self, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut s = rng.random_range(0..self.alphabet());
        for _ in 0..len {
            out.push(s);
            s = self.next(s, rng);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SyntheticSpec,
    pub corpus: ParallelCorpus,
    /// Token offset of each language: content symbol `s` is rendered as
    /// `offset + s`.
    pub offsets: BTreeMap<String, u32>,
    pub chain: MarkovChain,
}

impl SyntheticCorpus {
    pub fn codes(&self) -> Vec<String> {
        self.corpus.languages().iter().map(|l| l.code.clone()).collect()
    }

    pub fn render(&self, code: &str, content: &[u32]) -> Result<Vec<u32>> {
        let off = *self
            .offsets
            .get(code)
            .ok_or_else(|| Error::UnknownLanguage(code.into()))?;
        Ok(content.iter().map(|s| off + s).collect())
    }

    /// Fresh content sequences from the same chain, drawn from a stream that
    /// is independent of the one that produced the corpus.
    pub fn held_out_content(&self, n: usize, len: usize, stream: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(stream.wrapping_add(1));
        (0..n).map(|_| self.chain.sample(len, &mut rng)).collect()
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chain = MarkovChain::random(spec.content_alphabet, &mut rng);
    let s = spec.content_alphabet;

    let mut languages = Vec::with_capacity(spec.n_languages);
    let mut offsets = BTreeMap::new();
    for i in 0..spec.n_languages {
        let lo = i as u32 * s;
        let code = spec.language_code(i);
        languages.push(LanguageTag::new(code.clone(), Script::Synthetic { lo, hi: lo + s })?);
        offsets.insert(code, lo);
    }

    let width = spec.samples.max(1).to_string().len();
    let mut records = Vec::with_capacity(spec.samples * spec.n_languages);
    for n in 0..spec.samples {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let content = chain.sample(len, &mut rng);
        let id = format!("s{n:0width$}");
        for tag in &languages {
            let off = offsets[&tag.code];
            let tokens = content.iter().map(|c| off + c).collect();
            records.push((id.clone(), tag.code.clone(), Cell::Tokens(tokens)));
        }
    }
    let corpus = ParallelCorpus::from_records(languages, records)?;
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        corpus,
        offsets,
        chain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_languages: usize, s: u32) -> SyntheticSpec {
        SyntheticSpec {
            n_languages,
            n_families: 1,
            content_alphabet: s,
            samples: 20,
            min_len: 4,
            max_len: 6,
            seed: 7,
        }
    }

    #[test]
    fn disjoint_ranges() {
        let syn = generate_synthetic_corpus(&spec(2, 50)).unwrap();
        let langs = syn.corpus.languages();
        assert_eq!(langs[0].script, Script::Synthetic { lo: 0, hi: 50 });
        assert_eq!(langs[1].script, Script::Synthetic { lo: 50, hi: 100 });
        for (i, tag) in langs.iter().enumerate() {
            for (_, cell) in syn.corpus.slice(&tag.code).unwrap() {
                let Cell::Tokens(ts) = cell else { panic!() };
                let lo = 50 * i as u32;
                assert!(ts.iter().all(|t| (lo..lo + 50).contains(t)));
            }
        }
    }

    #[test]
    fn deterministic_for_seed() {
        let a = generate_synthetic_corpus(&spec(3, 10)).unwrap();
        let b = generate_synthetic_corpus(&spec(3, 10)).unwrap();
        assert_eq!(a.corpus, b.corpus);
        let mut other = spec(3, 10);
        other.seed = 8;
        assert_ne!(generate_synthetic_corpus(&other).unwrap().corpus, a.corpus);
    }

    #[test]
    fn lengths_within_bounds() {
        let sp = SyntheticSpec {
            samples: 100,
            min_len: 8,
            max_len: 16,
            ..spec(2, 20)
        };
        let syn = generate_synthetic_corpus(&sp).unwrap();
        assert_eq!(syn.corpus.alignment().len(), 100);
        for (_, cell) in syn.corpus.slice("f0l0").unwrap() {
            let Cell::Tokens(ts) = cell else { panic!() };
            assert!((8..=16).contains(&ts.len()));
        }
    }

    #[test]
    fn renderings_share_content() {
        let syn = generate_synthetic_corpus(&spec(4, 12)).unwrap();
        for id in syn.corpus.alignment() {
            let mut content: Option<Vec<u32>> = None;
            for tag in syn.corpus.languages() {
                let Some(Cell::Tokens(ts)) = syn.corpus.cell(id, &tag.code) else {
                    panic!()
                };
                let off = syn.offsets[&tag.code];
                let c: Vec<u32> = ts.iter().map(|t| t - off).collect();
                match &content {
                    Some(prev) => assert_eq!(prev, &c),
                    None => content = Some(c),
                }
            }
        }
    }

    #[test]
    fn family_blocks_are_contiguous() {
        let sp = SyntheticSpec {
            n_languages: 6,
            n_families: 2,
            ..spec(6, 8)
        };
        let fams: Vec<usize> = (0..6).map(|i| sp.family_of(i)).collect();
        assert_eq!(fams, vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(sp.language_code(4), "f1l4");
    }

    #[test]
    fn invalid_specs_rejected() {
        assert!(SyntheticSpec {
            n_families: 3,
            ..spec(2, 5)
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            content_alphabet: 1,
            ..spec(2, 5)
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            min_len: 1,
            ..spec(2, 5)
        }
        .validate()
        .is_err());
        assert!(SyntheticSpec {
            max_len: 3,
            ..spec(2, 5)
        }
        .validate()
        .is_err());
    }
}
