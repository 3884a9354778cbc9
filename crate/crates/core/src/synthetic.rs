//! Seeded generators for small labeled corpora with a known signal. Used by
//! the test suites and handy for smoke-testing a configuration.

use std::io::Write;
use std::path::Path;

use crate::corpus::LabeledSentence;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Sentences of filler words with class keywords mixed in. Each sentence
/// carries `keyword_hits` words drawn from its class's keyword list.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordCorpus {
    pub keywords: Vec<Vec<String>>,
    pub filler: Vec<String>,
    pub min_len: usize,
    pub max_len: usize,
    pub keyword_hits: usize,
    /// Probability of replacing a sentence's label with a uniformly drawn one.
    pub label_noise: f64,
}

impl KeywordCorpus {
    /// `classes` classes with two keywords each and 40 filler words.
    pub fn new(classes: usize) -> Self {
        Self::with_prefix(classes, "w")
    }

    /// Same keywords as [`KeywordCorpus::new`] with filler words spelled
    /// `<prefix><n>`, so corpora with different prefixes share the signal but
    /// not the background vocabulary.
    pub fn with_prefix(classes: usize, prefix: &str) -> Self {
        KeywordCorpus {
            keywords: (0..classes)
                .map(|c| vec![format!("key{c}a"), format!("key{c}b")])
                .collect(),
            filler: (0..40).map(|i| format!("{prefix}{i}")).collect(),
            min_len: 6,
            max_len: 12,
            keyword_hits: 1,
            label_noise: 0.0,
        }
    }

    pub fn classes(&self) -> usize {
        self.keywords.len()
    }

    fn validate(&self) -> Result<()> {
        if self.keywords.len() < 2 || self.keywords.iter().any(Vec::is_empty) {
            return Err(Error::Config(
                "need at least two classes with keywords".into(),
            ));
        }
        if self.filler.is_empty() || self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Config(
                "invalid filler vocabulary or length range".into(),
            ));
        }
        if self.keyword_hits == 0 || self.keyword_hits > self.min_len {
            return Err(Error::Config(format!(
                "keyword hits {} must lie in 1..={}",
                self.keyword_hits, self.min_len
            )));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label noise must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// `n` sentences with labels cycling through the classes, then shuffled.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Vec<LabeledSentence>> {
        self.validate()?;
        let classes = self.classes();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            let len = self.min_len + rng.below(self.max_len - self.min_len + 1);
            let mut tokens: Vec<String> = (0..len)
                .map(|_| self.filler[rng.below(self.filler.len())].clone())
                .collect();
            let mut slots: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut slots);
            let kws = &self.keywords[class];
            for &slot in &slots[..self.keyword_hits] {
                tokens[slot] = kws[rng.below(kws.len())].clone();
            }
            let label = if self.label_noise > 0.0 && rng.next_f64() < self.label_noise {
                rng.below(classes)
            } else {
                class
            };
            out.push(LabeledSentence { tokens, label });
        }
        rng.shuffle(&mut out);
        Ok(out)
    }
}

/// Five-rating corpus: a rating-`r` sentence (label `r - 1`) carries the
/// marker `rate<r>` and `r` copies of `word`, so `word` grows more frequent
/// with the rating.
pub fn rating_corpus(n: usize, word: &str, rng: &mut Rng) -> Vec<LabeledSentence> {
    let filler: Vec<String> = (0..30).map(|i| format!("f{i}")).collect();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let rating = i % 5 + 1;
        let len = 10;
        let mut tokens: Vec<String> = (0..len)
            .map(|_| filler[rng.below(filler.len())].clone())
            .collect();
        let mut slots: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut slots);
        tokens[slots[0]] = format!("rate{rating}");
        for &slot in &slots[1..=rating] {
            tokens[slot] = word.to_string();
        }
        out.push(LabeledSentence {
            tokens,
            label: rating - 1,
        });
    }
    rng.shuffle(&mut out);
    out
}

/// Writes a plain-text vector file (`token v1 ... vd` per line) with a
/// random vector for each token.
pub fn write_vectors(path: &Path, tokens: &[&str], d: usize, rng: &mut Rng) -> Result<()> {
    let mut text = Vec::new();
    for t in tokens {
        write!(text, "{t}").expect("write to Vec");
        for _ in 0..d {
            write!(text, " {:.6}", rng.uniform(-0.5, 0.5)).expect("write to Vec");
        }
        writeln!(text).expect("write to Vec");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyword_corpus_shape() {
        let gen = KeywordCorpus::new(3);
        let data = gen.sample(30, &mut Rng::new(1)).unwrap();
        assert_eq!(data.len(), 30);
        for c in 0..3 {
            assert_eq!(data.iter().filter(|s| s.label == c).count(), 10);
        }
        for s in &data {
            assert!((6..=12).contains(&s.tokens.len()));
            let hits: Vec<&String> = s.tokens.iter().filter(|t| t.starts_with("key")).collect();
            assert_eq!(hits.len(), 1);
            assert!(hits[0].starts_with(&format!("key{}", s.label)));
        }
        assert_eq!(data, gen.sample(30, &mut Rng::new(1)).unwrap());
    }

    #[test]
    fn prefixes_share_keywords_only() {
        let a = KeywordCorpus::with_prefix(2, "src");
        let b = KeywordCorpus::with_prefix(2, "tgt");
        assert_eq!(a.keywords, b.keywords);
        assert!(a.filler.iter().all(|w| !b.filler.contains(w)));
    }

    #[test]
    fn rejects_bad_settings() {
        let mut gen = KeywordCorpus::new(2);
        gen.keyword_hits = 0;
        assert!(gen.sample(4, &mut Rng::new(0)).is_err());
        assert!(KeywordCorpus::new(1).sample(4, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn rating_counts() {
        let data = rating_corpus(25, "good", &mut Rng::new(4));
        for s in &data {
            let goods = s.tokens.iter().filter(|t| *t == "good").count();
            assert_eq!(goods, s.label + 1);
            assert!(s.tokens.contains(&format!("rate{}", s.label + 1)));
        }
    }
}
