//! Tokenization, vocabulary construction, TSV ingestion and fixed-length
//! encoding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{2026}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

/// Lowercases, splits on whitespace and emits every punctuation character as
/// its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if is_punctuation(c) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            } else {
                current.extend(c.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    /// A vocabulary holding only PAD and UNK.
    pub fn new() -> Self {
        let mut v = Vocabulary {
            index: HashMap::new(),
            tokens: Vec::new(),
        };
        v.insert(PAD_TOKEN);
        v.insert(UNK_TOKEN);
        v
    }

    /// Rebuilds a vocabulary from its id-ordered token list. The first two
    /// entries must be PAD and UNK.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Config(
                "vocabulary must start with the PAD and UNK tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), id).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { index, tokens })
    }

    /// Adds `token` if absent and returns its id.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(token.to_string(), id);
        self.tokens.push(token.to_string());
        id
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or UNK.
    pub fn id(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(UNK_TOKEN).to_string())
            .collect()
    }

    /// Hex SHA-256 over the sorted token list, one token per line.
    pub fn digest(&self) -> String {
        let mut sorted: Vec<&str> = self.tokens.iter().map(String::as_str).collect();
        sorted.sort_unstable();
        let mut hasher = Sha256::new();
        for t in sorted {
            hasher.update(t.as_bytes());
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSentence {
    pub tokens: Vec<String>,
    pub label: usize,
}

impl LabeledSentence {
    pub fn new(text: &str, label: usize) -> Self {
        LabeledSentence {
            tokens: tokenize(text),
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSentence {
    pub ids: Vec<usize>,
    pub true_len: usize,
    pub label: usize,
}

impl EncodedSentence {
    pub fn s_max(&self) -> usize {
        self.ids.len()
    }

    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.true_len]
    }
}

/// Frequency-ordered vocabulary; ties keep first-occurrence order.
pub fn build_vocab(sentences: &[LabeledSentence], min_count: usize) -> Result<Vocabulary> {
    if min_count == 0 {
        return Err(Error::Config("min_count must be at least 1".into()));
    }
    if sentences.iter().all(|s| s.tokens.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: HashMap<&str, (usize, usize)> = HashMap::new();
    let mut order = 0;
    for t in sentences.iter().flat_map(|s| &s.tokens) {
        let entry = counts.entry(t.as_str()).or_insert_with(|| {
            order += 1;
            (0, order)
        });
        entry.0 += 1;
    }
    let mut ranked: Vec<(&str, usize, usize)> = counts
        .into_iter()
        .filter(|&(_, (n, _))| n >= min_count)
        .map(|(t, (n, first))| (t, n, first))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.2.cmp(&b.2)));

    let mut vocab = Vocabulary::new();
    for (t, _, _) in ranked {
        vocab.insert(t);
    }
    Ok(vocab)
}

/// Maps tokens to ids, keeps the prefix when longer than `s_max` and
/// right-pads with PAD otherwise.
pub fn encode(sent: &LabeledSentence, vocab: &Vocabulary, s_max: usize) -> EncodedSentence {
    let mut ids: Vec<usize> = sent
        .tokens
        .iter()
        .take(s_max)
        .map(|t| vocab.id(t))
        .collect();
    let true_len = ids.len();
    ids.resize(s_max, PAD);
    EncodedSentence {
        ids,
        true_len,
        label: sent.label,
    }
}

/// Nearest-rank 95th percentile of sentence lengths (at least 1).
pub fn default_s_max(sentences: &[LabeledSentence]) -> usize {
    let mut lens: Vec<usize> = sentences.iter().map(|s| s.tokens.len()).collect();
    if lens.is_empty() {
        return 1;
    }
    lens.sort_unstable();
    let rank = ((0.95 * lens.len() as f64).ceil() as usize).clamp(1, lens.len());
    lens[rank - 1].max(1)
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub sentences: Vec<EncodedSentence>,
    pub class_count: usize,
    pub vocab: Arc<Vocabulary>,
}

impl Dataset {
    pub fn encode(
        sentences: &[LabeledSentence],
        vocab: Arc<Vocabulary>,
        s_max: usize,
        class_count: usize,
    ) -> Result<Self> {
        if sentences.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if s_max == 0 {
            return Err(Error::Config("s_max must be at least 1".into()));
        }
        for (i, s) in sentences.iter().enumerate() {
            if s.label >= class_count {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    class_count,
                    line: i + 1,
                });
            }
            if s.tokens.is_empty() {
                return Err(Error::Config(format!("sentence {} has no tokens", i + 1)));
            }
        }
        let encoded = sentences.iter().map(|s| encode(s, &vocab, s_max)).collect();
        Ok(Dataset {
            sentences: encoded,
            class_count,
            vocab,
        })
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn s_max(&self) -> usize {
        self.sentences[0].ids.len()
    }

    /// Dataset restricted to `indices`, sharing the vocabulary.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sentences: indices.iter().map(|&i| self.sentences[i].clone()).collect(),
            class_count: self.class_count,
            vocab: Arc::clone(&self.vocab),
        }
    }
}

/// Parses `label<TAB>text` records. Blank lines are skipped; CRLF accepted.
pub fn parse_tsv(text: &str, class_count: usize, path: &Path) -> Result<Vec<LabeledSentence>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line_no = n + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg: msg.to_string(),
        };
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `label<TAB>text`"))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(&format!("invalid label {label:?}")))?;
        if label >= class_count {
            return Err(Error::LabelOutOfRange {
                label,
                class_count,
                line: line_no,
            });
        }
        let tokens = tokenize(body);
        if tokens.is_empty() {
            return Err(parse_err("empty text"));
        }
        out.push(LabeledSentence { tokens, label });
    }
    Ok(out)
}

pub fn read_tsv(path: impl AsRef<Path>, class_count: usize) -> Result<Vec<LabeledSentence>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(&text, class_count, path)
}

/// Loads a TSV dataset. Builds the vocabulary (min count 1) when none is
/// given and derives `s_max` from the sentence lengths when unset.
pub fn load_tsv(
    path: impl AsRef<Path>,
    class_count: usize,
    vocab: Option<Arc<Vocabulary>>,
    s_max: Option<usize>,
) -> Result<Dataset> {
    let sentences = read_tsv(path, class_count)?;
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = match vocab {
        Some(v) => v,
        None => Arc::new(build_vocab(&sentences, 1)?),
    };
    let s_max = s_max.unwrap_or_else(|| default_s_max(&sentences));
    Dataset::encode(&sentences, vocab, s_max, class_count)
}

/// Writes records back out in the TSV format.
pub fn write_tsv(path: impl AsRef<Path>, sentences: &[LabeledSentence]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for s in sentences {
        text.push_str(&s.label.to_string());
        text.push('\t');
        text.push_str(&s.tokens.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert_eq!(tokenize("Good movie!"), toks(&["good", "movie", "!"]));
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \t\n").is_empty());
        assert_eq!(tokenize("It's bad."), toks(&["it", "'", "s", "bad", "."]));
    }

    #[test]
    fn vocab_order_and_min_count() {
        let corpus = vec![LabeledSentence::new("a a b", 0)];
        let v = build_vocab(&corpus, 1).unwrap();
        assert_eq!(v.tokens(), &toks(&[PAD_TOKEN, UNK_TOKEN, "a", "b"])[..]);
        let v = build_vocab(&corpus, 2).unwrap();
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), UNK);
        assert!(build_vocab(&[], 1).is_err());
        assert!(build_vocab(&corpus, 0).is_err());
    }

    #[test]
    fn vocab_frequency_ties_by_first_occurrence() {
        let corpus = vec![
            LabeledSentence::new("d c b", 0),
            LabeledSentence::new("b a c a", 1),
        ];
        // hand count: d=1 (1st), c=2 (2nd), b=2 (3rd), a=2 (5th)
        let v = build_vocab(&corpus, 1).unwrap();
        assert_eq!(&v.tokens()[2..], &toks(&["c", "b", "a", "d"])[..]);
    }

    #[test]
    fn encode_pad_truncate_unk() {
        let corpus = vec![LabeledSentence::new("good movie", 1)];
        let v = build_vocab(&corpus, 1).unwrap();
        let e = encode(&corpus[0], &v, 4);
        assert_eq!(e.ids, vec![v.id("good"), v.id("movie"), PAD, PAD]);
        assert_eq!(e.true_len, 2);

        let long = LabeledSentence::new("good movie good movie good zzz", 0);
        let e = encode(&long, &v, 4);
        assert_eq!(e.true_len, 4);
        assert_eq!(e.ids, vec![2, 3, 2, 3]);

        let oov = LabeledSentence::new("zzz", 0);
        assert_eq!(encode(&oov, &v, 2).ids, vec![UNK, PAD]);
    }

    #[test]
    fn tsv_parsing() {
        let p = Path::new("mem.tsv");
        let s = parse_tsv("1\tgreat film\n", 2, p).unwrap();
        assert_eq!(s[0].label, 1);
        assert_eq!(s[0].tokens, toks(&["great", "film"]));

        match parse_tsv("5\tx\n", 5, p) {
            Err(Error::LabelOutOfRange {
                label: 5, line: 1, ..
            }) => {}
            other => panic!("{other:?}"),
        }
        match parse_tsv("0\ta\nno tab here\n", 2, p) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let s = parse_tsv("0\ta b\r\n\r\n1\tc\r\n1\td e f\n", 2, p).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].tokens, toks(&["a", "b"]));
    }

    #[test]
    fn load_three_line_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        fs::write(&path, "0\tbad film\n1\tgreat film\n1\tfine\n").unwrap();
        let ds = load_tsv(&path, 2, None, Some(3)).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.s_max(), 3);
        assert!(matches!(
            load_tsv(dir.path().join("nope.tsv"), 2, None, None),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn percentile_s_max() {
        let sents: Vec<_> = (1..=20)
            .map(|n| LabeledSentence {
                tokens: vec!["x".into(); n],
                label: 0,
            })
            .collect();
        assert_eq!(default_s_max(&sents), 19);
    }

    #[test]
    fn digest_ignores_order() {
        let a = Vocabulary::from_tokens(toks(&[PAD_TOKEN, UNK_TOKEN, "x", "y"])).unwrap();
        let b = Vocabulary::from_tokens(toks(&[PAD_TOKEN, UNK_TOKEN, "y", "x"])).unwrap();
        let c = Vocabulary::from_tokens(toks(&[PAD_TOKEN, UNK_TOKEN, "y"])).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(words in prop::collection::vec("[a-z]{1,6}", 1..15), s_max in 1usize..20) {
            let sent = LabeledSentence { tokens: words.clone(), label: 0 };
            let vocab = build_vocab(std::slice::from_ref(&sent), 1).unwrap();
            let e = encode(&sent, &vocab, s_max);
            prop_assert_eq!(e.ids.len(), s_max);
            prop_assert!(e.true_len >= 1);
            prop_assert!(e.ids[e.true_len..].iter().all(|&id| id == PAD));
            let keep = words.len().min(s_max);
            prop_assert_eq!(vocab.decode(e.real_ids()), words[..keep].to_vec());
        }

        #[test]
        fn vocab_is_deterministic(texts in prop::collection::vec("[a-d ]{1,12}", 1..8)) {
            let corpus: Vec<_> = texts.iter().map(|t| LabeledSentence::new(t, 0)).collect();
            if corpus.iter().any(|s| !s.tokens.is_empty()) {
                let a = build_vocab(&corpus, 1).unwrap();
                let b = build_vocab(&corpus, 1).unwrap();
                prop_assert_eq!(a.tokens(), b.tokens());
            }
        }
    }
}
