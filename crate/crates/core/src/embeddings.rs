//! Pretrained vector loading, multi-channel embedding tables and sentence
//! tensor assembly.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedSentence, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Half-width of the uniform range used for tokens without a pretrained vector.
pub const OOV_RANGE: f64 = 0.25;

pub const DEFAULT_EMBED_DIM: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub vectors: Matrix,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Uniform `[-0.25, 0.25]` rows with a zero PAD row.
    pub fn random(vocab_size: usize, d: usize, trainable: bool, rng: &mut Rng) -> Self {
        let mut vectors = Matrix::uniform(vocab_size, d, OOV_RANGE, rng);
        vectors.row_mut(PAD).fill(0.0);
        EmbeddingTable { vectors, trainable }
    }

    pub fn vocab_size(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn row(&self, id: usize) -> &[f64] {
        self.vectors.row(id)
    }
}

/// Reads vectors in the common text dump format: an optional `count dim`
/// header followed by `token v1 .. vd` lines.
pub fn read_pretrained<R: BufRead>(
    reader: R,
    source: &Path,
    vocab: &Vocabulary,
    d: usize,
    rng: &mut Rng,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::random(vocab.len(), d, true, rng);
    // Exact-case matches win over case-folded ones.
    let mut exact: HashSet<usize> = HashSet::new();
    let mut folded: HashSet<usize> = HashSet::new();
    let mut first = true;

    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(source, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let rest: Vec<&str> = fields.collect();
        let parse_err = |msg: String| Error::Parse {
            path: source.to_path_buf(),
            line: line_no,
            msg,
        };

        if std::mem::take(&mut first) && rest.len() == 1 {
            if let (Ok(_), Ok(dim)) = (token.parse::<usize>(), rest[0].parse::<usize>()) {
                if dim != d {
                    return Err(parse_err(format!(
                        "file declares dimension {dim}, expected {d}"
                    )));
                }
                continue;
            }
        }
        if rest.len() != d {
            return Err(parse_err(format!(
                "vector for {token:?} has {} components, expected {d}",
                rest.len()
            )));
        }
        let mut values = Vec::with_capacity(d);
        for f in &rest {
            let v: f64 = f
                .parse()
                .map_err(|_| parse_err(format!("cannot parse {f:?} as a number")))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite component {f:?}")));
            }
            values.push(v);
        }

        let target = if let Some(id) = vocab.get(token) {
            if !exact.insert(id) {
                continue;
            }
            id
        } else {
            let lower = token.to_lowercase();
            match vocab.get(&lower) {
                Some(id) if !exact.contains(&id) && folded.insert(id) => id,
                _ => continue,
            }
        };
        if target != PAD {
            table.vectors.row_mut(target).copy_from_slice(&values);
        }
    }
    Ok(table)
}

pub fn load_pretrained(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    d: usize,
    rng: &mut Rng,
) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_pretrained(BufReader::new(file), path, vocab, d, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmbeddingVariant {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "w2v-static")]
    W2vStatic,
    #[serde(rename = "w2v-nonstatic")]
    W2vNonStatic,
    #[serde(rename = "2-channel")]
    TwoChannel,
    #[serde(rename = "4-channel")]
    FourChannel,
}

impl EmbeddingVariant {
    pub const ALL: [EmbeddingVariant; 5] = [
        EmbeddingVariant::Random,
        EmbeddingVariant::W2vStatic,
        EmbeddingVariant::W2vNonStatic,
        EmbeddingVariant::TwoChannel,
        EmbeddingVariant::FourChannel,
    ];

    pub fn channel_count(self) -> usize {
        match self {
            EmbeddingVariant::Random
            | EmbeddingVariant::W2vStatic
            | EmbeddingVariant::W2vNonStatic => 1,
            EmbeddingVariant::TwoChannel => 2,
            EmbeddingVariant::FourChannel => 4,
        }
    }

    /// Number of pretrained files the variant reads.
    pub fn pretrained_count(self) -> usize {
        match self {
            EmbeddingVariant::Random => 0,
            EmbeddingVariant::W2vStatic
            | EmbeddingVariant::W2vNonStatic
            | EmbeddingVariant::TwoChannel => 1,
            EmbeddingVariant::FourChannel => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EmbeddingVariant::Random => "random",
            EmbeddingVariant::W2vStatic => "w2v-static",
            EmbeddingVariant::W2vNonStatic => "w2v-nonstatic",
            EmbeddingVariant::TwoChannel => "2-channel",
            EmbeddingVariant::FourChannel => "4-channel",
        }
    }
}

impl fmt::Display for EmbeddingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        EmbeddingVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown embedding variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSet {
    pub channels: Vec<EmbeddingTable>,
}

impl ChannelSet {
    pub fn new(channels: Vec<EmbeddingTable>) -> Result<Self> {
        let Some(first) = channels.first() else {
            return Err(Error::Config(
                "a channel set needs at least one channel".into(),
            ));
        };
        let shape = first.vectors.shape();
        if channels.iter().any(|c| c.vectors.shape() != shape) {
            return Err(Error::Shape(
                "all channels must share vocabulary size and dimension".into(),
            ));
        }
        Ok(ChannelSet { channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.channels[0].dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.channels[0].vocab_size()
    }
}

/// Builds the channel layout of an input variant. `paths` lists the
/// pretrained files in channel order.
pub fn make_channels(
    variant: EmbeddingVariant,
    paths: &[PathBuf],
    vocab: &Vocabulary,
    d: usize,
    rng: &mut Rng,
) -> Result<ChannelSet> {
    let needed = variant.pretrained_count();
    if paths.len() < needed {
        return Err(Error::Config(format!(
            "embedding variant {variant} needs {needed} pretrained vector file(s), got {}",
            paths.len()
        )));
    }
    let pretrained = |trainable: bool, i: usize, rng: &mut Rng| -> Result<EmbeddingTable> {
        let mut t = load_pretrained(&paths[i], vocab, d, rng)?;
        t.trainable = trainable;
        Ok(t)
    };
    let channels = match variant {
        EmbeddingVariant::Random => vec![EmbeddingTable::random(vocab.len(), d, true, rng)],
        EmbeddingVariant::W2vStatic => vec![pretrained(false, 0, rng)?],
        EmbeddingVariant::W2vNonStatic => vec![pretrained(true, 0, rng)?],
        EmbeddingVariant::TwoChannel => vec![
            pretrained(true, 0, rng)?,
            EmbeddingTable::random(vocab.len(), d, true, rng),
        ],
        EmbeddingVariant::FourChannel => vec![
            pretrained(true, 0, rng)?,
            pretrained(true, 1, rng)?,
            pretrained(true, 2, rng)?,
            EmbeddingTable::random(vocab.len(), d, true, rng),
        ],
    };
    ChannelSet::new(channels)
}

/// Stacks the per-channel `s_max x d` sentence matrices.
pub fn assemble(sent: &EncodedSentence, channels: &ChannelSet) -> Vec<Matrix> {
    let d = channels.dim();
    channels
        .channels
        .iter()
        .map(|table| {
            let mut m = Matrix::zeros(sent.ids.len(), d);
            for (t, &id) in sent.ids.iter().enumerate() {
                if id != PAD {
                    m.row_mut(t).copy_from_slice(table.row(id));
                }
            }
            m
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode, LabeledSentence};
    use std::io::Cursor;

    fn vocab() -> Vocabulary {
        build_vocab(&[LabeledSentence::new("the cat zzz", 0)], 1).unwrap()
    }

    fn read(text: &str, d: usize) -> Result<EmbeddingTable> {
        read_pretrained(
            Cursor::new(text),
            Path::new("vec.txt"),
            &vocab(),
            d,
            &mut Rng::new(3),
        )
    }

    #[test]
    fn pretrained_rows_and_oov() {
        let v = vocab();
        let t = read("the 0.1 0.2\ncat -1 2.5\n", 2).unwrap();
        assert_eq!(t.row(v.id("the")), &[0.1, 0.2]);
        assert_eq!(t.row(v.id("cat")), &[-1.0, 2.5]);
        assert!(t.row(v.id("zzz")).iter().all(|x| x.abs() <= OOV_RANGE));
        assert_eq!(t.row(PAD), &[0.0, 0.0]);
    }

    #[test]
    fn header_and_case_folding() {
        let v = vocab();
        let t = read("2 2\nThe 9 9\nthe 1 1\n", 2).unwrap();
        assert_eq!(t.row(v.id("the")), &[1.0, 1.0]);
        let t = read("THE 4 4\n", 2).unwrap();
        assert_eq!(t.row(v.id("the")), &[4.0, 4.0]);
    }

    #[test]
    fn pretrained_errors() {
        assert!(matches!(
            read("3 5\nthe 1 2\n", 2),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read("the 1 2 3\n", 2),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(
            read("the 1 2\ncat 1 x\n", 2),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn variants() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.txt");
        std::fs::write(&p, "the 0.5 0.5\n").unwrap();
        let v = vocab();
        let paths = vec![p.clone(), p.clone(), p];
        let mut rng = Rng::new(0);

        let c = make_channels(EmbeddingVariant::Random, &[], &v, 2, &mut rng).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.channels[0].trainable);

        let c = make_channels(EmbeddingVariant::W2vStatic, &paths, &v, 2, &mut rng).unwrap();
        assert_eq!(c.len(), 1);
        assert!(!c.channels[0].trainable);

        let c = make_channels(EmbeddingVariant::W2vNonStatic, &paths, &v, 2, &mut rng).unwrap();
        assert!(c.channels[0].trainable);

        let c = make_channels(EmbeddingVariant::TwoChannel, &paths, &v, 2, &mut rng).unwrap();
        assert_eq!(c.len(), 2);

        let c = make_channels(EmbeddingVariant::FourChannel, &paths, &v, 2, &mut rng).unwrap();
        assert_eq!(c.len(), 4);
        assert!(c.channels.iter().all(|t| t.trainable));

        assert!(
            make_channels(EmbeddingVariant::FourChannel, &paths[..2], &v, 2, &mut rng).is_err()
        );
        assert!(make_channels(EmbeddingVariant::W2vStatic, &[], &v, 2, &mut rng).is_err());
    }

    #[test]
    fn assemble_rows() {
        let v = vocab();
        let mut rng = Rng::new(5);
        let set = ChannelSet::new(vec![
            EmbeddingTable::random(v.len(), 3, true, &mut rng),
            EmbeddingTable::random(v.len(), 3, false, &mut rng),
        ])
        .unwrap();
        let sent = encode(&LabeledSentence::new("cat the", 0), &v, 4);
        let tensor = assemble(&sent, &set);
        assert_eq!(tensor.len(), 2);
        for (k, m) in tensor.iter().enumerate() {
            assert_eq!(m.shape(), (4, 3));
            for (t, &id) in sent.ids.iter().enumerate() {
                assert_eq!(m.row(t), set.channels[k].row(id));
            }
            assert_eq!(m.row(3), &[0.0; 3]);
        }
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in EmbeddingVariant::ALL {
            assert_eq!(v.name().parse::<EmbeddingVariant>().unwrap(), v);
        }
        assert!("5-channel".parse::<EmbeddingVariant>().is_err());
    }


    proptest::proptest! {
        #[test]
        fn assembled_shape_and_padding(
            k in 1usize..4,
            d in 1usize..6,
            s_max in 1usize..10,
            n in 0usize..12,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let channels = ChannelSet::new(
                (0..k).map(|i| EmbeddingTable::random(10, d, i % 2 == 0, &mut rng)).collect(),
            )
            .unwrap();
            let true_len = n.min(s_max);
            let mut ids: Vec<usize> = (0..true_len).map(|_| 1 + rng.below(9)).collect();
            ids.resize(s_max, PAD);
            let sent = crate::corpus::EncodedSentence { ids, true_len, label: 0 };
            let x = assemble(&sent, &channels);
            proptest::prop_assert_eq!(x.len(), k);
            for m in &x {
                proptest::prop_assert_eq!(m.shape(), (s_max, d));
                for r in true_len..s_max {
                    proptest::prop_assert!(m.row(r).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
