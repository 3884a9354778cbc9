#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use attncnn::corpus::{build_vocab, write_tsv, Dataset, LabeledSentence};
use attncnn::embeddings::{ChannelSet, EmbeddingTable};
use attncnn::model::{ModelConfig, ModelParams};
use attncnn::numerics::Rng;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_attncnn")
}

/// Runs the binary with `args` and the given extra environment.
pub fn cli(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

pub fn tsv(dir: &Path, name: &str, sentences: &[LabeledSentence]) -> PathBuf {
    let path = dir.join(name);
    write_tsv(&path, sentences).unwrap();
    path
}

pub fn dataset(sentences: &[LabeledSentence], classes: usize, s_max: usize) -> Dataset {
    let vocab = Arc::new(build_vocab(sentences, 1).unwrap());
    Dataset::encode(sentences, vocab, s_max, classes).unwrap()
}

pub fn random_channels(
    vocab_size: usize,
    d: usize,
    trainable: &[bool],
    rng: &mut Rng,
) -> ChannelSet {
    ChannelSet::new(
        trainable
            .iter()
            .map(|&t| EmbeddingTable::random(vocab_size, d, t, rng))
            .collect(),
    )
    .unwrap()
}

/// Every tensor filled with uniform draws from `[-scale, scale]`.
pub fn randomize(params: &mut ModelParams, scale: f64, rng: &mut Rng) {
    for t in params.tensors_mut() {
        t.data
            .iter_mut()
            .for_each(|x| *x = rng.uniform(-scale, scale));
    }
}

pub fn small_config(classes: usize, s_max: usize) -> ModelConfig {
    let mut cfg = ModelConfig::baseline(8, 1, classes, s_max);
    cfg.region_sizes = vec![2, 3];
    cfg.filters = 8;
    cfg.attn_dim = Some(8);
    cfg
}

/// Bitwise equality of two parameter sets.
pub fn same_bits(a: &ModelParams, b: &ModelParams) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|(x, y)| {
            x.name == y.name
                && x.data.len() == y.data.len()
                && x.data
                    .iter()
                    .zip(y.data)
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

pub fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
