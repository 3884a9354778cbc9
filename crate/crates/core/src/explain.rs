//! Token-level importance scores derived from the attention weights, and
//! per-word score distributions over a dataset.
//!
//! A window's weight is split equally across the `h` rows it spans. Shares
//! that land on padding are dropped, the remaining shares are summed over
//! regions, and the per-token totals are normalized to sum to one.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::corpus::{tokenize, Dataset, EncodedSentence, Vocabulary};
use crate::embeddings::ChannelSet;
use crate::error::{Error, Result};
use crate::model::{
    forward, window_count, window_offset, ForwardTrace, Mode, ModelConfig, ModelParams,
};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenAttribution {
    pub position: usize,
    pub id: usize,
    pub token: String,
    /// Normalized score in `[0, 1]`.
    pub score: f64,
    /// Unnormalized share received from each region.
    pub per_region: Vec<f64>,
}

/// Scores for the real tokens of `sent`, in sentence order.
pub fn attribute(
    trace: &ForwardTrace,
    sent: &EncodedSentence,
    vocab: &Vocabulary,
    cfg: &ModelConfig,
) -> Result<Vec<TokenAttribution>> {
    if trace.ids != sent.ids || trace.true_len != sent.true_len {
        return Err(Error::Shape(
            "trace was not produced from this sentence".into(),
        ));
    }
    if trace.regions.len() != cfg.region_sizes.len() {
        return Err(Error::Shape(format!(
            "trace has {} regions, configuration has {}",
            trace.regions.len(),
            cfg.region_sizes.len()
        )));
    }
    let s = sent.ids.len();
    let n = sent.true_len;
    let mut per_token = vec![vec![0.0; trace.regions.len()]; n];
    for (i, (region, &h)) in trace.regions.iter().zip(&cfg.region_sizes).enumerate() {
        let weights = region.weights();
        let p = window_count(s, h, cfg.padding)?;
        if region.region_size != h || weights.len() != p {
            return Err(Error::Shape(format!(
                "region {i} has {} weights, expected {p} for region size {h}",
                weights.len()
            )));
        }
        let offset = window_offset(h, cfg.padding);
        let share = 1.0 / h as f64;
        for (q, &a) in weights.iter().enumerate() {
            for r in 0..h {
                let Some(t) = (q + r).checked_sub(offset) else {
                    continue;
                };
                if t < n {
                    per_token[t][i] += a * share;
                }
            }
        }
    }
    let raw: Vec<f64> = per_token.iter().map(|r| r.iter().sum()).collect();
    let total: f64 = raw.iter().sum();
    Ok(per_token
        .into_iter()
        .zip(raw)
        .enumerate()
        .map(|(t, (per_region, r))| {
            let id = sent.ids[t];
            TokenAttribution {
                position: t,
                id,
                token: vocab.token(id).unwrap_or("").to_string(),
                score: if total > 0.0 {
                    r / total
                } else {
                    1.0 / n as f64
                },
                per_region,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Observation {
    pub sentence_id: usize,
    pub label: usize,
    /// Sum of the word's scores over its occurrences in the sentence.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WordWeightReport {
    pub word: String,
    pub observations: Vec<Observation>,
    /// `bins + 1` evenly spaced edges from 0 to 1.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `label_counts[label][bin]`
    pub label_counts: Vec<Vec<usize>>,
}

impl WordWeightReport {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn mean_score(&self) -> Option<f64> {
        mean(self.observations.iter().map(|o| o.score))
    }

    /// Mean score per label; `None` where the word never occurs.
    pub fn mean_by_label(&self) -> Vec<Option<f64>> {
        (0..self.label_counts.len())
            .map(|l| {
                mean(
                    self.observations
                        .iter()
                        .filter(|o| o.label == l)
                        .map(|o| o.score),
                )
            })
            .collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn bin_of(score: f64, bins: usize) -> usize {
    ((score.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Scores of `word` in every sentence of `dataset` that contains it, with
/// overall and per-label histograms over `[0, 1]`.
pub fn word_distribution(
    params: &ModelParams,
    cfg: &ModelConfig,
    channels: &ChannelSet,
    dataset: &Dataset,
    word: &str,
    bins: usize,
) -> Result<WordWeightReport> {
    if bins < 2 {
        return Err(Error::Config(format!("need at least 2 bins, got {bins}")));
    }
    let tokens = tokenize(word);
    let [token] = tokens.as_slice() else {
        return Err(Error::Config(format!("{word:?} is not a single token")));
    };
    let id = dataset
        .vocab
        .get(token)
        .ok_or_else(|| Error::UnknownWord(word.to_string()))?;

    let found: Vec<Option<Observation>> = dataset
        .sentences
        .par_iter()
        .enumerate()
        .map(|(i, sent)| {
            if !sent.real_ids().contains(&id) {
                return Ok(None);
            }
            let trace = forward(sent, channels, params, cfg, Mode::Infer)?;
            let score = attribute(&trace, sent, &dataset.vocab, cfg)?
                .iter()
                .filter(|a| a.id == id)
                .map(|a| a.score)
                .sum::<f64>()
                .min(1.0);
            Ok(Some(Observation {
                sentence_id: i,
                label: sent.label,
                score,
            }))
        })
        .collect::<Result<_>>()?;
    let observations: Vec<Observation> = found.into_iter().flatten().collect();

    let mut counts = vec![0; bins];
    let mut label_counts = vec![vec![0; bins]; dataset.class_count];
    for o in &observations {
        let b = bin_of(o.score, bins);
        counts[b] += 1;
        label_counts[o.label][b] += 1;
    }
    Ok(WordWeightReport {
        word: token.clone(),
        observations,
        edges: (0..=bins).map(|b| b as f64 / bins as f64).collect(),
        counts,
        label_counts,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExportFormat {
    #[default]
    Csv,
    JsonLines,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::JsonLines => "jsonl",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(ExportFormat::Csv),
            "json-lines" | "jsonl" | "jsonlines" => Ok(ExportFormat::JsonLines),
            other => Err(Error::Config(format!("unknown export format {other:?}"))),
        }
    }
}

impl fmt::Display for ExportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExportFormat::Csv => "csv",
            ExportFormat::JsonLines => "json-lines",
        })
    }
}

#[derive(Serialize)]
struct ObservationRecord<'a> {
    word: &'a str,
    sentence_id: usize,
    label: usize,
    score: f64,
}

#[derive(Serialize)]
struct BinRecord {
    bin_lo: f64,
    bin_hi: f64,
    count: usize,
    label_counts: Vec<usize>,
}

/// Observation records followed by one record per histogram bin. An empty
/// report yields only the CSV header (or nothing for JSON lines).
pub fn render_report(report: &WordWeightReport, format: ExportFormat) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let bins = (0..report.bins()).map(|b| BinRecord {
        bin_lo: report.edges[b],
        bin_hi: report.edges[b + 1],
        count: report.counts[b],
        label_counts: report.label_counts.iter().map(|c| c[b]).collect(),
    });
    match format {
        ExportFormat::Csv => {
            writeln!(out, "word,sentence_id,label,score").expect("write to Vec");
            if report.observations.is_empty() {
                return Ok(out);
            }
            for o in &report.observations {
                writeln!(
                    out,
                    "{},{},{},{}",
                    csv_field(&report.word),
                    o.sentence_id,
                    o.label,
                    o.score
                )
                .expect("write to Vec");
            }
            writeln!(out).expect("write to Vec");
            let labels: Vec<String> = (0..report.label_counts.len())
                .map(|l| format!("label_{l}"))
                .collect();
            writeln!(out, "bin_lo,bin_hi,count,{}", labels.join(",")).expect("write to Vec");
            for b in bins {
                let per: Vec<String> = b.label_counts.iter().map(usize::to_string).collect();
                writeln!(
                    out,
                    "{},{},{},{}",
                    b.bin_lo,
                    b.bin_hi,
                    b.count,
                    per.join(",")
                )
                .expect("write to Vec");
            }
        }
        ExportFormat::JsonLines => {
            if report.observations.is_empty() {
                return Ok(out);
            }
            for o in &report.observations {
                serde_json::to_writer(
                    &mut out,
                    &ObservationRecord {
                        word: &report.word,
                        sentence_id: o.sentence_id,
                        label: o.label,
                        score: o.score,
                    },
                )?;
                out.push(b'\n');
            }
            for b in bins {
                serde_json::to_writer(&mut out, &b)?;
                out.push(b'\n');
            }
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn export_report(report: &WordWeightReport, path: &Path, format: ExportFormat) -> Result<()> {
    let bytes = render_report(report, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
