//! Moving a trained classifier to a target domain, either by evaluating it
//! as is (direct) or by continuing training on target data (incremental).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_vocab, Dataset, LabeledSentence};
use crate::embeddings::OOV_RANGE;
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, Checkpoint};
use crate::numerics::{derive_seed, Matrix, Rng};
use crate::training::{evaluate, train, EpochRecord, EvalReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Direct,
    Incremental,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPolicy {
    #[default]
    Keep,
    Reinit,
}

/// How target tokens missing from the source vocabulary are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MergePolicy {
    /// Append them with fresh out-of-vocabulary vectors.
    #[default]
    Merge,
    /// Map them to the unknown token.
    Source,
}

macro_rules! lowercase_enum {
    ($ty:ident { $($name:literal => $variant:ident),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().as_str() {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($ty::$variant => $name,)*
                })
            }
        }
    };
}

lowercase_enum!(TransferMode { "direct" => Direct, "incremental" => Incremental });
lowercase_enum!(HeadPolicy { "keep" => Keep, "reinit" => Reinit });
lowercase_enum!(MergePolicy { "merge" => Merge, "source" => Source });

#[derive(Clone, Debug)]
pub struct TransferPlan {
    pub source: PathBuf,
    pub target_train: Vec<LabeledSentence>,
    pub target_test: Vec<LabeledSentence>,
    pub target_classes: usize,
    pub mode: TransferMode,
    pub head: HeadPolicy,
    /// Fine-tuning schedule; its seed also drives vocabulary merging and head
    /// reinitialization.
    pub finetune: TrainConfig,
    /// Dropout for fine-tuning. Defaults to the source model's rate.
    pub dropout: Option<f64>,
    pub merge: MergePolicy,
}

#[derive(Clone, Debug)]
pub struct TransferOutcome {
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub history: Vec<EpochRecord>,
}

mod tag {
    pub const MERGE: u64 = 0x10;
    pub const HEAD: u64 = 0x11;
    pub const TRAIN: u64 = 0x12;
}

/// Extends the checkpoint's vocabulary with every token of `sentences` it
/// lacks. Source ids and vectors are kept; appended rows are drawn from the
/// out-of-vocabulary range in every channel. Network parameters do not
/// depend on the vocabulary and are left alone.
pub fn adapt_vocabulary(
    ckpt: &Checkpoint,
    sentences: &[LabeledSentence],
    rng: &mut Rng,
) -> Result<Checkpoint> {
    let d = ckpt.config.embed_dim;
    if ckpt.channels.dim() != d {
        return Err(Error::Shape(format!(
            "embedding dimension {} does not match the model's {d}",
            ckpt.channels.dim()
        )));
    }
    let mut vocab = ckpt.vocab.clone();
    let start = vocab.len();
    if !sentences.is_empty() {
        for token in build_vocab(sentences, 1)?.tokens().iter().skip(2) {
            vocab.insert(token);
        }
    }
    let added = vocab.len() - start;
    let mut out = ckpt.clone();
    if added > 0 {
        for table in &mut out.channels.channels {
            let mut data = std::mem::replace(&mut table.vectors, Matrix::zeros(0, 0)).into_vec();
            data.extend((0..added * d).map(|_| rng.uniform(-OOV_RANGE, OOV_RANGE)));
            table.vectors = Matrix::from_vec(start + added, d, data)?;
        }
    }
    out.vocab = vocab;
    Ok(out)
}

fn check_plan(plan: &TransferPlan) -> Result<()> {
    if plan.target_test.is_empty() {
        return Err(Error::Config("target test set is empty".into()));
    }
    plan.finetune.validate()
}

/// Vocabulary handling shared by both modes so that they see identical
/// embeddings for the same plan.
fn prepare(ckpt: &Checkpoint, plan: &TransferPlan) -> Result<Checkpoint> {
    match plan.merge {
        MergePolicy::Source => Ok(ckpt.clone()),
        MergePolicy::Merge => {
            let mut rng = Rng::new(derive_seed(plan.finetune.seed, tag::MERGE));
            let all: Vec<LabeledSentence> = plan
                .target_train
                .iter()
                .chain(&plan.target_test)
                .cloned()
                .collect();
            adapt_vocabulary(ckpt, &all, &mut rng)
        }
    }
}

fn encode(ckpt: &Checkpoint, sentences: &[LabeledSentence], classes: usize) -> Result<Dataset> {
    Dataset::encode(
        sentences,
        Arc::new(ckpt.vocab.clone()),
        ckpt.config.s_max,
        classes,
    )
}

/// Evaluates the source model on the target test set. Nothing in `ckpt` is
/// modified.
pub fn direct_from(ckpt: &Checkpoint, plan: &TransferPlan) -> Result<EvalReport> {
    check_plan(plan)?;
    if ckpt.config.classes != plan.target_classes {
        return Err(Error::ClassCountMismatch {
            source_classes: ckpt.config.classes,
            target_classes: plan.target_classes,
        });
    }
    let model = prepare(ckpt, plan)?;
    let test = encode(&model, &plan.target_test, plan.target_classes)?;
    evaluate(&test, &model.channels, &model.params, &model.config)
}

/// The model as it stands right before fine-tuning: merged vocabulary,
/// optional new head, fine-tuning dropout applied.
pub fn handoff(ckpt: &Checkpoint, plan: &TransferPlan) -> Result<Checkpoint> {
    check_plan(plan)?;
    let mut model = prepare(ckpt, plan)?;
    if ckpt.config.classes != plan.target_classes && plan.head == HeadPolicy::Keep {
        return Err(Error::ClassCountMismatch {
            source_classes: ckpt.config.classes,
            target_classes: plan.target_classes,
        });
    }
    if let Some(p) = plan.dropout {
        model.config.dropout = p;
    }
    model.config.classes = plan.target_classes;
    model.config.validate()?;
    if plan.head == HeadPolicy::Reinit {
        let mut rng = Rng::new(derive_seed(plan.finetune.seed, tag::HEAD));
        model.params.reinit_head(&model.config, &mut rng);
    }
    Ok(model)
}

/// Fine-tunes every layer on the target training set, then evaluates on the
/// target test set.
pub fn incremental_from(ckpt: &Checkpoint, plan: &TransferPlan) -> Result<TransferOutcome> {
    let mut model = handoff(ckpt, plan)?;
    let test = encode(&model, &plan.target_test, plan.target_classes)?;
    let mut history = Vec::new();
    if plan.finetune.epochs > 0 {
        let train_set = encode(&model, &plan.target_train, plan.target_classes)?;
        let mut rng = Rng::new(derive_seed(plan.finetune.seed, tag::TRAIN));
        let Checkpoint {
            config,
            params,
            channels,
            ..
        } = &mut model;
        history = train(
            &train_set,
            channels,
            params,
            config,
            &plan.finetune,
            &mut rng,
            None,
        )?
        .history;
    }
    let report = evaluate(&test, &model.channels, &model.params, &model.config)?;
    Ok(TransferOutcome {
        checkpoint: model,
        report,
        history,
    })
}

pub fn transfer_direct(plan: &TransferPlan) -> Result<EvalReport> {
    direct_from(&load_checkpoint(&plan.source)?, plan)
}

pub fn transfer_incremental(plan: &TransferPlan) -> Result<TransferOutcome> {
    incremental_from(&load_checkpoint(&plan.source)?, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{ChannelSet, EmbeddingTable};
    use crate::model::{ModelConfig, ModelParams};
    use crate::synthetic::KeywordCorpus;

    fn source(classes: usize) -> (Checkpoint, Vec<LabeledSentence>) {
        let mut rng = Rng::new(5);
        let data = KeywordCorpus::new(classes).sample(20, &mut rng).unwrap();
        let vocab = build_vocab(&data, 1).unwrap();
        let mut cfg = ModelConfig::baseline(4, 2, classes, 12);
        cfg.filters = 3;
        cfg.region_sizes = vec![1, 2];
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let channels = ChannelSet::new(vec![
            EmbeddingTable::random(vocab.len(), 4, false, &mut rng),
            EmbeddingTable::random(vocab.len(), 4, true, &mut rng),
        ])
        .unwrap();
        (
            Checkpoint {
                config: cfg,
                params,
                vocab,
                channels,
            },
            data,
        )
    }

    fn plan(target: Vec<LabeledSentence>, classes: usize) -> TransferPlan {
        TransferPlan {
            source: PathBuf::new(),
            target_train: target.clone(),
            target_test: target,
            target_classes: classes,
            mode: TransferMode::Direct,
            head: HeadPolicy::Keep,
            finetune: TrainConfig {
                epochs: 0,
                batch_size: 5,
                ..TrainConfig::default()
            },
            dropout: None,
            merge: MergePolicy::Merge,
        }
    }

    fn sent(words: &str) -> LabeledSentence {
        LabeledSentence::new(words, 0)
    }

    #[test]
    fn merge_sizes_and_vectors() {
        let (ckpt, _) = source(2);
        let before = ckpt.vocab.len();
        let target = vec![sent("alpha beta gamma delta epsilon")];
        let merged = adapt_vocabulary(&ckpt, &target, &mut Rng::new(0)).unwrap();
        assert_eq!(merged.vocab.len(), before + 5);
        for k in 0..2 {
            let table = &merged.channels.channels[k];
            assert_eq!(table.vocab_size(), before + 5);
            for id in 0..before {
                assert_eq!(table.row(id), ckpt.channels.channels[k].row(id));
            }
            for id in before..before + 5 {
                assert!(table.row(id).iter().all(|x| x.abs() <= OOV_RANGE));
            }
        }
        assert_eq!(merged.params, ckpt.params);
    }

    #[test]
    fn merge_is_idempotent() {
        let (ckpt, _) = source(2);
        let target = vec![sent("alpha key0a beta")];
        let once = adapt_vocabulary(&ckpt, &target, &mut Rng::new(1)).unwrap();
        let twice = adapt_vocabulary(&once, &target, &mut Rng::new(2)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn direct_refuses_class_mismatch() {
        let (ckpt, _) = source(5);
        let target = KeywordCorpus::new(2).sample(10, &mut Rng::new(3)).unwrap();
        let err = direct_from(&ckpt, &plan(target.clone(), 2)).unwrap_err();
        assert!(matches!(err, Error::ClassCountMismatch { .. }));
        assert!(err.to_string().contains("incremental"));

        let mut p = plan(target, 2);
        assert!(handoff(&ckpt, &p).is_err());
        p.head = HeadPolicy::Reinit;
        let model = handoff(&ckpt, &p).unwrap();
        assert_eq!(model.params.dense_w.shape(), (ckpt.config.pooled_len(), 2));
        assert_eq!(model.params.regions, ckpt.params.regions);
        assert_eq!(model.params.context, ckpt.params.context);
    }

    #[test]
    fn direct_is_pure_and_matches_zero_epoch_incremental() {
        let (ckpt, data) = source(2);
        let snapshot = ckpt.clone();
        let p = plan(data, 2);
        let a = direct_from(&ckpt, &p).unwrap();
        let b = direct_from(&ckpt, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ckpt, snapshot);
        let inc = incremental_from(&ckpt, &p).unwrap();
        assert_eq!(inc.report, a);
        assert!(inc.history.is_empty());
    }

    #[test]
    fn parses_policies() {
        assert_eq!(
            "Direct".parse::<TransferMode>().unwrap(),
            TransferMode::Direct
        );
        assert_eq!("reinit".parse::<HeadPolicy>().unwrap(), HeadPolicy::Reinit);
        assert_eq!(MergePolicy::Source.to_string(), "source");
        assert!("both".parse::<TransferMode>().is_err());
    }


    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn merging_twice_changes_nothing(seed in 0u64..1000, n in 1usize..30) {
            let (ckpt, _) = source(2);
            let mut rng = Rng::new(seed);
            let target = KeywordCorpus::with_prefix(2, "t").sample(n, &mut rng).unwrap();
            let once = adapt_vocabulary(&ckpt, &target, &mut rng).unwrap();
            let twice = adapt_vocabulary(&once, &target, &mut rng).unwrap();
            proptest::prop_assert_eq!(once, twice);
        }
    }
}
