//! Zero-shot evaluation of a binary checkpoint on another corpus.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::annotations::{to_binary, LabelTrack};
use crate::dataset::{load_pairs, Corpus, Partition, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::nn::{Checkpoint, Mode};

#[derive(Clone, Debug)]
pub struct TransferJob {
    pub checkpoint: PathBuf,
    pub corpus: Corpus,
    pub split: Split,
    pub partition: Partition,
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Runs the checkpoint over the chosen partition with every call class
/// collapsed to one. The model is only read.
pub fn transfer_eval(job: &TransferJob) -> Result<EvalReport> {
    let before = file_digest(&job.checkpoint)?;
    let ck = Checkpoint::load(&job.checkpoint)?;
    if ck.model.config.num_class != 2 {
        return Err(Error::ClassArityMismatch {
            expected: 2,
            found: ck.model.config.num_class,
        });
    }
    let report = evaluate_checkpoint(&ck, &job.corpus, job.split.ids(job.partition), true)?;
    if file_digest(&job.checkpoint)? != before {
        return Err(Error::CorruptFile(
            job.checkpoint.clone(),
            "checkpoint changed while it was being evaluated".into(),
        ));
    }
    Ok(report)
}

/// Eval-mode report for `ids`; with `binary` the gold labels are collapsed
/// to call / non-call first.
pub fn evaluate_checkpoint(ck: &Checkpoint, corpus: &Corpus, ids: &[String], binary: bool) -> Result<EvalReport> {
    if ck.meta.feature_kind != corpus.feature_kind {
        return Err(Error::FeatureKindMismatch {
            checkpoint: ck.meta.feature_kind.to_string(),
            corpus: corpus.feature_kind.to_string(),
        });
    }
    let gold_classes = if binary { 2 } else { corpus.vocab.num_classes() };
    if ck.model.config.num_class != gold_classes {
        return Err(Error::ClassArityMismatch {
            expected: gold_classes,
            found: ck.model.config.num_class,
        });
    }
    if ids.is_empty() {
        return Err(Error::EmptySplit("evaluation"));
    }
    let pairs = load_pairs(corpus, ids)?;
    let posts = pairs
        .par_iter()
        .map(|(f, _)| ck.model.forward(f, Mode::Eval))
        .collect::<Result<Vec<_>>>()?;
    let golds: Vec<LabelTrack> = pairs
        .into_iter()
        .map(|(_, t)| if binary { to_binary(&t) } else { t })
        .collect();
    evaluate(&posts, &golds)
}
