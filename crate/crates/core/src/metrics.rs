//! Frame-level evaluation and segment extraction.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annotations::LabelTrack;
use crate::audio::FRAME_SECONDS;
use crate::error::{Error, Result};
use crate::features::write_atomic;
use crate::nn::{PosteriorMatrix, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `confusion[gold][pred]`
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub per_class_f1: Vec<f64>,
    pub weighted_f1: f64,
    /// Average precision of class 1; only for two-class reports with at
    /// least one positive frame.
    pub aucpr: Option<f64>,
    pub num_frames: u64,
}

impl EvalReport {
    /// Builds the report from a confusion matrix.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let k = confusion.len();
        let num_frames: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
        let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
        let per_class_f1: Vec<f64> = (0..k)
            .map(|c| {
                let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
                let denom = (support[c] + predicted) as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    2.0 * confusion[c][c] as f64 / denom
                }
            })
            .collect();
        // support / total first, so a lone supported class gets weight 1.0
        let weighted_f1 = if num_frames == 0 {
            0.0
        } else {
            (0..k)
                .filter(|&c| support[c] > 0)
                .map(|c| support[c] as f64 / num_frames as f64 * per_class_f1[c])
                .sum()
        };
        EvalReport {
            confusion,
            accuracy: if num_frames == 0 { 0.0 } else { trace as f64 / num_frames as f64 },
            per_class_f1,
            weighted_f1,
            aucpr: None,
            num_frames,
        }
    }

    /// Merges all call classes into class 1. AUCPR is not carried over.
    pub fn collapse_binary(&self) -> EvalReport {
        let mut m = vec![vec![0u64; 2]; 2];
        for (g, row) in self.confusion.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                m[usize::from(g > 0)][usize::from(p > 0)] += n;
            }
        }
        EvalReport::from_confusion(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("report serializes");
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }
}

/// Confusion-matrix metrics over aligned label sequences.
pub fn evaluate_labels(predicted: &[Vec<usize>], gold: &[Vec<usize>], num_classes: usize) -> Result<EvalReport> {
    if predicted.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} gold tracks",
            predicted.len(),
            gold.len()
        )));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if p.len() != g.len() {
            return Err(Error::LengthMismatch(format!(
                "clip {i}: {} predicted frames, {} gold frames",
                p.len(),
                g.len()
            )));
        }
        for (&pl, &gl) in p.iter().zip(g) {
            if pl >= num_classes || gl >= num_classes {
                return Err(Error::InvalidArgument(format!(
                    "label {} outside {num_classes} classes",
                    pl.max(gl)
                )));
            }
            confusion[gl][pl] += 1;
        }
    }
    Ok(EvalReport::from_confusion(confusion))
}

/// Scores posteriors against gold tracks. Two-class inputs also get AUCPR
/// on the class-1 posterior when any gold frame is positive.
pub fn evaluate<S: Real>(predictions: &[PosteriorMatrix<S>], golds: &[LabelTrack]) -> Result<EvalReport> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} gold tracks",
            predictions.len(),
            golds.len()
        )));
    }
    let num_classes = match (predictions.first(), golds.first()) {
        (Some(p), _) => p.probs.cols(),
        (None, Some(g)) => g.vocab.num_classes(),
        (None, None) => return Err(Error::LengthMismatch("nothing to evaluate".into())),
    };
    for (p, g) in predictions.iter().zip(golds) {
        if p.probs.cols() != num_classes || g.vocab.num_classes() != num_classes {
            return Err(Error::LengthMismatch(format!(
                "clip {}: {} posterior classes, {} gold classes, expected {num_classes}",
                g.clip_id,
                p.probs.cols(),
                g.vocab.num_classes()
            )));
        }
    }
    let predicted: Vec<Vec<usize>> = predictions.iter().map(|p| p.predicted_labels()).collect();
    let gold: Vec<Vec<usize>> = golds.iter().map(|g| g.labels.clone()).collect();
    let mut report = evaluate_labels(&predicted, &gold, num_classes)?;
    if num_classes == 2 {
        let scores: Vec<f64> = predictions
            .iter()
            .flat_map(|p| (0..p.num_frames()).map(move |t| p.probs.get(t, 1).as_f64()))
            .collect();
        let positives: Vec<bool> = gold.iter().flatten().map(|&l| l == 1).collect();
        report.aucpr = match aucpr(&scores, &positives) {
            Ok(v) => Some(v),
            Err(Error::NoPositives) => None,
            Err(e) => return Err(e),
        };
    }
    Ok(report)
}

/// Average precision `Σ (R_n − R_{n−1})·P_n` over a descending sweep of
/// distinct score thresholds.
pub fn aucpr(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(Error::LengthMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(positives[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CallSegment {
    pub clip_id: String,
    pub start: f64,
    pub end: f64,
    pub label: usize,
    pub confidence: f64,
}

/// Maximal runs of one predicted call class lasting at least `min_dur`
/// seconds.
pub fn to_segments<S: Real>(clip_id: &str, posteriors: &PosteriorMatrix<S>, min_dur: f64) -> Vec<CallSegment> {
    let labels = posteriors.predicted_labels();
    let mut out = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let label = labels[t];
        let start = t;
        while t < labels.len() && labels[t] == label {
            t += 1;
        }
        if label == 0 {
            continue;
        }
        let frames = t - start;
        // compare in frame units so 0.1 s equals five frames exactly
        if (frames as f64) + 1e-9 < min_dur / FRAME_SECONDS {
            continue;
        }
        let confidence = (start..t).map(|i| posteriors.probs.get(i, label).as_f64()).sum::<f64>() / frames as f64;
        out.push(CallSegment {
            clip_id: clip_id.to_string(),
            start: start as f64 * FRAME_SECONDS,
            end: t as f64 * FRAME_SECONDS,
            label,
            confidence,
        });
    }
    out
}

/// TSV with a header row; `names` maps class indices to label strings.
pub fn format_segments(segments: &[CallSegment], names: impl Fn(usize) -> String) -> String {
    let mut out = String::from("clip_id\tstart\tend\tlabel\tconfidence\n");
    for s in segments {
        out.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{}\t{:.6}\n",
            s.clip_id,
            s.start,
            s.end,
            names(s.label),
            s.confidence
        ));
    }
    out
}
