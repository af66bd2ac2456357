//! Score fusion, loss, accuracy and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{stream_forward, Model, StreamKind, StreamParams};
use crate::seed::{derive_seed, Tag};
use crate::skeleton::SkeletonSequence;
use crate::tape::PROB_FLOOR;

/// Tolerance on `alpha + beta = 1`.
const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Weighted average `alpha · y_joint + beta · y_line`.
pub fn fuse(y_joint: &[f64], y_line: &[f64], alpha: f64, beta: f64) -> Result<Vec<f64>> {
    if !(alpha >= 0.0 && beta >= 0.0) || (alpha + beta - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::Config(format!(
            "fusion weights must be non-negative and sum to 1, got {alpha} + {beta}"
        )));
    }
    if y_joint.len() != y_line.len() {
        return Err(Error::dim("fuse", &[y_joint.len()], &[y_line.len()]));
    }
    Ok(y_joint
        .iter()
        .zip(y_line)
        .map(|(a, b)| alpha * a + beta * b)
        .collect())
}

/// `-ln(max(y[label], 1e-12))`
pub fn cross_entropy(y: &[f64], label: usize) -> Result<f64> {
    let p = y.get(label).ok_or_else(|| {
        Error::Contract(format!(
            "label {label} out of range for {} classes",
            y.len()
        ))
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Index of the largest probability; ties go to the lowest class index.
pub fn argmax(y: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in y.iter().enumerate() {
        if p > y[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(predictions: &[Vec<f64>], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(y, &l)| argmax(y) == l)
        .count();
    correct as f64 / labels.len() as f64
}

/// Grid-searches `alpha ∈ {0, 0.05, ..., 1}` for the best fused accuracy (`beta = 1 - alpha`).
/// Ties go to the alpha closest to 0.5, then to the smaller alpha.
pub fn tune_fusion_weights(
    y_joint: &[Vec<f64>],
    y_line: &[Vec<f64>],
    labels: &[usize],
) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Contract(
            "cannot tune fusion weights on an empty validation set".into(),
        ));
    }
    if y_joint.len() != labels.len() || y_line.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} joint / {} line predictions for {} labels",
            y_joint.len(),
            y_line.len(),
            labels.len()
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    for step in 0..=20usize {
        let alpha = step as f64 / 20.0;
        let fused = y_joint
            .iter()
            .zip(y_line)
            .map(|(a, b)| fuse(a, b, alpha, 1.0 - alpha))
            .collect::<Result<Vec<_>>>()?;
        let acc = accuracy(&fused, labels);
        let better = match best {
            None => true,
            Some((s, a)) => acc > a || (acc == a && step.abs_diff(10) < s.abs_diff(10)),
        };
        if better {
            best = Some((step, acc));
        }
    }
    let alpha = best.expect("grid is non-empty").0 as f64 / 20.0;
    Ok((alpha, 1.0 - alpha))
}

/// Per-sample probabilities and accuracies of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub alpha: f64,
    pub beta: f64,
    pub samples: usize,
    pub joint_accuracy: Option<f64>,
    pub line_accuracy: Option<f64>,
    pub fused_accuracy: Option<f64>,
    pub labels: Vec<usize>,
    pub joint_probs: Option<Vec<Vec<f64>>>,
    pub line_probs: Option<Vec<Vec<f64>>>,
    pub fused_probs: Option<Vec<Vec<f64>>>,
}

/// Sampling seed for sample `index` outside training; fixed per model.
pub fn eval_sample_seed(master: u64, index: usize) -> u64 {
    derive_seed(master, &[Tag::EvalSample as u64, index as u64])
}

/// Class probabilities of `params` for every sequence, with the fixed
/// evaluation-time frame sampling.
pub fn stream_predictions(
    params: &StreamParams,
    config: &ModelConfig,
    data: &[SkeletonSequence],
) -> Result<Vec<Vec<f64>>> {
    data.par_iter()
        .enumerate()
        .map(|(i, seq)| stream_forward(seq, params, config, eval_sample_seed(config.rng_seed, i)))
        .collect()
}

pub fn predict_stream(
    model: &Model,
    kind: StreamKind,
    data: &[SkeletonSequence],
) -> Result<Option<Vec<Vec<f64>>>> {
    model
        .stream(kind)
        .map(|params| stream_predictions(params, &model.config, data))
        .transpose()
}

/// Accuracy of each available stream and, when both exist, of their fusion.
pub fn evaluate(
    model: &Model,
    data: &[SkeletonSequence],
    alpha: f64,
    beta: f64,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty dataset".into(),
        ));
    }
    if let Some(seq) = data.iter().find(|s| s.label >= model.config.classes) {
        return Err(Error::Contract(format!(
            "label {} out of range for {} classes",
            seq.label, model.config.classes
        )));
    }
    let labels: Vec<usize> = data.iter().map(|s| s.label).collect();
    let joint = predict_stream(model, StreamKind::Joint, data)?;
    let line = predict_stream(model, StreamKind::Line, data)?;
    let fused = match (&joint, &line) {
        (Some(j), Some(l)) => Some(
            j.iter()
                .zip(l)
                .map(|(a, b)| fuse(a, b, alpha, beta))
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    let acc = |p: &Option<Vec<Vec<f64>>>| p.as_ref().map(|p| accuracy(p, &labels));
    Ok(Evaluation {
        alpha,
        beta,
        samples: data.len(),
        joint_accuracy: acc(&joint),
        line_accuracy: acc(&line),
        fused_accuracy: acc(&fused),
        labels,
        joint_probs: joint,
        line_probs: line,
        fused_probs: fused,
    })
}
