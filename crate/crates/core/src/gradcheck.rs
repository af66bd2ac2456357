//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::model::{
    stream_inputs, stream_loss, stream_loss_grads, StreamKind, StreamParams, MASK_PARAM,
};
use crate::seed::{derive_seed, Tag};
use crate::skeleton::{SkeletonFrame, SkeletonSequence};
use crate::tape::OpKind;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;

/// Magnitude below which differences are measured absolutely. Central
/// differences at `ε = 1e-5` carry roughly 1e-10 of rounding and
/// truncation noise, so this keeps near-zero gradients from dominating.
pub const ERROR_FLOOR: f64 = 1e-4;

/// Parameter count above which a full check gets slow.
pub const LARGE_MODEL_PARAMS: usize = 10_000;

/// `|a - n| / max(|a|, |n|, ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Central differences of a scalar function at every element of `x`.
pub fn numeric_gradient(x: &Tensor, epsilon: f64, f: impl Fn(&Tensor) -> f64) -> Tensor {
    let mut g = Tensor::zeros(x.shape());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = f(&probe);
        probe.data_mut()[i] = orig - epsilon;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (up - down) / (2.0 * epsilon);
    }
    g
}

#[derive(Debug, Clone, Serialize)]
pub struct GroupResult {
    pub name: String,
    pub count: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamCheck {
    pub stream: StreamKind,
    pub params: usize,
    pub loss: f64,
    pub groups: Vec<GroupResult>,
}

impl StreamCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// A random sample of exactly `config.frames` frames for checking.
pub fn random_sequence(config: &ModelConfig, rng: &mut impl Rng) -> SkeletonSequence {
    let frames = (0..config.frames)
        .map(|_| {
            SkeletonFrame::new(
                (0..config.joints)
                    .map(|_| {
                        [
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        ]
                    })
                    .collect(),
            )
        })
        .collect();
    SkeletonSequence {
        label: rng.random_range(0..config.classes),
        frames,
    }
}

fn set_element(params: &mut StreamParams, name: &str, index: usize, value: f64) {
    params.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[index] = value;
        }
    });
}

/// Compares tape gradients of the cross-entropy loss with central
/// differences for every parameter of one freshly initialized stream.
/// The mask is drawn from `[0.5, 1.5]` so its gradient is exercised away
/// from the identity. `fault` corrupts one backward rule (negative control).
pub fn check_stream(
    config: &ModelConfig,
    kind: StreamKind,
    seed: u64,
    epsilon: f64,
    fault: Option<OpKind>,
) -> Result<StreamCheck> {
    config.validate()?;
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(seed, &[Tag::GradCheck as u64, kind as u64]));
    let mut params = StreamParams::init(config, kind, &mut rng);
    params.visit_mut(&mut |n, t| {
        if n == MASK_PARAM {
            for m in t.data_mut() {
                *m = rng.random_range(0.5..1.5);
            }
        }
    });
    let seq = random_sequence(config, &mut rng);
    let inputs = stream_inputs(&seq, kind, config)?;
    let out = stream_loss_grads(&params, config, &inputs, seq.label, fault)?;
    let grads = out.grads.expect("gradients requested");

    let layout = params.layout();
    let mut groups = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let Some(analytic) = grads.get(&name) else {
            // Only the frozen mask is absent from the gradient map.
            continue;
        };
        let count: usize = shape.iter().product();
        let errors = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut probe = params.clone();
                let orig = analytic_value(&params, &name, i);
                set_element(&mut probe, &name, i, orig + epsilon);
                let up = stream_loss(&probe, config, &inputs, seq.label)?;
                set_element(&mut probe, &name, i, orig - epsilon);
                let down = stream_loss(&probe, config, &inputs, seq.label)?;
                let numeric = (up - down) / (2.0 * epsilon);
                Ok(relative_error(analytic.data()[i], numeric))
            })
            .collect::<Result<Vec<f64>>>()?;
        groups.push(GroupResult {
            name,
            count,
            max_rel_error: errors.into_iter().fold(0.0, f64::max),
        });
    }
    Ok(StreamCheck {
        stream: kind,
        params: params.num_params(),
        loss: out.loss.expect("label given"),
        groups,
    })
}

fn analytic_value(params: &StreamParams, name: &str, index: usize) -> f64 {
    let mut v = 0.0;
    params.visit(&mut |n, t| {
        if n == name {
            v = t.data()[index];
        }
    });
    v
}
