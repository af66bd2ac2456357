//! Skeleton sequences: normalization, line features, length fixing,
//! JSON-lines IO and a synthetic generator with separable classes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Joint = [f64; 3];

/// One skeleton: `J` joints in a fixed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkeletonFrame {
    pub joints: Vec<Joint>,
}

impl SkeletonFrame {
    pub fn new(joints: Vec<Joint>) -> Self {
        SkeletonFrame { joints }
    }

    pub fn zeros(num_joints: usize) -> Self {
        SkeletonFrame {
            joints: vec![[0.0; 3]; num_joints],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    pub fn translate(&self, offset: Joint) -> Self {
        SkeletonFrame {
            joints: self
                .joints
                .iter()
                .map(|c| [c[0] + offset[0], c[1] + offset[1], c[2] + offset[2]])
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|x| x.is_finite())
    }
}

/// Per-joint line vectors: for joint `i`, the differences `c_i - c_j` for
/// every `j != i` in ascending `j`, flattened to `3 (J - 1)` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct LineFrame {
    pub lines: Vec<Vec<f64>>,
}

impl LineFrame {
    /// The `(x, y, z)` difference from joint `i` toward joint `j`.
    pub fn block(&self, i: usize, j: usize) -> Joint {
        assert_ne!(i, j, "no line from a joint to itself");
        let slot = if j < i { j } else { j - 1 };
        let v = &self.lines[i];
        [v[3 * slot], v[3 * slot + 1], v[3 * slot + 2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    pub label: usize,
    pub frames: Vec<SkeletonFrame>,
}

impl SkeletonSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn translate(&self, offset: Joint) -> Self {
        SkeletonSequence {
            label: self.label,
            frames: self.frames.iter().map(|f| f.translate(offset)).collect(),
        }
    }
}

/// What a dataset file must conform to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub num_joints: usize,
    pub num_classes: usize,
    pub hip_reference_indices: Vec<usize>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hip_reference_indices.is_empty() {
            return Err(Error::Config(
                "hip_reference_indices must not be empty".into(),
            ));
        }
        if let Some(&bad) = self
            .hip_reference_indices
            .iter()
            .find(|&&i| i >= self.num_joints)
        {
            return Err(Error::Config(format!(
                "hip reference joint {bad} out of range for {} joints",
                self.num_joints
            )));
        }
        Ok(())
    }
}

/// Translates the frame so the mean of the hip reference joints sits at
/// the origin. An all-zero frame maps to itself.
pub fn normalize_frame(frame: &SkeletonFrame, spec: &DatasetSpec) -> Result<SkeletonFrame> {
    if frame.num_joints() != spec.num_joints {
        return Err(Error::Config(format!(
            "frame has {} joints, expected {}",
            frame.num_joints(),
            spec.num_joints
        )));
    }
    spec.validate()?;
    let mut centre = [0.0; 3];
    for &i in &spec.hip_reference_indices {
        for (c, x) in centre.iter_mut().zip(frame.joints[i]) {
            *c += x;
        }
    }
    let n = spec.hip_reference_indices.len() as f64;
    Ok(frame.translate([-centre[0] / n, -centre[1] / n, -centre[2] / n]))
}

pub fn compute_lines(frame: &SkeletonFrame) -> Result<LineFrame> {
    let j = frame.num_joints();
    if j < 2 {
        return Err(Error::Domain(format!(
            "line features need at least 2 joints, got {j}"
        )));
    }
    let lines = frame
        .joints
        .iter()
        .enumerate()
        .map(|(i, ci)| {
            let mut v = Vec::with_capacity(3 * (j - 1));
            for (k, ck) in frame.joints.iter().enumerate() {
                if k != i {
                    v.extend([ci[0] - ck[0], ci[1] - ck[1], ci[2] - ck[2]]);
                }
            }
            v
        })
        .collect();
    Ok(LineFrame { lines })
}

/// Pads with all-zero frames or randomly subsamples (keeping temporal
/// order) so the sequence has exactly `target` frames.
pub fn fix_length(seq: &SkeletonSequence, target: usize, seed: u64) -> Result<SkeletonSequence> {
    if target == 0 {
        return Err(Error::Config("target length T must be positive".into()));
    }
    if seq.is_empty() {
        return Err(Error::Domain(
            "cannot fix the length of an empty sequence".into(),
        ));
    }
    let n = seq.len();
    let frames = if n <= target {
        let joints = seq.frames[0].num_joints();
        let mut frames = seq.frames.clone();
        frames.resize(target, SkeletonFrame::zeros(joints));
        frames
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = index::sample(&mut rng, n, target).into_vec();
        keep.sort_unstable();
        keep.into_iter().map(|i| seq.frames[i].clone()).collect()
    };
    Ok(SkeletonSequence {
        label: seq.label,
        frames,
    })
}

fn validate_sequence(seq: &SkeletonSequence, spec: &DatasetSpec, line: usize) -> Result<()> {
    let fail = |message: String| Err(Error::Parse { line, message });
    if seq.frames.is_empty() {
        return fail("sequence has no frames".into());
    }
    if seq.label >= spec.num_classes {
        return fail(format!(
            "label {} out of range for {} classes",
            seq.label, spec.num_classes
        ));
    }
    for (t, frame) in seq.frames.iter().enumerate() {
        if frame.num_joints() != spec.num_joints {
            return fail(format!(
                "frame {t}: expected {} joints, found {}",
                spec.num_joints,
                frame.num_joints()
            ));
        }
        if !frame.is_finite() {
            return fail(format!("frame {t}: non-finite coordinate"));
        }
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(reader: R, spec: &DatasetSpec) -> Result<Vec<SkeletonSequence>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: SkeletonSequence = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_sequence(&seq, spec, line_no)?;
        out.push(seq);
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, spec: &DatasetSpec) -> Result<Vec<SkeletonSequence>> {
    read_dataset(BufReader::new(File::open(path)?), spec)
}

pub fn write_dataset<W: Write>(mut writer: W, data: &[SkeletonSequence]) -> Result<()> {
    for seq in data {
        let line = serde_json::to_string(seq).map_err(std::io::Error::other)?;
        writeln!(writer, "{line}")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn save_dataset(path: impl AsRef<Path>, data: &[SkeletonSequence]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub classes: usize,
    pub samples_per_class: usize,
    pub joints: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Standard deviation of the Gaussian noise added to every coordinate.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            classes: 2,
            samples_per_class: 20,
            joints: 5,
            min_frames: 6,
            max_frames: 12,
            noise: 0.01,
            seed: 0,
        }
    }
}

const SYNTH_AMPLITUDE: f64 = 0.5;

/// Noise-free class template: joints on a slanted ring, with joint
/// `k mod J` oscillating along axis `k mod 3` at a class-specific rate.
pub fn synthetic_template(class: usize, joints: usize, t: usize) -> SkeletonFrame {
    let moving = class % joints;
    let axis = class % 3;
    let omega = std::f64::consts::PI * (0.25 + 0.2 * class as f64);
    let joints = (0..joints)
        .map(|j| {
            let theta = std::f64::consts::TAU * j as f64 / joints as f64;
            let mut c = [theta.cos(), theta.sin(), 0.2 * j as f64];
            if j == moving {
                c[axis] += SYNTH_AMPLITUDE * (omega * t as f64).sin();
            }
            c
        })
        .collect();
    SkeletonFrame { joints }
}

pub fn generate_synthetic(opts: &SynthOptions) -> Result<Vec<SkeletonSequence>> {
    if opts.classes < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 classes, got {}",
            opts.classes
        )));
    }
    if opts.joints < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs at least 2 joints (line features), got {}",
            opts.joints
        )));
    }
    if opts.min_frames == 0 || opts.min_frames > opts.max_frames {
        return Err(Error::Config(format!(
            "invalid frame range {}..={}",
            opts.min_frames, opts.max_frames
        )));
    }
    if !(opts.noise >= 0.0 && opts.noise.is_finite()) {
        return Err(Error::Config(format!("invalid noise scale {}", opts.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(opts.classes * opts.samples_per_class);
    for _ in 0..opts.samples_per_class {
        for class in 0..opts.classes {
            let len = rng.random_range(opts.min_frames..=opts.max_frames);
            let frames = (0..len)
                .map(|t| {
                    let mut f = synthetic_template(class, opts.joints, t);
                    if opts.noise > 0.0 {
                        for x in f.joints.iter_mut().flatten() {
                            *x += opts.noise * normal.sample(&mut rng);
                        }
                    }
                    f
                })
                .collect();
            out.push(SkeletonSequence {
                label: class,
                frames,
            });
        }
    }
    Ok(out)
}
