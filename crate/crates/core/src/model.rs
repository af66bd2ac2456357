//! Stream parameters, the end-to-end stream forward pass and the model
//! file format.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, Tag};
use crate::skeleton::{compute_lines, fix_length, normalize_frame, SkeletonSequence};
use crate::spatial::{
    spatial_forward, Affine, AttentionParams, EmbeddingParams, MessageMlpParams, NodeGruParams,
    SpatialVars,
};
use crate::tape::{Gradients, OpKind, Tape, Var};
use crate::temporal::{classify, lstm_forward, ClassifierParams, LstmStackParams};
use crate::tensor::Tensor;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamKind {
    Joint,
    Line,
}

impl StreamKind {
    pub const BOTH: [StreamKind; 2] = [StreamKind::Joint, StreamKind::Line];

    /// Per-node feature width: a coordinate triple, or the `J - 1` line
    /// vectors of a joint.
    pub fn input_dim(self, joints: usize) -> usize {
        match self {
            StreamKind::Joint => 3,
            StreamKind::Line => 3 * (joints - 1),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Line => "line",
        }
    }

    pub(crate) fn tag(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Every trainable tensor of one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamParams {
    pub kind: StreamKind,
    pub embedding: EmbeddingParams,
    pub message: MessageMlpParams,
    pub gru: NodeGruParams,
    pub attention: AttentionParams,
    pub lstm: LstmStackParams,
    pub classifier: ClassifierParams,
}

/// A [`StreamParams`] bound to a tape.
#[derive(Debug, Clone)]
pub struct StreamVars {
    pub spatial: SpatialVars,
    pub lstm: LstmStackParams<Var>,
    pub classifier: ClassifierParams<Var>,
}

/// Name of the attention mask in gradient maps and model files.
pub const MASK_PARAM: &str = "attention.mask";

impl StreamParams {
    /// Fan-in scaled uniform initialization, mask at ones.
    pub fn init(config: &ModelConfig, kind: StreamKind, rng: &mut ChaCha8Rng) -> Self {
        let (j, m) = (config.joints, config.embed_dim);
        let embedding = Affine::init(kind.input_dim(j), m, rng);
        let message = MessageMlpParams::init(m, rng);
        let gru = NodeGruParams::init(m, rng);
        let attention = AttentionParams::init(j, m, config.attention_dim, rng);
        let lstm = LstmStackParams::init(config.attention_dim, &config.layer_widths, rng);
        let classifier = Affine::init(config.frames * config.final_width(), config.classes, rng);
        StreamParams {
            kind,
            embedding,
            message,
            gru,
            attention,
            lstm,
            classifier,
        }
    }

    /// Initialization used by training: seeded from the master seed and
    /// the stream kind only, so attention on/off starts identically.
    pub fn seeded(config: &ModelConfig, kind: StreamKind) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            config.rng_seed,
            &[Tag::Init as u64, kind.tag()],
        ));
        StreamParams::init(config, kind, &mut rng)
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &Tensor)) {
        self.bind_with(&mut |name, t| f(name, t));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.embedding.visit_mut("embed", f);
        self.message.visit_mut("message", f);
        self.gru.visit_mut("gru", f);
        self.attention.visit_mut("attention", f);
        self.lstm.visit_mut("lstm", f);
        self.classifier.visit_mut("classifier", f);
    }

    fn bind_with<Q>(
        &self,
        f: &mut impl FnMut(String, &Tensor) -> Q,
    ) -> (SpatialVarsOf<Q>, LstmStackParams<Q>, Affine<Q>) {
        let spatial = SpatialVarsOf {
            embedding: self.embedding.map("embed", f),
            message: self.message.map("message", f),
            gru: self.gru.map("gru", f),
            attention: self.attention.map("attention", f),
        };
        let lstm = self.lstm.map("lstm", f);
        let classifier = self.classifier.map("classifier", f);
        (spatial, lstm, classifier)
    }

    /// `(name, shape)` for every tensor in visiting order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t.shape().to_vec())));
        out
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }

    /// Registers every tensor on `tape`. With `train_mask == false` the
    /// mask is recorded as a constant and gets no gradient.
    pub fn bind(&self, tape: &mut Tape, train_mask: bool) -> StreamVars {
        let (s, lstm, classifier) = self.bind_with(&mut |name, t| {
            if name == MASK_PARAM && !train_mask {
                tape.constant(t.clone())
            } else {
                tape.param(name, t)
            }
        });
        StreamVars {
            spatial: SpatialVars {
                embedding: s.embedding,
                message: s.message,
                gru: s.gru,
                attention: s.attention,
            },
            lstm,
            classifier,
        }
    }
}

struct SpatialVarsOf<Q> {
    embedding: Affine<Q>,
    message: MessageMlpParams<Q>,
    gru: NodeGruParams<Q>,
    attention: AttentionParams<Q>,
}

/// Hip-centres every frame and, for the line stream, replaces joints by
/// their line vectors. Returns `[T·J × input_dim]` rows in frame-major
/// order. Frames are expected to be length-fixed already.
pub fn stream_inputs(
    seq: &SkeletonSequence,
    kind: StreamKind,
    config: &ModelConfig,
) -> Result<Tensor> {
    if seq.len() != config.frames {
        return Err(Error::Contract(format!(
            "sequence has {} frames, model expects {}",
            seq.len(),
            config.frames
        )));
    }
    let spec = config.dataset_spec();
    let j = config.joints;
    let d = kind.input_dim(j);
    let mut data = Vec::with_capacity(seq.len() * j * d);
    for frame in &seq.frames {
        let frame = normalize_frame(frame, &spec)?;
        match kind {
            StreamKind::Joint => data.extend(frame.joints.iter().flatten()),
            StreamKind::Line => data.extend(compute_lines(&frame)?.lines.into_iter().flatten()),
        }
    }
    Tensor::new(vec![seq.len() * j, d], data)
}

/// Output of one stream on one sample.
#[derive(Debug, Clone)]
pub struct StreamOutput {
    pub probs: Vec<f64>,
    pub loss: Option<f64>,
    pub grads: Option<Gradients>,
}

fn run_stream(
    params: &StreamParams,
    config: &ModelConfig,
    inputs: &Tensor,
    label: Option<usize>,
    want_grads: bool,
    fault: Option<OpKind>,
) -> Result<StreamOutput> {
    let mut tape = Tape::with_fault(fault);
    let vars = params.bind(&mut tape, config.attention);
    let x = tape.constant(inputs.clone());
    let p = spatial_forward(
        &mut tape,
        x,
        config.joints,
        config.rrn_iterations,
        &vars.spatial,
        config.attention,
    )?;
    let q = lstm_forward(&mut tape, p, &vars.lstm)?;
    let y = classify(&mut tape, q, &vars.classifier)?;
    let probs = tape.value(y).data().to_vec();
    let (loss, grads) = match label {
        Some(label) => {
            let l = tape.cross_entropy(y, label)?;
            let grads = if want_grads {
                Some(tape.backward(l)?)
            } else {
                None
            };
            (Some(tape.value(l).data()[0]), grads)
        }
        None => (None, None),
    };
    Ok(StreamOutput { probs, loss, grads })
}

/// Class probabilities of one stream for prepared inputs.
pub fn stream_probs(
    params: &StreamParams,
    config: &ModelConfig,
    inputs: &Tensor,
) -> Result<Vec<f64>> {
    Ok(run_stream(params, config, inputs, None, false, None)?.probs)
}

/// Cross-entropy loss of one stream, without gradients.
pub fn stream_loss(
    params: &StreamParams,
    config: &ModelConfig,
    inputs: &Tensor,
    label: usize,
) -> Result<f64> {
    Ok(
        run_stream(params, config, inputs, Some(label), false, None)?
            .loss
            .expect("label given"),
    )
}

/// Loss, probabilities and parameter gradients for one sample.
pub fn stream_loss_grads(
    params: &StreamParams,
    config: &ModelConfig,
    inputs: &Tensor,
    label: usize,
    fault: Option<OpKind>,
) -> Result<StreamOutput> {
    run_stream(params, config, inputs, Some(label), true, fault)
}

/// Full pipeline for one stream: length fixing, normalization, optional
/// lines, then the network. Sampling of long sequences uses `sample_seed`.
pub fn stream_forward(
    seq: &SkeletonSequence,
    params: &StreamParams,
    config: &ModelConfig,
    sample_seed: u64,
) -> Result<Vec<f64>> {
    let fixed = fix_length(seq, config.frames, sample_seed)?;
    let inputs = stream_inputs(&fixed, params.kind, config)?;
    stream_probs(params, config, &inputs)
}

/// One or both trained streams together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub joint: Option<StreamParams>,
    pub line: Option<StreamParams>,
}

impl Model {
    pub fn new(config: ModelConfig, streams: &[StreamKind]) -> Result<Self> {
        config.validate()?;
        let mut model = Model {
            joint: None,
            line: None,
            config,
        };
        for &kind in streams {
            *model.stream_slot(kind) = Some(StreamParams::seeded(&model.config, kind));
        }
        Ok(model)
    }

    pub fn stream(&self, kind: StreamKind) -> Option<&StreamParams> {
        match kind {
            StreamKind::Joint => self.joint.as_ref(),
            StreamKind::Line => self.line.as_ref(),
        }
    }

    pub fn stream_slot(&mut self, kind: StreamKind) -> &mut Option<StreamParams> {
        match kind {
            StreamKind::Joint => &mut self.joint,
            StreamKind::Line => &mut self.line,
        }
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamParams> {
        self.joint.iter().chain(self.line.iter())
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            config: self.config.clone(),
            streams: self
                .streams()
                .map(|s| {
                    let mut tensors = Vec::new();
                    s.visit(&mut |name, t| {
                        tensors.push(NamedTensor {
                            name,
                            shape: t.shape().to_vec(),
                            data: t.data().to_vec(),
                        })
                    });
                    StreamFile {
                        kind: s.kind,
                        tensors,
                    }
                })
                .collect(),
        };
        let mut out = serde_json::to_string(&file).expect("model serializes");
        out.push('\n');
        out
    }

    pub fn from_json(src: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(src).map_err(|e| Error::Load {
            field: "<file>".into(),
            message: e.to_string(),
        })?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Load {
                field: "format_version".into(),
                message: format!(
                    "expected {MODEL_FORMAT_VERSION}, found {}",
                    file.format_version
                ),
            });
        }
        file.config.validate().map_err(|e| Error::Load {
            field: "config".into(),
            message: e.to_string(),
        })?;
        let mut model = Model {
            config: file.config,
            joint: None,
            line: None,
        };
        for stream in file.streams {
            let slot_taken = model.stream(stream.kind).is_some();
            if slot_taken {
                return Err(Error::Load {
                    field: stream.kind.name().into(),
                    message: "stream appears twice".into(),
                });
            }
            let params = load_stream(&model.config, stream)?;
            let kind = params.kind;
            *model.stream_slot(kind) = Some(params);
        }
        if model.joint.is_none() && model.line.is_none() {
            return Err(Error::Load {
                field: "streams".into(),
                message: "model file holds no stream".into(),
            });
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Model::from_json(&std::fs::read_to_string(path)?)
    }
}

fn load_stream(config: &ModelConfig, file: StreamFile) -> Result<StreamParams> {
    let kind = file.kind;
    let mut params = StreamParams::init(config, kind, &mut ChaCha8Rng::seed_from_u64(0));
    let mut tensors: std::collections::BTreeMap<String, NamedTensor> =
        std::collections::BTreeMap::new();
    for t in file.tensors {
        let field = format!("{kind}.{}", t.name);
        if tensors.insert(t.name.clone(), t).is_some() {
            return Err(Error::Load {
                field,
                message: "tensor appears twice".into(),
            });
        }
    }
    let mut failure = None;
    params.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        let field = format!("{kind}.{name}");
        let Some(t) = tensors.remove(&name) else {
            failure = Some(Error::Load {
                field,
                message: "missing tensor".into(),
            });
            return;
        };
        if t.shape != slot.shape() {
            failure = Some(Error::Load {
                field,
                message: format!(
                    "expected shape {:?} from config, found {:?}",
                    slot.shape(),
                    t.shape
                ),
            });
            return;
        }
        match Tensor::new(t.shape, t.data) {
            Ok(v) => *slot = v,
            Err(e) => {
                failure = Some(Error::Load {
                    field,
                    message: e.to_string(),
                })
            }
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Load {
            field: format!("{kind}.{extra}"),
            message: "unexpected tensor".into(),
        });
    }
    Ok(params)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    config: ModelConfig,
    streams: Vec<StreamFile>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamFile {
    kind: StreamKind,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}
