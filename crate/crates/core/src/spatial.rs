//! Per-frame spatial features for one stream.
//!
//! Frames are batched along the row axis: a sequence of `F` frames with
//! `J` nodes each is a `[F·J × width]` matrix whose row `f·J + i` belongs
//! to node `i` of frame `f`. Every operation below treats frames
//! independently, so batching them changes nothing but the op count.
//!
//! Parameter structs are generic over their leaf type: `P = Tensor` holds
//! values, `P = Var` holds the handles of those values bound to a tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `x · weight + bias` with `weight: [in × out]`, `bias: [out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<P = Tensor> {
    pub weight: P,
    pub bias: P,
}

pub type EmbeddingParams<P = Tensor> = Affine<P>;

/// Message function `f`: three affine layers `2M → M → M → M`, tanh
/// after the first two.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageMlpParams<P = Tensor> {
    pub layers: [Affine<P>; 3],
}

/// Node function `g`: a GRU whose input is `[v_i, Σ_j m_ij]` (`2M`) and
/// whose state is `h_i` (`M`). Gate columns are ordered update, reset,
/// candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeGruParams<P = Tensor> {
    /// `[2M × 3M]`
    pub input: P,
    /// `[M × 2M]`, update and reset gates.
    pub state_gates: P,
    /// `[M × M]`, applied to `r ⊙ h` for the candidate.
    pub state_candidate: P,
    /// `[3M]`
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<P = Tensor> {
    /// One learnable gate per node, `[J]`.
    pub mask: P,
    /// `[J·M × A]` reduction of the masked, concatenated node outputs.
    pub reduce: Affine<P>,
}

pub(crate) fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Affine {
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = uniform_bound(input);
        Affine {
            weight: Tensor::uniform(&[input, output], bound, rng),
            bias: Tensor::uniform(&[output], bound, rng),
        }
    }
}

impl<P> Affine<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(String, &P) -> Q) -> Affine<Q> {
        Affine {
            weight: f(format!("{prefix}.weight"), &self.weight),
            bias: f(format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Affine<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.affine(x, self.weight, self.bias)
    }
}

impl MessageMlpParams {
    pub fn init<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        MessageMlpParams {
            layers: [
                Affine::init(2 * m, m, rng),
                Affine::init(m, m, rng),
                Affine::init(m, m, rng),
            ],
        }
    }
}

impl<P> MessageMlpParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(String, &P) -> Q) -> MessageMlpParams<Q> {
        let [a, b, c] = &self.layers;
        MessageMlpParams {
            layers: [
                a.map(&format!("{prefix}.0"), f),
                b.map(&format!("{prefix}.1"), f),
                c.map(&format!("{prefix}.2"), f),
            ],
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

impl MessageMlpParams<Var> {
    /// Messages for a batch of `(h_i, h_j)` pairs given as `[n × 2M]`.
    pub fn apply(&self, tape: &mut Tape, pairs: Var) -> Result<Var> {
        let [l0, l1, l2] = &self.layers;
        let a = l0.apply(tape, pairs)?;
        let a = tape.tanh(a);
        let b = l1.apply(tape, a)?;
        let b = tape.tanh(b);
        l2.apply(tape, b)
    }
}

impl NodeGruParams {
    pub fn init<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Self {
        let state_bound = uniform_bound(m);
        NodeGruParams {
            input: Tensor::uniform(&[2 * m, 3 * m], uniform_bound(2 * m), rng),
            state_gates: Tensor::uniform(&[m, 2 * m], state_bound, rng),
            state_candidate: Tensor::uniform(&[m, m], state_bound, rng),
            bias: Tensor::uniform(&[3 * m], state_bound, rng),
        }
    }
}

impl<P> NodeGruParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(String, &P) -> Q) -> NodeGruParams<Q> {
        NodeGruParams {
            input: f(format!("{prefix}.input"), &self.input),
            state_gates: f(format!("{prefix}.state_gates"), &self.state_gates),
            state_candidate: f(format!("{prefix}.state_candidate"), &self.state_candidate),
            bias: f(format!("{prefix}.bias"), &self.bias),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.input"), &mut self.input);
        f(format!("{prefix}.state_gates"), &mut self.state_gates);
        f(
            format!("{prefix}.state_candidate"),
            &mut self.state_candidate,
        );
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl NodeGruParams<Var> {
    /// One GRU step for every row:
    ///
    /// ```text
    /// z = σ(x Wz + h Uz + bz)
    /// r = σ(x Wr + h Ur + br)
    /// n = tanh(x Wn + (r ⊙ h) Un + bn)
    /// h' = (1 - z) ⊙ h + z ⊙ n
    /// ```
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var, width: usize) -> Result<Var> {
        let m = width;
        let gx = tape.affine(x, self.input, self.bias)?;
        let gh = tape.matmul(h, self.state_gates)?;
        let gx_zr = tape.slice_cols(gx, 0, 2 * m)?;
        let zr = tape.add(gx_zr, gh)?;
        let zr = tape.sigmoid(zr);
        let z = tape.slice_cols(zr, 0, m)?;
        let r = tape.slice_cols(zr, m, 2 * m)?;
        let rh = tape.mul(r, h)?;
        let cand_h = tape.matmul(rh, self.state_candidate)?;
        let cand_x = tape.slice_cols(gx, 2 * m, 3 * m)?;
        let cand = tape.add(cand_x, cand_h)?;
        let n = tape.tanh(cand);
        let keep_gate = tape.one_minus(z)?;
        let keep = tape.mul(keep_gate, h)?;
        let update = tape.mul(z, n)?;
        tape.add(keep, update)
    }
}

impl AttentionParams {
    /// Mask starts at ones (identity gating).
    pub fn init<R: Rng + ?Sized>(j: usize, m: usize, a: usize, rng: &mut R) -> Self {
        AttentionParams {
            mask: Tensor::ones(&[j]),
            reduce: Affine::init(j * m, a, rng),
        }
    }
}

impl<P> AttentionParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(String, &P) -> Q) -> AttentionParams<Q> {
        AttentionParams {
            mask: f(format!("{prefix}.mask"), &self.mask),
            reduce: self.reduce.map(&format!("{prefix}.reduce"), f),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        f(format!("{prefix}.mask"), &mut self.mask);
        self.reduce.visit_mut(&format!("{prefix}.reduce"), f);
    }
}

/// Row indices `(i-side, j-side)` of every ordered pair `j != i` within
/// each of `frames` frames; pairs for node `i` are contiguous with `j`
/// ascending.
pub fn pair_indices(frames: usize, nodes: usize) -> (Vec<usize>, Vec<usize>) {
    let n = frames * nodes * nodes.saturating_sub(1);
    let mut left = Vec::with_capacity(n);
    let mut right = Vec::with_capacity(n);
    for f in 0..frames {
        let base = f * nodes;
        for i in 0..nodes {
            for j in (0..nodes).filter(|&j| j != i) {
                left.push(base + i);
                right.push(base + j);
            }
        }
    }
    (left, right)
}

/// Embeds each row of `inputs` (`[F·J × input_dim]`) into `M` dims.
pub fn embed(tape: &mut Tape, inputs: Var, params: &EmbeddingParams<Var>) -> Result<Var> {
    let expected = tape.value(params.weight).dims2().0;
    let found = tape.value(inputs).dims2().1;
    if expected != found {
        return Err(Error::dim(
            "embed",
            tape.value(inputs).shape(),
            tape.value(params.weight).shape(),
        ));
    }
    params.apply(tape, inputs)
}

/// Recurrent relational network over fully connected nodes.
///
/// Starting from `h⁰ = v`, each of `iterations` rounds computes
/// `m_ij = f(h_i, h_j)` for all ordered pairs `j != i`, sums them per
/// receiving node and updates `h_i ← g(h_i, v_i, Σ_j m_ij)`. Returns the
/// final node states, `[F·J × M]`.
pub fn rrn_forward(
    tape: &mut Tape,
    v: Var,
    nodes: usize,
    iterations: usize,
    message: &MessageMlpParams<Var>,
    gru: &NodeGruParams<Var>,
) -> Result<Var> {
    let (rows, m) = tape.value(v).dims2();
    if nodes == 0 || rows % nodes != 0 {
        return Err(Error::dim("rrn_forward", tape.value(v).shape(), &[nodes]));
    }
    if iterations == 0 {
        return Err(Error::Config("RRN needs at least one iteration".into()));
    }
    let frames = rows / nodes;
    let (left, right) = pair_indices(frames, nodes);
    let mut h = v;
    for _ in 0..iterations {
        let incoming = if nodes > 1 {
            let hi = tape.gather_rows(h, left.clone())?;
            let hj = tape.gather_rows(h, right.clone())?;
            let pairs = tape.concat_cols(&[hi, hj])?;
            let msgs = message.apply(tape, pairs)?;
            tape.sum_row_groups(msgs, nodes - 1)?
        } else {
            tape.constant(Tensor::zeros(&[rows, m]))
        };
        let x = tape.concat_cols(&[v, incoming])?;
        h = gru.step(tape, x, h, m)?;
    }
    Ok(h)
}

/// Scales node `i`'s output by `mask[i]` (skipped when `mask` is `None`),
/// concatenates each frame's nodes into one `J·M` row and reduces it to
/// `A` entries: `[F·J × M] → [F × A]`.
pub fn attend_reduce(
    tape: &mut Tape,
    w: Var,
    nodes: usize,
    mask: Option<Var>,
    reduce: &Affine<Var>,
) -> Result<Var> {
    let (rows, m) = tape.value(w).dims2();
    if rows % nodes != 0 || tape.value(reduce.weight).dims2().0 != nodes * m {
        return Err(Error::dim(
            "attend_reduce",
            tape.value(w).shape(),
            tape.value(reduce.weight).shape(),
        ));
    }
    let scaled = match mask {
        Some(mask) => {
            if tape.value(mask).shape() != [nodes] {
                return Err(Error::dim(
                    "attend_reduce",
                    &[nodes],
                    tape.value(mask).shape(),
                ));
            }
            tape.scale_rows(w, mask)?
        }
        None => w,
    };
    let flat = tape.reshape(scaled, &[rows / nodes, nodes * m])?;
    reduce.apply(tape, flat)
}

/// Bound parameters of the spatial half of a stream.
#[derive(Debug, Clone)]
pub struct SpatialVars {
    pub embedding: EmbeddingParams<Var>,
    pub message: MessageMlpParams<Var>,
    pub gru: NodeGruParams<Var>,
    pub attention: AttentionParams<Var>,
}

/// `embed → rrn_forward → attend_reduce` for every frame: `[T·J × d] → [T × A]`.
pub fn spatial_forward(
    tape: &mut Tape,
    inputs: Var,
    nodes: usize,
    iterations: usize,
    params: &SpatialVars,
    use_mask: bool,
) -> Result<Var> {
    let v = embed(tape, inputs, &params.embedding)?;
    let w = rrn_forward(tape, v, nodes, iterations, &params.message, &params.gru)?;
    let mask = use_mask.then_some(params.attention.mask);
    attend_reduce(tape, w, nodes, mask, &params.attention.reduce)
}

/// Value-level RRN for a single frame, `v: [J × M]`.
pub fn rrn_values(
    v: &Tensor,
    iterations: usize,
    message: &MessageMlpParams,
    gru: &NodeGruParams,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let message = message.map("message", &mut |n, t| tape.param(n, t));
    let gru = gru.map("gru", &mut |n, t| tape.param(n, t));
    let vv = tape.constant(v.clone());
    let out = rrn_forward(&mut tape, vv, v.dims2().0, iterations, &message, &gru)?;
    Ok(tape.value(out).clone())
}
