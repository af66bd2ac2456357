//! Stacked LSTM over per-frame features and the per-stream classifier.

use rand::Rng;

use crate::error::{Error, Result};
use crate::spatial::{uniform_bound, Affine};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One LSTM layer. Gate columns are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams<P = Tensor> {
    /// `[in × 4h]`
    pub input: P,
    /// `[h × 4h]`
    pub recurrent: P,
    /// `[4h]`
    pub bias: P,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStackParams<P = Tensor> {
    pub layers: Vec<LstmLayerParams<P>>,
}

/// Maps the flattened `q_1 .. q_T` (`T·h`) to `K` logits.
pub type ClassifierParams<P = Tensor> = Affine<P>;

impl LstmLayerParams {
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let hb = uniform_bound(hidden);
        LstmLayerParams {
            input: Tensor::uniform(&[input, 4 * hidden], uniform_bound(input), rng),
            recurrent: Tensor::uniform(&[hidden, 4 * hidden], hb, rng),
            bias: Tensor::uniform(&[4 * hidden], hb, rng),
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.shape()[0]
    }
}

impl LstmStackParams {
    pub fn init<R: Rng + ?Sized>(input: usize, widths: &[usize], rng: &mut R) -> Self {
        let mut prev = input;
        let layers = widths
            .iter()
            .map(|&w| {
                let layer = LstmLayerParams::init(prev, w, rng);
                prev = w;
                layer
            })
            .collect();
        LstmStackParams { layers }
    }
}

impl<P> LstmStackParams<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut impl FnMut(String, &P) -> Q) -> LstmStackParams<Q> {
        LstmStackParams {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| LstmLayerParams {
                    input: f(format!("{prefix}.{i}.input"), &l.input),
                    recurrent: f(format!("{prefix}.{i}.recurrent"), &l.recurrent),
                    bias: f(format!("{prefix}.{i}.bias"), &l.bias),
                })
                .collect(),
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut P)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.input"), &mut l.input);
            f(format!("{prefix}.{i}.recurrent"), &mut l.recurrent);
            f(format!("{prefix}.{i}.bias"), &mut l.bias);
        }
    }
}

fn lstm_layer(tape: &mut Tape, xs: Var, layer: &LstmLayerParams<Var>) -> Result<Var> {
    let in_width = tape.value(layer.input).dims2().0;
    let (steps, width) = tape.value(xs).dims2();
    if width != in_width {
        return Err(Error::dim(
            "lstm_forward",
            tape.value(xs).shape(),
            tape.value(layer.input).shape(),
        ));
    }
    let hidden = tape.value(layer.recurrent).dims2().0;
    // Input contributions for all steps at once.
    let x_gates = tape.affine(xs, layer.input, layer.bias)?;
    let mut h = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[1, hidden]));
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let xg = tape.gather_rows(x_gates, vec![t])?;
        let hg = tape.matmul(h, layer.recurrent)?;
        let gates = tape.add(xg, hg)?;
        let if_pre = tape.slice_cols(gates, 0, 2 * hidden)?;
        let o_pre = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let ifo_pre = tape.concat_cols(&[if_pre, o_pre])?;
        let ifo = tape.sigmoid(ifo_pre);
        let i = tape.slice_cols(ifo, 0, hidden)?;
        let f = tape.slice_cols(ifo, hidden, 2 * hidden)?;
        let o = tape.slice_cols(ifo, 2 * hidden, 3 * hidden)?;
        let g_pre = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let g = tape.tanh(g_pre);
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c);
        h = tape.mul(o, tc)?;
        outputs.push(h);
    }
    tape.concat_rows(&outputs)
}

/// Runs the stack over `p: [T × A]` from zero initial states and returns
/// the top layer's outputs `[T × h_last]`.
pub fn lstm_forward(tape: &mut Tape, p: Var, params: &LstmStackParams<Var>) -> Result<Var> {
    let mut xs = p;
    for layer in &params.layers {
        xs = lstm_layer(tape, xs, layer)?;
    }
    Ok(xs)
}

/// Flattens `q` in frame order, maps it to logits and applies softmax.
/// Returns a `[1 × K]` probability row.
pub fn classify(tape: &mut Tape, q: Var, params: &ClassifierParams<Var>) -> Result<Var> {
    let numel = tape.value(q).numel();
    if tape.value(params.weight).dims2().0 != numel {
        return Err(Error::dim(
            "classify",
            tape.value(q).shape(),
            tape.value(params.weight).shape(),
        ));
    }
    let flat = tape.reshape(q, &[1, numel])?;
    let logits = params.apply(tape, flat)?;
    Ok(tape.softmax(logits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_lstm(params: &LstmStackParams, p: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = params.map("lstm", &mut |n, t| tape.param(n, t));
        let x = tape.constant(p.clone());
        let q = lstm_forward(&mut tape, x, &bound).unwrap();
        tape.value(q).clone()
    }

    #[test]
    fn zero_input_zero_bias_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = LstmStackParams::init(4, &[5, 3], &mut rng);
        for l in &mut params.layers {
            l.bias = Tensor::zeros(l.bias.shape());
        }
        let q = run_lstm(&params, &Tensor::zeros(&[6, 4]));
        assert_eq!(q, Tensor::zeros(&[6, 3]));
    }

    #[test]
    fn single_step_and_prefix_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = LstmStackParams::init(3, &[4, 4], &mut rng);
        let p = Tensor::uniform(&[5, 3], 1.0, &mut rng);
        let full = run_lstm(&params, &p);
        assert_eq!(full.shape(), &[5, 4]);
        for k in 1..=5 {
            let prefix = Tensor::new(vec![k, 3], p.data()[..3 * k].to_vec()).unwrap();
            let q = run_lstm(&params, &prefix);
            assert_eq!(q.data(), &full.data()[..4 * k]);
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = LstmStackParams::init(3, &[4], &mut rng);
        let mut tape = Tape::new();
        let bound = params.map("lstm", &mut |n, t| tape.param(n, t));
        let x = tape.constant(Tensor::zeros(&[2, 5]));
        assert!(matches!(
            lstm_forward(&mut tape, x, &bound),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn classify_examples() {
        let mut tape = Tape::new();
        let cls = Affine {
            weight: Tensor::zeros(&[6, 3]),
            bias: Tensor::from_vec(vec![0.5, -1.0, 2.0]).unwrap(),
        };
        let bound = cls.map("cls", &mut |n, t| tape.param(n, t));
        let q = tape.constant(Tensor::full(&[2, 3], 0.7));
        let y = classify(&mut tape, q, &bound).unwrap();
        assert_eq!(tape.value(y).data(), cls.bias.softmax().data());

        let mut tape = Tape::new();
        let single = Affine {
            weight: Tensor::full(&[2, 1], 3.0),
            bias: Tensor::zeros(&[1]),
        };
        let bound = single.map("cls", &mut |n, t| tape.param(n, t));
        let q = tape.constant(Tensor::from_rows(&[vec![1.0, -4.0]]).unwrap());
        let y = classify(&mut tape, q, &bound).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0]);

        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(classify(&mut tape, bad, &bound).is_err());
    }
}
