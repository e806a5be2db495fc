//! LSTM cell and bidirectional wrapper, batched over time: each step is a
//! `[batch, dim]` tensor and the whole batch advances one token at a time.

use rand::Rng;

use crate::error::{AutogradError, Result};
use crate::ops;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One direction's weights: a combined gate matrix `w` of shape
/// `[input + hidden, 4*hidden]` (gate column order i, f, g, o) and a bias
/// `b` of shape `[4*hidden]`. Clones share the underlying tensors.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w: Tensor,
    pub b: Tensor,
    input: usize,
    hidden: usize,
}

impl LstmParams {
    /// Trainable weights drawn from U(-1/sqrt(hidden), 1/sqrt(hidden)).
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> LstmParams {
        let bound = 1.0 / (hidden as f64).sqrt();
        LstmParams {
            w: Tensor::uniform(vec![input + hidden, 4 * hidden], -bound, bound, rng)
                .requiring_grad(),
            b: Tensor::uniform(vec![4 * hidden], -bound, bound, rng).requiring_grad(),
            input,
            hidden,
        }
    }

    /// Wraps existing tensors (checkpoint restore, hand-set tests).
    pub fn from_tensors(input: usize, hidden: usize, w: Tensor, b: Tensor) -> Result<LstmParams> {
        if w.shape() != [input + hidden, 4 * hidden] || b.shape() != [4 * hidden] {
            return Err(AutogradError::ShapeMismatch {
                op: "lstm_cell",
                details: format!(
                    "weights {:?}/{:?} for input {input}, hidden {hidden}",
                    w.shape(),
                    b.shape()
                ),
            });
        }
        Ok(LstmParams { w, b, input, hidden })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }
}

/// One LSTM step over a `[batch, input]` slice. Returns (h, c), each
/// `[batch, hidden]`.
pub fn lstm_cell(
    tape: &Tape,
    p: &LstmParams,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let hd = p.hidden;
    if x.ndim() != 2
        || x.cols() != p.input
        || h_prev.shape() != [x.rows(), hd]
        || c_prev.shape() != [x.rows(), hd]
    {
        return Err(AutogradError::ShapeMismatch {
            op: "lstm_cell",
            details: format!(
                "x {:?}, h {:?}, c {:?} for input {}, hidden {}",
                x.shape(),
                h_prev.shape(),
                c_prev.shape(),
                p.input,
                hd
            ),
        });
    }
    let z = ops::concat_last(tape, &[x, h_prev])?;
    let gates = ops::add(tape, &ops::matmul(tape, &z, &p.w)?, &p.b)?;
    let i = ops::sigmoid(tape, &ops::slice_cols(tape, &gates, 0, hd)?);
    let f = ops::sigmoid(tape, &ops::slice_cols(tape, &gates, hd, hd)?);
    let g = ops::tanh(tape, &ops::slice_cols(tape, &gates, 2 * hd, hd)?);
    let o = ops::sigmoid(tape, &ops::slice_cols(tape, &gates, 3 * hd, hd)?);
    let c = ops::add(tape, &ops::mul(tape, &f, c_prev)?, &ops::mul(tape, &i, &g)?)?;
    let h = ops::mul(tape, &o, &ops::tanh(tape, &c))?;
    Ok((h, c))
}

#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> BiLstmParams {
        BiLstmParams {
            fwd: LstmParams::init(input, hidden, rng),
            bwd: LstmParams::init(input, hidden, rng),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.fwd.hidden
    }
}

/// Runs both directions over a padded batch. `steps[t]` is the
/// `[batch, input]` slice at time t and `mask[t][r]` marks row r valid
/// there. Padded steps leave the recurrent state untouched (the cell
/// output is discarded row-wise), so trailing padding never contaminates
/// real tokens. Output: one `[batch, 2*hidden]` tensor per step.
pub fn bilstm(
    tape: &Tape,
    p: &BiLstmParams,
    steps: &[Tensor],
    mask: &[Vec<bool>],
) -> Result<Vec<Tensor>> {
    if steps.is_empty() {
        return Err(AutogradError::EmptySequence);
    }
    if mask.len() != steps.len() {
        return Err(AutogradError::ShapeMismatch {
            op: "bilstm",
            details: format!("{} steps but {} mask rows", steps.len(), mask.len()),
        });
    }
    let batch = steps[0].rows();
    let hd = p.fwd.hidden;

    let run = |params: &LstmParams, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Tensor>> {
        let mut h = Tensor::zeros(vec![batch, hd]);
        let mut c = Tensor::zeros(vec![batch, hd]);
        let mut out = vec![None; steps.len()];
        for t in order {
            if mask[t].len() != batch {
                return Err(AutogradError::ShapeMismatch {
                    op: "bilstm",
                    details: format!("mask at step {t} has {} rows, batch {batch}", mask[t].len()),
                });
            }
            let (h_new, c_new) = lstm_cell(tape, params, &steps[t], &h, &c)?;
            h = ops::select_rows(tape, &mask[t], &h_new, &h)?;
            c = ops::select_rows(tape, &mask[t], &c_new, &c)?;
            out[t] = Some(h.clone());
        }
        Ok(out.into_iter().map(|o| o.expect("all steps visited")).collect())
    };

    let fwd = run(&p.fwd, &mut (0..steps.len()))?;
    let bwd = run(&p.bwd, &mut (0..steps.len()).rev())?;
    fwd.iter()
        .zip(&bwd)
        .map(|(f, b)| ops::concat_last(tape, &[f, b]))
        .collect()
}
