//! Differentiable primitives. Every op validates shapes, computes its
//! forward values, and, when any input is on a gradient path, records its
//! backward step on the tape.
//!
//! Shapes are deliberately narrow: 1-D vectors and 2-D row-major matrices,
//! which is all the models here need. `add` broadcasts a trailing-dim
//! vector over rows and a scalar over anything; nothing else broadcasts.

use rand::Rng;

use crate::error::{AutogradError, Result};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn shape_err(op: &'static str, details: String) -> AutogradError {
    AutogradError::ShapeMismatch { op, details }
}

/// out = a @ b for [m,k]x[k,n] -> [m,n]; 1-D operands contract as
/// [k]x[k,n] -> [n] and [m,k]x[k] -> [m].
pub fn matmul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k_a) = match a.shape() {
        [k] => (1, *k),
        [m, k] => (*m, *k),
        s => {
            return Err(shape_err("matmul", format!("lhs must be 1-D or 2-D, got {s:?}")));
        }
    };
    let (k_b, n) = match b.shape() {
        [k] => (*k, 1),
        [k, n] => (*k, *n),
        s => {
            return Err(shape_err("matmul", format!("rhs must be 1-D or 2-D, got {s:?}")));
        }
    };
    if k_a != k_b {
        return Err(shape_err(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let k = k_a;
    let out_shape = match (a.ndim(), b.ndim()) {
        (2, 2) => vec![m, n],
        (1, 2) => vec![n],
        (2, 1) => vec![m],
        _ => {
            return Err(shape_err(
                "matmul",
                format!("vector-vector contraction unsupported: {:?} x {:?}", a.shape(), b.shape()),
            ));
        }
    };

    let mut out_vals = vec![0.0; m * n];
    {
        let av = a.values();
        let bv = b.values();
        dgemm_rm(m, k, n, &av, (k as isize, 1), &bv, (n as isize, 1), 0.0, &mut out_vals);
    }
    let out = Tensor::from_vec(out_shape, out_vals)?;

    if a.requires_grad() || b.requires_grad() {
        let out = out.clone().requiring_grad();
        let (a, b) = (a.clone(), b.clone());
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let aliased = Tensor::same_storage(&a, &b);
            if a.requires_grad() {
                // dA += dC @ B^T
                let bv = if aliased { b.to_vec() } else { Vec::new() };
                let bref = b.values();
                let bs: &[f64] = if aliased { &bv } else { &bref };
                a.grad_mut(|ga| {
                    dgemm_rm(m, n, k, &g, (n as isize, 1), bs, (1, n as isize), 1.0, ga);
                });
            }
            if b.requires_grad() {
                // dB += A^T @ dC
                let av = if aliased { a.to_vec() } else { Vec::new() };
                let aref = a.values();
                let as_: &[f64] = if aliased { &av } else { &aref };
                b.grad_mut(|gb| {
                    dgemm_rm(k, m, n, as_, (1, k as isize), &g, (n as isize, 1), 1.0, gb);
                });
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Row-major dgemm: c = a @ b + beta * c, with explicit strides so
/// transposed views need no copies.
fn dgemm_rm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Elementwise sum. Also accepts rhs `[c]` against lhs `[r, c]` (broadcast
/// over rows) and a scalar rhs `[1]` against anything.
pub fn add(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    enum Mode {
        Same,
        RowVec,
        Scalar,
    }
    let mode = if a.shape() == b.shape() {
        Mode::Same
    } else if b.numel() == 1 {
        Mode::Scalar
    } else if a.ndim() == 2 && b.ndim() == 1 && a.cols() == b.cols() {
        Mode::RowVec
    } else {
        return Err(shape_err(
            "add",
            format!("incompatible shapes {:?} + {:?}", a.shape(), b.shape()),
        ));
    };

    let out_vals: Vec<f64> = {
        let av = a.values();
        let bv = b.values();
        match mode {
            Mode::Same => av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect(),
            Mode::Scalar => av.iter().map(|x| x + bv[0]).collect(),
            Mode::RowVec => {
                let c = a.cols();
                av.iter().enumerate().map(|(i, x)| x + bv[i % c]).collect()
            }
        }
    };
    let out = Tensor::from_vec(a.shape().to_vec(), out_vals)?;

    if a.requires_grad() || b.requires_grad() {
        let out = out.clone().requiring_grad();
        let (a, b) = (a.clone(), b.clone());
        let out_handle = out.clone();
        let cols = a.cols();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            if a.requires_grad() {
                a.accumulate_grad(&g);
            }
            if b.requires_grad() {
                if b.numel() == g.len() {
                    b.accumulate_grad(&g);
                } else if b.numel() == 1 {
                    b.accumulate_grad(&[g.iter().sum()]);
                } else {
                    let mut gb = vec![0.0; b.numel()];
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % cols] += gi;
                    }
                    b.accumulate_grad(&gb);
                }
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Elementwise product; shapes must match exactly.
pub fn mul(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            "mul",
            format!("incompatible shapes {:?} * {:?}", a.shape(), b.shape()),
        ));
    }
    let out_vals: Vec<f64> = {
        let av = a.values();
        let bv = b.values();
        av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
    };
    let out = Tensor::from_vec(a.shape().to_vec(), out_vals)?;

    if a.requires_grad() || b.requires_grad() {
        let out = out.clone().requiring_grad();
        let (a, b) = (a.clone(), b.clone());
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            // snapshot values first: a and b may be the same tensor
            let bv = b.to_vec();
            let av = a.to_vec();
            if a.requires_grad() {
                a.grad_mut(|ga| {
                    for ((ga_i, g_i), b_i) in ga.iter_mut().zip(&g).zip(&bv) {
                        *ga_i += g_i * b_i;
                    }
                });
            }
            if b.requires_grad() {
                b.grad_mut(|gb| {
                    for ((gb_i, g_i), a_i) in gb.iter_mut().zip(&g).zip(&av) {
                        *gb_i += g_i * a_i;
                    }
                });
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Multiplies by a compile-time constant (no gradient for the factor).
pub fn scale(tape: &Tape, x: &Tensor, factor: f64) -> Tensor {
    let out_vals: Vec<f64> = x.values().iter().map(|v| v * factor).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), out_vals).expect("scale preserves shape");
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            x.grad_mut(|gx| {
                for (gx_i, g_i) in gx.iter_mut().zip(&g) {
                    *gx_i += factor * g_i;
                }
            });
        });
        return out;
    }
    out
}

/// Sum of all elements, as a `[1]` scalar tensor.
pub fn sum(tape: &Tape, x: &Tensor) -> Tensor {
    let total: f64 = x.values().iter().sum();
    let out = Tensor::scalar(total);
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            x.grad_mut(|gx| {
                for gx_i in gx.iter_mut() {
                    *gx_i += g[0];
                }
            });
        });
        return out;
    }
    out
}

/// Concatenation along the last dimension. All parts must be 1-D, or all
/// 2-D with the same number of rows.
pub fn concat_last(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(AutogradError::EmptySequence);
    }
    let ndim = parts[0].ndim();
    let rows = parts[0].rows();
    for p in parts {
        if p.ndim() != ndim || p.rows() != rows {
            return Err(shape_err(
                "concat",
                format!(
                    "parts disagree: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                ),
            ));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.cols()).collect();
    let total: usize = widths.iter().sum();
    let mut out_vals = vec![0.0; rows * total];
    let mut offset = 0;
    for (p, w) in parts.iter().zip(&widths) {
        let pv = p.values();
        for r in 0..rows {
            out_vals[r * total + offset..r * total + offset + w]
                .copy_from_slice(&pv[r * w..(r + 1) * w]);
        }
        offset += w;
    }
    let out_shape = if ndim == 1 { vec![total] } else { vec![rows, total] };
    let out = Tensor::from_vec(out_shape, out_vals)?;

    if parts.iter().any(|p| p.requires_grad()) {
        let out = out.clone().requiring_grad();
        let parts: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let mut offset = 0;
            for p in &parts {
                let w = p.cols();
                if p.requires_grad() {
                    p.grad_mut(|gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                }
                offset += w;
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Contiguous column slice of a 2-D tensor.
pub fn slice_cols(tape: &Tape, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if x.ndim() != 2 || start + len > x.cols() {
        return Err(shape_err(
            "slice_cols",
            format!("cols {}..{} out of {:?}", start, start + len, x.shape()),
        ));
    }
    let rows = x.rows();
    let c = x.cols();
    let mut out_vals = vec![0.0; rows * len];
    {
        let xv = x.values();
        for r in 0..rows {
            out_vals[r * len..(r + 1) * len].copy_from_slice(&xv[r * c + start..r * c + start + len]);
        }
    }
    let out = Tensor::from_vec(vec![rows, len], out_vals)?;
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            x.grad_mut(|gx| {
                for r in 0..rows {
                    for j in 0..len {
                        gx[r * c + start + j] += g[r * len + j];
                    }
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

fn unary_elementwise(
    tape: &Tape,
    x: &Tensor,
    f: fn(f64) -> f64,
    dydx_from_y: fn(f64) -> f64,
) -> Tensor {
    let out_vals: Vec<f64> = x.values().iter().map(|&v| f(v)).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), out_vals).expect("elementwise preserves shape");
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let y = out_handle.to_vec();
            x.grad_mut(|gx| {
                for ((gx_i, g_i), y_i) in gx.iter_mut().zip(&g).zip(&y) {
                    *gx_i += g_i * dydx_from_y(*y_i);
                }
            });
        });
        return out;
    }
    out
}

pub fn sigmoid(tape: &Tape, x: &Tensor) -> Tensor {
    unary_elementwise(tape, x, |v| 1.0 / (1.0 + (-v).exp()), |y| y * (1.0 - y))
}

pub fn tanh(tape: &Tape, x: &Tensor) -> Tensor {
    unary_elementwise(tape, x, f64::tanh, |y| 1.0 - y * y)
}

/// Gathers rows of an embedding table: `table[ids[i], :]` stacked into
/// `[ids.len(), dim]`. Gradient scatters back into the gathered rows.
pub fn embedding_gather(tape: &Tape, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    if table.ndim() != 2 {
        return Err(shape_err(
            "embedding_gather",
            format!("table must be 2-D, got {:?}", table.shape()),
        ));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
        return Err(shape_err(
            "embedding_gather",
            format!("id {bad} out of range for table with {v} rows"),
        ));
    }
    let n = ids.len();
    let mut out_vals = vec![0.0; n * d];
    {
        let tv = table.values();
        for (i, &id) in ids.iter().enumerate() {
            out_vals[i * d..(i + 1) * d].copy_from_slice(&tv[id * d..(id + 1) * d]);
        }
    }
    let out = Tensor::from_vec(vec![n, d], out_vals)?;
    if table.requires_grad() {
        let out = out.clone().requiring_grad();
        let table = table.clone();
        let ids = ids.to_vec();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            table.grad_mut(|gt| {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[id * d + j] += g[i * d + j];
                    }
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

/// Inverted dropout. At train time each activation is zeroed independently
/// with probability `p` and survivors are scaled by 1/(1-p); at eval time
/// (and at p = 0) the input passes through untouched.
pub fn dropout<R: Rng>(
    tape: &Tape,
    x: &Tensor,
    p: f64,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if !(0.0..1.0).contains(&p) {
        return Err(AutogradError::InvalidDropout { p });
    }
    if !train || p == 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 / keep })
        .collect();
    let out_vals: Vec<f64> = x.values().iter().zip(&mask).map(|(v, m)| v * m).collect();
    let out = Tensor::from_vec(x.shape().to_vec(), out_vals)?;
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            x.grad_mut(|gx| {
                for ((gx_i, g_i), m_i) in gx.iter_mut().zip(&g).zip(&mask) {
                    *gx_i += g_i * m_i;
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

/// Row-wise softmax with optional per-entry validity mask, stabilized by
/// max subtraction. Masked entries come out exactly 0; each row of valid
/// entries sums to 1. A 1-D input is treated as a single row.
pub fn softmax_rows(tape: &Tape, x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let rows = x.rows();
    let cols = x.cols();
    if let Some(m) = mask {
        if m.len() != rows * cols {
            return Err(shape_err(
                "softmax",
                format!("mask length {} != {} entries", m.len(), rows * cols),
            ));
        }
    }
    let valid = |r: usize, c: usize| mask.map_or(true, |m| m[r * cols + c]);

    let mut out_vals = vec![0.0; rows * cols];
    {
        let xv = x.values();
        for r in 0..rows {
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if valid(r, c) {
                    max = max.max(xv[r * cols + c]);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(AutogradError::InvalidMask { row: r });
            }
            let mut denom = 0.0;
            for c in 0..cols {
                if valid(r, c) {
                    let e = (xv[r * cols + c] - max).exp();
                    out_vals[r * cols + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                if valid(r, c) {
                    out_vals[r * cols + c] /= denom;
                }
            }
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), out_vals)?;

    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let mask: Option<Vec<bool>> = mask.map(|m| m.to_vec());
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let y = out_handle.to_vec();
            let valid = |r: usize, c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
            x.grad_mut(|gx| {
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..cols {
                        if valid(r, c) {
                            dot += g[r * cols + c] * y[r * cols + c];
                        }
                    }
                    for c in 0..cols {
                        if valid(r, c) {
                            gx[r * cols + c] += y[r * cols + c] * (g[r * cols + c] - dot);
                        }
                    }
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

/// Negative log-likelihood summed over unmasked rows:
/// `-sum_i mask_i * ln(probs[i, labels[i]])`. Masked rows contribute 0 and
/// their labels are not inspected.
pub fn cross_entropy_masked(
    tape: &Tape,
    probs: &Tensor,
    labels: &[usize],
    mask: &[bool],
) -> Result<Tensor> {
    let rows = probs.rows();
    let cols = probs.cols();
    if labels.len() != rows || mask.len() != rows {
        return Err(shape_err(
            "cross_entropy",
            format!(
                "{} prob rows vs {} labels / {} mask entries",
                rows,
                labels.len(),
                mask.len()
            ),
        ));
    }
    let mut total = 0.0;
    {
        let pv = probs.values();
        for r in 0..rows {
            if !mask[r] {
                continue;
            }
            let label = labels[r];
            if label >= cols {
                return Err(AutogradError::LabelOutOfRange {
                    row: r,
                    label,
                    classes: cols,
                });
            }
            total -= pv[r * cols + label].ln();
        }
    }
    let out = Tensor::scalar(total);
    if probs.requires_grad() {
        let out = out.clone().requiring_grad();
        let probs = probs.clone();
        let labels = labels.to_vec();
        let mask = mask.to_vec();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let pv = probs.to_vec();
            probs.grad_mut(|gp| {
                for r in 0..rows {
                    if mask[r] {
                        let idx = r * cols + labels[r];
                        gp[idx] -= g[0] / pv[idx];
                    }
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

/// Per-row dot product of two equally shaped 2-D tensors: out[i] = a[i,:].b[i,:].
pub fn rowwise_dot(tape: &Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.ndim() != 2 {
        return Err(shape_err(
            "rowwise_dot",
            format!("need matching 2-D shapes, got {:?} . {:?}", a.shape(), b.shape()),
        ));
    }
    let (rows, cols) = (a.rows(), a.cols());
    let mut out_vals = vec![0.0; rows];
    {
        let av = a.values();
        let bv = b.values();
        for r in 0..rows {
            out_vals[r] = av[r * cols..(r + 1) * cols]
                .iter()
                .zip(&bv[r * cols..(r + 1) * cols])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    let out = Tensor::from_vec(vec![rows], out_vals)?;
    if a.requires_grad() || b.requires_grad() {
        let out = out.clone().requiring_grad();
        let (a, b) = (a.clone(), b.clone());
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let av = a.to_vec();
            let bv = b.to_vec();
            if a.requires_grad() {
                a.grad_mut(|ga| {
                    for r in 0..rows {
                        for c in 0..cols {
                            ga[r * cols + c] += g[r] * bv[r * cols + c];
                        }
                    }
                });
            }
            if b.requires_grad() {
                b.grad_mut(|gb| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gb[r * cols + c] += g[r] * av[r * cols + c];
                        }
                    }
                });
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Scales row i of a 2-D tensor by the constant `factors[i]`.
pub fn scale_rows(tape: &Tape, x: &Tensor, factors: &[f64]) -> Result<Tensor> {
    if x.ndim() != 2 || factors.len() != x.rows() {
        return Err(shape_err(
            "scale_rows",
            format!("{} factors vs shape {:?}", factors.len(), x.shape()),
        ));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut out_vals = vec![0.0; rows * cols];
    {
        let xv = x.values();
        for r in 0..rows {
            for c in 0..cols {
                out_vals[r * cols + c] = xv[r * cols + c] * factors[r];
            }
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), out_vals)?;
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let factors = factors.to_vec();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            x.grad_mut(|gx| {
                for r in 0..rows {
                    for c in 0..cols {
                        gx[r * cols + c] += g[r * cols + c] * factors[r];
                    }
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

/// Scales row i of `x` by the differentiable per-row factor `f[i]`.
pub fn mul_rows(tape: &Tape, x: &Tensor, f: &Tensor) -> Result<Tensor> {
    if x.ndim() != 2 || f.ndim() != 1 || f.cols() != x.rows() {
        return Err(shape_err(
            "mul_rows",
            format!("factors {:?} vs shape {:?}", f.shape(), x.shape()),
        ));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let mut out_vals = vec![0.0; rows * cols];
    {
        let xv = x.values();
        let fv = f.values();
        for r in 0..rows {
            for c in 0..cols {
                out_vals[r * cols + c] = xv[r * cols + c] * fv[r];
            }
        }
    }
    let out = Tensor::from_vec(x.shape().to_vec(), out_vals)?;
    if x.requires_grad() || f.requires_grad() {
        let out = out.clone().requiring_grad();
        let (x, f) = (x.clone(), f.clone());
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            let xv = x.to_vec();
            let fv = f.to_vec();
            if x.requires_grad() {
                x.grad_mut(|gx| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[r * cols + c] * fv[r];
                        }
                    }
                });
            }
            if f.requires_grad() {
                f.grad_mut(|gf| {
                    for r in 0..rows {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += g[r * cols + c] * xv[r * cols + c];
                        }
                        gf[r] += acc;
                    }
                });
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Row-wise choice: row i of the output comes from `on_true` where
/// `flags[i]` holds and from `on_false` otherwise. Gradients route the
/// same way. Used to carry recurrent state through padded steps.
pub fn select_rows(
    tape: &Tape,
    flags: &[bool],
    on_true: &Tensor,
    on_false: &Tensor,
) -> Result<Tensor> {
    if on_true.shape() != on_false.shape() || on_true.ndim() != 2 || flags.len() != on_true.rows() {
        return Err(shape_err(
            "select_rows",
            format!(
                "{} flags vs shapes {:?} / {:?}",
                flags.len(),
                on_true.shape(),
                on_false.shape()
            ),
        ));
    }
    let (rows, cols) = (on_true.rows(), on_true.cols());
    let mut out_vals = vec![0.0; rows * cols];
    {
        let tv = on_true.values();
        let fv = on_false.values();
        for r in 0..rows {
            let src = if flags[r] { &tv } else { &fv };
            out_vals[r * cols..(r + 1) * cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
        }
    }
    let out = Tensor::from_vec(on_true.shape().to_vec(), out_vals)?;
    if on_true.requires_grad() || on_false.requires_grad() {
        let out = out.clone().requiring_grad();
        let (t, f) = (on_true.clone(), on_false.clone());
        let flags = flags.to_vec();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            if t.requires_grad() {
                t.grad_mut(|gt| {
                    for r in 0..rows {
                        if flags[r] {
                            for c in 0..cols {
                                gt[r * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                });
            }
            if f.requires_grad() {
                f.grad_mut(|gf| {
                    for r in 0..rows {
                        if !flags[r] {
                            for c in 0..cols {
                                gf[r * cols + c] += g[r * cols + c];
                            }
                        }
                    }
                });
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Stacks k same-length vectors as the columns of an `[r, k]` matrix.
pub fn stack_cols(tape: &Tape, parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(AutogradError::EmptySequence);
    }
    let rows = parts[0].cols();
    for p in parts {
        if p.ndim() != 1 || p.cols() != rows {
            return Err(shape_err(
                "stack_cols",
                format!("parts must be [{}] vectors, got {:?}", rows, p.shape()),
            ));
        }
    }
    let k = parts.len();
    let mut out_vals = vec![0.0; rows * k];
    for (j, p) in parts.iter().enumerate() {
        let pv = p.values();
        for r in 0..rows {
            out_vals[r * k + j] = pv[r];
        }
    }
    let out = Tensor::from_vec(vec![rows, k], out_vals)?;
    if parts.iter().any(|p| p.requires_grad()) {
        let out = out.clone().requiring_grad();
        let parts: Vec<Tensor> = parts.iter().map(|&p| p.clone()).collect();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            for (j, p) in parts.iter().enumerate() {
                if p.requires_grad() {
                    p.grad_mut(|gp| {
                        for r in 0..rows {
                            gp[r] += g[r * k + j];
                        }
                    });
                }
            }
        });
        return Ok(out);
    }
    Ok(out)
}

/// Extracts column j of a 2-D tensor as a vector.
pub fn col(tape: &Tape, x: &Tensor, j: usize) -> Result<Tensor> {
    if x.ndim() != 2 || j >= x.cols() {
        return Err(shape_err(
            "col",
            format!("column {j} out of shape {:?}", x.shape()),
        ));
    }
    let (rows, cols) = (x.rows(), x.cols());
    let out_vals: Vec<f64> = {
        let xv = x.values();
        (0..rows).map(|r| xv[r * cols + j]).collect()
    };
    let out = Tensor::from_vec(vec![rows], out_vals)?;
    if x.requires_grad() {
        let out = out.clone().requiring_grad();
        let x = x.clone();
        let out_handle = out.clone();
        tape.record(move || {
            let Some(g) = out_handle.grad() else { return };
            x.grad_mut(|gx| {
                for r in 0..rows {
                    gx[r * cols + j] += g[r];
                }
            });
        });
        return Ok(out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, vals: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, vals).unwrap()
    }

    #[test]
    fn matmul_known_product() {
        let tape = Tape::new();
        let a = t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = t(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&tape, &a, &b).unwrap();
        assert_eq!(c.to_vec(), vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_vector_forms() {
        let tape = Tape::new();
        let v = t(vec![2], vec![1.0, 2.0]);
        let m = t(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let vm = matmul(&tape, &v, &m).unwrap();
        assert_eq!(vm.shape(), &[3]);
        assert_eq!(vm.to_vec(), vec![1.0, 2.0, 0.0]);

        let w = t(vec![3], vec![1.0, 1.0, 1.0]);
        let mv = matmul(&tape, &m, &w).unwrap();
        assert_eq!(mv.shape(), &[2]);
        assert_eq!(mv.to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let tape = Tape::new();
        let a = t(vec![2, 3], vec![0.0; 6]);
        let b = t(vec![2, 2], vec![0.0; 4]);
        let err = matmul(&tape, &a, &b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
    }

    #[test]
    fn concat_basic() {
        let tape = Tape::new();
        let a = t(vec![2], vec![1.0, 2.0]);
        let b = t(vec![1], vec![3.0]);
        let c = concat_last(&tape, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3]);
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_2d_and_slice_round_trip() {
        let tape = Tape::new();
        let a = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(vec![2, 1], vec![5.0, 6.0]);
        let c = concat_last(&tape, &[&a, &b]).unwrap();
        assert_eq!(c.to_vec(), vec![1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = slice_cols(&tape, &c, 0, 2).unwrap();
        assert_eq!(back.to_vec(), a.to_vec());
    }

    #[test]
    fn analytic_points() {
        let tape = Tape::new();
        let x = t(vec![1], vec![0.0]);
        assert_eq!(sigmoid(&tape, &x).item(), 0.5);
        assert_eq!(tanh(&tape, &x).item(), 0.0);
    }

    #[test]
    fn dropout_eval_and_p0_are_identity() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = t(vec![4], vec![1.0, -2.0, 3.0, -4.0]);
        let eval = dropout(&tape, &x, 0.5, false, &mut rng).unwrap();
        assert_eq!(eval.to_vec(), x.to_vec());
        let p0 = dropout(&tape, &x, 0.0, true, &mut rng).unwrap();
        assert_eq!(p0.to_vec(), x.to_vec());
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = t(vec![1000], vec![1.0; 1000]);
        let y = dropout(&tape, &x, 0.5, true, &mut rng).unwrap();
        let v = y.to_vec();
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        assert!(kept > 400 && kept < 600, "kept {kept} of 1000 at p=0.5");
    }

    #[test]
    fn dropout_rejects_bad_p() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = t(vec![1], vec![1.0]);
        assert!(dropout(&tape, &x, 1.0, true, &mut rng).is_err());
        assert!(dropout(&tape, &x, -0.1, true, &mut rng).is_err());
    }

    #[test]
    fn softmax_symmetry_and_hand_values() {
        let tape = Tape::new();
        let x = t(vec![2], vec![0.0, 0.0]);
        assert_eq!(softmax_rows(&tape, &x, None).unwrap().to_vec(), vec![0.5, 0.5]);

        let x = t(vec![2], vec![0.0, 3.0_f64.ln()]);
        let y = softmax_rows(&tape, &x, None).unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_masked_hand_value() {
        let tape = Tape::new();
        let x = t(vec![3], vec![5.0, 7.0, 9.0]);
        let y = softmax_rows(&tape, &x, Some(&[true, true, false]))
            .unwrap()
            .to_vec();
        let e2 = (-2.0_f64).exp();
        assert!((y[0] - e2 / (1.0 + e2)).abs() < 1e-12);
        assert!((y[1] - 1.0 / (1.0 + e2)).abs() < 1e-12);
        assert_eq!(y[2], 0.0);
    }

    #[test]
    fn softmax_all_masked_row_errors() {
        let tape = Tape::new();
        let x = t(vec![2], vec![1.0, 2.0]);
        let err = softmax_rows(&tape, &x, Some(&[false, false])).unwrap_err();
        assert!(matches!(err, AutogradError::InvalidMask { row: 0 }));
    }

    #[test]
    fn cross_entropy_hand_values() {
        let tape = Tape::new();
        // certain prediction -> 0
        let p = t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let l = cross_entropy_masked(&tape, &p, &[0, 1], &[true, true]).unwrap();
        assert_eq!(l.item(), 0.0);

        // uniform 3-class, single unmasked token -> ln 3
        let p = t(vec![1, 3], vec![1.0 / 3.0; 3]);
        let l = cross_entropy_masked(&tape, &p, &[2], &[true]).unwrap();
        assert!((l.item() - 3.0_f64.ln()).abs() < 1e-12);

        // masked second token contributes nothing -> ln 2
        let p = t(vec![2, 2], vec![0.5, 0.5, 0.9, 0.1]);
        let l = cross_entropy_masked(&tape, &p, &[0, 1], &[true, false]).unwrap();
        assert!((l.item() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let tape = Tape::new();
        let p = t(vec![1, 2], vec![0.5, 0.5]);
        let err = cross_entropy_masked(&tape, &p, &[2], &[true]).unwrap_err();
        assert!(matches!(err, AutogradError::LabelOutOfRange { .. }));
        // out-of-range label on a masked row is never inspected
        let p = t(vec![1, 2], vec![0.5, 0.5]);
        assert!(cross_entropy_masked(&tape, &p, &[9], &[false]).is_ok());
    }

    #[test]
    fn select_rows_carries_state() {
        let tape = Tape::new();
        let a = t(vec![2, 2], vec![1.0, 1.0, 2.0, 2.0]);
        let b = t(vec![2, 2], vec![9.0, 9.0, 8.0, 8.0]);
        let y = select_rows(&tape, &[true, false], &a, &b).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 8.0, 8.0]);
    }

    #[test]
    fn stack_and_col_are_inverse() {
        let tape = Tape::new();
        let a = t(vec![2], vec![1.0, 2.0]);
        let b = t(vec![2], vec![3.0, 4.0]);
        let m = stack_cols(&tape, &[&a, &b]).unwrap();
        assert_eq!(m.shape(), &[2, 2]);
        assert_eq!(col(&tape, &m, 1).unwrap().to_vec(), vec![3.0, 4.0]);
    }

    #[test]
    fn add_broadcast_forms() {
        let tape = Tape::new();
        let m = t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let v = t(vec![2], vec![10.0, 20.0]);
        let s = t(vec![1], vec![100.0]);
        assert_eq!(add(&tape, &m, &v).unwrap().to_vec(), vec![11.0, 22.0, 13.0, 24.0]);
        assert_eq!(add(&tape, &m, &s).unwrap().to_vec(), vec![101.0, 102.0, 103.0, 104.0]);
        assert!(add(&tape, &m, &t(vec![3], vec![0.0; 3])).is_err());
    }

    #[test]
    fn backward_through_matmul_matches_hand_gradient() {
        // loss = sum(A @ B); dA = ones @ B^T, dB = A^T @ ones
        let tape = Tape::new();
        let a = Tensor::parameter(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::parameter(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&tape, &a, &b).unwrap();
        let loss = sum(&tape, &c);
        tape.backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![11.0, 15.0, 11.0, 15.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn backward_through_aliased_matmul() {
        // loss = sum(x @ x) at x = [[2]]: d/dx (x^2) = 2x = 4
        let tape = Tape::new();
        let x = Tensor::parameter(vec![1, 1], vec![2.0]).unwrap();
        let y = matmul(&tape, &x, &x).unwrap();
        let loss = sum(&tape, &y);
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0]);
    }

    #[test]
    fn embedding_gather_scatters_gradient() {
        let tape = Tape::new();
        let table = Tensor::parameter(vec![3, 2], vec![0.0; 6]).unwrap();
        let g = embedding_gather(&tape, &table, &[2, 0, 2]).unwrap();
        let loss = sum(&tape, &g);
        tape.backward(&loss).unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn embedding_gather_rejects_bad_id() {
        let tape = Tape::new();
        let table = t(vec![3, 2], vec![0.0; 6]);
        assert!(embedding_gather(&tape, &table, &[3]).is_err());
    }
}
