//! Turns the frozen classifier's global attention over a sentence into
//! target-dependent binary pseudo-labels: reweight by distance to the
//! target, renormalize, threshold at 1/n.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("target span ({start},{end}) invalid for sentence of length {n}")]
    BadSpan { start: usize, end: usize, n: usize },
    #[error("alpha has {got} entries for sentence of length {n}")]
    LengthMismatch { got: usize, n: usize },
    #[error("alpha is not a distribution: {reason}")]
    NotADistribution { reason: String },
    #[error("reweighted attention sums to zero")]
    DegenerateWeights,
}

/// Binary latent-opinion decision per token, with the evidence behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentOpinionLabels {
    /// Renormalized target-weighted attention; sums to 1.
    pub beta: Vec<f64>,
    /// 1 where beta_i >= 1/n.
    pub labels: Vec<u8>,
    /// The 1/n threshold used.
    pub threshold: f64,
}

/// Distance weights c_i = 1 - d_i/n, where d_i is the distance to the
/// nearest target token (0 inside the span). All weights lie in (0, 1].
pub fn distance_weights(n: usize, target_span: (usize, usize)) -> Vec<f64> {
    let (start, end) = target_span;
    (0..n)
        .map(|i| {
            let d = if i < start {
                start - i
            } else if i > end {
                i - end
            } else {
                0
            };
            1.0 - d as f64 / n as f64
        })
        .collect()
}

/// beta_i = c_i * alpha_i / sum_j c_j * alpha_j.
pub fn reweight_and_normalize(alpha: &[f64], c: &[f64]) -> Result<Vec<f64>, TransformError> {
    if alpha.len() != c.len() {
        return Err(TransformError::LengthMismatch { got: alpha.len(), n: c.len() });
    }
    if let Some(a) = alpha.iter().find(|a| !a.is_finite() || **a < 0.0) {
        return Err(TransformError::NotADistribution { reason: format!("entry {a}") });
    }
    let total: f64 = alpha.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(TransformError::NotADistribution { reason: format!("sums to {total}") });
    }
    let weighted: Vec<f64> = alpha.iter().zip(c).map(|(a, ci)| ci * a).collect();
    let denom: f64 = weighted.iter().sum();
    if denom == 0.0 {
        return Err(TransformError::DegenerateWeights);
    }
    Ok(weighted.into_iter().map(|w| w / denom).collect())
}

/// y_i = 1 iff beta_i >= 1/n. The comparison is a direct float >=: an
/// exact tie at the threshold is labeled 1.
pub fn binarize(beta: &[f64], n: usize) -> Vec<u8> {
    let threshold = 1.0 / n as f64;
    beta.iter().map(|&b| u8::from(b >= threshold)).collect()
}

/// Full pipeline over the unpadded sentence: distance weights, attention
/// reweighting, renormalization, 1/n thresholding.
pub fn transform(
    alpha: &[f64],
    target_span: (usize, usize),
    n: usize,
) -> Result<LatentOpinionLabels, TransformError> {
    let (start, end) = target_span;
    if n == 0 || start > end || end >= n {
        return Err(TransformError::BadSpan { start, end, n });
    }
    if alpha.len() != n {
        return Err(TransformError::LengthMismatch { got: alpha.len(), n });
    }
    let c = distance_weights(n, target_span);
    let beta = reweight_and_normalize(alpha, &c)?;
    let labels = binarize(&beta, n);
    Ok(LatentOpinionLabels { beta, labels, threshold: 1.0 / n as f64 })
}

/// Per-token inspection rows: token, alpha, c, beta, y^a, gold tag —
/// TAB-separated, one line per token.
pub fn format_inspect_lines(
    tokens: &[String],
    alpha: &[f64],
    target_span: (usize, usize),
    gold_bio: &[&str],
) -> Result<String, TransformError> {
    let n = tokens.len();
    let c = distance_weights(n, target_span);
    let out = transform(alpha, target_span, n)?;
    let mut buf = String::new();
    for i in 0..n {
        buf.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            tokens[i], alpha[i], c[i], out.beta[i], out.labels[i], gold_bio[i]
        ));
    }
    Ok(buf)
}
