//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::optim::ParameterStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Max coordinates checked per parameter; larger tensors are sampled.
    pub sample_per_param: usize,
    /// Seed for the coordinate sampler (the loss itself must be
    /// deterministic — run with dropout disabled).
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> GradCheckConfig {
        GradCheckConfig { h: 1e-5, sample_per_param: 24, seed: 0x5eed }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compares the tape's gradients of `loss_fn` against central differences
/// (f(θ+h) − f(θ−h)) / 2h on sampled coordinates of every registered
/// parameter. Relative error is |a−n| / max(|a|, |n|, 1e-12).
///
/// `loss_fn` must be a pure function of the parameter values: same values
/// in, bit-identical scalar out.
pub fn gradient_check<F>(
    mut loss_fn: F,
    store: &ParameterStore,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tape) -> Result<Tensor>,
{
    store.clear_grads();
    let tape = Tape::new();
    let loss = loss_fn(&tape)?;
    tape.backward(&loss)?;

    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|(_, t)| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    store.clear_grads();

    let mut eval = |param: &Tensor, i: usize, delta: f64| -> Result<f64> {
        param.apply_values(|v| v[i] += delta);
        let scratch = Tape::new();
        let out = loss_fn(&scratch);
        param.apply_values(|v| v[i] -= delta);
        Ok(out?.item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport { max_rel_err: 0.0, coords_checked: 0, worst: None };

    for (p_idx, (name, param)) in store.iter().enumerate() {
        let n = param.numel();
        let coords: Vec<usize> = if n <= cfg.sample_per_param {
            (0..n).collect()
        } else {
            sample(&mut rng, n, cfg.sample_per_param).into_vec()
        };
        for i in coords {
            let plus = eval(param, i, cfg.h)?;
            let minus = eval(param, i, -cfg.h)?;
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic[p_idx][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((name.to_string(), i));
            }
        }
    }
    Ok(report)
}
