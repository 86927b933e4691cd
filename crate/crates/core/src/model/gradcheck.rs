//! Central finite-difference check of the analytic parameter gradients.

use super::transformer::{Model, TokenBatch};
use crate::error::Result;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is (numerically) zero compare on absolute error instead.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub n_checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: (String, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Perturbs every parameter coordinate by `±eps` and compares the central
/// difference of the loss with the tape gradient.
pub fn check_gradients(model: &Model<f64>, batch: &TokenBatch, eps: f64) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(batch)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        n_checked: 0,
        max_rel_err: 0.0,
        worst: (String::new(), 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for (pi, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = probe.params[pi].data[j];
            probe.params[pi].data[j] = orig + eps;
            let up = probe.loss(batch)?;
            probe.params[pi].data[j] = orig - eps;
            let down = probe.loss(batch)?;
            probe.params[pi].data[j] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = relative_error(g[j], numeric);
            report.n_checked += 1;
            if err > report.max_rel_err || report.n_checked == 1 {
                report.max_rel_err = err;
                report.worst = (model.params[pi].name.clone(), j);
                report.worst_analytic = g[j];
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::ModelConfig;

    #[test]
    fn small_model_gradients_match() {
        let cfg = ModelConfig { n_layers: 1, hidden_size: 8, n_heads: 2, vocab_size: 7, max_seq_len: 6, seed: 1 };
        let model: Model<f64> = Model::init_with_std(cfg, 0.5).unwrap();
        let batch = TokenBatch::from_sequences(&[(vec![1, 4, 2, 5, 3], 3), (vec![1, 6, 2, 3], 3)], 0).unwrap();
        let r = check_gradients(&model, &batch, 1e-4).unwrap();
        assert_eq!(r.n_checked, model.n_params());
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.001) - 0.001 / 1.001).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
