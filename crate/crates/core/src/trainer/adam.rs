use crate::backbone::{Gradients, ParameterSet, Table};
use crate::linalg::Matrix;

use super::config::AdamParams;

/// Moment accumulators for every parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet) -> Self {
        let zeros = || {
            Table::ALL
                .iter()
                .map(|t| {
                    let m = params.table(*t);
                    Matrix::zeros(m.rows(), m.cols())
                })
                .collect::<Vec<_>>()
        };
        AdamState {
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. Only rows present in `grads` are touched;
/// their moments decay, every other row is left alone.
pub fn adam_step(params: &mut ParameterSet, grads: &Gradients, state: &mut AdamState, lr: f64, cfg: &AdamParams) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (k, table) in Table::ALL.into_iter().enumerate() {
        for (&row, g) in grads.rows(table) {
            let m = state.first[k].row_mut(row);
            let v = state.second[k].row_mut(row);
            let p = params.table_mut(table).row_mut(row);
            for c in 0..g.len() {
                m[c] = cfg.beta1 * m[c] + (1.0 - cfg.beta1) * g[c];
                v[c] = cfg.beta2 * v[c] + (1.0 - cfg.beta2) * g[c] * g[c];
                let m_hat = m[c] / bc1;
                let v_hat = v[c] / bc2;
                p[c] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
    }
}
