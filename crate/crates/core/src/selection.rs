//! Variance-weighted multi-attribute host selection.
//!
//! Each candidate host is described by `(Ca, q, q_f)`. Columns are min-max
//! normalized over the candidate set, weights are each column's share of the
//! total (population) variance, and the candidate with the lowest weighted
//! sum wins. Ties go to the smallest id.

use crate::model::{ServerId, ServerState};
use crate::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateMatrix {
    pub ids: Vec<ServerId>,
    /// Raw `(Ca_s, q_s, q_tf + q_rf)` per candidate.
    pub rows: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightVector {
    pub epsilon: f64,
    pub delta: f64,
    pub rho: f64,
}

impl WeightVector {
    pub const EQUAL: WeightVector = WeightVector { epsilon: 1.0 / 3.0, delta: 1.0 / 3.0, rho: 1.0 / 3.0 };

    fn as_array(&self) -> [f64; 3] {
        [self.epsilon, self.delta, self.rho]
    }
}

impl CandidateMatrix {
    pub fn new(ids: Vec<ServerId>, rows: Vec<[f64; 3]>) -> Self {
        assert_eq!(ids.len(), rows.len());
        Self { ids, rows }
    }

    pub fn from_states<'a>(states: impl IntoIterator<Item = &'a ServerState>, kappa: f64) -> Self {
        let (ids, rows) = states
            .into_iter()
            .map(|s| (s.id, [s.compute_cost(kappa), s.q_proc, s.q_fwd()]))
            .unzip();
        Self { ids, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Min-max normalized copy of the rows; constant columns become zeros.
    pub fn normalized(&self) -> Vec<[f64; 3]> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for r in &self.rows {
            for j in 0..3 {
                lo[j] = lo[j].min(r[j]);
                hi[j] = hi[j].max(r[j]);
            }
        }
        self.rows
            .iter()
            .map(|r| {
                let mut out = [0.0; 3];
                for j in 0..3 {
                    let span = hi[j] - lo[j];
                    if span > 0.0 {
                        out[j] = (r[j] - lo[j]) / span;
                    }
                }
                out
            })
            .collect()
    }
}

fn population_variance(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn weights_of_normalized(norm: &[[f64; 3]]) -> WeightVector {
    if norm.is_empty() {
        return WeightVector::EQUAL;
    }
    let var: Vec<f64> = (0..3).map(|j| population_variance(norm.iter().map(move |r| r[j]))).collect();
    let total: f64 = var.iter().sum();
    if total <= 0.0 {
        return WeightVector::EQUAL;
    }
    WeightVector { epsilon: var[0] / total, delta: var[1] / total, rho: var[2] / total }
}

pub fn compute_weights(m: &CandidateMatrix) -> WeightVector {
    weights_of_normalized(&m.normalized())
}

/// Weighted sum of an already-normalized row; lower is better.
pub fn utility(row: &[f64; 3], w: &WeightVector) -> f64 {
    row.iter().zip(w.as_array()).map(|(x, wj)| x * wj).sum()
}

pub fn select_host(m: &CandidateMatrix) -> Result<ServerId, Error> {
    if m.is_empty() {
        return Err(Error::NoCandidates);
    }
    let norm = m.normalized();
    let w = weights_of_normalized(&norm);
    let mut best: Option<(f64, ServerId)> = None;
    for (row, &id) in norm.iter().zip(&m.ids) {
        let u = utility(row, &w);
        best = match best {
            Some((bu, bid)) if bu < u || (bu == u && bid < id) => Some((bu, bid)),
            _ => Some((u, id)),
        };
    }
    Ok(best.unwrap().1)
}
