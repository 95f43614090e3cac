//! Attention pooling: each token set collapses to the softmax-weighted sum of
//! its rows, weighted by a learned scoring vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    linear, linear_pullback, matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_pullback, LinearParams,
    Matrix, ParamSet, Real,
};

/// Scoring vector `C → 1` without bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PoolParams<T> {
    pub score: LinearParams<T>,
}

impl<T: Real> PoolParams<T> {
    pub fn zeros(c: usize) -> Self {
        PoolParams {
            score: LinearParams::zeros(c, 1, false),
        }
    }

    pub fn init(rng: &mut impl Rng, c: usize) -> Self {
        PoolParams {
            score: LinearParams::init(rng, c, 1, false),
        }
    }

    pub fn channels(&self) -> usize {
        self.score.d_in()
    }

    pub fn zeros_like(&self) -> Self {
        PoolParams {
            score: self.score.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> PoolParams<U> {
        PoolParams {
            score: self.score.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.score.validate()?;
        if self.score.d_out() != 1 {
            return Err(Error::shape("attention_pool", "score must map to one value"));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for PoolParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        self.score.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.score.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct PoolTrace<T> {
    /// `1 × k` softmax weights.
    weights: Matrix<T>,
}

fn pool_one<T: Real>(params: &PoolParams<T>, tokens: &Matrix<T>) -> Result<(Matrix<T>, PoolTrace<T>)> {
    if tokens.rows() == 0 {
        return Err(Error::shape("attention_pool", "empty token group"));
    }
    let scores = linear(tokens, &params.score)?.transpose();
    let weights = softmax_rows(&scores);
    let out = matmul(&weights, tokens)?;
    Ok((out, PoolTrace { weights }))
}

/// Single pooled `1 × C` row.
pub fn attention_pool<T: Real>(params: &PoolParams<T>, tokens: &Matrix<T>) -> Result<Matrix<T>> {
    pool_one(params, tokens).map(|(o, _)| o)
}

/// One pooled row per group, `V × C`.
pub fn attention_pool_groups_forward<T: Real>(
    params: &PoolParams<T>,
    groups: &[Matrix<T>],
) -> Result<(Matrix<T>, Vec<PoolTrace<T>>)> {
    params.validate()?;
    if groups.is_empty() {
        return Err(Error::shape("attention_pool", "no token groups"));
    }
    let c = params.channels();
    let mut data = Vec::with_capacity(groups.len() * c);
    let mut traces = Vec::with_capacity(groups.len());
    for g in groups {
        let (row, tr) = pool_one(params, g)?;
        data.extend(row.into_vec());
        traces.push(tr);
    }
    Ok((Matrix::from_vec(groups.len(), c, data)?, traces))
}

pub fn attention_pool_groups<T: Real>(params: &PoolParams<T>, groups: &[Matrix<T>]) -> Result<Matrix<T>> {
    attention_pool_groups_forward(params, groups).map(|(o, _)| o)
}

/// Returns per-group token gradients and accumulates into `grads`.
pub fn attention_pool_groups_pullback<T: Real>(
    params: &PoolParams<T>,
    groups: &[Matrix<T>],
    traces: &[PoolTrace<T>],
    d_out: &Matrix<T>,
    grads: &mut PoolParams<T>,
) -> Result<Vec<Matrix<T>>> {
    let mut d_groups = Vec::with_capacity(groups.len());
    for (v, (tokens, tr)) in groups.iter().zip(traces).enumerate() {
        let dy = d_out.slice_rows(v, v + 1);
        let mut d_tokens = matmul_tn(&tr.weights, &dy)?;
        let d_weights = matmul_nt(&dy, tokens)?;
        let d_scores = softmax_rows_pullback(&tr.weights, &d_weights)?.transpose();
        d_tokens.add_assign(&linear_pullback(tokens, &params.score, &d_scores, &mut grads.score)?)?;
        d_groups.push(d_tokens);
    }
    Ok(d_groups)
}
