//! Proxy attention `σ(QPᵀ) σ(PKᵀ) V`, evaluated as two ordinary attention
//! passes so that no `N × N` matrix is ever formed:
//!
//! * compression: proxies query the keys, `Vᴾ = Attn(P, K, V)` (`n × C`);
//! * broadcast: the original queries read the proxies, `O = Attn(Q, P, Vᴾ)`.
//!
//! Cost is `O(N·n·C)` for `n` proxies.

use crate::error::{Error, Result};
use crate::numerics::{
    attention_forward, attention_pullback, matmul, matmul_nt, softmax_rows, AttentionCache,
    LogitScale, Matrix, Real,
};

#[derive(Debug, Clone)]
pub struct ProxyAttentionCache<T> {
    pub compression: AttentionCache<T>,
    pub broadcast: AttentionCache<T>,
}

fn check_shapes<T: Real>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>, p: &Matrix<T>) -> Result<()> {
    if q.cols() != k.cols() || p.cols() != k.cols() {
        return Err(Error::shape(
            "proxy_attention",
            format!("widths q={}, k={}, p={}", q.cols(), k.cols(), p.cols()),
        ));
    }
    if k.rows() != v.rows() || k.rows() == 0 || p.rows() == 0 {
        return Err(Error::shape(
            "proxy_attention",
            format!("{} keys, {} values, {} proxies", k.rows(), v.rows(), p.rows()),
        ));
    }
    Ok(())
}

pub fn proxy_attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    p: &Matrix<T>,
    logits: LogitScale,
) -> Result<(Matrix<T>, ProxyAttentionCache<T>)> {
    check_shapes(q, k, v, p)?;
    let (proxy_values, compression) = attention_forward(p, k, v, logits)?;
    let (out, broadcast) = attention_forward(q, p, &proxy_values, logits)?;
    Ok((out, ProxyAttentionCache { compression, broadcast }))
}

pub fn proxy_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    p: &Matrix<T>,
    logits: LogitScale,
) -> Result<Matrix<T>> {
    proxy_attention_forward(q, k, v, p, logits).map(|(o, _)| o)
}

/// Gradients with respect to `(q, k, v, p)`.
pub type ProxyAttentionGrads<T> = (Matrix<T>, Matrix<T>, Matrix<T>, Matrix<T>);

pub fn proxy_attention_pullback<T: Real>(
    cache: &ProxyAttentionCache<T>,
    d_out: &Matrix<T>,
) -> Result<ProxyAttentionGrads<T>> {
    let (dq, mut dp, d_proxy_values) = attention_pullback(&cache.broadcast, d_out)?;
    let (dp_comp, dk, dv) = attention_pullback(&cache.compression, &d_proxy_values)?;
    dp.add_assign(&dp_comp)?;
    Ok((dq, dk, dv, dp))
}

/// The explicit `N × N` product `σ(QPᵀ)·σ(PKᵀ)`. Quadratic in `N`; meant for
/// verification only.
pub fn composite_weights<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    p: &Matrix<T>,
    logits: LogitScale,
) -> Result<Matrix<T>> {
    let scale: T = logits.factor(q.cols());
    let broadcast = softmax_rows(&matmul_nt(q, p)?.scale(scale));
    let compression = softmax_rows(&matmul_nt(p, k)?.scale(scale));
    matmul(&broadcast, &compression)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    #[test]
    fn singleton_returns_value() {
        let q = Matrix::from_vec(1, 2, vec![0.3f64, -0.2]).unwrap();
        let v = Matrix::from_vec(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let o = proxy_attention(&q, &q, &v, &q.scale(2.0), LogitScale::InvSqrtDim).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn composite_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, p) = (randn(&mut rng, 7, 4), randn(&mut rng, 7, 4), randn(&mut rng, 3, 4));
        let w = composite_weights(&q.cast::<f32>(), &k.cast(), &p.cast(), LogitScale::Unit).unwrap();
        for r in 0..7 {
            assert!((w.row(r).iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn streamed_equals_explicit_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v, p) = (
            randn(&mut rng, 6, 4),
            randn(&mut rng, 6, 4),
            randn(&mut rng, 6, 4),
            randn(&mut rng, 2, 4),
        );
        for logits in [LogitScale::Unit, LogitScale::InvSqrtDim] {
            let explicit = matmul(&composite_weights(&q, &k, &p, logits).unwrap(), &v).unwrap();
            let streamed = proxy_attention(&q, &k, &v, &p, logits).unwrap();
            assert!(streamed.max_abs_diff(&explicit) <= 1e-6);
        }
    }

    #[test]
    fn shape_errors() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 4);
        assert!(proxy_attention(&a, &a, &a, &b, LogitScale::Unit).is_err());
        assert!(proxy_attention(&a, &a, &Matrix::zeros(3, 3), &a, LogitScale::Unit).is_err());
        assert!(proxy_attention(&a, &a, &a, &Matrix::zeros(0, 3), LogitScale::Unit).is_err());
    }
}
