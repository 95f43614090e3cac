//! Proxy Block and block stacks.
//!
//! ```text
//! F  = F₀ + Bᴾ
//! Q, K, V = F·W_Q, F·W_K, F·W_V        P = P₀·W_P
//! Oᴾ = F + ProxyAttn(Q, K, V, P)
//! O  = Oᴾ + FFN(Oᴾ)                    FFN = Linear(C→hC) · ReLU · Linear(hC→C)
//! ```
//!
//! Projections carry no bias; the FFN layers do. There is no normalisation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{proxy_attention_forward, proxy_attention_pullback, ProxyAttentionCache};
use super::bias::{proxy_bias_pullback, proxy_bias_rows, ProxyBiasParams, ProxyBiasShape};
use crate::error::{Error, Result};
use crate::numerics::{
    linear, linear_pullback, relu, relu_pullback, LinearParams, LogitScale, Matrix, ParamSet, Real,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ProxyBlockParams<T> {
    pub wq: LinearParams<T>,
    pub wk: LinearParams<T>,
    pub wv: LinearParams<T>,
    pub wp: LinearParams<T>,
    pub ffn_in: LinearParams<T>,
    pub ffn_out: LinearParams<T>,
    pub bias: ProxyBiasParams<T>,
}

impl<T: Real> ProxyBlockParams<T> {
    pub fn zeros(shape: ProxyBiasShape, ffn_mult: usize, capacity: usize) -> Self {
        let c = shape.channels();
        let h = c * ffn_mult;
        ProxyBlockParams {
            wq: LinearParams::zeros(c, c, false),
            wk: LinearParams::zeros(c, c, false),
            wv: LinearParams::zeros(c, c, false),
            wp: LinearParams::zeros(c, c, false),
            ffn_in: LinearParams::zeros(c, h, true),
            ffn_out: LinearParams::zeros(h, c, true),
            bias: ProxyBiasParams::zeros(shape, capacity),
        }
    }

    /// Uniform `±1/√fan_in` weights, zero FFN biases, proxy-bias grids drawn
    /// from `U(±bias_bound)`.
    pub fn init(
        rng: &mut impl Rng,
        shape: ProxyBiasShape,
        ffn_mult: usize,
        capacity: usize,
        bias_bound: f64,
    ) -> Self {
        let c = shape.channels();
        let h = c * ffn_mult;
        ProxyBlockParams {
            wq: LinearParams::init(rng, c, c, false),
            wk: LinearParams::init(rng, c, c, false),
            wv: LinearParams::init(rng, c, c, false),
            wp: LinearParams::init(rng, c, c, false),
            ffn_in: LinearParams::init(rng, c, h, true),
            ffn_out: LinearParams::init(rng, h, c, true),
            bias: ProxyBiasParams::random(rng, shape, capacity, bias_bound),
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.d_in()
    }

    pub fn zeros_like(&self) -> Self {
        ProxyBlockParams {
            wq: self.wq.zeros_like(),
            wk: self.wk.zeros_like(),
            wv: self.wv.zeros_like(),
            wp: self.wp.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            bias: self.bias.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> ProxyBlockParams<U> {
        ProxyBlockParams {
            wq: self.wq.cast(),
            wk: self.wk.cast(),
            wv: self.wv.cast(),
            wp: self.wp.cast(),
            ffn_in: self.ffn_in.cast(),
            ffn_out: self.ffn_out.cast(),
            bias: self.bias.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        for (name, l) in [("wq", &self.wq), ("wk", &self.wk), ("wv", &self.wv), ("wp", &self.wp)] {
            l.validate()?;
            if l.weight.shape() != (c, c) {
                return Err(Error::shape("proxy_block", format!("{name} is {:?}", l.weight.shape())));
            }
        }
        self.ffn_in.validate()?;
        self.ffn_out.validate()?;
        if self.ffn_in.d_in() != c
            || self.ffn_out.d_out() != c
            || self.ffn_in.d_out() != self.ffn_out.d_in()
        {
            return Err(Error::shape("proxy_block", "ffn widths"));
        }
        self.bias.validate()?;
        if self.bias.shape.channels() != c {
            return Err(Error::shape(
                "proxy_block",
                format!("bias plane of {} channels for C={c}", self.bias.shape.channels()),
            ));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for ProxyBlockParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        for l in [&self.wq, &self.wk, &self.wv, &self.wp, &self.ffn_in, &self.ffn_out] {
            l.visit(f);
        }
        self.bias.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        for l in [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wp,
            &mut self.ffn_in,
            &mut self.ffn_out,
        ] {
            l.visit_mut(f);
        }
        self.bias.visit_mut(f);
    }
}

/// Intermediates of one block evaluation.
#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    f: Matrix<T>,
    p0: Matrix<T>,
    attn: ProxyAttentionCache<T>,
    op: Matrix<T>,
    hidden_pre: Matrix<T>,
    hidden: Matrix<T>,
}

pub fn proxy_block_forward<T: Real>(
    params: &ProxyBlockParams<T>,
    f0: &Matrix<T>,
    p0: &Matrix<T>,
    logits: LogitScale,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let c = params.channels();
    if f0.cols() != c || p0.cols() != c {
        return Err(Error::shape(
            "proxy_block",
            format!("features {:?}, proxies {:?}, C={c}", f0.shape(), p0.shape()),
        ));
    }
    let f = f0.add(&proxy_bias_rows(&params.bias, f0.rows())?)?;
    let q = linear(&f, &params.wq)?;
    let k = linear(&f, &params.wk)?;
    let v = linear(&f, &params.wv)?;
    let p = linear(p0, &params.wp)?;
    let (attn_out, attn) = proxy_attention_forward(&q, &k, &v, &p, logits)?;
    let op = f.add(&attn_out)?;
    let hidden_pre = linear(&op, &params.ffn_in)?;
    let hidden = relu(&hidden_pre);
    let out = op.add(&linear(&hidden, &params.ffn_out)?)?;
    Ok((
        out,
        BlockCache {
            f,
            p0: p0.clone(),
            attn,
            op,
            hidden_pre,
            hidden,
        },
    ))
}

/// One Proxy Block over cluster features `f0` (`n × C`) guided by proxy
/// tokens `p0` (`n_proxy × C`).
pub fn proxy_block<T: Real>(
    params: &ProxyBlockParams<T>,
    f0: &Matrix<T>,
    p0: &Matrix<T>,
    logits: LogitScale,
) -> Result<Matrix<T>> {
    proxy_block_forward(params, f0, p0, logits).map(|(o, _)| o)
}

/// Gradients of one block: parameters, input features, proxy tokens.
pub struct BlockGrads<T> {
    pub params: ProxyBlockParams<T>,
    pub d_f0: Matrix<T>,
    pub d_p0: Matrix<T>,
}

pub fn proxy_block_backward<T: Real>(
    params: &ProxyBlockParams<T>,
    cache: &BlockCache<T>,
    d_out: &Matrix<T>,
) -> Result<BlockGrads<T>> {
    let mut g = params.zeros_like();

    // O = Oᴾ + FFN(Oᴾ)
    let d_hidden = linear_pullback(&cache.hidden, &params.ffn_out, d_out, &mut g.ffn_out)?;
    let d_hidden_pre = relu_pullback(&cache.hidden_pre, &d_hidden)?;
    let mut d_op = linear_pullback(&cache.op, &params.ffn_in, &d_hidden_pre, &mut g.ffn_in)?;
    d_op.add_assign(d_out)?;

    // Oᴾ = F + ProxyAttn
    let (dq, dk, dv, dp) = proxy_attention_pullback(&cache.attn, &d_op)?;
    let mut d_f = d_op;
    d_f.add_assign(&linear_pullback(&cache.f, &params.wq, &dq, &mut g.wq)?)?;
    d_f.add_assign(&linear_pullback(&cache.f, &params.wk, &dk, &mut g.wk)?)?;
    d_f.add_assign(&linear_pullback(&cache.f, &params.wv, &dv, &mut g.wv)?)?;
    let d_p0 = linear_pullback(&cache.p0, &params.wp, &dp, &mut g.wp)?;

    // F = F₀ + Bᴾ
    proxy_bias_pullback(&params.bias, &d_f, &mut g.bias)?;
    Ok(BlockGrads {
        params: g,
        d_f0: d_f,
        d_p0,
    })
}

/// `F^{l+1} = ProxyBlock(F^l, P)` for every block in order. An empty stack
/// returns `f0` unchanged.
pub fn stack_forward<T: Real>(
    blocks: &[ProxyBlockParams<T>],
    f0: &Matrix<T>,
    p: &Matrix<T>,
    logits: LogitScale,
) -> Result<Matrix<T>> {
    let mut f = f0.clone();
    for b in blocks {
        f = proxy_block(b, &f, p, logits)?;
    }
    Ok(f)
}

pub fn stack_forward_cached<T: Real>(
    blocks: &[ProxyBlockParams<T>],
    f0: &Matrix<T>,
    p: &Matrix<T>,
    logits: LogitScale,
) -> Result<(Matrix<T>, Vec<BlockCache<T>>)> {
    let mut f = f0.clone();
    let mut caches = Vec::with_capacity(blocks.len());
    for b in blocks {
        let (next, cache) = proxy_block_forward(b, &f, p, logits)?;
        caches.push(cache);
        f = next;
    }
    Ok((f, caches))
}

pub struct StackGrads<T> {
    pub blocks: Vec<ProxyBlockParams<T>>,
    pub d_f0: Matrix<T>,
    pub d_p: Matrix<T>,
}

pub fn stack_backward<T: Real>(
    blocks: &[ProxyBlockParams<T>],
    caches: &[BlockCache<T>],
    p: &Matrix<T>,
    d_out: &Matrix<T>,
) -> Result<StackGrads<T>> {
    let mut d = d_out.clone();
    let mut d_p = Matrix::zeros(p.rows(), p.cols());
    let mut grads = Vec::with_capacity(blocks.len());
    for (b, cache) in blocks.iter().zip(caches).rev() {
        let g = proxy_block_backward(b, cache, &d)?;
        d_p.add_assign(&g.d_p0)?;
        d = g.d_f0;
        grads.push(g.params);
    }
    grads.reverse();
    Ok(StackGrads {
        blocks: grads,
        d_f0: d,
        d_p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{flatten, grad_check_value, unflatten};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn shape16() -> ProxyBiasShape {
        ProxyBiasShape::for_channels(16).unwrap()
    }

    #[test]
    fn zero_weights_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ProxyBlockParams::<f64>::zeros(shape16(), 4, 8);
        let f0 = randn(&mut rng, 5, 16);
        let p0 = randn(&mut rng, 3, 16);
        let out = proxy_block(&params, &f0, &p0, LogitScale::InvSqrtDim).unwrap();
        assert_eq!(out, f0);
    }

    #[test]
    fn zero_weights_with_ffn_bias_shift_rows_by_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ProxyBlockParams::<f64>::zeros(shape16(), 2, 8);
        params.ffn_out.bias = Some((0..16).map(|i| i as f64 * 0.1).collect());
        let f0 = randn(&mut rng, 4, 16);
        let out = proxy_block(&params, &f0, &randn(&mut rng, 2, 16), LogitScale::Unit).unwrap();
        let shift = out.sub(&f0).unwrap();
        for r in 1..4 {
            assert!(shift.row(r).iter().zip(shift.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
    }

    #[test]
    fn invariant_to_proxy_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ProxyBlockParams::<f64>::init(&mut rng, shape16(), 2, 6, 0.1);
        let f0 = randn(&mut rng, 6, 16);
        let p0 = randn(&mut rng, 4, 16);
        let perm = p0.gather_rows(&[2, 0, 3, 1]);
        let a = proxy_block(&params, &f0, &p0, LogitScale::InvSqrtDim).unwrap();
        let b = proxy_block(&params, &f0, &perm, LogitScale::InvSqrtDim).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-12);
    }

    #[test]
    fn rejects_bad_shapes() {
        let params = ProxyBlockParams::<f64>::zeros(shape16(), 2, 4);
        let ok = Matrix::zeros(4, 16);
        assert!(proxy_block(&params, &Matrix::zeros(4, 8), &ok, LogitScale::Unit).is_err());
        assert!(proxy_block(&params, &Matrix::zeros(5, 16), &ok, LogitScale::Unit).is_err());
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f0 = randn(&mut rng, 3, 16);
        let out = stack_forward::<f64>(&[], &f0, &randn(&mut rng, 2, 16), LogitScale::Unit).unwrap();
        assert_eq!(out, f0);
    }

    #[test]
    fn stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blocks: Vec<_> = (0..2)
            .map(|_| ProxyBlockParams::<f64>::init(&mut rng, shape16(), 2, 5, 0.3))
            .collect();
        let f0 = randn(&mut rng, 4, 16);
        let p = randn(&mut rng, 3, 16);
        let w = randn(&mut rng, 4, 16);
        let n_params = blocks.num_params();
        let x0 = [flatten(&blocks), f0.data().to_vec(), p.data().to_vec()].concat();
        type Split = (Vec<ProxyBlockParams<f64>>, Matrix<f64>, Matrix<f64>);
        let split = |x: &[f64]| -> Result<Split> {
            let mut b = blocks.clone();
            unflatten(&mut b, &x[..n_params])?;
            let f0 = Matrix::from_vec(4, 16, x[n_params..n_params + 64].to_vec())?;
            let p = Matrix::from_vec(3, 16, x[n_params + 64..].to_vec())?;
            Ok((b, f0, p))
        };
        let (out, caches) = stack_forward_cached(&blocks, &f0, &p, LogitScale::InvSqrtDim).unwrap();
        assert_eq!(out, stack_forward(&blocks, &f0, &p, LogitScale::InvSqrtDim).unwrap());
        let g = stack_backward(&blocks, &caches, &p, &w).unwrap();
        let analytic = [flatten(&g.blocks), g.d_f0.into_vec(), g.d_p.into_vec()].concat();
        let err = grad_check_value(
            |x| {
                let (b, f0, p) = split(x)?;
                stack_forward(&b, &f0, &p, LogitScale::InvSqrtDim)?.hadamard(&w).map(|m| m.sum())
            },
            &analytic,
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err:e}");
    }
}
