//! Differentiable dense operations. Each forward function has a matching
//! `*_pullback` that maps an output gradient to input gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use super::params::ParamSet;
use crate::error::{Error, Result};

fn check(cond: bool, op: &'static str, detail: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::shape(op, detail()))
    }
}

/// `a · b`.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check(a.cols() == b.rows(), "matmul", || {
        format!("{:?} · {:?}", a.shape(), b.shape())
    })?;
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (p, &av) in arow.iter().enumerate().take(k) {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(p)) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check(a.cols() == b.cols(), "matmul_nt", || {
        format!("{:?} · {:?}ᵀ", a.shape(), b.shape())
    })?;
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let arow = a.row(i);
        for j in 0..b.rows() {
            out[(i, j)] = arow.iter().zip(b.row(j)).map(|(&x, &y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `aᵀ · b`.
pub fn matmul_tn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    check(a.rows() == b.rows(), "matmul_tn", || {
        format!("{:?}ᵀ · {:?}", a.shape(), b.shape())
    })?;
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let brow = b.row(r);
        for (i, &av) in a.row(r).iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out.row_mut(i).iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(out)
}

/// `(dA, dB) = (dO·Bᵀ, Aᵀ·dO)`.
pub fn matmul_pullback<T: Real>(
    a: &Matrix<T>,
    b: &Matrix<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    Ok((matmul_nt(d_out, b)?, matmul_tn(a, d_out)?))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Given softmax output `y`, `dx = y ⊙ (dy − rowsum(dy ⊙ y))`.
pub fn softmax_rows_pullback<T: Real>(y: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    check(y.shape() == dy.shape(), "softmax_pullback", || {
        format!("{:?} vs {:?}", y.shape(), dy.shape())
    })?;
    let mut dx = Matrix::zeros(y.rows(), y.cols());
    for r in 0..y.rows() {
        let (yr, dyr) = (y.row(r), dy.row(r));
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for ((o, &yv), &g) in dx.row_mut(r).iter_mut().zip(yr).zip(dyr) {
            *o = yv * (g - dot);
        }
    }
    Ok(dx)
}

pub fn relu<T: Real>(x: &Matrix<T>) -> Matrix<T> {
    x.map(|v| v.max(T::zero()))
}

/// Passes gradient where the pre-activation was positive.
pub fn relu_pullback<T: Real>(x: &Matrix<T>, dy: &Matrix<T>) -> Result<Matrix<T>> {
    check(x.shape() == dy.shape(), "relu_pullback", || {
        format!("{:?} vs {:?}", x.shape(), dy.shape())
    })?;
    Ok(Matrix::from_fn(x.rows(), x.cols(), |r, c| {
        if x[(r, c)] > T::zero() {
            dy[(r, c)]
        } else {
            T::zero()
        }
    }))
}

fn nonempty<T: Real>(x: &Matrix<T>, op: &'static str) -> Result<()> {
    check(x.rows() > 0 && x.cols() > 0, op, || {
        format!("empty input {:?}", x.shape())
    })
}

/// Column means, `1 × cols`.
pub fn avg_pool_rows<T: Real>(x: &Matrix<T>) -> Result<Matrix<T>> {
    nonempty(x, "avg_pool_rows")?;
    let inv = T::one() / T::lit(x.rows() as f64);
    let sums = x.col_sums();
    Matrix::from_vec(1, x.cols(), sums.into_iter().map(|s| s * inv).collect())
}

pub fn avg_pool_rows_pullback<T: Real>(rows: usize, dy: &Matrix<T>) -> Result<Matrix<T>> {
    check(dy.rows() == 1 && rows > 0, "avg_pool_pullback", || {
        format!("{rows} rows, gradient {:?}", dy.shape())
    })?;
    let inv = T::one() / T::lit(rows as f64);
    Ok(Matrix::from_fn(rows, dy.cols(), |_, c| dy[(0, c)] * inv))
}

/// Column maxima plus the winning row of each column (lowest index on ties).
pub fn max_pool_rows<T: Real>(x: &Matrix<T>) -> Result<(Matrix<T>, Vec<usize>)> {
    nonempty(x, "max_pool_rows")?;
    let mut arg = vec![0usize; x.cols()];
    let mut best = x.row(0).to_vec();
    for r in 1..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    Ok((Matrix::from_vec(1, x.cols(), best)?, arg))
}

pub fn max_pool_rows_pullback<T: Real>(
    rows: usize,
    argmax: &[usize],
    dy: &Matrix<T>,
) -> Result<Matrix<T>> {
    check(dy.rows() == 1 && dy.cols() == argmax.len(), "max_pool_pullback", || {
        format!("{} columns, gradient {:?}", argmax.len(), dy.shape())
    })?;
    let mut dx = Matrix::zeros(rows, argmax.len());
    for (c, &r) in argmax.iter().enumerate() {
        dx[(r, c)] = dy[(0, c)];
    }
    Ok(dx)
}

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct LinearParams<T> {
    pub weight: Matrix<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Real> LinearParams<T> {
    pub fn zeros(d_in: usize, d_out: usize, with_bias: bool) -> Self {
        LinearParams {
            weight: Matrix::zeros(d_in, d_out),
            bias: with_bias.then(|| vec![T::zero(); d_out]),
        }
    }

    /// Uniform `±1/√in` weights, zero bias.
    pub fn init(rng: &mut impl Rng, d_in: usize, d_out: usize, with_bias: bool) -> Self {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        Self::uniform(rng, d_in, d_out, with_bias, bound)
    }

    pub fn uniform(
        rng: &mut impl Rng,
        d_in: usize,
        d_out: usize,
        with_bias: bool,
        bound: f64,
    ) -> Self {
        let weight = Matrix::from_fn(d_in, d_out, |_, _| {
            T::lit(if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
        });
        LinearParams {
            weight,
            bias: with_bias.then(|| vec![T::zero(); d_out]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.cols()
    }

    pub fn cast<U: Real>(&self) -> LinearParams<U> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::lit(v.to_f64())).collect()),
        }
    }

    /// Zeroed container of the same layout, used to hold gradients.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in(), self.d_out(), self.bias.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.bias {
            check(b.len() == self.d_out(), "linear", || {
                format!("bias of length {} for {} outputs", b.len(), self.d_out())
            })?;
        }
        let finite = self.weight.is_finite()
            && self.bias.as_ref().is_none_or(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidArgument("non-finite linear parameters".into()));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for LinearParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        f(self.weight.data());
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.weight.data_mut());
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

pub fn linear<T: Real>(x: &Matrix<T>, p: &LinearParams<T>) -> Result<Matrix<T>> {
    check(x.cols() == p.d_in(), "linear", || {
        format!("input width {} but weight is {:?}", x.cols(), p.weight.shape())
    })?;
    let mut out = matmul(x, &p.weight)?;
    if let Some(b) = &p.bias {
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
    }
    Ok(out)
}

/// Returns `dx` and accumulates weight/bias gradients into `grads`.
pub fn linear_pullback<T: Real>(
    x: &Matrix<T>,
    p: &LinearParams<T>,
    dy: &Matrix<T>,
    grads: &mut LinearParams<T>,
) -> Result<Matrix<T>> {
    let (dx, dw) = matmul_pullback(x, &p.weight, dy)?;
    grads.weight.add_assign(&dw)?;
    if let Some(gb) = &mut grads.bias {
        for (g, s) in gb.iter_mut().zip(dy.col_sums()) {
            *g = *g + s;
        }
    }
    Ok(dx)
}

/// Logit scaling used inside softmax attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogitScale {
    /// `1/√d`.
    #[default]
    InvSqrtDim,
    /// Raw dot products.
    Unit,
}

impl LogitScale {
    pub fn from_unscaled_flag(unscaled_logits: bool) -> Self {
        if unscaled_logits {
            LogitScale::Unit
        } else {
            LogitScale::InvSqrtDim
        }
    }

    pub fn factor<T: Real>(self, d: usize) -> T {
        match self {
            LogitScale::InvSqrtDim => T::one() / T::lit(d as f64).sqrt(),
            LogitScale::Unit => T::one(),
        }
    }
}

/// Values retained by [`attention_forward`] for the pullback.
#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
    pub weights: Matrix<T>,
    pub scale: T,
}

pub fn attention_forward<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    logits: LogitScale,
) -> Result<(Matrix<T>, AttentionCache<T>)> {
    check(q.cols() == k.cols(), "attention", || {
        format!("query width {} vs key width {}", q.cols(), k.cols())
    })?;
    check(k.rows() == v.rows() && k.rows() > 0, "attention", || {
        format!("{} keys vs {} values", k.rows(), v.rows())
    })?;
    let scale: T = logits.factor(q.cols());
    let weights = softmax_rows(&matmul_nt(q, k)?.scale(scale));
    let out = matmul(&weights, v)?;
    Ok((
        out,
        AttentionCache {
            q: q.clone(),
            k: k.clone(),
            v: v.clone(),
            weights,
            scale,
        },
    ))
}

/// `softmax(q·kᵀ·scale)·v`.
pub fn attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    logits: LogitScale,
) -> Result<Matrix<T>> {
    attention_forward(q, k, v, logits).map(|(o, _)| o)
}

/// `(dq, dk, dv)`.
pub fn attention_pullback<T: Real>(
    cache: &AttentionCache<T>,
    d_out: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    let (d_weights, dv) = matmul_pullback(&cache.weights, &cache.v, d_out)?;
    let d_logits = softmax_rows_pullback(&cache.weights, &d_weights)?.scale(cache.scale);
    let dq = matmul(&d_logits, &cache.k)?;
    let dk = matmul_tn(&d_logits, &cache.q)?;
    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::params::{flatten, unflatten};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| StandardNormal.sample(rng))
    }

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                out[(i, j)] = s;
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = randn(&mut rng, 3, 3);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
        let a = Matrix::from_vec(1, 1, vec![2.0f64]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap()[(0, 0)], 6.0);
        let a = randn(&mut rng, 3, 4);
        let b = randn(&mut rng, 4, 2);
        assert!(matmul(&a, &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let z = softmax_rows(&Matrix::<f64>::zeros(1, 3));
        for c in 0..3 {
            assert!((z[(0, c)] - 1.0 / 3.0).abs() < 1e-15);
        }
        let r = softmax_rows(&Matrix::from_vec(1, 2, vec![0.0f64, 3f64.ln()]).unwrap());
        assert!((r[(0, 0)] - 0.25).abs() < 1e-15 && (r[(0, 1)] - 0.75).abs() < 1e-15);
        let x = Matrix::from_vec(1, 3, vec![0.3f64, -1.0, 2.0]).unwrap();
        let shifted = x.map(|v| v + 17.5);
        assert!(softmax_rows(&x).max_abs_diff(&softmax_rows(&shifted)) < 1e-14);
        let huge = Matrix::from_vec(2, 3, vec![1e4f32, -1e4, 5e3, 1e4, 1e4, 1e4]).unwrap();
        let s = softmax_rows(&huge);
        for r in 0..2 {
            assert!((s.row(r).iter().sum::<f32>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn relu_and_pools() {
        let x = Matrix::from_vec(1, 2, vec![-1.0f64, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 2.0]);
        let twice = Matrix::from_vec(2, 2, vec![1.5f64, -2.0, 1.5, -2.0]).unwrap();
        assert_eq!(avg_pool_rows(&twice).unwrap().data(), &[1.5, -2.0]);
        let m = Matrix::from_vec(2, 2, vec![1.0f64, 5.0, 3.0, 2.0]).unwrap();
        let (mx, arg) = max_pool_rows(&m).unwrap();
        assert_eq!(mx.data(), &[3.0, 5.0]);
        assert_eq!(arg, vec![1, 0]);
        let tie = Matrix::from_vec(2, 1, vec![1.0f64, 1.0]).unwrap();
        assert_eq!(max_pool_rows(&tie).unwrap().1, vec![0]);
        assert!(avg_pool_rows(&Matrix::<f64>::zeros(0, 2)).is_err());
        assert!(max_pool_rows(&Matrix::<f64>::zeros(2, 0)).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = randn(&mut rng, 4, 3);
        let id = LinearParams { weight: Matrix::identity(3), bias: None };
        assert_eq!(linear(&x, &id).unwrap(), x);
        let mut z = LinearParams::<f64>::zeros(3, 2, true);
        z.bias = Some(vec![1.0, -1.0]);
        let y = linear(&x, &z).unwrap();
        assert!(y.row_iter().all(|r| r == [1.0, -1.0]));
        let p = LinearParams { weight: randn(&mut rng, 3, 5), bias: Some(vec![0.1; 5]) };
        let mut oracle = naive_matmul(&x, &p.weight);
        for r in 0..4 {
            for c in 0..5 {
                oracle[(r, c)] += 0.1;
            }
        }
        assert!(linear(&x, &p).unwrap().max_abs_diff(&oracle) <= 1e-12);
        assert!(linear(&randn(&mut rng, 2, 2), &p).is_err());
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = randn(&mut rng, 5, 4);
        let k = randn(&mut rng, 1, 4);
        let v = randn(&mut rng, 1, 3);
        let o = attention(&q, &k, &v, LogitScale::InvSqrtDim).unwrap();
        for r in 0..5 {
            assert!(o.row(r).iter().zip(v.row(0)).all(|(a, b)| (a - b).abs() < 1e-15));
        }
        let same_keys = Matrix::from_fn(3, 4, |_, c| c as f64);
        let v = randn(&mut rng, 3, 2);
        let o = attention(&q, &same_keys, &v, LogitScale::Unit).unwrap();
        let mean = avg_pool_rows(&v).unwrap();
        for r in 0..5 {
            assert!((o[(r, 0)] - mean[(0, 0)]).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_naive_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = randn(&mut rng, 4, 8);
        let k = randn(&mut rng, 4, 8);
        let v = randn(&mut rng, 4, 8);
        let scale = 1.0 / 8f64.sqrt();
        let mut expect = Matrix::zeros(4, 8);
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (0..8).map(|c| q[(i, c)] * k[(j, c)]).sum::<f64>() * scale)
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..4 {
                for c in 0..8 {
                    expect[(i, c)] += logits[j].exp() / z * v[(j, c)];
                }
            }
        }
        let got = attention(&q.cast::<f32>(), &k.cast(), &v.cast(), LogitScale::InvSqrtDim).unwrap();
        assert!(got.cast::<f64>().max_abs_diff(&expect) <= 1e-6);
    }

    /// Random scalar loss `Σ R ⊙ f(x)` and its analytic gradient, checked
    /// for every primitive on 20+ random shapes.
    #[test]
    fn pullbacks_pass_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        for trial in 0..24 {
            let (n, k, m) = (1 + trial % 4, 1 + (trial / 2) % 5, 1 + (trial / 3) % 4);
            let a = randn(&mut rng, n, k);
            let b = randn(&mut rng, k, m);
            let r_nm = randn(&mut rng, n, m);
            let r_nk = randn(&mut rng, n, k);

            // matmul in both arguments
            let x0 = [a.data(), b.data()].concat();
            let split = |x: &[f64]| {
                (
                    Matrix::from_vec(n, k, x[..n * k].to_vec()).unwrap(),
                    Matrix::from_vec(k, m, x[n * k..].to_vec()).unwrap(),
                )
            };
            worst = worst.max(
                grad_check(
                    |x| {
                        let (a, b) = split(x);
                        let y = matmul(&a, &b)?;
                        let (da, db) = matmul_pullback(&a, &b, &r_nm)?;
                        Ok((y.hadamard(&r_nm)?.sum(), [da.data(), db.data()].concat()))
                    },
                    &x0,
                    1e-6,
                )
                .unwrap(),
            );

            // softmax ∘ relu on a
            worst = worst.max(
                grad_check(
                    |x| {
                        let a = Matrix::from_vec(n, k, x.to_vec())?;
                        let h = relu(&a);
                        let s = softmax_rows(&h);
                        let ds = softmax_rows_pullback(&s, &r_nk)?;
                        let da = relu_pullback(&a, &ds)?;
                        Ok((s.hadamard(&r_nk)?.sum(), da.into_vec()))
                    },
                    a.data(),
                    1e-6,
                )
                .unwrap(),
            );

            // linear with bias, gradient in all parameters
            let p = LinearParams { weight: b.clone(), bias: Some(vec![0.3; m]) };
            worst = worst.max(
                grad_check(
                    |x| {
                        let mut q = p.clone();
                        unflatten(&mut q, x)?;
                        let y = linear(&a, &q)?;
                        let mut g = q.zeros_like();
                        linear_pullback(&a, &q, &r_nm, &mut g)?;
                        Ok((y.hadamard(&r_nm)?.sum(), flatten(&g)))
                    },
                    &flatten(&p),
                    1e-6,
                )
                .unwrap(),
            );

            // pools
            let r1 = randn(&mut rng, 1, k);
            worst = worst.max(
                grad_check(
                    |x| {
                        let a = Matrix::from_vec(n, k, x.to_vec())?;
                        let (mx, arg) = max_pool_rows(&a)?;
                        let av = avg_pool_rows(&a)?;
                        let mut g = max_pool_rows_pullback(n, &arg, &r1)?;
                        g.add_assign(&avg_pool_rows_pullback(n, &r1)?)?;
                        Ok((mx.hadamard(&r1)?.sum() + av.hadamard(&r1)?.sum(), g.into_vec()))
                    },
                    a.data(),
                    1e-6,
                )
                .unwrap(),
            );

            // attention in q, k, v
            let q = randn(&mut rng, n, k);
            let kk = randn(&mut rng, m + 1, k);
            let v = randn(&mut rng, m + 1, 3);
            let r_o = randn(&mut rng, n, 3);
            let sizes = [n * k, (m + 1) * k];
            let x0 = [q.data(), kk.data(), v.data()].concat();
            worst = worst.max(
                grad_check(
                    |x| {
                        let q = Matrix::from_vec(n, k, x[..sizes[0]].to_vec())?;
                        let kk = Matrix::from_vec(m + 1, k, x[sizes[0]..sizes[0] + sizes[1]].to_vec())?;
                        let v = Matrix::from_vec(m + 1, 3, x[sizes[0] + sizes[1]..].to_vec())?;
                        let (o, cache) = attention_forward(&q, &kk, &v, LogitScale::InvSqrtDim)?;
                        let (dq, dk, dv) = attention_pullback(&cache, &r_o)?;
                        Ok((o.hadamard(&r_o)?.sum(), [dq.data(), dk.data(), dv.data()].concat()))
                    },
                    &x0,
                    1e-6,
                )
                .unwrap(),
            );
        }
        assert!(worst <= 1e-5, "worst relative error {worst:e}");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(v in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
                let n = v.len();
                let m = Matrix::from_vec(1, n, v).unwrap();
                let s = softmax_rows(&m);
                prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
                let s32 = softmax_rows(&m.cast::<f32>());
                prop_assert!((s32.sum() - 1.0).abs() <= 1e-6);
            }

            #[test]
            fn attention_is_convex_combination(seed in 0u64..500) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let q = randn(&mut rng, 3, 4);
                let k = randn(&mut rng, 5, 4);
                let v = randn(&mut rng, 5, 2);
                let (o, cache) = attention_forward(&q, &k, &v, LogitScale::InvSqrtDim).unwrap();
                for r in 0..3 {
                    let w = cache.weights.row(r);
                    prop_assert!(w.iter().all(|&x| x >= 0.0));
                    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                    for c in 0..2 {
                        let lo = (0..5).map(|j| v[(j, c)]).fold(f64::INFINITY, f64::min);
                        let hi = (0..5).map(|j| v[(j, c)]).fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(o[(r, c)] >= lo - 1e-12 && o[(r, c)] <= hi + 1e-12);
                    }
                }
            }
        }
    }
}
