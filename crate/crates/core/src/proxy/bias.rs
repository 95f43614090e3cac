//! Proxy bias: an `N × C` additive bias assembled from three small grids.
//!
//! With `C = S² = D⁴`, every row owns a `D × D` grid that is bilinearly
//! upsampled to `S × S`, plus a length-`S` column term and a length-`S` row
//! term broadcast over the `S × S` plane. The plane is flattened row-major
//! into `C` channels. Per row this costs `D² + 2S` parameters instead of `C`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamSet, Real};

/// Side lengths of the bias planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyBiasShape {
    /// Upsampled side; `C = side²`.
    pub side: usize,
    /// Side of the low-resolution grid.
    pub grid: usize,
}

fn exact_root(v: usize) -> Option<usize> {
    let r = (v as f64).sqrt().round() as usize;
    (r * r == v).then_some(r)
}

impl ProxyBiasShape {
    /// `C = S² = D⁴`; anything else is a configuration error.
    pub fn for_channels(c: usize) -> Result<Self> {
        let side = exact_root(c).filter(|&s| s > 0);
        match side.and_then(|s| exact_root(s).map(|d| (s, d))) {
            Some((side, grid)) => Ok(ProxyBiasShape { side, grid }),
            None => Err(Error::InvalidConfig(format!(
                "proxy bias needs C to be a fourth power (C = S² = D⁴), got {c}"
            ))),
        }
    }

    /// Accepts any perfect square `C = S²` and uses `D = ⌊√S⌋`.
    pub fn for_channels_relaxed(c: usize) -> Result<Self> {
        match exact_root(c).filter(|&s| s > 0) {
            Some(side) => Ok(ProxyBiasShape {
                side,
                grid: ((side as f64).sqrt().floor() as usize).max(1),
            }),
            None => Err(Error::InvalidConfig(format!(
                "proxy bias needs C to be a perfect square, got {c}"
            ))),
        }
    }

    pub fn channels(&self) -> usize {
        self.side * self.side
    }

    pub fn params_per_row(&self) -> usize {
        self.grid * self.grid + 2 * self.side
    }
}

/// Learnable bias grids for `capacity` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct ProxyBiasParams<T> {
    pub shape: ProxyBiasShape,
    /// `N × D²`, each row a row-major `D × D` grid.
    pub b_d: Matrix<T>,
    /// `N × S`, broadcast down the columns of the plane.
    pub b_c: Matrix<T>,
    /// `N × S`, broadcast across the rows of the plane.
    pub b_r: Matrix<T>,
}

impl<T: Real> ProxyBiasParams<T> {
    pub fn zeros(shape: ProxyBiasShape, capacity: usize) -> Self {
        ProxyBiasParams {
            shape,
            b_d: Matrix::zeros(capacity, shape.grid * shape.grid),
            b_c: Matrix::zeros(capacity, shape.side),
            b_r: Matrix::zeros(capacity, shape.side),
        }
    }

    pub fn random(rng: &mut impl Rng, shape: ProxyBiasShape, capacity: usize, bound: f64) -> Self {
        let mut p = Self::zeros(shape, capacity);
        p.visit_mut(&mut |s| {
            for v in s {
                *v = T::lit(rng.random_range(-bound..=bound));
            }
        });
        p
    }

    pub fn capacity(&self) -> usize {
        self.b_d.rows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape, self.capacity())
    }

    pub fn cast<U: Real>(&self) -> ProxyBiasParams<U> {
        ProxyBiasParams {
            shape: self.shape,
            b_d: self.b_d.cast(),
            b_c: self.b_c.cast(),
            b_r: self.b_r.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, d, n) = (self.shape.side, self.shape.grid, self.capacity());
        if s == 0 || d == 0 || d > s {
            return Err(Error::InvalidConfig(format!("bias grid {d} vs side {s}")));
        }
        if self.b_d.shape() != (n, d * d) || self.b_c.shape() != (n, s) || self.b_r.shape() != (n, s) {
            return Err(Error::shape(
                "proxy_bias",
                format!(
                    "b_d {:?}, b_c {:?}, b_r {:?} for S={s}, D={d}",
                    self.b_d.shape(),
                    self.b_c.shape(),
                    self.b_r.shape()
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for ProxyBiasParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        f(self.b_d.data());
        f(self.b_c.data());
        f(self.b_r.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        f(self.b_d.data_mut());
        f(self.b_c.data_mut());
        f(self.b_r.data_mut());
    }
}

/// `S × D` linear interpolation weights (half-pixel centers, edge clamped).
pub fn interpolation_matrix<T: Real>(side: usize, grid: usize) -> Matrix<T> {
    let mut r = Matrix::zeros(side, grid);
    let ratio = grid as f64 / side as f64;
    for i in 0..side {
        let src = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, (grid - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(grid - 1);
        let w = src - lo as f64;
        r[(i, lo)] = r[(i, lo)] + T::lit(1.0 - w);
        r[(i, hi)] = r[(i, hi)] + T::lit(w);
    }
    r
}

/// First `rows` rows of the bias.
pub fn proxy_bias_rows<T: Real>(params: &ProxyBiasParams<T>, rows: usize) -> Result<Matrix<T>> {
    params.validate()?;
    if rows > params.capacity() {
        return Err(Error::shape(
            "proxy_bias",
            format!("{rows} rows requested, capacity {}", params.capacity()),
        ));
    }
    let (s, d) = (params.shape.side, params.shape.grid);
    let interp = interpolation_matrix::<T>(s, d);
    let mut out = Matrix::zeros(rows, s * s);
    let mut tmp = vec![T::zero(); s * d];
    for n in 0..rows {
        let grid = params.b_d.row(n);
        // tmp = R · B_d  (S × D)
        for i in 0..s {
            for b in 0..d {
                tmp[i * d + b] = (0..d).map(|a| interp[(i, a)] * grid[a * d + b]).sum();
            }
        }
        let (bc, br) = (params.b_c.row(n), params.b_r.row(n));
        let row = out.row_mut(n);
        for i in 0..s {
            for j in 0..s {
                let up: T = (0..d).map(|b| tmp[i * d + b] * interp[(j, b)]).sum();
                row[i * s + j] = up + bc[j] + br[i];
            }
        }
    }
    Ok(out)
}

/// The full `N × C` bias.
pub fn proxy_bias<T: Real>(params: &ProxyBiasParams<T>) -> Result<Matrix<T>> {
    proxy_bias_rows(params, params.capacity())
}

/// Accumulates the gradient of the first `d_out.rows()` bias rows.
pub fn proxy_bias_pullback<T: Real>(
    params: &ProxyBiasParams<T>,
    d_out: &Matrix<T>,
    grads: &mut ProxyBiasParams<T>,
) -> Result<()> {
    let (s, d) = (params.shape.side, params.shape.grid);
    if d_out.cols() != s * s || d_out.rows() > params.capacity() {
        return Err(Error::shape("proxy_bias_pullback", format!("{:?}", d_out.shape())));
    }
    let interp = interpolation_matrix::<T>(s, d);
    let mut tmp = vec![T::zero(); d * s];
    for n in 0..d_out.rows() {
        let g = d_out.row(n);
        for i in 0..s {
            let row_sum: T = g[i * s..(i + 1) * s].iter().copied().sum();
            grads.b_r[(n, i)] = grads.b_r[(n, i)] + row_sum;
        }
        for j in 0..s {
            let col_sum: T = (0..s).map(|i| g[i * s + j]).sum();
            grads.b_c[(n, j)] = grads.b_c[(n, j)] + col_sum;
        }
        // d B_d = Rᵀ · G · R ; tmp = Rᵀ · G  (D × S)
        for a in 0..d {
            for j in 0..s {
                tmp[a * s + j] = (0..s).map(|i| interp[(i, a)] * g[i * s + j]).sum();
            }
        }
        for a in 0..d {
            for b in 0..d {
                let v: T = (0..s).map(|j| tmp[a * s + j] * interp[(j, b)]).sum();
                grads.b_d[(n, a * d + b)] = grads.b_d[(n, a * d + b)] + v;
            }
        }
    }
    Ok(())
}
