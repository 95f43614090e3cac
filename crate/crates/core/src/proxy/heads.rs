//! Output heads: per-cluster translations from the text-guided features and
//! per-cluster 3×3 transforms from the image-guided features.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{Matrix3, Vec3};
use crate::numerics::{linear, linear_pullback, LinearParams, Matrix, ParamSet, Real};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct HeadParams<T> {
    /// `C → 3`.
    pub u_text: LinearParams<T>,
    /// `C → 9`, row-major 3×3 per cluster.
    pub u_image: LinearParams<T>,
}

/// How the image head output becomes a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformForm {
    /// `M = I + ΔM`.
    #[default]
    Residual,
    /// `M = ΔM`.
    Literal,
}

impl TransformForm {
    pub fn from_literal_flag(literal: bool) -> Self {
        if literal {
            TransformForm::Literal
        } else {
            TransformForm::Residual
        }
    }
}

impl<T: Real> HeadParams<T> {
    pub fn zeros(c: usize) -> Self {
        HeadParams {
            u_text: LinearParams::zeros(c, 3, true),
            u_image: LinearParams::zeros(c, 9, true),
        }
    }

    /// Weights from `U(±bound)`, biases zero.
    pub fn uniform(rng: &mut impl Rng, c: usize, bound: f64) -> Self {
        HeadParams {
            u_text: LinearParams::uniform(rng, c, 3, true, bound),
            u_image: LinearParams::uniform(rng, c, 9, true, bound),
        }
    }

    pub fn channels(&self) -> usize {
        self.u_text.d_in()
    }

    pub fn zeros_like(&self) -> Self {
        HeadParams {
            u_text: self.u_text.zeros_like(),
            u_image: self.u_image.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> HeadParams<U> {
        HeadParams {
            u_text: self.u_text.cast(),
            u_image: self.u_image.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.u_text.validate()?;
        self.u_image.validate()?;
        if self.u_text.d_out() != 3
            || self.u_image.d_out() != 9
            || self.u_text.d_in() != self.u_image.d_in()
        {
            return Err(Error::shape(
                "heads",
                format!(
                    "u_text {:?}, u_image {:?}",
                    self.u_text.weight.shape(),
                    self.u_image.weight.shape()
                ),
            ));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for HeadParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        self.u_text.visit(f);
        self.u_image.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.u_text.visit_mut(f);
        self.u_image.visit_mut(f);
    }
}

/// `n × 3` translations.
pub fn translation_head<T: Real>(features: &Matrix<T>, heads: &HeadParams<T>) -> Result<Matrix<T>> {
    linear(features, &heads.u_text)
}

pub fn translation_head_pullback<T: Real>(
    features: &Matrix<T>,
    heads: &HeadParams<T>,
    d_out: &Matrix<T>,
    grads: &mut HeadParams<T>,
) -> Result<Matrix<T>> {
    linear_pullback(features, &heads.u_text, d_out, &mut grads.u_text)
}

/// `n × 9` row-major matrices.
pub fn transform_head<T: Real>(
    features: &Matrix<T>,
    heads: &HeadParams<T>,
    form: TransformForm,
) -> Result<Matrix<T>> {
    let mut out = linear(features, &heads.u_image)?;
    if form == TransformForm::Residual {
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for d in 0..3 {
                row[d * 4] = row[d * 4] + T::one();
            }
        }
    }
    Ok(out)
}

/// The identity offset does not depend on inputs, so both forms share a pullback.
pub fn transform_head_pullback<T: Real>(
    features: &Matrix<T>,
    heads: &HeadParams<T>,
    d_out: &Matrix<T>,
    grads: &mut HeadParams<T>,
) -> Result<Matrix<T>> {
    linear_pullback(features, &heads.u_image, d_out, &mut grads.u_image)
}

pub fn rows_to_vec3<T: Real>(m: &Matrix<T>) -> Result<Vec<Vec3>> {
    if m.cols() != 3 {
        return Err(Error::shape("rows_to_vec3", format!("{} columns", m.cols())));
    }
    Ok(m
        .row_iter()
        .map(|r| Vec3::new(Real::to_f64(r[0]), Real::to_f64(r[1]), Real::to_f64(r[2])))
        .collect())
}

pub fn rows_to_matrix3<T: Real>(m: &Matrix<T>) -> Result<Vec<Matrix3>> {
    if m.cols() != 9 {
        return Err(Error::shape("rows_to_matrix3", format!("{} columns", m.cols())));
    }
    Ok(m
        .row_iter()
        .map(|r| {
            let mut a = [0.0; 9];
            for (d, s) in a.iter_mut().zip(r) {
                *d = Real::to_f64(*s);
            }
            Matrix3::from_row_major(a)
        })
        .collect())
}
