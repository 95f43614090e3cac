//! Deformable offset network.
//!
//! Per cluster: every member point becomes the 6-vector `[p − q, p]`, a
//! pointwise linear layer (6 → C_off) with ReLU lifts it, average pooling
//! collapses the cluster, and a bias-free linear layer (C_off → 3) emits the
//! raw offset. Offsets are projected onto the ball of radius `s` and added
//! to the reference points.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSet;
use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::numerics::{
    avg_pool_rows, avg_pool_rows_pullback, linear, linear_pullback, matmul, matmul_pullback,
    relu, relu_pullback, LinearParams, Matrix, ParamSet, Real,
};
use crate::rng;

pub const DEFAULT_C_OFF: usize = 64;

/// Weights of the offset network. The final layer has no bias term at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct OffsetNetParams<T> {
    pub w1: LinearParams<T>,
    pub w2: Matrix<T>,
}

impl<T: Real> OffsetNetParams<T> {
    pub fn c_off(&self) -> usize {
        self.w1.d_out()
    }

    pub fn zeros_like(&self) -> Self {
        OffsetNetParams {
            w1: self.w1.zeros_like(),
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
        }
    }

    pub fn cast<U: Real>(&self) -> OffsetNetParams<U> {
        OffsetNetParams {
            w1: self.w1.cast(),
            w2: self.w2.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.w1.validate()?;
        if self.w1.d_in() != 6 || self.w2.shape() != (self.c_off(), 3) {
            return Err(Error::shape(
                "offsetnet",
                format!(
                    "w1 {:?}, w2 {:?}",
                    self.w1.weight.shape(),
                    self.w2.shape()
                ),
            ));
        }
        if !self.w2.is_finite() {
            return Err(Error::InvalidArgument("non-finite offset weights".into()));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for OffsetNetParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        self.w1.visit(f);
        f(self.w2.data());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.w1.visit_mut(f);
        f(self.w2.data_mut());
    }
}

/// Seeded first layer, all-zero final layer: offsets start at exactly zero.
pub fn offsetnet_init(seed: u64, c_off: usize) -> Result<OffsetNetParams<f64>> {
    offsetnet_init_with(seed, c_off, 0.0)
}

/// Like [`offsetnet_init`] but with the final layer drawn from
/// `U(-final_bound, final_bound)`.
pub fn offsetnet_init_with(seed: u64, c_off: usize, final_bound: f64) -> Result<OffsetNetParams<f64>> {
    if c_off == 0 {
        return Err(Error::InvalidArgument("c_off must be positive".into()));
    }
    let mut r = rng::seeded(seed, rng::stream::OFFSET_NET);
    let w1 = LinearParams::init(&mut r, 6, c_off, true);
    let w2 = LinearParams::<f64>::uniform(&mut r, c_off, 3, false, final_bound).weight;
    Ok(OffsetNetParams { w1, w2 })
}

/// Per-cluster `m × 6` rows `[p − q_t, p]`.
pub fn offset_features<T: Real>(cs: &ClusterSet, cloud: &PointCloud) -> Result<Vec<Matrix<T>>> {
    cs.validate(cloud)?;
    Ok(cs
        .centers
        .iter()
        .zip(&cs.members)
        .map(|(&q, members)| cluster_features(q, members, cloud))
        .collect())
}

pub(crate) fn cluster_features<T: Real>(q: Vec3, members: &[usize], cloud: &PointCloud) -> Matrix<T> {
    let mut data = Vec::with_capacity(members.len() * 6);
    for &i in members {
        let p = cloud.points[i];
        let rel = p - q;
        data.extend([rel.x, rel.y, rel.z, p.x, p.y, p.z].map(T::lit));
    }
    Matrix::from_vec(members.len(), 6, data).expect("6 values per member")
}

/// Per-row L2 norm bounded by `s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetField {
    pub offsets: Vec<Vec3>,
}

impl OffsetField {
    pub fn zeros(n: usize) -> Self {
        OffsetField {
            offsets: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn from_matrix<T: Real>(m: &Matrix<T>) -> Result<Self> {
        if m.cols() != 3 {
            return Err(Error::shape("offset_field", format!("{:?}", m.shape())));
        }
        Ok(OffsetField {
            offsets: m
                .row_iter()
                .map(|r| Vec3::new(r[0].to_f64(), r[1].to_f64(), r[2].to_f64()))
                .collect(),
        })
    }
}

/// Projects every row onto the L2 ball of radius `s`.
pub fn clamp_offsets<T: Real>(raw: &Matrix<T>, s: f64) -> Result<Matrix<T>> {
    if s.is_nan() || s < 0.0 {
        return Err(Error::InvalidArgument(format!("offset bound must be >= 0, got {s}")));
    }
    let s = T::lit(s);
    let mut out = raw.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > s {
            let k = s / norm;
            row.iter_mut().for_each(|v| *v = *v * k);
        }
    }
    Ok(out)
}

/// Jacobian-transpose of [`clamp_offsets`]: identity inside the ball,
/// `s/‖r‖ (I − r̂ r̂ᵀ)` outside.
pub fn clamp_offsets_pullback<T: Real>(raw: &Matrix<T>, s: f64, dy: &Matrix<T>) -> Result<Matrix<T>> {
    if raw.shape() != dy.shape() {
        return Err(Error::shape("clamp_pullback", format!("{:?} vs {:?}", raw.shape(), dy.shape())));
    }
    let s = T::lit(s);
    let mut dx = dy.clone();
    for r in 0..raw.rows() {
        let x = raw.row(r);
        let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > s {
            let g = dy.row(r);
            let radial: T = x.iter().zip(g).map(|(&a, &b)| a * b).sum::<T>() / (norm * norm);
            let k = s / norm;
            for ((o, &xv), &gv) in dx.row_mut(r).iter_mut().zip(x).zip(g) {
                *o = k * (gv - radial * xv);
            }
        }
    }
    Ok(dx)
}

/// Intermediate values of one cluster's forward pass.
#[derive(Debug, Clone)]
pub struct ClusterTrace<T> {
    features: Matrix<T>,
    pre: Matrix<T>,
    pooled: Matrix<T>,
}

fn cluster_forward<T: Real>(
    params: &OffsetNetParams<T>,
    features: Matrix<T>,
) -> Result<(Vec<T>, ClusterTrace<T>)> {
    let pre = linear(&features, &params.w1)?;
    let pooled = avg_pool_rows(&relu(&pre))?;
    let raw = matmul(&pooled, &params.w2)?.into_vec();
    Ok((raw, ClusterTrace { features, pre, pooled }))
}

/// Unclamped `n × 3` offsets together with the per-cluster traces needed by
/// [`offsetnet_backward`].
pub fn offsetnet_raw<T: Real>(
    params: &OffsetNetParams<T>,
    features: Vec<Matrix<T>>,
) -> Result<(Matrix<T>, Vec<ClusterTrace<T>>)> {
    params.validate()?;
    let n = features.len();
    let per: Vec<(Vec<T>, ClusterTrace<T>)> = features
        .into_par_iter()
        .map(|f| cluster_forward(params, f))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(n * 3);
    let mut traces = Vec::with_capacity(n);
    for (raw, tr) in per {
        data.extend(raw);
        traces.push(tr);
    }
    Ok((Matrix::from_vec(n, 3, data)?, traces))
}

/// Clamped offsets for every cluster of `cs`.
pub fn offsetnet_forward<T: Real>(
    params: &OffsetNetParams<T>,
    cs: &ClusterSet,
    cloud: &PointCloud,
    s: f64,
) -> Result<OffsetField> {
    let (raw, _) = offsetnet_raw(params, offset_features::<T>(cs, cloud)?)?;
    OffsetField::from_matrix(&clamp_offsets(&raw, s)?)
}

/// Parameter gradients given the gradient of the clamped `n × 3` offsets.
pub fn offsetnet_backward<T: Real>(
    params: &OffsetNetParams<T>,
    raw: &Matrix<T>,
    traces: &[ClusterTrace<T>],
    s: f64,
    d_offsets: &Matrix<T>,
) -> Result<OffsetNetParams<T>> {
    let d_raw = clamp_offsets_pullback(raw, s, d_offsets)?;
    let mut grads = params.zeros_like();
    for (t, tr) in traces.iter().enumerate() {
        let dr = d_raw.slice_rows(t, t + 1);
        let (d_pooled, d_w2) = matmul_pullback(&tr.pooled, &params.w2, &dr)?;
        grads.w2.add_assign(&d_w2)?;
        let d_act = avg_pool_rows_pullback(tr.features.rows(), &d_pooled)?;
        let d_pre = relu_pullback(&tr.pre, &d_act)?;
        linear_pullback(&tr.features, &params.w1, &d_pre, &mut grads.w1)?;
    }
    Ok(grads)
}

/// `q̂_t = q_t + offset_t`.
pub fn apply_offsets(centers: &[Vec3], field: &OffsetField) -> Result<Vec<Vec3>> {
    if centers.len() != field.len() {
        return Err(Error::InvalidArgument(format!(
            "{} centers but {} offsets",
            centers.len(),
            field.len()
        )));
    }
    Ok(centers.iter().zip(&field.offsets).map(|(&c, &o)| c + o).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{build_clusters, grid_prior, Gamma, GridSpec};
    use crate::numerics::{flatten, grad_check, unflatten};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cloud(seed: u64, n: usize, extent: f64) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| {
                    Vec3::new(
                        r.random_range(0.0..extent),
                        r.random_range(0.0..extent),
                        r.random_range(0.0..extent),
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn feature_rows() {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 0.0, -1.0)]);
        let cs = ClusterSet {
            centers: vec![Vec3::new(1.0, 2.0, 3.0)],
            members: vec![vec![0, 1]],
            m: 2,
            source_cloud_len: 2,
        };
        let f = &offset_features::<f64>(&cs, &cloud).unwrap()[0];
        assert_eq!(f.row(0), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(f.row(1), &[3.0, -2.0, -4.0, 4.0, 0.0, -1.0]);

        let at_origin = ClusterSet { centers: vec![Vec3::ZERO], ..cs.clone() };
        let g = &offset_features::<f64>(&at_origin, &cloud).unwrap()[0];
        for r in 0..2 {
            assert_eq!(g.row(r)[..3], g.row(r)[3..]);
        }

        let broken = ClusterSet { members: vec![vec![0, 5]], ..cs };
        assert!(matches!(
            offset_features::<f64>(&broken, &cloud),
            Err(Error::CorruptedClusterSet(_))
        ));
    }

    #[test]
    fn zero_final_layer_gives_zero_offsets() {
        let cloud = random_cloud(1, 200, 4.0);
        let centers = grid_prior(&GridSpec::cube(3, Vec3::ZERO, Vec3::splat(4.0), 0.5)).unwrap();
        let cs = build_clusters(&centers, &cloud, Gamma::Knn, 8).unwrap();
        for seed in [0, 1, 99] {
            let p = offsetnet_init(seed, 16).unwrap();
            let field = offsetnet_forward(&p.cast::<f32>(), &cs, &cloud, 0.5).unwrap();
            assert!(field.offsets.iter().all(|&o| o == Vec3::ZERO));
            assert_eq!(apply_offsets(&centers, &field).unwrap(), centers);
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = offsetnet_init(5, 8).unwrap();
        assert_eq!(a, offsetnet_init(5, 8).unwrap());
        let b = offsetnet_init(6, 8).unwrap();
        assert_ne!(serde_json::to_vec(&a.w1).unwrap(), serde_json::to_vec(&b.w1).unwrap());
        assert!(offsetnet_init(1, 0).is_err());
        let json = serde_json::to_value(&a).unwrap();
        assert_eq!(json.as_object().unwrap().len(), 2);
        assert!(json["w2"].get("bias").is_none());
    }

    #[test]
    fn offsets_ignore_member_order() {
        let cloud = random_cloud(2, 50, 3.0);
        let p = offsetnet_init_with(3, 12, 0.5).unwrap();
        let cs = build_clusters(&[Vec3::splat(1.5)], &cloud, Gamma::Knn, 10).unwrap();
        let mut rev = cs.clone();
        rev.members[0].reverse();
        let a = offsetnet_forward(&p, &cs, &cloud, 10.0).unwrap();
        let b = offsetnet_forward(&p, &rev, &cloud, 10.0).unwrap();
        assert!((a.offsets[0] - b.offsets[0]).norm() < 1e-12);
    }

    #[test]
    fn matches_straight_line_reference() {
        let cloud = random_cloud(4, 30, 2.0);
        let p = offsetnet_init_with(8, 5, 0.7).unwrap();
        let center = Vec3::new(1.0, 0.8, 1.2);
        let cs = build_clusters(&[center], &cloud, Gamma::Knn, 6).unwrap();
        let got = offsetnet_forward(&p, &cs, &cloud, 100.0).unwrap().offsets[0];

        let mut pooled = [0.0f64; 5];
        for &i in &cs.members[0] {
            let pt = cloud.points[i];
            let x = [pt.x - center.x, pt.y - center.y, pt.z - center.z, pt.x, pt.y, pt.z];
            for (h, acc) in pooled.iter_mut().enumerate() {
                let mut z = p.w1.bias.as_ref().unwrap()[h];
                for (c, xv) in x.iter().enumerate() {
                    z += xv * p.w1.weight[(c, h)];
                }
                *acc += z.max(0.0) / 6.0;
            }
        }
        let mut expect = [0.0; 3];
        for (o, e) in expect.iter_mut().enumerate() {
            for (h, ph) in pooled.iter().enumerate() {
                *e += ph * p.w2[(h, o)];
            }
        }
        assert!((got - Vec3::from(expect)).norm() <= 1e-6);
    }

    #[test]
    fn clamp_examples() {
        let raw = Matrix::from_vec(2, 3, vec![0.0f64, 0.0, 0.0, 10.0, 0.0, 0.0]).unwrap();
        let c = clamp_offsets(&raw, 4.0).unwrap();
        assert_eq!(c.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(c.row(1), &[4.0, 0.0, 0.0]);
        let small = Matrix::from_vec(1, 3, vec![1.0f64, 1.0, 1.0]).unwrap();
        assert_eq!(clamp_offsets(&small, 4.0).unwrap(), small);
        assert!(clamp_offsets(&raw, -1.0).is_err());
    }

    #[test]
    fn apply_offsets_examples() {
        let field = OffsetField { offsets: vec![Vec3::new(0.5, 0.0, 0.0)] };
        assert_eq!(
            apply_offsets(&[Vec3::splat(1.0)], &field).unwrap(),
            vec![Vec3::new(1.5, 1.0, 1.0)]
        );
        assert!(apply_offsets(&[Vec3::ZERO; 2], &field).is_err());
    }

    #[test]
    fn deformed_centers_stay_in_cuboid() {
        let lo = Vec3::ZERO;
        let hi = Vec3::new(6.0, 4.0, 2.0);
        let s = 0.4;
        let cloud = random_cloud(7, 300, 2.0);
        let centers = grid_prior(&GridSpec { grid_counts: [4, 3, 2], bounds_min: lo, bounds_max: hi, offset_bound_s: s }).unwrap();
        let cs = build_clusters(&centers, &cloud, Gamma::Knn, 8).unwrap();
        let p = offsetnet_init_with(1, 16, 5.0).unwrap();
        let field = offsetnet_forward(&p, &cs, &cloud, s).unwrap();
        assert!(field.offsets.iter().any(|o| o.norm() > s * 0.99));
        for (q, o) in apply_offsets(&centers, &field).unwrap().iter().zip(&field.offsets) {
            assert!(o.norm() <= s + 1e-12);
            for a in 0..3 {
                assert!(q[a] >= lo[a] && q[a] <= hi[a]);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let cloud = random_cloud(100 + seed, 40, 2.0);
            let centers = grid_prior(&GridSpec::cube(2, Vec3::ZERO, Vec3::splat(2.0), 0.1)).unwrap();
            let cs = build_clusters(&centers, &cloud, Gamma::Knn, 5).unwrap();
            let feats = offset_features::<f64>(&cs, &cloud).unwrap();
            let mut p0 = offsetnet_init_with(seed, 6, 1.0).unwrap();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            // active hidden units
            for b in p0.w1.bias.as_mut().unwrap() {
                *b = r.random_range(0.2..1.0);
            }
            let weights = Matrix::from_fn(cs.len(), 3, |_, _| r.random_range(-1.0..1.0));
            let s = 0.3;
            let err = grad_check(
                |x| {
                    let mut p = p0.clone();
                    unflatten(&mut p, x)?;
                    let (raw, traces) = offsetnet_raw(&p, feats.clone())?;
                    let out = clamp_offsets(&raw, s)?;
                    let g = offsetnet_backward(&p, &raw, &traces, s, &weights)?;
                    Ok((out.hadamard(&weights)?.sum(), flatten(&g)))
                },
                &flatten(&p0),
                1e-6,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst <= 1e-5, "{worst:e}");
    }
}
