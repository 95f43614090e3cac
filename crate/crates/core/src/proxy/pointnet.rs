//! Simplified PointNet: shared per-point `linear(6 → C)` and ReLU, then a max
//! pool over each cluster's members.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSet;
use crate::error::Result;
use crate::geom::PointCloud;
use crate::numerics::{
    linear, linear_pullback, max_pool_rows, max_pool_rows_pullback, relu, relu_pullback,
    LinearParams, Matrix, ParamSet, Real,
};
use crate::offsetnet::cluster_features;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct PointNetParams<T> {
    pub layer: LinearParams<T>,
}

impl<T: Real> PointNetParams<T> {
    pub fn zeros(c: usize) -> Self {
        PointNetParams {
            layer: LinearParams::zeros(6, c, true),
        }
    }

    pub fn init(rng: &mut impl Rng, c: usize) -> Self {
        PointNetParams {
            layer: LinearParams::init(rng, 6, c, true),
        }
    }

    pub fn channels(&self) -> usize {
        self.layer.d_out()
    }

    pub fn zeros_like(&self) -> Self {
        PointNetParams {
            layer: self.layer.zeros_like(),
        }
    }

    pub fn cast<U: Real>(&self) -> PointNetParams<U> {
        PointNetParams {
            layer: self.layer.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer.validate()?;
        if self.layer.d_in() != 6 {
            return Err(crate::Error::shape(
                "pointnet",
                format!("input width {}", self.layer.d_in()),
            ));
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for PointNetParams<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        self.layer.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.layer.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct PointNetTrace<T> {
    features: Matrix<T>,
    pre: Matrix<T>,
    argmax: Vec<usize>,
}

fn cluster_forward<T: Real>(
    params: &PointNetParams<T>,
    features: Matrix<T>,
) -> Result<(Vec<T>, PointNetTrace<T>)> {
    let pre = linear(&features, &params.layer)?;
    let (pooled, argmax) = max_pool_rows(&relu(&pre))?;
    Ok((pooled.into_vec(), PointNetTrace { features, pre, argmax }))
}

pub fn pointnet_lite_forward<T: Real>(
    params: &PointNetParams<T>,
    cs: &ClusterSet,
    cloud: &PointCloud,
) -> Result<(Matrix<T>, Vec<PointNetTrace<T>>)> {
    params.validate()?;
    cs.validate(cloud)?;
    let c = params.channels();
    let per: Vec<_> = cs
        .centers
        .par_iter()
        .zip(cs.members.par_iter())
        .map(|(&q, members)| cluster_forward(params, cluster_features(q, members, cloud)))
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(cs.len() * c);
    let mut traces = Vec::with_capacity(cs.len());
    for (row, tr) in per {
        data.extend(row);
        traces.push(tr);
    }
    Ok((Matrix::from_vec(cs.len(), c, data)?, traces))
}

/// One `C`-row per cluster.
pub fn pointnet_lite<T: Real>(
    params: &PointNetParams<T>,
    cs: &ClusterSet,
    cloud: &PointCloud,
) -> Result<Matrix<T>> {
    pointnet_lite_forward(params, cs, cloud).map(|(f, _)| f)
}

pub fn pointnet_lite_backward<T: Real>(
    params: &PointNetParams<T>,
    traces: &[PointNetTrace<T>],
    d_out: &Matrix<T>,
) -> Result<PointNetParams<T>> {
    let mut grads = params.zeros_like();
    for (t, tr) in traces.iter().enumerate() {
        let d_act = max_pool_rows_pullback(tr.pre.rows(), &tr.argmax, &d_out.slice_rows(t, t + 1))?;
        let d_pre = relu_pullback(&tr.pre, &d_act)?;
        linear_pullback(&tr.features, &params.layer, &d_pre, &mut grads.layer)?;
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::numerics::{flatten, grad_check, unflatten};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_point_set() -> (ClusterSet, PointCloud) {
        let cloud = PointCloud::new(vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 4.0)]);
        let cs = ClusterSet {
            centers: vec![Vec3::new(0.0, 1.0, 3.0)],
            members: vec![vec![0, 1]],
            m: 2,
            source_cloud_len: 2,
        };
        (cs, cloud)
    }

    #[test]
    fn hand_computed_two_point_cluster() {
        let (cs, cloud) = two_point_set();
        let mut p = PointNetParams::<f64>::zeros(6);
        for d in 0..6 {
            p.layer.weight[(d, d)] = 1.0;
        }
        // rows [p − q, p]: (1,1,0,1,2,3) and (-1,-0.5,1,-1,0.5,4); relu then max
        let f = pointnet_lite(&p, &cs, &cloud).unwrap();
        assert_eq!(f.row(0), &[1.0, 1.0, 1.0, 1.0, 2.0, 4.0]);
    }

    #[test]
    fn member_order_is_irrelevant() {
        let (mut cs, cloud) = two_point_set();
        let p = PointNetParams::<f64>::init(&mut ChaCha8Rng::seed_from_u64(1), 8);
        let a = pointnet_lite(&p, &cs, &cloud).unwrap();
        cs.members[0].reverse();
        assert_eq!(a, pointnet_lite(&p, &cs, &cloud).unwrap());
    }

    #[test]
    fn zero_weights_give_zero_features() {
        let (cs, cloud) = two_point_set();
        let f = pointnet_lite(&PointNetParams::<f32>::zeros(4), &cs, &cloud).unwrap();
        assert_eq!(f.shape(), (1, 4));
        assert!(f.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = PointCloud::new(
            (0..12)
                .map(|i| Vec3::new((i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), i as f64 * 0.1))
                .collect(),
        );
        let cs = ClusterSet {
            centers: vec![Vec3::new(0.0, 0.0, 0.2), Vec3::new(0.5, -0.5, 0.8)],
            members: vec![vec![0, 1, 2, 3, 4, 5], vec![6, 7, 8, 9, 10, 11]],
            m: 6,
            source_cloud_len: 12,
        };
        let mut p = PointNetParams::<f64>::init(&mut rng, 5);
        p.layer.bias = Some(vec![0.5; 5]);
        let w = Matrix::from_fn(2, 5, |r, c| 1.0 - 0.2 * (r + c) as f64);
        let err = grad_check(
            |x| {
                let mut q = p.clone();
                unflatten(&mut q, x)?;
                let (f, tr) = pointnet_lite_forward(&q, &cs, &cloud)?;
                let g = pointnet_lite_backward(&q, &tr, &w)?;
                Ok((f.hadamard(&w)?.sum(), flatten(&g)))
            },
            &flatten(&p),
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "{err:e}");
    }
}
