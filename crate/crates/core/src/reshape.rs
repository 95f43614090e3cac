//! Applies per-cluster linear maps and translations to cluster members and
//! writes the results back into the cloud.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::ClusterSet;
use crate::error::{Error, Result};
use crate::geom::{Matrix3, PointCloud, Vec3};

/// One matrix and one translation per kept cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSet {
    pub matrices: Vec<Matrix3>,
    pub translations: Vec<Vec3>,
}

impl TransformSet {
    pub fn identity(n: usize) -> Self {
        TransformSet {
            matrices: vec![Matrix3::IDENTITY; n],
            translations: vec![Vec3::ZERO; n],
        }
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrices.len() != self.translations.len() {
            return Err(Error::InvalidArgument(format!(
                "{} matrices but {} translations",
                self.matrices.len(),
                self.translations.len()
            )));
        }
        if let Some(i) = self.matrices.iter().position(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument(format!("matrix {i} is not finite")));
        }
        if let Some(i) = self.translations.iter().position(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument(format!("translation {i} is not finite")));
        }
        Ok(())
    }
}

#[inline]
fn transform_point(p: Vec3, m: &Matrix3, t: Vec3) -> Vec3 {
    m.mul_vec(p) + t
}

/// Each row `p` becomes `p·Mᵀ + T`, i.e. `M·p + T` for column vectors.
pub fn apply_submanifold(points: &[Vec3], m: &Matrix3, t: Vec3) -> Vec<Vec3> {
    points.iter().map(|&p| transform_point(p, m, t)).collect()
}

/// Owning cluster of every point: the cluster with the nearest center among
/// those listing the point, lower cluster id on ties. `None` for points in no
/// cluster.
pub fn assign_points(cs: &ClusterSet, cloud: &PointCloud) -> Result<Vec<Option<usize>>> {
    cs.validate(cloud)?;
    let mut owner: Vec<Option<(usize, f64)>> = vec![None; cloud.len()];
    for (cid, (center, members)) in cs.centers.iter().zip(&cs.members).enumerate() {
        for &i in members {
            let d = cloud.points[i].dist_sq(*center);
            match owner[i] {
                Some((_, best)) if best <= d => {}
                _ => owner[i] = Some((cid, d)),
            }
        }
    }
    Ok(owner.into_iter().map(|o| o.map(|(cid, _)| cid)).collect())
}

/// Transforms every clustered point once, by its owning cluster. Unclustered
/// points are copied unchanged; length and order are preserved.
pub fn apply_all(cs: &ClusterSet, ts: &TransformSet, cloud: &PointCloud) -> Result<PointCloud> {
    ts.validate()?;
    if ts.len() != cs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} transforms for {} clusters",
            ts.len(),
            cs.len()
        )));
    }
    let owner = assign_points(cs, cloud)?;
    let points = cloud
        .points
        .par_iter()
        .zip(owner.par_iter())
        .map(|(&p, o)| match *o {
            Some(c) => transform_point(p, &ts.matrices[c], ts.translations[c]),
            None => p,
        })
        .collect();
    Ok(PointCloud::new(points))
}
