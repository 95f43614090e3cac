//! Reference points and neighbourhood selection.
//!
//! A uniform grid over the (shrunken) scene cuboid provides the initial
//! cluster centers. Each center gathers a fixed number `m` of member points
//! with a clustering function (kNN or ball query). After the centers are
//! deformed, [`recluster`] gathers fresh neighbourhoods, and
//! [`drop_clusters`] keeps a `1 - beta` fraction of them.
//!
//! All selections are brute force with ties broken by the lower index, so
//! results are reproducible on any platform and any thread count.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::rng;

/// Uniform grid of reference points over a cuboid shrunk by the offset
/// bound on every side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub grid_counts: [usize; 3],
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub offset_bound_s: f64,
}

impl GridSpec {
    pub fn cube(count: usize, bounds_min: Vec3, bounds_max: Vec3, s: f64) -> Self {
        GridSpec {
            grid_counts: [count; 3],
            bounds_min,
            bounds_max,
            offset_bound_s: s,
        }
    }

    pub fn total(&self) -> usize {
        self.grid_counts.iter().product()
    }

    /// The cuboid the reference points live in: `[min + s, max - s]`.
    pub fn shrunken_bounds(&self) -> Result<(Vec3, Vec3)> {
        let s = self.offset_bound_s;
        if !(s >= 0.0 && s.is_finite()) {
            return Err(Error::InvalidBounds(format!("offset bound must be >= 0, got {s}")));
        }
        if !self.bounds_min.is_finite() || !self.bounds_max.is_finite() {
            return Err(Error::InvalidBounds("non-finite bounds".into()));
        }
        let lo = self.bounds_min + Vec3::splat(s);
        let hi = self.bounds_max - Vec3::splat(s);
        for a in 0..3 {
            if lo[a] >= hi[a] {
                return Err(Error::InvalidBounds(format!(
                    "axis {a}: extent {} does not exceed 2s = {}",
                    self.bounds_max[a] - self.bounds_min[a],
                    2.0 * s
                )));
            }
        }
        Ok((lo, hi))
    }
}

/// Neighbourhood selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gamma {
    Knn,
    Ball { radius: f64 },
}

/// Cluster centers with exactly `m` member indices each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub centers: Vec<Vec3>,
    pub members: Vec<Vec<usize>>,
    pub m: usize,
    pub source_cloud_len: usize,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Checks the structural invariants against the cloud the set refers to.
    pub fn validate(&self, cloud: &PointCloud) -> Result<()> {
        if self.centers.len() != self.members.len() {
            return Err(Error::CorruptedClusterSet(format!(
                "{} centers but {} member lists",
                self.centers.len(),
                self.members.len()
            )));
        }
        if self.source_cloud_len != cloud.len() {
            return Err(Error::CorruptedClusterSet(format!(
                "built for a cloud of {} points, given {}",
                self.source_cloud_len,
                cloud.len()
            )));
        }
        for (t, list) in self.members.iter().enumerate() {
            if list.len() != self.m {
                return Err(Error::CorruptedClusterSet(format!(
                    "cluster {t} has {} members, expected {}",
                    list.len(),
                    self.m
                )));
            }
            if let Some(&i) = list.iter().find(|&&i| i >= cloud.len()) {
                return Err(Error::CorruptedClusterSet(format!(
                    "cluster {t} references point {i} of {}",
                    cloud.len()
                )));
            }
        }
        Ok(())
    }

    /// Keeps the clusters at `indices` (ascending) in that order.
    pub fn select(&self, indices: &[usize]) -> ClusterSet {
        ClusterSet {
            centers: indices.iter().map(|&i| self.centers[i]).collect(),
            members: indices.iter().map(|&i| self.members[i].clone()).collect(),
            m: self.m,
            source_cloud_len: self.source_cloud_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropMethod {
    Random,
    Fps,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropConfig {
    pub beta: f64,
    pub method: DropMethod,
    pub seed: u64,
}

impl DropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!(
                "drop ratio must lie in [0, 1), got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Number of clusters that survive a drop ratio of `beta`.
pub fn kept_count(n: usize, beta: f64) -> usize {
    (((1.0 - beta) * n as f64).floor() as usize).clamp(1, n.max(1))
}

/// Cell centers of the uniform grid, flattened with `t = (i·y_s + j)·z_s + k`.
pub fn grid_prior(spec: &GridSpec) -> Result<Vec<Vec3>> {
    let [xs, ys, zs] = spec.grid_counts;
    if xs == 0 || ys == 0 || zs == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid counts must be positive, got {:?}",
            spec.grid_counts
        )));
    }
    let (lo, hi) = spec.shrunken_bounds()?;
    let step = Vec3::new(
        (hi.x - lo.x) / xs as f64,
        (hi.y - lo.y) / ys as f64,
        (hi.z - lo.z) / zs as f64,
    );
    let mut out = Vec::with_capacity(xs * ys * zs);
    for i in 0..xs {
        for j in 0..ys {
            for k in 0..zs {
                out.push(Vec3::new(
                    lo.x + (i as f64 + 0.5) * step.x,
                    lo.y + (j as f64 + 0.5) * step.y,
                    lo.z + (k as f64 + 0.5) * step.z,
                ));
            }
        }
    }
    Ok(out)
}

/// Reference points drawn uniformly from the shrunken cuboid. Only used as
/// the stochastic baseline the grid is compared against.
pub fn uniform_prior(spec: &GridSpec, seed: u64) -> Result<Vec<Vec3>> {
    let (lo, hi) = spec.shrunken_bounds()?;
    let mut rng = rng::seeded(seed, rng::stream::FPS ^ 0xA5A5);
    Ok((0..spec.total())
        .map(|_| {
            Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            )
        })
        .collect())
}

/// Indices sorted by (squared distance, index).
fn sorted_by_distance(center: Vec3, cloud: &PointCloud, keep: usize) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| (p.dist_sq(center), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if keep < d.len() {
        d.select_nth_unstable_by(keep, cmp);
        d.truncate(keep);
    }
    d.sort_unstable_by(cmp);
    d
}

fn repeat_to(list: &[usize], m: usize) -> Vec<usize> {
    list.iter().copied().cycle().take(m).collect()
}

/// The `m` nearest points; a cloud smaller than `m` is repeated cyclically.
pub fn knn(center: Vec3, cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("knn on an empty cloud"));
    }
    let nearest: Vec<usize> = sorted_by_distance(center, cloud, m)
        .into_iter()
        .map(|(_, i)| i)
        .collect();
    Ok(repeat_to(&nearest, m))
}

/// Up to `m` points within `radius`, nearest first, padded cyclically.
/// With no point in range it falls back to [`knn`].
pub fn ball_query(center: Vec3, cloud: &PointCloud, radius: f64, m: usize) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("ball query on an empty cloud"));
    }
    if radius.is_nan() || radius <= 0.0 {
        return Err(Error::InvalidArgument(format!("radius must be > 0, got {radius}")));
    }
    let r2 = radius * radius;
    let inside: Vec<usize> = sorted_by_distance(center, cloud, m)
        .into_iter()
        .filter(|&(d, _)| d <= r2)
        .map(|(_, i)| i)
        .collect();
    if inside.is_empty() {
        return knn(center, cloud, m);
    }
    Ok(repeat_to(&inside, m))
}

fn query(gamma: Gamma, center: Vec3, cloud: &PointCloud, m: usize) -> Result<Vec<usize>> {
    match gamma {
        Gamma::Knn => knn(center, cloud, m),
        Gamma::Ball { radius } => ball_query(center, cloud, radius, m),
    }
}

/// One neighbourhood per center. Queries run in parallel and are collected
/// in center order.
pub fn build_clusters(
    centers: &[Vec3],
    cloud: &PointCloud,
    gamma: Gamma,
    m: usize,
) -> Result<ClusterSet> {
    if centers.is_empty() {
        return Err(Error::EmptyInput("no cluster centers"));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("points per cluster must be positive".into()));
    }
    let members = centers
        .par_iter()
        .map(|&c| query(gamma, c, cloud, m))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterSet {
        centers: centers.to_vec(),
        members,
        m,
        source_cloud_len: cloud.len(),
    })
}

/// Neighbourhoods around deformed centers; same contract as [`build_clusters`].
pub fn recluster(
    new_centers: &[Vec3],
    cloud: &PointCloud,
    gamma: Gamma,
    m: usize,
) -> Result<ClusterSet> {
    build_clusters(new_centers, cloud, gamma, m)
}

/// Greedy farthest-point sampling. The first pick is uniform under `seed`;
/// every later pick maximises the distance to the selected set, lower index
/// winning ties.
pub fn fps(points: &[Vec3], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n {
        return Err(Error::InvalidArgument(format!("cannot sample {k} of {n} points")));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let first = rng::seeded(seed, rng::stream::FPS).random_range(0..n);
    fps_from(points, k, first)
}

/// [`fps`] with an explicit first index.
pub fn fps_from(points: &[Vec3], k: usize, first: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if k > n || first >= n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} of {n} points starting at {first}"
        )));
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = first;
    for _ in 0..k {
        selected.push(cur);
        taken[cur] = true;
        let c = points[cur];
        let mut best: Option<(f64, usize)> = None;
        for (i, p) in points.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = min_d[i].min(p.dist_sq(c));
            min_d[i] = d;
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        match best {
            Some((_, i)) => cur = i,
            None => break,
        }
    }
    Ok(selected)
}

/// Keeps `max(1, floor((1 - beta)·n))` clusters in their original order.
pub fn drop_clusters(cs: &ClusterSet, cfg: &DropConfig) -> Result<ClusterSet> {
    cfg.validate()?;
    if cs.is_empty() {
        return Err(Error::EmptyInput("drop on an empty cluster set"));
    }
    let n = cs.len();
    let keep = kept_count(n, cfg.beta);
    if keep == n {
        return Ok(cs.clone());
    }
    let mut idx = match cfg.method {
        DropMethod::Random => {
            let mut r = rng::seeded(cfg.seed, rng::stream::DROP);
            index::sample(&mut r, n, keep).into_vec()
        }
        DropMethod::Fps => fps(&cs.centers, keep, cfg.seed)?,
    };
    idx.sort_unstable();
    Ok(cs.select(&idx))
}
