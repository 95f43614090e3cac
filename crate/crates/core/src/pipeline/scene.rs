//! Synthetic scenes and proxy tokens.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{PointCloud, Vec3};
use crate::numerics::Matrix;
use crate::rng;

/// Isotropic Gaussian cluster of labelled foreground points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: Vec3,
    pub sigma: f64,
    pub points: usize,
}

/// Gaussian blobs over a flat, noisy background slab `z ≈ slab_height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub total_points: usize,
    pub blobs: Vec<BlobSpec>,
    /// Half extents of the slab in x and y.
    pub slab_half_extent: [f64; 2],
    pub slab_height: f64,
    /// Standard deviation of the slab's vertical noise.
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        let blob = |x, y, z, sigma, points| BlobSpec {
            center: Vec3::new(x, y, z),
            sigma,
            points,
        };
        SceneSpec {
            total_points: 20_000,
            blobs: vec![
                blob(2.0, 0.0, 0.8, 0.25, 2000),
                blob(-2.5, 1.5, 0.6, 0.2, 1500),
                blob(0.5, -2.5, 1.0, 0.3, 2500),
                blob(-1.0, -1.0, 0.5, 0.15, 1000),
            ],
            slab_half_extent: [5.0, 5.0],
            slab_height: 0.0,
            noise_sigma: 0.02,
        }
    }
}

impl SceneSpec {
    /// Default layout with all counts scaled to `total_points`.
    pub fn with_total(total_points: usize) -> Self {
        let mut spec = SceneSpec::default();
        let base = spec.total_points as f64;
        for b in &mut spec.blobs {
            b.points = (b.points as f64 * total_points as f64 / base).floor() as usize;
        }
        spec.total_points = total_points;
        spec
    }

    pub fn background_points(&self) -> usize {
        self.total_points - self.blobs.iter().map(|b| b.points).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_points == 0 {
            return Err(Error::InvalidArgument("scene needs at least one point".into()));
        }
        let fg: usize = self.blobs.iter().map(|b| b.points).sum();
        if fg > self.total_points {
            return Err(Error::InvalidArgument(format!(
                "blobs hold {fg} points but the scene has {}",
                self.total_points
            )));
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if !b.center.is_finite() || !(b.sigma >= 0.0 && b.sigma.is_finite()) {
                return Err(Error::InvalidArgument(format!("blob {i} is malformed")));
            }
        }
        let [hx, hy] = self.slab_half_extent;
        if !(hx >= 0.0 && hy >= 0.0 && hx.is_finite() && hy.is_finite()) {
            return Err(Error::InvalidArgument("slab extents must be finite and >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !self.slab_height.is_finite() {
            return Err(Error::InvalidArgument("slab height and noise must be finite".into()));
        }
        Ok(())
    }
}

/// A cloud with one label per point: 0 for background, `k + 1` for blob `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub labels: Vec<u32>,
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))
}

/// Blob points first (in blob order), then the background slab.
pub fn gen_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut r = rng::seeded(seed, rng::stream::SCENE);
    let mut points = Vec::with_capacity(spec.total_points);
    let mut labels = Vec::with_capacity(spec.total_points);
    for (k, b) in spec.blobs.iter().enumerate() {
        let n = gaussian(b.sigma)?;
        for _ in 0..b.points {
            let d = Vec3::new(n.sample(&mut r), n.sample(&mut r), n.sample(&mut r));
            points.push(b.center + d);
            labels.push(k as u32 + 1);
        }
    }
    let [hx, hy] = spec.slab_half_extent;
    let ux = Uniform::new_inclusive(-hx, hx).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let uy = Uniform::new_inclusive(-hy, hy).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let nz = gaussian(spec.noise_sigma)?;
    for _ in 0..spec.background_points() {
        let x = ux.sample(&mut r);
        let y = uy.sample(&mut r);
        points.push(Vec3::new(x, y, spec.slab_height + nz.sample(&mut r)));
        labels.push(0);
    }
    Ok(Scene {
        cloud: PointCloud::new(points),
        labels,
    })
}

/// Stand-ins for encoder outputs: text tokens and per-view image token sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proxies {
    /// `n_text × C`.
    pub text: Matrix<f64>,
    /// `n_views` sets of `tokens_per_view × C`.
    pub views: Vec<Matrix<f64>>,
}

impl Proxies {
    pub fn channels(&self) -> usize {
        self.text.cols()
    }
}

fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Seeded unit-variance Gaussian tokens.
pub fn synth_proxies(
    seed: u64,
    n_text: usize,
    n_views: usize,
    tokens_per_view: usize,
    channels: usize,
) -> Result<Proxies> {
    if n_text == 0 || n_views == 0 || tokens_per_view == 0 || channels == 0 {
        return Err(Error::InvalidArgument(format!(
            "proxy dims must be positive: text {n_text}, views {n_views}, tokens {tokens_per_view}, C {channels}"
        )));
    }
    let mut rt = rng::seeded(seed, rng::stream::PROXY_TEXT);
    let mut rv = rng::seeded(seed, rng::stream::PROXY_VIEWS);
    Ok(Proxies {
        text: standard_normal(&mut rt, n_text, channels),
        views: (0..n_views)
            .map(|_| standard_normal(&mut rv, tokens_per_view, channels))
            .collect(),
    })
}
