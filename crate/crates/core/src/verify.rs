//! Finite-difference checks of every hand-written backward pass.
//!
//! Each check draws a fresh random instance per seed, compares the analytic
//! gradient of a random linear functional of the output against central
//! differences, and reports the worst relative error.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::cluster::{build_clusters, grid_prior, Gamma, GridSpec};
use crate::error::Result;
use crate::geom::{PointCloud, Vec3};
use crate::numerics::{flatten, grad_check_stencil, grad_check_value, unflatten, LogitScale, Matrix, Stencil};
use crate::offsetnet::{clamp_offsets, offset_features, offsetnet_backward, offsetnet_init_with, offsetnet_raw};
use crate::proxy::{
    attention_pool_groups, attention_pool_groups_forward, attention_pool_groups_pullback, pointnet_lite,
    pointnet_lite_backward, pointnet_lite_forward, proxy_block, proxy_block_backward, proxy_block_forward,
    transform_head, transform_head_pullback, translation_head, translation_head_pullback, HeadParams,
    PointNetParams, PoolParams, ProxyBiasShape, ProxyBlockParams, TransformForm,
};
use crate::rng;

/// Tolerance on the relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

const VERIFY_STREAM: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    OffsetNet,
    PointNet,
    ProxyBlock,
    TranslationHead,
    TransformHead,
    AttentionPool,
}

impl GradTarget {
    pub const ALL: [GradTarget; 6] = [
        GradTarget::OffsetNet,
        GradTarget::PointNet,
        GradTarget::ProxyBlock,
        GradTarget::TranslationHead,
        GradTarget::TransformHead,
        GradTarget::AttentionPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::OffsetNet => "offset_net",
            GradTarget::PointNet => "pointnet",
            GradTarget::ProxyBlock => "proxy_block",
            GradTarget::TranslationHead => "translation_head",
            GradTarget::TransformHead => "transform_head",
            GradTarget::AttentionPool => "attention_pool",
        }
    }

    /// Worst relative error on the instance drawn from `seed`.
    pub fn check(self, seed: u64) -> Result<f64> {
        let mut r = rng::seeded(seed, VERIFY_STREAM + self as u64);
        match self {
            GradTarget::OffsetNet => check_offset_net(&mut r),
            GradTarget::PointNet => check_pointnet(&mut r),
            GradTarget::ProxyBlock => check_proxy_block(&mut r),
            GradTarget::TranslationHead => check_head(&mut r, None),
            GradTarget::TransformHead => {
                let form = if r.random_bool(0.5) { TransformForm::Residual } else { TransformForm::Literal };
                check_head(&mut r, Some(form))
            }
            GradTarget::AttentionPool => check_pool(&mut r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradReport {
    pub target: GradTarget,
    pub instances: usize,
    pub max_error: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_error <= GRAD_TOLERANCE
    }
}

/// Runs `instances` seeds (`seed, seed + 1, …`) of every target.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<Vec<GradReport>> {
    GradTarget::ALL
        .iter()
        .map(|&target| {
            let mut worst: f64 = 0.0;
            for i in 0..instances as u64 {
                worst = worst.max(target.check(seed.wrapping_add(i))?);
            }
            Ok(GradReport {
                target,
                instances,
                max_error: worst,
            })
        })
        .collect()
}

fn randn(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
}

fn uniform(r: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| r.random_range(-bound..bound))
}

fn random_cloud(r: &mut ChaCha8Rng, n: usize, extent: f64) -> PointCloud {
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

fn random_clusters(r: &mut ChaCha8Rng) -> Result<(PointCloud, crate::cluster::ClusterSet)> {
    let n = r.random_range(30..60);
    let cloud = random_cloud(r, n, 2.0);
    let centers = grid_prior(&GridSpec::cube(2, Vec3::ZERO, Vec3::splat(2.0), 0.1))?;
    let cs = build_clusters(&centers, &cloud, Gamma::Knn, r.random_range(3..7))?;
    Ok((cloud, cs))
}

/// Bound in the widest gap between sorted row norms, so that some rows are
/// clamped, some are not, and none sits on the boundary.
fn split_bound(raw: &Matrix<f64>) -> f64 {
    let mut norms: Vec<f64> = raw.row_iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    norms.sort_by(f64::total_cmp);
    norms
        .windows(2)
        .max_by(|a, b| (a[1] - a[0]).total_cmp(&(b[1] - b[0])))
        .map_or(1.0, |w| 0.5 * (w[0] + w[1]))
}

fn check_offset_net(r: &mut ChaCha8Rng) -> Result<f64> {
    let (cloud, cs) = random_clusters(r)?;
    let feats = offset_features::<f64>(&cs, &cloud)?;
    let mut p0 = offsetnet_init_with(r.random(), r.random_range(4..9), 1.0)?;
    // hidden pre-activations: half clearly on, half clearly off
    for (j, b) in p0.w1.bias.iter_mut().flatten().enumerate() {
        let mag = r.random_range(3.0..4.0);
        *b = if j % 2 == 0 { mag } else { -mag };
    }
    let weights = uniform(r, cs.len(), 3, 1.0);
    let (raw, traces) = offsetnet_raw(&p0, feats.clone())?;
    let s = split_bound(&raw);
    let g = offsetnet_backward(&p0, &raw, &traces, s, &weights)?;
    grad_check_stencil(
        |x| {
            let mut p = p0.clone();
            unflatten(&mut p, x)?;
            let (raw, _) = offsetnet_raw(&p, feats.clone())?;
            clamp_offsets(&raw, s)?.hadamard(&weights).map(|m| m.sum())
        },
        &flatten(&g),
        &flatten(&p0),
        1e-4,
        Stencil::FivePoint,
    )
}

fn check_pointnet(r: &mut ChaCha8Rng) -> Result<f64> {
    let (cloud, cs) = random_clusters(r)?;
    let c = r.random_range(3..10);
    let mut p0 = PointNetParams::<f64>::init(r, c);
    for b in p0.layer.bias.as_mut().expect("pointnet layer has a bias") {
        *b = r.random_range(0.5..1.5);
    }
    let weights = uniform(r, cs.len(), c, 1.0);
    let (_, traces) = pointnet_lite_forward(&p0, &cs, &cloud)?;
    let g = pointnet_lite_backward(&p0, &traces, &weights)?;
    grad_check_value(
        |x| {
            let mut p = p0.clone();
            unflatten(&mut p, x)?;
            pointnet_lite(&p, &cs, &cloud)?.hadamard(&weights).map(|m| m.sum())
        },
        &flatten(&g),
        &flatten(&p0),
        1e-6,
    )
}

fn check_proxy_block(r: &mut ChaCha8Rng) -> Result<f64> {
    let shape = ProxyBiasShape::for_channels(16)?;
    let c = shape.channels();
    let n = r.random_range(2..7);
    let n_p = r.random_range(1..5);
    let logits = if r.random_bool(0.5) { LogitScale::InvSqrtDim } else { LogitScale::Unit };
    let capacity = n + r.random_range(0..3);
    let mut block = ProxyBlockParams::<f64>::init(r, shape, 2, capacity, 0.3);
    // FFN pre-activations: half clearly on, half clearly off
    block.ffn_in.weight = block.ffn_in.weight.scale(0.5);
    for (j, b) in block.ffn_in.bias.iter_mut().flatten().enumerate() {
        let mag = r.random_range(2.0..3.0);
        *b = if j % 2 == 0 { mag } else { -mag };
    }
    for b in block.ffn_out.bias.iter_mut().flatten() {
        *b = r.random_range(-0.5..0.5);
    }
    let f0 = randn(r, n, c);
    let p0 = randn(r, n_p, c);
    let weights = randn(r, n, c);
    let n_params = flatten(&block).len();
    let (_, cache) = proxy_block_forward(&block, &f0, &p0, logits)?;
    let g = proxy_block_backward(&block, &cache, &weights)?;
    let analytic = [flatten(&g.params), g.d_f0.into_vec(), g.d_p0.into_vec()].concat();
    let x0 = [flatten(&block), f0.data().to_vec(), p0.data().to_vec()].concat();
    grad_check_stencil(
        |x| {
            let mut b = block.clone();
            unflatten(&mut b, &x[..n_params])?;
            let f = Matrix::from_vec(n, c, x[n_params..n_params + n * c].to_vec())?;
            let p = Matrix::from_vec(n_p, c, x[n_params + n * c..].to_vec())?;
            proxy_block(&b, &f, &p, logits)?.hadamard(&weights).map(|m| m.sum())
        },
        &analytic,
        &x0,
        2e-3,
        Stencil::FivePoint,
    )
}

fn check_head(r: &mut ChaCha8Rng, form: Option<TransformForm>) -> Result<f64> {
    let c = r.random_range(2..12);
    let n = r.random_range(1..7);
    let mut heads = HeadParams::<f64>::uniform(r, c, 1.0);
    for l in [&mut heads.u_text, &mut heads.u_image] {
        for b in l.bias.as_mut().expect("heads have biases") {
            *b = r.random_range(-1.0..1.0);
        }
    }
    let feats = randn(r, n, c);
    let width = if form.is_some() { 9 } else { 3 };
    let weights = randn(r, n, width);
    let eval = |h: &HeadParams<f64>, f: &Matrix<f64>| match form {
        Some(form) => transform_head(f, h, form),
        None => translation_head(f, h),
    };
    let mut g = heads.zeros_like();
    let d_feats = match form {
        Some(_) => transform_head_pullback(&feats, &heads, &weights, &mut g)?,
        None => translation_head_pullback(&feats, &heads, &weights, &mut g)?,
    };
    let n_params = flatten(&heads).len();
    let analytic = [flatten(&g), d_feats.into_vec()].concat();
    let x0 = [flatten(&heads), feats.data().to_vec()].concat();
    grad_check_value(
        |x| {
            let mut h = heads.clone();
            unflatten(&mut h, &x[..n_params])?;
            let f = Matrix::from_vec(n, c, x[n_params..].to_vec())?;
            eval(&h, &f)?.hadamard(&weights).map(|m| m.sum())
        },
        &analytic,
        &x0,
        1e-2,
    )
}

fn check_pool(r: &mut ChaCha8Rng) -> Result<f64> {
    let c = r.random_range(2..9);
    let mut params = PoolParams::<f64>::init(r, c);
    params.score.weight = uniform(r, c, 1, 1.0);
    let sizes: Vec<usize> = (0..r.random_range(1..5)).map(|_| r.random_range(1..6)).collect();
    let groups: Vec<Matrix<f64>> = sizes.iter().map(|&k| randn(r, k, c)).collect();
    let weights = randn(r, groups.len(), c);
    let (_, traces) = attention_pool_groups_forward(&params, &groups)?;
    let mut g = params.zeros_like();
    let d_groups = attention_pool_groups_pullback(&params, &groups, &traces, &weights, &mut g)?;
    let n_params = flatten(&params).len();
    let mut analytic = flatten(&g);
    let mut x0 = flatten(&params);
    for (d, grp) in d_groups.iter().zip(&groups) {
        analytic.extend_from_slice(d.data());
        x0.extend_from_slice(grp.data());
    }
    grad_check_stencil(
        |x| {
            let mut p = params.clone();
            unflatten(&mut p, &x[..n_params])?;
            let mut at = n_params;
            let mut gs = Vec::with_capacity(sizes.len());
            for &k in &sizes {
                gs.push(Matrix::from_vec(k, c, x[at..at + k * c].to_vec())?);
                at += k * c;
            }
            attention_pool_groups(&p, &gs)?.hadamard(&weights).map(|m| m.sum())
        },
        &analytic,
        &x0,
        1e-4,
        Stencil::FivePoint,
    )
}
