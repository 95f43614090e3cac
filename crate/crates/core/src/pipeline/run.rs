use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, Precision};
use super::model::Model;
use super::scene::Proxies;
use crate::cluster::{build_clusters, drop_clusters, grid_prior, recluster, DropConfig, GridSpec};
use crate::error::{Error, Result, StageExt};
use crate::geom::{PointCloud, Vec3};
use crate::numerics::{Matrix, Real};
use crate::offsetnet::{apply_offsets, offsetnet_forward};
use crate::proxy::{
    attention_pool_groups, flops_count, pointnet_lite, reduction, rows_to_matrix3, rows_to_vec3,
    stack_forward, transform_head, translation_head, AttentionVariant, FlopsConfig, FlopsReport,
};
use crate::reshape::{apply_all, TransformSet};

/// Offset bound in scene units: grid units × unit length, where one unit
/// is `offset_unit_per_cell` of the smallest edge of an unshrunk grid cell.
pub fn scene_offset_bound(cfg: &PipelineConfig, lo: Vec3, hi: Vec3) -> f64 {
    let min_cell = (0..3)
        .map(|a| (hi[a] - lo[a]) / cfg.grid_counts[a] as f64)
        .fold(f64::INFINITY, f64::min);
    cfg.offset_bound_s * cfg.offset_unit_per_cell * min_cell
}

/// Analytic FLOPs of one pipeline stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlops {
    pub stage: String,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

/// Self, cross and proxy attention stacks at the same dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsComparison {
    pub self_attention: FlopsReport,
    pub cross_attention: FlopsReport,
    pub proxy_attention: FlopsReport,
    /// Attention-core reduction of proxy relative to self attention.
    pub core_reduction: f64,
    /// Whole-stack reduction of proxy relative to self attention.
    pub total_reduction: f64,
}

impl FlopsComparison {
    pub fn new(base: FlopsConfig) -> Self {
        let r = |v| flops_count(&base.with_variant(v));
        let (s, c, p) = (
            r(AttentionVariant::SelfAttention),
            r(AttentionVariant::Cross),
            r(AttentionVariant::Proxy),
        );
        FlopsComparison {
            core_reduction: reduction(s.flops.attention_core, p.flops.attention_core),
            total_reduction: reduction(s.flops.total, p.flops.total),
            self_attention: s,
            cross_attention: c,
            proxy_attention: p,
        }
    }

    pub fn variants(&self) -> [&FlopsReport; 3] {
        [&self.self_attention, &self.cross_attention, &self.proxy_attention]
    }
}

/// Attention-stack comparison at the configured kept-cluster count, in the
/// four-projection convention.
pub fn flops_report(cfg: &PipelineConfig) -> FlopsComparison {
    FlopsComparison::new(FlopsConfig {
        n_seq: cfg.kept_clusters() as u64,
        n_proxy: cfg.n_text_proxies as u64,
        channels: cfg.channels as u64,
        ffn_mult: cfg.ffn_mult as u64,
        layers: cfg.layers as u64,
        variant: AttentionVariant::Proxy,
        out_projection: true,
    })
}

/// Per-stage analytic FLOPs of one enhancement, 2 per multiply-add. Neighbour
/// searches, softmax and elementwise activations are not counted.
pub fn stage_flops(cfg: &PipelineConfig) -> Vec<StageFlops> {
    let g = cfg.grid_total() as u64;
    let n = cfg.kept_clusters() as u64;
    let m = cfg.points_per_cluster as u64;
    let c = cfg.channels as u64;
    let c_off = cfg.offset_channels as u64;
    let v = cfg.n_views as u64;
    let k = cfg.tokens_per_view as u64;
    let stack = |n_proxy: usize| {
        flops_count(&FlopsConfig {
            n_seq: n,
            n_proxy: n_proxy as u64,
            channels: c,
            ffn_mult: cfg.ffn_mult as u64,
            layers: cfg.layers as u64,
            variant: AttentionVariant::Proxy,
            out_projection: false,
        })
        .flops
        .total
    };
    let rows = [
        ("offsets", g * (2 * m * 6 * c_off + m * c_off + 2 * c_off * 3)),
        ("features", n * 2 * m * 6 * c),
        ("text_blocks", stack(cfg.n_text_proxies)),
        ("translation_head", n * 2 * c * 3),
        ("attention_pool", v * (2 * k * c + 2 * k * c)),
        ("image_blocks", stack(cfg.n_views)),
        ("transform_head", n * 2 * c * 9),
        ("reshape", n * m * 2 * 9),
    ];
    rows.into_iter()
        .map(|(stage, flops)| StageFlops {
            stage: stage.into(),
            flops,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CloudStats {
    pub points: usize,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub centroid: Vec3,
}

impl CloudStats {
    pub fn of(cloud: &PointCloud) -> Option<Self> {
        let (lo, hi) = cloud.bounds()?;
        let sum = cloud.points.iter().fold(Vec3::ZERO, |a, &p| a + p);
        Some(CloudStats {
            points: cloud.len(),
            bounds_min: lo,
            bounds_max: hi,
            centroid: sum * (1.0 / cloud.len() as f64),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub input: CloudStats,
    pub output: CloudStats,
    pub grid_clusters: usize,
    pub kept_clusters: usize,
    pub offset_bound_scene: f64,
    pub max_offset_norm: f64,
    pub moved_points: usize,
    pub max_displacement: f64,
    pub stage_flops: Vec<StageFlops>,
    pub total_flops: u64,
    pub attention_flops: FlopsComparison,
    /// Wall-clock seconds per stage; the only nondeterministic field.
    pub timings: Vec<StageTiming>,
}

impl RunReport {
    /// Copy without timings, for reproducibility comparisons.
    pub fn without_timings(&self) -> Self {
        RunReport {
            timings: Vec::new(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn save_report(report: &RunReport, path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, report.to_json() + "\n").map_err(|e| Error::io(path, e))
}

struct Timer {
    timings: Vec<StageTiming>,
    last: Instant,
}

impl Timer {
    fn new() -> Self {
        Timer {
            timings: Vec::new(),
            last: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.timings.push(StageTiming {
            stage: stage.into(),
            seconds: (now - self.last).as_secs_f64(),
        });
        self.last = now;
    }
}

/// Enhanced cloud and run report, with parameters initialised from `cfg`.
pub fn enhance(cfg: &PipelineConfig, cloud: &PointCloud, proxies: &Proxies) -> Result<(PointCloud, RunReport)> {
    let model = Model::init(cfg).stage("init")?;
    enhance_with_model(cfg, &model, cloud, proxies)
}

/// Runs the full pipeline with the given parameters, inside a dedicated
/// worker pool when `cfg.threads > 0`.
pub fn enhance_with_model(
    cfg: &PipelineConfig,
    model: &Model<f64>,
    cloud: &PointCloud,
    proxies: &Proxies,
) -> Result<(PointCloud, RunReport)> {
    cfg.validate()?;
    model.validate(cfg)?;
    let run = || match cfg.precision {
        Precision::F32 => run_typed(cfg, &model.cast::<f32>(), cloud, proxies),
        Precision::F64 => run_typed(cfg, model, cloud, proxies),
    };
    if cfg.threads == 0 {
        return run();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?
        .install(run)
}

fn check_proxies(cfg: &PipelineConfig, proxies: &Proxies) -> Result<()> {
    let c = cfg.channels;
    if proxies.text.cols() != c || proxies.text.rows() == 0 {
        return Err(Error::shape("proxies", format!("text tokens {:?} for C={c}", proxies.text.shape())));
    }
    if proxies.views.is_empty() {
        return Err(Error::shape("proxies", "no image views"));
    }
    if let Some(v) = proxies.views.iter().find(|v| v.cols() != c || v.rows() == 0) {
        return Err(Error::shape("proxies", format!("view tokens {:?} for C={c}", v.shape())));
    }
    Ok(())
}

fn run_typed<T: Real>(
    cfg: &PipelineConfig,
    model: &Model<T>,
    cloud: &PointCloud,
    proxies: &Proxies,
) -> Result<(PointCloud, RunReport)> {
    let mut timer = Timer::new();
    check_proxies(cfg, proxies).stage("input")?;
    let input = CloudStats::of(cloud).ok_or(Error::EmptyInput("input cloud")).stage("input")?;
    if !cloud.points.iter().all(|p| p.is_finite()) {
        return Err(Error::InvalidArgument("input cloud has non-finite points".into())).stage("input");
    }
    let logits = cfg.logit_scale();
    let m = cfg.points_per_cluster;

    let s = scene_offset_bound(cfg, input.bounds_min, input.bounds_max);
    let grid = GridSpec {
        grid_counts: cfg.grid_counts,
        bounds_min: input.bounds_min,
        bounds_max: input.bounds_max,
        offset_bound_s: s,
    };
    let centers = grid_prior(&grid).stage("grid_prior")?;
    let clusters = build_clusters(&centers, cloud, cfg.gamma, m).stage("cluster")?;
    timer.lap("cluster");

    let field = offsetnet_forward(&model.offset, &clusters, cloud, s).stage("offsets")?;
    let max_offset_norm = field.offsets.iter().map(|o| o.norm()).fold(0.0, f64::max);
    let moved = apply_offsets(&clusters.centers, &field).stage("offsets")?;
    timer.lap("offsets");

    let reclustered = recluster(&moved, cloud, cfg.gamma, m).stage("recluster")?;
    let kept = drop_clusters(
        &reclustered,
        &DropConfig {
            beta: cfg.drop_beta,
            method: cfg.drop_method,
            seed: cfg.seed,
        },
    )
    .stage("drop")?;
    timer.lap("recluster");

    let f0: Matrix<T> = pointnet_lite(&model.pointnet, &kept, cloud).stage("features")?;
    timer.lap("features");

    let text = proxies.text.cast::<T>();
    let f_text = stack_forward(&model.text_blocks, &f0, &text, logits).stage("text_blocks")?;
    let translations = translation_head(&f_text, &model.heads).stage("translation_head")?;
    timer.lap("text_blocks");

    let views: Vec<Matrix<T>> = proxies.views.iter().map(|v| v.cast()).collect();
    let pooled = attention_pool_groups(&model.pool, &views).stage("attention_pool")?;
    let f_image = stack_forward(&model.image_blocks, &f0, &pooled, logits).stage("image_blocks")?;
    let matrices = transform_head(&f_image, &model.heads, cfg.transform_form()).stage("transform_head")?;
    timer.lap("image_blocks");

    let ts = TransformSet {
        matrices: rows_to_matrix3(&matrices).stage("transform_head")?,
        translations: rows_to_vec3(&translations).stage("translation_head")?,
    };
    let out = apply_all(&kept, &ts, cloud).stage("reshape")?;
    timer.lap("reshape");

    let (moved_points, max_displacement) = cloud
        .points
        .iter()
        .zip(&out.points)
        .filter(|(a, b)| a != b)
        .fold((0, 0.0f64), |(n, d), (a, b)| (n + 1, d.max((*a - *b).norm())));
    let stage_flops = stage_flops(cfg);
    let report = RunReport {
        seed: cfg.seed,
        config_hash: cfg.hash(),
        input,
        output: CloudStats::of(&out).expect("output has the input's length"),
        grid_clusters: clusters.len(),
        kept_clusters: kept.len(),
        offset_bound_scene: s,
        max_offset_norm,
        moved_points,
        max_displacement,
        total_flops: stage_flops.iter().map(|s| s.flops).sum(),
        stage_flops,
        attention_flops: flops_report(cfg),
        timings: timer.timings,
    };
    Ok((out, report))
}
