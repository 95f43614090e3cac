//! Closed-form FLOPs and parameter counts for attention block stacks.
//!
//! One multiply-add counts as 2 FLOPs. Per block, with `n` sequence rows,
//! `p` proxy rows, width `C` and FFN multiplier `h`:
//!
//! | term            | self      | cross     | proxy             |
//! |-----------------|-----------|-----------|-------------------|
//! | projections     | 8nC²      | 8nC²      | 8nC² + 2pC²       |
//! | attention core  | 4n²C      | 4npC      | 8npC              |
//! | FFN             | 4hnC²     | 4hnC²     | 4hnC²             |
//! | bias add        | 0         | 0         | nC                |
//!
//! The projection term assumes four `n`-sized projections (Q, K, V, output);
//! [`FlopsConfig::out_projection`] drops the output projection to match a
//! block that has none. Softmax, ReLU and residual adds are not counted.

use serde::{Deserialize, Serialize};

use super::bias::ProxyBiasShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    #[serde(rename = "self")]
    SelfAttention,
    Cross,
    Proxy,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 3] = [
        AttentionVariant::SelfAttention,
        AttentionVariant::Cross,
        AttentionVariant::Proxy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionVariant::SelfAttention => "self",
            AttentionVariant::Cross => "cross",
            AttentionVariant::Proxy => "proxy",
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsConfig {
    pub n_seq: u64,
    pub n_proxy: u64,
    pub channels: u64,
    pub ffn_mult: u64,
    pub layers: u64,
    pub variant: AttentionVariant,
    #[serde(default = "default_true")]
    pub out_projection: bool,
}

impl FlopsConfig {
    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.variant = variant;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub projections: u64,
    pub attention_core: u64,
    pub ffn: u64,
    pub bias: u64,
    pub total: u64,
}

impl FlopsBreakdown {
    fn new(projections: u64, attention_core: u64, ffn: u64, bias: u64) -> Self {
        FlopsBreakdown {
            projections,
            attention_core,
            ffn,
            bias,
            total: projections + attention_core + ffn + bias,
        }
    }

    fn times(self, k: u64) -> Self {
        FlopsBreakdown::new(self.projections * k, self.attention_core * k, self.ffn * k, self.bias * k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamBreakdown {
    /// Q, K, V (and output) projection weights.
    pub projections: u64,
    /// Proxy projection weights.
    pub proxy_projection: u64,
    /// FFN weights and biases.
    pub ffn: u64,
    /// Proxy-bias grids.
    pub bias: u64,
    pub total: u64,
}

impl ParamBreakdown {
    fn new(projections: u64, proxy_projection: u64, ffn: u64, bias: u64) -> Self {
        ParamBreakdown {
            projections,
            proxy_projection,
            ffn,
            bias,
            total: projections + proxy_projection + ffn + bias,
        }
    }

    fn times(self, k: u64) -> Self {
        ParamBreakdown::new(
            self.projections * k,
            self.proxy_projection * k,
            self.ffn * k,
            self.bias * k,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub config: FlopsConfig,
    pub per_block: FlopsBreakdown,
    pub flops: FlopsBreakdown,
    pub params_per_block: ParamBreakdown,
    pub params: ParamBreakdown,
}

impl FlopsReport {
    pub fn total_flops(&self) -> u64 {
        self.flops.total
    }

    pub fn total_params(&self) -> u64 {
        self.params.total
    }
}

/// Bias parameters per sequence row: `D² + 2S` when `C` is a fourth power,
/// the relaxed grid when it is only a square, otherwise a dense `C`.
pub fn bias_params_per_row(channels: u64) -> u64 {
    let c = channels as usize;
    ProxyBiasShape::for_channels(c)
        .or_else(|_| ProxyBiasShape::for_channels_relaxed(c))
        .map(|s| s.params_per_row() as u64)
        .unwrap_or(channels)
}

fn block_flops(cfg: &FlopsConfig) -> FlopsBreakdown {
    let (n, p, c, h) = (cfg.n_seq, cfg.n_proxy, cfg.channels, cfg.ffn_mult);
    let seq_projections = if cfg.out_projection { 4 } else { 3 };
    let mut projections = 2 * seq_projections * n * c * c;
    let (core, bias) = match cfg.variant {
        AttentionVariant::SelfAttention => (4 * n * n * c, 0),
        AttentionVariant::Cross => (4 * n * p * c, 0),
        AttentionVariant::Proxy => {
            projections += 2 * p * c * c;
            (8 * n * p * c, n * c)
        }
    };
    FlopsBreakdown::new(projections, core, 4 * h * n * c * c, bias)
}

fn block_params(cfg: &FlopsConfig) -> ParamBreakdown {
    let (c, h) = (cfg.channels, cfg.ffn_mult);
    let seq_projections = if cfg.out_projection { 4 } else { 3 };
    let ffn = 2 * h * c * c + h * c + c;
    let (proxy_projection, bias) = match cfg.variant {
        AttentionVariant::Proxy => (c * c, cfg.n_seq * bias_params_per_row(c)),
        _ => (0, 0),
    };
    ParamBreakdown::new(seq_projections * c * c, proxy_projection, ffn, bias)
}

pub fn flops_count(cfg: &FlopsConfig) -> FlopsReport {
    let per_block = block_flops(cfg);
    let params_per_block = block_params(cfg);
    FlopsReport {
        config: *cfg,
        per_block,
        flops: per_block.times(cfg.layers),
        params_per_block,
        params: params_per_block.times(cfg.layers),
    }
}

pub fn param_count(cfg: &FlopsConfig) -> u64 {
    flops_count(cfg).params.total
}

/// `1 − candidate / baseline`.
pub fn reduction(baseline: u64, candidate: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - candidate as f64 / baseline as f64
    }
}

/// Axes of a FLOPs sweep.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub n_seq: Vec<u64>,
    pub channels: Vec<u64>,
    pub n_proxy: Vec<u64>,
    pub ffn_mult: Vec<u64>,
    pub layers: u64,
    pub out_projection: bool,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            n_seq: vec![512, 768, 1024, 1536, 2048],
            channels: vec![128, 256],
            n_proxy: vec![16, 32, 64, 128],
            ffn_mult: vec![2, 4],
            layers: 1,
            out_projection: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n_seq: u64,
    pub channels: u64,
    pub n_proxy: u64,
    pub ffn_mult: u64,
    pub self_flops: u64,
    pub cross_flops: u64,
    pub proxy_flops: u64,
    /// Total-FLOPs reduction of the proxy variant relative to self attention.
    pub reduction: f64,
}

pub fn sweep(grid: &SweepGrid) -> Vec<SweepPoint> {
    let mut out = Vec::new();
    for &n_seq in &grid.n_seq {
        for &channels in &grid.channels {
            for &n_proxy in &grid.n_proxy {
                for &ffn_mult in &grid.ffn_mult {
                    let base = FlopsConfig {
                        n_seq,
                        n_proxy,
                        channels,
                        ffn_mult,
                        layers: grid.layers,
                        variant: AttentionVariant::SelfAttention,
                        out_projection: grid.out_projection,
                    };
                    let total = |v| flops_count(&base.with_variant(v)).flops.total;
                    let (s, c, p) = (
                        total(AttentionVariant::SelfAttention),
                        total(AttentionVariant::Cross),
                        total(AttentionVariant::Proxy),
                    );
                    out.push(SweepPoint {
                        n_seq,
                        channels,
                        n_proxy,
                        ffn_mult,
                        self_flops: s,
                        cross_flops: c,
                        proxy_flops: p,
                        reduction: reduction(s, p),
                    });
                }
            }
        }
    }
    out
}

/// Sweep point whose reduction is closest to `target` (first wins on ties).
pub fn closest_to(points: &[SweepPoint], target: f64) -> Option<SweepPoint> {
    points.iter().copied().fold(None, |best: Option<SweepPoint>, p| match best {
        Some(b) if (b.reduction - target).abs() <= (p.reduction - target).abs() => Some(b),
        _ => Some(p),
    })
}
