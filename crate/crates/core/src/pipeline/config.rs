use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{DropMethod, Gamma};
use crate::error::{Error, Result};
use crate::numerics::LogitScale;
use crate::proxy::{ProxyBiasShape, TransformForm};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "PROXYFORM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Full configuration of one enhancement run. Every field has a default, so
/// `{}` is a valid configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Reference points per axis.
    pub grid_counts: [usize; 3],
    /// Offset bound in grid units.
    pub offset_bound_s: f64,
    /// Scene length of one grid unit, as a fraction of the smallest cell edge.
    pub offset_unit_per_cell: f64,
    pub drop_beta: f64,
    pub drop_method: DropMethod,
    pub gamma: Gamma,
    pub points_per_cluster: usize,
    pub channels: usize,
    pub offset_channels: usize,
    pub ffn_mult: usize,
    pub layers: usize,
    pub n_text_proxies: usize,
    pub n_views: usize,
    pub tokens_per_view: usize,
    pub seed: u64,
    pub precision: Precision,
    pub unscaled_logits: bool,
    pub literal_transform_head: bool,
    /// Accept any square `C` for the proxy bias instead of a fourth power.
    pub relaxed_proxy_bias: bool,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    /// Bound of the uniform init of the offset network's final layer.
    pub offset_init_bound: f64,
    /// Bound of the uniform init of both head weight matrices.
    pub head_init_bound: f64,
    /// Bound of the uniform init of the proxy-bias grids.
    pub proxy_bias_init_bound: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grid_counts: [12, 12, 12],
            offset_bound_s: 4.0,
            offset_unit_per_cell: 0.0625,
            drop_beta: 0.6,
            drop_method: DropMethod::Random,
            gamma: Gamma::Knn,
            points_per_cluster: 32,
            channels: 256,
            offset_channels: 64,
            ffn_mult: 4,
            layers: 3,
            n_text_proxies: 32,
            n_views: 4,
            tokens_per_view: 16,
            seed: 0,
            precision: Precision::F32,
            unscaled_logits: false,
            literal_transform_head: false,
            relaxed_proxy_bias: false,
            threads: 0,
            offset_init_bound: 0.0,
            head_init_bound: 0.0,
            proxy_bias_init_bound: 0.02,
        }
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::InvalidConfig(format!("{name} must be positive")));
    }
    Ok(())
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
    }
    Ok(())
}

impl PipelineConfig {
    /// Quick preset: `C = 64` with the relaxed bias grid and one block per
    /// stack.
    pub fn fast() -> Self {
        PipelineConfig {
            channels: 64,
            layers: 1,
            relaxed_proxy_bias: true,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (a, &c) in self.grid_counts.iter().enumerate() {
            positive(&format!("grid_counts[{a}]"), c)?;
        }
        non_negative("offset_bound_s", self.offset_bound_s)?;
        non_negative("offset_unit_per_cell", self.offset_unit_per_cell)?;
        if !(0.0..1.0).contains(&self.drop_beta) {
            return Err(Error::InvalidConfig(format!(
                "drop_beta must lie in [0, 1), got {}",
                self.drop_beta
            )));
        }
        if let Gamma::Ball { radius } = self.gamma {
            if !(radius > 0.0 && radius.is_finite()) {
                return Err(Error::InvalidConfig(format!("ball radius must be > 0, got {radius}")));
            }
        }
        positive("points_per_cluster", self.points_per_cluster)?;
        positive("channels", self.channels)?;
        positive("offset_channels", self.offset_channels)?;
        positive("ffn_mult", self.ffn_mult)?;
        positive("n_text_proxies", self.n_text_proxies)?;
        positive("n_views", self.n_views)?;
        positive("tokens_per_view", self.tokens_per_view)?;
        non_negative("offset_init_bound", self.offset_init_bound)?;
        non_negative("head_init_bound", self.head_init_bound)?;
        non_negative("proxy_bias_init_bound", self.proxy_bias_init_bound)?;
        self.bias_shape()?;
        Ok(())
    }

    pub fn bias_shape(&self) -> Result<ProxyBiasShape> {
        if self.relaxed_proxy_bias {
            ProxyBiasShape::for_channels_relaxed(self.channels)
        } else {
            ProxyBiasShape::for_channels(self.channels)
        }
    }

    pub fn logit_scale(&self) -> LogitScale {
        LogitScale::from_unscaled_flag(self.unscaled_logits)
    }

    pub fn transform_form(&self) -> TransformForm {
        TransformForm::from_literal_flag(self.literal_transform_head)
    }

    pub fn grid_total(&self) -> usize {
        self.grid_counts.iter().product()
    }

    /// Clusters surviving the drop.
    pub fn kept_clusters(&self) -> usize {
        crate::cluster::kept_count(self.grid_total(), self.drop_beta)
    }

    /// Canonical JSON (fields in declaration order).
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact canonical JSON, hex encoded. `threads` does not
    /// affect results and is excluded.
    pub fn hash(&self) -> String {
        let canonical = PipelineConfig { threads: 0, ..self.clone() };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Replaces the seed with `PROXYFORM_SEED` when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Some(seed) = env_seed()? {
            self.seed = seed;
        }
        Ok(())
    }
}

/// Value of `PROXYFORM_SEED`, if set.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::InvalidConfig(format!("{SEED_ENV}: {e}"))),
    }
}

pub fn parse_config(text: &str, origin: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        detail: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and validates a JSON configuration.
pub fn load_config(path: impl AsRef<Path>) -> Result<PipelineConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

pub fn save_config(cfg: &PipelineConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, cfg.to_json() + "\n").map_err(|e| Error::io(path, e))
}
