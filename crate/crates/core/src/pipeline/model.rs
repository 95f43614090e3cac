use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, Real};
use crate::offsetnet::{offsetnet_init_with, OffsetNetParams};
use crate::proxy::{HeadParams, PointNetParams, PoolParams, ProxyBlockParams};
use crate::rng;

/// Every learnable parameter of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real", deny_unknown_fields)]
pub struct Model<T> {
    pub offset: OffsetNetParams<T>,
    pub pointnet: PointNetParams<T>,
    pub text_blocks: Vec<ProxyBlockParams<T>>,
    pub image_blocks: Vec<ProxyBlockParams<T>>,
    pub pool: PoolParams<T>,
    pub heads: HeadParams<T>,
}

impl Model<f64> {
    /// Seeded initialisation. Each component draws from its own stream.
    ///
    /// With the default bounds the offset network's final layer and both
    /// heads are zero, so the pipeline starts as the identity.
    pub fn init(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.bias_shape()?;
        let c = cfg.channels;
        let capacity = cfg.kept_clusters();
        let stack = |stream| {
            let mut r = rng::seeded(cfg.seed, stream);
            (0..cfg.layers)
                .map(|_| {
                    ProxyBlockParams::init(&mut r, shape, cfg.ffn_mult, capacity, cfg.proxy_bias_init_bound)
                })
                .collect::<Vec<_>>()
        };
        let heads = if cfg.head_init_bound > 0.0 {
            HeadParams::uniform(&mut rng::seeded(cfg.seed, rng::stream::HEADS), c, cfg.head_init_bound)
        } else {
            HeadParams::zeros(c)
        };
        Ok(Model {
            offset: offsetnet_init_with(cfg.seed, cfg.offset_channels, cfg.offset_init_bound)?,
            pointnet: PointNetParams::init(&mut rng::seeded(cfg.seed, rng::stream::POINTNET), c),
            text_blocks: stack(rng::stream::TEXT_BLOCKS),
            image_blocks: stack(rng::stream::IMAGE_BLOCKS),
            pool: PoolParams::init(&mut rng::seeded(cfg.seed, rng::stream::POOL), c),
            heads,
        })
    }
}

impl<T: Real> Model<T> {
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            offset: self.offset.cast(),
            pointnet: self.pointnet.cast(),
            text_blocks: self.text_blocks.iter().map(|b| b.cast()).collect(),
            image_blocks: self.image_blocks.iter().map(|b| b.cast()).collect(),
            pool: self.pool.cast(),
            heads: self.heads.cast(),
        }
    }

    pub fn channels(&self) -> usize {
        self.pointnet.channels()
    }

    /// Checks internal consistency and agreement with `cfg`.
    pub fn validate(&self, cfg: &PipelineConfig) -> Result<()> {
        self.offset.validate()?;
        self.pointnet.validate()?;
        self.pool.validate()?;
        self.heads.validate()?;
        let c = self.channels();
        let mismatch = |what: String| Err(Error::InvalidConfig(format!("checkpoint does not match config: {what}")));
        if c != cfg.channels {
            return mismatch(format!("C = {c}, config says {}", cfg.channels));
        }
        if self.offset.c_off() != cfg.offset_channels {
            return mismatch(format!("offset width {}", self.offset.c_off()));
        }
        if self.pool.channels() != c || self.heads.channels() != c {
            return mismatch("pool or head width".into());
        }
        for stack in [&self.text_blocks, &self.image_blocks] {
            if stack.len() != cfg.layers {
                return mismatch(format!("{} blocks, config says {}", stack.len(), cfg.layers));
            }
            for b in stack {
                b.validate()?;
                if b.channels() != c {
                    return mismatch(format!("block width {}", b.channels()));
                }
                if b.bias.capacity() < cfg.kept_clusters() {
                    return mismatch(format!(
                        "proxy-bias capacity {} below {} kept clusters",
                        b.bias.capacity(),
                        cfg.kept_clusters()
                    ));
                }
            }
        }
        Ok(())
    }
}

impl<T: Real> ParamSet<T> for Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&[T])) {
        self.offset.visit(f);
        self.pointnet.visit(f);
        self.text_blocks.visit(f);
        self.image_blocks.visit(f);
        self.pool.visit(f);
        self.heads.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut [T])) {
        self.offset.visit_mut(f);
        self.pointnet.visit_mut(f);
        self.text_blocks.visit_mut(f);
        self.image_blocks.visit_mut(f);
        self.pool.visit_mut(f);
        self.heads.visit_mut(f);
    }
}

/// Config and parameters together, as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: PipelineConfig,
    pub model: Model<f64>,
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), ck).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint =
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    ck.config.validate()?;
    ck.model.validate(&ck.config)?;
    Ok(ck)
}
