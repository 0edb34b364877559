//! Both networks with their shared parameter store and checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{read_checkpoint, write_checkpoint, Checkpoint, ParamStore, Scalar};
use crate::rpn2d::{BackboneConfig, BevSiamese};
use crate::sim3d::{ShapeConfig, ShapeSiamese};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NetConfig {
    pub backbone: BackboneConfig,
    pub shape: ShapeConfig,
}

#[derive(Debug, Clone)]
pub struct Networks<T> {
    pub config: NetConfig,
    pub store: ParamStore<T>,
    pub bev: BevSiamese,
    pub shape: ShapeSiamese,
}

impl<T: Scalar> Networks<T> {
    /// Fresh He-initialised networks; the seed fixes every weight.
    pub fn new(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let bev = BevSiamese::new(&mut store, &config.backbone, &mut rng);
        let shape = ShapeSiamese::new(&mut store, &config.shape, &mut rng);
        Self {
            config,
            store,
            bev,
            shape,
        }
    }
}

impl Networks<f32> {
    pub fn to_checkpoint(&self, mut meta: Vec<(String, String)>) -> Result<Checkpoint> {
        meta.insert(0, ("config".into(), serde_json::to_string(&self.config)?));
        Ok(Checkpoint::from_store(&self.store, meta))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config: NetConfig = serde_json::from_str(
            ckpt.meta_value("config")
                .ok_or_else(|| Error::Checkpoint("missing network config".into()))?,
        )?;
        let mut nets = Self::new(config, 0);
        ckpt.load_into(&mut nets.store)?;
        Ok(nets)
    }

    pub fn save(&self, path: &Path, meta: Vec<(String, String)>) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint(meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
