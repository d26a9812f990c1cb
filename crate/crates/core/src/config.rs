//! Run configuration: one TOML document covering world generation,
//! detection, clustering, optimization, and every seed.

use crate::cluster::ClusterConfig;
use crate::lcd::LcdConfig;
use crate::posegraph::OptimizeConfig;
use crate::sim::WorldSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Seeds {
    pub world: u64,
    pub order: u64,
    pub kmeans: u64,
    pub ransac: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            world: 1,
            order: 2,
            kmeans: 3,
            ransac: 4,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub lcd: LcdConfig,
    pub cluster: ClusterConfig,
    pub opt: OptimizeConfig,
    pub seeds: Seeds,
    /// keyframes per batch in incremental mode
    pub batch: usize,
}

impl RunConfig {
    /// Parse a TOML document and inject the seeds into the sub-configs.
    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        let mut cfg: RunConfig = toml::from_str(text)?;
        cfg.resolve_seeds();
        Ok(cfg)
    }

    pub fn resolve_seeds(&mut self) {
        self.world.seed = self.seeds.world;
        self.lcd.kmeans_seed = self.seeds.kmeans;
        self.lcd.ransac_seed = self.seeds.ransac;
        self.cluster.kmeans_seed = self.seeds.kmeans;
        if self.batch == 0 {
            self.batch = 200;
        }
    }
}
