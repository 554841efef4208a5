//! Model checkpoints.
//!
//! Layout: the line `CAMRADAR-CHECKPOINT 1`, one JSON line of metadata
//! (model configuration, radar feature statistics, training epochs and seed),
//! then the parameter tensors in the core tensor container format.

use std::path::Path;

use anyhow::{bail, Context, Result};
use camradar_core::fusion::{FusionConfig, FusionModel};
use camradar_core::radar::FeatureStats;
use camradar_core::seeded_rng;
use camradar_core::tensor::{container, ParamStore};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8] = b"CAMRADAR-CHECKPOINT 1\n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub fusion: FusionConfig,
    pub stats: FeatureStats,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = MAGIC.to_vec();
        serde_json::to_writer(&mut out, &self.meta)?;
        out.push(b'\n');
        out.extend(container::encode(&self.store.records())?);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let Some(rest) = bytes.strip_prefix(MAGIC) else {
            bail!("not a camradar checkpoint");
        };
        let nl = rest.iter().position(|b| *b == b'\n').context("truncated checkpoint header")?;
        let meta: CheckpointMeta = serde_json::from_slice(&rest[..nl]).context("checkpoint metadata")?;
        let records = container::decode(&rest[nl + 1..])?;
        // Build the architecture from the stored config, then overwrite every
        // parameter; a missing or misshapen tensor fails here.
        let mut store = ParamStore::new();
        FusionModel::new(&mut store, &meta.fusion, &mut seeded_rng(0))?;
        store.load(&records)?;
        Ok(Self { meta, store })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).with_context(|| format!("writing checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
        Self::decode(&bytes).with_context(|| format!("loading checkpoint {}", path.display()))
    }

    /// Loads and checks that the stored model matches `expected`.
    pub fn load_for(path: &Path, expected: &FusionConfig) -> Result<Self> {
        let ck = Self::load(path)?;
        if &ck.meta.fusion != expected {
            bail!(
                "checkpoint {} was trained with a different fusion configuration\n  checkpoint: {:?}\n  config:     {:?}",
                path.display(),
                ck.meta.fusion,
                expected
            );
        }
        Ok(ck)
    }

    /// Rebuilds the model; its freshly initialized parameters are discarded
    /// in favour of the stored ones.
    pub fn model(&self) -> Result<FusionModel> {
        let mut scratch = ParamStore::new();
        Ok(FusionModel::new(&mut scratch, &self.meta.fusion, &mut seeded_rng(0))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use camradar_core::fusion::CoordMode;

    fn sample() -> Checkpoint {
        let fusion = FusionConfig::desk();
        let mut store = ParamStore::new();
        FusionModel::new(&mut store, &fusion, &mut seeded_rng(4)).unwrap();
        Checkpoint { meta: CheckpointMeta { fusion, stats: FeatureStats::IDENTITY, epochs: 0, seed: 4 }, store }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.store.records(), ck.store.records());
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn mismatched_config_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        sample().save(&p).unwrap();
        let other = FusionConfig { coords: CoordMode::Cartesian, ..FusionConfig::desk() };
        assert!(Checkpoint::load_for(&p, &FusionConfig::desk()).is_ok());
        assert!(Checkpoint::load_for(&p, &other).is_err());
        std::fs::write(&p, b"garbage").unwrap();
        assert!(Checkpoint::load(&p).is_err());
    }
}
