//! Run configuration read from TOML.
//!
//! Sections follow the library modules:
//!
//! ```toml
//! seed = 7
//!
//! [simulator]      # scene counts, sensor noise, camera rig, feature maps
//! [radar]          # sweeps, points per frame, range filter
//! [association]    # associator kind, gamma / delta / k_prime, ball radius
//! [fusion]         # network sizes, coordinates, decoding, patch window
//! [training]       # epochs, optimizer, augmentation
//! [eval]           # thresholds, NMS, bins
//! ```
//!
//! Every key is optional; missing keys take the defaults below.

use std::path::Path;

use anyhow::{Context, Result};
use camradar_core::association::{AssociationConfig, AssociatorKind};
use camradar_core::eval::EvalConfig;
use camradar_core::fusion::FusionConfig;
use camradar_core::pipeline::{AugmentConfig, PipelineConfig, TrainConfig};
use camradar_core::simulator::SimConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarSection {
    pub n_sweeps: usize,
    pub max_points: usize,
    pub max_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssociationSection {
    pub kind: AssociatorKind,
    pub gamma: f64,
    pub delta: f64,
    pub k_prime: usize,
    pub ball_radius: f64,
    /// Footprint margin for in-box labels and association metrics (m).
    pub label_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionSection {
    #[serde(flatten)]
    pub model: FusionConfig,
    pub feature_stride: usize,
    pub patch_reference_width: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub simulator: SimConfig,
    pub radar: RadarSection,
    pub association: AssociationSection,
    pub fusion: FusionSection,
    pub training: TrainingSection,
    pub eval: EvalConfig,
}

impl Default for RadarSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { n_sweeps: p.n_sweeps, max_points: p.max_points, max_range: p.max_range }
    }
}

impl Default for AssociationSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            kind: p.associator,
            gamma: p.association.gamma,
            delta: p.association.delta,
            k_prime: p.association.k_prime,
            ball_radius: p.ball_radius,
            label_margin: p.label_margin,
        }
    }
}

impl Default for FusionSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self { model: FusionConfig::desk(), feature_stride: p.feature_stride, patch_reference_width: p.patch_reference_width }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self { train: TrainConfig::default(), augment: AugmentConfig::default() }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            simulator: SimConfig::default(),
            radar: RadarSection::default(),
            association: AssociationSection::default(),
            fusion: FusionSection::default(),
            training: TrainingSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Keys in `text` override the defaults one by one, including inside
    /// flattened sections whose library types have defaults of their own.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(Self::default())?;
        merge(&mut merged, user.clone());
        let cfg: RunConfig = merged.clone().try_into()?;
        let known = toml::Table::try_from(&cfg)?;
        if let Some(k) = unknown_key(&user, &known, "") {
            anyhow::bail!("unknown configuration key `{k}`");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.pipeline().validate()?;
        self.fusion.model.validate()?;
        self.training.train.validate()?;
        self.eval.validate()?;
        if self.fusion.model.image_channels != self.simulator.features.channels {
            anyhow::bail!(
                "fusion.image_channels = {} but the simulator renders {} feature channels",
                self.fusion.model.image_channels,
                self.simulator.features.channels
            );
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            n_sweeps: self.radar.n_sweeps,
            max_points: self.radar.max_points,
            max_range: self.radar.max_range,
            associator: self.association.kind,
            association: AssociationConfig { gamma: self.association.gamma, delta: self.association.delta, k_prime: self.association.k_prime },
            ball_radius: self.association.ball_radius,
            label_margin: self.association.label_margin,
            feature_stride: self.fusion.feature_stride,
            patch_reference_width: self.fusion.patch_reference_width,
            augment: self.training.augment.clone(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// First key of `user` that does not survive a round trip through the typed
/// configuration.
fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => {
                if let Some(p) = unknown_key(ut, kt, &path) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}
