//! Pipeline configuration, read from TOML and validated before any run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::LevelSchedule;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::representation::Pooling;

/// Layout of the synthetic world and its query sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    /// Tiles per side of the square tile grid.
    pub world_size_tiles: usize,
    pub tile_size_px: usize,
    pub meters_per_pixel: f64,
    /// Test queries per tile.
    pub queries_per_tile: usize,
    /// Training queries per tile, drawn from a separate stream.
    pub train_queries_per_tile: usize,
    /// Fraction of a tile shared with its grid neighbour; tile stride is `L * (1 - overlap)`.
    pub semi_positive_overlap: f64,
    /// Largest GT offset from the tile centre along each axis, in pixels.
    pub gt_jitter_px: usize,
    /// Std-dev of the per-pixel noise added to both views.
    pub noise_level: f32,
    /// Panorama rows (radial samples) and columns (azimuth bins).
    pub ground_height: usize,
    pub ground_width: usize,
    /// Radius of the outermost panorama row, in pixels.
    pub ground_radius_px: f32,
    /// Image channels per signal band (coarse, mid, fine).
    pub channels_per_band: usize,
    pub seed: u64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        FixtureSpec {
            world_size_tiles: 8,
            tile_size_px: 96,
            meters_per_pixel: 1.0,
            queries_per_tile: 4,
            train_queries_per_tile: 8,
            semi_positive_overlap: 0.5,
            gt_jitter_px: 16,
            noise_level: 0.05,
            ground_height: 32,
            ground_width: 64,
            ground_radius_px: 40.0,
            channels_per_band: 4,
            seed: 42,
        }
    }
}

impl FixtureSpec {
    pub fn channels(&self) -> usize {
        3 * self.channels_per_band
    }

    pub fn stride_px(&self) -> usize {
        (self.tile_size_px as f64 * (1.0 - self.semi_positive_overlap)).round() as usize
    }

    pub fn world_px(&self) -> usize {
        (self.world_size_tiles - 1) * self.stride_px() + self.tile_size_px
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("fixture: {m}")));
        if self.world_size_tiles == 0 || self.queries_per_tile == 0 {
            return bad("world_size_tiles and queries_per_tile must be positive".into());
        }
        if self.tile_size_px < 8 || !self.tile_size_px.is_multiple_of(4) {
            return bad(format!("tile_size_px {} must be a multiple of 4", self.tile_size_px));
        }
        if !(self.meters_per_pixel > 0.0 && self.meters_per_pixel.is_finite()) {
            return bad(format!("meters_per_pixel must be positive, got {}", self.meters_per_pixel));
        }
        if !(0.0..1.0).contains(&self.semi_positive_overlap) || self.stride_px() == 0 {
            return bad(format!("semi_positive_overlap {} must be in [0, 1)", self.semi_positive_overlap));
        }
        if self.gt_jitter_px == 0 || self.gt_jitter_px > self.tile_size_px / 4 {
            return bad(format!(
                "gt_jitter_px {} must be in 1..={} so GT stays in the central quarter",
                self.gt_jitter_px,
                self.tile_size_px / 4
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad(format!("noise_level must be non-negative, got {}", self.noise_level));
        }
        if self.ground_height == 0 || self.ground_width == 0 || self.channels_per_band == 0 {
            return bad("ground size and channels_per_band must be positive".into());
        }
        if self.ground_radius_px.is_nan() || self.ground_radius_px <= 0.0 {
            return bad(format!("ground_radius_px must be positive, got {}", self.ground_radius_px));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub schedule: LevelSchedule,
    /// Channels of the semantic map `G` fed to the aggregator.
    pub semantic_channels: usize,
    pub pooling: Pooling,
    pub fuse_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            schedule: LevelSchedule::desk(),
            semantic_channels: 32,
            pooling: Pooling::AttentionGem,
            fuse_kernel: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Std-dev in pixels of the Gaussian GT distribution.
    pub sigma: f32,
    /// Label smoothing of the retrieval loss.
    pub label_smoothing: f32,
    pub tau_init: f32,
    /// One temperature for every contrastive term, or one per term.
    pub shared_temperature: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            sigma: 4.0,
            label_smoothing: 0.1,
            tau_init: 0.1,
            shared_temperature: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f32,
    /// Train one model on every loss term. When off, a descriptor-only model
    /// and a detail-only model are trained separately.
    pub unified: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 2e-3,
            momentum: 0.9,
            weight_decay: 0.0,
            warmup_steps: 20,
            grad_clip: 5.0,
            unified: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Retrieval candidates passed to re-ranking.
    pub k: usize,
    pub rerank: bool,
    /// Recall@k cut-offs reported by `eval`.
    pub recall_ks: Vec<usize>,
    /// Metre thresholds for localisation recall.
    pub meter_thresholds: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { k: 5, rerank: true, recall_ks: vec![1, 5, 10], meter_thresholds: vec![1.0, 10.0] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub fixture: FixtureSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl PipelineConfig {
    /// A 3 x 3 world of 32 px tiles with 8 x 16 panoramas and three channels.
    /// Small enough to train in seconds and to differentiate numerically.
    pub fn tiny() -> Self {
        let mut cfg = PipelineConfig::default();
        cfg.fixture = FixtureSpec {
            world_size_tiles: 3,
            tile_size_px: 32,
            gt_jitter_px: 4,
            ground_height: 8,
            ground_width: 16,
            ground_radius_px: 12.0,
            channels_per_band: 1,
            ..cfg.fixture
        };
        cfg.model.schedule = LevelSchedule { tile: 32, base: 4, channels: vec![8, 4, 2] };
        cfg.model.semantic_channels = 4;
        cfg.loss.weights = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0 };
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Use `seed` for both model initialisation and fixture generation.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.fixture.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.fixture.validate()?;
        let m = &self.model;
        m.schedule.validate()?;
        let n = m.schedule.levels();
        if m.schedule.tile != self.fixture.tile_size_px {
            return Err(Error::Config(format!(
                "schedule tile {} differs from fixture tile size {}",
                m.schedule.tile, self.fixture.tile_size_px
            )));
        }
        if m.schedule.tile != m.schedule.base << n {
            return Err(Error::Config(format!(
                "toy encoder needs tile = base * 2^levels, got {} vs {} * 2^{n}",
                m.schedule.tile, m.schedule.base
            )));
        }
        let down = 1usize << n;
        let f = &self.fixture;
        if !f.ground_height.is_multiple_of(down) || !f.ground_width.is_multiple_of(down) {
            return Err(Error::Config(format!(
                "ground size {}x{} must be divisible by {down}",
                f.ground_height, f.ground_width
            )));
        }
        let gw = f.ground_width / down;
        if let Some((l, c)) = m.schedule.channels.iter().enumerate().find(|(_, &c)| c % gw != 0) {
            return Err(Error::Config(format!(
                "level {l}: {c} channels are not divisible by the ground map width {gw}"
            )));
        }
        if m.semantic_channels < 2 {
            return Err(Error::Config("semantic_channels must be at least 2".into()));
        }
        if m.fuse_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("fuse_kernel must be odd, got {}", m.fuse_kernel)));
        }
        let l = &self.loss;
        l.weights.validate()?;
        if !(l.sigma >= 0.0 && l.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be non-negative, got {}", l.sigma)));
        }
        if !(0.0..1.0).contains(&l.label_smoothing) {
            return Err(Error::Config(format!("label_smoothing must be in [0, 1), got {}", l.label_smoothing)));
        }
        if !(l.tau_init > 0.0 && l.tau_init.is_finite()) {
            return Err(Error::Config(format!("tau_init must be positive, got {}", l.tau_init)));
        }
        let t = &self.train;
        if t.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", t.batch_size)));
        }
        if !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", t.learning_rate)));
        }
        if !(0.0..1.0).contains(&t.momentum) || t.weight_decay < 0.0 || t.grad_clip < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1); weight_decay and grad_clip non-negative".into()));
        }
        let r = &self.run;
        let tiles = f.world_size_tiles * f.world_size_tiles;
        if r.k == 0 || r.k > tiles {
            return Err(Error::Config(format!("k must be in 1..={tiles}, got {}", r.k)));
        }
        if r.recall_ks.is_empty() || r.recall_ks.contains(&0) || !r.recall_ks.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("recall_ks must be positive and strictly increasing".into()));
        }
        if !r.meter_thresholds.windows(2).all(|w| w[0] < w[1]) || r.meter_thresholds.iter().any(|&t| t.is_nan() || t <= 0.0) {
            return Err(Error::Config("meter_thresholds must be positive and strictly increasing".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_is_valid() {
        PipelineConfig::tiny().validate().unwrap();
    }

    #[test]
    fn default_is_valid_and_round_trips() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.run.k, 5);
        let back = PipelineConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = PipelineConfig::from_toml("seed = 3\n[loss.weights]\nalpha = 100.0\nbeta = 10.0\ngamma = 0.0\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.loss.weights.gamma, 0.0);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(PipelineConfig::from_toml("sed = 1").is_err());
        assert!(PipelineConfig::from_toml("[run]\nk = 0").is_err());
        assert!(PipelineConfig::from_toml("[model]\nfuse_kernel = 2").is_err());
        assert!(PipelineConfig::from_toml("[fixture]\ngt_jitter_px = 40").is_err());
        let err = PipelineConfig::from_toml("[model.schedule]\ntile = 96\nbase = 12\nchannels = [32, 12, 8]")
            .unwrap_err()
            .to_string();
        assert!(err.contains("level 1"), "{err}");
    }

    #[test]
    fn desk_geometry() {
        let f = FixtureSpec::default();
        assert_eq!(f.stride_px(), 48);
        assert_eq!(f.world_px(), 432);
        assert_eq!(f.channels(), 12);
    }
}
