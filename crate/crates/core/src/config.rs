//! Run configuration: one TOML tree holding every module's settings.
//!
//! Every table and key is optional; missing entries take their defaults and
//! unknown keys are rejected.
//!
//! ```toml
//! seed = 0
//!
//! [data]
//! train_size = 500
//! val_size = 200
//! test_size = 300
//!
//! [data.synth]
//! occlusion_prob = 0.7
//!
//! [model.seg]
//! extractor = "roimasking_ternary"
//!
//! [model.mask]
//! alpha = 0.3333333333333333
//!
//! [train]
//! steps = 2000
//! learning_rate = 0.004
//!
//! [infer]
//! proposals = 20
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::{InferConfig, ModelConfig, TrainConfig};
use crate::segbranch::Extractor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub synth: SynthConfig,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            train_size: 500,
            val_size: 200,
            test_size: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Training seeds; every extractor is trained once per seed.
    pub seeds: Vec<u64>,
    pub extractors: Vec<Extractor>,
    /// Expansion coefficients swept with `alpha_extractor`.
    pub alphas: Vec<f64>,
    pub alpha_extractor: Extractor,
    pub alpha_seeds: Vec<u64>,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            extractors: vec![
                Extractor::RoimaskingTernary,
                Extractor::RoimaskingBinary,
                Extractor::Roialign,
            ],
            alphas: vec![0.0, 1.0 / 6.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0],
            alpha_extractor: Extractor::RoimaskingTernary,
            alpha_seeds: vec![0],
            train_size: 500,
            test_size: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model initialisation and training-order seed.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub ablate: AblateConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Format {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always serializable")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.data.synth.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.train;
        if t.steps == 0 {
            return bad("train.steps must be at least 1".into());
        }
        if !(t.learning_rate > 0.0) {
            return bad(format!("train.learning_rate = {} must be positive", t.learning_rate));
        }
        if !(0.0..1.0).contains(&t.momentum) {
            return bad(format!("train.momentum = {} must lie in [0, 1)", t.momentum));
        }
        if !(t.weight_decay >= 0.0) {
            return bad(format!("train.weight_decay = {} must be non-negative", t.weight_decay));
        }
        if self.infer.proposals == 0 {
            return bad("infer.proposals must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.infer.nms_iou) || !(0.0..1.0).contains(&self.infer.mask_threshold) {
            return bad("infer.nms_iou and infer.mask_threshold must lie in [0, 1]".into());
        }
        let m = &self.model;
        if !(m.mask.alpha >= 0.0) || !m.mask.alpha.is_finite() {
            return bad(format!("model.mask.alpha = {} must be non-negative", m.mask.alpha));
        }
        if m.mask.stride != 8 {
            return bad(format!("model.mask.stride = {} but the segmentation tap has stride 8", m.mask.stride));
        }
        if m.anchors.aspect_ratios.is_empty() || m.anchors.aspect_ratios.iter().any(|r| !(*r > 0.0)) {
            return bad("model.anchors.aspect_ratios must be non-empty and positive".into());
        }
        let widths = [
            m.backbone.stem_channels,
            m.backbone.lateral_channels,
            m.seg.compress_channels,
            m.seg.wide_channels,
            m.seg.narrow_channels,
            m.seg.dilation,
            m.seg.roi_output_size,
        ];
        if widths.iter().chain(&m.backbone.stage_channels).any(|&w| w == 0) {
            return bad("channel widths, dilation and roi_output_size must be positive".into());
        }
        let a = &self.ablate;
        if a.seeds.is_empty() || a.train_size == 0 || a.test_size == 0 {
            return bad("ablate needs at least one seed and non-empty splits".into());
        }
        if a.alphas.iter().any(|x| !(*x >= 0.0)) {
            return bad("ablate.alphas must be non-negative".into());
        }
        Ok(())
    }
}
