//! The run configuration: one JSON document nesting every module's config,
//! so an ablation variant is a config file, not a flag soup.

use crate::CliError;
use objembed_core::encoder::EncoderConfig;
use objembed_core::evalkit::coco_thresholds;
use objembed_core::objectives::LossConfig;
use objembed_core::scenegen::GenConfig;
use objembed_core::seeding::hash_word;
use objembed_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Class-wise non-maximum suppression during detection scoring.
    pub nms: bool,
    /// IoU thresholds for AP/AR.
    pub thresholds: Vec<f64>,
    /// Rank cutoff for retrieval mAP.
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms: false,
            thresholds: coco_thresholds(),
            k: 50,
        }
    }
}

impl EvalConfig {
    fn validate(&self) -> Result<(), String> {
        if self.thresholds.is_empty() {
            return Err("eval.thresholds must not be empty".into());
        }
        if self.thresholds.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err("eval.thresholds must lie in (0, 1)".into());
        }
        if self.k == 0 {
            return Err("eval.k must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: GenConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Load and validate; a missing path yields the documented defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |m: String| CliError::Config(m);
        self.encoder.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.loss.validate().map_err(cfg_err)?;
        self.train.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.data.validate().map_err(|e| cfg_err(e.to_string()))?;
        self.eval.validate().map_err(cfg_err)?;
        if self.data.grid_w != self.encoder.grid_w
            || self.data.grid_h != self.encoder.grid_h
            || self.data.grid_c != self.encoder.grid_c
        {
            return Err(cfg_err(format!(
                "data grid {}x{}x{} does not match encoder grid {}x{}x{}",
                self.data.grid_w,
                self.data.grid_h,
                self.data.grid_c,
                self.encoder.grid_w,
                self.encoder.grid_h,
                self.encoder.grid_c
            )));
        }
        Ok(())
    }

    /// Stable identifier for report rows: the ablation switches in the
    /// clear, then a hash of the whole document.
    pub fn digest(&self) -> String {
        let mode = serde_json::to_value(self.encoder.token_mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_else(|| "unknown".into());
        let json = serde_json::to_string(self).expect("config serializes");
        format!(
            "{mode}+share{}+g{}+{:016x}",
            self.encoder.share_text_token as u8,
            self.encoder.global_tokens,
            hash_word(&json)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid_and_digest_is_stable() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let d1 = cfg.digest();
        let d2 = RunConfig::default().digest();
        assert_eq!(d1, d2);
        assert!(d1.starts_with("dual_cls_iou+share0+g2+"), "{d1}");
    }

    #[test]
    fn digest_tracks_ablation_switches() {
        let mut cfg = RunConfig::default();
        cfg.encoder.token_mode = objembed_core::layout::TokenMode::SingleLabelOne;
        assert!(cfg.digest().starts_with("single_label_one+"), "{}", cfg.digest());
        assert_ne!(cfg.digest(), RunConfig::default().digest());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>("{\"surprise\": 1}").unwrap_err();
        assert!(err.to_string().contains("surprise"));
        let nested = "{\"encoder\": {\"d_modell\": 64}}";
        assert!(serde_json::from_str::<RunConfig>(nested).is_err());
    }

    #[test]
    fn grid_mismatch_is_a_config_error() {
        let mut cfg = RunConfig::default();
        cfg.data.grid_w = 32;
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}
