use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::motion::MotionConfig;
use crate::proximity::Proximity;
use crate::vp::VpConfig;

/// Every knob of the segmentation stack. Loaded from JSON; unknown keys are
/// rejected and missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Scale of the context branch input relative to the frame.
    pub downsample: f64,
    /// Motion patch size `s`, in feature cells.
    pub patch_size: usize,
    /// Frame sampling interval `k`.
    pub interval: usize,
    /// Sampling coefficient.
    pub delta_d: usize,
    /// Half-extents of the dense region around the vanishing point, in
    /// patches (columns, rows).
    pub region_a: usize,
    pub region_b: usize,
    pub motion_layers: usize,
    /// Weight of the detail-branch loss.
    pub lambda_d: f64,
    pub classes: usize,
    pub channels: usize,
    /// Pixel side of one backbone patch.
    pub backbone_patch: usize,
    /// Seeds the backbone and the initial parameters.
    pub seed: u64,
    /// Seeds line sampling in vanishing point detection.
    pub vp_seed: u64,
    pub proximity: Proximity,
    pub use_motion: bool,
    pub use_dense: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            downsample: 0.5,
            patch_size: 4,
            interval: 3,
            delta_d: 1,
            region_a: 1,
            region_b: 1,
            motion_layers: 2,
            lambda_d: 0.1,
            classes: 4,
            channels: 16,
            backbone_patch: 8,
            seed: 0,
            vp_seed: 0,
            proximity: Proximity::Linear,
            use_motion: true,
            use_dense: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.downsample > 0.0 && self.downsample <= 1.0) {
            return invalid(format!("downsample ratio {} outside (0, 1]", self.downsample));
        }
        if !(0.0..=1.0).contains(&self.lambda_d) {
            return invalid(format!("lambda_d {} outside [0, 1]", self.lambda_d));
        }
        for (name, v) in [
            ("patch_size", self.patch_size),
            ("interval", self.interval),
            ("delta_d", self.delta_d),
            ("channels", self.channels),
            ("backbone_patch", self.backbone_patch),
            ("classes", self.classes),
        ] {
            if v == 0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        if self.classes >= crate::IGNORE_LABEL as usize {
            return invalid(format!("{} classes collide with the ignore label", self.classes));
        }
        Ok(())
    }

    pub fn motion(&self) -> MotionConfig {
        MotionConfig {
            patch_size: self.patch_size,
            interval: self.interval,
            delta_d: self.delta_d,
        }
    }

    pub fn vp(&self) -> VpConfig {
        VpConfig::default().with_seed(self.vp_seed)
    }

    /// Context branch size for an `height×width` frame; frames must divide
    /// evenly down to whole motion patches in the context branch and whole
    /// backbone patches in the detail branch.
    pub fn context_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let p = self.backbone_patch;
        let unit = p * self.patch_size;
        let scaled = |n: usize| {
            let v = n as f64 * self.downsample;
            (v.fract() == 0.0).then_some(v as usize)
        };
        match (scaled(height), scaled(width)) {
            (Some(h), Some(w))
                if h > 0
                    && w > 0
                    && h % unit == 0
                    && w % unit == 0
                    && height.is_multiple_of(p)
                    && width.is_multiple_of(p) =>
            {
                Ok((h, w))
            }
            _ => invalid(format!(
                "a {height}×{width} frame does not divide into {p}-pixel backbone patches and \
                 {}-cell motion patches at downsample {}",
                self.patch_size, self.downsample
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_snapshot() {
        let json = serde_json::to_value(PipelineConfig::default()).unwrap();
        assert_eq!(
            json,
            serde_json::json!({
                "downsample": 0.5, "patch_size": 4, "interval": 3, "delta_d": 1,
                "region_a": 1, "region_b": 1, "motion_layers": 2, "lambda_d": 0.1,
                "classes": 4, "channels": 16, "backbone_patch": 8, "seed": 0, "vp_seed": 0,
                "proximity": "linear", "use_motion": true, "use_dense": true
            })
        );
    }

    #[test]
    fn json_parsing() {
        let cfg = PipelineConfig::from_json(r#"{"motion_layers": 0, "proximity": "power"}"#).unwrap();
        assert_eq!(cfg.motion_layers, 0);
        assert_eq!(cfg.proximity, Proximity::Power);
        assert_eq!(cfg.interval, 3);
        assert!(PipelineConfig::from_json(r#"{"layers": 3}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"lambda_d": 2.0}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"downsample": 0.0}"#).is_err());
    }

    #[test]
    fn frame_geometry() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.context_dims(512, 1024).unwrap(), (256, 512));
        assert_eq!(cfg.context_dims(64, 128).unwrap(), (32, 64));
        assert!(cfg.context_dims(100, 128).is_err());
        assert!(cfg.context_dims(96, 128).is_err());
    }
}
