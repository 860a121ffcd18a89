//! Classical vanishing-point detection: opening, Canny on the lower two
//! thirds, Hough lines, line selection, then intersection voting over cells.

pub mod canny;
pub mod hough;
pub mod morphology;
pub mod vote;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::exec::Exec;
use crate::raster::GrayImage;

pub use canny::canny_edges;
pub use hough::{hough_lines, intersections, select_lines, HoughLine, HoughParams, LineFilter, SlopeInterval};
pub use morphology::morphology_open;
pub use vote::{cell_vote, CellGrid, VpEstimate};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VpConfig {
    pub morph_kernel: usize,
    pub canny_low: f64,
    pub canny_high: f64,
    pub canny_aperture: usize,
    pub hough: HoughParams,
    pub lines: LineFilter,
}

impl Default for VpConfig {
    fn default() -> Self {
        VpConfig {
            morph_kernel: 5,
            canny_low: 50.0,
            canny_high: 150.0,
            canny_aperture: 3,
            hough: HoughParams::default(),
            lines: LineFilter::default(),
        }
    }
}

impl VpConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lines.seed = seed;
        self
    }
}

/// Intermediate products of one detection, for inspection.
#[derive(Clone, Debug)]
pub struct Detection {
    pub edges: GrayImage,
    pub lines: Vec<HoughLine>,
    pub selected: Vec<HoughLine>,
    pub points: Vec<(f64, f64)>,
    pub estimate: VpEstimate,
}

pub fn detect_vp(img: &GrayImage, cfg: &VpConfig) -> Result<VpEstimate> {
    Ok(detect_vp_traced(img, cfg, Exec::default())?.estimate)
}

pub fn detect_vp_with(img: &GrayImage, cfg: &VpConfig, exec: Exec) -> Result<VpEstimate> {
    Ok(detect_vp_traced(img, cfg, exec)?.estimate)
}

pub fn detect_vp_traced(img: &GrayImage, cfg: &VpConfig, exec: Exec) -> Result<Detection> {
    let (h, w) = img.dims();
    let opened = morphology::morphology_open_with(img, cfg.morph_kernel, exec)?;
    let edges = canny::canny_edges_with(&opened, cfg.canny_low, cfg.canny_high, cfg.canny_aperture, exec)?;
    let lines = hough::hough_lines_with(&edges, &cfg.hough, exec);
    let center = (w as f64 / 2.0, h as f64 / 2.0);
    let selected = select_lines(&lines, center, &cfg.lines);
    let points = if selected.len() >= 2 {
        intersections(&selected, h, w)
    } else {
        Vec::new()
    };
    let estimate = cell_vote(&points, h, w);
    Ok(Detection {
        edges,
        lines,
        selected,
        points,
        estimate,
    })
}

/// One independent detection per frame.
pub fn detect_vp_batch(frames: &[GrayImage], cfg: &VpConfig, exec: Exec) -> Result<Vec<VpEstimate>> {
    exec.map(frames.len(), |i| detect_vp_with(&frames[i], cfg, Exec::Sequential))
        .into_iter()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_frame_is_invalid() {
        let img = GrayImage::filled(120, 160, 128).unwrap();
        let v = detect_vp(&img, &VpConfig::default()).unwrap();
        assert!(!v.valid);
    }

    #[test]
    fn json_shape() {
        let v = VpEstimate {
            x: 12.0,
            y: 30.5,
            votes: 4,
            valid: true,
        };
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"x":12.0,"y":30.5,"votes":4,"valid":true}"#);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        assert!(serde_json::from_str::<VpConfig>(r#"{"morph_kernel":5,"bogus":1}"#).is_err());
        let c: VpConfig = serde_json::from_str(r#"{"canny_low":40}"#).unwrap();
        assert_eq!(c.canny_low, 40.0);
        assert_eq!(c.hough.threshold, 200);
    }
}
