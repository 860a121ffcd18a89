//! Vanishing-point proximity maps: a pseudo-depth field equal to 1 at the
//! vanishing point and falling to 0 at the farthest pixel.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::raster::{GrayImage, Grid, Rect};
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proximity {
    /// `max(|dy|/H, |dx|/W)`
    #[default]
    Linear,
    /// square root of the linear distance
    Power,
    /// `sqrt((dy/H)² + (dx/H)²)`; both terms use the image height
    Euclidean,
}

impl Proximity {
    /// Unnormalised distance of pixel offset `(dy, dx)` in an `h×w` image.
    pub fn distance(self, dy: f64, dx: f64, h: usize, w: usize) -> f64 {
        let (h, w) = (h as f64, w as f64);
        let chebyshev = (dy.abs() / h).max(dx.abs() / w);
        match self {
            Proximity::Linear => chebyshev,
            Proximity::Power => chebyshev.sqrt(),
            Proximity::Euclidean => ((dy / h).powi(2) + (dx / h).powi(2)).sqrt(),
        }
    }
}

impl fmt::Display for Proximity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proximity::Linear => "linear",
            Proximity::Power => "power",
            Proximity::Euclidean => "euclidean",
        })
    }
}

impl FromStr for Proximity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Proximity::Linear),
            "power" => Ok(Proximity::Power),
            "euclidean" => Ok(Proximity::Euclidean),
            other => invalid(format!("unknown proximity variant {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProximityMap {
    /// `h×w` values in `[0, 1]`.
    pub values: Tensor,
    pub variant: Proximity,
    pub vp: (f64, f64),
}

/// Builds the map at every integer pixel of an `height×width` frame.
pub fn proximity_map(vp: (f64, f64), height: usize, width: usize, variant: Proximity) -> Result<ProximityMap> {
    let (x, y) = vp;
    if !(0.0..width as f64).contains(&x) || !(0.0..height as f64).contains(&y) {
        return invalid(format!("vanishing point {vp:?} outside {height}×{width}"));
    }
    let mut d = Vec::with_capacity(height * width);
    for py in 0..height {
        for px in 0..width {
            d.push(variant.distance(py as f64 - y, px as f64 - x, height, width));
        }
    }
    let max = d.iter().copied().fold(0.0f64, f64::max);
    let values = d
        .iter()
        .map(|&v| if max > 0.0 { (1.0 - v / max) as f32 } else { 1.0 })
        .collect();
    Ok(ProximityMap {
        values: Tensor::new(&[height, width], values)?,
        variant,
        vp,
    })
}

impl ProximityMap {
    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    /// Flattened `h·w` bias at feature resolution.
    pub fn at_resolution(&self, h: usize, w: usize) -> Result<Tensor> {
        let (mh, mw) = self.dims();
        let as3 = self.values.clone().reshape(&[1, mh, mw])?;
        bilinear_resize(&as3, h, w)?.reshape(&[h * w])
    }

    /// 8-bit rendering, 255 at the vanishing point.
    pub fn to_gray(&self) -> Result<GrayImage> {
        let (h, w) = self.dims();
        let px = self
            .values
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        GrayImage::new(h, w, px)
    }
}

/// Types that can be cut to a pixel rectangle.
pub trait Crop: Sized {
    fn dims(&self) -> (usize, usize);
    fn crop_to(&self, rect: Rect) -> Result<Self>;
}

impl<T: Copy> Crop for Grid<T> {
    fn dims(&self) -> (usize, usize) {
        Grid::dims(self)
    }

    fn crop_to(&self, rect: Rect) -> Result<Self> {
        self.crop(rect)
    }
}

impl Crop for GrayImage {
    fn dims(&self) -> (usize, usize) {
        GrayImage::dims(self)
    }

    fn crop_to(&self, rect: Rect) -> Result<Self> {
        self.crop(rect)
    }
}

/// Spatial crop of an `h×w` or `c×h×w` tensor.
impl Crop for Tensor {
    fn dims(&self) -> (usize, usize) {
        let s = self.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }

    fn crop_to(&self, rect: Rect) -> Result<Self> {
        if self.rank() < 2 {
            return invalid(format!("cannot crop tensor {:?}", self.shape()));
        }
        let (h, w) = Crop::dims(self);
        rect.check_inside(h, w)?;
        let planes = self.len() / (h * w);
        let mut out = Vec::with_capacity(planes * rect.height * rect.width);
        for p in 0..planes {
            let plane = &self.data()[p * h * w..(p + 1) * h * w];
            for y in rect.y..rect.y + rect.height {
                out.extend_from_slice(&plane[y * w + rect.x..y * w + rect.x + rect.width]);
            }
        }
        let mut shape = self.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = rect.height;
        shape[r - 1] = rect.width;
        Tensor::new(&shape, out)
    }
}

/// Crops a frame and its proximity map with the same rectangle. The map is
/// not renormalised.
pub fn crop_with_map<F: Crop>(frame: &F, map: &ProximityMap, rect: Rect) -> Result<(F, Tensor)> {
    if frame.dims() != map.dims() {
        return invalid(format!(
            "frame {:?} and proximity map {:?} differ",
            frame.dims(),
            map.dims()
        ));
    }
    Ok((frame.crop_to(rect)?, map.values.crop_to(rect)?))
}
