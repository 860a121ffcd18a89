//! Deterministic one-point-perspective "corridor" scenes.
//!
//! A scene is a sky above the horizon row through the vanishing point, a road
//! wedge bounded by the outermost lane lines, roadside outside it, optional
//! painted lane markings, and rectangular vehicles that move radially away
//! from the vanishing point. Each frame's displacement of an object is `g·r`
//! where `r` is its current distance from the vanishing point and `g` its
//! growth rate; object size scales by the same `1 + g` per frame.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::raster::{GrayImage, InstanceMap, InvalidMask, LabelMap};

pub const CLASS_NAMES: [&str; 4] = ["sky", "road", "roadside", "vehicle"];
pub const SKY: u16 = 0;
pub const ROAD: u16 = 1;
pub const ROADSIDE: u16 = 2;
pub const VEHICLE: u16 = 3;

const SKY_LEVEL: f64 = 205.0;
const ROAD_LEVEL: f64 = 70.0;
const ROADSIDE_LEVEL: f64 = 140.0;
const PAINT_LEVEL: f64 = 235.0;
const VEHICLE_LEVEL: f64 = 15.0;
/// Painted stripes widen linearly with distance from the vanishing point.
const PAINT_BASE: f64 = 1.0;
const PAINT_SPREAD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: u16,
    pub instance: u16,
    /// Centre in frame 0, pixels.
    pub center: (f64, f64),
    /// Width and height in frame 0, pixels.
    pub size: (f64, f64),
    /// Fractional radial growth per frame.
    pub growth: f64,
}

impl SceneObject {
    pub fn center_at(&self, vp: (f64, f64), frame: usize) -> (f64, f64) {
        let f = (1.0 + self.growth).powi(frame as i32);
        (vp.0 + f * (self.center.0 - vp.0), vp.1 + f * (self.center.1 - vp.1))
    }

    pub fn size_at(&self, frame: usize) -> (f64, f64) {
        let f = (1.0 + self.growth).powi(frame as i32);
        (self.size.0 * f, self.size.1 * f)
    }

    /// Half-open pixel bounds `(x0, y0, x1, y1)` in `frame`, unclipped.
    pub fn bounds_at(&self, vp: (f64, f64), frame: usize) -> (i64, i64, i64, i64) {
        let (cx, cy) = self.center_at(vp, frame);
        let (w, h) = self.size_at(frame);
        (
            (cx - w / 2.0).round() as i64,
            (cy - h / 2.0).round() as i64,
            (cx + w / 2.0).round() as i64,
            (cy + h / 2.0).round() as i64,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Ground-truth vanishing point `(x, y)` in pixels.
    pub vp: (f64, f64),
    /// Lane-line directions as angles from the downward vertical (radians,
    /// negative to the left). The extreme two bound the road.
    pub lane_angles: Vec<f64>,
    pub objects: Vec<SceneObject>,
    pub frames: usize,
    /// Fraction of pixels replaced by salt-and-pepper impulses.
    pub noise: f64,
    /// Amplitude of uniform intensity texture.
    pub texture: f64,
    /// Radius of the invalid-mask disc around the vanishing point.
    pub invalid_radius: f64,
    pub seed: u64,
}

/// Knobs for [`SceneSpec::random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomScene {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub max_objects: usize,
    pub noise: f64,
    pub texture: f64,
}

impl Default for RandomScene {
    fn default() -> Self {
        RandomScene {
            height: 256,
            width: 512,
            frames: 4,
            max_objects: 3,
            noise: 0.0,
            texture: 6.0,
        }
    }
}

impl SceneSpec {
    /// Draws a random corridor scene from `seed`.
    pub fn random(opts: &RandomScene, seed: u64) -> SceneSpec {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let (h, w) = (opts.height as f64, opts.width as f64);
        let vp = (
            (rng.gen_range(0.42..0.58) * w).round(),
            (rng.gen_range(0.36..0.44) * h).round(),
        );
        let left = -rng.gen_range(55f64..72.0).to_radians();
        let right = rng.gen_range(55f64..72.0).to_radians();
        let mut lane_angles = vec![left, right];
        let inner = rng.gen_range(2..=3);
        let span = right - left;
        for k in 1..=inner {
            let slot = span / (inner + 1) as f64;
            lane_angles.push(left + slot * (k as f64 + rng.gen_range(-0.2..0.2)));
        }
        let n_obj = if opts.max_objects == 0 {
            0
        } else {
            rng.gen_range(1..=opts.max_objects)
        };
        let objects = (0..n_obj)
            .map(|i| {
                let phi = rng.gen_range(left * 0.7..right * 0.7);
                let r = rng.gen_range(0.18..0.35) * h;
                SceneObject {
                    class: VEHICLE,
                    instance: i as u16 + 1,
                    center: (vp.0 + r * phi.sin(), vp.1 + r * phi.cos()),
                    size: (0.3 * r, 0.22 * r),
                    growth: rng.gen_range(0.03..0.08),
                }
            })
            .collect();
        SceneSpec {
            height: opts.height,
            width: opts.width,
            vp,
            lane_angles,
            objects,
            frames: opts.frames,
            noise: opts.noise,
            texture: opts.texture,
            invalid_radius: (0.06 * h).max(2.0),
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height < GrayImage::MIN_SIDE || self.width < GrayImage::MIN_SIDE {
            return invalid(format!("scene {}×{} too small", self.height, self.width));
        }
        if self.lane_angles.len() < 2 {
            return invalid("a scene needs at least two lane lines");
        }
        if self
            .lane_angles
            .iter()
            .any(|a| !a.is_finite() || a.abs() >= std::f64::consts::FRAC_PI_2)
        {
            return invalid("lane angles must point below the horizon");
        }
        let (x, y) = self.vp;
        if !(0.0..self.width as f64).contains(&x) || !(0.0..self.height as f64).contains(&y) {
            return invalid(format!("vanishing point {:?} outside the frame", self.vp));
        }
        if self.frames == 0 {
            return invalid("a scene needs at least one frame");
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return invalid(format!("noise fraction {} outside [0, 1]", self.noise));
        }
        let mut ids: Vec<u16> = self.objects.iter().map(|o| o.instance).collect();
        ids.sort_unstable();
        if ids.contains(&0) || ids.windows(2).any(|p| p[0] == p[1]) {
            return invalid("object instance ids must be unique and non-zero");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SceneSequence {
    pub spec: SceneSpec,
    pub frames: Vec<GrayImage>,
    pub labels: Vec<LabelMap>,
    pub instances: Vec<InstanceMap>,
    pub masks: Vec<InvalidMask>,
}

impl SceneSequence {
    pub fn vp(&self) -> (f64, f64) {
        self.spec.vp
    }
}

/// Background intensity and class at a continuous image point.
fn background(spec: &SceneSpec, px: f64, py: f64) -> (f64, u16) {
    let (vx, vy) = spec.vp;
    if py < vy {
        return (SKY_LEVEL, SKY);
    }
    let (dx, dy) = (px - vx, py - vy);
    let left = spec.lane_angles.iter().copied().fold(f64::INFINITY, f64::min);
    let right = spec.lane_angles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    // signed offset from the ray at angle phi, positive to its right
    let side = |phi: f64| dx * phi.cos() - dy * phi.sin();
    let half = PAINT_BASE + PAINT_SPREAD * dx.hypot(dy);
    if spec.lane_angles.iter().any(|&phi| side(phi).abs() <= half) {
        (PAINT_LEVEL, ROAD)
    } else if side(left) >= 0.0 && side(right) <= 0.0 {
        (ROAD_LEVEL, ROAD)
    } else {
        (ROADSIDE_LEVEL, ROADSIDE)
    }
}

/// Renders every frame with its ground truth.
pub fn generate_scene_sequence(spec: &SceneSpec) -> Result<SceneSequence> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut base_level = vec![0.0f64; h * w];
    let mut base_label = vec![0u16; h * w];
    // 4×4 supersampled intensity, label from the pixel centre
    let offsets = [-0.375, -0.125, 0.125, 0.375];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64, y as f64);
            let mut acc = 0.0;
            for oy in offsets {
                for ox in offsets {
                    acc += background(spec, px + ox, py + oy).0;
                }
            }
            base_level[y * w + x] = acc / 16.0;
            base_label[y * w + x] = background(spec, px, py).1;
        }
    }
    let (vx, vy) = spec.vp;
    let r2 = spec.invalid_radius * spec.invalid_radius;
    let mask = InvalidMask::from_fn(h, w, |y, x| {
        let (dx, dy) = (x as f64 - vx, y as f64 - vy);
        dx * dx + dy * dy <= r2
    })?;

    let mut seq = SceneSequence {
        spec: spec.clone(),
        frames: Vec::with_capacity(spec.frames),
        labels: Vec::with_capacity(spec.frames),
        instances: Vec::with_capacity(spec.frames),
        masks: Vec::with_capacity(spec.frames),
    };
    for f in 0..spec.frames {
        let mut level = base_level.clone();
        let mut label = base_label.clone();
        let mut inst = vec![0u16; h * w];
        for obj in &spec.objects {
            let (x0, y0, x1, y1) = obj.bounds_at(spec.vp, f);
            let clip = |v: i64, n: usize| v.clamp(0, n as i64) as usize;
            for y in clip(y0, h)..clip(y1, h) {
                for x in clip(x0, w)..clip(x1, w) {
                    level[y * w + x] = VEHICLE_LEVEL;
                    label[y * w + x] = obj.class;
                    inst[y * w + x] = obj.instance;
                }
            }
        }
        let mut rng = SplitMix64::seed_from_u64(spec.seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(f as u64 + 1)));
        let pixels: Vec<u8> = level
            .iter()
            .map(|&l| {
                let t = if spec.texture > 0.0 {
                    rng.gen_range(-spec.texture..=spec.texture)
                } else {
                    0.0
                };
                let v = (l + t).round().clamp(0.0, 255.0) as u8;
                if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                    if rng.gen_bool(0.5) {
                        255
                    } else {
                        0
                    }
                } else {
                    v
                }
            })
            .collect();
        seq.frames.push(GrayImage::new(h, w, pixels)?);
        seq.labels.push(LabelMap::new(h, w, label)?);
        seq.instances.push(InstanceMap::new(h, w, inst)?);
        seq.masks.push(mask.clone());
    }
    Ok(seq)
}

/// Manifest written next to a saved scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub spec: SceneSpec,
    pub vp: (f64, f64),
    pub class_names: Vec<String>,
    pub frames: Vec<String>,
    pub labels: Vec<String>,
    pub instances: Vec<String>,
    pub masks: Vec<String>,
}

pub fn save_scene(seq: &SceneSequence, dir: impl AsRef<Path>) -> Result<SceneManifest> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let n = seq.frames.len();
    let names = |prefix: &str| (0..n).map(|i| format!("{prefix}_{i:03}.pgm")).collect::<Vec<_>>();
    let manifest = SceneManifest {
        spec: seq.spec.clone(),
        vp: seq.spec.vp,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        frames: names("frame"),
        labels: names("label"),
        instances: names("instance"),
        masks: names("mask"),
    };
    for i in 0..n {
        seq.frames[i].save_pgm(dir.join(&manifest.frames[i]))?;
        seq.labels[i].save_pgm(dir.join(&manifest.labels[i]))?;
        seq.instances[i].save_pgm(dir.join(&manifest.instances[i]))?;
        seq.masks[i].save_pgm(dir.join(&manifest.masks[i]))?;
    }
    fs::write(dir.join("scene.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// `count` random scenes with seeds derived from `seed`.
pub fn generate_many(opts: &RandomScene, count: usize, seed: u64, exec: Exec) -> Result<Vec<SceneSequence>> {
    exec.map(count, |i| {
        generate_scene_sequence(&SceneSpec::random(opts, scene_seed(seed, i)))
    })
    .into_iter()
    .collect()
}

pub fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(index as u64)
}
