use rand::SeedableRng;
use rand_xoshiro::SplitMix64;

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::layers::Linear;
use crate::raster::GrayImage;
use crate::tensor::{bilinear_resize, Tensor};

/// Frozen feature extractor: every `P×P` pixel block is flattened, centred
/// (`pixel/255 − 0.5`) and projected to `c` channels by a seeded random
/// matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct StubBackbone {
    patch: usize,
    weight: Tensor,
}

impl StubBackbone {
    pub fn new(channels: usize, patch: usize, seed: u64) -> Result<Self> {
        if channels == 0 || patch == 0 {
            return invalid(format!("backbone with {channels} channels and patch {patch}"));
        }
        let mut rng = SplitMix64::seed_from_u64(seed);
        let proj = Linear::seeded(channels, patch * patch, 1.0, &mut rng)?;
        Ok(StubBackbone {
            patch,
            weight: proj.weight,
        })
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Features of an `H×W` intensity tensor (values in `[0, 255]`), shaped
    /// `c×⌈H/P⌉×⌈W/P⌉`; partial blocks are edge-padded.
    pub fn features(&self, pixels: &Tensor, exec: Exec) -> Result<Tensor> {
        let (h, w) = pixels.dims2()?;
        let p = self.patch;
        let (gh, gw) = (h.div_ceil(p), w.div_ceil(p));
        let c = self.channels();
        let wd = self.weight.data();
        let src = pixels.data();
        let rows: Vec<Vec<f32>> = exec.map(gh, |by| {
            let mut out = vec![0.0f32; c * gw];
            let mut block = vec![0.0f64; p * p];
            for bx in 0..gw {
                for r in 0..p {
                    let y = (by * p + r).min(h - 1);
                    for q in 0..p {
                        let x = (bx * p + q).min(w - 1);
                        block[r * p + q] = src[y * w + x] as f64 / 255.0 - 0.5;
                    }
                }
                for ch in 0..c {
                    let row = &wd[ch * p * p..(ch + 1) * p * p];
                    let v: f64 = row.iter().zip(&block).map(|(&a, &b)| a as f64 * b).sum();
                    out[ch * gw + bx] = v as f32;
                }
            }
            out
        });
        let mut data = vec![0.0f32; c * gh * gw];
        for (by, row) in rows.iter().enumerate() {
            for ch in 0..c {
                data[ch * gh * gw + by * gw..ch * gh * gw + (by + 1) * gw]
                    .copy_from_slice(&row[ch * gw..(ch + 1) * gw]);
            }
        }
        Tensor::new(&[c, gh, gw], data)
    }

    pub fn features_of(&self, frame: &GrayImage, exec: Exec) -> Result<Tensor> {
        self.features(&to_tensor(frame)?, exec)
    }
}

/// Intensities as an `H×W` tensor.
pub fn to_tensor(frame: &GrayImage) -> Result<Tensor> {
    let (h, w) = frame.dims();
    Tensor::new(&[h, w], frame.data().iter().map(|&v| v as f32).collect())
}

/// Bilinear rescale of a frame's intensities to `out_h×out_w`.
pub fn resize_frame(frame: &GrayImage, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = frame.dims();
    let t = to_tensor(frame)?.reshape(&[1, h, w])?;
    bilinear_resize(&t, out_h, out_w)?.reshape(&[out_h, out_w])
}

/// Per-cell `c→K` projection, then bilinear upsampling to `out_h×out_w`.
pub fn stub_decode(features: &Tensor, head: &Linear, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = features.dims3()?;
    let k = head.outputs();
    let logits = head
        .apply(&features.clone().reshape(&[c, h * w])?)?
        .reshape(&[k, h, w])?;
    bilinear_resize(&logits, out_h, out_w)
}
