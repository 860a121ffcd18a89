//! Grayscale opening with a flat square structuring element.

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::raster::GrayImage;

#[derive(Clone, Copy)]
enum Extremum {
    Min,
    Max,
}

impl Extremum {
    fn pick(self, a: u8, b: u8) -> u8 {
        match self {
            Extremum::Min => a.min(b),
            Extremum::Max => a.max(b),
        }
    }
}

/// Sliding min/max over a `size×size` square, borders replicated. The square
/// is separable, so it runs as a row pass followed by a column pass.
fn square_filter(img: &GrayImage, size: usize, op: Extremum, exec: Exec) -> GrayImage {
    let (h, w) = img.dims();
    let r = (size / 2) as isize;
    let src = img.data();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;

    let mut rows = vec![0u8; h * w];
    exec.for_each_chunk(&mut rows, w, |y, out| {
        let line = &src[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            *o = (-r..=r)
                .map(|d| line[clamp(x as isize + d, w)])
                .reduce(|a, b| op.pick(a, b))
                .unwrap_or(line[x]);
        }
    });

    let mut out = vec![0u8; h * w];
    exec.for_each_chunk(&mut out, w, |y, line| {
        for (x, o) in line.iter_mut().enumerate() {
            *o = (-r..=r)
                .map(|d| rows[clamp(y as isize + d, h) * w + x])
                .reduce(|a, b| op.pick(a, b))
                .unwrap_or(rows[y * w + x]);
        }
    });
    GrayImage::new(h, w, out).expect("same dims as input")
}

pub fn erode(img: &GrayImage, kernel_size: usize) -> Result<GrayImage> {
    check_kernel(kernel_size)?;
    Ok(square_filter(img, kernel_size, Extremum::Min, Exec::default()))
}

pub fn dilate(img: &GrayImage, kernel_size: usize) -> Result<GrayImage> {
    check_kernel(kernel_size)?;
    Ok(square_filter(img, kernel_size, Extremum::Max, Exec::default()))
}

fn check_kernel(kernel_size: usize) -> Result<()> {
    if kernel_size < 3 || kernel_size.is_multiple_of(2) {
        return invalid(format!("kernel size {kernel_size} must be odd and >= 3"));
    }
    Ok(())
}

/// Erosion followed by dilation; removes bright specks smaller than the kernel.
pub fn morphology_open(img: &GrayImage, kernel_size: usize) -> Result<GrayImage> {
    morphology_open_with(img, kernel_size, Exec::default())
}

pub fn morphology_open_with(img: &GrayImage, kernel_size: usize, exec: Exec) -> Result<GrayImage> {
    check_kernel(kernel_size)?;
    let eroded = square_filter(img, kernel_size, Extremum::Min, exec);
    Ok(square_filter(&eroded, kernel_size, Extremum::Max, exec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn window(img: &GrayImage, y: usize, x: usize, k: usize, f: fn(u8, u8) -> u8) -> u8 {
        let r = (k / 2) as isize;
        let (h, w) = img.dims();
        let mut acc = None;
        for dy in -r..=r {
            for dx in -r..=r {
                let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                let v = img.get(yy, xx);
                acc = Some(acc.map_or(v, |a| f(a, v)));
            }
        }
        acc.unwrap()
    }

    #[test]
    fn constant_image_is_fixed() {
        let img = GrayImage::filled(12, 10, 77).unwrap();
        assert_eq!(morphology_open(&img, 5).unwrap(), img);
    }

    #[test]
    fn isolated_bright_pixel_removed() {
        let mut img = GrayImage::filled(16, 16, 0).unwrap();
        img.set(8, 7, 255);
        let out = morphology_open(&img, 5).unwrap();
        assert!(out.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn matches_window_oracle() {
        let mut rng = SplitMix64::seed_from_u64(5);
        for k in [3, 5, 7] {
            let img = GrayImage::from_fn(16, 16, |_, _| 0).unwrap();
            let img = GrayImage::new(16, 16, img.data().iter().map(|_| rng.gen()).collect()).unwrap();
            let eroded = GrayImage::from_fn(16, 16, |y, x| window(&img, y, x, k, u8::min)).unwrap();
            let opened = GrayImage::from_fn(16, 16, |y, x| window(&eroded, y, x, k, u8::max)).unwrap();
            assert_eq!(erode(&img, k).unwrap(), eroded);
            assert_eq!(morphology_open(&img, k).unwrap(), opened);
            assert_eq!(
                morphology_open_with(&img, k, Exec::Sequential).unwrap(),
                morphology_open_with(&img, k, Exec::Parallel).unwrap()
            );
        }
    }

    #[test]
    fn even_kernel_rejected() {
        let img = GrayImage::filled(8, 8, 0).unwrap();
        assert!(morphology_open(&img, 4).is_err());
        assert!(dilate(&img, 1).is_err());
    }
}
