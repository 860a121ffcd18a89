//! Canny edge detection restricted to the lower two thirds of the frame.

use crate::error::{invalid, Result};
use crate::exec::Exec;
use crate::raster::GrayImage;

pub const EDGE: u8 = 255;

/// Separable Sobel kernels (smoothing, derivative) for a given aperture.
fn sobel_kernels(aperture: usize) -> Result<(&'static [i32], &'static [i32])> {
    Ok(match aperture {
        3 => (&[1, 2, 1], &[-1, 0, 1]),
        5 => (&[1, 4, 6, 4, 1], &[-1, -2, 0, 2, 1]),
        7 => (&[1, 6, 15, 20, 15, 6, 1], &[-1, -4, -5, 0, 5, 4, 1]),
        _ => return invalid(format!("aperture {aperture} not in {{3, 5, 7}}")),
    })
}

/// Horizontal and vertical Sobel responses with replicated borders.
pub fn sobel(src: &[u8], h: usize, w: usize, aperture: usize, exec: Exec) -> Result<(Vec<i32>, Vec<i32>)> {
    let (smooth, deriv) = sobel_kernels(aperture)?;
    let r = (aperture / 2) as isize;
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        src[y * w + x] as i32
    };
    let mut gx = vec![0i32; h * w];
    let mut gy = vec![0i32; h * w];
    exec.for_each_chunk(&mut gx, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0;
            for (i, &sm) in smooth.iter().enumerate() {
                for (j, &d) in deriv.iter().enumerate() {
                    s += sm * d * at(y as isize + i as isize - r, x as isize + j as isize - r);
                }
            }
            *o = s;
        }
    });
    exec.for_each_chunk(&mut gy, w, |y, row| {
        for (x, o) in row.iter_mut().enumerate() {
            let mut s = 0;
            for (i, &d) in deriv.iter().enumerate() {
                for (j, &sm) in smooth.iter().enumerate() {
                    s += d * sm * at(y as isize + i as isize - r, x as isize + j as isize - r);
                }
            }
            *o = s;
        }
    });
    Ok((gx, gy))
}

/// Binary edge map (0 / [`EDGE`]).
///
/// Gradient magnitude is the L1 norm of the Sobel responses. Rows above
/// `⌊H/3⌋` are never examined and stay 0.
pub fn canny_edges(img: &GrayImage, low: f64, high: f64, aperture: usize) -> Result<GrayImage> {
    canny_edges_with(img, low, high, aperture, Exec::default())
}

pub fn canny_edges_with(img: &GrayImage, low: f64, high: f64, aperture: usize, exec: Exec) -> Result<GrayImage> {
    if !(low > 0.0 && low < high) {
        return invalid(format!(
            "canny thresholds must satisfy 0 < low < high, got {low}, {high}"
        ));
    }
    let (h, w) = img.dims();
    let top = h / 3;
    let rh = h - top;
    let src = &img.data()[top * w..];
    let (gx, gy) = sobel(src, rh, w, aperture, exec)?;
    let mag: Vec<i32> = gx.iter().zip(&gy).map(|(a, b)| a.abs() + b.abs()).collect();

    // 0 = suppressed, 1 = weak candidate, 2 = strong
    const TAN_22_5: f64 = 0.414_213_562_373_095_1;
    const TAN_67_5: f64 = 2.414_213_562_373_095;
    let mut class = vec![0u8; rh * w];
    exec.for_each_chunk(&mut class, w, |y, row| {
        let m = |yy: isize, xx: isize| -> i32 {
            if yy < 0 || xx < 0 || yy >= rh as isize || xx >= w as isize {
                0
            } else {
                mag[yy as usize * w + xx as usize]
            }
        };
        for (x, c) in row.iter_mut().enumerate() {
            let i = y * w + x;
            let v = mag[i];
            if (v as f64) <= low {
                continue;
            }
            let (ax, ay) = (gx[i].abs() as f64, gy[i].abs() as f64);
            let (yi, xi) = (y as isize, x as isize);
            // (dy, dx) of the neighbour along the negative gradient direction
            let (dy, dx) = if ay <= ax * TAN_22_5 {
                (0, -1)
            } else if ay > ax * TAN_67_5 {
                (-1, 0)
            } else if (gx[i] < 0) == (gy[i] < 0) {
                (-1, -1)
            } else {
                (-1, 1)
            };
            let before = m(yi + dy, xi + dx);
            let after = m(yi - dy, xi - dx);
            if v >= before && v > after {
                *c = if v as f64 > high { 2 } else { 1 };
            }
        }
    });

    // hysteresis: flood weak candidates 8-connected to a strong pixel
    let mut out = vec![0u8; h * w];
    let mut stack: Vec<usize> = (0..rh * w).filter(|&i| class[i] == 2).collect();
    let mut seen = vec![false; rh * w];
    for &i in &stack {
        seen[i] = true;
    }
    while let Some(i) = stack.pop() {
        out[top * w + i] = EDGE;
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= rh as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !seen[j] && class[j] >= 1 {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    GrayImage::new(h, w, out)
}
