//! ρ–θ Hough accumulator, line filtering and pairwise intersections.

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::raster::GrayImage;

/// Line `x·cos θ + y·sin θ = ρ` in pixel coordinates (x right, y down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HoughLine {
    pub rho: f64,
    /// Radians in `[0, π)`.
    pub theta: f64,
    pub votes: u32,
}

impl HoughLine {
    pub fn new(rho: f64, theta: f64) -> Self {
        HoughLine { rho, theta, votes: 0 }
    }

    /// Rows per column along the line (ΔH/ΔW); infinite for vertical lines.
    pub fn slope(&self) -> f64 {
        let (s, c) = self.theta.sin_cos();
        if s == 0.0 {
            f64::INFINITY
        } else {
            -c / s
        }
    }

    /// Perpendicular distance from `(x, y)` to the line.
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.theta.sin_cos();
        (x * c + y * s - self.rho).abs()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HoughParams {
    pub rho_res: f64,
    pub theta_res: f64,
    pub threshold: u32,
}

impl Default for HoughParams {
    fn default() -> Self {
        HoughParams {
            rho_res: 1.0,
            theta_res: std::f64::consts::PI / 180.0,
            threshold: 200,
        }
    }
}

/// Every accumulator cell with at least `threshold` votes, most votes first
/// (ties by θ then ρ bin). Non-zero pixels vote.
pub fn hough_lines(edges: &GrayImage, params: &HoughParams) -> Vec<HoughLine> {
    hough_lines_with(edges, params, Exec::default())
}

pub fn hough_lines_with(edges: &GrayImage, params: &HoughParams, exec: Exec) -> Vec<HoughLine> {
    let (h, w) = edges.dims();
    let points: Vec<(f64, f64)> = edges
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| ((i % w) as f64, (i / w) as f64))
        .collect();
    if points.is_empty() {
        return Vec::new();
    }
    let n_theta = (std::f64::consts::PI / params.theta_res).round().max(1.0) as usize;
    let diag = ((h * h + w * w) as f64).sqrt().ceil();
    let half = (diag / params.rho_res).ceil() as i64;
    let n_rho = (2 * half + 1) as usize;

    // one column of the accumulator per θ, filled independently
    let columns: Vec<Vec<HoughLine>> = exec.map(n_theta, |t| {
        let theta = t as f64 * params.theta_res;
        let (s, c) = theta.sin_cos();
        let mut acc = vec![0u32; n_rho];
        for &(x, y) in &points {
            let r = ((x * c + y * s) / params.rho_res).round() as i64 + half;
            acc[r as usize] += 1;
        }
        acc.iter()
            .enumerate()
            .filter(|(_, &v)| v >= params.threshold)
            .map(|(r, &v)| HoughLine {
                rho: (r as i64 - half) as f64 * params.rho_res,
                theta,
                votes: v,
            })
            .collect()
    });
    let mut lines: Vec<HoughLine> = columns.into_iter().flatten().collect();
    // stable sort keeps (θ, ρ) order among equal votes
    lines.sort_by_key(|l| std::cmp::Reverse(l.votes));
    lines
}

/// Accepted |slope| range; a line is kept when `min < |slope| < max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SlopeInterval {
    pub min: f64,
    pub max: f64,
}

impl Default for SlopeInterval {
    fn default() -> Self {
        SlopeInterval { min: 0.2, max: 5.0 }
    }
}

impl SlopeInterval {
    pub fn contains(&self, slope: f64) -> bool {
        let a = slope.abs();
        a > self.min && a < self.max
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LineFilter {
    pub d_max: f64,
    pub slopes: SlopeInterval,
    pub max_lines: usize,
    pub seed: u64,
}

impl Default for LineFilter {
    fn default() -> Self {
        LineFilter {
            d_max: 160.0,
            slopes: SlopeInterval::default(),
            max_lines: 100,
            seed: 0,
        }
    }
}

impl LineFilter {
    pub fn accepts(&self, line: &HoughLine, center: (f64, f64)) -> bool {
        line.distance_to(center.0, center.1) <= self.d_max && self.slopes.contains(line.slope())
    }
}

/// Drops lines far from `center` or with unwanted slope, then keeps a seeded
/// uniform subsample of at most `max_lines` (original order preserved).
pub fn select_lines(lines: &[HoughLine], center: (f64, f64), filter: &LineFilter) -> Vec<HoughLine> {
    let kept: Vec<HoughLine> = lines.iter().filter(|l| filter.accepts(l, center)).copied().collect();
    if kept.len() <= filter.max_lines {
        return kept;
    }
    let mut rng = SplitMix64::seed_from_u64(filter.seed);
    let mut picked = index::sample(&mut rng, kept.len(), filter.max_lines).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| kept[i]).collect()
}

/// Pairwise intersections of non-parallel lines that fall inside the image
/// bounding box grown to twice its size about the image centre.
pub fn intersections(lines: &[HoughLine], height: usize, width: usize) -> Vec<(f64, f64)> {
    let (h, w) = (height as f64, width as f64);
    let mut out = Vec::new();
    for (i, a) in lines.iter().enumerate() {
        let (s1, c1) = a.theta.sin_cos();
        for b in &lines[i + 1..] {
            let (s2, c2) = b.theta.sin_cos();
            let det = c1 * s2 - s1 * c2;
            if det.abs() < 1e-9 {
                continue;
            }
            let x = (a.rho * s2 - b.rho * s1) / det;
            let y = (c1 * b.rho - c2 * a.rho) / det;
            if (-w / 2.0..=1.5 * w).contains(&x) && (-h / 2.0..=1.5 * h).contains(&y) {
                out.push((x, y));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn through(x: f64, y: f64, theta: f64) -> HoughLine {
        HoughLine::new(x * theta.cos() + y * theta.sin(), theta)
    }

    #[test]
    fn empty_edges_give_no_lines() {
        let e = GrayImage::filled(50, 50, 0).unwrap();
        assert!(hough_lines(&e, &HoughParams::default()).is_empty());
    }

    #[test]
    fn diagonal_line_has_one_dominant_cell() {
        let mut e = GrayImage::filled(260, 260, 0).unwrap();
        let (x0, y0) = (30usize, 10usize);
        for i in 0..200 {
            e.set(y0 + i, x0 + i, 255);
        }
        let lines = hough_lines(&e, &HoughParams::default());
        assert_eq!(lines.len(), 1);
        let l = lines[0];
        // direction (1, 1) has normal angle 3π/4
        let theta = 3.0 * PI / 4.0;
        let rho = x0 as f64 * theta.cos() + y0 as f64 * theta.sin();
        assert!((l.theta - theta).abs() <= PI / 180.0 + 1e-9);
        assert!((l.rho - rho).abs() <= 1.0);
        assert_eq!(l.votes, 200);
        assert!((l.slope() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn crossing_lines_found() {
        let mut e = GrayImage::filled(300, 300, 0).unwrap();
        for i in 0..250 {
            e.set(20 + i, 20 + i, 255);
            e.set(20 + i, 279 - i, 255);
        }
        let lines = hough_lines(
            &e,
            &HoughParams {
                threshold: 240,
                ..Default::default()
            },
        );
        assert_eq!(lines.len(), 2);
        let mut thetas: Vec<f64> = lines.iter().map(|l| l.theta.to_degrees().round()).collect();
        thetas.sort_by(f64::total_cmp);
        assert_eq!(thetas, vec![45.0, 135.0]);
        for l in &lines {
            let analytic = if l.theta < PI / 2.0 {
                // x + y = 299
                299.0 * l.theta.cos()
            } else {
                0.0
            };
            assert!((l.rho - analytic).abs() <= 1.0, "{l:?}");
        }
        let pts = intersections(&lines, 300, 300);
        assert_eq!(pts.len(), 1);
        assert!((pts[0].0 - 149.5).abs() < 1.0 && (pts[0].1 - 149.5).abs() < 1.0);
    }

    #[test]
    fn slope_filter() {
        let f = LineFilter::default();
        let c = (100.0, 100.0);
        // horizontal: normal points down
        assert!(!f.accepts(&through(100.0, 100.0, PI / 2.0), c));
        assert!(!f.accepts(&through(100.0, 100.0, 0.0), c));
        assert_eq!(through(0.0, 0.0, 0.0).slope(), f64::INFINITY);
        assert!(f.accepts(&through(100.0, 100.0, 3.0 * PI / 4.0), c));
        // slope 1 but 212 px away
        assert!(!f.accepts(&through(400.0, 100.0, 3.0 * PI / 4.0), c));
    }

    #[test]
    fn sampling_is_seeded_and_bounded() {
        let center = (300.0, 200.0);
        let lines: Vec<HoughLine> = (0..250)
            .map(|i| {
                let theta = (30.0 + (i % 60) as f64 * 0.5).to_radians();
                let mut l = through(center.0 + (i / 60) as f64, center.1, theta);
                l.votes = 250 - i as u32;
                l
            })
            .collect();
        let f = LineFilter {
            seed: 42,
            ..Default::default()
        };
        assert!(lines.iter().all(|l| f.accepts(l, center)));
        let a = select_lines(&lines, center, &f);
        let b = select_lines(&lines, center, &f);
        assert_eq!(a.len(), 100);
        assert_eq!(a, b);
        let other = select_lines(&lines, center, &LineFilter { seed: 43, ..f });
        assert_ne!(a, other);
    }

    #[test]
    fn intersection_examples() {
        let a = through(100.0, 200.0, 0.3);
        let b = through(100.0, 200.0, 2.0);
        let p = intersections(&[a, b], 400, 400);
        assert_eq!(p.len(), 1);
        assert!((p[0].0 - 100.0).abs() < 1e-9 && (p[0].1 - 200.0).abs() < 1e-9);

        let c = through(100.0, 200.0, 1.1);
        let p = intersections(&[a, b, c], 400, 400);
        assert_eq!(p.len(), 3);
        assert!(p
            .iter()
            .all(|q| (q.0 - 100.0).abs() < 1e-9 && (q.1 - 200.0).abs() < 1e-9));

        let par = HoughLine::new(a.rho + 10.0, a.theta);
        assert!(intersections(&[a, par], 400, 400).is_empty());

        // crossing well outside the doubled box
        let far = intersections(&[through(5000.0, 0.0, 0.3), through(5000.0, 0.0, 2.0)], 400, 400);
        assert!(far.is_empty());
    }
}
