//! Sparse-to-dense feature mining around the vanishing point.
//!
//! The patch nearest the vanishing point and its neighbours form a
//! rectangular region. That region is re-partitioned into overlapping `s×s`
//! windows with stride `⌈s/2⌉`, and every position of the dynamic context
//! attends over the dense windows.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, shape_err, Result};
use crate::layers::Qkv;
use crate::motion::PatchGrid;
use crate::tensor::{cross_attention, Tensor};

/// Grid index nearest to a continuous patch-level point; ties go to the
/// smaller row, then the smaller column.
pub fn vp_patch(vp: (f64, f64), grid: PatchGrid) -> (usize, usize) {
    // the squared distance separates per axis, so each axis rounds half down
    let nearest = |v: f64, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n - 1);
    (nearest(vp.0, grid.gw), nearest(vp.1, grid.gh))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VpRegion {
    pub center: (usize, usize),
    pub a: usize,
    pub b: usize,
    /// Inclusive patch-index bounds after clipping to the grid.
    pub x_range: (usize, usize),
    pub y_range: (usize, usize),
    pub patch_size: usize,
}

impl VpRegion {
    pub fn nominal_len(&self) -> usize {
        (2 * self.a + 1) * (2 * self.b + 1)
    }

    pub fn len(&self) -> usize {
        (self.x_range.1 - self.x_range.0 + 1) * (self.y_range.1 - self.y_range.0 + 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_clipped(&self) -> bool {
        self.len() != self.nominal_len()
    }

    /// Member patches in row-major order.
    pub fn members(&self) -> Vec<(usize, usize)> {
        (self.y_range.0..=self.y_range.1)
            .flat_map(|y| (self.x_range.0..=self.x_range.1).map(move |x| (x, y)))
            .collect()
    }

    pub fn stride(&self) -> usize {
        self.patch_size.div_ceil(2)
    }

    /// Closed-form window count of an unclipped region.
    pub fn nominal_windows(&self) -> usize {
        let (s, st) = (self.patch_size, self.stride());
        (2 * self.a * s / st + 1) * (2 * self.b * s / st + 1)
    }

    /// Top-left feature cells `(x, y)` of the dense windows, row-major.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        let (s, st) = (self.patch_size, self.stride());
        let axis = |lo: usize, hi: usize| {
            let span = (hi - lo + 1) * s;
            let count = (span - s) / st + 1;
            (0..count).map(move |i| lo * s + i * st).collect::<Vec<_>>()
        };
        let xs = axis(self.x_range.0, self.x_range.1);
        axis(self.y_range.0, self.y_range.1)
            .into_iter()
            .flat_map(|y| xs.iter().map(move |&x| (x, y)))
            .collect()
    }

    /// Flattened spatial indices of every window cell, window-major.
    pub fn columns(&self, width: usize) -> Vec<usize> {
        let s = self.patch_size;
        self.windows()
            .into_iter()
            .flat_map(|(x, y)| (0..s).flat_map(move |r| (0..s).map(move |c| (y + r) * width + x + c)))
            .collect()
    }
}

/// Patches within `a` columns and `b` rows of `center`, clipped to the grid.
pub fn vp_region(center: (usize, usize), a: usize, b: usize, grid: PatchGrid) -> Result<VpRegion> {
    if center.0 >= grid.gw || center.1 >= grid.gh {
        return invalid(format!("patch {center:?} outside a {}×{} grid", grid.gh, grid.gw));
    }
    Ok(VpRegion {
        center,
        a,
        b,
        x_range: (center.0.saturating_sub(a), (center.0 + a).min(grid.gw - 1)),
        y_range: (center.1.saturating_sub(b), (center.1 + b).min(grid.gh - 1)),
        patch_size: grid.s,
    })
}

/// Dense region features `c × (m·s²)`.
pub fn dense_partition(f: &Tensor, region: &VpRegion) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let s = region.patch_size;
    if (region.y_range.1 + 1) * s > h || (region.x_range.1 + 1) * s > w {
        return shape_err(format!("region {region:?} exceeds feature map {h}×{w}"));
    }
    let cols = region.columns(w);
    let mut out = Vec::with_capacity(c * cols.len());
    for ch in 0..c {
        let plane = &f.data()[ch * h * w..(ch + 1) * h * w];
        out.extend(cols.iter().map(|&i| plane[i]));
    }
    Tensor::new(&[c, cols.len()], out)
}

/// Every position of `dynamic: c×h×w` attends over the projected dense
/// features.
pub fn augment_context(dynamic: &Tensor, dense: &Tensor, proj: &Qkv) -> Result<Tensor> {
    let (c, h, w) = dynamic.dims3()?;
    if dense.rank() != 2 || dense.shape()[0] != c {
        return shape_err(format!(
            "dense features {:?} for context {:?}",
            dense.shape(),
            dynamic.shape()
        ));
    }
    let q = proj.q.apply(&dynamic.clone().reshape(&[c, h * w])?)?;
    let k = proj.k.apply(dense)?;
    let v = proj.v.apply(dense)?;
    cross_attention(&q, &k, &v, None, false)?.reshape(&[c, h, w])
}

/// Tape form: `dynamic` is `c×(h·w)`, `source` the `c×(h·w)` map the dense
/// windows are cut from.
pub fn augment_context_tape(
    tape: &mut Tape,
    dynamic: Var,
    source: Var,
    columns: &[usize],
    proj: &Qkv<Var>,
) -> Result<Var> {
    let dense = tape.gather_cols(source, columns.to_vec())?;
    let q = proj.q.apply(tape, dynamic)?;
    let k = proj.k.apply(tape, dense)?;
    let v = proj.v.apply(tape, dense)?;
    tape.cross_attention(q, k, v, None, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::SplitMix64;

    fn grid(gh: usize, gw: usize, s: usize) -> PatchGrid {
        PatchGrid::new(gh * s, gw * s, s).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = SplitMix64::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn nearest_patch_examples() {
        let g = grid(10, 10, 1);
        assert_eq!(vp_patch((3.0, 2.0), g), (3, 2));
        assert_eq!(vp_patch((3.5, 2.0), g), (3, 2));
        assert_eq!(vp_patch((3.51, 2.5), g), (4, 2));
        assert_eq!(vp_patch((9.0, 9.0), g), (9, 9));
    }

    #[test]
    fn region_examples() {
        let g = grid(10, 10, 4);
        assert_eq!(vp_region((5, 5), 0, 0, g).unwrap().members(), vec![(5, 5)]);
        let r = vp_region((5, 5), 1, 1, g).unwrap();
        assert_eq!((r.len(), r.nominal_len()), (9, 9));
        let r = vp_region((0, 0), 1, 1, g).unwrap();
        assert_eq!((r.len(), r.nominal_len()), (4, 9));
        assert!(r.is_clipped());
        assert!(vp_region((10, 0), 1, 1, g).is_err());
    }

    #[test]
    fn window_counts() {
        let r = vp_region((5, 5), 1, 1, grid(10, 10, 4)).unwrap();
        assert_eq!(r.windows().len(), 25);
        assert_eq!(r.nominal_windows(), 25);
        let r = vp_region((5, 5), 0, 0, grid(10, 10, 1)).unwrap();
        assert_eq!(r.windows(), vec![(5, 5)]);
        let r = vp_region((3, 3), 0, 1, grid(8, 8, 2)).unwrap();
        assert_eq!(r.windows().len(), 5);
    }

    #[test]
    fn dense_gather_matches_index_oracle() {
        let g = grid(6, 6, 2);
        let f = random(&[2, 12, 12], 1);
        let r = vp_region((3, 3), 0, 1, g).unwrap();
        let d = dense_partition(&f, &r).unwrap();
        assert_eq!(d.shape(), &[2, 5 * 4]);
        // region covers rows 4..10, cols 6..8; stride 1 windows start at rows 4..=8
        for wi in 0..5 {
            for r_ in 0..2 {
                for c_ in 0..2 {
                    for ch in 0..2 {
                        assert_eq!(d.at2(ch, wi * 4 + r_ * 2 + c_), f.at3(ch, 4 + wi + r_, 6 + c_));
                    }
                }
            }
        }
        let one = dense_partition(&f, &vp_region((2, 1), 0, 0, grid(6, 6, 2)).unwrap()).unwrap();
        assert_eq!(one.at2(1, 3), f.at3(1, 3, 5));
    }

    #[test]
    fn constant_dense_features() {
        let dynamic = random(&[3, 4, 4], 2);
        let dense = Tensor::full(&[3, 10], -0.4).unwrap();
        let out = augment_context(&dynamic, &dense, &Qkv::identity(3).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v + 0.4).abs() < 1e-6));
    }

    #[test]
    fn whole_map_region_is_full_attention() {
        let f = random(&[2, 4, 4], 3);
        let dynamic = random(&[2, 4, 4], 4);
        let g = grid(1, 1, 4);
        let r = vp_region((0, 0), 0, 0, g).unwrap();
        let dense = dense_partition(&f, &r).unwrap();
        let mut rng = SplitMix64::seed_from_u64(5);
        let proj = Qkv::seeded(2, &mut rng).unwrap();
        let got = augment_context(&dynamic, &dense, &proj).unwrap();
        let flat = |t: &Tensor| t.clone().reshape(&[2, 16]).unwrap();
        let want = cross_attention(
            &proj.q.apply(&flat(&dynamic)).unwrap(),
            &proj.k.apply(&flat(&f)).unwrap(),
            &proj.v.apply(&flat(&f)).unwrap(),
            None,
            false,
        )
        .unwrap();
        assert!(flat(&got).max_abs_diff(&want) < 1e-6);
    }

    #[test]
    fn scaled_queries_stay_in_hull() {
        let dense = random(&[2, 6], 6);
        for kappa in [1.0f32, 10.0, 100.0] {
            let dynamic = random(&[2, 3, 3], 7).map(|v| v * kappa);
            let out = augment_context(&dynamic, &dense, &Qkv::identity(2).unwrap()).unwrap();
            for ch in 0..2 {
                let row = &dense.data()[ch * 6..(ch + 1) * 6];
                let lo = row.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                assert!(out.data()[ch * 9..(ch + 1) * 9]
                    .iter()
                    .all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
            }
        }
    }

    #[test]
    fn tape_matches_plain() {
        let f = random(&[3, 8, 8], 8);
        let dynamic = random(&[3, 8, 8], 9);
        let r = vp_region((1, 2), 1, 1, grid(4, 4, 2)).unwrap();
        let mut rng = SplitMix64::seed_from_u64(1);
        let proj = Qkv::seeded(3, &mut rng).unwrap();
        let plain = augment_context(&dynamic, &dense_partition(&f, &r).unwrap(), &proj).unwrap();
        let mut tape = Tape::new();
        let bound = proj.map(&mut |t| tape.leaf(t.clone()));
        let d = tape.leaf(dynamic.reshape(&[3, 64]).unwrap());
        let src = tape.leaf(f.reshape(&[3, 64]).unwrap());
        let out = augment_context_tape(&mut tape, d, src, &r.columns(8), &bound).unwrap();
        assert!(
            tape.value(out)
                .clone()
                .reshape(&[3, 8, 8])
                .unwrap()
                .max_abs_diff(&plain)
                < 1e-6
        );
    }

    proptest! {
        #[test]
        fn nearest_matches_exhaustive(gw in 1usize..12, gh in 1usize..12, fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
            let g = grid(gh, gw, 1);
            let vp = (fx * (gw - 1) as f64, fy * (gh - 1) as f64);
            let mut best = (0, 0);
            let mut best_d = f64::INFINITY;
            for y in 0..gh {
                for x in 0..gw {
                    let d = (x as f64 - vp.0).powi(2) + (y as f64 - vp.1).powi(2);
                    if d < best_d {
                        best = (x, y);
                        best_d = d;
                    }
                }
            }
            prop_assert_eq!(vp_patch(vp, g), best);
        }

        #[test]
        fn interior_window_count_matches_closed_form(s in 1usize..9, a in 0usize..4, b in 0usize..4) {
            let g = grid(2 * b + 3, 2 * a + 3, s);
            let r = vp_region((a + 1, b + 1), a, b, g).unwrap();
            prop_assert!(!r.is_clipped());
            prop_assert_eq!(r.windows().len(), r.nominal_windows());
        }

        #[test]
        fn windows_inside_map(gw in 1usize..8, gh in 1usize..8, s in 1usize..6, a in 0usize..3, b in 0usize..3, cx in 0usize..8, cy in 0usize..8) {
            prop_assume!(cx < gw && cy < gh);
            let g = grid(gh, gw, s);
            let r = vp_region((cx, cy), a, b, g).unwrap();
            for (x, y) in r.windows() {
                prop_assert!(x + s <= gw * s && y + s <= gh * s);
            }
        }
    }
}
