use serde::{Deserialize, Serialize};

/// Output of the detector: the winning cell's centre.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VpEstimate {
    pub x: f64,
    pub y: f64,
    pub votes: u32,
    pub valid: bool,
}

impl VpEstimate {
    pub fn invalid() -> Self {
        VpEstimate {
            x: 0.0,
            y: 0.0,
            votes: 0,
            valid: false,
        }
    }
}

/// Square voting cells of side `L = ⌊H/4⌋`, centres on a grid of stride
/// `⌊L/2⌋` starting at row `⌊H/3⌋` and column `⌊L/2⌋`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGrid {
    pub size: usize,
    pub rows: Vec<usize>,
    pub cols: Vec<usize>,
}

impl CellGrid {
    pub fn new(height: usize, width: usize) -> Self {
        let size = (height / 4).max(1);
        let stride = (size / 2).max(1);
        CellGrid {
            size,
            rows: (height / 3..height).step_by(stride).collect(),
            cols: (size / 2..width.max(size / 2 + 1)).step_by(stride).collect(),
        }
    }

    fn span(&self, center: usize) -> (f64, f64) {
        let lo = center as f64 - (self.size / 2) as f64;
        (lo, lo + self.size as f64)
    }

    /// Half-open containment test, clipped to the image.
    pub fn contains(&self, cy: usize, cx: usize, p: (f64, f64), height: usize, width: usize) -> bool {
        let (x0, x1) = self.span(cx);
        let (y0, y1) = self.span(cy);
        p.0 >= x0.max(0.0) && p.0 < x1.min(width as f64) && p.1 >= y0.max(0.0) && p.1 < y1.min(height as f64)
    }
}

/// Picks the cell with the most points; ties go to the smaller centre row,
/// then column.
pub fn cell_vote(points: &[(f64, f64)], height: usize, width: usize) -> VpEstimate {
    let grid = CellGrid::new(height, width);
    let mut best = VpEstimate::invalid();
    for &cy in &grid.rows {
        for &cx in &grid.cols {
            let n = points
                .iter()
                .filter(|&&p| grid.contains(cy, cx, p, height, width))
                .count() as u32;
            if n > best.votes {
                best = VpEstimate {
                    x: cx as f64,
                    y: cy as f64,
                    votes: n,
                    valid: true,
                };
            }
        }
    }
    best
}
