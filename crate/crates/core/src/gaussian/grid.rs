use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Regular 2D lattice.
///
/// Sites are enumerated column-major: all rows of column 0, then column 1,
/// and so on. Every module indexes fields with this order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    pub spacing_v: f64,
    pub spacing_h: f64,
}

impl GridSpec {
    pub fn new(n_rows: usize, n_cols: usize, spacing_v: f64, spacing_h: f64) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return domain(format!("grid must have at least one site, got {n_rows}x{n_cols}"));
        }
        if !(spacing_v > 0.0 && spacing_h > 0.0 && spacing_v.is_finite() && spacing_h.is_finite()) {
            return domain("grid spacings must be positive and finite");
        }
        Ok(Self {
            n_rows,
            n_cols,
            spacing_v,
            spacing_h,
        })
    }

    /// Unit-spaced grid.
    pub fn unit(n_rows: usize, n_cols: usize) -> Result<Self> {
        Self::new(n_rows, n_cols, 1.0, 1.0)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.n_rows && col < self.n_cols);
        col * self.n_rows + row
    }

    /// `(row, col)` of a linear site index.
    #[inline]
    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx % self.n_rows, idx / self.n_rows)
    }

    /// Sites of the centered `k × k` patch (clipped to the grid).
    pub fn center_patch(&self, k: usize) -> Vec<usize> {
        let kr = k.min(self.n_rows);
        let kc = k.min(self.n_cols);
        let r0 = (self.n_rows - kr) / 2;
        let c0 = (self.n_cols - kc) / 2;
        let mut out = Vec::with_capacity(kr * kc);
        for c in c0..c0 + kc {
            for r in r0..r0 + kr {
                out.push(self.index(r, c));
            }
        }
        out
    }

    /// Sites at least `margin` steps from every border.
    pub fn interior(&self, margin: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for c in margin..self.n_cols.saturating_sub(margin) {
            for r in margin..self.n_rows.saturating_sub(margin) {
                out.push(self.index(r, c));
            }
        }
        out
    }

    /// Sites of one column, top to bottom.
    pub fn column(&self, col: usize) -> Vec<usize> {
        (0..self.n_rows).map(|r| self.index(r, col)).collect()
    }

    /// Same lattice geometry (spacings and vertical extent); the horizontal
    /// extent may differ, so a window of columns shares the design.
    pub fn same_design(&self, other: &GridSpec) -> bool {
        self.n_rows == other.n_rows
            && self.spacing_v == other.spacing_v
            && self.spacing_h == other.spacing_h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn site_order_is_a_bijection() {
        let g = GridSpec::unit(4, 3).unwrap();
        let mut seen = vec![false; g.len()];
        for c in 0..3 {
            for r in 0..4 {
                let i = g.index(r, c);
                assert!(!seen[i]);
                seen[i] = true;
                assert_eq!(g.coords(i), (r, c));
            }
        }
        assert!(seen.into_iter().all(|s| s));
        assert_eq!(g.index(1, 0), 1);
        assert_eq!(g.index(0, 1), 4);
    }

    #[test]
    fn rejects_empty_grid() {
        assert!(GridSpec::unit(0, 3).is_err());
        assert!(GridSpec::new(2, 2, 0.0, 1.0).is_err());
    }

    #[test]
    fn patches() {
        let g = GridSpec::unit(5, 5).unwrap();
        let p = g.center_patch(3);
        assert_eq!(p.len(), 9);
        assert!(p.contains(&g.index(2, 2)));
        assert!(!p.contains(&g.index(0, 0)));
        assert_eq!(g.interior(1).len(), 9);
    }
}
