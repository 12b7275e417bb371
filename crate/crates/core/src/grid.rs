//! Uniform time grids, tensor space lattices, and box regions.

use crate::error::{Error, Result};

/// Uniform grid of time nodes on `[a, b]` (inclusive endpoints).
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    pub a: f64,
    pub b: f64,
    /// Number of nodes (>= 1). With one node the grid is the single instant `a`.
    pub n: usize,
}

impl TimeGrid {
    pub fn new(a: f64, b: f64, n: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || b < a || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "bad time grid [{a}, {b}] with {n} nodes"
            )));
        }
        Ok(TimeGrid { a, b, n })
    }

    pub fn single(t: f64) -> Self {
        TimeGrid { a: t, b: t, n: 1 }
    }

    pub fn node(&self, i: usize) -> f64 {
        if self.n == 1 {
            self.a
        } else {
            self.a + (self.b - self.a) * i as f64 / (self.n - 1) as f64
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.n <= 1 {
            0.0
        } else {
            (self.b - self.a) / (self.n - 1) as f64
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).map(move |i| self.node(i))
    }

    /// Index of the node closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        if self.n == 1 {
            return 0;
        }
        let h = self.spacing();
        let i = ((t - self.a) / h).round() as isize;
        i.clamp(0, self.n as isize - 1) as usize
    }
}

/// One axis of a tensor lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn node(&self, i: usize) -> f64 {
        if self.n == 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.n - 1) as f64
        }
    }

    pub fn spacing(&self) -> f64 {
        if self.n <= 1 {
            0.0
        } else {
            (self.max - self.min) / (self.n - 1) as f64
        }
    }
}

/// Tensor-product lattice in `R^d`. Points are enumerated with the last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceGrid {
    pub axes: Vec<Axis>,
}

impl SpaceGrid {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidArgument("space grid needs >= 1 axis".into()));
        }
        for ax in &axes {
            if !(ax.min.is_finite() && ax.max.is_finite()) || ax.max < ax.min || ax.n == 0 {
                return Err(Error::InvalidArgument(format!(
                    "bad axis [{}, {}] with {} nodes",
                    ax.min, ax.max, ax.n
                )));
            }
        }
        Ok(SpaceGrid { axes })
    }

    /// Uniform 1-D lattice.
    pub fn line(min: f64, max: f64, n: usize) -> Result<Self> {
        SpaceGrid::new(vec![Axis { min, max, n }])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Smallest axis spacing; the lattice resolution used in tolerances.
    pub fn spacing(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| a.spacing())
            .filter(|h| *h > 0.0)
            .fold(f64::INFINITY, f64::min)
            .min(f64::INFINITY)
    }

    pub fn diameter(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| (a.max - a.min).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Volume of one lattice cell (product of spacings); zero-width axes count as 1.
    pub fn cell_volume(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| if a.n > 1 { a.spacing() } else { 1.0 })
            .product()
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        let mut idx = vec![0usize; self.dim()];
        let mut rem = flat;
        for k in (0..self.dim()).rev() {
            idx[k] = rem % self.axes[k].n;
            rem /= self.axes[k].n;
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let mut flat = 0usize;
        for k in 0..self.dim() {
            flat = flat * self.axes[k].n + idx[k];
        }
        flat
    }

    pub fn point(&self, flat: usize) -> Vec<f64> {
        let idx = self.multi_index(flat);
        idx.iter()
            .zip(&self.axes)
            .map(|(&i, ax)| ax.node(i))
            .collect()
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Whether the flat index lies strictly inside along every axis.
    pub fn is_interior(&self, flat: usize, margin: usize) -> bool {
        let idx = self.multi_index(flat);
        idx.iter()
            .zip(&self.axes)
            .all(|(&i, ax)| i >= margin && i + margin < ax.n)
    }

    /// Flat index of the neighbor shifted by `step` lattice cells along `axis`,
    /// or `None` if that falls off the lattice.
    pub fn neighbor(&self, flat: usize, axis: usize, step: isize) -> Option<usize> {
        let mut idx = self.multi_index(flat);
        let j = idx[axis] as isize + step;
        if j < 0 || j >= self.axes[axis].n as isize {
            return None;
        }
        idx[axis] = j as usize;
        Some(self.flat_index(&idx))
    }
}

/// Axis-aligned box `[lo_k, hi_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().zip(&hi).any(|(a, b)| b < a) {
            return Err(Error::InvalidArgument("box has hi < lo".into()));
        }
        Ok(BoxRegion { lo, hi })
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        BoxRegion {
            lo: vec![lo],
            hi: vec![hi],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(&xi, (&lo, &hi))| xi >= lo && xi <= hi)
    }

    pub fn volume(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| b - a)
            .product()
    }
}

/// Union of boxes; measured by inclusion-exclusion-free lattice counting downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxUnion {
    pub boxes: Vec<BoxRegion>,
}

impl BoxUnion {
    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    /// Lebesgue measure of the union, by pairwise disjointness or lattice fallback.
    pub fn volume(&self, resolution: usize) -> f64 {
        if self.boxes.len() == 1 {
            return self.boxes[0].volume();
        }
        // Monte-Carlo-free lattice count over the bounding box.
        let d = self.boxes[0].lo.len();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for b in &self.boxes {
            for k in 0..d {
                lo[k] = lo[k].min(b.lo[k]);
                hi[k] = hi[k].max(b.hi[k]);
            }
        }
        let axes: Vec<Axis> = (0..d)
            .map(|k| Axis {
                min: lo[k],
                max: hi[k],
                n: resolution,
            })
            .collect();
        let grid = SpaceGrid { axes };
        let hits = (0..grid.len())
            .filter(|&i| self.contains(&grid.point(i)))
            .count();
        hits as f64 / grid.len() as f64
            * lo.iter().zip(&hi).map(|(a, b)| b - a).product::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_grid_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 5).unwrap();
        assert_eq!(g.node(0), 0.0);
        assert_eq!(g.node(4), 1.0);
        assert!((g.spacing() - 0.25).abs() < 1e-15);
        assert_eq!(g.nearest(0.26), 1);
    }

    #[test]
    fn lattice_round_trip() {
        let g = SpaceGrid::new(vec![
            Axis { min: -1.0, max: 1.0, n: 5 },
            Axis { min: 0.0, max: 2.0, n: 3 },
        ])
        .unwrap();
        assert_eq!(g.len(), 15);
        for flat in 0..g.len() {
            let idx = g.multi_index(flat);
            assert_eq!(g.flat_index(&idx), flat);
        }
        let p = g.point(g.flat_index(&[2, 1]));
        assert_eq!(p, vec![0.0, 1.0]);
    }

    #[test]
    fn box_union_volume() {
        let u = BoxUnion {
            boxes: vec![BoxRegion::interval(0.0, 1.0), BoxRegion::interval(2.0, 2.5)],
        };
        let v = u.volume(2001);
        assert!((v - 1.5).abs() < 5e-3, "got {v}");
    }
}
