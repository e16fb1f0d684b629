//! Structured node grids and the `ℂᵐ`-block fields stored on them.

use serde::{Deserialize, Serialize};

use crate::linalg::{CVec, C64};

/// What a node contributes to a linear solve.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeRole {
    Unknown,
    Known,
    Zero,
}

/// Axis-aligned lattice `u = lo + i·step` in some coordinate system (up to three axes).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub dims: Vec<usize>,
    pub lo: Vec<f64>,
    pub step: Vec<f64>,
}

/// Interpolation stencil of a point: the base cell and the fractional offsets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub base: [i64; 3],
    pub frac: [f64; 3],
}

impl GridGeometry {
    pub fn new(dims: Vec<usize>, lo: Vec<f64>, step: Vec<f64>) -> Self {
        assert!(!dims.is_empty() && dims.len() <= 3, "grids have one to three axes");
        assert!(dims.len() == lo.len() && dims.len() == step.len());
        GridGeometry { dims, lo, step }
    }

    /// Uniform lattice with nodes at both ends of `[lo, hi]` on every axis.
    pub fn spanning(dims: Vec<usize>, lo: &[f64], hi: &[f64]) -> Self {
        let step = dims.iter().zip(lo.iter().zip(hi)).map(|(&d, (l, h))| (h - l) / (d.max(2) - 1) as f64).collect();
        GridGeometry::new(dims, lo.to_vec(), step)
    }

    pub fn axes(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.step.iter().product()
    }

    pub fn multi(&self, mut idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.axes()];
        for (k, d) in self.dims.iter().enumerate() {
            out[k] = idx % d;
            idx /= d;
        }
        out
    }

    pub fn linear(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for k in (0..self.axes()).rev() {
            idx = idx * self.dims[k] + multi[k];
        }
        idx
    }

    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        self.multi(idx).iter().enumerate().map(|(k, &i)| self.lo[k] + i as f64 * self.step[k]).collect()
    }

    /// Stencil of `u`, or `None` when no corner of its cell is a grid node.
    pub fn locate(&self, u: &[f64]) -> Option<Stencil> {
        let mut st = Stencil { base: [0; 3], frac: [0.0; 3] };
        for k in 0..self.axes() {
            let r = (u[k] - self.lo[k]) / self.step[k];
            if !r.is_finite() {
                return None;
            }
            let b = r.floor();
            if b < -1.0 || b > self.dims[k] as f64 - 1.0 {
                return None;
            }
            st.base[k] = b as i64;
            st.frac[k] = r - b;
        }
        Some(st)
    }

    /// Multilinear corners of a stencil that fall on the grid, with their weights.
    pub fn corners(&self, st: &Stencil, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let a = self.axes();
        for mask in 0..(1usize << a) {
            let mut idx = 0usize;
            let mut w = 1.0;
            let mut inside = true;
            for k in (0..a).rev() {
                let bit = (mask >> k) & 1;
                let i = st.base[k] + bit as i64;
                if i < 0 || i >= self.dims[k] as i64 {
                    inside = false;
                    break;
                }
                idx = idx * self.dims[k] + i as usize;
                w *= if bit == 1 { st.frac[k] } else { 1.0 - st.frac[k] };
            }
            if inside && w != 0.0 {
                out.push((idx, w));
            }
        }
    }
}

/// Node-major field: node `i` holds `block` components, each in `ℂᵐ`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub geometry: GridGeometry,
    pub block: usize,
    pub fiber: usize,
    pub values: CVec,
}

impl GridField {
    pub fn zeros(geometry: GridGeometry, block: usize, fiber: usize) -> Self {
        let len = geometry.len() * block * fiber;
        GridField { geometry, block, fiber, values: CVec::zeros(len) }
    }

    /// Samples `f(node coordinates)` which must return `block·fiber` entries.
    pub fn from_fn(geometry: GridGeometry, block: usize, fiber: usize, f: impl Fn(usize, &[f64]) -> Vec<C64>) -> Self {
        let mut out = GridField::zeros(geometry, block, fiber);
        let w = block * fiber;
        for i in 0..out.geometry.len() {
            let vals = f(i, &out.geometry.node_coords(i));
            assert_eq!(vals.len(), w);
            for (k, v) in vals.into_iter().enumerate() {
                out.values[i * w + k] = v;
            }
        }
        out
    }

    pub fn width(&self) -> usize {
        self.block * self.fiber
    }

    pub fn node(&self, i: usize) -> &[C64] {
        let w = self.width();
        &self.values.as_slice()[i * w..(i + 1) * w]
    }

    /// Root-sum-square over the selected nodes.
    pub fn norm_on(&self, select: impl Fn(usize) -> bool) -> f64 {
        (0..self.geometry.len()).filter(|&i| select(i)).map(|i| self.node(i).iter().map(|z| z.norm_sqr()).sum::<f64>()).sum::<f64>().sqrt()
    }
}
