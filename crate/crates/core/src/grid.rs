//! Structured box grids, finite-difference stencils and the matched nodal
//! quadrature.
//!
//! Node `n = i + nx·(j + ny·k)`. Every axis carries a banded derivative
//! matrix `D`: central differences inside, a one-sided closure at the two
//! ends. The quadrature weights `w` are chosen so that `wᵀD = e_last − e_first`,
//! i.e. the discrete integral of a discrete derivative telescopes exactly.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul};
use thiserror::Error;

use crate::tensor::Vector3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GridError {
    #[error("axis {axis} has {nodes} nodes; at least 3 are required")]
    TooFewNodes { axis: usize, nodes: usize },
    #[error("axis {axis} has non-positive or non-finite extent {extent}")]
    BadExtent { axis: usize, extent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Face {
    #[serde(rename = "x-")]
    XMin,
    #[serde(rename = "x+")]
    XMax,
    #[serde(rename = "y-")]
    YMin,
    #[serde(rename = "y+")]
    YMax,
    #[serde(rename = "z-")]
    ZMin,
    #[serde(rename = "z+")]
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMin,
        Face::XMax,
        Face::YMin,
        Face::YMax,
        Face::ZMin,
        Face::ZMax,
    ];

    pub fn axis(self) -> usize {
        match self {
            Face::XMin | Face::XMax => 0,
            Face::YMin | Face::YMax => 1,
            Face::ZMin | Face::ZMax => 2,
        }
    }

    pub fn is_max(self) -> bool {
        matches!(self, Face::XMax | Face::YMax | Face::ZMax)
    }

    pub fn name(self) -> &'static str {
        match self {
            Face::XMin => "x-",
            Face::XMax => "x+",
            Face::YMin => "y-",
            Face::YMax => "y+",
            Face::ZMin => "z-",
            Face::ZMax => "z+",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub origin: [f64; 3],
    pub extents: [f64; 3],
    pub nodes: [usize; 3],
}

impl GridSpec {
    pub fn unit_cube(n: usize) -> Self {
        Self {
            origin: [0.0; 3],
            extents: [1.0; 3],
            nodes: [n; 3],
        }
    }
}

/// One row of a 1-D derivative matrix: `len` taps starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Row {
    start: usize,
    len: usize,
    coef: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
struct AxisOperator {
    rows: Vec<Row>,
    /// Column view of `rows`: for node `j`, the `(i, D[i][j])` pairs.
    cols: Vec<Vec<(usize, f64)>>,
    weights: Vec<f64>,
}

impl AxisOperator {
    fn new(n: usize, h: f64) -> Self {
        let inv = 1.0 / h;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = if i == 0 {
                if n >= 4 {
                    Row { start: 0, len: 4, coef: [-2.0, 3.5, -2.0, 0.5] }
                } else {
                    Row { start: 0, len: 3, coef: [-1.5, 2.0, -0.5, 0.0] }
                }
            } else if i == n - 1 {
                if n >= 4 {
                    Row { start: n - 4, len: 4, coef: [-0.5, 2.0, -3.5, 2.0] }
                } else {
                    Row { start: n - 3, len: 3, coef: [0.5, -2.0, 1.5, 0.0] }
                }
            } else {
                Row { start: i - 1, len: 3, coef: [-0.5, 0.0, 0.5, 0.0] }
            };
            let mut row = row;
            for c in row.coef.iter_mut() {
                *c *= inv;
            }
            rows.push(row);
        }
        let mut cols = vec![Vec::new(); n];
        for (i, row) in rows.iter().enumerate() {
            for c in 0..row.len {
                if row.coef[c] != 0.0 {
                    cols[row.start + c].push((i, row.coef[c]));
                }
            }
        }
        let weights = matched_weights(n, h, &rows);
        Self { rows, cols, weights }
    }
}

fn matched_weights(n: usize, h: f64, rows: &[Row]) -> Vec<f64> {
    if n == 3 {
        return vec![0.5 * h, h, 0.5 * h];
    }
    if n >= 8 {
        let mut w = vec![h; n];
        for (k, v) in [0.125, 1.5, 0.875].into_iter().enumerate() {
            w[k] = v * h;
            w[n - 1 - k] = v * h;
        }
        return w;
    }
    // Short axes: the weight vector nearest to the trapezoid rule among all
    // solutions of Dᵀw = e_last − e_first.
    let mut d = DMatrix::<f64>::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for c in 0..row.len {
            d[(i, row.start + c)] = row.coef[c];
        }
    }
    let mut trap = DVector::from_element(n, h);
    trap[0] = 0.5 * h;
    trap[n - 1] = 0.5 * h;
    let mut v = DVector::zeros(n);
    v[0] = -1.0;
    v[n - 1] = 1.0;
    let dt = d.transpose();
    let rhs = &v - &dt * &trap;
    let gram = &dt * &d;
    let lam = gram
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .expect("svd solve with both factors");
    let w = trap + d * lam;
    w.iter().copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    origin: Vector3,
    extents: Vector3,
    nodes: [usize; 3],
    spacing: Vector3,
    ops: [AxisOperator; 3],
    weights: Vec<f64>,
    spec: GridSpec,
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self, GridError> {
        for a in 0..3 {
            if spec.nodes[a] < 3 {
                return Err(GridError::TooFewNodes { axis: a, nodes: spec.nodes[a] });
            }
            if !(spec.extents[a].is_finite() && spec.extents[a] > 0.0) {
                return Err(GridError::BadExtent { axis: a, extent: spec.extents[a] });
            }
        }
        let origin = Vector3::from(spec.origin);
        let extents = Vector3::from(spec.extents);
        let spacing = Vector3::from_fn(|a, _| spec.extents[a] / (spec.nodes[a] - 1) as f64);
        let ops: [AxisOperator; 3] = std::array::from_fn(|a| AxisOperator::new(spec.nodes[a], spacing[a]));
        let [nx, ny, nz] = spec.nodes;
        let mut weights = Vec::with_capacity(nx * ny * nz);
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    weights.push(ops[0].weights[i] * ops[1].weights[j] * ops[2].weights[k]);
                }
            }
        }
        Ok(Self { origin, extents, nodes: spec.nodes, spacing, ops, weights, spec })
    }

    pub fn unit_cube(n: usize) -> Self {
        Self::new(GridSpec::unit_cube(n)).expect("valid unit cube")
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn origin(&self) -> Vector3 {
        self.origin
    }
    pub fn extents(&self) -> Vector3 {
        self.extents
    }
    pub fn nodes_per_axis(&self) -> [usize; 3] {
        self.nodes
    }
    pub fn spacing(&self) -> Vector3 {
        self.spacing
    }
    pub fn node_count(&self) -> usize {
        self.nodes[0] * self.nodes[1] * self.nodes[2]
    }
    pub fn cell_count(&self) -> usize {
        (self.nodes[0] - 1) * (self.nodes[1] - 1) * (self.nodes[2] - 1)
    }
    pub fn volume(&self) -> f64 {
        self.extents.iter().product()
    }
    /// Smallest spacing; the characteristic length in tolerances.
    pub fn min_spacing(&self) -> f64 {
        self.spacing.min()
    }

    /// Nodal quadrature weights, exact for trilinear integrands.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// One-dimensional weights along `axis`.
    pub fn axis_weights(&self, axis: usize) -> &[f64] {
        &self.ops[axis].weights
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nodes[0] * (j + self.nodes[1] * k)
    }

    #[inline]
    pub fn coords(&self, n: usize) -> [usize; 3] {
        let i = n % self.nodes[0];
        let r = n / self.nodes[0];
        [i, r % self.nodes[1], r / self.nodes[1]]
    }

    #[inline]
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.nodes[0],
            _ => self.nodes[0] * self.nodes[1],
        }
    }

    pub fn position(&self, n: usize) -> Vector3 {
        let c = self.coords(n);
        Vector3::from_fn(|a, _| self.origin[a] + c[a] as f64 * self.spacing[a])
    }

    pub fn positions(&self) -> Vec<Vector3> {
        (0..self.node_count()).map(|n| self.position(n)).collect()
    }

    pub fn on_face(&self, n: usize, face: Face) -> bool {
        let c = self.coords(n)[face.axis()];
        if face.is_max() {
            c == self.nodes[face.axis()] - 1
        } else {
            c == 0
        }
    }

    pub fn on_boundary(&self, n: usize) -> bool {
        Face::ALL.iter().any(|&f| self.on_face(n, f))
    }

    pub fn face_mask(&self, faces: &[Face]) -> Vec<bool> {
        (0..self.node_count())
            .map(|n| faces.iter().any(|&f| self.on_face(n, f)))
            .collect()
    }

    /// Derivative along `axis` of a nodal field, evaluated at node `n`.
    #[inline]
    pub fn diff_at<T>(&self, axis: usize, field: &[T], n: usize) -> T
    where
        T: Copy + Add<Output = T> + Mul<f64, Output = T>,
    {
        let stride = self.stride(axis);
        let i = self.coords(n)[axis];
        let row = &self.ops[axis].rows[i];
        let base = n - i * stride + row.start * stride;
        let mut acc = field[base] * row.coef[0];
        for c in 1..row.len {
            acc = acc + field[base + c * stride] * row.coef[c];
        }
        acc
    }

    /// Transposed derivative along `axis`, evaluated at node `n`:
    /// `(Dᵀv)[n] = Σᵢ D[i][n] v[i]`.
    #[inline]
    pub fn diff_transpose_at<T>(&self, axis: usize, field: &[T], n: usize, zero: T) -> T
    where
        T: Copy + Add<Output = T> + Mul<f64, Output = T>,
    {
        let stride = self.stride(axis);
        let j = self.coords(n)[axis];
        let base = n - j * stride;
        let mut acc = zero;
        for &(i, c) in &self.ops[axis].cols[j] {
            acc = acc + field[base + i * stride] * c;
        }
        acc
    }

    pub fn diff<T>(&self, axis: usize, field: &[T]) -> Vec<T>
    where
        T: Copy + Add<Output = T> + Mul<f64, Output = T>,
    {
        (0..self.node_count()).map(|n| self.diff_at(axis, field, n)).collect()
    }

    pub fn diff_transpose<T>(&self, axis: usize, field: &[T], zero: T) -> Vec<T>
    where
        T: Copy + Add<Output = T> + Mul<f64, Output = T>,
    {
        (0..self.node_count())
            .map(|n| self.diff_transpose_at(axis, field, n, zero))
            .collect()
    }
}
