//! Nodal fields on a [`Grid`]: deformations with Dirichlet data, their
//! minors and minor gradients, volume-fraction fields, and quadrature.

use rayon::prelude::*;
use std::sync::Arc;
use thiserror::Error;

use crate::grid::{Face, Grid};
use crate::material::{MaterialError, MaterialSpec};
use crate::tensor::{cofactor, determinant, Matrix3, Tensor3, Vector3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FieldError {
    #[error("non-positive determinant {det:e} at node {node}")]
    NonPositiveDeterminant { node: usize, det: f64 },
    #[error("field length {got} does not match grid node count {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Material(#[from] MaterialError),
}

/// Nodal deformation `y` with a mask of constrained nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    grid: Arc<Grid>,
    pub values: Vec<Vector3>,
    pub dirichlet_mask: Vec<bool>,
    pub dirichlet_values: Vec<Vector3>,
}

impl DeformationField {
    pub fn from_fn(grid: Arc<Grid>, f: impl Fn(Vector3) -> Vector3) -> Self {
        let values: Vec<Vector3> = grid.positions().into_iter().map(f).collect();
        let n = values.len();
        Self {
            grid,
            dirichlet_values: values.clone(),
            values,
            dirichlet_mask: vec![false; n],
        }
    }

    pub fn identity(grid: Arc<Grid>) -> Self {
        Self::from_fn(grid, |x| x)
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<Vector3>) -> Result<Self, FieldError> {
        if values.len() != grid.node_count() {
            return Err(FieldError::LengthMismatch { expected: grid.node_count(), got: values.len() });
        }
        let n = values.len();
        Ok(Self { grid, dirichlet_values: values.clone(), values, dirichlet_mask: vec![false; n] })
    }

    /// Constrain every node on `faces` to its current value.
    pub fn clamp_faces(mut self, faces: &[Face]) -> Self {
        self.dirichlet_mask = self.grid.face_mask(faces);
        self.dirichlet_values = self.values.clone();
        self
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    /// Copy the prescribed values onto the constrained nodes.
    pub fn enforce_dirichlet(&mut self) {
        for n in 0..self.values.len() {
            if self.dirichlet_mask[n] {
                self.values[n] = self.dirichlet_values[n];
            }
        }
    }

    pub fn dirichlet_exact(&self) -> bool {
        self.values
            .iter()
            .zip(&self.dirichlet_values)
            .zip(&self.dirichlet_mask)
            .all(|((v, d), &m)| !m || v == d)
    }

    pub fn free_count(&self) -> usize {
        self.dirichlet_mask.iter().filter(|&&m| !m).count()
    }

    /// `∇y` at one node; column `k` is `∂y/∂x_k`.
    #[inline]
    pub fn gradient_at(&self, n: usize) -> Matrix3 {
        let g = &self.grid;
        Matrix3::from_columns(&[
            g.diff_at(0, &self.values, n),
            g.diff_at(1, &self.values, n),
            g.diff_at(2, &self.values, n),
        ])
    }

    pub fn gradient_of_vector_field(&self) -> Vec<Matrix3> {
        (0..self.grid.node_count())
            .into_par_iter()
            .map(|n| self.gradient_at(n))
            .collect()
    }

    pub fn minor_fields(&self) -> MinorFields {
        MinorFields::from_gradient(&self.grid, self.gradient_of_vector_field())
    }

    pub fn min_det(&self) -> f64 {
        (0..self.grid.node_count())
            .into_par_iter()
            .map(|n| determinant(&self.gradient_at(n)))
            .reduce(|| f64::INFINITY, f64::min)
    }

    /// Error on the first node (lowest index) with `det ∇y <= 0`.
    pub fn check_orientation(&self) -> Result<(), FieldError> {
        let bad = (0..self.grid.node_count())
            .into_par_iter()
            .map(|n| (n, determinant(&self.gradient_at(n))))
            .filter(|&(_, d)| !(d > 0.0))
            .min_by_key(|&(n, _)| n);
        match bad {
            Some((node, det)) => Err(FieldError::NonPositiveDeterminant { node, det }),
            None => Ok(()),
        }
    }
}

/// `∇y`, `cof ∇y`, `det ∇y` and the gradients of the last two.
#[derive(Debug, Clone, PartialEq)]
pub struct MinorFields {
    pub grad: Vec<Matrix3>,
    pub cof: Vec<Matrix3>,
    pub det: Vec<f64>,
    /// `grad_cof[n][k] = ∂(cof ∇y)/∂x_k` at node `n`.
    pub grad_cof: Vec<Tensor3>,
    pub grad_det: Vec<Vector3>,
}

impl MinorFields {
    pub fn from_gradient(grid: &Grid, grad: Vec<Matrix3>) -> Self {
        let cof: Vec<Matrix3> = grad.par_iter().map(cofactor).collect();
        let det: Vec<f64> = grad.par_iter().map(determinant).collect();
        let (grad_cof, grad_det) = (0..grid.node_count())
            .into_par_iter()
            .map(|n| {
                let gc: Tensor3 = std::array::from_fn(|k| grid.diff_at(k, &cof, n));
                let gd = Vector3::from_fn(|k, _| grid.diff_at(k, &det, n));
                (gc, gd)
            })
            .unzip();
        Self { grad, cof, det, grad_cof, grad_det }
    }

    pub fn min_det(&self) -> f64 {
        self.det.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Nodal volume-fraction vectors, stored node-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InternalStateField {
    grid: Arc<Grid>,
    components: usize,
    values: Vec<f64>,
}

impl InternalStateField {
    pub fn new(grid: Arc<Grid>, components: usize, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != grid.node_count() * components {
            return Err(FieldError::LengthMismatch {
                expected: grid.node_count() * components,
                got: values.len(),
            });
        }
        Ok(Self { grid, components, values })
    }

    pub fn uniform(grid: Arc<Grid>, z: &[f64]) -> Self {
        let values = z.iter().copied().cycle().take(z.len() * grid.node_count()).collect();
        Self { grid, components: z.len(), values }
    }

    /// `z = λ(∇y)` node by node.
    pub fn from_gradients(grid: Arc<Grid>, grad: &[Matrix3], mat: &MaterialSpec) -> Result<Self, FieldError> {
        let per_node: Result<Vec<Vec<f64>>, MaterialError> =
            grad.par_iter().map(|f| mat.lambda_fractions(f)).collect();
        let values = per_node?.concat();
        Ok(Self { grid, components: mat.well_count(), values })
    }

    pub fn from_deformation(y: &DeformationField, mat: &MaterialSpec) -> Result<Self, FieldError> {
        Self::from_gradients(y.grid().clone(), &y.gradient_of_vector_field(), mat)
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn components(&self) -> usize {
        self.components
    }
    pub fn node(&self, n: usize) -> &[f64] {
        &self.values[n * self.components..(n + 1) * self.components]
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    /// `𝒟(self, other) = ∫ D(self, other) dx`.
    pub fn dissipation_to(&self, other: &Self, mat: &MaterialSpec) -> f64 {
        let w = self.grid.weights();
        (0..self.grid.node_count())
            .map(|n| w[n] * mat.dissipation_distance(self.node(n), other.node(n)))
            .sum()
    }

    /// Mean of each component over the domain.
    pub fn averages(&self) -> Vec<f64> {
        let w = self.grid.weights();
        let vol = self.grid.volume();
        (0..self.components)
            .map(|c| (0..self.grid.node_count()).map(|n| w[n] * self.values[n * self.components + c]).sum::<f64>() / vol)
            .collect()
    }

    pub fn max_abs_difference(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// `∫ u dx` with the grid's nodal weights.
pub fn integrate(samples: &[f64], grid: &Grid) -> f64 {
    samples.iter().zip(grid.weights()).map(|(u, w)| u * w).sum()
}

/// `(∫ |u|^p dx)^{1/p}`.
pub fn lp_norm(samples: &[f64], exponent: f64, grid: &Grid) -> f64 {
    assert!(exponent >= 1.0, "Lp norm needs exponent >= 1");
    let s: f64 = samples
        .iter()
        .zip(grid.weights())
        .map(|(u, w)| w * u.abs().powf(exponent))
        .sum();
    s.powf(1.0 / exponent)
}
