//! Energy functionals on nodal deformations: stored energy, dead loads,
//! total energy, the smoothed incremental objective with its analytic
//! gradient, and the time derivative of the total energy.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::fields::{DeformationField, FieldError, InternalStateField};
use crate::grid::{Face, Grid};
use crate::material::{MaterialSpec, WellBlend};
use crate::tensor::{cofactor, cofactor_adjoint, determinant, Matrix3, Tensor3, Vector3};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnergyError {
    #[error("barrier violated: det = {det:e} at node {node}")]
    BarrierViolation { node: usize, det: f64 },
}

/// Piecewise-linear time profile through `(t, factor)` knots, constant
/// outside the knot range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeProfile {
    pub knots: Vec<[f64; 2]>,
}

impl TimeProfile {
    pub fn constant(v: f64) -> Self {
        Self { knots: vec![[0.0, v]] }
    }

    pub fn ramp(t_end: f64, v_end: f64) -> Self {
        Self { knots: vec![[0.0, 0.0], [t_end, v_end]] }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.knots.is_empty() {
            return Err("time profile needs at least one knot".into());
        }
        if self.knots.iter().any(|k| !k[0].is_finite() || !k[1].is_finite()) {
            return Err("time profile knots must be finite".into());
        }
        if self.knots.windows(2).any(|w| !(w[1][0] > w[0][0])) {
            return Err("time profile knot times must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0][0] {
            return k[0][1];
        }
        for w in k.windows(2) {
            if t <= w[1][0] {
                let s = (t - w[0][0]) / (w[1][0] - w[0][0]);
                return w[0][1] + s * (w[1][1] - w[0][1]);
            }
        }
        k[k.len() - 1][1]
    }

    /// Slope of the piece containing `t`; at a knot, the slope of the piece
    /// to its right.
    pub fn derivative(&self, t: f64) -> f64 {
        let k = &self.knots;
        for w in k.windows(2) {
            if t >= w[0][0] && t < w[1][0] {
                return (w[1][1] - w[0][1]) / (w[1][0] - w[0][0]);
            }
        }
        0.0
    }

    pub fn knot_times(&self) -> impl Iterator<Item = f64> + '_ {
        self.knots.iter().map(|k| k[0])
    }
}

/// Dead body force `b(t, x) = profile(t)·(base + gradient·(x − origin))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyForce {
    pub base: [f64; 3],
    #[serde(default = "zero3x3")]
    pub gradient: [[f64; 3]; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub profile: TimeProfile,
}

fn zero3x3() -> [[f64; 3]; 3] {
    [[0.0; 3]; 3]
}

impl BodyForce {
    pub fn spatial(&self, x: &Vector3) -> Vector3 {
        let g = Matrix3::from_fn(|r, c| self.gradient[r][c]);
        Vector3::from(self.base) + g * (x - Vector3::from(self.origin))
    }

    pub fn at(&self, t: f64, x: &Vector3) -> Vector3 {
        self.spatial(x) * self.profile.value(t)
    }
}

/// Prescribed motion of the clamped nodes:
/// `y_D(t, X) = X + s(t)·(H (X − origin) + offset)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryMotion {
    pub displacement_gradient: [[f64; 3]; 3],
    #[serde(default)]
    pub offset: [f64; 3],
    #[serde(default)]
    pub origin: [f64; 3],
    pub profile: TimeProfile,
}

impl BoundaryMotion {
    fn shape(&self, x: &Vector3) -> Vector3 {
        let h = Matrix3::from_fn(|r, c| self.displacement_gradient[r][c]);
        h * (x - Vector3::from(self.origin)) + Vector3::from(self.offset)
    }

    pub fn target(&self, t: f64, x: &Vector3) -> Vector3 {
        x + self.shape(x) * self.profile.value(t)
    }

    pub fn velocity(&self, t: f64, x: &Vector3) -> Vector3 {
        self.shape(x) * self.profile.derivative(t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadingProgram {
    /// Time horizon `T`.
    pub horizon: f64,
    /// Faces forming the Dirichlet part of the boundary.
    pub clamped_faces: Vec<Face>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub body_force: Option<BodyForce>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boundary_motion: Option<BoundaryMotion>,
}

impl LoadingProgram {
    pub fn unloaded(horizon: f64) -> Self {
        Self { horizon, clamped_faces: Face::ALL.to_vec(), body_force: None, boundary_motion: None }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            v.push(format!("time horizon {} must be positive", self.horizon));
        }
        if self.clamped_faces.is_empty() {
            v.push("at least one clamped face is required (the Dirichlet part must have positive area)".into());
        }
        if let Some(b) = &self.body_force {
            if let Err(e) = b.profile.validate() {
                v.push(format!("body_force: {e}"));
            }
        }
        if let Some(m) = &self.boundary_motion {
            if let Err(e) = m.profile.validate() {
                v.push(format!("boundary_motion: {e}"));
            }
        }
        v
    }

    /// Nodal body-force samples at time `t`.
    pub fn body_samples(&self, t: f64, grid: &Grid) -> Vec<Vector3> {
        match &self.body_force {
            Some(b) => {
                let s = b.profile.value(t);
                grid.positions().iter().map(|x| b.spatial(x) * s).collect()
            }
            None => vec![Vector3::zeros(); grid.node_count()],
        }
    }

    /// Times at which `∂ₜℰ` may jump.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self
            .body_force
            .iter()
            .flat_map(|b| b.profile.knot_times())
            .chain(self.boundary_motion.iter().flat_map(|m| m.profile.knot_times()))
            .collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Reference configuration clamped on `clamped_faces` at time `t`.
    pub fn initial_deformation(&self, grid: Arc<Grid>, t: f64) -> DeformationField {
        let y = DeformationField::identity(grid).clamp_faces(&self.clamped_faces);
        transport_to(&y, t, self)
    }
}

/// Move the Dirichlet data (and the constrained nodes) to time `t`.
pub fn transport_to(y: &DeformationField, t: f64, prog: &LoadingProgram) -> DeformationField {
    let mut out = y.clone();
    if let Some(m) = &prog.boundary_motion {
        let grid = y.grid().clone();
        for n in 0..grid.node_count() {
            if out.dirichlet_mask[n] {
                out.dirichlet_values[n] = m.target(t, &grid.position(n));
            }
        }
        out.enforce_dirichlet();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub stored: f64,
    pub well_part: f64,
    pub regularizer_part: f64,
    pub load_part: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn infinite(load_part: f64) -> Self {
        Self {
            stored: f64::INFINITY,
            well_part: f64::NAN,
            regularizer_part: f64::INFINITY,
            load_part,
            total: f64::INFINITY,
        }
    }
}

/// `J(y)`; infinite if any nodal determinant is non-positive.
pub fn stored_energy(y: &DeformationField, mat: &MaterialSpec) -> EnergyBreakdown {
    let grid = y.grid();
    let minors = y.minor_fields();
    if minors.det.iter().any(|d| !(*d > 0.0)) {
        return EnergyBreakdown::infinite(0.0);
    }
    let parts: Vec<(f64, f64)> = (0..grid.node_count())
        .into_par_iter()
        .map(|n| {
            let e = mat
                .density_with_gradient(&minors.grad[n], &minors.grad_cof[n], &minors.grad_det[n], WellBlend::Exact)
                .expect("positive determinant checked above");
            (e.well_part, e.regularizer_part)
        })
        .collect();
    let w = grid.weights();
    let well: f64 = parts.iter().zip(w).map(|(p, w)| w * p.0).sum();
    let reg: f64 = parts.iter().zip(w).map(|(p, w)| w * p.1).sum();
    EnergyBreakdown { stored: well + reg, well_part: well, regularizer_part: reg, load_part: 0.0, total: well + reg }
}

/// `L(t, y) = ∫ b(t, x)·y(x) dx`.
pub fn loading(t: f64, y: &DeformationField, prog: &LoadingProgram) -> f64 {
    let Some(b) = &prog.body_force else { return 0.0 };
    let grid = y.grid();
    let s = b.profile.value(t);
    if s == 0.0 {
        return 0.0;
    }
    let w = grid.weights();
    (0..grid.node_count())
        .map(|n| w[n] * (b.spatial(&grid.position(n)) * s).dot(&y.values[n]))
        .sum()
}

/// `ℰ(t, y, λ(∇y)) = J(y) − L(t, y)` and the internal state `z = λ(∇y)`.
pub fn total_energy(
    t: f64,
    y: &DeformationField,
    mat: &MaterialSpec,
    prog: &LoadingProgram,
) -> Result<(EnergyBreakdown, InternalStateField), FieldError> {
    let mut e = stored_energy(y, mat);
    let load = loading(t, y, prog);
    e.load_part = load;
    e.total = e.stored - load;
    let z = InternalStateField::from_deformation(y, mat)?;
    Ok((e, z))
}

/// Smoothing parameters: `tau` for the softmin over wells, `eta` for the
/// dissipation norm and distances. Zero means exact.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Smoothing {
    pub tau: f64,
    pub eta: f64,
}

impl Smoothing {
    pub const EXACT: Smoothing = Smoothing { tau: 0.0, eta: 0.0 };

    fn blend(&self) -> WellBlend {
        if self.tau > 0.0 {
            WellBlend::Softmin { tau: self.tau }
        } else {
            WellBlend::Exact
        }
    }
}

/// The incremental objective at a fixed time:
/// `y ↦ J(y) − L(t, y) + 𝒟(λ(∇y), z_prev)`.
#[derive(Debug, Clone)]
pub struct IncrementObjective<'a> {
    grid: Arc<Grid>,
    mat: &'a MaterialSpec,
    body: Vec<Vector3>,
    z_prev: Option<&'a InternalStateField>,
    mask: Vec<bool>,
}

impl<'a> IncrementObjective<'a> {
    pub fn new(
        t: f64,
        y: &DeformationField,
        z_prev: Option<&'a InternalStateField>,
        mat: &'a MaterialSpec,
        prog: &LoadingProgram,
    ) -> Self {
        let grid = y.grid().clone();
        Self {
            body: prog.body_samples(t, &grid),
            grid,
            mat,
            z_prev,
            mask: y.dirichlet_mask.clone(),
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Smoothed value and gradient with constrained components zeroed;
    /// `None` outside the orientation-preserving set.
    pub fn evaluate(&self, values: &[Vector3], smoothing: Smoothing) -> Option<(f64, Vec<Vector3>)> {
        let (v, mut g) = self.assemble(values, smoothing, self.z_prev.is_some())?;
        for (gn, &m) in g.iter_mut().zip(&self.mask) {
            if m {
                *gn = Vector3::zeros();
            }
        }
        Some((v, g))
    }

    /// Smoothed value, `+∞` when infeasible.
    pub fn value(&self, values: &[Vector3], smoothing: Smoothing) -> f64 {
        self.evaluate(values, smoothing).map_or(f64::INFINITY, |(v, _)| v)
    }

    /// Exact value `ℰ + 𝒟` with `z = λ(∇y)`.
    pub fn exact_value(&self, values: &[Vector3]) -> f64 {
        let grid = &self.grid;
        let grad: Vec<Matrix3> = (0..grid.node_count())
            .into_par_iter()
            .map(|n| {
                Matrix3::from_columns(&[
                    grid.diff_at(0, values, n),
                    grid.diff_at(1, values, n),
                    grid.diff_at(2, values, n),
                ])
            })
            .collect();
        let minors = crate::fields::MinorFields::from_gradient(grid, grad);
        if minors.det.iter().any(|d| !(*d > 0.0)) {
            return f64::INFINITY;
        }
        let per_node: Vec<f64> = (0..grid.node_count())
            .into_par_iter()
            .map(|n| {
                let g = &minors.grad[n];
                let mut v = self.mat.hat_density(g, &minors.grad_cof[n], &minors.grad_det[n]);
                if let Some(z) = self.z_prev {
                    v += match self.mat.lambda_fractions(g) {
                        Ok(lam) => self.mat.dissipation_distance(&lam, z.node(n)),
                        Err(_) => f64::INFINITY,
                    };
                }
                v - self.body[n].dot(&values[n])
            })
            .collect();
        per_node.iter().zip(grid.weights()).map(|(v, w)| v * w).sum()
    }

    /// Unmasked value and gradient of the smoothed objective.
    fn assemble(&self, values: &[Vector3], smoothing: Smoothing, with_dissipation: bool) -> Option<(f64, Vec<Vector3>)> {
        let grid = &*self.grid;
        let nn = grid.node_count();
        let w = grid.weights();
        let blend = smoothing.blend();

        let grad: Vec<Matrix3> = (0..nn)
            .into_par_iter()
            .map(|n| {
                Matrix3::from_columns(&[
                    grid.diff_at(0, values, n),
                    grid.diff_at(1, values, n),
                    grid.diff_at(2, values, n),
                ])
            })
            .collect();
        let det: Vec<f64> = grad.iter().map(determinant).collect();
        if det.iter().any(|d| !(*d > 0.0)) {
            return None;
        }
        let cof: Vec<Matrix3> = grad.iter().map(cofactor).collect();

        // Pointwise partial derivatives, already weighted.
        let local: Vec<(f64, Matrix3, Tensor3, Vector3)> = (0..nn)
            .into_par_iter()
            .map(|n| {
                let d1: Tensor3 = std::array::from_fn(|k| grid.diff_at(k, &cof, n));
                let d2 = Vector3::from_fn(|k, _| grid.diff_at(k, &det, n));
                let e = self
                    .mat
                    .density_with_gradient(&grad[n], &d1, &d2, blend)
                    .expect("positive determinant checked above");
                let mut value = e.value - self.body[n].dot(&values[n]);
                let mut d_f = e.d_f;
                if with_dissipation {
                    if let Some(z) = self.z_prev {
                        let (dv, dg) = self.mat.smoothed_dissipation_with_gradient(&grad[n], z.node(n), smoothing.eta);
                        value += dv;
                        d_f += dg;
                    }
                }
                let wn = w[n];
                let mut gc = e.d_grad_cof;
                for m in gc.iter_mut() {
                    *m *= wn;
                }
                (value * wn, d_f * wn, gc, e.d_grad_det * wn)
            })
            .collect();
        let value: f64 = local.iter().map(|l| l.0).sum();

        let a: [Vec<Matrix3>; 3] = std::array::from_fn(|k| local.iter().map(|l| l.2[k]).collect());
        let b: [Vec<f64>; 3] = std::array::from_fn(|k| local.iter().map(|l| l.3[k]).collect());

        let piola: Vec<Matrix3> = (0..nn)
            .into_par_iter()
            .map(|m| {
                let mut cof_bar = Matrix3::zeros();
                let mut det_bar = 0.0;
                for k in 0..3 {
                    cof_bar += grid.diff_transpose_at(k, &a[k], m, Matrix3::zeros());
                    det_bar += grid.diff_transpose_at(k, &b[k], m, 0.0);
                }
                local[m].1 + cofactor_adjoint(&grad[m], &cof_bar) + cof[m] * det_bar
            })
            .collect();
        let cols: [Vec<Vector3>; 3] =
            std::array::from_fn(|k| piola.iter().map(|p| p.column(k).into_owned()).collect());
        let gradient: Vec<Vector3> = (0..nn)
            .into_par_iter()
            .map(|m| {
                let mut g = -self.body[m] * w[m];
                for k in 0..3 {
                    g += grid.diff_transpose_at(k, &cols[k], m, Vector3::zeros());
                }
                g
            })
            .collect();
        Some((value, gradient))
    }

    /// Exact derivative of `J − L` in every nodal value, including
    /// constrained nodes (the reaction forces there).
    pub fn energy_gradient_unmasked(&self, values: &[Vector3]) -> Option<Vec<Vector3>> {
        self.assemble(values, Smoothing::EXACT, false).map(|(_, g)| g)
    }
}

/// Gradient of the smoothed incremental objective, zero on constrained nodes.
pub fn reduced_energy_gradient(
    t: f64,
    y: &DeformationField,
    z_prev: &InternalStateField,
    mat: &MaterialSpec,
    prog: &LoadingProgram,
    smoothing: Smoothing,
) -> Result<Vec<Vector3>, EnergyError> {
    let obj = IncrementObjective::new(t, y, Some(z_prev), mat, prog);
    match obj.evaluate(&y.values, smoothing) {
        Some((_, g)) => Ok(g),
        None => {
            let grad = y.gradient_of_vector_field();
            let (node, det) = grad
                .iter()
                .map(determinant)
                .enumerate()
                .find(|(_, d)| !(*d > 0.0))
                .expect("infeasible state has a bad node");
            Err(EnergyError::BarrierViolation { node, det })
        }
    }
}

/// `∂ₜℰ(t, y)`: minus the load rate, plus the power of the moving
/// constrained nodes against their reaction forces.
pub fn partial_t_energy(t: f64, y: &DeformationField, mat: &MaterialSpec, prog: &LoadingProgram) -> f64 {
    let grid = y.grid();
    let w = grid.weights();
    let mut rate = 0.0;
    if let Some(b) = &prog.body_force {
        let ds = b.profile.derivative(t);
        if ds != 0.0 {
            rate -= (0..grid.node_count())
                .map(|n| w[n] * (b.spatial(&grid.position(n)) * ds).dot(&y.values[n]))
                .sum::<f64>();
        }
    }
    if let Some(m) = &prog.boundary_motion {
        if m.profile.derivative(t) != 0.0 {
            let obj = IncrementObjective::new(t, y, None, mat, prog);
            if let Some(g) = obj.energy_gradient_unmasked(&y.values) {
                rate += (0..grid.node_count())
                    .filter(|&n| y.dirichlet_mask[n])
                    .map(|n| g[n].dot(&m.velocity(t, &grid.position(n))))
                    .sum::<f64>();
            }
        }
    }
    rate
}
