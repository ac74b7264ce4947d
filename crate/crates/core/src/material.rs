//! Constitutive layer: multi-well stored energy, the gradient-polyconvex
//! density, the volume-fraction map and the dissipation distance.
//!
//! The exact objects (`multiwell_energy`, `hat_density`, `lambda_fractions`,
//! `dissipation_distance`) define every certificate. The smoothed variants
//! (softmin over wells, C² positive part inside the distances, pseudo-Huber
//! norm) exist only for the quasi-Newton objective and reduce to the exact
//! ones as their parameters go to zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{
    cofactor, cofactor_adjoint, determinant, right_cauchy_green, tensor3_norm_squared,
    tensor3_zero, Matrix3, Tensor3, Vector3,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaterialError {
    #[error("distances to all well neighbourhoods vanish (sum = {sum:e})")]
    DegenerateDistances { sum: f64 },
    #[error("invalid material: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WellSpec {
    pub label: String,
    /// Symmetric positive definite transformation stretch.
    pub u: Matrix3,
    /// Well depth offset; the well attains `-depth`.
    pub depth: f64,
}

/// Serializable parameter set; [`MaterialSpec::new`] validates it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub wells: Vec<WellParams>,
    pub p: f64,
    pub q: f64,
    pub r: f64,
    pub s: f64,
    /// Coercivity constant; must not exceed `eps_reg`.
    pub c: f64,
    pub eps_reg: f64,
    /// Radius of the neighbourhood balls; `None` picks a quarter of the
    /// smallest pairwise well distance.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub diss_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WellParams {
    pub label: String,
    /// Row-major stretch tensor.
    pub u: [[f64; 3]; 3],
    pub w: f64,
}

impl MaterialParams {
    /// Austenite plus three tetragonal variants `diag` permutations of
    /// `(0.96, 0.96, 1.08)`.
    pub fn default_tetragonal() -> Self {
        let (a, b) = (0.96, 1.08);
        let diag = |d: [f64; 3]| [[d[0], 0.0, 0.0], [0.0, d[1], 0.0], [0.0, 0.0, d[2]]];
        let mut wells = vec![WellParams {
            label: "austenite".into(),
            u: diag([1.0, 1.0, 1.0]),
            w: 0.0,
        }];
        for (k, d) in [[b, a, a], [a, b, a], [a, a, b]].into_iter().enumerate() {
            wells.push(WellParams {
                label: format!("martensite-{}", k + 1),
                u: diag(d),
                w: 0.02,
            });
        }
        Self {
            wells,
            p: 8.0,
            q: 2.0,
            r: 2.0,
            s: 8.5,
            c: 1e-3,
            eps_reg: 1e-3,
            rho: None,
            diss_weights: vec![0.1; 4],
        }
    }
}

/// How the minimum over wells is evaluated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WellBlend {
    Exact,
    /// `-τ log Σ exp(-Wᵢ/τ)`, a lower bound within `τ log(M+1)` of the minimum.
    Softmin { tau: f64 },
}

/// Value and partial derivatives of the density at one point.
#[derive(Debug, Clone)]
pub struct DensityEval {
    pub value: f64,
    pub well_part: f64,
    pub regularizer_part: f64,
    pub d_f: Matrix3,
    pub d_grad_cof: Tensor3,
    pub d_grad_det: Vector3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaterialSpec {
    wells: Vec<WellSpec>,
    u_inv: Vec<Matrix3>,
    c_wells: Vec<Matrix3>,
    p: f64,
    q: f64,
    r: f64,
    s: f64,
    c: f64,
    eps_reg: f64,
    rho: f64,
    diss_weights: Vec<f64>,
    params: MaterialParams,
}

fn is_finite_pos(x: f64) -> bool {
    x.is_finite() && x > 0.0
}

impl MaterialSpec {
    pub fn new(params: MaterialParams) -> Result<Self, MaterialError> {
        let mut errs = Vec::new();
        let m1 = params.wells.len();
        if m1 < 2 {
            errs.push(format!("need at least two wells (M >= 1), got {m1}"));
        }
        for (name, v) in [("p", params.p), ("q", params.q), ("r", params.r)] {
            if !(v.is_finite() && v > 1.0) {
                errs.push(format!("{name} = {v} must exceed 1"));
            }
        }
        for (name, v) in [("s", params.s), ("c", params.c), ("eps_reg", params.eps_reg)] {
            if !is_finite_pos(v) {
                errs.push(format!("{name} = {v} must be positive"));
            }
        }
        if is_finite_pos(params.c) && is_finite_pos(params.eps_reg) && params.c > params.eps_reg {
            errs.push(format!(
                "coercivity constant c = {} exceeds eps_reg = {}; the explicit density only guarantees c <= eps_reg",
                params.c, params.eps_reg
            ));
        }
        if params.diss_weights.len() != m1 {
            errs.push(format!(
                "diss_weights has {} entries, expected M+1 = {m1}",
                params.diss_weights.len()
            ));
        }
        if params.diss_weights.iter().any(|&w| !is_finite_pos(w)) {
            errs.push("diss_weights must all be positive".into());
        }

        let mut wells = Vec::with_capacity(m1);
        let mut u_inv = Vec::with_capacity(m1);
        let mut c_wells = Vec::with_capacity(m1);
        for (i, wp) in params.wells.iter().enumerate() {
            let u = Matrix3::from_fn(|r, c| wp.u[r][c]);
            if (u - u.transpose()).amax() > 1e-12 {
                errs.push(format!("well {i} ({}): U is not symmetric", wp.label));
                continue;
            }
            let eig = nalgebra::SymmetricEigen::new(u);
            if eig.eigenvalues.iter().any(|&l| !(l > 0.0)) {
                errs.push(format!("well {i} ({}): U is not positive definite", wp.label));
                continue;
            }
            if !(wp.w.is_finite() && wp.w >= 0.0) {
                errs.push(format!("well {i} ({}): depth w = {} must be >= 0", wp.label, wp.w));
            }
            let inv = u.try_inverse().expect("positive definite");
            u_inv.push((inv + inv.transpose()) * 0.5);
            c_wells.push(u * u);
            wells.push(WellSpec {
                label: wp.label.clone(),
                u,
                depth: wp.w,
            });
        }

        let mut min_sep = f64::INFINITY;
        for i in 0..c_wells.len() {
            for j in (i + 1)..c_wells.len() {
                min_sep = min_sep.min((c_wells[i] - c_wells[j]).norm());
            }
        }
        let rho = params.rho.unwrap_or(0.25 * min_sep);
        if !is_finite_pos(rho) {
            errs.push(format!("neighbourhood radius rho = {rho} must be positive"));
        } else if c_wells.len() >= 2 && 2.0 * rho >= min_sep {
            errs.push(format!(
                "neighbourhood balls of radius {rho} intersect (smallest well separation {min_sep:.6})"
            ));
        }

        if !errs.is_empty() {
            return Err(MaterialError::Invalid(errs));
        }
        Ok(Self {
            wells,
            u_inv,
            c_wells,
            p: params.p,
            q: params.q,
            r: params.r,
            s: params.s,
            c: params.c,
            eps_reg: params.eps_reg,
            rho,
            diss_weights: params.diss_weights.clone(),
            params,
        })
    }

    pub fn default_tetragonal() -> Self {
        Self::new(MaterialParams::default_tetragonal()).expect("default material is valid")
    }

    pub fn params(&self) -> &MaterialParams {
        &self.params
    }
    pub fn wells(&self) -> &[WellSpec] {
        &self.wells
    }
    /// Number of wells, `M + 1`.
    pub fn well_count(&self) -> usize {
        self.wells.len()
    }
    pub fn exponents(&self) -> (f64, f64, f64, f64) {
        (self.p, self.q, self.r, self.s)
    }
    pub fn coercivity(&self) -> f64 {
        self.c
    }
    pub fn eps_reg(&self) -> f64 {
        self.eps_reg
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn diss_weights(&self) -> &[f64] {
        &self.diss_weights
    }
    pub fn well_cauchy_green(&self, i: usize) -> &Matrix3 {
        &self.c_wells[i]
    }
    pub fn max_depth(&self) -> f64 {
        self.wells.iter().map(|w| w.depth).fold(0.0, f64::max)
    }

    /// Typical energy-density gap between wells, used to scale smoothing.
    pub fn energy_scale(&self) -> f64 {
        let mut scale: f64 = 0.0;
        for i in 0..self.wells.len() {
            for j in 0..self.wells.len() {
                if i != j {
                    scale = scale.max(self.well_energy(i, &self.wells[j].u) + self.wells[i].depth);
                }
            }
        }
        scale.max(self.max_depth()).max(f64::MIN_POSITIVE)
    }

    /// Violations of the exponent regime under which minimizers are injective
    /// everywhere: `p > 6`, `q >= p/(p-1)`, `r > 1`, `s > 2p/(p-6)`.
    pub fn injectivity_regime_violations(&self) -> Vec<String> {
        let (p, q, r, s) = (self.p, self.q, self.r, self.s);
        let mut v = Vec::new();
        if !(p > 6.0) {
            v.push(format!("p = {p} must exceed 6 for injectivity certificates"));
        } else {
            let s_min = 2.0 * p / (p - 6.0);
            if !(s > s_min) {
                v.push(format!("s = {s} must exceed 2p/(p-6) = {s_min}"));
            }
        }
        if p > 1.0 {
            let q_min = p / (p - 1.0);
            if !(q >= q_min) {
                v.push(format!("q = {q} must be at least p/(p-1) = {q_min}"));
            }
        }
        if !(r > 1.0) {
            v.push(format!("r = {r} must exceed 1"));
        }
        v
    }

    /// `φ(C) = ‖C − I‖²`, zero exactly on O(3).
    pub fn base_density(&self, f: &Matrix3) -> f64 {
        base_density(f)
    }

    /// `Wᵢ(F) = φ(Uᵢ⁻¹ C Uᵢ⁻¹) − wᵢ`.
    pub fn well_energy(&self, i: usize, f: &Matrix3) -> f64 {
        let b = &self.u_inv[i];
        let e = b * right_cauchy_green(f) * b - Matrix3::identity();
        e.norm_squared() - self.wells[i].depth
    }

    fn well_energy_with_gradient(&self, i: usize, f: &Matrix3) -> (f64, Matrix3) {
        let b = &self.u_inv[i];
        let e = b * right_cauchy_green(f) * b - Matrix3::identity();
        let value = e.norm_squared() - self.wells[i].depth;
        (value, 4.0 * f * (b * e * b))
    }

    /// Minimum over wells; ties go to the smallest index.
    pub fn multiwell_energy(&self, f: &Matrix3) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.wells.len() {
            let w = self.well_energy(i, f);
            if w < best.0 {
                best = (w, i);
            }
        }
        best
    }

    /// The gradient-polyconvex density; `+∞` when `det F <= 0`.
    pub fn hat_density(&self, f: &Matrix3, grad_cof: &Tensor3, grad_det: &Vector3) -> f64 {
        let det = determinant(f);
        if !(det > 0.0) {
            return f64::INFINITY;
        }
        self.multiwell_energy(f).0 + self.regularizer(f, det, grad_cof, grad_det)
    }

    fn regularizer(&self, f: &Matrix3, det: f64, grad_cof: &Tensor3, grad_det: &Vector3) -> f64 {
        let cof = cofactor(f);
        self.eps_reg
            * (f.norm_squared().powf(0.5 * self.p)
                + cof.norm_squared().powf(0.5 * self.q)
                + det.powf(self.r)
                + det.powf(-self.s)
                + tensor3_norm_squared(grad_cof).powf(0.5 * self.q)
                + grad_det.norm_squared().powf(0.5 * self.r))
    }

    /// The lower bound in the coercivity condition,
    /// `c(|F|ᵖ + |cof F|^q + detʳ + det⁻ˢ + |Δ₁|^q + |Δ₂|ʳ)`.
    pub fn coercivity_bound(&self, f: &Matrix3, grad_cof: &Tensor3, grad_det: &Vector3) -> f64 {
        let det = determinant(f);
        if !(det > 0.0) {
            return f64::INFINITY;
        }
        self.c / self.eps_reg * self.regularizer(f, det, grad_cof, grad_det)
    }

    /// Density with its partial derivatives, or `None` outside `det F > 0`.
    pub fn density_with_gradient(
        &self,
        f: &Matrix3,
        grad_cof: &Tensor3,
        grad_det: &Vector3,
        blend: WellBlend,
    ) -> Option<DensityEval> {
        let det = determinant(f);
        if !(det > 0.0) {
            return None;
        }
        let n = self.wells.len();
        let (well_part, d_well) = match blend {
            WellBlend::Exact => {
                let (_, i) = self.multiwell_energy(f);
                self.well_energy_with_gradient(i, f)
            }
            WellBlend::Softmin { tau } => {
                let mut vals = [0.0; 16];
                let mut grads = [Matrix3::zeros(); 16];
                let mut vals_vec;
                let mut grads_vec;
                let (vals, grads): (&mut [f64], &mut [Matrix3]) = if n <= 16 {
                    (&mut vals[..n], &mut grads[..n])
                } else {
                    vals_vec = vec![0.0; n];
                    grads_vec = vec![Matrix3::zeros(); n];
                    (&mut vals_vec[..], &mut grads_vec[..])
                };
                let mut wmin = f64::INFINITY;
                for i in 0..n {
                    let (v, g) = self.well_energy_with_gradient(i, f);
                    vals[i] = v;
                    grads[i] = g;
                    wmin = wmin.min(v);
                }
                let mut sum = 0.0;
                let mut dw = Matrix3::zeros();
                for i in 0..n {
                    let e = (-(vals[i] - wmin) / tau).exp();
                    sum += e;
                    dw += grads[i] * e;
                }
                (wmin - tau * sum.ln(), dw / sum)
            }
        };

        let eps = self.eps_reg;
        let cof = cofactor(f);
        let f2 = f.norm_squared();
        let c2 = cof.norm_squared();
        let g1 = tensor3_norm_squared(grad_cof);
        let g2 = grad_det.norm_squared();
        let (p, q, r, s) = (self.p, self.q, self.r, self.s);

        let reg = eps
            * (f2.powf(0.5 * p)
                + c2.powf(0.5 * q)
                + det.powf(r)
                + det.powf(-s)
                + g1.powf(0.5 * q)
                + g2.powf(0.5 * r));

        let mut d_f = d_well;
        d_f += f * (eps * p * f2.powf(0.5 * p - 1.0));
        if c2 > 0.0 {
            d_f += cofactor_adjoint(f, &cof) * (eps * q * c2.powf(0.5 * q - 1.0));
        }
        d_f += cof * (eps * (r * det.powf(r - 1.0) - s * det.powf(-s - 1.0)));

        let mut d_grad_cof = tensor3_zero();
        if g1 > 0.0 {
            let k = eps * q * g1.powf(0.5 * q - 1.0);
            for a in 0..3 {
                d_grad_cof[a] = grad_cof[a] * k;
            }
        }
        let d_grad_det = if g2 > 0.0 {
            grad_det * (eps * r * g2.powf(0.5 * r - 1.0))
        } else {
            Vector3::zeros()
        };

        Some(DensityEval {
            value: well_part + reg,
            well_part,
            regularizer_part: reg,
            d_f,
            d_grad_cof,
            d_grad_det,
        })
    }

    /// Exact distances `max(0, ‖C − Cᵢ‖ − ρ)` to every neighbourhood.
    pub fn neighbourhood_distances(&self, f: &Matrix3) -> Vec<f64> {
        let c = right_cauchy_green(f);
        self.c_wells
            .iter()
            .map(|ci| ((c - ci).norm() - self.rho).max(0.0))
            .collect()
    }

    /// Volume fractions
    /// `λʲ = (1/M)(1 − dist(C, 𝒩(Cⱼ)) / Σᵢ dist(C, 𝒩(Cᵢ)))`.
    ///
    /// At a well point the own fraction is `1/M`, not 1; this is the formula
    /// as stated. The result is renormalized so it sums to one exactly up to
    /// a final rounding.
    pub fn lambda_fractions(&self, f: &Matrix3) -> Result<Vec<f64>, MaterialError> {
        let d = self.neighbourhood_distances(f);
        let sum: f64 = d.iter().sum();
        if !(sum >= 1e-14) {
            return Err(MaterialError::DegenerateDistances { sum });
        }
        let m = (self.wells.len() - 1) as f64;
        let mut lam: Vec<f64> = d.iter().map(|dj| ((1.0 - dj / sum) / m).clamp(0.0, 1.0)).collect();
        let total: f64 = lam.iter().sum();
        for l in lam.iter_mut() {
            *l /= total;
        }
        Ok(lam)
    }

    /// Weighted ℓ¹ distance `Σⱼ κⱼ |z1ⱼ − z2ⱼ|`.
    pub fn dissipation_distance(&self, z1: &[f64], z2: &[f64]) -> f64 {
        z1.iter()
            .zip(z2)
            .zip(&self.diss_weights)
            .map(|((a, b), w)| w * (a - b).abs())
            .sum()
    }

    /// Smoothed dissipation `Σⱼ κⱼ ψ_η(λ_η,ʲ(F) − zⱼ)` and its derivative in
    /// `F`. `eta = 0` evaluates the exact expression (with a subgradient).
    pub fn smoothed_dissipation_with_gradient(
        &self,
        f: &Matrix3,
        z_prev: &[f64],
        eta: f64,
    ) -> (f64, Matrix3) {
        let n = self.wells.len();
        let c = right_cauchy_green(f);
        let mut dist = [0.0; 16];
        let mut ddist = [0.0; 16];
        let mut diff = [Matrix3::zeros(); 16];
        assert!(n <= 16, "smoothed dissipation supports at most 16 wells");
        let mut sum = 0.0;
        for i in 0..n {
            diff[i] = c - self.c_wells[i];
            let norm = diff[i].norm();
            let (v, dv) = smooth_positive_part(norm - self.rho, eta);
            dist[i] = v;
            ddist[i] = if dv != 0.0 && norm > 0.0 { dv / norm } else { 0.0 };
            sum += v;
        }
        if !(sum > 0.0) {
            return (0.0, Matrix3::zeros());
        }
        let m = (n - 1) as f64;
        let mut value = 0.0;
        let mut g = [0.0; 16];
        let mut gd = 0.0;
        for j in 0..n {
            let lam = (1.0 - dist[j] / sum) / m;
            let (psi, dpsi) = pseudo_huber(lam - z_prev[j], eta);
            value += self.diss_weights[j] * psi;
            g[j] = self.diss_weights[j] * dpsi;
            gd += g[j] * dist[j];
        }
        let mut d_c = Matrix3::zeros();
        for i in 0..n {
            let gamma = -(g[i] / sum - gd / (sum * sum)) / m;
            if ddist[i] != 0.0 && gamma != 0.0 {
                d_c += diff[i] * (gamma * ddist[i]);
            }
        }
        (value, 2.0 * f * d_c)
    }

    /// Smoothed volume fractions (no renormalization).
    pub fn smoothed_lambda(&self, f: &Matrix3, eta: f64) -> Vec<f64> {
        let c = right_cauchy_green(f);
        let d: Vec<f64> = self
            .c_wells
            .iter()
            .map(|ci| smooth_positive_part((c - ci).norm() - self.rho, eta).0)
            .collect();
        let sum: f64 = d.iter().sum();
        let m = (self.wells.len() - 1) as f64;
        d.iter().map(|dj| (1.0 - dj / sum) / m).collect()
    }
}

pub fn base_density(f: &Matrix3) -> f64 {
    (right_cauchy_green(f) - Matrix3::identity()).norm_squared()
}

/// `T · cof F`: first Piola–Kirchhoff stress from a Cauchy stress sample.
pub fn piola_from_cauchy(cauchy: &Matrix3, cof_f: &Matrix3) -> Matrix3 {
    cauchy * cof_f
}

/// C² smoothing of `max(0, x)`: zero for `x <= 0`, cubic blend on
/// `(0, 2η)`, and `x − η` beyond. `eta = 0` gives the exact positive part.
pub fn smooth_positive_part(x: f64, eta: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if eta <= 0.0 {
        (x, 1.0)
    } else if x < eta {
        (x * x * x / (6.0 * eta * eta), x * x / (2.0 * eta * eta))
    } else if x < 2.0 * eta {
        let u = 2.0 * eta - x;
        (
            x - eta + u * u * u / (6.0 * eta * eta),
            1.0 - u * u / (2.0 * eta * eta),
        )
    } else {
        (x - eta, 1.0)
    }
}

/// `sqrt(r² + η²) − η` and its derivative; `eta = 0` gives `|r|`.
pub fn pseudo_huber(r: f64, eta: f64) -> (f64, f64) {
    if eta <= 0.0 {
        return (r.abs(), if r > 0.0 { 1.0 } else if r < 0.0 { -1.0 } else { 0.0 });
    }
    let s = (r * r + eta * eta).sqrt();
    (s - eta, r / s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::rotation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mat() -> MaterialSpec {
        MaterialSpec::default_tetragonal()
    }

    #[test]
    fn default_material_satisfies_injectivity_regime() {
        let m = mat();
        assert!(m.injectivity_regime_violations().is_empty());
        assert_eq!(m.well_count(), 4);
        // a quarter of the smallest separation, here |C1 - I|
        let c1 = m.well_cauchy_green(1);
        let sep = (c1 - Matrix3::identity()).norm();
        assert!((m.rho() - 0.25 * sep).abs() < 1e-15);
    }

    #[test]
    fn base_density_examples() {
        let m = mat();
        assert_eq!(m.base_density(&Matrix3::identity()), 0.0);
        let r = rotation(&Vector3::new(1.0, 2.0, 3.0), 0.7);
        assert!(m.base_density(&r) < 1e-28);
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        assert!((m.base_density(&d) - 9.0).abs() < 1e-14);
    }

    #[test]
    fn well_energy_examples() {
        let m = mat();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..m.well_count() {
            let u = m.wells()[i].u;
            let w = m.wells()[i].depth;
            assert!((m.well_energy(i, &u) + w).abs() < 1e-14);
            let rot = rotation(
                &Vector3::new(rng.gen(), rng.gen(), rng.gen::<f64>() + 0.1),
                rng.gen_range(-3.0..3.0),
            );
            assert!((m.well_energy(i, &(rot * u)) + w).abs() < 1e-13);
        }
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        assert!((m.well_energy(0, &d) - 9.0).abs() < 1e-14);
    }

    #[test]
    fn multiwell_examples() {
        let m = mat();
        let (v, i) = m.multiwell_energy(&m.wells()[1].u);
        assert_eq!(i, 1);
        assert!((v + 0.02).abs() < 1e-14);
        assert_eq!(m.multiwell_energy(&Matrix3::identity()), (0.0, 0));

        // segment between two equal-depth variants: strictly above the well depth
        let (u1, u2) = (m.wells()[1].u, m.wells()[2].u);
        for k in 1..20 {
            let s = k as f64 / 20.0;
            let f = u1 * (1.0 - s) + u2 * s;
            assert!(m.multiwell_energy(&f).0 > -0.02);
        }
    }

    #[test]
    fn hat_density_at_identity() {
        let m = mat();
        let (p, q, _, _) = m.exponents();
        let v = m.hat_density(&Matrix3::identity(), &tensor3_zero(), &Vector3::zeros());
        let expected = m.eps_reg() * (3f64.powf(p / 2.0) + 3f64.powf(q / 2.0) + 2.0);
        assert!((v - expected).abs() < 1e-14);
        let singular = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0);
        assert_eq!(m.hat_density(&singular, &tensor3_zero(), &Vector3::zeros()), f64::INFINITY);
        let flipped = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert_eq!(m.hat_density(&flipped, &tensor3_zero(), &Vector3::zeros()), f64::INFINITY);
    }

    #[test]
    fn density_gradient_matches_finite_differences() {
        let m = mat();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for blend in [WellBlend::Exact, WellBlend::Softmin { tau: 1e-3 }] {
            for _ in 0..30 {
                let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
                let d1: Tensor3 =
                    std::array::from_fn(|_| Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
                let d2 = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                let e = m.density_with_gradient(&f, &d1, &d2, blend).unwrap();
                let val = |f: &Matrix3, d1: &Tensor3, d2: &Vector3| {
                    m.density_with_gradient(f, d1, d2, blend).unwrap().value
                };
                let h = 1e-6;
                for a in 0..3 {
                    for b in 0..3 {
                        let mut fp = f;
                        let mut fm = f;
                        fp[(a, b)] += h;
                        fm[(a, b)] -= h;
                        let fd = (val(&fp, &d1, &d2) - val(&fm, &d1, &d2)) / (2.0 * h);
                        assert!((fd - e.d_f[(a, b)]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", e.d_f[(a, b)]);
                        for k in 0..3 {
                            let mut p = d1;
                            let mut mm = d1;
                            p[k][(a, b)] += h;
                            mm[k][(a, b)] -= h;
                            let fd = (val(&f, &p, &d2) - val(&f, &mm, &d2)) / (2.0 * h);
                            assert!((fd - e.d_grad_cof[k][(a, b)]).abs() < 1e-7 * (1.0 + fd.abs()));
                        }
                    }
                    let mut p = d2;
                    let mut mm = d2;
                    p[a] += h;
                    mm[a] -= h;
                    let fd = (val(&f, &d1, &p) - val(&f, &d1, &mm)) / (2.0 * h);
                    assert!((fd - e.d_grad_det[a]).abs() < 1e-7 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn softmin_is_a_tight_lower_bound() {
        let m = mat();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tau = 1e-4;
        for _ in 0..100 {
            let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.1..0.1));
            let exact = m.multiwell_energy(&f).0;
            let soft = m
                .density_with_gradient(&f, &tensor3_zero(), &Vector3::zeros(), WellBlend::Softmin { tau })
                .unwrap()
                .well_part;
            assert!(soft <= exact + 1e-15);
            assert!(exact - soft <= tau * (m.well_count() as f64).ln() + 1e-15);
        }
    }

    #[test]
    fn lambda_at_a_well_point() {
        let m = mat();
        let u1 = m.wells()[1].u;
        let lam = m.lambda_fractions(&u1).unwrap();
        let d = m.neighbourhood_distances(&u1);
        assert_eq!(d[1], 0.0);
        let sum: f64 = d.iter().sum();
        let mm = (m.well_count() - 1) as f64;
        assert!((lam[1] - 1.0 / mm).abs() < 1e-15);
        for i in [0, 2, 3] {
            assert!((lam[i] - (1.0 - d[i] / sum) / mm).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothed_lambda_reduces_to_exact() {
        let m = mat();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.15..0.15));
            let exact = m.lambda_fractions(&f).unwrap();
            let smooth = m.smoothed_lambda(&f, 0.0);
            for (a, b) in exact.iter().zip(&smooth) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn smoothed_dissipation_gradient_matches_finite_differences() {
        let m = mat();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let eta = 1e-3;
        for _ in 0..40 {
            let f = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.12..0.12));
            let g = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.gen_range(-0.12..0.12));
            let z = m.lambda_fractions(&g).unwrap();
            let (_, d) = m.smoothed_dissipation_with_gradient(&f, &z, eta);
            let h = 1e-7;
            for a in 0..3 {
                for b in 0..3 {
                    let mut fp = f;
                    let mut fm = f;
                    fp[(a, b)] += h;
                    fm[(a, b)] -= h;
                    let fd = (m.smoothed_dissipation_with_gradient(&fp, &z, eta).0
                        - m.smoothed_dissipation_with_gradient(&fm, &z, eta).0)
                        / (2.0 * h);
                    assert!((fd - d[(a, b)]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", d[(a, b)]);
                }
            }
        }
    }

    #[test]
    fn dissipation_examples() {
        let m = MaterialSpec::new(MaterialParams {
            diss_weights: vec![1.0; 4],
            ..MaterialParams::default_tetragonal()
        })
        .unwrap();
        let z = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(m.dissipation_distance(&z, &z), 0.0);
        assert_eq!(m.dissipation_distance(&[1.0, 0.0, 0.0, 0.0], &[0.0, 1.0, 0.0, 0.0]), 2.0);
    }

    #[test]
    fn piola_examples() {
        assert_eq!(piola_from_cauchy(&Matrix3::zeros(), &Matrix3::identity()), Matrix3::zeros());
        let i = Matrix3::identity();
        assert_eq!(piola_from_cauchy(&i, &cofactor(&i)), i);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let c = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let s = piola_from_cauchy(&t, &c);
        for i in 0..3 {
            for j in 0..3 {
                let direct: f64 = (0..3).map(|k| t[(i, k)] * c[(k, j)]).sum();
                assert!((s[(i, j)] - direct).abs() < 1e-15);
            }
        }
        let c2 = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        assert!((piola_from_cauchy(&t, &(c + 2.0 * c2)) - (s + 2.0 * piola_from_cauchy(&t, &c2))).amax() < 1e-14);
    }

    #[test]
    fn invalid_materials_report_every_violation() {
        let mut p = MaterialParams::default_tetragonal();
        p.q = 0.5;
        p.s = -1.0;
        p.diss_weights = vec![1.0; 2];
        p.rho = Some(10.0);
        match MaterialSpec::new(p) {
            Err(MaterialError::Invalid(v)) => assert!(v.len() >= 4, "{v:?}"),
            other => panic!("expected invalid, got {other:?}"),
        }
        let mut p = MaterialParams::default_tetragonal();
        p.wells[1].u[0][1] = 0.1;
        assert!(MaterialSpec::new(p).is_err());
    }

    #[test]
    fn injectivity_regime_violation_cites_bound() {
        let mut p = MaterialParams::default_tetragonal();
        p.s = 5.0;
        let m = MaterialSpec::new(p).unwrap();
        let v = m.injectivity_regime_violations();
        assert_eq!(v.len(), 1);
        assert!(v[0].contains("2p/(p-6) = 8"), "{}", v[0]);
    }

    #[test]
    fn smoothing_primitives() {
        for eta in [1e-3, 0.5] {
            let h = 1e-7;
            for &x in &[-1.0, 0.3 * eta, 1.3 * eta, 3.0 * eta] {
                let (_, d) = smooth_positive_part(x, eta);
                let fd = (smooth_positive_part(x + h, eta).0 - smooth_positive_part(x - h, eta).0) / (2.0 * h);
                assert!((fd - d).abs() < 1e-6);
            }
            assert!((smooth_positive_part(eta, eta).0 - eta / 6.0).abs() < 1e-15);
            assert!((smooth_positive_part(2.0 * eta, eta).0 - eta).abs() < 1e-15);
        }
        assert_eq!(pseudo_huber(0.0, 1e-4), (0.0, 0.0));
        assert_eq!(pseudo_huber(-2.0, 0.0), (2.0, -1.0));
    }
}
