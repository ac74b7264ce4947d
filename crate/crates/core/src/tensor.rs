//! Exact 3×3 tensor algebra: minors, Cramer inverse, polar decomposition and
//! the derivatives of the minor maps.
//!
//! Everything here is a pure function of its arguments.

use nalgebra::SymmetricEigen;
use thiserror::Error;

pub type Matrix3 = nalgebra::Matrix3<f64>;
pub type Vector3 = nalgebra::Vector3<f64>;

/// A third-order tensor stored as three matrices, one per spatial derivative
/// direction: `t[k]` holds `∂_k` of a matrix-valued field.
pub type Tensor3 = [Matrix3; 3];

/// Default floor on `|det F|` below which inversion is refused.
pub const SINGULARITY_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum TensorError {
    #[error("matrix is singular to working precision (det = {det:e})")]
    SingularMatrix { det: f64 },
    #[error("determinant must be positive, got {det:e}")]
    NonPositiveDeterminant { det: f64 },
}

#[inline]
fn cyc(i: usize) -> (usize, usize) {
    ((i + 1) % 3, (i + 2) % 3)
}

/// Matrix of signed 2×2 minors. Built from the minors directly, so it is a
/// polynomial in the entries and stays defined for singular `F`.
pub fn cofactor(f: &Matrix3) -> Matrix3 {
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        let (i1, i2) = cyc(i);
        for j in 0..3 {
            let (j1, j2) = cyc(j);
            c[(i, j)] = f[(i1, j1)] * f[(i2, j2)] - f[(i1, j2)] * f[(i2, j1)];
        }
    }
    c
}

pub fn determinant(f: &Matrix3) -> f64 {
    f[(0, 0)] * (f[(1, 1)] * f[(2, 2)] - f[(1, 2)] * f[(2, 1)])
        - f[(0, 1)] * (f[(1, 0)] * f[(2, 2)] - f[(1, 2)] * f[(2, 0)])
        + f[(0, 2)] * (f[(1, 0)] * f[(2, 1)] - f[(1, 1)] * f[(2, 0)])
}

/// `F⁻¹ = (cof F)ᵀ / det F`, refusing when `|det F|` is below
/// [`SINGULARITY_FLOOR`].
pub fn cramer_inverse(f: &Matrix3) -> Result<Matrix3, TensorError> {
    cramer_inverse_with_floor(f, SINGULARITY_FLOOR)
}

pub fn cramer_inverse_with_floor(f: &Matrix3, floor: f64) -> Result<Matrix3, TensorError> {
    let det = determinant(f);
    if !(det.abs() >= floor) {
        return Err(TensorError::SingularMatrix { det });
    }
    Ok(cofactor(f).transpose() / det)
}

/// `C = FᵀF`, computed on the upper triangle and mirrored so the result is
/// exactly symmetric.
pub fn right_cauchy_green(f: &Matrix3) -> Matrix3 {
    let mut c = Matrix3::zeros();
    for i in 0..3 {
        for j in i..3 {
            let v = f[(0, i)] * f[(0, j)] + f[(1, i)] * f[(1, j)] + f[(2, i)] * f[(2, j)];
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    c
}

/// Polar decomposition `F = R U` with `U = sqrt(FᵀF)` obtained from the
/// symmetric eigendecomposition of `C`.
pub fn polar_decompose(f: &Matrix3) -> Result<(Matrix3, Matrix3), TensorError> {
    let det = determinant(f);
    if !(det > 0.0) {
        return Err(TensorError::NonPositiveDeterminant { det });
    }
    let eig = SymmetricEigen::new(right_cauchy_green(f));
    let q = eig.eigenvectors;
    let mut sqrt_diag = Matrix3::zeros();
    let mut inv_sqrt_diag = Matrix3::zeros();
    for k in 0..3 {
        let lam = eig.eigenvalues[k];
        if !(lam > 0.0) {
            return Err(TensorError::SingularMatrix { det });
        }
        sqrt_diag[(k, k)] = lam.sqrt();
        inv_sqrt_diag[(k, k)] = 1.0 / lam.sqrt();
    }
    let u = symmetrize(&(q * sqrt_diag * q.transpose()));
    let u_inv = symmetrize(&(q * inv_sqrt_diag * q.transpose()));
    Ok((f * u_inv, u))
}

pub fn symmetrize(a: &Matrix3) -> Matrix3 {
    (a + a.transpose()) * 0.5
}

/// `d/dε cof(F + εH)` at `ε = 0`.
pub fn cofactor_directional_derivative(f: &Matrix3, h: &Matrix3) -> Matrix3 {
    let mut d = Matrix3::zeros();
    for i in 0..3 {
        let (i1, i2) = cyc(i);
        for j in 0..3 {
            let (j1, j2) = cyc(j);
            d[(i, j)] = h[(i1, j1)] * f[(i2, j2)] + f[(i1, j1)] * h[(i2, j2)]
                - h[(i1, j2)] * f[(i2, j1)]
                - f[(i1, j2)] * h[(i2, j1)];
        }
    }
    d
}

/// `∂ det / ∂F = cof F`.
pub fn determinant_gradient(f: &Matrix3) -> Matrix3 {
    cofactor(f)
}

/// Gradient with respect to `F` of `F ↦ ⟨A, cof F⟩`, i.e. the adjoint of
/// [`cofactor_directional_derivative`] applied to `A`.
pub fn cofactor_adjoint(f: &Matrix3, a: &Matrix3) -> Matrix3 {
    let mut g = Matrix3::zeros();
    for i in 0..3 {
        let (i1, i2) = cyc(i);
        for j in 0..3 {
            let (j1, j2) = cyc(j);
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            g[(i1, j1)] += aij * f[(i2, j2)];
            g[(i2, j2)] += aij * f[(i1, j1)];
            g[(i1, j2)] -= aij * f[(i2, j1)];
            g[(i2, j1)] -= aij * f[(i1, j2)];
        }
    }
    g
}

pub fn frobenius_dot(a: &Matrix3, b: &Matrix3) -> f64 {
    a.component_mul(b).sum()
}

pub fn tensor3_zero() -> Tensor3 {
    [Matrix3::zeros(); 3]
}

pub fn tensor3_norm_squared(t: &Tensor3) -> f64 {
    t.iter().map(|m| m.norm_squared()).sum()
}

pub fn tensor3_norm(t: &Tensor3) -> f64 {
    tensor3_norm_squared(t).sqrt()
}

/// Rotation about a unit axis by `angle` (Rodrigues).
pub fn rotation(axis: &Vector3, angle: f64) -> Matrix3 {
    let n = axis.normalize();
    let k = Matrix3::new(0.0, -n.z, n.y, n.z, 0.0, -n.x, -n.y, n.x, 0.0);
    Matrix3::identity() + k * angle.sin() + k * k * (1.0 - angle.cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng) -> Matrix3 {
        Matrix3::from_fn(|_, _| rng.gen_range(-2.0..2.0))
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3 {
        let axis = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        rotation(&(axis + Vector3::new(1e-3, 0.0, 0.0)), rng.gen_range(-3.0..3.0))
    }

    #[test]
    fn cofactor_of_identity_and_diagonal() {
        assert_eq!(cofactor(&Matrix3::identity()), Matrix3::identity());
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 3.0, 5.0));
        assert_eq!(cofactor(&d), Matrix3::from_diagonal(&Vector3::new(15.0, 10.0, 6.0)));
    }

    #[test]
    fn cofactor_matches_lower_triangular_example() {
        // rows (1,0,0; a,f,0; b,0,g) -> first row (fg, -a g, -f b), then diag(g, f)
        let (a, f, b, g) = (0.7, 1.3, -0.4, 0.9);
        let m = Matrix3::new(1.0, 0.0, 0.0, a, f, 0.0, b, 0.0, g);
        let c = cofactor(&m);
        let expected = Matrix3::new(f * g, -a * g, -f * b, 0.0, g, 0.0, 0.0, 0.0, f);
        assert!((c - expected).norm() < 1e-15);
        assert!((determinant(&m) - f * g).abs() < 1e-15);
    }

    #[test]
    fn cramer_inverse_cases() {
        assert_eq!(cramer_inverse(&Matrix3::identity()).unwrap(), Matrix3::identity());
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        assert_eq!(
            cramer_inverse(&d).unwrap(),
            Matrix3::from_diagonal(&Vector3::new(0.5, 1.0, 1.0))
        );
        let singular = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0);
        assert!(matches!(cramer_inverse(&singular), Err(TensorError::SingularMatrix { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tested = 0;
        while tested < 200 {
            let f = random_matrix(&mut rng);
            if determinant(&f) <= 0.1 {
                continue;
            }
            let inv = cramer_inverse(&f).unwrap();
            assert!((f * inv - Matrix3::identity()).norm() <= 1e-12 * (1.0 + f.norm() * inv.norm()));
            tested += 1;
        }
    }

    #[test]
    fn cauchy_green_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let f = random_matrix(&mut rng);
            let r = random_rotation(&mut rng);
            let c = right_cauchy_green(&f);
            assert_eq!(c, c.transpose());
            assert!((right_cauchy_green(&(r * f)) - c).amax() <= 1e-13 * (1.0 + c.amax()));
            assert!((right_cauchy_green(&r) - Matrix3::identity()).amax() < 1e-13);
        }
    }

    #[test]
    fn polar_decomposition_recovers_factors() {
        let d = Matrix3::from_diagonal(&Vector3::new(2.0, 1.0, 1.0));
        let (r, u) = polar_decompose(&d).unwrap();
        assert!((r - Matrix3::identity()).amax() < 1e-14);
        assert!((u - d).amax() < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let r0 = random_rotation(&mut rng);
            let (r, u) = polar_decompose(&r0).unwrap();
            assert!((r - r0).amax() < 1e-12);
            assert!((u - Matrix3::identity()).amax() < 1e-12);

            let a = random_matrix(&mut rng);
            let u0 = a.transpose() * a + Matrix3::identity() * 0.5;
            let f = r0 * u0;
            let (r, u) = polar_decompose(&f).unwrap();
            assert!((r - r0).amax() < 1e-9);
            assert!((u - u0).amax() < 1e-9);
            assert!((determinant(&r) - 1.0).abs() < 1e-10);
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-10);
            assert!((r * u - f).norm() <= 1e-10 * f.norm());
        }

        let reflect = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(matches!(
            polar_decompose(&reflect),
            Err(TensorError::NonPositiveDeterminant { .. })
        ));
    }

    #[test]
    fn cofactor_derivative_examples() {
        let i = Matrix3::identity();
        assert!((cofactor_directional_derivative(&i, &i) - 2.0 * i).amax() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_matrix(&mut rng);
        assert_eq!(cofactor_directional_derivative(&f, &Matrix3::zeros()), Matrix3::zeros());
    }

    #[test]
    fn cofactor_adjoint_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let f = random_matrix(&mut rng);
            let h = random_matrix(&mut rng);
            let a = random_matrix(&mut rng);
            let lhs = frobenius_dot(&a, &cofactor_directional_derivative(&f, &h));
            let rhs = frobenius_dot(&cofactor_adjoint(&f, &a), &h);
            assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn minor_equivariance_under_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let f = random_matrix(&mut rng);
            let r = random_rotation(&mut rng);
            let lhs = cofactor(&(r * f));
            let rhs = r * cofactor(&f);
            assert!((lhs - rhs).amax() <= 1e-12 * (1.0 + lhs.amax()));
        }
    }
}
