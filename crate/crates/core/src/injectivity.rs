//! Discrete injectivity certificates: the image-volume inequality, the
//! distortion integrability norm, and a cell-overlap search.
//!
//! Deformed cells are treated as piecewise-affine hexahedra, each split into
//! six tetrahedra along the main diagonal.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};

use crate::fields::{integrate, lp_norm, DeformationField, FieldError};
use crate::grid::Grid;
use crate::tensor::{determinant, Matrix3, Vector3};

/// Corner offsets of the six tetrahedra of a unit cell; bit `a` of each
/// entry is the offset along axis `a`.
const CELL_TETS: [[u8; 4]; 6] = [
    [0b000, 0b001, 0b011, 0b111],
    [0b000, 0b001, 0b101, 0b111],
    [0b000, 0b010, 0b011, 0b111],
    [0b000, 0b010, 0b110, 0b111],
    [0b000, 0b100, 0b101, 0b111],
    [0b000, 0b100, 0b110, 0b111],
];

type Tet = [Vector3; 4];

fn cell_corner(grid: &Grid, cell: [usize; 3], bits: u8) -> usize {
    grid.index(
        cell[0] + (bits & 1) as usize,
        cell[1] + ((bits >> 1) & 1) as usize,
        cell[2] + ((bits >> 2) & 1) as usize,
    )
}

fn cell_coords(grid: &Grid, c: usize) -> [usize; 3] {
    let [nx, ny, _] = grid.nodes_per_axis();
    let (cx, cy) = (nx - 1, ny - 1);
    [c % cx, (c / cx) % cy, c / (cx * cy)]
}

fn cell_tets(y: &DeformationField, cell: [usize; 3]) -> [Tet; 6] {
    let g = y.grid();
    std::array::from_fn(|t| std::array::from_fn(|v| y.values[cell_corner(g, cell, CELL_TETS[t][v])]))
}

fn bbox(points: impl IntoIterator<Item = Vector3>) -> (Vector3, Vector3) {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(&p);
        hi = hi.sup(&p);
    }
    (lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CiarletNecasReport {
    pub det_integral: f64,
    pub image_volume: f64,
    /// `det_integral − image_volume`; positive values mean the image is
    /// covered more than once.
    pub residual: f64,
    pub voxel_edge: f64,
}

/// `∫ det ∇y − |y(Ω)|` with the image volume measured by voxel coverage.
/// `voxels_per_cell` sets the voxel edge relative to the mean deformed
/// cell size (4 by default).
pub fn ciarlet_necas_residual(y: &DeformationField, voxels_per_cell: f64) -> Result<CiarletNecasReport, FieldError> {
    y.check_orientation()?;
    let grid = y.grid();
    let dets: Vec<f64> = y.gradient_of_vector_field().iter().map(determinant).collect();
    let det_integral = integrate(&dets, grid);

    let edge = (det_integral / grid.cell_count() as f64).cbrt() / voxels_per_cell;
    let (lo, hi) = bbox(y.values.iter().copied());
    let counts: [usize; 3] = std::array::from_fn(|a| (((hi[a] - lo[a]) / edge) - 1e-9).ceil().max(1.0) as usize);
    let total = counts[0] * counts[1] * counts[2];
    let mut covered = vec![false; total];

    let [nx, ny, nz] = grid.nodes_per_axis();
    for ck in 0..nz - 1 {
        for cj in 0..ny - 1 {
            for ci in 0..nx - 1 {
                for tet in cell_tets(y, [ci, cj, ck]) {
                    rasterize_tet(&tet, lo, edge, counts, &mut covered);
                }
            }
        }
    }
    let image_volume = covered.iter().filter(|&&c| c).count() as f64 * edge.powi(3);
    Ok(CiarletNecasReport {
        det_integral,
        image_volume,
        residual: det_integral - image_volume,
        voxel_edge: edge,
    })
}

fn rasterize_tet(tet: &Tet, lo: Vector3, edge: f64, counts: [usize; 3], covered: &mut [bool]) {
    let m = Matrix3::from_columns(&[tet[1] - tet[0], tet[2] - tet[0], tet[3] - tet[0]]);
    let Some(inv) = m.try_inverse() else { return };
    if determinant(&m).abs() < 1e-300 {
        return;
    }
    let (tlo, thi) = bbox(tet.iter().copied());
    let range = |a: usize| {
        let first = ((tlo[a] - lo[a]) / edge - 0.5).ceil().max(0.0) as usize;
        let last = (((thi[a] - lo[a]) / edge - 0.5).floor() as isize).min(counts[a] as isize - 1);
        (first, last)
    };
    let (r0, r1, r2) = (range(0), range(1), range(2));
    let tol = 1e-12;
    for k in r2.0 as isize..=r2.1 {
        for j in r1.0 as isize..=r1.1 {
            for i in r0.0 as isize..=r0.1 {
                let p = lo + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * edge;
                let b = inv * (p - tet[0]);
                if b.x >= -tol && b.y >= -tol && b.z >= -tol && b.x + b.y + b.z <= 1.0 + tol {
                    covered[i as usize + counts[0] * (j as usize + counts[1] * k as usize)] = true;
                }
            }
        }
    }
}

/// `‖ |∇y|³ / det ∇y ‖_{L^δ}` from nodal samples.
pub fn hencl_koskela_norm(y: &DeformationField, delta: f64) -> Result<f64, FieldError> {
    y.check_orientation()?;
    let samples: Vec<f64> = y
        .gradient_of_vector_field()
        .iter()
        .map(|f| f.norm().powi(3) / determinant(f))
        .collect();
    Ok(lp_norm(&samples, delta, y.grid()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectivityReport {
    /// Non-adjacent cell pairs whose deformed images overlap.
    pub overlapping_pairs: usize,
    /// Pairs that survived the broad phase.
    pub candidate_pairs: usize,
}

/// Count overlapping pairs of deformed cells that share no node in the
/// reference grid.
pub fn injectivity_check(y: &DeformationField) -> InjectivityReport {
    let grid = y.grid();
    let ncell = grid.cell_count();
    let cells: Vec<([usize; 3], [Tet; 6], (Vector3, Vector3))> = (0..ncell)
        .into_par_iter()
        .map(|c| {
            let cc = cell_coords(grid, c);
            let tets = cell_tets(y, cc);
            let bb = bbox(tets.iter().flat_map(|t| t.iter().copied()));
            (cc, tets, bb)
        })
        .collect();

    let bucket = cells
        .iter()
        .map(|(_, _, (lo, hi))| (hi - lo).max())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let key = |p: f64| (p / bucket).floor() as i64;
    let mut table: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (c, (_, _, (lo, hi))) in cells.iter().enumerate() {
        for k in key(lo.z)..=key(hi.z) {
            for j in key(lo.y)..=key(hi.y) {
                for i in key(lo.x)..=key(hi.x) {
                    table.entry((i, j, k)).or_default().push(c);
                }
            }
        }
    }
    let mut pairs = HashSet::new();
    for members in table.values() {
        for (a, &ca) in members.iter().enumerate() {
            for &cb in &members[a + 1..] {
                let (ia, ib) = (cells[ca].0, cells[cb].0);
                let adjacent = (0..3).all(|d| ia[d].abs_diff(ib[d]) <= 1);
                if !adjacent {
                    pairs.insert((ca.min(cb), ca.max(cb)));
                }
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = pairs.into_iter().collect();
    pairs.sort_unstable();
    let overlapping = pairs
        .par_iter()
        .filter(|&&(a, b)| {
            let (alo, ahi) = cells[a].2;
            let (blo, bhi) = cells[b].2;
            if (0..3).any(|d| ahi[d] <= blo[d] || bhi[d] <= alo[d]) {
                return false;
            }
            cells[a]
                .1
                .iter()
                .any(|ta| cells[b].1.iter().any(|tb| tets_overlap(ta, tb)))
        })
        .count();
    InjectivityReport { overlapping_pairs: overlapping, candidate_pairs: pairs.len() }
}

fn tet_edges(t: &Tet) -> [Vector3; 6] {
    [t[1] - t[0], t[2] - t[0], t[3] - t[0], t[2] - t[1], t[3] - t[1], t[3] - t[2]]
}

fn tet_normals(t: &Tet) -> [Vector3; 4] {
    let face = |a: usize, b: usize, c: usize| (t[b] - t[a]).cross(&(t[c] - t[a]));
    [face(0, 1, 2), face(0, 1, 3), face(0, 2, 3), face(1, 2, 3)]
}

/// Separating-axis test for two tetrahedra with positive-measure overlap.
/// Touching along a face, edge or vertex does not count.
pub fn tets_overlap(a: &Tet, b: &Tet) -> bool {
    let scale = a.iter().chain(b.iter()).map(|p| p.amax()).fold(1.0, f64::max);
    let separated = |axis: Vector3| {
        let len = axis.norm();
        if len < 1e-14 * scale * scale {
            return false;
        }
        let axis = axis / len;
        let proj = |t: &Tet| {
            t.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                let s = p.dot(&axis);
                (lo.min(s), hi.max(s))
            })
        };
        let (alo, ahi) = proj(a);
        let (blo, bhi) = proj(b);
        let tol = 1e-10 * scale;
        ahi <= blo + tol || bhi <= alo + tol
    };
    if tet_normals(a).into_iter().chain(tet_normals(b)).any(separated) {
        return false;
    }
    let (ea, eb) = (tet_edges(a), tet_edges(b));
    for u in &ea {
        for v in &eb {
            if separated(u.cross(v)) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn unit(n: usize) -> Arc<Grid> {
        Arc::new(Grid::unit_cube(n))
    }

    #[test]
    fn kuhn_split_fills_the_cell() {
        let mut vol = 0.0;
        for t in CELL_TETS {
            let p: Vec<Vector3> = t
                .iter()
                .map(|b| Vector3::new((b & 1) as f64, ((b >> 1) & 1) as f64, ((b >> 2) & 1) as f64))
                .collect();
            let m = Matrix3::from_columns(&[p[1] - p[0], p[2] - p[0], p[3] - p[0]]);
            vol += determinant(&m).abs() / 6.0;
        }
        assert!((vol - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_and_scaling_have_exact_image_volume() {
        for f in [1.0, 2.0] {
            let y = DeformationField::from_fn(unit(6), |x| f * x);
            let r = ciarlet_necas_residual(&y, 4.0).unwrap();
            assert!((r.det_integral - f * f * f).abs() < 1e-12);
            assert!(r.residual.abs() < 1e-9, "{r:?}");
            assert_eq!(injectivity_check(&y).overlapping_pairs, 0);
        }
    }

    #[test]
    fn identity_distortion_norm() {
        let y = DeformationField::identity(unit(4));
        let v = hencl_koskela_norm(&y, 3.0).unwrap();
        assert!((v - 3.0 * 3f64.sqrt()).abs() < 1e-12);
        let y2 = DeformationField::from_fn(unit(4), |x| 2.0 * x);
        assert!((hencl_koskela_norm(&y2, 3.0).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn overlapping_and_separated_tets() {
        let base: Tet = [Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()];
        let shifted: Tet = base.map(|p| p + Vector3::repeat(0.1));
        assert!(tets_overlap(&base, &shifted));
        let far: Tet = base.map(|p| p + Vector3::new(2.0, 0.0, 0.0));
        assert!(!tets_overlap(&base, &far));
        // sharing a face only
        let mirror: Tet = [Vector3::x(), Vector3::y(), Vector3::z(), Vector3::repeat(1.0)];
        assert!(!tets_overlap(&base, &mirror));
    }

    #[test]
    fn wrapped_map_is_detected() {
        let g = Arc::new(Grid::new(GridSpec { origin: [0.0; 3], extents: [1.0; 3], nodes: [5, 41, 3] }).unwrap());
        let y = DeformationField::from_fn(g, |x| {
            let (r, th) = (1.0 + x.x, 3.0 * PI * x.y);
            Vector3::new(r * th.cos(), r * th.sin(), x.z)
        });
        assert!(y.min_det() > 0.0);
        assert!(injectivity_check(&y).overlapping_pairs >= 1);
        let r = ciarlet_necas_residual(&y, 4.0).unwrap();
        assert!(r.residual > 0.25 * 1.5 * PI, "{r:?}");
    }
}
