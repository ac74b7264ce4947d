//! One time increment: minimize the smoothed incremental objective with
//! L-BFGS and an orientation-preserving backtracking line search, anneal
//! the smoothing, restart from perturbed starts, and probe stability.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

use crate::energy::{IncrementObjective, LoadingProgram, Smoothing};
use crate::fields::{DeformationField, FieldError, InternalStateField};
use crate::grid::{Face, Grid};
use crate::material::MaterialSpec;
use crate::tensor::Vector3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SolverError {
    #[error("initial state is not orientation preserving: {0}")]
    InfeasibleStart(FieldError),
    #[error("invalid solver parameters: {}", .0.join("; "))]
    InvalidParams(Vec<String>),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverParams {
    /// Iteration cap per annealing stage.
    pub max_iterations: usize,
    /// Euclidean norm of the nodal gradient at which the final stage stops.
    pub gradient_tolerance: f64,
    /// Intermediate stages stop at this multiple of the tolerance.
    #[serde(default = "default_stage_factor")]
    pub stage_tolerance_factor: f64,
    /// Smoothing stages, coarsest first; the last one is final.
    pub schedule: Vec<Smoothing>,
    #[serde(default = "default_backtrack")]
    pub backtrack_factor: f64,
    #[serde(default = "default_armijo")]
    pub armijo: f64,
    #[serde(default = "default_memory")]
    pub memory: usize,
    pub restart_count: usize,
    /// Restart perturbation amplitude in units of the grid spacing.
    #[serde(default = "default_restart_amplitude")]
    pub restart_amplitude: f64,
    /// Keep per-iteration diagnostics in the result.
    #[serde(default)]
    pub record_iterations: bool,
}

fn default_stage_factor() -> f64 {
    10.0
}
fn default_backtrack() -> f64 {
    0.5
}
fn default_armijo() -> f64 {
    1e-4
}
fn default_memory() -> usize {
    10
}
fn default_restart_amplitude() -> f64 {
    0.05
}

impl SolverParams {
    /// Defaults for a material and grid: tolerance `1e-6·scale/h`, four
    /// smoothing stages ending at `τ = 1e-4·scale`, `η = 1e-5`.
    pub fn defaults_for(mat: &MaterialSpec, grid: &Grid) -> Self {
        let scale = mat.energy_scale();
        let tau0 = 1e-2 * scale;
        Self {
            max_iterations: 2000,
            gradient_tolerance: 1e-6 * scale / grid.min_spacing(),
            stage_tolerance_factor: default_stage_factor(),
            schedule: vec![
                Smoothing { tau: tau0, eta: 1e-2 },
                Smoothing { tau: tau0 / 10.0, eta: 1e-3 },
                Smoothing { tau: tau0 / 100.0, eta: 1e-4 },
                Smoothing { tau: tau0 / 100.0, eta: 1e-5 },
            ],
            backtrack_factor: default_backtrack(),
            armijo: default_armijo(),
            memory: default_memory(),
            restart_count: 2,
            restart_amplitude: default_restart_amplitude(),
            record_iterations: false,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.max_iterations == 0 {
            v.push("max_iterations must be positive".into());
        }
        if !(self.gradient_tolerance > 0.0 && self.gradient_tolerance.is_finite()) {
            v.push(format!("gradient_tolerance {} must be positive", self.gradient_tolerance));
        }
        if !(self.stage_tolerance_factor >= 1.0) {
            v.push("stage_tolerance_factor must be at least 1".into());
        }
        if self.schedule.is_empty() {
            v.push("smoothing schedule must have at least one stage".into());
        }
        if self.schedule.iter().any(|s| !(s.tau >= 0.0 && s.eta >= 0.0)) {
            v.push("smoothing parameters must be non-negative".into());
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            v.push(format!("backtrack_factor {} must lie in (0, 1)", self.backtrack_factor));
        }
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            v.push(format!("armijo constant {} must lie in (0, 1)", self.armijo));
        }
        if self.memory == 0 {
            v.push("memory must be positive".into());
        }
        if !(self.restart_amplitude >= 0.0) {
            v.push("restart_amplitude must be non-negative".into());
        }
        v
    }

    pub fn final_smoothing(&self) -> Smoothing {
        *self.schedule.last().expect("validated schedule")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIterationsExceeded,
    /// The line search could not decrease the objective any further.
    Stalled,
    /// No run improved on the warm start in the exact objective, so the warm
    /// start is returned.
    WarmStartRetained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub restart: usize,
    pub stage: usize,
    pub iteration: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub step_length: f64,
    pub min_det: f64,
}

#[derive(Debug, Clone)]
pub struct IncrementResult {
    pub y: DeformationField,
    pub z: InternalStateField,
    /// Exact objective `ℰ(t, y, z) + 𝒟(z, z_prev)`.
    pub objective: f64,
    /// Final-stage smoothed objective.
    pub smoothed_objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub backtracks: usize,
    pub stability_margin: f64,
    pub status: SolveStatus,
    pub best_restart: usize,
    pub iteration_log: Vec<IterationRecord>,
}

struct RunOutcome {
    values: Vec<Vector3>,
    smoothed: f64,
    gradient_norm: f64,
    iterations: usize,
    backtracks: usize,
    status: SolveStatus,
    log: Vec<IterationRecord>,
}

fn dot(a: &[Vector3], b: &[Vector3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn norm(a: &[Vector3]) -> f64 {
    dot(a, a).sqrt()
}

fn min_det(grid: &Grid, values: &[Vector3]) -> f64 {
    (0..grid.node_count())
        .map(|n| {
            crate::tensor::determinant(&crate::tensor::Matrix3::from_columns(&[
                grid.diff_at(0, values, n),
                grid.diff_at(1, values, n),
                grid.diff_at(2, values, n),
            ]))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Minimize one smoothing stage from `x`. Returns the final point and its
/// value/gradient.
#[allow(clippy::too_many_arguments)]
fn lbfgs_stage(
    obj: &IncrementObjective<'_>,
    x0: Vec<Vector3>,
    smoothing: Smoothing,
    tol: f64,
    params: &SolverParams,
    restart: usize,
    stage: usize,
    log: &mut Vec<IterationRecord>,
) -> (Vec<Vector3>, f64, Vec<Vector3>, usize, usize, SolveStatus) {
    let (mut f, mut g) = obj.evaluate(&x0, smoothing).expect("stage starts from a feasible point");
    let mut x = x0;
    let mut pairs: VecDeque<(Vec<Vector3>, Vec<Vector3>, f64)> = VecDeque::new();
    let mut backtracks = 0;
    let h = obj.grid().min_spacing();
    let mut stalls = 0;
    let mut flat = 0;

    for iter in 0..params.max_iterations {
        let gnorm = norm(&g);
        if gnorm <= tol {
            return (x, f, g, iter, backtracks, SolveStatus::Converged);
        }
        // two-loop recursion
        let mut d: Vec<Vector3> = g.iter().map(|v| -v).collect();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &d);
            for (di, yi) in d.iter_mut().zip(y) {
                *di -= yi * a;
            }
            alphas.push(a);
        }
        let initial_step = if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            for di in d.iter_mut() {
                *di *= gamma;
            }
            1.0
        } else {
            let dmax = d.iter().map(|v| v.amax()).fold(0.0, f64::max);
            (1e-2 * h / dmax).min(1.0)
        };
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &d);
            for (di, si) in d.iter_mut().zip(s) {
                *di += si * (a - b);
            }
        }
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            pairs.clear();
            d = g.iter().map(|v| -v).collect();
            slope = -gnorm * gnorm;
        }

        let mut alpha = initial_step;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<Vector3> = x.iter().zip(&d).map(|(xi, di)| xi + di * alpha).collect();
            if let Some((ft, gt)) = obj.evaluate(&trial, smoothing) {
                if ft < f && ft <= f + params.armijo * alpha * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            alpha *= params.backtrack_factor;
            backtracks += 1;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if pairs.is_empty() {
                stalls += 1;
            }
            pairs.clear();
            if stalls >= 2 {
                return (x, f, g, iter, backtracks, SolveStatus::Stalled);
            }
            continue;
        };
        if f - fn_ <= 1e-15 * f.abs() {
            flat += 1;
            if flat >= 5 {
                x = xn;
                f = fn_;
                g = gn;
                return (x, f, g, iter + 1, backtracks, SolveStatus::Stalled);
            }
        } else {
            flat = 0;
        }
        stalls = 0;
        let s: Vec<Vector3> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<Vector3> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &yv);
        if sy > 1e-12 * norm(&s) * norm(&yv) && sy > 0.0 {
            if pairs.len() == params.memory {
                pairs.pop_front();
            }
            pairs.push_back((s, yv, 1.0 / sy));
        }
        x = xn;
        f = fn_;
        g = gn;
        if params.record_iterations {
            log.push(IterationRecord {
                restart,
                stage,
                iteration: iter + 1,
                objective: f,
                gradient_norm: norm(&g),
                step_length: alpha,
                min_det: min_det(obj.grid(), &x),
            });
        }
    }
    let status = if norm(&g) <= tol { SolveStatus::Converged } else { SolveStatus::MaxIterationsExceeded };
    (x, f, g, params.max_iterations, backtracks, status)
}

fn run_schedule(obj: &IncrementObjective<'_>, x0: Vec<Vector3>, params: &SolverParams, restart: usize) -> RunOutcome {
    let mut x = x0;
    let mut iterations = 0;
    let mut backtracks = 0;
    let mut log = Vec::new();
    let last = params.schedule.len() - 1;
    let mut out = None;
    for (stage, &sm) in params.schedule.iter().enumerate() {
        let tol = if stage == last {
            params.gradient_tolerance
        } else {
            params.gradient_tolerance * params.stage_tolerance_factor
        };
        let (xn, f, g, it, bt, status) = lbfgs_stage(obj, x, sm, tol, params, restart, stage, &mut log);
        iterations += it;
        backtracks += bt;
        x = xn;
        if stage == last {
            out = Some((f, norm(&g), status));
        }
    }
    let (smoothed, gradient_norm, status) = out.expect("non-empty schedule");
    RunOutcome { values: x, smoothed, gradient_norm, iterations, backtracks, status, log }
}

/// Faces whose nodes are all constrained.
pub fn clamped_faces(y: &DeformationField) -> Vec<Face> {
    let g = y.grid();
    Face::ALL
        .into_iter()
        .filter(|&f| (0..g.node_count()).filter(|&n| g.on_face(n, f)).all(|n| y.dirichlet_mask[n]))
        .collect()
}

/// Smooth cutoff, 1 at the centre of each constrained axis and zero on
/// every clamped face.
pub fn boundary_cutoff(grid: &Grid, faces: &[Face], x: &Vector3) -> f64 {
    let o = grid.origin();
    let l = grid.extents();
    let mut phi = 1.0;
    for a in 0..3 {
        let s = (x[a] - o[a]) / l[a];
        let lo = faces.contains(&[Face::XMin, Face::YMin, Face::ZMin][a]);
        let hi = faces.contains(&[Face::XMax, Face::YMax, Face::ZMax][a]);
        phi *= match (lo, hi) {
            (true, true) => 4.0 * s * (1.0 - s),
            (true, false) => s,
            (false, true) => 1.0 - s,
            (false, false) => 1.0,
        };
    }
    phi.max(0.0)
}

/// Smooth random displacement field with amplitude `amp`, vanishing on
/// clamped faces.
pub fn smooth_perturbation(y: &DeformationField, amp: f64, rng: &mut ChaCha8Rng) -> Vec<Vector3> {
    let grid = y.grid();
    let faces = clamped_faces(y);
    let o = grid.origin();
    let l = grid.extents();
    let modes: Vec<(Vector3, Vector3, f64)> = (0..4)
        .map(|_| {
            let k = Vector3::from_fn(|_, _| rng.gen_range(0.5..2.5) * std::f64::consts::PI);
            let c = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
            (k, c, rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    (0..grid.node_count())
        .map(|n| {
            if y.dirichlet_mask[n] {
                return Vector3::zeros();
            }
            let x = grid.position(n);
            let s = (x - o).component_div(&l);
            let phi = boundary_cutoff(grid, &faces, &x);
            let mut v = Vector3::zeros();
            for (k, c, ph) in &modes {
                v += c * (k.dot(&s) + ph).sin();
            }
            v * (amp * phi / modes.len() as f64)
        })
        .collect()
}

/// Minimize `ℰ(t, ·) + 𝒟(·, z_prev)` from `y_init` (best of `1 +
/// restart_count` runs, judged by the exact objective).
pub fn solve_increment(
    t: f64,
    y_init: &DeformationField,
    z_prev: &InternalStateField,
    mat: &MaterialSpec,
    prog: &LoadingProgram,
    params: &SolverParams,
    seed: u64,
) -> Result<IncrementResult, SolverError> {
    let errs = params.validate();
    if !errs.is_empty() {
        return Err(SolverError::InvalidParams(errs));
    }
    y_init.check_orientation().map_err(SolverError::InfeasibleStart)?;
    let mut y0 = y_init.clone();
    y0.enforce_dirichlet();
    let obj = IncrementObjective::new(t, &y0, Some(z_prev), mat, prog);
    let h = y0.grid().min_spacing();

    let starts: Vec<Vec<Vector3>> = (0..=params.restart_count)
        .map(|r| {
            if r == 0 {
                return y0.values.clone();
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(r as u64)));
            let mut amp = params.restart_amplitude * h;
            loop {
                let p = smooth_perturbation(&y0, amp, &mut rng);
                let v: Vec<Vector3> = y0.values.iter().zip(&p).map(|(a, b)| a + b).collect();
                if obj.value(&v, params.schedule[0]).is_finite() || amp < 1e-8 * h {
                    return v;
                }
                amp *= 0.5;
            }
        })
        .filter(|v| obj.value(v, params.schedule[0]).is_finite())
        .collect();

    let runs: Vec<(RunOutcome, f64)> = starts
        .into_par_iter()
        .enumerate()
        .map(|(r, x0)| {
            let out = run_schedule(&obj, x0, params, r);
            let exact = obj.exact_value(&out.values);
            (out, exact)
        })
        .collect();

    let mut best = 0;
    for (r, (_, f)) in runs.iter().enumerate().skip(1) {
        let fb = runs[best].1;
        if *f < fb - 1e-12 * (1.0 + fb.abs()) {
            best = r;
        }
    }
    let total_iterations = runs.iter().map(|r| r.0.iterations).sum();
    let total_backtracks = runs.iter().map(|r| r.0.backtracks).sum();
    let mut log = Vec::new();
    if params.record_iterations {
        for (o, _) in &runs {
            log.extend_from_slice(&o.log);
        }
    }
    let (out, exact) = runs.into_iter().nth(best).expect("at least the unperturbed run");
    let warm_exact = obj.exact_value(&y0.values);
    let mut y = y0;
    let (objective, smoothed, gradient_norm, status) = if warm_exact <= exact {
        let (f, g) = obj.evaluate(&y.values, params.final_smoothing()).expect("feasible warm start");
        let gn = norm(&g);
        let status = if gn <= params.gradient_tolerance { SolveStatus::Converged } else { SolveStatus::WarmStartRetained };
        (warm_exact, f, gn, status)
    } else {
        y.values = out.values;
        (exact, out.smoothed, out.gradient_norm, out.status)
    };
    y.enforce_dirichlet();
    let z = InternalStateField::from_deformation(&y, mat)?;
    Ok(IncrementResult {
        y,
        z,
        objective,
        smoothed_objective: smoothed,
        gradient_norm,
        iterations: total_iterations,
        backtracks: total_backtracks,
        stability_margin: f64::INFINITY,
        status,
        best_restart: best,
        iteration_log: log,
    })
}

/// Competitor families for the sampled stability test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompetitorSet {
    /// Blend each uniform well state into the interior.
    pub uniform_wells: bool,
    /// Smooth perturbation amplitudes in units of the grid spacing.
    pub perturbation_amplitudes: Vec<f64>,
    pub perturbations_per_amplitude: usize,
    /// Explicit competitor states, e.g. neighbouring iterates.
    #[serde(skip)]
    pub extra: Vec<DeformationField>,
}

impl Default for CompetitorSet {
    fn default() -> Self {
        Self {
            uniform_wells: true,
            perturbation_amplitudes: vec![0.01, 0.05, 0.2],
            perturbations_per_amplitude: 2,
            extra: Vec::new(),
        }
    }
}

impl CompetitorSet {
    /// Only the given states.
    pub fn only(states: Vec<DeformationField>) -> Self {
        Self { uniform_wells: false, perturbation_amplitudes: vec![], perturbations_per_amplitude: 0, extra: states }
    }

    pub fn generate(&self, y: &DeformationField, mat: &MaterialSpec, seed: u64) -> Vec<DeformationField> {
        let grid = y.grid();
        let faces = clamped_faces(y);
        let mut out = Vec::new();
        if self.uniform_wells {
            let xc = grid.origin() + grid.extents() * 0.5;
            for well in mat.wells() {
                let mut c = y.clone();
                for n in 0..grid.node_count() {
                    let x = grid.position(n);
                    let phi = boundary_cutoff(grid, &faces, &x);
                    let target = well.u * (x - xc) + xc;
                    c.values[n] = y.values[n] * (1.0 - phi) + target * phi;
                }
                c.enforce_dirichlet();
                out.push(c);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = grid.min_spacing();
        for &a in &self.perturbation_amplitudes {
            for _ in 0..self.perturbations_per_amplitude {
                let p = smooth_perturbation(y, a * h, &mut rng);
                let mut c = y.clone();
                for (v, d) in c.values.iter_mut().zip(&p) {
                    *v += d;
                }
                out.push(c);
            }
        }
        out.extend(self.extra.iter().cloned());
        out
    }
}

/// Minimum over competitors `ỹ` of `ℰ(t, ỹ) + 𝒟(z, λ(∇ỹ)) − ℰ(t, y)`.
/// Infeasible competitors contribute `+∞`.
pub fn stability_margin(
    t: f64,
    y: &DeformationField,
    z: &InternalStateField,
    competitors: &[DeformationField],
    mat: &MaterialSpec,
    prog: &LoadingProgram,
) -> f64 {
    let obj = IncrementObjective::new(t, y, Some(z), mat, prog);
    let base = obj.exact_value(&y.values);
    competitors
        .par_iter()
        .map(|c| obj.exact_value(&c.values) - base)
        .reduce(|| f64::INFINITY, f64::min)
}

pub fn stability_test(
    t: f64,
    result: &IncrementResult,
    competitors: &CompetitorSet,
    mat: &MaterialSpec,
    prog: &LoadingProgram,
    seed: u64,
) -> f64 {
    let states = competitors.generate(&result.y, mat, seed);
    stability_margin(t, &result.y, &result.z, &states, mat, prog)
}
