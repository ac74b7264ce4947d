//! Time stepping on a uniform grid with per-step certificates: the
//! two-sided energy inequality, cumulative dissipation, sampled stability,
//! orientation and injectivity, and the energy-balance residual.

use log::{info, warn};
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::energy::{partial_t_energy, total_energy, transport_to, EnergyBreakdown, LoadingProgram};
use crate::fields::{DeformationField, FieldError, InternalStateField};
use crate::grid::Grid;
use crate::injectivity::{ciarlet_necas_residual, hencl_koskela_norm, injectivity_check};
use crate::material::MaterialSpec;
use crate::solver::{
    solve_increment, stability_margin, CompetitorSet, IncrementResult, SolveStatus, SolverError, SolverParams,
};

#[derive(Debug, Error)]
pub enum EvolutionError {
    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: SolverError,
    },
    #[error("initial state: {0}")]
    Initial(#[from] FieldError),
}

/// `t_k = k·T/N`, `k = 0..=N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn time(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateOptions {
    pub ciarlet_necas: bool,
    #[serde(default = "default_voxels")]
    pub voxels_per_cell: f64,
    /// Exponent of the distortion norm; `None` disables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hencl_koskela_delta: Option<f64>,
    pub injectivity: bool,
    #[serde(default)]
    pub stability: CompetitorSet,
}

fn default_voxels() -> f64 {
    4.0
}

impl Default for CertificateOptions {
    fn default() -> Self {
        Self {
            ciarlet_necas: true,
            voxels_per_cell: default_voxels(),
            hencl_koskela_delta: Some(3.0),
            injectivity: true,
            stability: CompetitorSet::default(),
        }
    }
}

impl CertificateOptions {
    pub fn any_injectivity(&self) -> bool {
        self.ciarlet_necas || self.injectivity || self.hencl_koskela_delta.is_some()
    }
}

/// Everything needed to march one scenario.
#[derive(Debug, Clone)]
pub struct EvolutionSetup {
    pub grid: Arc<Grid>,
    pub material: MaterialSpec,
    pub loading: LoadingProgram,
    pub time: TimeGrid,
    pub solver: SolverParams,
    pub certificates: CertificateOptions,
    pub seed: u64,
}

impl EvolutionSetup {
    /// `|Ω|·(g_tol·h + η·Σκ + τ·ln(M+1))`: the slack allowed in the
    /// two-sided inequality and the stability margin.
    pub fn certificate_tolerance(&self) -> f64 {
        let sm = self.solver.final_smoothing();
        let kappa: f64 = self.material.diss_weights().iter().sum();
        let m1 = self.material.well_count() as f64;
        self.grid.volume()
            * (self.solver.gradient_tolerance * self.grid.min_spacing() + sm.eta * kappa + sm.tau * m1.ln())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoSided {
    /// `∫ ∂ₜℰ(θ, q_k) dθ`.
    pub lower: f64,
    /// `ℰ(t_k, q_k) + 𝒟(z_k, z_{k−1}) − ℰ(t_{k−1}, q_{k−1})`.
    pub middle: f64,
    /// `∫ ∂ₜℰ(θ, q_{k−1}) dθ`.
    pub upper: f64,
    pub lower_slack: f64,
    pub upper_slack: f64,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSummary {
    pub status: SolveStatus,
    pub iterations: usize,
    pub backtracks: usize,
    pub gradient_norm: f64,
    pub objective: f64,
    /// `(smoothed − exact)/|exact|` on the returned state.
    pub smoothing_gap: f64,
    pub best_restart: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub t: f64,
    pub energy: EnergyBreakdown,
    pub dissipation_increment: f64,
    pub cumulative_dissipation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_sided: Option<TwoSided>,
    #[serde(with = "nonfinite")]
    pub stability_margin: f64,
    pub energy_balance_residual: f64,
    #[serde(with = "nonfinite")]
    pub min_det: f64,
    /// `max |z − λ(∇y)|` over nodes and components.
    #[serde(with = "nonfinite")]
    pub lambda_residual: f64,
    pub mean_fractions: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ciarlet_necas_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "nonfinite::option")]
    pub hencl_koskela_norm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub injectivity_overlaps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverSummary>,
}

/// JSON has no infinities; these fields spell them `"inf"`, `"-inf"`, `"nan"`.
mod nonfinite {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn decode<E: Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                _ => Err(E::custom(format!("expected a number, got \"{t}\""))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?)
    }

    pub mod option {
        use super::*;

        pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
            match v {
                Some(x) => super::serialize(x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(decode).transpose()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvolutionTrace {
    pub tolerance: f64,
    pub volume: f64,
    pub steps: Vec<StepRecord>,
}

/// Per-step verdicts, recomputable from a trace alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdicts {
    pub orientation: bool,
    pub two_sided_lower: bool,
    pub two_sided_upper: bool,
    pub dissipation_monotone: bool,
    pub stability: bool,
    pub lambda_consistent: bool,
    pub ciarlet_necas: Option<bool>,
    pub injectivity: Option<bool>,
    pub hencl_koskela: Option<bool>,
    /// Steps whose recorded middle term disagrees with the recorded energies.
    pub inconsistent_steps: Vec<usize>,
    pub failures: Vec<String>,
}

impl Verdicts {
    pub fn all_pass(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Sum of consecutive jumps `Σ 𝒟(z_{k−1}, z_k)`: the supremum over
/// partitions for a piecewise-constant path.
pub fn dissipation_total(path: &[InternalStateField], mat: &MaterialSpec) -> f64 {
    path.windows(2).map(|w| w[0].dissipation_to(&w[1], mat)).sum()
}

pub fn two_sided_check(lower: f64, middle: f64, upper: f64, tol: f64) -> TwoSided {
    TwoSided {
        lower,
        middle,
        upper,
        lower_slack: middle - lower,
        upper_slack: upper - middle,
        lower_ok: middle - lower >= -tol,
        upper_ok: upper - middle >= -tol,
    }
}

/// `R_k = ℰ_k + Diss_k − ℰ_0 − Σ_{j≤k} ∫_{t_{j−1}}^{t_j} ∂ₜℰ(θ, q_{j−1}) dθ`.
pub fn energy_balance_residual(steps: &[StepRecord]) -> Vec<f64> {
    let Some(first) = steps.first() else { return Vec::new() };
    let e0 = first.energy.total;
    let mut work = 0.0;
    steps
        .iter()
        .map(|s| {
            if let Some(ts) = &s.two_sided {
                work += ts.upper;
            }
            s.energy.total + s.cumulative_dissipation - e0 - work
        })
        .collect()
}

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &mut dyn FnMut(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 20)
}

/// `∫_a^b ∂ₜℰ(θ, y) dθ` for a frozen state, split at the profile knots.
pub fn work_integral(a: f64, b: f64, y: &DeformationField, mat: &MaterialSpec, prog: &LoadingProgram) -> f64 {
    let mut cuts = vec![a];
    cuts.extend(prog.breakpoints().into_iter().filter(|&t| t > a && t < b));
    cuts.push(b);
    let moving = prog.boundary_motion.is_some();
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        // evaluate strictly inside the piece so knot slopes come from it
        let inset = 1e-9 * (hi - lo);
        let mut f = |theta: f64| {
            let th = theta.clamp(lo + inset, hi - inset);
            if moving {
                partial_t_energy(th, &transport_to(y, th, prog), mat, prog)
            } else {
                partial_t_energy(th, y, mat, prog)
            }
        };
        total += adaptive_simpson(&mut f, lo, hi, 1e-13);
    }
    total
}

struct StepState {
    y: DeformationField,
    z: InternalStateField,
    energy: EnergyBreakdown,
}

fn lambda_residual(y: &DeformationField, z: &InternalStateField, mat: &MaterialSpec) -> f64 {
    match InternalStateField::from_deformation(y, mat) {
        Ok(fresh) => fresh.max_abs_difference(z),
        Err(_) => f64::INFINITY,
    }
}

fn injectivity_fields(y: &DeformationField, opts: &CertificateOptions, rec: &mut StepRecord) {
    if opts.ciarlet_necas {
        rec.ciarlet_necas_residual = ciarlet_necas_residual(y, opts.voxels_per_cell).ok().map(|r| r.residual);
    }
    if let Some(delta) = opts.hencl_koskela_delta {
        rec.hencl_koskela_norm = hencl_koskela_norm(y, delta).ok();
    }
    if opts.injectivity {
        rec.injectivity_overlaps = Some(injectivity_check(y).overlapping_pairs);
    }
}

/// Observer hooks called as the evolution proceeds.
pub trait EvolutionObserver {
    /// A step has been solved and certified (its stability margin may still
    /// be lowered once the next step is known).
    fn on_step(&mut self, _record: &StepRecord, _y: &DeformationField, _z: &InternalStateField) {}
    fn on_increment(&mut self, _k: usize, _result: &IncrementResult) {}
}

impl EvolutionObserver for () {}

/// March `k = 1..=N`, warm-starting every increment from the previous state.
pub fn run_evolution(setup: &EvolutionSetup, observer: &mut dyn EvolutionObserver) -> Result<EvolutionTrace, EvolutionError> {
    let mat = &setup.material;
    let prog = &setup.loading;
    let tol = setup.certificate_tolerance();
    let opts = &setup.certificates;

    let y0 = prog.initial_deformation(setup.grid.clone(), 0.0);
    y0.check_orientation()?;
    let (e0, z0) = total_energy(0.0, &y0, mat, prog)?;
    let competitors0 = opts.stability.generate(&y0, mat, setup.seed);
    let margin0 = stability_margin(0.0, &y0, &z0, &competitors0, mat, prog);
    if margin0 < -tol {
        warn!("initial state is not stable: sampled margin {margin0:e} below -{tol:e}");
    }
    let mut rec0 = StepRecord {
        k: 0,
        t: 0.0,
        energy: e0,
        dissipation_increment: 0.0,
        cumulative_dissipation: 0.0,
        two_sided: None,
        stability_margin: margin0,
        energy_balance_residual: 0.0,
        min_det: y0.min_det(),
        lambda_residual: lambda_residual(&y0, &z0, mat),
        mean_fractions: z0.averages(),
        ciarlet_necas_residual: None,
        hencl_koskela_norm: None,
        injectivity_overlaps: None,
        solver: None,
    };
    injectivity_fields(&y0, opts, &mut rec0);

    let mut steps = vec![rec0];
    let mut prev = StepState { y: y0, z: z0, energy: e0 };
    let mut cumulative = 0.0;
    let mut work = 0.0;
    let mut pending: Option<(StepRecord, DeformationField, InternalStateField)> = None;

    for k in 1..=setup.time.steps {
        let (t_prev, t) = (setup.time.time(k - 1), setup.time.time(k));
        let y_init = transport_to(&prev.y, t, prog);
        let seed = setup.seed.wrapping_add(k as u64);
        let res = solve_increment(t, &y_init, &prev.z, mat, prog, &setup.solver, seed)
            .map_err(|source| EvolutionError::Step { step: k, source })?;
        observer.on_increment(k, &res);
        let (energy, z) = total_energy(t, &res.y, mat, prog).map_err(|e| EvolutionError::Step { step: k, source: e.into() })?;
        let d = z.dissipation_to(&prev.z, mat);
        cumulative += d;

        let lower = work_integral(t_prev, t, &res.y, mat, prog);
        let upper = work_integral(t_prev, t, &prev.y, mat, prog);
        let middle = energy.total + d - prev.energy.total;
        let ts = two_sided_check(lower, middle, upper, tol);
        work += upper;

        // the new state lowers the margin of the previous one
        if let Some((mut rec, y_p, z_p)) = pending.take() {
            let back = transport_to(&res.y, rec.t, prog);
            rec.stability_margin = rec
                .stability_margin
                .min(stability_margin(rec.t, &y_p, &z_p, &[back], mat, prog));
            steps[rec.k].stability_margin = rec.stability_margin;
            observer.on_step(&rec, &y_p, &z_p);
        } else if k == 1 {
            let back = transport_to(&res.y, 0.0, prog);
            let m = stability_margin(0.0, &prev.y, &prev.z, &[back], mat, prog);
            steps[0].stability_margin = steps[0].stability_margin.min(m);
            observer.on_step(&steps[0], &prev.y, &prev.z);
        }

        let mut competitors = opts.stability.generate(&res.y, mat, seed ^ 0x5eed);
        competitors.push(y_init.clone());
        let margin = stability_margin(t, &res.y, &z, &competitors, mat, prog);

        let gap = (res.smoothed_objective - res.objective) / res.objective.abs().max(f64::MIN_POSITIVE);
        let mut rec = StepRecord {
            k,
            t,
            energy,
            dissipation_increment: d,
            cumulative_dissipation: cumulative,
            two_sided: Some(ts),
            stability_margin: margin,
            energy_balance_residual: energy.total + cumulative - steps[0].energy.total - work,
            min_det: res.y.min_det(),
            lambda_residual: lambda_residual(&res.y, &z, mat),
            mean_fractions: z.averages(),
            ciarlet_necas_residual: None,
            hencl_koskela_norm: None,
            injectivity_overlaps: None,
            solver: Some(SolverSummary {
                status: res.status,
                iterations: res.iterations,
                backtracks: res.backtracks,
                gradient_norm: res.gradient_norm,
                objective: res.objective,
                smoothing_gap: gap,
                best_restart: res.best_restart,
            }),
        };
        injectivity_fields(&res.y, opts, &mut rec);
        info!(
            "step {k}/{}: t = {t:.4}, E = {:.9e}, D = {d:.3e}, slacks = ({:.2e}, {:.2e}), margin = {margin:.2e}, {:?} in {} it",
            setup.time.steps, energy.total, ts.lower_slack, ts.upper_slack, res.status, res.iterations
        );
        if !ts.upper_ok {
            warn!("step {k}: upper two-sided bound violated by {:.3e}; the increment solve did not improve on its warm start", -ts.upper_slack);
        }
        steps.push(rec.clone());
        pending = Some((rec, res.y.clone(), z.clone()));
        prev = StepState { y: res.y, z, energy };
    }
    if let Some((rec, y, z)) = pending {
        observer.on_step(&rec, &y, &z);
    } else if setup.time.steps == 0 {
        observer.on_step(&steps[0], &prev.y, &prev.z);
    }
    Ok(EvolutionTrace { tolerance: tol, volume: setup.grid.volume(), steps })
}

/// Recompute every verdict from the recorded numbers.
pub fn certify_trace(trace: &EvolutionTrace) -> Verdicts {
    let tol = trace.tolerance;
    let mut v = Verdicts {
        orientation: true,
        two_sided_lower: true,
        two_sided_upper: true,
        dissipation_monotone: true,
        stability: true,
        lambda_consistent: true,
        ciarlet_necas: None,
        injectivity: None,
        hencl_koskela: None,
        inconsistent_steps: Vec::new(),
        failures: Vec::new(),
    };
    let residuals = energy_balance_residual(&trace.steps);
    let mut cumulative = 0.0;
    for (i, s) in trace.steps.iter().enumerate() {
        if s.k != i {
            v.failures.push(format!("record {i} has step index {}", s.k));
        }
        if !(s.min_det > 0.0) {
            v.orientation = false;
            v.failures.push(format!("step {}: min det {:e} is not positive", s.k, s.min_det));
        }
        if i > 0 {
            let prev = &trace.steps[i - 1];
            cumulative += s.dissipation_increment;
            if s.dissipation_increment < 0.0 || s.cumulative_dissipation < prev.cumulative_dissipation {
                v.dissipation_monotone = false;
                v.failures.push(format!("step {}: cumulative dissipation decreased", s.k));
            }
            if (cumulative - s.cumulative_dissipation).abs() > 1e-10 * (1.0 + cumulative.abs()) {
                v.inconsistent_steps.push(s.k);
                v.failures.push(format!("step {}: cumulative dissipation does not match the increments", s.k));
            }
            match &s.two_sided {
                Some(ts) => {
                    let middle = s.energy.total + s.dissipation_increment - prev.energy.total;
                    let scale = 1.0 + s.energy.total.abs() + prev.energy.total.abs();
                    if (middle - ts.middle).abs() > 1e-10 * scale {
                        v.inconsistent_steps.push(s.k);
                        v.failures.push(format!(
                            "step {}: recorded middle term {:e} does not match energies ({middle:e})",
                            s.k, ts.middle
                        ));
                    }
                    if middle - ts.lower < -tol {
                        v.two_sided_lower = false;
                        v.failures.push(format!("step {}: lower two-sided bound violated by {:e}", s.k, ts.lower - middle));
                    }
                    if ts.upper - middle < -tol {
                        v.two_sided_upper = false;
                        v.failures.push(format!("step {}: upper two-sided bound violated by {:e}", s.k, middle - ts.upper));
                    }
                }
                None => v.failures.push(format!("step {}: missing two-sided record", s.k)),
            }
        }
        if (s.energy.total - (s.energy.stored - s.energy.load_part)).abs() > 1e-12 * (1.0 + s.energy.total.abs()) {
            v.inconsistent_steps.push(s.k);
            v.failures.push(format!("step {}: total energy is not stored minus load", s.k));
        }
        if (residuals[i] - s.energy_balance_residual).abs() > 1e-10 * (1.0 + s.energy.total.abs()) {
            v.inconsistent_steps.push(s.k);
            v.failures.push(format!("step {}: recorded energy-balance residual does not match", s.k));
        }
        if s.stability_margin < -tol {
            v.stability = false;
            v.failures.push(format!("step {}: stability margin {:e} below -{tol:e}", s.k, s.stability_margin));
        }
        if !(s.lambda_residual <= 1e-12) {
            v.lambda_consistent = false;
            v.failures.push(format!("step {}: internal state differs from the volume fractions by {:e}", s.k, s.lambda_residual));
        }
        if let Some(r) = s.ciarlet_necas_residual {
            // the image-volume condition holds up to rasterization error
            let ok = r <= 0.05 * trace.volume;
            v.ciarlet_necas = Some(v.ciarlet_necas.unwrap_or(true) && ok);
            if !ok {
                v.failures.push(format!("step {}: image-volume residual {r:e}", s.k));
            }
        }
        if let Some(o) = s.injectivity_overlaps {
            let ok = o == 0;
            v.injectivity = Some(v.injectivity.unwrap_or(true) && ok);
            if !ok {
                v.failures.push(format!("step {}: {o} overlapping cell pairs", s.k));
            }
        }
        if let Some(hk) = s.hencl_koskela_norm {
            let ok = hk.is_finite();
            v.hencl_koskela = Some(v.hencl_koskela.unwrap_or(true) && ok);
            if !ok {
                v.failures.push(format!("step {}: distortion norm is not finite", s.k));
            }
        }
    }
    v.inconsistent_steps.sort_unstable();
    v.inconsistent_steps.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn simpson_is_exact_on_cubics() {
        let mut f = |x: f64| 3.0 * x * x * x - x + 2.0;
        let v = adaptive_simpson(&mut f, -1.0, 2.0, 1e-12);
        assert!((v - (0.75 * (16.0 - 1.0) - 1.5 + 6.0)).abs() < 1e-12);
        let mut g = |x: f64| x.sin();
        assert!((adaptive_simpson(&mut g, 0.0, std::f64::consts::PI, 1e-12) - 2.0).abs() < 1e-10);
    }

    fn random_path(rng: &mut ChaCha8Rng, grid: &Arc<Grid>, len: usize) -> Vec<InternalStateField> {
        let n = grid.node_count();
        let mut cur: Vec<f64> = (0..n * 4).map(|_| rng.gen_range(0.0..0.3)).collect();
        (0..len)
            .map(|_| {
                for v in cur.iter_mut() {
                    *v += rng.gen_range(0.0..0.1);
                }
                InternalStateField::new(grid.clone(), 4, cur.clone()).unwrap()
            })
            .collect()
    }

    #[test]
    fn dissipation_of_paths() {
        let mat = MaterialSpec::default_tetragonal();
        let grid = Arc::new(Grid::unit_cube(3));
        let a = InternalStateField::uniform(grid.clone(), &[1.0, 0.0, 0.0, 0.0]);
        let b = InternalStateField::uniform(grid.clone(), &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(dissipation_total(&[a.clone(), a.clone(), a.clone()], &mat), 0.0);
        let jump = dissipation_total(&[a.clone(), b.clone()], &mat);
        assert!((jump - 0.2).abs() < 1e-14);
        assert!((dissipation_total(&[a.clone(), a.clone(), b.clone()], &mat) - jump).abs() < 1e-15);

        // componentwise monotone paths: refinement adds nothing
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let path = random_path(&mut rng, &grid, 6);
            let fine = dissipation_total(&path, &mat);
            let coarse = dissipation_total(&[path[0].clone(), path[5].clone()], &mat);
            assert!((fine - coarse).abs() < 1e-12 * fine.max(1.0));
        }
    }

    #[test]
    fn balance_residual_telescopes() {
        let mk = |k: usize, e: f64, d: f64, cum: f64, upper: f64| StepRecord {
            k,
            t: k as f64,
            energy: EnergyBreakdown { stored: e, well_part: 0.0, regularizer_part: e, load_part: 0.0, total: e },
            dissipation_increment: d,
            cumulative_dissipation: cum,
            two_sided: (k > 0).then(|| two_sided_check(upper - 1.0, 0.0, upper, 0.0)),
            stability_margin: 0.0,
            energy_balance_residual: 0.0,
            min_det: 1.0,
            lambda_residual: 0.0,
            mean_fractions: vec![],
            ciarlet_necas_residual: None,
            hencl_koskela_norm: None,
            injectivity_overlaps: None,
            solver: None,
        };
        let steps = vec![mk(0, 1.0, 0.0, 0.0, 0.0), mk(1, 0.5, 0.25, 0.25, -0.1), mk(2, 0.2, 0.0, 0.25, -0.3)];
        let r = energy_balance_residual(&steps);
        assert_eq!(r[0], 0.0);
        assert!((r[1] - (0.5 + 0.25 - 1.0 + 0.1)).abs() < 1e-15);
        assert!((r[2] - (0.2 + 0.25 - 1.0 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn two_sided_flags() {
        let ok = two_sided_check(-1.0, 0.0, 1.0, 0.0);
        assert!(ok.lower_ok && ok.upper_ok);
        let bad = two_sided_check(-1.0, 2.0, 1.0, 0.5);
        assert!(bad.lower_ok && !bad.upper_ok);
        assert_eq!(bad.upper_slack, -1.0);
    }
}
