use proptest::prelude::*;

use gradpoly::config::parse_config_str;
use gradpoly::energy::EnergyBreakdown;
use gradpoly::evolution::{StepRecord, TwoSided};
use gradpoly::material::MaterialSpec;
use gradpoly::tensor::{cofactor, cramer_inverse, determinant, rotation, Matrix3, Vector3};
use gradpoly::trace::{read_trace, TraceRecord, TraceWriter};

fn matrix() -> impl Strategy<Value = Matrix3> {
    prop::array::uniform9(-2.0f64..2.0).prop_map(|a| Matrix3::from_row_slice(&a))
}

/// Near the identity, away from the well points, so the fractions are defined.
fn near_identity() -> impl Strategy<Value = Matrix3> {
    prop::array::uniform9(-0.15f64..0.15).prop_map(|a| Matrix3::identity() + Matrix3::from_row_slice(&a))
}

fn unit_axis() -> impl Strategy<Value = Vector3> {
    prop::array::uniform3(-1.0f64..1.0)
        .prop_filter("nonzero axis", |a| a.iter().map(|x| x * x).sum::<f64>() > 1e-2)
        .prop_map(|a| Vector3::from(a).normalize())
}

fn fractions(m: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, m)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn cramer_identities(f in matrix()) {
        let d = determinant(&f);
        let cof = cofactor(&f);
        let scale = f.norm().powi(3).max(1.0);
        prop_assert!((f.transpose() * cof - d * Matrix3::identity()).norm() <= 1e-12 * scale);
        prop_assert!((determinant(&cof) - d * d).abs() <= 1e-12 * scale * scale);
        if d.abs() > 1e-3 {
            let inv = cramer_inverse(&f).unwrap();
            prop_assert!((f * inv - Matrix3::identity()).norm() <= 1e-9 / d.abs().min(1.0));
        }
    }

    #[test]
    fn minors_are_multiplicative(a in matrix(), b in matrix()) {
        let s = (a.norm() * b.norm()).max(1.0);
        prop_assert!((determinant(&(a * b)) - determinant(&a) * determinant(&b)).abs() <= 1e-12 * s.powi(3));
        prop_assert!((cofactor(&(a * b)) - cofactor(&a) * cofactor(&b)).norm() <= 1e-12 * s.powi(2));
    }

    #[test]
    fn fractions_sum_to_one_and_are_frame_indifferent(
        f in near_identity(), axis in unit_axis(), angle in -3.0f64..3.0,
    ) {
        let mat = MaterialSpec::default_tetragonal();
        let lam = mat.lambda_fractions(&f).unwrap();
        prop_assert!((lam.iter().sum::<f64>() - 1.0).abs() <= 1e-14);
        prop_assert!(lam.iter().all(|&l| (0.0..=1.0).contains(&l)));
        let rotated = mat.lambda_fractions(&(rotation(&axis, angle) * f)).unwrap();
        for (a, b) in lam.iter().zip(&rotated) {
            prop_assert!((a - b).abs() <= 1e-10, "{lam:?} vs {rotated:?}");
        }
    }

    #[test]
    fn dissipation_distance_is_a_homogeneous_metric(
        a in fractions(4), b in fractions(4), c in fractions(4), s in 0.0f64..10.0,
    ) {
        let mat = MaterialSpec::default_tetragonal();
        let d = |x: &[f64], y: &[f64]| mat.dissipation_distance(x, y);
        prop_assert_eq!(d(&a, &a), 0.0);
        prop_assert!(d(&a, &b) >= 0.0);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-15);
        let scaled: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + s * (y - x)).collect();
        prop_assert!((d(&a, &scaled) - s * d(&a, &b)).abs() <= 1e-12 * (1.0 + s));
    }

    #[test]
    fn step_records_survive_the_trace_format(
        k in 0usize..1000,
        t in 0.0f64..10.0,
        vals in prop::array::uniform8(-1e3f64..1e3),
        margin in prop_oneof![Just(f64::INFINITY), Just(f64::NEG_INFINITY), -1.0f64..1.0],
        hk in prop::option::of(prop_oneof![Just(f64::INFINITY), 0.0f64..100.0]),
        overlaps in prop::option::of(0usize..5),
    ) {
        let two_sided = (k % 2 == 1).then(|| TwoSided {
            lower: vals[5], middle: vals[6], upper: vals[7],
            lower_slack: vals[6] - vals[5], upper_slack: vals[7] - vals[6],
            lower_ok: vals[6] >= vals[5], upper_ok: vals[7] >= vals[6],
        });
        let rec = StepRecord {
            k,
            t,
            energy: EnergyBreakdown { stored: vals[0], well_part: vals[1], regularizer_part: vals[2], load_part: vals[3], total: vals[0] + vals[3] },
            dissipation_increment: vals[4].abs(),
            cumulative_dissipation: 2.0 * vals[4].abs(),
            two_sided,
            stability_margin: margin,
            energy_balance_residual: vals[5] * 1e-6,
            min_det: if k == 0 { f64::NEG_INFINITY } else { vals[1].abs() },
            lambda_residual: 0.0,
            mean_fractions: vec![0.25; 4],
            ciarlet_necas_residual: overlaps.map(|o| o as f64 * 0.5),
            hencl_koskela_norm: hk,
            injectivity_overlaps: overlaps,
            solver: None,
        };
        let mut w = TraceWriter::new(Vec::new());
        w.write(&TraceRecord::Step(rec.clone())).unwrap();
        let line = String::from_utf8(w.into_inner()).unwrap();
        let back: TraceRecord = serde_json::from_str(line.trim_end()).unwrap();
        prop_assert_eq!(back, TraceRecord::Step(rec));
        // a lone step record is not a trace
        prop_assert!(read_trace(line.as_bytes()).is_err());
    }

    #[test]
    fn scenario_files_round_trip(
        seed in any::<u64>(),
        steps in 1usize..50,
        horizon in 0.1f64..5.0,
        n in 3usize..12,
        stride in 0usize..5,
        amp in 0.0f64..10.0,
    ) {
        let text = format!(r#"
schema_version = 1
seed = {seed}
dump_stride = {stride}

[grid]
origin = [0.0, 0.0, 0.0]
extents = [1.0, 2.0, 1.0]
nodes = [{n}, {n}, 4]

[material]
p = 8.0
q = 2.0
r = 2.0
s = 8.5
c = 0.001
eps_reg = 0.001
diss_weights = [0.1, 0.1]

[[material.wells]]
label = "austenite"
u = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
w = 0.0

[[material.wells]]
label = "variant"
u = [[0.96, 0.0, 0.0], [0.0, 0.96, 0.0], [0.0, 0.0, 1.08]]
w = 0.02

[loading]
clamped_faces = ["x-"]

[loading.body_force]
base = [0.0, 0.0, -{amp}]
gradient = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
origin = [0.0, 0.0, 0.0]
profile = {{ knots = [[0.0, 0.0], [{horizon}, 1.0]] }}

[time]
horizon = {horizon}
steps = {steps}
"#);
        let cfg = parse_config_str(&text).unwrap();
        let again = parse_config_str(&cfg.to_toml_string()).unwrap();
        prop_assert_eq!(again, cfg);
    }
}
