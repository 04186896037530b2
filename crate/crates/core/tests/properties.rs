mod common;

use common::{log_volume, log_volume_tolerance, random_batch, reduced_flow, reduced_model};
use ftle_node::analysis::{adversarial_probe, decision_margin};
use ftle_node::data::{make_moons, split};
use ftle_node::ftle::{cauchy_green, ftle_field, spectrum_from_tangent, FieldMode, FieldOptions};
use ftle_node::integrator::{flow, flow_endpoint, tangent_flow, FlowConfig};
use ftle_node::linalg::Mat;
use ftle_node::model::{zero_model, NodeModel, OutputLayer, Preset};
use ftle_node::raster::{Bounds, GridSpec, ScalarGrid};
use ftle_node::training::{he_init, reg_term, train, RegConfig, TrainConfig};
use proptest::prelude::*;

fn preset() -> impl Strategy<Value = Preset> {
    prop_oneof![Just(Preset::Ex1), Just(Preset::Ex2)]
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-2.0..2.0f64, -2.0..2.0f64]
}

/// Reduced model with all trainable parameters scaled by `s`.
fn model(preset: Preset, seed: u64, s: f64) -> NodeModel {
    let mut m = reduced_model(preset, seed);
    let flat: Vec<f64> = m.params_flat().iter().map(|v| v * s).collect();
    m.set_params_flat(&flat);
    m
}

fn rel_close(a: &Mat, b: &Mat, tol: f64) -> bool {
    a.sub(b).frobenius_norm() <= tol * a.frobenius_norm().max(b.frobenius_norm()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn exponents_are_ordered(entries in prop::array::uniform4(-3.0..3.0f64), len in 0.1..10.0f64) {
        let y = Mat::from_vec(2, 2, entries.to_vec());
        prop_assume!(y.det().abs() > 1e-8);
        let s = spectrum_from_tangent(&y, (0.0, len)).unwrap();
        prop_assert!(s.exponents[0] >= s.exponents[1]);
        let cg = cauchy_green(&y, (0.0, len)).unwrap();
        prop_assert!(cg.exponent(0) >= cg.exponent(1));
    }

    #[test]
    fn model_exponents_are_ordered(p in preset(), seed in any::<u64>(), s in 0.5..2.0f64, x in point()) {
        let m = model(p, seed, s);
        let y = tangent_flow(&m, &x, (0.0, 1.0), &reduced_flow(), false).unwrap().final_jacobian;
        let spec = spectrum_from_tangent(&y, (0.0, 1.0)).unwrap();
        prop_assert!(spec.exponents[0] >= spec.exponents[1]);
    }

    #[test]
    fn exponent_sum_is_log_volume(p in preset(), seed in any::<u64>(), s in 0.5..2.0f64, x in point()) {
        let m = model(p, seed, s);
        let cfg = reduced_flow();
        let y = tangent_flow(&m, &x, (0.0, 1.0), &cfg, false).unwrap().final_jacobian;
        let spec = spectrum_from_tangent(&y, (0.0, 1.0)).unwrap();
        let sum: f64 = spec.exponents.iter().sum();
        let reference = log_volume(&m, &x, 1.0, &cfg);
        let tol = log_volume_tolerance(reference, &spec.singular_values);
        prop_assert!((sum - reference).abs() <= tol, "{} vs {}", sum, reference);
    }

    #[test]
    fn tangent_maps_compose(p in preset(), seed in any::<u64>(), s in 0.5..2.0f64, x in point(), k in 1usize..10) {
        let m = model(p, seed, s);
        let cfg = reduced_flow();
        let tm = cfg.time(k);
        let whole = tangent_flow(&m, &x, (0.0, 1.0), &cfg, false).unwrap();
        let first = tangent_flow(&m, &x, (0.0, tm), &cfg, false).unwrap();
        let second = tangent_flow(&m, first.trajectory.last(), (tm, 1.0), &cfg, false).unwrap();
        let composed = second.final_jacobian.matmul(&first.final_jacobian);
        prop_assert!(rel_close(&whole.final_jacobian, &composed, 1e-12));
    }

    #[test]
    fn flow_is_a_semigroup_bitwise(p in preset(), seed in any::<u64>(), s in 0.5..2.0f64, x in point(), k in 1usize..10) {
        let m = model(p, seed, s);
        let cfg = reduced_flow();
        let tm = cfg.time(k);
        let direct = flow_endpoint(&m, &x, (0.0, 1.0), &cfg).unwrap();
        let mid = flow_endpoint(&m, &x, (0.0, tm), &cfg).unwrap();
        let split_run = flow_endpoint(&m, &mid, (tm, 1.0), &cfg).unwrap();
        prop_assert_eq!(
            direct.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            split_run.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let traj = flow(&m, &x, (0.0, 1.0), &cfg).unwrap();
        let tangent = tangent_flow(&m, &x, (0.0, 1.0), &cfg, false).unwrap();
        prop_assert_eq!(&traj.states, &tangent.trajectory.states);
    }

    #[test]
    fn margin_grows_with_epsilon(values in prop::collection::vec(0.0..1.0f64, 100), e1 in 0.0..0.5f64, e2 in 0.0..0.5f64) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        let spec = GridSpec::new(Bounds::default(), 10).unwrap();
        let grid = ScalarGrid { spec, values };
        let small = decision_margin(&grid, lo).unwrap();
        let large = decision_margin(&grid, hi).unwrap();
        prop_assert!(small.mask.iter().zip(&large.mask).all(|(&a, &b)| !a || b));
        prop_assert!(small.area <= large.area);
    }

    #[test]
    fn probe_success_grows_with_budget(angle in 0.0..std::f64::consts::TAU, x in point(), e1 in 0.0..0.5f64, e2 in 0.0..0.5f64) {
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        // Identity flow, decision boundary through the origin normal to `angle`.
        let (s, c) = angle.sin_cos();
        let m = zero_model(2, 1.0, OutputLayer { a: Mat::from_rows(&[&[0.0, 0.0], &[c, s]]), c: vec![0.0, 0.0] });
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let a = adversarial_probe(&m, &x, lo, 10, &cfg).success;
        let b = adversarial_probe(&m, &x, hi, 10, &cfg).success;
        prop_assert!(!a || b);
    }

    #[test]
    fn regularizer_is_monotone_in_delta(p in preset(), seed in any::<u64>(), d1 in 0.0..1.0f64, d2 in 0.0..1.0f64) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let m = model(p, seed, 1.0);
        let batch = random_batch(4, seed);
        let r = |delta| reg_term(&m, &batch, &RegConfig { delta, t1: 1.0, dt: 0.1 }).unwrap();
        prop_assert!(r(lo) <= r(hi));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn data_is_deterministic(n in 2usize..200, noise in 0.0..0.3f64, seed in any::<u64>(), frac in 0.1..0.9f64) {
        let a = make_moons(n, noise, seed).unwrap();
        prop_assert_eq!(&a, &make_moons(n, noise, seed).unwrap());
        prop_assert_eq!(split(&a, frac, seed).unwrap(), split(&a, frac, seed).unwrap());
    }

    #[test]
    fn fields_are_deterministic(p in preset(), seed in any::<u64>(), mode in 0usize..3) {
        let m = model(p, seed, 1.0);
        let opts = FieldOptions {
            resolution: 4,
            mode: [FieldMode::Full, FieldMode::Growing, FieldMode::Shrinking][mode],
            stride: 3,
            ..Default::default()
        };
        let a = ftle_field(&m, &opts, &reduced_flow()).unwrap();
        let b = ftle_field(&m, &opts, &reduced_flow()).unwrap();
        prop_assert_eq!(a.frames.len(), b.frames.len());
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            prop_assert_eq!(
                fa.grid.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                fb.grid.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn training_is_deterministic(p in preset(), seed in 0u64..1000, gamma in prop_oneof![Just(0.0), 0.1..2.0f64]) {
        let ds = make_moons(16, 0.1, seed).unwrap();
        let (tr, te) = split(&ds, 0.25, seed).unwrap();
        let cfg = TrainConfig {
            gamma,
            t1_reg: 0.5,
            batch_size: 6,
            epochs: 2,
            seed,
            t_end: 1.0,
            probe_size: 4,
            ..Default::default()
        };
        let init = he_init(&p.skeleton(1.0), seed);
        let a = train(init.clone(), &tr, Some(&te), &cfg).unwrap();
        let b = train(init, &tr, Some(&te), &cfg).unwrap();
        prop_assert!(a.log.same_numbers(&b.log));
        prop_assert_eq!(
            a.model.params_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.model.params_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
