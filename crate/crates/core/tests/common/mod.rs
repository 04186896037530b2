#![allow(dead_code)]

use ftle_node::integrator::FlowConfig;
use ftle_node::model::{NodeModel, Preset};
use ftle_node::rng::{streams, Rng};
use ftle_node::training::{self, Batch, RegConfig};

/// Reduced model on `[0, 1]`: He init plus small random biases and shifts so
/// that no trainable entry sits at an exact zero.
pub fn reduced_model(preset: Preset, seed: u64) -> NodeModel {
    let mut m = training::he_init(&preset.skeleton(1.0), seed);
    let mut rng = Rng::new(seed, streams::TEST);
    let mask = m.trainable_mask();
    let mut flat = m.params_flat();
    for (v, t) in flat.iter_mut().zip(mask) {
        if t && *v == 0.0 {
            *v = 0.3 * rng.normal();
        }
    }
    m.set_params_flat(&flat);
    m
}

pub fn reduced_flow() -> FlowConfig {
    FlowConfig::new(0.1, 1.0).unwrap()
}

pub fn random_batch(n: usize, seed: u64) -> Batch {
    let mut rng = Rng::new(seed, streams::TEST + 1);
    let inputs: Vec<[f64; 2]> = (0..n)
        .map(|_| [rng.uniform_in(-1.5, 1.5), rng.uniform_in(-1.5, 1.5)])
        .collect();
    let labels = (0..n)
        .map(|i| if i % 2 == 0 { [0.0, 1.0] } else { [0.0, -1.0] })
        .collect();
    Batch { inputs, labels }
}

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_abs: f64,
    pub failures: Vec<String>,
}

/// Central differences of `loss` against `analytic` on every trainable scalar.
pub fn fd_check(
    model: &NodeModel,
    analytic: &[f64],
    h: f64,
    rel_tol: f64,
    abs_floor: f64,
    loss: impl Fn(&NodeModel) -> f64,
) -> FdReport {
    let mask = model.trainable_mask();
    let base = model.params_flat();
    let mut probe = model.clone();
    let mut report = FdReport::default();
    for (i, trainable) in mask.iter().enumerate() {
        if !trainable {
            assert_eq!(analytic[i], 0.0, "frozen {} has gradient", model.param_label(i));
            continue;
        }
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_params_flat(&p);
        let up = loss(&probe);
        p[i] = base[i] - h;
        probe.set_params_flat(&p);
        let down = loss(&probe);
        let fd = (up - down) / (2.0 * h);
        let a = analytic[i];
        let diff = (fd - a).abs();
        let scale = fd.abs().max(a.abs());
        report.checked += 1;
        report.worst_abs = report.worst_abs.max(diff);
        if diff > abs_floor {
            report.worst_rel = report.worst_rel.max(diff / scale);
        }
        if diff > abs_floor.max(rel_tol * scale) {
            report
                .failures
                .push(format!("{}: analytic {a:e} vs fd {fd:e}", model.param_label(i)));
        }
    }
    report
}

pub fn reg_setup(preset: Preset) -> (NodeModel, Batch, RegConfig) {
    let reg = RegConfig {
        delta: 0.05,
        t1: 1.0,
        dt: 0.1,
    };
    for seed in 0..200 {
        let m = reduced_model(preset, 100 + seed);
        let b = random_batch(6, seed);
        let lams: Vec<f64> = b
            .inputs
            .iter()
            .map(|x| training::lambda_max(&m, x, &reg).unwrap())
            .collect();
        // Stay clear of the kink so central differences see a smooth function.
        let clear = lams.iter().all(|l| (l - reg.delta).abs() > 1e-2);
        let active = lams.iter().filter(|&&l| l > reg.delta).count();
        if clear && active >= 2 {
            return (m, b, reg);
        }
    }
    panic!("no reduced {preset} model with active regularizer samples");
}

/// `Σ ln|det(Id + dt·D_x f)|` along the Euler trajectory: the log-volume change
/// from per-step determinants, each close to 1 and free of cancellation.
pub fn log_volume(model: &NodeModel, x0: &[f64], t_end: f64, cfg: &FlowConfig) -> f64 {
    let traj = ftle_node::integrator::flow(model, x0, (0.0, t_end), cfg).unwrap();
    let steps = cfg.grid_index(t_end).unwrap();
    (0..steps)
        .map(|n| {
            let block = model.schedule.block(model.schedule.block_at_step(n, cfg.dt));
            let j = model.field.jacobian_x(block, &traj.states[n]).unwrap();
            let mut step = j.scale(cfg.dt);
            for i in 0..step.rows() {
                step[(i, i)] += 1.0;
            }
            step.det().abs().ln()
        })
        .sum()
}

/// Rounding in the accumulated tangent map costs about `κ·n·u` in `ln σ_min`.
pub fn log_volume_tolerance(reference: f64, singular_values: &[f64]) -> f64 {
    let kappa = singular_values[0] / singular_values[singular_values.len() - 1];
    1e-9 * (1.0 + reference.abs()) + 1e-13 * kappa
}
