//! Fixed-step explicit Euler flow and its discrete tangent map.
//!
//! Steps always live on the global grid `t_n = n·dt`; an interval `[t₀, t₁]`
//! must start and end on grid points. Step `n` samples the schedule at its
//! left endpoint `t_{n−1}`, so restricting a trajectory to a sub-interval
//! replays exactly the same arithmetic.

use std::fmt::Write as _;

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;
use crate::model::NodeModel;

const GRID_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub dt: f64,
    pub t_end: f64,
}

impl FlowConfig {
    pub fn new(dt: f64, t_end: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(invalid(format!("dt must be positive, got {dt}")));
        }
        if !(t_end > 0.0) || !t_end.is_finite() {
            return Err(invalid(format!("final time must be positive, got {t_end}")));
        }
        let cfg = Self { dt, t_end };
        cfg.grid_index(t_end)
            .map_err(|_| invalid(format!("T={t_end} is not an integer multiple of dt={dt}")))?;
        Ok(cfg)
    }

    /// Total number of Euler steps `N = T/dt`.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt).round() as usize
    }

    /// Grid index of `t`, if `t/dt` is within `1e-9` of an integer.
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        let r = t / self.dt;
        let n = r.round();
        if n < 0.0 || (r - n).abs() > GRID_TOL {
            return Err(Error::Alignment {
                t0: t,
                t1: t,
                dt: self.dt,
            });
        }
        Ok(n as usize)
    }

    pub fn time(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Validates `[t0, t1] ⊆ [0, T]` on the grid and returns its step indices.
    pub fn step_range(&self, t0: f64, t1: f64) -> Result<(usize, usize)> {
        let align = |_| Error::Alignment { t0, t1, dt: self.dt };
        let n0 = self.grid_index(t0).map_err(align)?;
        let n1 = self.grid_index(t1).map_err(align)?;
        if n1 <= n0 {
            return Err(invalid(format!("empty interval [{t0}, {t1}]")));
        }
        if n1 > self.steps() {
            return Err(invalid(format!("interval end {t1} beyond final time {}", self.t_end)));
        }
        Ok((n0, n1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &[f64] {
        self.states.last().expect("trajectory has at least one state")
    }

    /// `t,x1,x2,…` with one row per grid time.
    pub fn to_csv(&self) -> String {
        let d = self.states.first().map_or(0, Vec::len);
        let mut out = String::from("t");
        for i in 1..=d {
            let _ = write!(out, ",x{i}");
        }
        out.push('\n');
        for (t, x) in self.times.iter().zip(&self.states) {
            let _ = write!(out, "{t}");
            for v in x {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TangentFlowResult {
    pub trajectory: Trajectory,
    /// `Y_n` for every grid time of the interval (starting with `Id`), when requested.
    pub jacobians: Option<Vec<Mat>>,
    pub final_jacobian: Mat,
}

fn check_model(model: &NodeModel, cfg: &FlowConfig, x0: &[f64]) -> Result<()> {
    if x0.len() != model.dim() {
        return Err(invalid(format!(
            "initial state has dimension {}, model expects {}",
            x0.len(),
            model.dim()
        )));
    }
    if cfg.t_end > model.t_end() * (1.0 + 1e-12) {
        return Err(invalid(format!(
            "flow horizon {} exceeds schedule horizon {}",
            cfg.t_end,
            model.t_end()
        )));
    }
    Ok(())
}

#[inline]
fn euler_update(x: &mut [f64], f: &[f64], dt: f64) {
    for (xi, fi) in x.iter_mut().zip(f) {
        *xi += dt * fi;
    }
}

/// Euler trajectory of `ẋ = f(θ(t), x)` over `[t0, t1]` starting from `x0` at `t0`.
pub fn flow(model: &NodeModel, x0: &[f64], interval: (f64, f64), cfg: &FlowConfig) -> Result<Trajectory> {
    check_model(model, cfg, x0)?;
    let (n0, n1) = cfg.step_range(interval.0, interval.1)?;
    let mut x = x0.to_vec();
    let mut ws = model.field.workspace();
    let mut times = Vec::with_capacity(n1 - n0 + 1);
    let mut states = Vec::with_capacity(n1 - n0 + 1);
    times.push(cfg.time(n0));
    states.push(x.clone());
    for n in n0 + 1..=n1 {
        let block = model.schedule.block(model.schedule.block_at_step(n - 1, cfg.dt));
        let f = model.field.eval_ws(block, &x, &mut ws);
        euler_update(&mut x, f, cfg.dt);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n });
        }
        times.push(cfg.time(n));
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Endpoint of the flow without storing the trajectory.
pub fn flow_endpoint(model: &NodeModel, x0: &[f64], interval: (f64, f64), cfg: &FlowConfig) -> Result<Vec<f64>> {
    check_model(model, cfg, x0)?;
    let (n0, n1) = cfg.step_range(interval.0, interval.1)?;
    let mut x = x0.to_vec();
    let mut ws = model.field.workspace();
    for n in n0 + 1..=n1 {
        let block = model.schedule.block(model.schedule.block_at_step(n - 1, cfg.dt));
        let f = model.field.eval_ws(block, &x, &mut ws);
        euler_update(&mut x, f, cfg.dt);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n });
        }
    }
    Ok(x)
}

/// Trajectory plus discrete tangent map `Y_n = (Id + dt·D_x f(t_{n−1}, x_{n−1}))·Y_{n−1}`,
/// with `Y = Id` at the interval start.
pub fn tangent_flow(
    model: &NodeModel,
    x0: &[f64],
    interval: (f64, f64),
    cfg: &FlowConfig,
    record_intermediate: bool,
) -> Result<TangentFlowResult> {
    check_model(model, cfg, x0)?;
    let (n0, n1) = cfg.step_range(interval.0, interval.1)?;
    let d = model.dim();
    let mut x = x0.to_vec();
    let mut ws = model.field.workspace();
    let mut y = Mat::identity(d);
    let mut times = Vec::with_capacity(n1 - n0 + 1);
    let mut states = Vec::with_capacity(n1 - n0 + 1);
    let mut jacobians = record_intermediate.then(|| Vec::with_capacity(n1 - n0 + 1));
    times.push(cfg.time(n0));
    states.push(x.clone());
    if let Some(js) = jacobians.as_mut() {
        js.push(y.clone());
    }
    for n in n0 + 1..=n1 {
        let block = model.schedule.block(model.schedule.block_at_step(n - 1, cfg.dt));
        model.field.eval_ws(block, &x, &mut ws);
        let mut step = model.field.jacobian_ws(block, &ws).scale(cfg.dt);
        for i in 0..d {
            step[(i, i)] += 1.0;
        }
        y = step.matmul(&y);
        euler_update(&mut x, ws.output(), cfg.dt);
        if !x.iter().all(|v| v.is_finite()) || !y.is_finite() {
            return Err(Error::Divergence { step: n });
        }
        times.push(cfg.time(n));
        states.push(x.clone());
        if let Some(js) = jacobians.as_mut() {
            js.push(y.clone());
        }
    }
    Ok(TangentFlowResult {
        trajectory: Trajectory { times, states },
        jacobians,
        final_jacobian: y,
    })
}

/// Residual recursion `x_k = x_{k−1} + f(θ_k, x_{k−1})`, one update per block.
pub fn resnet_forward(model: &NodeModel, x0: &[f64]) -> Vec<Vec<f64>> {
    let mut states = vec![x0.to_vec()];
    let mut x = x0.to_vec();
    for k in 0..model.schedule.num_blocks() {
        let f = model.field.eval_unchecked(model.schedule.block(k), &x);
        for (xi, fi) in x.iter_mut().zip(&f) {
            *xi += fi;
        }
        states.push(x.clone());
    }
    states
}

/// Whether the unit-step Euler flow reproduces the residual recursion bit for bit.
///
/// Requires a schedule of unit-length blocks (`T = K`); anything else is `false`.
pub fn resnet_step_equivalence(model: &NodeModel, x0: &[f64]) -> bool {
    let k = model.schedule.num_blocks();
    let unit_blocks = model
        .schedule
        .breakpoints()
        .iter()
        .enumerate()
        .all(|(i, &b)| b == i as f64);
    if !unit_blocks {
        return false;
    }
    let Ok(cfg) = FlowConfig::new(1.0, k as f64) else {
        return false;
    };
    let Ok(traj) = flow(model, x0, (0.0, k as f64), &cfg) else {
        return false;
    };
    states_bitwise_equal(&traj.states, &resnet_forward(model, x0))
}

pub fn states_bitwise_equal(a: &[Vec<f64>], b: &[Vec<f64>]) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b)
            .all(|(x, y)| x.len() == y.len() && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_model, zero_model, OutputLayer};

    #[test]
    fn zero_field_is_constant() {
        let m = zero_model(2, 10.0, OutputLayer::identity(2));
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        let t = flow(&m, &[0.3, -1.2], (0.0, 10.0), &cfg).unwrap();
        assert_eq!(t.states.len(), 101);
        assert!(t.states.iter().all(|s| s == &vec![0.3, -1.2]));
        let tf = tangent_flow(&m, &[0.3, -1.2], (0.0, 10.0), &cfg, false).unwrap();
        assert_eq!(tf.final_jacobian, Mat::identity(2));
    }

    #[test]
    fn linear_decay() {
        let m = linear_model(Mat::diag(&[-1.0]), 10.0);
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        let t = flow(&m, &[1.0], (0.0, 0.1), &cfg).unwrap();
        assert!((t.last()[0] - 0.9).abs() < 1e-15);
        let t = flow(&m, &[1.0], (0.0, 10.0), &cfg).unwrap();
        // (1 − dt)^N
        let expect = 0.9f64.powi(100);
        assert!((t.last()[0] - expect).abs() < 1e-15 * 100.0);
        assert!((t.last()[0] - 2.6561398887587544e-5).abs() < 1e-15);
    }

    #[test]
    fn one_step_tangent_is_id_plus_dt_a() {
        let a = Mat::from_rows(&[&[0.3, -1.0], &[2.0, 0.5]]);
        let m = linear_model(a.clone(), 1.0);
        let cfg = FlowConfig::new(0.1, 1.0).unwrap();
        let r = tangent_flow(&m, &[0.2, 0.2], (0.0, 0.1), &cfg, true).unwrap();
        let expect = Mat::identity(2).add(&a.scale(0.1));
        assert!(r.final_jacobian.sub(&expect).max_abs() < 1e-15);
        assert_eq!(r.jacobians.unwrap().len(), 2);
    }

    #[test]
    fn unaligned_interval_rejected() {
        let m = zero_model(2, 10.0, OutputLayer::identity(2));
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        assert!(matches!(
            flow(&m, &[0.0, 0.0], (0.0, 0.25), &cfg),
            Err(Error::Alignment { .. })
        ));
        assert!(flow(&m, &[0.0, 0.0], (0.0, 11.0), &cfg).is_err());
        assert!(FlowConfig::new(0.3, 1.0).is_err());
        assert!(FlowConfig::new(0.0, 1.0).is_err());
    }

    #[test]
    fn divergence_reports_step() {
        let m = linear_model(Mat::diag(&[1e200]), 10.0);
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        match flow(&m, &[1e200], (0.0, 10.0), &cfg) {
            Err(Error::Divergence { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn csv_layout() {
        let m = zero_model(2, 1.0, OutputLayer::identity(2));
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let csv = flow(&m, &[1.0, 2.0], (0.0, 1.0), &cfg).unwrap().to_csv();
        assert_eq!(csv, "t,x1,x2\n0,1,2\n0.5,1,2\n1,1,2\n");
    }
}
