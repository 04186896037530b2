//! Losses and their exact gradients through the Euler integrator.
//!
//! `grad_mse` is the usual adjoint recursion
//! `x̄_{n−1} = x̄_n + dt·D_x fᵀ x̄_n`, `θ̄ += dt·∂(x̄_nᵀ f)/∂θ`.
//!
//! `grad_reg` treats `(x_n, Y_n)` as the state. With
//! `Y_n = J_n Y_{n−1}`, `J_n = Id + dt·D_x f(x_{n−1})` and the seed
//! `Ȳ_N = u₁v₁ᵀ/(T₁σ₁)`, `x̄_N = 0`, one reverse sweep gives
//!
//! ```text
//! M       = dt · Ȳ_n Y_{n−1}ᵀ
//! φ(θ, x) = dt · x̄_nᵀ f(θ, x) + ⟨M, D_x f(θ, x)⟩
//! x̄_{n−1} = x̄_n + ∂φ/∂x,   θ̄ += ∂φ/∂θ,   Ȳ_{n−1} = J_nᵀ Ȳ_n
//! ```
//!
//! where the second-order terms come from [`LayeredVectorField::adjoint`].
//!
//! [`LayeredVectorField::adjoint`]: crate::vecfield::LayeredVectorField::adjoint

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::integrator::{flow_endpoint, tangent_flow, FlowConfig};
use crate::linalg::{svd, Mat};
use crate::model::{NodeModel, OutputLayer};
use crate::vecfield::{LayerParams, Workspace};

/// Inputs with their label vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Batch {
    pub inputs: Vec<[f64; 2]>,
    pub labels: Vec<[f64; 2]>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Self {
        Self {
            inputs: idx.iter().map(|&i| ds.inputs[i]).collect(),
            labels: idx.iter().map(|&i| ds.label(i)).collect(),
        }
    }

    pub fn full(ds: &Dataset) -> Self {
        Self {
            inputs: ds.inputs.clone(),
            labels: (0..ds.len()).map(|i| ds.label(i)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Gradient laid out like the model parameters; frozen tensors are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub blocks: Vec<Vec<LayerParams>>,
    pub output: OutputLayer,
    /// Samples whose top singular pair was numerically degenerate.
    pub flagged: usize,
}

impl GradientBundle {
    pub fn zeros(model: &NodeModel) -> Self {
        Self {
            blocks: (0..model.schedule.num_blocks())
                .map(|_| model.field.zero_block())
                .collect(),
            output: OutputLayer::zeros(model.output.a.rows(), model.dim()),
            flagged: 0,
        }
    }

    pub fn add_scaled(&mut self, s: f64, other: &GradientBundle) {
        for (bs, bo) in self.blocks.iter_mut().zip(&other.blocks) {
            for (ls, lo) in bs.iter_mut().zip(bo) {
                ls.add_scaled(s, lo);
            }
        }
        self.output.a.axpy(s, &other.output.a);
        self.output
            .c
            .iter_mut()
            .zip(&other.output.c)
            .for_each(|(a, b)| *a += s * b);
        self.flagged += other.flagged;
    }

    /// Same order as [`NodeModel::params_flat`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for block in &self.blocks {
            for layer in block {
                layer.flatten_into(&mut out);
            }
        }
        out.extend_from_slice(self.output.a.data());
        out.extend_from_slice(&self.output.c);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Settings of the FTLE penalty `mean(max{λ_max([0, T₁]), δ})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegConfig {
    pub delta: f64,
    pub t1: f64,
    pub dt: f64,
}

impl RegConfig {
    pub fn flow_config(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.dt, self.t1)
    }
}

fn with_sample(i: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Divergence { step } => Error::SampleDivergence { sample: i, step },
        other => other,
    }
}

fn check_batch(model: &NodeModel, batch: &Batch) -> Result<()> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    if batch.labels.len() != batch.len() {
        return Err(invalid("batch inputs and labels differ in length"));
    }
    if model.dim() != 2 || model.output.a.rows() != 2 {
        return Err(invalid("classifier expects a planar model with 2 outputs"));
    }
    Ok(())
}

/// `L(Φ(T, x₀))`
pub fn model_output(model: &NodeModel, x0: &[f64], cfg: &FlowConfig) -> Result<Vec<f64>> {
    let xt = flow_endpoint(model, x0, (0.0, cfg.t_end), cfg)?;
    Ok(model.output.apply(&xt))
}

/// `d_orange / (d_blue + d_orange)`; above 0.5 means blue.
pub fn pred_from_output(out: &[f64]) -> f64 {
    let db = (out[0] * out[0] + (out[1] - 1.0) * (out[1] - 1.0)).sqrt();
    let dor = (out[0] * out[0] + (out[1] + 1.0) * (out[1] + 1.0)).sqrt();
    let s = db + dor;
    if s == 0.0 {
        0.5
    } else {
        dor / s
    }
}

pub fn predict(model: &NodeModel, x0: &[f64], cfg: &FlowConfig) -> Result<f64> {
    Ok(pred_from_output(&model_output(model, x0, cfg)?))
}

/// Fraction of points whose prediction falls on the labelled side of 0.5.
pub fn accuracy(model: &NodeModel, ds: &Dataset, cfg: &FlowConfig) -> Result<f64> {
    if ds.is_empty() {
        return Err(invalid("empty dataset"));
    }
    let correct: Vec<bool> = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let p = predict(model, &ds.inputs[i], cfg).map_err(with_sample(i))?;
            Ok((p > 0.5) == (ds.classes[i] == crate::data::Class::Blue))
        })
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / ds.len() as f64)
}

pub fn mse_loss(model: &NodeModel, batch: &Batch, cfg: &FlowConfig) -> Result<f64> {
    check_batch(model, batch)?;
    let errs: Vec<f64> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            let out = model_output(model, &batch.inputs[i], cfg).map_err(with_sample(i))?;
            let y = batch.labels[i];
            Ok((out[0] - y[0]).powi(2) + (out[1] - y[1]).powi(2))
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / batch.len() as f64)
}

/// `λ_max([0, T₁], x₀)` on the regularizer grid.
pub fn lambda_max(model: &NodeModel, x0: &[f64], reg: &RegConfig) -> Result<f64> {
    let rc = reg.flow_config()?;
    let tf = tangent_flow(model, x0, (0.0, reg.t1), &rc, false)?;
    let s = svd(&tf.final_jacobian)?;
    if s.singular_values[0] <= 0.0 {
        return Err(Error::DegenerateTangent(s.singular_values[0]));
    }
    Ok(s.singular_values[0].ln() / reg.t1)
}

pub fn reg_term(model: &NodeModel, batch: &Batch, reg: &RegConfig) -> Result<f64> {
    check_batch(model, batch)?;
    reg.flow_config()?;
    let vals: Vec<f64> = (0..batch.len())
        .into_par_iter()
        .map(|i| {
            Ok(lambda_max(model, &batch.inputs[i], reg)
                .map_err(with_sample(i))?
                .max(reg.delta))
        })
        .collect::<Result<_>>()?;
    Ok(vals.iter().sum::<f64>() / batch.len() as f64)
}

/// Gradient of `weight · ‖L Φ(T, x₀) − y‖²`; also returns the unweighted error.
pub fn sample_mse_grad(
    model: &NodeModel,
    x0: &[f64],
    y: &[f64; 2],
    cfg: &FlowConfig,
    weight: f64,
) -> Result<(f64, GradientBundle)> {
    let mut ws = model.field.workspace();
    sample_mse_grad_ws(model, x0, y, cfg, weight, &mut ws)
}

fn sample_mse_grad_ws(
    model: &NodeModel,
    x0: &[f64],
    y: &[f64; 2],
    cfg: &FlowConfig,
    weight: f64,
    ws: &mut Workspace,
) -> Result<(f64, GradientBundle)> {
    let d = model.dim();
    let n_steps = cfg.steps();
    let dt = cfg.dt;
    let mut states = vec![0.0; (n_steps + 1) * d];
    states[..d].copy_from_slice(x0);
    for n in 1..=n_steps {
        let k = model.schedule.block_at_step(n - 1, dt);
        let (prev, next) = states[(n - 1) * d..(n + 1) * d].split_at_mut(d);
        let f = model.field.eval_ws(model.schedule.block(k), prev, ws);
        for i in 0..d {
            next[i] = prev[i] + dt * f[i];
        }
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence { step: n });
        }
    }
    let xt = &states[n_steps * d..];
    let out = model.output.apply(xt);
    let r = [out[0] - y[0], out[1] - y[1]];
    let err = r[0] * r[0] + r[1] * r[1];

    let mut g = GradientBundle::zeros(model);
    let gout = [2.0 * weight * r[0], 2.0 * weight * r[1]];
    g.output.a = Mat::outer(&gout, xt);
    g.output.c = gout.to_vec();
    let mut xbar = model.output.a.matvec_t(&gout);
    let mut scaled = vec![0.0; d];
    for n in (1..=n_steps).rev() {
        let k = model.schedule.block_at_step(n - 1, dt);
        let block = model.schedule.block(k);
        model.field.eval_ws(block, &states[(n - 1) * d..n * d], ws);
        scaled.iter_mut().zip(&xbar).for_each(|(s, x)| *s = dt * x);
        model
            .field
            .vjp_accumulate_ws(block, &scaled, ws, &mut g.blocks[k], &mut xbar);
    }
    for block in &mut g.blocks {
        model.field.zero_frozen(block);
    }
    Ok((err, g))
}

/// Gradient of `weight · max{λ_max([0, T₁], x₀), δ}`; zero when `λ_max ≤ δ`.
/// Also returns the thresholded value.
pub fn sample_reg_grad(model: &NodeModel, x0: &[f64], reg: &RegConfig, weight: f64) -> Result<(f64, GradientBundle)> {
    let rc = reg.flow_config()?;
    let tf = tangent_flow(model, x0, (0.0, reg.t1), &rc, true)?;
    let s = svd(&tf.final_jacobian)?;
    let sigma1 = s.singular_values[0];
    let lam = sigma1.ln() / reg.t1;
    let mut g = GradientBundle::zeros(model);
    if lam <= reg.delta {
        return Ok((reg.delta, g));
    }
    if s.singular_values.len() > 1 && sigma1 - s.singular_values[1] < 1e-9 * sigma1 {
        log::warn!("top singular pair nearly degenerate at x0={x0:?}; gradient uses the chosen u1, v1");
        g.flagged = 1;
    }

    let ys = tf.jacobians.expect("recorded");
    let states = &tf.trajectory.states;
    let d = model.dim();
    let dt = rc.dt;
    let mut ybar = Mat::outer(&s.left(0), &s.right(0)).scale(weight / (reg.t1 * sigma1));
    let mut xbar = vec![0.0; d];
    for n in (1..states.len()).rev() {
        let k = model.schedule.block_at_step(n - 1, dt);
        let block = model.schedule.block(k);
        let x_prev = &states[n - 1];
        let m = ybar.matmul(&ys[n - 1].transpose()).scale(dt);
        let scaled: Vec<f64> = xbar.iter().map(|v| dt * v).collect();
        let gx = model
            .field
            .adjoint_accumulate(block, x_prev, &scaled, Some(&m), &mut g.blocks[k]);
        xbar.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);

        let (_, df) = model.field.eval_with_jacobian(block, x_prev);
        let mut jac = df.scale(dt);
        for i in 0..d {
            jac[(i, i)] += 1.0;
        }
        ybar = jac.transpose().matmul(&ybar);
    }
    for block in &mut g.blocks {
        model.field.zero_frozen(block);
    }
    Ok((lam, g))
}

/// Sums per-sample results in index order so that the total does not
/// depend on how the parallel map was scheduled.
fn reduce(model: &NodeModel, parts: Vec<(f64, GradientBundle)>) -> (f64, GradientBundle) {
    let mut total = GradientBundle::zeros(model);
    let mut value = 0.0;
    for (v, g) in &parts {
        value += v;
        total.add_scaled(1.0, g);
    }
    (value, total)
}

/// MSE over the batch and its gradient.
pub fn mse_and_grad(model: &NodeModel, batch: &Batch, cfg: &FlowConfig) -> Result<(f64, GradientBundle)> {
    check_batch(model, batch)?;
    let w = 1.0 / batch.len() as f64;
    let parts: Vec<_> = (0..batch.len())
        .into_par_iter()
        .map_init(
            || model.field.workspace(),
            |ws, i| sample_mse_grad_ws(model, &batch.inputs[i], &batch.labels[i], cfg, w, ws).map_err(with_sample(i)),
        )
        .collect::<Result<_>>()?;
    let (sum, g) = reduce(model, parts);
    Ok((sum * w, g))
}

pub fn grad_mse(model: &NodeModel, batch: &Batch, cfg: &FlowConfig) -> Result<GradientBundle> {
    Ok(mse_and_grad(model, batch, cfg)?.1)
}

/// Regularizer value over the batch and its gradient.
pub fn reg_and_grad(model: &NodeModel, batch: &Batch, reg: &RegConfig) -> Result<(f64, GradientBundle)> {
    check_batch(model, batch)?;
    let w = 1.0 / batch.len() as f64;
    let parts: Vec<_> = (0..batch.len())
        .into_par_iter()
        .map(|i| sample_reg_grad(model, &batch.inputs[i], reg, w).map_err(with_sample(i)))
        .collect::<Result<_>>()?;
    let (sum, g) = reduce(model, parts);
    if g.flagged > 0 {
        log::warn!("{} samples had a nearly degenerate top singular value", g.flagged);
    }
    Ok((sum * w, g))
}

pub fn grad_reg(model: &NodeModel, batch: &Batch, reg: &RegConfig) -> Result<GradientBundle> {
    Ok(reg_and_grad(model, batch, reg)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_model, zero_model, Preset};

    #[test]
    fn pred_examples() {
        assert_eq!(pred_from_output(&[0.0, 1.0]), 1.0);
        assert_eq!(pred_from_output(&[0.0, 0.0]), 0.5);
        assert!((pred_from_output(&[0.0, 0.5]) - 0.75).abs() < 1e-15);
    }

    fn batch(inputs: &[[f64; 2]], labels: &[[f64; 2]]) -> Batch {
        Batch {
            inputs: inputs.to_vec(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn mse_examples() {
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let m = zero_model(2, 1.0, OutputLayer::zeros(2, 2));
        // Output is always (0, 0).
        assert_eq!(mse_loss(&m, &batch(&[[0.3, 0.1]], &[[0.0, 1.0]]), &cfg).unwrap(), 1.0);
        let b = batch(&[[0.0, 0.0], [1.0, 1.0]], &[[1.0, 0.0], [0.0, 2.0]]);
        assert_eq!(mse_loss(&m, &b, &cfg).unwrap(), 2.5);
        let id = zero_model(2, 1.0, OutputLayer::identity(2));
        let exact = batch(&[[0.0, 1.0], [0.0, -1.0]], &[[0.0, 1.0], [0.0, -1.0]]);
        assert_eq!(mse_loss(&id, &exact, &cfg).unwrap(), 0.0);
        assert!(grad_mse(&id, &exact, &cfg).unwrap().max_abs() == 0.0);
    }

    #[test]
    fn reg_examples() {
        let cfg = RegConfig {
            delta: 0.05,
            t1: 1.0,
            dt: 0.1,
        };
        let m = zero_model(2, 1.0, OutputLayer::identity(2));
        let b = batch(&[[0.3, 0.1], [-1.0, 0.0]], &[[0.0, 1.0], [0.0, -1.0]]);
        assert_eq!(reg_term(&m, &b, &cfg).unwrap(), 0.05);
        assert_eq!(grad_reg(&m, &b, &cfg).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn linear_reg_closed_form() {
        // λ_max = ln(1 + dt·a)/dt, ∂λ_max/∂a = 1/(1 + dt·a).
        let a = 0.7;
        let dt = 0.1;
        let m = linear_model(Mat::diag(&[a, -a]), 1.0);
        let reg = RegConfig {
            delta: 0.05,
            t1: 1.0,
            dt,
        };
        let lam = lambda_max(&m, &[0.2, 0.4], &reg).unwrap();
        assert!((lam - (1.0 + dt * a).ln() / dt).abs() < 1e-12);
        let (_, g) = sample_reg_grad(&m, &[0.2, 0.4], &reg, 1.0).unwrap();
        let dw = &g.blocks[0][0].w;
        assert!((dw[(0, 0)] - 1.0 / (1.0 + dt * a)).abs() < 1e-8, "{}", dw[(0, 0)]);
        assert!(dw[(1, 1)].abs() < 1e-12 && dw[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn frozen_entries_zero() {
        let m = crate::training::he_init(&Preset::Ex1.skeleton(1.0), 1);
        let cfg = FlowConfig::new(0.1, 1.0).unwrap();
        let b = batch(&[[0.3, -0.2], [0.9, 0.4]], &[[0.0, 1.0], [0.0, -1.0]]);
        let g = grad_mse(&m, &b, &cfg).unwrap();
        assert!(g.blocks[0][0].v.data().iter().all(|&v| v == 0.0));
        assert!(g.blocks[0][0].a.iter().all(|&v| v == 0.0));
        let mask = m.trainable_mask();
        for (v, t) in g.flat().iter().zip(mask) {
            if !t {
                assert_eq!(*v, 0.0);
            }
        }
    }
}
