use crate::error::{invalid, Result};
use crate::integrator::{flow_endpoint, FlowConfig};
use crate::linalg::{sym_eig, Mat};
use crate::model::{NodeModel, Preset};
use crate::rng::{streams, Rng};
use crate::vecfield::TensorKind;

/// Fills `m` with `N(0, 2/fan_in)` draws, `fan_in = m.cols()`.
pub fn he_fill(m: &mut Mat, rng: &mut Rng) {
    let sd = (2.0 / m.cols() as f64).sqrt();
    m.data_mut().iter_mut().for_each(|v| *v = sd * rng.normal());
}

/// He initialization on top of `skeleton`.
///
/// Trainable `W`, `V` and the readout `A` get `N(0, 2/fan_in)`; trainable
/// `b`, `a`, `c` are zeroed; frozen tensors keep the skeleton's values.
/// Draw order follows the flat parameter order.
pub fn he_init(skeleton: &NodeModel, seed: u64) -> NodeModel {
    let mut m = skeleton.clone();
    let mut rng = Rng::new(seed, streams::INIT);
    let frozen = m.field.frozen().to_vec();
    for k in 0..m.schedule.num_blocks() {
        for (layer, flags) in m.schedule.block_mut(k).iter_mut().zip(&frozen) {
            if !flags.get(TensorKind::W) {
                he_fill(&mut layer.w, &mut rng);
            }
            if !flags.get(TensorKind::B) {
                layer.b.iter_mut().for_each(|v| *v = 0.0);
            }
            if !flags.get(TensorKind::V) {
                he_fill(&mut layer.v, &mut rng);
            }
            if !flags.get(TensorKind::A) {
                layer.a.iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
    he_fill(&mut m.output.a, &mut rng);
    m.output.c.iter_mut().for_each(|v| *v = 0.0);
    m
}

/// Starting point of every training run of `preset`.
pub fn initial_model(preset: Preset, t_end: f64, seed: u64) -> NodeModel {
    he_init(&preset.skeleton(t_end), seed)
}

/// Replaces the readout `(A, c)` by the least-squares affine map from the
/// time-`T` states of `inputs` to `labels` (pseudo-inverse of the normal
/// equations, so collapsed states are fine).
pub fn fit_readout(model: &mut NodeModel, inputs: &[[f64; 2]], labels: &[[f64; 2]], cfg: &FlowConfig) -> Result<()> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(invalid("readout fit needs matching, nonempty inputs and labels"));
    }
    let d = model.dim();
    let p = d + 1;
    let mut gram = Mat::zeros(p, p);
    let mut rhs = Mat::zeros(p, 2);
    let mut phi = vec![1.0; p];
    for (x, y) in inputs.iter().zip(labels) {
        let z = flow_endpoint(model, x, (0.0, cfg.t_end), cfg)?;
        phi[..d].copy_from_slice(&z);
        for i in 0..p {
            for j in 0..p {
                gram[(i, j)] += phi[i] * phi[j];
            }
            for k in 0..2 {
                rhs[(i, k)] += phi[i] * y[k];
            }
        }
    }
    let eig = sym_eig(&gram)?;
    let top = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut coef = Mat::zeros(p, 2);
    for j in 0..p {
        let mu = eig.eigenvalues[j];
        if mu <= 1e-12 * top {
            continue;
        }
        let v = eig.vector(j);
        for k in 0..2 {
            let proj: f64 = (0..p).map(|i| v[i] * rhs[(i, k)]).sum::<f64>() / mu;
            for i in 0..p {
                coef[(i, k)] += proj * v[i];
            }
        }
    }
    for k in 0..2 {
        for i in 0..d {
            model.output.a[(k, i)] = coef[(i, k)];
        }
        model.output.c[k] = coef[(d, k)];
    }
    Ok(())
}
