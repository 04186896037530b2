//! A complete classifier: `x₀ ↦ L(Φ(T, x₀))`.
//!
//! Flat parameter order is fixed: schedule blocks in time order, layers in
//! composition order, tensors `W, b, V, a` row-major, then the output layer
//! `A` (row-major) and `c`.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;
use crate::vecfield::{Activation, FrozenFlags, LayerParams, LayeredVectorField, ParamSchedule, TensorKind};

/// Affine readout `z ↦ A z + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputLayer {
    pub a: Mat,
    pub c: Vec<f64>,
}

impl OutputLayer {
    pub fn identity(d: usize) -> Self {
        Self {
            a: Mat::identity(d),
            c: vec![0.0; d],
        }
    }

    pub fn zeros(out: usize, d: usize) -> Self {
        Self {
            a: Mat::zeros(out, d),
            c: vec![0.0; out],
        }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        let mut y = self.a.matvec(z);
        y.iter_mut().zip(&self.c).for_each(|(y, c)| *y += c);
        y
    }

    pub fn param_count(&self) -> usize {
        self.a.data().len() + self.c.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.c.iter().all(|v| v.is_finite())
    }
}

/// Neural ODE classifier: layered field, parameter schedule and readout.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeModel {
    pub field: LayeredVectorField,
    pub schedule: ParamSchedule,
    pub output: OutputLayer,
}

impl NodeModel {
    pub fn new(field: LayeredVectorField, schedule: ParamSchedule, output: OutputLayer) -> Result<Self> {
        for k in 0..schedule.num_blocks() {
            field.check_block(schedule.block(k))?;
        }
        if output.a.cols() != field.dim() || output.c.len() != output.a.rows() {
            return Err(invalid("output layer does not match state dimension"));
        }
        Ok(Self {
            field,
            schedule,
            output,
        })
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    pub fn t_end(&self) -> f64 {
        self.schedule.t_end()
    }

    pub fn num_params(&self) -> usize {
        self.schedule.num_blocks() * self.field.block_param_count() + self.output.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for block in self.schedule.blocks() {
            for layer in block {
                layer.flatten_into(&mut out);
            }
        }
        out.extend_from_slice(self.output.a.data());
        out.extend_from_slice(&self.output.c);
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "set_params_flat: length mismatch");
        let mut rest = flat;
        for k in 0..self.schedule.num_blocks() {
            for layer in self.schedule.block_mut(k).iter_mut() {
                rest = layer.assign_from(rest);
            }
        }
        let na = self.output.a.data().len();
        self.output.a.data_mut().copy_from_slice(&rest[..na]);
        self.output.c.copy_from_slice(&rest[na..]);
    }

    /// `true` for every trainable scalar, in flat order.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        for _ in 0..self.schedule.num_blocks() {
            for (shape, flags) in self.field.layers().iter().zip(self.field.frozen()) {
                for kind in TensorKind::ALL {
                    let (r, c) = shape.tensor_shape(kind);
                    mask.extend(std::iter::repeat_n(!flags.get(kind), r * c));
                }
            }
        }
        mask.extend(std::iter::repeat_n(true, self.output.param_count()));
        mask
    }

    /// Human-readable label of flat parameter `idx`, e.g. `block=2 layer=1 W[0,1]`.
    pub fn param_label(&self, idx: usize) -> String {
        let mut i = idx;
        for k in 0..self.schedule.num_blocks() {
            for (l, shape) in self.field.layers().iter().enumerate() {
                for kind in TensorKind::ALL {
                    let (r, c) = shape.tensor_shape(kind);
                    if i < r * c {
                        return format!("block={} layer={} {}[{},{}]", k + 1, l + 1, kind.symbol(), i / c, i % c);
                    }
                    i -= r * c;
                }
            }
        }
        let na = self.output.a.data().len();
        if i < na {
            let c = self.output.a.cols();
            format!("output A[{},{}]", i / c, i % c)
        } else {
            format!("output c[{}]", i - na)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.schedule
            .blocks()
            .iter()
            .all(|b| b.iter().all(LayerParams::is_finite))
            && self.output.is_finite()
    }
}

/// The two architectures studied on the moons data, plus their variants on a
/// shortened horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Autonomous: one block, two layers of width 5, `V₁ = Id` frozen.
    Ex1,
    /// Non-autonomous: five blocks of `tanh(W x + b)` on `[2(k−1), 2k)`.
    Ex2,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Ex1 => "ex1",
            Preset::Ex2 => "ex2",
        }
    }

    pub fn field(self) -> LayeredVectorField {
        match self {
            Preset::Ex1 => {
                // f₁ has no shift vector (a₁ ≡ 0) and V₁ = Id.
                let l1 = FrozenFlags {
                    v: true,
                    a: true,
                    ..Default::default()
                };
                LayeredVectorField::new(Activation::Tanh, &[2, 5, 5, 5, 2], vec![l1, FrozenFlags::default()])
                    .expect("valid preset")
            }
            Preset::Ex2 => {
                let l1 = FrozenFlags {
                    v: true,
                    a: true,
                    ..Default::default()
                };
                LayeredVectorField::new(Activation::Tanh, &[2, 2, 2], vec![l1]).expect("valid preset")
            }
        }
    }

    pub fn num_blocks(self) -> usize {
        match self {
            Preset::Ex1 => 1,
            Preset::Ex2 => 5,
        }
    }

    /// Zero parameters except the frozen identities, on `[0, t_end)`.
    pub fn skeleton(self, t_end: f64) -> NodeModel {
        let field = self.field();
        let blocks: Vec<Vec<LayerParams>> = (0..self.num_blocks())
            .map(|_| {
                let mut b = field.zero_block();
                b[0].v = Mat::identity(field.layers()[0].hidden);
                b
            })
            .collect();
        let schedule = ParamSchedule::uniform(t_end, blocks).expect("valid preset schedule");
        NodeModel::new(field, schedule, OutputLayer::zeros(2, 2)).expect("valid preset")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ex1" => Ok(Preset::Ex1),
            "ex2" => Ok(Preset::Ex2),
            other => Err(invalid(format!("unknown architecture '{other}' (expected ex1 or ex2)"))),
        }
    }
}

/// Linear field `ẋ = A x` on `[0, t_end)`, with identity readout.
pub fn linear_model(a: Mat, t_end: f64) -> NodeModel {
    let d = a.rows();
    let field =
        LayeredVectorField::new(Activation::Identity, &[d, d, d], vec![FrozenFlags::default()]).expect("square system");
    let block = vec![LayerParams {
        w: a,
        b: vec![0.0; d],
        v: Mat::identity(d),
        a: vec![0.0; d],
    }];
    let schedule = ParamSchedule::new(vec![0.0, t_end], vec![block]).expect("valid interval");
    NodeModel::new(field, schedule, OutputLayer::identity(d)).expect("consistent")
}

/// Zero field (`Φ = id`) with the given readout.
pub fn zero_model(d: usize, t_end: f64, output: OutputLayer) -> NodeModel {
    let field =
        LayeredVectorField::new(Activation::Tanh, &[d, d, d], vec![FrozenFlags::default()]).expect("valid dims");
    let schedule = ParamSchedule::new(vec![0.0, t_end], vec![field.zero_block()]).expect("valid interval");
    NodeModel::new(field, schedule, output).expect("consistent")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ex1_shape() {
        let m = Preset::Ex1.skeleton(10.0);
        assert_eq!(m.field.dims(), vec![2, 5, 5, 5, 2]);
        assert_eq!(m.schedule.num_blocks(), 1);
        // W1 10 + b1 5 + V1 25 + a1 5 + W2 25 + b2 5 + V2 10 + a2 2 + A 4 + c 2
        assert_eq!(m.num_params(), 93);
        let trainable = m.trainable_mask().iter().filter(|&&t| t).count();
        assert_eq!(trainable, 93 - 30);
        assert_eq!(m.schedule.block(0)[0].v, Mat::identity(5));
    }

    #[test]
    fn ex2_shape() {
        let m = Preset::Ex2.skeleton(10.0);
        assert_eq!(m.schedule.breakpoints(), &[0.0, 2.0, 4.0, 6.0, 8.0, 10.0]);
        // per block: W 4 + b 2 (+ frozen V 4, a 2)
        assert_eq!(m.num_params(), 5 * 12 + 6);
        assert_eq!(m.trainable_mask().iter().filter(|&&t| t).count(), 5 * 6 + 6);
    }

    #[test]
    fn flat_roundtrip_and_labels() {
        let mut m = Preset::Ex2.skeleton(10.0);
        let flat: Vec<f64> = (0..m.num_params()).map(|i| i as f64 * 0.5).collect();
        m.set_params_flat(&flat);
        assert_eq!(m.params_flat(), flat);
        assert_eq!(m.schedule.block(1)[0].w[(0, 1)], 13.0 * 0.5);
        assert_eq!(m.param_label(13), "block=2 layer=1 W[0,1]");
        assert_eq!(m.param_label(m.num_params() - 1), "output c[1]");
    }
}
