//! Layered vector fields `f = f_ℓ ∘ … ∘ f₁` with
//! `f_i(y) = V_i σ(W_i y + b_i) + a_i`, and piecewise-constant parameter
//! schedules over `[0, T)`.
//!
//! Besides evaluation this module supplies the analytic derivatives of one
//! field evaluation that every higher-level gradient is assembled from:
//! the state Jacobian `D_x f`, the parameter VJP of `cᵀ f`, and the
//! second-order adjoint of `cᵀ f + ⟨M, D_x f⟩` used when differentiating
//! tangent maps with respect to parameters.

use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;

/// Elementwise nonlinearity.
///
/// `Identity` turns a layer into an affine map; it exists for linear test
/// systems whose flows have closed forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn value(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
            Activation::Identity => z,
        }
    }

    /// `(σ(z), σ'(z), σ''(z))`
    #[inline]
    pub fn derivatives(self, z: f64) -> (f64, f64, f64) {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                (t, d1, -2.0 * t * d1)
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                let d1 = s * (1.0 - s);
                (s, d1, d1 * (1.0 - 2.0 * s))
            }
            Activation::Identity => (z, 1.0, 0.0),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" | "logistic" => Ok(Activation::Sigmoid),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(invalid(format!("unknown activation '{other}'"))),
        }
    }
}

/// Tensor slots of one vector-field layer, in flattening order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TensorKind {
    W,
    B,
    V,
    A,
}

impl TensorKind {
    pub const ALL: [TensorKind; 4] = [TensorKind::W, TensorKind::B, TensorKind::V, TensorKind::A];

    pub fn symbol(self) -> &'static str {
        match self {
            TensorKind::W => "W",
            TensorKind::B => "b",
            TensorKind::V => "V",
            TensorKind::A => "a",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "W" => Some(TensorKind::W),
            "b" => Some(TensorKind::B),
            "V" => Some(TensorKind::V),
            "a" => Some(TensorKind::A),
            _ => None,
        }
    }
}

/// Widths of one layer: `f_i : R^input → R^output` through `hidden` units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl LayerShape {
    pub fn tensor_shape(&self, kind: TensorKind) -> (usize, usize) {
        match kind {
            TensorKind::W => (self.hidden, self.input),
            TensorKind::B => (self.hidden, 1),
            TensorKind::V => (self.output, self.hidden),
            TensorKind::A => (self.output, 1),
        }
    }

    pub fn param_count(&self) -> usize {
        TensorKind::ALL
            .iter()
            .map(|&k| {
                let (r, c) = self.tensor_shape(k);
                r * c
            })
            .sum()
    }
}

/// Which tensors of a layer are held fixed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrozenFlags {
    pub w: bool,
    pub b: bool,
    pub v: bool,
    pub a: bool,
}

impl FrozenFlags {
    pub fn get(&self, kind: TensorKind) -> bool {
        match kind {
            TensorKind::W => self.w,
            TensorKind::B => self.b,
            TensorKind::V => self.v,
            TensorKind::A => self.a,
        }
    }

    pub fn set(&mut self, kind: TensorKind, frozen: bool) {
        match kind {
            TensorKind::W => self.w = frozen,
            TensorKind::B => self.b = frozen,
            TensorKind::V => self.v = frozen,
            TensorKind::A => self.a = frozen,
        }
    }
}

/// Parameters `(W, b, V, a)` of one layer. Also used as the gradient
/// container for the same layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Mat,
    pub b: Vec<f64>,
    pub v: Mat,
    pub a: Vec<f64>,
}

impl LayerParams {
    pub fn zeros(shape: &LayerShape) -> Self {
        Self {
            w: Mat::zeros(shape.hidden, shape.input),
            b: vec![0.0; shape.hidden],
            v: Mat::zeros(shape.output, shape.hidden),
            a: vec![0.0; shape.output],
        }
    }

    pub fn shape(&self) -> LayerShape {
        LayerShape {
            input: self.w.cols(),
            hidden: self.w.rows(),
            output: self.v.rows(),
        }
    }

    pub fn tensor(&self, kind: TensorKind) -> &[f64] {
        match kind {
            TensorKind::W => self.w.data(),
            TensorKind::B => &self.b,
            TensorKind::V => self.v.data(),
            TensorKind::A => &self.a,
        }
    }

    pub fn tensor_mut(&mut self, kind: TensorKind) -> &mut [f64] {
        match kind {
            TensorKind::W => self.w.data_mut(),
            TensorKind::B => &mut self.b,
            TensorKind::V => self.v.data_mut(),
            TensorKind::A => &mut self.a,
        }
    }

    /// Appends `W, b, V, a` (row-major) to `out`.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for kind in TensorKind::ALL {
            out.extend_from_slice(self.tensor(kind));
        }
    }

    /// Reads `W, b, V, a` from the front of `src`, returning the rest.
    pub fn assign_from<'a>(&mut self, mut src: &'a [f64]) -> &'a [f64] {
        for kind in TensorKind::ALL {
            let dst = self.tensor_mut(kind);
            let (head, tail) = src.split_at(dst.len());
            dst.copy_from_slice(head);
            src = tail;
        }
        src
    }

    pub fn add_scaled(&mut self, s: f64, other: &LayerParams) {
        for kind in TensorKind::ALL {
            for (a, b) in self.tensor_mut(kind).iter_mut().zip(other.tensor(kind)) {
                *a += s * b;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        TensorKind::ALL
            .iter()
            .all(|&k| self.tensor(k).iter().all(|v| v.is_finite()))
    }
}

/// Architecture of a layered field: widths, activation and frozen tensors.
/// Parameter values live in a [`ParamSchedule`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredVectorField {
    pub activation: Activation,
    layers: Vec<LayerShape>,
    frozen: Vec<FrozenFlags>,
}

impl LayeredVectorField {
    /// `dims = (d, h₁, d₁, h₂, d₂, …, h_ℓ, d)`
    pub fn new(activation: Activation, dims: &[usize], frozen: Vec<FrozenFlags>) -> Result<Self> {
        if dims.len() < 3 || dims.len().is_multiple_of(2) {
            return Err(invalid("dims must read (d, h1, d1, ..., h_l, d)"));
        }
        if dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if dims[0] != dims[dims.len() - 1] {
            return Err(invalid(format!(
                "field must map R^{} to itself, got output width {}",
                dims[0],
                dims[dims.len() - 1]
            )));
        }
        let layers: Vec<LayerShape> = dims
            .windows(3)
            .step_by(2)
            .map(|w| LayerShape {
                input: w[0],
                hidden: w[1],
                output: w[2],
            })
            .collect();
        if frozen.len() != layers.len() {
            return Err(invalid("one FrozenFlags entry per layer required"));
        }
        Ok(Self {
            activation,
            layers,
            frozen,
        })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn ell(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[LayerShape] {
        &self.layers
    }

    pub fn frozen(&self) -> &[FrozenFlags] {
        &self.frozen
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut out = vec![self.dim()];
        for l in &self.layers {
            out.push(l.hidden);
            out.push(l.output);
        }
        out
    }

    pub fn block_param_count(&self) -> usize {
        self.layers.iter().map(LayerShape::param_count).sum()
    }

    pub fn zero_block(&self) -> Vec<LayerParams> {
        self.layers.iter().map(LayerParams::zeros).collect()
    }

    pub fn check_block(&self, block: &[LayerParams]) -> Result<()> {
        if block.len() != self.layers.len() {
            return Err(invalid(format!(
                "block has {} layers, field expects {}",
                block.len(),
                self.layers.len()
            )));
        }
        for (i, (p, s)) in block.iter().zip(&self.layers).enumerate() {
            if p.shape() != *s || p.b.len() != s.hidden || p.a.len() != s.output || p.v.cols() != s.hidden {
                return Err(invalid(format!("layer {} parameter shapes do not match", i + 1)));
            }
        }
        Ok(())
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(invalid(format!(
                "state has dimension {}, field expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn forward(&self, block: &[LayerParams], x: &[f64]) -> Vec<LayerCache> {
        let mut caches = Vec::with_capacity(block.len());
        let mut y = x.to_vec();
        for p in block {
            let mut z = p.w.matvec(&y);
            z.iter_mut().zip(&p.b).for_each(|(z, b)| *z += b);
            let n = z.len();
            let (mut h, mut s1, mut s2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
            for r in 0..n {
                let (v, d1, d2) = self.activation.derivatives(z[r]);
                h[r] = v;
                s1[r] = d1;
                s2[r] = d2;
            }
            let mut out = p.v.matvec(&h);
            out.iter_mut().zip(&p.a).for_each(|(o, a)| *o += a);
            caches.push(LayerCache {
                input: std::mem::replace(&mut y, out),
                h,
                s1,
                s2,
                output: None,
            });
        }
        if let Some(last) = caches.last_mut() {
            last.output = Some(y);
        }
        caches
    }

    /// `f(θ_block, x)`
    pub fn eval(&self, block: &[LayerParams], x: &[f64]) -> Result<Vec<f64>> {
        self.check_block(block)?;
        self.check_state(x)?;
        Ok(self.eval_unchecked(block, x))
    }

    pub(crate) fn eval_unchecked(&self, block: &[LayerParams], x: &[f64]) -> Vec<f64> {
        let mut ws = self.workspace();
        self.eval_ws(block, x, &mut ws).to_vec()
    }

    /// `D_x f(θ_block, x)`, chained as `Π V_i diag(σ'(z_i)) W_i`.
    pub fn jacobian_x(&self, block: &[LayerParams], x: &[f64]) -> Result<Mat> {
        self.check_block(block)?;
        self.check_state(x)?;
        Ok(self.eval_with_jacobian(block, x).1)
    }

    /// Value and state Jacobian in one forward pass.
    pub(crate) fn eval_with_jacobian(&self, block: &[LayerParams], x: &[f64]) -> (Vec<f64>, Mat) {
        let mut ws = self.workspace();
        self.eval_ws(block, x, &mut ws);
        (ws.output().to_vec(), self.jacobian_ws(block, &ws))
    }

    /// `∂(cotangentᵀ f(θ, x)) / ∂θ` for one block; frozen tensors get zeros.
    pub fn vjp_params(&self, block: &[LayerParams], x: &[f64], cotangent: &[f64]) -> Result<Vec<LayerParams>> {
        self.check_block(block)?;
        self.check_state(x)?;
        self.check_state(cotangent)?;
        Ok(self.adjoint(block, x, cotangent, None).1)
    }

    /// Reverse-mode derivative of `φ(θ, x) = cᵀ f(θ, x) + ⟨M, D_x f(θ, x)⟩`.
    ///
    /// Returns `(∂φ/∂x, ∂φ/∂θ)`. With `jac_cotangent = None` the second term
    /// is dropped and this is the ordinary VJP. Frozen tensors get zeros.
    pub fn adjoint(
        &self,
        block: &[LayerParams],
        x: &[f64],
        cotangent: &[f64],
        jac_cotangent: Option<&Mat>,
    ) -> (Vec<f64>, Vec<LayerParams>) {
        let mut grads = self.zero_block();
        let xbar = self.adjoint_accumulate(block, x, cotangent, jac_cotangent, &mut grads);
        self.zero_frozen(&mut grads);
        (xbar, grads)
    }

    /// As [`adjoint`](Self::adjoint), adding `∂φ/∂θ` into `grads` without
    /// masking frozen tensors.
    pub fn adjoint_accumulate(
        &self,
        block: &[LayerParams],
        x: &[f64],
        cotangent: &[f64],
        jac_cotangent: Option<&Mat>,
        grads: &mut [LayerParams],
    ) -> Vec<f64> {
        let caches = self.forward(block, x);

        // Forward tangents Ẏ_i (only needed for the Jacobian term).
        let tangents: Option<Vec<(Mat, Mat)>> = jac_cotangent.map(|_| {
            let mut yt = Mat::identity(self.dim());
            let mut out = Vec::with_capacity(block.len());
            for (p, c) in block.iter().zip(&caches) {
                let zt = p.w.matmul(&yt);
                let ht = Mat::from_fn(zt.rows(), zt.cols(), |r, k| c.s1[r] * zt[(r, k)]);
                let next = p.v.matmul(&ht);
                out.push((std::mem::replace(&mut yt, next), zt));
            }
            out
        });

        let mut ybar = cotangent.to_vec();
        let mut ytbar = jac_cotangent.cloned();

        for i in (0..block.len()).rev() {
            let p = &block[i];
            let c = &caches[i];
            let g = &mut grads[i];

            // y_i = V h + a
            accumulate_outer(&mut g.v, &ybar, &c.h);
            g.a.iter_mut().zip(&ybar).for_each(|(ga, y)| *ga += y);
            let hbar = p.v.matvec_t(&ybar);
            let mut zbar: Vec<f64> = hbar.iter().zip(&c.s1).map(|(h, s)| h * s).collect();

            let mut next_ytbar = None;
            if let (Some(mbar), Some(tan)) = (ytbar.as_ref(), tangents.as_ref()) {
                let (yt_in, zt) = &tan[i];
                let ht = Mat::from_fn(zt.rows(), zt.cols(), |r, k| c.s1[r] * zt[(r, k)]);
                // Ẏ_i = V Ḣ
                g.v.axpy(1.0, &mbar.matmul(&ht.transpose()));
                let htbar = p.v.transpose().matmul(mbar);
                // Ḣ = diag(σ') Ż, σ' depends on z through σ''
                let ztbar = Mat::from_fn(htbar.rows(), htbar.cols(), |r, k| c.s1[r] * htbar[(r, k)]);
                for r in 0..zbar.len() {
                    let row_dot: f64 = (0..zt.cols()).map(|k| htbar[(r, k)] * zt[(r, k)]).sum();
                    zbar[r] += c.s2[r] * row_dot;
                }
                // Ż = W Ẏ_{i-1}
                g.w.axpy(1.0, &ztbar.matmul(&yt_in.transpose()));
                next_ytbar = Some(p.w.transpose().matmul(&ztbar));
            }

            // z = W y_{i-1} + b
            accumulate_outer(&mut g.w, &zbar, &c.input);
            g.b.iter_mut().zip(&zbar).for_each(|(gb, z)| *gb += z);
            ybar = p.w.matvec_t(&zbar);
            ytbar = next_ytbar;
        }

        ybar
    }

    pub fn zero_frozen(&self, grads: &mut [LayerParams]) {
        for (g, flags) in grads.iter_mut().zip(&self.frozen) {
            for kind in TensorKind::ALL {
                if flags.get(kind) {
                    g.tensor_mut(kind).iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            layers: self
                .layers
                .iter()
                .map(|s| LayerBuf {
                    input: vec![0.0; s.input],
                    h: vec![0.0; s.hidden],
                    s1: vec![0.0; s.hidden],
                    out: vec![0.0; s.output],
                })
                .collect(),
            ybar: Vec::with_capacity(self.max_width()),
            zbar: Vec::with_capacity(self.max_width()),
        }
    }

    fn max_width(&self) -> usize {
        self.dims().into_iter().max().unwrap_or(0)
    }

    /// Forward pass into `ws`; returns `f(θ, x)`.
    pub fn eval_ws<'w>(&self, block: &[LayerParams], x: &[f64], ws: &'w mut Workspace) -> &'w [f64] {
        for (i, p) in block.iter().enumerate() {
            let (done, rest) = ws.layers.split_at_mut(i);
            let buf = &mut rest[0];
            buf.input.copy_from_slice(if i == 0 { x } else { &done[i - 1].out });
            let cols = buf.input.len();
            let w = p.w.data();
            for r in 0..buf.h.len() {
                let row = &w[r * cols..(r + 1) * cols];
                let z = p.b[r] + row.iter().zip(&buf.input).map(|(a, b)| a * b).sum::<f64>();
                let (v, d1, _) = self.activation.derivatives(z);
                buf.h[r] = v;
                buf.s1[r] = d1;
            }
            let hid = buf.h.len();
            let v = p.v.data();
            for r in 0..buf.out.len() {
                let row = &v[r * hid..(r + 1) * hid];
                buf.out[r] = p.a[r] + row.iter().zip(&buf.h).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        &ws.layers[block.len() - 1].out
    }

    /// `D_x f` at the point of the last [`eval_ws`](Self::eval_ws) call.
    pub fn jacobian_ws(&self, block: &[LayerParams], ws: &Workspace) -> Mat {
        let mut jac = Mat::identity(self.dim());
        for (p, buf) in block.iter().zip(&ws.layers) {
            let mut zt = p.w.matmul(&jac);
            for r in 0..zt.rows() {
                for c in 0..zt.cols() {
                    zt[(r, c)] *= buf.s1[r];
                }
            }
            jac = p.v.matmul(&zt);
        }
        jac
    }

    /// After [`eval_ws`](Self::eval_ws) at `x`: adds `∂(cᵀf)/∂θ` into
    /// `grads` (frozen tensors included) and `D_x fᵀ c` into `xbar`.
    pub fn vjp_accumulate_ws(
        &self,
        block: &[LayerParams],
        cotangent: &[f64],
        ws: &mut Workspace,
        grads: &mut [LayerParams],
        xbar: &mut [f64],
    ) {
        let Workspace { layers, ybar, zbar } = ws;
        ybar.clear();
        ybar.extend_from_slice(cotangent);
        for i in (0..block.len()).rev() {
            let p = &block[i];
            let buf = &layers[i];
            let g = &mut grads[i];
            let hid = buf.h.len();
            let cols = buf.input.len();
            zbar.clear();
            zbar.resize(hid, 0.0);
            {
                let gv = g.v.data_mut();
                let v = p.v.data();
                for (r, &yr) in ybar.iter().enumerate() {
                    g.a[r] += yr;
                    let grow = &mut gv[r * hid..(r + 1) * hid];
                    let vrow = &v[r * hid..(r + 1) * hid];
                    for c in 0..hid {
                        grow[c] += yr * buf.h[c];
                        zbar[c] += vrow[c] * yr;
                    }
                }
            }
            for (z, s1) in zbar.iter_mut().zip(&buf.s1) {
                *z *= s1;
            }
            ybar.clear();
            ybar.resize(cols, 0.0);
            let gw = g.w.data_mut();
            let w = p.w.data();
            for (r, &zr) in zbar.iter().enumerate() {
                g.b[r] += zr;
                let grow = &mut gw[r * cols..(r + 1) * cols];
                let wrow = &w[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    grow[c] += zr * buf.input[c];
                    ybar[c] += wrow[c] * zr;
                }
            }
        }
        xbar.iter_mut().zip(ybar.iter()).for_each(|(a, b)| *a += b);
    }
}

/// Scratch buffers for allocation-free evaluation and reverse passes.
#[derive(Debug, Clone)]
pub struct Workspace {
    layers: Vec<LayerBuf>,
    ybar: Vec<f64>,
    zbar: Vec<f64>,
}

impl Workspace {
    /// Field value of the last evaluation.
    pub fn output(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").out
    }
}

#[derive(Debug, Clone)]
struct LayerBuf {
    input: Vec<f64>,
    h: Vec<f64>,
    s1: Vec<f64>,
    out: Vec<f64>,
}

struct LayerCache {
    input: Vec<f64>,
    h: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
    output: Option<Vec<f64>>,
}

fn accumulate_outer(m: &mut Mat, u: &[f64], v: &[f64]) {
    for (r, &ur) in u.iter().enumerate() {
        if ur == 0.0 {
            continue;
        }
        for (c, &vc) in v.iter().enumerate() {
            m[(r, c)] += ur * vc;
        }
    }
}

/// Piecewise-constant parameters: block `k` is active on `[α_k, β_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSchedule {
    breakpoints: Vec<f64>,
    blocks: Vec<Vec<LayerParams>>,
}

impl ParamSchedule {
    /// `breakpoints = (0, β₁, …, β_K)` strictly increasing, one block per interval.
    pub fn new(breakpoints: Vec<f64>, blocks: Vec<Vec<LayerParams>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid("schedule needs at least one block"));
        }
        if breakpoints.len() != blocks.len() + 1 {
            return Err(invalid(format!(
                "{} blocks need {} breakpoints, got {}",
                blocks.len(),
                blocks.len() + 1,
                breakpoints.len()
            )));
        }
        if breakpoints[0] != 0.0 {
            return Err(invalid("first breakpoint must be 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[1] > w[0])) || breakpoints.iter().any(|b| !b.is_finite()) {
            return Err(invalid("breakpoints must be finite and strictly increasing"));
        }
        let sig: Vec<LayerShape> = blocks[0].iter().map(LayerParams::shape).collect();
        if blocks
            .iter()
            .any(|b| b.iter().map(LayerParams::shape).collect::<Vec<_>>() != sig)
        {
            return Err(invalid("all blocks must share one layer shape signature"));
        }
        Ok(Self { breakpoints, blocks })
    }

    /// Equal-length blocks on `[0, t_end)`.
    pub fn uniform(t_end: f64, blocks: Vec<Vec<LayerParams>>) -> Result<Self> {
        let k = blocks.len();
        let bps = (0..=k).map(|i| t_end * i as f64 / k as f64).collect();
        Self::new(bps, blocks)
    }

    pub fn t_end(&self) -> f64 {
        *self.breakpoints.last().expect("nonempty")
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// `[α_k, β_k)` for the zero-based block index.
    pub fn interval(&self, k: usize) -> (f64, f64) {
        (self.breakpoints[k], self.breakpoints[k + 1])
    }

    pub fn block(&self, k: usize) -> &[LayerParams] {
        &self.blocks[k]
    }

    pub fn block_mut(&mut self, k: usize) -> &mut Vec<LayerParams> {
        &mut self.blocks[k]
    }

    pub fn blocks(&self) -> &[Vec<LayerParams>] {
        &self.blocks
    }

    /// Zero-based index of the block with `α_k ≤ t < β_k`.
    pub fn active_block(&self, t: f64) -> Result<usize> {
        let t_end = self.t_end();
        if !(0.0..t_end).contains(&t) {
            return Err(Error::OutOfDomain { t, t_end });
        }
        Ok(self.breakpoints.partition_point(|&b| b <= t) - 1)
    }

    /// Block active at the left endpoint of Euler step `step` on a grid of
    /// spacing `dt`. Grid times within `1e-9·dt` of a breakpoint are snapped
    /// onto it, so `n·dt` rounding never selects the previous block.
    pub fn block_at_step(&self, step: usize, dt: f64) -> usize {
        let t = step as f64 * dt + 1e-9 * dt;
        let k = self.breakpoints.partition_point(|&b| b <= t);
        k.clamp(1, self.blocks.len()) - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_layer(w: Mat, b: Vec<f64>, v: Mat, a: Vec<f64>) -> (LayeredVectorField, Vec<LayerParams>) {
        let d = w.cols();
        let h = w.rows();
        let vf = LayeredVectorField::new(Activation::Tanh, &[d, h, d], vec![FrozenFlags::default()]).unwrap();
        (vf, vec![LayerParams { w, b, v, a }])
    }

    fn schedule_k5() -> ParamSchedule {
        let vf = LayeredVectorField::new(Activation::Tanh, &[2, 2, 2], vec![FrozenFlags::default()]).unwrap();
        let blocks = (0..5).map(|_| vf.zero_block()).collect();
        ParamSchedule::new((0..=5).map(|k| 2.0 * k as f64).collect(), blocks).unwrap()
    }

    #[test]
    fn active_block_half_open() {
        let s = schedule_k5();
        assert_eq!(s.active_block(0.0).unwrap(), 0);
        assert_eq!(s.active_block(2.0).unwrap(), 1);
        assert_eq!(s.active_block(1.999).unwrap(), 0);
        assert_eq!(s.active_block(9.999).unwrap(), 4);
        assert!(matches!(s.active_block(10.0), Err(Error::OutOfDomain { .. })));
        assert!(s.active_block(-0.1).is_err());
    }

    #[test]
    fn active_block_single() {
        let vf = LayeredVectorField::new(Activation::Tanh, &[2, 2, 2], vec![FrozenFlags::default()]).unwrap();
        let s = ParamSchedule::new(vec![0.0, 10.0], vec![vf.zero_block()]).unwrap();
        for i in 0..100 {
            assert_eq!(s.active_block(i as f64 * 0.1).unwrap(), 0);
        }
    }

    #[test]
    fn block_at_step_snaps_to_breakpoints() {
        let s = schedule_k5();
        for n in 0..100 {
            assert_eq!(s.block_at_step(n, 0.1), n / 20, "step {n}");
        }
    }

    #[test]
    fn schedule_rejects_bad_breakpoints() {
        let vf = LayeredVectorField::new(Activation::Tanh, &[2, 2, 2], vec![FrozenFlags::default()]).unwrap();
        let b = || vf.zero_block();
        assert!(ParamSchedule::new(vec![0.0, 1.0, 1.0], vec![b(), b()]).is_err());
        assert!(ParamSchedule::new(vec![0.5, 1.0], vec![b()]).is_err());
        assert!(ParamSchedule::new(vec![0.0, 1.0], vec![]).is_err());
    }

    #[test]
    fn zero_weights_give_zero_field() {
        let (vf, block) = single_layer(Mat::zeros(2, 2), vec![0.0; 2], Mat::identity(2), vec![0.0; 2]);
        assert_eq!(vf.eval(&block, &[0.3, -1.7]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_weight_applies_tanh() {
        let (vf, block) = single_layer(Mat::identity(2), vec![0.0; 2], Mat::identity(2), vec![0.0; 2]);
        let f = vf.eval(&block, &[0.5, -0.5]).unwrap();
        assert!((f[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((f[0] - 0.46211715726000974).abs() < 1e-15);
        assert_eq!(f[1], -f[0]);

        let j = vf.jacobian_x(&block, &[0.5, -0.5]).unwrap();
        let expect = 1.0 - 0.5f64.tanh().powi(2);
        assert!((j[(0, 0)] - expect).abs() < 1e-15);
        assert!((j[(0, 0)] - 0.7864477329659275).abs() < 1e-15);
        assert!((j[(1, 1)] - expect).abs() < 1e-15);
        assert_eq!(j[(0, 1)], 0.0);
    }

    #[test]
    fn composition_with_affine_shift() {
        // Identity activation: layer 2 with W = V = Id, b = 0 is y ↦ y + a.
        let vf =
            LayeredVectorField::new(Activation::Identity, &[2, 2, 2, 2, 2], vec![FrozenFlags::default(); 2]).unwrap();
        let first = LayerParams {
            w: Mat::from_rows(&[&[0.3, -0.2], &[0.7, 0.1]]),
            b: vec![0.1, -0.2],
            v: Mat::from_rows(&[&[1.0, 0.5], &[-0.5, 2.0]]),
            a: vec![0.05, 0.0],
        };
        let shift = vec![1.5, -0.25];
        let block = vec![
            first.clone(),
            LayerParams {
                w: Mat::identity(2),
                b: vec![0.0; 2],
                v: Mat::identity(2),
                a: shift.clone(),
            },
        ];
        let single = LayeredVectorField::new(Activation::Identity, &[2, 2, 2], vec![FrozenFlags::default()]).unwrap();
        let x = [0.4, -0.9];
        let inner = single.eval(&[first], &x).unwrap();
        let f = vf.eval(&block, &x).unwrap();
        for i in 0..2 {
            assert!((f[i] - (inner[i] + shift[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn jacobian_at_origin_is_w() {
        let w = Mat::from_rows(&[&[0.3, -1.2], &[2.0, 0.5]]);
        let (vf, block) = single_layer(w.clone(), vec![0.0; 2], Mat::identity(2), vec![0.0; 2]);
        let j = vf.jacobian_x(&block, &[0.0, 0.0]).unwrap();
        assert!(j.sub(&w).max_abs() < 1e-15);
    }

    #[test]
    fn vjp_bias_a_equals_cotangent_and_zero_cotangent() {
        let w = Mat::from_rows(&[&[0.3, -1.2], &[2.0, 0.5]]);
        let (vf, block) = single_layer(w, vec![0.1, 0.2], Mat::identity(2), vec![0.3, 0.4]);
        let g = vf.vjp_params(&block, &[0.2, 0.1], &[0.7, -1.1]).unwrap();
        assert_eq!(g[0].a, vec![0.7, -1.1]);
        let g0 = vf.vjp_params(&block, &[0.2, 0.1], &[0.0, 0.0]).unwrap();
        for kind in TensorKind::ALL {
            assert!(g0[0].tensor(kind).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn frozen_tensors_have_zero_gradient() {
        let frozen = FrozenFlags {
            v: true,
            ..Default::default()
        };
        let vf = LayeredVectorField::new(Activation::Tanh, &[2, 3, 2], vec![frozen]).unwrap();
        let mut block = vf.zero_block();
        block[0].w = Mat::from_fn(3, 2, |r, c| 0.1 * (r + 2 * c) as f64 - 0.2);
        block[0].v = Mat::from_fn(2, 3, |r, c| 0.3 * (r as f64) - 0.1 * c as f64);
        let g = vf.vjp_params(&block, &[0.5, 0.5], &[1.0, 1.0]).unwrap();
        assert!(g[0].v.data().iter().all(|&v| v == 0.0));
        assert!(g[0].w.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (vf, block) = single_layer(Mat::identity(2), vec![0.0; 2], Mat::identity(2), vec![0.0; 2]);
        assert!(vf.eval(&block, &[1.0]).is_err());
        assert!(vf.vjp_params(&block, &[1.0, 0.0], &[1.0]).is_err());
        assert!(LayeredVectorField::new(Activation::Tanh, &[2, 3, 3], vec![FrozenFlags::default()]).is_err());
    }

    #[test]
    fn sigmoid_derivatives() {
        let (v, d1, d2) = Activation::Sigmoid.derivatives(0.0);
        assert_eq!((v, d1, d2), (0.5, 0.25, 0.0));
        assert_eq!("logistic".parse::<Activation>().unwrap(), Activation::Sigmoid);
    }
}
