//! Finite-time Lyapunov exponents: spectra of a single tangent map and
//! exponent fields over a grid of initial conditions.
//!
//! `λ_j = ln(Λ_j)/(t₁−t₀)` with `Λ_j` the singular values of `Y`. The
//! Cauchy–Green route `ln(ρ_j)/(2(t₁−t₀))`, `ρ_j` the eigenvalues of `YᵀY`,
//! gives the same numbers up to rounding.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::integrator::{flow, tangent_flow, FlowConfig};
use crate::linalg::{svd, sym_eig, Mat};
use crate::model::NodeModel;
use crate::raster::{Bounds, GridSpec, ScalarGrid};

/// Below this the tangent map is treated as singular.
pub const DEGENERATE_SIGMA: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct FtleSpectrum {
    pub interval: (f64, f64),
    /// Descending.
    pub exponents: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl FtleSpectrum {
    pub fn len(&self) -> f64 {
        self.interval.1 - self.interval.0
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.exponents[0]
    }

    pub fn min(&self) -> f64 {
        *self.exponents.last().expect("nonempty spectrum")
    }
}

fn check_interval(y: &Mat, interval: (f64, f64)) -> Result<f64> {
    if !y.is_square() {
        return Err(invalid("tangent map must be square"));
    }
    let len = interval.1 - interval.0;
    if !(len > 0.0) {
        return Err(invalid(format!("empty interval [{}, {}]", interval.0, interval.1)));
    }
    Ok(len)
}

pub fn spectrum_from_tangent(y: &Mat, interval: (f64, f64)) -> Result<FtleSpectrum> {
    let len = check_interval(y, interval)?;
    let s = svd(y)?;
    let smin = *s.singular_values.last().expect("nonempty");
    if smin <= DEGENERATE_SIGMA {
        return Err(Error::DegenerateTangent(smin));
    }
    let exponents = s.singular_values.iter().map(|v| v.ln() / len).collect();
    Ok(FtleSpectrum {
        interval,
        exponents,
        singular_values: s.singular_values,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CauchyGreen {
    pub interval: (f64, f64),
    pub tensor: Mat,
    /// `ρ₁ ≥ … ≥ ρ_d`.
    pub eigenvalues: Vec<f64>,
    /// Column `j` is `ξ_j`.
    pub eigenvectors: Mat,
}

impl CauchyGreen {
    /// `ln(ρ_j)/(2·len)`, 0-based `j`.
    pub fn exponent(&self, j: usize) -> f64 {
        self.eigenvalues[j].ln() / (2.0 * (self.interval.1 - self.interval.0))
    }

    pub fn lambda_max(&self) -> f64 {
        self.exponent(0)
    }

    pub fn direction(&self, j: usize) -> Vec<f64> {
        self.eigenvectors.col(j)
    }
}

pub fn cauchy_green(y: &Mat, interval: (f64, f64)) -> Result<CauchyGreen> {
    check_interval(y, interval)?;
    let tensor = y.transpose().matmul(y);
    let eig = sym_eig(&tensor)?;
    let rmin = *eig.eigenvalues.last().expect("nonempty");
    if rmin <= DEGENERATE_SIGMA * DEGENERATE_SIGMA || rmin <= 0.0 {
        return Err(Error::DegenerateTangent(rmin.max(0.0).sqrt()));
    }
    Ok(CauchyGreen {
        interval,
        tensor,
        eigenvalues: eig.eigenvalues,
        eigenvectors: eig.eigenvectors,
    })
}

/// Spectrum of the flow over `interval` started at `x0` with `Y = Id`.
pub fn point_spectrum(model: &NodeModel, x0: &[f64], interval: (f64, f64), cfg: &FlowConfig) -> Result<FtleSpectrum> {
    let tf = tangent_flow(model, x0, interval, cfg, false)?;
    spectrum_from_tangent(&tf.final_jacobian, interval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMode {
    /// `[0, T]`.
    Full,
    /// `[0, t_n]` for sampled `n`, from one trajectory.
    Growing,
    /// `[t_n, T]`, restarting `Y = Id` at `t_n`.
    Shrinking,
    /// `[α_k, β_k]` per parameter block.
    Subinterval,
}

impl FieldMode {
    pub fn name(self) -> &'static str {
        match self {
            FieldMode::Full => "full",
            FieldMode::Growing => "growing",
            FieldMode::Shrinking => "shrinking",
            FieldMode::Subinterval => "subinterval",
        }
    }
}

impl fmt::Display for FieldMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FieldMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(FieldMode::Full),
            "growing" => Ok(FieldMode::Growing),
            "shrinking" => Ok(FieldMode::Shrinking),
            "subinterval" => Ok(FieldMode::Subinterval),
            other => Err(invalid(format!(
                "unknown mode '{other}' (expected full, growing, shrinking or subinterval)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOptions {
    pub bounds: Bounds,
    pub resolution: usize,
    pub mode: FieldMode,
    /// 1-based: 1 is `λ_max`, `d` is `λ_min`.
    pub which_exponent: usize,
    /// Frame spacing in steps for growing/shrinking modes.
    pub stride: usize,
}

impl Default for FieldOptions {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            resolution: 200,
            mode: FieldMode::Full,
            which_exponent: 1,
            stride: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtleFrame {
    pub interval: (f64, f64),
    pub grid: ScalarGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtleField {
    pub options: FieldOptions,
    pub frames: Vec<FtleFrame>,
    /// Grid points whose propagation diverged or degenerated; stored as NaN.
    pub failed_points: usize,
}

impl FtleField {
    pub fn spec(&self) -> GridSpec {
        self.frames[0].grid.spec
    }

    pub fn frame_header(&self, k: usize) -> String {
        let (t0, t1) = self.frames[k].interval;
        let o = &self.options;
        format!(
            "mode={} interval={t0}:{t1} exponent={} bounds={} res={}",
            o.mode, o.which_exponent, o.bounds, o.resolution
        )
    }

    pub fn frame_csv(&self, k: usize) -> String {
        self.frames[k].grid.to_csv(&self.frame_header(k), "lambda")
    }
}

/// Frame intervals for a mode, as grid step ranges.
pub fn frame_steps(model: &NodeModel, mode: FieldMode, stride: usize, cfg: &FlowConfig) -> Result<Vec<(usize, usize)>> {
    let n = cfg.steps();
    let stride = stride.max(1);
    Ok(match mode {
        FieldMode::Full => vec![(0, n)],
        FieldMode::Growing => {
            let mut v: Vec<_> = (1..=n / stride).map(|k| (0, k * stride)).collect();
            if v.last().is_none_or(|&(_, e)| e != n) {
                v.push((0, n));
            }
            v
        }
        FieldMode::Shrinking => (0..n).step_by(stride).map(|s| (s, n)).collect(),
        FieldMode::Subinterval => {
            let mut v = Vec::with_capacity(model.schedule.num_blocks());
            for k in 0..model.schedule.num_blocks() {
                let (a, b) = model.schedule.interval(k);
                let b = b.min(cfg.t_end);
                if a >= cfg.t_end {
                    break;
                }
                let r = cfg.step_range(a, b).map_err(|_| {
                    Error::ModeMismatch(format!("block interval [{a}, {b}] is not aligned to dt={}", cfg.dt))
                })?;
                v.push(r);
            }
            v
        }
    })
}

fn point_frames(
    model: &NodeModel,
    x0: &[f64],
    mode: FieldMode,
    steps: &[(usize, usize)],
    j: usize,
    cfg: &FlowConfig,
) -> Result<Vec<f64>> {
    let interval = |(a, b): (usize, usize)| (cfg.time(a), cfg.time(b));
    let lam = |y: &Mat, r: (usize, usize)| -> Result<f64> { Ok(spectrum_from_tangent(y, interval(r))?.exponents[j]) };
    match mode {
        FieldMode::Full => {
            let tf = tangent_flow(model, x0, interval(steps[0]), cfg, false)?;
            Ok(vec![lam(&tf.final_jacobian, steps[0])?])
        }
        FieldMode::Growing => {
            let last = steps.last().expect("at least one frame").1;
            let tf = tangent_flow(model, x0, (0.0, cfg.time(last)), cfg, true)?;
            let ys = tf.jacobians.expect("recorded");
            steps.iter().map(|&r| lam(&ys[r.1], r)).collect()
        }
        FieldMode::Shrinking | FieldMode::Subinterval => {
            let last = steps.iter().map(|r| r.1).max().expect("at least one frame");
            let traj = flow(model, x0, (0.0, cfg.time(last)), cfg)?;
            steps
                .iter()
                .map(|&r| {
                    let tf = tangent_flow(model, &traj.states[r.0], interval(r), cfg, false)?;
                    lam(&tf.final_jacobian, r)
                })
                .collect()
        }
    }
}

/// Exponent field over a grid of initial conditions. Points are processed in
/// parallel; output does not depend on scheduling.
pub fn ftle_field(model: &NodeModel, opts: &FieldOptions, cfg: &FlowConfig) -> Result<FtleField> {
    let spec = GridSpec::new(opts.bounds, opts.resolution)?;
    let d = model.dim();
    if opts.which_exponent == 0 || opts.which_exponent > d {
        return Err(Error::ModeMismatch(format!(
            "exponent index {} outside 1..={d}",
            opts.which_exponent
        )));
    }
    if d != 2 {
        return Err(Error::ModeMismatch(format!(
            "grid fields need a planar model, got d={d}"
        )));
    }
    let steps = frame_steps(model, opts.mode, opts.stride, cfg)?;
    let j = opts.which_exponent - 1;

    let per_point: Vec<Option<Vec<f64>>> = (0..spec.len())
        .into_par_iter()
        .map(|k| point_frames(model, &spec.node_at(k), opts.mode, &steps, j, cfg).ok())
        .collect();

    let failed_points = per_point.iter().filter(|p| p.is_none()).count();
    if failed_points > 0 {
        log::warn!("ftle field: {failed_points} grid points failed and are stored as NaN");
    }
    let frames = steps
        .iter()
        .enumerate()
        .map(|(f, &(a, b))| {
            let values = per_point
                .iter()
                .map(|p| p.as_ref().map_or(f64::NAN, |v| v[f]))
                .collect();
            FtleFrame {
                interval: (cfg.time(a), cfg.time(b)),
                grid: ScalarGrid { spec, values },
            }
        })
        .collect();
    Ok(FtleField {
        options: *opts,
        frames,
        failed_points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{linear_model, zero_model, OutputLayer, Preset};
    use std::f64::consts::E;

    #[test]
    fn identity_gives_zero() {
        let s = spectrum_from_tangent(&Mat::identity(2), (0.0, 3.0)).unwrap();
        assert_eq!(s.exponents, vec![0.0, 0.0]);
    }

    #[test]
    fn diagonal_logs() {
        let y = Mat::diag(&[E * E, 1.0 / E]);
        let s = spectrum_from_tangent(&y, (1.0, 3.0)).unwrap();
        assert!((s.exponents[0] - 1.0).abs() < 1e-14);
        assert!((s.exponents[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn singular_tangent_rejected() {
        let y = Mat::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]);
        assert!(matches!(
            spectrum_from_tangent(&y, (0.0, 1.0)),
            Err(Error::DegenerateTangent(_))
        ));
        assert!(spectrum_from_tangent(&Mat::identity(2), (1.0, 1.0)).is_err());
    }

    #[test]
    fn cauchy_green_swap_example() {
        let y = Mat::from_rows(&[&[0.0, 2.0], &[1.0, 0.0]]);
        let cg = cauchy_green(&y, (0.0, 1.0)).unwrap();
        assert_eq!(cg.tensor, Mat::diag(&[1.0, 4.0]));
        assert!((cg.eigenvalues[0] - 4.0).abs() < 1e-14);
        let xi = cg.direction(0);
        assert!(xi[0].abs() < 1e-14 && (xi[1].abs() - 1.0).abs() < 1e-14);
        let s = spectrum_from_tangent(&y, (0.0, 1.0)).unwrap();
        assert!((cg.lambda_max() - s.max()).abs() < 1e-12);
    }

    #[test]
    fn linear_closed_form() {
        let m = linear_model(Mat::diag(&[1.0, -1.0]), 10.0);
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        let s = point_spectrum(&m, &[0.3, -0.7], (0.0, 10.0), &cfg).unwrap();
        let l1 = 1.1f64.ln() / 0.1;
        let l2 = 0.9f64.ln() / 0.1;
        assert!((s.exponents[0] - l1).abs() < 1e-10, "{} vs {l1}", s.exponents[0]);
        assert!((s.exponents[1] - l2).abs() < 1e-10);
        assert!((l1 - 0.953102).abs() < 1e-6 && (l2 + 1.053605).abs() < 1e-6);
    }

    #[test]
    fn zero_field_is_zero_in_every_mode() {
        let m = zero_model(2, 2.0, OutputLayer::identity(2));
        let cfg = FlowConfig::new(0.1, 2.0).unwrap();
        for mode in [
            FieldMode::Full,
            FieldMode::Growing,
            FieldMode::Shrinking,
            FieldMode::Subinterval,
        ] {
            let opts = FieldOptions {
                resolution: 4,
                mode,
                ..Default::default()
            };
            let f = ftle_field(&m, &opts, &cfg).unwrap();
            assert_eq!(f.failed_points, 0);
            for fr in &f.frames {
                assert!(fr.grid.values.iter().all(|&v| v == 0.0), "{mode}");
            }
        }
    }

    #[test]
    fn linear_field_is_constant() {
        let m = linear_model(Mat::diag(&[1.0, -1.0]), 10.0);
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        let opts = FieldOptions {
            resolution: 5,
            ..Default::default()
        };
        let f = ftle_field(&m, &opts, &cfg).unwrap();
        assert_eq!(f.frames.len(), 1);
        for v in &f.frames[0].grid.values {
            assert!((v - 1.1f64.ln() / 0.1).abs() < 1e-10);
        }
    }

    #[test]
    fn frame_counts() {
        let m = Preset::Ex2.skeleton(10.0);
        let cfg = FlowConfig::new(0.1, 10.0).unwrap();
        assert_eq!(frame_steps(&m, FieldMode::Full, 5, &cfg).unwrap().len(), 1);
        assert_eq!(frame_steps(&m, FieldMode::Growing, 5, &cfg).unwrap().len(), 20);
        assert_eq!(
            frame_steps(&m, FieldMode::Growing, 7, &cfg).unwrap().last(),
            Some(&(0, 100))
        );
        assert_eq!(frame_steps(&m, FieldMode::Shrinking, 5, &cfg).unwrap().len(), 20);
        assert_eq!(
            frame_steps(&m, FieldMode::Subinterval, 5, &cfg).unwrap(),
            vec![(0, 20), (20, 40), (40, 60), (60, 80), (80, 100)]
        );
        let odd = FlowConfig::new(0.3, 9.9).unwrap();
        assert!(matches!(
            frame_steps(&m, FieldMode::Subinterval, 5, &odd),
            Err(Error::ModeMismatch(_))
        ));
    }

    #[test]
    fn csv_header() {
        let m = zero_model(2, 1.0, OutputLayer::identity(2));
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let opts = FieldOptions {
            resolution: 2,
            ..Default::default()
        };
        let f = ftle_field(&m, &opts, &cfg).unwrap();
        let csv = f.frame_csv(0);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("# mode=full interval=0:1 exponent=1 bounds=-2:2:-2:2 res=2")
        );
        assert_eq!(lines.next(), Some("x,y,lambda"));
        assert_eq!(lines.count(), 4);
    }

    #[test]
    fn bad_exponent_index() {
        let m = zero_model(2, 1.0, OutputLayer::identity(2));
        let cfg = FlowConfig::new(0.5, 1.0).unwrap();
        let opts = FieldOptions {
            resolution: 2,
            which_exponent: 3,
            ..Default::default()
        };
        assert!(matches!(ftle_field(&m, &opts, &cfg), Err(Error::ModeMismatch(_))));
    }
}
