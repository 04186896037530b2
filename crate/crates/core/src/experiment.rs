//! The moons experiment: standard data, regularized variants of a run and a
//! one-shot diagnostic report of a trained model.

use std::fmt::Write as _;

use crate::analysis::{
    decision_margin, extract_ridges, pred_grid, probe_success_rate, quantile, ridge_boundary_overlap,
};
use crate::data::{make_moons, split, Dataset};
use crate::error::{Error, Result};
use crate::ftle::{ftle_field, FieldMode, FieldOptions};
use crate::integrator::FlowConfig;
use crate::model::{NodeModel, Preset};
use crate::raster::{Bounds, GridSpec, ScalarGrid};
use crate::rng::{streams, Rng};
use crate::training::{accuracy, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DataConfig {
    pub n: usize,
    pub noise: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 4000,
            noise: 0.1,
            seed: 0,
            test_fraction: 0.25,
        }
    }
}

impl DataConfig {
    /// `(train, test)`.
    pub fn generate(&self) -> Result<(Dataset, Dataset)> {
        let ds = make_moons(self.n, self.noise, self.seed)?;
        split(&ds, self.test_fraction, self.seed)
    }
}

/// `(γ, T₁)` of the FTLE-suppressed run for each architecture.
pub fn regularization_for(preset: Preset) -> (f64, f64) {
    match preset {
        Preset::Ex1 => (2.0, 2.0),
        Preset::Ex2 => (20.0, 6.0),
    }
}

/// `base` with the preset's regularization switched on.
pub fn regularized(preset: Preset, base: &TrainConfig) -> TrainConfig {
    let (gamma, t1_reg) = regularization_for(preset);
    TrainConfig {
        gamma,
        t1_reg,
        delta: 0.05,
        ..*base
    }
}

/// `count` points of `ds` drawn without replacement on the probe stream.
pub fn probe_points(ds: &Dataset, count: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    Rng::new(seed, streams::PROBE).shuffle(&mut idx);
    idx.iter().take(count).map(|&i| ds.inputs[i]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub bounds: Bounds,
    pub resolution: usize,
    /// Margin half-width around `pred = 0.5`.
    pub epsilon: f64,
    /// Ridge/margin distance tolerance in cells.
    pub tolerance: usize,
    /// Ridges keep nodes at or above this quantile of the `λ_max` field.
    pub ridge_quantile: f64,
    pub probe_count: usize,
    pub probe_epsilon: f64,
    pub probe_steps: usize,
    pub probe_seed: u64,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            bounds: Bounds::default(),
            resolution: 200,
            epsilon: 0.1,
            tolerance: 3,
            ridge_quantile: 0.9,
            probe_count: 500,
            probe_epsilon: 0.1,
            probe_steps: 20,
            probe_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelReport {
    pub test_acc: f64,
    /// Mean of `λ_max([0, T], ·)` over the finite grid nodes.
    pub mean_lmax: f64,
    pub margin_area: f64,
    pub ridge_nodes: usize,
    /// `None` when no ridge was found.
    pub overlap: Option<f64>,
    pub probe_success: f64,
    pub lmax: ScalarGrid,
    pub pred: ScalarGrid,
}

impl ModelReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "test_acc = {}", self.test_acc);
        let _ = writeln!(out, "mean_lmax = {}", self.mean_lmax);
        let _ = writeln!(out, "margin_area = {}", self.margin_area);
        let _ = writeln!(out, "ridge_nodes = {}", self.ridge_nodes);
        match self.overlap {
            Some(o) => {
                let _ = writeln!(out, "ridge_overlap = {o}");
            }
            None => out.push_str("ridge_overlap = undefined\n"),
        }
        let _ = writeln!(out, "probe_success = {}", self.probe_success);
        out
    }
}

pub fn report(model: &NodeModel, test: &Dataset, opts: &ReportOptions, cfg: &FlowConfig) -> Result<ModelReport> {
    let spec = GridSpec::new(opts.bounds, opts.resolution)?;
    let field = ftle_field(
        model,
        &FieldOptions {
            bounds: opts.bounds,
            resolution: opts.resolution,
            mode: FieldMode::Full,
            which_exponent: 1,
            stride: 1,
        },
        cfg,
    )?;
    let lmax = field.frames.into_iter().next().expect("full mode has one frame").grid;
    let pred = pred_grid(model, spec, cfg);
    let margin = decision_margin(&pred, opts.epsilon)?;
    let threshold = quantile(&lmax, opts.ridge_quantile).unwrap_or(f64::INFINITY);
    let ridges = extract_ridges(&lmax, threshold);
    let overlap = match ridge_boundary_overlap(&ridges, &margin.mask, opts.tolerance) {
        Ok(o) => Some(o),
        Err(Error::EmptyRidgeSet) => None,
        Err(e) => return Err(e),
    };
    let probes = probe_points(test, opts.probe_count, opts.probe_seed);
    Ok(ModelReport {
        test_acc: accuracy(model, test, cfg)?,
        mean_lmax: lmax.finite_mean().unwrap_or(f64::NAN),
        margin_area: margin.area,
        ridge_nodes: ridges.len(),
        overlap,
        probe_success: probe_success_rate(model, &probes, opts.probe_epsilon, opts.probe_steps, cfg),
        lmax,
        pred,
    })
}
