//! Neural ODE classifiers with piecewise-constant parameter schedules,
//! finite-time Lyapunov exponent (FTLE) analysis of their flows and
//! FTLE-regularized training.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::result_large_err)]

pub mod analysis;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod ftle;
pub mod integrator;
pub mod linalg;
pub mod model;
pub mod raster;
pub mod rng;
pub mod training;
pub mod vecfield;

pub use analysis::{
    adversarial_probe, class_region, coherence_ratio, decision_margin, extract_ridges, pred_grid, probe_success_rate,
    ridge_boundary_overlap, CoherenceReport, Margin, ProbeResult, Region, RidgeNode, RidgeSet,
};
pub use data::{make_moons, split, Class, Dataset};
pub use error::{Error, Result};
pub use ftle::{
    cauchy_green, ftle_field, spectrum_from_tangent, CauchyGreen, FieldMode, FieldOptions, FtleField, FtleSpectrum,
};
pub use integrator::{flow, tangent_flow, FlowConfig, TangentFlowResult, Trajectory};
pub use linalg::{svd, sym_eig, Mat, SvdResult, SymEig};
pub use model::{NodeModel, OutputLayer, Preset};
pub use raster::{Bounds, GridSpec, ScalarGrid};
pub use training::{he_init, train, Batch, GradientBundle, RegConfig, TrainConfig, TrainLog};
pub use vecfield::{Activation, FrozenFlags, LayerParams, LayeredVectorField, ParamSchedule, TensorKind};
