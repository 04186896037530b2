//! Minibatch training of `L ∘ Φ(T, ·)` on the MSE loss, optionally with the
//! FTLE penalty `γ · mean(max{λ_max([0, T₁]), δ})`.

mod adam;
mod grad;
mod init;

use std::fmt::Write as _;
use std::time::Instant;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use grad::{
    accuracy, grad_mse, grad_reg, lambda_max, model_output, mse_and_grad, mse_loss, pred_from_output, predict,
    reg_and_grad, reg_term, sample_mse_grad, sample_reg_grad, Batch, GradientBundle, RegConfig,
};
pub use init::{fit_readout, he_fill, he_init, initial_model};

use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::integrator::FlowConfig;
use crate::model::NodeModel;
use crate::rng::{streams, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub delta: f64,
    pub t1_reg: f64,
    /// Step size of the regularizer pass; `None` uses `dt`.
    pub reg_dt: Option<f64>,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate to this value over `epochs`; `None`
    /// keeps it constant.
    pub final_lr: Option<f64>,
    /// Rescale each batch gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
    /// Start from the least-squares readout of the initial flow on the
    /// training set instead of the model's own `(A, c)`.
    pub fit_readout: bool,
    /// Return the end-of-epoch parameters with the lowest epoch-mean
    /// objective `mse + γ·reg` instead of the final ones.
    pub keep_best: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dt: f64,
    pub t_end: f64,
    /// Evenly strided points of the held-out set (or training set) used for
    /// `mean_lmax_T1`.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.0,
            delta: 0.05,
            t1_reg: 2.0,
            reg_dt: None,
            learning_rate: 1e-2,
            final_lr: Some(1e-4),
            clip_norm: Some(1.0),
            fit_readout: true,
            keep_best: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            epochs: 200,
            seed: 0,
            dt: 0.1,
            t_end: 10.0,
            probe_size: 200,
        }
    }
}

impl TrainConfig {
    pub fn flow_config(&self) -> Result<FlowConfig> {
        FlowConfig::new(self.dt, self.t_end)
    }

    pub fn reg_config(&self) -> RegConfig {
        RegConfig {
            delta: self.delta,
            t1: self.t1_reg,
            dt: self.reg_dt.unwrap_or(self.dt),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.final_lr {
            Some(end) if self.epochs > 1 => {
                let s = (epoch.saturating_sub(1)) as f64 / (self.epochs - 1) as f64;
                end + 0.5 * (self.learning_rate - end) * (1.0 + (std::f64::consts::PI * s).cos())
            }
            _ => self.learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(invalid(format!("gamma must be nonnegative, got {}", self.gamma)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(invalid("learning rate must be positive"));
        }
        if let Some(end) = self.final_lr {
            if !(end >= 0.0 && end <= self.learning_rate) {
                return Err(invalid("final learning rate must lie in [0, learning rate]"));
            }
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(invalid("gradient clip norm must be positive"));
            }
        }
        if !(self.t1_reg > 0.0 && self.t1_reg <= self.t_end * (1.0 + 1e-12)) {
            return Err(invalid(format!(
                "t1 must lie in (0, {}], got {}",
                self.t_end, self.t1_reg
            )));
        }
        self.flow_config()?;
        self.reg_config()
            .flow_config()
            .map_err(|_| invalid(format!("t1={} is not a multiple of the regularizer step", self.t1_reg)))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mse: f64,
    /// Mean penalty value over the epoch's samples; 0 when `γ = 0`.
    pub reg: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub mean_lmax_t1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,mse,reg,train_acc,test_acc,mean_lmax_T1,seconds";

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.epoch, r.mse, r.reg, r.train_acc, r.test_acc, r.mean_lmax_t1, r.seconds
            );
        }
        out
    }

    /// [`to_csv`](Self::to_csv) without the wall-time column, so equal runs
    /// give equal bytes.
    pub fn to_csv_untimed(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER.trim_end_matches(",seconds"));
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.mse, r.reg, r.train_acc, r.test_acc, r.mean_lmax_t1
            );
        }
        out
    }

    /// Everything but wall time.
    pub fn same_numbers(&self, other: &TrainLog) -> bool {
        self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| EpochRecord { seconds: 0.0, ..*a } == EpochRecord { seconds: 0.0, ..*b })
    }
}

/// Training stopped on a non-finite state or parameter.
#[derive(Debug, Clone)]
pub struct TrainAbort {
    pub error: Error,
    /// Parameters at the end of the last completed epoch.
    pub last_stable: NodeModel,
    pub log: TrainLog,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training diverged after {} epochs: {}",
            self.log.records.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainAbort {}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: NodeModel,
    pub log: TrainLog,
    /// Epoch whose parameters `model` holds (1-based; 0 if no epoch ran).
    pub epoch: usize,
}

impl TrainOutput {
    /// Log record of the returned parameters.
    pub fn record(&self) -> Option<&EpochRecord> {
        self.epoch.checked_sub(1).and_then(|i| self.log.records.get(i))
    }
}

/// Called after every epoch; return `false` to stop early.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &NodeModel) -> bool + 'a;

pub fn train(
    model: NodeModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
) -> std::result::Result<TrainOutput, TrainAbort> {
    train_with_hook(model, train_set, test_set, cfg, &mut |_, _| true)
}

pub fn train_with_hook(
    model: NodeModel,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_>,
) -> std::result::Result<TrainOutput, TrainAbort> {
    let abort = |error: Error, last_stable: &NodeModel, log: &TrainLog| TrainAbort {
        error,
        last_stable: last_stable.clone(),
        log: log.clone(),
    };
    let mut log = TrainLog::default();
    let setup = || -> Result<(FlowConfig, RegConfig)> {
        cfg.validate()?;
        if train_set.is_empty() {
            return Err(invalid("training set is empty"));
        }
        if model.t_end() + 1e-12 < cfg.t_end {
            return Err(invalid("model schedule shorter than the training horizon"));
        }
        Ok((cfg.flow_config()?, cfg.reg_config()))
    };
    let (flow_cfg, reg_cfg) = setup().map_err(|e| abort(e, &model, &log))?;
    let mut model = model;
    if cfg.fit_readout {
        let all = Batch::full(train_set);
        fit_readout(&mut model, &all.inputs, &all.labels, &flow_cfg).map_err(|e| abort(e, &model, &log))?;
    }

    let probe_src = test_set.unwrap_or(train_set);
    let stride = (probe_src.len() / cfg.probe_size.max(1)).max(1);
    let probe: Vec<[f64; 2]> = probe_src
        .inputs
        .iter()
        .step_by(stride)
        .take(cfg.probe_size)
        .copied()
        .collect();
    let mut adam = cfg.adam();
    let mut state = AdamState::new(model.num_params());
    let mut params = model.params_flat();
    let mut current = model;
    let mut stable = current.clone();
    let mut best: Option<(f64, usize, NodeModel)> = None;
    let mut rng = Rng::new(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        adam.lr = cfg.lr_at(epoch);
        let mut mse_sum = 0.0;
        let mut reg_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_dataset(train_set, chunk);
            let (mse, mut g) = mse_and_grad(&current, &batch, &flow_cfg).map_err(|e| abort(e, &stable, &log))?;
            mse_sum += mse * chunk.len() as f64;
            if cfg.gamma > 0.0 {
                let (r, gr) = reg_and_grad(&current, &batch, &reg_cfg).map_err(|e| abort(e, &stable, &log))?;
                reg_sum += r * chunk.len() as f64;
                g.add_scaled(cfg.gamma, &gr);
            }
            let mut flat = g.flat();
            if let Some(c) = cfg.clip_norm {
                let norm = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > c {
                    flat.iter_mut().for_each(|v| *v *= c / norm);
                }
            }
            adam_step(&mut params, &flat, &mut state, &adam);
            if !params.iter().all(|v| v.is_finite()) {
                return Err(abort(Error::Divergence { step: 0 }, &stable, &log));
            }
            current.set_params_flat(&params);
        }
        let n = train_set.len() as f64;
        let eval = || -> Result<(f64, f64, f64)> {
            let train_acc = accuracy(&current, train_set, &flow_cfg)?;
            let test_acc = match test_set {
                Some(t) if !t.is_empty() => accuracy(&current, t, &flow_cfg)?,
                _ => f64::NAN,
            };
            let lsum: f64 = probe
                .iter()
                .map(|x| lambda_max(&current, x, &reg_cfg))
                .collect::<Result<Vec<_>>>()?
                .iter()
                .sum();
            Ok((train_acc, test_acc, lsum / probe.len().max(1) as f64))
        };
        let (train_acc, test_acc, mean_lmax_t1) = eval().map_err(|e| abort(e, &stable, &log))?;
        let rec = EpochRecord {
            epoch,
            mse: mse_sum / n,
            reg: reg_sum / n,
            train_acc,
            test_acc,
            mean_lmax_t1,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: mse={:.5} reg={:.5} train_acc={:.4} test_acc={:.4} lmax_T1={:.4} ({:.2}s)",
            rec.mse,
            rec.reg,
            rec.train_acc,
            rec.test_acc,
            rec.mean_lmax_t1,
            rec.seconds
        );
        log.records.push(rec);
        stable = current.clone();
        let objective = rec.mse + cfg.gamma * rec.reg;
        if cfg.keep_best && best.as_ref().is_none_or(|b| objective < b.0) {
            best = Some((objective, epoch, current.clone()));
        }
        if !hook(&rec, &current) {
            break;
        }
    }
    Ok(match best {
        Some((_, epoch, model)) => TrainOutput { model, log, epoch },
        None => TrainOutput {
            epoch: log.records.len(),
            model: current,
            log,
        },
    })
}
