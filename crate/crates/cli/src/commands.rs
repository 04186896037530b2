use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use ftle_node::analysis::{class_region, coherence_ratio, image_bounds, CoherenceReport, Region};
use ftle_node::checkpoint;
use ftle_node::data::{make_moons, split, Dataset};
use ftle_node::experiment::{report, DataConfig, ModelReport, ReportOptions};
use ftle_node::ftle::{ftle_field, FieldMode, FieldOptions, FtleField};
use ftle_node::integrator::{flow, FlowConfig};
use ftle_node::model::{NodeModel, Preset};
use ftle_node::raster::{write_mask_pgm, Bounds, GridSpec};
use ftle_node::training::{initial_model, predict, train, TrainConfig, TrainLog};

use crate::settings::Settings;
use crate::{AnalyzeArgs, Cli, Command, DataArgs, DataSource, EvolveArgs, FtleArgs, GridArgs, TrainArgs, UsageError};

pub fn run(cli: &Cli) -> Result<()> {
    let mut s = Settings::load(cli.config.as_deref())?;
    let out_dir: PathBuf = s
        .get(
            "out_dir",
            cli.out_dir.as_ref().map(|p| p.display().to_string()),
            "out".into(),
        )?
        .into();
    match &cli.command {
        Command::Data(a) => cmd_data(&mut s, &out_dir, a),
        Command::Train(a) => cmd_train(&mut s, &out_dir, a).map(|_| ()),
        Command::Ftle(a) => cmd_ftle(&mut s, &out_dir, a).map(|_| ()),
        Command::Analyze(a) => cmd_analyze(&mut s, &out_dir, a),
        Command::Evolve(a) => cmd_evolve(&mut s, &out_dir, a),
        Command::Repro(a) => crate::repro::run(&mut s, &out_dir, a),
    }
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// `none` (or `off`) maps to `None`.
fn optional_number(s: &mut Settings, key: &str, flag: Option<String>, default: Option<f64>) -> Result<Option<f64>> {
    let text = s.get(key, flag, default.map_or("none".to_string(), |v| v.to_string()))?;
    match text.as_str() {
        "none" | "off" => Ok(None),
        t => t
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{key}: expected a number or 'none', got '{t}'"))),
    }
}

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: Option<&PathBuf>) -> Result<NodeModel> {
    let path = path.ok_or_else(|| usage("--checkpoint is required"))?;
    if !path.exists() {
        return Err(usage(format!("checkpoint {} does not exist", path.display())));
    }
    checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
}

fn cmd_data(s: &mut Settings, out_dir: &Path, a: &DataArgs) -> Result<()> {
    let n = s.get("n", a.n, 4000)?;
    let noise = s.get("noise", a.noise, 0.1)?;
    let seed = s.get("seed", a.seed, 0)?;
    let out = a.out.clone().unwrap_or_else(|| out_dir.join("moons.csv"));
    let ds = make_moons(n, noise, seed)?;
    write(&out, &ds.to_csv())?;
    s.write_echo(out_dir)?;
    println!("wrote {} points to {}", ds.len(), out.display());
    Ok(())
}

/// `(train, test)` from a CSV or a fresh moons sample.
pub fn load_data(s: &mut Settings, src: &DataSource) -> Result<(Dataset, Dataset)> {
    let defaults = DataConfig::default();
    let seed = s.get("data_seed", src.data_seed, defaults.seed)?;
    let frac = s.get("test_fraction", src.test_fraction, defaults.test_fraction)?;
    match s.get_opt("data", src.data.as_ref().map(|p| p.display().to_string()))? {
        Some(path) => {
            let ds = Dataset::load(&path).map_err(|e| usage(format!("dataset {path}: {e}")))?;
            Ok(split(&ds, frac, seed)?)
        }
        None => {
            let cfg = DataConfig {
                n: s.get("n", src.n, defaults.n)?,
                noise: s.get("noise", src.noise, defaults.noise)?,
                seed,
                test_fraction: frac,
            };
            Ok(cfg.generate()?)
        }
    }
}

pub fn train_config(s: &mut Settings, a: &TrainArgs) -> Result<(Preset, TrainConfig)> {
    let d = TrainConfig::default();
    let preset: Preset = s.get("arch", a.arch.clone(), "ex1".into())?.parse()?;
    let cfg = TrainConfig {
        gamma: s.get("gamma", a.gamma, d.gamma)?,
        delta: s.get("delta", a.delta, d.delta)?,
        t1_reg: s.get("t1", a.t1, d.t1_reg)?,
        reg_dt: s.get_opt("reg_dt", a.reg_dt)?,
        learning_rate: s.get("lr", a.lr, d.learning_rate)?,
        final_lr: optional_number(s, "final_lr", a.final_lr.clone(), d.final_lr)?,
        clip_norm: optional_number(s, "clip", a.clip.clone(), d.clip_norm)?,
        batch_size: s.get("batch", a.batch, d.batch_size)?,
        epochs: s.get("epochs", a.epochs, d.epochs)?,
        seed: s.get("seed", a.seed, d.seed)?,
        dt: s.get("dt", a.dt, d.dt)?,
        t_end: s.get("t_end", None, d.t_end)?,
        fit_readout: s.get("fit_readout", None, d.fit_readout)?,
        keep_best: s.get("keep_best", a.keep_best, d.keep_best)?,
        ..d
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok((preset, cfg))
}

pub struct Trained {
    pub model: NodeModel,
    pub log: TrainLog,
    pub test: Dataset,
}

fn cmd_train(s: &mut Settings, out_dir: &Path, a: &TrainArgs) -> Result<Trained> {
    let (preset, cfg) = train_config(s, a)?;
    let (train_set, test_set) = load_data(s, &a.source)?;
    let init = match s.get_opt("init", a.init.as_ref().map(|p| p.display().to_string()))? {
        Some(p) => load_checkpoint(Some(&PathBuf::from(p)))?,
        None => initial_model(preset, cfg.t_end, cfg.seed),
    };
    let ckpt = a.out.clone().unwrap_or_else(|| out_dir.join("model.ckpt"));
    let log_path = a.log.clone().unwrap_or_else(|| out_dir.join("train_log.csv"));
    s.write_echo(out_dir)?;
    match train(init, &train_set, Some(&test_set), &cfg) {
        Ok(out) => {
            checkpoint::save(&out.model, &ckpt)?;
            write(&log_path, &out.log.to_csv())?;
            if let Some(r) = out.record() {
                println!(
                    "{preset} gamma={} epoch {}/{}: train_acc={:.4} test_acc={:.4} mean_lmax_T1={:.4}",
                    cfg.gamma, r.epoch, cfg.epochs, r.train_acc, r.test_acc, r.mean_lmax_t1
                );
            }
            Ok(Trained {
                model: out.model,
                log: out.log,
                test: test_set,
            })
        }
        Err(abort) => {
            checkpoint::save(&abort.last_stable, &ckpt)?;
            write(&log_path, &abort.log.to_csv())?;
            log::error!("saved last stable parameters to {}", ckpt.display());
            Err(anyhow!(abort))
        }
    }
}

pub struct GridSetup {
    pub bounds: Bounds,
    pub res: usize,
    pub flow: FlowConfig,
}

pub fn grid_setup(s: &mut Settings, g: &GridArgs, model: &NodeModel, default_res: usize) -> Result<GridSetup> {
    let bounds: Bounds = s
        .get("bounds", g.bounds.clone(), Bounds::default().to_string())?
        .parse()?;
    let res = s.get("res", g.res, default_res)?;
    let dt = s.get("dt", g.dt, 0.1)?;
    Ok(GridSetup {
        bounds,
        res,
        flow: FlowConfig::new(dt, model.t_end())?,
    })
}

/// CSV, grayscale PGM (with `.meta` range) and viridis PPM for every frame.
pub fn write_field(out_dir: &Path, prefix: &str, field: &FtleField) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let o = &field.options;
    for (k, frame) in field.frames.iter().enumerate() {
        let stem = format!("{prefix}_{}_e{}_{k:03}", o.mode, o.which_exponent);
        write(&out_dir.join(format!("{stem}.csv")), &field.frame_csv(k))?;
        frame.grid.write_pgm_with_meta(out_dir.join(format!("{stem}.pgm")))?;
        frame.grid.write_ppm(out_dir.join(format!("{stem}.ppm")))?;
    }
    Ok(())
}

pub fn compute_field(
    model: &NodeModel,
    g: &GridSetup,
    mode: FieldMode,
    exponent: usize,
    stride: usize,
) -> Result<FtleField> {
    let opts = FieldOptions {
        bounds: g.bounds,
        resolution: g.res,
        mode,
        which_exponent: exponent,
        stride,
    };
    let field = ftle_field(model, &opts, &g.flow)?;
    if field.failed_points > 0 {
        log::warn!("{} grid points diverged and are stored as NaN", field.failed_points);
    }
    Ok(field)
}

fn cmd_ftle(s: &mut Settings, out_dir: &Path, a: &FtleArgs) -> Result<FtleField> {
    let model = load_checkpoint(a.checkpoint.as_ref())?;
    s.record("checkpoint", a.checkpoint.as_ref().unwrap().display());
    let g = grid_setup(s, &a.grid, &model, 200)?;
    let mode: FieldMode = s.get("mode", a.mode.clone(), "full".into())?.parse()?;
    let exponent = s.get("exponent", a.exponent, 1)?;
    let stride = s.get("stride", a.stride, 5)?;
    let prefix = s.get("prefix", a.prefix.clone(), "ftle".into())?;
    let field = compute_field(&model, &g, mode, exponent, stride)?;
    write_field(out_dir, &prefix, &field)?;
    s.write_echo(out_dir)?;
    println!("{} frame(s) written to {}", field.frames.len(), out_dir.display());
    Ok(field)
}

pub fn report_options(s: &mut Settings, a: &AnalyzeArgs, g: &GridSetup) -> Result<ReportOptions> {
    let d = ReportOptions::default();
    Ok(ReportOptions {
        bounds: g.bounds,
        resolution: g.res,
        epsilon: s.get("epsilon", a.epsilon, d.epsilon)?,
        tolerance: s.get("tol", a.tol, d.tolerance)?,
        ridge_quantile: s.get("ridge_quantile", a.ridge_quantile, d.ridge_quantile)?,
        probe_count: s.get("probe_count", a.probe_count, d.probe_count)?,
        probe_epsilon: s.get("probe_eps", a.probe_eps, d.probe_epsilon)?,
        probe_steps: s.get("probe_steps", a.probe_steps, d.probe_steps)?,
        probe_seed: d.probe_seed,
    })
}

/// Almost-invariance of both predicted classes from `t = 0` to `T`.
pub fn coherence(model: &NodeModel, g: &GridSetup, samples: usize) -> Result<Vec<(&'static str, CoherenceReport)>> {
    let spec = GridSpec::new(g.bounds, g.res)?;
    let all = Region {
        spec,
        mask: vec![true; spec.len()],
    };
    let t_end = g.flow.t_end;
    let spec_t = GridSpec::new(image_bounds(model, &all, t_end, 0.05, &g.flow)?, g.res)?;
    let mut out = Vec::new();
    for (name, blue) in [("blue", true), ("orange", false)] {
        let r0 = class_region(model, 0.0, spec, blue, &g.flow);
        let r1 = class_region(model, t_end, spec_t, blue, &g.flow);
        out.push((
            name,
            coherence_ratio(model, &r0, &r1, (0.0, t_end), samples, 0, &g.flow)?,
        ));
    }
    Ok(out)
}

pub fn write_report_artifacts(out_dir: &Path, prefix: &str, r: &ModelReport, opts: &ReportOptions) -> Result<()> {
    use ftle_node::analysis::{decision_margin, extract_ridges, quantile};
    std::fs::create_dir_all(out_dir)?;
    write(&out_dir.join(format!("{prefix}_report.txt")), &r.to_text())?;
    r.lmax.write_ppm(out_dir.join(format!("{prefix}_lmax.ppm")))?;
    write(
        &out_dir.join(format!("{prefix}_lmax.csv")),
        &r.lmax.to_csv("lambda_max over [0,T]", "lambda"),
    )?;
    r.pred.write_pgm_with_meta(out_dir.join(format!("{prefix}_pred.pgm")))?;
    write(
        &out_dir.join(format!("{prefix}_pred.csv")),
        &r.pred.to_csv("prediction", "pred"),
    )?;
    let margin = decision_margin(&r.pred, opts.epsilon)?;
    write_mask_pgm(out_dir.join(format!("{prefix}_margin.pgm")), &r.pred.spec, &margin.mask)?;
    let thr = quantile(&r.lmax, opts.ridge_quantile).unwrap_or(f64::INFINITY);
    write(
        &out_dir.join(format!("{prefix}_ridges.csv")),
        &extract_ridges(&r.lmax, thr).to_csv(),
    )?;
    Ok(())
}

fn cmd_analyze(s: &mut Settings, out_dir: &Path, a: &AnalyzeArgs) -> Result<()> {
    let model = load_checkpoint(a.checkpoint.as_ref())?;
    s.record("checkpoint", a.checkpoint.as_ref().unwrap().display());
    let baseline = match &a.baseline {
        Some(p) => {
            s.record("baseline", p.display());
            Some(load_checkpoint(Some(p))?)
        }
        None => None,
    };
    let g = grid_setup(s, &a.grid, &model, 200)?;
    let opts = report_options(s, a, &g)?;
    let (_, test) = load_data(s, &a.source)?;
    let samples = if a.coherence {
        s.record("coherence", true);
        Some(s.get("coherence_samples", a.coherence_samples, 10_000)?)
    } else {
        None
    };
    s.write_echo(out_dir)?;

    let r = report(&model, &test, &opts, &g.flow)?;
    write_report_artifacts(out_dir, "model", &r, &opts)?;
    let mut text = r.to_text();
    if let Some(b) = &baseline {
        let rb = report(b, &test, &opts, &g.flow)?;
        write_report_artifacts(out_dir, "baseline", &rb, &opts)?;
        let _ = writeln!(text, "baseline_mean_lmax = {}", rb.mean_lmax);
        let _ = writeln!(text, "baseline_margin_area = {}", rb.margin_area);
        let _ = writeln!(text, "baseline_probe_success = {}", rb.probe_success);
        let _ = writeln!(text, "baseline_test_acc = {}", rb.test_acc);
        let _ = writeln!(text, "margin_area_ratio = {}", r.margin_area / rb.margin_area);
    }
    if let Some(n) = samples {
        for (name, c) in coherence(&model, &g, n)? {
            let _ = writeln!(text, "coherence_{name} = {}", c.ratio);
        }
    }
    write(&out_dir.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

/// `t,x1,x2,x0_1,x0_2,class` rows every `stride` steps for a grid of starts.
pub fn evolve_csv(model: &NodeModel, g: &GridSetup, stride: usize) -> Result<String> {
    let spec = GridSpec::new(g.bounds, g.res)?;
    let stride = stride.max(1);
    let mut out = String::from("t,x1,x2,x0_1,x0_2,class\n");
    for p in spec.points() {
        let Ok(traj) = flow(model, &p, (0.0, g.flow.t_end), &g.flow) else {
            continue;
        };
        let class = if predict(model, &p, &g.flow)? > 0.5 {
            "blue"
        } else {
            "orange"
        };
        let last = traj.states.len() - 1;
        for (n, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
            if n % stride == 0 || n == last {
                let _ = writeln!(out, "{t},{},{},{},{},{class}", x[0], x[1], p[0], p[1]);
            }
        }
    }
    Ok(out)
}

fn cmd_evolve(s: &mut Settings, out_dir: &Path, a: &EvolveArgs) -> Result<()> {
    let model = load_checkpoint(a.checkpoint.as_ref())?;
    s.record("checkpoint", a.checkpoint.as_ref().unwrap().display());
    let g = grid_setup(s, &a.grid, &model, 20)?;
    let stride = s.get("stride", a.stride, 1)?;
    s.write_echo(out_dir)?;
    write(&out_dir.join("evolve.csv"), &evolve_csv(&model, &g, stride)?)?;
    println!("wrote {}", out_dir.join("evolve.csv").display());
    Ok(())
}

pub fn train_args_for(preset: Preset, gamma: f64, t1: f64, epochs: usize, seed: u64, n: usize) -> TrainArgs {
    TrainArgs {
        arch: Some(preset.to_string()),
        gamma: Some(gamma),
        t1: Some(t1),
        epochs: Some(epochs),
        seed: Some(seed),
        source: DataSource {
            n: Some(n),
            ..Default::default()
        },
        ..Default::default()
    }
}

pub fn train_into(s: &mut Settings, dir: &Path, a: &TrainArgs) -> Result<Trained> {
    let t = cmd_train(s, dir, a)?;
    // Wall time makes the default log nondeterministic.
    write(&dir.join("train_log.csv"), &t.log.to_csv_untimed())?;
    Ok(t)
}
