//! One pipeline per figure id. Every output is a pure function of the flags.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;
use ftle_node::data::make_moons;
use ftle_node::experiment::{regularization_for, report, DataConfig, ReportOptions};
use ftle_node::ftle::FieldMode;
use ftle_node::model::Preset;
use ftle_node::training::TrainConfig;

use crate::commands::{
    coherence, compute_field, evolve_csv, grid_setup, train_args_for, train_into, write, write_field,
    write_report_artifacts, GridSetup, Trained,
};
use crate::settings::Settings;
use crate::{GridArgs, ReproArgs, UsageError};

pub const FIGURES: [(&str, &str); 8] = [
    (
        "fig1",
        "ex1 with and without FTLE suppression: data and lambda_max fields",
    ),
    ("fig2", "ex1 baseline: lambda_max, lambda_min and prediction level sets"),
    ("fig3", "ex1 baseline: growing-interval FTLE frames and trajectories"),
    ("fig4", "ex2 baseline: FTLEs on each autonomous subinterval"),
    (
        "fig5",
        "ex2 baseline: shrinking-interval FTLE frames and class coherence",
    ),
    ("fig6", "ex2 baseline: lambda_max, lambda_min and prediction level sets"),
    ("fig7", "ex1 paired runs (gamma=2, T1=2) from a shared initialization"),
    ("fig8", "ex2 paired runs (gamma=20, T1=6) from a shared initialization"),
];

struct Ctx {
    settings: Settings,
    epochs: usize,
    seed: u64,
    res: usize,
    n: usize,
}

impl Ctx {
    fn train(&self, dir: &Path, preset: Preset, regularized: bool) -> Result<Trained> {
        let (gamma, t1) = if regularized {
            regularization_for(preset)
        } else {
            (0.0, regularization_for(preset).1)
        };
        let mut s = self.settings.clone();
        train_into(
            &mut s,
            dir,
            &train_args_for(preset, gamma, t1, self.epochs, self.seed, self.n),
        )
    }

    fn grid(&self, t: &Trained) -> Result<GridSetup> {
        let mut s = self.settings.clone();
        grid_setup(
            &mut s,
            &GridArgs {
                res: Some(self.res),
                ..Default::default()
            },
            &t.model,
            self.res,
        )
    }
}

pub fn run(s: &mut Settings, out_dir: &Path, a: &ReproArgs) -> Result<()> {
    let Some(&(id, what)) = FIGURES.iter().find(|(id, _)| *id == a.figure) else {
        let ids: Vec<&str> = FIGURES.iter().map(|f| f.0).collect();
        return Err(UsageError(format!("unknown figure '{}'; valid ids: {}", a.figure, ids.join(", "))).into());
    };
    let ctx = Ctx {
        epochs: s.get("epochs", a.epochs, TrainConfig::default().epochs)?,
        seed: s.get("seed", a.seed, 0)?,
        res: s.get("res", a.res, 200)?,
        n: s.get("n", a.n, DataConfig::default().n)?,
        settings: s.clone(),
    };
    let dir = out_dir.join(id);
    s.record("figure", id);
    s.write_echo(&dir)?;
    println!("{id}: {what}");
    let data = DataConfig {
        n: ctx.n,
        ..Default::default()
    };
    write(
        &dir.join("moons.csv"),
        &make_moons(data.n, data.noise, data.seed)?.to_csv(),
    )?;

    match id {
        "fig1" => {
            for (name, reg) in [("baseline", false), ("regularized", true)] {
                let sub = dir.join(name);
                let t = ctx.train(&sub, Preset::Ex1, reg)?;
                let g = ctx.grid(&t)?;
                write_field(&sub, "ftle", &compute_field(&t.model, &g, FieldMode::Full, 1, 1)?)?;
            }
        }
        "fig2" | "fig6" => {
            let preset = if id == "fig2" { Preset::Ex1 } else { Preset::Ex2 };
            let t = ctx.train(&dir, preset, false)?;
            let g = ctx.grid(&t)?;
            for e in [1, 2] {
                write_field(&dir, "ftle", &compute_field(&t.model, &g, FieldMode::Full, e, 1)?)?;
            }
            let opts = ReportOptions {
                resolution: ctx.res,
                ..Default::default()
            };
            write_report_artifacts(&dir, "model", &report(&t.model, &t.test, &opts, &g.flow)?, &opts)?;
            write(
                &dir.join("evolve.csv"),
                &evolve_csv(&t.model, &GridSetup { res: 20, ..g }, 10)?,
            )?;
        }
        "fig3" => {
            let t = ctx.train(&dir, Preset::Ex1, false)?;
            let g = ctx.grid(&t)?;
            write_field(&dir, "ftle", &compute_field(&t.model, &g, FieldMode::Growing, 1, 10)?)?;
            write(
                &dir.join("evolve.csv"),
                &evolve_csv(&t.model, &GridSetup { res: 20, ..g }, 10)?,
            )?;
        }
        "fig4" => {
            let t = ctx.train(&dir, Preset::Ex2, false)?;
            let g = ctx.grid(&t)?;
            write_field(
                &dir,
                "ftle",
                &compute_field(&t.model, &g, FieldMode::Subinterval, 1, 1)?,
            )?;
            write(
                &dir.join("evolve.csv"),
                &evolve_csv(&t.model, &GridSetup { res: 20, ..g }, 5)?,
            )?;
        }
        "fig5" => {
            let t = ctx.train(&dir, Preset::Ex2, false)?;
            let g = ctx.grid(&t)?;
            write_field(&dir, "ftle", &compute_field(&t.model, &g, FieldMode::Shrinking, 1, 10)?)?;
            write(
                &dir.join("evolve.csv"),
                &evolve_csv(&t.model, &GridSetup { res: 20, ..g }, 10)?,
            )?;
            let mut text = String::new();
            for (name, c) in coherence(&t.model, &g, 10_000)? {
                let _ = writeln!(text, "coherence_{name} = {}", c.ratio);
            }
            write(&dir.join("coherence.txt"), &text)?;
        }
        "fig7" | "fig8" => {
            let preset = if id == "fig7" { Preset::Ex1 } else { Preset::Ex2 };
            let opts = ReportOptions {
                resolution: ctx.res,
                ..Default::default()
            };
            let mut summary = String::new();
            let mut reports = Vec::new();
            for (name, reg) in [("baseline", false), ("regularized", true)] {
                let sub = dir.join(name);
                let t = ctx.train(&sub, preset, reg)?;
                let g = ctx.grid(&t)?;
                let r = report(&t.model, &t.test, &opts, &g.flow)?;
                write_report_artifacts(&sub, "model", &r, &opts)?;
                if preset == Preset::Ex2 {
                    write_field(
                        &sub,
                        "ftle",
                        &compute_field(&t.model, &g, FieldMode::Subinterval, 1, 1)?,
                    )?;
                }
                write(
                    &sub.join("evolve.csv"),
                    &evolve_csv(&t.model, &GridSetup { res: 20, ..g }, 10)?,
                )?;
                for line in r.to_text().lines() {
                    let _ = writeln!(summary, "{name}.{line}");
                }
                reports.push(r);
            }
            let _ = writeln!(
                summary,
                "margin_area_ratio = {}",
                reports[1].margin_area / reports[0].margin_area
            );
            write(&dir.join("comparison.txt"), &summary)?;
            print!("{summary}");
        }
        _ => unreachable!("figure ids are matched above"),
    }
    println!("outputs in {}", dir.display());
    Ok(())
}
