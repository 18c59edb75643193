//! `provfield` command-line front end.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use provfield::applications::{optimize_viewpoint, refine_density};
use provfield::evaluation::evaluate_provenance;
use provfield::fixtures::{self, Fixture};
use provfield::geometry::{cameras_to_json, PinholeCamera, Vec3};
use provfield::io::{save_pfm, save_ppm};
use provfield::provenance::{
    train_deterministic_baseline, train_provenance_field, EmpiricalOracle, ProvenanceField, ProvenanceSource,
};
use provfield::scene::{DensityField, VoxelField};
use provfield::uncertainty::{nll_of_surface, uncertainty_map};

use config::{RunConfig, SourceKind};

#[derive(Parser)]
#[command(name = "provfield", version, about = "Provenance fields over synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to absent keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a provenance field and write its checkpoint and loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train the single-output baseline instead.
        #[arg(long)]
        deterministic: bool,
    },
    /// Surface NLL report and per-view uncertainty / depth-error maps.
    Uncertainty(Common),
    /// AP/AUC of predicted against ground-truth provenances.
    Eval(Common),
    /// Refine a voxel field with depth supervision and the hinge regularizer.
    Refine(Common),
    /// Optimize a viewpoint against an objective and the provenance terms.
    Viewselect(Common),
    /// Write the bundled fixture scenes and cameras.
    GenScene(Common),
}

/// Numerical failures exit with 2, everything else with 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<provfield::Error>() {
        Some(provfield::Error::Diverged(_) | provfield::Error::NonFinite(_) | provfield::Error::NanGradient(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train { common, deterministic } => cmd_train(&prepare(&common)?, deterministic),
        Command::Uncertainty(c) => cmd_uncertainty(&prepare(&c)?),
        Command::Eval(c) => cmd_eval(&prepare(&c)?),
        Command::Refine(c) => cmd_refine(&prepare(&c)?),
        Command::Viewselect(c) => cmd_viewselect(&prepare(&c)?),
        Command::GenScene(c) => cmd_gen_scene(&RunConfig::resolve(c.config.as_deref(), c.seed, c.out.as_deref())?),
    }
}

/// Resolves the config, creates the output directory and echoes the config there.
fn prepare(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(common.config.as_deref(), common.seed, common.out.as_deref())?;
    fs::create_dir_all(&cfg.out).with_context(|| format!("cannot create {}", cfg.out.display()))?;
    write(&cfg.out.join("config.json"), &to_json(&cfg)?)?;
    Ok(cfg)
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn test_cameras(fx: &Fixture) -> &[PinholeCamera] {
    if fx.held_out.is_empty() {
        &fx.cams
    } else {
        &fx.held_out
    }
}

enum Source<'a> {
    Field(Box<ProvenanceField>),
    Oracle(EmpiricalOracle<'a, provfield::scene::AnalyticScene>),
}

impl Source<'_> {
    fn as_dyn(&self) -> &dyn ProvenanceSource {
        match self {
            Source::Field(f) => f.as_ref(),
            Source::Oracle(o) => o,
        }
    }
}

fn load_source<'a>(cfg: &RunConfig, fx: &'a Fixture) -> Result<Source<'a>> {
    Ok(match cfg.source {
        SourceKind::Field => {
            let path = cfg.checkpoint_path();
            if !path.exists() {
                return Err(provfield::Error::Config(format!("checkpoint {} not found", path.display())).into());
            }
            let field = ProvenanceField::load(&path).with_context(|| format!("cannot load {}", path.display()))?;
            Source::Field(Box::new(field))
        }
        SourceKind::Oracle => Source::Oracle(EmpiricalOracle::new(&fx.scene, &fx.cams)),
    })
}

fn cmd_train(cfg: &RunConfig, deterministic: bool) -> Result<()> {
    let fx = cfg.load_rig()?;
    let outcome = if deterministic {
        train_deterministic_baseline(&fx.scene, &fx.cams, &cfg.train, cfg.seed)?
    } else {
        train_provenance_field(&fx.scene, &fx.cams, &cfg.train, cfg.seed)?
    };
    outcome.field.save(&cfg.checkpoint_path())?;
    let mut csv = String::from("iter,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    write(&cfg.out.join("losses.csv"), &csv)
}

fn cmd_uncertainty(cfg: &RunConfig) -> Result<()> {
    let fx = cfg.load_rig()?;
    let source = load_source(cfg, &fx)?;
    let test = test_cameras(&fx);
    let report = nll_of_surface(source.as_dyn(), &fx.scene, test, &cfg.uncertainty, &fx.name, cfg.seed)?;
    write(&cfg.out.join("nll_report.json"), &to_json(&report)?)?;
    let voxel;
    let rendered: &dyn DensityField = if cfg.render_grid > 0 {
        voxel = VoxelField::from_field(&fx.scene, cfg.render_grid, 32)?;
        &voxel
    } else {
        &fx.scene
    };
    for (i, cam) in test.iter().enumerate() {
        let map = uncertainty_map(source.as_dyn(), rendered, &fx.scene, cam, &cfg.uncertainty, cfg.seed ^ i as u64)?;
        let (w, h) = (map.width, map.height);
        save_pfm(&cfg.out.join(format!("nll_{i}.pfm")), w, h, &map.nll)?;
        save_ppm(&cfg.out.join(format!("nll_{i}.ppm")), w, h, &map.normalized_nll())?;
        save_pfm(&cfg.out.join(format!("depth_error_{i}.pfm")), w, h, &map.depth_error)?;
        save_ppm(&cfg.out.join(format!("depth_error_{i}.ppm")), w, h, &map.normalized_depth_error())?;
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let fx = cfg.load_rig()?;
    let source = load_source(cfg, &fx)?;
    let (report, curve) = evaluate_provenance(source.as_dyn(), &fx.scene, &fx.cams, &cfg.eval, cfg.seed)?;
    write(&cfg.out.join("metrics.json"), &to_json(&report)?)?;
    write(&cfg.out.join("pr_curve.csv"), &curve.to_csv())
}

#[derive(Serialize)]
struct RefineSummary {
    initial_mae: f64,
    final_mae: f64,
    reg_weight: f64,
    iterations: usize,
}

fn cmd_refine(cfg: &RunConfig) -> Result<()> {
    let fx = cfg.load_rig()?;
    let source = load_source(cfg, &fx)?;
    let r = &cfg.refine;
    let mut voxel = VoxelField::from_field(&fx.scene, r.grid, r.n_q)?;
    for b in &r.floaters {
        voxel.add_blob(&Vec3::from(b.center), b.radius, b.sigma);
    }
    let outcome = refine_density(&voxel, source.as_dyn(), &fx.cams, test_cameras(&fx), &fx.scene, &r.regularizer, cfg.seed)?;
    let mut csv = Vec::new();
    outcome.write_csv(&mut csv)?;
    write(&cfg.out.join("refine.csv"), &String::from_utf8(csv)?)?;
    let summary = RefineSummary {
        initial_mae: outcome.trace.first().map(|s| s.depth_mae_holdout).unwrap_or(f64::NAN),
        final_mae: outcome.final_mae(),
        reg_weight: r.regularizer.reg_weight,
        iterations: r.regularizer.iterations,
    };
    write(&cfg.out.join("refine_summary.json"), &to_json(&summary)?)
}

#[derive(Serialize)]
struct ViewSummary {
    status: provfield::applications::ViewStatus,
    steps: usize,
    initial_objective: f64,
    final_objective: f64,
    initial_nearest_y_dist: f64,
    final_nearest_y_dist: f64,
}

fn cmd_viewselect(cfg: &RunConfig) -> Result<()> {
    let fx = cfg.load_rig()?;
    let source = load_source(cfg, &fx)?;
    let start = match (&cfg.viewselect.start, fx.name.as_str()) {
        (None, "floater-rig") => fixtures::floater_view_start()?,
        _ => cfg.start_camera(test_cameras(&fx))?,
    };
    let traj = optimize_viewpoint(&start, source.as_dyn(), &cfg.viewselect.select, cfg.seed)?;
    let mut csv = Vec::new();
    traj.write_csv(&mut csv)?;
    write(&cfg.out.join("trajectory.csv"), &String::from_utf8(csv)?)?;
    let (first, last) = (&traj.steps[0], traj.steps.last().expect("initial step"));
    let summary = ViewSummary {
        status: traj.status,
        steps: traj.steps.len(),
        initial_objective: first.objective,
        final_objective: last.objective,
        initial_nearest_y_dist: first.nearest_y_dist,
        final_nearest_y_dist: last.nearest_y_dist,
    };
    write(&cfg.out.join("viewselect.json"), &to_json(&summary)?)
}

fn cmd_gen_scene(cfg: &RunConfig) -> Result<()> {
    for name in fixtures::FIXTURE_NAMES {
        let fx = fixtures::by_name(name).expect("listed fixture")?;
        let dir = cfg.out.join(name);
        fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write(&dir.join("scene.json"), &(fx.scene.to_json()? + "\n"))?;
        write(&dir.join("cameras.json"), &(cameras_to_json(&fx.cams)? + "\n"))?;
        if !fx.held_out.is_empty() {
            write(&dir.join("test_cameras.json"), &(cameras_to_json(&fx.held_out)? + "\n"))?;
        }
    }
    Ok(())
}
