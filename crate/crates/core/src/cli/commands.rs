//! Bodies of the subcommands. Each takes the resolved configuration, checks
//! its inputs (listing every missing one), writes `run.toml` and then its
//! outputs into `paths.out`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::config::{render_flat, RunConfig, TuneMethod};
use super::report::{self, record_timing, TimingRow};
use super::CliError;
use crate::eval::{self, InverseOptions};
use crate::losses::LossMode;
use crate::nets::{load_checkpoint, save_checkpoint, Model};
use crate::synth;
use crate::train::{self, EpochRecord, FloatMode, TrainConfig, TrainError};
use crate::tune::{self, AlphaGrid, GpHyper};
use crate::volume::{load_mask, load_volume, read_landmarks, save_volume, Mask, Volume};

pub const RUN_FILE: &str = "run.toml";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FIELD_FILE: &str = "field.vh";
pub const MOVED_FILE: &str = "moved.vh";
pub const MOVED_MASK_FILE: &str = "moved_mask.vh";
pub const TRE_FILE: &str = "tre.csv";
pub const EVAL_SUMMARY_FILE: &str = "summary.toml";

/// A path setting that a command needs.
struct Need<'a> {
    key: &'static str,
    value: &'a Option<PathBuf>,
    /// Whether the path must already exist.
    input: bool,
}

fn need<'a>(key: &'static str, value: &'a Option<PathBuf>) -> Need<'a> {
    Need { key, value, input: true }
}

fn need_out(value: &Option<PathBuf>) -> Need<'_> {
    Need {
        key: "paths.out",
        value,
        input: false,
    }
}

/// Check every required path at once.
fn require(needs: &[Need]) -> Result<(), CliError> {
    let mut errors = Vec::new();
    for n in needs {
        match n.value {
            None => errors.push(format!("{} is required", n.key)),
            Some(p) if n.input && !p.exists() => errors.push(format!("{} = {} does not exist", n.key, p.display())),
            _ => {}
        }
    }
    if errors.is_empty() {
        Ok(())
    } else {
        Err(CliError::Config(errors))
    }
}

fn get(p: &Option<PathBuf>) -> &Path {
    p.as_deref().expect("checked by require")
}

/// Optional inputs still have to exist when given.
fn optional_exists(errors: &mut Vec<String>, key: &str, p: &Option<PathBuf>) {
    if let Some(p) = p {
        if !p.exists() {
            errors.push(format!("{key} = {} does not exist", p.display()));
        }
    }
}

/// Write the resolved configuration plus `meta.*` provenance.
pub fn write_run_file(cfg: &RunConfig, command: &str, dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    let mut flat = cfg.to_flat();
    flat.insert("meta.command".into(), toml::Value::String(command.into()));
    flat.insert(
        "meta.version".into(),
        toml::Value::String(env!("CARGO_PKG_VERSION").into()),
    );
    let text = format!(
        "# Resolved settings; rerun with `inrreg {command} --config {RUN_FILE}`.\n{}",
        render_flat(&flat)
    );
    fs::write(dir.join(RUN_FILE), text)?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    require(&[need_out(&cfg.paths.out)])?;
    let out = get(&cfg.paths.out);
    let data = synth::generate(&cfg.synth)?;
    let paths = synth::write_outputs(&data, &cfg.synth, out)?;
    write_run_file(cfg, "synth", out)?;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

/// Train in the configured precision and return the model as stored in
/// checkpoints. The observer receives each epoch's record and a way to
/// snapshot the current parameters.
fn train_any(
    cfg: &TrainConfig,
    moving: &Volume,
    fixed: &Volume,
    mask: &Mask,
    mut observer: impl FnMut(&EpochRecord, &dyn Fn() -> Model<f32>) -> Result<(), TrainError>,
) -> Result<Model<f32>, TrainError> {
    match cfg.float {
        FloatMode::F32 => Ok(train::train::<f32>(moving, fixed, mask, cfg, |r, m| observer(r, &|| m.cast()))?.model),
        FloatMode::F64 => Ok(train::train::<f64>(moving, fixed, mask, cfg, |r, m| observer(r, &|| m.cast()))?
            .model
            .cast()),
    }
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.paths;
    require(&[
        need("paths.moving", &p.moving),
        need("paths.fixed", &p.fixed),
        need("paths.mask", &p.mask),
        need_out(&p.out),
    ])?;
    let out = get(&p.out);
    let moving = load_volume(get(&p.moving))?;
    let fixed = load_volume(get(&p.fixed))?;
    let mask = load_mask(get(&p.mask))?;
    write_run_file(cfg, "train", out)?;
    let tc = &cfg.train;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    if tc.checkpoint_every > 0 {
        fs::create_dir_all(&ckpt_dir)?;
    }
    let mut log = Vec::with_capacity(tc.epochs);
    let start = Instant::now();
    let result = train_any(tc, &moving, &fixed, &mask, |r, snapshot| {
        log.push(*r);
        if tc.checkpoint_every > 0 && (r.epoch + 1) % tc.checkpoint_every == 0 {
            save_checkpoint(&snapshot(), &ckpt_dir.join(format!("epoch_{:06}.ckpt", r.epoch + 1)))?;
        }
        Ok(())
    });
    let seconds = start.elapsed().as_secs_f64();
    // The log is written even on failure so the divergence can be inspected.
    train::write_loss_log(&out.join(report::LOSS_LOG_FILE), &log)?;
    let model = result?;
    save_checkpoint(&model, &out.join(CHECKPOINT_FILE))?;
    record_timing(
        out,
        TimingRow {
            method: "train".into(),
            seconds,
            evaluations: 0,
            training_steps: log.len(),
        },
    )?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs in {seconds:.1} s; final sim {:.5} reg {:.5} total {:.5}",
            log.len(),
            last.sim,
            last.reg,
            last.total
        );
    }
    Ok(())
}

fn inverse_options(cfg: &RunConfig) -> InverseOptions {
    InverseOptions {
        iterations: cfg.eval.inverse_iterations,
        tolerance: cfg.eval.inverse_tolerance,
    }
}

/// α to evaluate a checkpoint at: required for conditioned models, ignored
/// otherwise.
fn model_alpha(model: &Model<f32>, cfg: &RunConfig) -> Result<Option<f64>, CliError> {
    match (model.is_conditioned(), cfg.eval.alpha) {
        (true, Some(a)) => Ok(Some(a)),
        (true, None) => Err(CliError::config("eval.alpha is required for a conditioned checkpoint")),
        (false, _) => Ok(None),
    }
}

pub fn tune(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.paths;
    let method = cfg.tune.method;
    let grid_on = matches!(method, TuneMethod::Grid | TuneMethod::Both);
    let bo_on = matches!(method, TuneMethod::Bo | TuneMethod::Both);
    let mut needs = vec![
        need("paths.mask", &p.mask),
        need("paths.fixed_mask", &p.fixed_mask),
        need_out(&p.out),
    ];
    if grid_on {
        needs.push(need("paths.checkpoint", &p.checkpoint));
    }
    if bo_on {
        needs.push(need("paths.moving", &p.moving));
        needs.push(need("paths.fixed", &p.fixed));
    }
    require(&needs)?;
    let grid = AlphaGrid::new(cfg.tune.grid.clone())?;
    let out = get(&p.out);
    let mask = load_mask(get(&p.mask))?;
    let fixed_mask = load_mask(get(&p.fixed_mask))?;
    let opts = inverse_options(cfg);
    let model = if grid_on {
        let m: Model<f32> = load_checkpoint(get(&p.checkpoint))?;
        if !m.is_conditioned() {
            return Err(CliError::config(
                "grid search needs a conditioned checkpoint (train with train.mode = \"conditioned\")",
            ));
        }
        Some(m)
    } else {
        None
    };
    write_run_file(cfg, "tune", out)?;

    if let Some(model) = &model {
        let start = Instant::now();
        let result = tune::grid_search_alpha(model, &mask, &fixed_mask, &grid, opts)?;
        let seconds = start.elapsed().as_secs_f64();
        tune::write_grid_table(&out.join(report::TUNE_FILE), &result)?;
        record_timing(
            out,
            TimingRow {
                method: "grid".into(),
                seconds,
                evaluations: result.evaluations,
                training_steps: 0,
            },
        )?;
        println!(
            "grid search: alpha_star = {} over {} values in {seconds:.2} s",
            result.alpha_star, result.evaluations
        );
        // Regularity of the emitted field along the grid, outside the timed
        // search.
        let points = eval::sample_points(Some(&mask), cfg.eval.jacobian_samples, cfg.eval.seed)?;
        let mut sweep = String::from("alpha,dice,bending,fraction_nonpositive\n");
        for &(a, d) in &result.table {
            let b = eval::bending_energy(model, Some(a), &points)?;
            let j = eval::jacobian_stats(model, Some(a), &points)?;
            let _ = writeln!(sweep, "{a},{d},{b},{}", j.fraction_nonpositive);
        }
        fs::write(out.join(report::SWEEP_FILE), sweep)?;
    }

    if bo_on {
        let moving = load_volume(get(&p.moving))?;
        let fixed = load_volume(get(&p.fixed))?;
        let base = TrainConfig {
            mode: LossMode::Baseline,
            epochs: cfg.tune.bo_epochs,
            checkpoint_every: 0,
            ..cfg.train.clone()
        };
        let mut failure: Option<TrainError> = None;
        let start = Instant::now();
        let result = tune::bo_optimize(
            |alpha| {
                let tc = TrainConfig {
                    baseline_alpha: alpha,
                    ..base.clone()
                };
                let trained = train_any(&tc, &moving, &fixed, &mask, |_, _| Ok(()));
                match trained {
                    Ok(m) => tune::dice_at(&m, alpha, &mask, &fixed_mask, opts),
                    Err(e) => {
                        let message = e.to_string();
                        failure = Some(e);
                        Err(tune::TuneError::Objective { alpha, message })
                    }
                }
            },
            cfg.tune.bo_budget,
            cfg.tune.bo_seed,
            GpHyper::default(),
        );
        let seconds = start.elapsed().as_secs_f64();
        let result = match (result, failure) {
            (Err(_), Some(e)) => return Err(e.into()),
            (r, _) => r?,
        };
        tune::write_bo_history(&out.join(report::BO_FILE), &result)?;
        record_timing(
            out,
            TimingRow {
                method: "bo".into(),
                seconds,
                evaluations: result.history.len(),
                training_steps: result.history.len() * cfg.tune.bo_epochs,
            },
        )?;
        println!(
            "bayesian optimization: best alpha = {:.4} (dice {:.4}) after {} retrainings in {seconds:.1} s",
            result.alpha_best,
            result.best_objective,
            result.history.len()
        );
    }
    Ok(())
}

pub fn warp(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.paths;
    require(&[
        need("paths.checkpoint", &p.checkpoint),
        need("paths.moving", &p.moving),
        need_out(&p.out),
    ])?;
    let mut errors = Vec::new();
    optional_exists(&mut errors, "paths.mask", &p.mask);
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    let out = get(&p.out);
    let model: Model<f32> = load_checkpoint(get(&p.checkpoint))?;
    let alpha = model_alpha(&model, cfg)?;
    let moving = load_volume(get(&p.moving))?;
    let mask = p.mask.as_deref().map(load_mask).transpose()?;
    write_run_file(cfg, "warp", out)?;
    let opts = inverse_options(cfg);
    let field = eval::dense_field(&model, alpha, moving.dims, moving.spacing)?;
    field.save(&out.join(FIELD_FILE))?;
    save_volume(&eval::warp_volume(&moving, &field, opts)?, &out.join(MOVED_FILE))?;
    if let Some(mask) = mask {
        save_volume(eval::warp_mask(&mask, &field, opts)?.volume(), &out.join(MOVED_MASK_FILE))?;
    }
    println!("wrote {}", out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.paths;
    require(&[
        need("paths.checkpoint", &p.checkpoint),
        need("paths.moving", &p.moving),
        need("paths.landmarks", &p.landmarks),
        need_out(&p.out),
    ])?;
    let mut errors = Vec::new();
    optional_exists(&mut errors, "paths.mask", &p.mask);
    optional_exists(&mut errors, "paths.fixed_mask", &p.fixed_mask);
    if p.fixed_mask.is_some() && p.mask.is_none() {
        errors.push("paths.fixed_mask is given but Dice also needs paths.mask".into());
    }
    if !errors.is_empty() {
        return Err(CliError::Config(errors));
    }
    let out = get(&p.out);
    let model: Model<f32> = load_checkpoint(get(&p.checkpoint))?;
    let alpha = model_alpha(&model, cfg)?;
    let reference = load_volume(get(&p.moving))?;
    let landmarks = read_landmarks(get(&p.landmarks), cfg.eval.one_based)?;
    let mask = p.mask.as_deref().map(load_mask).transpose()?;
    let fixed_mask = p.fixed_mask.as_deref().map(load_mask).transpose()?;
    write_run_file(cfg, "eval", out)?;

    let tre = eval::tre(&model, alpha, &landmarks, &reference)?;
    let initial = eval::tre_mapped(&landmarks, reference.spacing, |v| v);
    let mut csv = String::from("landmark,tre_mm,initial_mm\n");
    for (i, (d, d0)) in tre.per_landmark.iter().zip(&initial.per_landmark).enumerate() {
        let _ = writeln!(csv, "{i},{d},{d0}");
    }
    fs::write(out.join(TRE_FILE), csv)?;

    let points = eval::sample_points(mask.as_ref(), cfg.eval.jacobian_samples, cfg.eval.seed)?;
    let jac = eval::jacobian_stats(&model, alpha, &points)?;
    let dice = match (&mask, &fixed_mask) {
        (Some(m), Some(f)) => Some(tune::dice_at(&model, alpha.unwrap_or(0.0), m, f, inverse_options(cfg))?),
        _ => None,
    };

    let mut t = toml::Table::new();
    let f = toml::Value::Float;
    if let Some(a) = alpha {
        t.insert("alpha".into(), f(a));
    }
    t.insert("landmarks".into(), toml::Value::Integer(landmarks.len() as i64));
    t.insert("tre_mean_mm".into(), f(tre.mean));
    t.insert("tre_std_mm".into(), f(tre.std));
    t.insert("initial_tre_mean_mm".into(), f(initial.mean));
    t.insert("initial_tre_std_mm".into(), f(initial.std));
    if let Some(d) = dice {
        t.insert("dice".into(), f(d));
    }
    t.insert("jacobian_samples".into(), toml::Value::Integer(points.len() as i64));
    t.insert("jacobian_fraction_nonpositive".into(), f(jac.fraction_nonpositive));
    t.insert("jacobian_min_det".into(), f(jac.min_det));
    t.insert("jacobian_mean_abs_deviation".into(), f(jac.mean_abs_deviation));
    let text = toml::to_string(&t).map_err(|e| CliError::Runtime(e.to_string()))?;
    fs::write(out.join(EVAL_SUMMARY_FILE), &text)?;
    print!("{text}");
    Ok(())
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let inputs: Vec<PathBuf> = if cfg.report_inputs.is_empty() {
        cfg.paths.out.iter().cloned().collect()
    } else {
        cfg.report_inputs.clone()
    };
    if inputs.is_empty() {
        return Err(CliError::config("report needs input directories or paths.out"));
    }
    let out = cfg.paths.out.clone().unwrap_or_else(|| inputs[0].clone());
    let summary = report::build_report(&inputs, &out)?;
    write_run_file(cfg, "report", &out)?;
    match (summary.grid_seconds, summary.bo_seconds, summary.ratio) {
        (Some(g), Some(b), Some(r)) => {
            println!("grid search {g:.3} s, bayesian optimization {b:.3} s, ratio {r:.2}")
        }
        _ => println!("wrote {}", out.join(report::SUMMARY_FILE).display()),
    }
    Ok(())
}
