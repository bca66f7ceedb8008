//! Experiment commands: each reads a [`Config`], writes CSVs and a JSON
//! report into the output directory.
//!
//! All randomness comes from the experiment seed through named streams
//! (`pool`, `ensemble`, `perturb`, `test`, ...), so a run is fully
//! determined by its config. Reports carry no timing or absolute paths and
//! are byte-identical across repeated runs.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::adrc::{balance_run, BalanceOptions};
use crate::config::{Config, DataSource};
use crate::error::{Error, Result};
use crate::io;
use crate::kinematics::{balanced_pose, ChainGeometry, Pose};
use crate::learner::{fit_from, observe, FitResult, Observation, StopReason};
use crate::mass::{generate_ensemble_with, perturb, BetaEnsemble, BetaVector, EnsembleOptions};
use crate::metalearn::{filter_poses, generate_pool, random_baseline, FilterStatus, PosePool};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenPoses,
    GenBetas,
    Filter,
    Learn,
    Simulate,
    Eval,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenPoses => "gen-poses",
            Command::GenBetas => "gen-betas",
            Command::Filter => "filter",
            Command::Learn => "learn",
            Command::Simulate => "simulate",
            Command::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub experiment: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// `None` for commands without a convergence notion.
    pub converged: Option<bool>,
    pub metrics: BTreeMap<String, Value>,
    /// File names inside the output directory.
    pub outputs: Vec<String>,
}

impl RunReport {
    fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics
            .insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
    }
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_SIMULATION: i32 = 4;

pub fn exit_code_for_error(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::LearningDiverged { .. } | Error::BalanceTimeout(_) | Error::Unbalanced(_) => EXIT_CONVERGENCE,
        Error::SimulationDiverged(_) | Error::ObserverDiverged(_) => EXIT_SIMULATION,
        _ => EXIT_OTHER,
    }
}

pub fn exit_code(result: &Result<RunReport>) -> i32 {
    match result {
        Ok(r) if r.converged == Some(false) => EXIT_CONVERGENCE,
        Ok(_) => EXIT_OK,
        Err(e) => exit_code_for_error(e),
    }
}

/// Poses in training order, tagged with their pool column.
type IndexedPoses = Vec<(usize, Pose)>;

struct Ctx<'a> {
    cfg: &'a Config,
    geom: ChainGeometry,
    truth: BetaVector,
    seed: u64,
}

impl<'a> Ctx<'a> {
    fn new(cfg: &'a Config) -> Result<Self> {
        Ok(Self {
            cfg,
            geom: cfg.model.geometry()?,
            truth: cfg.model.truth()?,
            seed: cfg.experiment.seed,
        })
    }

    fn out(&self, file: &str) -> std::path::PathBuf {
        self.cfg.experiment.out.join(file)
    }

    fn seed_meta(&self) -> Vec<(&'static str, String)> {
        vec![
            ("experiment", self.cfg.experiment.name.clone()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn pool(&self) -> Result<PosePool> {
        match &self.cfg.experiment.pool_file {
            Some(p) => io::read_pool(p, &self.geom),
            None => generate_pool(
                &self.geom,
                &self.truth,
                self.cfg.experiment.n_poses,
                seed::derive(self.seed, "pool"),
            ),
        }
    }

    fn test_pool(&self) -> Result<PosePool> {
        generate_pool(
            &self.geom,
            &self.truth,
            self.cfg.experiment.n_test,
            seed::derive(self.seed, "test"),
        )
    }

    fn ensemble(&self) -> Result<BetaEnsemble> {
        match &self.cfg.experiment.ensemble_file {
            Some(p) => io::read_ensemble(p),
            None => {
                let opts = EnsembleOptions {
                    noise_fraction: self.cfg.experiment.ensemble_noise,
                    mass_feasible: self.cfg.learning.project_mass_sum,
                    ..Default::default()
                };
                generate_ensemble_with(
                    &self.truth,
                    self.cfg.experiment.n_betas,
                    self.cfg.experiment.target_error,
                    &self.geom,
                    seed::derive(self.seed, "ensemble"),
                    &opts,
                )
            }
        }
    }

    fn initial_beta(&self) -> Result<BetaVector> {
        match &self.cfg.experiment.beta_file {
            Some(p) => io::read_beta(p),
            None => perturb(
                &self.truth,
                self.cfg.experiment.noise,
                seed::derive(self.seed, "perturb"),
            ),
        }
    }

    /// Training poses with their pool indices, and whether filtering converged.
    fn training_poses(&self) -> Result<(IndexedPoses, Option<FilterStatus>)> {
        if let Some(p) = &self.cfg.experiment.filtered_file {
            return Ok((io::read_filtered(p, &self.geom)?, None));
        }
        let filtered = filter_poses(&self.pool()?, &self.ensemble()?, &self.cfg.filter_options())?;
        let poses = filtered.selections.iter().map(|s| (s.index, s.pose.clone())).collect();
        Ok((poses, Some(filtered.status)))
    }

    fn quiet_balance(&self) -> BalanceOptions {
        BalanceOptions {
            trace_stride: 0,
            ..self.cfg.balance
        }
    }

    /// Gradient descent over the training poses. Returns the fit and the
    /// number of poses dropped because the balance loop failed on them.
    fn train(&self, beta0: &BetaVector, poses: &[(usize, Pose)], max_iterations: usize) -> Result<(FitResult, usize)> {
        let mut learning = self.cfg.learning;
        learning.max_iterations = learning.max_iterations.min(max_iterations);
        let mut rng = seed::stream(self.seed, "observation");
        let mut next = poses.iter();
        let mut excluded = 0;
        let balance = self.quiet_balance();
        let fit = fit_from(
            beta0,
            |beta| {
                for (id, pose) in next.by_ref() {
                    let balanced = match self.cfg.experiment.data_source {
                        DataSource::Analytic => balanced_pose(&self.geom, pose, &self.truth)?,
                        DataSource::Adrc => {
                            match balance_run(&self.geom, &self.truth, beta, pose, &self.cfg.controller, &balance) {
                                Ok(run) => run.settled_pose,
                                Err(
                                    e @ (Error::BalanceTimeout(_)
                                    | Error::Unbalanced(_)
                                    | Error::SimulationDiverged(_)
                                    | Error::ObserverDiverged(_)),
                                ) => {
                                    log::warn!("pose {id} dropped: {e}");
                                    excluded += 1;
                                    continue;
                                }
                                Err(e) => return Err(e),
                            }
                        }
                    };
                    let phi = observe(&self.geom, &balanced, learning.q1_noise, &mut rng)?;
                    return Ok(Some(Observation { pose_id: *id, phi }));
                }
                Ok(None)
            },
            &learning,
            self.geom.total_mass(),
        )?;
        Ok((fit, excluded))
    }

    fn report(&self, command: Command) -> Result<RunReport> {
        Ok(RunReport {
            experiment: self.cfg.experiment.name.clone(),
            command: command.name().to_string(),
            config_hash: self.cfg.content_hash()?,
            seed: self.seed,
            converged: None,
            metrics: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }
}

fn write_report(out: &Path, report: &mut RunReport) -> Result<()> {
    let name = format!("{}_report.json", report.command);
    report.outputs.push(name.clone());
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join(name), text + "\n")?;
    Ok(())
}

fn error_stats(pool: &PosePool, beta: &BetaVector) -> Value {
    json!({ "mean_abs": pool.mean_abs_error(beta), "max_abs": pool.max_abs_error(beta) })
}

pub fn run(command: Command, cfg: &Config) -> Result<RunReport> {
    let ctx = Ctx::new(cfg)?;
    let mut report = ctx.report(command)?;
    match command {
        Command::GenPoses => gen_poses(&ctx, &mut report)?,
        Command::GenBetas => gen_betas(&ctx, &mut report)?,
        Command::Filter => filter(&ctx, &mut report)?,
        Command::Learn => learn(&ctx, &mut report)?,
        Command::Simulate => simulate(&ctx, &mut report)?,
        Command::Eval => eval(&ctx, &mut report)?,
    }
    write_report(&cfg.experiment.out, &mut report)?;
    Ok(report)
}

fn gen_poses(ctx: &Ctx, report: &mut RunReport) -> Result<()> {
    let pool = ctx.pool()?;
    io::write_pool(&ctx.out("pool.csv"), &pool)?;
    report.outputs.push("pool.csv".into());
    report.metric("n_poses", pool.len());
    report.metric("acceptance_rate", pool.acceptance_rate);
    Ok(())
}

fn gen_betas(ctx: &Ctx, report: &mut RunReport) -> Result<()> {
    let ens = ctx.ensemble()?;
    io::write_ensemble(&ctx.out("ensemble.csv"), &ens)?;
    report.outputs.push("ensemble.csv".into());
    let n = ens.probe_errors.len() as f64;
    let mean = ens.probe_errors.iter().sum::<f64>() / n;
    let std = (ens.probe_errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    report.metric("n_betas", ens.len());
    report.metric("probe_error_mean", mean);
    report.metric("probe_error_std", std);
    report.metric("noise_fraction", ens.noise_fraction);
    Ok(())
}

fn filter(ctx: &Ctx, report: &mut RunReport) -> Result<()> {
    let pool = ctx.pool()?;
    let ens = ctx.ensemble()?;
    let opts = ctx.cfg.filter_options();
    let filtered = filter_poses(&pool, &ens, &opts)?;
    let mut meta = ctx.seed_meta();
    meta.push(("status", format!("{:?}", filtered.status)));
    io::write_filtered(&ctx.out("filtered.csv"), &filtered, &meta)?;
    report.outputs.push("filtered.csv".into());

    let test = ctx.test_pool()?;
    let worst = |betas: &nalgebra::DMatrix<f64>| {
        betas
            .column_iter()
            .map(|b| test.max_abs_error(&BetaVector::from_vector(b.into_owned())))
            .fold(0.0, f64::max)
    };
    report.converged = Some(filtered.status == FilterStatus::Converged);
    report.metric("status", filtered.status);
    report.metric("poses_to_converge", filtered.len());
    report.metric("termination", opts.termination);
    report.metric("ensemble_test_max_error_initial", worst(&ens.betas));
    report.metric("ensemble_test_max_error_final", worst(&filtered.betas));

    if ctx.cfg.filter.baseline_runs > 0 {
        let counts = (0..ctx.cfg.filter.baseline_runs)
            .map(|k| {
                let run = random_baseline(&pool, &ens, &opts, seed::derive(ctx.seed, &format!("baseline{k}")))?;
                Ok(json!({ "poses": run.len(), "status": run.status }))
            })
            .collect::<Result<Vec<_>>>()?;
        report.metric("random_baseline", counts);
    }
    Ok(())
}

fn learn(ctx: &Ctx, report: &mut RunReport) -> Result<()> {
    let beta0 = ctx.initial_beta()?;
    let (poses, filter_status) = ctx.training_poses()?;
    let (fit, excluded) = ctx.train(&beta0, &poses, usize::MAX)?;
    let meta = ctx.seed_meta();
    io::write_learning_curve(&ctx.out("learning_curve.csv"), &fit.trace, &meta)?;
    io::write_beta(&ctx.out("beta.csv"), &fit.beta, &meta)?;
    report.outputs.extend(["learning_curve.csv".into(), "beta.csv".into()]);

    let test = ctx.test_pool()?;
    report.converged = Some(fit.stop == StopReason::Converged);
    report.metric("stop", fit.stop);
    if let Some(status) = filter_status {
        report.metric("filter_status", status);
    }
    report.metric("poses_available", poses.len());
    report.metric("poses_used", fit.trace.len());
    report.metric("poses_excluded", excluded);
    report.metric("test_error_initial", error_stats(&test, &beta0));
    report.metric("test_error_final", error_stats(&test, &fit.beta));
    report.metric("mass_sum_final", fit.beta.mass_sum());
    Ok(())
}

fn simulate(ctx: &Ctx, report: &mut RunReport) -> Result<()> {
    let locked = match &ctx.cfg.experiment.pose {
        Some(q) => Pose::new(q.clone()),
        None => generate_pool(&ctx.geom, &ctx.truth, 1, seed::derive(ctx.seed, "simulate"))?.pose(0),
    };
    let estimate = ctx.initial_beta()?;
    let run = balance_run(
        &ctx.geom,
        &ctx.truth,
        &estimate,
        &locked,
        &ctx.cfg.controller,
        &ctx.cfg.balance,
    )?;
    io::write_trace(&ctx.out("trace.csv"), &run.trace, &ctx.seed_meta())?;
    report.outputs.push("trace.csv".into());
    report.metric("settle_time", run.settle_time);
    report.metric("peak_torque", run.peak_torque);
    report.metric("saturated_steps", run.saturated_steps);
    report.metric("true_balance_angle", run.true_balance_angle);
    report.metric("estimated_balance_angle", run.estimated_balance_angle);
    report.metric("settled_base_pitch", run.settled_pose.base_pitch());
    report.metric("true_x_com", run.true_x_com);
    Ok(())
}

/// Peak torque of a balance run, or `None` if the loop failed.
fn peak_torque(ctx: &Ctx, estimate: &BetaVector, pose: &Pose, balance: &BalanceOptions) -> Result<Option<f64>> {
    match balance_run(&ctx.geom, &ctx.truth, estimate, pose, &ctx.cfg.controller, balance) {
        Ok(run) => Ok(Some(run.peak_torque)),
        Err(
            Error::BalanceTimeout(_) | Error::Unbalanced(_) | Error::SimulationDiverged(_) | Error::ObserverDiverged(_),
        ) => Ok(None),
        Err(e) => Err(e),
    }
}

fn eval(ctx: &Ctx, report: &mut RunReport) -> Result<()> {
    let beta0 = ctx.initial_beta()?;
    let (poses, _) = ctx.training_poses()?;
    let (full, _) = ctx.train(&beta0, &poses, usize::MAX)?;
    let used = full.trace.len();
    let (half, _) = ctx.train(&beta0, &poses, used / 2)?;
    let checkpoints = [(0, beta0.clone()), (half.trace.len(), half.beta), (used, full.beta)];

    let test = ctx.test_pool()?;
    let adrc_poses: Vec<Pose> = (0..ctx.cfg.experiment.adrc_poses.min(test.len()))
        .map(|i| test.pose(i))
        .collect();
    let balance = ctx.quiet_balance();
    let peaks: Vec<Vec<Option<f64>>> = adrc_poses
        .par_iter()
        .map(|pose| {
            checkpoints
                .iter()
                .map(|(_, b)| peak_torque(ctx, b, pose, &balance))
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut summary = io::Table::new(
        [
            "checkpoint",
            "iterations",
            "test_mean_abs_error",
            "test_max_abs_error",
            "adrc_settled",
            "median_peak_torque",
        ]
        .map(String::from)
        .to_vec(),
    );
    for (c, (iterations, beta)) in checkpoints.iter().enumerate() {
        let mut settled: Vec<f64> = peaks.iter().filter_map(|p| p[c]).collect();
        settled.sort_by(f64::total_cmp);
        let median = if settled.is_empty() {
            f64::NAN
        } else {
            settled[settled.len() / 2]
        };
        summary.rows.push(vec![
            c as f64,
            *iterations as f64,
            test.mean_abs_error(beta),
            test.max_abs_error(beta),
            settled.len() as f64,
            median,
        ]);
    }
    for (k, v) in ctx.seed_meta() {
        summary = summary.with_meta(k, v);
    }
    io::write_table(&ctx.out("eval.csv"), &summary)?;

    let mut per_pose = io::Table::new(
        ["test_pose", "peak_initial", "peak_mid", "peak_final"]
            .map(String::from)
            .to_vec(),
    );
    per_pose.rows = peaks
        .iter()
        .enumerate()
        .map(|(i, p)| {
            std::iter::once(i as f64)
                .chain(p.iter().map(|v| v.unwrap_or(f64::NAN)))
                .collect()
        })
        .collect();
    io::write_table(&ctx.out("peaks.csv"), &per_pose)?;
    report.outputs.extend(["eval.csv".into(), "peaks.csv".into()]);

    let non_increasing = peaks
        .iter()
        .filter(|p| match (p[0], p[1], p[2]) {
            (Some(a), Some(b), Some(c)) => a >= b && b >= c,
            _ => false,
        })
        .count();
    report.converged = Some(full.stop == StopReason::Converged);
    report.metric(
        "checkpoints",
        checkpoints
            .iter()
            .map(|(it, b)| json!({ "iterations": it, "test": error_stats(&test, b) }))
            .collect::<Vec<_>>(),
    );
    report.metric("n_test", test.len());
    report.metric("adrc_poses", adrc_poses.len());
    report.metric("peak_torque_non_increasing", non_increasing);
    Ok(())
}
