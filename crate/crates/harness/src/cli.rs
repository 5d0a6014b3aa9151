//! `ddc` subcommands. Exit codes: 0 success, 1 failed checks or runtime
//! errors, 2 usage, config or data errors.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ddc_core::asymptotics::{w_amse, w_av, LimitInputs};
use ddc_core::dgp::{sample_dataset, true_joint, SampleSize};
use ddc_core::estimate::{k_stage_estimate, SampleAnalogues};
use ddc_core::model::{solve_ccp_fixed_point, CcpMatrix, FIXED_POINT_MAX_ITER, FIXED_POINT_TOL};

use crate::config::{estimator_kind, Config, EstimatorChoice, Rate, Scaling};
use crate::error::{HarnessError, Result};
use crate::manifest::{self, OutputFile, RunManifest, RunStatus};
use crate::mc::{self, Experiment, ReplicationRecord};
use crate::{io, table, verify};

pub const WORKERS_ENV: &str = "DDC_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "ddc", version, about = "Dynamic discrete choice estimation under local misspecification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Ml,
    Md,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightArg {
    Identity,
    WAv,
    WAmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Model,
    Asymptotics,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FaultArg {
    /// Perturb the first block of Phi by 1% where it is used as a weight.
    Phi,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve for the model CCPs at the design's structural parameters.
    Solve {
        config: PathBuf,
        #[arg(long, default_value_t = FIXED_POINT_TOL)]
        tol: f64,
        #[arg(long, default_value_t = FIXED_POINT_MAX_ITER)]
        max_iter: usize,
    },
    /// Run the K-stage estimator on a dataset.
    Estimate {
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, value_enum, default_value_t = EstimatorArg::Ml)]
        estimator: EstimatorArg,
        #[arg(long, value_enum, default_value_t = WeightArg::Identity)]
        weight: WeightArg,
    },
    /// Draw a dataset from the design's DGP at sample size n.
    Simulate {
        config: PathBuf,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides `design.delta`, e.g. 1/3.
        #[arg(long)]
        delta: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo experiment and write records, summaries and tables.
    Experiment {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = WORKERS_ENV)]
        workers: Option<usize>,
        #[arg(long)]
        full_scale: bool,
        /// Overrides the configured replication count.
        #[arg(long)]
        replications: Option<usize>,
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Run the numerical self-checks.
    Verify {
        #[arg(long, value_enum, default_value_t = SuiteArg::All)]
        suite: SuiteArg,
        #[arg(long, value_enum, hide = true)]
        inject_fault: Option<FaultArg>,
    },
}

/// Parses `args` and runs the command, writing reports to `out`.
pub fn run_from<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Solve { config, tol, max_iter } => cmd_solve(&config, tol, max_iter, out),
        Command::Estimate {
            config,
            data,
            k,
            estimator,
            weight,
        } => cmd_estimate(&config, &data, k, estimator, weight, out),
        Command::Simulate {
            config,
            n,
            seed,
            delta,
            out: path,
        } => cmd_simulate(&config, n, seed, delta.as_deref(), &path, out),
        Command::Experiment {
            config,
            out: dir,
            workers,
            full_scale,
            replications,
            resume,
            force,
        } => {
            let opts = ExperimentOptions {
                workers: workers.unwrap_or_else(default_workers),
                full_scale,
                replications,
                resume,
                force,
            };
            cmd_experiment(&config, &dir, &opts, out).map(|_| ())
        }
        Command::Verify { suite, inject_fault } => {
            let suite = match suite {
                SuiteArg::Model => verify::Suite::Model,
                SuiteArg::Asymptotics => verify::Suite::Asymptotics,
                SuiteArg::All => verify::Suite::All,
            };
            let faults = verify::Faults {
                phi_scale: if inject_fault.is_some() { 0.01 } else { 0.0 },
            };
            cmd_verify(suite, faults, out)
        }
    }
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn w(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).map_err(|e| HarnessError::io("<stdout>", e))
}

pub fn cmd_solve(config: &Path, tol: f64, max_iter: usize, out: &mut dyn Write) -> Result<()> {
    let (cfg, _) = Config::load(config)?;
    if !(tol > 0.0) || max_iter == 0 {
        return Err(HarnessError::Usage("tolerance and iteration cap must be positive".into()));
    }
    let model = cfg.model.build()?;
    let (alpha, theta_f) = (&cfg.design.theta_u, &cfg.design.theta_f);
    let p0 = CcpMatrix::uniform(model.n_actions(), model.n_states());
    let fp = solve_ccp_fixed_point(&model, alpha, theta_f, &p0, tol, max_iter)?;
    let v = model.primitives(alpha, theta_f)?.varphi(&fp.ccp)?;
    w(out, format_args!("iterations,{}\nresidual,{}\n", fp.iterations, fp.residual))?;
    let mut head = String::from("x");
    for a in 1..=model.n_actions() {
        head.push_str(&format!(",P(a={a}|x)"));
    }
    w(out, format_args!("{head},V\n"))?;
    for x in 0..model.n_states() {
        let mut line = (x + 1).to_string();
        for a in 0..model.n_actions() {
            line.push_str(&format!(",{}", fp.ccp.get(a, x)));
        }
        w(out, format_args!("{line},{}\n", v.values()[x]))?;
    }
    Ok(())
}

pub fn cmd_estimate(
    config: &Path,
    data: &Path,
    k: usize,
    estimator: EstimatorArg,
    weight: WeightArg,
    out: &mut dyn Write,
) -> Result<()> {
    let (cfg, _) = Config::load(config)?;
    if k == 0 {
        return Err(HarnessError::Usage("--k must be at least 1".into()));
    }
    let model = cfg.model.build()?;
    let dataset = io::read_dataset(data, model.n_actions(), model.n_states())?;
    let first_step = cfg.design.first_step.build();
    let choice = match (estimator, weight) {
        (EstimatorArg::Ml, _) => EstimatorChoice::Ml,
        (EstimatorArg::Md, WeightArg::Identity) => EstimatorChoice::MdIdentity,
        (EstimatorArg::Md, WeightArg::WAv) => EstimatorChoice::MdWAv,
        (EstimatorArg::Md, WeightArg::WAmse) => EstimatorChoice::MdWAmse,
    };
    let (wav, wamse) = if choice.needs_limit_inputs() {
        let design = cfg.design.build(&model, cfg.design.single_delta())?;
        let inputs = LimitInputs::from_design(&model, &design, &first_step)?;
        let wamse = if choice == EstimatorChoice::MdWAmse {
            Some(w_amse(&inputs)?)
        } else {
            None
        };
        (Some(w_av(&inputs)?), wamse)
    } else {
        (None, None)
    };
    let kind = estimator_kind(choice, wav.as_ref(), wamse.as_ref())?;
    let analogues = SampleAnalogues::from_dataset(&dataset)?;
    let trace = k_stage_estimate(&model, &dataset, &analogues, k, &kind, &first_step, None)?;
    let tf: Vec<String> = trace.theta_f_hat.iter().map(|t| t.to_string()).collect();
    w(out, format_args!("estimator,{}\n", choice.display()))?;
    w(out, format_args!("theta_f_hat,{}\n", tf.join(",")))?;
    if analogues.flagged() {
        w(out, format_args!("flagged,empty or degenerate cells in the sample\n"))?;
    }
    let mut head = String::from("stage");
    for c in 1..=model.n_alpha() {
        head.push_str(&format!(",{}", io::coord_label(c)));
    }
    w(out, format_args!("{head},criterion,converged,at_boundary\n"))?;
    for s in 0..trace.stages() {
        let mut line = (s + 1).to_string();
        for a in &trace.alpha_stages[s] {
            line.push_str(&format!(",{a}"));
        }
        w(
            out,
            format_args!(
                "{line},{},{},{}\n",
                trace.criterion_values[s], trace.converged[s], trace.at_boundary[s]
            ),
        )?;
    }
    Ok(())
}

pub fn cmd_simulate(
    config: &Path,
    n: u64,
    seed: u64,
    delta: Option<&str>,
    path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let (cfg, _) = Config::load(config)?;
    if n == 0 {
        return Err(HarnessError::Usage("--n must be positive".into()));
    }
    let model = cfg.model.build()?;
    let delta = match delta {
        Some(text) => Some(text.parse::<Rate>().map_err(HarnessError::Usage)?.value()),
        None => cfg.design.single_delta(),
    };
    let design = cfg.design.build(&model, delta)?;
    let pi = true_joint(&model, &design, SampleSize::Finite(n))?;
    let data = sample_dataset(&pi, n as usize, seed);
    io::write_dataset(path, &data)?;
    w(out, format_args!("wrote {} observations to {}\n", data.len(), path.display()))
}

#[derive(Debug, Clone)]
pub struct ExperimentOptions {
    pub workers: usize,
    pub full_scale: bool,
    pub replications: Option<usize>,
    pub resume: bool,
    pub force: bool,
}

pub const RECORDS_FILE: &str = "records.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SUMMARY_UNFLAGGED_FILE: &str = "summary_unflagged.csv";
pub const SUMMARY_ROOT_FILE: &str = "summary_sqrt_n.csv";
pub const K_REPORT_FILE: &str = "k_invariance.csv";
pub const TABLES_FILE: &str = "tables.txt";
pub const TABLES_ROOT_FILE: &str = "tables_sqrt_n.txt";

/// Runs the experiment into `dir` and returns the manifest.
pub fn cmd_experiment(
    config: &Path,
    dir: &Path,
    opts: &ExperimentOptions,
    out: &mut dyn Write,
) -> Result<RunManifest> {
    let (cfg, text) = Config::load(config)?;
    let replications = opts.replications.unwrap_or(if opts.full_scale {
        cfg.experiment.full_scale_replications
    } else {
        cfg.experiment.replications
    });
    if replications < 2 {
        return Err(HarnessError::Usage("need at least 2 replications".into()));
    }
    let hash = manifest::config_hash(&text, replications);
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let manifest_path = dir.join(manifest::FILE_NAME);
    let records_path = dir.join(RECORDS_FILE);

    let prior = if manifest_path.exists() {
        Some(RunManifest::load(&manifest_path)?)
    } else {
        None
    };
    let partial = match &prior {
        Some(m) => m.status == RunStatus::Running,
        None => records_path.exists(),
    };
    let resuming = partial && opts.resume;
    if partial && !opts.resume && !opts.force {
        return Err(HarnessError::Usage(format!(
            "{} holds an unfinished run; pass --resume to continue it or --force to start over",
            dir.display()
        )));
    }
    if resuming {
        match &prior {
            Some(m) if m.config_hash == hash => {}
            _ => {
                return Err(HarnessError::Usage(
                    "cannot resume: the unfinished run used a different config or replication count".into(),
                ))
            }
        }
    }

    let exp = Experiment::prepare(&cfg, replications, &hash)?;
    let mut manifest = match (&prior, resuming) {
        (Some(m), true) => m.clone(),
        _ => RunManifest::start(config, hash.clone(), replications, opts.workers),
    };
    manifest.workers = opts.workers;
    manifest.status = RunStatus::Running;
    manifest.finished_at = None;
    manifest.outputs = Vec::new();
    manifest.save(&manifest_path)?;

    let mut records: Vec<ReplicationRecord> = Vec::new();
    let mut done = vec![0usize; exp.cells().len()];
    if resuming && records_path.exists() {
        // Keep the intact, in-order prefix and rewrite the file to match it.
        let (existing, _) = io::read_records(&records_path)?;
        records = prefix_in_order(&exp, existing, &mut done);
        io::RecordWriter::create(&records_path)?.write_batch(&records)?;
    } else {
        io::RecordWriter::create(&records_path)?;
    }
    let mut writer = io::RecordWriter::append(&records_path)?;
    let pool = mc::thread_pool(opts.workers)?;
    exp.run_with(&pool, &done, |batch| {
        writer.write_batch(batch)?;
        records.extend_from_slice(batch);
        Ok(())
    })?;
    drop(writer);

    let rows = mc::summary_rows(&exp, &records, exp.scaling, false);
    let unflagged = mc::summary_rows(&exp, &records, exp.scaling, true);
    let coords: Vec<usize> = (1..=exp.cells()[0].alpha_star.len()).rev().collect();
    io::write_summary(&dir.join(SUMMARY_FILE), &rows)?;
    io::write_summary(&dir.join(SUMMARY_UNFLAGGED_FILE), &unflagged)?;
    io::write_k_report(&dir.join(K_REPORT_FILE), &mc::k_invariance_report(&rows))?;
    let tables = format!("# run {hash}, see {}\n\n{}", manifest::FILE_NAME, table::render(&rows, &coords));
    std::fs::write(dir.join(TABLES_FILE), tables).map_err(|e| HarnessError::io(dir.join(TABLES_FILE), e))?;
    let mut outputs = vec![RECORDS_FILE, SUMMARY_FILE, SUMMARY_UNFLAGGED_FILE, K_REPORT_FILE, TABLES_FILE];
    if rows.iter().any(|r| r.r != 0.5) {
        let root = mc::summary_rows(&exp, &records, Scaling::Root, false);
        io::write_summary(&dir.join(SUMMARY_ROOT_FILE), &root)?;
        let text = format!("# run {hash}, see {}\n\n{}", manifest::FILE_NAME, table::render(&root, &coords));
        std::fs::write(dir.join(TABLES_ROOT_FILE), text)
            .map_err(|e| HarnessError::io(dir.join(TABLES_ROOT_FILE), e))?;
        outputs.extend([SUMMARY_ROOT_FILE, TABLES_ROOT_FILE]);
    }
    manifest.outputs = outputs
        .iter()
        .map(|name| {
            Ok(OutputFile {
                path: name.to_string(),
                sha256: Some(manifest::file_sha256(&dir.join(name))?),
            })
        })
        .collect::<Result<_>>()?;
    manifest.status = RunStatus::Complete;
    manifest.finished_at = Some(manifest::now());
    manifest.save(&manifest_path)?;

    let failed: usize = records.iter().filter(|r| !r.failures.is_empty()).count();
    w(
        out,
        format_args!(
            "{}: {} cells x {} replications, {} with failures\n",
            exp.design,
            exp.cells().len(),
            replications,
            failed
        ),
    )?;
    for name in &outputs {
        w(out, format_args!("  {}\n", dir.join(name).display()))?;
    }
    Ok(manifest)
}

/// Keeps the leading run of records that matches the experiment's order
/// (cell by cell, index 0, 1, ...) and counts them per cell.
fn prefix_in_order(exp: &Experiment, existing: Vec<ReplicationRecord>, done: &mut [usize]) -> Vec<ReplicationRecord> {
    let mut kept = Vec::with_capacity(existing.len());
    let mut cell = 0;
    for rec in existing {
        while cell < done.len() && done[cell] == exp.replications {
            cell += 1;
        }
        if cell == done.len() {
            break;
        }
        let c = exp.cells()[cell].cell;
        if rec.n != c.n || rec.delta != c.delta || rec.replication != done[cell] as u64 {
            break;
        }
        done[cell] += 1;
        kept.push(rec);
    }
    kept
}

pub fn cmd_verify(suite: verify::Suite, faults: verify::Faults, out: &mut dyn Write) -> Result<()> {
    let checks = verify::run(suite, faults);
    for c in &checks {
        w(
            out,
            format_args!(
                "{} {:<44} residual {:.3e} (threshold {:.0e})\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.residual,
                c.threshold
            ),
        )?;
        if let Some(e) = &c.error {
            w(out, format_args!("     {e}\n"))?;
        }
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        return Err(HarnessError::ChecksFailed {
            failed,
            total: checks.len(),
        });
    }
    w(out, format_args!("all {} checks passed\n", checks.len()))
}
