//! `ddkl`: data generation, training, evaluation, MPC rollouts and reports.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 non-convergence,
//! 4 numerical failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use ddkl::config::ExperimentConfig;
use ddkl::io::{
    read_checkpoint, read_metrics_csv, read_trajectory_csv, write_baseline_history_csv, write_checkpoint,
    write_metrics_csv, write_round_history_csv, write_theta_history_csv, write_trace_csv, write_trajectory_csv,
    Checkpoint, Provenance, SavedModel,
};
use ddkl::mpc::{run_closed_loop, ClosedLoopTrace, MpcController, GOAL_TASK_START, GOAL_TASK_TARGET, GOAL_TOLERANCE};
use ddkl::train::{
    evaluate_metrics, mean_std, one_step_error, run_ddkl_pt, train_dko_centralized, train_mlp_baseline, MethodMetrics,
    TruthPredictor, VelocityPredictor, ZeroPredictor,
};
use ddkl::Error;

#[derive(Parser)]
#[command(name = "ddkl", version, about = "Distributed deep Koopman learning experiments")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the vessel under random excitation and write the trajectory.
    Generate {
        #[arg(long)]
        seed: Option<u64>,
        /// Output path; defaults to `paths.data`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a checkpoint of the simulator itself.
        #[arg(long)]
        truth_model: Option<PathBuf>,
    },
    /// Train one method; run `j` uses init seed `consensus.init_seed + j`.
    Train {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long)]
        runs: Option<usize>,
        /// Base init seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Outer rounds of the distributed run.
        #[arg(long)]
        rounds: Option<usize>,
        /// Iteration budget of the baselines.
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `paths.out_dir/<method>`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// One-step prediction error on the test slice.
    Eval {
        /// `NAME=PATH`: a checkpoint, a run directory or a method directory
        /// holding `run_*` directories. `NAME=zero` scores the zero predictor.
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        runs: Option<usize>,
        /// Three runs.
        #[arg(long, conflicts_with = "runs")]
        quick: bool,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `paths.out_dir/metrics.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-loop MPC on the simulated vessel.
    Mpc {
        #[arg(long, value_enum)]
        task: Task,
        /// Loads `agent_<k>.model` from `--model-dir`.
        #[arg(long, default_value_t = 1)]
        agent: usize,
        /// Defaults to `paths.out_dir/ddkl-pt/run_0`.
        #[arg(long)]
        model_dir: Option<PathBuf>,
        /// Explicit checkpoint; overrides `--agent` and `--model-dir`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        /// Solver seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Defaults to `paths.out_dir/mpc_<task>_agent_<k>.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metrics files into one summary table.
    Report {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default config.
    DefaultConfig,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    DdklPt,
    Dko,
    Mlp,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::DdklPt => "ddkl-pt",
            Method::Dko => "dko",
            Method::Mlp => "mlp",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Task {
    Goal,
    Station,
}

enum Failure {
    Input(String),
    NotConverged(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::NotConverged(m)) => {
            eprintln!("not converged: {m}");
            ExitCode::from(3)
        }
        Err(Failure::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(4)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| match e {
            Error::Io(io) => Failure::Input(format!("{}: {io}", p.display())),
            e => e.into(),
        })?,
        None => ExperimentConfig::default(),
    };
    match cli.command {
        Command::Generate { seed, out, truth_model } => generate(cfg, seed, out, truth_model),
        Command::Train {
            method,
            runs,
            seed,
            rounds,
            max_steps,
            data,
            out_dir,
        } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.consensus.init_seed = s;
            }
            if let Some(r) = rounds {
                cfg.theta.rounds = r;
            }
            if let Some(m) = max_steps {
                cfg.theta.baseline_steps = m;
                cfg.theta.max_steps = m;
            }
            cfg.validate()?;
            let runs = runs.unwrap_or(cfg.theta.runs);
            let out_dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.join(method.name()));
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            train(&cfg, method, runs, &data, &out_dir)
        }
        Command::Eval {
            models,
            runs,
            quick,
            data,
            out,
        } => {
            let runs = if quick { 3 } else { runs.unwrap_or(cfg.theta.runs) };
            let data = data.unwrap_or_else(|| cfg.paths.data.clone());
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("metrics.csv"));
            eval(&cfg, &models, runs, &data, &out)
        }
        Command::Mpc {
            task,
            agent,
            model_dir,
            model,
            steps,
            seed,
            out,
        } => {
            let mut cfg = cfg;
            if let Some(s) = seed {
                cfg.mpc.seed = s;
            }
            let path = model.unwrap_or_else(|| {
                model_dir
                    .unwrap_or_else(|| cfg.paths.out_dir.join("ddkl-pt").join("run_0"))
                    .join(format!("agent_{agent}.model"))
            });
            let task_name = match task {
                Task::Goal => "goal",
                Task::Station => "station",
            };
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join(format!("mpc_{task_name}_agent_{agent}.csv")));
            mpc(&cfg, task, &path, steps, &out)
        }
        Command::Report { metrics, out } => report(&cfg, &metrics, out.as_deref()),
        Command::DefaultConfig => {
            print!("{}", ExperimentConfig::default_toml());
            Ok(())
        }
    }
}

fn generate(mut cfg: ExperimentConfig, seed: Option<u64>, out: Option<PathBuf>, truth_model: Option<PathBuf>) -> CmdResult {
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.paths.data.clone());
    let traj = cfg.generate(cfg.data.seed)?;
    let prov = Provenance::new(cfg.hash(), cfg.data.seed);
    write_trajectory_csv(&out, &traj, &prov)?;
    let mut max_speed = [0.0f64; 3];
    for s in &traj.states {
        for k in 0..3 {
            max_speed[k] = max_speed[k].max(s.v[k].abs());
        }
    }
    let last = traj.states.last().expect("non-empty trajectory");
    println!(
        "wrote {} ({} states, dt {}); max |v| = [{:.3}, {:.3}, {:.3}]; final pose [{:.3}, {:.3}, {:.3}]",
        out.display(),
        traj.states.len(),
        traj.dt,
        max_speed[0],
        max_speed[1],
        max_speed[2],
        last.p[0],
        last.p[1],
        last.p[2]
    );
    if let Some(p) = truth_model {
        let ck = Checkpoint {
            provenance: prov,
            agent: None,
            model: SavedModel::Truth(TruthPredictor {
                params: cfg.vessel.clone(),
                dt: cfg.data.dt,
            }),
        };
        write_checkpoint(&p, &ck)?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn load_trajectory(path: &Path) -> Result<ddkl::vessel::Trajectory, Failure> {
    if !path.exists() {
        return Err(Failure::Input(format!("{}: trajectory file not found (run `ddkl generate`)", path.display())));
    }
    Ok(read_trajectory_csv(path)?)
}

fn train(cfg: &ExperimentConfig, method: Method, runs: usize, data: &Path, out_dir: &Path) -> CmdResult {
    let traj = load_trajectory(data)?;
    let norm = cfg.normalization(&traj);
    let hash = cfg.hash();
    let mut unconverged = Vec::new();
    for j in 0..runs {
        let tc = cfg.train_config(j as u64, norm);
        let prov = Provenance::new(hash.clone(), tc.init_seed);
        let dir = out_dir.join(format!("run_{j}"));
        let converged = match method {
            Method::DdklPt => {
                let graph = cfg.graph()?;
                let segments = cfg.segments(&traj)?;
                let outcome = run_ddkl_pt(&tc, &segments, &graph)?;
                for (k, model) in outcome.models.into_iter().enumerate() {
                    let ck = Checkpoint {
                        provenance: prov.clone(),
                        agent: Some(k + 1),
                        model: SavedModel::Koopman(model),
                    };
                    write_checkpoint(&dir.join(format!("agent_{}.model", k + 1)), &ck)?;
                }
                let n = graph.n_agents();
                write_round_history_csv(&dir.join("history.csv"), &outcome.history, n, &prov)?;
                write_theta_history_csv(&dir.join("theta_history.csv"), &outcome.history, n, &prov)?;
                let last = outcome.history.theta.last().map_or(f64::NAN, |r| r.mean_local_loss);
                eprintln!(
                    "run {j}: {} rounds, final mean loss {last:.3e}, {:.1} s",
                    outcome.history.rounds_completed, outcome.elapsed_s
                );
                outcome.history.converged
            }
            Method::Dko => {
                let (model, hist) = train_dko_centralized(&traj, &tc)?;
                let ck = Checkpoint {
                    provenance: prov.clone(),
                    agent: None,
                    model: SavedModel::Koopman(model),
                };
                write_checkpoint(&dir.join("model.model"), &ck)?;
                write_baseline_history_csv(&dir.join("history.csv"), &hist, &prov)?;
                eprintln!("run {j}: {} steps, final loss {:.3e}", hist.losses.len(), hist.losses.last().unwrap_or(&f64::NAN));
                hist.converged
            }
            Method::Mlp => {
                let (model, hist) = train_mlp_baseline(&traj, &tc)?;
                let ck = Checkpoint {
                    provenance: prov.clone(),
                    agent: None,
                    model: SavedModel::Mlp(model),
                };
                write_checkpoint(&dir.join("model.model"), &ck)?;
                write_baseline_history_csv(&dir.join("history.csv"), &hist, &prov)?;
                eprintln!("run {j}: {} steps, final loss {:.3e}", hist.losses.len(), hist.losses.last().unwrap_or(&f64::NAN));
                hist.converged
            }
        };
        if !converged {
            unconverged.push(j);
        }
    }
    println!("wrote {runs} run(s) of {} under {}", method.name(), out_dir.display());
    if unconverged.is_empty() {
        Ok(())
    } else {
        Err(Failure::NotConverged(format!(
            "loss threshold {:e} not reached in run(s) {unconverged:?}; artifacts written",
            cfg.theta.threshold
        )))
    }
}

fn model_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "model"))
        .collect();
    files.sort();
    Ok(files)
}

/// Checkpoint paths per run for one `NAME=PATH` argument.
fn resolve_runs(path: &Path, runs: usize) -> Result<Vec<Vec<PathBuf>>, Failure> {
    if !path.exists() {
        return Err(Failure::Input(format!("{}: model not found", path.display())));
    }
    if path.is_file() {
        return Ok(vec![vec![path.to_path_buf()]; runs]);
    }
    let direct = model_files(path)?;
    if !direct.is_empty() {
        return Ok(vec![direct; runs]);
    }
    let mut out = Vec::with_capacity(runs);
    for j in 0..runs {
        let dir = path.join(format!("run_{j}"));
        let files = if dir.is_dir() { model_files(&dir)? } else { Vec::new() };
        if files.is_empty() {
            return Err(Failure::Input(format!("{}: no checkpoints for run {j}", dir.display())));
        }
        out.push(files);
    }
    Ok(out)
}

fn eval(cfg: &ExperimentConfig, model_args: &[String], runs: usize, data: &Path, out: &Path) -> CmdResult {
    if runs == 0 {
        return Err(Failure::Input("--runs must be >= 1".into()));
    }
    let traj = load_trajectory(data)?;
    let test = cfg.test_range();
    let mut methods: Vec<MethodMetrics> = Vec::new();
    for arg in model_args {
        let (name, path) = arg
            .split_once('=')
            .ok_or_else(|| Failure::Input(format!("--model {arg}: expected NAME=PATH")))?;
        if path == "zero" {
            let err = one_step_error(&ZeroPredictor, &traj, test.clone())?;
            let (mean, std) = mean_std(&vec![err; runs]);
            methods.push(MethodMetrics {
                method: name.to_string(),
                per_run: vec![err; runs],
                mean,
                std,
            });
            continue;
        }
        let mut loaded: Vec<Vec<SavedModel>> = Vec::new();
        for files in resolve_runs(Path::new(path), runs)? {
            let mut models = Vec::new();
            for f in files {
                models.push(read_checkpoint(&f)?.model);
            }
            loaded.push(models);
        }
        let refs: Vec<Vec<&dyn VelocityPredictor>> =
            loaded.iter().map(|run| run.iter().map(|m| m.predictor()).collect()).collect();
        methods.push(evaluate_metrics(name, &refs, &traj, test.clone())?);
    }
    let prov = Provenance::new(cfg.hash(), cfg.consensus.init_seed);
    write_metrics_csv(out, &methods, &prov)?;
    for m in &methods {
        println!("{:<12} mean {:.4e}  std {:.4e}  ({} runs)", m.method, m.mean, m.std, m.per_run.len());
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn closed_loop<P: VelocityPredictor>(
    cfg: &ExperimentConfig,
    mut ctl: MpcController<P>,
    x0: [f64; 6],
    goal: [f64; 6],
    steps: usize,
) -> ddkl::Result<ClosedLoopTrace> {
    run_closed_loop(&cfg.vessel, &mut ctl, x0, goal, steps)
}

fn mpc(cfg: &ExperimentConfig, task: Task, path: &Path, steps: usize, out: &Path) -> CmdResult {
    cfg.validate()?;
    if !path.exists() {
        return Err(Failure::Input(format!("{}: model not found", path.display())));
    }
    let ck = read_checkpoint(path)?;
    let (x0, goal) = match task {
        Task::Goal => (GOAL_TASK_START, GOAL_TASK_TARGET),
        Task::Station => (GOAL_TASK_START, GOAL_TASK_START),
    };
    let mc = cfg.mpc.clone();
    let trace = match ck.model {
        SavedModel::Koopman(m) => closed_loop(cfg, MpcController::for_koopman(&m, mc)?, x0, goal, steps)?,
        SavedModel::Mlp(m) => closed_loop(cfg, MpcController::new(m, mc)?, x0, goal, steps)?,
        SavedModel::Truth(m) => closed_loop(cfg, MpcController::new(m, mc)?, x0, goal, steps)?,
    };
    write_trace_csv(out, &trace, &Provenance::new(cfg.hash(), cfg.mpc.seed))?;
    let last = trace.states.len() - 1;
    match task {
        Task::Goal => {
            let (pos_tol, yaw_tol) = GOAL_TOLERANCE;
            match trace.first_reach(pos_tol, yaw_tol) {
                Some(t) => println!("goal reached at step {t}"),
                None => println!("goal not reached within {steps} steps"),
            }
        }
        Task::Station => println!("max position error {:.4} m", trace.max_pos_error()),
    }
    println!(
        "final position error {:.4} m, yaw error {:.4} rad; wrote {}",
        trace.err_pos[last],
        trace.err_yaw[last],
        out.display()
    );
    Ok(())
}

fn report(cfg: &ExperimentConfig, files: &[PathBuf], out: Option<&Path>) -> CmdResult {
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for f in files {
        if !f.exists() {
            return Err(Failure::Input(format!("{}: metrics file not found", f.display())));
        }
        for (method, vals) in read_metrics_csv(f)? {
            match rows.iter_mut().find(|(m, _)| *m == method) {
                Some((_, v)) => v.extend(vals),
                None => rows.push((method, vals)),
            }
        }
    }
    let mut table = format!("# config_hash={} seed={}\nmethod,runs,mean,std\n", cfg.hash(), cfg.consensus.init_seed);
    println!("{:<12} {:>5} {:>12} {:>12}", "method", "runs", "mean", "std");
    for (method, vals) in &rows {
        let (mean, std) = mean_std(vals);
        let _ = writeln!(table, "{method},{},{},{}", vals.len(), ddkl::io::fmt_f64(mean), ddkl::io::fmt_f64(std));
        println!("{method:<12} {:>5} {mean:>12.4e} {std:>12.4e}", vals.len());
    }
    if let Some(out) = out {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
        }
        std::fs::write(out, table).map_err(|e| Failure::Input(format!("{}: {e}", out.display())))?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
