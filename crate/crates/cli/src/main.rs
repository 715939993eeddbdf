//! `buzzwire`: run scripted experiments, recompute metrics, serve the live
//! gateway, list courses and record the expert reference.

use anyhow::{bail, Context, Result};
use buzzwire_core::adaptation::expert_reference;
use buzzwire_core::course::{resolve_course, BUILTIN_COURSES};
use buzzwire_core::experiment::{
    find_logs, log_file_name, run_batch, run_experiment, seeded_jobs, write_summary, AdaptationConfig,
    ExperimentConfig, SummaryRow, SUMMARY_FILE,
};
use buzzwire_core::operator::{Operator, OperatorPolicy, OPERATOR_PRESETS};
use buzzwire_core::session::{run_trial, SimParams, TrialLog, TrialSetup};
use buzzwire_core::{builtin_course, Exec, FactorSet, Mode};
use buzzwire_gateway::{Gateway, GatewayConfig, DEFAULT_ADDR, DEFAULT_FRAME_RATE};
use clap::{Parser, Subcommand, ValueEnum};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "buzzwire", version, about = "Shared-control buzz-wire simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Teleop,
    Sc,
    ScUser,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Teleop => Mode::Teleop,
            ModeArg::Sc => Mode::Sc,
            ModeArg::ScUser => Mode::ScUser,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Sequential,
    Parallel,
}

impl From<ExecArg> for Exec {
    fn from(e: ExecArg) -> Exec {
        match e {
            ExecArg::Sequential => Exec::Sequential,
            ExecArg::Parallel => Exec::Parallel,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run every session of an experiment config, writing one log per trial
    /// and summary.jsonl.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run independent seeded trials of one condition.
    Batch {
        #[arg(long, value_enum, default_value = "sc-user")]
        mode: ModeArg,
        #[arg(long, default_value = "training")]
        course: String,
        /// operator preset
        #[arg(long, default_value = "typical")]
        policy: String,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long, value_enum, default_value = "parallel")]
        exec: ExecArg,
        /// factors and sim parameters are taken from this experiment config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute metrics from trial logs or results directories.
    Metrics {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
        /// one JSON object per log instead of a table
        #[arg(long)]
        json: bool,
    },
    /// Start the WebSocket gateway for the operator cockpit.
    Serve {
        #[arg(long, default_value = DEFAULT_ADDR)]
        addr: SocketAddr,
        /// built-in course id or descriptor path; overrides the config
        #[arg(long)]
        course: Option<String>,
        /// overrides the config
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// experiment config supplying mode, factors, sim and adaptation
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log_dir: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FRAME_RATE)]
        frame_rate: f64,
    },
    /// List the built-in courses.
    Courses,
    /// Record an expert demonstration and print the resulting r_d.
    Expert {
        /// factors and sim parameters are taken from this experiment config
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "training")]
        course: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        chi_nom: f64,
        /// archive expert.jsonl and expert_rd.toml here
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, out } => run(&config, &out),
        Command::Batch { mode, course, policy, runs, base_seed, exec, config, out } => {
            batch(mode.into(), &course, &policy, runs, base_seed, exec.into(), config.as_deref(), &out)
        }
        Command::Metrics { paths, json } => metrics(&paths, json),
        Command::Serve { addr, course, mode, config, log_dir, frame_rate } => {
            serve(addr, course, mode.map(Into::into), config.as_deref(), log_dir, frame_rate)
        }
        Command::Courses => courses(),
        Command::Expert { config, course, seed, chi_nom, out } => {
            expert(config.as_deref(), &course, seed, chi_nom, out.as_deref())
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))
}

fn run(config: &Path, out: &Path) -> Result<()> {
    let config = load_config(config)?;
    let rows = run_experiment(&config, out)?;
    print_rows(&rows);
    println!("{} trials written to {}", rows.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn batch(
    mode: Mode,
    course: &str,
    policy: &str,
    runs: usize,
    base_seed: u64,
    exec: Exec,
    config: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let Some(policy) = OperatorPolicy::preset(policy) else {
        bail!("unknown policy `{policy}`; presets are {}", OPERATOR_PRESETS.join(", "));
    };
    let (factors, params) = match config {
        Some(p) => {
            let c = load_config(p)?;
            (c.factors, c.sim)
        }
        None => (FactorSet::default(), SimParams::default()),
    };
    let course_ref = resolve_course(course)?;
    if let Some((field, reason)) = params.problems(Some(&course_ref)).first() {
        bail!("sim.{field}: {reason}");
    }
    let jobs = seeded_jobs(mode, course, factors, policy, params, base_seed, runs);
    let logs = run_batch(&jobs, exec)?;
    std::fs::create_dir_all(out)?;
    let mut rows = Vec::with_capacity(logs.len());
    for log in &logs {
        let name = log_file_name(0, log.header.trial);
        write_log(&out.join(&name), log)?;
        rows.push(SummaryRow::from_log(log, &name));
    }
    write_summary(&rows, &out.join(SUMMARY_FILE))?;
    print_rows(&rows);
    Ok(())
}

fn write_log(path: &Path, log: &TrialLog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    log.write_jsonl(&mut w)?;
    w.flush()?;
    Ok(())
}

fn metrics(paths: &[PathBuf], json: bool) -> Result<()> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let found = find_logs(p).with_context(|| format!("reading {}", p.display()))?;
            if found.is_empty() {
                bail!("no trial logs in {}", p.display());
            }
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    let mut rows = Vec::with_capacity(files.len());
    for f in &files {
        let log = TrialLog::read_jsonl(BufReader::new(
            File::open(f).with_context(|| format!("opening {}", f.display()))?,
        ))
        .with_context(|| format!("reading {}", f.display()))?;
        rows.push(SummaryRow::from_log(&log, &f.display().to_string()));
    }
    if json {
        for r in &rows {
            println!("{}", serde_json::to_string(r)?);
        }
    } else {
        print_rows(&rows);
    }
    Ok(())
}

fn print_rows(rows: &[SummaryRow]) {
    println!(
        "{:>7} {:>5} {:<10} {:<8} {:<8} {:>6} {:>9} {:>10} {:>12}",
        "session", "trial", "course", "mode", "outcome", "ticks", "time_s", "collisions", "msj"
    );
    for r in rows {
        let (time, collisions, msj) = match &r.metrics {
            Some(m) => (
                m.time_to_success.map_or("-".into(), |t| format!("{t:.2}")),
                m.collisions.to_string(),
                format!("{:.4e}", m.mean_squared_jerk),
            ),
            None => ("-".into(), "-".into(), "-".into()),
        };
        println!(
            "{:>7} {:>5} {:<10} {:<8} {:<8} {:>6} {:>9} {:>10} {:>12}",
            r.session,
            r.trial,
            r.course,
            wire_name(&r.mode),
            wire_name(&r.outcome),
            r.ticks,
            time,
            collisions,
            msj
        );
    }
}

/// The serialized (snake_case) name of a unit enum variant.
fn wire_name<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

fn serve(
    addr: SocketAddr,
    course: Option<String>,
    mode: Option<Mode>,
    config: Option<&Path>,
    log_dir: Option<PathBuf>,
    frame_rate: f64,
) -> Result<()> {
    let mut gw = GatewayConfig { addr, log_dir, frame_rate, ..GatewayConfig::default() };
    if let Some(p) = config {
        let c = load_config(p)?;
        gw.mode = c.mode;
        gw.factors = c.factors;
        gw.sim = c.sim;
        gw.adaptation = c.adaptation.clone();
        if let Some(first) = c.course_ids().into_iter().next() {
            gw.course = first;
        }
    }
    if let Some(m) = mode {
        gw.mode = m;
    }
    if let Some(c) = course {
        gw.course = c;
    }
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let gateway = Gateway::bind(gw).await?;
        println!("listening on ws://{}/ws", gateway.local_addr());
        gateway
            .run_until(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn courses() -> Result<()> {
    println!("{:<10} {:>9} {:>10} {:>8}", "id", "length_m", "played_m", "wire_mm");
    for id in BUILTIN_COURSES {
        let c = builtin_course(id).expect("built-in course");
        println!(
            "{:<10} {:>9.3} {:>10.3} {:>8.1}",
            id,
            c.total_length(),
            c.end_s() - c.start_s(),
            c.wire_radius() * 2000.0
        );
    }
    Ok(())
}

/// Default factors of the expert demonstration.
fn expert_factors() -> FactorSet {
    FactorSet::new(0.5, 0.9, 0.5, 1.0, 0.5).expect("on the UI grid")
}

fn expert(config: Option<&Path>, course_id: &str, seed: u64, chi_nom: f64, out: Option<&Path>) -> Result<()> {
    let (factors, params) = match config {
        Some(p) => {
            let c = load_config(p)?;
            (c.factors, c.sim)
        }
        None => (expert_factors(), SimParams::default()),
    };
    let course = resolve_course(course_id)?;
    let setup = TrialSetup::new(Mode::ScUser, course_id, factors, seed, params);
    let policy = OperatorPolicy::preset("expert").expect("expert preset").with_seed(seed);
    let log = run_trial(&setup, &course, &mut Operator::new(policy, &course));
    let reference = expert_reference(&log)?;
    for w in &reference.warnings {
        eprintln!("warning: {w}");
    }
    let snippet = adaptation_toml(&AdaptationConfig { r_d: reference.r_d, chi_nom });
    print!("{snippet}");
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write_log(&dir.join("expert.jsonl"), &log)?;
        std::fs::write(dir.join("expert_rd.toml"), &snippet)?;
    }
    Ok(())
}

fn adaptation_toml(a: &AdaptationConfig) -> String {
    format!(
        "[adaptation]\nr_d = [{:?}, {:?}, {:?}]\nchi_nom = {:?}\n",
        a.r_d[0], a.r_d[1], a.r_d[2], a.chi_nom
    )
}
