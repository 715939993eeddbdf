//! Headless experiments: config parsing, session/trial sequencing, log and
//! summary files, and seeded trial batches.

use crate::adaptation::AdaptState;
use crate::arbitration::{theta_from_factors, EditDirection, FactorId, FactorSet, Theta};
use crate::course::{resolve_course, CourseError, WireCourse};
use crate::exec::Exec;
use crate::operator::{Operator, OperatorPolicy};
use crate::session::{compute_metrics, run_trial, LogError, Metrics, Mode, Outcome, SessionMachine, SimParams, TrialLog, TrialSetup};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("experiment config: {0}")]
    Parse(String),
    #[error("invalid experiment config: {}", .0.iter().map(|(f, r)| format!("{f}: {r}")).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<(String, String)>),
    #[error("reading experiment config: {0}")]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    /// Names of the offending fields.
    pub fn fields(&self) -> Vec<&str> {
        match self {
            ConfigError::Invalid(v) => v.iter().map(|(f, _)| f.as_str()).collect(),
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Course(#[from] CourseError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("session: {0}")]
    Session(#[from] crate::session::SessionError),
}

/// Operator preset name or a full inline policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PolicySpec {
    Preset(String),
    Custom(OperatorPolicy),
}

impl PolicySpec {
    pub fn resolve(&self) -> Option<OperatorPolicy> {
        match self {
            PolicySpec::Preset(name) => OperatorPolicy::preset(name),
            PolicySpec::Custom(p) => Some(*p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub r_d: [f64; 3],
    #[serde(default = "default_chi_nom")]
    pub chi_nom: f64,
}

fn default_chi_nom() -> f64 {
    0.1
}

/// Factor step applied before trial `before_trial` of `session` (both 0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedEdit {
    pub session: u32,
    pub before_trial: u32,
    pub factor: FactorId,
    pub direction: EditDirection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    pub sessions: u32,
    pub trials_per_session: u32,
    /// course id or descriptor path per session; defaults to training for
    /// every session except a final transfer session
    #[serde(default)]
    pub courses: Option<Vec<String>>,
    pub policy: PolicySpec,
    /// base seed; each trial derives its own from it
    pub seed: u64,
    #[serde(default)]
    pub factors: FactorSet,
    #[serde(default)]
    pub sim: SimParams,
    #[serde(default)]
    pub adaptation: Option<AdaptationConfig>,
    #[serde(default)]
    pub edits: Vec<ScriptedEdit>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn course_ids(&self) -> Vec<String> {
        match &self.courses {
            Some(c) => c.clone(),
            None => (0..self.sessions)
                .map(|s| if s + 1 == self.sessions && self.sessions > 1 { "transfer" } else { "training" }.to_string())
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut bad: Vec<(String, String)> = Vec::new();
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            bad.push(("schema_version".into(), format!("expected {CONFIG_SCHEMA_VERSION}")));
        }
        if self.sessions == 0 {
            bad.push(("sessions".into(), "must be >= 1".into()));
        }
        if self.trials_per_session == 0 {
            bad.push(("trials_per_session".into(), "must be >= 1".into()));
        }
        if let Some(c) = &self.courses {
            if c.len() != self.sessions as usize {
                bad.push(("courses".into(), format!("{} entries for {} sessions", c.len(), self.sessions)));
            }
        }
        match self.policy.resolve() {
            None => bad.push(("policy".into(), "unknown preset".into())),
            Some(p) => {
                if let Err(e) = p.validate() {
                    bad.push(("policy".into(), e));
                }
            }
        }
        for (f, r) in self.sim.problems(None) {
            bad.push((format!("sim.{f}"), r));
        }
        match (&self.adaptation, self.mode) {
            (None, Mode::Sc) => bad.push(("adaptation".into(), "required in sc mode".into())),
            (Some(a), _) => {
                if let Err(e) = AdaptState::new(theta_from_factors(&self.factors), a.r_d, a.chi_nom) {
                    bad.push(("adaptation".into(), e.to_string()));
                }
            }
            _ => {}
        }
        for (i, e) in self.edits.iter().enumerate() {
            if self.mode != Mode::ScUser {
                bad.push((format!("edits[{i}]"), "edits are only allowed in sc_user mode".into()));
            }
            if e.session >= self.sessions || e.before_trial >= self.trials_per_session {
                bad.push((format!("edits[{i}]"), "session or trial out of range".into()));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(bad))
        }
    }

    /// Seed for one trial; distinct per (session, trial).
    pub fn trial_seed(&self, session: u32, trial: u32) -> u64 {
        let index = session as u64 * self.trials_per_session as u64 + trial as u64;
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index)
    }
}

/// One line of `summary.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub session: u32,
    pub trial: u32,
    pub course: String,
    pub seed: u64,
    pub mode: Mode,
    pub factors: FactorSet,
    pub theta: Option<Theta>,
    pub outcome: Outcome,
    pub ticks: usize,
    pub metrics: Option<Metrics>,
    pub metrics_error: Option<String>,
    pub log: String,
}

impl SummaryRow {
    pub fn from_log(log: &TrialLog, file: &str) -> Self {
        let (metrics, metrics_error) = match compute_metrics(log) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let h = &log.header;
        SummaryRow {
            session: h.session,
            trial: h.trial,
            course: h.course.clone(),
            seed: h.seed,
            mode: h.mode,
            factors: h.factors,
            theta: h.theta,
            outcome: log.outcome,
            ticks: log.ticks.len(),
            metrics,
            metrics_error,
            log: file.to_string(),
        }
    }
}

pub fn log_file_name(session: u32, trial: u32) -> String {
    format!("session{session}_trial{trial}.jsonl")
}

pub const SUMMARY_FILE: &str = "summary.jsonl";

/// Runs every session in order, writing one JSONL log per trial and
/// `summary.jsonl` into `out_dir`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<SummaryRow>, ExperimentError> {
    config.validate()?;
    let policy = config.policy.resolve().expect("validated");
    let adapt = config
        .adaptation
        .as_ref()
        .filter(|_| config.mode == Mode::Sc)
        .map(|a| AdaptState::new(theta_from_factors(&config.factors), a.r_d, a.chi_nom))
        .transpose()
        .map_err(|e| ConfigError::Invalid(vec![("adaptation".into(), e.to_string())]))?;
    let mut courses: HashMap<String, WireCourse> = HashMap::new();
    for id in config.course_ids() {
        if let std::collections::hash_map::Entry::Vacant(slot) = courses.entry(id) {
            let c = resolve_course(slot.key())?;
            let problems = config.sim.problems(Some(&c));
            if !problems.is_empty() {
                return Err(ConfigError::Invalid(problems.into_iter().map(|(f, r)| (format!("sim.{f}"), r)).collect()).into());
            }
            slot.insert(c);
        }
    }
    fs::create_dir_all(out_dir)?;
    let mut machine = SessionMachine::new(config.mode, config.factors, config.sim, adapt);
    let mut rows = Vec::new();
    for (session, course_id) in (0..config.sessions).zip(config.course_ids()) {
        let course = &courses[&course_id];
        machine.set_session(session);
        for trial in 0..config.trials_per_session {
            for e in config.edits.iter().filter(|e| e.session == session && e.before_trial == trial) {
                machine.edit_factor(e.factor, e.direction)?;
            }
            let seed = config.trial_seed(session, trial);
            let mut setup = machine.start_trial(&course_id, seed)?;
            setup.trial = trial;
            let mut op = Operator::new(policy.with_seed(seed), course);
            let log = run_trial(&setup, course, &mut op);
            machine.finish_trial(&log)?;
            let name = log_file_name(session, trial);
            let mut w = BufWriter::new(File::create(out_dir.join(&name))?);
            log.write_jsonl(&mut w)?;
            w.flush()?;
            rows.push(SummaryRow::from_log(&log, &name));
        }
    }
    write_summary(&rows, &out_dir.join(SUMMARY_FILE))?;
    Ok(rows)
}

pub fn write_summary(rows: &[SummaryRow], path: &Path) -> Result<(), ExperimentError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Trial logs in a results directory, in session/trial order.
pub fn find_logs(dir: &Path) -> Result<Vec<PathBuf>, std::io::Error> {
    let mut found: Vec<((u32, u32), PathBuf)> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let Some(stem) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let parsed = stem
            .strip_prefix("session")
            .and_then(|r| r.strip_suffix(".jsonl"))
            .and_then(|r| r.split_once("_trial"))
            .and_then(|(s, t)| Some((s.parse().ok()?, t.parse().ok()?)));
        if let Some(key) = parsed {
            found.push((key, path));
        }
    }
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Independent trial with its own scripted operator.
#[derive(Clone, Debug)]
pub struct BatchJob {
    pub setup: TrialSetup,
    pub policy: OperatorPolicy,
}

/// Runs independent trials, in parallel when `exec` allows. Logs come back in
/// job order and do not depend on the strategy.
pub fn run_batch(jobs: &[BatchJob], exec: Exec) -> Result<Vec<TrialLog>, CourseError> {
    let mut courses: HashMap<&str, WireCourse> = HashMap::new();
    for j in jobs {
        if !courses.contains_key(j.setup.course_id.as_str()) {
            courses.insert(&j.setup.course_id, resolve_course(&j.setup.course_id)?);
        }
    }
    Ok(exec.map(jobs, |j| {
        let course = &courses[j.setup.course_id.as_str()];
        run_trial(&j.setup, course, &mut Operator::new(j.policy, course))
    }))
}

/// `n` seeded jobs sharing one setup; seeds are `base_seed..base_seed + n`.
pub fn seeded_jobs(
    mode: Mode,
    course_id: &str,
    factors: FactorSet,
    policy: OperatorPolicy,
    params: SimParams,
    base_seed: u64,
    n: usize,
) -> Vec<BatchJob> {
    (0..n as u64)
        .map(|i| {
            let seed = base_seed + i;
            let mut setup = TrialSetup::new(mode, course_id, factors, seed, params);
            setup.trial = i as u32;
            BatchJob { setup, policy: policy.with_seed(seed) }
        })
        .collect()
}
