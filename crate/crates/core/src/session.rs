//! Trials, their logs and metrics, and the between-trials state machine.
//!
//! A trial ticks at a fixed rate: sample the environment around the robot's
//! loop, synthesize the assistive wrench, run the shared-control step, then
//! check contact and progress. Arbitration is frozen for the whole trial;
//! factor edits and adaptation only happen between trials.

use crate::adaptation::{trial_error, update_theta, AdaptError, AdaptState};
use crate::admittance::{control_tick, AdmittanceParams, IntegratorState, DEFAULT_DT};
use crate::apf::{net_wrench, FieldParams};
use crate::arbitration::{
    alpha_from_theta, apply_factor_edit, apply_gain_factors, theta_from_factors, ArbitrationMatrix, EditDirection,
    FactorId, FactorSet, Theta,
};
use crate::course::{buzz_events, check_contact, progress, sample_environment, ContactParams, ContactReport, HandleGeometry, WireCourse};
use crate::geometry::{Pose, Twist, Vec3, Vec6, Wrench};
use crate::operator::{InputError, InputSource};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

pub const LOG_SCHEMA_VERSION: u32 = 1;

/// Minimum ticks for the third-difference jerk stencil.
pub const MIN_METRIC_TICKS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// direct teleoperation, `A = I`
    #[serde(alias = "TELEOP")]
    Teleop,
    /// heuristic assist-as-needed adaptation between trials
    #[serde(alias = "SC")]
    Sc,
    /// user-edited factors between trials
    #[serde(alias = "SC_USER")]
    ScUser,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Fatal,
    Timeout,
    Aborted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    /// arc-length step of the synthetic point cloud (m)
    pub spacing: f64,
    /// neighbourhood range around each control point (m)
    pub range: f64,
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { spacing: 0.0025, range: 0.03 }
    }
}

/// Everything besides factors that determines a trial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimParams {
    pub dt: f64,
    pub time_limit: f64,
    pub handle: HandleGeometry,
    pub contact: ContactParams,
    pub sampling: SamplingParams,
    pub field: FieldParams,
    pub controller: AdmittanceParams,
}

impl Default for SimParams {
    fn default() -> Self {
        SimParams {
            dt: DEFAULT_DT,
            time_limit: 120.0,
            handle: HandleGeometry::default(),
            contact: ContactParams::default(),
            sampling: SamplingParams::default(),
            field: FieldParams::trial(),
            controller: AdmittanceParams::assistive(),
        }
    }
}

impl SimParams {
    /// Problems as `(field, reason)` pairs.
    pub fn problems(&self, course: Option<&WireCourse>) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if !(self.dt > 0.0) {
            out.push(("dt".into(), "must be > 0".into()));
        }
        if !(self.time_limit > 0.0) {
            out.push(("time_limit".into(), "must be > 0".into()));
        }
        if let Err(e) = self.controller.validate() {
            out.push(("controller".into(), e));
        }
        if let Err(e) = self.field.validate() {
            out.push(("field".into(), e.to_string()));
        }
        if !(self.sampling.spacing > 0.0 && self.sampling.range > 0.0) {
            out.push(("sampling".into(), "spacing and range must be > 0".into()));
        }
        if !(self.contact.k_wire > 0.0 && self.contact.fatal_force > 0.0 && self.contact.debounce >= 0.0) {
            out.push(("contact".into(), "k_wire, fatal_force must be > 0, debounce >= 0".into()));
        }
        if let Some(c) = course {
            if let Err(e) = self.handle.validate_for(c) {
                out.push(("handle".into(), e));
            }
        }
        out
    }

    pub fn max_ticks(&self) -> usize {
        (self.time_limit / self.dt).round().max(1.0) as usize
    }
}

/// Frozen trial configuration, written as the first log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialHeader {
    pub schema_version: u32,
    pub mode: Mode,
    pub session: u32,
    pub trial: u32,
    pub course: String,
    pub seed: u64,
    pub dt: f64,
    pub factors: FactorSet,
    /// effective θ; absent in teleoperation
    pub theta: Option<Theta>,
    pub alpha: Vec6,
    pub params: SimParams,
}

/// Inputs needed to start one trial.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSetup {
    pub mode: Mode,
    pub session: u32,
    pub trial: u32,
    pub course_id: String,
    pub seed: u64,
    pub factors: FactorSet,
    /// adaptive θ replacing the factor-derived one (SC mode)
    pub theta: Option<Theta>,
    pub params: SimParams,
}

impl TrialSetup {
    pub fn new(mode: Mode, course_id: impl Into<String>, factors: FactorSet, seed: u64, params: SimParams) -> Self {
        TrialSetup { mode, session: 0, trial: 0, course_id: course_id.into(), seed, factors, theta: None, params }
    }

    /// Effective θ and blending matrix for this setup.
    pub fn arbitration(&self) -> (Option<Theta>, ArbitrationMatrix) {
        match self.mode {
            Mode::Teleop => (None, ArbitrationMatrix::identity()),
            Mode::Sc | Mode::ScUser => {
                let theta = self.theta.unwrap_or_else(|| theta_from_factors(&self.factors));
                (Some(theta), alpha_from_theta(&theta))
            }
        }
    }

    /// Field and controller parameters after safety/responsiveness scaling.
    /// Teleoperation runs the base gains.
    pub fn scaled_params(&self) -> (FieldParams, AdmittanceParams) {
        let base = &self.params;
        match self.mode {
            Mode::Teleop => (base.field, base.controller),
            Mode::Sc | Mode::ScUser => {
                let (field, k) = apply_gain_factors(&self.factors, &base.field, &base.controller.stiffness);
                (field, AdmittanceParams { stiffness: k, ..base.controller })
            }
        }
    }

    pub fn header(&self) -> TrialHeader {
        let (theta, a) = self.arbitration();
        TrialHeader {
            schema_version: LOG_SCHEMA_VERSION,
            mode: self.mode,
            session: self.session,
            trial: self.trial,
            course: self.course_id.clone(),
            seed: self.seed,
            dt: self.params.dt,
            factors: self.factors,
            theta,
            alpha: a.alpha,
            params: self.params,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    /// time the input was sampled (s)
    pub t: f64,
    pub handle_input: Pose,
    /// robot pose after the tick
    pub robot: Pose,
    pub u_h: Twist,
    pub u_r: Twist,
    pub u_sc: Twist,
    pub w_a: Wrench,
    pub contact: ContactReport,
    pub progress: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialLog {
    pub header: TrialHeader,
    pub ticks: Vec<TickRecord>,
    pub outcome: Outcome,
}

/// One JSONL line of a trial log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header(TrialHeader),
    Tick(TickRecord),
    Footer { outcome: Outcome, ticks: usize },
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log io: {0}")]
    Io(#[from] std::io::Error),
    #[error("log line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("log structure: {0}")]
    Structure(String),
}

impl TrialLog {
    pub fn duration(&self) -> f64 {
        self.ticks.len() as f64 * self.header.dt
    }

    /// Componentwise mean of the assistive wrench over all ticks.
    pub fn mean_wrench(&self) -> Option<Wrench> {
        if self.ticks.is_empty() {
            return None;
        }
        let sum = self.ticks.iter().fold(Vec6::zeros(), |acc, r| acc + r.w_a.to_vec6());
        Some(Wrench::from_vec6(&(sum / self.ticks.len() as f64)))
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LogError> {
        let mut line = |rec: &LogRecord| -> Result<(), LogError> {
            serde_json::to_writer(&mut w, rec).map_err(|e| LogError::Json { line: 0, source: e })?;
            w.write_all(b"\n")?;
            Ok(())
        };
        line(&LogRecord::Header(self.header.clone()))?;
        for t in &self.ticks {
            line(&LogRecord::Tick(*t))?;
        }
        line(&LogRecord::Footer { outcome: self.outcome, ticks: self.ticks.len() })?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("in-memory write");
        buf
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<TrialLog, LogError> {
        let mut header = None;
        let mut ticks = Vec::new();
        let mut footer = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LogRecord = serde_json::from_str(&line).map_err(|e| LogError::Json { line: i + 1, source: e })?;
            match rec {
                LogRecord::Header(h) if header.is_none() && i == 0 => header = Some(h),
                LogRecord::Header(_) => return Err(LogError::Structure(format!("unexpected header at line {}", i + 1))),
                LogRecord::Tick(t) => ticks.push(t),
                LogRecord::Footer { outcome, ticks: n } => footer = Some((outcome, n)),
            }
        }
        let header = header.ok_or_else(|| LogError::Structure("missing header".into()))?;
        if header.schema_version != LOG_SCHEMA_VERSION {
            return Err(LogError::Structure(format!("unsupported schema version {}", header.schema_version)));
        }
        let (outcome, n) = footer.ok_or_else(|| LogError::Structure("missing footer (truncated log?)".into()))?;
        if n != ticks.len() {
            return Err(LogError::Structure(format!("footer counts {n} ticks, found {}", ticks.len())));
        }
        Ok(TrialLog { header, ticks, outcome })
    }
}

/// A trial in progress; advanced one tick at a time by a scripted or live
/// input source.
#[derive(Clone, Debug)]
pub struct Trial<'c> {
    course: &'c WireCourse,
    header: TrialHeader,
    field: FieldParams,
    controller: AdmittanceParams,
    arbitration: ArbitrationMatrix,
    state: IntegratorState,
    robot: Pose,
    ticks: Vec<TickRecord>,
    outcome: Option<Outcome>,
    max_ticks: usize,
}

impl<'c> Trial<'c> {
    pub fn new(setup: &TrialSetup, course: &'c WireCourse) -> Self {
        let (field, controller) = setup.scaled_params();
        let (_, arbitration) = setup.arbitration();
        Trial {
            course,
            header: setup.header(),
            field,
            controller,
            arbitration,
            state: IntegratorState::default(),
            robot: course.pose_at(course.start_s()),
            ticks: Vec::new(),
            outcome: None,
            max_ticks: setup.params.max_ticks(),
        }
    }

    pub fn header(&self) -> &TrialHeader {
        &self.header
    }

    pub fn robot(&self) -> &Pose {
        &self.robot
    }

    pub fn course(&self) -> &WireCourse {
        self.course
    }

    /// Time of the next tick.
    pub fn time(&self) -> f64 {
        self.ticks.len() as f64 * self.header.dt
    }

    pub fn outcome(&self) -> Option<Outcome> {
        self.outcome
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.ticks
    }

    pub fn last_tick(&self) -> Option<&TickRecord> {
        self.ticks.last()
    }

    /// Assistive wrench on the robot's loop at its current pose.
    pub fn assistive_wrench(&self) -> Wrench {
        let p = &self.header.params;
        let handle = p.handle.at(self.robot);
        let nbhd = sample_environment(self.course, &handle, p.sampling.spacing, p.sampling.range);
        net_wrench(&handle.control_points(), &nbhd, &handle.com(), &self.field)
    }

    /// Advances one tick with the given handle input. Returns the outcome if
    /// the trial ended on this tick. Calls after the end are ignored.
    pub fn step(&mut self, handle_input: Pose) -> Option<Outcome> {
        if self.outcome.is_some() {
            return self.outcome;
        }
        let p = self.header.params;
        let t = self.time();
        let w_a = self.assistive_wrench();
        let out = control_tick(&handle_input, &self.robot, &w_a, &self.arbitration, &self.controller, &mut self.state, p.dt);
        self.robot = out.robot;
        let handle = p.handle.at(self.robot);
        let contact = check_contact(self.course, &handle, p.contact.k_wire, p.contact.fatal_force);
        let prog = progress(self.course, &handle);
        self.ticks.push(TickRecord {
            t,
            handle_input,
            robot: self.robot,
            u_h: out.u_h,
            u_r: out.u_r,
            u_sc: out.u_sc,
            w_a,
            contact,
            progress: prog,
        });
        self.outcome = if contact.fatal {
            Some(Outcome::Fatal)
        } else if prog >= 1.0 {
            Some(Outcome::Success)
        } else if self.ticks.len() >= self.max_ticks {
            Some(Outcome::Timeout)
        } else {
            None
        };
        self.outcome
    }

    pub fn abort(&mut self) {
        if self.outcome.is_none() {
            self.outcome = Some(Outcome::Aborted);
        }
    }

    pub fn into_log(self) -> TrialLog {
        TrialLog { header: self.header, ticks: self.ticks, outcome: self.outcome.unwrap_or(Outcome::Aborted) }
    }
}

/// Runs a trial to completion against an input source.
pub fn run_trial(setup: &TrialSetup, course: &WireCourse, source: &mut dyn InputSource) -> TrialLog {
    let mut trial = Trial::new(setup, course);
    loop {
        let t = trial.time();
        match source.next_input(trial.robot(), course, t) {
            Ok(input) => {
                if trial.step(input).is_some() {
                    break;
                }
            }
            Err(InputError::Disconnected) => {
                trial.abort();
                break;
            }
        }
    }
    trial.into_log()
}

/// Feeds a log's handle inputs back through a fresh trial.
pub fn replay(log: &TrialLog, course: &WireCourse) -> TrialLog {
    let h = &log.header;
    let setup = TrialSetup {
        mode: h.mode,
        session: h.session,
        trial: h.trial,
        course_id: h.course.clone(),
        seed: h.seed,
        factors: h.factors,
        theta: h.theta,
        params: h.params,
    };
    let mut trial = Trial::new(&setup, course);
    for rec in &log.ticks {
        if trial.step(rec.handle_input).is_some() {
            break;
        }
    }
    if log.outcome == Outcome::Aborted {
        trial.abort();
    }
    trial.into_log()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub time_to_success: Option<f64>,
    pub collisions: usize,
    /// m²/s⁶
    pub mean_squared_jerk: f64,
    pub outcome: Outcome,
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("log has {0} ticks; at least {MIN_METRIC_TICKS} are needed")]
    TooFewTicks(usize),
}

/// Mean over interior samples of the squared norm of the central third
/// difference of `positions` sampled every `dt`.
pub fn mean_squared_jerk(positions: &[Vec3], dt: f64) -> Result<f64, MetricsError> {
    let n = positions.len();
    if n < MIN_METRIC_TICKS {
        return Err(MetricsError::TooFewTicks(n));
    }
    let scale = 1.0 / (2.0 * dt * dt * dt);
    let sum: f64 = (2..n - 2)
        .map(|i| {
            let x = positions;
            ((x[i + 2] - x[i + 1] * 2.0 + x[i - 1] * 2.0 - x[i - 2]) * scale).norm_squared()
        })
        .sum();
    Ok(sum / (n - 4) as f64)
}

pub fn compute_metrics(log: &TrialLog) -> Result<Metrics, MetricsError> {
    let positions: Vec<Vec3> = log.ticks.iter().map(|r| r.handle_input.position).collect();
    let jerk = mean_squared_jerk(&positions, log.header.dt)?;
    let collisions = buzz_events(log.ticks.iter().map(|r| (r.t, r.contact.in_contact)), log.header.params.contact.debounce);
    Ok(Metrics {
        time_to_success: (log.outcome == Outcome::Success).then(|| log.duration()),
        collisions,
        mean_squared_jerk: jerk,
        outcome: log.outcome,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    BetweenTrials,
    Running,
}

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("trial_running")]
    TrialRunning,
    #[error("no trial running")]
    NotRunning,
    #[error("factor edits are not available in {0:?} mode")]
    EditsDisabled(Mode),
    #[error(transparent)]
    Adapt(#[from] AdaptError),
}

/// Single writer of factors, adaptation state and trial numbering.
#[derive(Clone, Debug)]
pub struct SessionMachine {
    mode: Mode,
    factors: FactorSet,
    adapt: Option<AdaptState>,
    phase: Phase,
    session: u32,
    trial: u32,
    params: SimParams,
}

impl SessionMachine {
    pub fn new(mode: Mode, factors: FactorSet, params: SimParams, adapt: Option<AdaptState>) -> Self {
        SessionMachine { mode, factors, adapt, phase: Phase::BetweenTrials, session: 0, trial: 0, params }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn factors(&self) -> &FactorSet {
        &self.factors
    }

    pub fn adapt_state(&self) -> Option<&AdaptState> {
        self.adapt.as_ref()
    }

    pub fn params(&self) -> &SimParams {
        &self.params
    }

    pub fn trial_index(&self) -> u32 {
        self.trial
    }

    /// Arbitration the next trial would use.
    pub fn pending_arbitration(&self) -> ArbitrationMatrix {
        self.setup_for("", 0).arbitration().1
    }

    pub fn set_session(&mut self, session: u32) {
        self.session = session;
    }

    /// Applies one factor step; only allowed between trials in user mode.
    pub fn edit_factor(&mut self, which: FactorId, direction: EditDirection) -> Result<FactorSet, SessionError> {
        if self.phase == Phase::Running {
            return Err(SessionError::TrialRunning);
        }
        if self.mode != Mode::ScUser {
            return Err(SessionError::EditsDisabled(self.mode));
        }
        self.factors = apply_factor_edit(&self.factors, which, direction);
        Ok(self.factors)
    }

    fn setup_for(&self, course_id: &str, seed: u64) -> TrialSetup {
        TrialSetup {
            mode: self.mode,
            session: self.session,
            trial: self.trial,
            course_id: course_id.to_string(),
            seed,
            factors: self.factors,
            theta: self.adapt.as_ref().map(|a| a.theta),
            params: self.params,
        }
    }

    /// Snapshots the arbitration for the next trial and enters the running
    /// phase.
    pub fn start_trial(&mut self, course_id: &str, seed: u64) -> Result<TrialSetup, SessionError> {
        if self.phase == Phase::Running {
            return Err(SessionError::TrialRunning);
        }
        self.phase = Phase::Running;
        Ok(self.setup_for(course_id, seed))
    }

    /// Ends the running trial, adapting θ in SC mode.
    pub fn finish_trial(&mut self, log: &TrialLog) -> Result<(), SessionError> {
        let r = log.mean_wrench().map(|w| trial_error(&w));
        self.finish_with_error(r)
    }

    /// As [`finish_trial`](Self::finish_trial) with the trial's error vector
    /// already computed.
    pub fn finish_with_error(&mut self, r_now: Option<[f64; 3]>) -> Result<(), SessionError> {
        if self.phase != Phase::Running {
            return Err(SessionError::NotRunning);
        }
        self.phase = Phase::BetweenTrials;
        self.trial += 1;
        if self.mode == Mode::Sc {
            if let (Some(state), Some(r)) = (self.adapt.as_ref(), r_now) {
                self.adapt = Some(update_theta(state, &r)?);
            }
        }
        Ok(())
    }
}
