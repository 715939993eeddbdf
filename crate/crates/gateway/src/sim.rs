//! The simulation thread: sole owner of the session state machine and the
//! running trial. It never waits on the network; clients reach it through a
//! latest-wins input slot and a bounded command queue, and it publishes
//! through a watch channel (frames) and a broadcast channel (events).

use crate::protocol::{ConfigSnapshot, ServerBody, StateFrame, TrialEnd, TrialPhase, UiFactors, UiScale, PROTOCOL_VERSION};
use crate::GatewayConfig;
use buzzwire_core::adaptation::AdaptState;
use buzzwire_core::arbitration::{theta_from_factors, EditDirection, FactorId};
use buzzwire_core::course::WireCourse;
use buzzwire_core::experiment::{log_file_name, SummaryRow, SUMMARY_FILE};
use buzzwire_core::geometry::Pose;
use buzzwire_core::session::{compute_metrics, Mode, SessionError, SessionMachine, Trial, TrialLog};
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, SyncSender, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};
use tokio::sync::{broadcast, oneshot, watch};

/// Latest handle pose and the client that sent it.
pub type InputSlot = Arc<Mutex<Option<(u64, Pose)>>>;

/// Refusal of a state-machine transition, sent as `rejected.reason`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rejection {
    TrialRunning,
    Review,
    NotInReview,
    EditsDisabled,
    Busy,
}

impl Rejection {
    pub fn reason(self) -> &'static str {
        match self {
            Rejection::TrialRunning => "trial_running",
            Rejection::Review => "review",
            Rejection::NotInReview => "not_in_review",
            Rejection::EditsDisabled => "edits_disabled",
            Rejection::Busy => "busy",
        }
    }
}

/// Phase and factors after an accepted command.
pub type Accepted = (TrialPhase, UiFactors);

pub enum Command {
    Snapshot(oneshot::Sender<ConfigSnapshot>),
    EditFactor(FactorId, EditDirection, oneshot::Sender<Result<Accepted, Rejection>>),
    StartTrial(oneshot::Sender<Result<Accepted, Rejection>>),
    EndReview(oneshot::Sender<Result<Accepted, Rejection>>),
    Disconnected(u64),
}

/// Event on the broadcast channel: the simulation clock and the body.
pub type Event = (f64, ServerBody);

pub struct SimHandle {
    commands: SyncSender<Command>,
    pub input: InputSlot,
    pub frames: watch::Receiver<(f64, StateFrame)>,
    pub events: broadcast::Sender<Event>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl SimHandle {
    pub fn spawn(config: GatewayConfig, course: WireCourse) -> SimHandle {
        let (commands, rx) = std::sync::mpsc::sync_channel(64);
        let input: InputSlot = Arc::new(Mutex::new(None));
        let stop = Arc::new(AtomicBool::new(false));
        let (events, _) = broadcast::channel(16);
        let mut sim = Sim::new(config, course, input.clone(), events.clone());
        let (frame_tx, frames) = watch::channel((0.0, sim.frame()));
        let thread = {
            let stop = stop.clone();
            std::thread::Builder::new()
                .name("buzzwire-sim".into())
                .spawn(move || sim.run(rx, frame_tx, &stop))
                .expect("spawn simulation thread")
        };
        SimHandle { commands, input, frames, events, stop, thread: Some(thread) }
    }

    /// Queues a command without blocking; `Busy` if the queue is full.
    pub fn send(&self, cmd: Command) -> Result<(), Rejection> {
        match self.commands.try_send(cmd) {
            Ok(()) => Ok(()),
            Err(TrySendError::Full(_)) | Err(TrySendError::Disconnected(_)) => Err(Rejection::Busy),
        }
    }

    pub fn stop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SimHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

struct Sim {
    config: GatewayConfig,
    course: WireCourse,
    machine: SessionMachine,
    phase: TrialPhase,
    input: InputSlot,
    events: broadcast::Sender<Event>,
    /// simulation clock, advanced every tick whatever the phase
    tick: u64,
    robot: Pose,
    handle: Pose,
    progress: f64,
    buzz: bool,
    fatal: bool,
    last_trial: Option<u32>,
}

impl Sim {
    fn new(config: GatewayConfig, course: WireCourse, input: InputSlot, events: broadcast::Sender<Event>) -> Sim {
        let adapt = match (config.mode, &config.adaptation) {
            (Mode::Sc, Some(a)) => AdaptState::new(theta_from_factors(&config.factors), a.r_d, a.chi_nom).ok(),
            _ => None,
        };
        let machine = SessionMachine::new(config.mode, config.factors, config.sim, adapt);
        let start = course.pose_at(course.start_s());
        Sim {
            config,
            course,
            machine,
            phase: TrialPhase::BetweenTrials,
            input,
            events,
            tick: 0,
            robot: start,
            handle: start,
            progress: 0.0,
            buzz: false,
            fatal: false,
            last_trial: None,
        }
    }

    fn dt(&self) -> f64 {
        self.config.sim.dt
    }

    fn clock(&self) -> f64 {
        self.tick as f64 * self.dt()
    }

    fn ui_factors(&self) -> UiFactors {
        UiFactors::from(self.machine.factors())
    }

    fn trial_number(&self) -> u32 {
        self.last_trial.filter(|_| self.phase != TrialPhase::BetweenTrials).unwrap_or(self.machine.trial_index())
    }

    fn frame(&self) -> StateFrame {
        StateFrame {
            robot_pose: self.robot,
            handle_pose: self.handle,
            progress: self.progress,
            buzz: self.buzz,
            fatal: self.fatal,
            trial_phase: self.phase,
            trial: self.trial_number(),
            factors: self.ui_factors(),
            alpha: self.machine.pending_arbitration().alpha.into(),
        }
    }

    fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            protocol_version: PROTOCOL_VERSION,
            mode: self.config.mode,
            course: self.course.descriptor(),
            handle: self.config.sim.handle,
            factors: self.ui_factors(),
            ui_scale: UiScale::default(),
            alpha: self.machine.pending_arbitration().alpha.into(),
            trial_phase: self.phase,
            trial: self.trial_number(),
            tick_rate: 1.0 / self.dt(),
            frame_rate: self.config.frame_rate,
        }
    }

    fn accepted(&self) -> Result<Accepted, Rejection> {
        Ok((self.phase, self.ui_factors()))
    }

    fn run(&mut self, commands: Receiver<Command>, frames: watch::Sender<(f64, StateFrame)>, stop: &AtomicBool) {
        let dt = Duration::from_secs_f64(self.dt());
        let frame_period = 1.0 / self.config.frame_rate;
        let mut next_frame = 0.0;
        let mut epoch = Instant::now();
        let mut ticks_since_epoch: u32 = 0;
        let mut trial: Option<Trial<'_>> = None;
        let course = self.course.clone();
        while !stop.load(Ordering::Relaxed) {
            while let Ok(cmd) = commands.try_recv() {
                self.command(cmd, &mut trial, &course);
            }
            if let Some(t) = trial.as_mut() {
                let input = self.input.lock().expect("input slot").map(|(_, p)| p).unwrap_or(*t.robot());
                self.handle = input;
                let outcome = t.step(input);
                self.observe(t);
                if outcome.is_some() {
                    self.finish(trial.take().expect("running trial"));
                }
            }
            if self.clock() + 1e-9 >= next_frame {
                frames.send_replace((self.clock(), self.frame()));
                next_frame += frame_period;
            }
            self.tick += 1;
            ticks_since_epoch += 1;
            let due = epoch + dt * ticks_since_epoch;
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            } else if now - due > Duration::from_millis(100) {
                // fell far behind (e.g. suspended); resume without a burst
                epoch = now;
                ticks_since_epoch = 0;
            }
        }
    }

    fn observe(&mut self, trial: &Trial<'_>) {
        self.robot = *trial.robot();
        if let Some(rec) = trial.last_tick() {
            self.progress = rec.progress;
            self.buzz = rec.contact.in_contact;
            self.fatal = rec.contact.fatal;
        }
    }

    fn command<'c>(&mut self, cmd: Command, trial: &mut Option<Trial<'c>>, course: &'c WireCourse) {
        match cmd {
            Command::Snapshot(reply) => {
                let _ = reply.send(self.snapshot());
            }
            Command::EditFactor(which, direction, reply) => {
                let result = match self.phase {
                    TrialPhase::Running => Err(Rejection::TrialRunning),
                    TrialPhase::Review => Err(Rejection::Review),
                    TrialPhase::BetweenTrials => match self.machine.edit_factor(which, direction) {
                        Ok(_) => self.accepted(),
                        Err(SessionError::TrialRunning) => Err(Rejection::TrialRunning),
                        Err(_) => Err(Rejection::EditsDisabled),
                    },
                };
                let _ = reply.send(result);
            }
            Command::StartTrial(reply) => {
                let result = match self.phase {
                    TrialPhase::Running => Err(Rejection::TrialRunning),
                    TrialPhase::Review => Err(Rejection::Review),
                    TrialPhase::BetweenTrials => {
                        let seed = self.machine.trial_index() as u64;
                        match self.machine.start_trial(&self.config.course, seed) {
                            Ok(setup) => {
                                *self.input.lock().expect("input slot") = None;
                                let t = Trial::new(&setup, course);
                                self.last_trial = Some(setup.trial);
                                self.robot = *t.robot();
                                self.handle = self.robot;
                                self.progress = 0.0;
                                self.buzz = false;
                                self.fatal = false;
                                *trial = Some(t);
                                self.phase = TrialPhase::Running;
                                self.accepted()
                            }
                            Err(_) => Err(Rejection::TrialRunning),
                        }
                    }
                };
                let _ = reply.send(result);
            }
            Command::EndReview(reply) => {
                let result = if self.phase == TrialPhase::Review {
                    self.phase = TrialPhase::BetweenTrials;
                    self.accepted()
                } else {
                    Err(Rejection::NotInReview)
                };
                let _ = reply.send(result);
            }
            Command::Disconnected(client) => {
                let owner = self.input.lock().expect("input slot").map(|(c, _)| c);
                if owner == Some(client) {
                    if let Some(mut t) = trial.take() {
                        tracing::warn!(client, "input client disconnected; aborting trial");
                        t.abort();
                        self.finish(t);
                    }
                }
            }
        }
    }

    fn finish(&mut self, trial: Trial<'_>) {
        let log = trial.into_log();
        if let Err(e) = self.machine.finish_trial(&log) {
            tracing::error!("adaptation failed: {e}");
        }
        self.phase = TrialPhase::Review;
        let file = self.config.log_dir.as_ref().map(|_| log_file_name(log.header.session, log.header.trial));
        let report = TrialEnd {
            trial: log.header.trial,
            outcome: log.outcome,
            metrics: compute_metrics(&log).ok(),
            log: file.clone(),
        };
        tracing::info!(trial = report.trial, outcome = ?report.outcome, "trial finished");
        let _ = self.events.send((self.clock(), ServerBody::TrialEnd(report)));
        if let (Some(dir), Some(name)) = (self.config.log_dir.clone(), file) {
            // file I/O stays off the tick loop
            std::thread::spawn(move || {
                if let Err(e) = write_log(&dir, &name, &log) {
                    tracing::error!("writing {name}: {e}");
                }
            });
        }
    }
}

fn write_log(dir: &PathBuf, name: &str, log: &TrialLog) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join(name))?);
    log.write_jsonl(&mut w).map_err(std::io::Error::other)?;
    w.flush()?;
    let row = serde_json::to_string(&SummaryRow::from_log(log, name)).map_err(std::io::Error::other)?;
    let mut summary = std::fs::OpenOptions::new().create(true).append(true).open(dir.join(SUMMARY_FILE))?;
    writeln!(summary, "{row}")
}
