//! Deterministic stand-in for a SLURM-like batch scheduler.
//!
//! Time is a virtual tick counter. Each [`BatchSim::step`] first retires
//! running jobs whose command has exited and whose simulated run time has
//! elapsed (in job-id order), then admits pending jobs whose queue delay has
//! elapsed (in job-id order) while fewer than `max_concurrent_running` jobs
//! run. Queue delays and run times are drawn from a ChaCha RNG at submission,
//! so a fixed seed and submission sequence give the same trace every time.
//!
//! Like a real scheduler, the simulator notifies nobody: finished jobs only
//! leave an exit file and a `.done` marker in the site's status directory.

use std::collections::{BTreeMap, HashMap};
use std::process::Child;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::Duration;

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::backend::{BackendError, ExecBackend, Submission};
use crate::config::{BatchSettings, DelayModel};
use crate::exec_local::{kill_group, spawn_module, spawn_shell, write_completion, LaunchPlan, PlannedCommand};
use crate::ids::InstanceId;
use crate::modules::ModuleRegistry;

/// Exit code recorded for jobs killed at their run cap, as `timeout(1)` does.
pub const RUN_CAP_EXIT: i32 = 124;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum JobState {
    PD,
    R,
    CD,
    F,
    CA,
}

impl JobState {
    pub fn is_finished(self) -> bool {
        matches!(self, JobState::CD | JobState::F | JobState::CA)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown batch job {0}")]
    UnknownJob(u64),
    #[error("batch queue is full ({0} jobs)")]
    QueueFull(usize),
    #[error("batch scheduler is shut down")]
    Shutdown,
}

/// Public view of a job, times in ticks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchJob {
    pub job_id: u64,
    pub instance: InstanceId,
    pub script: String,
    pub state: JobState,
    pub submit_tick: u64,
    pub start_tick: Option<u64>,
    pub end_tick: Option<u64>,
    pub queue_delay_ticks: u64,
    pub run_ticks: u64,
    pub exit_code: Option<i32>,
}

/// One state change in the simulator's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TraceEntry {
    pub tick: u64,
    pub job_id: u64,
    pub state: JobState,
}

enum Work {
    Process(Child),
    Module {
        handle: thread::JoinHandle<i32>,
        cancelled: Arc<AtomicBool>,
    },
}

struct Job {
    view: BatchJob,
    plan: LaunchPlan,
    work: Option<Work>,
    /// Exit code once the command has finished.
    finished: Option<i32>,
}

struct Inner {
    settings: BatchSettings,
    rng: ChaCha8Rng,
    now: u64,
    next_id: u64,
    jobs: BTreeMap<u64, Job>,
    shutdown: bool,
    trace: Vec<TraceEntry>,
}

struct Shared {
    inner: Mutex<Inner>,
    wake: Condvar,
    modules: Arc<ModuleRegistry>,
}

/// Handle to a simulator; clones share the same scheduler.
#[derive(Clone)]
pub struct BatchSim {
    shared: Arc<Shared>,
}

fn ticks(d: Duration, tick: Duration) -> u64 {
    let tick = tick.as_nanos().max(1);
    d.as_nanos().div_ceil(tick) as u64
}

fn draw(rng: &mut ChaCha8Rng, model: DelayModel, tick: Duration) -> u64 {
    let d = match model {
        DelayModel::Fixed { delay } => delay,
        DelayModel::Uniform { min, max } => {
            let (lo, hi) = (min.as_nanos() as u64, max.as_nanos() as u64);
            Duration::from_nanos(if lo >= hi { lo } else { rng.gen_range(lo..=hi) })
        }
    };
    ticks(d, tick)
}

fn command_text(plan: &LaunchPlan) -> &str {
    match &plan.command {
        PlannedCommand::Shell(s) | PlannedCommand::Module(s) => s,
    }
}

impl Inner {
    fn record(&mut self, job_id: u64, state: JobState) {
        let now = self.now;
        if let Some(job) = self.jobs.get_mut(&job_id) {
            job.view.state = state;
            match state {
                JobState::R => job.view.start_tick = Some(now),
                JobState::CD | JobState::F | JobState::CA => job.view.end_tick = Some(now),
                JobState::PD => {}
            }
        }
        self.trace.push(TraceEntry {
            tick: now,
            job_id,
            state,
        });
    }

    fn running(&self) -> usize {
        self.jobs.values().filter(|j| j.view.state == JobState::R).count()
    }

    fn queued(&self) -> usize {
        self.jobs
            .values()
            .filter(|j| matches!(j.view.state, JobState::PD | JobState::R))
            .count()
    }

    fn enqueue(&mut self, plan: &LaunchPlan) -> Result<u64, SimError> {
        if self.shutdown {
            return Err(SimError::Shutdown);
        }
        if let Some(cap) = self.settings.capacity {
            if self.queued() >= cap {
                return Err(SimError::QueueFull(cap));
            }
        }
        let job_id = self.next_id;
        self.next_id += 1;
        let tick = self.settings.tick;
        let queue_delay_ticks = draw(&mut self.rng, self.settings.queue_delay, tick);
        let run_ticks = draw(&mut self.rng, self.settings.run_time, tick);
        let view = BatchJob {
            job_id,
            instance: plan.instance.clone(),
            script: command_text(plan).to_string(),
            state: JobState::PD,
            submit_tick: self.now,
            start_tick: None,
            end_tick: None,
            queue_delay_ticks,
            run_ticks,
            exit_code: None,
        };
        debug!("batch job {job_id} ({}) queued for {queue_delay_ticks} ticks", plan.instance);
        self.jobs.insert(
            job_id,
            Job {
                view,
                plan: plan.clone(),
                work: None,
                finished: None,
            },
        );
        self.record(job_id, JobState::PD);
        Ok(job_id)
    }

    fn start_job(&mut self, job_id: u64, modules: &ModuleRegistry) {
        let job = self.jobs.get_mut(&job_id).expect("admitted job exists");
        let work = match &job.plan.command {
            PlannedCommand::Shell(cmd) => spawn_shell(&job.plan, cmd, false)
                .map(Work::Process)
                .map_err(|e| e.to_string()),
            PlannedCommand::Module(_) => {
                let cancelled = Arc::new(AtomicBool::new(false));
                spawn_module(&job.plan, modules, cancelled.clone(), false)
                    .map(|handle| Work::Module { handle, cancelled })
                    .map_err(|e| e.to_string())
            }
        };
        match work {
            Ok(w) => job.work = Some(w),
            Err(e) => {
                // the job script could not run at all; a real scheduler reports this as 127
                warn!("batch job {job_id}: {e}");
                job.finished = Some(127);
            }
        }
        self.record(job_id, JobState::R);
    }

    fn poll_work(job: &mut Job) {
        if job.finished.is_some() {
            return;
        }
        match job.work.take() {
            Some(Work::Process(mut child)) => match child.try_wait() {
                Ok(Some(status)) => {
                    job.finished = Some(status.code().unwrap_or_else(|| {
                        use std::os::unix::process::ExitStatusExt;
                        128 + status.signal().unwrap_or(0)
                    }))
                }
                Ok(None) => job.work = Some(Work::Process(child)),
                Err(e) => {
                    warn!("batch job {}: wait failed: {e}", job.view.job_id);
                    job.finished = Some(-1);
                }
            },
            Some(Work::Module { handle, cancelled }) => {
                if handle.is_finished() {
                    job.finished = Some(handle.join().unwrap_or(1));
                } else {
                    job.work = Some(Work::Module { handle, cancelled });
                }
            }
            None => {}
        }
    }

    fn kill_work(job: &mut Job) {
        match job.work.take() {
            Some(Work::Process(mut child)) => {
                if let Err(e) = kill_group(child.id()) {
                    warn!("batch job {}: kill failed: {e}", job.view.job_id);
                }
                let _ = child.wait();
            }
            Some(Work::Module { cancelled, .. }) => cancelled.store(true, Ordering::SeqCst),
            None => {}
        }
    }

    fn finish(&mut self, job_id: u64, code: i32) {
        let job = self.jobs.get_mut(&job_id).expect("finishing job exists");
        job.view.exit_code = Some(code);
        if let Err(e) = write_completion(&job.plan, code) {
            warn!("batch job {job_id}: cannot write completion files: {e}");
        }
        self.record(job_id, if code == 0 { JobState::CD } else { JobState::F });
    }

    fn step(&mut self, modules: &ModuleRegistry) {
        self.now += 1;
        let now = self.now;
        let cap = self.settings.run_cap.map(|c| ticks(c, self.settings.tick));

        let running: Vec<u64> = self
            .jobs
            .iter()
            .filter(|(_, j)| j.view.state == JobState::R)
            .map(|(id, _)| *id)
            .collect();
        for job_id in running {
            let job = self.jobs.get_mut(&job_id).expect("running job exists");
            Self::poll_work(job);
            let start = job.view.start_tick.unwrap_or(now);
            let elapsed = now - start;
            if let Some(code) = job.finished {
                if elapsed >= job.view.run_ticks {
                    self.finish(job_id, code);
                }
            } else if cap.is_some_and(|c| elapsed >= c.max(1)) {
                Self::kill_work(job);
                self.finish(job_id, RUN_CAP_EXIT);
            }
        }

        let pending: Vec<u64> = self
            .jobs
            .iter()
            .filter(|(_, j)| {
                j.view.state == JobState::PD && now >= j.view.submit_tick + j.view.queue_delay_ticks
            })
            .map(|(id, _)| *id)
            .collect();
        for job_id in pending {
            if self.running() >= self.settings.max_concurrent_running.max(1) {
                break;
            }
            self.start_job(job_id, modules);
        }
    }
}

impl BatchSim {
    fn build(settings: BatchSettings, modules: Arc<ModuleRegistry>) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(settings.seed);
        Self {
            shared: Arc::new(Shared {
                inner: Mutex::new(Inner {
                    settings,
                    rng,
                    now: 0,
                    next_id: 1,
                    jobs: BTreeMap::new(),
                    shutdown: false,
                    trace: Vec::new(),
                }),
                wake: Condvar::new(),
                modules,
            }),
        }
    }

    /// A simulator advanced only by explicit [`step`](Self::step) calls.
    pub fn manual(settings: BatchSettings, modules: Arc<ModuleRegistry>) -> Self {
        Self::build(settings, modules)
    }

    /// A simulator with its own ticking thread, one step per `settings.tick`.
    pub fn start(settings: BatchSettings, modules: Arc<ModuleRegistry>) -> Self {
        let sim = Self::build(settings, modules);
        let ticker = sim.clone();
        thread::Builder::new()
            .name("batch-sim".into())
            .spawn(move || ticker.tick_loop())
            .expect("spawn batch simulator thread");
        sim
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn tick_loop(&self) {
        let mut inner = self.lock();
        loop {
            if inner.shutdown {
                return;
            }
            let tick = inner.settings.tick;
            let (guard, timeout) = self
                .shared
                .wake
                .wait_timeout(inner, tick)
                .unwrap_or_else(|p| p.into_inner());
            inner = guard;
            if inner.shutdown {
                return;
            }
            if timeout.timed_out() {
                inner.step(&self.shared.modules);
            }
        }
    }

    /// Advances virtual time by one tick.
    pub fn step(&self) {
        let mut inner = self.lock();
        if !inner.shutdown {
            inner.step(&self.shared.modules);
        }
    }

    pub fn now(&self) -> u64 {
        self.lock().now
    }

    /// Enqueues a job and returns its id without waiting (like `sbatch`).
    pub fn submit(&self, plan: &LaunchPlan) -> Result<u64, SimError> {
        self.lock().enqueue(plan)
    }

    /// Enqueues several jobs at the same virtual instant.
    pub fn submit_all(&self, plans: &[LaunchPlan]) -> Vec<Result<u64, SimError>> {
        let mut inner = self.lock();
        plans.iter().map(|p| inner.enqueue(p)).collect()
    }

    pub fn query(&self, job_id: u64) -> Result<BatchJob, SimError> {
        self.lock()
            .jobs
            .get(&job_id)
            .map(|j| j.view.clone())
            .ok_or(SimError::UnknownJob(job_id))
    }

    pub fn jobs(&self) -> Vec<BatchJob> {
        self.lock().jobs.values().map(|j| j.view.clone()).collect()
    }

    /// PD jobs are dropped, R jobs killed; neither leaves a marker.
    /// Finished jobs are left as they are.
    pub fn cancel(&self, job_id: u64) -> Result<(), SimError> {
        let mut inner = self.lock();
        let job = inner.jobs.get_mut(&job_id).ok_or(SimError::UnknownJob(job_id))?;
        match job.view.state {
            JobState::PD => {}
            JobState::R => Inner::kill_work(job),
            _ => return Ok(()),
        }
        inner.record(job_id, JobState::CA);
        Ok(())
    }

    /// Full history of state changes, in order.
    pub fn trace(&self) -> Vec<TraceEntry> {
        self.lock().trace.clone()
    }

    /// Stops the ticker and kills running jobs. Later submissions fail.
    pub fn shutdown(&self) {
        let mut inner = self.lock();
        if inner.shutdown {
            return;
        }
        inner.shutdown = true;
        for job in inner.jobs.values_mut() {
            if job.view.state == JobState::R {
                Inner::kill_work(job);
            }
        }
        drop(inner);
        self.shared.wake.notify_all();
    }
}

/// [`ExecBackend`] adapter for a [`BatchSim`].
pub struct BatchSimBackend {
    sim: BatchSim,
    jobs: HashMap<InstanceId, u64>,
}

impl BatchSimBackend {
    pub fn new(sim: BatchSim) -> Self {
        Self {
            sim,
            jobs: HashMap::new(),
        }
    }

    pub fn sim(&self) -> &BatchSim {
        &self.sim
    }

    fn accepted(&mut self, plan: &LaunchPlan, res: Result<u64, SimError>) -> Result<Submission, BackendError> {
        let job_id = res?;
        self.jobs.insert(plan.instance.clone(), job_id);
        Ok(Submission {
            handle: format!("job {job_id}"),
            started: false,
        })
    }
}

impl ExecBackend for BatchSimBackend {
    fn strategy(&self) -> &str {
        "batch_sim"
    }

    fn submit(&mut self, plan: &LaunchPlan) -> Result<Submission, BackendError> {
        let res = self.sim.submit(plan);
        self.accepted(plan, res)
    }

    fn submit_all(&mut self, plans: &[LaunchPlan]) -> Vec<Result<Submission, BackendError>> {
        let results = self.sim.submit_all(plans);
        plans
            .iter()
            .zip(results)
            .map(|(plan, res)| self.accepted(plan, res))
            .collect()
    }

    fn cancel(&mut self, instance: &InstanceId) -> Result<(), BackendError> {
        let job_id = self
            .jobs
            .get(instance)
            .copied()
            .ok_or_else(|| BackendError::UnknownJob(instance.clone()))?;
        self.sim.cancel(job_id).map_err(BackendError::from)
    }

    fn describe(&self, instance: &InstanceId) -> Option<String> {
        let job_id = self.jobs.get(instance)?;
        let job = self.sim.query(*job_id).ok()?;
        Some(format!("job {} {:?}", job.job_id, job.state))
    }

    fn shutdown(&mut self) {
        self.sim.shutdown();
    }
}

impl Drop for BatchSimBackend {
    fn drop(&mut self) {
        self.sim.shutdown();
    }
}
