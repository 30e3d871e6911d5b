//! Polls execsite status directories for `.done` markers.
//!
//! The watcher is a read-only observer: it never writes to a status directory
//! and holds no reference to the registry. Each site gets its own polling
//! thread; completions flow to the orchestrator through a callback, each
//! instance reported exactly once per watcher.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant, SystemTime};

use log::{debug, warn};
use thiserror::Error;

use crate::ids::InstanceId;

/// Consecutive failed polls after which a site is reported unhealthy.
pub const HEALTH_THRESHOLD: u32 = 5;
pub const MAX_BACKOFF: Duration = Duration::from_secs(30);
/// Polls to wait for an exit file after its marker appeared.
pub const EXIT_GRACE_INTERVALS: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub instance: InstanceId,
    pub site: String,
    /// `None` when the exit file is malformed or never appeared.
    pub exit_code: Option<i32>,
    pub marker_time: SystemTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WatchEvent {
    Completed(Completion),
    /// `error` is `None` when a previously unhealthy site recovers.
    SiteHealth {
        site: String,
        consecutive_failures: u32,
        error: Option<String>,
    },
}

#[derive(Debug, Error)]
pub enum WatchError {
    #[error("cannot read status directory {}: {source}", path.display())]
    UnreadableStatusDir {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

/// Instances awaiting completion, mapped to the site whose status directory
/// will carry their marker. Shared between the orchestrator and the watch loops.
pub type ExpectedSet = Arc<Mutex<BTreeMap<InstanceId, String>>>;

/// Poll state for one site.
#[derive(Debug)]
pub struct Watcher {
    site: String,
    status_dir: PathBuf,
    grace: Duration,
    reported: BTreeSet<InstanceId>,
    awaiting_exit: HashMap<InstanceId, Instant>,
}

fn parse_exit(text: &str) -> Option<i32> {
    text.trim().parse().ok()
}

impl Watcher {
    pub fn new(site: impl Into<String>, status_dir: impl Into<PathBuf>, poll_interval: Duration) -> Self {
        Self {
            site: site.into(),
            status_dir: status_dir.into(),
            grace: poll_interval * EXIT_GRACE_INTERVALS,
            reported: BTreeSet::new(),
            awaiting_exit: HashMap::new(),
        }
    }

    pub fn status_dir(&self) -> &Path {
        &self.status_dir
    }

    /// Expected instances whose marker exists, with their exit codes, ordered
    /// by marker modification time. Instances reported earlier are skipped.
    pub fn poll_once(&mut self, expected: &BTreeSet<InstanceId>) -> Result<Vec<Completion>, WatchError> {
        let pending: Vec<&InstanceId> = expected.iter().filter(|i| !self.reported.contains(*i)).collect();
        if pending.is_empty() {
            return Ok(Vec::new());
        }
        let unreadable = |source| WatchError::UnreadableStatusDir {
            path: self.status_dir.clone(),
            source,
        };
        let mut present = BTreeSet::new();
        for entry in fs::read_dir(&self.status_dir).map_err(unreadable)? {
            let entry = entry.map_err(unreadable)?;
            present.insert(entry.file_name().to_string_lossy().into_owned());
        }

        let mut found = Vec::new();
        for id in pending {
            let stem = id.file_stem();
            let marker = format!("{stem}.done");
            if !present.contains(&marker) {
                continue;
            }
            let marker_time = fs::metadata(self.status_dir.join(&marker))
                .and_then(|m| m.modified())
                .unwrap_or_else(|_| SystemTime::now());
            let exit_code = match fs::read_to_string(self.status_dir.join(format!("{stem}.exit"))) {
                Ok(text) => match parse_exit(&text) {
                    Some(code) => Some(code),
                    None => {
                        warn!("{}: malformed exit file for {id}: {text:?}", self.site);
                        None
                    }
                },
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    let first_seen = *self.awaiting_exit.entry(id.clone()).or_insert_with(Instant::now);
                    if first_seen.elapsed() < self.grace {
                        continue;
                    }
                    warn!("{}: marker for {id} has no exit file after the grace window", self.site);
                    None
                }
                Err(e) => {
                    warn!("{}: cannot read exit file for {id}: {e}", self.site);
                    None
                }
            };
            self.awaiting_exit.remove(id);
            self.reported.insert(id.clone());
            found.push(Completion {
                instance: id.clone(),
                site: self.site.clone(),
                exit_code,
                marker_time,
            });
        }
        found.sort_by(|a, b| (a.marker_time, &a.instance).cmp(&(b.marker_time, &b.instance)));
        Ok(found)
    }
}

/// A site to watch.
#[derive(Debug, Clone)]
pub struct WatchTarget {
    pub site: String,
    pub status_dir: PathBuf,
    pub poll_interval: Duration,
}

#[derive(Default)]
struct Stop {
    flag: Mutex<bool>,
    cv: Condvar,
}

/// Running watch loops, one thread per site. Dropping it stops them.
pub struct WatchLoop {
    stop: Arc<Stop>,
    threads: Vec<thread::JoinHandle<()>>,
}

pub type Notify = Arc<dyn Fn(WatchEvent) + Send + Sync>;

/// Starts one polling thread per target. Each emits completions for the
/// instances in `expected` assigned to its site.
pub fn run_watch_loop(targets: Vec<WatchTarget>, expected: ExpectedSet, notify: Notify) -> WatchLoop {
    let stop = Arc::new(Stop::default());
    let threads = targets
        .into_iter()
        .map(|target| {
            let stop = stop.clone();
            let expected = expected.clone();
            let notify = notify.clone();
            thread::Builder::new()
                .name(format!("watch-{}", target.site))
                .spawn(move || site_loop(target, expected, notify, stop))
                .expect("spawn watcher thread")
        })
        .collect();
    WatchLoop { stop, threads }
}

fn site_loop(target: WatchTarget, expected: ExpectedSet, notify: Notify, stop: Arc<Stop>) {
    let mut watcher = Watcher::new(&target.site, &target.status_dir, target.poll_interval);
    let mut failures = 0u32;
    loop {
        let mine: BTreeSet<InstanceId> = expected
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .iter()
            .filter(|(_, site)| **site == target.site)
            .map(|(id, _)| id.clone())
            .collect();
        let wait = match watcher.poll_once(&mine) {
            Ok(found) => {
                if failures >= HEALTH_THRESHOLD {
                    notify(WatchEvent::SiteHealth {
                        site: target.site.clone(),
                        consecutive_failures: 0,
                        error: None,
                    });
                }
                failures = 0;
                for completion in found {
                    debug!("{}: {} completed ({:?})", target.site, completion.instance, completion.exit_code);
                    notify(WatchEvent::Completed(completion));
                }
                target.poll_interval
            }
            Err(e) => {
                failures += 1;
                warn!("{} (attempt {failures})", e);
                if failures == HEALTH_THRESHOLD {
                    notify(WatchEvent::SiteHealth {
                        site: target.site.clone(),
                        consecutive_failures: failures,
                        error: Some(e.to_string()),
                    });
                }
                let factor = 1u32 << failures.min(16);
                (target.poll_interval * factor).min(MAX_BACKOFF)
            }
        };
        let guard = stop.flag.lock().unwrap_or_else(|p| p.into_inner());
        if *guard {
            return;
        }
        let (guard, _) = stop
            .cv
            .wait_timeout(guard, wait)
            .unwrap_or_else(|p| p.into_inner());
        if *guard {
            return;
        }
    }
}

impl WatchLoop {
    pub fn stop(&mut self) {
        *self.stop.flag.lock().unwrap_or_else(|p| p.into_inner()) = true;
        self.stop.cv.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for WatchLoop {
    fn drop(&mut self) {
        self.stop();
    }
}
