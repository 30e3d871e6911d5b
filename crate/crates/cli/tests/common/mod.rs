//! Helpers for driving the `flowgate` binary.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;
use std::time::{Duration, Instant};

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_flowgate")
}

/// `flowgate --workdir <workdir> <args...>`, with the API token unset so
/// the environment of the test runner does not leak in.
pub fn flowgate(workdir: &Path) -> Command {
    let mut cmd = Command::new(bin());
    cmd.arg("--workdir").arg(workdir).env_remove("FLOWGATE_API_TOKEN").env_remove("RUST_LOG");
    cmd
}

pub fn run(workdir: &Path, args: &[&str]) -> Output {
    flowgate(workdir).args(args).output().expect("flowgate runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

pub fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Polls `check` every 10 ms until it returns `Some`, panicking after `limit`.
pub fn wait_for<T>(limit: Duration, what: &str, mut check: impl FnMut() -> Option<T>) -> T {
    let start = Instant::now();
    loop {
        if let Some(v) = check() {
            return v;
        }
        assert!(start.elapsed() < limit, "timed out waiting for {what}");
        thread::sleep(Duration::from_millis(10));
    }
}
