use std::collections::BTreeMap;
use std::fs::{self, File};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::ExecutorError;
use crate::history::now_epoch;

pub const DEFAULT_KILL_GRACE: Duration = Duration::from_secs(2);

/// How often `wait` and `kill` re-check the child.
const REAP_INTERVAL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskState {
    Created,
    Running,
    Finished,
    Failed,
    UserKilled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Finished | Self::Failed | Self::UserKilled)
    }
}

/// One launched (or, for dry runs, prepared) external application.
#[derive(Debug)]
pub struct Task {
    pub task_id: u64,
    state: TaskState,
    return_code: Option<i32>,
    pub launch_line: Vec<String>,
    pub env_additions: BTreeMap<String, String>,
    pub workdir: PathBuf,
    pub stdout_path: PathBuf,
    pub stderr_path: PathBuf,
    pub submit_time: f64,
    pub end_time: Option<f64>,
    /// Why the task failed, when it failed before or during launch.
    pub diagnostic: Option<String>,
    child: Option<Child>,
}

impl Task {
    pub(crate) fn created(
        task_id: u64,
        launch_line: Vec<String>,
        env_additions: BTreeMap<String, String>,
        workdir: &Path,
    ) -> Self {
        Self {
            task_id,
            state: TaskState::Created,
            return_code: None,
            launch_line,
            env_additions,
            workdir: workdir.to_path_buf(),
            stdout_path: workdir.join(format!("task_{task_id}.out")),
            stderr_path: workdir.join(format!("task_{task_id}.err")),
            submit_time: now_epoch(),
            end_time: None,
            diagnostic: None,
            child: None,
        }
    }

    pub fn state(&self) -> TaskState {
        self.state
    }

    /// Exit code, or minus the signal number for signalled exits. Set
    /// exactly when the task is terminal.
    pub fn return_code(&self) -> Option<i32> {
        self.return_code
    }

    pub fn pid(&self) -> Option<u32> {
        self.child.as_ref().map(Child::id)
    }

    fn finish(&mut self, state: TaskState, code: i32) {
        debug_assert!(!self.state.is_terminal());
        self.state = state;
        self.return_code = Some(code);
        self.end_time = Some(now_epoch());
        self.child = None;
    }

    fn fail_to_launch(&mut self, msg: String) {
        log::warn!("task {} failed to launch: {msg}", self.task_id);
        self.diagnostic = Some(msg);
        self.finish(TaskState::Failed, -1);
    }

    pub(crate) fn start(&mut self, env_script: Option<&Path>) {
        if let Err(e) = fs::create_dir_all(&self.workdir) {
            return self.fail_to_launch(format!("cannot create {}: {e}", self.workdir.display()));
        }
        let argv: Vec<String> = match env_script {
            Some(script) => {
                let wrapper = self.workdir.join(format!("task_{}.sh", self.task_id));
                let body = format!(
                    "#!/bin/bash\nsource {}\nexec \"$@\"\n",
                    shell_quote(&script.to_string_lossy())
                );
                if let Err(e) = fs::write(&wrapper, body) {
                    return self.fail_to_launch(format!("cannot write wrapper: {e}"));
                }
                let mut v = vec!["bash".to_string(), wrapper.to_string_lossy().into_owned()];
                v.extend(self.launch_line.iter().cloned());
                v
            }
            None => self.launch_line.clone(),
        };
        let (out, err) = match (File::create(&self.stdout_path), File::create(&self.stderr_path)) {
            (Ok(o), Ok(e)) => (o, e),
            (Err(e), _) | (_, Err(e)) => {
                return self.fail_to_launch(format!("cannot create output files: {e}"))
            }
        };
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .envs(&self.env_additions)
            .current_dir(&self.workdir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            // own process group, so a kill reaches everything the runner spawned
            .process_group(0);
        match cmd.spawn() {
            Ok(child) => {
                self.child = Some(child);
                self.state = TaskState::Running;
            }
            Err(e) => self.fail_to_launch(format!("cannot spawn {:?}: {e}", argv[0])),
        }
    }

    fn record_exit(&mut self, status: ExitStatus) {
        match (status.code(), status.signal()) {
            (Some(0), _) => self.finish(TaskState::Finished, 0),
            (Some(c), _) => self.finish(TaskState::Failed, c),
            (None, Some(sig)) => self.finish(TaskState::Failed, -sig),
            (None, None) => self.finish(TaskState::Failed, -1),
        }
    }

    /// Non-blocking state refresh.
    pub fn poll(&mut self) -> TaskState {
        if self.state == TaskState::Running {
            let child = self.child.as_mut().expect("running task has a child");
            match child.try_wait() {
                Ok(Some(status)) => self.record_exit(status),
                Ok(None) => {}
                Err(e) => {
                    self.diagnostic = Some(format!("wait failed: {e}"));
                    self.finish(TaskState::Failed, -1);
                }
            }
        }
        self.state
    }

    /// Blocks until the task ends or `timeout` passes; a still-running task
    /// is reported as [`TaskState::Running`].
    pub fn wait(&mut self, timeout: Option<Duration>) -> Result<TaskState, ExecutorError> {
        if self.state == TaskState::Created {
            return Err(ExecutorError::NotStarted(self.task_id));
        }
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            if self.poll() != TaskState::Running {
                return Ok(self.state);
            }
            if deadline.is_some_and(|d| Instant::now() >= d) {
                return Ok(TaskState::Running);
            }
            thread::sleep(REAP_INTERVAL);
        }
    }

    /// Sends SIGTERM to the task's process group, then SIGKILL if it is
    /// still alive after `grace`. Ends in [`TaskState::UserKilled`] unless
    /// the task had already finished on its own.
    pub fn kill(&mut self, grace: Duration) -> Result<(), ExecutorError> {
        if self.state == TaskState::Created {
            return Err(ExecutorError::NotStarted(self.task_id));
        }
        if self.poll().is_terminal() {
            return Ok(());
        }
        let pgid = self.pid().expect("running task has a pid") as libc::pid_t;
        signal_group(pgid, libc::SIGTERM);
        let deadline = Instant::now() + grace;
        let status = loop {
            let child = self.child.as_mut().expect("running task has a child");
            match child.try_wait() {
                Ok(Some(s)) => break Some(s),
                Ok(None) if Instant::now() < deadline => thread::sleep(REAP_INTERVAL),
                Ok(None) => {
                    signal_group(pgid, libc::SIGKILL);
                    break child.wait().ok();
                }
                Err(_) => break None,
            }
        };
        // children the runner left behind
        signal_group(pgid, libc::SIGKILL);
        let code = status
            .map(|s| s.code().unwrap_or_else(|| -s.signal().unwrap_or(libc::SIGKILL)))
            .unwrap_or(-libc::SIGKILL);
        self.finish(TaskState::UserKilled, code);
        Ok(())
    }
}

impl Drop for Task {
    fn drop(&mut self) {
        if self.state == TaskState::Running {
            let _ = self.kill(Duration::ZERO);
        }
    }
}

fn signal_group(pgid: libc::pid_t, sig: libc::c_int) {
    // SAFETY: kill(2) with a negative pid only signals the given process
    // group; it has no memory-safety preconditions.
    unsafe {
        libc::kill(-pgid, sig);
    }
}

fn shell_quote(s: &str) -> String {
    format!("'{}'", s.replace('\'', r"'\''"))
}
