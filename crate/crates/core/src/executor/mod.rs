//! External application launching.
//!
//! An [`Executor`] maps app names to binaries, turns a resource
//! [`Assignment`] into a runner command line ([`build_runline`]) and starts
//! [`Task`]s. Inside a simulator, [`polling_loop`] watches a task alongside
//! the manager's control channel so a running evaluation can be cancelled.

mod control;
mod runline;
mod task;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::resources::{Assignment, PlatformSpec, ResourceRequest};

pub use control::{manager_poll, polling_loop, ControlSignal, PollOutcome, WorkerControl};
pub use runline::build_runline;
pub use task::{Task, TaskState, DEFAULT_KILL_GRACE};

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("app {0:?} is already registered")]
    DuplicateApp(String),
    #[error("no app registered under {name:?} (registered: {known})")]
    UnknownApp { name: String, known: String },
    #[error("invalid submit: {0}")]
    InvalidSubmit(String),
    #[error("GPU ids differ across nodes ({0}); env-based GPU selection needs matching slots")]
    NonUniformGpus(String),
    #[error("task {0} was never started")]
    NotStarted(u64),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppRegistration {
    pub app_name: String,
    pub full_path: PathBuf,
}

/// How the launch line is built.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Launcher {
    /// Through the platform's MPI runner.
    #[default]
    Mpi,
    /// Run the app binary directly; GPU selection is done through the
    /// environment.
    Direct,
}

#[derive(Debug, Clone, Default)]
pub struct SubmitSpec {
    pub app_name: String,
    pub app_args: String,
    pub request: ResourceRequest,
    pub auto_assign_gpus: bool,
    pub match_procs_to_gpus: bool,
    pub extra_args: Option<String>,
    pub env_script: Option<PathBuf>,
    pub dry_run: bool,
}

impl SubmitSpec {
    pub fn new(app_name: impl Into<String>) -> Self {
        Self {
            app_name: app_name.into(),
            ..Default::default()
        }
    }

    pub fn args(mut self, args: impl Into<String>) -> Self {
        self.app_args = args.into();
        self
    }
}

#[derive(Debug)]
pub struct Executor {
    apps: BTreeMap<String, PathBuf>,
    platform: PlatformSpec,
    launcher: Launcher,
    next_task: AtomicU64,
}

impl Executor {
    pub fn new(platform: PlatformSpec) -> Self {
        Self {
            apps: BTreeMap::new(),
            platform,
            launcher: Launcher::Mpi,
            next_task: AtomicU64::new(1),
        }
    }

    pub fn with_launcher(mut self, launcher: Launcher) -> Self {
        self.launcher = launcher;
        self
    }

    pub fn platform(&self) -> &PlatformSpec {
        &self.platform
    }

    pub fn launcher(&self) -> Launcher {
        self.launcher
    }

    pub fn register_app(
        &mut self,
        full_path: impl Into<PathBuf>,
        app_name: impl Into<String>,
    ) -> Result<(), ExecutorError> {
        let name = app_name.into();
        if self.apps.contains_key(&name) {
            return Err(ExecutorError::DuplicateApp(name));
        }
        self.apps.insert(name, full_path.into());
        Ok(())
    }

    pub fn apps(&self) -> impl Iterator<Item = AppRegistration> + '_ {
        self.apps.iter().map(|(n, p)| AppRegistration {
            app_name: n.clone(),
            full_path: p.clone(),
        })
    }

    pub fn app_path(&self, name: &str) -> Result<&Path, ExecutorError> {
        self.apps
            .get(name)
            .map(PathBuf::as_path)
            .ok_or_else(|| ExecutorError::UnknownApp {
                name: name.to_string(),
                known: self.apps.keys().cloned().collect::<Vec<_>>().join(", "),
            })
    }

    /// Builds the launch line for `spec` on `assignment` and, unless it is
    /// a dry run, starts the process with its working directory at
    /// `workdir`.
    pub fn submit(
        &self,
        spec: &SubmitSpec,
        assignment: &Assignment,
        workdir: &Path,
    ) -> Result<Task, ExecutorError> {
        let app = self.app_path(&spec.app_name)?;
        let (argv, env) = match self.launcher {
            Launcher::Mpi => build_runline(&self.platform, assignment, spec, app)?,
            Launcher::Direct => runline::build_direct(&self.platform, assignment, spec, app)?,
        };
        let id = self.next_task.fetch_add(1, Ordering::Relaxed);
        let mut task = Task::created(id, argv, env, workdir);
        if !spec.dry_run {
            task.start(spec.env_script.as_deref());
        }
        Ok(task)
    }
}
