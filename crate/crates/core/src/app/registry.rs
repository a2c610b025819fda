//! Names a config file can refer to, and the parameters each one takes.

use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Deserialize;

use super::config::FunctionBlock;
use super::AppError;
use crate::gp_generator::SelectionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GenKind {
    Persistent,
    OneShot,
}

#[derive(Debug, Clone, Copy)]
pub struct GenEntry {
    pub name: &'static str,
    pub kind: GenKind,
    pub summary: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct SimEntry {
    pub name: &'static str,
    pub summary: &'static str,
}

#[derive(Debug, Clone, Copy)]
pub struct AllocEntry {
    pub name: &'static str,
    /// Drives a persistent generator.
    pub persistent: bool,
}

pub const GENERATORS: [GenEntry; 4] = [
    GenEntry {
        name: "persistent_uniform",
        kind: GenKind::Persistent,
        summary: "uniform batches in [lb, ub], a new batch per returned batch",
    },
    GenEntry {
        name: "persistent_gpu_counts",
        kind: GenKind::Persistent,
        summary: "persistent_uniform plus a GPU count per point from x[0]",
    },
    GenEntry {
        name: "gp_online",
        kind: GenKind::Persistent,
        summary: "Gaussian-process active learning on a candidate grid",
    },
    GenEntry {
        name: "uniform_sample",
        kind: GenKind::OneShot,
        summary: "one uniform batch per call",
    },
];

pub const SIMULATORS: [SimEntry; 3] = [
    SimEntry {
        name: "norm",
        summary: "Euclidean norm of x",
    },
    SimEntry {
        name: "synthetic",
        summary: "smooth bump objective, x rescaled from [lb, ub] to the unit box",
    },
    SimEntry {
        name: "stub_app",
        summary: "launches forces_stub through the executor, f = final energy",
    },
];

pub const ALLOCATORS: [AllocEntry; 2] = [
    AllocEntry {
        name: "give_sim_work_first",
        persistent: false,
    },
    AllocEntry {
        name: "only_persistent_gens",
        persistent: true,
    },
];

fn unknown(field: &str, kind: &str, name: &str, known: &[&str]) -> AppError {
    AppError::field(
        field,
        format!("unknown {kind} {name:?}; registered: {}", known.join(", ")),
    )
}

pub fn gen_entry(name: &str) -> Result<&'static GenEntry, AppError> {
    GENERATORS.iter().find(|e| e.name == name).ok_or_else(|| {
        unknown("gen.function", "generator", name, &GENERATORS.map(|e| e.name))
    })
}

pub fn sim_entry(name: &str) -> Result<&'static SimEntry, AppError> {
    SIMULATORS.iter().find(|e| e.name == name).ok_or_else(|| {
        unknown("sim.function", "simulator", name, &SIMULATORS.map(|e| e.name))
    })
}

pub fn alloc_entry(name: &str) -> Result<&'static AllocEntry, AppError> {
    ALLOCATORS.iter().find(|e| e.name == name).ok_or_else(|| {
        unknown("alloc.function", "allocator", name, &ALLOCATORS.map(|e| e.name))
    })
}

fn user_params<T: DeserializeOwned>(block: &FunctionBlock, prefix: &str) -> Result<T, AppError> {
    let table: toml::Table = block.user.clone().into_iter().collect();
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| AppError::field(&format!("{prefix}.user"), e.message()))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformParams {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub gen_batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpuCountParams {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub gen_batch_size: usize,
    pub max_gpus: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModeSetting {
    #[default]
    Online,
    UniformRandom,
}

impl From<ModeSetting> for SelectionMode {
    fn from(m: ModeSetting) -> Self {
        match m {
            ModeSetting::Online => SelectionMode::Online,
            ModeSetting::UniformRandom => SelectionMode::UniformRandom,
        }
    }
}

fn fifty() -> usize {
    50
}

fn two_hundred() -> usize {
    200
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpParams {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub gen_batch_size: usize,
    #[serde(default = "fifty")]
    pub points_per_dim: usize,
    #[serde(default = "yes")]
    pub allow_local: bool,
    #[serde(default)]
    pub mode: ModeSetting,
    /// Defaults to `metrics.csv` in the output directory.
    pub metrics_path: Option<PathBuf>,
    pub max_batches: Option<usize>,
    /// Size of the held-out test set. Only used with the `synthetic`
    /// simulator, whose values can be computed in-process.
    #[serde(default = "two_hundred")]
    pub test_points: usize,
}

/// Parsed `[gen.user]` block.
#[derive(Debug, Clone, PartialEq)]
pub enum GenParams {
    Uniform(UniformParams),
    GpuCounts(GpuCountParams),
    Gp(GpParams),
}

impl GenParams {
    pub fn parse(block: &FunctionBlock) -> Result<Self, AppError> {
        let p = match gen_entry(&block.function)?.name {
            "persistent_uniform" | "uniform_sample" => Self::Uniform(user_params(block, "gen")?),
            "persistent_gpu_counts" => Self::GpuCounts(user_params(block, "gen")?),
            "gp_online" => Self::Gp(user_params(block, "gen")?),
            other => unreachable!("generator {other} is registered but not parsed"),
        };
        let (lb, ub) = p.bounds();
        if lb.is_empty() {
            return Err(AppError::field("gen.user.lb", "must not be empty"));
        }
        if lb.len() != ub.len() {
            return Err(AppError::field(
                "gen.user.ub",
                format!("has {} entries but lb has {}", ub.len(), lb.len()),
            ));
        }
        if let Some(d) = (0..lb.len()).find(|&d| !(lb[d].is_finite() && ub[d].is_finite() && lb[d] < ub[d])) {
            return Err(AppError::field(
                "gen.user.ub",
                format!("entry {d}: need finite lb < ub, got [{}, {}]", lb[d], ub[d]),
            ));
        }
        if p.batch_size() == 0 {
            return Err(AppError::field("gen.user.gen_batch_size", "must be at least 1"));
        }
        match &p {
            Self::GpuCounts(g) if g.max_gpus == 0 => {
                return Err(AppError::field("gen.user.max_gpus", "must be at least 1"));
            }
            Self::Gp(g) => {
                if g.points_per_dim < 2 {
                    return Err(AppError::field("gen.user.points_per_dim", "must be at least 2"));
                }
                if g.max_batches == Some(0) {
                    return Err(AppError::field("gen.user.max_batches", "must be at least 1"));
                }
                if g.test_points == 0 {
                    return Err(AppError::field("gen.user.test_points", "must be at least 1"));
                }
            }
            _ => {}
        }
        Ok(p)
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        match self {
            Self::Uniform(p) => (&p.lb, &p.ub),
            Self::GpuCounts(p) => (&p.lb, &p.ub),
            Self::Gp(p) => (&p.lb, &p.ub),
        }
    }

    pub fn batch_size(&self) -> usize {
        match self {
            Self::Uniform(p) => p.gen_batch_size,
            Self::GpuCounts(p) => p.gen_batch_size,
            Self::Gp(p) => p.gen_batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LauncherSetting {
    #[default]
    Mpi,
    Direct,
}

fn ten() -> u32 {
    10
}

fn tenth() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StubAppParams {
    /// Defaults to the `forces_stub` binary next to the running executable.
    pub app_path: Option<PathBuf>,
    #[serde(default = "ten")]
    pub steps: u32,
    /// Seconds the stub sleeps in total.
    #[serde(default)]
    pub sleep: f64,
    /// Seconds before a running stub is killed.
    pub timeout: Option<f64>,
    #[serde(default = "tenth")]
    pub poll_interval: f64,
    #[serde(default)]
    pub launcher: LauncherSetting,
    #[serde(default)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SyntheticParams {
    #[serde(default)]
    pub objective_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct NoParams {}

/// Parsed `[sim.user]` block.
#[derive(Debug, Clone, PartialEq)]
pub enum SimParams {
    Norm,
    Synthetic(SyntheticParams),
    StubApp(StubAppParams),
}

impl SimParams {
    pub fn parse(block: &FunctionBlock) -> Result<Self, AppError> {
        let p = match sim_entry(&block.function)?.name {
            "norm" => {
                let _: NoParams = user_params(block, "sim")?;
                Self::Norm
            }
            "synthetic" => Self::Synthetic(user_params(block, "sim")?),
            "stub_app" => Self::StubApp(user_params(block, "sim")?),
            other => unreachable!("simulator {other} is registered but not parsed"),
        };
        if let Self::StubApp(s) = &p {
            if !(s.sleep.is_finite() && s.sleep >= 0.0) {
                return Err(AppError::field("sim.user.sleep", "must be a non-negative number of seconds"));
            }
            if !(s.poll_interval.is_finite() && s.poll_interval > 0.0) {
                return Err(AppError::field("sim.user.poll_interval", "must be positive"));
            }
            if s.timeout.is_some_and(|t| !(t.is_finite() && t > 0.0)) {
                return Err(AppError::field("sim.user.timeout", "must be positive"));
            }
        }
        Ok(p)
    }
}
