//! Run configuration file (TOML).
//!
//! ```toml
//! version = 1
//! nworkers = 4
//! comms = "local"              # or "gen_on_manager"
//! seed = 0
//! history_path = "history.json"
//!
//! [exit]
//! sim_max = 500
//!
//! [gen]
//! function = "persistent_uniform"
//! [gen.user]
//! gen_batch_size = 50
//! lb = [-3.0, -2.0]
//! ub = [3.0, 2.0]
//!
//! [sim]
//! function = "norm"
//!
//! [alloc]
//! function = "only_persistent_gens"
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::registry::{self, GenKind};
use super::AppError;
use crate::resources::{GpuSettingType, MpiRunner, PlatformOverrides};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CommsSetting {
    #[default]
    Local,
    GenOnManager,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopValSetting {
    pub field: String,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExitSettings {
    pub sim_max: Option<usize>,
    pub gen_max: Option<usize>,
    /// Seconds.
    pub wallclock_max: Option<f64>,
    pub stop_val: Option<StopValSetting>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct PlatformSettings {
    /// Known platform preset, e.g. `"frontier"`.
    pub name: Option<String>,
    pub mpi_runner: Option<MpiRunner>,
    pub runner_name: Option<String>,
    pub cores_per_node: Option<u32>,
    pub logical_cores_per_node: Option<u32>,
    pub gpus_per_node: Option<u32>,
    pub tiles_per_gpu: Option<u32>,
    pub gpu_setting_type: Option<GpuSettingType>,
    pub gpu_setting_name: Option<String>,
    pub gpu_env_fallback: Option<String>,
    pub scheduler_match_slots: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InventorySource {
    #[default]
    Detected,
    File,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResourceSettings {
    #[serde(default)]
    pub inventory: InventorySource,
    pub inventory_file: Option<PathBuf>,
    #[serde(default)]
    pub use_tiles: bool,
    #[serde(default = "yes")]
    pub split2fit: bool,
    pub match_slots: Option<bool>,
}

fn yes() -> bool {
    true
}

/// A user-function block: registry name plus free-form parameters, which
/// the named function parses and checks itself.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionBlock {
    pub function: String,
    /// Record fields the function reads. Documentation only, but checked
    /// against the record layout.
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
    /// Must agree with the registered generator when given.
    pub persistent: Option<bool>,
    #[serde(default)]
    pub user: BTreeMap<String, toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AllocBlock {
    pub function: String,
    /// Forward results to a persistent generator as they return.
    #[serde(default, rename = "async")]
    pub async_mode: bool,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub nworkers: usize,
    #[serde(default)]
    pub comms: CommsSetting,
    #[serde(default)]
    pub seed: u64,
    pub ensemble_dir: Option<PathBuf>,
    pub history_path: Option<PathBuf>,
    pub dump_every: Option<usize>,
    #[serde(default = "yes")]
    pub abort_on_exception: bool,
    pub exit: ExitSettings,
    #[serde(default)]
    pub platform: PlatformSettings,
    pub resources: Option<ResourceSettings>,
    pub gen: FunctionBlock,
    pub sim: FunctionBlock,
    pub alloc: AllocBlock,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

const RECORD_FIELDS: [&str; 5] = ["x", "f", "priority", "num_procs", "num_gpus"];

impl RunConfig {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks everything that can be checked without starting workers.
    pub fn validate(&self) -> Result<(), AppError> {
        let field = |name: &str, msg: String| Err(AppError::field(name, msg));
        if self.version != SCHEMA_VERSION {
            return field(
                "version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.version),
            );
        }
        if self.nworkers == 0 {
            return field("nworkers", "must be at least 1".into());
        }
        if self.dump_every == Some(0) {
            return field("dump_every", "must be positive".into());
        }
        let e = &self.exit;
        if e.sim_max.is_none() && e.gen_max.is_none() && e.wallclock_max.is_none() && e.stop_val.is_none() {
            return field("exit", "set at least one of sim_max, gen_max, wallclock_max, stop_val".into());
        }
        if let Some(w) = e.wallclock_max {
            if !(w.is_finite() && w >= 0.0) {
                return field("exit.wallclock_max", format!("must be a non-negative number of seconds, got {w}"));
            }
        }
        if let Some(sv) = &e.stop_val {
            let ok = sv.field == "f"
                || sv.field.strip_prefix('x').is_some_and(|i| i.parse::<usize>().is_ok());
            if !ok {
                return field("exit.stop_val.field", format!("expected \"f\" or \"x<i>\", got {:?}", sv.field));
            }
        }
        for (block, b) in [("gen", &self.gen), ("sim", &self.sim)] {
            for (list, names) in [("inputs", &b.inputs), ("outputs", &b.outputs)] {
                if let Some(bad) = names.iter().find(|n| !RECORD_FIELDS.contains(&n.as_str())) {
                    return field(
                        &format!("{block}.{list}"),
                        format!("unknown record field {bad:?} (fields: {})", RECORD_FIELDS.join(", ")),
                    );
                }
            }
        }
        if let Some(r) = &self.resources {
            if r.inventory == InventorySource::File && r.inventory_file.is_none() {
                return field("resources.inventory_file", "required when inventory = \"file\"".into());
            }
        }

        let gen = registry::gen_entry(&self.gen.function)?;
        registry::sim_entry(&self.sim.function)?;
        let alloc = registry::alloc_entry(&self.alloc.function)?;
        let persistent = gen.kind == GenKind::Persistent;
        if let Some(p) = self.gen.persistent {
            if p != persistent {
                return field(
                    "gen.persistent",
                    format!("generator {:?} is {}persistent", self.gen.function, if persistent { "" } else { "not " }),
                );
            }
        }
        if alloc.persistent != persistent {
            return field(
                "alloc.function",
                format!(
                    "allocator {:?} does not drive a {} generator; use {:?}",
                    self.alloc.function,
                    if persistent { "persistent" } else { "one-shot" },
                    if persistent { "only_persistent_gens" } else { "give_sim_work_first" }
                ),
            );
        }
        if self.alloc.async_mode && !alloc.persistent {
            return field("alloc.async", "only applies to only_persistent_gens".into());
        }
        if self.comms == CommsSetting::GenOnManager && !persistent {
            return field("comms", "gen_on_manager needs a persistent generator".into());
        }
        if self.comms == CommsSetting::Local && persistent && self.nworkers < 2 {
            return field(
                "nworkers",
                "a worker-hosted persistent generator needs at least 2 workers".into(),
            );
        }
        // Parses both user blocks; errors name the offending key.
        registry::GenParams::parse(&self.gen)?;
        registry::SimParams::parse(&self.sim)?;
        Ok(())
    }

    pub fn platform_overrides(&self) -> PlatformOverrides {
        let p = &self.platform;
        PlatformOverrides {
            mpi_runner: p.mpi_runner,
            runner_name: p.runner_name.clone(),
            cores_per_node: p.cores_per_node,
            logical_cores_per_node: p.logical_cores_per_node,
            gpus_per_node: p.gpus_per_node,
            tiles_per_gpu: p.tiles_per_gpu,
            gpu_setting_type: p.gpu_setting_type,
            gpu_setting_name: p.gpu_setting_name.clone(),
            gpu_env_fallback: p.gpu_env_fallback.clone(),
            scheduler_match_slots: p.scheduler_match_slots,
        }
    }
}

/// Parses a config document. `base_dir` anchors relative paths.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<RunConfig, AppError> {
    let mut cfg: RunConfig = toml::from_str(text).map_err(|e| AppError::Parse(e.to_string()))?;
    cfg.base_dir = base_dir.to_path_buf();
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<RunConfig, AppError> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_config(&text, &base)
}
