use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ResourceError;

/// Environment variable naming a known platform.
pub const PLATFORM_ENV_VAR: &str = "DYNENS_PLATFORM";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpiRunner {
    Mpich,
    Openmpi,
    Srun,
    Jsrun,
    Aprun,
}

impl MpiRunner {
    pub fn default_executable(self) -> &'static str {
        match self {
            MpiRunner::Mpich => "mpiexec",
            MpiRunner::Openmpi => "mpirun",
            MpiRunner::Srun => "srun",
            MpiRunner::Jsrun => "jsrun",
            MpiRunner::Aprun => "aprun",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpuSettingType {
    /// Export the device list in the environment variable `gpu_setting_name`.
    Env,
    /// Let the runner place GPUs (`srun --gpus-per-node`).
    RunnerDefault,
    /// Pass `<gpu_setting_name> <gpus per node>` on the runner command line.
    OptionGpusPerNode,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlatformSpec {
    pub mpi_runner: MpiRunner,
    pub runner_name: String,
    pub cores_per_node: u32,
    pub logical_cores_per_node: u32,
    pub gpus_per_node: u32,
    pub tiles_per_gpu: u32,
    pub gpu_setting_type: GpuSettingType,
    pub gpu_setting_name: String,
    pub gpu_env_fallback: Option<String>,
    pub scheduler_match_slots: bool,
}

impl PlatformSpec {
    pub fn validate(&self) -> Result<(), ResourceError> {
        let bad = |m: &str| Err(ResourceError::InvalidPlatform(m.to_string()));
        if self.runner_name.trim().is_empty() {
            return bad("runner_name is empty");
        }
        if self.cores_per_node == 0 {
            return bad("cores_per_node must be positive");
        }
        if self.cores_per_node > self.logical_cores_per_node {
            return bad("cores_per_node exceeds logical_cores_per_node");
        }
        if self.tiles_per_gpu == 0 {
            return bad("tiles_per_gpu must be at least 1");
        }
        if matches!(
            self.gpu_setting_type,
            GpuSettingType::Env | GpuSettingType::OptionGpusPerNode
        ) && self.gpu_setting_name.trim().is_empty()
        {
            return bad("gpu_setting_type requires a non-empty gpu_setting_name");
        }
        Ok(())
    }
}

/// Every field optional; set fields win over table entries and detection.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformOverrides {
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

pub const KNOWN_PLATFORMS: [&str; 3] = ["aurora", "frontier", "generic"];

/// Table entry for a known platform, as a partial spec.
pub fn known_platform(name: &str) -> Option<PlatformOverrides> {
    match name.to_ascii_lowercase().as_str() {
        "aurora" => Some(PlatformOverrides {
            mpi_runner: Some(MpiRunner::Mpich),
            runner_name: Some("mpiexec".into()),
            cores_per_node: Some(104),
            logical_cores_per_node: Some(208),
            gpus_per_node: Some(6),
            tiles_per_gpu: Some(2),
            gpu_setting_type: Some(GpuSettingType::Env),
            gpu_setting_name: Some("ZE_AFFINITY_MASK".into()),
            gpu_env_fallback: None,
            scheduler_match_slots: Some(true),
        }),
        "frontier" => Some(PlatformOverrides {
            mpi_runner: Some(MpiRunner::Srun),
            runner_name: None,
            cores_per_node: Some(64),
            logical_cores_per_node: Some(128),
            gpus_per_node: Some(8),
            tiles_per_gpu: None,
            gpu_setting_type: Some(GpuSettingType::RunnerDefault),
            gpu_setting_name: None,
            gpu_env_fallback: Some("ROCR_VISIBLE_DEVICES".into()),
            scheduler_match_slots: Some(false),
        }),
        "generic" => Some(PlatformOverrides::default()),
        _ => None,
    }
}

fn on_path(env: &HashMap<String, String>, exe: &str) -> bool {
    env.get("PATH")
        .map(|p| {
            p.split(':')
                .filter(|d| !d.is_empty())
                .any(|d| Path::new(d).join(exe).is_file())
        })
        .unwrap_or(false)
}

fn count_devices(list: &str) -> u32 {
    list.split(',').filter(|s| !s.trim().is_empty()).count() as u32
}

/// What can be inferred from the environment alone.
fn detected(env: &HashMap<String, String>) -> PlatformOverrides {
    let mut d = PlatformOverrides::default();

    let scheduler_hint = if env.contains_key("SLURM_JOB_ID") {
        Some("srun")
    } else if env.contains_key("LSB_JOBID") {
        Some("jsrun")
    } else if env.contains_key("PBS_JOBID") || env.contains_key("COBALT_JOBID") {
        Some("aprun")
    } else {
        None
    };
    let mut candidates: Vec<&str> = Vec::new();
    candidates.extend(scheduler_hint);
    candidates.extend(["mpirun", "srun", "jsrun", "aprun", "mpiexec"]);
    if let Some(exe) = candidates.into_iter().find(|e| on_path(env, e)) {
        d.mpi_runner = Some(match exe {
            "srun" => MpiRunner::Srun,
            "jsrun" => MpiRunner::Jsrun,
            "aprun" => MpiRunner::Aprun,
            "mpirun" => MpiRunner::Openmpi,
            _ => MpiRunner::Mpich,
        });
        d.runner_name = Some(exe.to_string());
    }

    let cores = env
        .get("SLURM_CPUS_ON_NODE")
        .and_then(|v| v.parse::<u32>().ok());
    if let Some(c) = cores {
        d.cores_per_node = Some(c);
        d.logical_cores_per_node = Some(c);
    } else if let Ok(n) = std::thread::available_parallelism() {
        d.cores_per_node = Some(n.get() as u32);
        d.logical_cores_per_node = Some(n.get() as u32);
    }

    for var in ["ZE_AFFINITY_MASK", "ROCR_VISIBLE_DEVICES", "CUDA_VISIBLE_DEVICES"] {
        if let Some(list) = env.get(var) {
            d.gpus_per_node = Some(count_devices(list));
            d.gpu_setting_type = Some(GpuSettingType::Env);
            d.gpu_setting_name = Some(var.to_string());
            break;
        }
    }
    d
}

/// Resolves a platform spec field by field:
/// explicit override, then known-platform table, then detection, then the
/// generic default (MPICH runner, GPUs via `CUDA_VISIBLE_DEVICES`).
///
/// `known_name` falls back to [`PLATFORM_ENV_VAR`] in `env`.
pub fn detect_platform(
    env: &HashMap<String, String>,
    overrides: &PlatformOverrides,
    known_name: Option<&str>,
) -> Result<PlatformSpec, ResourceError> {
    let name = known_name
        .map(str::to_string)
        .or_else(|| env.get(PLATFORM_ENV_VAR).cloned());
    let table = match &name {
        Some(n) => known_platform(n).ok_or_else(|| ResourceError::UnknownPlatform {
            name: n.clone(),
            known: KNOWN_PLATFORMS.join(", "),
        })?,
        None => PlatformOverrides::default(),
    };
    let det = detected(env);
    let layers = [overrides, &table, &det];

    macro_rules! pick {
        ($field:ident) => {
            layers.iter().find_map(|l| l.$field.clone())
        };
    }

    let mpi_runner = pick!(mpi_runner).unwrap_or(MpiRunner::Mpich);
    // a runner name only carries over from the layer that chose the runner
    let runner_name = overrides
        .runner_name
        .clone()
        .or_else(|| {
            layers
                .iter()
                .find(|l| l.mpi_runner.is_some())
                .and_then(|l| l.runner_name.clone())
        })
        .unwrap_or_else(|| mpi_runner.default_executable().to_string());
    let cores_per_node = pick!(cores_per_node).unwrap_or(1);
    let logical = pick!(logical_cores_per_node).unwrap_or(cores_per_node);
    let gpu_setting_type = pick!(gpu_setting_type).unwrap_or(GpuSettingType::Env);
    let gpu_setting_name = pick!(gpu_setting_name).unwrap_or_else(|| {
        if gpu_setting_type == GpuSettingType::Env {
            "CUDA_VISIBLE_DEVICES".to_string()
        } else {
            String::new()
        }
    });

    let spec = PlatformSpec {
        mpi_runner,
        runner_name,
        cores_per_node,
        logical_cores_per_node: logical.max(cores_per_node),
        gpus_per_node: pick!(gpus_per_node).unwrap_or(0),
        tiles_per_gpu: pick!(tiles_per_gpu).unwrap_or(1),
        gpu_setting_type,
        gpu_setting_name,
        gpu_env_fallback: pick!(gpu_env_fallback),
        scheduler_match_slots: pick!(scheduler_match_slots).unwrap_or(true),
    };
    if let (Some(c), Some(l)) = (
        overrides.cores_per_node,
        overrides.logical_cores_per_node,
    ) {
        if c > l {
            return Err(ResourceError::InvalidPlatform(
                "cores_per_node override exceeds logical_cores_per_node override".into(),
            ));
        }
    }
    spec.validate()?;
    Ok(spec)
}
