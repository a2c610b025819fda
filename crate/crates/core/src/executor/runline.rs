use std::collections::BTreeMap;
use std::path::Path;

use super::{ExecutorError, SubmitSpec};
use crate::resources::{Assignment, GpuSettingType, MpiRunner, PlatformSpec};

const DEFAULT_GPU_ENV: &str = "CUDA_VISIBLE_DEVICES";

type RunLine = (Vec<String>, BTreeMap<String, String>);

struct Counts {
    procs: u32,
    nodes: u32,
    ppn: u32,
    /// Per-node GPU ids to expose; empty when the task uses no GPUs.
    gpus: Vec<Vec<u32>>,
}

fn counts(assignment: &Assignment, spec: &SubmitSpec) -> Result<Counts, ExecutorError> {
    let invalid = |m: String| Err(ExecutorError::InvalidSubmit(m));
    if spec.auto_assign_gpus && spec.request.num_gpus.is_some() {
        return invalid("auto_assign_gpus cannot be combined with an explicit num_gpus".into());
    }
    if assignment.nodes.is_empty() {
        return invalid("assignment has no nodes".into());
    }
    let nodes = assignment.nodes.len() as u32;
    let use_gpus = spec.auto_assign_gpus || spec.request.num_gpus.is_some_and(|g| g > 0);
    let gpus: Vec<Vec<u32>> = if use_gpus {
        assignment.nodes.iter().map(|n| n.gpu_ids.clone()).collect()
    } else {
        Vec::new()
    };
    let total_gpus: u32 = gpus.iter().map(|g| g.len() as u32).sum();
    let procs = if spec.match_procs_to_gpus {
        if total_gpus == 0 {
            return invalid("match_procs_to_gpus but the assignment holds no GPUs".into());
        }
        total_gpus
    } else {
        spec.request.num_procs.unwrap_or(assignment.total_procs).max(1)
    };
    if procs % nodes != 0 {
        return invalid(format!("{procs} procs do not split evenly over {nodes} nodes"));
    }
    Ok(Counts {
        procs,
        nodes,
        ppn: procs / nodes,
        gpus,
    })
}

fn gpus_per_node(gpus: &[Vec<u32>]) -> Result<u32, ExecutorError> {
    let first = gpus.first().map_or(0, Vec::len);
    if gpus.iter().any(|g| g.len() != first) {
        return Err(ExecutorError::NonUniformGpus(describe(gpus)));
    }
    Ok(first as u32)
}

fn uniform_ids(gpus: &[Vec<u32>]) -> Result<String, ExecutorError> {
    if gpus.windows(2).any(|w| w[0] != w[1]) {
        return Err(ExecutorError::NonUniformGpus(describe(gpus)));
    }
    Ok(gpus[0]
        .iter()
        .map(u32::to_string)
        .collect::<Vec<_>>()
        .join(","))
}

fn describe(gpus: &[Vec<u32>]) -> String {
    gpus.iter()
        .map(|g| format!("{g:?}"))
        .collect::<Vec<_>>()
        .join(" vs ")
}

fn split_args(s: Option<&str>) -> impl Iterator<Item = String> + '_ {
    s.unwrap_or("").split_whitespace().map(str::to_string)
}

/// Builds the runner argv and environment additions for launching
/// `app_path` on `assignment`. Pure: no files or processes are touched.
///
/// Runner options come first, then GPU options, then `extra_args`, then
/// the app and its arguments:
///
/// | runner  | options                                           |
/// |---------|---------------------------------------------------|
/// | mpich   | `-n P --ppn PPN`                                  |
/// | openmpi | `-np P --npernode PPN`                            |
/// | srun    | `-n P --nodes N --ntasks-per-node PPN`            |
/// | aprun   | `-n P -N PPN`                                     |
/// | jsrun   | `-n P`                                            |
pub fn build_runline(
    platform: &PlatformSpec,
    assignment: &Assignment,
    spec: &SubmitSpec,
    app_path: &Path,
) -> Result<RunLine, ExecutorError> {
    let c = counts(assignment, spec)?;
    let mut argv = vec![platform.runner_name.clone()];
    let p = c.procs.to_string();
    let ppn = c.ppn.to_string();
    let opts: Vec<String> = match platform.mpi_runner {
        MpiRunner::Mpich => vec!["-n".into(), p, "--ppn".into(), ppn],
        MpiRunner::Openmpi => vec!["-np".into(), p, "--npernode".into(), ppn],
        MpiRunner::Srun => vec![
            "-n".into(),
            p,
            "--nodes".into(),
            c.nodes.to_string(),
            "--ntasks-per-node".into(),
            ppn,
        ],
        MpiRunner::Aprun => vec!["-n".into(), p, "-N".into(), ppn],
        MpiRunner::Jsrun => vec!["-n".into(), p],
    };
    argv.extend(opts);

    let mut env = BTreeMap::new();
    if !c.gpus.is_empty() && c.gpus.iter().any(|g| !g.is_empty()) {
        match platform.gpu_setting_type {
            GpuSettingType::Env => {
                env.insert(platform.gpu_setting_name.clone(), uniform_ids(&c.gpus)?);
            }
            GpuSettingType::RunnerDefault if platform.mpi_runner == MpiRunner::Srun => {
                argv.push("--gpus-per-node".into());
                argv.push(gpus_per_node(&c.gpus)?.to_string());
            }
            GpuSettingType::RunnerDefault => {
                // no runner-native GPU flag: fall back to the environment
                let name = platform
                    .gpu_env_fallback
                    .clone()
                    .unwrap_or_else(|| DEFAULT_GPU_ENV.to_string());
                env.insert(name, uniform_ids(&c.gpus)?);
            }
            GpuSettingType::OptionGpusPerNode => {
                argv.push(platform.gpu_setting_name.clone());
                argv.push(gpus_per_node(&c.gpus)?.to_string());
            }
        }
    }
    argv.extend(split_args(spec.extra_args.as_deref()));
    argv.push(app_path.to_string_lossy().into_owned());
    argv.extend(split_args(Some(&spec.app_args)));
    Ok((argv, env))
}

/// Launch line when the runner is bypassed: the app runs as a single
/// process and GPUs are selected through the environment (the platform's
/// env setting, else its fallback variable, else `CUDA_VISIBLE_DEVICES`).
pub(crate) fn build_direct(
    platform: &PlatformSpec,
    assignment: &Assignment,
    spec: &SubmitSpec,
    app_path: &Path,
) -> Result<RunLine, ExecutorError> {
    let c = counts(assignment, spec)?;
    let mut env = BTreeMap::new();
    if c.gpus.iter().any(|g| !g.is_empty()) {
        let name = match platform.gpu_setting_type {
            GpuSettingType::Env => platform.gpu_setting_name.clone(),
            _ => platform
                .gpu_env_fallback
                .clone()
                .unwrap_or_else(|| DEFAULT_GPU_ENV.to_string()),
        };
        env.insert(name, uniform_ids(&c.gpus)?);
    }
    let mut argv = vec![app_path.to_string_lossy().into_owned()];
    argv.extend(split_args(Some(&spec.app_args)));
    Ok((argv, env))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resources::{detect_platform, NodeAssignment, PlatformOverrides};

    fn platform(name: &str) -> PlatformSpec {
        detect_platform(&Default::default(), &PlatformOverrides::default(), Some(name)).unwrap()
    }

    fn one_node(procs: u32, gpus: u32) -> Assignment {
        Assignment {
            id: 1,
            nodes: vec![NodeAssignment {
                node_index: 0,
                node: "n0".into(),
                slots: (0..gpus.max(1) as usize).collect(),
                gpu_ids: (0..gpus).collect(),
                procs,
            }],
            rset_ids: vec![],
            total_procs: procs,
            total_gpus: gpus,
        }
    }

    fn gpu_spec() -> SubmitSpec {
        SubmitSpec {
            app_name: "forces".into(),
            auto_assign_gpus: true,
            match_procs_to_gpus: true,
            ..Default::default()
        }
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn frontier_golden() {
        let (argv, env) =
            build_runline(&platform("frontier"), &one_node(8, 8), &gpu_spec(), Path::new("/a/forces"))
                .unwrap();
        assert_eq!(
            argv,
            s(&["srun", "-n", "8", "--nodes", "1", "--ntasks-per-node", "8", "--gpus-per-node", "8", "/a/forces"])
        );
        assert!(env.is_empty());
    }

    #[test]
    fn aurora_golden() {
        let (argv, env) =
            build_runline(&platform("aurora"), &one_node(6, 6), &gpu_spec(), Path::new("/a/forces"))
                .unwrap();
        assert_eq!(argv, s(&["mpiexec", "-n", "6", "--ppn", "6", "/a/forces"]));
        assert_eq!(env.get("ZE_AFFINITY_MASK").unwrap(), "0,1,2,3,4,5");
        assert_eq!(env.len(), 1);
    }

    #[test]
    fn generic_single_gpu() {
        let (_, env) =
            build_runline(&platform("generic"), &one_node(1, 1), &gpu_spec(), Path::new("app"))
                .unwrap();
        assert_eq!(env.get("CUDA_VISIBLE_DEVICES").map(String::as_str), Some("0"));
    }

    #[test]
    fn extra_args_before_app() {
        let spec = SubmitSpec {
            app_name: "a".into(),
            app_args: "100 10  0.5".into(),
            extra_args: Some("--bind-to core".into()),
            ..Default::default()
        };
        let (argv, env) = build_runline(&platform("generic"), &one_node(4, 0), &spec, Path::new("app"))
            .unwrap();
        assert_eq!(
            argv,
            s(&["mpiexec", "-n", "4", "--ppn", "4", "--bind-to", "core", "app", "100", "10", "0.5"])
        );
        assert!(env.is_empty());
    }

    #[test]
    fn env_mode_needs_matching_ids() {
        let mut a = one_node(2, 2);
        let mut second = a.nodes[0].clone();
        second.node_index = 1;
        second.gpu_ids = vec![2, 3];
        a.nodes.push(second);
        a.total_procs = 4;
        a.total_gpus = 4;
        let err = build_runline(&platform("aurora"), &a, &gpu_spec(), Path::new("x")).unwrap_err();
        assert!(matches!(err, ExecutorError::NonUniformGpus(_)));
        // the runner-native form only needs equal counts
        let (argv, _) = build_runline(&platform("frontier"), &a, &gpu_spec(), Path::new("x")).unwrap();
        assert_eq!(&argv[1..9], &s(&["-n", "4", "--nodes", "2", "--ntasks-per-node", "2", "--gpus-per-node", "2"])[..]);
    }

    #[test]
    fn auto_assign_with_explicit_gpus_rejected() {
        let mut spec = gpu_spec();
        spec.request.num_gpus = Some(2);
        assert!(matches!(
            build_runline(&platform("generic"), &one_node(2, 2), &spec, Path::new("x")),
            Err(ExecutorError::InvalidSubmit(_))
        ));
    }

    #[test]
    fn direct_uses_fallback_variable() {
        let (argv, env) =
            build_direct(&platform("frontier"), &one_node(2, 2), &gpu_spec().clone(), Path::new("/b/app"))
                .unwrap();
        assert_eq!(argv, s(&["/b/app"]));
        assert_eq!(env.get("ROCR_VISIBLE_DEVICES").map(String::as_str), Some("0,1"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn procs_match_gpu_total(nodes in 1usize..4, per in 1u32..8, runner in 0usize..5) {
                let runners = ["mpich", "openmpi", "srun", "aprun", "jsrun"];
                let mut p = platform("generic");
                p.mpi_runner = serde_json::from_str(&format!("\"{}\"", runners[runner])).unwrap();
                p.runner_name = p.mpi_runner.default_executable().into();
                let a = Assignment {
                    id: 1,
                    nodes: (0..nodes).map(|i| NodeAssignment {
                        node_index: i, node: format!("n{i}"),
                        slots: (0..per as usize).collect(), gpu_ids: (0..per).collect(), procs: per,
                    }).collect(),
                    rset_ids: vec![], total_procs: per * nodes as u32, total_gpus: per * nodes as u32,
                };
                let (argv, _) = build_runline(&p, &a, &gpu_spec(), Path::new("x")).unwrap();
                let flag = if runners[runner] == "openmpi" { "-np" } else { "-n" };
                let i = argv.iter().position(|t| t == flag).unwrap();
                prop_assert_eq!(argv[i + 1].parse::<u32>().unwrap(), a.total_gpus);
            }
        }
    }
}
