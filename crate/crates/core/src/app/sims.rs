use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use crate::executor::{polling_loop, PollOutcome, SubmitSpec};
use crate::gp_generator::SyntheticObjective;
use crate::history::CalcStatus;
use crate::resources::Assignment;
use crate::runtime::{SimFn, SimOutput, UserError};

/// Name the stub app is registered under.
pub const STUB_APP: &str = "forces";

/// Euclidean norm of each record's `x`.
pub fn sim_norm() -> SimFn {
    Arc::new(|recs, _ctx| {
        Ok(SimOutput::completed(
            recs.iter()
                .map(|r| r.x.iter().map(|v| v * v).sum::<f64>().sqrt())
                .collect(),
        ))
    })
}

/// Evaluates `obj` at `x` mapped from `[lb, ub]` onto the unit box.
pub fn sim_synthetic(obj: SyntheticObjective, lb: Vec<f64>, ub: Vec<f64>) -> SimFn {
    Arc::new(move |recs, _ctx| {
        Ok(SimOutput::completed(
            recs.iter().map(|r| obj.eval(&to_unit(&r.x, &lb, &ub))).collect(),
        ))
    })
}

pub(crate) fn to_unit(x: &[f64], lb: &[f64], ub: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lb.iter().zip(ub))
        .map(|(v, (l, u))| (v - l) / (u - l))
        .collect()
}

/// The last whitespace-separated value in a `forces.stat` file.
pub fn read_final_energy(path: &Path) -> Result<f64, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let last = text
        .split_whitespace()
        .last()
        .ok_or_else(|| format!("{} is empty", path.display()))?;
    last.parse()
        .map_err(|_| format!("{}: final value {last:?} is not a number", path.display()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct StubParams {
    pub steps: u32,
    pub sleep: f64,
    pub timeout: Option<Duration>,
    pub poll_interval: Duration,
    /// Print launch lines instead of starting processes. Records come back
    /// failed with NaN.
    pub dry_run: bool,
}

/// Runs the stub app once per record with `int(x[0])` particles (at least
/// 2). When the worker's assignment holds GPUs, one rank is started per
/// GPU. Killed or failed runs report NaN.
pub fn sim_stub_app(p: StubParams) -> SimFn {
    Arc::new(move |recs, ctx| {
        let exe = ctx
            .executor
            .ok_or_else(|| UserError::from("stub_app needs an executor"))?;
        let local = Assignment::local(1);
        let assignment = ctx.assignment.unwrap_or(&local);
        let workdir = ctx.workdir_or_cwd();
        let mut f = Vec::with_capacity(recs.len());
        let mut status = CalcStatus::Completed;
        for r in recs {
            let particles = (r.x[0] as i64).max(2);
            let mut args = format!("{particles} {}", p.steps);
            if p.sleep > 0.0 {
                args.push_str(&format!(" {}", p.sleep));
            }
            let mut spec = SubmitSpec::new(STUB_APP).args(args);
            if assignment.total_gpus > 0 {
                spec.auto_assign_gpus = true;
                spec.match_procs_to_gpus = true;
            }
            spec.dry_run = p.dry_run;
            let mut task = exe.submit(&spec, assignment, &workdir)?;
            if p.dry_run {
                let env: Vec<String> =
                    task.env_additions.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let prefix = if env.is_empty() { String::new() } else { env.join(" ") + " " };
                println!("[sim {}] {prefix}{}", r.sim_id, task.launch_line.join(" "));
                f.push(f64::NAN);
                status = CalcStatus::Failed;
                continue;
            }
            match polling_loop(&mut task, ctx.control, p.poll_interval, p.timeout)? {
                PollOutcome::Finished => match read_final_energy(&workdir.join("forces.stat")) {
                    Ok(v) => f.push(v),
                    Err(e) => {
                        log::warn!("sim {}: {e}", r.sim_id);
                        f.push(f64::NAN);
                        status = CalcStatus::Failed;
                    }
                },
                PollOutcome::Failed => {
                    log::warn!(
                        "sim {}: stub failed ({})",
                        r.sim_id,
                        task.diagnostic.as_deref().unwrap_or("nonzero exit")
                    );
                    f.push(f64::NAN);
                    status = CalcStatus::Failed;
                }
                outcome => {
                    log::info!("sim {}: {outcome:?}", r.sim_id);
                    f.push(f64::NAN);
                    if status == CalcStatus::Completed {
                        status = CalcStatus::Killed;
                    }
                }
            }
        }
        Ok(SimOutput { f, status })
    })
}
