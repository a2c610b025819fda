use rand::Rng;

use crate::gp_generator::initial_sample;
use crate::history::NewPoint;
use crate::runtime::{GenFn, MessageTag, PersistentCtx, UserError};

/// GPUs requested for a point whose first coordinate is `x0`: the range
/// `[lb0, ub0]` is cut into `max_gpus` equal buckets and bucket `k`
/// (counting from 1) asks for `k` GPUs. `x0 == ub0` would land in bucket
/// `max_gpus + 1` and is clamped.
pub fn gpu_count(x0: f64, lb0: f64, ub0: f64, max_gpus: u32) -> u32 {
    let bucket_size = (ub0 - lb0) / max_gpus as f64;
    let k = ((x0 - lb0) / bucket_size) as i64 + 1;
    k.clamp(1, max_gpus as i64) as u32
}

/// Restart support shared by the uniform generators: burn the draws the
/// supplied history already used, and collect its outstanding results
/// first. Returns false if the ensemble stopped meanwhile.
fn resume(ctx: &mut PersistentCtx<'_>, dim: usize) -> Result<bool, UserError> {
    for _ in 0..ctx.h_in().len() * dim {
        let _: f64 = ctx.rng().random();
    }
    if ctx.h_in_outstanding() {
        let (tag, _) = ctx.recv()?;
        return Ok(tag == MessageTag::Result);
    }
    Ok(true)
}

fn uniform_loop(
    lb: Vec<f64>,
    ub: Vec<f64>,
    b: usize,
    tag_point: impl Fn(NewPoint) -> NewPoint + Send + Sync + 'static,
) -> GenFn {
    GenFn::persistent(move |ctx| {
        if !resume(ctx, lb.len())? {
            return Ok(());
        }
        loop {
            let batch = initial_sample(&lb, &ub, b, ctx.rng())
                .into_iter()
                .map(|x| tag_point(NewPoint::new(x)))
                .collect();
            let (tag, _) = ctx.send_recv(batch)?;
            if tag != MessageTag::Result {
                return Ok(());
            }
        }
    })
}

/// Sends `b` uniform points in `[lb, ub]` and a fresh batch every time
/// results come back, until told to stop.
pub fn persistent_uniform(lb: Vec<f64>, ub: Vec<f64>, b: usize) -> GenFn {
    uniform_loop(lb, ub, b, |p| p)
}

/// [`persistent_uniform`] with `num_gpus` set per point by [`gpu_count`].
pub fn persistent_with_gpu_counts(lb: Vec<f64>, ub: Vec<f64>, b: usize, max_gpus: u32) -> GenFn {
    let (lb0, ub0) = (lb[0], ub[0]);
    uniform_loop(lb, ub, b, move |p| {
        let g = gpu_count(p.x[0], lb0, ub0, max_gpus);
        p.with_gpus(g)
    })
}

/// One-shot variant: every call returns a new uniform batch.
pub fn uniform_sample(lb: Vec<f64>, ub: Vec<f64>, b: usize) -> GenFn {
    GenFn::one_shot(move |_h, rng| {
        Ok(initial_sample(&lb, &ub, b, rng)
            .into_iter()
            .map(NewPoint::new)
            .collect())
    })
}
