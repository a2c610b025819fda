//! Stand-in for an MPI particle code.
//!
//! Usage: `forces_stub <particles> <steps> [sleep-seconds]`
//!
//! Places particles deterministically on a unit cube, takes `steps`
//! relaxation steps of a soft pair potential and writes one
//! `step kinetic potential total` row per step to `forces.stat` in the
//! current directory. The last value of the file is the final energy.
//! The optional sleep is spread evenly over the steps.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::process::ExitCode;
use std::thread;
use std::time::Duration;

fn positions(n: usize) -> Vec<[f64; 3]> {
    // additive recurrence with irrational steps: well spread, reproducible
    const A: [f64; 3] = [0.618_033_988_749_895, 0.414_213_562_373_095, 0.732_050_807_568_877];
    (1..=n)
        .map(|i| {
            let mut p = [0.0; 3];
            for d in 0..3 {
                p[d] = (i as f64 * A[d]).fract();
            }
            p
        })
        .collect()
}

/// Soft-core pair energy and the resulting forces.
fn energy_and_forces(pos: &[[f64; 3]]) -> (f64, Vec<[f64; 3]>) {
    let mut e = 0.0;
    let mut f = vec![[0.0; 3]; pos.len()];
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let d: [f64; 3] = std::array::from_fn(|k| pos[i][k] - pos[j][k]);
            let r2 = d.iter().map(|x| x * x).sum::<f64>() + 0.01;
            e += 1.0 / r2;
            let scale = 2.0 / (r2 * r2);
            for k in 0..3 {
                f[i][k] += scale * d[k];
                f[j][k] -= scale * d[k];
            }
        }
    }
    (e, f)
}

fn run(particles: usize, steps: usize, sleep: f64) -> std::io::Result<()> {
    let mut pos = positions(particles);
    let mut vel = vec![[0.0f64; 3]; particles];
    let dt = 1e-5;
    let nap = if steps > 0 {
        Duration::from_secs_f64(sleep / steps as f64)
    } else {
        Duration::from_secs_f64(sleep)
    };
    let mut out = BufWriter::new(File::create("forces.stat")?);
    if steps == 0 {
        thread::sleep(nap);
    }
    for step in 0..steps {
        let (pot, f) = energy_and_forces(&pos);
        for i in 0..particles {
            for k in 0..3 {
                vel[i][k] += dt * f[i][k];
                pos[i][k] += dt * vel[i][k];
            }
        }
        let kin: f64 = vel.iter().flatten().map(|v| 0.5 * v * v).sum();
        writeln!(out, "{step} {kin:.12e} {pot:.12e} {:.12e}", kin + pot)?;
        out.flush()?;
        thread::sleep(nap);
    }
    if steps == 0 {
        let (pot, _) = energy_and_forces(&pos);
        writeln!(out, "0 0 {pot:.12e} {pot:.12e}")?;
    }
    out.flush()
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let parsed = match args.as_slice() {
        [p, s] => p.parse().ok().zip(s.parse().ok()).map(|(p, s)| (p, s, 0.0)),
        [p, s, t] => match (p.parse(), s.parse(), t.parse::<f64>()) {
            (Ok(p), Ok(s), Ok(t)) if t >= 0.0 => Some((p, s, t)),
            _ => None,
        },
        _ => None,
    };
    let Some((particles, steps, sleep)) = parsed else {
        eprintln!("usage: forces_stub <particles> <steps> [sleep-seconds]");
        return ExitCode::from(2);
    };
    match run(particles, steps, sleep) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("forces_stub: {e}");
            ExitCode::FAILURE
        }
    }
}
