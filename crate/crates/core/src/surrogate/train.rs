use rand::Rng;

use super::{GpModel, Hyperparams, SurrogateError};

/// Maximum BFGS steps for [`TrainMethod::Local`].
pub const LOCAL_MAX_STEPS: usize = 50;

/// BFGS steps spent refining each random restart.
const RESTART_STEPS: usize = 8;
/// BFGS steps for the final polish of the best restart.
const POLISH_STEPS: usize = 200;
/// Largest change of any log-hyperparameter in one step.
const MAX_LOG_STEP: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMethod {
    /// Seeded random restarts over the bounds box, each refined briefly,
    /// then the best one polished.
    Global { max_iter: usize },
    /// Refinement from the current hyperparameters.
    Local,
}

impl std::fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMethod::Global { max_iter } => write!(f, "global({max_iter})"),
            TrainMethod::Local => f.write_str("local"),
        }
    }
}

/// Box on the hyperparameters (natural scale).
#[derive(Debug, Clone, PartialEq)]
pub struct Bounds {
    pub signal_variance: (f64, f64),
    pub lengthscales: Vec<(f64, f64)>,
}

impl Bounds {
    /// Lengthscales within `[1e-2, 10] x range_d` and signal variance within
    /// `[1e-4, 1e4] x var(y)`. A zero range or variance counts as 1.
    pub fn from_ranges(ranges: &[f64], y_var: f64) -> Self {
        let unit = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
        let v = unit(y_var);
        Self {
            signal_variance: (1e-4 * v, 1e4 * v),
            lengthscales: ranges
                .iter()
                .map(|&r| (1e-2 * unit(r), 10.0 * unit(r)))
                .collect(),
        }
    }

    /// Default bounds from the model's training data.
    pub fn for_model(model: &GpModel) -> Self {
        let x = model.train_x();
        let ranges: Vec<f64> = (0..model.dim())
            .map(|d| {
                let col = x.column(d);
                if col.is_empty() {
                    0.0
                } else {
                    col.max() - col.min()
                }
            })
            .collect();
        Self::from_ranges(&ranges, variance(model.train_y().as_slice()))
    }

    fn log_box(&self) -> Vec<(f64, f64)> {
        std::iter::once(self.signal_variance)
            .chain(self.lengthscales.iter().copied())
            .map(|(lo, hi)| (lo.ln(), hi.ln()))
            .collect()
    }

    fn validate(&self, dim: usize) -> Result<(), SurrogateError> {
        let ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo.is_finite() && hi.is_finite() && lo <= hi;
        if self.lengthscales.len() != dim
            || !ok(self.signal_variance)
            || !self.lengthscales.iter().all(|&b| ok(b))
        {
            return Err(SurrogateError::InvalidHyperparams(format!(
                "bad bounds {self:?}"
            )));
        }
        Ok(())
    }
}

pub(crate) fn variance(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Negative log marginal likelihood and gradient in log space; an
/// infinite value marks a failed factorization.
fn objective(model: &GpModel, theta: &[f64]) -> (f64, Vec<f64>) {
    match model.log_marginal_likelihood(&Hyperparams::from_log(theta)) {
        Ok((l, g)) if l.is_finite() => (-l, g.into_iter().map(|v| -v).collect()),
        _ => (f64::INFINITY, vec![0.0; theta.len()]),
    }
}

fn project(theta: &mut [f64], bx: &[(f64, f64)]) {
    for (t, (lo, hi)) in theta.iter_mut().zip(bx) {
        *t = t.clamp(*lo, *hi);
    }
}

/// Coordinates pinned at a bound by a gradient pushing outward.
fn pinned(theta: &[f64], g: &[f64], bx: &[(f64, f64)]) -> Vec<bool> {
    theta
        .iter()
        .zip(g)
        .zip(bx)
        .map(|((t, g), (lo, hi))| (*t <= *lo && *g > 0.0) || (*t >= *hi && *g < 0.0))
        .collect()
}

/// Projected quasi-Newton minimization of the negative log likelihood over
/// the log box, starting at `theta` (already inside the box).
fn minimize(
    model: &GpModel,
    mut theta: Vec<f64>,
    bx: &[(f64, f64)],
    max_steps: usize,
) -> (Vec<f64>, f64) {
    let n = theta.len();
    let (mut f, mut g) = objective(model, &theta);
    if !f.is_finite() {
        return (theta, f);
    }
    let identity = |n| {
        let mut h = vec![vec![0.0; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        h
    };
    let mut h = identity(n);
    for _ in 0..max_steps {
        let fixed = pinned(&theta, &g, bx);
        let pg: f64 = g
            .iter()
            .zip(&fixed)
            .map(|(g, p)| if *p { 0.0 } else { g * g })
            .sum::<f64>()
            .sqrt();
        if pg < 1e-6 {
            break;
        }
        let direction = |h: &Vec<Vec<f64>>| -> Vec<f64> {
            (0..n)
                .map(|i| {
                    if fixed[i] {
                        0.0
                    } else {
                        -(0..n).filter(|&j| !fixed[j]).map(|j| h[i][j] * g[j]).sum::<f64>()
                    }
                })
                .collect()
        };
        let mut d = direction(&h);
        if d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() >= 0.0 {
            h = identity(n);
            d = direction(&h);
        }
        let biggest = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut t = if biggest > MAX_LOG_STEP {
            MAX_LOG_STEP / biggest
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = theta.iter().zip(&d).map(|(x, d)| x + t * d).collect();
            project(&mut cand, bx);
            let step: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let decrease: f64 = g.iter().zip(&step).map(|(g, s)| g * s).sum();
            let (fc, gc) = objective(model, &cand);
            if fc.is_finite() && fc <= f + 1e-4 * decrease {
                accepted = Some((cand, step, fc, gc));
                break;
            }
            t *= 0.5;
        }
        let Some((cand, s, fc, gc)) = accepted else {
            break;
        };
        let y: Vec<f64> = gc.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        if sy > 1e-12 {
            // inverse-Hessian BFGS update
            let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i][j] * y[j]).sum()).collect();
            let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
            let rho = 1.0 / sy;
            for i in 0..n {
                for j in 0..n {
                    h[i][j] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
                }
            }
        }
        let improvement = f - fc;
        theta = cand;
        f = fc;
        g = gc;
        if improvement.abs() <= 1e-12 * (1.0 + f.abs()) {
            break;
        }
    }
    (theta, f)
}

/// Fits the model's hyperparameters within `bounds`, never ending with a
/// lower likelihood than it started from.
pub fn train<R: Rng + ?Sized>(
    model: &mut GpModel,
    method: TrainMethod,
    bounds: &Bounds,
    rng: &mut R,
) -> Result<(), SurrogateError> {
    if model.is_empty() {
        return Err(SurrogateError::Untold);
    }
    bounds.validate(model.dim())?;
    let bx = bounds.log_box();
    let start = model.hyperparams().to_log();
    let (f_start, _) = objective(model, &start);
    let mut inside = start.clone();
    project(&mut inside, &bx);

    let (best, f_best) = match method {
        TrainMethod::Local => minimize(model, inside, &bx, LOCAL_MAX_STEPS),
        TrainMethod::Global { max_iter } => {
            let mut incumbent = objective(model, &inside).0;
            let mut best = inside;
            for _ in 0..max_iter.max(1) {
                let seed: Vec<f64> = bx.iter().map(|(lo, hi)| rng.random_range(*lo..=*hi)).collect();
                let (cand, fc) = minimize(model, seed, &bx, RESTART_STEPS);
                if fc < incumbent {
                    incumbent = fc;
                    best = cand;
                }
            }
            minimize(model, best, &bx, POLISH_STEPS)
        }
    };
    if f_best < f_start || !f_start.is_finite() {
        model.set_hyperparams(Hyperparams::from_log(&best))?;
    }
    warn_short_lengthscales(model, bounds);
    Ok(())
}

fn warn_short_lengthscales(model: &GpModel, bounds: &Bounds) {
    for (d, (l, (_, hi))) in model
        .hyperparams()
        .lengthscales
        .iter()
        .zip(&bounds.lengthscales)
        .enumerate()
    {
        // the upper bound is ten ranges
        let range = hi / 10.0;
        if *l < 0.1 * range {
            log::warn!(
                "lengthscale {l:.3e} in dimension {d} is under a tenth of the data range {range:.3e}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
        let u1: f64 = rng.random_range(f64::EPSILON..1.0);
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Draws y ~ GP(0, k) + noise at m random 1-D inputs.
    fn sample_gp(m: usize, s: f64, l: f64, noise: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random::<f64>() * 10.0]).collect();
        let mut prior = GpModel::new(1, noise);
        prior.set_hyperparams(Hyperparams::new(s, vec![l])).unwrap();
        prior.tell(&x, &vec![0.0; m]).unwrap();
        let k = prior.gram(prior.hyperparams());
        let mut kk = k.clone();
        for i in 0..m {
            kk[(i, i)] += noise + 1e-10;
        }
        let lch = kk.cholesky().unwrap().unpack();
        let z = nalgebra::DVector::from_fn(m, |_, _| standard_normal(&mut rng));
        let y = lch * z;
        (x, y.iter().copied().collect())
    }

    #[test]
    fn global_recovers_lengthscale() {
        let truth = 1.2;
        let (x, y) = sample_gp(40, 1.0, truth, 1e-4, 42);
        let mut m = GpModel::new(1, 1e-4);
        m.tell(&x, &y).unwrap();
        let b = Bounds::for_model(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        train(&mut m, TrainMethod::Global { max_iter: 120 }, &b, &mut rng).unwrap();
        let l = m.hyperparams().lengthscales[0];
        assert!(l > truth / 2.0 && l < truth * 2.0, "lengthscale {l}");

        // local from the optimum barely moves
        let before = m.log_marginal_likelihood(m.hyperparams()).unwrap().0;
        train(&mut m, TrainMethod::Local, &b, &mut rng).unwrap();
        let after = m.log_marginal_likelihood(m.hyperparams()).unwrap().0;
        assert!((after - before).abs() < 1e-6, "{before} -> {after}");
    }

    #[test]
    fn global_is_reproducible() {
        let (x, y) = sample_gp(15, 2.0, 0.8, 1e-3, 5);
        let run = || {
            let mut m = GpModel::new(1, 1e-3);
            m.tell(&x, &y).unwrap();
            let b = Bounds::for_model(&m);
            train(&mut m, TrainMethod::Global { max_iter: 20 }, &b, &mut ChaCha8Rng::seed_from_u64(9))
                .unwrap();
            m.hyperparams().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_never_lowers_likelihood() {
        for seed in 0..6 {
            let (x, y) = sample_gp(12, 1.0, 0.5 + seed as f64, 1e-3, seed);
            for method in [TrainMethod::Local, TrainMethod::Global { max_iter: 3 }] {
                let mut m = GpModel::new(1, 1e-3);
                m.tell(&x, &y).unwrap();
                m.set_hyperparams(Hyperparams::new(0.3, vec![4.0])).unwrap();
                let before = m.log_marginal_likelihood(m.hyperparams()).unwrap().0;
                let b = Bounds::for_model(&m);
                train(&mut m, method, &b, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
                let after = m.log_marginal_likelihood(m.hyperparams()).unwrap().0;
                assert!(after >= before - 1e-9, "{method}: {before} -> {after}");
            }
        }
    }

    #[test]
    fn zero_targets_push_signal_variance_down() {
        let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
        let mut m = GpModel::new(1, 1e-6);
        m.tell(&x, &[0.0; 6]).unwrap();
        let b = Bounds::for_model(&m);
        train(&mut m, TrainMethod::Global { max_iter: 5 }, &b, &mut ChaCha8Rng::seed_from_u64(1))
            .unwrap();
        let s = m.hyperparams().signal_variance;
        assert!((s - b.signal_variance.0).abs() < 1e-3 * b.signal_variance.0, "{s}");
    }

    #[test]
    fn default_bounds() {
        let b = Bounds::from_ranges(&[2.0, 0.0], 4.0);
        assert_eq!(b.signal_variance, (4e-4, 4e4));
        assert_eq!(b.lengthscales, vec![(0.02, 20.0), (0.01, 10.0)]);
    }
}
