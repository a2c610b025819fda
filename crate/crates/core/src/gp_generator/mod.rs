//! Online active-learning generator.
//!
//! The generator starts from a uniform random batch, then repeatedly fits a
//! Gaussian process to everything evaluated so far and picks the next batch
//! from a fixed candidate mesh: highest posterior variance first, keeping
//! picks at least `r` apart and shrinking `r` when the mesh runs out of
//! room. How hard the hyperparameters are refit depends on how badly the
//! model predicted the newest batch.

mod learner;
mod objective;

use rand::Rng;
use thiserror::Error;

use crate::surrogate::{GpModel, SurrogateError, TrainMethod};

pub use learner::{
    gp_gen_fn, read_metrics, GpGenConfig, MetricsLog, MetricsRow, OnlineLearner, SelectionMode,
    Step, TestSet,
};
pub use objective::SyntheticObjective;

#[derive(Debug, Error)]
pub enum GpGenError {
    #[error("invalid bounds: {0}")]
    Bounds(String),
    #[error("invalid selection parameters: {0}")]
    Selection(String),
    #[error("variances has {got} entries for a grid of {expected}")]
    VarianceLength { expected: usize, got: usize },
    #[error("only {available} candidates left after exclusions, batch needs {wanted}")]
    GridTooSmall { available: usize, wanted: usize },
    #[error("test set is empty")]
    EmptyTestSet,
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("metrics file {path}: {message}")]
    Metrics { path: String, message: String },
}

fn check_bounds(lb: &[f64], ub: &[f64]) -> Result<(), GpGenError> {
    if lb.is_empty() || lb.len() != ub.len() {
        return Err(GpGenError::Bounds(format!(
            "lb has {} entries, ub has {}",
            lb.len(),
            ub.len()
        )));
    }
    if let Some(d) = (0..lb.len()).find(|&d| !(lb[d] < ub[d]) || !lb[d].is_finite() || !ub[d].is_finite()) {
        return Err(GpGenError::Bounds(format!(
            "dimension {d}: need finite lb < ub, got [{}, {}]",
            lb[d], ub[d]
        )));
    }
    Ok(())
}

/// Regular mesh over a box, endpoints included. Row order is lexicographic
/// with the first coordinate varying slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrid {
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub points_per_dim: usize,
    pub points: Vec<Vec<f64>>,
}

impl CandidateGrid {
    pub fn new(lb: &[f64], ub: &[f64], points_per_dim: usize) -> Result<Self, GpGenError> {
        check_bounds(lb, ub)?;
        if points_per_dim < 2 {
            return Err(GpGenError::Bounds(
                "points_per_dim must be at least 2 to include both endpoints".into(),
            ));
        }
        let n = lb.len();
        let total = (points_per_dim as u64)
            .checked_pow(n as u32)
            .filter(|&t| t <= 50_000_000)
            .ok_or_else(|| GpGenError::Bounds(format!("{points_per_dim}^{n} grid points is too many")))?
            as usize;
        let axis = |d: usize, i: usize| {
            if i == points_per_dim - 1 {
                ub[d]
            } else {
                lb[d] + (ub[d] - lb[d]) * i as f64 / (points_per_dim - 1) as f64
            }
        };
        let points = (0..total)
            .map(|mut k| {
                let mut p = vec![0.0; n];
                for d in (0..n).rev() {
                    p[d] = axis(d, k % points_per_dim);
                    k /= points_per_dim;
                }
                p
            })
            .collect();
        Ok(Self {
            lb: lb.to_vec(),
            ub: ub.to_vec(),
            points_per_dim,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.lb.len()
    }

    /// Length of the box diagonal.
    pub fn diagonal(&self) -> f64 {
        dist(&self.lb, &self.ub)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPolicy {
    pub full_factor: f64,
    pub reduced_factor: f64,
    pub full_iters: usize,
    pub reduced_iters: usize,
    /// When false the lowest branch trains globally with `reduced_iters`.
    pub allow_local: bool,
}

impl Default for TrainingPolicy {
    fn default() -> Self {
        Self {
            full_factor: 10.0,
            reduced_factor: 2.0,
            full_iters: 120,
            reduced_iters: 20,
            allow_local: true,
        }
    }
}

impl TrainingPolicy {
    pub fn validate(&self) -> Result<(), GpGenError> {
        if !(self.full_factor > self.reduced_factor && self.reduced_factor > 0.0) {
            return Err(GpGenError::Selection(format!(
                "need full_factor > reduced_factor > 0, got {} and {}",
                self.full_factor, self.reduced_factor
            )));
        }
        Ok(())
    }
}

/// Picks the retraining effort from the newest batch's prediction error.
/// Both comparisons are strict.
pub fn decide_training(rmse: f64, std_y: f64, policy: &TrainingPolicy) -> TrainMethod {
    if rmse > policy.full_factor * std_y {
        TrainMethod::Global {
            max_iter: policy.full_iters,
        }
    } else if rmse > policy.reduced_factor * std_y {
        TrainMethod::Global {
            max_iter: policy.reduced_iters,
        }
    } else if policy.allow_local {
        TrainMethod::Local
    } else {
        TrainMethod::Global {
            max_iter: policy.reduced_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionParams {
    pub batch_size: usize,
    pub r_initial: f64,
    pub r_decay: f64,
    pub r_min: f64,
}

impl SelectionParams {
    /// Starts at half the box diagonal, halves on each failed pass and
    /// gives up on spacing below 1/1024 of the diagonal.
    pub fn for_bounds(lb: &[f64], ub: &[f64], batch_size: usize) -> Self {
        let diag = dist(lb, ub);
        Self {
            batch_size,
            r_initial: diag / 2.0,
            r_decay: 0.5,
            r_min: diag / 1024.0,
        }
    }

    pub fn validate(&self) -> Result<(), GpGenError> {
        let bad = |m: String| Err(GpGenError::Selection(m));
        if !(self.r_min > 0.0) || !(self.r_min < self.r_initial) {
            return bad(format!(
                "need 0 < r_min < r_initial, got r_min={} r_initial={}",
                self.r_min, self.r_initial
            ));
        }
        if !(self.r_decay > 0.0 && self.r_decay < 1.0) {
            return bad(format!("r_decay must lie in (0, 1), got {}", self.r_decay));
        }
        Ok(())
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// `b` independent uniform points in the box.
pub fn initial_sample<R: Rng + ?Sized>(lb: &[f64], ub: &[f64], b: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..b)
        .map(|_| {
            lb.iter()
                .zip(ub)
                .map(|(&lo, &hi)| lo + (hi - lo) * rng.random::<f64>())
                .collect()
        })
        .collect()
}

/// Chosen grid indices in acceptance order, with the separation radius in
/// force when each was accepted (0 for points filled in by rank alone).
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub radii: Vec<f64>,
}

impl Selection {
    /// Radius at which the last point was accepted.
    pub fn r_final(&self) -> f64 {
        self.radii.last().copied().unwrap_or(0.0)
    }
}

/// Greedy variance-ranked selection with a shrinking exclusion radius.
///
/// Candidates are visited by variance (descending, ties by index). A
/// candidate is accepted when it is at least `r` from every accepted and
/// every excluded point. After a pass that leaves the batch short, `r` is
/// multiplied by `r_decay` and the remaining candidates are visited again.
/// Once `r` drops below `r_min` the batch is filled by rank, skipping only
/// candidates that coincide with an excluded point.
pub fn select_batch(
    grid: &CandidateGrid,
    variances: &[f64],
    params: &SelectionParams,
    exclude: &[Vec<f64>],
) -> Result<Selection, GpGenError> {
    params.validate()?;
    if variances.len() != grid.len() {
        return Err(GpGenError::VarianceLength {
            expected: grid.len(),
            got: variances.len(),
        });
    }
    let b = params.batch_size;
    let usable: Vec<bool> = grid
        .points
        .iter()
        .map(|p| !exclude.iter().any(|e| e.as_slice() == p.as_slice()))
        .collect();
    let available = usable.iter().filter(|&&u| u).count();
    if available < b {
        return Err(GpGenError::GridTooSmall { available, wanted: b });
    }
    let mut order: Vec<usize> = (0..grid.len()).filter(|&i| usable[i]).collect();
    let key = |v: f64| if v.is_nan() { f64::NEG_INFINITY } else { v };
    order.sort_by(|&a, &b| key(variances[b]).total_cmp(&key(variances[a])).then(a.cmp(&b)));

    let mut sel = Selection {
        indices: Vec::with_capacity(b),
        radii: Vec::with_capacity(b),
    };
    let mut taken = vec![false; grid.len()];
    let mut r = params.r_initial;
    while sel.indices.len() < b && r >= params.r_min {
        for &c in &order {
            if sel.indices.len() == b {
                break;
            }
            if taken[c] {
                continue;
            }
            let p = &grid.points[c];
            let clear = sel.indices.iter().all(|&a| dist(&grid.points[a], p) >= r)
                && exclude.iter().all(|e| dist(e, p) >= r);
            if clear {
                taken[c] = true;
                sel.indices.push(c);
                sel.radii.push(r);
            }
        }
        r *= params.r_decay;
    }
    for &c in &order {
        if sel.indices.len() == b {
            break;
        }
        if !taken[c] {
            taken[c] = true;
            sel.indices.push(c);
            sel.radii.push(0.0);
        }
    }
    Ok(sel)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelMetrics {
    pub mse_test: f64,
    pub mean_var: f64,
    pub max_var: f64,
}

/// Test-set MSE of the posterior mean, and mean and max posterior variance
/// over the grid.
pub fn metrics(
    model: &mut GpModel,
    test: &TestSet,
    grid: &CandidateGrid,
) -> Result<ModelMetrics, GpGenError> {
    let (_, var) = model.posterior(&grid.points)?;
    metrics_with_grid_variance(model, test, &var)
}

pub(crate) fn metrics_with_grid_variance(
    model: &mut GpModel,
    test: &TestSet,
    grid_var: &[f64],
) -> Result<ModelMetrics, GpGenError> {
    if test.x.is_empty() {
        return Err(GpGenError::EmptyTestSet);
    }
    let (mean, _) = model.posterior(&test.x)?;
    let mse_test = mean
        .iter()
        .zip(&test.y)
        .map(|(m, y)| (m - y).powi(2))
        .sum::<f64>()
        / test.y.len() as f64;
    let (mean_var, max_var) = variance_summary(grid_var);
    Ok(ModelMetrics {
        mse_test,
        mean_var,
        max_var,
    })
}

pub(crate) fn variance_summary(var: &[f64]) -> (f64, f64) {
    if var.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = var.iter().sum::<f64>() / var.len() as f64;
    let max = var.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (mean, max)
}
