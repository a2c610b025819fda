//! Exact Gaussian-process regression with a zero prior mean and an
//! anisotropic squared-exponential kernel
//!
//! ```text
//! k(a, b) = s * exp(-0.5 * sum_d ((a_d - b_d) / l_d)^2)
//! ```
//!
//! The observation noise variance is fixed by the caller; the signal
//! variance `s` and lengthscales `l_d` are fit by maximizing the log
//! marginal likelihood ([`train`]).

mod metrics;
mod train;

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use metrics::{crps, crps_gaussian, rmse};
pub use train::{train, Bounds, TrainMethod, LOCAL_MAX_STEPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurrogateError {
    #[error("expected {expected}-dimensional inputs, row {row} has {got}")]
    Dimension {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("{x_rows} input rows but {y_len} targets")]
    LengthMismatch { x_rows: usize, y_len: usize },
    #[error("target {0} is not finite (filter NaN rows before telling the model)")]
    NonFiniteTarget(usize),
    #[error("model has no training data")]
    Untold,
    #[error("empty evaluation set")]
    Empty,
    #[error("kernel matrix not positive definite even with jitter {0:e}")]
    NotPositiveDefinite(f64),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

impl Hyperparams {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            signal_variance,
            lengthscales,
        }
    }

    /// `[ln s, ln l_1, ..., ln l_n]`
    pub fn to_log(&self) -> Vec<f64> {
        std::iter::once(self.signal_variance.ln())
            .chain(self.lengthscales.iter().map(|l| l.ln()))
            .collect()
    }

    pub fn from_log(theta: &[f64]) -> Self {
        Self {
            signal_variance: theta[0].exp(),
            lengthscales: theta[1..].iter().map(|t| t.exp()).collect(),
        }
    }

    fn check(&self, dim: usize) -> Result<(), SurrogateError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if self.lengthscales.len() != dim {
            return Err(SurrogateError::InvalidHyperparams(format!(
                "{} lengthscales for {dim} dimensions",
                self.lengthscales.len()
            )));
        }
        if !ok(self.signal_variance) || !self.lengthscales.iter().all(|&l| ok(l)) {
            return Err(SurrogateError::InvalidHyperparams(format!("{self:?}")));
        }
        Ok(())
    }
}

/// Extra diagonal terms tried, relative to the signal variance, when the
/// kernel matrix fails to factor.
const JITTER_LADDER: [f64; 6] = [0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// Query points per posterior block.
const POSTERIOR_CHUNK: usize = 2048;

#[derive(Debug, Clone)]
struct Factor {
    /// Lower Cholesky factor of K + (noise + jitter) I.
    l: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
}

#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    x: DMatrix<f64>,
    y: DVector<f64>,
    noise_variance: f64,
    hyp: Hyperparams,
    factor: Option<Factor>,
}

fn sq_dist_scaled(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(ls)
        .map(|((p, q), l)| {
            let d = (p - q) / l;
            d * d
        })
        .sum()
}

fn rows_to_matrix(rows: &[Vec<f64>], dim: usize) -> Result<DMatrix<f64>, SurrogateError> {
    for (row, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(SurrogateError::Dimension {
                row,
                expected: dim,
                got: r.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(rows.len(), dim, |i, j| rows[i][j]))
}

impl GpModel {
    /// Untrained model with unit signal variance and unit lengthscales.
    pub fn new(dim: usize, noise_variance: f64) -> Self {
        Self {
            dim,
            x: DMatrix::zeros(0, dim),
            y: DVector::zeros(0),
            noise_variance: noise_variance.max(0.0),
            hyp: Hyperparams::new(1.0, vec![1.0; dim]),
            factor: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn set_noise_variance(&mut self, v: f64) {
        self.noise_variance = v.max(0.0);
        self.factor = None;
    }

    pub fn hyperparams(&self) -> &Hyperparams {
        &self.hyp
    }

    pub fn set_hyperparams(&mut self, hyp: Hyperparams) -> Result<(), SurrogateError> {
        hyp.check(self.dim)?;
        self.hyp = hyp;
        self.factor = None;
        Ok(())
    }

    pub fn train_x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn train_y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Jitter used by the current factorization, if one is cached.
    pub fn jitter(&self) -> Option<f64> {
        self.factor.as_ref().map(|f| f.jitter)
    }

    /// Replaces the training data.
    pub fn tell(&mut self, x: &[Vec<f64>], y: &[f64]) -> Result<(), SurrogateError> {
        if x.len() != y.len() {
            return Err(SurrogateError::LengthMismatch {
                x_rows: x.len(),
                y_len: y.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(SurrogateError::NonFiniteTarget(i));
        }
        self.x = rows_to_matrix(x, self.dim)?;
        self.y = DVector::from_column_slice(y);
        self.factor = None;
        Ok(())
    }

    fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Noise-free kernel matrix over the training inputs.
    fn gram(&self, hyp: &Hyperparams) -> DMatrix<f64> {
        let m = self.len();
        let rows: Vec<Vec<f64>> = (0..m).map(|i| self.row(i)).collect();
        let mut k = DMatrix::zeros(m, m);
        for i in 0..m {
            k[(i, i)] = hyp.signal_variance;
            for j in 0..i {
                let v = hyp.signal_variance
                    * (-0.5 * sq_dist_scaled(&rows[i], &rows[j], &hyp.lengthscales)).exp();
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn factorize(&self, hyp: &Hyperparams, kf: &DMatrix<f64>) -> Result<Factor, SurrogateError> {
        let m = self.len();
        let mut last = 0.0;
        for rel in JITTER_LADDER {
            let jitter = rel * hyp.signal_variance;
            last = jitter;
            let mut k = kf.clone();
            for i in 0..m {
                k[(i, i)] += self.noise_variance + jitter;
            }
            if let Some(chol) = k.cholesky() {
                let alpha = chol.solve(&self.y);
                return Ok(Factor {
                    l: chol.unpack(),
                    alpha,
                    jitter,
                });
            }
        }
        Err(SurrogateError::NotPositiveDefinite(last))
    }

    fn ensure_factor(&mut self) -> Result<&Factor, SurrogateError> {
        if self.is_empty() {
            return Err(SurrogateError::Untold);
        }
        if self.factor.is_none() {
            let kf = self.gram(&self.hyp);
            self.factor = Some(self.factorize(&self.hyp, &kf)?);
        }
        Ok(self.factor.as_ref().expect("just computed"))
    }

    /// Posterior mean and latent variance (clipped at zero) at each query.
    pub fn posterior(&mut self, q: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>), SurrogateError> {
        for (row, r) in q.iter().enumerate() {
            if r.len() != self.dim {
                return Err(SurrogateError::Dimension {
                    row,
                    expected: self.dim,
                    got: r.len(),
                });
            }
        }
        self.ensure_factor()?;
        let f = self.factor.as_ref().expect("factor cached");
        let m = self.len();
        let rows: Vec<Vec<f64>> = (0..m).map(|i| self.row(i)).collect();
        let s = self.hyp.signal_variance;
        let ls = &self.hyp.lengthscales;
        let mut mean = Vec::with_capacity(q.len());
        let mut var = Vec::with_capacity(q.len());
        for chunk in q.chunks(POSTERIOR_CHUNK) {
            let kstar = DMatrix::from_fn(m, chunk.len(), |i, j| {
                s * (-0.5 * sq_dist_scaled(&rows[i], &chunk[j], ls)).exp()
            });
            let v = f
                .l
                .solve_lower_triangular(&kstar)
                .expect("Cholesky factor has a positive diagonal");
            for j in 0..chunk.len() {
                mean.push(kstar.column(j).dot(&f.alpha));
                var.push((s - v.column(j).norm_squared()).max(0.0));
            }
        }
        Ok((mean, var))
    }

    /// Log marginal likelihood of the training targets under `hyp`, and
    /// its gradient with respect to [`Hyperparams::to_log`].
    pub fn log_marginal_likelihood(
        &self,
        hyp: &Hyperparams,
    ) -> Result<(f64, Vec<f64>), SurrogateError> {
        hyp.check(self.dim)?;
        if self.is_empty() {
            return Err(SurrogateError::Untold);
        }
        let m = self.len();
        let kf = self.gram(hyp);
        let fac = self.factorize(hyp, &kf)?;
        let logdet_half: f64 = (0..m).map(|i| fac.l[(i, i)].ln()).sum();
        let lml = -0.5 * self.y.dot(&fac.alpha)
            - logdet_half
            - 0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln();

        // W = alpha alpha^T - K^-1
        let linv = fac
            .l
            .solve_lower_triangular(&DMatrix::identity(m, m))
            .expect("Cholesky factor has a positive diagonal");
        let kinv = linv.transpose() * &linv;
        let w = &fac.alpha * fac.alpha.transpose() - kinv;

        let mut grad = vec![0.0; 1 + self.dim];
        let rows: Vec<Vec<f64>> = (0..m).map(|i| self.row(i)).collect();
        for i in 0..m {
            for j in 0..m {
                let wk = w[(i, j)] * kf[(i, j)];
                grad[0] += wk;
                if i != j {
                    for (d, l) in hyp.lengthscales.iter().enumerate() {
                        let diff = (rows[i][d] - rows[j][d]) / l;
                        grad[1 + d] += wk * diff * diff;
                    }
                }
            }
        }
        for g in &mut grad {
            *g *= 0.5;
        }
        Ok((lml, grad))
    }

    /// JSON description of the fitted model: hyperparameters, noise and
    /// data shape.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::json!({
            "dim": self.dim,
            "n_train": self.len(),
            "noise_variance": self.noise_variance,
            "signal_variance": self.hyp.signal_variance,
            "lengthscales": self.hyp.lengthscales,
            "jitter": self.jitter(),
        })
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<(), SurrogateError> {
        let text = serde_json::to_string_pretty(&self.snapshot()).expect("json value");
        std::fs::write(path, text).map_err(|e| SurrogateError::Io(format!("{}: {e}", path.display())))
    }
}
