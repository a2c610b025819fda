use statrs::function::erf::erf;

use super::{GpModel, SurrogateError};

fn check_targets(x: &[Vec<f64>], y: &[f64]) -> Result<(), SurrogateError> {
    if x.is_empty() {
        return Err(SurrogateError::Empty);
    }
    if x.len() != y.len() {
        return Err(SurrogateError::LengthMismatch {
            x_rows: x.len(),
            y_len: y.len(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(SurrogateError::NonFiniteTarget(i));
    }
    Ok(())
}

/// Root mean squared error of the posterior mean at `x` against `y`.
pub fn rmse(model: &mut GpModel, x: &[Vec<f64>], y: &[f64]) -> Result<f64, SurrogateError> {
    check_targets(x, y)?;
    let (mean, _) = model.posterior(x)?;
    let sse: f64 = mean.iter().zip(y).map(|(m, t)| (m - t).powi(2)).sum();
    Ok((sse / y.len() as f64).sqrt())
}

/// CRPS of a normal N(mu, sigma^2) forecast for observation `y`:
/// `sigma * (z (2 Phi(z) - 1) + 2 phi(z) - 1/sqrt(pi))` with
/// `z = (y - mu) / sigma`, and `|y - mu|` when `sigma` is zero.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> f64 {
    if sigma <= 0.0 {
        return (y - mu).abs();
    }
    let z = (y - mu) / sigma;
    let cdf = 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    sigma * (z * (2.0 * cdf - 1.0) + 2.0 * pdf - 1.0 / std::f64::consts::PI.sqrt())
}

/// Mean CRPS over the points, using the predictive distribution of a noisy
/// observation (latent variance plus noise variance).
pub fn crps(model: &mut GpModel, x: &[Vec<f64>], y: &[f64]) -> Result<f64, SurrogateError> {
    check_targets(x, y)?;
    let (mean, var) = model.posterior(x)?;
    let noise = model.noise_variance();
    let total: f64 = mean
        .iter()
        .zip(&var)
        .zip(y)
        .map(|((m, v), t)| crps_gaussian(*m, (v + noise).sqrt(), *t))
        .sum();
    Ok(total / y.len() as f64)
}
