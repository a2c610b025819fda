use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
struct Bump {
    center: Vec<f64>,
    widths: Vec<f64>,
    amplitude: f64,
}

/// Smooth test function on the unit box: three anisotropic Gaussian bumps
/// on top of a linear trend. Placement is drawn from `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObjective {
    bumps: Vec<Bump>,
    slope: Vec<f64>,
    offset: f64,
}

impl SyntheticObjective {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bumps = (0..3)
            .map(|_| Bump {
                center: (0..dim).map(|_| rng.random_range(0.15..0.85)).collect(),
                widths: (0..dim).map(|_| rng.random_range(0.05..0.15)).collect(),
                amplitude: rng.random_range(0.5..1.5),
            })
            .collect();
        let slope = (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect();
        Self {
            bumps,
            slope,
            offset: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.slope.len()
    }

    /// Expects a point in `[0, 1]^dim`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let trend: f64 = self.slope.iter().zip(x).map(|(s, v)| s * v).sum();
        let bumps: f64 = self
            .bumps
            .iter()
            .map(|b| {
                let q: f64 = x
                    .iter()
                    .zip(&b.center)
                    .zip(&b.widths)
                    .map(|((v, c), w)| ((v - c) / w).powi(2))
                    .sum();
                b.amplitude * (-0.5 * q).exp()
            })
            .sum();
        self.offset + trend + bumps
    }
}
