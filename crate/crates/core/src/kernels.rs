//! Stationary, isotropic covariance functions and kernel-matrix assembly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::special::ln_bessel_k;

/// Diagonal jitter, relative to the output variance, added before any factorization.
pub const RELATIVE_JITTER: f64 = 1e-10;

/// Smoothness used when a configuration does not name one.
pub const DEFAULT_SMOOTHNESS: f64 = 2.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    SquaredExponential,
    Matern,
}

/// Kernel family plus hyperparameters.
///
/// `noise_variance` is the nugget σ_e²; it is only ever added on the diagonal
/// of a training-set matrix, never inside [`KernelSpec::value`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub output_variance: f64,
    pub length_scale: f64,
    pub smoothness: f64,
    pub noise_variance: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::matern(1.0, 1.0, DEFAULT_SMOOTHNESS)
    }
}

impl KernelSpec {
    pub fn squared_exponential(output_variance: f64, length_scale: f64) -> Self {
        KernelSpec {
            family: KernelFamily::SquaredExponential,
            output_variance,
            length_scale,
            smoothness: DEFAULT_SMOOTHNESS,
            noise_variance: 0.0,
        }
    }

    pub fn matern(output_variance: f64, length_scale: f64, smoothness: f64) -> Self {
        KernelSpec {
            family: KernelFamily::Matern,
            output_variance,
            length_scale,
            smoothness,
            noise_variance: 0.0,
        }
    }

    pub fn with_noise(mut self, noise_variance: f64) -> Self {
        self.noise_variance = noise_variance;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.output_variance.is_finite()
            && self.output_variance > 0.0
            && self.length_scale.is_finite()
            && self.length_scale > 0.0
            && self.noise_variance.is_finite()
            && self.noise_variance >= 0.0
            && (self.family != KernelFamily::Matern || (self.smoothness.is_finite() && self.smoothness > 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid kernel hyperparameters {self:?}")))
        }
    }

    pub fn jitter(&self) -> f64 {
        RELATIVE_JITTER * self.output_variance
    }

    /// Covariance as a function of the Euclidean distance `r`.
    pub fn value_at_distance(&self, r: f64) -> f64 {
        let s2 = self.output_variance;
        let t = r / self.length_scale;
        match self.family {
            KernelFamily::SquaredExponential => s2 * (-0.5 * t * t).exp(),
            KernelFamily::Matern => {
                if r == 0.0 {
                    return s2;
                }
                let nu = self.smoothness;
                if nu == 0.5 {
                    s2 * (-t).exp()
                } else if nu == 1.5 {
                    let a = 3f64.sqrt() * t;
                    s2 * (1.0 + a) * (-a).exp()
                } else if nu == 2.5 {
                    let a = 5f64.sqrt() * t;
                    s2 * (1.0 + a + a * a / 3.0) * (-a).exp()
                } else {
                    matern_bessel(s2, nu, t)
                }
            }
        }
    }

    /// `k(x, x′)`, without the noise term.
    pub fn value(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::invalid(format!("dimension mismatch: {} vs {}", x.len(), y.len())));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite kernel input"));
        }
        Ok(self.value_at_distance(distance(x, y)))
    }

    /// Kernel matrix over `xs`; with `add_noise` the nugget σ_e² is added on the diagonal.
    pub fn matrix(&self, xs: &[Vec<f64>], add_noise: bool) -> Result<DMatrix<f64>> {
        if xs.is_empty() {
            return Err(Error::invalid("kernel matrix needs at least one point"));
        }
        check_points(xs, xs[0].len())?;
        Ok(self.matrix_from_distances(&pairwise_distances(xs), add_noise))
    }

    /// Kernel matrix from a precomputed distance matrix.
    pub fn matrix_from_distances(&self, dist: &DMatrix<f64>, add_noise: bool) -> DMatrix<f64> {
        let n = dist.nrows();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            k[(j, j)] = self.output_variance;
            for i in (j + 1)..n {
                let v = self.value_at_distance(dist[(i, j)]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        if add_noise {
            for i in 0..n {
                k[(i, i)] += self.noise_variance;
            }
        }
        k
    }

    /// Rectangular matrix `K[i][j] = k(xs[i], ys[j])`; never carries the noise term.
    pub fn cross(&self, xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<DMatrix<f64>> {
        let d = xs.first().or(ys.first()).map_or(0, Vec::len);
        check_points(xs, d)?;
        check_points(ys, d)?;
        Ok(DMatrix::from_fn(xs.len(), ys.len(), |i, j| {
            self.value_at_distance(distance(&xs[i], &ys[j]))
        }))
    }
}

fn matern_bessel(s2: f64, nu: f64, t: f64) -> f64 {
    let z = (2.0 * nu).sqrt() * t;
    let ln = s2.ln() + (1.0 - nu) * std::f64::consts::LN_2 - ln_gamma(nu) + nu * z.ln() + ln_bessel_k(nu, z);
    ln.exp().min(s2)
}

fn check_points(xs: &[Vec<f64>], d: usize) -> Result<()> {
    for x in xs {
        if x.len() != d {
            return Err(Error::invalid(format!("dimension mismatch: expected {d}, got {}", x.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite kernel input"));
        }
    }
    Ok(())
}

pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

pub fn pairwise_distances(xs: &[Vec<f64>]) -> DMatrix<f64> {
    let n = xs.len();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let r = distance(&xs[i], &xs[j]);
            d[(i, j)] = r;
            d[(j, i)] = r;
        }
    }
    d
}
