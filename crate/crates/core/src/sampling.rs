//! Box domains, Latin Hypercube designs and the affine map to `[-1, 1]^d`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Candidate-pool size drawn each iteration when the configuration does not override it.
pub const DEFAULT_POOL_SIZE: usize = 2000;

/// Axis-aligned box `lower[i] < upper[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<RawBox> for BoxDomain {
    type Error = Error;
    fn try_from(raw: RawBox) -> Result<Self> {
        BoxDomain::new(raw.lower, raw.upper)
    }
}

impl From<BoxDomain> for RawBox {
    fn from(b: BoxDomain) -> Self {
        RawBox { lower: b.lower, upper: b.upper }
    }
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds must be non-empty and of equal length (got {} and {})",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("bad bounds in dimension {i}: [{l}, {u}]")));
            }
        }
        Ok(BoxDomain { lower, upper })
    }

    /// `[lo, hi]^d`.
    pub fn uniform(d: usize, lo: f64, hi: f64) -> Result<Self> {
        BoxDomain::new(vec![lo; d], vec![hi; d])
    }

    /// The normalized cube `[-1, 1]^d`.
    pub fn centered_unit(d: usize) -> Self {
        BoxDomain { lower: vec![-1.0; d], upper: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| v >= l && v <= u)
    }

    pub fn clamp(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.lower).zip(&self.upper).map(|((v, l), u)| v.clamp(*l, *u)).collect()
    }

    pub fn diameter(&self) -> f64 {
        self.lower.iter().zip(&self.upper).map(|(l, u)| (u - l) * (u - l)).sum::<f64>().sqrt()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    /// Affine map onto `[-1, 1]^d`. Out-of-box points map outside the cube.
    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((v, l), u)| 2.0 * (v - l) / (u - l) - 1.0)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(&self.lower)
            .zip(&self.upper)
            .map(|((v, l), u)| l + 0.5 * (v + 1.0) * (u - l))
            .collect()
    }
}

/// Latin Hypercube design: in every dimension each of the `n` equal-width
/// strata holds exactly one point; positions within strata are uniform.
pub fn lhs<R: Rng + ?Sized>(domain: &BoxDomain, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("LHS needs at least one point"));
    }
    let d = domain.dim();
    let mut points = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    // keep a hair away from stratum edges so the stratum of every coordinate is
    // unambiguous after the affine map
    const EDGE: f64 = 1e-9;
    for j in 0..d {
        strata.shuffle(rng);
        let (lo, width) = (domain.lower[j], domain.upper[j] - domain.lower[j]);
        for (point, &s) in points.iter_mut().zip(&strata) {
            let u = EDGE + (1.0 - 2.0 * EDGE) * rng.random::<f64>();
            point[j] = lo + width * (s as f64 + u) / n as f64;
        }
    }
    Ok(points)
}

/// Size of the initial design: `requested` (default `10 d`) clamped to `[2d, 10d]`.
pub fn initial_design_size(d: usize, requested: Option<usize>) -> usize {
    requested.unwrap_or(10 * d).clamp(2 * d, 10 * d)
}
