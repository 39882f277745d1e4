//! Active subspaces: local-linear gradient estimates, the averaged gradient
//! outer product, eigen-gap detection, and the maps between normalized
//! inputs and active coordinates.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::sampling::BoxDomain;

/// Ridge added to a local least-squares system that is not positive definite.
pub const GRADIENT_RIDGE: f64 = 1e-8;

/// Eigenvalues below this multiple of the largest are floored before gap detection.
pub const GAP_FLOOR: f64 = 1e-12;

const RECOVER_MAX_ITER: usize = 500;
const RECOVER_TOL: f64 = 1e-10;

/// Local gradient estimates plus how many local fits needed the ridge.
#[derive(Clone, Debug)]
pub struct GradientEstimates {
    pub gradients: Vec<Vec<f64>>,
    pub ridged: usize,
}

/// Gradient at every sample from a least-squares linear fit to its `k`
/// nearest neighbours (the sample included). `k` defaults to `min(2(d+1), N)`.
pub fn estimate_gradients(xs: &[Vec<f64>], ys: &[f64], k: Option<usize>) -> Result<GradientEstimates> {
    let n = xs.len();
    if n == 0 || ys.len() != n {
        return Err(Error::invalid("need matching, non-empty samples"));
    }
    let d = xs[0].len();
    if n < d + 2 {
        return Err(Error::invalid(format!("need at least {} samples in {d} dimensions, got {n}", d + 2)));
    }
    if xs.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("samples differ in dimension"));
    }
    let k = k.unwrap_or(2 * (d + 1)).min(n).max(d + 1);
    let p = d + 1;
    let mut gradients = Vec::with_capacity(n);
    let mut ridged = 0;
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(n);
    for xi in xs {
        order.clear();
        order.extend(xs.iter().enumerate().map(|(j, xj)| {
            (xj.iter().zip(xi).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), j)
        }));
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        // normal equations of y ≈ b0 + βᵀ(x - x_i)
        let mut ata = DMatrix::zeros(p, p);
        let mut aty = vec![0.0; p];
        let mut row = vec![0.0; p];
        for &(_, j) in &order[..k] {
            row[0] = 1.0;
            for c in 0..d {
                row[c + 1] = xs[j][c] - xi[c];
            }
            for a in 0..p {
                aty[a] += row[a] * ys[j];
                for b in 0..=a {
                    ata[(a, b)] += row[a] * row[b];
                }
            }
        }
        let chol = match Cholesky::factor(&ata) {
            Ok(c) if c.min_diag() > 1e-7 * ata[(0, 0)].sqrt() => c,
            _ => {
                ridged += 1;
                let scale = (0..p).map(|a| ata[(a, a)]).fold(1.0f64, f64::max);
                for a in 0..p {
                    ata[(a, a)] += GRADIENT_RIDGE * scale;
                }
                Cholesky::factor(&ata)?
            }
        };
        let beta = chol.solve(&aty);
        gradients.push(beta[1..].to_vec());
    }
    if ridged > 0 {
        log::warn!("{ridged} of {n} local gradient fits were rank deficient and used the ridge");
    }
    Ok(GradientEstimates { gradients, ridged })
}

/// Eigendecomposition of `C = (1/M) Σ g gᵀ`: eigenvalues non-increasing and
/// clamped at zero, eigenvectors as columns with their largest-magnitude
/// entry positive.
pub fn build_subspace(gradients: &[Vec<f64>]) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = gradients.len();
    if m == 0 {
        return Err(Error::invalid("need at least one gradient"));
    }
    let d = gradients[0].len();
    if d == 0 || gradients.iter().any(|g| g.len() != d || g.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("gradients must be finite and of one dimension"));
    }
    let mut c = DMatrix::zeros(d, d);
    for g in gradients {
        let g = DVector::from_column_slice(g);
        c.ger(1.0 / m as f64, &g, &g, 1.0);
    }
    let eig = SymmetricEigen::new(c);
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut vectors = DMatrix::zeros(d, d);
    for (col, &i) in idx.iter().enumerate() {
        let v = eig.eigenvectors.column(i);
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        let sign = if lead < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(col, &(v * sign));
    }
    Ok((values, vectors))
}

/// Position of the largest log-ratio between consecutive eigenvalues.
/// Returns the number of eigenvalues before the gap.
pub fn detect_gap(eigvals: &[f64]) -> usize {
    let d = eigvals.len();
    if d < 2 {
        return d.max(1);
    }
    let top = eigvals[0];
    if !(top > 0.0) {
        log::warn!("leading eigenvalue is {top}; keeping all {d} dimensions");
        return d;
    }
    let floor = GAP_FLOOR * top;
    let mut best = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for i in 0..d - 1 {
        let gap = (eigvals[i].max(floor) / eigvals[i + 1].max(floor)).log10();
        if gap > best_gap {
            best_gap = gap;
            best = i + 1;
        }
    }
    if best_gap <= 1e-12 {
        log::warn!("no clear eigenvalue gap; using one active dimension");
    }
    best
}

/// Active/inactive split of an eigenbasis together with the latent search box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subspace {
    eigenvalues: Vec<f64>,
    /// `d × d`, columns are eigenvectors in eigenvalue order.
    eigenvectors: DMatrix<f64>,
    active_dim: usize,
    /// Box of the normalized inputs the subspace lives in.
    input_box: BoxDomain,
    latent_bounds: BoxDomain,
}

impl Subspace {
    pub fn new(eigenvalues: Vec<f64>, eigenvectors: DMatrix<f64>, active_dim: usize, input_box: BoxDomain) -> Result<Self> {
        let d = eigenvalues.len();
        if eigenvectors.shape() != (d, d) || input_box.dim() != d {
            return Err(Error::invalid("eigenvector matrix, eigenvalues and box disagree in dimension"));
        }
        if active_dim == 0 || active_dim > d {
            return Err(Error::invalid(format!("active dimension {active_dim} outside [1, {d}]")));
        }
        let w1 = eigenvectors.columns(0, active_dim).into_owned();
        let latent_bounds = latent_box(&w1, &input_box)?;
        Ok(Subspace { eigenvalues, eigenvectors, active_dim, input_box, latent_bounds })
    }

    /// Gradients, spectrum and gap from `(normalized x, loss)` samples in `[-1, 1]^d`.
    /// `active_dim` overrides the detected gap.
    pub fn from_samples(xs: &[Vec<f64>], ys: &[f64], active_dim: Option<usize>) -> Result<Self> {
        let grads = estimate_gradients(xs, ys, None)?;
        let (values, vectors) = build_subspace(&grads.gradients)?;
        let n = active_dim.unwrap_or_else(|| detect_gap(&values));
        Subspace::new(values, vectors, n, BoxDomain::centered_unit(xs[0].len()))
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn active_dim(&self) -> usize {
        self.active_dim
    }

    pub fn input_dim(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn w1(&self) -> DMatrix<f64> {
        self.eigenvectors.columns(0, self.active_dim).into_owned()
    }

    pub fn w2(&self) -> DMatrix<f64> {
        let d = self.input_dim();
        self.eigenvectors.columns(self.active_dim, d - self.active_dim).into_owned()
    }

    pub fn latent_bounds(&self) -> &BoxDomain {
        &self.latent_bounds
    }

    /// `v = W1ᵀ x`.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        (0..self.active_dim)
            .map(|i| self.eigenvectors.column(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// The minimum-norm point of the input box with `W1ᵀx = v`; equivalently
    /// `W1 v + W2 z` with the smallest feasible `‖z‖`.
    ///
    /// Solved through the concave dual `max_μ min_{x∈box} ½‖x‖² − μᵀ(W1ᵀx − v)`
    /// whose inner minimizer is `clamp(W1 μ)`, by semismooth Newton with
    /// backtracking. An empty feasible set shows up as a dual that never
    /// converges and is reported as infeasible.
    pub fn recover(&self, v: &[f64]) -> Result<Vec<f64>> {
        let r = self.active_dim;
        if v.len() != r || v.iter().any(|a| !a.is_finite()) {
            return Err(Error::invalid(format!("latent point must have {r} finite coordinates")));
        }
        let w1 = self.w1();
        let (lo, hi) = (self.input_box.lower(), self.input_box.upper());
        let vv = DVector::from_column_slice(v);
        let inner = |mu: &DVector<f64>| -> DVector<f64> {
            let x = &w1 * mu;
            DVector::from_iterator(x.len(), x.iter().enumerate().map(|(j, a)| a.clamp(lo[j], hi[j])))
        };
        let dual = |mu: &DVector<f64>, x: &DVector<f64>| 0.5 * x.norm_squared() - mu.dot(&(w1.tr_mul(x) - &vv));

        let mut mu = vv.clone();
        let mut x = inner(&mu);
        for _ in 0..RECOVER_MAX_ITER {
            let grad = &vv - w1.tr_mul(&x);
            if grad.amax() <= RECOVER_TOL {
                return Ok(x.as_slice().to_vec());
            }
            // generalized Hessian: W1ᵀ D W1 over the unclamped coordinates
            let wx = &w1 * &mu;
            let mut h = DMatrix::zeros(r, r);
            for j in 0..wx.len() {
                if wx[j] > lo[j] && wx[j] < hi[j] {
                    let row = w1.row(j);
                    h.ger(1.0, &row.transpose(), &row.transpose(), 1.0);
                }
            }
            for a in 0..r {
                h[(a, a)] += 1e-12;
            }
            let step = h.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
            let g0 = dual(&mu, &x);
            let slope = grad.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &mu + &step * t;
                let xc = inner(&cand);
                if dual(&cand, &xc) >= g0 + 1e-4 * t * slope {
                    mu = cand;
                    x = xc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted || mu.amax() > 1e12 {
                break;
            }
        }
        Err(Error::InfeasibleLatent(format!("no point of the box projects to {v:?}")))
    }
}

/// Bounds of `W1ᵀx` over `x` in `domain`: per column `c ± Σ_j |W1[j,i]| h_j`
/// with box centre `c` and half-widths `h`.
pub fn latent_box(w1: &DMatrix<f64>, domain: &BoxDomain) -> Result<BoxDomain> {
    if w1.nrows() != domain.dim() {
        return Err(Error::invalid("basis and box differ in dimension"));
    }
    let centre = domain.center();
    let half: Vec<f64> = domain.lower().iter().zip(domain.upper()).map(|(l, u)| 0.5 * (u - l)).collect();
    let mut lower = Vec::with_capacity(w1.ncols());
    let mut upper = Vec::with_capacity(w1.ncols());
    for col in w1.column_iter() {
        let c: f64 = col.iter().zip(&centre).map(|(a, b)| a * b).sum();
        let w: f64 = col.iter().zip(&half).map(|(a, h)| a.abs() * h).sum();
        lower.push(c - w);
        upper.push(c + w);
    }
    BoxDomain::new(lower, upper)
}
