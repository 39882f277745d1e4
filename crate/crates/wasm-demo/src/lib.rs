//! Browser bindings for three small calibrex operations. Each exported
//! function takes plain numbers and returns a JSON string; errors come back
//! as `{"error": "..."}`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

use calibrex::active_subspace::Subspace;
use calibrex::gp::{optimize_hyperparameters, HyperBounds};
use calibrex::sampling::lhs;
use calibrex::simulators::linear_active_direction;
use calibrex::{AcquisitionFamily, AcquisitionSpec, BoxDomain, Builtin, GpModel, KernelSpec, MeanFunction};

#[derive(Debug, Serialize)]
pub struct GpView {
    pub grid: Vec<f64>,
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Expected improvement, scaled to a maximum of 1.
    pub ei: Vec<f64>,
    pub next: Option<f64>,
    pub length_scale: f64,
    pub noise: f64,
}

fn kernel_for(name: &str, length_scale: f64) -> calibrex::Result<KernelSpec> {
    Ok(match name {
        "se" => KernelSpec::squared_exponential(1.0, length_scale),
        "matern12" => KernelSpec::matern(1.0, length_scale, 0.5),
        "matern32" => KernelSpec::matern(1.0, length_scale, 1.5),
        "matern52" => KernelSpec::matern(1.0, length_scale, 2.5),
        other => return Err(calibrex::Error::InvalidArgument(format!("unknown kernel {other}"))),
    })
}

/// 1-d GP posterior and EI on `n_grid` points of [0, 1].
pub fn gp_view(
    xs: &[f64],
    ys: &[f64],
    kernel: &str,
    length_scale: f64,
    noise: f64,
    tune: bool,
    n_grid: usize,
) -> calibrex::Result<GpView> {
    let grid: Vec<f64> = (0..n_grid).map(|i| i as f64 / (n_grid.max(2) - 1) as f64).collect();
    let spec = kernel_for(kernel, length_scale)?.with_noise(noise);
    if xs.is_empty() {
        let sd = spec.output_variance.sqrt();
        return Ok(GpView { mean: vec![0.0; n_grid], sd: vec![sd; n_grid], ei: vec![0.0; n_grid], grid, next: None, length_scale, noise });
    }
    let train: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
    let mut model = GpModel::new(spec, MeanFunction::Zero, train, ys.to_vec())?.fit()?;
    if tune && xs.len() >= 3 {
        let bounds = HyperBounds::for_model(&model, 1.0);
        model = optimize_hyperparameters(&model, &bounds, &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    let qs: Vec<Vec<f64>> = grid.iter().map(|&x| vec![x]).collect();
    let (mean, var) = model.predict_diag(&qs)?;
    let sd: Vec<f64> = var.iter().map(|v| v.max(0.0).sqrt()).collect();
    let best = ys.iter().copied().fold(f64::INFINITY, f64::min);
    let acq = AcquisitionSpec::new(AcquisitionFamily::Ei);
    let mut ei = Vec::with_capacity(n_grid);
    for (m, s) in mean.iter().zip(&sd) {
        ei.push(acq.score(*m, s.max(calibrex::acquisition::SIGMA_FLOOR), best)?);
    }
    let top = ei.iter().copied().fold(0.0, f64::max);
    let next = (top > 0.0).then(|| grid[ei.iter().position(|&v| v == top).unwrap()]);
    if top > 0.0 {
        ei.iter_mut().for_each(|v| *v /= top);
    }
    let k = model.kernel();
    Ok(GpView { grid, mean, sd, ei, next, length_scale: k.length_scale, noise: k.noise_variance })
}

#[derive(Debug, Serialize)]
pub struct LhsView {
    pub points: Vec<Vec<f64>>,
    /// For each dimension, how many strata hold exactly one point.
    pub filled: Vec<usize>,
}

/// `n` Latin hypercube points in [0, 1]².
pub fn lhs_view(n: usize, seed: u64) -> calibrex::Result<LhsView> {
    let points = lhs(&BoxDomain::uniform(2, 0.0, 1.0)?, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let filled = (0..2)
        .map(|j| {
            let mut count = vec![0usize; n];
            for p in &points {
                count[((p[j] * n as f64) as usize).min(n - 1)] += 1;
            }
            count.iter().filter(|&&c| c == 1).count()
        })
        .collect();
    Ok(LhsView { points, filled })
}

#[derive(Debug, Serialize)]
pub struct SubspaceView {
    pub eigenvalues: Vec<f64>,
    pub active_dim: usize,
    /// |cos| between the leading eigenvector and the true direction.
    pub cosine: f64,
}

/// Active-subspace spectrum of the 9-d linear target from `n` LHS samples.
pub fn subspace_view(n: usize, seed: u64) -> calibrex::Result<SubspaceView> {
    let b = Builtin::LinearActive;
    let xs = lhs(&b.domain(), n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let ys: Vec<f64> = xs.iter().map(|x| b.eval(x)[0]).collect();
    let s = Subspace::from_samples(&xs, &ys, None)?;
    let w = linear_active_direction();
    let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    let v = s.eigenvectors().column(0);
    let cosine = (v.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / norm).abs();
    Ok(SubspaceView { eigenvalues: s.eigenvalues().to_vec(), active_dim: s.active_dim(), cosine })
}

fn to_json<T: Serialize>(r: calibrex::Result<T>) -> String {
    match r {
        Ok(v) => serde_json::to_string(&v).unwrap_or_else(|e| format!("{{\"error\":{:?}}}", e.to_string())),
        Err(e) => serde_json::json!({ "error": e.to_string() }).to_string(),
    }
}

#[wasm_bindgen]
pub fn gp_demo(xs: Vec<f64>, ys: Vec<f64>, kernel: &str, length_scale: f64, noise: f64, tune: bool, n_grid: usize) -> String {
    to_json(gp_view(&xs, &ys, kernel, length_scale, noise, tune, n_grid))
}

#[wasm_bindgen]
pub fn lhs_demo(n: usize, seed: u64) -> String {
    to_json(lhs_view(n, seed))
}

#[wasm_bindgen]
pub fn subspace_demo(n: usize, seed: u64) -> String {
    to_json(subspace_view(n, seed))
}
