//! Gaussian-process regression: conditioning, prediction, posterior draws
//! and marginal-likelihood hyperparameter search.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::kernels::{distance, pairwise_distances, KernelSpec};
use crate::linalg::Cholesky;
use crate::neural::MeanNet;

/// Prior mean of the GP.
#[derive(Clone, Debug, Default)]
pub enum MeanFunction {
    #[default]
    Zero,
    Neural(Arc<MeanNet>),
}

impl MeanFunction {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            MeanFunction::Zero => 0.0,
            MeanFunction::Neural(net) => net.eval(x),
        }
    }
}

#[derive(Clone, Debug)]
struct Fitted {
    chol: Cholesky,
    /// `K⁻¹ (y - m(X))`
    alpha: Vec<f64>,
    residuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct GpModel {
    kernel: KernelSpec,
    mean: MeanFunction,
    train_x: Vec<Vec<f64>>,
    train_y: Vec<f64>,
    fitted: Option<Fitted>,
}

/// Posterior at a set of query points. `cov` is the full covariance.
#[derive(Clone, Debug)]
pub struct Posterior {
    pub points: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

impl Posterior {
    pub fn variance(&self) -> Vec<f64> {
        self.cov.diagonal().iter().copied().collect()
    }
}

impl GpModel {
    pub fn new(kernel: KernelSpec, mean: MeanFunction, train_x: Vec<Vec<f64>>, train_y: Vec<f64>) -> Result<Self> {
        kernel.validate()?;
        if train_x.len() != train_y.len() {
            return Err(Error::invalid(format!(
                "{} training inputs but {} outputs",
                train_x.len(),
                train_y.len()
            )));
        }
        if let Some(first) = train_x.first() {
            let d = first.len();
            if train_x.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
                return Err(Error::invalid("training inputs must be finite and of one dimension"));
            }
        }
        if train_y.iter().any(|y| !y.is_finite()) {
            return Err(Error::invalid("training outputs must be finite"));
        }
        Ok(GpModel { kernel, mean, train_x, train_y, fitted: None })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn mean_function(&self) -> &MeanFunction {
        &self.mean
    }

    pub fn train_x(&self) -> &[Vec<f64>] {
        &self.train_x
    }

    pub fn train_y(&self) -> &[f64] {
        &self.train_y
    }

    pub fn len(&self) -> usize {
        self.train_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_x.is_empty()
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some()
    }

    /// Same data and mean with different hyperparameters (unfitted).
    pub fn with_kernel(&self, kernel: KernelSpec) -> Result<Self> {
        kernel.validate()?;
        Ok(GpModel { kernel, fitted: None, ..self.clone() })
    }

    /// Number of training inputs that exactly repeat an earlier one.
    pub fn duplicate_count(&self) -> usize {
        (1..self.train_x.len()).filter(|&i| self.train_x[..i].contains(&self.train_x[i])).count()
    }

    fn training_matrix(&self, dist: &DMatrix<f64>) -> DMatrix<f64> {
        let mut k = self.kernel.matrix_from_distances(dist, true);
        let jitter = self.kernel.jitter();
        for i in 0..k.nrows() {
            k[(i, i)] += jitter;
        }
        k
    }

    /// Factor `K + (σ_e² + jitter) I` and cache the solve against the
    /// mean-centred targets.
    pub fn fit(self) -> Result<Self> {
        self.fit_with_distances(None)
    }

    fn fit_with_distances(mut self, dist: Option<&DMatrix<f64>>) -> Result<Self> {
        if self.train_x.is_empty() {
            return Err(Error::invalid("a GP needs at least one training point"));
        }
        let k = match dist {
            Some(d) => self.training_matrix(d),
            None => self.training_matrix(&pairwise_distances(&self.train_x)),
        };
        let chol = Cholesky::factor(&k)?;
        if self.kernel.noise_variance == 0.0 {
            let dups = self.duplicate_count();
            if dups > 0 {
                log::debug!("{dups} duplicate training inputs held apart only by jitter");
            }
        }
        let residuals: Vec<f64> =
            self.train_x.iter().zip(&self.train_y).map(|(x, y)| y - self.mean.eval(x)).collect();
        let alpha = chol.solve(&residuals);
        self.fitted = Some(Fitted { chol, alpha, residuals });
        Ok(self)
    }

    fn fitted(&self) -> Result<&Fitted> {
        self.fitted.as_ref().ok_or_else(|| Error::State("GP model has not been fitted".into()))
    }

    /// The cached lower factor of the training covariance.
    pub fn factor(&self) -> Result<DMatrix<f64>> {
        Ok(self.fitted()?.chol.lower())
    }

    fn check_queries(&self, xs: &[Vec<f64>]) -> Result<()> {
        let d = self.train_x[0].len();
        if xs.iter().any(|x| x.len() != d || x.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid(format!("query points must be finite and {d}-dimensional")));
        }
        Ok(())
    }

    /// Full posterior mean and covariance at `xs`.
    pub fn predict(&self, xs: &[Vec<f64>]) -> Result<Posterior> {
        let f = self.fitted()?;
        self.check_queries(xs)?;
        let n = self.train_x.len();
        let m = xs.len();
        // columns v_j = L⁻¹ k(X, x_j)
        let mut v = vec![vec![0.0; n]; m];
        let mut mean = Vec::with_capacity(m);
        for (j, x) in xs.iter().enumerate() {
            let col = &mut v[j];
            for (c, t) in col.iter_mut().zip(&self.train_x) {
                *c = self.kernel.value_at_distance(distance(t, x));
            }
            mean.push(self.mean.eval(x) + col.iter().zip(&f.alpha).map(|(a, b)| a * b).sum::<f64>());
            f.chol.solve_lower_in_place(col);
        }
        let mut cov = DMatrix::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let prior = self.kernel.value_at_distance(distance(&xs[a], &xs[b]));
                let c = prior - v[a].iter().zip(&v[b]).map(|(p, q)| p * q).sum::<f64>();
                cov[(a, b)] = c;
                cov[(b, a)] = c;
            }
        }
        Ok(Posterior { points: xs.to_vec(), mean, cov })
    }

    /// Posterior mean and variance (clamped at zero) at each point separately.
    pub fn predict_diag(&self, xs: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let f = self.fitted()?;
        self.check_queries(xs)?;
        let mut col = vec![0.0; self.train_x.len()];
        let mut means = Vec::with_capacity(xs.len());
        let mut vars = Vec::with_capacity(xs.len());
        for x in xs {
            for (c, t) in col.iter_mut().zip(&self.train_x) {
                *c = self.kernel.value_at_distance(distance(t, x));
            }
            means.push(self.mean.eval(x) + col.iter().zip(&f.alpha).map(|(a, b)| a * b).sum::<f64>());
            f.chol.solve_lower_in_place(&mut col);
            let var = self.kernel.output_variance - col.iter().map(|v| v * v).sum::<f64>();
            vars.push(var.max(0.0));
        }
        Ok((means, vars))
    }

    /// The fitted model with one more observation, updated in O(n²).
    pub fn with_observation(&self, x: Vec<f64>, y: f64) -> Result<Self> {
        let f = self.fitted()?;
        self.check_queries(std::slice::from_ref(&x))?;
        if !y.is_finite() {
            return Err(Error::invalid("observation must be finite"));
        }
        let k: Vec<f64> = self.train_x.iter().map(|t| self.kernel.value_at_distance(distance(t, &x))).collect();
        let c = self.kernel.output_variance + self.kernel.noise_variance + self.kernel.jitter();
        let chol = f.chol.extended(&k, c)?;
        let mut residuals = f.residuals.clone();
        residuals.push(y - self.mean.eval(&x));
        let alpha = chol.solve(&residuals);
        let mut train_x = self.train_x.clone();
        let mut train_y = self.train_y.clone();
        train_x.push(x);
        train_y.push(y);
        Ok(GpModel {
            kernel: self.kernel,
            mean: self.mean.clone(),
            train_x,
            train_y,
            fitted: Some(Fitted { chol, alpha, residuals }),
        })
    }

    /// `-½ rᵀK⁻¹r - ½ log|K| - (n/2) log 2π` with `r = y - m(X)`.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let f = self.fitted()?;
        let quad: f64 = f.residuals.iter().zip(&f.alpha).map(|(r, a)| r * a).sum();
        let n = self.train_x.len() as f64;
        Ok(-0.5 * quad - 0.5 * f.chol.log_det() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }
}

/// Draws from `N(mean, cov)`, one row per draw.
pub fn sample_posterior<R: Rng + ?Sized>(post: &Posterior, n_draws: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let m = post.mean.len();
    let scale = post.cov.diagonal().iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if scale == 0.0 {
        return Ok(vec![post.mean.clone(); n_draws]);
    }
    let mut jitter = 1e-10 * scale;
    let chol = loop {
        let mut k = post.cov.clone();
        for i in 0..m {
            k[(i, i)] += jitter;
        }
        match Cholesky::factor(&k) {
            Ok(c) => break c,
            Err(e) if jitter > 1e-2 * scale => return Err(e),
            Err(_) => jitter *= 10.0,
        }
    };
    Ok((0..n_draws)
        .map(|_| {
            let z: Vec<f64> = (0..m).map(|_| rng.sample(StandardNormal)).collect();
            chol.mul_lower(&z).iter().zip(&post.mean).map(|(a, b)| a + b).collect()
        })
        .collect())
}

/// Search box for (σ², λ, σ_e²), each as `(lower, upper)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperBounds {
    pub output_variance: (f64, f64),
    pub length_scale: (f64, f64),
    pub noise_variance: (f64, f64),
}

impl HyperBounds {
    /// Bounds scaled to the data: `signal` is the mean squared residual of
    /// the targets about the prior mean, `diameter` the input-box diameter.
    pub fn from_scales(signal: f64, diameter: f64) -> Self {
        let s = signal.max(1e-12);
        HyperBounds {
            output_variance: (1e-2 * s, 1e2 * s),
            length_scale: (1e-2 * diameter, 2.0 * diameter),
            noise_variance: (1e-10 * s, 1e-1 * s),
        }
    }

    pub fn for_model(model: &GpModel, diameter: f64) -> Self {
        let n = model.len().max(1) as f64;
        let signal = model
            .train_x
            .iter()
            .zip(&model.train_y)
            .map(|(x, y)| (y - model.mean.eval(x)).powi(2))
            .sum::<f64>()
            / n;
        HyperBounds::from_scales(signal, diameter)
    }

    fn log_box(&self) -> [(f64, f64); 3] {
        [self.output_variance, self.length_scale, self.noise_variance].map(|(a, b)| (a.ln(), b.ln()))
    }
}

const HYPER_STARTS: usize = 8;
const HYPER_SWEEPS: usize = 3;
/// Golden-section stops once the log-space bracket is this narrow.
const GOLDEN_TOL: f64 = 0.02;

/// Multi-start coordinate-wise golden-section search over log (σ², λ, σ_e²),
/// maximizing the log marginal likelihood. The first start is the incoming
/// hyperparameters (clamped into the box); the result is never worse than
/// the incoming model. Returns a fitted model.
pub fn optimize_hyperparameters<R: Rng + ?Sized>(model: &GpModel, bounds: &HyperBounds, rng: &mut R) -> Result<GpModel> {
    if model.len() < 2 {
        return Err(Error::invalid("hyperparameter search needs at least two training points"));
    }
    let dist = pairwise_distances(&model.train_x);
    let base = model.kernel;
    let eval = |p: &[f64; 3]| -> f64 {
        let k = KernelSpec { output_variance: p[0].exp(), length_scale: p[1].exp(), noise_variance: p[2].exp(), ..base };
        match model.with_kernel(k).and_then(|m| m.fit_with_distances(Some(&dist))) {
            Ok(m) => m.log_marginal_likelihood().unwrap_or(f64::NEG_INFINITY),
            Err(_) => f64::NEG_INFINITY,
        }
    };

    let lb = bounds.log_box();
    let incoming = [base.output_variance.ln(), base.length_scale.ln(), base.noise_variance.max(1e-300).ln()];
    let mut best_p = incoming;
    let mut best_v = eval(&incoming);
    let incoming_v = best_v;

    for s in 0..HYPER_STARTS {
        let mut p = if s == 0 {
            [0, 1, 2].map(|i| incoming[i].clamp(lb[i].0, lb[i].1))
        } else {
            [0, 1, 2].map(|i| rng.random_range(lb[i].0..=lb[i].1))
        };
        let mut v = eval(&p);
        for _ in 0..HYPER_SWEEPS {
            for c in 0..3 {
                let (x, fx) = golden_max(lb[c].0, lb[c].1, |t| {
                    let mut q = p;
                    q[c] = t;
                    eval(&q)
                });
                if fx > v {
                    p[c] = x;
                    v = fx;
                }
            }
        }
        if v > best_v {
            best_v = v;
            best_p = p;
        }
    }

    if !best_v.is_finite() || best_v <= incoming_v {
        if !incoming_v.is_finite() {
            log::warn!("hyperparameter search failed at every start; keeping the incoming kernel");
        }
        return model.clone().fit();
    }
    let k = KernelSpec {
        output_variance: best_p[0].exp(),
        length_scale: best_p[1].exp(),
        noise_variance: best_p[2].exp(),
        ..base
    };
    model.with_kernel(k)?.fit_with_distances(Some(&dist))
}

/// Golden-section maximization of `f` on `[a, b]`. Returns the best point seen.
fn golden_max(mut a: f64, mut b: f64, mut f: impl FnMut(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    let (mut bx, mut bf) = if fc >= fd { (c, fc) } else { (d, fd) };
    while b - a > GOLDEN_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c);
            if fc > bf {
                bx = c;
                bf = fc;
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d);
            if fd > bf {
                bx = d;
                bf = fd;
            }
        }
    }
    (bx, bf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{MeanNet, TrainConfig};
    use crate::rng::{stream_rng, Stream};
    use crate::sampling::{lhs, BoxDomain};
    use nalgebra::DVector;
    use proptest::prelude::*;

    fn rng(i: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(42, Stream::Hyperopt, i)
    }

    fn fitted(kernel: KernelSpec, xs: Vec<Vec<f64>>, ys: Vec<f64>) -> GpModel {
        GpModel::new(kernel, MeanFunction::Zero, xs, ys).unwrap().fit().unwrap()
    }

    /// Partitioned-Gaussian posterior by dense LU solves.
    fn dense_oracle(model: &GpModel, xs: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let k = model.kernel();
        let mut kee = k.matrix(model.train_x(), true).unwrap();
        for i in 0..kee.nrows() {
            kee[(i, i)] += k.jitter();
        }
        let kes = k.cross(model.train_x(), xs).unwrap();
        let kss = k.matrix(xs, false).unwrap();
        let y = DVector::from_iterator(
            model.len(),
            model.train_x().iter().zip(model.train_y()).map(|(x, y)| y - model.mean_function().eval(x)),
        );
        let lu = kee.lu();
        let a = lu.solve(&y).unwrap();
        let b = lu.solve(&kes).unwrap();
        let mu = xs.iter().enumerate().map(|(j, x)| model.mean_function().eval(x) + kes.column(j).dot(&a)).collect();
        (mu, kss - kes.transpose() * b)
    }

    #[test]
    fn single_point_factor() {
        let k = KernelSpec::squared_exponential(2.0, 1.0).with_noise(0.5);
        let m = fitted(k, vec![vec![0.3]], vec![1.0]);
        let l = m.factor().unwrap();
        assert!((l[(0, 0)] - (2.0 + 0.5 + k.jitter()).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn duplicates_fit_through_jitter() {
        let k = KernelSpec::squared_exponential(1.0, 1.0);
        let m = GpModel::new(k, MeanFunction::Zero, vec![vec![0.5], vec![0.5]], vec![1.0, 1.0]).unwrap();
        assert_eq!(m.duplicate_count(), 1);
        assert!(m.fit().is_ok());
    }

    #[test]
    fn factor_reproduces_kernel_matrix() {
        let b = BoxDomain::uniform(3, 0.0, 1.0).unwrap();
        let xs = lhs(&b, 50, &mut rng(1)).unwrap();
        let ys = xs.iter().map(|x| x[0]).collect();
        let k = KernelSpec::squared_exponential(1.0, 0.3);
        let m = fitted(k, xs.clone(), ys);
        let l = m.factor().unwrap();
        let mut full = k.matrix(&xs, true).unwrap();
        for i in 0..50 {
            full[(i, i)] += k.jitter();
        }
        assert!((&l * l.transpose() - full).abs().max() < 1e-8);
    }

    #[test]
    fn unfitted_predict_is_state_error() {
        let m = GpModel::new(KernelSpec::default(), MeanFunction::Zero, vec![vec![0.0]], vec![0.0]).unwrap();
        assert!(matches!(m.predict(&[vec![0.0]]), Err(Error::State(_))));
    }

    #[test]
    fn interpolates_and_reverts_to_prior() {
        let xs = vec![vec![0.0, 0.0], vec![1.0, 0.5], vec![-0.5, 0.8]];
        let ys = vec![1.0, -2.0, 0.5];
        let m = fitted(KernelSpec::matern(1.5, 0.7, 2.5), xs.clone(), ys.clone());
        let p = m.predict(&xs).unwrap();
        for (i, y) in ys.iter().enumerate() {
            assert!((p.mean[i] - y).abs() < 1e-8);
            assert!(p.cov[(i, i)] <= 1e-8);
        }
        let far = m.predict(&[vec![100.0, 100.0]]).unwrap();
        assert!(far.mean[0].abs() < 1e-12);
        assert!((far.cov[(0, 0)] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn matches_dense_oracle() {
        let b = BoxDomain::uniform(2, -1.0, 1.0).unwrap();
        let xs = lhs(&b, 6, &mut rng(2)).unwrap();
        let ys = xs.iter().map(|x| (3.0 * x[0]).sin() + x[1] * x[1]).collect();
        let m = fitted(KernelSpec::matern(1.2, 0.6, 1.5).with_noise(1e-3), xs, ys);
        let q = lhs(&b, 3, &mut rng(3)).unwrap();
        let p = m.predict(&q).unwrap();
        let (mu, cov) = dense_oracle(&m, &q);
        for j in 0..3 {
            assert!((p.mean[j] - mu[j]).abs() < 1e-8);
        }
        assert!((&p.cov - &cov).abs().max() < 1e-8);
        let (dm, dv) = m.predict_diag(&q).unwrap();
        for j in 0..3 {
            assert!((dm[j] - mu[j]).abs() < 1e-10);
            assert!((dv[j] - cov[(j, j)].max(0.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn incremental_observation_matches_refit() {
        let b = BoxDomain::uniform(2, -1.0, 1.0).unwrap();
        let xs = lhs(&b, 7, &mut rng(4)).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] - x[1]).collect();
        let k = KernelSpec::matern(1.0, 0.5, 2.5).with_noise(1e-4);
        let m = fitted(k, xs[..6].to_vec(), ys[..6].to_vec());
        let inc = m.with_observation(xs[6].clone(), ys[6]).unwrap();
        let full = fitted(k, xs.clone(), ys);
        let q = lhs(&b, 5, &mut rng(5)).unwrap();
        let (a, va) = inc.predict_diag(&q).unwrap();
        let (c, vc) = full.predict_diag(&q).unwrap();
        for j in 0..5 {
            assert!((a[j] - c[j]).abs() < 1e-10 && (va[j] - vc[j]).abs() < 1e-10);
        }
        assert_eq!(m.len(), 6);
    }

    #[test]
    fn lml_examples() {
        let k = KernelSpec::squared_exponential(1.0, 1.0);
        let one = fitted(k, vec![vec![0.0]], vec![0.0]);
        assert!((one.log_marginal_likelihood().unwrap() + 0.918_938_533_204_672_7).abs() < 1e-9);

        let b = BoxDomain::uniform(1, 0.0, 1.0).unwrap();
        let xs = lhs(&b, 5, &mut rng(6)).unwrap();
        let ys: Vec<f64> = xs.iter().map(|x| x[0] * 2.0 - 0.3).collect();
        let k = KernelSpec::matern(1.0, 0.4, 2.5).with_noise(1e-2);
        let m = fitted(k, xs.clone(), ys.clone());
        let mut kee = k.matrix(&xs, true).unwrap();
        for i in 0..5 {
            kee[(i, i)] += k.jitter();
        }
        let y = DVector::from_vec(ys.clone());
        let quad = y.dot(&kee.clone().lu().solve(&y).unwrap());
        let oracle = -0.5 * quad - 0.5 * kee.determinant().ln() - 2.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_marginal_likelihood().unwrap() - oracle).abs() < 1e-8);

        // scaling y only changes the quadratic term
        let scaled = fitted(k, xs, ys.iter().map(|v| 3.0 * v).collect());
        let d1 = m.log_marginal_likelihood().unwrap() - scaled.log_marginal_likelihood().unwrap();
        assert!((d1 - 0.5 * quad * 8.0).abs() < 1e-8);
    }

    #[test]
    fn posterior_draws() {
        let post = Posterior { points: vec![vec![0.0]; 2], mean: vec![1.0, 2.0], cov: DMatrix::zeros(2, 2) };
        let d = sample_posterior(&post, 3, &mut rng(7)).unwrap();
        assert!(d.iter().all(|row| row == &post.mean));

        let post = Posterior { points: vec![vec![0.0]], mean: vec![0.7], cov: DMatrix::from_element(1, 1, 4.0) };
        let n = 100_000;
        let draws = sample_posterior(&post, n, &mut rng(8)).unwrap();
        let mean = draws.iter().map(|r| r[0]).sum::<f64>() / n as f64;
        assert!((mean - 0.7).abs() < 4.0 * 2.0 / (n as f64).sqrt());
        let again = sample_posterior(&post, n, &mut rng(8)).unwrap();
        assert_eq!(draws, again);
    }

    #[test]
    fn mean_function_is_reproduced_without_residuals() {
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let net = MeanNet::init(2, &cfg, &mut rng(9)).unwrap();
        let mean = MeanFunction::Neural(Arc::new(net));
        let b = BoxDomain::uniform(2, -1.0, 1.0).unwrap();
        let xs = lhs(&b, 8, &mut rng(10)).unwrap();
        let ys = xs.iter().map(|x| mean.eval(x)).collect();
        let m = GpModel::new(KernelSpec::default(), mean.clone(), xs, ys).unwrap().fit().unwrap();
        let q = lhs(&b, 20, &mut rng(11)).unwrap();
        let (mu, _) = m.predict_diag(&q).unwrap();
        for (x, v) in q.iter().zip(mu) {
            assert!((v - mean.eval(x)).abs() < 1e-8);
        }
    }

    fn se_draw(n: usize, ls: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
        let b = BoxDomain::uniform(1, 0.0, 5.0).unwrap();
        let xs = lhs(&b, n, &mut rng(seed)).unwrap();
        let k = KernelSpec::squared_exponential(1.0, ls).with_noise(1e-4);
        let prior = GpModel::new(k, MeanFunction::Zero, vec![vec![-1e6]], vec![0.0]).unwrap().fit().unwrap();
        let post = prior.predict(&xs).unwrap();
        let ys = sample_posterior(&post, 1, &mut rng(seed + 1)).unwrap().remove(0);
        (xs, ys)
    }

    #[test]
    fn recovers_length_scale_like_grid_search() {
        let (xs, ys) = se_draw(40, 0.5, 20);
        let start = KernelSpec::squared_exponential(1.0, 2.0).with_noise(1e-2);
        let m = GpModel::new(start, MeanFunction::Zero, xs, ys).unwrap();
        let bounds = HyperBounds::for_model(&m, 5.0);
        let opt = optimize_hyperparameters(&m, &bounds, &mut rng(21)).unwrap();
        let ls = opt.kernel().length_scale;
        assert!(ls > 0.25 && ls < 1.0, "fitted length scale {ls}");

        // grid over λ with the fitted σ², σ_e² held fixed
        let grid_best = (0..200)
            .map(|i| 0.05 * (200.0f64).powf(i as f64 / 199.0))
            .map(|l| {
                let k = KernelSpec { length_scale: l, ..*opt.kernel() };
                (l, m.with_kernel(k).unwrap().fit().unwrap().log_marginal_likelihood().unwrap())
            })
            .fold((0.0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a });
        assert!((ls / grid_best.0).ln().abs() < 2f64.ln());
        assert!(opt.log_marginal_likelihood().unwrap() >= m.clone().fit().unwrap().log_marginal_likelihood().unwrap());
    }

    #[test]
    fn constant_targets_push_noise_to_lower_bound() {
        let b = BoxDomain::uniform(2, -1.0, 1.0).unwrap();
        let xs = lhs(&b, 15, &mut rng(30)).unwrap();
        let m = GpModel::new(KernelSpec::default().with_noise(1e-3), MeanFunction::Zero, xs, vec![2.0; 15]).unwrap();
        let bounds = HyperBounds::for_model(&m, b.diameter());
        let opt = optimize_hyperparameters(&m, &bounds, &mut rng(31)).unwrap();
        let (lo, hi) = bounds.noise_variance;
        let frac = (opt.kernel().noise_variance.ln() - lo.ln()) / (hi.ln() - lo.ln());
        assert!(frac < 0.05, "noise {} sits at {frac} of its log range", opt.kernel().noise_variance);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn extra_data_never_raises_variance(seed in any::<u64>(), n in 2usize..8) {
            let b = BoxDomain::uniform(2, -1.0, 1.0).unwrap();
            let mut r = stream_rng(seed, Stream::Design, 0);
            let xs = lhs(&b, n + 1, &mut r).unwrap();
            let q = lhs(&b, 4, &mut r).unwrap();
            let ys: Vec<f64> = xs.iter().map(|x| x[0] * x[1]).collect();
            let k = KernelSpec::matern(1.0, 0.5, 2.5).with_noise(1e-6);
            let small = fitted(k, xs[..n].to_vec(), ys[..n].to_vec());
            let big = fitted(k, xs, ys);
            let (_, vs) = small.predict_diag(&q).unwrap();
            let (_, vb) = big.predict_diag(&q).unwrap();
            for (a, c) in vs.iter().zip(&vb) {
                prop_assert!(*c <= a + 1e-8);
            }
        }

        #[test]
        fn interpolation_without_noise(seed in any::<u64>(), n in 1usize..10) {
            let b = BoxDomain::uniform(3, -1.0, 1.0).unwrap();
            let xs = lhs(&b, n, &mut stream_rng(seed, Stream::Design, 0)).unwrap();
            let ys: Vec<f64> = xs.iter().map(|x| x.iter().sum::<f64>().cos()).collect();
            let m = fitted(KernelSpec::matern(1.0, 0.4, 2.5), xs.clone(), ys.clone());
            let (mu, _) = m.predict_diag(&xs).unwrap();
            for (a, c) in mu.iter().zip(&ys) {
                prop_assert!((a - c).abs() < 1e-6);
            }
        }
    }
}
