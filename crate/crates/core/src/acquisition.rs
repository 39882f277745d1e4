//! Acquisition scores (all oriented so that larger is better) and greedy
//! batch selection with hallucinated observations.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::special::{normal_cdf, normal_pdf};

/// Posterior standard deviations are floored here before scoring.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Per-iteration decay factor of the PI trade-off when decay is enabled.
pub const PI_DECAY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcquisitionFamily {
    Pi,
    Ei,
    Ucb,
}

/// Value assigned to a just-selected point while the rest of the batch is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FantasyMode {
    /// `μ + zσ` with `z ~ N(0, 1)`.
    #[default]
    Sample,
    /// `μ` (z = 0).
    KrigingBeliever,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcquisitionSpec {
    pub family: AcquisitionFamily,
    pub pi_tradeoff: f64,
    pub pi_decay: bool,
    pub ucb_beta: f64,
    pub fantasy: FantasyMode,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        AcquisitionSpec {
            family: AcquisitionFamily::Ei,
            pi_tradeoff: 0.0,
            pi_decay: false,
            ucb_beta: 2.0,
            fantasy: FantasyMode::Sample,
        }
    }
}

impl AcquisitionSpec {
    pub fn new(family: AcquisitionFamily) -> Self {
        AcquisitionSpec { family, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pi_tradeoff >= 0.0 && self.pi_tradeoff.is_finite()) {
            return Err(Error::invalid("PI trade-off must be a non-negative number"));
        }
        if !(self.ucb_beta > 0.0 && self.ucb_beta.is_finite()) {
            return Err(Error::invalid("UCB beta must be positive"));
        }
        Ok(())
    }

    /// The spec in force at `iteration` (applies the optional PI decay).
    pub fn at_iteration(&self, iteration: usize) -> Self {
        let mut s = *self;
        if s.pi_decay {
            s.pi_tradeoff *= PI_DECAY.powi(iteration as i32);
        }
        s
    }

    /// Score a candidate with posterior mean `mu` and standard deviation
    /// `sigma` against the current best (minimum) loss.
    pub fn score(&self, mu: f64, sigma: f64, best: f64) -> Result<f64> {
        if !(sigma > 0.0) {
            return Err(Error::invalid(format!("posterior standard deviation must be positive, got {sigma}")));
        }
        Ok(match self.family {
            AcquisitionFamily::Pi => normal_cdf((best - self.pi_tradeoff - mu) / sigma),
            AcquisitionFamily::Ei => expected_improvement(mu, sigma, best),
            AcquisitionFamily::Ucb => -(mu - self.ucb_beta * sigma),
        })
    }
}

fn expected_improvement(mu: f64, sigma: f64, best: f64) -> f64 {
    let u = (best - mu) / sigma;
    (sigma * (u * normal_cdf(u) + normal_pdf(u))).max(0.0)
}

/// Indices into `pool` of `n` greedy picks, in selection order.
///
/// After each pick the model is conditioned on a hallucinated value at the
/// chosen point (a scratch copy; `model` is untouched). The incumbent `best`
/// stays the minimum of the real training targets throughout.
pub fn select_batch_indices<R: Rng + ?Sized>(
    model: &GpModel,
    pool: &[Vec<f64>],
    n: usize,
    spec: &AcquisitionSpec,
    rng: &mut R,
) -> Result<Vec<usize>> {
    spec.validate()?;
    if pool.is_empty() || n > pool.len() {
        return Err(Error::invalid(format!("cannot pick {n} points from a pool of {}", pool.len())));
    }
    if model.is_empty() {
        return Err(Error::invalid("batch selection needs a model with training data"));
    }
    let best = model.train_y().iter().copied().fold(f64::INFINITY, f64::min);
    let mut scratch = model.clone();
    let mut taken = vec![false; pool.len()];
    let mut picks = Vec::with_capacity(n);
    for _ in 0..n {
        let (mu, var) = scratch.predict_diag(pool)?;
        let mut arg = None;
        let mut top = f64::NEG_INFINITY;
        for i in 0..pool.len() {
            if taken[i] {
                continue;
            }
            let s = spec.score(mu[i], var[i].sqrt().max(SIGMA_FLOOR), best)?;
            if arg.is_none() || s > top {
                arg = Some(i);
                top = s;
            }
        }
        let i = arg.expect("pool has an untaken point");
        taken[i] = true;
        picks.push(i);
        let z: f64 = match spec.fantasy {
            FantasyMode::Sample => rng.sample(StandardNormal),
            FantasyMode::KrigingBeliever => 0.0,
        };
        if picks.len() < n {
            scratch = scratch.with_observation(pool[i].clone(), mu[i] + z * var[i].sqrt())?;
        }
    }
    Ok(picks)
}

/// The selected pool points themselves.
pub fn select_batch<R: Rng + ?Sized>(
    model: &GpModel,
    pool: &[Vec<f64>],
    n: usize,
    spec: &AcquisitionSpec,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    Ok(select_batch_indices(model, pool, n, spec, rng)?.into_iter().map(|i| pool[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::MeanFunction;
    use crate::kernels::KernelSpec;
    use crate::rng::{stream_rng, Stream};
    use crate::sampling::{lhs, BoxDomain};
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(i: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(5, Stream::Fantasy, i)
    }

    fn model(seed: u64) -> GpModel {
        let b = BoxDomain::uniform(2, -1.0, 1.0).unwrap();
        let xs = lhs(&b, 8, &mut rng(seed)).unwrap();
        let ys = xs.iter().map(|x| (x[0] - 0.3).powi(2) + (x[1] + 0.2).powi(2)).collect();
        GpModel::new(KernelSpec::matern(0.5, 0.6, 2.5).with_noise(1e-6), MeanFunction::Zero, xs, ys)
            .unwrap()
            .fit()
            .unwrap()
    }

    #[test]
    fn score_examples() {
        let ei = AcquisitionSpec::new(AcquisitionFamily::Ei);
        assert!((ei.score(1.0, 1.0, 1.0).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-12);
        assert!(ei.score(11.0, 1.0, 1.0).unwrap() <= 1e-15);
        let pi = AcquisitionSpec::new(AcquisitionFamily::Pi);
        assert_eq!(pi.score(2.0, 0.5, 2.0).unwrap(), 0.5);
        let ucb = AcquisitionSpec::new(AcquisitionFamily::Ucb);
        assert_eq!(ucb.score(1.0, 0.5, 0.0).unwrap(), -(1.0 - 2.0 * 0.5));
        assert!(ei.score(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn pi_decay_schedule() {
        let s = AcquisitionSpec { pi_tradeoff: 1.0, pi_decay: true, ..AcquisitionSpec::new(AcquisitionFamily::Pi) };
        assert!((s.at_iteration(3).pi_tradeoff - 0.729).abs() < 1e-12);
        let flat = AcquisitionSpec { pi_decay: false, ..s };
        assert_eq!(flat.at_iteration(3).pi_tradeoff, 1.0);
    }

    #[test]
    fn ei_matches_monte_carlo_example() {
        let mut r = rng(1);
        let n = 10_000_000;
        let acc: f64 = (0..n).map(|_| (-r.sample::<f64, _>(StandardNormal)).max(0.0)).sum();
        assert!((acc / n as f64 - 0.398_942).abs() < 1e-3);
    }

    #[test]
    fn single_pick_is_argmax() {
        let m = model(2);
        let pool = lhs(&BoxDomain::uniform(2, -1.0, 1.0).unwrap(), 50, &mut rng(3)).unwrap();
        let spec = AcquisitionSpec::default();
        let picks = select_batch_indices(&m, &pool, 1, &spec, &mut rng(4)).unwrap();
        let best = m.train_y().iter().copied().fold(f64::INFINITY, f64::min);
        let (mu, var) = m.predict_diag(&pool).unwrap();
        let scores: Vec<f64> =
            (0..50).map(|i| spec.score(mu[i], var[i].sqrt().max(SIGMA_FLOOR), best).unwrap()).collect();
        assert!(scores.iter().all(|s| *s <= scores[picks[0]]));
    }

    #[test]
    fn whole_pool_and_too_many() {
        let m = model(5);
        let pool = lhs(&BoxDomain::uniform(2, -1.0, 1.0).unwrap(), 6, &mut rng(6)).unwrap();
        let mut picks = select_batch_indices(&m, &pool, 6, &AcquisitionSpec::default(), &mut rng(7)).unwrap();
        picks.sort();
        assert_eq!(picks, (0..6).collect::<Vec<_>>());
        assert!(select_batch(&m, &pool, 7, &AcquisitionSpec::default(), &mut rng(7)).is_err());
    }

    /// Replays the fantasy loop step by step with full refits.
    fn scripted(m: &GpModel, pool: &[Vec<f64>], n: usize, spec: &AcquisitionSpec, seed: u64) -> Vec<usize> {
        let mut r = rng(seed);
        let best = m.train_y().iter().copied().fold(f64::INFINITY, f64::min);
        let (mut xs, mut ys) = (m.train_x().to_vec(), m.train_y().to_vec());
        let mut out: Vec<usize> = Vec::new();
        for _ in 0..n {
            let g = GpModel::new(*m.kernel(), MeanFunction::Zero, xs.clone(), ys.clone()).unwrap().fit().unwrap();
            let mut best_i = usize::MAX;
            let mut best_s = f64::NEG_INFINITY;
            let mut best_mv = (0.0, 0.0);
            for (i, p) in pool.iter().enumerate() {
                if out.contains(&i) {
                    continue;
                }
                let post = g.predict(std::slice::from_ref(p)).unwrap();
                let var = post.cov[(0, 0)].max(0.0);
                let s = spec.score(post.mean[0], var.sqrt().max(SIGMA_FLOOR), best).unwrap();
                if best_i == usize::MAX || s > best_s {
                    best_i = i;
                    best_s = s;
                    best_mv = (post.mean[0], var);
                }
            }
            out.push(best_i);
            let z: f64 = r.sample(StandardNormal);
            xs.push(pool[best_i].clone());
            ys.push(best_mv.0 + z * best_mv.1.sqrt());
        }
        out
    }

    #[test]
    fn batch_matches_scripted_replay() {
        let m = model(8);
        let pool = lhs(&BoxDomain::uniform(2, -1.0, 1.0).unwrap(), 40, &mut rng(9)).unwrap();
        for family in [AcquisitionFamily::Ei, AcquisitionFamily::Pi, AcquisitionFamily::Ucb] {
            let spec = AcquisitionSpec::new(family);
            let got = select_batch_indices(&m, &pool, 4, &spec, &mut rng(10)).unwrap();
            assert_eq!(got, scripted(&m, &pool, 4, &spec, 10), "{family:?}");
        }
        let before = m.train_y().to_vec();
        let kb = AcquisitionSpec { fantasy: FantasyMode::KrigingBeliever, ..Default::default() };
        let a = select_batch_indices(&m, &pool, 4, &kb, &mut rng(11)).unwrap();
        let b = select_batch_indices(&m, &pool, 4, &kb, &mut rng(12)).unwrap();
        assert_eq!(a, b);
        assert_eq!(m.train_y(), &before[..]);
    }

    proptest! {
        #[test]
        fn ei_is_non_negative(mu in -50.0f64..50.0, sigma in 1e-9f64..20.0, best in -50.0f64..50.0) {
            let s = AcquisitionSpec::default().score(mu, sigma, best).unwrap();
            prop_assert!(s >= 0.0);
        }

        #[test]
        fn shifting_means_keeps_argmax(seed in any::<u64>(), c in -100.0f64..100.0) {
            let mut r = stream_rng(seed, Stream::Pool, 0);
            let mus: Vec<f64> = (0..30).map(|_| r.random_range(-2.0..2.0)).collect();
            let sig: Vec<f64> = (0..30).map(|_| r.random_range(0.05..1.0)).collect();
            let best = r.random_range(-1.0..1.0);
            for fam in [AcquisitionFamily::Pi, AcquisitionFamily::Ei] {
                let spec = AcquisitionSpec::new(fam);
                let arg = |shift: f64| {
                    (0..30)
                        .map(|i| spec.score(mus[i] + shift, sig[i], best + shift).unwrap())
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |a, (i, s)| if s > a.1 { (i, s) } else { a })
                        .0
                };
                prop_assert_eq!(arg(0.0), arg(c));
            }
        }

        #[test]
        fn ei_vanishes_with_certainty(gap in 0.01f64..10.0) {
            let s = AcquisitionSpec::default().score(gap, 1e-6, 0.0).unwrap();
            prop_assert!(s < 1e-12);
        }
    }
}
