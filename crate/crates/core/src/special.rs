//! Special functions: the standard normal and the modified Bessel function of
//! the second kind, the latter evaluated in log space so that large orders do
//! not overflow.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::erfc;
use statrs::function::gamma::gamma;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// `(1/Γ(1-μ) - 1/Γ(1+μ)) / (2μ)` and `(1/Γ(1-μ) + 1/Γ(1+μ)) / 2` for |μ| ≤ 1/2.
fn temme_gammas(mu: f64) -> (f64, f64) {
    if mu.abs() < 1e-3 {
        // Taylor coefficients of 1/Γ(1+z).
        const A2: f64 = -0.655_878_071_520_253_8;
        const A3: f64 = -0.042_002_635_034_095_2;
        const A4: f64 = 0.166_538_611_382_291_5;
        const A5: f64 = -0.042_197_734_555_544_3;
        let m2 = mu * mu;
        let g1 = -(EULER_GAMMA + A3 * m2 + A5 * m2 * m2);
        let g2 = 1.0 + A2 * m2 + A4 * m2 * m2;
        (g1, g2)
    } else {
        let minus = 1.0 / gamma(1.0 - mu);
        let plus = 1.0 / gamma(1.0 + mu);
        ((minus - plus) / (2.0 * mu), (minus + plus) / 2.0)
    }
}

/// Natural log of `K_nu(x)` for `nu >= 0`, `x > 0`.
///
/// Temme's series for `x < 2`, Steed's continued fraction otherwise, followed
/// by the (stable) forward recurrence in the order with periodic rescaling.
pub fn ln_bessel_k(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x > 0.0, "ln_bessel_k needs nu >= 0 and x > 0");
    const EPS: f64 = 1e-16;
    const MAX_ITER: usize = 10_000;

    let steps = (nu + 0.5).floor() as usize;
    let mu = nu - steps as f64;
    let mu2 = mu * mu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;

    // (K_mu, K_{mu+1}) scaled by exp(log_scale)
    let (mut k_mu, mut k_mu1, mut log_scale);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * mu;
        let fact = if pimu.abs() < EPS { 1.0 } else { pimu / pimu.sin() };
        let d = -x2.ln();
        let e = mu * d;
        let fact2 = if e.abs() < EPS { 1.0 } else { e.sinh() / e };
        let (gam1, gam2) = temme_gammas(mu);
        let gampl = 1.0 / gamma(1.0 + mu);
        let gammi = 1.0 / gamma(1.0 - mu);
        let mut ff = fact * (gam1 * e.cosh() + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = e.exp();
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            ff = (fi * ff + p + q) / (fi * fi - mu2);
            c *= dd / fi;
            p /= fi - mu;
            q /= fi + mu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - fi * ff);
            if del.abs() < sum.abs() * EPS {
                break;
            }
        }
        k_mu = sum;
        k_mu1 = sum1 * xi2;
        log_scale = 0.0;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - mu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        for i in 1..=MAX_ITER {
            let fi = i as f64;
            a -= 2.0 * fi;
            c = -a * c / (fi + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            delh *= b * d - 1.0;
            h += delh;
            let dels = q * delh;
            s += dels;
            if (dels / s).abs() < EPS {
                break;
            }
        }
        h *= a1;
        // exp(-x) is folded into the log scale to avoid underflow.
        k_mu = (PI / (2.0 * x)).sqrt() / s;
        k_mu1 = k_mu * (mu + x + 0.5 - h) * xi;
        log_scale = -x;
    }

    for i in 1..=steps {
        let next = (mu + i as f64) * xi2 * k_mu1 + k_mu;
        k_mu = k_mu1;
        k_mu1 = next;
        if k_mu1.abs() > 1e250 {
            k_mu *= 1e-250;
            k_mu1 *= 1e-250;
            log_scale += 250.0 * std::f64::consts::LN_10;
        }
    }
    k_mu.ln() + log_scale
}
