//! Closed-form oracles: normal distribution functions, the near-maturity
//! asymptote of the value function, the frictionless goal-reaching target,
//! frictionless power-utility values and first-passage probabilities.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use libm::erfc;
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};
use crate::market::{liquidation_value, CostSpec, MarketModel};
use crate::utility::Utility;

/// Standard normal CDF, via `erfc` so the lower tail keeps full relative
/// precision.
pub fn norm_cdf(q: f64) -> f64 {
    0.5 * erfc(-q * FRAC_1_SQRT_2)
}

pub fn norm_pdf(q: f64) -> f64 {
    (-0.5 * q * q).exp() / (2.0 * PI).sqrt()
}

/// Inverse standard normal CDF on the open unit interval.
pub fn norm_inv(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::domain("norm_inv", format!("probability {u} outside (0, 1)")));
    }
    let mut q = -SQRT_2 * erfc_inv(2.0 * u);
    // Newton polish against the CDF above; the starting guess is only
    // accurate to about 1e-12.
    for _ in 0..2 {
        let d = norm_pdf(q);
        if d > 0.0 {
            q -= (norm_cdf(q) - u) / d;
        }
    }
    Ok(q)
}

/// `ln Phi(q)`, finite far into the lower tail.
pub fn log_norm_cdf(q: f64) -> f64 {
    if q > -30.0 {
        norm_cdf(q).ln()
    } else {
        // Mills-ratio expansion.
        let q2 = q * q;
        -0.5 * q2 - (-q).ln() - 0.5 * (2.0 * PI).ln() + (1.0 - 1.0 / q2 + 3.0 / (q2 * q2)).ln()
    }
}

/// Evaluation point for [`terminal_asymptote`].
#[derive(Debug, Clone, Copy)]
pub struct AsymptoteQuery<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub costs: CostSpec,
    pub sigma_hat: f64,
    pub horizon: f64,
    pub utility: &'a Utility,
}

/// Near-maturity asymptote of the value function.
///
/// `U(z)` plus, for each jump above `z`, the jump size weighted by the
/// probability that a driftless position crosses it before maturity.
pub fn terminal_asymptote(q: &AsymptoteQuery<'_>) -> Result<f64> {
    if !(q.t < q.horizon) {
        return Err(Error::domain(
            "terminal_asymptote",
            format!("time {} not before the horizon {}", q.t, q.horizon),
        ));
    }
    let z = liquidation_value(q.x, q.y, &q.costs)?;
    asymptote_from_wealth(q.utility, q.x, z, q.sigma_hat, q.horizon - q.t)
}

/// Same as [`terminal_asymptote`] with the wealth `z` given directly.
pub fn asymptote_from_wealth(u: &Utility, x: f64, z: f64, sigma_hat: f64, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain("terminal_asymptote", "time to maturity must be > 0"));
    }
    let mut value = u.eval(z)?;
    for jump in u.jumps().iter().filter(|j| j.at > z) {
        let scale = (jump.at - x).abs() * sigma_hat * tau.sqrt();
        if scale > 0.0 {
            value += 2.0 * norm_cdf((z - jump.at) / scale) * jump.size();
        }
    }
    Ok(value)
}

/// Frictionless goal-reaching stock position `phi(Phi^-1(z)) / (sigma sqrt(tau))`.
pub fn browne_target(z: f64, sigma: f64, tau: f64) -> Result<f64> {
    if !(z > 0.0 && z < 1.0) {
        return Err(Error::domain("browne_target", format!("wealth {z} outside (0, 1)")));
    }
    if !(tau > 0.0) || !(sigma > 0.0) {
        return Err(Error::domain("browne_target", "sigma and tau must be > 0"));
    }
    Ok(norm_pdf(norm_inv(z)?) / (sigma * tau.sqrt()))
}

/// `P(max_{u <= tau} (a u + s B_u) >= b)` for `b > 0`.
pub fn first_passage_prob(a: f64, s: f64, b: f64, tau: f64) -> Result<f64> {
    if !(s > 0.0 && tau > 0.0 && b > 0.0) {
        return Err(Error::domain("first_passage_prob", "need s > 0, tau > 0, b > 0"));
    }
    let st = s * tau.sqrt();
    let direct = norm_cdf((a * tau - b) / st);
    let reflected = (2.0 * a * b / (s * s) + log_norm_cdf((-a * tau - b) / st)).exp();
    Ok((direct + reflected).min(1.0))
}

/// Frictionless factor `F(tau, nu)` of power utility `z^p/p`, so that the
/// Merton value is `z^p/p * F`.
///
/// For the mean-reverting model the exponent `A nu^2 + B nu + C` is
/// tabulated by RK4 on a uniform grid of time-to-maturity.
#[derive(Debug, Clone)]
pub struct CrraFactor {
    p: f64,
    kind: FactorKind,
}

#[derive(Debug, Clone)]
enum FactorKind {
    Constant { rate: f64 },
    Affine { step: f64, abc: Vec<[f64; 3]> },
}

/// Number of RK4 steps over the horizon.
const RICCATI_STEPS: usize = 2000;
const RICCATI_BLOWUP: f64 = 1e8;

impl CrraFactor {
    pub fn new(model: &MarketModel, p: f64, horizon: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::validation("utility.p", "exponent must lie in (0, 1)"));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::validation("problem.horizon", "must be finite and >= 0"));
        }
        let gamma = p / (2.0 * (1.0 - p));
        let kind = match *model {
            MarketModel::Gbm { eta, sigma, .. } => FactorKind::Constant {
                rate: gamma * eta * eta / (sigma * sigma),
            },
            MarketModel::GaussianMeanReturn {
                kappa,
                nu_bar,
                zeta,
                rho,
                ..
            } => {
                let rhs = |s: [f64; 3]| -> [f64; 3] {
                    let [a, b, _] = s;
                    let tilt = 1.0 + 2.0 * rho * zeta * a;
                    [
                        2.0 * zeta * zeta * a * a - 2.0 * kappa * a + gamma * tilt * tilt,
                        2.0 * zeta * zeta * a * b + 2.0 * kappa * nu_bar * a - kappa * b
                            + 2.0 * gamma * tilt * rho * zeta * b,
                        zeta * zeta * a
                            + 0.5 * zeta * zeta * b * b
                            + kappa * nu_bar * b
                            + gamma * rho * rho * zeta * zeta * b * b,
                    ]
                };
                let step = if horizon > 0.0 {
                    horizon / RICCATI_STEPS as f64
                } else {
                    1.0
                };
                let mut abc = Vec::with_capacity(RICCATI_STEPS + 1);
                let mut s = [0.0; 3];
                abc.push(s);
                let axpy = |s: [f64; 3], k: [f64; 3], h: f64| {
                    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2]]
                };
                for n in 0..RICCATI_STEPS {
                    let k1 = rhs(s);
                    let k2 = rhs(axpy(s, k1, 0.5 * step));
                    let k3 = rhs(axpy(s, k2, 0.5 * step));
                    let k4 = rhs(axpy(s, k3, step));
                    for i in 0..3 {
                        s[i] += step / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                    if !s.iter().all(|v| v.is_finite()) || s[0].abs() > RICCATI_BLOWUP {
                        return Err(Error::Explosion {
                            critical_tau: (n + 1) as f64 * step,
                        });
                    }
                    abc.push(s);
                }
                FactorKind::Affine { step, abc }
            }
        };
        Ok(CrraFactor { p, kind })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Exponent coefficients `(A, B, C)` at time to maturity `tau`.
    pub fn coefficients(&self, tau: f64) -> Result<[f64; 3]> {
        match &self.kind {
            FactorKind::Constant { rate } => Ok([0.0, 0.0, rate * tau]),
            FactorKind::Affine { step, abc } => {
                let pos = tau / step;
                let last = (abc.len() - 1) as f64;
                if !(pos >= 0.0) || pos > last * (1.0 + 1e-12) {
                    return Err(Error::domain(
                        "crra_factor",
                        format!("time to maturity {tau} outside the integrated range"),
                    ));
                }
                let pos = pos.min(last);
                let i = (pos.floor() as usize).min(abc.len() - 2);
                let w = pos - i as f64;
                let (lo, hi) = (abc[i], abc[i + 1]);
                Ok([
                    lo[0] + w * (hi[0] - lo[0]),
                    lo[1] + w * (hi[1] - lo[1]),
                    lo[2] + w * (hi[2] - lo[2]),
                ])
            }
        }
    }

    pub fn factor(&self, tau: f64, nu: f64) -> Result<f64> {
        let [a, b, c] = self.coefficients(tau)?;
        Ok((a * nu * nu + b * nu + c).exp())
    }
}

/// Frictionless Merton value `z^p/p * F(T - t, nu)` of power utility.
pub fn crra_frictionless_value(
    t: f64,
    z: f64,
    p: f64,
    model: &MarketModel,
    horizon: f64,
    nu: f64,
) -> Result<f64> {
    if !(z >= 0.0) {
        return Err(Error::domain("crra_frictionless_value", "wealth must be >= 0"));
    }
    if t > horizon {
        return Err(Error::domain("crra_frictionless_value", "time past the horizon"));
    }
    let tau = horizon - t;
    let f = CrraFactor::new(model, p, tau)?.factor(tau, nu)?;
    Ok(z.powf(p) / p * f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::{make_utility, UtilitySpec};
    use proptest::prelude::*;

    // Reference values from an independent 30-digit evaluation.
    const PHI_M196: f64 = 0.024997895148220436;
    const PHI_M2_3: f64 = 0.25249253754692291;

    #[test]
    fn normal_values() {
        assert_eq!(norm_cdf(0.0), 0.5);
        assert!((norm_pdf(0.0) - 0.3989422804014327).abs() < 1e-15);
        assert!((norm_cdf(-1.96) - PHI_M196).abs() < 1e-12);
        assert!((norm_cdf(-2.0 / 3.0) - PHI_M2_3).abs() < 1e-12);
        assert!(norm_inv(0.0).is_err());
        assert!(norm_inv(1.0).is_err());
        assert!((norm_inv(0.975).unwrap() - 1.959963984540054).abs() < 1e-9);
    }

    #[test]
    fn log_cdf_tail_is_continuous() {
        let a = log_norm_cdf(-29.999);
        let b = log_norm_cdf(-30.001);
        assert!((a - b).abs() < 0.07, "{a} {b}");
        assert!(log_norm_cdf(-100.0).is_finite());
    }

    fn goal() -> Utility {
        make_utility(UtilitySpec::GoalReaching { target: 1.0 }, 0.0).unwrap()
    }

    #[test]
    fn goal_asymptote() {
        let u = goal();
        assert_eq!(asymptote_from_wealth(&u, 0.5, 1.2, 0.3, 0.5).unwrap(), 1.0);
        let v = asymptote_from_wealth(&u, 0.5, 0.9, 0.3, 1.0).unwrap();
        assert!((v - 2.0 * PHI_M2_3).abs() < 1e-12);
        assert!((v - 0.50498).abs() < 1e-5);
        let v = asymptote_from_wealth(&u, 0.5, 0.9, 0.3, 0.01).unwrap();
        assert!((v / 2.616784937210605e-11 - 1.0).abs() < 1e-9, "{v}");
        // cash already at the jump: no correction
        assert_eq!(asymptote_from_wealth(&u, 1.0, 0.9, 0.3, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn asymptote_via_query() {
        let u = goal();
        let costs = CostSpec::symmetric(1e-3).unwrap();
        let q = AsymptoteQuery {
            t: 0.0,
            x: 0.5,
            y: 0.4 / 0.999,
            costs,
            sigma_hat: 0.3,
            horizon: 1.0,
            utility: &u,
        };
        assert!((terminal_asymptote(&q).unwrap() - 2.0 * PHI_M2_3).abs() < 1e-12);
        let q = AsymptoteQuery { t: 1.0, ..q };
        assert!(terminal_asymptote(&q).is_err());
    }

    #[test]
    fn browne_values() {
        let v = browne_target(0.5, 0.3, 0.01).unwrap();
        assert!((v - 13.298076013381092).abs() < 1e-9);
        assert!(browne_target(1e-12, 0.3, 0.01).unwrap() < 1e-8);
        assert!(browne_target(0.0, 0.3, 0.01).is_err());
        let a = browne_target(0.2, 0.3, 0.05).unwrap();
        let b = browne_target(0.8, 0.3, 0.05).unwrap();
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn passage_values() {
        let v = first_passage_prob(0.0, 1.0, 1.0, 1.0).unwrap();
        assert!((v - 0.31731050786291415).abs() < 1e-12);
        let v = first_passage_prob(0.1, 1.0, 1.0, 1.0).unwrap();
        assert!((v - 0.34977).abs() < 1e-5);
        let v = first_passage_prob(0.1, 1.0, 1e-12, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-9);
        // driftless GBM: ever hitting b from S0 has probability S0/b
        let sig: f64 = 0.3;
        let b = 2.0f64.ln();
        let v = first_passage_prob(-0.5 * sig * sig, sig, b, 1e5).unwrap();
        assert!((v - 0.5).abs() < 1e-6);
    }

    #[test]
    fn passage_large_exponent_does_not_overflow() {
        let v = first_passage_prob(50.0, 0.1, 10.0, 0.01).unwrap();
        assert!(v.is_finite() && (0.0..=1.0).contains(&v));
    }

    #[test]
    fn crra_gbm() {
        let m = MarketModel::gbm(0.04, 0.3);
        let v = crra_frictionless_value(0.0, 1.0, 0.5, &m, 1.0, 0.0).unwrap();
        assert!((v - 2.0 * (0.0016f64 / 0.18).exp()).abs() < 1e-12);
        assert!((v - 2.017857).abs() < 1e-6);
        let m0 = MarketModel::gbm(0.0, 0.3);
        assert_eq!(crra_frictionless_value(0.0, 4.0, 0.5, &m0, 1.0, 0.0).unwrap(), 4.0);
    }

    #[test]
    fn crra_gmr_terminal_and_gbm_limit() {
        let m = MarketModel::gmr(0.3, 0.27, 0.1333, 0.065, -0.93);
        let v = crra_frictionless_value(1.0, 4.0, 0.5, &m, 1.0, 0.1).unwrap();
        assert!((v - 4.0).abs() < 1e-14);
        // vanishing state noise and reversion: nu is frozen and F is the
        // GBM factor with eta = sigma * nu
        let frozen = MarketModel::gmr(0.3, 0.0, 0.1333, 1e-9, 0.0);
        let f = CrraFactor::new(&frozen, 0.5, 1.0).unwrap();
        let nu = 0.1333;
        let gbm = CrraFactor::new(&MarketModel::gbm(0.3 * nu, 0.3), 0.5, 1.0).unwrap();
        let a = f.factor(0.7, nu).unwrap();
        let b = gbm.factor(0.7, 0.0).unwrap();
        assert!((a - b).abs() < 1e-10, "{a} {b}");
    }

    #[test]
    fn crra_gmr_against_fine_integration() {
        // Independent check: explicit Euler on the same ODE with a much finer step.
        let (kappa, nu_bar, zeta, rho, p) = (0.27, 0.1333, 0.065, -0.93, 0.5);
        let gamma = p / (2.0 * (1.0 - p));
        let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
        let n = 200_000;
        let h = 1.0 / n as f64;
        for _ in 0..n {
            let tilt = 1.0 + 2.0 * rho * zeta * a;
            let da = 2.0 * zeta * zeta * a * a - 2.0 * kappa * a + gamma * tilt * tilt;
            let db = 2.0 * zeta * zeta * a * b + 2.0 * kappa * nu_bar * a - kappa * b
                + 2.0 * gamma * tilt * rho * zeta * b;
            let dc = zeta * zeta * a + 0.5 * zeta * zeta * b * b + kappa * nu_bar * b
                + gamma * rho * rho * zeta * zeta * b * b;
            a += h * da;
            b += h * db;
            c += h * dc;
        }
        let m = MarketModel::gmr(0.3, kappa, nu_bar, zeta, rho);
        let got = CrraFactor::new(&m, p, 1.0).unwrap().coefficients(1.0).unwrap();
        assert!((got[0] - a).abs() < 1e-5);
        assert!((got[1] - b).abs() < 1e-5);
        assert!((got[2] - c).abs() < 1e-5);
    }

    #[test]
    fn crra_gmr_explosion() {
        // strong positive feedback: A'' grows quadratically and blows up
        let m = MarketModel::gmr(0.3, 0.0, 0.0, 3.0, 1.0);
        match CrraFactor::new(&m, 0.9, 10.0) {
            Err(Error::Explosion { critical_tau }) => assert!(critical_tau > 0.0 && critical_tau < 10.0),
            other => panic!("expected explosion, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        // Above ~5.5 the CDF rounds too close to 1 to invert to 1e-9.
        fn inverse_round_trip(q in -8.0..5.5f64) {
            let u = norm_cdf(q);
            prop_assert!((norm_inv(u).unwrap() - q).abs() < 1e-9);
        }

        #[test]
        fn passage_monotone(a in -1.0..1.0f64, b in 0.01..2.0f64, tau in 0.01..2.0f64,
                            da in 0.0..0.5f64, db in 0.0..0.5f64, dt in 0.0..0.5f64) {
            let p = first_passage_prob(a, 0.5, b, tau).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!(first_passage_prob(a + da, 0.5, b, tau).unwrap() >= p - 1e-12);
            prop_assert!(first_passage_prob(a, 0.5, b + db, tau).unwrap() <= p + 1e-12);
            prop_assert!(first_passage_prob(a, 0.5, b, tau + dt).unwrap() >= p - 1e-12);
            let driftless = first_passage_prob(0.0, 0.5, b, tau).unwrap();
            prop_assert!((driftless - 2.0 * norm_cdf(-b / (0.5 * tau.sqrt()))).abs() < 1e-14);
        }

        #[test]
        fn asymptote_monotone_in_wealth(x in 0.0..0.9f64, z1 in 0.0..1.5f64, dz in 0.0..0.5f64,
                                        tau in 0.001..0.2f64) {
            let u = goal();
            let a = asymptote_from_wealth(&u, x, z1, 0.3, tau).unwrap();
            let b = asymptote_from_wealth(&u, x, z1 + dz, 0.3, tau).unwrap();
            prop_assert!(b >= a - 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn asymptote_without_jumps_is_utility(z in 0.0..5.0f64, x in -2.0..2.0f64) {
            let u = make_utility(UtilitySpec::SShaped { loss_aversion: 2.25, p: 0.5, reference: 1.0 }, 0.0).unwrap();
            prop_assert_eq!(asymptote_from_wealth(&u, x, z, 0.3, 0.1).unwrap(), u.value(z));
        }
    }
}
