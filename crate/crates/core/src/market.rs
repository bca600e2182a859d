//! Market and cost primitives: model coefficients, forward-wealth accounting
//! and solvency checks.
//!
//! All monetary quantities are forward dollars (compounded to the horizon),
//! so the risk-free rate never appears in the dynamics downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stock/state dynamics.
///
/// `Gbm` has constant coefficients. `GaussianMeanReturn` has risk premium
/// `sigma * nu` with an Ornstein-Uhlenbeck state `nu`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MarketModel {
    Gbm {
        #[serde(default)]
        r: f64,
        eta: f64,
        sigma: f64,
    },
    #[serde(alias = "gmr")]
    GaussianMeanReturn {
        #[serde(default)]
        r: f64,
        sigma: f64,
        kappa: f64,
        nu_bar: f64,
        zeta: f64,
        rho: f64,
    },
}

/// Coefficient values of the model at one state level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients {
    pub mu: f64,
    pub sigma: f64,
    /// Drift of the state variable.
    pub m: f64,
    /// Volatility of the state variable.
    pub zeta: f64,
    /// Excess return `mu - r`.
    pub eta: f64,
}

impl MarketModel {
    pub fn gbm(eta: f64, sigma: f64) -> Self {
        MarketModel::Gbm { r: 0.0, eta, sigma }
    }

    pub fn gmr(sigma: f64, kappa: f64, nu_bar: f64, zeta: f64, rho: f64) -> Self {
        MarketModel::GaussianMeanReturn {
            r: 0.0,
            sigma,
            kappa,
            nu_bar,
            zeta,
            rho,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |key: &str, x: f64| {
            if x.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(key, "must be finite"))
            }
        };
        match *self {
            MarketModel::Gbm { r, eta, sigma } => {
                finite("market.r", r)?;
                finite("market.eta", eta)?;
                finite("market.sigma", sigma)?;
                if sigma <= 0.0 {
                    return Err(Error::validation("market.sigma", "volatility must be > 0"));
                }
            }
            MarketModel::GaussianMeanReturn {
                r,
                sigma,
                kappa,
                nu_bar,
                zeta,
                rho,
            } => {
                for (k, x) in [
                    ("market.r", r),
                    ("market.sigma", sigma),
                    ("market.kappa", kappa),
                    ("market.nu_bar", nu_bar),
                    ("market.zeta", zeta),
                    ("market.rho", rho),
                ] {
                    finite(k, x)?;
                }
                if sigma <= 0.0 {
                    return Err(Error::validation("market.sigma", "volatility must be > 0"));
                }
                if zeta <= 0.0 {
                    return Err(Error::validation("market.zeta", "state volatility must be > 0"));
                }
                if kappa < 0.0 {
                    return Err(Error::validation("market.kappa", "mean reversion must be >= 0"));
                }
                if rho.abs() > 1.0 {
                    return Err(Error::validation("market.rho", "correlation must lie in [-1, 1]"));
                }
            }
        }
        Ok(())
    }

    /// True when the model carries a stochastic state axis.
    pub fn has_state(&self) -> bool {
        matches!(self, MarketModel::GaussianMeanReturn { .. })
    }

    pub fn rate(&self) -> f64 {
        match *self {
            MarketModel::Gbm { r, .. } | MarketModel::GaussianMeanReturn { r, .. } => r,
        }
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            MarketModel::Gbm { sigma, .. } | MarketModel::GaussianMeanReturn { sigma, .. } => sigma,
        }
    }

    /// Correlation between stock and state noise (zero for GBM).
    pub fn rho(&self) -> f64 {
        match *self {
            MarketModel::Gbm { .. } => 0.0,
            MarketModel::GaussianMeanReturn { rho, .. } => rho,
        }
    }

    /// Coefficients at state `nu`. GBM ignores `nu`.
    pub fn coefficients(&self, nu: f64) -> Coefficients {
        match *self {
            MarketModel::Gbm { r, eta, sigma } => Coefficients {
                mu: r + eta,
                sigma,
                m: 0.0,
                zeta: 0.0,
                eta,
            },
            MarketModel::GaussianMeanReturn {
                r,
                sigma,
                kappa,
                nu_bar,
                zeta,
                ..
            } => Coefficients {
                mu: r + sigma * nu,
                sigma,
                m: kappa * (nu_bar - nu),
                zeta,
                eta: sigma * nu,
            },
        }
    }

    /// Lipschitz constant of the coefficient maps in `nu`.
    pub fn lipschitz_constant(&self) -> f64 {
        match *self {
            MarketModel::Gbm { .. } => 0.0,
            MarketModel::GaussianMeanReturn { sigma, kappa, .. } => sigma.max(kappa),
        }
    }
}

/// Proportional transaction costs: `theta1` on sales, `theta2` on purchases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    pub theta1: f64,
    pub theta2: f64,
}

impl CostSpec {
    pub fn new(theta1: f64, theta2: f64) -> Result<Self> {
        let c = CostSpec { theta1, theta2 };
        c.validate()?;
        Ok(c)
    }

    /// Symmetric costs.
    pub fn symmetric(theta: f64) -> Result<Self> {
        Self::new(theta, theta)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta1 > 0.0 && self.theta1 < 1.0) {
            return Err(Error::validation(
                "costs.theta1",
                format!("sale cost rate must lie in (0, 1), got {}", self.theta1),
            ));
        }
        if !(self.theta2 > 0.0 && self.theta2.is_finite()) {
            return Err(Error::validation(
                "costs.theta2",
                format!("purchase cost rate must be > 0, got {}", self.theta2),
            ));
        }
        Ok(())
    }

    /// Round-trip cost `theta1 + theta2`.
    pub fn spread(&self) -> f64 {
        self.theta1 + self.theta2
    }

    /// Signed cost branch: `-theta1` for long positions, `+theta2` for short.
    /// A zero position uses the long branch.
    pub fn branch(&self, y: f64) -> f64 {
        if y >= 0.0 {
            -self.theta1
        } else {
            self.theta2
        }
    }
}

/// A point of the state space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub nu: f64,
}

/// Liquidation value `x + (1-theta1) y+ - (1+theta2) y-`.
///
/// Costs enter through plain rates so this also accepts zero costs, which
/// the validated [`CostSpec`] would reject.
pub fn liquidation_value_raw(x: f64, y: f64, theta1: f64, theta2: f64) -> Result<f64> {
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::domain(
            "liquidation_value",
            format!("non-finite position (x = {x}, y = {y})"),
        ));
    }
    Ok(x + (1.0 - theta1) * y.max(0.0) - (1.0 + theta2) * (-y).max(0.0))
}

pub fn liquidation_value(x: f64, y: f64, costs: &CostSpec) -> Result<f64> {
    liquidation_value_raw(x, y, costs.theta1, costs.theta2)
}

/// Whether a position lies in the solvency region for floor `k`.
pub fn is_solvent(x: f64, y: f64, costs: &CostSpec, k: f64) -> bool {
    liquidation_value(x, y, costs).map(|z| z >= k).unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn costs() -> CostSpec {
        CostSpec::symmetric(1e-3).unwrap()
    }

    #[test]
    fn liquidation_examples() {
        let c = costs();
        assert_eq!(liquidation_value(0.5, 0.0, &c).unwrap(), 0.5);
        assert!((liquidation_value(0.5, 0.5, &c).unwrap() - 0.9995).abs() < 1e-15);
        assert!((liquidation_value(0.5, -0.5, &c).unwrap() + 0.0005).abs() < 1e-15);
    }

    #[test]
    fn liquidation_rejects_nan() {
        assert!(liquidation_value(f64::NAN, 0.0, &costs()).is_err());
        assert!(liquidation_value(0.0, f64::INFINITY, &costs()).is_err());
    }

    #[test]
    fn zero_costs_are_frictionless() {
        assert_eq!(liquidation_value_raw(0.3, -0.7, 0.0, 0.0).unwrap(), 0.3 - 0.7);
    }

    #[test]
    fn cost_ranges() {
        assert!(CostSpec::new(1.5, 1e-3).is_err());
        assert!(CostSpec::new(1e-3, 0.0).is_err());
        assert!(CostSpec::new(0.0, 1e-3).is_err());
        let err = CostSpec::new(1.5, 1e-3).unwrap_err().to_string();
        assert!(err.contains("costs.theta1"), "{err}");
    }

    #[test]
    fn gbm_coefficients() {
        let m = MarketModel::gbm(0.04, 0.3);
        let c = m.coefficients(123.0);
        assert_eq!(c.mu, 0.04);
        assert_eq!(c.sigma, 0.3);
        assert_eq!(c.m, 0.0);
        assert_eq!(c.zeta, 0.0);
        assert_eq!(c.eta, 0.04);
    }

    #[test]
    fn gmr_coefficients() {
        let m = MarketModel::gmr(0.3, 0.27, 0.1333, 0.065, -0.93);
        let c = m.coefficients(0.1333);
        assert!((c.eta - 0.03999).abs() < 1e-12);
        assert!((c.mu - 0.03999).abs() < 1e-12);
        assert_eq!(c.m, 0.0);
        assert_eq!(c.zeta, 0.065);
        let c = m.coefficients(-0.1333);
        assert!((c.eta + 0.03999).abs() < 1e-12);
        assert!((c.m - 0.27 * 0.2666).abs() < 1e-12);
        assert!((c.m - 0.0720).abs() < 1e-4);
        assert_eq!(m.lipschitz_constant(), 0.3);
    }

    #[test]
    fn model_validation() {
        assert!(MarketModel::gbm(0.0, 0.0).validate().is_err());
        assert!(MarketModel::gmr(0.3, 0.27, 0.1, 0.065, -1.2).validate().is_err());
        assert!(MarketModel::gmr(0.3, -0.1, 0.1, 0.065, 0.5).validate().is_err());
        assert!(MarketModel::gmr(0.3, 0.27, 0.1, 0.0, 0.5).validate().is_err());
        assert!(MarketModel::gmr(0.3, 0.27, 0.1, 0.065, -0.93).validate().is_ok());
    }

    proptest! {
        #[test]
        fn liquidation_properties(x in -10.0..10.0f64, y in -10.0..10.0f64,
                                  dx in 0.0..1.0f64, dy in 0.0..1.0f64,
                                  t1 in 1e-4..0.5f64, t2 in 1e-4..0.5f64) {
            let c = CostSpec::new(t1, t2).unwrap();
            let z = liquidation_value(x, y, &c).unwrap();
            prop_assert!(z <= x + y + 1e-12);
            prop_assert!(liquidation_value(x + dx, y, &c).unwrap() >= z);
            prop_assert!(liquidation_value(x, y + dy, &c).unwrap() >= z - 1e-12);
            // slope in y is (1 - theta1) or (1 + theta2) on each branch
            let h = 1e-3;
            if y > h {
                let s = (liquidation_value(x, y + h, &c).unwrap() - z) / h;
                prop_assert!((s - (1.0 - t1)).abs() < 1e-9);
            } else if y < -2.0 * h {
                let s = (liquidation_value(x, y + h, &c).unwrap() - z) / h;
                prop_assert!((s - (1.0 + t2)).abs() < 1e-9);
            }
        }
    }
}
