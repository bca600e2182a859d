//! Problem definition: market, costs, floor, horizon and terminal utility.

use crate::error::{Error, Result};
use crate::market::{CostSpec, MarketModel};
use crate::utility::{PowerTail, Utility, UtilitySpec};

/// Default far-wealth boundary as a multiple of the utility's reference level.
pub const FAR_WEALTH_MULTIPLE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemSpec {
    pub market: MarketModel,
    pub costs: CostSpec,
    /// Liquidation floor `K`.
    pub floor: f64,
    pub horizon: f64,
    pub utility: Utility,
    pub short_sale_allowed: bool,
}

/// How the wealth and far-position boundaries are closed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundaryKind {
    /// Goal reached at the top of the wealth axis; the far position is
    /// liquidated (`W = z`).
    Goal { target: f64 },
    /// Frictionless power tail at the top of the wealth axis; zero slope in
    /// the position at the far ends.
    Tail(PowerTail),
    Constant(f64),
}

impl ProblemSpec {
    pub fn new(
        market: MarketModel,
        costs: CostSpec,
        horizon: f64,
        utility: Utility,
        short_sale_allowed: bool,
    ) -> Result<Self> {
        let p = ProblemSpec {
            market,
            costs,
            floor: utility.floor(),
            horizon,
            utility,
            short_sale_allowed,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        self.costs.validate()?;
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::validation("problem.horizon", "horizon must be finite and > 0"));
        }
        if self.floor != self.utility.floor() {
            return Err(Error::validation(
                "problem.liquidation_floor",
                "utility floor differs from the liquidation floor",
            ));
        }
        if self.utility.spec().is_none() {
            return Err(Error::Unsupported(
                "solving requires a utility built by make_utility".into(),
            ));
        }
        Ok(())
    }

    pub fn boundary_kind(&self) -> BoundaryKind {
        match self.utility.spec() {
            Some(UtilitySpec::GoalReaching { target }) => BoundaryKind::Goal { target: *target },
            Some(UtilitySpec::Constant { value }) => BoundaryKind::Constant(*value),
            _ => BoundaryKind::Tail(
                self.utility
                    .power_tail()
                    .expect("power utilities always carry a tail"),
            ),
        }
    }

    /// Default top of the wealth axis.
    pub fn default_z_max(&self) -> f64 {
        match self.utility.spec() {
            Some(UtilitySpec::GoalReaching { target }) => *target,
            Some(UtilitySpec::Aspiration { target, .. }) => FAR_WEALTH_MULTIPLE * target,
            Some(UtilitySpec::SShaped { reference, .. }) => FAR_WEALTH_MULTIPLE * reference,
            Some(UtilitySpec::Constant { .. }) => self.floor + 1.0,
            _ => self.floor + FAR_WEALTH_MULTIPLE,
        }
    }
}
