//! Piecewise terminal utilities with exact jump bookkeeping.
//!
//! A utility is a list of closed-form branches on consecutive intervals of
//! `[K, inf)`. Jumps are derived from the branches at construction so left
//! limits and jump sizes never depend on sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameterised utility families accepted by [`make_utility`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum UtilitySpec {
    /// Indicator of reaching `target`.
    GoalReaching { target: f64 },
    /// Power utility with an upward jump at `target`:
    /// `z^p/p` below, `c1 + c2 z^p/p` from `target` on.
    Aspiration {
        p: f64,
        c1: f64,
        c2: f64,
        target: f64,
    },
    /// Loss-averse utility around `reference`:
    /// `(z - z0)^p` for gains, `-loss_aversion (z0 - z)^p` for losses.
    SShaped {
        loss_aversion: f64,
        p: f64,
        reference: f64,
    },
    Crra { p: f64 },
    Constant { value: f64 },
}

impl UtilitySpec {
    pub fn name(&self) -> &'static str {
        match self {
            UtilitySpec::GoalReaching { .. } => "goal_reaching",
            UtilitySpec::Aspiration { .. } => "aspiration",
            UtilitySpec::SShaped { .. } => "s_shaped",
            UtilitySpec::Crra { .. } => "crra",
            UtilitySpec::Constant { .. } => "constant",
        }
    }
}

/// Closed-form branch on one interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Branch {
    Constant(f64),
    /// `offset + coeff * (z - shift)^exponent`, zero power below `shift`.
    Power {
        offset: f64,
        coeff: f64,
        shift: f64,
        exponent: f64,
    },
    /// `coeff * (shift - z)^exponent`, used for loss branches (coeff < 0).
    Reflected {
        coeff: f64,
        shift: f64,
        exponent: f64,
    },
}

impl Branch {
    pub fn eval(&self, z: f64) -> f64 {
        match *self {
            Branch::Constant(c) => c,
            Branch::Power {
                offset,
                coeff,
                shift,
                exponent,
            } => offset + coeff * (z - shift).max(0.0).powf(exponent),
            Branch::Reflected {
                coeff,
                shift,
                exponent,
            } => coeff * (shift - z).max(0.0).powf(exponent),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Piece {
    pub start: f64,
    pub branch: Branch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Jump {
    pub at: f64,
    pub left: f64,
    pub right: f64,
}

impl Jump {
    pub fn size(&self) -> f64 {
        self.right - self.left
    }
}

/// Upper-growth witnesses: `U(z) <= c1 + c2 * z^p`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthBound {
    pub c1: f64,
    pub c2: f64,
    pub p: f64,
}

impl GrowthBound {
    pub fn eval(&self, z: f64) -> f64 {
        self.c1 + self.c2 * z.max(0.0).powf(self.p)
    }
}

/// Top branch written as `offset + scale * (z - shift)^p / p`.
///
/// The far-wealth boundary is this expression with the power replaced by
/// its frictionless value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerTail {
    pub offset: f64,
    pub scale: f64,
    pub shift: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utility {
    spec: Option<UtilitySpec>,
    floor: f64,
    pieces: Vec<Piece>,
    jumps: Vec<Jump>,
    growth: GrowthBound,
}

/// Jumps smaller than this (relative to the values involved) are treated as
/// continuity points.
const JUMP_EPS: f64 = 1e-14;

impl Utility {
    /// Builds a utility from raw pieces without checking monotonicity.
    /// Pieces must have strictly increasing starts, the first at `floor`.
    pub fn from_pieces(floor: f64, pieces: Vec<Piece>, growth: GrowthBound) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::validation("utility", "at least one piece required"));
        }
        if pieces[0].start != floor {
            return Err(Error::validation("utility", "first piece must start at the floor"));
        }
        if pieces.windows(2).any(|w| w[1].start <= w[0].start) {
            return Err(Error::validation("utility", "piece starts must increase strictly"));
        }
        let jumps = pieces
            .windows(2)
            .filter_map(|w| {
                let at = w[1].start;
                let left = w[0].branch.eval(at);
                let right = w[1].branch.eval(at);
                let scale = 1.0f64.max(left.abs()).max(right.abs());
                ((right - left).abs() > JUMP_EPS * scale).then_some(Jump { at, left, right })
            })
            .collect();
        Ok(Utility {
            spec: None,
            floor,
            pieces,
            jumps,
            growth,
        })
    }

    pub fn spec(&self) -> Option<&UtilitySpec> {
        self.spec.as_ref()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn pieces(&self) -> &[Piece] {
        &self.pieces
    }

    pub fn jumps(&self) -> &[Jump] {
        &self.jumps
    }

    pub fn growth(&self) -> GrowthBound {
        self.growth
    }

    pub fn is_goal_reaching(&self) -> bool {
        matches!(self.spec, Some(UtilitySpec::GoalReaching { .. }))
    }

    /// Right-continuous value. Callers must ensure `z >= floor`.
    pub fn value(&self, z: f64) -> f64 {
        self.piece_at(z).branch.eval(z)
    }

    pub fn eval(&self, z: f64) -> Result<f64> {
        self.check_domain(z)?;
        Ok(self.value(z))
    }

    /// `(U(z), U(z-), U(z) - U(z-))` with `U(K-) = U(K)`.
    pub fn eval_with_limits(&self, z: f64) -> Result<(f64, f64, f64)> {
        self.check_domain(z)?;
        let value = self.value(z);
        let left = match self.jumps.iter().find(|j| j.at == z) {
            Some(j) => j.left,
            None => {
                let idx = self.piece_index(z);
                if idx > 0 && self.pieces[idx].start == z {
                    self.pieces[idx - 1].branch.eval(z)
                } else {
                    value
                }
            }
        };
        Ok((value, left, value - left))
    }

    /// Power form of the last branch, if it has one.
    pub fn power_tail(&self) -> Option<PowerTail> {
        match self.spec? {
            UtilitySpec::Aspiration { p, c1, c2, .. } => Some(PowerTail {
                offset: c1,
                scale: c2,
                shift: 0.0,
                p,
            }),
            UtilitySpec::SShaped { p, reference, .. } => Some(PowerTail {
                offset: 0.0,
                scale: p,
                shift: reference,
                p,
            }),
            UtilitySpec::Crra { p } => Some(PowerTail {
                offset: 0.0,
                scale: 1.0,
                shift: 0.0,
                p,
            }),
            _ => None,
        }
    }

    /// Breakpoints (piece starts past the floor) in increasing order.
    pub fn breakpoints(&self) -> impl Iterator<Item = f64> + '_ {
        self.pieces.iter().skip(1).map(|p| p.start)
    }

    fn check_domain(&self, z: f64) -> Result<()> {
        if z.is_nan() || z < self.floor {
            return Err(Error::domain(
                "utility",
                format!("wealth {z} below the floor {}", self.floor),
            ));
        }
        Ok(())
    }

    fn piece_index(&self, z: f64) -> usize {
        self.pieces.partition_point(|p| p.start <= z).saturating_sub(1)
    }

    fn piece_at(&self, z: f64) -> &Piece {
        &self.pieces[self.piece_index(z)]
    }
}

fn check_exponent(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::validation(
            "utility.p",
            format!("exponent must lie in (0, 1) for growth below linear, got {p}"),
        ));
    }
    Ok(())
}

fn check_finite(key: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(Error::validation(key, "must be finite"))
    }
}

/// Builds and validates a utility with domain floor `floor`.
pub fn make_utility(spec: UtilitySpec, floor: f64) -> Result<Utility> {
    check_finite("problem.liquidation_floor", floor)?;
    if floor < 0.0 {
        return Err(Error::validation(
            "problem.liquidation_floor",
            "liquidation floor must be >= 0",
        ));
    }
    let (pieces, growth) = match spec {
        UtilitySpec::GoalReaching { target } => {
            check_finite("utility.target", target)?;
            if target <= floor {
                return Err(Error::validation(
                    "utility.target",
                    "goal must lie strictly above the liquidation floor",
                ));
            }
            (
                vec![
                    Piece {
                        start: floor,
                        branch: Branch::Constant(0.0),
                    },
                    Piece {
                        start: target,
                        branch: Branch::Constant(1.0),
                    },
                ],
                GrowthBound {
                    c1: 1.0,
                    c2: 1.0,
                    p: 0.5,
                },
            )
        }
        UtilitySpec::Aspiration { p, c1, c2, target } => {
            check_exponent(p)?;
            check_finite("utility.c1", c1)?;
            check_finite("utility.c2", c2)?;
            check_finite("utility.target", target)?;
            if c1 < 0.0 {
                return Err(Error::validation("utility.c1", "c1 must be >= 0"));
            }
            if c2 <= 0.0 {
                return Err(Error::validation("utility.c2", "c2 must be > 0 for a nondecreasing utility"));
            }
            if target <= floor {
                return Err(Error::validation(
                    "utility.target",
                    "aspiration level must lie strictly above the liquidation floor",
                ));
            }
            let lift = target.powf(p) / p;
            if c1 + (c2 - 1.0) * lift <= 0.0 {
                return Err(Error::validation(
                    "utility.c2",
                    "the jump at the aspiration level must be upward",
                ));
            }
            (
                vec![
                    Piece {
                        start: floor,
                        branch: Branch::Power {
                            offset: 0.0,
                            coeff: 1.0 / p,
                            shift: 0.0,
                            exponent: p,
                        },
                    },
                    Piece {
                        start: target,
                        branch: Branch::Power {
                            offset: c1,
                            coeff: c2 / p,
                            shift: 0.0,
                            exponent: p,
                        },
                    },
                ],
                GrowthBound {
                    c1,
                    c2: c2.max(1.0) / p,
                    p,
                },
            )
        }
        UtilitySpec::SShaped {
            loss_aversion,
            p,
            reference,
        } => {
            check_exponent(p)?;
            check_finite("utility.loss_aversion", loss_aversion)?;
            check_finite("utility.reference", reference)?;
            if loss_aversion <= 1.0 {
                return Err(Error::validation(
                    "utility.loss_aversion",
                    "loss aversion must exceed 1",
                ));
            }
            if reference <= floor {
                return Err(Error::validation(
                    "utility.reference",
                    "reference point must lie strictly above the liquidation floor",
                ));
            }
            (
                vec![
                    Piece {
                        start: floor,
                        branch: Branch::Reflected {
                            coeff: -loss_aversion,
                            shift: reference,
                            exponent: p,
                        },
                    },
                    Piece {
                        start: reference,
                        branch: Branch::Power {
                            offset: 0.0,
                            coeff: 1.0,
                            shift: reference,
                            exponent: p,
                        },
                    },
                ],
                GrowthBound { c1: 1.0, c2: 1.0, p },
            )
        }
        UtilitySpec::Crra { p } => {
            check_exponent(p)?;
            (
                vec![Piece {
                    start: floor,
                    branch: Branch::Power {
                        offset: 0.0,
                        coeff: 1.0 / p,
                        shift: 0.0,
                        exponent: p,
                    },
                }],
                GrowthBound {
                    c1: 1.0,
                    c2: 1.0 / p,
                    p,
                },
            )
        }
        UtilitySpec::Constant { value } => {
            check_finite("utility.value", value)?;
            (
                vec![Piece {
                    start: floor,
                    branch: Branch::Constant(value),
                }],
                GrowthBound {
                    c1: value.max(0.0),
                    c2: 1.0,
                    p: 0.5,
                },
            )
        }
    };
    let mut u = Utility::from_pieces(floor, pieces, growth)?;
    u.spec = Some(spec);
    Ok(u)
}

/// One failed check found by [`validate_assumption`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub z: f64,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct AssumptionReport {
    pub monotonicity: Vec<Violation>,
    pub right_continuity: Vec<Violation>,
    pub growth: Vec<Violation>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.monotonicity.is_empty() && self.right_continuity.is_empty() && self.growth.is_empty()
    }
}

/// Checks monotonicity, right-continuity and the growth bound
/// `U <= c1 + c2 z^p` by sampling `samples` points per piece plus the exact
/// piece endpoints. The last piece is sampled up to ten times the largest
/// breakpoint.
pub fn validate_assumption(
    u: &Utility,
    c1: f64,
    c2: f64,
    p: f64,
    samples: usize,
) -> AssumptionReport {
    const TOL: f64 = 1e-12;
    let samples = samples.max(2);
    let mut report = AssumptionReport::default();
    let last_break = u.breakpoints().last().unwrap_or(u.floor);
    let far = u.floor + 10.0 * (last_break - u.floor).max(1.0);

    let mut zs = Vec::new();
    for (i, piece) in u.pieces.iter().enumerate() {
        let hi = u.pieces.get(i + 1).map_or(far, |q| q.start);
        for k in 0..samples {
            zs.push(piece.start + (hi - piece.start) * k as f64 / samples as f64);
        }
    }
    zs.push(far);

    let mut prev: Option<(f64, f64)> = None;
    for &z in &zs {
        // Left limits catch a decrease hidden inside a jump.
        let (val, left, _) = match u.eval_with_limits(z) {
            Ok(t) => t,
            Err(e) => {
                report.monotonicity.push(Violation {
                    z,
                    detail: e.to_string(),
                });
                continue;
            }
        };
        if let Some((pz, pv)) = prev {
            if left < pv - TOL || val < pv - TOL {
                report.monotonicity.push(Violation {
                    z,
                    detail: format!("U decreases from {pv} at {pz} to {} at {z}", val.min(left)),
                });
            }
        }
        if val < left - TOL {
            report.monotonicity.push(Violation {
                z,
                detail: format!("downward jump from {left} to {val}"),
            });
        }
        let bound = c1 + c2 * z.max(0.0).powf(p);
        if val > bound + TOL {
            report.growth.push(Violation {
                z,
                detail: format!("U = {val} exceeds {bound}"),
            });
        }
        prev = Some((z, val));
    }

    for piece in &u.pieces {
        let z = piece.start;
        let at = u.value(z);
        let h = 1e-9 * z.abs().max(1.0);
        let next = u.value(z + h);
        if (next - at).abs() > 1e-3_f64.max(1e3 * h) {
            report.right_continuity.push(Violation {
                z,
                detail: format!("U(z) = {at} but U(z+) ~ {next}"),
            });
        }
    }
    report
}
