//! Monte Carlo estimates of expected terminal utility under fixed trading
//! strategies.
//!
//! Paths are independent; path `p` draws from ChaCha8 stream `p` of the
//! master seed, so the estimate does not depend on how paths are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TransformedGrid;
use crate::market::{liquidation_value, CostSpec, Position};
use crate::problem::ProblemSpec;
use crate::regions::{classify_level, Crossing, Label, RegionMap};
use crate::solver::Solution;

/// Warn when one step's log-price spread exceeds this share of the initial
/// distance to the nearest barrier.
const HITTING_SCALE_SHARE: f64 = 0.25;
/// Euler sub-steps per step near a barrier for state-dependent models.
const SUBSTEPS: usize = 10;

#[derive(Debug, Clone)]
pub enum Strategy {
    /// Hold until the liquidation value reaches `target` or `floor`, then
    /// liquidate and hold cash.
    PiStar { target: f64, floor: f64 },
    /// Hold, liquidating at the horizon (or at the floor if it is hit).
    NoTrade,
    /// Trade to the nearest region boundary whenever the state sits in a
    /// buy or sell region of the solved map.
    RegionPolicy(RegionPolicy),
}

#[derive(Debug, Clone)]
pub struct StrategySpec {
    pub strategy: Strategy,
    pub initial: Position,
    pub paths: usize,
    pub seed: u64,
    /// Simulation step in years; shortened so that it divides the horizon.
    pub dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub paths_used: usize,
    pub steps: usize,
    pub hit_target: f64,
    pub hit_floor: f64,
    pub expired: f64,
    pub warnings: Vec<String>,
}

impl McEstimate {
    /// `mean - 3 * std_error`.
    pub fn lower(&self) -> f64 {
        self.mean - 3.0 * self.std_error
    }

    pub fn upper(&self) -> f64 {
        self.mean + 3.0 * self.std_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Exit {
    Target,
    Floor,
    Expired,
}

/// Interfaces of solved region maps, indexed for per-step lookup.
#[derive(Debug, Clone)]
pub struct RegionPolicy {
    grid: TransformedGrid,
    /// Maps in increasing time to maturity.
    maps: Vec<RegionMap>,
    /// Per map, crossings grouped by `k * nz + i`.
    columns: Vec<Vec<Vec<Crossing>>>,
    goal: Option<f64>,
}

impl RegionPolicy {
    /// Classifies every retained level of `solution`.
    pub fn from_solution(solution: &Solution, tol: f64) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::validation("regions.tol", "must be > 0"));
        }
        let grid = solution.grid.clone();
        let maps: Vec<RegionMap> = solution
            .levels
            .iter()
            .map(|l| classify_level(&grid, l, tol))
            .collect();
        let columns = maps
            .iter()
            .map(|m| {
                let mut cols = vec![Vec::new(); grid.nz() * grid.nnu()];
                for c in &m.crossings {
                    cols[c.k * grid.nz() + c.i].push(*c);
                }
                cols
            })
            .collect();
        let goal = solution
            .problem
            .utility
            .is_goal_reaching()
            .then(|| grid.z[grid.nz() - 1]);
        Ok(RegionPolicy {
            grid,
            maps,
            columns,
            goal,
        })
    }

    /// Stock holding to trade to at time to maturity `tau`, if any.
    fn target(&self, tau: f64, z: f64, y: f64, nu: f64) -> Option<f64> {
        let m = self
            .maps
            .iter()
            .position(|m| m.tau >= tau * (1.0 - 1e-9))
            .unwrap_or(self.maps.len() - 1);
        let map = &self.maps[m];
        let g = &self.grid;
        let (i, k) = (g.nearest_z(z), g.nearest_nu(nu));
        if i == 0 || i + 1 == g.nz() {
            return None;
        }
        let j = g.nearest_v_same_sign(map.tau.sqrt() * y);
        let column = &self.columns[m][k * g.nz() + i];
        let target = match map.label_at(g, i, j, k)? {
            Label::Buy => column
                .iter()
                .filter(|c| c.lower == Label::Buy && c.y > y)
                .map(|c| c.y)
                .reduce(f64::min),
            Label::Sell => column
                .iter()
                .filter(|c| c.upper == Label::Sell && c.y < y)
                .map(|c| c.y)
                .reduce(f64::max),
            _ => None,
        }?;
        Some(if g.short_sale_allowed { target } else { target.max(0.0) })
    }
}

/// Log-price levels at which a fixed holding hits the target or the floor.
#[derive(Debug, Clone, Copy)]
struct Barriers {
    upper: Option<(f64, Exit)>,
    lower: Option<(f64, Exit)>,
}

impl Barriers {
    /// For the holding `(x, y)`, wealth `x + c y e^l` is monotone in `l`.
    fn new(x: f64, y: f64, costs: &CostSpec, target: Option<f64>, floor: f64) -> Self {
        let mut b = Barriers {
            upper: None,
            lower: None,
        };
        if y == 0.0 {
            return b;
        }
        let c = if y > 0.0 { 1.0 - costs.theta1 } else { 1.0 + costs.theta2 };
        // Log-price at which wealth equals `level`, if reachable.
        let at = |level: f64| {
            let ratio = (level - x) / (c * y);
            (ratio > 0.0).then(|| ratio.ln())
        };
        let mut place = |level: Option<f64>, exit: Exit| {
            let Some(l) = level.and_then(at) else { return };
            let rises = (exit == Exit::Target) == (y > 0.0);
            if rises {
                b.upper = Some((l, exit));
            } else {
                b.lower = Some((l, exit));
            }
        };
        place(target, Exit::Target);
        place(Some(floor), Exit::Floor);
        b
    }

    fn distance(&self, l: f64) -> f64 {
        let up = self.upper.map_or(f64::INFINITY, |(b, _)| b - l);
        let down = self.lower.map_or(f64::INFINITY, |(b, _)| l - b);
        up.min(down)
    }
}

/// Expected terminal utility of `spec.strategy` from `spec.initial`.
pub fn simulate_strategy(spec: &StrategySpec, problem: &ProblemSpec) -> Result<McEstimate> {
    problem.validate()?;
    if spec.paths == 0 {
        return Err(Error::validation("mc.paths", "must be >= 1"));
    }
    if !(spec.dt > 0.0 && spec.dt.is_finite()) {
        return Err(Error::validation("mc.dt", "must be finite and > 0"));
    }
    let pos = spec.initial;
    let tau = problem.horizon - pos.t;
    if !(tau > 0.0) {
        return Err(Error::domain("simulate_strategy", format!("start time {} is not before the horizon", pos.t)));
    }
    let z0 = liquidation_value(pos.x, pos.y, &problem.costs)?;
    if z0 < problem.floor {
        return Err(Error::domain(
            "simulate_strategy",
            format!("initial liquidation value {z0} is below the floor {}", problem.floor),
        ));
    }
    if pos.y < 0.0 && !problem.short_sale_allowed {
        return Err(Error::domain("simulate_strategy", "short position without short sales"));
    }
    let mut warnings = Vec::new();
    let steps = (tau / spec.dt - 1e-9).ceil().max(1.0) as usize;
    let h = tau / steps as f64;
    let sigma = problem.market.sigma();
    let barriers = match &spec.strategy {
        Strategy::PiStar { target, floor } => {
            if !(*floor <= z0 && z0 < *target) {
                return Err(Error::domain(
                    "simulate_strategy",
                    format!("pi_star needs floor <= z < target, got z = {z0}"),
                ));
            }
            if *floor < problem.floor {
                return Err(Error::domain("simulate_strategy", "pi_star floor below the liquidation floor"));
            }
            Barriers::new(pos.x, pos.y, &problem.costs, Some(*target), *floor)
        }
        Strategy::NoTrade => Barriers::new(pos.x, pos.y, &problem.costs, None, problem.floor),
        Strategy::RegionPolicy(policy) => {
            if policy.grid.horizon != problem.horizon {
                return Err(Error::validation("mc.strategy", "region maps come from a different horizon"));
            }
            Barriers {
                upper: None,
                lower: None,
            }
        }
    };
    let d = barriers.distance(0.0);
    if d.is_finite() && sigma * h.sqrt() > HITTING_SCALE_SHARE * d {
        warnings.push(format!(
            "step {h:.3e} is coarse against the barrier distance {d:.3e} in log-price"
        ));
    }

    let outcomes: Vec<(f64, Exit)> = (0..spec.paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(p as u64);
            match &spec.strategy {
                Strategy::RegionPolicy(policy) => region_path(policy, problem, pos, steps, h, &mut rng),
                _ => hold_path(&barriers, problem, pos, steps, h, &mut rng),
            }
        })
        .collect();

    let values: Vec<f64> = outcomes.iter().map(|o| o.0).collect();
    let n = values.len() as f64;
    let mean = pairwise_sum(&values) / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = if values.len() > 1 { pairwise_sum(&sq) / (n - 1.0) } else { 0.0 };
    let frac = |e: Exit| outcomes.iter().filter(|o| o.1 == e).count() as f64 / n;
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
        paths_used: values.len(),
        steps,
        hit_target: frac(Exit::Target),
        hit_floor: frac(Exit::Floor),
        expired: frac(Exit::Expired),
        warnings,
    })
}

/// Sum by recursive halving, in a fixed order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        xs.iter().sum()
    } else {
        let (a, b) = xs.split_at(xs.len() / 2);
        pairwise_sum(a) + pairwise_sum(b)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Advances log-price and state over `h`. Exact for constant coefficients.
fn advance(problem: &ProblemSpec, l: f64, nu: f64, h: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let c = problem.market.coefficients(nu);
    let e1 = normal(rng);
    let l1 = l + (c.eta - 0.5 * c.sigma * c.sigma) * h + c.sigma * h.sqrt() * e1;
    if !problem.market.has_state() {
        return (l1, nu);
    }
    let rho = problem.market.rho();
    let e2 = normal(rng);
    let nu1 = nu + c.m * h + c.zeta * h.sqrt() * (rho * e1 + (1.0 - rho * rho).sqrt() * e2);
    (l1, nu1)
}

fn utility_at(problem: &ProblemSpec, z: f64) -> f64 {
    problem.utility.value(z.max(problem.floor))
}

fn hold_path(
    b: &Barriers,
    problem: &ProblemSpec,
    pos: Position,
    steps: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, Exit) {
    let costs = &problem.costs;
    let wealth = |l: f64| liquidation_value(pos.x, pos.y * l.exp(), costs).unwrap_or(f64::NAN);
    if pos.y == 0.0 {
        return (utility_at(problem, pos.x), Exit::Expired);
    }
    let bridge = !problem.market.has_state();
    let sigma = problem.market.sigma();
    let (mut l, mut nu) = (0.0, pos.nu);
    for _ in 0..steps {
        let sub = if !bridge && b.distance(l) < 3.0 * sigma * h.sqrt() { SUBSTEPS } else { 1 };
        for _ in 0..sub {
            let (l1, nu1) = advance(problem, l, nu, h / sub as f64, rng);
            for (bar, above) in [(b.upper, true), (b.lower, false)] {
                let Some((level, exit)) = bar else { continue };
                let crossed_end = if above { l1 >= level } else { l1 <= level };
                if crossed_end {
                    return settle(problem, wealth(l1), exit);
                }
                if bridge {
                    // Probability that the bridge between the endpoints
                    // touched the barrier.
                    let p = (-2.0 * (level - l) * (level - l1) / (sigma * sigma * h)).exp();
                    if rng.random::<f64>() < p {
                        return settle(problem, wealth(level), exit);
                    }
                }
            }
            l = l1;
            nu = nu1;
        }
    }
    (utility_at(problem, wealth(l)), Exit::Expired)
}

/// Value credited on liquidation at a barrier.
fn settle(problem: &ProblemSpec, z: f64, exit: Exit) -> (f64, Exit) {
    (utility_at(problem, z), exit)
}

fn region_path(
    policy: &RegionPolicy,
    problem: &ProblemSpec,
    pos: Position,
    steps: usize,
    h: f64,
    rng: &mut ChaCha8Rng,
) -> (f64, Exit) {
    let costs = &problem.costs;
    let (mut x, mut y, mut nu) = (pos.x, pos.y, pos.nu);
    let tau0 = problem.horizon - pos.t;
    for n in 0..steps {
        let tau = tau0 - n as f64 * h;
        let z = liquidation_value(x, y, costs).unwrap_or(f64::NAN);
        if let Some(goal) = policy.goal {
            if z >= goal {
                return (utility_at(problem, z), Exit::Target);
            }
        }
        if let Some(target) = policy.target(tau, z, y, nu) {
            let d = target - y;
            x -= if d > 0.0 { (1.0 + costs.theta2) * d } else { (1.0 - costs.theta1) * d };
            y = target;
        }
        let (l1, nu1) = advance(problem, 0.0, nu, h, rng);
        y *= l1.exp();
        nu = nu1;
        let z1 = liquidation_value(x, y, costs).unwrap_or(f64::NAN);
        if z1 <= problem.floor {
            return (utility_at(problem, problem.floor), Exit::Floor);
        }
    }
    let z = liquidation_value(x, y, costs).unwrap_or(f64::NAN);
    let exit = match policy.goal {
        Some(goal) if z >= goal => Exit::Target,
        _ => Exit::Expired,
    };
    (utility_at(problem, z), exit)
}
