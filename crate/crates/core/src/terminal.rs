//! Near-maturity check: solved values against the closed-form terminal
//! asymptote along a ladder of times to maturity.

use serde::{Deserialize, Serialize};

use crate::analytic::asymptote_from_wealth;
use crate::error::{Error, Result};
use crate::grid::{GridSpec, TransformedGrid};
use crate::market::CostSpec;
use crate::problem::ProblemSpec;
use crate::solver::{solve_qvi, Solution, SolverParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TerminalSpec {
    /// Times to maturity, all on the time levels of one march.
    pub taus: Vec<f64>,
    /// Stock holdings to sweep at.
    pub ys: Vec<f64>,
    pub nu: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_points: usize,
}

impl Default for TerminalSpec {
    fn default() -> Self {
        TerminalSpec {
            taus: vec![0.02, 0.01, 0.005, 0.0025],
            ys: vec![20.0],
            nu: 0.0,
            z_min: 0.2,
            z_max: 0.8,
            z_points: 61,
        }
    }
}

impl TerminalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.taus.is_empty() || self.taus.iter().any(|t| !(*t > 0.0)) {
            return Err(Error::validation("terminal.taus", "need at least one tau > 0"));
        }
        if self.ys.is_empty() || self.ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::validation("terminal.ys", "need at least one finite holding"));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::validation("terminal.z_min", "must be below terminal.z_max"));
        }
        if self.z_points < 2 {
            return Err(Error::validation("terminal.z_points", "need at least 2 points"));
        }
        Ok(())
    }

    fn z_sweep(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.z_points - 1;
        (0..=n).map(move |i| self.z_min + (self.z_max - self.z_min) * i as f64 / n as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalRow {
    pub tau: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub asymptote: f64,
    pub difference: f64,
}

/// Largest `|W - asymptote|` over the sweep for one holding and tau.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LadderMax {
    pub y: f64,
    pub tau: f64,
    pub max_abs: f64,
    pub at_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TerminalReport {
    pub rows: Vec<TerminalRow>,
    pub maxima: Vec<LadderMax>,
}

impl TerminalReport {
    /// Maxima for holding `y` in the order of the ladder.
    pub fn ladder(&self, y: f64) -> Vec<f64> {
        self.maxima.iter().filter(|m| m.y == y).map(|m| m.max_abs).collect()
    }

    /// Whether the maxima for `y` strictly decrease along the ladder.
    pub fn decreasing(&self, y: f64) -> bool {
        self.ladder(y).windows(2).all(|w| w[1] < w[0])
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("tau,y,z,W,asymptote,difference\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.tau, r.y, r.z, r.w, r.asymptote, r.difference
            ));
        }
        out
    }
}

/// Cash that gives liquidation value `z` together with stock holding `y`.
pub fn cash_for(z: f64, y: f64, costs: &CostSpec) -> f64 {
    z - if y >= 0.0 {
        (1.0 - costs.theta1) * y
    } else {
        (1.0 + costs.theta2) * y
    }
}

/// One march to the largest tau, keeping every ladder level.
pub fn terminal_check(
    problem: &ProblemSpec,
    grid: &GridSpec,
    params: &SolverParams,
    spec: &TerminalSpec,
) -> Result<(Solution, TerminalReport)> {
    spec.validate()?;
    if !problem.short_sale_allowed && spec.ys.iter().any(|&y| y < 0.0) {
        return Err(Error::validation("terminal.ys", "negative holding without short sales"));
    }
    let tau_max = spec.taus.iter().copied().fold(0.0, f64::max);
    let params = SolverParams {
        tau_max,
        store_levels: spec.taus.clone(),
        ..params.clone()
    };
    let mesh = TransformedGrid::build(problem, grid, params.tau_max, params.time_steps)?;
    let solution = solve_qvi(problem, &mesh, &params)?;
    let report = compare_asymptote(&solution, spec)?;
    Ok((solution, report))
}

/// Evaluates the sweep on an existing solution.
pub fn compare_asymptote(solution: &Solution, spec: &TerminalSpec) -> Result<TerminalReport> {
    spec.validate()?;
    let problem = &solution.problem;
    let sigma = problem.market.sigma();
    let mut rows = Vec::new();
    let mut maxima = Vec::new();
    for &y in &spec.ys {
        if y < 0.0 && !problem.short_sale_allowed {
            return Err(Error::validation("terminal.ys", "negative holding without short sales"));
        }
        for &tau in &spec.taus {
            let mut worst = LadderMax {
                y,
                tau,
                max_abs: 0.0,
                at_z: f64::NAN,
            };
            for z in spec.z_sweep() {
                let w = solution.value_at(tau, z, tau.sqrt() * y, spec.nu)?;
                let x = cash_for(z, y, &problem.costs);
                let asymptote = asymptote_from_wealth(&problem.utility, x, z, sigma, tau)?;
                let difference = w - asymptote;
                if difference.abs() > worst.max_abs {
                    worst.max_abs = difference.abs();
                    worst.at_z = z;
                }
                rows.push(TerminalRow {
                    tau,
                    y,
                    z,
                    w,
                    asymptote,
                    difference,
                });
            }
            maxima.push(worst);
        }
    }
    Ok(TerminalReport { rows, maxima })
}
