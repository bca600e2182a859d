//! Refinement ladders: penalty constant, mesh width and far-position
//! boundary, with successive differences on a common window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::problem::ProblemSpec;
use crate::solver::{solve_with_spec, Solution, SolverParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LadderMode {
    /// Doubles the penalty constant on a fixed mesh.
    Penalty,
    /// Halves the wealth, position and time steps.
    Mesh,
    /// Doubles the far-position boundary, keeping the spacing near `v = 0`.
    Boundary,
}

impl std::str::FromStr for LadderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "penalty" => Ok(LadderMode::Penalty),
            "mesh" => Ok(LadderMode::Mesh),
            "boundary" => Ok(LadderMode::Boundary),
            _ => Err(Error::validation(
                "converge.mode",
                format!("unknown ladder '{s}' (penalty, mesh, boundary)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LadderOptions {
    /// Number of solves, at least 2.
    pub rungs: usize,
    /// Only nodes with `|y|` at most this are compared.
    pub y_window: f64,
}

impl Default for LadderOptions {
    fn default() -> Self {
        LadderOptions {
            rungs: 2,
            y_window: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    /// Penalty scale, wealth nodes or far-position bound, by mode.
    pub parameter: f64,
    pub nz: usize,
    pub nv: usize,
    pub time_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub mode: LadderMode,
    pub tau: f64,
    pub rungs: Vec<Rung>,
    /// Max-norm difference between consecutive rungs.
    pub differences: Vec<f64>,
    /// `log2` of consecutive difference ratios.
    pub orders: Vec<f64>,
    pub compared_nodes: usize,
}

/// Solves each rung of the ladder and compares the final levels on the
/// interior nodes of the first rung that lie inside the window.
pub fn convergence_study(
    problem: &ProblemSpec,
    base: &GridSpec,
    params: &SolverParams,
    mode: LadderMode,
    options: &LadderOptions,
) -> Result<LadderReport> {
    if options.rungs < 2 {
        return Err(Error::validation("converge.rungs", "need at least 2 rungs"));
    }
    if !(options.y_window > 0.0) {
        return Err(Error::validation("converge.y_window", "must be > 0"));
    }
    let mut rungs = Vec::with_capacity(options.rungs);
    let mut solutions: Vec<Solution> = Vec::with_capacity(options.rungs);
    for r in 0..options.rungs {
        let (grid, par) = rung_setup(base, params, mode, r);
        rungs.push(Rung {
            parameter: match mode {
                LadderMode::Penalty => par.penalty_scale,
                LadderMode::Mesh => grid.nz as f64,
                LadderMode::Boundary => grid.v_max,
            },
            nz: grid.nz,
            nv: grid.nv,
            time_steps: par.time_steps,
        });
        solutions.push(solve_with_spec(problem, &grid, &par)?);
    }

    let first = &solutions[0];
    let g = &first.grid;
    let tau = first.last_level().tau;
    let sq = tau.sqrt();
    let nodes: Vec<(f64, f64, f64)> = (0..g.len())
        .filter_map(|n| {
            let (i, j, k) = g.coords(n);
            (g.is_interior(i, j) && g.v[j].abs() / sq <= options.y_window)
                .then(|| (g.z[i], g.v[j], g.nu_at(k)))
        })
        .collect();
    if nodes.is_empty() {
        return Err(Error::validation("converge.y_window", "no nodes inside the window"));
    }
    let sample = |s: &Solution| -> Result<Vec<f64>> {
        nodes
            .iter()
            .map(|&(z, v, nu)| s.grid.interpolate(&s.last_level().w, z, v, nu))
            .collect()
    };
    let values: Vec<Vec<f64>> = solutions.iter().map(sample).collect::<Result<_>>()?;
    let differences: Vec<f64> = values
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
        .collect();
    let orders = differences.windows(2).map(|d| (d[0] / d[1]).log2()).collect();
    Ok(LadderReport {
        mode,
        tau,
        rungs,
        differences,
        orders,
        compared_nodes: nodes.len(),
    })
}

fn rung_setup(base: &GridSpec, params: &SolverParams, mode: LadderMode, r: usize) -> (GridSpec, SolverParams) {
    let factor = 1usize << r;
    let mut grid = base.clone();
    let mut par = params.clone();
    match mode {
        LadderMode::Penalty => par.penalty_scale *= factor as f64,
        LadderMode::Mesh => {
            grid.nz = (base.nz - 1) * factor + 1;
            grid.nv = (base.nv - 1) * factor + 1;
            par.time_steps = params.time_steps * factor;
        }
        LadderMode::Boundary => {
            grid.v_max = base.v_max * factor as f64;
            // Keep the sinh parameter spacing, so nodes near v = 0 barely move.
            let xi = |vm: f64| (vm / base.v_scale).asinh();
            let grow = xi(grid.v_max) / xi(base.v_max);
            let intervals = ((base.nv - 1) as f64 * grow / 2.0).round() as usize * 2;
            grid.nv = intervals + 1;
        }
    }
    (grid, par)
}
