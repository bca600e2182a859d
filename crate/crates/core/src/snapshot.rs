//! Versioned text container for solved fields.
//!
//! ```text
//! nctc-snapshot <version>
//! <one-line JSON header>
//! level <step> <tau>
//! W,residual_pde,residual_sell,residual_buy
//! <one row per node, in node order>
//! ...
//! end
//! ```
//!
//! The header holds the experiment tag, configuration hash, problem record,
//! mesh, solver parameters and diagnostics. Numbers are written in shortest
//! round-trip form, so reading a snapshot back gives bit-identical fields.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TransformedGrid;
use crate::market::{CostSpec, MarketModel};
use crate::problem::ProblemSpec;
use crate::solver::{Diagnostics, Level, Residuals, Solution, SolverParams};
use crate::utility::{make_utility, UtilitySpec};

pub const SNAPSHOT_VERSION: u32 = 1;
const MAGIC: &str = "nctc-snapshot";
const FIELD_HEADER: &str = "W,residual_pde,residual_sell,residual_buy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemRecord {
    pub market: MarketModel,
    pub costs: CostSpec,
    pub utility: UtilitySpec,
    pub liquidation_floor: f64,
    pub horizon: f64,
    pub short_sale_allowed: bool,
}

impl ProblemRecord {
    pub fn of(problem: &ProblemSpec) -> Result<Self> {
        let utility = *problem
            .utility
            .spec()
            .ok_or_else(|| Error::Unsupported("snapshots need a parameterised utility".into()))?;
        Ok(ProblemRecord {
            market: problem.market,
            costs: problem.costs,
            utility,
            liquidation_floor: problem.floor,
            horizon: problem.horizon,
            short_sale_allowed: problem.short_sale_allowed,
        })
    }

    pub fn build(&self) -> Result<ProblemSpec> {
        let u = make_utility(self.utility, self.liquidation_floor)?;
        ProblemSpec::new(self.market, self.costs, self.horizon, u, self.short_sale_allowed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub experiment: String,
    pub config_hash: String,
    pub problem: ProblemRecord,
    pub grid: TransformedGrid,
    pub params: SolverParams,
    pub diagnostics: Diagnostics,
}

fn num(out: &mut String, x: f64) {
    if x.is_nan() {
        out.push_str("nan");
    } else {
        write!(out, "{x:e}").expect("writing to a string");
    }
}

pub fn write_snapshot(solution: &Solution, experiment: &str, config_hash: &str) -> Result<String> {
    let header = SnapshotHeader {
        version: SNAPSHOT_VERSION,
        experiment: experiment.to_string(),
        config_hash: config_hash.to_string(),
        problem: ProblemRecord::of(&solution.problem)?,
        grid: solution.grid.clone(),
        params: solution.params.clone(),
        diagnostics: solution.diagnostics.clone(),
    };
    let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    let n = solution.grid.len();
    let mut out = String::with_capacity(json.len() + solution.levels.len() * n * 80);
    writeln!(out, "{MAGIC} {SNAPSHOT_VERSION}").expect("writing to a string");
    out.push_str(&json);
    out.push('\n');
    for level in &solution.levels {
        write!(out, "level {} ", level.step).expect("writing to a string");
        num(&mut out, level.tau);
        out.push('\n');
        out.push_str(FIELD_HEADER);
        out.push('\n');
        let r = &level.residuals;
        for node in 0..n {
            for (c, x) in [level.w[node], r.pde[node], r.sell[node], r.buy[node]].into_iter().enumerate() {
                if c > 0 {
                    out.push(',');
                }
                num(&mut out, x);
            }
            out.push('\n');
        }
    }
    out.push_str("end\n");
    Ok(out)
}

fn bad(line: usize, what: impl std::fmt::Display) -> Error {
    Error::Format(format!("snapshot line {line}: {what}"))
}

fn parse_num(s: &str, line: usize) -> Result<f64> {
    s.trim().parse().map_err(|_| bad(line, format!("bad number '{s}'")))
}

pub fn read_snapshot(text: &str) -> Result<(SnapshotHeader, Solution)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (_, first) = lines.next().ok_or_else(|| bad(1, "empty snapshot"))?;
    let version = first
        .strip_prefix(MAGIC)
        .and_then(|v| v.trim().parse::<u32>().ok())
        .ok_or_else(|| bad(1, "missing snapshot magic"))?;
    if version != SNAPSHOT_VERSION {
        return Err(bad(1, format!("unsupported version {version}")));
    }
    let (ln, json) = lines.next().ok_or_else(|| bad(2, "missing header"))?;
    let header: SnapshotHeader = serde_json::from_str(json).map_err(|e| bad(ln, e))?;
    let problem = header.problem.build()?;
    let n = header.grid.len();

    let mut levels = Vec::new();
    loop {
        let (ln, line) = lines.next().ok_or_else(|| bad(0, "missing end marker"))?;
        if line == "end" {
            break;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("level") {
            return Err(bad(ln, "expected a level line"));
        }
        let step: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(ln, "bad step"))?;
        let tau = parse_num(parts.next().ok_or_else(|| bad(ln, "missing tau"))?, ln)?;
        let (ln, cols) = lines.next().ok_or_else(|| bad(ln + 1, "missing field header"))?;
        if cols != FIELD_HEADER {
            return Err(bad(ln, "unexpected field header"));
        }
        let mut w = Vec::with_capacity(n);
        let mut res = Residuals {
            pde: Vec::with_capacity(n),
            sell: Vec::with_capacity(n),
            buy: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let (ln, row) = lines.next().ok_or_else(|| bad(0, "truncated field block"))?;
            let vals: Vec<f64> = row.split(',').map(|s| parse_num(s, ln)).collect::<Result<_>>()?;
            if vals.len() != 4 {
                return Err(bad(ln, "expected 4 columns"));
            }
            w.push(vals[0]);
            res.pde.push(vals[1]);
            res.sell.push(vals[2]);
            res.buy.push(vals[3]);
        }
        levels.push(Level {
            step,
            tau,
            w,
            residuals: res,
        });
    }
    if levels.is_empty() {
        return Err(Error::Format("snapshot holds no levels".into()));
    }
    let solution = Solution {
        problem,
        grid: header.grid.clone(),
        params: header.params.clone(),
        levels,
        diagnostics: header.diagnostics.clone(),
    };
    Ok((header, solution))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::solver::solve_with_spec;

    #[test]
    fn round_trip_is_exact() {
        let p = ProblemSpec::new(
            MarketModel::gbm(0.04, 0.3),
            CostSpec::symmetric(1e-3).unwrap(),
            1.0,
            make_utility(UtilitySpec::GoalReaching { target: 1.0 }, 0.0).unwrap(),
            true,
        )
        .unwrap();
        let g = GridSpec {
            nz: 21,
            nv: 15,
            v_max: 10.0,
            ..GridSpec::default()
        };
        let params = SolverParams {
            tau_max: 0.02,
            time_steps: 4,
            store_levels: vec![0.01],
            ..SolverParams::default()
        };
        let s = solve_with_spec(&p, &g, &params).unwrap();
        let text = write_snapshot(&s, "t", "abc").unwrap();
        let (h, back) = read_snapshot(&text).unwrap();
        assert_eq!(h.experiment, "t");
        assert_eq!(back.levels.len(), 2);
        for (a, b) in s.levels.iter().zip(&back.levels) {
            assert_eq!(a.tau, b.tau);
            assert_eq!(a.w, b.w);
            for (x, y) in a.residuals.pde.iter().zip(&b.residuals.pde) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
            assert_eq!(a.residuals.sell.iter().filter(|x| x.is_infinite()).count(),
                       b.residuals.sell.iter().filter(|x| x.is_infinite()).count());
        }
        assert_eq!(back.problem, s.problem);
        assert_eq!(write_snapshot(&back, "t", "abc").unwrap(), text);
    }

    #[test]
    fn rejects_foreign_text() {
        assert!(read_snapshot("hello\n").is_err());
        assert!(read_snapshot("nctc-snapshot 9\n{}\n").is_err());
    }
}
