//! Run configuration: one TOML key tree per experiment, validated before any
//! compute, plus the embedded presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::market::{CostSpec, MarketModel};
use crate::problem::ProblemSpec;
use crate::regions::DEFAULT_LABEL_TOL;
use crate::solver::SolverParams;
use crate::terminal::TerminalSpec;
use crate::utility::{make_utility, UtilitySpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemBlock {
    pub market: MarketModel,
    pub costs: CostSpec,
    pub utility: UtilitySpec,
    #[serde(default)]
    pub liquidation_floor: f64,
    #[serde(default = "one")]
    pub horizon: f64,
    #[serde(default = "yes")]
    pub short_sale_allowed: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputsBlock {
    /// Times to maturity to export; empty means the last level only.
    pub levels: Vec<f64>,
    /// State slices to export for state-dependent models.
    pub nu: Vec<f64>,
    pub label_tol: f64,
    /// File name stem; defaults to the experiment tag.
    pub prefix: Option<String>,
}

impl Default for OutputsBlock {
    fn default() -> Self {
        OutputsBlock {
            levels: Vec::new(),
            nu: Vec::new(),
            label_tol: DEFAULT_LABEL_TOL,
            prefix: None,
        }
    }
}

/// Starting point and sample size of the Monte Carlo comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McBlock {
    pub paths: usize,
    pub seed: u64,
    pub dt: f64,
    /// Liquidation value and stock holding at the start.
    pub z: f64,
    pub y: f64,
    pub nu: f64,
}

impl Default for McBlock {
    fn default() -> Self {
        McBlock {
            paths: 100_000,
            seed: 20_240_601,
            dt: 1e-4,
            z: 0.5,
            y: 20.0,
            nu: 0.0,
        }
    }
}

impl McBlock {
    pub fn validate(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::validation("mc.paths", "must be >= 1"));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::validation("mc.dt", "must be finite and > 0"));
        }
        if !(self.z.is_finite() && self.y.is_finite() && self.nu.is_finite()) {
            return Err(Error::validation("mc.z", "start point must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    #[serde(default)]
    pub description: String,
    pub problem: ProblemBlock,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub solver: SolverParams,
    #[serde(default)]
    pub outputs: OutputsBlock,
    pub terminal: Option<TerminalSpec>,
    pub mc: Option<McBlock>,
}

/// A validated configuration, ready to solve.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: RunConfig,
    pub problem: ProblemSpec,
    pub grid: GridSpec,
    /// Solver parameters with every exported level retained.
    pub params: SolverParams,
    pub config_hash: String,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text` after applying `key=value` overrides on the key tree.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        RunConfig::deserialize(table).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Checks every block and builds the problem.
    pub fn resolve(&self) -> Result<Run> {
        if self.experiment.trim().is_empty() {
            return Err(Error::validation("experiment", "must not be empty"));
        }
        let p = &self.problem;
        let problem = (|| {
            let utility = make_utility(p.utility, p.liquidation_floor)?;
            ProblemSpec::new(p.market, p.costs, p.horizon, utility, p.short_sale_allowed)
        })()
        .map_err(prefix_problem_key)?;
        self.grid.validate(&problem)?;
        self.solver.validate()?;
        if self.solver.tau_max > problem.horizon {
            return Err(Error::validation("solver.tau_max", "must not exceed problem.horizon"));
        }
        let o = &self.outputs;
        if !(o.label_tol > 0.0) {
            return Err(Error::validation("outputs.label_tol", "must be > 0"));
        }
        if o.levels.iter().any(|t| !(*t > 0.0 && *t <= self.solver.tau_max)) {
            return Err(Error::validation("outputs.levels", "levels must lie in (0, solver.tau_max]"));
        }
        if o.nu.iter().any(|n| !n.is_finite()) {
            return Err(Error::validation("outputs.nu", "must be finite"));
        }
        if let Some(t) = &self.terminal {
            t.validate()?;
            if !problem.short_sale_allowed && t.ys.iter().any(|&y| y < 0.0) {
                return Err(Error::validation("terminal.ys", "negative holding without short sales"));
            }
        }
        if let Some(mc) = &self.mc {
            mc.validate()?;
        }
        let mut params = self.solver.clone();
        params.store_levels.extend_from_slice(&o.levels);
        Ok(Run {
            config: self.clone(),
            problem,
            grid: self.grid.clone(),
            params,
            config_hash: self.hash()?,
        })
    }

    /// File name stem for outputs.
    pub fn prefix(&self) -> &str {
        self.outputs.prefix.as_deref().unwrap_or(&self.experiment)
    }
}

fn prefix_problem_key(e: Error) -> Error {
    match e {
        Error::Validation { key, reason }
            if ["market", "costs", "utility"].iter().any(|p| key.starts_with(p)) =>
        {
            Error::Validation {
                key: format!("problem.{key}"),
                reason,
            }
        }
        other => other,
    }
}

/// Sets a dotted key. The value is read as a TOML value, falling back to a
/// bare string.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::validation("--set", format!("expected key=value, got '{assignment}'")))?;
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::validation("--set", format!("malformed key '{key}'")));
    }
    let mut node = table;
    for p in &parts[..parts.len() - 1] {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::validation(key, format!("'{p}' is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Shipped experiment configurations, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("fig1-topleft", include_str!("../presets/fig1-topleft.toml")),
    ("fig1-midleft", include_str!("../presets/fig1-midleft.toml")),
    ("fig1-bottomleft", include_str!("../presets/fig1-bottomleft.toml")),
    ("fig1-topright", include_str!("../presets/fig1-topright.toml")),
    ("fig1-midright", include_str!("../presets/fig1-midright.toml")),
    ("fig1-bottomright", include_str!("../presets/fig1-bottomright.toml")),
    ("fig2-left", include_str!("../presets/fig2-left.toml")),
    ("fig2-right", include_str!("../presets/fig2-right.toml")),
    ("fig3-left", include_str!("../presets/fig3-left.toml")),
    ("fig3-right", include_str!("../presets/fig3-right.toml")),
    ("fig4-upperleft", include_str!("../presets/fig4-upperleft.toml")),
    ("fig4-upperright", include_str!("../presets/fig4-upperright.toml")),
    ("fig4-lowerleft", include_str!("../presets/fig4-lowerleft.toml")),
    ("fig4-lowerright", include_str!("../presets/fig4-lowerright.toml")),
    ("fig5", include_str!("../presets/fig5.toml")),
    ("fig6", include_str!("../presets/fig6.toml")),
    ("figSS", include_str!("../presets/figSS.toml")),
    ("aspiration-jump-left", include_str!("../presets/aspiration-jump-left.toml")),
    ("aspiration-jump-right", include_str!("../presets/aspiration-jump-right.toml")),
    ("fig7", include_str!("../presets/fig7.toml")),
    ("fig8", include_str!("../presets/fig8.toml")),
    ("fig9", include_str!("../presets/fig9.toml")),
    ("fig10-aspiration", include_str!("../presets/fig10-aspiration.toml")),
    ("fig10-sshaped", include_str!("../presets/fig10-sshaped.toml")),
];

pub fn preset_text(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::validation("--preset", format!("unknown preset '{name}'")))
}

pub fn preset(name: &str) -> Result<RunConfig> {
    RunConfig::from_toml(preset_text(name)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_resolves() {
        for (name, _) in PRESETS {
            let c = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(c.experiment, *name);
            c.resolve().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::from_toml_with(
            preset_text("fig1-topleft").unwrap(),
            &["grid.nz=41".into(), "problem.costs.theta1=0.002".into(), "outputs.prefix=run".into()],
        )
        .unwrap();
        assert_eq!(c.grid.nz, 41);
        assert_eq!(c.problem.costs.theta1, 0.002);
        assert_eq!(c.prefix(), "run");
    }

    #[test]
    fn bad_cost_names_the_key() {
        let c = RunConfig::from_toml_with(preset_text("fig1-topleft").unwrap(), &["problem.costs.theta1=1.5".into()])
            .unwrap();
        match c.resolve().unwrap_err() {
            Error::Validation { key, .. } => assert_eq!(key, "problem.costs.theta1"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml_with(preset_text("fig1-topleft").unwrap(), &["grid.nzz=41".into()]).unwrap_err();
        assert!(err.to_string().contains("nzz"), "{err}");
        assert!(err.is_validation());
    }

    #[test]
    fn hash_follows_content() {
        let a = preset("fig1-topleft").unwrap();
        let b = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        let mut c = a.clone();
        c.grid.nz += 2;
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }
}
