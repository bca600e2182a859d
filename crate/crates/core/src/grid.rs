//! Transformed coordinates and mesh construction.
//!
//! The solver works in `(z, v[, nu])` with `z` the liquidation value and
//! `v = sqrt(tau) * y`, `tau` the time to maturity. Nodes are numbered
//! `i + nz * (j + nv * k)` for wealth index `i`, position index `j` and
//! state index `k`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{liquidation_value, CostSpec, MarketModel};
use crate::problem::ProblemSpec;
use crate::utility::UtilitySpec;

/// Mesh parameters as read from a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub nz: usize,
    pub nv: usize,
    /// State nodes; ignored for constant-coefficient markets.
    pub nnu: usize,
    /// Top of the wealth axis; defaults to a utility-specific value.
    pub z_max: Option<f64>,
    /// Coarse-to-fine spacing ratio around utility jumps (1 = uniform).
    pub z_refine_ratio: f64,
    /// Width of each refinement bump, as a fraction of the wealth span.
    pub z_refine_width: f64,
    pub v_max: f64,
    /// Scale of the sinh stretching of the position axis; smaller values
    /// concentrate nodes near `v = 0`.
    pub v_scale: f64,
    /// State axis spans `[-w, w]`; defaults from the market parameters.
    pub nu_half_width: Option<f64>,
    /// Largest number of nodes a diffusion arm may step along its
    /// dominant axis.
    pub stencil_reach: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nz: 161,
            nv: 121,
            nnu: 21,
            z_max: None,
            z_refine_ratio: 8.0,
            z_refine_width: 0.05,
            v_max: 100.0,
            v_scale: 1.0,
            nu_half_width: None,
            stencil_reach: 4,
        }
    }
}

impl GridSpec {
    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        if self.nz < 5 {
            return Err(Error::validation("grid.nz", "need at least 5 wealth nodes"));
        }
        if self.nv < 5 {
            return Err(Error::validation("grid.nv", "need at least 5 position nodes"));
        }
        if problem.short_sale_allowed && self.nv % 2 == 0 {
            return Err(Error::validation(
                "grid.nv",
                "must be odd when short sales are allowed so that v = 0 is a node",
            ));
        }
        if problem.market.has_state() && (self.nnu < 3 || self.nnu % 2 == 0) {
            return Err(Error::validation("grid.nnu", "need an odd count of at least 3 state nodes"));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::validation("grid.v_max", "must be finite and > 0"));
        }
        if !(self.v_scale > 0.0 && self.v_scale.is_finite()) {
            return Err(Error::validation("grid.v_scale", "must be finite and > 0"));
        }
        if !(self.z_refine_ratio >= 1.0) {
            return Err(Error::validation("grid.z_refine_ratio", "must be >= 1"));
        }
        if !(self.z_refine_width > 0.0) {
            return Err(Error::validation("grid.z_refine_width", "must be > 0"));
        }
        if self.stencil_reach == 0 {
            return Err(Error::validation("grid.stencil_reach", "must be >= 1"));
        }
        if let Some(z_max) = self.z_max {
            if !(z_max > problem.floor) {
                return Err(Error::validation("grid.z_max", "must exceed the liquidation floor"));
            }
            if let Some(UtilitySpec::GoalReaching { target }) = problem.utility.spec() {
                if z_max != *target {
                    return Err(Error::validation(
                        "grid.z_max",
                        "goal-reaching problems end the wealth axis at the goal",
                    ));
                }
            }
        }
        if let Some(w) = self.nu_half_width {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::validation("grid.nu_half_width", "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

/// Time-to-maturity levels `tau_n = n * tau_max / steps`, `n = 1..=steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeLevels {
    pub tau_max: f64,
    pub steps: usize,
}

impl TimeLevels {
    pub fn dtau(&self) -> f64 {
        self.tau_max / self.steps as f64
    }

    pub fn tau(&self, n: usize) -> f64 {
        if n == self.steps {
            self.tau_max
        } else {
            n as f64 * self.dtau()
        }
    }

    /// Index of the level closest to `tau`, if within half a step.
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        let n = (tau / self.dtau()).round();
        if n < 1.0 || n > self.steps as f64 {
            return None;
        }
        let n = n as usize;
        ((self.tau(n) - tau).abs() <= 1e-9 * self.tau_max.max(1.0)).then_some(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformedGrid {
    pub z: Vec<f64>,
    pub v: Vec<f64>,
    pub nu: Option<Vec<f64>>,
    pub time: TimeLevels,
    pub horizon: f64,
    pub short_sale_allowed: bool,
    pub stencil_reach: usize,
}

impl TransformedGrid {
    pub fn build(
        problem: &ProblemSpec,
        spec: &GridSpec,
        tau_max: f64,
        time_steps: usize,
    ) -> Result<Self> {
        spec.validate(problem)?;
        if !(tau_max > 0.0 && tau_max <= problem.horizon * (1.0 + 1e-12)) {
            return Err(Error::validation(
                "solver.tau_max",
                "must lie in (0, horizon]",
            ));
        }
        if time_steps == 0 {
            return Err(Error::validation("solver.time_steps", "must be >= 1"));
        }
        let lo = problem.floor;
        let hi = spec.z_max.unwrap_or_else(|| problem.default_z_max());
        let breaks: Vec<f64> = problem
            .utility
            .breakpoints()
            .filter(|&b| b > lo && b < hi)
            .collect();
        let centers: Vec<f64> = problem
            .utility
            .jumps()
            .iter()
            .map(|j| j.at)
            .filter(|&c| c >= lo && c <= hi)
            .collect();
        let z = refined_mesh(
            lo,
            hi,
            spec.nz,
            &breaks,
            &centers,
            spec.z_refine_ratio,
            spec.z_refine_width * (hi - lo),
        )?;
        let v = sinh_mesh(spec.v_max, spec.v_scale, spec.nv, problem.short_sale_allowed);
        let nu = match problem.market {
            MarketModel::GaussianMeanReturn {
                nu_bar, zeta, kappa, ..
            } => {
                let w = spec.nu_half_width.unwrap_or_else(|| default_nu_half_width(nu_bar, zeta, kappa));
                Some(uniform_mesh(-w, w, spec.nnu))
            }
            MarketModel::Gbm { .. } => None,
        };
        Ok(TransformedGrid {
            z,
            v,
            nu,
            time: TimeLevels {
                tau_max,
                steps: time_steps,
            },
            horizon: problem.horizon,
            short_sale_allowed: problem.short_sale_allowed,
            stencil_reach: spec.stencil_reach,
        })
    }

    pub fn nz(&self) -> usize {
        self.z.len()
    }

    pub fn nv(&self) -> usize {
        self.v.len()
    }

    pub fn nnu(&self) -> usize {
        self.nu.as_ref().map_or(1, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.nz() * self.nv() * self.nnu()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.nz() * self.nv()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nz() * (j + self.nv() * k)
    }

    pub fn coords(&self, node: usize) -> (usize, usize, usize) {
        let nz = self.nz();
        let nv = self.nv();
        (node % nz, (node / nz) % nv, node / (nz * nv))
    }

    pub fn nu_at(&self, k: usize) -> f64 {
        self.nu.as_ref().map_or(0.0, |n| n[k])
    }

    /// Index of the `v = 0` node.
    pub fn v_zero(&self) -> usize {
        self.v.iter().position(|&v| v == 0.0).expect("v = 0 is a node")
    }

    /// Calendar times `T - tau_n`, strictly decreasing.
    pub fn time_levels(&self) -> Vec<f64> {
        (1..=self.time.steps)
            .map(|n| self.horizon - self.time.tau(n))
            .collect()
    }

    /// Nearest wealth node.
    pub fn nearest_z(&self, z: f64) -> usize {
        nearest(&self.z, z)
    }

    /// Nearest position node with the same sign as `v` (zero maps to zero).
    pub fn nearest_v_same_sign(&self, v: f64) -> usize {
        let j0 = if self.short_sale_allowed { self.v_zero() } else { 0 };
        if v == 0.0 {
            return j0;
        }
        let range = if v > 0.0 {
            j0 + 1..self.nv()
        } else {
            0..j0
        };
        if range.is_empty() {
            return j0;
        }
        let start = range.start;
        start + nearest(&self.v[range], v)
    }

    pub fn nearest_nu(&self, nu: f64) -> usize {
        self.nu.as_ref().map_or(0, |n| nearest(n, nu))
    }

    /// Multilinear interpolation of a nodal field. Points outside the mesh
    /// are a domain error.
    pub fn interpolate(&self, field: &[f64], z: f64, v: f64, nu: f64) -> Result<f64> {
        let inside = |xs: &[f64], x: f64| {
            let span = xs[xs.len() - 1] - xs[0];
            let eps = 1e-12 * span.abs().max(1.0);
            x >= xs[0] - eps && x <= xs[xs.len() - 1] + eps
        };
        let zero = [0.0];
        let nu_axis: &[f64] = self.nu.as_deref().unwrap_or(&zero);
        if !inside(&self.z, z) || !inside(&self.v, v) || (self.nu.is_some() && !inside(nu_axis, nu)) {
            return Err(Error::domain(
                "interpolate",
                format!("point (z = {z}, v = {v}, nu = {nu}) lies outside the mesh"),
            ));
        }
        let bz = bracket(&self.z, z);
        let bv = bracket(&self.v, v);
        let bn = bracket(nu_axis, nu);
        let mut acc = 0.0;
        for (i, wi) in [(bz.0, 1.0 - bz.2), (bz.1, bz.2)] {
            for (j, wj) in [(bv.0, 1.0 - bv.2), (bv.1, bv.2)] {
                for (k, wk) in [(bn.0, 1.0 - bn.2), (bn.1, bn.2)] {
                    let w = wi * wj * wk;
                    if w != 0.0 {
                        acc += w * field[self.index(i, j, k)];
                    }
                }
            }
        }
        Ok(acc)
    }

    /// Interior test for the wealth and position axes.
    pub fn is_interior(&self, i: usize, j: usize) -> bool {
        let j_lo = if self.short_sale_allowed { 1 } else { 0 };
        i > 0 && i + 1 < self.nz() && j >= j_lo && j + 1 < self.nv()
    }
}

/// `(lo, hi, w)` with `x = (1 - w) xs[lo] + w xs[hi]`.
pub fn bracket(xs: &[f64], x: f64) -> (usize, usize, f64) {
    let n = xs.len();
    if n == 1 {
        return (0, 0, 0.0);
    }
    let span = xs[n - 1] - xs[0];
    let eps = 1e-12 * span.max(1.0);
    let p = xs.partition_point(|&a| a < x);
    if p < n && (xs[p] - x).abs() <= eps {
        return (p, p, 0.0);
    }
    if p > 0 && (x - xs[p - 1]).abs() <= eps {
        return (p - 1, p - 1, 0.0);
    }
    let hi = p.clamp(1, n - 1);
    let lo = hi - 1;
    let w = ((x - xs[lo]) / (xs[hi] - xs[lo])).clamp(0.0, 1.0);
    (lo, hi, w)
}

fn nearest(xs: &[f64], x: f64) -> usize {
    let p = xs.partition_point(|&a| a < x);
    if p == 0 {
        0
    } else if p == xs.len() {
        xs.len() - 1
    } else if (xs[p] - x) < (x - xs[p - 1]) {
        p
    } else {
        p - 1
    }
}

/// Default half-width of the state axis.
pub fn default_nu_half_width(nu_bar: f64, zeta: f64, kappa: f64) -> f64 {
    if nu_bar != 0.0 {
        10.0 / 3.0 * nu_bar.abs()
    } else if kappa > 0.0 {
        4.0 * zeta / (2.0 * kappa).sqrt()
    } else {
        4.0 * zeta
    }
}

pub fn uniform_mesh(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let mut m: Vec<f64> = (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect();
    m[n - 1] = hi;
    if lo == -hi && n % 2 == 1 {
        m[n / 2] = 0.0;
        for i in 0..n / 2 {
            m[n - 1 - i] = -m[i];
        }
    }
    m
}

/// Position mesh `v = c sinh(xi)` with uniform `xi`. The symmetric variant
/// has an odd node count and is exactly antisymmetric about zero.
pub fn sinh_mesh(v_max: f64, scale: f64, n: usize, symmetric: bool) -> Vec<f64> {
    let xi_max = (v_max / scale).asinh();
    if symmetric {
        let half = n / 2;
        let mut m = vec![0.0; n];
        for h in 1..=half {
            let v = if h == half {
                v_max
            } else {
                scale * (xi_max * h as f64 / half as f64).sinh()
            };
            m[half + h] = v;
            m[half - h] = -v;
        }
        m
    } else {
        let mut m: Vec<f64> = (0..n)
            .map(|j| scale * (xi_max * j as f64 / (n - 1) as f64).sinh())
            .collect();
        m[0] = 0.0;
        m[n - 1] = v_max;
        m
    }
}

/// Wealth mesh on `[lo, hi]` with node density raised by `ratio` within
/// about `width` of each center. Every breakpoint becomes a node.
pub fn refined_mesh(
    lo: f64,
    hi: f64,
    n: usize,
    breakpoints: &[f64],
    centers: &[f64],
    ratio: f64,
    width: f64,
) -> Result<Vec<f64>> {
    let density = |z: f64| {
        1.0 + (ratio - 1.0)
            * centers
                .iter()
                .map(|c| (-0.5 * ((z - c) / width).powi(2)).exp())
                .sum::<f64>()
    };
    // Cumulative density by the trapezoid rule on a fine sample.
    const FINE: usize = 20_000;
    let xs: Vec<f64> = (0..=FINE)
        .map(|i| lo + (hi - lo) * i as f64 / FINE as f64)
        .collect();
    let mut cum = vec![0.0; FINE + 1];
    for i in 1..=FINE {
        cum[i] = cum[i - 1] + 0.5 * (density(xs[i - 1]) + density(xs[i])) * (xs[i] - xs[i - 1]);
    }
    let cum_at = |z: f64| {
        let s = ((z - lo) / (hi - lo) * FINE as f64).clamp(0.0, FINE as f64);
        let i = (s.floor() as usize).min(FINE - 1);
        cum[i] + (s - i as f64) * (cum[i + 1] - cum[i])
    };
    let inv_cum = |g: f64| {
        let p = cum.partition_point(|&c| c < g).clamp(1, FINE);
        let (c0, c1) = (cum[p - 1], cum[p]);
        let w = if c1 > c0 { (g - c0) / (c1 - c0) } else { 0.0 };
        xs[p - 1] + w * (xs[p] - xs[p - 1])
    };

    let mut ends = vec![lo];
    ends.extend(breakpoints.iter().copied());
    ends.push(hi);
    let segments = ends.len() - 1;
    if n - 1 < segments {
        return Err(Error::validation("grid.nz", "too few wealth nodes for the utility breakpoints"));
    }
    // Largest-remainder split of the intervals, at least one per segment.
    let total = cum_at(hi);
    let shares: Vec<f64> = ends
        .windows(2)
        .map(|w| (cum_at(w[1]) - cum_at(w[0])) / total * (n - 1) as f64)
        .collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| (s.floor() as usize).max(1)).collect();
    while counts.iter().sum::<usize>() > n - 1 {
        let i = (0..segments)
            .filter(|&i| counts[i] > 1)
            .max_by(|&a, &b| (counts[a] as f64 - shares[a]).total_cmp(&(counts[b] as f64 - shares[b])))
            .expect("some segment has spare intervals");
        counts[i] -= 1;
    }
    while counts.iter().sum::<usize>() < n - 1 {
        let i = (0..segments)
            .max_by(|&a, &b| (shares[a] - counts[a] as f64).total_cmp(&(shares[b] - counts[b] as f64)))
            .expect("at least one segment");
        counts[i] += 1;
    }

    let mut mesh = Vec::with_capacity(n);
    mesh.push(lo);
    for (s, w) in ends.windows(2).enumerate() {
        let (g0, g1) = (cum_at(w[0]), cum_at(w[1]));
        for m in 1..counts[s] {
            mesh.push(inv_cum(g0 + (g1 - g0) * m as f64 / counts[s] as f64));
        }
        mesh.push(w[1]);
    }
    if mesh.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation("grid", "wealth mesh is not strictly increasing"));
    }
    Ok(mesh)
}

/// `(z, v)` of a position at time to maturity `tau`.
pub fn transform_point(tau: f64, x: f64, y: f64, costs: &CostSpec) -> Result<(f64, f64)> {
    if !(tau >= 0.0) {
        return Err(Error::domain("transform_point", "time to maturity must be >= 0"));
    }
    Ok((liquidation_value(x, y, costs)?, tau.sqrt() * y))
}

/// `(x, y)` from transformed coordinates; the sign of `v` selects the cost
/// branch.
pub fn inverse_transform(tau: f64, z: f64, v: f64, costs: &CostSpec) -> Result<(f64, f64)> {
    if !z.is_finite() || !v.is_finite() {
        return Err(Error::domain("inverse_transform", "non-finite coordinates"));
    }
    if !(tau >= 0.0) {
        return Err(Error::domain("inverse_transform", "time to maturity must be >= 0"));
    }
    if tau == 0.0 {
        if v != 0.0 {
            return Err(Error::DegenerateTime { v });
        }
        return Ok((z, 0.0));
    }
    let y = v / tau.sqrt();
    let x = if y >= 0.0 {
        z - (1.0 - costs.theta1) * y
    } else {
        z - (1.0 + costs.theta2) * y
    };
    Ok((x, y))
}
