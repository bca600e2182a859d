//! Discrete transformed operator, gradient-constraint forms and boundary
//! data.
//!
//! The diffusion part of the operator has rank one in `(z, v)` (two in
//! `(z, v, nu)`): it is a sum of squared directional derivatives
//! `1/2 (d . grad)^2`. Each is discretised as a second difference along
//! `d` whose arms step a few nodes along the dominant axis and read the
//! other axes by multilinear interpolation. All weights are non-negative,
//! so every row has non-negative off-diagonals and zero row sum.

use crate::analytic::CrraFactor;
use crate::error::Result;
use crate::grid::{bracket as locate, TransformedGrid};
use crate::market::{CostSpec, MarketModel};
use crate::problem::{BoundaryKind, ProblemSpec};

/// Coefficients of the transformed operator at one point. Second-order
/// entries multiply the matching derivative directly (`a_zv` multiplies
/// `W_zv`, not half of it).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OperatorCoefficients {
    pub a_zz: f64,
    pub a_zv: f64,
    pub a_vv: f64,
    pub a_nn: f64,
    pub a_zn: f64,
    pub a_vn: f64,
    pub b_z: f64,
    pub b_v: f64,
    pub b_n: f64,
}

/// Square roots of the diffusion: the operator's second-order part equals
/// `sum_d 1/2 (d . grad)^2` over the returned directions.
pub fn diffusion_directions(model: &MarketModel, theta: f64, tau: f64, v: f64) -> Vec<[f64; 3]> {
    let sigma = model.sigma();
    let sq = tau.sqrt();
    let lead = [sigma * v * (1.0 + theta) / sq, sigma * v, 0.0];
    match *model {
        MarketModel::Gbm { .. } => vec![lead],
        MarketModel::GaussianMeanReturn { zeta, rho, .. } => vec![
            [lead[0], lead[1], rho * zeta],
            [0.0, 0.0, (1.0 - rho * rho).max(0.0).sqrt() * zeta],
        ],
    }
}

pub fn operator_coefficients(
    model: &MarketModel,
    theta: f64,
    tau: f64,
    v: f64,
    nu: f64,
) -> OperatorCoefficients {
    let c = model.coefficients(nu);
    let sq = tau.sqrt();
    let half_s2v2 = 0.5 * c.sigma * c.sigma * v * v;
    let rho = model.rho();
    OperatorCoefficients {
        a_zz: half_s2v2 * (1.0 + theta).powi(2) / tau,
        a_zv: half_s2v2 * 2.0 * (1.0 + theta) / sq,
        a_vv: half_s2v2,
        a_nn: 0.5 * c.zeta * c.zeta,
        a_zn: rho * c.sigma * c.zeta * v * (1.0 + theta) / sq,
        a_vn: rho * c.sigma * c.zeta * v,
        b_z: c.eta * (1.0 + theta) * v / sq,
        b_v: (c.eta - 0.5 / tau) * v,
        b_n: c.m,
    }
}

/// Linear form with at most three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Form {
    pub idx: [usize; 3],
    pub coef: [f64; 3],
    pub len: usize,
}

impl Form {
    fn new(terms: &[(usize, f64)]) -> Self {
        let mut f = Form {
            idx: [0; 3],
            coef: [0.0; 3],
            len: terms.len(),
        };
        for (n, &(i, c)) in terms.iter().enumerate() {
            f.idx[n] = i;
            f.coef[n] = c;
        }
        f
    }

    pub fn terms(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(|n| (self.idx[n], self.coef[n]))
    }

    pub fn apply(&self, w: &[f64]) -> f64 {
        self.terms().map(|(i, c)| c * w[i]).sum()
    }
}

/// One assembled row of the discrete operator at an interior node.
#[derive(Debug, Clone, PartialEq)]
pub struct StencilRow {
    pub node: usize,
    /// Discrete operator row, diagonal included; sorted by column.
    pub operator: Vec<(usize, f64)>,
    /// Sell-constraint term; must be >= 0, binds at zero.
    pub sell: Option<Form>,
    /// Buy-constraint term; must be >= 0, binds at zero.
    pub buy: Option<Form>,
    /// Damping events: state diffusion dropped on an edge plane, or a
    /// stencil arm or drift term that would leave the mesh.
    pub clamps: usize,
}

impl StencilRow {
    pub fn diagonal(&self) -> f64 {
        self.operator
            .iter()
            .find(|(c, _)| *c == self.node)
            .map_or(0.0, |e| e.1)
    }
}

/// Equation attached to a node.
#[derive(Debug, Clone, PartialEq)]
pub enum RowKind {
    Interior(StencilRow),
    Dirichlet(f64),
    /// Zero slope: the node copies `inner`.
    Neumann { inner: usize },
}

struct Axes<'a> {
    x: [&'a [f64]; 3],
}

impl Axes<'_> {
    fn spacing(&self, c: usize, i: usize) -> f64 {
        let xs = self.x[c];
        let n = xs.len();
        if n == 1 {
            return 1.0;
        }
        if i == 0 {
            xs[1] - xs[0]
        } else if i + 1 == n {
            xs[n - 1] - xs[n - 2]
        } else {
            0.5 * (xs[i + 1] - xs[i - 1])
        }
    }
}

/// Builder for one row: accumulates `(column, coefficient)` pairs.
struct RowBuf {
    entries: Vec<(usize, f64)>,
    clamps: usize,
}

impl RowBuf {
    fn push(&mut self, col: usize, c: f64) {
        if c != 0.0 {
            self.entries.push((col, c));
        }
    }

    fn finish(mut self) -> (Vec<(usize, f64)>, usize) {
        self.entries.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(self.entries.len());
        for (c, v) in self.entries {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        (merged, self.clamps)
    }
}

/// Discrete operator row at node `(i, j, k)` with cost branch `theta`.
pub fn operator_row(
    model: &MarketModel,
    theta: f64,
    tau: f64,
    grid: &TransformedGrid,
    node: usize,
) -> (Vec<(usize, f64)>, usize) {
    let (i, j, k) = grid.coords(node);
    let zero = [0.0];
    let nu_axis: &[f64] = grid.nu.as_deref().unwrap_or(&zero);
    let axes = Axes {
        x: [&grid.z, &grid.v, nu_axis],
    };
    let at = [i, j, k];
    let p0 = [grid.z[i], grid.v[j], nu_axis[k]];
    let index = |ix: [usize; 3]| grid.index(ix[0], ix[1], ix[2]);
    let mut row = RowBuf {
        entries: Vec::with_capacity(32),
        clamps: 0,
    };

    // On the edge planes of the state axis the state component of the
    // diffusion is dropped; mean reversion points inwards there, so no
    // boundary condition is needed. Each dropped component is a damping
    // event.
    let edge = grid.nnu() > 1 && (k == 0 || k + 1 == grid.nnu());
    for mut d in diffusion_directions(model, theta, tau, p0[1]) {
        if edge && d[2] != 0.0 {
            d[2] = 0.0;
            row.clamps += 1;
        }
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if norm == 0.0 {
            continue;
        }
        let e = [d[0] / norm, d[1] / norm, d[2] / norm];
        let q = 0.5 * norm * norm;
        let h: [f64; 3] = [0, 1, 2].map(|c| axes.spacing(c, at[c]));
        let dom = (0..3)
            .max_by(|&a, &b| (e[a].abs() / h[a]).total_cmp(&(e[b].abs() / h[b])))
            .unwrap();
        // Smallest reach that moves every other axis by a full local
        // spacing, capped.
        let mut reach = 1.0f64;
        for c in (0..3).filter(|&c| c != dom && e[c] != 0.0) {
            reach = reach.max(h[c] * e[dom].abs() / (h[dom] * e[c].abs()));
        }
        let reach = (reach.ceil() as usize).clamp(1, grid.stencil_reach);

        // Arm endpoints as (length, interpolation stencil).
        let mut arms: [(f64, Vec<(usize, f64)>); 2] = [(0.0, Vec::new()), (0.0, Vec::new())];
        for (a, sgn) in [1.0f64, -1.0].into_iter().enumerate() {
            let dir = sgn * e[dom].signum();
            let n_dom = axes.x[dom].len() as isize;
            let target = (at[dom] as isize + dir as isize * reach as isize).clamp(0, n_dom - 1) as usize;
            let mut t = (axes.x[dom][target] - p0[dom]).abs() / e[dom].abs();
            let mut truncated = false;
            for c in (0..3).filter(|&c| c != dom && e[c] != 0.0) {
                let xs = axes.x[c];
                let pc = p0[c] + sgn * t * e[c];
                let bound = if pc > xs[xs.len() - 1] {
                    Some(xs[xs.len() - 1])
                } else if pc < xs[0] {
                    Some(xs[0])
                } else {
                    None
                };
                if let Some(b) = bound {
                    let tb = (b - p0[c]) / (sgn * e[c]);
                    if tb < t {
                        t = tb;
                        truncated = true;
                    }
                }
            }
            if t <= 0.0 {
                continue;
            }
            let mut w = vec![(node, 1.0)];
            for c in 0..3 {
                let pc = p0[c] + sgn * t * e[c];
                let (lo, hi, wt) = if c == dom && !truncated {
                    (target, target, 0.0)
                } else {
                    locate(axes.x[c], pc)
                };
                let mut next = Vec::with_capacity(w.len() * 2);
                for &(nd, wv) in &w {
                    let mut ix = {
                        let (a0, a1, a2) = grid.coords(nd);
                        [a0, a1, a2]
                    };
                    ix[c] = lo;
                    next.push((index(ix), wv * (1.0 - wt)));
                    if hi != lo && wt > 0.0 {
                        ix[c] = hi;
                        next.push((index(ix), wv * wt));
                    }
                }
                w = next;
            }
            arms[a] = (t, w);
        }
        let (sp, sm) = (arms[0].0, arms[1].0);
        let (sp, sm, reflected) = match (sp > 0.0, sm > 0.0) {
            (true, true) => (sp, sm, None),
            (true, false) => (sp, sp, Some(1)),
            (false, true) => (sm, sm, Some(0)),
            (false, false) => continue,
        };
        if reflected.is_some() {
            row.clamps += 1;
        }
        let scale = 2.0 * q / (sp + sm);
        for (a, s) in [(0usize, sp), (1, sm)] {
            if reflected == Some(a) {
                continue;
            }
            let c = scale / s;
            for &(nd, wv) in &arms[a].1 {
                row.push(nd, c * wv);
            }
            row.push(node, -c);
        }
    }

    // First-order terms, upwinded per axis.
    let nu = p0[2];
    let oc = operator_coefficients(model, theta, tau, p0[1], nu);
    for (c, b) in [(0usize, oc.b_z), (1, oc.b_v), (2, oc.b_n)] {
        if b == 0.0 {
            continue;
        }
        let xs = axes.x[c];
        let step: isize = if b > 0.0 { 1 } else { -1 };
        let nb = at[c] as isize + step;
        if nb < 0 || nb >= xs.len() as isize {
            row.clamps += 1;
            continue;
        }
        let mut ix = at;
        ix[c] = nb as usize;
        let hc = (xs[nb as usize] - xs[at[c]]).abs();
        row.push(index(ix), b.abs() / hc);
        row.push(node, -b.abs() / hc);
    }
    row.finish()
}

/// Full stencil row at an interior node: operator plus gradient forms.
pub fn operator_stencil(problem: &ProblemSpec, grid: &TransformedGrid, tau: f64, node: usize) -> StencilRow {
    let (i, j, k) = grid.coords(node);
    let v = grid.v[j];
    let theta = if v >= 0.0 {
        -problem.costs.theta1
    } else {
        problem.costs.theta2
    };
    let (operator, clamps) = operator_row(&problem.market, theta, tau, grid, node);
    let (sell, buy) = gradient_forms(&problem.costs, tau, grid, i, j, k);
    StencilRow {
        node,
        operator,
        sell,
        buy,
        clamps,
    }
}

/// Sell and buy constraint terms at `(i, j, k)`, one-sided so that the
/// penalised rows keep the M-matrix sign pattern.
pub fn gradient_forms(
    costs: &CostSpec,
    tau: f64,
    grid: &TransformedGrid,
    i: usize,
    j: usize,
    k: usize,
) -> (Option<Form>, Option<Form>) {
    let spread = costs.spread();
    let sq = tau.sqrt();
    let node = grid.index(i, j, k);
    let z_m = grid.index(i - 1, j, k);
    let hz = grid.z[i] - grid.z[i - 1];
    let v = grid.v[j];
    let fwd = |j: usize| (grid.index(i, j + 1, k), grid.v[j + 1] - grid.v[j]);
    let bwd = |j: usize| (grid.index(i, j - 1, k), grid.v[j] - grid.v[j - 1]);

    // Long-side buy: (theta1+theta2) W_z - sqrt(tau) W_v.
    let long_buy = || {
        let (vp, hv) = fwd(j);
        Form::new(&[
            (node, spread / hz + sq / hv),
            (z_m, -spread / hz),
            (vp, -sq / hv),
        ])
    };
    // Short-side sell: (theta1+theta2) W_z + sqrt(tau) W_v.
    let short_sell = || {
        let (vm, hv) = bwd(j);
        Form::new(&[
            (node, spread / hz + sq / hv),
            (z_m, -spread / hz),
            (vm, -sq / hv),
        ])
    };
    if v > 0.0 {
        let (vm, hv) = bwd(j);
        let sell = Form::new(&[(node, 1.0 / hv), (vm, -1.0 / hv)]);
        (Some(sell), Some(long_buy()))
    } else if v < 0.0 {
        let (vp, hv) = fwd(j);
        let buy = Form::new(&[(node, 1.0 / hv), (vp, -1.0 / hv)]);
        (Some(short_sell()), Some(buy))
    } else {
        let sell = grid.short_sale_allowed.then(short_sell);
        (sell, Some(long_buy()))
    }
}

/// Boundary values, including the frictionless tail factor when needed.
pub struct BoundaryData {
    kind: BoundaryKind,
    floor_value: f64,
    tail: Option<CrraFactor>,
}

impl BoundaryData {
    pub fn new(problem: &ProblemSpec, tau_max: f64) -> Result<Self> {
        let kind = problem.boundary_kind();
        let tail = match kind {
            BoundaryKind::Tail(t) => Some(CrraFactor::new(&problem.market, t.p, tau_max)?),
            _ => None,
        };
        Ok(BoundaryData {
            kind,
            floor_value: problem.utility.value(problem.floor),
            tail,
        })
    }

    /// Row kind for node `(i, j, k)` at time to maturity `tau`; `None` for
    /// nodes that carry the operator.
    pub fn row_kind(&self, grid: &TransformedGrid, tau: f64, i: usize, j: usize, k: usize) -> Result<Option<RowKind>> {
        let nz = grid.nz();
        let nv = grid.nv();
        let z = grid.z[i];
        if i == 0 {
            return Ok(Some(RowKind::Dirichlet(self.floor_value)));
        }
        if i == nz - 1 {
            let g = match self.kind {
                BoundaryKind::Goal { .. } => 1.0,
                BoundaryKind::Constant(c) => c,
                BoundaryKind::Tail(t) => {
                    let f = self
                        .tail
                        .as_ref()
                        .expect("tail factor")
                        .factor(tau, grid.nu_at(k))?;
                    t.offset + t.scale * f * (z - t.shift).max(0.0).powf(t.p) / t.p
                }
            };
            return Ok(Some(RowKind::Dirichlet(g)));
        }
        let far_low = grid.short_sale_allowed && j == 0;
        let far_high = j == nv - 1;
        if far_low || far_high {
            return Ok(Some(match self.kind {
                BoundaryKind::Goal { target } => {
                    let lo = grid.z[0];
                    RowKind::Dirichlet((z - lo) / (target - lo))
                }
                _ => {
                    let inner = if far_high { j - 1 } else { j + 1 };
                    RowKind::Neumann {
                        inner: grid.index(i, inner, k),
                    }
                }
            }));
        }
        Ok(None)
    }
}

/// Terminal seed: `U(z)` at every node, constant in the position.
pub fn terminal_seed(problem: &ProblemSpec, grid: &TransformedGrid) -> Vec<f64> {
    (0..grid.len())
        .map(|n| problem.utility.value(grid.z[grid.coords(n).0]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::utility::{make_utility, UtilitySpec};
    use proptest::prelude::*;

    fn problem(model: MarketModel, short: bool) -> ProblemSpec {
        ProblemSpec::new(
            model,
            CostSpec::symmetric(1e-3).unwrap(),
            1.0,
            make_utility(UtilitySpec::GoalReaching { target: 1.0 }, 0.0).unwrap(),
            short,
        )
        .unwrap()
    }

    fn small_grid(p: &ProblemSpec) -> TransformedGrid {
        let spec = GridSpec {
            nz: 41,
            nv: 31,
            nnu: 7,
            v_max: 20.0,
            ..GridSpec::default()
        };
        TransformedGrid::build(p, &spec, 0.1, 10).unwrap()
    }

    #[test]
    fn coefficient_example() {
        let m = MarketModel::gbm(0.04, 0.3);
        let c = operator_coefficients(&m, -1e-3, 0.01, 0.05, 0.0);
        assert!((c.a_zz - 0.5 * 0.09 * 0.0025 * 0.999f64.powi(2) / 0.01).abs() < 1e-15);
        assert!((c.a_zz - 0.011227).abs() < 1e-6);
        assert!(c.a_zv > 0.0);
        let c0 = operator_coefficients(&m, -1e-3, 0.01, 0.0, 0.0);
        assert_eq!((c0.a_zz, c0.a_zv, c0.a_vv, c0.b_z, c0.b_v), (0.0, 0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn directions_reproduce_coefficients() {
        let m = MarketModel::gmr(0.3, 0.27, 0.1333, 0.065, -0.93);
        let (theta, tau, v, nu) = (2e-3, 0.04, -0.7, 0.05);
        let c = operator_coefficients(&m, theta, tau, v, nu);
        let ds = diffusion_directions(&m, theta, tau, v);
        let quad = |a: usize, b: usize| ds.iter().map(|d| d[a] * d[b]).sum::<f64>();
        assert!((0.5 * quad(0, 0) - c.a_zz).abs() < 1e-12);
        assert!((quad(0, 1) - c.a_zv).abs() < 1e-12);
        assert!((0.5 * quad(1, 1) - c.a_vv).abs() < 1e-12);
        assert!((0.5 * quad(2, 2) - c.a_nn).abs() < 1e-12);
        assert!((quad(0, 2) - c.a_zn).abs() < 1e-12);
        assert!((quad(1, 2) - c.a_vn).abs() < 1e-12);
    }

    #[test]
    fn v_zero_row_vanishes_for_gbm() {
        let p = problem(MarketModel::gbm(0.04, 0.3), true);
        let g = small_grid(&p);
        let node = g.index(10, g.v_zero(), 0);
        let row = operator_stencil(&p, &g, 0.01, node);
        assert!(row.operator.is_empty());
        assert!(row.sell.is_some() && row.buy.is_some());
    }

    fn check_rows(p: &ProblemSpec, tau: f64) -> usize {
        let g = small_grid(p);
        let mut clamps = 0;
        for k in 0..g.nnu() {
            for j in 0..g.nv() {
                for i in 0..g.nz() {
                    if !g.is_interior(i, j) {
                        continue;
                    }
                    let row = operator_stencil(p, &g, tau, g.index(i, j, k));
                    let sum: f64 = row.operator.iter().map(|e| e.1).sum();
                    let scale: f64 = row.operator.iter().map(|e| e.1.abs()).sum::<f64>().max(1.0);
                    assert!(sum.abs() < 1e-10 * scale, "row sum {sum}");
                    for &(c, v) in &row.operator {
                        if c != row.node {
                            assert!(v >= 0.0, "negative off-diagonal {v}");
                        }
                    }
                    for f in [row.sell, row.buy].into_iter().flatten() {
                        assert!(f.coef[0] > 0.0);
                        assert!(f.terms().skip(1).all(|(_, c)| c <= 0.0));
                        assert!(f.coef[..f.len].iter().sum::<f64>().abs() < 1e-9 * f.coef[0]);
                    }
                    clamps += row.clamps;
                }
            }
        }
        clamps
    }

    #[test]
    fn gbm_rows_are_monotone_without_clamps() {
        for tau in [0.0025, 0.01, 0.1] {
            assert_eq!(check_rows(&problem(MarketModel::gbm(0.04, 0.3), true), tau), 0);
            assert_eq!(check_rows(&problem(MarketModel::gbm(0.04, 0.3), false), tau), 0);
        }
    }

    #[test]
    fn gmr_rows_are_monotone() {
        let p = problem(MarketModel::gmr(0.3, 0.27, 0.1333, 0.065, -0.93), true);
        let clamps = check_rows(&p, 0.05);
        assert!(clamps > 0);
    }

    #[test]
    fn stencil_is_exact_on_quadratics_far_from_boundaries() {
        // On a uniform mesh a second difference along d is exact for
        // quadratics, and the interpolation is exact for functions linear in
        // the off-axis, so W = z^2 must give 2 a_zz + first-order terms.
        let p = problem(MarketModel::gbm(0.0, 0.3), true);
        let spec = GridSpec {
            nz: 81,
            nv: 41,
            z_refine_ratio: 1.0,
            v_max: 4.0,
            v_scale: 1e3,
            ..GridSpec::default()
        };
        let g = TransformedGrid::build(&p, &spec, 0.1, 10).unwrap();
        let tau = 0.05;
        let node = g.index(40, 25, 0);
        let row = operator_stencil(&p, &g, tau, node);
        let w: Vec<f64> = (0..g.len()).map(|n| g.z[g.coords(n).0].powi(2)).collect();
        let got: f64 = row.operator.iter().map(|&(c, v)| v * w[c]).sum();
        let v = g.v[25];
        let c = operator_coefficients(&p.market, -1e-3, tau, v, 0.0);
        let want = 2.0 * c.a_zz + c.b_z * 2.0 * g.z[40];
        assert!((got - want).abs() < 1e-6 * want.abs().max(1.0), "{got} vs {want}");
    }

    #[test]
    fn boundary_rows() {
        let p = problem(MarketModel::gbm(0.0, 0.3), true);
        let g = small_grid(&p);
        let b = BoundaryData::new(&p, 0.1).unwrap();
        assert_eq!(b.row_kind(&g, 0.01, 0, 5, 0).unwrap(), Some(RowKind::Dirichlet(0.0)));
        assert_eq!(b.row_kind(&g, 0.01, g.nz() - 1, 5, 0).unwrap(), Some(RowKind::Dirichlet(1.0)));
        match b.row_kind(&g, 0.01, 7, g.nv() - 1, 0).unwrap() {
            Some(RowKind::Dirichlet(x)) => assert_eq!(x, g.z[7]),
            other => panic!("{other:?}"),
        }
        assert_eq!(b.row_kind(&g, 0.01, 7, 5, 0).unwrap(), None);
    }

    #[test]
    fn aspiration_seed() {
        let p = ProblemSpec::new(
            MarketModel::gbm(0.04, 0.3),
            CostSpec::symmetric(1e-3).unwrap(),
            1.0,
            make_utility(
                UtilitySpec::Aspiration {
                    p: 0.5,
                    c1: 0.0,
                    c2: 1.5,
                    target: 1.0,
                },
                0.0,
            )
            .unwrap(),
            true,
        )
        .unwrap();
        let g = TransformedGrid::build(&p, &GridSpec::default(), 0.1, 10).unwrap();
        let seed = terminal_seed(&p, &g);
        let i = g.z.iter().position(|&z| z == 1.0).unwrap();
        assert_eq!(seed[g.index(i, 0, 0)], 3.0);
        assert_eq!(seed[g.index(i, 17, 0)], 3.0);
        let b = BoundaryData::new(&p, 0.1).unwrap();
        match b.row_kind(&g, 0.1, g.nz() - 1, 3, 0).unwrap() {
            Some(RowKind::Dirichlet(x)) => {
                let f = (0.5 * 0.0016f64 / (2.0 * 0.5 * 0.09) * 0.1).exp();
                assert!((x - 1.5 * 8f64.sqrt() / 0.5 * f).abs() < 1e-12);
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            b.row_kind(&g, 0.1, 5, 0, 0).unwrap(),
            Some(RowKind::Neumann { .. })
        ));
    }

    proptest! {
        #[test]
        fn constants_are_annihilated(tau in 0.001..0.1f64, i in 1usize..40, j in 1usize..30, eta in -0.1..0.1f64) {
            let p = problem(MarketModel::gbm(eta, 0.3), true);
            let g = small_grid(&p);
            let row = operator_stencil(&p, &g, tau, g.index(i, j, 0));
            let s: f64 = row.operator.iter().map(|e| e.1).sum();
            let scale: f64 = row.operator.iter().map(|e| e.1.abs()).sum::<f64>().max(1.0);
            prop_assert!(s.abs() < 1e-10 * scale);
        }
    }
}
