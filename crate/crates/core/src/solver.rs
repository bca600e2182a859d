//! Penalised implicit time stepping with a non-smooth Newton iteration.
//!
//! Each step solves, at interior nodes,
//! `(W - W_old)/dtau - L W - lambda * sum_g (-g(W))^+ = 0`
//! where `g` runs over the sell and buy terms. Newton linearises the
//! positive parts on the current active set. Problems with a state axis
//! are split into one block per state node; each Newton iteration solves
//! the coupled linear system by block Gauss-Seidel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{transform_point, TransformedGrid};
use crate::linalg::{check_row, MMatrixReport, PatternLu};
use crate::problem::ProblemSpec;
use crate::stencil::{operator_stencil, terminal_seed, BoundaryData, RowKind};

const SELL: u8 = 1;
const BUY: u8 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverParams {
    /// Penalty constant times the time step.
    pub penalty_scale: f64,
    /// Bound on the diagonally scaled residual of the penalised system.
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Largest time to maturity reached by the march.
    pub tau_max: f64,
    pub time_steps: usize,
    /// Times to maturity whose fields are kept. The last level is always kept.
    pub store_levels: Vec<f64>,
    /// Linear block sweeps stop once no value moves by more than this.
    pub sweep_tol: f64,
    pub max_sweeps: usize,
    /// Largest relative change between the two iterates of an alternating
    /// active set that still ends the Newton iteration.
    pub cycle_tol: f64,
    /// Accept damping events on the edge planes of the state axis.
    pub allow_damping: bool,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            penalty_scale: 1e6,
            newton_tol: 1e-9,
            newton_max_iter: 60,
            tau_max: 0.1,
            time_steps: 100,
            store_levels: Vec::new(),
            sweep_tol: 1e-9,
            max_sweeps: 100,
            cycle_tol: 1e-7,
            allow_damping: true,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, x: f64| {
            if x > 0.0 && x.is_finite() {
                Ok(())
            } else {
                Err(Error::validation(key, "must be finite and > 0"))
            }
        };
        positive("solver.penalty_scale", self.penalty_scale)?;
        positive("solver.newton_tol", self.newton_tol)?;
        positive("solver.tau_max", self.tau_max)?;
        positive("solver.sweep_tol", self.sweep_tol)?;
        if !(self.cycle_tol >= 0.0 && self.cycle_tol.is_finite()) {
            return Err(Error::validation("solver.cycle_tol", "must be finite and >= 0"));
        }
        if self.newton_max_iter == 0 {
            return Err(Error::validation("solver.newton_max_iter", "must be >= 1"));
        }
        if self.time_steps == 0 {
            return Err(Error::validation("solver.time_steps", "must be >= 1"));
        }
        if self.max_sweeps == 0 {
            return Err(Error::validation("solver.max_sweeps", "must be >= 1"));
        }
        Ok(())
    }

    /// Penalty constant for a time step.
    pub fn lambda(&self, dtau: f64) -> f64 {
        self.penalty_scale / dtau
    }
}

/// Per-node values of the three QVI terms. The PDE term is
/// `W_tau - L W` in time-derivative units, the constraint terms are the
/// discrete directional derivatives. Boundary nodes hold NaN and terms
/// that do not apply at a node hold `+inf`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Residuals {
    pub pde: Vec<f64>,
    pub sell: Vec<f64>,
    pub buy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level {
    pub step: usize,
    pub tau: f64,
    pub w: Vec<f64>,
    pub residuals: Residuals,
}

/// Damping events, counted per time level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DampingLog {
    pub total: usize,
    pub per_level: Vec<usize>,
    /// Nodes with damping events at the first level.
    pub first_level_nodes: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Newton iterations per time step.
    pub newton_iterations: Vec<usize>,
    pub sweeps: Vec<usize>,
    pub factorizations: usize,
    /// Steps ended on an alternating active set.
    pub cycle_exits: usize,
    pub symbolic_factorizations: usize,
    pub m_matrix: MMatrixReport,
    pub damping: DampingLog,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub problem: ProblemSpec,
    pub grid: TransformedGrid,
    pub params: SolverParams,
    pub levels: Vec<Level>,
    pub diagnostics: Diagnostics,
}

impl Solution {
    pub fn level(&self, tau: f64) -> Result<&Level> {
        let eps = 1e-9 * self.grid.time.tau_max.max(1.0);
        self.levels
            .iter()
            .find(|l| (l.tau - tau).abs() <= eps)
            .ok_or(Error::LevelNotRetained(tau))
    }

    pub fn last_level(&self) -> &Level {
        self.levels.last().expect("the last level is always retained")
    }

    pub fn value_at(&self, tau: f64, z: f64, v: f64, nu: f64) -> Result<f64> {
        self.grid.interpolate(&self.level(tau)?.w, z, v, nu)
    }

    /// Value at cash `x` and stock `y`, mapped into transformed coordinates.
    pub fn value_at_position(&self, tau: f64, x: f64, y: f64, nu: f64) -> Result<f64> {
        let (z, v) = transform_point(tau, x, y, &self.problem.costs)?;
        self.value_at(tau, z, v, nu)
    }
}

/// Sparsity pattern of one block; columns are block-local.
struct Layout {
    start: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    /// Operator entries reaching into other blocks: `(local row, column, value)`.
    coupling: Vec<(usize, usize, f64)>,
}

impl Layout {
    fn new(rows: &[RowKind], start: usize, len: usize) -> Self {
        let end = start + len;
        let mut row_ptr = Vec::with_capacity(len + 1);
        let mut cols = Vec::with_capacity(len * 16);
        let mut coupling = Vec::new();
        let mut buf = Vec::with_capacity(64);
        row_ptr.push(0);
        for l in 0..len {
            buf.clear();
            buf.push(l);
            match &rows[start + l] {
                RowKind::Dirichlet(_) => {}
                RowKind::Neumann { inner } => buf.push(inner - start),
                RowKind::Interior(row) => {
                    for &(c, v) in &row.operator {
                        if (start..end).contains(&c) {
                            buf.push(c - start);
                        } else {
                            coupling.push((l, c, v));
                        }
                    }
                    for f in [&row.sell, &row.buy].into_iter().flatten() {
                        buf.extend(f.terms().map(|(c, _)| c - start));
                    }
                }
            }
            buf.sort_unstable();
            buf.dedup();
            cols.extend_from_slice(&buf);
            row_ptr.push(cols.len());
        }
        Layout {
            start,
            row_ptr,
            cols,
            coupling,
        }
    }

    fn len(&self) -> usize {
        self.row_ptr.len() - 1
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }

    fn position(&self, l: usize, c: usize) -> usize {
        let seg = self.row_ptr[l]..self.row_ptr[l + 1];
        seg.start
            + self.cols[seg]
                .binary_search(&c)
                .expect("entry lies in the block pattern")
    }

    /// Adds the terms from other blocks, evaluated at `w`.
    fn add_coupling(&self, w: &[f64], rhs: &mut [f64]) {
        for &(l, c, v) in &self.coupling {
            rhs[l] += v * w[c];
        }
    }
}

#[derive(Default)]
struct BlockCache {
    lu: Option<PatternLu>,
    /// Step and active flags the numeric factors belong to.
    key: Option<(usize, Vec<u8>)>,
    vals: Vec<f64>,
    /// Right-hand side without the terms from other blocks.
    rhs: Vec<f64>,
}

struct Step<'a> {
    rows: &'a [RowKind],
    w_old: &'a [f64],
    step: usize,
    tau: f64,
    dtau: f64,
    lambda: f64,
}

fn active_flags(row: &RowKind, w: &[f64]) -> u8 {
    match row {
        RowKind::Interior(r) => {
            let mut f = 0;
            if r.sell.is_some_and(|g| g.apply(w) < 0.0) {
                f |= SELL;
            }
            if r.buy.is_some_and(|g| g.apply(w) < 0.0) {
                f |= BUY;
            }
            f
        }
        _ => 0,
    }
}

/// Writes the in-block part of the linearised system for the given
/// active flags.
fn fill(layout: &Layout, st: &Step<'_>, active: &[u8], vals: &mut [f64], rhs: &mut [f64]) {
    let start = layout.start;
    vals.fill(0.0);
    for l in 0..layout.len() {
        let r = start + l;
        let mut add = |c: usize, v: f64| vals[layout.position(l, c)] += v;
        match &st.rows[r] {
            RowKind::Dirichlet(g) => {
                add(l, 1.0);
                rhs[l] = *g;
            }
            RowKind::Neumann { inner } => {
                add(l, 1.0);
                add(inner - start, -1.0);
                rhs[l] = 0.0;
            }
            RowKind::Interior(row) => {
                add(l, 1.0 / st.dtau);
                for &(c, v) in &row.operator {
                    if layout.range().contains(&c) {
                        add(c - start, -v);
                    }
                }
                for (flag, form) in [(SELL, &row.sell), (BUY, &row.buy)] {
                    if active[r] & flag != 0 {
                        if let Some(f) = form {
                            for (c, coef) in f.terms() {
                                add(c - start, st.lambda * coef);
                            }
                        }
                    }
                }
                rhs[l] = st.w_old[r] / st.dtau;
            }
        }
    }
}

/// Largest `|A w - b|_r / A_rr` over the block and the row attaining it.
fn scaled_residual(layout: &Layout, vals: &[f64], rhs: &[f64], w: &[f64]) -> (f64, usize) {
    let start = layout.start;
    let mut worst = (0.0, 0);
    for l in 0..layout.len() {
        let mut acc = -rhs[l];
        let mut diag = 0.0;
        for p in layout.row_ptr[l]..layout.row_ptr[l + 1] {
            let c = layout.cols[p];
            acc += vals[p] * w[start + c];
            if c == l {
                diag = vals[p];
            }
        }
        let r = (acc / diag).abs();
        if !(r <= worst.0) {
            worst = (r, l);
        }
    }
    worst
}

struct Workspace {
    layouts: Vec<Layout>,
    caches: Vec<BlockCache>,
}

impl Workspace {
    /// Fills every block for the given flags and returns the largest
    /// scaled residual of `w` with its node.
    fn residual(&mut self, st: &Step<'_>, active: &[u8], w: &[f64]) -> (f64, usize) {
        let mut worst = (0.0f64, 0usize);
        for (layout, cache) in self.layouts.iter().zip(&mut self.caches) {
            cache.vals.resize(layout.cols.len(), 0.0);
            cache.rhs.resize(layout.len(), 0.0);
            fill(layout, st, active, &mut cache.vals, &mut cache.rhs);
            let mut rhs = cache.rhs.clone();
            layout.add_coupling(w, &mut rhs);
            let (res, l) = scaled_residual(layout, &cache.vals, &rhs, w);
            if !(res <= worst.0) {
                worst = (res, layout.start + l);
            }
        }
        worst
    }

    /// Non-smooth Newton on the whole step. Every iteration factors each
    /// block once for the current active set and solves the coupled linear
    /// system by block Gauss-Seidel with those factors. Returns the Newton
    /// iteration count and the number of linear sweeps.
    fn solve_step(
        &mut self,
        st: &Step<'_>,
        params: &SolverParams,
        w: &mut [f64],
        active: &mut [u8],
        diag: &mut Diagnostics,
    ) -> Result<(usize, usize)> {
        let blocks = self.layouts.len();
        let mut iters = 0;
        let mut sweeps = 0;
        let mut settled = false;
        let mut two_back: Option<Vec<u8>> = None;
        // The flags carried over from the last step predict the new active
        // set well, but the old level may already solve this step under
        // its own flags.
        let own: Vec<u8> = st.rows.iter().map(|row| active_flags(row, w)).collect();
        if own[..] != active[..] && self.residual(st, &own, w).0 <= params.newton_tol {
            active.copy_from_slice(&own);
            return Ok((0, 0));
        }
        loop {
            let consistent = st.rows.iter().zip(active.iter()).all(|(row, a)| active_flags(row, w) == *a);
            let worst = self.residual(st, active, w);
            if consistent && worst.0 <= params.newton_tol {
                break;
            }
            if iters == params.newton_max_iter {
                return Err(Error::NewtonDivergence {
                    tau: st.tau,
                    iterations: iters,
                    node: worst.1,
                    residual: worst.0,
                });
            }

            for (layout, cache) in self.layouts.iter().zip(&mut self.caches) {
                let lu = match &mut cache.lu {
                    Some(lu) if lu.matches(&layout.row_ptr, &layout.cols) => lu,
                    slot => {
                        diag.symbolic_factorizations += 1;
                        cache.key = None;
                        slot.insert(PatternLu::new(layout.len(), layout.row_ptr.clone(), layout.cols.clone())?)
                    }
                };
                let flags = &active[layout.range()];
                let fresh = match &cache.key {
                    Some((s, a)) => *s != st.step || a[..] != *flags,
                    None => true,
                };
                if fresh {
                    lu.factor(&cache.vals)?;
                    diag.factorizations += 1;
                    cache.key = Some((st.step, flags.to_vec()));
                }
            }

            let mut x = w.to_vec();
            let mut sweep = 0;
            loop {
                sweep += 1;
                let mut change = (0.0f64, 0usize);
                let order: Vec<usize> = if sweep % 2 == 1 {
                    (0..blocks).collect()
                } else {
                    (0..blocks).rev().collect()
                };
                for k in order {
                    let (layout, cache) = (&self.layouts[k], &self.caches[k]);
                    let mut b = cache.rhs.clone();
                    layout.add_coupling(&x, &mut b);
                    cache.lu.as_ref().expect("factored above").solve(&mut b)?;
                    for (l, (new, old)) in b.iter().zip(&mut x[layout.range()]).enumerate() {
                        let d = (new - *old).abs();
                        if !(d <= change.0) {
                            change = (d, layout.start + l);
                        }
                        *old = *new;
                    }
                }
                if blocks == 1 || change.0 <= params.sweep_tol {
                    break;
                }
                // While the active set still moves, a rough solve is enough.
                if !settled && sweep == 2 {
                    break;
                }
                if sweep == params.max_sweeps {
                    return Err(Error::NewtonDivergence {
                        tau: st.tau,
                        iterations: iters,
                        node: change.1,
                        residual: change.0,
                    });
                }
            }
            sweeps += sweep;
            let step = x
                .iter()
                .zip(w.iter())
                .map(|(new, old)| (new - old).abs() / new.abs().max(1.0))
                .fold(0.0, f64::max);
            w.copy_from_slice(&x);
            iters += 1;
            let used = active.to_vec();
            settled = true;
            for (r, a) in active.iter_mut().enumerate() {
                let f = active_flags(&st.rows[r], w);
                settled &= f == *a;
                *a = f;
            }
            // A node on the edge of its constraint can make the active set
            // alternate between two nearly equal iterates.
            if !settled && two_back.as_deref() == Some(&active[..]) && step <= params.cycle_tol {
                diag.cycle_exits += 1;
                break;
            }
            two_back = Some(used);
        }
        Ok((iters, sweeps))
    }
}

fn assemble(problem: &ProblemSpec, grid: &TransformedGrid, bdata: &BoundaryData, tau: f64) -> Result<Vec<RowKind>> {
    (0..grid.len())
        .into_par_iter()
        .map(|node| {
            let (i, j, k) = grid.coords(node);
            Ok(match bdata.row_kind(grid, tau, i, j, k)? {
                Some(kind) => kind,
                None => RowKind::Interior(operator_stencil(problem, grid, tau, node)),
            })
        })
        .collect()
}

/// Row test on the penalised matrix for the final active set of a step.
fn check_system(rows: &[RowKind], active: &[u8], dtau: f64, lambda: f64) -> MMatrixReport {
    let mut report = MMatrixReport::default();
    let mut buf: Vec<(usize, f64)> = Vec::with_capacity(64);
    for (r, row) in rows.iter().enumerate() {
        buf.clear();
        match row {
            RowKind::Dirichlet(_) => buf.push((r, 1.0)),
            RowKind::Neumann { inner } => buf.extend([(r, 1.0), (*inner, -1.0)]),
            RowKind::Interior(s) => {
                buf.push((r, 1.0 / dtau));
                buf.extend(s.operator.iter().map(|&(c, v)| (c, -v)));
                for (flag, form) in [(SELL, &s.sell), (BUY, &s.buy)] {
                    if active[r] & flag != 0 {
                        if let Some(f) = form {
                            buf.extend(f.terms().map(|(c, v)| (c, lambda * v)));
                        }
                    }
                }
                report.damping_events += s.clamps;
            }
        }
        buf.sort_by_key(|e| e.0);
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(buf.len());
        for &(c, v) in &buf {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        check_row(r, merged.into_iter(), &mut report);
    }
    report
}

fn residuals(rows: &[RowKind], w: &[f64], w_old: &[f64], dtau: f64) -> Residuals {
    let triples: Vec<(f64, f64, f64)> = rows
        .par_iter()
        .enumerate()
        .map(|(r, row)| match row {
            RowKind::Interior(s) => {
                let lw: f64 = s.operator.iter().map(|&(c, v)| v * w[c]).sum();
                let term = |f: &Option<crate::stencil::Form>| f.map_or(f64::INFINITY, |g| g.apply(w));
                ((w[r] - w_old[r]) / dtau - lw, term(&s.sell), term(&s.buy))
            }
            _ => (f64::NAN, f64::NAN, f64::NAN),
        })
        .collect();
    let mut out = Residuals::default();
    for (p, s, b) in triples {
        out.pde.push(p);
        out.sell.push(s);
        out.buy.push(b);
    }
    out
}

/// Backward march from the terminal seed to `params.tau_max`.
pub fn solve_qvi(problem: &ProblemSpec, grid: &TransformedGrid, params: &SolverParams) -> Result<Solution> {
    params.validate()?;
    problem.validate()?;
    if grid.time.steps != params.time_steps
        || (grid.time.tau_max - params.tau_max).abs() > 1e-12 * params.tau_max
    {
        return Err(Error::validation(
            "solver.time_steps",
            "grid time levels differ from the solver parameters",
        ));
    }
    if grid.short_sale_allowed != problem.short_sale_allowed {
        return Err(Error::Assembly("grid and problem disagree on short sales".into()));
    }
    if grid.nu.is_some() != problem.market.has_state() {
        return Err(Error::Assembly("state axis does not match the market model".into()));
    }
    if grid.z[0] != problem.floor {
        return Err(Error::Assembly("wealth axis must start at the liquidation floor".into()));
    }
    let mut keep = Vec::with_capacity(params.store_levels.len() + 1);
    for &tau in &params.store_levels {
        keep.push(grid.time.index_of(tau).ok_or_else(|| {
            Error::validation(
                "solver.store_levels",
                format!("tau = {tau} is not a time level of the march"),
            )
        })?);
    }
    keep.push(grid.time.steps);
    keep.sort_unstable();
    keep.dedup();

    let bdata = BoundaryData::new(problem, grid.time.tau_max)?;
    let blocks = grid.nnu();
    let block_len = grid.slice_len();
    let mut w = terminal_seed(problem, grid);
    let mut active = vec![0u8; grid.len()];
    let mut levels = Vec::with_capacity(keep.len());
    let mut diag = Diagnostics::default();
    let mut ws = Workspace {
        layouts: Vec::new(),
        caches: (0..blocks).map(|_| BlockCache::default()).collect(),
    };

    for n in 1..=grid.time.steps {
        let tau = grid.time.tau(n);
        let dtau = tau - grid.time.tau(n - 1);
        let rows = assemble(problem, grid, &bdata, tau)?;
        ws.layouts = (0..blocks)
            .map(|k| Layout::new(&rows, k * block_len, block_len))
            .collect();
        let w_old = w.clone();
        let st = Step {
            rows: &rows,
            w_old: &w_old,
            step: n,
            tau,
            dtau,
            lambda: params.lambda(dtau),
        };

        let (iterations, sweeps) = ws.solve_step(&st, params, &mut w, &mut active, &mut diag)?;
        diag.newton_iterations.push(iterations);
        diag.sweeps.push(sweeps);

        let report = check_system(&rows, &active, dtau, st.lambda);
        if !report.passed() {
            let v = &report.violations[0];
            return Err(Error::Assembly(format!(
                "M-matrix test failed at tau = {tau:.6}, row {} ({:?}, {:.3e})",
                v.row, v.defect, v.value
            )));
        }
        if report.damping_events > 0 && !params.allow_damping {
            return Err(Error::Assembly(format!(
                "{} damping events at tau = {tau:.6} without damping authorisation",
                report.damping_events
            )));
        }
        diag.damping.total += report.damping_events;
        diag.damping.per_level.push(report.damping_events);
        if n == 1 {
            diag.damping.first_level_nodes = rows
                .iter()
                .enumerate()
                .filter_map(|(r, row)| match row {
                    RowKind::Interior(s) if s.clamps > 0 => Some(r),
                    _ => None,
                })
                .collect();
        }
        diag.m_matrix.merge(report);

        if keep.binary_search(&n).is_ok() {
            levels.push(Level {
                step: n,
                tau,
                residuals: residuals(&rows, &w, &w_old, dtau),
                w: w.clone(),
            });
        }
    }

    Ok(Solution {
        problem: problem.clone(),
        grid: grid.clone(),
        params: params.clone(),
        levels,
        diagnostics: diag,
    })
}

/// Builds the mesh matching `params` and solves.
pub fn solve_with_spec(
    problem: &ProblemSpec,
    spec: &crate::grid::GridSpec,
    params: &SolverParams,
) -> Result<Solution> {
    let grid = TransformedGrid::build(problem, spec, params.tau_max, params.time_steps)?;
    solve_qvi(problem, &grid, params)
}
