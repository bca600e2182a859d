//! Sell, buy and no-trade regions read off the residuals of a solved level.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analytic::browne_target;
use crate::error::{Error, Result};
use crate::grid::TransformedGrid;
use crate::solver::{Level, Solution};

/// Default classification tolerance, in the units of each residual.
pub const DEFAULT_LABEL_TOL: f64 = 1e-6;

/// Half-width of the stock window used for area fractions.
pub const AREA_Y_LIMIT: f64 = 60.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "SR")]
    Sell,
    #[serde(rename = "BR")]
    Buy,
    #[serde(rename = "NR")]
    NoTrade,
    #[serde(rename = "AMBIGUOUS")]
    Ambiguous,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Sell => "SR",
            Label::Buy => "BR",
            Label::NoTrade => "NR",
            Label::Ambiguous => "AMBIGUOUS",
        }
    }

    pub fn is_trade(self) -> bool {
        matches!(self, Label::Sell | Label::Buy)
    }
}

/// Label from a residual triple. The PDE term wins ties, so a node where
/// every term vanishes is no-trade.
pub fn label_of(pde: f64, sell: f64, buy: f64, tol: f64) -> Label {
    if pde <= tol {
        return Label::NoTrade;
    }
    if sell.abs() <= tol && buy.abs() <= tol && (sell - buy).abs() <= tol {
        return Label::Ambiguous;
    }
    if sell <= buy {
        Label::Sell
    } else {
        Label::Buy
    }
}

/// Interface between two labels inside one wealth column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub i: usize,
    pub k: usize,
    pub z: f64,
    /// Labels below and above the interface in `v`.
    pub lower: Label,
    pub upper: Label,
    pub v: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub tau: f64,
    pub tol: f64,
    /// One entry per node; `None` on boundary nodes.
    pub labels: Vec<Option<Label>>,
    pub crossings: Vec<Crossing>,
}

impl RegionMap {
    pub fn label_at(&self, grid: &TransformedGrid, i: usize, j: usize, k: usize) -> Option<Label> {
        self.labels[grid.index(i, j, k)]
    }

    /// Label at the node nearest to wealth `z` and stock `y`, on the same
    /// side of `y = 0`.
    pub fn label_near(&self, grid: &TransformedGrid, z: f64, y: f64, nu: f64) -> Option<Label> {
        let i = grid.nearest_z(z);
        let j = grid.nearest_v_same_sign(self.tau.sqrt() * y);
        let k = grid.nearest_nu(nu);
        self.label_at(grid, i, j, k)
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == Some(label)).count()
    }

    /// Share of the `(z, y)` window `|y| <= AREA_Y_LIMIT` covered by sell
    /// or buy nodes, using node control volumes, at state index `k`.
    pub fn trade_area_fraction(&self, grid: &TransformedGrid, k: usize) -> f64 {
        let v_lim = AREA_Y_LIMIT * self.tau.sqrt();
        let cell = |xs: &[f64], i: usize, lo: f64, hi: f64| {
            let a = if i == 0 { xs[0] } else { 0.5 * (xs[i - 1] + xs[i]) };
            let b = if i + 1 == xs.len() { xs[i] } else { 0.5 * (xs[i] + xs[i + 1]) };
            (b.min(hi) - a.max(lo)).max(0.0)
        };
        let (mut trade, mut total) = (0.0, 0.0);
        for j in 0..grid.nv() {
            let hv = cell(&grid.v, j, -v_lim, v_lim);
            if hv == 0.0 {
                continue;
            }
            for i in 0..grid.nz() {
                if let Some(label) = self.label_at(grid, i, j, k) {
                    let a = hv * cell(&grid.z, i, f64::NEG_INFINITY, f64::INFINITY);
                    total += a;
                    if label.is_trade() {
                        trade += a;
                    }
                }
            }
        }
        if total > 0.0 {
            trade / total
        } else {
            0.0
        }
    }
}

/// Labels every interior node of the level at `tau` and extracts the
/// interfaces along each wealth column.
pub fn classify_regions(solution: &Solution, tau: f64, tol: f64) -> Result<RegionMap> {
    if !(tol > 0.0) {
        return Err(Error::validation("regions.tol", "must be > 0"));
    }
    let level = solution.level(tau)?;
    Ok(classify_level(&solution.grid, level, tol))
}

pub fn classify_level(grid: &TransformedGrid, level: &Level, tol: f64) -> RegionMap {
    let r = &level.residuals;
    let labels: Vec<Option<Label>> = (0..grid.len())
        .map(|n| {
            let (i, j, _) = grid.coords(n);
            grid.is_interior(i, j)
                .then(|| label_of(r.pde[n], r.sell[n], r.buy[n], tol))
        })
        .collect();
    let mut crossings = Vec::new();
    let sq = level.tau.sqrt();
    for k in 0..grid.nnu() {
        for i in 1..grid.nz() - 1 {
            let mut prev: Option<(usize, Label)> = None;
            for j in 0..grid.nv() {
                let Some(label) = labels[grid.index(i, j, k)] else {
                    continue;
                };
                if let Some((jp, lp)) = prev {
                    if lp != label && lp != Label::Ambiguous && label != Label::Ambiguous {
                        let v = interface_v(grid, level, i, k, (jp, lp), (j, label));
                        crossings.push(Crossing {
                            i,
                            k,
                            z: grid.z[i],
                            lower: lp,
                            upper: label,
                            v,
                            y: v / sq,
                        });
                    }
                }
                prev = Some((j, label));
            }
        }
    }
    RegionMap {
        tau: level.tau,
        tol,
        labels,
        crossings,
    }
}

/// Zero of the binding constraint's residual, interpolated linearly
/// between a trade node and its no-trade neighbour. Trade-to-trade
/// interfaces sit at the midpoint.
fn interface_v(
    grid: &TransformedGrid,
    level: &Level,
    i: usize,
    k: usize,
    (ja, la): (usize, Label),
    (jb, lb): (usize, Label),
) -> f64 {
    let (va, vb) = (grid.v[ja], grid.v[jb]);
    let trade = match (la, lb) {
        (t, Label::NoTrade) | (Label::NoTrade, t) if t.is_trade() => t,
        _ => return 0.5 * (va + vb),
    };
    let field = match trade {
        Label::Sell => &level.residuals.sell,
        _ => &level.residuals.buy,
    };
    let (ga, gb) = (field[grid.index(i, ja, k)], field[grid.index(i, jb, k)]);
    if !(ga.is_finite() && gb.is_finite()) || ga == gb {
        return 0.5 * (va + vb);
    }
    let s = (-ga / (gb - ga)).clamp(0.0, 1.0);
    va + s * (vb - va)
}

/// One wealth column of the frictionless comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrictionlessRow {
    pub z: f64,
    /// Upper edge of the buy region on the long side, in stock units.
    pub buy_boundary: Option<f64>,
    /// Lower edge of the sell region on the short side, in stock units.
    pub sell_boundary: Option<f64>,
    pub target: f64,
    /// Sign of `buy_boundary - target`.
    pub buy_exceeds: Option<bool>,
}

/// Buy and sell boundaries next to `y = 0` against the frictionless
/// goal-reaching target, per wealth column at state index `k`.
pub fn compare_frictionless(
    map: &RegionMap,
    solution: &Solution,
    sigma: f64,
    k: usize,
) -> Result<Vec<FrictionlessRow>> {
    if !solution.problem.utility.is_goal_reaching() {
        return Err(Error::Unsupported(
            "frictionless comparison needs a goal-reaching utility".into(),
        ));
    }
    let grid = &solution.grid;
    let lo = grid.z[0];
    let span = grid.z[grid.nz() - 1] - lo;
    let mut rows = Vec::new();
    for i in 1..grid.nz() - 1 {
        let z = grid.z[i];
        let column: Vec<&Crossing> = map.crossings.iter().filter(|c| c.i == i && c.k == k).collect();
        // First buy exit above v = 0 and first sell exit below it.
        let buy_boundary = column
            .iter()
            .filter(|c| c.lower == Label::Buy && c.v >= 0.0)
            .map(|c| c.y)
            .reduce(f64::min);
        let sell_boundary = column
            .iter()
            .filter(|c| c.upper == Label::Sell && c.v <= 0.0)
            .map(|c| c.y)
            .reduce(f64::max);
        let target = browne_target((z - lo) / span, sigma, map.tau)?;
        rows.push(FrictionlessRow {
            z,
            buy_boundary,
            sell_boundary,
            target,
            buy_exceeds: buy_boundary.map(|b| b > target),
        });
    }
    Ok(rows)
}

/// CSV header of field exports.
pub const CSV_HEADER: &str = "t,z,v,y,W,residual_pde,residual_sell,residual_buy,label";

fn num(out: &mut String, x: f64) {
    if x.is_nan() {
        out.push_str("nan");
    } else if x.is_infinite() {
        out.push_str(if x > 0.0 { "inf" } else { "-inf" });
    } else {
        write!(out, "{x:e}").expect("writing to a string");
    }
}

/// One CSV row per interior node, ordered by state, position, wealth.
/// Problems with a state axis append a `nu` column; `slice` keeps only the
/// nodes at one state index.
pub fn fields_csv(solution: &Solution, map: &RegionMap, slice: Option<usize>) -> Result<String> {
    let grid = &solution.grid;
    let level = solution.level(map.tau)?;
    let has_nu = grid.nu.is_some();
    let t = grid.horizon - level.tau;
    let sq = level.tau.sqrt();
    let mut out = String::with_capacity(grid.len() * 120);
    out.push_str(CSV_HEADER);
    if has_nu {
        out.push_str(",nu");
    }
    out.push('\n');
    for (n, label) in map.labels.iter().enumerate() {
        let Some(label) = label else { continue };
        let (i, j, k) = grid.coords(n);
        if slice.is_some_and(|s| s != k) {
            continue;
        }
        let r = &level.residuals;
        for x in [t, grid.z[i], grid.v[j], grid.v[j] / sq, level.w[n], r.pde[n], r.sell[n], r.buy[n]] {
            num(&mut out, x);
            out.push(',');
        }
        out.push_str(label.as_str());
        if has_nu {
            out.push(',');
            num(&mut out, grid.nu_at(k));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Gnuplot script drawing the labels of an exported CSV in the `(z, y)`
/// plane.
pub fn gnuplot_script(csv_name: &str, title: &str) -> String {
    format!(
        "# Region map; columns follow the CSV header\n\
         # {CSV_HEADER}\n\
         set datafile separator ','\n\
         set key outside\n\
         set title '{title}'\n\
         set xlabel 'z'\n\
         set ylabel 'y'\n\
         set yrange [-{AREA_Y_LIMIT}:{AREA_Y_LIMIT}]\n\
         code(s) = s eq 'SR' ? 1 : s eq 'BR' ? 2 : s eq 'NR' ? 3 : 4\n\
         plot '{csv_name}' every ::1 using 2:(code(strcol(9)) == 1 ? $4 : 1/0) with points pt 7 ps 0.3 lc rgb '#d62728' title 'SR', \\\n\
         \x20    '{csv_name}' every ::1 using 2:(code(strcol(9)) == 2 ? $4 : 1/0) with points pt 7 ps 0.3 lc rgb '#1f77b4' title 'BR', \\\n\
         \x20    '{csv_name}' every ::1 using 2:(code(strcol(9)) == 4 ? $4 : 1/0) with points pt 7 ps 0.3 lc rgb '#7f7f7f' title 'AMBIGUOUS'\n"
    )
}

/// Writes `contents` to `path`, naming the path in errors.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}
