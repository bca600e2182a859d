//! Property tests of the solver and region invariants on small random
//! problems.

use nctc_core::analytic::crra_frictionless_value;
use nctc_core::grid::GridSpec;
use nctc_core::market::{CostSpec, MarketModel};
use nctc_core::problem::ProblemSpec;
use nctc_core::regions::{classify_level, Label};
use nctc_core::solver::{solve_with_spec, Solution, SolverParams};
use nctc_core::stencil::operator_stencil;
use nctc_core::utility::{make_utility, UtilitySpec};
use proptest::prelude::*;

/// Complementarity tolerance in residual units, on top of the Newton
/// tolerance of each row and the penalty slack `pde / lambda` that a
/// binding constraint carries.
const TOL_QVI: f64 = 1e-6;
const TOL_BOUND: f64 = 1e-6;
/// Relative discretisation tolerance of the upper envelope, which the
/// power families touch above the aspiration level.
const TOL_ENVELOPE: f64 = 1e-4;
const LABEL_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
struct Case {
    eta: f64,
    sigma: f64,
    theta: f64,
    tau: f64,
    short: bool,
    utility: UtilitySpec,
}

fn utilities() -> impl Strategy<Value = UtilitySpec> {
    prop_oneof![
        Just(UtilitySpec::GoalReaching { target: 1.0 }),
        (0.0..1.0f64, 1.1..2.0f64, 0.3..0.7f64).prop_map(|(c1, c2, p)| UtilitySpec::Aspiration {
            p,
            c1,
            c2,
            target: 1.0
        }),
        (1.1..3.0f64, 0.3..0.7f64).prop_map(|(l, p)| UtilitySpec::SShaped {
            loss_aversion: l,
            p,
            reference: 1.0
        }),
    ]
}

fn cases() -> impl Strategy<Value = Case> {
    (0.0..0.08f64, 0.2..0.4f64, 5e-4..5e-3f64, 0.005..0.1f64, any::<bool>(), utilities()).prop_map(
        |(eta, sigma, theta, tau, short, utility)| Case {
            eta,
            sigma,
            theta,
            tau,
            short,
            utility,
        },
    )
}

fn problem(c: &Case, utility: UtilitySpec) -> ProblemSpec {
    ProblemSpec::new(
        MarketModel::gbm(c.eta, c.sigma),
        CostSpec::symmetric(c.theta).unwrap(),
        1.0,
        make_utility(utility, 0.0).unwrap(),
        c.short,
    )
    .unwrap()
}

fn solve(c: &Case, utility: UtilitySpec) -> Solution {
    let grid = GridSpec {
        nz: 25,
        nv: 17,
        v_max: 20.0,
        ..GridSpec::default()
    };
    let params = SolverParams {
        tau_max: c.tau,
        time_steps: 8,
        store_levels: vec![c.tau / 2.0],
        ..SolverParams::default()
    };
    solve_with_spec(&problem(c, utility), &grid, &params).unwrap()
}

/// Frictionless upper envelope `C1 + C2 z^p F` of the utility families.
fn envelope(c: &Case, z: f64, tau: f64) -> f64 {
    let m = MarketModel::gbm(c.eta, c.sigma);
    let crra = |p: f64| crra_frictionless_value(1.0 - tau, z, p, &m, 1.0, 0.0).unwrap();
    match c.utility {
        UtilitySpec::GoalReaching { .. } => 1.0,
        UtilitySpec::Aspiration { p, c1, c2, .. } => c1 + c2 * crra(p),
        UtilitySpec::SShaped { p, .. } => p * crra(p),
        _ => unreachable!(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn solved_fields_respect_the_qvi_invariants(c in cases()) {
        let s = solve(&c, c.utility);
        let g = &s.grid;
        let u = &s.problem.utility;
        let dtau = g.time.dtau();
        let lambda = s.params.lambda(dtau);
        for level in &s.levels {
            let r = &level.residuals;
            for n in 0..g.len() {
                let (i, j, _) = g.coords(n);
                if !g.is_interior(i, j) {
                    continue;
                }
                // Newton stops on the residual scaled by the row diagonal.
                let diag = 1.0 / dtau - operator_stencil(&s.problem, g, level.tau, n).diagonal();
                let tol = TOL_QVI + s.params.newton_tol * diag;
                let terms = [r.pde[n], r.sell[n], r.buy[n]];
                let min = terms.iter().copied().fold(f64::INFINITY, f64::min);
                let slack = tol + 2.0 * r.pde[n].max(0.0) / lambda;
                prop_assert!(terms.iter().all(|t| *t >= -slack), "node {n}: {terms:?}");
                prop_assert!(min <= tol, "node {n}: {terms:?}");

                let w = level.w[n];
                let z = g.z[i];
                // Selling to v = 0 loses at most the penalty slack of each
                // sell row on the way.
                let j0 = g.v_zero();
                let path = if j > j0 { j0 + 1..j + 1 } else { j..j0 };
                let lost: f64 = path
                    .map(|jj| {
                        let m = g.index(i, jj, 0);
                        2.0 * r.pde[m].max(0.0) / lambda * (g.v[jj] - g.v[if jj > j0 { jj - 1 } else { jj + 1 }]).abs()
                    })
                    .sum();
                prop_assert!(w >= u.value(z) - lost - TOL_BOUND, "below liquidation at node {n}: {w}");
                let cap = envelope(&c, z, level.tau);
                prop_assert!(w <= cap + TOL_ENVELOPE * cap.abs().max(1.0), "above envelope at node {n}: {w} vs {cap}");
                if i + 1 < g.nz() {
                    prop_assert!(level.w[n + 1] >= w - 1e-8, "not increasing in z at node {n}");
                }
            }
        }
    }

    #[test]
    fn labels_partition_and_match_residuals(c in cases()) {
        let s = solve(&c, c.utility);
        let g = &s.grid;
        for level in &s.levels {
            let map = classify_level(g, level, LABEL_TOL);
            let r = &level.residuals;
            for n in 0..g.len() {
                let (i, j, _) = g.coords(n);
                let label = map.labels[n];
                prop_assert_eq!(label.is_some(), g.is_interior(i, j));
                let binding = match label {
                    Some(Label::NoTrade) => r.pde[n],
                    Some(Label::Sell) => r.sell[n],
                    Some(Label::Buy) => r.buy[n],
                    Some(Label::Ambiguous) => r.sell[n].max(r.buy[n]),
                    None => continue,
                };
                prop_assert!(binding <= LABEL_TOL, "node {n} {label:?}: {binding}");
            }
        }
    }

    #[test]
    fn larger_utility_gives_larger_value(c in cases(), lift in 0.0..1.0f64) {
        let (lo, hi) = match c.utility {
            UtilitySpec::Aspiration { p, c1, c2, target } => (
                c.utility,
                UtilitySpec::Aspiration { p, c1: c1 + lift, c2, target },
            ),
            _ => (
                UtilitySpec::Aspiration { p: 0.5, c1: 0.0, c2: 1.5, target: 1.0 },
                UtilitySpec::Aspiration { p: 0.5, c1: lift, c2: 1.5, target: 1.0 },
            ),
        };
        let a = solve(&c, lo);
        let b = solve(&c, hi);
        prop_assert_eq!(&a.grid, &b.grid);
        for (x, y) in a.last_level().w.iter().zip(&b.last_level().w) {
            prop_assert!(*x <= *y + 1e-6, "{x} > {y}");
        }
    }

    #[test]
    fn solves_are_bit_reproducible(c in cases()) {
        let a = solve(&c, c.utility);
        let b = solve(&c, c.utility);
        for (x, y) in a.levels.iter().zip(&b.levels) {
            prop_assert!(x.w.iter().zip(&y.w).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}

/// Along each wealth column on the long side, labels run buy, then no-trade,
/// then sell, for goal reaching without risk premium.
#[test]
fn goal_columns_cross_once() {
    for tau in [0.01, 0.05, 0.1] {
        let c = Case {
            eta: 0.0,
            sigma: 0.3,
            theta: 1e-3,
            tau,
            short: true,
            utility: UtilitySpec::GoalReaching { target: 1.0 },
        };
        let s = solve(&c, c.utility);
        let g = &s.grid;
        let map = classify_level(g, s.last_level(), LABEL_TOL);
        let rank = |l: Label| match l {
            Label::Buy => 0,
            Label::NoTrade => 1,
            Label::Sell => 2,
            Label::Ambiguous => unreachable!(),
        };
        for i in 1..g.nz() - 1 {
            let ranks: Vec<u8> = (g.v_zero() + 1..g.nv() - 1)
                .filter_map(|j| map.label_at(g, i, j, 0))
                .filter(|l| *l != Label::Ambiguous)
                .map(rank)
                .collect();
            assert!(ranks.windows(2).all(|w| w[0] <= w[1]), "tau {tau}, column {i}: {ranks:?}");
        }
    }
}
