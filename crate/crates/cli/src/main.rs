//! `nctc`: runs the shipped experiments and writes data, reports and plot
//! scripts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nctc_core::analytic::first_passage_prob;
use nctc_core::config::{preset_text, McBlock, Run, RunConfig, PRESETS};
use nctc_core::convergence::{convergence_study, LadderMode, LadderOptions};
use nctc_core::grid::transform_point;
use nctc_core::market::{MarketModel, Position};
use nctc_core::regions::{classify_regions, compare_frictionless, fields_csv, gnuplot_script, write_file};
use nctc_core::sim::{simulate_strategy, RegionPolicy, Strategy, StrategySpec};
use nctc_core::snapshot::write_snapshot;
use nctc_core::solver::{solve_with_spec, Solution};
use nctc_core::terminal::{cash_for, terminal_check};
use nctc_core::Error;

/// Environment variable naming the default output directory.
const OUT_ENV: &str = "NCTC_OUT_DIR";
/// Largest accepted gap to the terminal asymptote at the last rung.
const TERMINAL_BOUND: f64 = 0.05;

#[derive(Parser)]
#[command(name = "nctc", version, about = "Optimal trading under transaction costs with non-concave utilities")]
struct Cli {
    /// Worker threads for assembly and simulation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve and write a snapshot of the retained levels.
    Solve(RunArgs),
    /// Solve and export region maps, a plot script and the frictionless table.
    Regions(RegionArgs),
    /// Compare solved values with the terminal asymptote along a tau ladder.
    TerminalCheck(TerminalArgs),
    /// Compare the solved value with Monte Carlo strategy estimates.
    VerifyMc(McArgs),
    /// Run a refinement ladder.
    Converge(ConvergeArgs),
    /// List the shipped presets.
    Presets {
        /// Print the configuration of one preset.
        #[arg(long)]
        show: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    preset: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set grid.nz=81`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (default: $NCTC_OUT_DIR, else ./out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with code 3 when the run's acceptance check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct RegionArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Times to maturity to export (default: outputs.levels).
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
}

#[derive(Args)]
struct TerminalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    y: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
}

#[derive(Args)]
struct McArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long, default_value = "mesh")]
    mode: String,
    #[arg(long, default_value_t = 2)]
    rungs: usize,
}

enum Failure {
    Validation(String),
    Solver(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Solver(e.to_string())
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if n == 0 {
            eprintln!("error: invalid --jobs: must be >= 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Solver(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(3)
        }
    }
}

fn dispatch(command: Command) -> Outcome {
    match command {
        Command::Solve(a) => solve(a),
        Command::Regions(a) => regions(a),
        Command::TerminalCheck(a) => terminal(a),
        Command::VerifyMc(a) => verify_mc(a),
        Command::Converge(a) => converge(a),
        Command::Presets { show } => presets(show),
    }
}

fn load(args: &RunArgs) -> Result<Run, Failure> {
    let text = match (&args.preset, &args.config) {
        (Some(name), _) => preset_text(name)?.to_string(),
        (None, Some(path)) => std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
        (None, None) => unreachable!("clap requires one of --preset and --config"),
    };
    Ok(RunConfig::from_toml_with(&text, &args.set)?.resolve()?)
}

fn out_dir(args: &RunArgs) -> PathBuf {
    args.out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn write(dir: &Path, name: &str, contents: &str) -> Outcome {
    let path = dir.join(name);
    write_file(&path, contents)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn to_json(v: &serde_json::Value) -> Result<String, Failure> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Solver(e.to_string()))
}

fn verdict(args: &RunArgs, problems: Vec<String>) -> Outcome {
    if problems.is_empty() {
        if args.check {
            println!("check passed");
        }
        Ok(())
    } else if args.check {
        Err(Failure::Check(problems.join("; ")))
    } else {
        for p in problems {
            eprintln!("warning: {p}");
        }
        Ok(())
    }
}

/// Value-range and M-matrix checks shared by the solving subcommands.
fn solution_problems(run: &Run, s: &Solution) -> Vec<String> {
    let mut out = Vec::new();
    let d = &s.diagnostics;
    if !d.m_matrix.passed() {
        out.push(format!("{} M-matrix row violations", d.m_matrix.violations.len()));
    }
    if matches!(run.problem.market, MarketModel::Gbm { .. }) && d.damping.total > 0 {
        out.push(format!("{} damping events on a constant-coefficient market", d.damping.total));
    }
    if run.problem.utility.is_goal_reaching() {
        for level in &s.levels {
            if let Some(w) = level.w.iter().find(|w| !(-1e-9..=1.0 + 1e-9).contains(*w)) {
                out.push(format!("value {w} outside [0, 1] at tau = {}", level.tau));
                break;
            }
        }
    }
    out
}

fn solve_run(run: &Run) -> Result<Solution, Failure> {
    Ok(solve_with_spec(&run.problem, &run.grid, &run.params)?)
}

fn solve(args: RunArgs) -> Outcome {
    let run = load(&args)?;
    let s = solve_run(&run)?;
    let dir = out_dir(&args);
    let stem = run.config.prefix().to_string();
    write(&dir, &format!("{stem}.snapshot"), &write_snapshot(&s, &run.config.experiment, &run.config_hash)?)?;
    let d = &s.diagnostics;
    println!(
        "{}: {} levels, {} Newton iterations over {} steps, {} damping events",
        run.config.experiment,
        s.levels.len(),
        d.newton_iterations.iter().sum::<usize>(),
        d.newton_iterations.len(),
        d.damping.total
    );
    verdict(&args, solution_problems(&run, &s))
}

fn regions(args: RegionArgs) -> Outcome {
    let mut run = load(&args.run)?;
    let taus = if args.tau.is_empty() {
        run.config.outputs.levels.clone()
    } else {
        args.tau.clone()
    };
    run.params.store_levels.extend_from_slice(&taus);
    let s = solve_run(&run)?;
    let taus = if taus.is_empty() { vec![s.last_level().tau] } else { taus };
    let dir = out_dir(&args.run);
    let stem = run.config.prefix().to_string();
    let tol = run.config.outputs.label_tol;
    let slices: Vec<Option<(f64, usize)>> = if s.grid.nu.is_some() {
        let nus = if run.config.outputs.nu.is_empty() { vec![0.0] } else { run.config.outputs.nu.clone() };
        nus.into_iter().map(|nu| Some((nu, s.grid.nearest_nu(nu)))).collect()
    } else {
        vec![None]
    };
    let mut problems = solution_problems(&run, &s);
    let mut maps = Vec::new();
    for &tau in &taus {
        let map = classify_regions(&s, tau, tol)?;
        for slice in &slices {
            let name = match slice {
                Some((nu, _)) => format!("{stem}_tau{tau}_nu{nu}"),
                None => format!("{stem}_tau{tau}"),
            };
            let csv = fields_csv(&s, &map, slice.map(|(_, k)| k))?;
            write(&dir, &format!("{name}.csv"), &csv)?;
            write(&dir, &format!("{name}.gp"), &gnuplot_script(&format!("{name}.csv"), &name))?;
            let k = slice.map_or(0, |(_, k)| k);
            let area = map.trade_area_fraction(&s.grid, k);
            let mut entry = json!({
                "tau": tau,
                "nu": slice.map(|(_, k)| s.grid.nu_at(k)),
                "csv": format!("{name}.csv"),
                "trade_area_fraction": area,
                "crossings": map.crossings.iter().filter(|c| c.k == k).count(),
            });
            if run.problem.utility.is_goal_reaching() {
                let table = compare_frictionless(&map, &s, run.problem.market.sigma(), k)?;
                let mut t = String::from("z,buy_boundary,sell_boundary,target,buy_exceeds\n");
                for r in &table {
                    let opt = |x: Option<f64>| x.map_or(String::new(), |x| format!("{x:e}"));
                    t.push_str(&format!(
                        "{:e},{},{},{:e},{}\n",
                        r.z,
                        opt(r.buy_boundary),
                        opt(r.sell_boundary),
                        r.target,
                        r.buy_exceeds.map_or(String::new(), |b| b.to_string())
                    ));
                }
                write(&dir, &format!("{name}_frictionless.csv"), &t)?;
                entry["frictionless_csv"] = json!(format!("{name}_frictionless.csv"));
            }
            maps.push(entry);
        }
        let unlabeled = (0..s.grid.len())
            .filter(|&n| {
                let (i, j, _) = s.grid.coords(n);
                s.grid.is_interior(i, j) && map.labels[n].is_none()
            })
            .count();
        if unlabeled > 0 {
            problems.push(format!("{unlabeled} interior nodes without a label at tau = {tau}"));
        }
    }
    let sidecar = json!({
        "format_version": 1,
        "experiment": run.config.experiment,
        "config_hash": run.config_hash,
        "label_tol": tol,
        "maps": maps,
        "diagnostics": s.diagnostics,
    });
    write(&dir, &format!("{stem}_regions.json"), &to_json(&sidecar)?)?;
    verdict(&args.run, problems)
}

fn terminal(args: TerminalArgs) -> Outcome {
    let run = load(&args.run)?;
    let mut spec = run.config.terminal.clone().unwrap_or_default();
    if !args.y.is_empty() {
        spec.ys = args.y.clone();
    }
    if !args.tau.is_empty() {
        spec.taus = args.tau.clone();
    }
    let (_, report) = terminal_check(&run.problem, &run.grid, &run.params, &spec)?;
    let dir = out_dir(&args.run);
    let stem = run.config.prefix().to_string();
    write(&dir, &format!("{stem}_terminal.csv"), &report.csv())?;
    let mut problems = Vec::new();
    for &y in &spec.ys {
        let ladder = report.ladder(y);
        println!("y = {y}: max |W - asymptote| along the ladder {ladder:?}");
        if !report.decreasing(y) {
            problems.push(format!("ladder at y = {y} does not decrease strictly"));
        }
        if let Some(last) = ladder.last().filter(|&&m| m >= TERMINAL_BOUND) {
            problems.push(format!("last rung at y = {y} is {last:.4}, not below {TERMINAL_BOUND}"));
        }
    }
    write(
        &dir,
        &format!("{stem}_terminal.json"),
        &to_json(&json!({
            "format_version": 1,
            "experiment": run.config.experiment,
            "config_hash": run.config_hash,
            "maxima": report.maxima,
        }))?,
    )?;
    verdict(&args.run, problems)
}

fn verify_mc(args: McArgs) -> Outcome {
    let mut run = load(&args.run)?;
    let mut mc: McBlock = run.config.mc.clone().unwrap_or_default();
    if let Some(p) = args.paths {
        mc.paths = p;
    }
    if let Some(s) = args.seed {
        mc.seed = s;
    }
    mc.validate()?;
    // Region maps along the march, for the rollout of the region policy.
    let steps = run.params.time_steps;
    for m in 1..=10 {
        let n = (steps * m).div_ceil(10).max(1);
        run.params.store_levels.push(run.params.tau_max * n as f64 / steps as f64);
    }
    let s = solve_run(&run)?;
    let problem = &run.problem;
    let tau = s.last_level().tau;
    let (x, y) = (cash_for(mc.z, mc.y, &problem.costs), mc.y);
    let (z, v) = transform_point(tau, x, y, &problem.costs)?;
    let w = s.value_at(tau, z, v, mc.nu)?;
    let initial = Position {
        t: problem.horizon - tau,
        x,
        y,
        nu: mc.nu,
    };
    let run_one = |strategy: Strategy| {
        simulate_strategy(
            &StrategySpec {
                strategy,
                initial,
                paths: mc.paths,
                seed: mc.seed,
                dt: mc.dt,
            },
            problem,
        )
    };
    let no_trade = run_one(Strategy::NoTrade)?;
    let policy = run_one(Strategy::RegionPolicy(RegionPolicy::from_solution(&s, run.config.outputs.label_tol)?))?;
    let mut problems = Vec::new();
    let mut report = json!({
        "format_version": 1,
        "experiment": run.config.experiment,
        "config_hash": run.config_hash,
        "tau": tau,
        "z": mc.z,
        "y": y,
        "nu": mc.nu,
        "pde_value": w,
        "no_trade": no_trade,
        "region_policy": policy,
    });
    if policy.lower() > w + 1e-2 {
        problems.push(format!("region policy {:.5} exceeds the solved value {w:.5}", policy.mean));
    }
    if policy.upper() < no_trade.lower() {
        problems.push("region policy is beaten by not trading".to_string());
    }
    if problem.utility.is_goal_reaching() {
        let target = s.grid.z[s.grid.nz() - 1];
        let pi = run_one(Strategy::PiStar {
            target,
            floor: problem.floor,
        })?;
        if w < pi.lower() - 1e-2 {
            problems.push(format!("solved value {w:.5} below the pi_star estimate {:.5}", pi.mean));
        }
        if w > mc.z + 5e-3 {
            problems.push(format!("solved value {w:.5} above the concave bound {}", mc.z + 5e-3));
        }
        // With non-negative cash the floor is out of reach and the hit
        // probability has a closed form.
        if let (MarketModel::Gbm { eta, sigma, .. }, true) = (problem.market, x >= 0.0 && y > 0.0) {
            let b = ((target - x) / (mc.z - x)).ln();
            let exact = first_passage_prob(eta - 0.5 * sigma * sigma, sigma, b, tau)?;
            if (pi.mean - exact).abs() > 3.0 * pi.std_error {
                problems.push(format!("pi_star estimate {:.5} misses the closed form {exact:.5}", pi.mean));
            }
            report["pi_star_closed_form"] = json!(exact);
        }
        report["pi_star"] = json!(pi);
    }
    println!("{}", to_json(&report)?.trim_end());
    let dir = out_dir(&args.run);
    write(&dir, &format!("{}_mc.json", run.config.prefix()), &to_json(&report)?)?;
    verdict(&args.run, problems)
}

fn converge(args: ConvergeArgs) -> Outcome {
    let run = load(&args.run)?;
    let mode: LadderMode = args.mode.parse()?;
    let options = LadderOptions {
        rungs: args.rungs,
        ..LadderOptions::default()
    };
    let report = convergence_study(&run.problem, &run.grid, &run.params, mode, &options)?;
    println!("{mode:?} ladder differences {:?}, orders {:?}", report.differences, report.orders);
    let bound = match mode {
        LadderMode::Penalty => 1e-4,
        LadderMode::Mesh => 1e-2,
        LadderMode::Boundary => 1e-3,
    };
    let last = *report.differences.last().expect("at least two rungs");
    let problems = if last < bound {
        Vec::new()
    } else {
        vec![format!("last ladder difference {last:.3e} is not below {bound:e}")]
    };
    let dir = out_dir(&args.run);
    let name = format!("{}_converge_{}.json", run.config.prefix(), args.mode);
    write(
        &dir,
        &name,
        &to_json(&json!({
            "format_version": 1,
            "experiment": run.config.experiment,
            "config_hash": run.config_hash,
            "report": report,
        }))?,
    )?;
    verdict(&args.run, problems)
}

fn presets(show: Option<String>) -> Outcome {
    match show {
        Some(name) => print!("{}", preset_text(&name)?),
        None => {
            for (name, text) in PRESETS {
                let c = RunConfig::from_toml(text)?;
                println!("{name:<24} {}", c.description);
            }
        }
    }
    Ok(())
}
