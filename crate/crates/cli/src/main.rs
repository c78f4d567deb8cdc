use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use snell_lab::convergence::{
    atom_sets, bc_gap, filtration_weak_gap, paths_in_prob_gap, sigma_field_gap, ConvergenceReport, Mode, TestFn,
};
use snell_lab::experiment::{self, lemma_tn_ladder, ExperimentConfig, ExperimentKind, ExperimentReport, RunOptions};
use snell_lab::procgen::{counterexample_space, discretize_process, gen_crr, gen_random_walk, CrrParams};
use snell_lab::snell::{gamma_pi, randomized_value, snell_value, stopped_value, ValueMeta};
use snell_lab::steppath::{skorokhod_distance, uniform_distance};
use snell_lab::stoprule::RuleFile;
use snell_lab::{CoupledSpace, Payoff, RandomizedStoppingRule, StepPath, StoppingRule, TimeGrid, ValueReport};

#[derive(Parser)]
#[command(name = "snell-lab", version, about = "Optimal-stopping values and convergence diagnostics on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and report its checks (exit code 1 on failure).
    Experiment(ExperimentArgs),
    /// Optimal (or rule-specific) value on a scenario tree file.
    Value(ValueArgs),
    /// Gap statistics along a discretization ladder, as CSV.
    Converge(ConvergeArgs),
    /// J1 and uniform distance between two step paths given as CSV.
    Distance(DistanceArgs),
    /// Write a generated scenario tree as JSON.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment name; optional when the config names it.
    name: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the JSON report and one CSV per table.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate ladder members sequentially.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct ValueArgs {
    #[arg(long)]
    tree: PathBuf,
    #[arg(long)]
    observable: String,
    #[arg(long, default_value = "capped-identity")]
    payoff: String,
    #[arg(long = "L")]
    bound: f64,
    /// Allowed stopping times, comma separated.
    #[arg(long, value_delimiter = ',')]
    pi: Option<Vec<f64>>,
    /// Evaluate this rule instead of optimizing.
    #[arg(long)]
    rule: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PathsInProbability,
    SigmaField,
    FiltrationWeak,
    BaxterChacon,
}

#[derive(Args)]
struct ConvergeArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Scenario tree file; a scaled walk of `--depth` steps when absent.
    #[arg(long)]
    tree: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    depth: usize,
    /// Observable to discretize.
    #[arg(long, default_value = "B")]
    source: String,
    /// Grid sizes: intervals of uniform grids (0 = the grid {0}); for
    /// baxter-chacon, numbers of grid points.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    ladder: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    eps: f64,
    /// Payoff defining the limit stopping time (baxter-chacon only).
    #[arg(long, default_value = "arctan")]
    payoff: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistanceArgs {
    /// CSV with header `t,value`; each row is a value held from `t` on.
    a: PathBuf,
    b: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    horizon: f64,
}

#[derive(Subcommand)]
enum GenerateKind {
    Crr {
        #[arg(long, default_value_t = 1.0)]
        s0: f64,
        #[arg(long, default_value_t = 0.1)]
        lambda: f64,
        #[arg(long, default_value_t = 0.2)]
        sigma: f64,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        #[arg(long)]
        steps: usize,
    },
    Walk {
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
    },
    Counterexample {
        #[arg(long)]
        n: usize,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[command(subcommand)]
    kind: GenerateKind,
    /// Output file; stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Experiment(a) => run_experiment(a),
        Command::Value(a) => value(a).map(|_| true),
        Command::Converge(a) => converge(a).map(|_| true),
        Command::Distance(a) => distance(a).map(|_| true),
        Command::Generate(a) => generate(a).map(|_| true),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => emit(text),
    }
}

// A closed stdout (e.g. piped into `head`) is not an error worth a panic.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", text.trim_end()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn run_experiment(a: ExperimentArgs) -> Result<bool> {
    experiment::init_thread_pool()?;
    let mut cfg = match (&a.config, &a.name) {
        (Some(path), name) => {
            let cfg = ExperimentConfig::from_path(path).with_context(|| format!("reading {}", path.display()))?;
            if let Some(n) = name {
                if n.parse::<ExperimentKind>()? != cfg.experiment {
                    bail!("config is for {}, not {n}", cfg.experiment);
                }
            }
            cfg
        }
        (None, Some(name)) => ExperimentConfig::new(name.parse()?),
        (None, None) => bail!("give an experiment name or --config"),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let out = a.out.clone().or_else(|| cfg.output.clone());
    let report = experiment::run(&cfg, RunOptions { sequential: a.sequential })?;

    match &out {
        Some(dir) => write_report(dir, &report)?,
        None => emit(&report.to_json()?)?,
    }
    for c in &report.checks {
        eprintln!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = report.failures().count();
    if failed > 0 {
        eprintln!("{}: {failed} of {} checks failed", report.experiment, report.checks.len());
    } else {
        eprintln!("{}: all {} checks passed", report.experiment, report.checks.len());
    }
    Ok(report.passed)
}

fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let name = report.experiment.name();
    fs::write(dir.join(format!("{name}.json")), report.to_json()?)?;
    for t in &report.tables {
        let path = dir.join(format!("{}.csv", t.name));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(&t.columns)?;
        for row in &t.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
    }
    Ok(())
}

fn load_space(path: &Path) -> Result<CoupledSpace> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("tree");
    Ok(CoupledSpace::from_json(&text, label)?)
}

fn value(a: ValueArgs) -> Result<()> {
    let started = Instant::now();
    let space = load_space(&a.tree)?;
    let payoff = Payoff::parse(&a.payoff)?;
    if !payoff.is_bounded() {
        eprintln!("warning: payoff {} is unbounded; the convergence results assume a bounded gain", payoff.name());
    }
    let report = if let Some(path) = &a.rule {
        let file: RuleFile = serde_json::from_str(&fs::read_to_string(path)?)
            .with_context(|| format!("parsing rule {}", path.display()))?;
        let randomized = file.decisions.iter().any(|d| d.p.is_some());
        let value = if randomized {
            let rule = RandomizedStoppingRule::from_file(&file, &space)?;
            randomized_value(&space, &a.observable, &payoff, &rule)?
        } else {
            let rule = StoppingRule::from_file(&file, &space)?;
            stopped_value(&space, &a.observable, &payoff, &rule)?
        };
        ValueReport {
            value,
            rule: Some(file.clone()),
            grid: None,
            metadata: ValueMeta {
                payoff: payoff.name().into(),
                observable: a.observable.clone(),
                bound: file.bound,
                tree: space.label().into(),
                wall_time_secs: started.elapsed().as_secs_f64(),
                unbounded_payoff: !payoff.is_bounded(),
            },
            optimal_rule: None,
        }
    } else if let Some(pi) = &a.pi {
        gamma_pi(&space, &a.observable, &payoff, pi, a.bound)?
    } else {
        snell_value(&space, &a.observable, &payoff, a.bound)?
    };
    emit(&serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn converge(a: ConvergeArgs) -> Result<()> {
    let space = match &a.tree {
        Some(p) => load_space(p)?,
        None => gen_random_walk(a.depth, 1.0)?,
    };
    let horizon = space.tree().horizon();
    let filt = space.filtration(&a.source)?;
    let sets = atom_sets(&filt, filt.depth())?;
    let depth = filt.depth();

    let report = match a.mode {
        ModeArg::BaxterChacon => {
            let payoff = Payoff::parse(&a.payoff)?;
            let grids = a
                .ladder
                .iter()
                .map(|&n| {
                    if n < 2 {
                        bail!("baxter-chacon ladder counts grid points and needs n >= 2");
                    }
                    Ok(TimeGrid::uniform(horizon, n - 1)?)
                })
                .collect::<Result<Vec<_>>>()?;
            let (full, tau, rows) = lemma_tn_ladder(&space, &a.source, &grids, &payoff, horizon)?;
            let seq: Vec<_> = rows.iter().map(|r| (r.n, RandomizedStoppingRule::from_pure(&r.rule))).collect();
            let fns = TestFn::standard();
            let gaps = bc_gap(&full, &seq, &RandomizedStoppingRule::from_pure(&tau), &fns, &sets)?;
            ConvergenceReport::new(Mode::BaxterChacon, None, fns.iter().map(|f| f.to_string()).collect(), gaps)
        }
        mode => {
            let mut rows = Vec::with_capacity(a.ladder.len());
            for &n in &a.ladder {
                let grid = if n == 0 { TimeGrid::new(vec![0.0])? } else { TimeGrid::uniform(horizon, n)? };
                let (s, coarse) = discretize_process(&space, &a.source, &grid)?;
                let gap = match mode {
                    ModeArg::PathsInProbability => paths_in_prob_gap(&s, &a.source, &coarse, a.eps)?,
                    ModeArg::SigmaField => sets
                        .iter()
                        .map(|set| sigma_field_gap(&s, set, &coarse, depth, a.eps))
                        .collect::<snell_lab::Result<Vec<_>>>()?
                        .into_iter()
                        .fold(0.0, f64::max),
                    ModeArg::FiltrationWeak => sets
                        .iter()
                        .map(|set| filtration_weak_gap(&s, set, &coarse, &a.source, a.eps))
                        .collect::<snell_lab::Result<Vec<_>>>()?
                        .into_iter()
                        .fold(0.0, f64::max),
                    ModeArg::BaxterChacon => unreachable!(),
                };
                rows.push((n, gap));
            }
            let mode = match mode {
                ModeArg::PathsInProbability => Mode::PathsInProbability,
                ModeArg::SigmaField => Mode::SigmaField,
                _ => Mode::FiltrationWeak,
            };
            ConvergenceReport::new(mode, Some(a.eps), vec![format!("terminal atoms of {}", a.source)], rows)
        }
    };

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "n", "eps", "gap"])?;
    for r in report.csv_records() {
        w.write_record(&r)?;
    }
    let text = String::from_utf8(w.into_inner()?)?;
    write_or_print(a.out.as_deref(), &text)?;
    eprintln!("monotone: {}", report.monotone);
    Ok(())
}

fn read_path(path: &Path, horizon: f64) -> Result<StepPath> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["t", "value"] {
        bail!("{}: expected header t,value", path.display());
    }
    let mut times = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let t: f64 = rec[0].trim().parse().with_context(|| format!("bad time {:?}", &rec[0]))?;
        let v: f64 = rec[1].trim().parse().with_context(|| format!("bad value {:?}", &rec[1]))?;
        times.push(t);
        values.push(v);
    }
    if times.first() != Some(&0.0) {
        bail!("{}: the first row must be at t = 0", path.display());
    }
    Ok(StepPath::new(horizon, times, values)?)
}

fn distance(a: DistanceArgs) -> Result<()> {
    let x = read_path(&a.a, a.horizon)?;
    let y = read_path(&a.b, a.horizon)?;
    let out = serde_json::json!({
        "skorokhod": skorokhod_distance(&x, &y)?,
        "uniform": uniform_distance(&x, &y)?,
    });
    emit(&serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let space = match a.kind {
        GenerateKind::Crr { s0, lambda, sigma, horizon, steps } => {
            gen_crr(&CrrParams { s0, lambda, sigma, horizon, steps })?
        }
        GenerateKind::Walk { steps, horizon } => gen_random_walk(steps, horizon)?,
        GenerateKind::Counterexample { n } => counterexample_space(n)?,
    };
    write_or_print(a.out.as_deref(), &space.to_json()?)
}
