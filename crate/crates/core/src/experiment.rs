//! Experiment harness: one runner per reproduced result, each turning an
//! [`ExperimentConfig`] into an [`ExperimentReport`] of numeric tables and
//! pass/fail checks derived only from those tables.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convergence::{atom_sets, bc_gap, is_nonincreasing, TestFn};
use crate::error::{Error, Result};
use crate::procgen::{
    deterministic_space_on, discretize_process, gen_counterexample, gen_crr, gen_random_walk, counterexample_space,
    CrrParams,
};
use crate::scenario::random::random_space;
use crate::scenario::{CoupledSpace, Filtration};
use crate::snell::{aldous_sup, crr_lattice_value, gamma_pi, snell_value, stopped_value, Payoff};
use crate::steppath::{StepPath, TimeGrid, TIME_EPS};
use crate::stoprule::{last_index, lemma_tn, RandomizedStoppingRule, StoppingRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Counterexample,
    GridRefine,
    LemmaTn,
    Discretize,
    Crr,
    Aldous,
    Randomized,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 7] = [
        ExperimentKind::Counterexample,
        ExperimentKind::GridRefine,
        ExperimentKind::LemmaTn,
        ExperimentKind::Discretize,
        ExperimentKind::Crr,
        ExperimentKind::Aldous,
        ExperimentKind::Randomized,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Counterexample => "counterexample",
            ExperimentKind::GridRefine => "grid-refine",
            ExperimentKind::LemmaTn => "lemma-tn",
            ExperimentKind::Discretize => "discretize",
            ExperimentKind::Crr => "crr",
            ExperimentKind::Aldous => "aldous",
            ExperimentKind::Randomized => "randomized",
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

/// Experiment parameters. Unset fields take per-experiment defaults in
/// [`ExperimentConfig::resolved`]; reports echo the resolved form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_ladder: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<f64>,
    #[serde(default, rename = "L", skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payoff: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crr: Option<CrrParams>,
    /// Depth of the driving walk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    /// Walk depths of the second Aldous family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub walk_ladder: Option<Vec<usize>>,
    /// Walk-family windows, in steps of the walk.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_steps: Option<Vec<usize>>,
    /// Time steps of the fixed-jump grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid_steps: Option<usize>,
    /// Number of random trees in the fixture set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixtures: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

fn need<T: Clone>(field: &Option<T>, name: &str) -> T {
    field.clone().unwrap_or_else(|| panic!("config field {name} not resolved"))
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentKind) -> Self {
        Self {
            experiment,
            n_ladder: None,
            horizon: None,
            bound: None,
            payoff: None,
            crr: None,
            depth: None,
            eps: None,
            delta: None,
            walk_ladder: None,
            delta_steps: None,
            grid_steps: None,
            fixtures: None,
            tolerance: None,
            seed: 0,
            output: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fills unset fields with the experiment's defaults and validates.
    pub fn resolved(&self) -> Result<Self> {
        use ExperimentKind::*;
        let mut c = self.clone();
        let kind = c.experiment;
        let fill = |slot: &mut Option<Vec<usize>>, v: &[usize]| {
            slot.get_or_insert_with(|| v.to_vec());
        };
        match kind {
            Counterexample => {
                fill(&mut c.n_ladder, &[4, 8, 16, 32]);
                c.bound.get_or_insert(0.5);
                c.payoff.get_or_insert_with(|| "capped-identity:2".into());
            }
            GridRefine => {
                fill(&mut c.n_ladder, &[0, 1, 2, 3, 4]);
                c.depth.get_or_insert(16);
                c.payoff.get_or_insert_with(|| "arctan".into());
                c.tolerance.get_or_insert(1e-12);
            }
            LemmaTn => {
                fill(&mut c.n_ladder, &[2, 3, 5, 9]);
                c.depth.get_or_insert(8);
                c.payoff.get_or_insert_with(|| "arctan".into());
            }
            Discretize => {
                fill(&mut c.n_ladder, &[0, 1, 2, 10]);
                c.depth.get_or_insert(10);
                c.payoff.get_or_insert_with(|| "arctan".into());
                c.tolerance.get_or_insert(1e-3);
            }
            Crr => {
                let mut ladder: Vec<usize> = (1..=12).collect();
                ladder.extend([25, 50, 100, 200]);
                fill(&mut c.n_ladder, &ladder);
                c.crr.get_or_insert(CrrParams { s0: 1.0, lambda: 0.1, sigma: 0.2, horizon: 1.0, steps: 0 });
                c.horizon.get_or_insert(c.crr.unwrap().horizon);
                c.payoff.get_or_insert_with(|| "capped-identity:1.2".into());
                c.tolerance.get_or_insert(3e-5);
            }
            Aldous => {
                fill(&mut c.n_ladder, &[4, 8, 16]);
                fill(&mut c.walk_ladder, &[4, 8, 12]);
                fill(&mut c.delta_steps, &[1, 2, 3, 4, 6]);
                c.grid_steps.get_or_insert(64);
                c.eps.get_or_insert_with(|| vec![0.5]);
                c.delta
                    .get_or_insert_with(|| [64.0, 32.0, 16.0, 8.0, 4.0, 2.0].iter().map(|d| 1.0 / d).collect());
            }
            Randomized => {
                fill(&mut c.n_ladder, &[2, 3, 5]);
                c.depth.get_or_insert(3);
                c.fixtures.get_or_insert(40);
                c.payoff.get_or_insert_with(|| "arctan".into());
                c.tolerance.get_or_insert(1e-10);
            }
        }
        let horizon = *c.horizon.get_or_insert(1.0);
        let bound = *c.bound.get_or_insert(horizon);
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("horizon must be > 0, got {horizon}")));
        }
        if !(0.0..=horizon + TIME_EPS).contains(&bound) {
            return Err(Error::Config(format!("need 0 <= L <= T, got L = {bound}, T = {horizon}")));
        }
        for (name, ladder) in [("n_ladder", &c.n_ladder), ("walk_ladder", &c.walk_ladder)] {
            if let Some(l) = ladder {
                if l.is_empty() || l.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config(format!("{name} must be nonempty and strictly increasing")));
                }
            }
        }
        if let Some(p) = &c.payoff {
            Payoff::parse(p).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(crr) = &mut c.crr {
            crr.horizon = horizon;
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Evaluate ladder members one after another instead of on the rayon pool.
    pub sequential: bool,
}

/// A numeric table; one CSV file per table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub version: String,
    pub sequential: bool,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub passed: bool,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

struct Builder {
    tables: Vec<Table>,
    checks: Vec<Check>,
}

impl Builder {
    fn new() -> Self {
        Self { tables: Vec::new(), checks: Vec::new() }
    }

    fn check(&mut self, name: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    fn finish(self, cfg: ExperimentConfig, opts: RunOptions, started: Instant) -> ExperimentReport {
        let passed = self.checks.iter().all(|c| c.passed);
        ExperimentReport {
            experiment: cfg.experiment,
            seed: cfg.seed,
            config: cfg,
            version: env!("CARGO_PKG_VERSION").to_string(),
            sequential: opts.sequential,
            tables: self.tables,
            checks: self.checks,
            passed,
            wall_time_secs: started.elapsed().as_secs_f64(),
        }
    }
}

/// SplitMix64 finalizer applied to `seed + stage · φ`.
pub fn stage_seed(seed: u64, stage: u64) -> u64 {
    let mut z = seed.wrapping_add(stage.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Caps the global rayon pool at `SNELL_LAB_THREADS` when set. Call once
/// before running experiments.
pub fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var("SNELL_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("SNELL_LAB_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in the process is kept
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    Ok(())
}

/// Order-preserving map over ladder members.
fn ladder_map<T, R, F>(opts: RunOptions, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if opts.sequential {
        items.iter().map(f).collect()
    } else {
        items.par_iter().map(f).collect()
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Parameter(m) | Error::Domain(m) => Error::Config(m),
        other => other,
    }
}

pub fn run(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    match cfg.experiment {
        ExperimentKind::Counterexample => run_counterexample(cfg, opts),
        ExperimentKind::GridRefine => run_grid_refine(cfg, opts),
        ExperimentKind::LemmaTn => run_lemma_tn(cfg, opts),
        ExperimentKind::Discretize => run_discretize(cfg, opts),
        ExperimentKind::Crr => run_crr(cfg, opts),
        ExperimentKind::Aldous => run_aldous(cfg, opts),
        ExperimentKind::Randomized => run_randomized(cfg, opts),
    }
}

fn expect_kind(cfg: &ExperimentConfig, kind: ExperimentKind) -> Result<ExperimentConfig> {
    if cfg.experiment != kind {
        return Err(Error::Config(format!("config is for {}, not {kind}", cfg.experiment)));
    }
    cfg.resolved()
}

/// `sup_{t ≤ L} γ(t, x_t)` for a deterministic step path, read off its jump
/// times directly.
fn deterministic_value(path: &StepPath, payoff: &Payoff, bound: f64) -> Result<f64> {
    let mut best = payoff.eval(0.0, path.eval(0.0)?);
    for &t in path.jump_times().iter().filter(|&&t| t <= bound + TIME_EPS) {
        best = best.max(payoff.eval(t, path.eval(t)?));
    }
    Ok(best)
}

pub fn run_counterexample(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::Counterexample)?;
    let payoff = Payoff::parse(&need(&cfg.payoff, "payoff"))?;
    let bound = need(&cfg.bound, "L");
    let ladder = need(&cfg.n_ladder, "n_ladder");

    let rows = ladder_map(opts, &ladder, |&n| {
        let space = counterexample_space(n).map_err(config_err)?;
        let (x, xn) = gen_counterexample(n)?;
        let gamma = snell_value(&space, "x", &payoff, bound)?.value;
        let gamma_n = snell_value(&space, "xn", &payoff, bound)?.value;
        Ok((n, gamma, gamma_n, deterministic_value(&x, &payoff, bound)?, deterministic_value(&xn, &payoff, bound)?))
    })?;

    let mut b = Builder::new();
    let mut table = Table::new("counterexample", &["n", "gamma", "gamma_n", "expected_gamma", "expected_gamma_n"]);
    for &(n, g, gn, eg, egn) in &rows {
        table.push(vec![n as f64, g, gn, eg, egn]);
        b.check(format!("gamma(L) exact, n={n}"), g == eg, format!("gamma = {g}, expected {eg}"));
        b.check(format!("gamma_n(L) exact, n={n}"), gn == egn, format!("gamma_n = {gn}, expected {egn}"));
    }
    b.tables.push(table);
    Ok(b.finish(cfg, opts, started))
}

/// `π^k` for a dyadic level: `{L}` at level 0, else `{j T / 2^k} ∩ [0, L]`.
fn dyadic_times(level: usize, horizon: f64, bound: f64) -> Result<Vec<f64>> {
    if level == 0 {
        return Ok(vec![bound]);
    }
    let m = 1usize << level;
    let pts: Vec<f64> =
        (0..=m).map(|j| horizon * j as f64 / m as f64).filter(|&t| t <= bound + TIME_EPS).collect();
    if !pts.iter().any(|&t| (t - bound).abs() <= TIME_EPS) {
        return Err(Error::Config(format!("L = {bound} is not on the dyadic grid of level {level}")));
    }
    Ok(pts)
}

pub fn run_grid_refine(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::GridRefine)?;
    let payoff = Payoff::parse(&need(&cfg.payoff, "payoff"))?;
    let (horizon, bound) = (need(&cfg.horizon, "horizon"), need(&cfg.bound, "L"));
    let ladder = need(&cfg.n_ladder, "n_ladder");
    let tol = need(&cfg.tolerance, "tolerance");
    let space = gen_random_walk(need(&cfg.depth, "depth"), horizon).map_err(config_err)?;

    let grids = ladder.iter().map(|&k| dyadic_times(k, horizon, bound)).collect::<Result<Vec<_>>>()?;
    let full = snell_value(&space, "B", &payoff, bound)?.value;
    let values = ladder_map(opts, &grids, |pi| Ok(gamma_pi(&space, "B", &payoff, pi, bound).map_err(config_err)?.value))?;

    let mut b = Builder::new();
    let mut table = Table::new("grid_refine", &["k", "points", "gamma_pi", "gamma"]);
    for ((k, pi), v) in ladder.iter().zip(&grids).zip(&values) {
        table.push(vec![*k as f64, pi.len() as f64, *v, full]);
    }
    b.tables.push(table);

    let worst = values.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    b.check(
        "gamma_pi nondecreasing along the ladder",
        values.windows(2).all(|w| w[1] - w[0] >= -1e-10),
        format!("smallest increment {worst}"),
    );
    let last = *values.last().unwrap();
    let finest = grids.last().unwrap();
    let last_idx = last_index(space.times(), bound)?;
    if finest.len() == last_idx + 1 {
        b.check("finest grid attains gamma exactly", last == full, format!("gamma_pi = {last}, gamma = {full}"));
    } else {
        b.check(
            "finest grid within tolerance of gamma",
            (full - last).abs() <= tol,
            format!("gap {}", full - last),
        );
    }
    if let Some(i) = ladder.iter().position(|&k| k == 0) {
        let filt = space.filtration("B")?;
        let x: Vec<f64> = (0..filt.num_leaves()).map(|l| filt.atom_value(last_idx, filt.atom_of(last_idx, l))).collect();
        let forced: f64 = filt.leaf_weights().iter().zip(&x).map(|(w, x)| w * payoff.eval(bound, *x)).sum();
        b.check(
            "pi = {L} gives E[gamma(L, X_L)]",
            (values[i] - forced).abs() <= 1e-12,
            format!("gamma_pi = {}, forced stop = {forced}", values[i]),
        );
    }
    Ok(b.finish(cfg, opts, started))
}

/// A discretization ladder of uniform grids with `n - 1` intervals each
/// (`n` points), checked to be nested and to contain `L`.
fn point_ladder(ladder: &[usize], horizon: f64, bound: f64, times: &TimeGrid) -> Result<Vec<TimeGrid>> {
    let grids = ladder
        .iter()
        .map(|&n| {
            if n < 2 {
                return Err(Error::Config(format!("a grid needs at least 2 points, got {n}")));
            }
            TimeGrid::uniform(horizon, n - 1)
        })
        .collect::<Result<Vec<_>>>()?;
    check_ladder(&grids, bound, times)?;
    Ok(grids)
}

fn check_ladder(grids: &[TimeGrid], bound: f64, times: &TimeGrid) -> Result<()> {
    for g in grids {
        if !g.is_subset_of(times) {
            return Err(Error::Config(format!("grid {:?} is not on the tree times", g.points())));
        }
    }
    if grids.windows(2).any(|w| !w[0].is_subset_of(&w[1])) {
        return Err(Error::Config("discretization grids are not nested".into()));
    }
    if let Some(g) = grids.iter().find(|g| g.len() > 1 && !g.contains(bound)) {
        return Err(Error::Config(format!("L = {bound} is missing from grid {:?}", g.points())));
    }
    Ok(())
}

/// One ladder member of the stopping-time approximation.
#[derive(Debug, Clone)]
pub struct LemmaRow {
    pub n: usize,
    pub observable: String,
    pub rule: StoppingRule,
    pub mismatch_prob: f64,
    pub payoff_gap: f64,
    pub fallback_prob: f64,
}

/// The earliest optimal stopping time of `source` on the finest grid and its
/// approximations adapted to each discretization of `source`.
pub fn lemma_tn_ladder(
    space: &CoupledSpace,
    source: &str,
    grids: &[TimeGrid],
    payoff: &Payoff,
    bound: f64,
) -> Result<(CoupledSpace, StoppingRule, Vec<LemmaRow>)> {
    let finest = grids.last().ok_or_else(|| Error::Config("empty ladder".into()))?;
    let allowed: Vec<f64> = finest.points().iter().copied().filter(|&t| t <= bound + TIME_EPS).collect();
    let tau = gamma_pi(space, source, payoff, &allowed, bound)
        .map_err(config_err)?
        .optimal_rule
        .expect("solver returns its rule");

    let mut full = space.clone();
    let mut names = Vec::with_capacity(grids.len());
    for g in grids {
        let (s, name) = discretize_process(&full, source, g)?;
        full = s;
        names.push(name);
    }
    let filt = full.filtration(source)?;
    let tau_times = tau.realized_times(&filt)?;
    let tau_idx = tau.realized_indices(&filt)?;
    let w = full.tree().leaf_weights().to_vec();
    let x = |name: &str, leaf: usize, k: usize| full.leaf_values(name, leaf).map(|v| v[k]);

    let mut rows = Vec::with_capacity(grids.len());
    for (g, name) in grids.iter().zip(&names) {
        let lt = lemma_tn(&full, &tau, name)?;
        let coarse = full.filtration(name)?;
        let idx = lt.rule.realized_indices(&coarse)?;
        let times = lt.rule.realized_times(&coarse)?;
        let mut mismatch = 0.0;
        let mut gap = 0.0;
        for leaf in 0..w.len() {
            if (times[leaf] - tau_times[leaf]).abs() > TIME_EPS {
                mismatch += w[leaf];
            }
            let a = payoff.eval(times[leaf], x(name, leaf, idx[leaf])?);
            let b = payoff.eval(tau_times[leaf], x(source, leaf, tau_idx[leaf])?);
            gap += w[leaf] * (a - b).abs();
        }
        rows.push(LemmaRow {
            n: g.len(),
            observable: name.clone(),
            rule: lt.rule,
            mismatch_prob: mismatch,
            payoff_gap: gap,
            fallback_prob: lt.fallback_prob,
        });
    }
    Ok((full, tau, rows))
}

fn bc_rows(space: &CoupledSpace, source: &str, tau: &StoppingRule, rows: &[LemmaRow]) -> Result<Vec<(usize, f64)>> {
    let filt = space.filtration(source)?;
    let sets = atom_sets(&filt, filt.depth())?;
    let seq: Vec<(usize, RandomizedStoppingRule)> =
        rows.iter().map(|r| (r.n, RandomizedStoppingRule::from_pure(&r.rule))).collect();
    bc_gap(space, &seq, &RandomizedStoppingRule::from_pure(tau), &TestFn::standard(), &sets)
}

pub fn run_lemma_tn(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::LemmaTn)?;
    let payoff = Payoff::parse(&need(&cfg.payoff, "payoff"))?;
    let (horizon, bound) = (need(&cfg.horizon, "horizon"), need(&cfg.bound, "L"));
    let space = gen_random_walk(need(&cfg.depth, "depth"), horizon).map_err(config_err)?;
    let grids = point_ladder(&need(&cfg.n_ladder, "n_ladder"), horizon, bound, space.times())?;

    let (full, tau, rows) = lemma_tn_ladder(&space, "B", &grids, &payoff, bound)?;
    let bc = bc_rows(&full, "B", &tau, &rows)?;

    let mut b = Builder::new();
    let mut table = Table::new("lemma_tn", &["n", "mismatch_prob", "payoff_gap", "bc_gap", "fallback_prob"]);
    for (r, (_, g)) in rows.iter().zip(&bc) {
        table.push(vec![r.n as f64, r.mismatch_prob, r.payoff_gap, *g, r.fallback_prob]);
    }
    trend_checks(&mut b, &table, &["mismatch_prob", "payoff_gap", "bc_gap"]);
    b.tables.push(table);
    Ok(b.finish(cfg, opts, started))
}

/// Nonincreasing along the ladder and exactly 0 at its end.
fn trend_checks(b: &mut Builder, table: &Table, columns: &[&str]) {
    for c in columns {
        let v = table.column(c).expect("known column");
        b.check(format!("{c} nonincreasing"), is_nonincreasing(v.iter().copied()), format!("{v:?}"));
        let last = *v.last().unwrap();
        b.check(format!("{c} zero at the finest grid"), last == 0.0, format!("final {last}"));
    }
}

pub fn run_discretize(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::Discretize)?;
    let payoff = Payoff::parse(&need(&cfg.payoff, "payoff"))?;
    let (horizon, bound) = (need(&cfg.horizon, "horizon"), need(&cfg.bound, "L"));
    let tol = need(&cfg.tolerance, "tolerance");
    let ladder = need(&cfg.n_ladder, "n_ladder");
    let space = gen_random_walk(need(&cfg.depth, "depth"), horizon).map_err(config_err)?;

    // n intervals; n = 0 is the trivial grid {0}
    let grids = ladder
        .iter()
        .map(|&n| if n == 0 { TimeGrid::new(vec![0.0]) } else { TimeGrid::uniform(horizon, n) })
        .collect::<Result<Vec<_>>>()?;
    check_ladder(&grids, bound, space.times())?;

    let reference = space.filtration("B")?;
    let gamma = snell_value(&space, "B", &payoff, bound)?.value;
    let members = ladder_map(opts, &grids, |g| {
        let (s, name) = discretize_process(&space, "B", g)?;
        let filt = s.filtration(&name)?;
        let value = snell_value(&s, &name, &payoff, bound)?.value;
        Ok((value, filt.is_coarser_than(&reference)))
    })?;

    let mut b = Builder::new();
    let mut table = Table::new("discretize", &["n", "gamma_n", "gamma", "gap"]);
    for (n, (v, nested)) in ladder.iter().zip(&members) {
        table.push(vec![*n as f64, *v, gamma, gamma - v]);
        b.check(format!("filtration of X^n inside that of X, n={n}"), *nested, "atom coarsening");
    }
    b.tables.push(table);

    let (finest_v, _) = *members.last().unwrap();
    let scale = if payoff.is_bounded() { payoff.bound() } else { 1.0 };
    b.check(
        "finest gap within tolerance",
        (gamma - finest_v).abs() <= tol * scale,
        format!("|gamma - gamma_n| = {}, allowed {}", (gamma - finest_v).abs(), tol * scale),
    );
    if grids.last().unwrap().len() == space.times().len() {
        b.check("finest grid reproduces gamma exactly", finest_v == gamma, format!("{finest_v} vs {gamma}"));
    }
    if let Some(i) = ladder.iter().position(|&n| n == 0) {
        let x0 = space.observable("B")?[space.tree().root()];
        let last = last_index(space.times(), bound)?;
        let expected = space.times().points()[..=last].iter().map(|&t| payoff.eval(t, x0)).fold(f64::NEG_INFINITY, f64::max);
        b.check(
            "trivial grid gives the best constant-path stop",
            members[i].0 == expected,
            format!("{} vs {expected}", members[i].0),
        );
    }
    Ok(b.finish(cfg, opts, started))
}

/// Depth up to which the CRR lattice is cross-checked against the full tree.
const CRR_TREE_MAX: usize = 12;

pub fn run_crr(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::Crr)?;
    let base = need(&cfg.crr, "crr");
    let capped = Payoff::parse(&need(&cfg.payoff, "payoff"))?;
    let tol = need(&cfg.tolerance, "tolerance");
    let bound = need(&cfg.bound, "L");
    let ladder = need(&cfg.n_ladder, "n_ladder");
    let identity = Payoff::identity();

    let rows = ladder_map(opts, &ladder, |&n| {
        let p = CrrParams { steps: n, ..base };
        p.validate().map_err(config_err)?;
        let v = crr_lattice_value(&p, &identity, bound)?;
        let c = crr_lattice_value(&p, &capped, bound)?;
        let tree = if n <= CRR_TREE_MAX {
            let space = gen_crr(&p)?;
            Some((snell_value(&space, "S", &identity, bound)?.value, snell_value(&space, "S", &capped, bound)?.value))
        } else {
            None
        };
        Ok((n, v, c, tree))
    })?;

    let (s0, lambda, horizon) = (base.s0, base.lambda, base.horizon);
    let limit = if lambda >= 0.0 { s0 * (lambda * horizon).exp() } else { s0 };
    let mut b = Builder::new();
    let mut main = Table::new("crr", &["n", "gamma_n", "closed_form", "abs_gap"]);
    let mut ident = Table::new("crr_identity", &["n", "gamma_n", "discrete_closed_form", "abs_err"]);
    let mut cap = Table::new("crr_capped", &["n", "gamma_n_capped"]);
    let mut worst_identity: f64 = 0.0;
    let mut worst_tree: f64 = 0.0;
    for &(n, v, c, tree) in &rows {
        let p = CrrParams { steps: n, ..base };
        let discrete = if lambda >= 0.0 { p.expected_terminal() } else { s0 };
        main.push(vec![n as f64, v, limit, (v - limit).abs()]);
        ident.push(vec![n as f64, v, discrete, (v - discrete).abs()]);
        cap.push(vec![n as f64, c]);
        worst_identity = worst_identity.max((v - discrete).abs());
        if let Some((tv, tc)) = tree {
            worst_tree = worst_tree.max((tv - v).abs()).max((tc - c).abs());
        }
    }
    b.check("DP equals the discrete closed form", worst_identity <= 1e-12, format!("max error {worst_identity}"));
    b.check("lattice equals the full tree", worst_tree <= 1e-12, format!("max difference {worst_tree}"));

    let gaps: Vec<(usize, f64)> = rows.iter().map(|&(n, v, ..)| (n, (v - limit).abs())).collect();
    let (n_last, g_last) = *gaps.last().unwrap();
    b.check(format!("gap at n={n_last} below {tol}"), g_last <= tol, format!("gap {g_last}"));
    for &(n, g) in &gaps {
        if let Some(&(_, g2)) = gaps.iter().find(|&&(m, _)| m == 2 * n) {
            if g > 1e-13 {
                let ratio = g2 / g;
                b.check(
                    format!("gap halves from n={n} to n={}", 2 * n),
                    (0.4..=0.6).contains(&ratio),
                    format!("ratio {ratio}"),
                );
            }
        }
    }
    b.tables.extend([main, ident, cap]);
    Ok(b.finish(cfg, opts, started))
}

pub fn run_aldous(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::Aldous)?;
    let (horizon, bound) = (need(&cfg.horizon, "horizon"), need(&cfg.bound, "L"));
    let jumps = need(&cfg.n_ladder, "n_ladder");
    let walks = need(&cfg.walk_ladder, "walk_ladder");
    let deltas = need(&cfg.delta, "delta");
    let eps_list = need(&cfg.eps, "eps");
    let steps = need(&cfg.delta_steps, "delta_steps");
    let grid = TimeGrid::uniform(horizon, need(&cfg.grid_steps, "grid_steps")).map_err(config_err)?;
    if let Some(d) = deltas.iter().find(|&&d| d < grid.mesh() - TIME_EPS) {
        return Err(Error::Config(format!("delta {d} is below the jump grid step {}", grid.mesh())));
    }
    if eps_list.iter().chain(&deltas).any(|&v| !(v > 0.0)) {
        return Err(Error::Config("eps and delta must be > 0".into()));
    }

    let jump_rows = ladder_map(opts, &jumps, |&n| {
        let at = horizon / 2.0 + horizon / n as f64;
        let x = StepPath::indicator_from(horizon, at).map_err(config_err)?;
        let space = deterministic_space_on(&grid, &[("x", &x)], format!("jump(n={n})")).map_err(config_err)?;
        let mut out = Vec::new();
        for &eps in &eps_list {
            for &d in &deltas {
                out.push(vec![n as f64, at, d, eps, aldous_sup(&space, "x", d, eps, bound)?]);
            }
        }
        Ok(out)
    })?;
    let walk_rows = ladder_map(opts, &walks, |&n| {
        let space = gen_random_walk(n, horizon).map_err(config_err)?;
        let eps = 3.0 * (horizon / n as f64).sqrt();
        steps
            .iter()
            .map(|&m| {
                let d = m as f64 * horizon / n as f64;
                Ok(vec![n as f64, m as f64, d, eps, aldous_sup(&space, "B", d, eps, bound)?])
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let mut b = Builder::new();
    let mut jt = Table::new("aldous_jump", &["n", "jump_time", "delta", "eps", "sup"]);
    for r in jump_rows.into_iter().flatten() {
        let (n, d, eps, sup) = (r[0], r[2], r[3], r[4]);
        // the jump has height one and sits before L
        if eps <= 1.0 && r[1] <= bound + TIME_EPS {
            b.check(format!("fixed jump defeats the criterion, n={n}, delta={d}, eps={eps}"), sup == 1.0, format!("sup {sup}"));
        }
        jt.push(r);
    }
    let mut wt = Table::new("aldous_walk", &["n", "delta_steps", "delta", "eps", "sup"]);
    for (n, rows) in walks.iter().zip(walk_rows) {
        let mut by_delta = rows.clone();
        by_delta.sort_by(|a, b| b[2].total_cmp(&a[2]));
        b.check(
            format!("walk sup nonincreasing as delta shrinks, n={n}"),
            is_nonincreasing(by_delta.iter().map(|r| r[4])),
            format!("{:?}", by_delta.iter().map(|r| r[4]).collect::<Vec<_>>()),
        );
        for r in rows {
            if r[1] == 1.0 {
                b.check(format!("one walk step moves less than 3 increments, n={n}"), r[4] == 0.0, format!("sup {}", r[4]));
            }
            wt.push(r);
        }
    }
    b.tables.extend([jt, wt]);
    Ok(b.finish(cfg, opts, started))
}

/// Stop probabilities searched per decision atom.
pub const PROB_GRID: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Largest number of free atoms for the exhaustive randomized-rule search.
pub const MAX_SEARCH_ATOMS: usize = 8;

/// Outcome of the exhaustive search over randomized rules on one space.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSearch {
    pub rules: usize,
    pub max_randomized: f64,
    pub max_pure: f64,
    /// Stop probabilities of the best pure corner, per free atom.
    pub best_pure: Vec<f64>,
}

/// Evaluates every randomized rule whose stop probabilities at indices
/// before the last lie in [`PROB_GRID`] (the last index always stops).
pub fn grid_search(filt: &Filtration, times: &[f64], payoff: &Payoff) -> Result<GridSearch> {
    let last = times.len() - 1;
    let offsets: Vec<usize> = (0..last)
        .scan(0, |acc, k| {
            let o = *acc;
            *acc += filt.num_atoms(k);
            Some(o)
        })
        .collect();
    let free: usize = (0..last).map(|k| filt.num_atoms(k)).sum();
    if free > MAX_SEARCH_ATOMS {
        return Err(Error::Config(format!("{free} free atoms exceed the search limit {MAX_SEARCH_ATOMS}")));
    }
    // per leaf: (weight, slot of each index before the last, gains)
    let leaves: Vec<(f64, Vec<usize>, Vec<f64>)> = (0..filt.num_leaves())
        .map(|l| {
            let slots = (0..last).map(|k| offsets[k] + filt.atom_of(k, l)).collect();
            let gains = (0..=last).map(|k| payoff.eval(times[k], filt.atom_value(k, filt.atom_of(k, l)))).collect();
            (filt.leaf_weights()[l], slots, gains)
        })
        .collect();
    let value = |p: &[f64]| -> f64 {
        leaves
            .iter()
            .map(|(w, slots, gains)| {
                let mut alive = 1.0;
                let mut acc = 0.0;
                for (s, g) in slots.iter().zip(gains) {
                    acc += alive * p[*s] * g;
                    alive *= 1.0 - p[*s];
                }
                w * (acc + alive * gains[last])
            })
            .sum()
    };

    let mut digits = vec![0usize; free];
    let mut probs = vec![0.0; free];
    let mut out = GridSearch { rules: 0, max_randomized: f64::NEG_INFINITY, max_pure: f64::NEG_INFINITY, best_pure: vec![] };
    loop {
        for (p, d) in probs.iter_mut().zip(&digits) {
            *p = PROB_GRID[*d];
        }
        let v = value(&probs);
        out.rules += 1;
        out.max_randomized = out.max_randomized.max(v);
        if digits.iter().all(|&d| d == 0 || d == PROB_GRID.len() - 1) && v > out.max_pure {
            out.max_pure = v;
            out.best_pure = probs.clone();
        }
        // odometer
        let mut i = 0;
        while i < free && digits[i] == PROB_GRID.len() - 1 {
            digits[i] = 0;
            i += 1;
        }
        if i == free {
            break;
        }
        digits[i] += 1;
    }
    Ok(out)
}

fn fixture_spaces(seed: u64, count: usize, max_depth: usize) -> Vec<CoupledSpace> {
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(seed, i as u64));
            let depth = 1 + i % max_depth;
            loop {
                let s = random_space(&mut rng, depth, 3, 8);
                let filt = s.filtration("X").expect("generated observable");
                if (0..depth).map(|k| filt.num_atoms(k)).sum::<usize>() <= MAX_SEARCH_ATOMS {
                    let mut s = s;
                    s.set_label(format!("fixture-{i}(depth={depth})"));
                    return s;
                }
            }
        })
        .collect()
}

pub fn run_randomized(cfg: &ExperimentConfig, opts: RunOptions) -> Result<ExperimentReport> {
    let started = Instant::now();
    let cfg = expect_kind(cfg, ExperimentKind::Randomized)?;
    let payoff = Payoff::parse(&need(&cfg.payoff, "payoff"))?;
    let depth = need(&cfg.depth, "depth");
    let tol = need(&cfg.tolerance, "tolerance");
    if !(1..=4).contains(&depth) {
        return Err(Error::Config(format!("grid search needs depth 1..=4, got {depth}")));
    }
    let spaces = fixture_spaces(cfg.seed, need(&cfg.fixtures, "fixtures"), depth);

    let results = ladder_map(opts, &spaces, |space| {
        let filt = space.filtration("X")?;
        let times = space.times().points();
        let search = grid_search(&filt, times, &payoff)?;
        let snell = snell_value(space, "X", &payoff, space.tree().horizon())?.value;
        // the best pure corner as an explicit rule
        let last = times.len() - 1;
        let mut offset = 0;
        let mut stop: Vec<Vec<bool>> = Vec::new();
        for k in 0..last {
            stop.push(search.best_pure[offset..offset + filt.num_atoms(k)].iter().map(|&p| p == 1.0).collect());
            offset += filt.num_atoms(k);
        }
        let rule = StoppingRule::from_fn(&filt, space.times(), space.tree().horizon(), |k, a| k < last && stop[k][a])?;
        let embedded = stopped_value(space, "X", &payoff, &rule)?;
        Ok((filt.depth(), filt.num_leaves(), search, snell, embedded))
    })?;

    let mut b = Builder::new();
    let mut table =
        Table::new("randomized", &["fixture", "depth", "leaves", "rules", "snell", "max_randomized", "max_pure", "excess"]);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_pure: f64 = 0.0;
    let mut worst_embed: f64 = 0.0;
    for (i, (d, leaves, s, snell, embedded)) in results.iter().enumerate() {
        let excess = s.max_randomized - snell;
        worst_excess = worst_excess.max(excess);
        worst_pure = worst_pure.max((s.max_pure - snell).abs());
        worst_embed = worst_embed.max((embedded - s.max_pure).abs());
        table.push(vec![i as f64, *d as f64, *leaves as f64, s.rules as f64, *snell, s.max_randomized, s.max_pure, excess]);
    }
    b.check("randomized rules never beat gamma", worst_excess <= tol, format!("largest excess {worst_excess}"));
    b.check("a pure corner attains gamma", worst_pure <= tol, format!("largest gap {worst_pure}"));
    b.check("pure corner equals its stopped value", worst_embed <= 1e-12, format!("largest gap {worst_embed}"));
    b.tables.push(table);

    // Baxter–Chacon gaps of the approximating pure rules on a depth-4 walk
    let walk = gen_random_walk(4, 1.0)?;
    let grids = point_ladder(&need(&cfg.n_ladder, "n_ladder"), 1.0, 1.0, walk.times())?;
    let (full, tau, rows) = lemma_tn_ladder(&walk, "B", &grids, &payoff, 1.0)?;
    let bc = bc_rows(&full, "B", &tau, &rows)?;
    let constant: Vec<(usize, RandomizedStoppingRule)> =
        rows.iter().map(|r| (r.n, RandomizedStoppingRule::from_pure(&tau))).collect();
    let filt = full.filtration("B")?;
    let flat = bc_gap(&full, &constant, &RandomizedStoppingRule::from_pure(&tau), &TestFn::standard(), &atom_sets(&filt, filt.depth())?)?;
    let mut bt = Table::new("bc_gap", &["n", "bc_gap", "constant_bc_gap"]);
    for ((n, g), (_, c)) in bc.iter().zip(&flat) {
        bt.push(vec![*n as f64, *g, *c]);
    }
    b.check("constant sequence has zero gap", flat.iter().all(|r| r.1 == 0.0), format!("{flat:?}"));
    b.check(
        "approximating rules converge in the Baxter–Chacon sense",
        is_nonincreasing(bc.iter().map(|r| r.1)) && bc.last().unwrap().1 == 0.0,
        format!("{bc:?}"),
    );
    b.tables.push(bt);
    Ok(b.finish(cfg, opts, started))
}
