//! Generators for the example processes: CRR price trees, scaled random
//! walks, grid discretizations of an observable, and deterministic
//! single-scenario spaces (including the fixed-jump counterexample pair).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{CoupledSpace, ScenarioTree};
use crate::steppath::{StepPath, TimeGrid, TIME_EPS};

/// Parameters of the linear CRR recursion
/// `S_{k+1} = S_k (1 + λ T/n + σ ΔB_{k+1})` with `ΔB = ±√(T/n)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrrParams {
    pub s0: f64,
    /// Drift per unit time (excess return over the rate).
    pub lambda: f64,
    pub sigma: f64,
    pub horizon: f64,
    /// Ignored by experiments that sweep the step count.
    #[serde(default)]
    pub steps: usize,
}

impl CrrParams {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Parameter("CRR needs at least one step".into()));
        }
        if !(self.s0 > 0.0 && self.sigma > 0.0 && self.horizon > 0.0) {
            return Err(Error::Parameter("CRR needs s0 > 0, sigma > 0 and T > 0".into()));
        }
        let (up, down) = self.factors();
        if !(up > 0.0 && down > 0.0) {
            return Err(Error::Parameter(format!(
                "price factors must stay positive, got up = {up}, down = {down}"
            )));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Size of one walk increment, `√(T/n)`.
    pub fn increment(&self) -> f64 {
        self.dt().sqrt()
    }

    /// One-step growth factors `(1 + λT/n + σ√(T/n), 1 + λT/n − σ√(T/n))`.
    pub fn factors(&self) -> (f64, f64) {
        let drift = 1.0 + self.lambda * self.dt();
        let shock = self.sigma * self.increment();
        (drift + shock, drift - shock)
    }

    /// `s0 · (1 + λT/n)^n`, the expected terminal price.
    pub fn expected_terminal(&self) -> f64 {
        self.s0 * (1.0 + self.lambda * self.dt()).powi(self.steps as i32)
    }
}

fn binary_tree(horizon: f64, steps: usize) -> Result<ScenarioTree> {
    ScenarioTree::uniform(TimeGrid::uniform(horizon, steps)?, 2)
}

/// Sign of the driver step into `node`: the first child of every node is the
/// up move.
fn step_sign(tree: &ScenarioTree, node: usize) -> f64 {
    match tree.parent(node) {
        Some(p) if tree.children(p)[0] == node => 1.0,
        Some(_) => -1.0,
        None => 0.0,
    }
}

/// Full binary CRR tree with observables `"B"` (scaled walk) and `"S"` (price).
pub fn gen_crr(params: &CrrParams) -> Result<CoupledSpace> {
    params.validate()?;
    let tree = binary_tree(params.horizon, params.steps)?;
    let h = params.increment();
    let (up, down) = params.factors();
    let mut b = vec![0.0; tree.num_nodes()];
    let mut s = vec![params.s0; tree.num_nodes()];
    // parents precede children in id order for uniform trees
    for node in 0..tree.num_nodes() {
        if let Some(p) = tree.parent(node) {
            let sign = step_sign(&tree, node);
            b[node] = b[p] + sign * h;
            s[node] = s[p] * if sign > 0.0 { up } else { down };
        }
    }
    let label = format!(
        "crr(n={},s0={},lambda={},sigma={},T={})",
        params.steps, params.s0, params.lambda, params.sigma, params.horizon
    );
    CoupledSpace::new(tree, label)
        .with_observable("B", b)?
        .with_observable("S", s)
}

/// Scaled symmetric walk `B_{kT/n} = √(T/n) Σ_{i≤k} X_i` as observable `"B"`.
pub fn gen_random_walk(steps: usize, horizon: f64) -> Result<CoupledSpace> {
    if steps == 0 {
        return Err(Error::Parameter("walk needs at least one step".into()));
    }
    let tree = binary_tree(horizon, steps)?;
    let h = (horizon / steps as f64).sqrt();
    let mut b = vec![0.0; tree.num_nodes()];
    for node in 0..tree.num_nodes() {
        if let Some(p) = tree.parent(node) {
            b[node] = b[p] + step_sign(&tree, node) * h;
        }
    }
    CoupledSpace::new(tree, format!("walk(n={steps},T={horizon})")).with_observable("B", b)
}

/// Name under which [`discretize_process`] stores the discretized observable.
pub fn discretized_name(source: &str, grid: &TimeGrid) -> String {
    let pts: Vec<String> = grid.points().iter().map(|t| t.to_string()).collect();
    format!("{source}@{}", pts.join(","))
}

/// Adds the observable that holds `source` at the last grid point not after
/// the current time. Returns the extended space and the new observable name.
pub fn discretize_process(
    space: &CoupledSpace,
    source: &str,
    grid: &TimeGrid,
) -> Result<(CoupledSpace, String)> {
    let values = space.observable(source)?;
    let times = space.times();
    if !grid.is_subset_of(times) {
        return Err(Error::Parameter(format!(
            "grid {:?} is not a subset of the tree times",
            grid.points()
        )));
    }
    let tree = space.tree();
    // level of the sampling grid point for each tree level
    let sample_level: Vec<usize> = times
        .points()
        .iter()
        .map(|&t| {
            let g = grid.points()[grid.floor_index(t).expect("grid starts at 0")];
            times.index_of(g).expect("grid is a subset of the tree times")
        })
        .collect();
    let out = (0..tree.num_nodes())
        .map(|node| {
            let mut anc = node;
            while tree.level(anc) > sample_level[tree.level(node)] {
                anc = tree.parent(anc).expect("levels decrease towards the root");
            }
            values[anc]
        })
        .collect();
    let name = discretized_name(source, grid);
    let space = space.clone().with_observable(name.clone(), out)?;
    Ok((space, name))
}

/// `x = 1_{[1/2, 1]}` and `xⁿ = 1_{[1/2 + 1/n, 1]}` on `[0, 1]`.
pub fn gen_counterexample(n: usize) -> Result<(StepPath, StepPath)> {
    if n < 3 {
        return Err(Error::Parameter(format!("counterexample needs n >= 3, got {n}")));
    }
    let x = StepPath::indicator_from(1.0, 0.5)?;
    let xn = StepPath::indicator_from(1.0, 0.5 + 1.0 / n as f64)?;
    Ok((x, xn))
}

/// A single-scenario (weight one) space on `grid` carrying each path sampled
/// at the grid points. All paths must share the grid's horizon and jump only
/// at grid points.
pub fn deterministic_space_on(
    grid: &TimeGrid,
    paths: &[(&str, &StepPath)],
    label: impl Into<String>,
) -> Result<CoupledSpace> {
    let len = grid.len();
    let tree = ScenarioTree::new(
        grid.clone(),
        (0..len).map(|i| i.checked_sub(1)).collect(),
        vec![1.0; len],
    )?;
    let mut space = CoupledSpace::new(tree, label);
    for (name, path) in paths {
        if (path.horizon() - grid.last()).abs() > TIME_EPS {
            return Err(Error::Parameter(format!(
                "path {name} has horizon {} but the grid ends at {}",
                path.horizon(),
                grid.last()
            )));
        }
        if let Some(t) = path.jump_times().iter().find(|&&t| !grid.contains(t)) {
            return Err(Error::Parameter(format!("path {name} jumps at {t}, off the grid")));
        }
        let values = grid.points().iter().map(|&t| path.eval(t)).collect::<Result<_>>()?;
        space.insert_observable(*name, values)?;
    }
    Ok(space)
}

/// A single-scenario space on the union of the paths' jump times and their
/// common horizon.
pub fn deterministic_space(paths: &[(&str, &StepPath)], label: impl Into<String>) -> Result<CoupledSpace> {
    let horizon = paths
        .first()
        .ok_or_else(|| Error::Parameter("need at least one path".into()))?
        .1
        .horizon();
    let mut times: Vec<f64> = paths
        .iter()
        .flat_map(|(_, p)| p.jump_times().iter().copied())
        .chain([horizon])
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    deterministic_space_on(&TimeGrid::new(times)?, paths, label)
}

/// The counterexample pair as observables `"x"` and `"xn"` of one
/// single-scenario space.
pub fn counterexample_space(n: usize) -> Result<CoupledSpace> {
    let (x, xn) = gen_counterexample(n)?;
    deterministic_space(&[("x", &x), ("xn", &xn)], format!("counterexample(n={n})"))
}
