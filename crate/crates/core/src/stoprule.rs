//! Adapted stopping rules on scenario spaces.
//!
//! A rule is a table of stop/continue decisions indexed by `(time index,
//! atom)` of one observable's [`Filtration`], so adaptedness holds by
//! construction. Only time indices `k` with `t_k <= L` carry decisions; every
//! scenario still running at the last such index stops there.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{indicator, CoupledSpace, Filtration, LeafId};
use crate::steppath::{TimeGrid, TIME_EPS};

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingRule {
    observable: String,
    bound: f64,
    times: Vec<f64>,
    shape: Vec<usize>,
    stop: Vec<Vec<bool>>,
}

/// Index of the last grid time `<= bound`.
pub fn last_index(times: &TimeGrid, bound: f64) -> Result<usize> {
    if !(bound >= 0.0) {
        return Err(Error::Parameter(format!("bound L must be >= 0, got {bound}")));
    }
    times
        .floor_index(bound)
        .ok_or_else(|| Error::Parameter(format!("no grid time <= L = {bound}")))
}

fn check_shape(observable: &str, shape: &[usize], filt: &Filtration) -> Result<()> {
    if filt.observable() != observable {
        return Err(Error::Contract(format!(
            "rule is adapted to {observable:?}, not {:?}",
            filt.observable()
        )));
    }
    if filt.shape() != shape {
        return Err(Error::Contract(format!(
            "rule was built on a different filtration of {observable:?}"
        )));
    }
    Ok(())
}

impl StoppingRule {
    /// Builds a rule from a decision function on `(k, atom)`. The decision at
    /// the last index is forced to stop.
    pub fn from_fn(
        filt: &Filtration,
        times: &TimeGrid,
        bound: f64,
        mut decide: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let last = last_index(times, bound)?;
        if last > filt.depth() {
            return Err(Error::Parameter("time grid longer than the filtration".into()));
        }
        let shape = filt.shape();
        let stop = (0..=last)
            .map(|k| (0..shape[k]).map(|a| k == last || decide(k, a)).collect())
            .collect();
        Ok(Self {
            observable: filt.observable().to_string(),
            bound,
            times: times.points()[..=last].to_vec(),
            shape,
            stop,
        })
    }

    pub fn stop_at_root(filt: &Filtration, times: &TimeGrid, bound: f64) -> Result<Self> {
        Self::from_fn(filt, times, bound, |_, _| true)
    }

    /// Never stops early: every scenario stops at the last grid time `<= L`.
    pub fn never_stop(filt: &Filtration, times: &TimeGrid, bound: f64) -> Result<Self> {
        Self::from_fn(filt, times, bound, |_, _| false)
    }

    /// Builds the rule realizing the given stopping time per leaf. Fails if a
    /// time is not on the grid, exceeds `L`, or is not a stopping time of the
    /// observable's filtration.
    pub fn from_times(
        space: &CoupledSpace,
        observable: &str,
        bound: f64,
        times_per_leaf: &[f64],
    ) -> Result<Self> {
        let filt = space.filtration(observable)?;
        let grid = space.times();
        let last = last_index(grid, bound)?;
        if times_per_leaf.len() != filt.num_leaves() {
            return Err(Error::Parameter("need one stopping time per leaf".into()));
        }
        let idx = times_per_leaf
            .iter()
            .map(|&t| match grid.index_of(t) {
                Some(k) if k <= last => Ok(k),
                Some(_) => Err(Error::Parameter(format!("stopping time {t} exceeds L = {bound}"))),
                None => Err(Error::Parameter(format!("stopping time {t} is not grid-valued"))),
            })
            .collect::<Result<Vec<_>>>()?;
        // {τ = t_k} must be a union of atoms at k: every atom at k is either
        // entirely stopped at k or entirely still running
        let mut stop: Vec<Vec<Option<bool>>> =
            (0..=last).map(|k| vec![None; filt.num_atoms(k)]).collect();
        for (leaf, &r) in idx.iter().enumerate() {
            for (k, layer) in stop.iter_mut().enumerate().take(r + 1) {
                let a = filt.atom_of(k, leaf);
                let here = k == r;
                match layer[a] {
                    Some(prev) if prev != here => {
                        return Err(Error::Contract(format!(
                            "stopping time is not adapted to {observable:?} at index {k}"
                        )))
                    }
                    _ => layer[a] = Some(here),
                }
            }
        }
        Self::from_fn(&filt, grid, bound, |k, a| stop[k][a].unwrap_or(false))
    }

    pub fn observable(&self) -> &str {
        &self.observable
    }

    /// The bound `L`.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn last_index(&self) -> usize {
        self.times.len() - 1
    }

    /// Grid times `t_0..=t_last` the rule may stop at.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn stops(&self, k: usize, atom: usize) -> bool {
        self.stop[k][atom]
    }

    pub fn check_filtration(&self, filt: &Filtration) -> Result<()> {
        check_shape(&self.observable, &self.shape, filt)
    }

    /// Time index at which the rule stops on every leaf.
    pub fn realized_indices(&self, filt: &Filtration) -> Result<Vec<usize>> {
        self.check_filtration(filt)?;
        let last = self.last_index();
        Ok((0..filt.num_leaves())
            .map(|leaf| {
                (0..=last)
                    .find(|&k| self.stop[k][filt.atom_of(k, leaf)])
                    .unwrap_or(last)
            })
            .collect())
    }

    pub fn realized_time(&self, filt: &Filtration, leaf: LeafId) -> Result<f64> {
        Ok(self.times[self.realized_indices(filt)?[leaf]])
    }

    pub fn realized_times(&self, filt: &Filtration) -> Result<Vec<f64>> {
        Ok(self.realized_indices(filt)?.into_iter().map(|k| self.times[k]).collect())
    }

    pub fn to_file(&self) -> RuleFile {
        let decisions = self
            .stop
            .iter()
            .enumerate()
            .flat_map(|(k, layer)| {
                layer.iter().enumerate().map(move |(atom, &s)| DecisionRecord {
                    k,
                    atom,
                    action: Some(if s { Action::Stop } else { Action::Continue }),
                    p: None,
                })
            })
            .collect();
        RuleFile { observable: self.observable.clone(), bound: self.bound, decisions }
    }

    /// Reads a pure rule; atoms without a record continue.
    pub fn from_file(file: &RuleFile, space: &CoupledSpace) -> Result<Self> {
        let filt = space.filtration(&file.observable)?;
        let last = last_index(space.times(), file.bound)?;
        let mut stop: Vec<Vec<bool>> = (0..=last).map(|k| vec![false; filt.num_atoms(k)]).collect();
        for d in &file.decisions {
            let slot = stop
                .get_mut(d.k)
                .and_then(|l| l.get_mut(d.atom))
                .ok_or_else(|| Error::Parameter(format!("no atom {} at index {}", d.atom, d.k)))?;
            *slot = match (d.action, d.p) {
                (Some(a), _) => a == Action::Stop,
                (None, Some(p)) if p == 0.0 || p == 1.0 => p == 1.0,
                _ => {
                    return Err(Error::Parameter(
                        "pure rules need action stop/continue (or p in {0, 1})".into(),
                    ))
                }
            };
        }
        Self::from_fn(&filt, space.times(), file.bound, |k, a| stop[k][a])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Action {
    Stop,
    Continue,
}

/// On-disk form of a (pure or randomized) rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFile {
    pub observable: String,
    #[serde(rename = "L")]
    pub bound: f64,
    pub decisions: Vec<DecisionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub k: usize,
    pub atom: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<Action>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

/// Behavioral randomized rule: at each `(k, atom)` a scenario still running
/// stops with probability `stop_prob[k][atom]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomizedStoppingRule {
    observable: String,
    bound: f64,
    times: Vec<f64>,
    shape: Vec<usize>,
    stop_prob: Vec<Vec<f64>>,
}

impl RandomizedStoppingRule {
    /// Probabilities are taken as given (also at the last index, where they
    /// must equal one for the rule to be evaluable).
    pub fn from_fn(
        filt: &Filtration,
        times: &TimeGrid,
        bound: f64,
        mut prob: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let last = last_index(times, bound)?;
        if last > filt.depth() {
            return Err(Error::Parameter("time grid longer than the filtration".into()));
        }
        let shape = filt.shape();
        let mut stop_prob = Vec::with_capacity(last + 1);
        for (k, &n) in shape[..=last].iter().enumerate() {
            let mut layer = Vec::with_capacity(n);
            for a in 0..n {
                let p = prob(k, a);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Domain(format!("stop probability {p} at ({k}, {a})")));
                }
                layer.push(p);
            }
            stop_prob.push(layer);
        }
        Ok(Self {
            observable: filt.observable().to_string(),
            bound,
            times: times.points()[..=last].to_vec(),
            shape,
            stop_prob,
        })
    }

    /// Embeds a pure rule (probabilities in `{0, 1}`).
    pub fn from_pure(rule: &StoppingRule) -> Self {
        Self {
            observable: rule.observable.clone(),
            bound: rule.bound,
            times: rule.times.clone(),
            shape: rule.shape.clone(),
            stop_prob: rule
                .stop
                .iter()
                .map(|l| l.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect())
                .collect(),
        }
    }

    pub fn observable(&self) -> &str {
        &self.observable
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn last_index(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn stop_prob(&self, k: usize, atom: usize) -> f64 {
        self.stop_prob[k][atom]
    }

    pub fn check_filtration(&self, filt: &Filtration) -> Result<()> {
        check_shape(&self.observable, &self.shape, filt)
    }

    /// `ℙ[stop at k | leaf]` for `k = 0..=last`. Fails if the probabilities
    /// along some scenario do not reach one by the last index.
    pub fn stop_distribution(&self, filt: &Filtration) -> Result<Vec<Vec<f64>>> {
        self.check_filtration(filt)?;
        let last = self.last_index();
        (0..filt.num_leaves())
            .map(|leaf| {
                let mut alive = 1.0;
                let mut dist = Vec::with_capacity(last + 1);
                for k in 0..=last {
                    let p = self.stop_prob[k][filt.atom_of(k, leaf)];
                    dist.push(alive * p);
                    alive *= 1.0 - p;
                }
                if alive > 1e-12 {
                    return Err(Error::Contract(format!(
                        "stop probability of leaf {leaf} only reaches {} by L",
                        1.0 - alive
                    )));
                }
                Ok(dist)
            })
            .collect()
    }

    pub fn to_file(&self) -> RuleFile {
        let decisions = self
            .stop_prob
            .iter()
            .enumerate()
            .flat_map(|(k, layer)| {
                layer.iter().enumerate().map(move |(atom, &p)| DecisionRecord {
                    k,
                    atom,
                    action: None,
                    p: Some(p),
                })
            })
            .collect();
        RuleFile { observable: self.observable.clone(), bound: self.bound, decisions }
    }

    /// Reads a randomized rule; atoms without a record have probability 0,
    /// except at the last index where the default is 1.
    pub fn from_file(file: &RuleFile, space: &CoupledSpace) -> Result<Self> {
        let filt = space.filtration(&file.observable)?;
        let last = last_index(space.times(), file.bound)?;
        let mut probs: Vec<Vec<f64>> = (0..=last)
            .map(|k| vec![if k == last { 1.0 } else { 0.0 }; filt.num_atoms(k)])
            .collect();
        for d in &file.decisions {
            let slot = probs
                .get_mut(d.k)
                .and_then(|l| l.get_mut(d.atom))
                .ok_or_else(|| Error::Parameter(format!("no atom {} at index {}", d.atom, d.k)))?;
            *slot = match (d.p, d.action) {
                (Some(p), _) => p,
                (None, Some(a)) => if a == Action::Stop { 1.0 } else { 0.0 },
                (None, None) => return Err(Error::Parameter("decision needs action or p".into())),
            };
        }
        Self::from_fn(&filt, space.times(), file.bound, |k, a| probs[k][a])
    }
}

/// Cumulative stop probability `F_k = 1 − Π_{j≤k} (1 − p_j)` per atom.
fn cumulative_stop(rule: &RandomizedStoppingRule, filt: &Filtration) -> Vec<Vec<f64>> {
    let mut alive: Vec<Vec<f64>> = Vec::with_capacity(rule.last_index() + 1);
    for k in 0..=rule.last_index() {
        let layer = (0..filt.num_atoms(k))
            .map(|a| {
                let before = if k == 0 { 1.0 } else { alive[k - 1][filt.atom_parent(k, a)] };
                before * (1.0 - rule.stop_prob[k][a])
            })
            .collect();
        alive.push(layer);
    }
    alive
        .into_iter()
        .map(|l| l.into_iter().map(|s| 1.0 - s).collect())
        .collect()
}

/// The pure rule `τ_v`: stop at the first index where the cumulative stop
/// probability is positive and at least `v`.
pub fn sample_randomized(
    rule: &RandomizedStoppingRule,
    filt: &Filtration,
    v: f64,
) -> Result<StoppingRule> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Domain(format!("v = {v} outside [0, 1]")));
    }
    rule.check_filtration(filt)?;
    let cum = cumulative_stop(rule, filt);
    let grid = TimeGrid::new(rule.times.clone())?;
    StoppingRule::from_fn(filt, &grid, rule.bound, |k, a| cum[k][a] > 0.0 && cum[k][a] >= v)
}

/// Result of the approximation of a stopping time by one adapted to a
/// coarser observable.
#[derive(Debug, Clone)]
pub struct LemmaTn {
    pub rule: StoppingRule,
    /// Probability of the scenarios whose selection set was empty (and which
    /// therefore stop at the largest value of the original time).
    pub fallback_prob: f64,
}

/// `τⁿ(ω) = min { t_j : E[1{τ = t_j} | F^target_{t_j}](ω) > 1/2 }`, or the
/// largest value of `τ` when no index is selected.
pub fn lemma_tn(space: &CoupledSpace, tau: &StoppingRule, target: &str) -> Result<LemmaTn> {
    let source = space.filtration(tau.observable())?;
    let realized = tau.realized_indices(&source)?;
    let coarse = space.filtration(target)?;
    let n = source.num_leaves();

    let mut values: Vec<usize> = realized.clone();
    values.sort_unstable();
    values.dedup();
    let max_index = *values.last().expect("at least one leaf");

    let mut selected: Vec<Option<Vec<bool>>> = vec![None; tau.last_index() + 1];
    for &j in &values {
        let leaves: Vec<LeafId> = (0..n).filter(|&l| realized[l] == j).collect();
        let means = coarse.atom_means(&indicator(n, &leaves)?, j)?;
        selected[j] = Some(means.iter().map(|&m| m > 0.5).collect());
    }

    let grid = TimeGrid::new(tau.times().to_vec())?;
    let rule = StoppingRule::from_fn(&coarse, &grid, tau.bound(), |k, a| {
        k == max_index || selected[k].as_ref().is_some_and(|s| s[a])
    })?;

    let fallback_prob = (0..n)
        .filter(|&leaf| {
            !values
                .iter()
                .any(|&j| selected[j].as_ref().unwrap()[coarse.atom_of(j, leaf)])
        })
        .map(|leaf| coarse.leaf_weights()[leaf])
        .fold(0.0, |a, b| a + b);
    Ok(LemmaTn { rule, fallback_prob })
}

/// Rounds the realized time of `tau` up to the next point of `grid`.
pub fn grid_round_up(space: &CoupledSpace, tau: &StoppingRule, grid: &TimeGrid) -> Result<StoppingRule> {
    let times = space.times();
    if !grid.is_subset_of(times) {
        return Err(Error::Parameter("rounding grid must be a subset of the tree times".into()));
    }
    if !grid.contains(tau.bound()) {
        return Err(Error::Parameter(format!(
            "rounding grid must contain L = {}",
            tau.bound()
        )));
    }
    let filt = space.filtration(tau.observable())?;
    let realized = tau.realized_indices(&filt)?;
    // representative leaf of every atom
    let last = tau.last_index();
    let mut rep: Vec<Vec<usize>> = (0..=last).map(|k| vec![usize::MAX; filt.num_atoms(k)]).collect();
    for leaf in (0..filt.num_leaves()).rev() {
        for (k, layer) in rep.iter_mut().enumerate() {
            layer[filt.atom_of(k, leaf)] = leaf;
        }
    }
    let on_grid: Vec<bool> = times.points()[..=last]
        .iter()
        .map(|&t| grid.contains(t))
        .collect();
    let tgrid = TimeGrid::new(tau.times().to_vec())?;
    StoppingRule::from_fn(&filt, &tgrid, tau.bound(), |k, a| {
        on_grid[k] && realized[rep[k][a]] <= k
    })
}

/// Whether two rules realize the same stopping time on every leaf.
pub fn same_times(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TIME_EPS)
}
