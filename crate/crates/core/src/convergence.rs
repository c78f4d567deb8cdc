//! Finite-scale estimators for the convergence notions in play: paths in
//! probability (J1), σ-fields, weak convergence of filtrations and
//! Baxter–Chacon convergence of randomized stopping times.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{indicator, CoupledSpace, Filtration, LeafId};
use crate::steppath::{skorokhod_distance, StepPath};
use crate::stoprule::RandomizedStoppingRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    PathsInProbability,
    SigmaField,
    FiltrationWeak,
    BaxterChacon,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::PathsInProbability => "paths-in-probability",
            Mode::SigmaField => "sigma-field",
            Mode::FiltrationWeak => "filtration-weak",
            Mode::BaxterChacon => "baxter-chacon",
        })
    }
}

/// Gaps along a ladder of approximations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub mode: Mode,
    pub eps: Option<f64>,
    /// Descriptions of the test family used.
    pub tests: Vec<String>,
    pub rows: Vec<(usize, f64)>,
    /// Gaps never increase along the ladder (up to 1e-12).
    pub monotone: bool,
}

impl ConvergenceReport {
    pub fn new(mode: Mode, eps: Option<f64>, tests: Vec<String>, rows: Vec<(usize, f64)>) -> Self {
        let monotone = is_nonincreasing(rows.iter().map(|r| r.1));
        Self { mode, eps, tests, rows, monotone }
    }

    pub fn final_gap(&self) -> Option<f64> {
        self.rows.last().map(|r| r.1)
    }

    /// Rows as `mode,n,eps,gap` CSV records (no header).
    pub fn csv_records(&self) -> Vec<[String; 4]> {
        let eps = self.eps.map(|e| e.to_string()).unwrap_or_default();
        self.rows
            .iter()
            .map(|(n, g)| [self.mode.to_string(), n.to_string(), eps.clone(), g.to_string()])
            .collect()
    }
}

pub fn is_nonincreasing(values: impl IntoIterator<Item = f64>) -> bool {
    let mut prev = f64::INFINITY;
    for v in values {
        if v > prev + 1e-12 {
            return false;
        }
        prev = v;
    }
    true
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("eps must be > 0, got {eps}")))
    }
}

/// Probability of the leaves where `hit` holds.
fn prob_where(space: &CoupledSpace, mut hit: impl FnMut(LeafId) -> Result<bool>) -> Result<f64> {
    let mut p = 0.0;
    for (leaf, w) in space.tree().leaf_weights().iter().enumerate() {
        if hit(leaf)? {
            p += w;
        }
    }
    Ok(p.min(1.0))
}

/// `ℙ[d_J1(coarse, fine) ≥ eps]` over the leaves.
pub fn paths_in_prob_gap(space: &CoupledSpace, fine: &str, coarse: &str, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    space.observable(fine)?;
    space.observable(coarse)?;
    prob_where(space, |leaf| {
        let d = skorokhod_distance(&space.leaf_path(coarse, leaf)?, &space.leaf_path(fine, leaf)?)?;
        Ok(d >= eps)
    })
}

/// `ℙ[|E[1_A | F_k] − 1_A| ≥ eps]` for the observable's filtration.
pub fn sigma_field_gap(space: &CoupledSpace, set: &[LeafId], observable: &str, k: usize, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let ind = indicator(space.tree().num_leaves(), set)?;
    let cond = space.filtration(observable)?.cond_expectation(&ind, k)?;
    prob_where(space, |leaf| Ok((cond[leaf] - ind[leaf]).abs() >= eps))
}

/// The martingale path `t ↦ E[1_A | F_t]` on every leaf.
pub fn indicator_martingale(space: &CoupledSpace, set: &[LeafId], observable: &str) -> Result<Vec<StepPath>> {
    let ind = indicator(space.tree().num_leaves(), set)?;
    let filt = space.filtration(observable)?;
    let layers = (0..=filt.depth())
        .map(|k| filt.cond_expectation(&ind, k))
        .collect::<Result<Vec<_>>>()?;
    let times = space.times();
    (0..filt.num_leaves())
        .map(|leaf| {
            let values: Vec<f64> = layers.iter().map(|l| l[leaf]).collect();
            StepPath::from_grid_values(times, times.last(), &values)
        })
        .collect()
}

/// `ℙ[d_J1(E[1_A | F^coarse], E[1_A | F^fine]) ≥ eps]`.
pub fn filtration_weak_gap(space: &CoupledSpace, set: &[LeafId], coarse: &str, fine: &str, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    let a = indicator_martingale(space, set, coarse)?;
    let b = indicator_martingale(space, set, fine)?;
    let mut dist = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(&b) {
        dist.push(skorokhod_distance(x, y)?);
    }
    prob_where(space, |leaf| Ok(dist[leaf] >= eps))
}

/// Bounded continuous test functions of time on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestFn {
    One,
    /// `t / T`
    Linear,
    /// `cos(π k t / T)`
    Cos(u32),
}

impl TestFn {
    pub fn eval(&self, t: f64, horizon: f64) -> f64 {
        match *self {
            TestFn::One => 1.0,
            TestFn::Linear => t / horizon,
            TestFn::Cos(k) => (PI * k as f64 * t / horizon).cos(),
        }
    }

    /// `1`, `t/T` and `cos(πkt/T)` for `k = 1..=4`.
    pub fn standard() -> Vec<TestFn> {
        let mut v = vec![TestFn::One, TestFn::Linear];
        v.extend((1..=4).map(TestFn::Cos));
        v
    }
}

impl fmt::Display for TestFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestFn::One => write!(f, "1"),
            TestFn::Linear => write!(f, "t/T"),
            TestFn::Cos(k) => write!(f, "cos({k}πt/T)"),
        }
    }
}

/// Leaf sets of the atoms of `filt` at time index `k`.
pub fn atom_sets(filt: &Filtration, k: usize) -> Result<Vec<Vec<LeafId>>> {
    Ok(filt.partition(k)?.atoms.into_iter().map(|(leaves, _)| leaves).collect())
}

/// `E[1_B f(τ)]` for every `(f, B)` pair, row-major in `f`.
fn bc_moments(
    space: &CoupledSpace,
    rule: &RandomizedStoppingRule,
    test_fns: &[TestFn],
    test_sets: &[Vec<LeafId>],
) -> Result<Vec<f64>> {
    let filt = space.filtration(rule.observable())?;
    let dist = rule.stop_distribution(&filt)?;
    let horizon = space.tree().horizon();
    let w = space.tree().leaf_weights();
    let mut out = Vec::with_capacity(test_fns.len() * test_sets.len());
    for f in test_fns {
        let per_leaf: Vec<f64> = dist
            .iter()
            .zip(w)
            .map(|(d, wl)| wl * d.iter().zip(rule.times()).map(|(p, &t)| p * f.eval(t, horizon)).sum::<f64>())
            .collect();
        for set in test_sets {
            out.push(set.iter().map(|&l| per_leaf[l]).sum());
        }
    }
    Ok(out)
}

/// `max_{f, B} |E[1_B f(τⁿ)] − E[1_B f(τ)]|` for each rule of the sequence.
pub fn bc_gap(
    space: &CoupledSpace,
    seq: &[(usize, RandomizedStoppingRule)],
    limit: &RandomizedStoppingRule,
    test_fns: &[TestFn],
    test_sets: &[Vec<LeafId>],
) -> Result<Vec<(usize, f64)>> {
    if test_fns.is_empty() || test_sets.is_empty() {
        return Err(Error::Parameter("Baxter–Chacon gap needs test functions and test sets".into()));
    }
    let n = space.tree().num_leaves();
    if let Some(l) = test_sets.iter().flatten().find(|&&l| l >= n) {
        return Err(Error::Parameter(format!("test set leaf {l} out of range")));
    }
    let reference = bc_moments(space, limit, test_fns, test_sets)?;
    seq.iter()
        .map(|(n, rule)| {
            let m = bc_moments(space, rule, test_fns, test_sets)?;
            let gap = m.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok((*n, gap))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procgen::{counterexample_space, discretize_process, gen_random_walk};
    use crate::scenario::ScenarioTree;
    use crate::steppath::TimeGrid;
    use crate::stoprule::StoppingRule;

    #[test]
    fn paths_gap_examples() {
        let w = gen_random_walk(3, 1.0).unwrap();
        assert_eq!(paths_in_prob_gap(&w, "B", "B", 1e-9).unwrap(), 0.0);
        for n in [4usize, 8, 16] {
            let ce = counterexample_space(n).unwrap();
            assert_eq!(paths_in_prob_gap(&ce, "x", "xn", 2.0 / n as f64).unwrap(), 0.0);
            assert_eq!(paths_in_prob_gap(&ce, "x", "xn", 0.5 / n as f64).unwrap(), 1.0);
        }
        assert!(matches!(paths_in_prob_gap(&w, "B", "nope", 0.1), Err(Error::Lookup(_))));
    }

    #[test]
    fn sigma_field_examples() {
        let w = gen_random_walk(2, 1.0).unwrap();
        let a = [0, 1];
        assert_eq!(sigma_field_gap(&w, &a, "B", 2, 0.01).unwrap(), 0.0);

        let tree = ScenarioTree::uniform(TimeGrid::uniform(1.0, 1).unwrap(), 2).unwrap();
        let n = tree.num_nodes();
        let triv = CoupledSpace::new(tree, "trivial").with_observable("c", vec![0.0; n]).unwrap();
        assert_eq!(sigma_field_gap(&triv, &[0], "c", 1, 0.25).unwrap(), 1.0);
    }

    #[test]
    fn sigma_field_refinement_is_monotone() {
        let w = gen_random_walk(4, 1.0).unwrap();
        let ladder = [vec![0.0], vec![0.0, 0.5], vec![0.0, 0.25, 0.5, 0.75], vec![0.0, 0.25, 0.5, 0.75, 1.0]];
        let filt = w.filtration("B").unwrap();
        for set in atom_sets(&filt, 3).unwrap() {
            let mut gaps = Vec::new();
            let mut space = w.clone();
            for pts in &ladder {
                let (s, name) = discretize_process(&space, "B", &TimeGrid::new(pts.clone()).unwrap()).unwrap();
                space = s;
                gaps.push(sigma_field_gap(&space, &set, &name, 4, 0.1).unwrap());
            }
            assert!(is_nonincreasing(gaps.iter().copied()), "{gaps:?}");
        }
    }

    #[test]
    fn sigma_field_gap_can_grow_under_refinement() {
        // a single scenario: once its atom is small enough, E[1_A | G] lands
        // in [eps, 1 - eps] on the whole atom
        let w = gen_random_walk(8, 1.0).unwrap();
        let (w, c1) = discretize_process(&w, "B", &TimeGrid::uniform(1.0, 1).unwrap()).unwrap();
        let (w, c2) = discretize_process(&w, "B", &TimeGrid::uniform(1.0, 2).unwrap()).unwrap();
        let grew = (0..256).any(|leaf| {
            sigma_field_gap(&w, &[leaf], &c2, 8, 0.2).unwrap() > sigma_field_gap(&w, &[leaf], &c1, 8, 0.2).unwrap()
        });
        assert!(grew);
    }

    #[test]
    fn filtration_weak_examples() {
        let w = gen_random_walk(2, 1.0).unwrap();
        assert_eq!(filtration_weak_gap(&w, &[0, 1], "B", "B", 1e-9).unwrap(), 0.0);
        let (w, coarse) = discretize_process(&w, "B", &TimeGrid::new(vec![0.0, 1.0]).unwrap()).unwrap();
        // first step up: fine martingale is 1/2 → {0,1} at 1/2; coarse jumps at 1
        let d = {
            let a = indicator_martingale(&w, &[0, 1], &coarse).unwrap();
            let b = indicator_martingale(&w, &[0, 1], "B").unwrap();
            skorokhod_distance(&a[0], &b[0]).unwrap()
        };
        assert_eq!(d, 0.5);
        assert_eq!(filtration_weak_gap(&w, &[0, 1], &coarse, "B", 0.4).unwrap(), 1.0);
        assert_eq!(filtration_weak_gap(&w, &[0, 1], &coarse, "B", 0.6).unwrap(), 0.0);
    }

    #[test]
    fn bc_examples() {
        let w = gen_random_walk(2, 1.0).unwrap();
        let filt = w.filtration("B").unwrap();
        let sets = atom_sets(&filt, 2).unwrap();
        let fns = TestFn::standard();
        let at_root = RandomizedStoppingRule::from_pure(&StoppingRule::stop_at_root(&filt, w.times(), 1.0).unwrap());
        let seq = vec![(1, at_root.clone()), (2, at_root.clone())];
        assert!(bc_gap(&w, &seq, &at_root, &fns, &sets).unwrap().iter().all(|r| r.1 == 0.0));
        assert!(bc_gap(&w, &seq, &at_root, &[], &sets).is_err());
        assert!(bc_gap(&w, &seq, &at_root, &fns, &[]).is_err());

        let at_half = RandomizedStoppingRule::from_pure(&StoppingRule::from_fn(&filt, w.times(), 1.0, |k, _| k == 1).unwrap());
        let gaps = bc_gap(&w, &[(1, at_half)], &at_root, &[TestFn::Linear], &[vec![0, 1, 2, 3]]).unwrap();
        assert_eq!(gaps, vec![(1, 0.5)]);
    }

    #[test]
    fn report_trend_flag() {
        let r = ConvergenceReport::new(Mode::SigmaField, Some(0.1), vec![], vec![(1, 0.5), (2, 0.5), (4, 0.0)]);
        assert!(r.monotone);
        assert_eq!(r.csv_records()[0], ["sigma-field".to_string(), "1".into(), "0.1".into(), "0.5".into()]);
        assert!(!ConvergenceReport::new(Mode::SigmaField, None, vec![], vec![(1, 0.1), (2, 0.2)]).monotone);
    }
}
