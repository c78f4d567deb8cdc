//! Càdlàg step paths on `[0, T]` and the Skorokhod J1 distance between them.
//!
//! A [`StepPath`] is stored in canonical form: strictly increasing jump times
//! starting at 0 and no zero-size jumps, so that two paths are equal as
//! functions iff their stored representations are equal.
//!
//! The J1 distance is computed exactly. A time change `λ` aligns the jumps of
//! `a ∘ λ` with those of `b`; as `t` runs over `[0, T]` the pair of current
//! value indices `(k, l)` of `a ∘ λ` and `b` walks monotonically through the
//! lattice `{0..=p} × {0..=q}` by right steps (an `a` jump), up steps (a `b`
//! jump) and diagonal steps (a matched pair). Every visited state costs
//! `|a_k - b_l|`, every step costs the smallest time distortion compatible
//! with it, and the distance is the cheapest bottleneck path.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance used when comparing grid times.
pub const TIME_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPath {
    horizon: f64,
    jump_times: Vec<f64>,
    values: Vec<f64>,
}

impl StepPath {
    /// Builds a path from `(jump_times[i], values[i])` pairs. Consecutive equal
    /// values are merged.
    pub fn new(horizon: f64, jump_times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::Parameter(format!("horizon must be > 0, got {horizon}")));
        }
        if jump_times.is_empty() || jump_times.len() != values.len() {
            return Err(Error::Parameter(format!(
                "need equally many jump times and values (got {} and {})",
                jump_times.len(),
                values.len()
            )));
        }
        if jump_times[0] != 0.0 {
            return Err(Error::Parameter(format!(
                "first jump time must be 0, got {}",
                jump_times[0]
            )));
        }
        if jump_times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter("jump times must be strictly increasing".into()));
        }
        if *jump_times.last().unwrap() > horizon {
            return Err(Error::Parameter("jump time beyond the horizon".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("path values must be finite".into()));
        }

        let mut times = Vec::with_capacity(jump_times.len());
        let mut vals: Vec<f64> = Vec::with_capacity(values.len());
        for (t, v) in jump_times.into_iter().zip(values) {
            if vals.last() != Some(&v) {
                times.push(t);
                vals.push(v);
            }
        }
        Ok(Self { horizon, jump_times: times, values: vals })
    }

    pub fn constant(horizon: f64, value: f64) -> Result<Self> {
        Self::new(horizon, vec![0.0], vec![value])
    }

    /// The path `t ↦ 1{t ≥ at}` on `[0, horizon]`.
    pub fn indicator_from(horizon: f64, at: f64) -> Result<Self> {
        if at <= 0.0 {
            return Self::constant(horizon, 1.0);
        }
        Self::new(horizon, vec![0.0, at], vec![0.0, 1.0])
    }

    /// Samples `values[i]` at `grid[i]` and holds it until the next grid time.
    pub fn from_grid_values(grid: &TimeGrid, horizon: f64, values: &[f64]) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(Error::Parameter(format!(
                "grid has {} points but {} values were given",
                grid.len(),
                values.len()
            )));
        }
        Self::new(horizon, grid.points().to_vec(), values.to_vec())
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn jump_times(&self) -> &[f64] {
        &self.jump_times
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of jumps (the start value is not a jump).
    pub fn num_jumps(&self) -> usize {
        self.jump_times.len() - 1
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Domain(format!(
                "t = {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(self.value_at(t))
    }

    fn value_at(&self, t: f64) -> f64 {
        let idx = self.jump_times.partition_point(|&s| s <= t);
        self.values[idx.saturating_sub(1)]
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_horizons(a: &StepPath, b: &StepPath) -> Result<()> {
    if a.horizon != b.horizon {
        return Err(Error::Domain(format!(
            "horizon mismatch: {} vs {}",
            a.horizon, b.horizon
        )));
    }
    Ok(())
}

/// `sup_t |a(t) - b(t)|`, attained on the union of jump times.
pub fn uniform_distance(a: &StepPath, b: &StepPath) -> Result<f64> {
    check_horizons(a, b)?;
    let d = a
        .jump_times
        .iter()
        .chain(&b.jump_times)
        .map(|&t| (a.value_at(t) - b.value_at(t)).abs())
        .fold(0.0, f64::max);
    Ok(d)
}

/// Exact Skorokhod J1 distance
/// `inf_λ max(sup_t |λ(t) - t|, sup_t |a(λ(t)) - b(t)|)`.
///
/// Runs in `O(J_a · J_b)` time.
pub fn skorokhod_distance(a: &StepPath, b: &StepPath) -> Result<f64> {
    check_horizons(a, b)?;
    let horizon = a.horizon;
    let lattice = Lattice::new(a, b);
    let (p, q) = (lattice.p, lattice.q);

    // best[k][l]: smallest bottleneck cost of a path from (0, 0) to (k, l)
    let mut best = vec![vec![f64::INFINITY; q + 1]; p + 1];
    for k in 0..=p {
        for l in 0..=q {
            let node = (a.values[k] - b.values[l]).abs();
            if k == 0 && l == 0 {
                best[0][0] = node;
                continue;
            }
            let mut via = f64::INFINITY;
            if k > 0 {
                if let Some(edge) = lattice.right_cost(k - 1, l, horizon) {
                    via = via.min(best[k - 1][l].max(edge));
                }
            }
            if l > 0 {
                if let Some(edge) = lattice.up_cost(k, l - 1, horizon) {
                    via = via.min(best[k][l - 1].max(edge));
                }
            }
            if k > 0 && l > 0 {
                if let Some(edge) = lattice.diagonal_cost(k - 1, l - 1, horizon) {
                    via = via.min(best[k - 1][l - 1].max(edge));
                }
            }
            best[k][l] = via.max(node);
        }
    }
    Ok(best[p][q])
}

/// Jump times of both paths, 1-based: `s[k]` is the time of the k-th jump of
/// `a`, with `s[0] = 0` and `s[p + 1] = T` as sentinels (same for `u`, `b`).
struct Lattice {
    s: Vec<f64>,
    u: Vec<f64>,
    p: usize,
    q: usize,
}

impl Lattice {
    fn new(a: &StepPath, b: &StepPath) -> Self {
        let mut s = a.jump_times.clone();
        s.push(a.horizon);
        let mut u = b.jump_times.clone();
        u.push(b.horizon);
        Self { p: a.num_jumps(), q: b.num_jumps(), s, u }
    }

    // A jump at the horizon is pinned there by λ(T) = T, so it can only be the
    // step that enters the final state.

    /// `(k, l) -> (k + 1, l)`: the a-jump at `s[k+1]` is placed in `[u[l], u[l+1]]`.
    fn right_cost(&self, k: usize, l: usize, horizon: f64) -> Option<f64> {
        let s = self.s[k + 1];
        if s == horizon && !(l == self.q && self.u[l] < horizon) {
            return None;
        }
        Some(0f64.max(self.u[l] - s).max(s - self.u[l + 1]))
    }

    /// `(k, l) -> (k, l + 1)`: the b-jump at `u[l+1]` falls between the
    /// images of the a-jumps `k` and `k + 1`.
    fn up_cost(&self, k: usize, l: usize, horizon: f64) -> Option<f64> {
        let u = self.u[l + 1];
        if u == horizon && !(k == self.p && self.s[k] < horizon) {
            return None;
        }
        Some(0f64.max(self.s[k] - u).max(u - self.s[k + 1]))
    }

    fn diagonal_cost(&self, k: usize, l: usize, horizon: f64) -> Option<f64> {
        let (s, u) = (self.s[k + 1], self.u[l + 1]);
        if (s == horizon) != (u == horizon) {
            return None;
        }
        Some((s - u).abs())
    }
}

/// Strictly increasing list of times starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = Error;

    fn try_from(points: Vec<f64>) -> Result<Self> {
        Self::new(points)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(grid: TimeGrid) -> Self {
        grid.points
    }
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.first() != Some(&0.0) {
            return Err(Error::Parameter("time grid must start at 0".into()));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(Error::Parameter("time grid points must be finite".into()));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Parameter("time grid must be strictly increasing".into()));
        }
        Ok(Self { points })
    }

    /// `steps + 1` equally spaced points on `[0, horizon]`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        if steps == 0 || !(horizon > 0.0) {
            return Err(Error::Parameter("uniform grid needs steps >= 1 and horizon > 0".into()));
        }
        let points = (0..=steps)
            .map(|k| horizon * k as f64 / steps as f64)
            .collect();
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn last(&self) -> f64 {
        *self.points.last().unwrap()
    }

    /// Largest gap between consecutive points (0 for a single point).
    pub fn mesh(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Index of the grid point equal to `t` within [`TIME_EPS`].
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let idx = self.points.partition_point(|&s| s < t - TIME_EPS);
        (idx < self.points.len() && (self.points[idx] - t).abs() <= TIME_EPS).then_some(idx)
    }

    pub fn contains(&self, t: f64) -> bool {
        self.index_of(t).is_some()
    }

    /// Index of the largest point `<= t` (within [`TIME_EPS`]).
    pub fn floor_index(&self, t: f64) -> Option<usize> {
        let idx = self.points.partition_point(|&s| s <= t + TIME_EPS);
        idx.checked_sub(1)
    }

    pub fn is_subset_of(&self, other: &TimeGrid) -> bool {
        self.points.iter().all(|&t| other.contains(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn step(at: f64) -> StepPath {
        StepPath::indicator_from(1.0, at).unwrap()
    }

    #[test]
    fn eval_is_right_continuous_at_the_jump() {
        let x = step(0.5);
        assert_eq!(x.eval(0.4).unwrap(), 0.0);
        assert_eq!(x.eval(0.5).unwrap(), 1.0);
        let c = StepPath::constant(1.0, 3.5).unwrap();
        for t in [0.0, 0.25, 1.0] {
            assert_eq!(c.eval(t).unwrap(), 3.5);
        }
    }

    #[test]
    fn eval_rejects_times_outside_horizon() {
        let x = step(0.5);
        assert!(matches!(x.eval(-0.1), Err(Error::Domain(_))));
        assert!(matches!(x.eval(1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn canonical_form_drops_zero_size_jumps() {
        let p = StepPath::new(1.0, vec![0.0, 0.25, 0.5, 0.75], vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        assert_eq!(p.jump_times(), &[0.0, 0.5]);
        assert_eq!(p.values(), &[1.0, 2.0]);
        assert_eq!(p.num_jumps(), 1);
    }

    #[test]
    fn construction_errors() {
        assert!(StepPath::new(1.0, vec![0.1], vec![0.0]).is_err());
        assert!(StepPath::new(1.0, vec![0.0, 0.5, 0.5], vec![0.0, 1.0, 2.0]).is_err());
        assert!(StepPath::new(1.0, vec![0.0, 1.5], vec![0.0, 1.0]).is_err());
        assert!(StepPath::new(0.0, vec![0.0], vec![0.0]).is_err());
        assert!(StepPath::new(1.0, vec![0.0], vec![]).is_err());
    }

    #[test]
    fn uniform_distance_examples() {
        let x = step(0.5);
        assert_eq!(uniform_distance(&x, &x).unwrap(), 0.0);
        assert_eq!(uniform_distance(&x, &step(0.75)).unwrap(), 1.0);
        let two = StepPath::constant(1.0, 2.0).unwrap();
        let zero = StepPath::constant(1.0, 0.0).unwrap();
        assert_eq!(uniform_distance(&two, &zero).unwrap(), 2.0);
    }

    #[test]
    fn horizon_mismatch_is_a_domain_error() {
        let a = StepPath::constant(1.0, 0.0).unwrap();
        let b = StepPath::constant(2.0, 0.0).unwrap();
        assert!(matches!(uniform_distance(&a, &b), Err(Error::Domain(_))));
        assert!(matches!(skorokhod_distance(&a, &b), Err(Error::Domain(_))));
    }

    #[test]
    fn shifted_jump_costs_the_shift() {
        let x = step(0.5);
        assert_eq!(skorokhod_distance(&x, &x).unwrap(), 0.0);
        let d = skorokhod_distance(&x, &step(0.5 + 1.0 / 8.0)).unwrap();
        assert!((d - 0.125).abs() < 1e-12);
        assert_eq!(d, brute_force(&x, &step(0.625)));
    }

    #[test]
    fn missing_jump_cannot_be_absorbed() {
        let zero = StepPath::constant(1.0, 0.0).unwrap();
        assert_eq!(skorokhod_distance(&zero, &step(0.5)).unwrap(), 1.0);
        assert_eq!(brute_force(&zero, &step(0.5)), 1.0);
    }

    #[test]
    fn jumps_at_the_horizon_are_pinned() {
        // λ(T) = T: a jump at T cannot be moved to an interior time.
        let at_end = step(1.0);
        let near_end = step(0.95);
        let d = skorokhod_distance(&at_end, &near_end).unwrap();
        assert_eq!(d, 1.0);
        assert_eq!(brute_force(&at_end, &near_end), 1.0);
        assert_eq!(skorokhod_distance(&at_end, &at_end).unwrap(), 0.0);
    }

    #[test]
    fn grid_helpers() {
        let g = TimeGrid::new(vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        assert_eq!(g.mesh(), 0.5);
        assert_eq!(g.index_of(0.5), Some(2));
        assert_eq!(g.index_of(0.3), None);
        assert_eq!(g.floor_index(0.3), Some(1));
        assert_eq!(g.floor_index(1.0), Some(3));
        assert!(TimeGrid::new(vec![0.0, 0.5]).unwrap().is_subset_of(&g));
        assert!(TimeGrid::new(vec![0.1, 0.5]).is_err());
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5]).is_err());
        let u = TimeGrid::uniform(1.0, 4).unwrap();
        assert_eq!(u.points(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    /// Independent oracle: enumerate every lattice path (every monotone
    /// matching of the two jump sets together with the interleaving of the
    /// unmatched jumps); for each one, scan the finite candidate set of
    /// costs in increasing order and try to realize an explicit time change
    /// by greedily placing the images of the a-jumps.
    pub(crate) fn brute_force(a: &StepPath, b: &StepPath) -> f64 {
        #[derive(Clone, Copy)]
        enum Step {
            A,
            B,
            Both,
        }
        fn paths(p: usize, q: usize) -> Vec<Vec<Step>> {
            if p == 0 && q == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            let mut extend = |prefix: Step, rest: Vec<Vec<Step>>| {
                for mut r in rest {
                    r.insert(0, prefix);
                    out.push(r);
                }
            };
            if p > 0 {
                extend(Step::A, paths(p - 1, q));
            }
            if q > 0 {
                extend(Step::B, paths(p, q - 1));
            }
            if p > 0 && q > 0 {
                extend(Step::Both, paths(p - 1, q - 1));
            }
            out
        }

        let horizon = a.horizon();
        let (sa, va) = (&a.jump_times()[1..], a.values());
        let (sb, vb) = (&b.jump_times()[1..], b.values());
        let mut candidates = vec![0.0];
        for x in va {
            for y in vb {
                candidates.push((x - y).abs());
            }
        }
        for s in sa {
            for u in sb.iter().chain([&0.0, &horizon]) {
                candidates.push((s - u).abs());
            }
        }
        candidates.sort_by(f64::total_cmp);

        let feasible = |steps: &[Step], c: f64| -> bool {
            let tol = 1e-12;
            let (mut k, mut l) = (0usize, 0usize);
            let mut last_theta = 0.0f64;
            let mut a_pinned_at_end = false;
            if (va[0] - vb[0]).abs() > c + tol {
                return false;
            }
            for (i, step) in steps.iter().enumerate() {
                let is_last = i + 1 == steps.len();
                match step {
                    Step::A => {
                        let s = sa[k];
                        let lo = if l == 0 { 0.0 } else { sb[l - 1] };
                        let hi = if l == sb.len() { horizon } else { sb[l] };
                        let theta = if s == horizon {
                            if !is_last || lo == horizon {
                                return false;
                            }
                            a_pinned_at_end = true;
                            horizon
                        } else {
                            last_theta.max(lo).max(s - c)
                        };
                        if theta > hi + tol || (theta - s).abs() > c + tol {
                            return false;
                        }
                        last_theta = theta;
                        k += 1;
                    }
                    Step::B => {
                        let u = sb[l];
                        if (u == horizon && (!is_last || a_pinned_at_end)) || last_theta > u + tol {
                            return false;
                        }
                        l += 1;
                    }
                    Step::Both => {
                        let (s, u) = (sa[k], sb[l]);
                        if (s == horizon) != (u == horizon) || (u == horizon && !is_last) {
                            return false;
                        }
                        if last_theta > u + tol || (s - u).abs() > c + tol {
                            return false;
                        }
                        last_theta = u;
                        k += 1;
                        l += 1;
                    }
                }
                if (va[k] - vb[l]).abs() > c + tol {
                    return false;
                }
            }
            true
        };

        let mut best = f64::INFINITY;
        for steps in paths(sa.len(), sb.len()) {
            if let Some(&c) = candidates.iter().find(|&&c| feasible(&steps, c)) {
                best = best.min(c);
            }
        }
        best
    }

    fn arb_path(max_jumps: usize) -> impl Strategy<Value = StepPath> {
        // dyadic times and small integer values make ties and horizon jumps common
        (
            proptest::collection::btree_set(1u32..=16, 0..=max_jumps),
            proptest::collection::vec(-2i32..=2, max_jumps + 1),
        )
            .prop_map(|(times, vals)| {
                let mut t = vec![0.0];
                t.extend(times.iter().map(|&k| k as f64 / 16.0));
                let v = vals[..t.len()].iter().map(|&x| x as f64).collect();
                StepPath::new(1.0, t, v).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn dp_matches_enumeration(a in arb_path(4), b in arb_path(4)) {
            let d = skorokhod_distance(&a, &b).unwrap();
            prop_assert!((d - brute_force(&a, &b)).abs() <= 1e-12);
        }

        #[test]
        fn metric_sanity(a in arb_path(5), b in arb_path(5)) {
            let d = skorokhod_distance(&a, &b).unwrap();
            prop_assert!(d >= 0.0);
            prop_assert!(d <= uniform_distance(&a, &b).unwrap() + 1e-12);
            prop_assert_eq!(d, skorokhod_distance(&b, &a).unwrap());
            prop_assert_eq!(d == 0.0, a == b);
        }

        #[test]
        fn moving_one_jump_by_h_costs_at_most_h(a in arb_path(5), idx in 0usize..5, h in -0.03f64..0.03) {
            prop_assume!(a.num_jumps() > 0);
            let i = 1 + idx % a.num_jumps();
            let mut times = a.jump_times().to_vec();
            let moved = times[i] + h;
            let lo = times[i - 1];
            let hi = times.get(i + 1).copied().unwrap_or(1.0);
            prop_assume!(moved > lo && moved < hi && times[i] < 1.0);
            times[i] = moved;
            let b = StepPath::new(1.0, times, a.values().to_vec()).unwrap();
            prop_assert!(skorokhod_distance(&a, &b).unwrap() <= h.abs() + 1e-12);
        }

        #[test]
        fn eval_right_limits(a in arb_path(5), k in 0u32..64) {
            let t = k as f64 / 64.0;
            let v = a.eval(t).unwrap();
            for h in [1e-3, 1e-6, 1e-9] {
                if t + h <= 1.0 {
                    prop_assert_eq!(a.eval(t + h).unwrap(), v);
                }
            }
        }
    }
}
