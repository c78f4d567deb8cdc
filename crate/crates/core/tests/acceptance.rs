//! Acceptance suite: one pass/fail line per criterion, with its runtime
//! budget. Runs as a plain binary so the lines are always printed.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snell_lab::experiment::{run, ExperimentConfig, ExperimentKind, ExperimentReport, RunOptions};
use snell_lab::procgen::{counterexample_space, gen_counterexample, gen_crr, CrrParams};
use snell_lab::scenario::random::random_space;
use snell_lab::snell::{crr_lattice_value, snell_value, stopped_value};
use snell_lab::steppath::skorokhod_distance;
use snell_lab::{CoupledSpace, Filtration, Payoff, StepPath};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn report(kind: ExperimentKind) -> Result<ExperimentReport, String> {
    run(&ExperimentConfig::new(kind), RunOptions { sequential: true }).map_err(|e| e.to_string())
}

fn column(r: &ExperimentReport, table: &str, col: &str) -> Result<Vec<f64>, String> {
    r.table(table).and_then(|t| t.column(col)).ok_or_else(|| format!("missing {table}.{col}"))
}

fn nonincreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] <= w[0] + 1e-12)
}

// 1
fn counterexample() -> Outcome {
    let r = report(ExperimentKind::Counterexample)?;
    let n = column(&r, "counterexample", "n")?;
    let g = column(&r, "counterexample", "gamma")?;
    let gn = column(&r, "counterexample", "gamma_n")?;
    ensure(n == [4.0, 8.0, 16.0, 32.0], format!("ladder {n:?}"))?;
    ensure(g.iter().all(|&v| v == 1.0), format!("gamma(1/2) = {g:?}"))?;
    ensure(gn.iter().all(|&v| v == 0.0), format!("gamma_n(1/2) = {gn:?}"))?;
    Ok("gamma(1/2) = 1 and gamma_n(1/2) = 0 for n in {4,8,16,32}".into())
}

/// Every stopping time on the subtree of atom `(k, a)`, as the list of the
/// values it contributes.
fn subtree_values(filt: &Filtration, gain: &dyn Fn(usize, usize) -> f64, last: usize, k: usize, a: usize) -> Vec<f64> {
    let stop_now = filt.atom_weight(k, a) * gain(k, a);
    if k == last {
        return vec![stop_now];
    }
    let children: Vec<usize> = (0..filt.num_atoms(k + 1)).filter(|&b| filt.atom_parent(k + 1, b) == a).collect();
    let mut sums = vec![0.0];
    for b in children {
        let options = subtree_values(filt, gain, last, k + 1, b);
        sums = sums.iter().flat_map(|s| options.iter().map(move |o| s + o)).collect();
    }
    sums.push(stop_now);
    sums
}

fn random_payoff(rng: &mut ChaCha8Rng, i: usize) -> Payoff {
    let (amp, freq, phase) = (rng.gen_range(0.5..2.0), rng.gen_range(0.2..2.0), rng.gen_range(0.0..6.3));
    let (tamp, tfreq) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..4.0));
    Payoff::new(format!("random-{i}"), amp + tamp, move |t: f64, x: f64| {
        amp * (freq * x + phase).sin() + tamp * (tfreq * t).cos()
    })
    .expect("bounded by construction")
}

// 2
fn snell_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut rules = 0usize;
    for i in 0..200 {
        let depth = 1 + i % 4;
        let space = random_space(&mut rng, depth, 3, 16);
        let filt = space.filtration("X").map_err(|e| e.to_string())?;
        let times = space.times().points().to_vec();
        for j in 0..3 {
            let payoff = random_payoff(&mut rng, j);
            let gain = |k: usize, a: usize| payoff.eval(times[k], filt.atom_value(k, a));
            let all = subtree_values(&filt, &gain, depth, 0, 0);
            rules += all.len();
            let best = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dp = snell_value(&space, "X", &payoff, 1.0).map_err(|e| e.to_string())?;
            let attained = stopped_value(&space, "X", &payoff, dp.optimal_rule.as_ref().unwrap()).map_err(|e| e.to_string())?;
            worst = worst.max((dp.value - best).abs()).max((attained - best).abs());
        }
    }
    ensure(worst <= 1e-10, format!("largest deviation {worst:e}"))?;
    Ok(format!("600 problems, {rules} rules enumerated, largest deviation {worst:.1e}"))
}

// 3
fn crr() -> Outcome {
    let base = CrrParams { s0: 1.0, lambda: 0.1, sigma: 0.2, horizon: 1.0, steps: 0 };
    let id = Payoff::identity();
    let mut worst: f64 = 0.0;
    let mut ns: Vec<usize> = (1..=12).collect();
    ns.extend([50, 100, 200]);
    let mut gap = std::collections::BTreeMap::new();
    for &n in &ns {
        let p = CrrParams { steps: n, ..base };
        let closed = p.s0 * (1.0 + p.lambda * p.horizon / n as f64).powi(n as i32);
        let v = if n <= 12 {
            snell_value(&gen_crr(&p).map_err(|e| e.to_string())?, "S", &id, 1.0).map_err(|e| e.to_string())?.value
        } else {
            crr_lattice_value(&p, &id, 1.0).map_err(|e| e.to_string())?
        };
        worst = worst.max((v - closed).abs());
        gap.insert(n, (v - (p.lambda * p.horizon).exp() * p.s0).abs());
    }
    ensure(worst <= 1e-12, format!("identity error {worst:e}"))?;
    let (g100, g200) = (gap[&100], gap[&200]);
    ensure(g200 < 3e-5, format!("gap at n=200 is {g200:e}"))?;
    let ratio = g200 / g100;
    ensure((0.4..=0.6).contains(&ratio), format!("gap ratio {ratio}"))?;
    Ok(format!("identity error {worst:.1e}, gap(200) = {g200:.3e}, gap(200)/gap(100) = {ratio:.4}"))
}

// 4
fn grid_refine() -> Outcome {
    let r = report(ExperimentKind::GridRefine)?;
    let k = column(&r, "grid_refine", "k")?;
    let v = column(&r, "grid_refine", "gamma_pi")?;
    let g = column(&r, "grid_refine", "gamma")?[0];
    let dyadic: Vec<f64> = k.iter().zip(&v).filter(|(k, _)| (1.0..=4.0).contains(*k)).map(|(_, v)| *v).collect();
    ensure(dyadic.len() == 4, "levels 1..4 missing")?;
    ensure(dyadic.windows(2).all(|w| w[1] >= w[0]), format!("not nondecreasing: {dyadic:?}"))?;
    ensure(dyadic[3] == g, format!("gamma_pi4 = {} vs gamma = {g}", dyadic[3]))?;
    Ok(format!("depth-16 walk, gamma_pi(k=1..4) = {dyadic:.6?}, gamma = {g:.6}"))
}

// 5
fn randomized() -> Outcome {
    let r = report(ExperimentKind::Randomized)?;
    let depth = column(&r, "randomized", "depth")?;
    let snell = column(&r, "randomized", "snell")?;
    let maxr = column(&r, "randomized", "max_randomized")?;
    let maxp = column(&r, "randomized", "max_pure")?;
    let rules: f64 = column(&r, "randomized", "rules")?.iter().sum();
    ensure(depth.iter().all(|&d| d <= 3.0), "fixture deeper than 3")?;
    let excess = maxr.iter().zip(&snell).map(|(m, s)| m - s).fold(f64::NEG_INFINITY, f64::max);
    let corner = maxp.iter().zip(&snell).map(|(m, s)| (m - s).abs()).fold(0.0, f64::max);
    ensure(excess <= 1e-10, format!("randomized excess {excess:e}"))?;
    ensure(corner <= 1e-10, format!("pure corner gap {corner:e}"))?;
    Ok(format!("{} fixtures, {rules} rules, largest excess {excess:.1e}, pure corner gap {corner:.1e}", depth.len()))
}

// 6
fn lemma_tn() -> Outcome {
    let r = report(ExperimentKind::LemmaTn)?;
    let n = column(&r, "lemma_tn", "n")?;
    let mis = column(&r, "lemma_tn", "mismatch_prob")?;
    let bc = column(&r, "lemma_tn", "bc_gap")?;
    ensure(n == [2.0, 3.0, 5.0, 9.0], format!("ladder {n:?}"))?;
    ensure(nonincreasing(&mis) && *mis.last().unwrap() == 0.0, format!("P[tau_n != tau] = {mis:?}"))?;
    ensure(nonincreasing(&bc) && *bc.last().unwrap() == 0.0, format!("bc gaps {bc:?}"))?;
    Ok(format!("P[tau_n != tau] = {mis:?}, bc gap = {bc:.4?}"))
}

// 7
fn aldous() -> Outcome {
    let r = report(ExperimentKind::Aldous)?;
    let eps = column(&r, "aldous_jump", "eps")?;
    let sup = column(&r, "aldous_jump", "sup")?;
    ensure(eps.iter().zip(&sup).filter(|(e, _)| **e == 0.5).all(|(_, s)| *s == 1.0), format!("jump sups {sup:?}"))?;
    let n = column(&r, "aldous_walk", "n")?;
    let steps = column(&r, "aldous_walk", "delta_steps")?;
    let wsup = column(&r, "aldous_walk", "sup")?;
    let mut levels: Vec<f64> = n.clone();
    levels.dedup();
    for level in &levels {
        let mut rows: Vec<(f64, f64)> =
            n.iter().zip(steps.iter().zip(&wsup)).filter(|(m, _)| *m == level).map(|(_, (d, s))| (*d, *s)).collect();
        rows.sort_by(|a, b| b.0.total_cmp(&a.0));
        let sups: Vec<f64> = rows.iter().map(|r| r.1).collect();
        ensure(nonincreasing(&sups), format!("walk n={level}: {sups:?}"))?;
        ensure(rows.iter().any(|r| r.0 == 1.0) && rows.iter().filter(|r| r.0 == 1.0).all(|r| r.1 == 0.0), format!("walk n={level}: one step"))?;
    }
    Ok(format!("{} jump rows at sup 1, walks n = {levels:?} vanish at one step", sup.len()))
}

// 8: exhaustive monotone matching of jumps
fn j1_enumerated(a: &StepPath, b: &StepPath) -> f64 {
    #[derive(Clone, Copy)]
    enum Step {
        A,
        B,
        Both,
    }
    fn paths(p: usize, q: usize, prefix: &mut Vec<Step>, out: &mut Vec<Vec<Step>>) {
        if p == 0 && q == 0 {
            out.push(prefix.clone());
            return;
        }
        for (s, dp, dq) in [(Step::A, 1, 0), (Step::B, 0, 1), (Step::Both, 1, 1)] {
            if p >= dp && q >= dq {
                prefix.push(s);
                paths(p - dp, q - dq, prefix, out);
                prefix.pop();
            }
        }
    }
    let horizon = a.horizon();
    let (sa, va) = (&a.jump_times()[1..], a.values());
    let (sb, vb) = (&b.jump_times()[1..], b.values());
    let mut cand = vec![0.0];
    cand.extend(va.iter().flat_map(|x| vb.iter().map(move |y| (x - y).abs())));
    cand.extend(sa.iter().flat_map(|s| sb.iter().chain([&0.0, &horizon]).map(move |u| (s - u).abs())));
    cand.sort_by(f64::total_cmp);
    cand.dedup();

    let feasible = |steps: &[Step], c: f64| -> bool {
        let tol = 1e-12;
        let (mut k, mut l, mut theta, mut pinned) = (0usize, 0usize, 0.0f64, false);
        if (va[0] - vb[0]).abs() > c + tol {
            return false;
        }
        for (i, step) in steps.iter().enumerate() {
            let last = i + 1 == steps.len();
            match step {
                Step::A => {
                    let s = sa[k];
                    let lo = if l == 0 { 0.0 } else { sb[l - 1] };
                    let hi = if l == sb.len() { horizon } else { sb[l] };
                    let t = if s == horizon {
                        if !last || lo == horizon {
                            return false;
                        }
                        pinned = true;
                        horizon
                    } else {
                        theta.max(lo).max(s - c)
                    };
                    if t > hi + tol || (t - s).abs() > c + tol {
                        return false;
                    }
                    theta = t;
                    k += 1;
                }
                Step::B => {
                    let u = sb[l];
                    if (u == horizon && (!last || pinned)) || theta > u + tol {
                        return false;
                    }
                    l += 1;
                }
                Step::Both => {
                    let (s, u) = (sa[k], sb[l]);
                    if (s == horizon) != (u == horizon) || (u == horizon && !last) || theta > u + tol || (s - u).abs() > c + tol {
                        return false;
                    }
                    theta = u;
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

    let mut all = Vec::new();
    paths(sa.len(), sb.len(), &mut Vec::new(), &mut all);
    let mut best = f64::INFINITY;
    for steps in &all {
        if best.is_finite() && !feasible(steps, best) {
            continue;
        }
        // feasibility is monotone in c: bisect the sorted candidates
        let (mut lo, mut hi) = (0usize, cand.len() - 1);
        if !feasible(steps, cand[hi]) {
            continue;
        }
        while lo < hi {
            let mid = (lo + hi) / 2;
            if feasible(steps, cand[mid]) {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        best = best.min(cand[lo]);
    }
    best
}

fn random_path(rng: &mut ChaCha8Rng) -> StepPath {
    let jumps = rng.gen_range(0..=6);
    let mut times: Vec<f64> = (0..jumps).map(|_| rng.gen_range(1..=16) as f64 / 16.0).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    times.insert(0, 0.0);
    let values = times.iter().map(|_| rng.gen_range(-2..=2) as f64 * 0.5).collect();
    StepPath::new(1.0, times, values).unwrap()
}

fn skorokhod() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let (a, b) = (random_path(&mut rng), random_path(&mut rng));
        let dp = skorokhod_distance(&a, &b).map_err(|e| e.to_string())?;
        worst = worst.max((dp - j1_enumerated(&a, &b)).abs());
    }
    ensure(worst <= 1e-12, format!("largest deviation {worst:e}"))?;
    for n in [4usize, 8, 16] {
        let (x, xn) = gen_counterexample(n).map_err(|e| e.to_string())?;
        let d = skorokhod_distance(&x, &xn).map_err(|e| e.to_string())?;
        ensure((d - 1.0 / n as f64).abs() <= 1e-12, format!("d(x, x^{n}) = {d}"))?;
        // the same pair on its coupled space
        let space: CoupledSpace = counterexample_space(n).map_err(|e| e.to_string())?;
        let dd = skorokhod_distance(&space.leaf_path("x", 0).unwrap(), &space.leaf_path("xn", 0).unwrap()).unwrap();
        ensure(dd == d, "space paths differ from the generated pair")?;
    }
    Ok(format!("500 pairs, largest deviation {worst:.1e}; d(x, x^n) = 1/n for n in {{4,8,16}}"))
}

// 9
fn conditional_expectation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let space = random_space(&mut rng, 1 + i % 5, 3, 32);
        let filt = space.filtration("X").map_err(|e| e.to_string())?;
        let n = filt.num_leaves();
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mean = filt.expectation(&f).unwrap();
        for k in 0..=filt.depth() {
            let ck = filt.cond_expectation(&f, k).unwrap();
            worst = worst.max((filt.expectation(&ck).unwrap() - mean).abs());
            for j in k..=filt.depth() {
                let cj = filt.cond_expectation(&f, j).unwrap();
                let tower = filt.cond_expectation(&cj, k).unwrap();
                worst = worst.max(tower.iter().zip(&ck).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            }
            if k > 0 {
                // leaves sharing an atom at k share its parent at k - 1
                for leaf in 0..n {
                    let a = filt.atom_of(k, leaf);
                    ensure(filt.atom_parent(k, a) == filt.atom_of(k - 1, leaf), format!("atom nesting fails at k={k}"))?;
                }
            }
        }
    }
    ensure(worst <= 1e-10, format!("largest deviation {worst:e}"))?;
    Ok(format!("100 spaces, tower and mean laws within {worst:.1e}, atoms nested"))
}

fn main() {
    let criteria: [(&str, u64, fn() -> Outcome); 9] = [
        ("1 counterexample exactness", 1, counterexample),
        ("2 snell oracle equivalence", 30, snell_oracle),
        ("3 CRR identity and convergence", 10, crr),
        ("4 grid-refinement monotonicity", 10, grid_refine),
        ("5 randomized rules do not help", 60, randomized),
        ("6 stopping-time approximation", 30, lemma_tn),
        ("7 Aldous dichotomy", 60, aldous),
        ("8 Skorokhod distance oracle", 10, skorokhod),
        ("9 conditional-expectation laws", 10, conditional_expectation),
    ];
    let mut failed = 0;
    for (name, budget, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > Duration::from_secs(budget) => Err(format!("{msg}; over the {budget} s budget")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("PASS criterion {name} ({:.2} s): {msg}", elapsed.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name} ({:.2} s): {msg}", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
