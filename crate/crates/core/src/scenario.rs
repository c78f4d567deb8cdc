//! Finite filtered probability spaces.
//!
//! A [`ScenarioTree`] is a driver tree over a discrete time grid; each leaf is
//! a scenario whose weight is the product of branch probabilities along its
//! ancestor chain. A [`CoupledSpace`] carries any number of named observables
//! on the nodes of one tree. The natural filtration of an observable is
//! realized exactly by value-prefix atoms: at time index `k` two leaves share
//! an atom iff the observable took identical values on their chains at
//! indices `0..=k` (see [`Filtration`]).

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::steppath::{StepPath, TimeGrid};

/// Tolerance on branch-probability sums.
pub const PROB_EPS: f64 = 1e-12;

/// Index of a leaf in [`ScenarioTree::leaves`] order.
pub type LeafId = usize;
pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct ScenarioTree {
    times: TimeGrid,
    parent: Vec<Option<NodeId>>,
    prob: Vec<f64>,
    level: Vec<usize>,
    children: Vec<Vec<NodeId>>,
    root: NodeId,
    leaves: Vec<NodeId>,
    leaf_weight: Vec<f64>,
    // chain[leaf][k] = ancestor of the leaf at time index k
    chain: Vec<Vec<NodeId>>,
}

impl ScenarioTree {
    /// Builds a tree from parent links and branch probabilities, indexed by
    /// node id. The root's probability is ignored. Sibling probabilities must
    /// sum to one within [`PROB_EPS`] and are renormalized exactly.
    pub fn new(times: TimeGrid, parent: Vec<Option<NodeId>>, prob: Vec<f64>) -> Result<Self> {
        let n = parent.len();
        if n == 0 || prob.len() != n {
            return Err(Error::Parameter("tree needs one probability per node".into()));
        }
        let roots: Vec<_> = (0..n).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Parameter(format!(
                "tree must have exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(Error::Parameter(format!("node {i} has unknown parent {p}")));
                }
                children[p].push(i);
            }
        }

        let depth = times.len() - 1;
        let mut prob = prob;
        prob[root] = 1.0;
        let mut level = vec![usize::MAX; n];
        level[root] = 0;
        let mut stack = vec![root];
        let mut visited = 0;
        while let Some(node) = stack.pop() {
            visited += 1;
            let kids = &children[node];
            if kids.is_empty() {
                if level[node] != depth {
                    return Err(Error::Parameter(format!(
                        "leaf {node} sits at time index {} but the tree depth is {depth}",
                        level[node]
                    )));
                }
                continue;
            }
            if level[node] >= depth {
                return Err(Error::Parameter(format!("node {node} is deeper than the time grid")));
            }
            let mut total = 0.0;
            for &c in kids {
                if !(prob[c].is_finite() && prob[c] > 0.0) {
                    return Err(Error::Parameter(format!(
                        "branch probability of node {c} must be > 0, got {}",
                        prob[c]
                    )));
                }
                total += prob[c];
            }
            if (total - 1.0).abs() > PROB_EPS {
                return Err(Error::Parameter(format!(
                    "children of node {node} have total probability {total}"
                )));
            }
            for &c in kids {
                prob[c] /= total;
                level[c] = level[node] + 1;
                stack.push(c);
            }
        }
        if visited != n {
            return Err(Error::Parameter("tree contains nodes unreachable from the root".into()));
        }

        let mut tree = Self {
            times,
            parent,
            prob,
            level,
            children,
            root,
            leaves: Vec::new(),
            leaf_weight: Vec::new(),
            chain: Vec::new(),
        };
        tree.index_leaves();
        Ok(tree)
    }

    fn index_leaves(&mut self) {
        // depth-first, children in id order, so leaf ids are deterministic
        let mut stack = vec![(self.root, vec![self.root], 1.0)];
        while let Some((node, chain, w)) = stack.pop() {
            if self.children[node].is_empty() {
                self.leaves.push(node);
                self.leaf_weight.push(w);
                self.chain.push(chain);
                continue;
            }
            for &c in self.children[node].iter().rev() {
                let mut next = chain.clone();
                next.push(c);
                stack.push((c, next, w * self.prob[c]));
            }
        }
    }

    /// A uniform `branching`-ary tree of the given depth on `times`.
    pub fn uniform(times: TimeGrid, branching: usize) -> Result<Self> {
        if branching == 0 {
            return Err(Error::Parameter("branching must be >= 1".into()));
        }
        let depth = times.len() - 1;
        let mut parent = vec![None];
        let mut frontier = vec![0usize];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(frontier.len() * branching);
            for &node in &frontier {
                for _ in 0..branching {
                    parent.push(Some(node));
                    next.push(parent.len() - 1);
                }
            }
            frontier = next;
        }
        let prob = (0..parent.len())
            .map(|i| if i == 0 { 1.0 } else { 1.0 / branching as f64 })
            .collect();
        Self::new(times, parent, prob)
    }

    pub fn times(&self) -> &TimeGrid {
        &self.times
    }

    pub fn depth(&self) -> usize {
        self.times.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        self.times.last()
    }

    pub fn num_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parent[node]
    }

    pub fn children(&self, node: NodeId) -> &[NodeId] {
        &self.children[node]
    }

    /// Branch probability from the parent (1 for the root).
    pub fn branch_prob(&self, node: NodeId) -> f64 {
        self.prob[node]
    }

    pub fn level(&self, node: NodeId) -> usize {
        self.level[node]
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Node ids of the leaves, in leaf-id order.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    pub fn leaf_weights(&self) -> &[f64] {
        &self.leaf_weight
    }

    /// Ancestor chain of a leaf: `chain(leaf)[k]` is its node at time index `k`.
    pub fn chain(&self, leaf: LeafId) -> &[NodeId] {
        &self.chain[leaf]
    }
}

/// One scenario tree carrying several observables, each a function of the
/// driver path prefix (i.e. one real per node).
#[derive(Debug, Clone)]
pub struct CoupledSpace {
    tree: ScenarioTree,
    observables: BTreeMap<String, Vec<f64>>,
    label: String,
}

impl CoupledSpace {
    pub fn new(tree: ScenarioTree, label: impl Into<String>) -> Self {
        Self { tree, observables: BTreeMap::new(), label: label.into() }
    }

    /// Adds (or replaces) an observable given by its value at every node.
    pub fn with_observable(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.insert_observable(name, values)?;
        Ok(self)
    }

    pub fn insert_observable(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.tree.num_nodes() {
            return Err(Error::Parameter(format!(
                "observable {name} has {} values for {} nodes",
                values.len(),
                self.tree.num_nodes()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter(format!("observable {name} has non-finite values")));
        }
        self.observables.insert(name, values);
        Ok(())
    }

    pub fn tree(&self) -> &ScenarioTree {
        &self.tree
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn times(&self) -> &TimeGrid {
        self.tree.times()
    }

    pub fn observable_names(&self) -> impl Iterator<Item = &str> {
        self.observables.keys().map(String::as_str)
    }

    pub fn observable(&self, name: &str) -> Result<&[f64]> {
        self.observables
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Lookup(format!("unknown observable {name:?}")))
    }

    /// Values of an observable along a leaf's chain, indexed by time index.
    pub fn leaf_values(&self, name: &str, leaf: LeafId) -> Result<Vec<f64>> {
        let values = self.observable(name)?;
        Ok(self.tree.chain(leaf).iter().map(|&n| values[n]).collect())
    }

    /// The observable along a leaf, as a step path on `[0, T]`.
    pub fn leaf_path(&self, name: &str, leaf: LeafId) -> Result<StepPath> {
        let values = self.leaf_values(name, leaf)?;
        StepPath::from_grid_values(self.times(), self.tree.horizon(), &values)
    }

    pub fn filtration(&self, name: &str) -> Result<Filtration> {
        Filtration::new(self, name)
    }

    pub fn to_file(&self) -> SpaceFile {
        let nodes = (0..self.tree.num_nodes())
            .map(|id| NodeRecord {
                id,
                parent: self.tree.parent(id),
                p: self.tree.branch_prob(id),
                obs: self
                    .observables
                    .iter()
                    .map(|(k, v)| (k.clone(), v[id]))
                    .collect(),
            })
            .collect();
        SpaceFile { times: self.times().points().to_vec(), nodes }
    }

    pub fn from_file(file: &SpaceFile, label: impl Into<String>) -> Result<Self> {
        let n = file.nodes.len();
        let mut slot = vec![None; n];
        for (pos, node) in file.nodes.iter().enumerate() {
            if node.id >= n || slot[node.id].is_some() {
                return Err(Error::Parameter(format!(
                    "node ids must be a permutation of 0..{n}; bad id {}",
                    node.id
                )));
            }
            slot[node.id] = Some(pos);
        }
        let records: Vec<&NodeRecord> = slot.iter().map(|s| &file.nodes[s.unwrap()]).collect();
        let times = TimeGrid::new(file.times.clone())?;
        let tree = ScenarioTree::new(
            times,
            records.iter().map(|r| r.parent).collect(),
            records.iter().map(|r| r.p).collect(),
        )?;
        let mut space = CoupledSpace::new(tree, label);
        let names: Vec<&String> = records.first().map(|r| r.obs.keys().collect()).unwrap_or_default();
        for name in names {
            let values = records
                .iter()
                .map(|r| {
                    r.obs.get(name).copied().ok_or_else(|| {
                        Error::Parameter(format!("node {} lacks observable {name:?}", r.id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            space.insert_observable(name.clone(), values)?;
        }
        if records.iter().any(|r| r.obs.len() != space.observables.len()) {
            return Err(Error::Parameter("every node must define the same observables".into()));
        }
        Ok(space)
    }

    pub fn from_json(text: &str, label: impl Into<String>) -> Result<Self> {
        let file: SpaceFile = serde_json::from_str(text)?;
        Self::from_file(&file, label)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file())?)
    }
}

/// On-disk form of a [`CoupledSpace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceFile {
    pub times: Vec<f64>,
    pub nodes: Vec<NodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub p: f64,
    pub obs: BTreeMap<String, f64>,
}

/// Value-prefix atoms of one observable at every time index.
///
/// Atoms are numbered per time index in order of first appearance along the
/// leaf order, so the numbering is a deterministic function of the space.
#[derive(Debug, Clone)]
pub struct Filtration {
    observable: String,
    atom_of: Vec<Vec<usize>>,
    weight: Vec<Vec<f64>>,
    value: Vec<Vec<f64>>,
    parent: Vec<Vec<usize>>,
    leaf_weight: Vec<f64>,
}

fn value_key(v: f64) -> u64 {
    // +0.0 and -0.0 are the same observation
    (v + 0.0).to_bits()
}

impl Filtration {
    pub fn new(space: &CoupledSpace, name: &str) -> Result<Self> {
        let values = space.observable(name)?;
        let tree = space.tree();
        let depth = tree.depth();
        let leaves = tree.num_leaves();
        let leaf_weight = tree.leaf_weights().to_vec();

        let mut atom_of = Vec::with_capacity(depth + 1);
        let mut weight = Vec::with_capacity(depth + 1);
        let mut value = Vec::with_capacity(depth + 1);
        let mut parent = Vec::with_capacity(depth + 1);
        let mut prev: Vec<usize> = vec![0; leaves];
        for k in 0..=depth {
            let mut ids: HashMap<(usize, u64), usize> = HashMap::new();
            let mut layer = Vec::with_capacity(leaves);
            let mut w: Vec<f64> = Vec::new();
            let mut v = Vec::new();
            let mut up = Vec::new();
            for leaf in 0..leaves {
                let x = values[tree.chain(leaf)[k]];
                let up_atom = if k == 0 { 0 } else { prev[leaf] };
                let next = ids.len();
                let id = *ids.entry((up_atom, value_key(x))).or_insert(next);
                if id == w.len() {
                    w.push(0.0);
                    v.push(x);
                    up.push(up_atom);
                }
                w[id] += leaf_weight[leaf];
                layer.push(id);
            }
            prev = layer.clone();
            atom_of.push(layer);
            weight.push(w);
            value.push(v);
            parent.push(up);
        }
        Ok(Self { observable: name.to_string(), atom_of, weight, value, parent, leaf_weight })
    }

    pub fn observable(&self) -> &str {
        &self.observable
    }

    pub fn depth(&self) -> usize {
        self.atom_of.len() - 1
    }

    pub fn num_leaves(&self) -> usize {
        self.leaf_weight.len()
    }

    pub fn leaf_weights(&self) -> &[f64] {
        &self.leaf_weight
    }

    pub fn num_atoms(&self, k: usize) -> usize {
        self.weight[k].len()
    }

    /// Atom counts at every time index; identifies the filtration's shape.
    pub fn shape(&self) -> Vec<usize> {
        self.weight.iter().map(Vec::len).collect()
    }

    pub fn atom_of(&self, k: usize, leaf: LeafId) -> usize {
        self.atom_of[k][leaf]
    }

    /// Atom ids of every leaf at time index `k`.
    pub fn layer(&self, k: usize) -> &[usize] {
        &self.atom_of[k]
    }

    pub fn atom_weight(&self, k: usize, atom: usize) -> f64 {
        self.weight[k][atom]
    }

    /// The observable's value at time index `k` on the atom.
    pub fn atom_value(&self, k: usize, atom: usize) -> f64 {
        self.value[k][atom]
    }

    /// The atom at `k - 1` containing the given atom at `k` (0 when `k = 0`).
    pub fn atom_parent(&self, k: usize, atom: usize) -> usize {
        self.parent[k][atom]
    }

    fn check_index(&self, k: usize) -> Result<()> {
        if k > self.depth() {
            return Err(Error::Domain(format!(
                "time index {k} beyond depth {}",
                self.depth()
            )));
        }
        Ok(())
    }

    fn check_leaf_fn(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.num_leaves() {
            return Err(Error::Parameter(format!(
                "function has {} values for {} leaves",
                f.len(),
                self.num_leaves()
            )));
        }
        Ok(())
    }

    pub fn partition(&self, k: usize) -> Result<AtomPartition> {
        self.check_index(k)?;
        let mut atoms: Vec<(Vec<LeafId>, f64)> =
            self.weight[k].iter().map(|&w| (Vec::new(), w)).collect();
        for (leaf, &a) in self.atom_of[k].iter().enumerate() {
            atoms[a].0.push(leaf);
        }
        Ok(AtomPartition { time_index: k, observable: self.observable.clone(), atoms })
    }

    /// Conditional expectation per atom at `k`.
    pub fn atom_means(&self, f: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check_index(k)?;
        self.check_leaf_fn(f)?;
        let mut sums = vec![0.0; self.num_atoms(k)];
        for (leaf, &a) in self.atom_of[k].iter().enumerate() {
            sums[a] += self.leaf_weight[leaf] * f[leaf];
        }
        for (s, w) in sums.iter_mut().zip(&self.weight[k]) {
            *s /= w;
        }
        Ok(sums)
    }

    /// `E[f | F_k]` as a function of the leaf.
    pub fn cond_expectation(&self, f: &[f64], k: usize) -> Result<Vec<f64>> {
        let means = self.atom_means(f, k)?;
        Ok(self.atom_of[k].iter().map(|&a| means[a]).collect())
    }

    pub fn expectation(&self, f: &[f64]) -> Result<f64> {
        self.check_leaf_fn(f)?;
        Ok(self.leaf_weight.iter().zip(f).map(|(w, x)| w * x).sum())
    }

    /// Whether every atom of `fine` lies inside one atom of `self` at every
    /// time index, i.e. `self` carries no more information than `fine`.
    pub fn is_coarser_than(&self, fine: &Filtration) -> bool {
        if self.depth() != fine.depth() || self.num_leaves() != fine.num_leaves() {
            return false;
        }
        (0..=self.depth()).all(|k| {
            let mut image = vec![usize::MAX; fine.num_atoms(k)];
            (0..self.num_leaves()).all(|leaf| {
                let slot = &mut image[fine.atom_of(k, leaf)];
                let coarse = self.atom_of(k, leaf);
                if *slot == usize::MAX {
                    *slot = coarse;
                }
                *slot == coarse
            })
        })
    }
}

/// The atoms of one observable's filtration at one time index.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomPartition {
    pub time_index: usize,
    pub observable: String,
    /// Leaves of each atom with the atom's total weight.
    pub atoms: Vec<(Vec<LeafId>, f64)>,
}

impl AtomPartition {
    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
}

/// One scenario of a space: its leaf, weight and every observable's path.
#[derive(Debug, Clone)]
pub struct LeafScenario {
    pub leaf: LeafId,
    pub node: NodeId,
    pub weight: f64,
    pub paths: BTreeMap<String, StepPath>,
}

pub fn leaf_scenarios(space: &CoupledSpace) -> Result<Vec<LeafScenario>> {
    let tree = space.tree();
    (0..tree.num_leaves())
        .map(|leaf| {
            let paths = space
                .observable_names()
                .map(|name| Ok((name.to_string(), space.leaf_path(name, leaf)?)))
                .collect::<Result<_>>()?;
            Ok(LeafScenario {
                leaf,
                node: tree.leaves()[leaf],
                weight: tree.leaf_weights()[leaf],
                paths,
            })
        })
        .collect()
}

pub fn atom_partition(space: &CoupledSpace, observable: &str, k: usize) -> Result<AtomPartition> {
    space.filtration(observable)?.partition(k)
}

pub fn cond_expectation(
    space: &CoupledSpace,
    f: &[f64],
    observable: &str,
    k: usize,
) -> Result<Vec<f64>> {
    space.filtration(observable)?.cond_expectation(f, k)
}

pub fn expectation(space: &CoupledSpace, f: &[f64]) -> Result<f64> {
    let w = space.tree().leaf_weights();
    if f.len() != w.len() {
        return Err(Error::Parameter(format!(
            "function has {} values for {} leaves",
            f.len(),
            w.len()
        )));
    }
    Ok(w.iter().zip(f).map(|(w, x)| w * x).sum())
}

/// Indicator vector of a set of leaves.
pub fn indicator(num_leaves: usize, set: &[LeafId]) -> Result<Vec<f64>> {
    let mut f = vec![0.0; num_leaves];
    for &leaf in set {
        if leaf >= num_leaves {
            return Err(Error::Parameter(format!("leaf {leaf} out of range")));
        }
        f[leaf] = 1.0;
    }
    Ok(f)
}

/// Seeded random spaces for property tests and fixtures.
pub mod random {
    use rand::Rng;

    use super::*;

    /// Random tree of the given depth with 1 to `max_branching` children per
    /// node, at most `max_leaves` leaves, and one observable `"X"` drawn from
    /// a small integer alphabet (so that siblings often share values and the
    /// filtration is strictly coarser than the tree).
    pub fn random_space<R: Rng>(
        rng: &mut R,
        depth: usize,
        max_branching: usize,
        max_leaves: usize,
    ) -> CoupledSpace {
        let times = TimeGrid::uniform(1.0, depth.max(1)).unwrap();
        let depth = times.len() - 1;
        loop {
            let mut parent = vec![None];
            let mut raw_prob = vec![1.0];
            let mut frontier = vec![0usize];
            for _ in 0..depth {
                let mut next = Vec::new();
                for &node in &frontier {
                    let kids = rng.gen_range(1..=max_branching);
                    let w: Vec<f64> = (0..kids).map(|_| rng.gen_range(1..=4) as f64).collect();
                    let total: f64 = w.iter().sum();
                    for wi in w {
                        parent.push(Some(node));
                        raw_prob.push(wi / total);
                        next.push(parent.len() - 1);
                    }
                }
                frontier = next;
            }
            if frontier.len() > max_leaves {
                continue;
            }
            let tree = ScenarioTree::new(times.clone(), parent, raw_prob).unwrap();
            let mut x = vec![0.0; tree.num_nodes()];
            for (node, slot) in x.iter_mut().enumerate() {
                *slot = if node == tree.root() { 0.0 } else { rng.gen_range(-2..=2) as f64 };
            }
            return CoupledSpace::new(tree, "random").with_observable("X", x).unwrap();
        }
    }
}
