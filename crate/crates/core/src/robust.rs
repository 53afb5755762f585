//! Order logic behind contributor selection, plus reference oracles.
//!
//! * [`count_and_accept`] keeps a per-coordinate relation once more than `2f` distinct
//!   reporters broadcast it.
//! * [`topo_sort`] turns accepted relations into an ascending sequence.
//! * [`trimmed_mean_oracle`] is the plaintext reference the protocol output is checked against.
//! * [`epsilon_bound`] evaluates the convergence bound `(epsilon, zeta)`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RobustError {
    #[error("need more than 2f = {double_f} values, got {n}")]
    TooFewValues { n: usize, double_f: usize },
    #[error("row {row} has {got} coordinates, expected {expected}")]
    RaggedInput { row: usize, got: usize, expected: usize },
    #[error("invalid bound inputs: {0}")]
    InvalidBoundInputs(&'static str),
}

/// How `w_p^k` compares to `w_q^k` for a subject pair `(p, q)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Relation {
    Less,
    Greater,
}

impl Relation {
    pub fn flip(self) -> Self {
        match self {
            Relation::Less => Relation::Greater,
            Relation::Greater => Relation::Less,
        }
    }

    fn symbol(self) -> char {
        match self {
            Relation::Less => '<',
            Relation::Greater => '>',
        }
    }
}

/// One reporter's per-coordinate ordering of the claimed models of `p` and `q`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationClaim {
    pub reporter: usize,
    pub p: usize,
    pub q: usize,
    #[serde(serialize_with = "ser_relations", deserialize_with = "de_relations")]
    pub relations: Vec<Relation>,
}

fn ser_relations<S: Serializer>(rel: &[Relation], s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&rel.iter().map(|r| r.symbol()).collect::<String>())
}

fn de_relations<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Relation>, D::Error> {
    String::deserialize(d)?
        .chars()
        .map(|c| match c {
            '<' => Ok(Relation::Less),
            '>' => Ok(Relation::Greater),
            other => Err(serde::de::Error::custom(format!("bad relation symbol {other:?}"))),
        })
        .collect()
}

impl RelationClaim {
    /// `(smaller, larger)` at coordinate `k`.
    pub fn edge(&self, k: usize) -> (usize, usize) {
        match self.relations[k] {
            Relation::Less => (self.p, self.q),
            Relation::Greater => (self.q, self.p),
        }
    }
}

impl fmt::Display for RelationClaim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rel: String = self.relations.iter().map(|r| r.symbol()).collect();
        write!(f, "P{} says P{} {} P{}", self.reporter, self.p, rel, self.q)
    }
}

/// Relations accepted for each coordinate, as `(smaller, larger)` edges.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AcceptedRelations {
    edges: Vec<BTreeSet<(usize, usize)>>,
    /// Pairs for which both directions passed the threshold; excluded from `edges`.
    conflicts: Vec<BTreeSet<(usize, usize)>>,
}

impl AcceptedRelations {
    pub fn dimension(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self, k: usize) -> &BTreeSet<(usize, usize)> {
        &self.edges[k]
    }

    pub fn conflicts(&self, k: usize) -> &BTreeSet<(usize, usize)> {
        &self.conflicts[k]
    }

    pub fn contains(&self, k: usize, smaller: usize, larger: usize) -> bool {
        self.edges[k].contains(&(smaller, larger))
    }

    pub fn total(&self) -> usize {
        self.edges.iter().map(BTreeSet::len).sum()
    }

    pub fn graph(&self, k: usize) -> RelationGraph {
        RelationGraph::from_edges(self.edges[k].iter().copied())
    }

    /// Flattened `(k, smaller, larger)` triples.
    pub fn triples(&self) -> Vec<(usize, usize, usize)> {
        self.edges
            .iter()
            .enumerate()
            .flat_map(|(k, set)| set.iter().map(move |&(a, b)| (k, a, b)))
            .collect()
    }
}

/// Accepts a relation at a coordinate iff more than `2f` distinct reporters claim it.
///
/// Claims of the wrong length or about a participant paired with itself are ignored.
pub fn count_and_accept(claims: &[RelationClaim], f: usize, m: usize) -> AcceptedRelations {
    let mut reporters: BTreeMap<(usize, usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for claim in claims {
        if claim.p == claim.q || claim.relations.len() != m {
            continue;
        }
        for k in 0..m {
            let (lo, hi) = claim.edge(k);
            reporters.entry((k, lo, hi)).or_default().insert(claim.reporter);
        }
    }
    let mut edges = vec![BTreeSet::new(); m];
    let mut conflicts = vec![BTreeSet::new(); m];
    for ((k, lo, hi), who) in &reporters {
        if who.len() > 2 * f {
            edges[*k].insert((*lo, *hi));
        }
    }
    for k in 0..m {
        let both: Vec<(usize, usize)> = edges[k]
            .iter()
            .filter(|&&(a, b)| a < b && edges[k].contains(&(b, a)))
            .copied()
            .collect();
        for (a, b) in both {
            edges[k].remove(&(a, b));
            edges[k].remove(&(b, a));
            conflicts[k].insert((a, b));
        }
    }
    AcceptedRelations { edges, conflicts }
}

/// Directed graph for one coordinate; an edge `a -> b` means `w_a < w_b`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RelationGraph {
    nodes: BTreeSet<usize>,
    edges: BTreeSet<(usize, usize)>,
}

impl RelationGraph {
    /// Builds a graph over the endpoints of `edges`; self-edges are dropped.
    pub fn from_edges<I: IntoIterator<Item = (usize, usize)>>(edges: I) -> Self {
        let mut g = RelationGraph::default();
        for (a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    pub fn with_nodes<I: IntoIterator<Item = usize>>(mut self, nodes: I) -> Self {
        self.nodes.extend(nodes);
        self
    }

    pub fn add_edge(&mut self, a: usize, b: usize) {
        if a != b {
            self.nodes.insert(a);
            self.nodes.insert(b);
            self.edges.insert((a, b));
        }
    }

    pub fn nodes(&self) -> &BTreeSet<usize> {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Drops `excluded` nodes and every edge touching them.
    pub fn without(&self, excluded: &BTreeSet<usize>) -> Self {
        RelationGraph {
            nodes: self.nodes.difference(excluded).copied().collect(),
            edges: self
                .edges
                .iter()
                .filter(|(a, b)| !excluded.contains(a) && !excluded.contains(b))
                .copied()
                .collect(),
        }
    }

    fn successors(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut succ: BTreeMap<usize, Vec<usize>> = self.nodes.iter().map(|&v| (v, vec![])).collect();
        for &(a, b) in &self.edges {
            succ.entry(a).or_default().push(b);
        }
        succ
    }
}

/// Ascending sequence produced by [`topo_sort`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortedSequence {
    pub order: Vec<usize>,
    /// Set when the relations only partially order the nodes and `order` is the longest chain.
    pub partial: bool,
}

#[derive(Clone, Debug, Error, PartialEq, Eq, Serialize, Deserialize)]
#[error("relations contain a cycle through {members:?}")]
pub struct CycleReport {
    pub members: Vec<usize>,
}

/// Sorts the nodes of `g` in ascending order.
///
/// When reachability totally orders the nodes the result is that unique order. Otherwise
/// the longest chain is returned, ties going to the lexicographically smallest sequence of
/// ids, and `partial` is set.
pub fn topo_sort(g: &RelationGraph) -> Result<SortedSequence, CycleReport> {
    let succ = g.successors();
    let mut indeg: BTreeMap<usize, usize> = g.nodes.iter().map(|&v| (v, 0)).collect();
    for &(_, b) in &g.edges {
        *indeg.get_mut(&b).expect("edge endpoints are nodes") += 1;
    }
    let mut ready: BTreeSet<usize> = indeg.iter().filter(|(_, &d)| d == 0).map(|(&v, _)| v).collect();
    let mut order = Vec::with_capacity(g.nodes.len());
    while let Some(v) = ready.pop_first() {
        order.push(v);
        for &w in &succ[&v] {
            let d = indeg.get_mut(&w).expect("successor is a node");
            *d -= 1;
            if *d == 0 {
                ready.insert(w);
            }
        }
    }
    if order.len() < g.nodes.len() {
        return Err(CycleReport {
            members: cycle_members(g),
        });
    }

    let total = order.windows(2).all(|w| g.edges.contains(&(w[0], w[1])));
    if total {
        return Ok(SortedSequence {
            order,
            partial: false,
        });
    }

    // Longest path over the topological order; among equal lengths keep the
    // lexicographically smallest id sequence.
    let mut best: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &v in &order {
        let mut chain: Vec<usize> = Vec::new();
        for &(a, b) in &g.edges {
            if b != v {
                continue;
            }
            let cand = &best[&a];
            if cand.len() > chain.len() || (cand.len() == chain.len() && cand < &chain) {
                chain = cand.clone();
            }
        }
        chain.push(v);
        best.insert(v, chain);
    }
    let longest = best
        .into_values()
        .reduce(|a, b| {
            if b.len() > a.len() || (b.len() == a.len() && b < a) {
                b
            } else {
                a
            }
        })
        .unwrap_or_default();
    Ok(SortedSequence {
        order: longest,
        partial: true,
    })
}

/// Nodes left after repeatedly peeling sources and sinks: exactly those on or between cycles.
fn cycle_members(g: &RelationGraph) -> Vec<usize> {
    let mut alive: BTreeSet<usize> = g.nodes.clone();
    loop {
        let peel: Vec<usize> = alive
            .iter()
            .filter(|&&v| {
                let has_in = g.edges.iter().any(|&(a, b)| b == v && alive.contains(&a));
                let has_out = g.edges.iter().any(|&(a, b)| a == v && alive.contains(&b));
                !has_in || !has_out
            })
            .copied()
            .collect();
        if peel.is_empty() {
            return alive.into_iter().collect();
        }
        for v in peel {
            alive.remove(&v);
        }
    }
}

/// Per-coordinate mean after dropping the `f` smallest and `f` largest values.
pub fn trimmed_mean_oracle(values: &[Vec<f64>], f: usize) -> Result<Vec<f64>, RobustError> {
    let n = values.len();
    if n <= 2 * f {
        return Err(RobustError::TooFewValues { n, double_f: 2 * f });
    }
    let m = values[0].len();
    for (row, v) in values.iter().enumerate() {
        if v.len() != m {
            return Err(RobustError::RaggedInput {
                row,
                got: v.len(),
                expected: m,
            });
        }
    }
    Ok((0..m)
        .map(|k| {
            let mut col: Vec<f64> = values.iter().map(|v| v[k]).collect();
            col.sort_by(f64::total_cmp);
            let kept = &col[f..n - f];
            kept.iter().sum::<f64>() / kept.len() as f64
        })
        .collect())
}

/// Inputs of the convergence bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    /// Model dimension.
    pub m: usize,
    pub n: usize,
    pub f: usize,
    pub tau: f64,
    pub delta: f64,
    /// Sub-exponential parameter.
    pub z: f64,
    /// Smallest local dataset size.
    pub d_min: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonBound {
    pub epsilon: f64,
    /// The probability expression evaluated exactly as printed, whose second exponent
    /// carries no minus sign. It is usually far below zero.
    pub zeta_literal: f64,
    /// `zeta_literal` clamped to `[0, 1]`.
    pub zeta_literal_clamped: f64,
    /// Same expression with the second exponent negated, clamped to `[0, 1]`.
    pub zeta_sign_corrected: f64,
}

/// `epsilon = sqrt(m) (tau + 3 f delta / N) / (1 - 2f/N)` and the matching `zeta`.
pub fn epsilon_bound(b: &BoundInputs) -> Result<EpsilonBound, RobustError> {
    if b.m == 0 {
        return Err(RobustError::InvalidBoundInputs("m must be positive"));
    }
    if b.n <= 3 * b.f + 2 {
        return Err(RobustError::InvalidBoundInputs("requires N > 3f + 2"));
    }
    if !(b.tau >= 0.0 && b.delta >= 0.0) {
        return Err(RobustError::InvalidBoundInputs("tau and delta must be non-negative"));
    }
    if !(b.z > 0.0) {
        return Err(RobustError::InvalidBoundInputs("z must be positive"));
    }
    if b.d_min == 0 {
        return Err(RobustError::InvalidBoundInputs("d_min must be at least 1"));
    }
    let (m, n, f) = (b.m as f64, b.n as f64, b.f as f64);
    let shrink = 1.0 - 2.0 * f / n;
    if shrink <= 0.0 {
        return Err(RobustError::InvalidBoundInputs("1 - 2f/N must be positive"));
    }
    let epsilon = m.sqrt() * (b.tau + 3.0 * f * b.delta / n) / shrink;

    let d = b.d_min as f64;
    let rate = |x: f64| (x / (2.0 * b.z)).min(x * x / (2.0 * b.z * b.z));
    let first = 2.0 * m * (-(n - f) * d * rate(b.tau)).exp();
    let literal_second = 2.0 * (n - f) * m * (d * rate(b.delta)).exp();
    let corrected_second = 2.0 * (n - f) * m * (-d * rate(b.delta)).exp();
    let zeta_literal = 1.0 - first - literal_second;
    Ok(EpsilonBound {
        epsilon,
        zeta_literal,
        zeta_literal_clamped: zeta_literal.clamp(0.0, 1.0),
        zeta_sign_corrected: (1.0 - first - corrected_second).clamp(0.0, 1.0),
    })
}
