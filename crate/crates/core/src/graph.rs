//! Directed communication topologies, activation schedules, and the
//! joint-connectivity check used to validate time-varying runs.
//!
//! Edges are stored as `(receiver, sender)` pairs: `(j, i)` means node `j`
//! may receive from node `i`. This is also the order used by the graph file
//! format, where ids are 1-based; the in-memory API is 0-based.

use std::collections::BTreeMap;

use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("node {node} out of range for {n} nodes")]
    NodeOutOfRange { node: usize, n: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge (receiver {receiver}, sender {sender})")]
    DuplicateEdge { receiver: usize, sender: usize },
    #[error("active edge (receiver {receiver}, sender {sender}) not in the base graph")]
    NotInBaseGraph { receiver: usize, sender: usize },
    #[error("horizon {horizon} is not a multiple of the window length {window}")]
    HorizonNotDivisible { horizon: usize, window: usize },
    #[error("window length must be at least 1")]
    ZeroWindow,
    #[error("schedule covers {have} rounds but round {want} was requested")]
    ScheduleTooShort { have: usize, want: usize },
    #[error("explicit schedule round {round} lists {have} nodes, graph has {n}")]
    ScheduleShapeMismatch { round: usize, have: usize, n: usize },
    #[error("malformed graph file: {0}")]
    BadFile(String),
    #[error("edge probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("could not generate a strongly connected graph (model {model}, {attempts} attempts)")]
    GenerationFailed { model: String, attempts: usize },
}

/// Static topology: node count plus in/out adjacency, 0-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DirectedGraph {
    n: usize,
    out: Vec<Vec<usize>>,
    inn: Vec<Vec<usize>>,
}

impl DirectedGraph {
    /// Builds a graph from `(receiver, sender)` pairs, 0-based.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, GraphError> {
        if n < 2 {
            return Err(GraphError::TooFewNodes(n));
        }
        let mut out = vec![Vec::new(); n];
        let mut inn = vec![Vec::new(); n];
        for (receiver, sender) in edges {
            if receiver >= n {
                return Err(GraphError::NodeOutOfRange { node: receiver, n });
            }
            if sender >= n {
                return Err(GraphError::NodeOutOfRange { node: sender, n });
            }
            if receiver == sender {
                return Err(GraphError::SelfLoop(receiver));
            }
            if out[sender].contains(&receiver) {
                return Err(GraphError::DuplicateEdge { receiver, sender });
            }
            out[sender].push(receiver);
            inn[receiver].push(sender);
        }
        for list in out.iter_mut().chain(inn.iter_mut()) {
            list.sort_unstable();
        }
        Ok(DirectedGraph { n, out, inn })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Out-neighbors of `j`: nodes `j` may send to. Sorted ascending.
    pub fn out_neighbors(&self, j: usize) -> &[usize] {
        &self.out[j]
    }

    /// In-neighbors of `j`: nodes `j` may receive from. Sorted ascending.
    pub fn in_neighbors(&self, j: usize) -> &[usize] {
        &self.inn[j]
    }

    pub fn out_degree(&self, j: usize) -> usize {
        self.out[j].len()
    }

    pub fn in_degree(&self, j: usize) -> usize {
        self.inn[j].len()
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    /// Iterates `(receiver, sender)` pairs in (sender, receiver) order.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.out
            .iter()
            .enumerate()
            .flat_map(|(sender, receivers)| receivers.iter().map(move |&r| (r, sender)))
    }

    pub fn has_edge(&self, receiver: usize, sender: usize) -> bool {
        self.out[sender].binary_search(&receiver).is_ok()
    }

    /// True iff the per-node activity is symmetric: every edge has its reverse.
    pub fn is_symmetric(&self) -> bool {
        self.edges().all(|(r, s)| self.has_edge(s, r))
    }

    /// Adds the reverse of every edge, producing a symmetric graph.
    pub fn symmetrized(&self) -> DirectedGraph {
        let mut edges: Vec<(usize, usize)> = self.edges().collect();
        for (r, s) in self.edges() {
            if !self.has_edge(s, r) {
                edges.push((s, r));
            }
        }
        DirectedGraph::new(self.n, edges).expect("symmetrizing preserves validity")
    }

    /// Graph file format: `{"n": int, "edges": [[receiver, sender], ...]}`
    /// with 1-based node ids, receiver first.
    pub fn to_json(&self) -> Value {
        let edges: Vec<Value> = self.edges().map(|(r, s)| json!([r + 1, s + 1])).collect();
        json!({ "n": self.n, "edges": edges })
    }

    /// Parses the 1-based graph file format.
    pub fn from_json(v: &Value) -> Result<Self, GraphError> {
        let obj = v
            .as_object()
            .ok_or_else(|| GraphError::BadFile("expected an object".into()))?;
        let n = obj
            .get("n")
            .and_then(Value::as_u64)
            .ok_or_else(|| GraphError::BadFile("missing integer field \"n\"".into()))?
            as usize;
        let edges = obj
            .get("edges")
            .and_then(Value::as_array)
            .ok_or_else(|| GraphError::BadFile("missing array field \"edges\"".into()))?;
        let mut pairs = Vec::with_capacity(edges.len());
        for e in edges {
            let pair = e.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
                GraphError::BadFile(format!("edge {e} is not a [receiver, sender] pair"))
            })?;
            let r = pair[0]
                .as_u64()
                .filter(|&x| x >= 1)
                .ok_or_else(|| GraphError::BadFile(format!("bad receiver in edge {e}")))?;
            let s = pair[1]
                .as_u64()
                .filter(|&x| x >= 1)
                .ok_or_else(|| GraphError::BadFile(format!("bad sender in edge {e}")))?;
            pairs.push((r as usize - 1, s as usize - 1));
        }
        DirectedGraph::new(n, pairs)
    }
}

/// True iff every ordered pair of distinct nodes is joined by a directed path.
pub fn is_strongly_connected(g: &DirectedGraph) -> bool {
    reaches_all(g, |j| g.out_neighbors(j)) && reaches_all(g, |j| g.in_neighbors(j))
}

fn reaches_all<'a>(g: &'a DirectedGraph, next: impl Fn(usize) -> &'a [usize]) -> bool {
    let mut seen = vec![false; g.n()];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(j) = stack.pop() {
        for &l in next(j) {
            if !seen[l] {
                seen[l] = true;
                count += 1;
                stack.push(l);
            }
        }
    }
    count == g.n()
}

#[derive(Clone, Debug)]
enum ScheduleRounds {
    AlwaysOn,
    /// round -> node -> sorted active out-neighbor list
    Explicit(Vec<Vec<Vec<usize>>>),
}

/// A base graph plus, per round, the subset of out-neighbors each node
/// actually sends to.
#[derive(Clone, Debug)]
pub struct EdgeSchedule {
    base: DirectedGraph,
    rounds: ScheduleRounds,
}

impl EdgeSchedule {
    /// Every edge active in every round.
    pub fn always_on(base: DirectedGraph) -> Self {
        EdgeSchedule { base, rounds: ScheduleRounds::AlwaysOn }
    }

    /// Explicit per-round active sets; each must be a subset of the static
    /// out-neighborhood.
    pub fn explicit(base: DirectedGraph, rounds: Vec<Vec<Vec<usize>>>) -> Result<Self, GraphError> {
        let mut canonical = Vec::with_capacity(rounds.len());
        for (k, mut per_node) in rounds.into_iter().enumerate() {
            if per_node.len() != base.n() {
                return Err(GraphError::ScheduleShapeMismatch {
                    round: k,
                    have: per_node.len(),
                    n: base.n(),
                });
            }
            for (j, active) in per_node.iter_mut().enumerate() {
                active.sort_unstable();
                active.dedup();
                for &l in active.iter() {
                    if !base.has_edge(l, j) {
                        return Err(GraphError::NotInBaseGraph { receiver: l, sender: j });
                    }
                }
            }
            canonical.push(per_node);
        }
        Ok(EdgeSchedule { base, rounds: ScheduleRounds::Explicit(canonical) })
    }

    pub fn base(&self) -> &DirectedGraph {
        &self.base
    }

    /// Rounds covered by an explicit schedule; `None` for always-on.
    pub fn explicit_horizon(&self) -> Option<usize> {
        match &self.rounds {
            ScheduleRounds::AlwaysOn => None,
            ScheduleRounds::Explicit(r) => Some(r.len()),
        }
    }

    pub fn is_always_on(&self) -> bool {
        matches!(self.rounds, ScheduleRounds::AlwaysOn)
    }

    /// Active out-set of node `j` at round `k`.
    pub fn active_out(&self, k: usize, j: usize) -> Result<&[usize], GraphError> {
        match &self.rounds {
            ScheduleRounds::AlwaysOn => Ok(self.base.out_neighbors(j)),
            ScheduleRounds::Explicit(rounds) => rounds
                .get(k)
                .map(|per_node| per_node[j].as_slice())
                .ok_or(GraphError::ScheduleTooShort { have: rounds.len(), want: k }),
        }
    }

    /// Snapshot of every node's active out-set at round `k`.
    pub fn active_sets(&self, k: usize) -> Result<Vec<Vec<usize>>, GraphError> {
        (0..self.base.n())
            .map(|j| self.active_out(k, j).map(<[usize]>::to_vec))
            .collect()
    }

    /// True iff round `k`'s activity is symmetric edge-by-edge.
    pub fn is_symmetric_at(&self, k: usize) -> Result<bool, GraphError> {
        let sets = self.active_sets(k)?;
        for (j, active) in sets.iter().enumerate() {
            for &l in active {
                if !sets[l].contains(&j) {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    /// Union graph over rounds `[from, from + len)`.
    pub fn union_graph(&self, from: usize, len: usize) -> Result<DirectedGraph, GraphError> {
        let n = self.base.n();
        let mut edges = Vec::new();
        let mut present = vec![vec![false; n]; n];
        for k in from..from + len {
            for j in 0..n {
                for &l in self.active_out(k, j)? {
                    if !present[j][l] {
                        present[j][l] = true;
                        edges.push((l, j));
                    }
                }
            }
        }
        DirectedGraph::new(n, edges)
    }
}

/// Checks the joint-connectivity condition: for every length-`window` block
/// of rounds in `[0, horizon)`, the union graph is strongly connected.
/// `horizon` must be a positive multiple of `window`.
pub fn verify_joint_connectivity(
    schedule: &EdgeSchedule,
    window: usize,
    horizon: usize,
) -> Result<bool, GraphError> {
    if window == 0 {
        return Err(GraphError::ZeroWindow);
    }
    if horizon == 0 || horizon % window != 0 {
        return Err(GraphError::HorizonNotDivisible { horizon, window });
    }
    if schedule.is_always_on() {
        return Ok(is_strongly_connected(schedule.base()));
    }
    for tau in 0..horizon / window {
        let union = schedule.union_graph(tau * window, window)?;
        if !is_strongly_connected(&union) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// What a node knows about one of its in-neighbors under the two-hop
/// assumption: the in-neighbor's out-degree and in-neighborhood.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InNeighborInfo {
    pub out_degree: usize,
    pub in_neighbors: Vec<usize>,
}

/// Local topology around node `owner`: one entry per in-neighbor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TwoHopView {
    pub owner: usize,
    pub per_in_neighbor: BTreeMap<usize, InNeighborInfo>,
}

/// Reads off, for each in-neighbor `i` of `j`, the exact out-degree and
/// in-neighborhood of `i`.
pub fn two_hop_view(g: &DirectedGraph, j: usize) -> TwoHopView {
    let per_in_neighbor = g
        .in_neighbors(j)
        .iter()
        .map(|&i| {
            (
                i,
                InNeighborInfo {
                    out_degree: g.out_degree(i),
                    in_neighbors: g.in_neighbors(i).to_vec(),
                },
            )
        })
        .collect();
    TwoHopView { owner: j, per_in_neighbor }
}

/// Test-utility graph generators. Every model yields a strongly connected
/// digraph or fails loudly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GraphModel {
    /// Directed cycle 1 -> 2 -> ... -> n -> 1.
    Ring,
    /// All ordered pairs.
    Complete,
    /// Each ordered pair independently with probability `p`; rejection-sampled
    /// until strongly connected.
    Erdos { p: f64 },
    /// Directed cycle over a random node permutation plus `extra` random chords.
    CycleChords { extra: usize },
}

pub fn generate(n: usize, model: GraphModel, seed: u64) -> Result<DirectedGraph, GraphError> {
    use rand::{Rng, SeedableRng};
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    match model {
        GraphModel::Ring => {
            DirectedGraph::new(n, (0..n).map(|j| ((j + 1) % n, j)))
        }
        GraphModel::Complete => DirectedGraph::new(
            n,
            (0..n).flat_map(|s| (0..n).filter(move |&r| r != s).map(move |r| (r, s))),
        ),
        GraphModel::Erdos { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(GraphError::BadProbability(p));
            }
            const ATTEMPTS: usize = 1000;
            for _ in 0..ATTEMPTS {
                let mut edges = Vec::new();
                for s in 0..n {
                    for r in 0..n {
                        if r != s && rng.random::<f64>() < p {
                            edges.push((r, s));
                        }
                    }
                }
                let g = DirectedGraph::new(n, edges)?;
                if is_strongly_connected(&g) {
                    return Ok(g);
                }
            }
            Err(GraphError::GenerationFailed { model: format!("erdos(p={p})"), attempts: ATTEMPTS })
        }
        GraphModel::CycleChords { extra } => {
            let mut perm: Vec<usize> = (0..n).collect();
            // Fisher-Yates on a seeded generator keeps output stable.
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let mut edges: Vec<(usize, usize)> =
                (0..n).map(|i| (perm[(i + 1) % n], perm[i])).collect();
            let mut added = 0;
            let mut guard = 0;
            while added < extra && guard < 100 * (extra + 1) {
                guard += 1;
                let s = rng.random_range(0..n);
                let r = rng.random_range(0..n);
                if r != s && !edges.contains(&(r, s)) {
                    edges.push((r, s));
                    added += 1;
                }
            }
            DirectedGraph::new(n, edges)
        }
    }
}
