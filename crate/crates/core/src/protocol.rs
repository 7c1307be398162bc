//! Per-node state machine for the linear averaging iteration.
//!
//! A node keeps the 2-vector state `x = [y, z]`, initialized to `[V, 1]`, and
//! per-channel running sums of everything it has sent. Two execution modes:
//!
//! * `General` - each round the node sends `w_{lj} * x_j` to every active
//!   out-neighbor and folds received shares into its next state. Running sums
//!   are kept per out-edge.
//! * `RatioRunningSum` - the static-weight ratio iteration restated over
//!   cumulative running sums: the node broadcasts its updated cumulative sum
//!   and receivers add the difference of two consecutive broadcasts. This is
//!   the form that lets out-neighbors audit the sender later, and with the
//!   compensated accumulators it reproduces the `General` trajectory
//!   bit-for-bit.
//!
//! State transitions are pure per node: `emit` and `apply_update` touch only
//! the node's own state, so a driver may evaluate all nodes of a phase in any
//! order (or in parallel) with identical results.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arith::{Arithmetic, Pair, Scalar, SigmaAcc};
use crate::graph::DirectedGraph;
use crate::weights::WeightColumn;

/// Below this magnitude of `z` the ratio `y/z` is considered degenerate.
/// Unreachable in fault-free runs with valid weights.
pub const Z_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("node {node}: weight column support does not match the active out-set")]
    WeightSupportMismatch { node: usize },
    #[error("node {node}: running-sum mode requires the static uniform column 1/(1+D+)")]
    NotRatioWeights { node: usize },
    #[error("node {node}: running-sum mode requires the full out-neighborhood active")]
    NotAllActive { node: usize },
    #[error("node {node}: message mode does not match execution mode")]
    PayloadMismatch { node: usize },
    #[error("node {node}: duplicate message from sender {sender}")]
    DuplicateSender { node: usize, sender: usize },
    #[error("node {node}: message from {sender}, which is not an in-neighbor")]
    UnknownSender { node: usize, sender: usize },
    #[error("node {node}: message for round {got}, node is at round {at}")]
    WrongRound { node: usize, got: usize, at: usize },
    #[error("node {node}: message addressed to {addressee}")]
    WrongReceiver { node: usize, addressee: usize },
    #[error("node {node}: |z| = {z:e} is below the degenerate-state floor")]
    DegenerateState { node: usize, z: f64 },
}

/// Execution mode of the iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    General,
    RatioRunningSum,
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ExecMode::General => write!(f, "general"),
            ExecMode::RatioRunningSum => write!(f, "ratio_running_sum"),
        }
    }
}

/// The slice of topology a node needs: its own neighborhoods plus the
/// out-degree of every in-neighbor (known under the two-hop assumption).
#[derive(Clone, Debug)]
pub struct NodeTopology {
    pub id: usize,
    pub out_neighbors: Vec<usize>,
    pub in_neighbors: Vec<usize>,
    pub in_neighbor_out_degree: BTreeMap<usize, usize>,
}

impl NodeTopology {
    pub fn of(g: &DirectedGraph, j: usize) -> Self {
        NodeTopology {
            id: j,
            out_neighbors: g.out_neighbors(j).to_vec(),
            in_neighbors: g.in_neighbors(j).to_vec(),
            in_neighbor_out_degree: g
                .in_neighbors(j)
                .iter()
                .map(|&i| (i, g.out_degree(i)))
                .collect(),
        }
    }

    pub fn out_degree(&self) -> usize {
        self.out_neighbors.len()
    }
}

/// Running sums of sent mass, per mode.
#[derive(Clone, Debug)]
pub enum SigmaOut<A: Arithmetic> {
    /// General mode: one accumulator per static out-neighbor.
    PerOutNeighbor(BTreeMap<usize, Pair<A::Accum>>),
    /// Running-sum mode: a single accumulator shared by all out-edges.
    Single(Pair<A::Accum>),
}

fn acc_pair_zero<A: Arithmetic>() -> Pair<A::Accum> {
    Pair::new(A::Accum::zero(), A::Accum::zero())
}

/// Message payload.
#[derive(Clone, Debug)]
pub enum Payload<A: Arithmetic> {
    /// General mode: the weighted share `w_{lj}[k] * x_j[k]`.
    Share(Pair<A::Value>),
    /// Running-sum mode: the cumulative running sum after this round's send.
    RunningSum(Pair<A::Accum>),
}

impl<A: Arithmetic> Payload<A> {
    /// The numeric content as plain values (cumulative sums are rounded).
    pub fn value(&self) -> Pair<A::Value> {
        match self {
            Payload::Share(p) => p.clone(),
            Payload::RunningSum(s) => s.value(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Message<A: Arithmetic> {
    pub sender: usize,
    pub receiver: usize,
    pub round: usize,
    pub payload: Payload<A>,
}

/// Full per-node state.
#[derive(Clone, Debug)]
pub struct NodeState<A: Arithmetic> {
    pub id: usize,
    pub round: usize,
    pub x: Pair<A::Value>,
    /// The node's own retained initial state.
    pub x0: Pair<A::Value>,
    pub sigma_out: SigmaOut<A>,
    /// Running-sum mode: last received cumulative sum per in-neighbor.
    pub sigma_in: BTreeMap<usize, Pair<A::Accum>>,
    /// Running-sum mode: the cumulative sum received one round earlier.
    pub sigma_in_prev: BTreeMap<usize, Pair<A::Accum>>,
    /// Running-sum mode: the very first broadcast received per in-neighbor
    /// (the round-0 running sum), kept for initial-value recovery.
    pub sigma_in_first: BTreeMap<usize, Pair<A::Value>>,
    mode: ExecMode,
    topo: NodeTopology,
}

/// Sets up a node: `x = x0 = [V, 1]`, all running sums zero, round 0.
pub fn init_node<A: Arithmetic>(
    topo: NodeTopology,
    initial_value: &A::Value,
    mode: ExecMode,
) -> NodeState<A> {
    let x = Pair::new(initial_value.clone(), A::Value::one());
    let sigma_out = match mode {
        ExecMode::General => SigmaOut::PerOutNeighbor(
            topo.out_neighbors.iter().map(|&l| (l, acc_pair_zero::<A>())).collect(),
        ),
        ExecMode::RatioRunningSum => SigmaOut::Single(acc_pair_zero::<A>()),
    };
    let sigma_in = topo.in_neighbors.iter().map(|&i| (i, acc_pair_zero::<A>())).collect();
    NodeState {
        id: topo.id,
        round: 0,
        x: x.clone(),
        x0: x,
        sigma_out,
        sigma_in: match mode {
            ExecMode::RatioRunningSum => sigma_in,
            ExecMode::General => BTreeMap::new(),
        },
        sigma_in_prev: BTreeMap::new(),
        sigma_in_first: BTreeMap::new(),
        mode,
        topo,
    }
}

impl<A: Arithmetic> NodeState<A> {
    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn topology(&self) -> &NodeTopology {
        &self.topo
    }

    pub fn out_degree(&self) -> usize {
        self.topo.out_degree()
    }

    /// The node's current output `r = y/z`. Degenerate when `z` underflows
    /// the floor, which only fault-injected or non-ergodic runs can reach.
    pub fn ratio(&self) -> Result<A::Value, ProtocolError> {
        let z_mag = self.x.z.abs_f64();
        if self.x.z.is_zero() || (!A::Value::exact() && z_mag < Z_FLOOR) {
            return Err(ProtocolError::DegenerateState { node: self.id, z: z_mag });
        }
        Ok(self.x.y.clone() / &self.x.z)
    }

    /// Snapshot of the sent-mass running sums, rounded to values.
    pub fn sigma_out_values(&self) -> Vec<(usize, Pair<A::Value>)> {
        match &self.sigma_out {
            SigmaOut::PerOutNeighbor(map) => {
                map.iter().map(|(&l, acc)| (l, acc.value())).collect()
            }
            SigmaOut::Single(acc) => vec![(self.id, acc.value())],
        }
    }

    /// The single running sum in running-sum mode.
    pub fn sigma_single(&self) -> Option<Pair<A::Accum>> {
        match &self.sigma_out {
            SigmaOut::Single(acc) => Some(acc.clone()),
            SigmaOut::PerOutNeighbor(_) => None,
        }
    }

    /// Send phase for the current round.
    ///
    /// General mode: every active out-neighbor `l` gets the share
    /// `w_{lj} * x_j` and the edge's running sum advances by that share;
    /// inactive edges are untouched. Running-sum mode: the single running sum
    /// advances by `x_j/(1+D+)` and the new cumulative value is broadcast to
    /// all out-neighbors.
    pub fn emit(
        &mut self,
        column: &WeightColumn<A::Value>,
        active: &[usize],
    ) -> Result<Vec<Message<A>>, ProtocolError> {
        match self.mode {
            ExecMode::General => self.emit_general(column, active),
            ExecMode::RatioRunningSum => self.emit_running_sum(column, active),
        }
    }

    fn emit_general(
        &mut self,
        column: &WeightColumn<A::Value>,
        active: &[usize],
    ) -> Result<Vec<Message<A>>, ProtocolError> {
        if column.off.len() != active.len()
            || !column.off.iter().all(|(l, _)| active.contains(l))
        {
            return Err(ProtocolError::WeightSupportMismatch { node: self.id });
        }
        let sigma = match &mut self.sigma_out {
            SigmaOut::PerOutNeighbor(map) => map,
            SigmaOut::Single(_) => return Err(ProtocolError::PayloadMismatch { node: self.id }),
        };
        let mut messages = Vec::with_capacity(active.len());
        for (l, weight) in &column.off {
            let share = self.x.scale(weight);
            let acc = sigma
                .get_mut(l)
                .ok_or(ProtocolError::WeightSupportMismatch { node: self.id })?;
            *acc = acc.accumulate(&share);
            messages.push(Message {
                sender: self.id,
                receiver: *l,
                round: self.round,
                payload: Payload::Share(share),
            });
        }
        Ok(messages)
    }

    fn emit_running_sum(
        &mut self,
        column: &WeightColumn<A::Value>,
        active: &[usize],
    ) -> Result<Vec<Message<A>>, ProtocolError> {
        if active != self.topo.out_neighbors.as_slice() {
            return Err(ProtocolError::NotAllActive { node: self.id });
        }
        let expected = A::Value::from_ratio(1, 1 + self.topo.out_degree() as i64);
        let uniform = column.diag == expected
            && column.off.len() == self.topo.out_degree()
            && column.off.iter().all(|(l, w)| active.contains(l) && *w == expected);
        if !uniform {
            return Err(ProtocolError::NotRatioWeights { node: self.id });
        }
        let sigma = match &mut self.sigma_out {
            SigmaOut::Single(acc) => acc,
            SigmaOut::PerOutNeighbor(_) => {
                return Err(ProtocolError::PayloadMismatch { node: self.id })
            }
        };
        let increment = self.x.scale(&expected);
        *sigma = sigma.accumulate(&increment);
        let messages = self
            .topo
            .out_neighbors
            .iter()
            .map(|&l| Message {
                sender: self.id,
                receiver: l,
                round: self.round,
                payload: Payload::RunningSum(sigma.clone()),
            })
            .collect();
        Ok(messages)
    }

    /// Update phase: folds this round's inbox into the next state.
    ///
    /// General mode computes `w_{jj} x_j + sum of received shares`; running-sum
    /// mode computes `x_j/(1+D+) + sum of running-sum differences`, refreshing
    /// the stored cumulative values. In both modes received contributions are
    /// added in ascending sender order so runs are bit-reproducible.
    pub fn apply_update(
        &mut self,
        inbox: &[Message<A>],
        self_weight: &A::Value,
    ) -> Result<(), ProtocolError> {
        let mut by_sender: BTreeMap<usize, &Message<A>> = BTreeMap::new();
        for msg in inbox {
            if msg.receiver != self.id {
                return Err(ProtocolError::WrongReceiver {
                    node: self.id,
                    addressee: msg.receiver,
                });
            }
            if msg.round != self.round {
                return Err(ProtocolError::WrongRound {
                    node: self.id,
                    got: msg.round,
                    at: self.round,
                });
            }
            if !self.topo.in_neighbors.contains(&msg.sender) {
                return Err(ProtocolError::UnknownSender { node: self.id, sender: msg.sender });
            }
            if by_sender.insert(msg.sender, msg).is_some() {
                return Err(ProtocolError::DuplicateSender { node: self.id, sender: msg.sender });
            }
        }

        let mut next = self.x.scale(self_weight);
        match self.mode {
            ExecMode::General => {
                for msg in by_sender.values() {
                    match &msg.payload {
                        Payload::Share(share) => next = next.add(share),
                        Payload::RunningSum(_) => {
                            return Err(ProtocolError::PayloadMismatch { node: self.id })
                        }
                    }
                }
            }
            ExecMode::RatioRunningSum => {
                for (&sender, msg) in &by_sender {
                    let cumulative = match &msg.payload {
                        Payload::RunningSum(s) => s.clone(),
                        Payload::Share(_) => {
                            return Err(ProtocolError::PayloadMismatch { node: self.id })
                        }
                    };
                    let previous = self.sigma_in[&sender].clone();
                    let delta = cumulative.delta_since(&previous);
                    next = next.add(&delta);
                    if self.round == 0 {
                        self.sigma_in_first.insert(sender, cumulative.value());
                    }
                    self.sigma_in_prev.insert(sender, previous);
                    self.sigma_in.insert(sender, cumulative);
                }
                // In-neighbors silent this round contribute a zero difference;
                // their stored sums age by one round.
                for &i in &self.topo.in_neighbors {
                    if !by_sender.contains_key(&i) {
                        self.sigma_in_prev.insert(i, self.sigma_in[&i].clone());
                    }
                }
            }
        }
        self.x = next;
        self.round += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{FloatArith, RationalArith};
    use crate::weights::ratio_consensus_weights;
    use num_rational::BigRational;
    use num_traits::Zero;

    fn ring3() -> DirectedGraph {
        DirectedGraph::new(3, [(1, 0), (2, 1), (0, 2)]).unwrap()
    }

    fn init_ring_nodes<A: Arithmetic>(values: [f64; 3], mode: ExecMode) -> Vec<NodeState<A>> {
        let g = ring3();
        values
            .iter()
            .enumerate()
            .map(|(j, &v)| init_node::<A>(NodeTopology::of(&g, j), &A::Value::from_f64_exact(v), mode))
            .collect()
    }

    fn step_ring<A: Arithmetic>(nodes: &mut [NodeState<A>], mode: ExecMode) {
        let g = ring3();
        let w = ratio_consensus_weights::<A::Value>(&g);
        let _ = mode;
        let mut inboxes: Vec<Vec<Message<A>>> = vec![Vec::new(); 3];
        for j in 0..3 {
            let msgs = nodes[j].emit(w.column(j), g.out_neighbors(j)).unwrap();
            for m in msgs {
                inboxes[m.receiver].push(m);
            }
        }
        for (j, inbox) in inboxes.iter().enumerate() {
            let diag = w.column(j).diag.clone();
            nodes[j].apply_update(inbox, &diag).unwrap();
        }
    }

    #[test]
    fn init_sets_x_and_zero_sums() {
        let g = ring3();
        let n = init_node::<FloatArith>(NodeTopology::of(&g, 0), &2.0, ExecMode::RatioRunningSum);
        assert_eq!(n.x, Pair::new(2.0, 1.0));
        assert_eq!(n.x0, Pair::new(2.0, 1.0));
        assert_eq!(n.sigma_single().unwrap().value::<f64>(), Pair::new(0.0, 0.0));
        assert_eq!(n.round, 0);

        let neg = init_node::<FloatArith>(NodeTopology::of(&g, 1), &-4.5, ExecMode::General);
        assert_eq!(neg.x, Pair::new(-4.5, 1.0));
        let zero = init_node::<FloatArith>(NodeTopology::of(&g, 2), &0.0, ExecMode::General);
        assert_eq!(zero.x, Pair::new(0.0, 1.0));
    }

    #[test]
    fn ring_emit_running_sum_example() {
        // node 1 with x=[2,1] and D+=1 advances sigma to [1, 0.5] and
        // broadcasts exactly that value
        let g = ring3();
        let mut node =
            init_node::<FloatArith>(NodeTopology::of(&g, 0), &2.0, ExecMode::RatioRunningSum);
        let w = ratio_consensus_weights::<f64>(&g);
        let msgs = node.emit(w.column(0), g.out_neighbors(0)).unwrap();
        assert_eq!(node.sigma_single().unwrap().value::<f64>(), Pair::new(1.0, 0.5));
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].receiver, 1);
        assert_eq!(msgs[0].payload.value(), Pair::new(1.0, 0.5));
    }

    #[test]
    fn ring_first_round_update_matches_dense_product() {
        // V = [2, 4, 6]: x[1] must be [[4,1],[3,1],[5,1]]
        let mut nodes = init_ring_nodes::<FloatArith>([2.0, 4.0, 6.0], ExecMode::RatioRunningSum);
        step_ring(&mut nodes, ExecMode::RatioRunningSum);
        assert_eq!(nodes[0].x, Pair::new(4.0, 1.0));
        assert_eq!(nodes[1].x, Pair::new(3.0, 1.0));
        assert_eq!(nodes[2].x, Pair::new(5.0, 1.0));
        assert_eq!(nodes[0].ratio().unwrap(), 4.0);
    }

    #[test]
    fn general_mode_inactive_neighbor_keeps_sigma() {
        let g = DirectedGraph::new(3, [(1, 0), (2, 0), (0, 1), (0, 2)]).unwrap();
        let mut node = init_node::<FloatArith>(NodeTopology::of(&g, 0), &3.0, ExecMode::General);
        // only out-neighbor 1 is active this round
        let col = WeightColumn { diag: 0.5, off: vec![(1, 0.5)] };
        let msgs = node.emit(&col, &[1]).unwrap();
        assert_eq!(msgs.len(), 1);
        let sigmas = node.sigma_out_values();
        assert_eq!(sigmas, vec![(1, Pair::new(1.5, 0.25)), (2, Pair::new(0.0, 0.0))]);
    }

    #[test]
    fn empty_active_set_sends_nothing() {
        let g = ring3();
        let mut node = init_node::<FloatArith>(NodeTopology::of(&g, 0), &3.0, ExecMode::General);
        let col = WeightColumn { diag: 1.0, off: vec![] };
        let msgs = node.emit(&col, &[]).unwrap();
        assert!(msgs.is_empty());
        assert_eq!(node.sigma_out_values()[0].1, Pair::new(0.0, 0.0));
        // identity self-weight leaves x unchanged on an empty inbox
        node.apply_update(&[], &1.0).unwrap();
        assert_eq!(node.x, Pair::new(3.0, 1.0));
    }

    #[test]
    fn inbox_validation_errors() {
        let g = ring3();
        let mut node = init_node::<FloatArith>(NodeTopology::of(&g, 0), &1.0, ExecMode::General);
        let msg = |sender: usize| Message::<FloatArith> {
            sender,
            receiver: 0,
            round: 0,
            payload: Payload::Share(Pair::new(1.0, 1.0)),
        };
        assert_eq!(
            node.apply_update(&[msg(2), msg(2)], &0.5).unwrap_err(),
            ProtocolError::DuplicateSender { node: 0, sender: 2 }
        );
        assert_eq!(
            node.apply_update(&[msg(1)], &0.5).unwrap_err(),
            ProtocolError::UnknownSender { node: 0, sender: 1 }
        );
    }

    #[test]
    fn ratio_floor_is_enforced() {
        let g = ring3();
        let mut node = init_node::<FloatArith>(NodeTopology::of(&g, 0), &0.0, ExecMode::General);
        node.x = Pair::new(0.0, 1e-310);
        assert!(matches!(node.ratio(), Err(ProtocolError::DegenerateState { .. })));
        node.x = Pair::new(4.0, 1.0);
        assert_eq!(node.ratio().unwrap(), 4.0);
    }

    #[test]
    fn modes_produce_identical_trajectories_on_the_ring() {
        let mut general = init_ring_nodes::<FloatArith>([2.0, -7.25, 6.5], ExecMode::General);
        let mut running =
            init_ring_nodes::<FloatArith>([2.0, -7.25, 6.5], ExecMode::RatioRunningSum);
        for _ in 0..120 {
            step_ring(&mut general, ExecMode::General);
            step_ring(&mut running, ExecMode::RatioRunningSum);
            for j in 0..3 {
                assert_eq!(general[j].x.y.to_bits(), running[j].x.y.to_bits());
                assert_eq!(general[j].x.z.to_bits(), running[j].x.z.to_bits());
            }
        }
    }

    #[test]
    fn telescoping_is_exact_in_rational_mode() {
        let mut nodes = init_ring_nodes::<RationalArith>([2.0, 4.0, 6.0], ExecMode::RatioRunningSum);
        let mut received_total = BigRational::zero();
        let start = nodes[0].sigma_in[&2].clone();
        for _ in 0..40 {
            let before = nodes[0].sigma_in[&2].clone();
            step_ring(&mut nodes, ExecMode::RatioRunningSum);
            let after = nodes[0].sigma_in[&2].clone();
            received_total += after.delta_since(&before).y;
        }
        let direct = nodes[0].sigma_in[&2].clone().delta_since(&start).y;
        assert_eq!(received_total, direct);
    }

    #[test]
    fn z_stays_positive_without_faults() {
        let mut nodes = init_ring_nodes::<FloatArith>([-3.0, 0.0, 9.0], ExecMode::RatioRunningSum);
        for _ in 0..200 {
            step_ring(&mut nodes, ExecMode::RatioRunningSum);
            for node in &nodes {
                assert!(node.x.z > 0.0);
            }
        }
    }
}
