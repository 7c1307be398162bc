//! Scripted corruption of node computations: timed additive state errors and
//! stubborn nodes that pin their state to the initial value.
//!
//! An additive event at round `k` fires after round `k`'s update completes and
//! before round `k+1`'s send phase, so the corrupted value is both what the
//! node holds and what it propagates next. A stubborn node re-pins its state
//! every round of its window while still running the send bookkeeping on the
//! pinned value. Running sums are never corrupted directly.

use serde_json::{json, Value};
use thiserror::Error;

use crate::arith::{Arithmetic, Pair, Scalar};
use crate::protocol::NodeState;

#[derive(Debug, Error, PartialEq)]
pub enum FaultError {
    #[error("two additive events target node {node} at round {round}")]
    DuplicateAdditive { node: usize, round: usize },
    #[error("stubborn window for node {node} ends ({to}) before it starts ({from})")]
    BadWindow { node: usize, from: usize, to: usize },
    #[error("event targets node {expected}, applied to node {got}")]
    WrongNode { expected: usize, got: usize },
    #[error("event for round {expected} applied at round {got}")]
    WrongRound { expected: usize, got: usize },
    #[error("additive error component is not finite: {0}")]
    NonFiniteError(f64),
    #[error("malformed fault script: {0}")]
    BadFile(String),
}

/// One scripted fault.
#[derive(Clone, Debug, PartialEq)]
pub enum FaultEvent {
    /// Adds `e = [e_y, e_z]` to the target's state after the given round's
    /// update.
    Additive { node: usize, round: usize, e: [f64; 2] },
    /// Pins the target's state to its initial value on every round of
    /// `[from, to]`; `to = None` means forever.
    Stubborn { node: usize, from: usize, to: Option<usize> },
}

impl FaultEvent {
    pub fn node(&self) -> usize {
        match self {
            FaultEvent::Additive { node, .. } | FaultEvent::Stubborn { node, .. } => *node,
        }
    }

    fn sort_round(&self) -> usize {
        match self {
            FaultEvent::Additive { round, .. } => *round,
            FaultEvent::Stubborn { from, .. } => *from,
        }
    }

    pub fn applies_at(&self, round: usize) -> bool {
        match self {
            FaultEvent::Additive { round: r, .. } => *r == round,
            FaultEvent::Stubborn { from, to, .. } => {
                round >= *from && to.map_or(true, |end| round <= end)
            }
        }
    }

    /// Event object of the fault script file format, 1-based node ids.
    pub fn to_json(&self) -> Value {
        match self {
            FaultEvent::Additive { node, round, e } => json!({
                "kind": "additive", "node": node + 1, "round": round, "e": [e[0], e[1]],
            }),
            FaultEvent::Stubborn { node, from, to } => json!({
                "kind": "stubborn", "node": node + 1, "from": from, "to": to,
            }),
        }
    }

    pub fn from_json(item: &Value) -> Result<Self, FaultError> {
        let obj = item
            .as_object()
            .ok_or_else(|| FaultError::BadFile(format!("event {item} is not an object")))?;
        let node = obj
            .get("node")
            .and_then(Value::as_u64)
            .filter(|&x| x >= 1)
            .ok_or_else(|| FaultError::BadFile(format!("bad \"node\" in {item}")))?
            as usize
            - 1;
        match obj.get("kind").and_then(Value::as_str) {
            Some("additive") => {
                let round = obj
                    .get("round")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| FaultError::BadFile(format!("bad \"round\" in {item}")))?
                    as usize;
                let e = obj
                    .get("e")
                    .and_then(Value::as_array)
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| FaultError::BadFile(format!("bad \"e\" in {item}")))?;
                let ey = e[0]
                    .as_f64()
                    .ok_or_else(|| FaultError::BadFile(format!("bad e[0] in {item}")))?;
                let ez = e[1]
                    .as_f64()
                    .ok_or_else(|| FaultError::BadFile(format!("bad e[1] in {item}")))?;
                Ok(FaultEvent::Additive { node, round, e: [ey, ez] })
            }
            Some("stubborn") => {
                let from = obj.get("from").and_then(Value::as_u64).unwrap_or_default() as usize;
                let to = match obj.get("to") {
                    None | Some(Value::Null) => None,
                    Some(t) => Some(
                        t.as_u64()
                            .ok_or_else(|| FaultError::BadFile(format!("bad \"to\" in {item}")))?
                            as usize,
                    ),
                };
                Ok(FaultEvent::Stubborn { node, from, to })
            }
            other => Err(FaultError::BadFile(format!("unknown event kind {other:?}"))),
        }
    }
}

/// Validated, canonically ordered list of fault events.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FaultScript {
    events: Vec<FaultEvent>,
}

impl FaultScript {
    pub fn new(mut events: Vec<FaultEvent>) -> Result<Self, FaultError> {
        for ev in &events {
            match ev {
                FaultEvent::Additive { e, .. } => {
                    for &c in e {
                        if !c.is_finite() {
                            return Err(FaultError::NonFiniteError(c));
                        }
                    }
                }
                FaultEvent::Stubborn { node, from, to: Some(end) } if end < from => {
                    return Err(FaultError::BadWindow { node: *node, from: *from, to: *end });
                }
                FaultEvent::Stubborn { .. } => {}
            }
        }
        events.sort_by_key(|ev| (ev.sort_round(), ev.node()));
        for pair in events.windows(2) {
            if let [FaultEvent::Additive { node: a, round: ra, .. }, FaultEvent::Additive { node: b, round: rb, .. }] =
                pair
            {
                if a == b && ra == rb {
                    return Err(FaultError::DuplicateAdditive { node: *a, round: *ra });
                }
            }
        }
        Ok(FaultScript { events })
    }

    pub fn empty() -> Self {
        FaultScript::default()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn events(&self) -> &[FaultEvent] {
        &self.events
    }

    pub fn max_node(&self) -> Option<usize> {
        self.events.iter().map(FaultEvent::node).max()
    }

    /// Events that fire in round `round`, in canonical order.
    pub fn events_at(&self, round: usize) -> impl Iterator<Item = &FaultEvent> {
        self.events.iter().filter(move |ev| ev.applies_at(round))
    }

    /// Sum of all additive errors injected into `node` at rounds strictly
    /// before `up_to`. Stubborn events are excluded.
    pub fn net_injected_error<V: Scalar>(&self, node: usize, up_to: usize) -> Pair<V> {
        let mut total = Pair::<V>::zero();
        for ev in &self.events {
            if let FaultEvent::Additive { node: i, round, e } = ev {
                if *i == node && *round < up_to {
                    total = total.add(&Pair::from_f64s(e[0], e[1]));
                }
            }
        }
        total
    }

    /// Fault script file format: a JSON array of events with 1-based node ids,
    /// e.g. `[{"kind":"additive","node":2,"round":5,"e":[1.0,0.0]},
    /// {"kind":"stubborn","node":3,"from":0,"to":null}]`.
    pub fn to_json(&self) -> Value {
        Value::Array(self.events.iter().map(FaultEvent::to_json).collect())
    }

    pub fn from_json(v: &Value) -> Result<Self, FaultError> {
        let arr = v
            .as_array()
            .ok_or_else(|| FaultError::BadFile("expected an array of events".into()))?;
        let events =
            arr.iter().map(FaultEvent::from_json).collect::<Result<Vec<_>, _>>()?;
        FaultScript::new(events)
    }
}

/// Applies one event to a node's state: additive adds `e`, stubborn re-pins
/// to the retained initial state.
pub fn apply_fault<A: Arithmetic>(
    state: &mut NodeState<A>,
    ev: &FaultEvent,
    round: usize,
) -> Result<(), FaultError> {
    if ev.node() != state.id {
        return Err(FaultError::WrongNode { expected: ev.node(), got: state.id });
    }
    if !ev.applies_at(round) {
        return Err(FaultError::WrongRound { expected: ev.sort_round(), got: round });
    }
    match ev {
        FaultEvent::Additive { e, .. } => {
            state.x = state.x.add(&Pair::from_f64s(e[0], e[1]));
        }
        FaultEvent::Stubborn { .. } => {
            state.x = state.x0.clone();
        }
    }
    Ok(())
}
