//! Deterministic synchronous round engine.
//!
//! Each round runs the phases: every node emits, messages are delivered,
//! every node updates, this round's fault events fire, and checks are
//! recorded. The full state is snapshotted at the top of every round, so a
//! trace covers rounds `0..=horizon` and the record for round `k` holds
//! `x[k]` together with the messages and faults of round `k` itself.
//!
//! Runs are bit-reproducible: the same config (including the seed) produces a
//! byte-identical trace. Random activation draws come from a seeded ChaCha8
//! stream whose algorithm name is recorded in the trace header.

use std::collections::BTreeMap;

use log::warn;
use serde_json::{json, Value};
use thiserror::Error;

use crate::arith::{Arithmetic, ArithmeticKind, Pair, Scalar, SigmaAcc};
use crate::checks::{
    atc_evaluate, detection_threshold, global_invariant_residual, recover_initial, AtcInputs,
    AtcTargetReport, CheckError, CheckReport,
};
use crate::faults::{FaultError, FaultEvent, FaultScript};
use crate::graph::{
    verify_joint_connectivity, DirectedGraph, EdgeSchedule, GraphError,
};
use crate::protocol::{
    init_node, ExecMode, Message, NodeState, NodeTopology, ProtocolError,
};
use crate::weights::{
    balanced_weights, push_sum_weights, ratio_consensus_weights, WeightError, WeightMatrix,
    WeightScheme,
};

/// Trace and config format version; readers refuse other majors.
pub const FORMAT_VERSION: u64 = 1;

/// Above this node count, traces keep every 10th round (messages elided).
pub const FULL_TRACE_MAX_NODES: usize = 64;

const RNG_ALGORITHM: &str = "chacha8";

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Check(#[from] CheckError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("config requests {requested} arithmetic but the engine was invoked as {actual}")]
    ArithmeticMismatch { requested: ArithmeticKind, actual: ArithmeticKind },
    #[error("graph is not strongly connected")]
    NotStronglyConnected,
    #[error("z positivity violated at node {node}, round {round}, in a fault-free run")]
    ZPositivityViolated { node: usize, round: usize },
    #[error("malformed trace: {0}")]
    BadTrace(String),
    #[error("trace format version {found} unsupported (expected {expected})")]
    FormatVersion { found: u64, expected: u64 },
    #[error("replay diverged from the recorded trace at line {line}")]
    ReplayMismatch { line: usize },
    #[error("recorded residual at round {round} does not match the recorded states")]
    ResidualMismatch { round: usize },
}

/// How active out-sets are chosen per round.
#[derive(Clone, Debug, PartialEq)]
pub enum ActivationMode {
    AlwaysOn,
    /// Each out-edge independently active with probability `p` per round.
    RandomSubset { p: f64 },
    /// Explicit per-round active out-sets, `rounds[k][j]` = receivers of `j`.
    Explicit { rounds: Vec<Vec<Vec<usize>>> },
}

impl ActivationMode {
    fn to_json(&self) -> Value {
        match self {
            ActivationMode::AlwaysOn => json!({"kind": "always_on"}),
            ActivationMode::RandomSubset { p } => json!({"kind": "random_subset", "p": p}),
            ActivationMode::Explicit { rounds } => json!({
                "kind": "explicit",
                "rounds": rounds
                    .iter()
                    .map(|per_node| {
                        per_node
                            .iter()
                            .map(|set| set.iter().map(|&l| l + 1).collect::<Vec<_>>())
                            .collect::<Vec<_>>()
                    })
                    .collect::<Vec<_>>(),
            }),
        }
    }

    fn from_json(v: &Value) -> Result<Self, SimError> {
        let bad = |msg: &str| SimError::InvalidConfig(format!("activation: {msg}"));
        match v.get("kind").and_then(Value::as_str) {
            Some("always_on") => Ok(ActivationMode::AlwaysOn),
            Some("random_subset") => {
                let p = v
                    .get("p")
                    .and_then(Value::as_f64)
                    .ok_or_else(|| bad("random_subset needs a numeric \"p\""))?;
                Ok(ActivationMode::RandomSubset { p })
            }
            Some("explicit") => {
                let rounds = v
                    .get("rounds")
                    .and_then(Value::as_array)
                    .ok_or_else(|| bad("explicit needs a \"rounds\" array"))?;
                let mut out = Vec::with_capacity(rounds.len());
                for round in rounds {
                    let per_node = round.as_array().ok_or_else(|| bad("round is not an array"))?;
                    let mut node_sets = Vec::with_capacity(per_node.len());
                    for set in per_node {
                        let list = set.as_array().ok_or_else(|| bad("active set is not an array"))?;
                        let mut receivers = Vec::with_capacity(list.len());
                        for r in list {
                            let id = r
                                .as_u64()
                                .filter(|&x| x >= 1)
                                .ok_or_else(|| bad("bad receiver id"))?;
                            receivers.push(id as usize - 1);
                        }
                        node_sets.push(receivers);
                    }
                    out.push(node_sets);
                }
                Ok(ActivationMode::Explicit { rounds: out })
            }
            other => Err(bad(&format!("unknown kind {other:?}"))),
        }
    }
}

/// Full description of one run. Serialized into the trace header, so a trace
/// file alone reproduces its run.
#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub graph: DirectedGraph,
    pub scheme: WeightScheme,
    pub mode: ExecMode,
    pub initial_values: Vec<f64>,
    pub rounds: usize,
    pub seed: u64,
    pub activation: ActivationMode,
    pub faults: FaultScript,
    /// Period of the any-time consistency checks (running-sum mode only).
    pub k_atc: usize,
    /// Base detection threshold, scaled per node by the initial magnitude.
    pub tau: f64,
    pub arithmetic: ArithmeticKind,
    /// Joint-connectivity window used to validate generated schedules.
    pub k_conn: usize,
}

impl SimConfig {
    /// A config with the common defaults: static ratio weights, general mode,
    /// always-on activation, no faults, float arithmetic.
    pub fn new(graph: DirectedGraph, initial_values: Vec<f64>) -> Self {
        SimConfig {
            graph,
            scheme: WeightScheme::RatioConsensus,
            mode: ExecMode::General,
            initial_values,
            rounds: 100,
            seed: 0,
            activation: ActivationMode::AlwaysOn,
            faults: FaultScript::empty(),
            k_atc: 25,
            tau: 1e-9,
            arithmetic: ArithmeticKind::Float,
            k_conn: 10,
        }
    }

    /// Mean of the initial values: the target the ratios converge to.
    pub fn v_bar(&self) -> f64 {
        self.initial_values.iter().sum::<f64>() / self.initial_values.len() as f64
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.graph.n();
        let fail = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.initial_values.len() != n {
            return fail(format!("{} initial values for {} nodes", self.initial_values.len(), n));
        }
        if self.initial_values.iter().any(|v| !v.is_finite()) {
            return fail("initial values must be finite".into());
        }
        if self.rounds == 0 {
            return fail("rounds must be positive".into());
        }
        if self.k_atc == 0 || self.k_conn == 0 {
            return fail("k_atc and k_conn must be positive".into());
        }
        if !(self.tau >= 0.0) {
            return fail(format!("tau must be nonnegative, got {}", self.tau));
        }
        if !crate::graph::is_strongly_connected(&self.graph) {
            return Err(SimError::NotStronglyConnected);
        }
        if let ActivationMode::RandomSubset { p } = self.activation {
            if !(0.0..=1.0).contains(&p) {
                return fail(format!("activation probability {p} outside [0, 1]"));
            }
        }
        if self.mode == ExecMode::RatioRunningSum {
            if self.scheme != WeightScheme::RatioConsensus {
                return fail("ratio_running_sum mode requires the ratio_consensus scheme".into());
            }
            if !matches!(self.activation, ActivationMode::AlwaysOn) {
                return fail("ratio_running_sum mode requires always_on activation".into());
            }
        }
        if self.scheme == WeightScheme::Balanced {
            match &self.activation {
                ActivationMode::AlwaysOn => {
                    if !self.graph.is_symmetric() {
                        return fail("balanced weights need a symmetric base graph".into());
                    }
                }
                ActivationMode::RandomSubset { .. } => {
                    return fail(
                        "balanced weights need symmetric activity; random_subset draws edges independently"
                            .into(),
                    );
                }
                ActivationMode::Explicit { .. } => {
                    // checked per round once the schedule is built
                }
            }
        }
        if self.arithmetic == ArithmeticKind::Rational && (n > 16 || self.rounds > 1000) {
            return fail(format!(
                "rational runs are bounded to n <= 16 and rounds <= 1000, got n={n}, rounds={}",
                self.rounds
            ));
        }
        if let Some(node) = self.faults.max_node() {
            if node >= n {
                return fail(format!("fault script targets node {}, graph has {n}", node + 1));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        json!({
            "graph": self.graph.to_json(),
            "scheme": serde_json::to_value(self.scheme).expect("scheme serializes"),
            "mode": serde_json::to_value(self.mode).expect("mode serializes"),
            "initial_values": self.initial_values,
            "rounds": self.rounds,
            "seed": self.seed,
            "activation": self.activation.to_json(),
            "faults": self.faults.to_json(),
            "k_atc": self.k_atc,
            "tau": self.tau,
            "arithmetic": serde_json::to_value(self.arithmetic).expect("kind serializes"),
            "k_conn": self.k_conn,
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, SimError> {
        let bad = |msg: String| SimError::InvalidConfig(msg);
        let graph = DirectedGraph::from_json(
            v.get("graph").ok_or_else(|| bad("missing \"graph\"".into()))?,
        )?;
        let initial_values: Vec<f64> = v
            .get("initial_values")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("missing array \"initial_values\"".into()))?
            .iter()
            .map(|x| x.as_f64().ok_or_else(|| bad(format!("bad initial value {x}"))))
            .collect::<Result<_, _>>()?;
        let rounds = v
            .get("rounds")
            .and_then(Value::as_u64)
            .ok_or_else(|| bad("missing integer \"rounds\"".into()))? as usize;
        let mut cfg = SimConfig::new(graph, initial_values);
        cfg.rounds = rounds;
        if let Some(s) = v.get("scheme") {
            cfg.scheme = serde_json::from_value(s.clone())
                .map_err(|e| bad(format!("bad scheme: {e}")))?;
        }
        if let Some(m) = v.get("mode") {
            cfg.mode =
                serde_json::from_value(m.clone()).map_err(|e| bad(format!("bad mode: {e}")))?;
        }
        if let Some(s) = v.get("seed") {
            cfg.seed = s.as_u64().ok_or_else(|| bad(format!("bad seed {s}")))?;
        }
        if let Some(a) = v.get("activation") {
            cfg.activation = ActivationMode::from_json(a)?;
        }
        if let Some(f) = v.get("faults") {
            cfg.faults = FaultScript::from_json(f)?;
        }
        if let Some(k) = v.get("k_atc") {
            cfg.k_atc = k.as_u64().ok_or_else(|| bad(format!("bad k_atc {k}")))? as usize;
        }
        if let Some(t) = v.get("tau") {
            cfg.tau = t.as_f64().ok_or_else(|| bad(format!("bad tau {t}")))?;
        }
        if let Some(a) = v.get("arithmetic") {
            cfg.arithmetic = serde_json::from_value(a.clone())
                .map_err(|e| bad(format!("bad arithmetic: {e}")))?;
        }
        if let Some(k) = v.get("k_conn") {
            cfg.k_conn = k.as_u64().ok_or_else(|| bad(format!("bad k_conn {k}")))? as usize;
        }
        Ok(cfg)
    }
}

/// Builds the per-round activation schedule for a run.
pub fn activation_schedule(
    graph: &DirectedGraph,
    mode: &ActivationMode,
    seed: u64,
    horizon: usize,
) -> Result<EdgeSchedule, SimError> {
    use rand::{Rng, SeedableRng};
    if horizon == 0 {
        return Err(SimError::InvalidConfig("horizon must be at least 1".into()));
    }
    match mode {
        ActivationMode::AlwaysOn => Ok(EdgeSchedule::always_on(graph.clone())),
        ActivationMode::RandomSubset { p } => {
            if !(0.0..=1.0).contains(p) {
                return Err(SimError::InvalidConfig(format!(
                    "activation probability {p} outside [0, 1]"
                )));
            }
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let rounds = (0..horizon)
                .map(|_| {
                    (0..graph.n())
                        .map(|j| {
                            graph
                                .out_neighbors(j)
                                .iter()
                                .copied()
                                .filter(|_| rng.random::<f64>() < *p)
                                .collect()
                        })
                        .collect()
                })
                .collect();
            Ok(EdgeSchedule::explicit(graph.clone(), rounds)?)
        }
        ActivationMode::Explicit { rounds } => {
            if rounds.len() < horizon {
                return Err(SimError::InvalidConfig(format!(
                    "explicit schedule covers {} rounds, run needs {horizon}",
                    rounds.len()
                )));
            }
            Ok(EdgeSchedule::explicit(graph.clone(), rounds.clone())?)
        }
    }
}

/// Running-sum snapshot of one node at the top of a round.
#[derive(Clone, Debug, PartialEq)]
pub enum SigmaSnapshot<V> {
    /// Running-sum mode: the single cumulative sum.
    Single(Pair<V>),
    /// General mode: per out-neighbor sums, sorted by neighbor.
    PerOut(Vec<(usize, Pair<V>)>),
}

impl<V: Scalar> SigmaSnapshot<V> {
    fn to_json(&self) -> Value {
        match self {
            SigmaSnapshot::Single(p) => p.to_json(),
            SigmaSnapshot::PerOut(list) => Value::Array(
                list.iter()
                    .map(|(l, p)| Value::Array(vec![json!(l + 1), p.to_json()]))
                    .collect(),
            ),
        }
    }

    fn from_json(v: &Value, mode: ExecMode) -> Result<Self, String> {
        match mode {
            ExecMode::RatioRunningSum => Ok(SigmaSnapshot::Single(Pair::from_json(v)?)),
            ExecMode::General => {
                let list = v.as_array().ok_or_else(|| format!("bad sigma record {v}"))?;
                let mut out = Vec::with_capacity(list.len());
                for item in list {
                    let pair = item
                        .as_array()
                        .filter(|a| a.len() == 2)
                        .ok_or_else(|| format!("bad sigma entry {item}"))?;
                    let l = pair[0]
                        .as_u64()
                        .filter(|&x| x >= 1)
                        .ok_or_else(|| format!("bad sigma neighbor id in {item}"))?;
                    out.push((l as usize - 1, Pair::from_json(&pair[1])?));
                }
                Ok(SigmaSnapshot::PerOut(out))
            }
        }
    }

    /// The scalar running sum: the single value in running-sum mode, or any
    /// per-edge value when they all agree (static ratio weights).
    pub fn scalar(&self) -> Option<Pair<V>> {
        match self {
            SigmaSnapshot::Single(p) => Some(p.clone()),
            SigmaSnapshot::PerOut(list) => {
                let first = list.first()?.1.clone();
                list.iter().all(|(_, p)| *p == first).then_some(first)
            }
        }
    }
}

/// One delivered message as recorded in the trace.
#[derive(Clone, Debug, PartialEq)]
pub struct MsgRecord<V> {
    pub sender: usize,
    pub receiver: usize,
    pub payload: Pair<V>,
}

/// Snapshot of round `k`: states at the top of the round, plus the messages
/// and fault events of the round itself.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord<V> {
    pub k: usize,
    pub x: Vec<Pair<V>>,
    pub sigma: Vec<SigmaSnapshot<V>>,
    pub r: Vec<Option<V>>,
    pub global_residual: Pair<V>,
    pub faults: Vec<FaultEvent>,
    pub msgs: Vec<MsgRecord<V>>,
}

impl<V: Scalar> RoundRecord<V> {
    fn to_json(&self) -> Value {
        json!({
            "type": "round",
            "k": self.k,
            "x": self.x.iter().map(Pair::to_json).collect::<Vec<_>>(),
            "sigma": self.sigma.iter().map(SigmaSnapshot::to_json).collect::<Vec<_>>(),
            "r": self
                .r
                .iter()
                .map(|r| r.as_ref().map(Scalar::to_json).unwrap_or(Value::Null))
                .collect::<Vec<_>>(),
            "global_residual": self.global_residual.to_json(),
            "faults": Value::Array(self.faults.iter().map(FaultEvent::to_json).collect()),
            "msgs": self
                .msgs
                .iter()
                .map(|m| json!([m.sender + 1, m.receiver + 1, m.payload.to_json()]))
                .collect::<Vec<_>>(),
        })
    }

    fn from_json(v: &Value, mode: ExecMode) -> Result<Self, SimError> {
        let bad = |msg: String| SimError::BadTrace(msg);
        let k = v["k"].as_u64().ok_or_else(|| bad("round record missing k".into()))? as usize;
        let x = v["x"]
            .as_array()
            .ok_or_else(|| bad(format!("round {k} missing x")))?
            .iter()
            .map(|p| Pair::from_json(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(bad)?;
        let sigma = v["sigma"]
            .as_array()
            .ok_or_else(|| bad(format!("round {k} missing sigma")))?
            .iter()
            .map(|s| SigmaSnapshot::from_json(s, mode))
            .collect::<Result<Vec<_>, _>>()
            .map_err(bad)?;
        let r = v["r"]
            .as_array()
            .ok_or_else(|| bad(format!("round {k} missing r")))?
            .iter()
            .map(|item| {
                if item.is_null() {
                    Ok(None)
                } else {
                    V::from_json(item).map(Some)
                }
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(bad)?;
        let global_residual =
            Pair::from_json(&v["global_residual"]).map_err(bad)?;
        let faults = v["faults"]
            .as_array()
            .ok_or_else(|| bad(format!("round {k} missing faults")))?
            .iter()
            .map(FaultEvent::from_json)
            .collect::<Result<Vec<_>, _>>()?;
        let mut msgs = Vec::new();
        for m in v["msgs"].as_array().ok_or_else(|| bad(format!("round {k} missing msgs")))? {
            let triple = m
                .as_array()
                .filter(|a| a.len() == 3)
                .ok_or_else(|| bad(format!("bad message record {m}")))?;
            let sender = triple[0]
                .as_u64()
                .filter(|&s| s >= 1)
                .ok_or_else(|| bad(format!("bad sender in {m}")))? as usize
                - 1;
            let receiver = triple[1]
                .as_u64()
                .filter(|&r| r >= 1)
                .ok_or_else(|| bad(format!("bad receiver in {m}")))? as usize
                - 1;
            msgs.push(MsgRecord {
                sender,
                receiver,
                payload: Pair::from_json(&triple[2]).map_err(bad)?,
            });
        }
        Ok(RoundRecord { k, x, sigma, r, global_residual, faults, msgs })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceHeader {
    pub format_version: u64,
    pub rng_algorithm: String,
    /// Joint-connectivity verdict for the generated schedule; `None` when the
    /// horizon is shorter than one window.
    pub a1_verified: Option<bool>,
    pub warnings: Vec<String>,
    pub config: SimConfig,
}

/// Full round-by-round record of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace<A: Arithmetic> {
    pub header: TraceHeader,
    pub rounds: Vec<RoundRecord<A::Value>>,
    pub reports: Vec<CheckReport<A::Value>>,
}

impl<A: Arithmetic> Trace<A> {
    pub fn round(&self, k: usize) -> Option<&RoundRecord<A::Value>> {
        self.rounds.iter().find(|r| r.k == k)
    }

    pub fn final_round(&self) -> &RoundRecord<A::Value> {
        self.rounds.last().expect("trace has at least round 0")
    }

    /// JSON-lines serialization: header first, then round records in order
    /// with each epoch's check report directly after its round.
    pub fn to_jsonl(&self) -> String {
        let header = json!({
            "type": "header",
            "format_version": self.header.format_version,
            "rng_algorithm": self.header.rng_algorithm,
            "a1_verified": self.header.a1_verified,
            "warnings": self.header.warnings,
            "config": self.header.config.to_json(),
        });
        let mut lines = vec![header.to_string()];
        let mut reports = self.reports.iter().peekable();
        for record in &self.rounds {
            lines.push(record.to_json().to_string());
            while reports.peek().is_some_and(|rep| rep.epoch == record.k) {
                lines.push(reports.next().expect("peeked").to_json().to_string());
            }
        }
        lines.push(String::new());
        lines.join("\n")
    }

    pub fn from_jsonl(text: &str) -> Result<Self, SimError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header_line = lines.next().ok_or_else(|| SimError::BadTrace("empty trace".into()))?;
        let header_json: Value = serde_json::from_str(header_line)
            .map_err(|e| SimError::BadTrace(format!("bad header: {e}")))?;
        if header_json["type"] != json!("header") {
            return Err(SimError::BadTrace("first record is not a header".into()));
        }
        let found = header_json["format_version"]
            .as_u64()
            .ok_or_else(|| SimError::BadTrace("header missing format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(SimError::FormatVersion { found, expected: FORMAT_VERSION });
        }
        let config = SimConfig::from_json(&header_json["config"])
            .map_err(|e| SimError::BadTrace(format!("bad config in header: {e}")))?;
        if config.arithmetic != A::KIND {
            return Err(SimError::ArithmeticMismatch {
                requested: config.arithmetic,
                actual: A::KIND,
            });
        }
        let header = TraceHeader {
            format_version: found,
            rng_algorithm: header_json["rng_algorithm"].as_str().unwrap_or_default().to_string(),
            a1_verified: header_json["a1_verified"].as_bool(),
            warnings: header_json["warnings"]
                .as_array()
                .map(|a| a.iter().filter_map(Value::as_str).map(String::from).collect())
                .unwrap_or_default(),
            config,
        };
        let mut rounds = Vec::new();
        let mut reports = Vec::new();
        for (idx, line) in lines.enumerate() {
            let v: Value = serde_json::from_str(line)
                .map_err(|e| SimError::BadTrace(format!("line {}: {e}", idx + 2)))?;
            match v["type"].as_str() {
                Some("round") => rounds.push(RoundRecord::from_json(&v, header.config.mode)?),
                Some("atc") => reports.push(
                    CheckReport::from_json(&v)
                        .map_err(|e| SimError::BadTrace(format!("line {}: {e}", idx + 2)))?,
                ),
                other => {
                    return Err(SimError::BadTrace(format!(
                        "line {}: unknown record type {other:?}",
                        idx + 2
                    )))
                }
            }
        }
        if rounds.is_empty() {
            return Err(SimError::BadTrace("trace has no round records".into()));
        }
        Ok(Trace { header, rounds, reports })
    }

    /// Convergence and detection summary for reporting.
    pub fn summary(&self) -> RunSummary {
        let v_bar = self.header.config.v_bar();
        let max_dev = |record: &RoundRecord<A::Value>| -> f64 {
            record
                .r
                .iter()
                .map(|r| r.as_ref().map_or(f64::INFINITY, |v| (v.to_f64() - v_bar).abs()))
                .fold(0.0, f64::max)
        };
        let final_record = self.final_round();
        let rounds_to_tolerance =
            self.rounds.iter().find(|rec| max_dev(rec) < 1e-6).map(|rec| rec.k);
        RunSummary {
            v_bar,
            final_round: final_record.k,
            final_max_dev: max_dev(final_record),
            rounds_to_tolerance,
            a1_verified: self.header.a1_verified,
            atc_failures: self
                .reports
                .iter()
                .map(|rep| (rep.epoch, rep.failed_nodes()))
                .collect(),
            warnings: self.header.warnings.clone(),
        }
    }
}

/// Headline numbers for one run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub v_bar: f64,
    pub final_round: usize,
    /// `max_j |r_j - v_bar|` at the final recorded round.
    pub final_max_dev: f64,
    /// First recorded round with `max_j |r_j - v_bar| < 1e-6`.
    pub rounds_to_tolerance: Option<usize>,
    pub a1_verified: Option<bool>,
    /// Per epoch, the nodes whose ATC failed.
    pub atc_failures: Vec<(usize, Vec<usize>)>,
    pub warnings: Vec<String>,
}

enum RoundWeights<V> {
    Static(WeightMatrix<V>),
    Dynamic(WeightScheme),
}

impl<V: Scalar> RoundWeights<V> {
    fn for_round(
        &self,
        graph: &DirectedGraph,
        schedule: &EdgeSchedule,
        k: usize,
    ) -> Result<WeightMatrix<V>, SimError> {
        match self {
            RoundWeights::Static(w) => Ok(w.clone()),
            RoundWeights::Dynamic(scheme) => {
                let active = schedule.active_sets(k)?;
                let w = match scheme {
                    WeightScheme::PushSum => push_sum_weights(graph, &active)?,
                    WeightScheme::Balanced => balanced_weights(graph, &active)?,
                    WeightScheme::RatioConsensus => unreachable!("ratio weights are static"),
                };
                Ok(w)
            }
        }
    }
}

/// Runs one configured simulation to completion and returns the full trace.
///
/// The engine proceeds in strict phases per round (emit, deliver, update,
/// faults, checks); an activation schedule that fails the joint-connectivity
/// check is recorded as a warning and the run proceeds.
pub fn run<A: Arithmetic>(config: &SimConfig) -> Result<Trace<A>, SimError> {
    if config.arithmetic != A::KIND {
        return Err(SimError::ArithmeticMismatch {
            requested: config.arithmetic,
            actual: A::KIND,
        });
    }
    config.validate()?;
    let graph = &config.graph;
    let n = graph.n();
    let horizon = config.rounds;
    let schedule = activation_schedule(graph, &config.activation, config.seed, horizon)?;

    let mut warnings = Vec::new();
    let a1_verified = match &config.activation {
        ActivationMode::AlwaysOn => Some(true),
        _ => {
            let checkable = horizon - horizon % config.k_conn;
            if checkable >= config.k_conn {
                let ok = verify_joint_connectivity(&schedule, config.k_conn, checkable)?;
                if !ok {
                    let msg = format!(
                        "activation schedule is not jointly connected over windows of {} rounds; convergence is not guaranteed",
                        config.k_conn
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                }
                Some(ok)
            } else {
                None
            }
        }
    };

    if config.scheme == WeightScheme::Balanced {
        for k in 0..horizon {
            if !schedule.is_symmetric_at(k)? {
                return Err(SimError::InvalidConfig(format!(
                    "balanced weights need symmetric activity, round {k} is asymmetric"
                )));
            }
        }
    }

    let weights = match config.scheme {
        WeightScheme::RatioConsensus => RoundWeights::Static(ratio_consensus_weights(graph)),
        scheme => RoundWeights::Dynamic(scheme),
    };

    let mut nodes: Vec<NodeState<A>> = (0..n)
        .map(|j| {
            init_node(
                NodeTopology::of(graph, j),
                &A::Value::from_f64_exact(config.initial_values[j]),
                config.mode,
            )
        })
        .collect();
    let x0: Vec<Pair<A::Value>> = nodes.iter().map(|node| node.x0.clone()).collect();

    let full_trace = n <= FULL_TRACE_MAX_NODES;
    let fault_free = config.faults.is_empty();
    let mut degenerate_reported = vec![false; n];
    let mut rounds: Vec<RoundRecord<A::Value>> = Vec::new();
    let mut reports: Vec<CheckReport<A::Value>> = Vec::new();

    for k in 0..=horizon {
        let atc_due =
            config.mode == ExecMode::RatioRunningSum && k > 0 && k < horizon && k % config.k_atc == 0;
        let record_this_round = full_trace || k % 10 == 0 || k == horizon || atc_due;

        let xs: Vec<Pair<A::Value>> = nodes.iter().map(|node| node.x.clone()).collect();
        let sigma_snapshot: Vec<SigmaSnapshot<A::Value>> = nodes
            .iter()
            .map(|node| match node.sigma_single() {
                Some(acc) => SigmaSnapshot::Single(acc.value()),
                None => SigmaSnapshot::PerOut(node.sigma_out_values()),
            })
            .collect();

        if fault_free {
            for (j, x) in xs.iter().enumerate() {
                if !(x.z > A::Value::zero()) {
                    return Err(SimError::ZPositivityViolated { node: j, round: k });
                }
            }
        }

        let mut r = Vec::with_capacity(n);
        for node in &nodes {
            match node.ratio() {
                Ok(v) => r.push(Some(v)),
                Err(_) => {
                    if !degenerate_reported[node.id] {
                        degenerate_reported[node.id] = true;
                        let msg = format!(
                            "ratio degenerate at node {} from round {k} (|z| below floor)",
                            node.id + 1
                        );
                        warn!("{msg}");
                        warnings.push(msg);
                    }
                    r.push(None);
                }
            }
        }
        let global_residual = global_invariant_residual(&xs, &x0);

        let mut record = RoundRecord {
            k,
            x: xs,
            sigma: sigma_snapshot,
            r,
            global_residual,
            faults: if k < horizon {
                config.faults.events_at(k).cloned().collect()
            } else {
                Vec::new()
            },
            msgs: Vec::new(),
        };

        if k == horizon {
            if record_this_round {
                rounds.push(record);
            }
            break;
        }

        // Phase 1: every node emits.
        let w = weights.for_round(graph, &schedule, k)?;
        let mut inboxes: Vec<Vec<Message<A>>> = vec![Vec::new(); n];
        for j in 0..n {
            let active = schedule.active_out(k, j)?;
            let msgs = nodes[j].emit(w.column(j), active)?;
            for msg in msgs {
                if full_trace && record_this_round {
                    record.msgs.push(MsgRecord {
                        sender: msg.sender,
                        receiver: msg.receiver,
                        payload: msg.payload.value(),
                    });
                }
                // Phase 2: delivery. Inboxes fill in ascending sender order.
                inboxes[msg.receiver].push(msg);
            }
        }

        // Phase 3: every node updates.
        for (j, inbox) in inboxes.iter().enumerate() {
            let diag = w.column(j).diag.clone();
            nodes[j].apply_update(inbox, &diag)?;
        }

        // Phase 4: this round's fault events.
        for ev in config.faults.events_at(k) {
            crate::faults::apply_fault(&mut nodes[ev.node()], ev, k)?;
        }

        // Phase 5: periodic checks.
        if atc_due {
            let report = evaluate_atc_epoch::<A>(k, graph, config.tau, &nodes, &record)?;
            reports.push(report);
        }

        if record_this_round {
            rounds.push(record);
        }
    }

    Ok(Trace {
        header: TraceHeader {
            format_version: FORMAT_VERSION,
            rng_algorithm: RNG_ALGORITHM.to_string(),
            a1_verified,
            warnings,
            config: config.clone(),
        },
        rounds,
        reports,
    })
}

/// Evaluates every (checker, target) pair at an epoch from checker-local
/// caches: the target's state recovered from its last two running-sum
/// broadcasts, its round-0 broadcast for the initial value, and the periodic
/// two-hop broadcast for the in-flow sums.
fn evaluate_atc_epoch<A: Arithmetic>(
    epoch: usize,
    graph: &DirectedGraph,
    tau: f64,
    nodes: &[NodeState<A>],
    record: &RoundRecord<A::Value>,
) -> Result<CheckReport<A::Value>, SimError> {
    let two_hop_broadcast: Vec<Pair<A::Value>> = record
        .sigma
        .iter()
        .map(|s| s.scalar().expect("running-sum mode records scalar sums"))
        .collect();
    let mut targets = Vec::with_capacity(graph.n());
    for i in 0..graph.n() {
        let checkers = graph.out_neighbors(i).to_vec();
        let degree = graph.out_degree(i);
        let mut agreed: Option<(Pair<A::Value>, Pair<A::Value>)> = None;
        for &j in &checkers {
            let checker = &nodes[j];
            let prev = &checker.sigma_in_prev[&i];
            let cur = &checker.sigma_in[&i];
            let delta: Pair<A::Value> = cur.delta_since(prev);
            let x_recovered = delta.scale(&A::Value::from_ratio(1 + degree as i64, 1));
            let x0_recovered = recover_initial(&checker.sigma_in_first[&i], degree);
            let inputs = AtcInputs {
                target: i,
                x_at_epoch: x_recovered,
                sigma_at_epoch: prev.value(),
                out_degree: degree,
                in_sigmas_at_epoch: graph
                    .in_neighbors(i)
                    .iter()
                    .map(|&src| (src, two_hop_broadcast[src].clone()))
                    .collect(),
                x0: x0_recovered.clone(),
            };
            let c = atc_evaluate(&inputs, graph.in_neighbors(i))?;
            match &agreed {
                None => agreed = Some((c, x0_recovered)),
                Some((first, _)) => {
                    assert_eq!(
                        first, &c,
                        "checkers of node {} disagree despite identical broadcast data",
                        i + 1
                    );
                }
            }
        }
        let (c, x0) = agreed.expect("strongly connected graphs give every node a checker");
        let threshold = detection_threshold(tau, &x0);
        let pass = c.inf_norm_f64() <= threshold;
        targets.push(AtcTargetReport { node: i, c, pass, threshold, checkers });
    }
    let restart_sum = {
        let mut sum = Pair::<A::Value>::zero();
        for x in &record.x {
            sum = sum.add(x);
        }
        sum
    };
    Ok(CheckReport {
        epoch,
        targets,
        global_residual: record.global_residual.clone(),
        restart_sum,
    })
}

/// Parses a trace, re-checks its recorded residuals against its own rows, and
/// re-runs its config to confirm the file reproduces bit-for-bit.
pub fn replay<A: Arithmetic>(text: &str) -> Result<Trace<A>, SimError> {
    let trace = Trace::<A>::from_jsonl(text)?;
    let x0 = &trace
        .rounds
        .first()
        .filter(|rec| rec.k == 0)
        .ok_or_else(|| SimError::BadTrace("trace does not start at round 0".into()))?
        .x;
    for record in &trace.rounds {
        let recomputed = global_invariant_residual(&record.x, x0);
        if recomputed != record.global_residual {
            return Err(SimError::ResidualMismatch { round: record.k });
        }
    }
    let rerun = run::<A>(&trace.header.config)?;
    let original_lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let rerun_text = rerun.to_jsonl();
    let rerun_lines: Vec<&str> = rerun_text.lines().filter(|l| !l.trim().is_empty()).collect();
    for (idx, (a, b)) in original_lines.iter().zip(rerun_lines.iter()).enumerate() {
        if a != b {
            return Err(SimError::ReplayMismatch { line: idx + 1 });
        }
    }
    if original_lines.len() != rerun_lines.len() {
        return Err(SimError::ReplayMismatch {
            line: original_lines.len().min(rerun_lines.len()) + 1,
        });
    }
    Ok(rerun)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arith::{FloatArith, RationalArith};
    use crate::graph::{generate, GraphModel};

    fn ring3() -> DirectedGraph {
        DirectedGraph::new(3, [(1, 0), (2, 1), (0, 2)]).unwrap()
    }

    fn ring_config(mode: ExecMode, rounds: usize) -> SimConfig {
        let mut cfg = SimConfig::new(ring3(), vec![2.0, 4.0, 6.0]);
        cfg.mode = mode;
        cfg.rounds = rounds;
        cfg
    }

    #[test]
    fn ring_converges_to_the_mean() {
        let trace = run::<FloatArith>(&ring_config(ExecMode::RatioRunningSum, 60)).unwrap();
        let summary = trace.summary();
        assert_eq!(summary.v_bar, 4.0);
        assert!(summary.final_max_dev < 1e-9, "dev {}", summary.final_max_dev);
        assert_eq!(trace.rounds.len(), 61);
        let first = trace.round(1).unwrap();
        assert_eq!(first.x[0], Pair::new(4.0, 1.0));
        assert_eq!(first.x[1], Pair::new(3.0, 1.0));
        assert_eq!(first.x[2], Pair::new(5.0, 1.0));
    }

    #[test]
    fn rejects_mismatched_arithmetic_and_bad_graphs() {
        let cfg = ring_config(ExecMode::General, 10);
        assert!(matches!(
            run::<RationalArith>(&cfg),
            Err(SimError::ArithmeticMismatch { .. })
        ));
        let star = DirectedGraph::new(3, [(1, 0), (2, 0)]).unwrap();
        let cfg = SimConfig::new(star, vec![1.0, 2.0, 3.0]);
        assert!(matches!(run::<FloatArith>(&cfg), Err(SimError::NotStronglyConnected)));
        let mut cfg = ring_config(ExecMode::General, 10);
        cfg.initial_values.pop();
        assert!(matches!(run::<FloatArith>(&cfg), Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn identical_configs_give_byte_identical_traces() {
        let mut cfg = SimConfig::new(
            generate(6, GraphModel::CycleChords { extra: 6 }, 9).unwrap(),
            vec![3.0, -1.0, 7.5, 0.25, 10.0, -4.0],
        );
        cfg.scheme = WeightScheme::PushSum;
        cfg.activation = ActivationMode::RandomSubset { p: 0.5 };
        cfg.seed = 42;
        cfg.rounds = 80;
        let a = run::<FloatArith>(&cfg).unwrap().to_jsonl();
        let b = run::<FloatArith>(&cfg).unwrap().to_jsonl();
        assert_eq!(a, b);
    }

    #[test]
    fn random_subset_p1_matches_always_on_sets() {
        let g = generate(5, GraphModel::CycleChords { extra: 3 }, 2).unwrap();
        let random =
            activation_schedule(&g, &ActivationMode::RandomSubset { p: 1.0 }, 7, 20).unwrap();
        let always = activation_schedule(&g, &ActivationMode::AlwaysOn, 7, 20).unwrap();
        for k in 0..20 {
            for j in 0..g.n() {
                assert_eq!(random.active_out(k, j).unwrap(), always.active_out(k, j).unwrap());
            }
        }
    }

    #[test]
    fn schedule_generation_is_seed_deterministic() {
        let g = ring3();
        let a = activation_schedule(&g, &ActivationMode::RandomSubset { p: 0.5 }, 42, 30).unwrap();
        let b = activation_schedule(&g, &ActivationMode::RandomSubset { p: 0.5 }, 42, 30).unwrap();
        for k in 0..30 {
            for j in 0..3 {
                assert_eq!(a.active_out(k, j).unwrap(), b.active_out(k, j).unwrap());
            }
        }
        assert!(matches!(
            activation_schedule(&g, &ActivationMode::RandomSubset { p: 1.5 }, 0, 10),
            Err(SimError::InvalidConfig(_))
        ));
    }

    #[test]
    fn balanced_pair_drives_y_to_mean_and_z_to_one() {
        let g = DirectedGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        let mut cfg = SimConfig::new(g, vec![0.0, 10.0]);
        cfg.scheme = WeightScheme::Balanced;
        cfg.rounds = 80;
        let trace = run::<FloatArith>(&cfg).unwrap();
        let last = trace.final_round();
        for x in &last.x {
            assert!((x.y - 5.0).abs() < 1e-9);
            assert!((x.z - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn a1_violation_is_flagged_and_convergence_fails() {
        // ring where node 0 never sends: node 1 only halves its state
        let per_round: Vec<Vec<Vec<usize>>> =
            (0..200).map(|_| vec![vec![], vec![2], vec![0]]).collect();
        let mut cfg = SimConfig::new(ring3(), vec![2.0, 4.0, 6.0]);
        cfg.scheme = WeightScheme::PushSum;
        cfg.activation = ActivationMode::Explicit { rounds: per_round };
        cfg.rounds = 200;
        cfg.k_conn = 10;
        let trace = run::<FloatArith>(&cfg).unwrap();
        assert_eq!(trace.header.a1_verified, Some(false));
        assert!(!trace.header.warnings.is_empty());
        let summary = trace.summary();
        assert!(summary.final_max_dev > 1e-3, "unexpected convergence");
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let mut cfg = ring_config(ExecMode::RatioRunningSum, 60);
        cfg.k_atc = 25;
        let trace = run::<FloatArith>(&cfg).unwrap();
        assert_eq!(trace.reports.len(), 2); // epochs 25 and 50
        let text = trace.to_jsonl();
        let parsed = Trace::<FloatArith>::from_jsonl(&text).unwrap();
        assert_eq!(parsed, trace);
        let replayed = replay::<FloatArith>(&text).unwrap();
        assert_eq!(replayed.to_jsonl(), text);
    }

    #[test]
    fn tampered_trace_is_rejected() {
        let trace = run::<FloatArith>(&ring_config(ExecMode::General, 20)).unwrap();
        let text = trace.to_jsonl();
        // flip one recorded state component in round 5
        let tampered = text.replace("\"k\":5,\"x\":[[", "\"k\":5,\"x\":[[9").replacen("", "", 0);
        assert_ne!(text, tampered);
        match replay::<FloatArith>(&tampered) {
            Err(SimError::ResidualMismatch { round: 5 }) => {}
            other => panic!("expected residual mismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_trace_is_a_schema_error() {
        let trace = run::<FloatArith>(&ring_config(ExecMode::General, 5)).unwrap();
        let text = trace.to_jsonl();
        let cut = &text[..text.len() / 2];
        assert!(Trace::<FloatArith>::from_jsonl(cut).is_err());
    }

    #[test]
    fn unknown_format_version_is_refused() {
        let trace = run::<FloatArith>(&ring_config(ExecMode::General, 5)).unwrap();
        let text = trace.to_jsonl().replace("\"format_version\":1", "\"format_version\":2");
        assert!(matches!(
            Trace::<FloatArith>::from_jsonl(&text),
            Err(SimError::FormatVersion { found: 2, .. })
        ));
    }

    #[test]
    fn config_json_round_trip() {
        let mut cfg = ring_config(ExecMode::RatioRunningSum, 60);
        cfg.seed = 17;
        cfg.tau = 1e-8;
        let back = SimConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);

        let mut cfg = SimConfig::new(ring3(), vec![1.0, 2.0, 3.0]);
        cfg.activation = ActivationMode::Explicit {
            rounds: vec![vec![vec![1], vec![], vec![0]]],
        };
        cfg.rounds = 1;
        let back = SimConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rational_run_is_exact_and_bounded() {
        let mut cfg = ring_config(ExecMode::RatioRunningSum, 40);
        cfg.arithmetic = ArithmeticKind::Rational;
        let trace = run::<RationalArith>(&cfg).unwrap();
        for record in &trace.rounds {
            assert!(record.global_residual.is_zero(), "round {}", record.k);
        }
        let mut cfg = ring_config(ExecMode::General, 2000);
        cfg.arithmetic = ArithmeticKind::Rational;
        assert!(matches!(run::<RationalArith>(&cfg), Err(SimError::InvalidConfig(_))));
    }
}
