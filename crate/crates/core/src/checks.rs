//! The invariant calculus: global conservation, the per-node local invariant
//! in both its general and ratio forms, initial-value recovery from round-0
//! running sums, and the periodic any-time consistency checks (ATCs) that
//! out-neighbors evaluate against each node.
//!
//! Everything here is a pure function over snapshots; the simulator assembles
//! the inputs either from checker-local caches (the protocol-faithful path)
//! or from trace rows (the omniscient audit path).

use std::collections::BTreeMap;

use serde_json::{json, Value};
use thiserror::Error;

use crate::arith::{Pair, Scalar};
use crate::graph::DirectedGraph;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("checker of node {target} is missing the running sum of two-hop neighbor {missing}")]
    MissingTwoHop { target: usize, missing: usize },
    #[error("snapshot covers {have} nodes, expected {want}")]
    ShapeMismatch { have: usize, want: usize },
}

/// `sum_j x_j[k] - sum_j x_j[0]`, summed in ascending node order. Zero (up to
/// rounding) whenever every node computed honestly.
pub fn global_invariant_residual<V: Scalar>(
    states: &[Pair<V>],
    initial: &[Pair<V>],
) -> Pair<V> {
    let mut now = Pair::<V>::zero();
    let mut base = Pair::<V>::zero();
    for x in states {
        now = now.add(x);
    }
    for x in initial {
        base = base.add(x);
    }
    now.sub(&base)
}

/// General local invariant: `x_j[k] + sum_l sigma_lj[k] - sum_i sigma_ji[k]`.
/// Equals `x_j[0]` at every round of an honest execution, for any valid
/// weights and any activation subsets.
pub fn local_invariant_eta_general<V: Scalar>(
    x: &Pair<V>,
    sigma_sent: &[Pair<V>],
    sigma_received_channels: &[Pair<V>],
) -> Pair<V> {
    let mut eta = x.clone();
    for s in sigma_sent {
        eta = eta.add(s);
    }
    for s in sigma_received_channels {
        eta = eta.sub(s);
    }
    eta
}

/// Ratio-form local invariant: `x_j[k] + D_j^+ sigma_j[k] - sum_i sigma_i[k]`.
pub fn local_invariant_eta_ratio<V: Scalar>(
    x: &Pair<V>,
    sigma: &Pair<V>,
    out_degree: usize,
    in_sigmas: &[Pair<V>],
) -> Pair<V> {
    let mut eta = x.add(&sigma.scale(&V::from_ratio(out_degree as i64, 1)));
    for s in in_sigmas {
        eta = eta.sub(s);
    }
    eta
}

/// Recovers a node's initial state from its first running-sum broadcast:
/// `x_i[0] = (1 + D_i^+) * sigma_i[1]`.
pub fn recover_initial<V: Scalar>(sigma_first: &Pair<V>, out_degree: usize) -> Pair<V> {
    sigma_first.scale(&V::from_ratio(1 + out_degree as i64, 1))
}

/// Everything one checker holds about one target at an ATC epoch. All of it
/// comes from broadcasts: the state and running sum from the target's own
/// per-round messages, the in-flow sums from the periodic two-hop broadcast,
/// and the initial state recovered from the round-0 broadcast.
#[derive(Clone, Debug)]
pub struct AtcInputs<V> {
    pub target: usize,
    pub x_at_epoch: Pair<V>,
    pub sigma_at_epoch: Pair<V>,
    pub out_degree: usize,
    pub in_sigmas_at_epoch: BTreeMap<usize, Pair<V>>,
    pub x0: Pair<V>,
}

/// The consistency check one out-neighbor evaluates:
/// `c_i = x_i + D_i^+ sigma_i - sum_{i'} sigma_{i'} - x_i[0]`.
/// `expected_in` is the target's in-neighborhood; a missing two-hop value is
/// an incomplete check, reported with the absent node.
pub fn atc_evaluate<V: Scalar>(
    inputs: &AtcInputs<V>,
    expected_in: &[usize],
) -> Result<Pair<V>, CheckError> {
    let mut in_sigmas = Vec::with_capacity(expected_in.len());
    for &source in expected_in {
        let sigma = inputs.in_sigmas_at_epoch.get(&source).ok_or(CheckError::MissingTwoHop {
            target: inputs.target,
            missing: source,
        })?;
        in_sigmas.push(sigma.clone());
    }
    let eta = local_invariant_eta_ratio(
        &inputs.x_at_epoch,
        &inputs.sigma_at_epoch,
        inputs.out_degree,
        &in_sigmas,
    );
    Ok(eta.sub(&inputs.x0))
}

/// Per-node detection threshold: the configured base scaled by the magnitude
/// of the recovered initial state. The invariant is exact, so in float mode
/// the only honest residual is rounding noise.
pub fn detection_threshold<V: Scalar>(tau_base: f64, x0: &Pair<V>) -> f64 {
    tau_base * x0.inf_norm_f64().max(1.0)
}

/// Verdict for one checked node at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct AtcTargetReport<V> {
    pub node: usize,
    pub c: Pair<V>,
    pub pass: bool,
    pub threshold: f64,
    /// Out-neighbors that evaluated the check. They all computed the same
    /// value from the same broadcast data.
    pub checkers: Vec<usize>,
}

/// One ATC epoch: a verdict per node plus the conserved-sum diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport<V> {
    pub epoch: usize,
    pub targets: Vec<AtcTargetReport<V>>,
    pub global_residual: Pair<V>,
    /// `sum_j x_j[k0]`: the mass a restart at this epoch would average.
    pub restart_sum: Pair<V>,
}

impl<V: Scalar> CheckReport<V> {
    pub fn all_pass(&self) -> bool {
        self.targets.iter().all(|t| t.pass)
    }

    pub fn failed_nodes(&self) -> Vec<usize> {
        self.targets.iter().filter(|t| !t.pass).map(|t| t.node).collect()
    }

    pub fn target(&self, node: usize) -> Option<&AtcTargetReport<V>> {
        self.targets.iter().find(|t| t.node == node)
    }

    pub fn to_json(&self) -> Value {
        json!({
            "type": "atc",
            "k0": self.epoch,
            "global_residual": self.global_residual.to_json(),
            "restart_sum": self.restart_sum.to_json(),
            "targets": self.targets.iter().map(|t| json!({
                "node": t.node + 1,
                "c": t.c.to_json(),
                "pass": t.pass,
                "threshold": t.threshold,
                "checkers": t.checkers.iter().map(|&c| c + 1).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }

    pub fn from_json(v: &Value) -> Result<Self, String> {
        let epoch = v["k0"].as_u64().ok_or("missing k0")? as usize;
        let global_residual = Pair::from_json(&v["global_residual"])?;
        let restart_sum = Pair::from_json(&v["restart_sum"])?;
        let mut targets = Vec::new();
        for t in v["targets"].as_array().ok_or("missing targets")? {
            let node = t["node"].as_u64().filter(|&x| x >= 1).ok_or("bad target node")? as usize - 1;
            let checkers = t["checkers"]
                .as_array()
                .ok_or("bad checkers")?
                .iter()
                .map(|c| {
                    c.as_u64()
                        .filter(|&x| x >= 1)
                        .map(|x| x as usize - 1)
                        .ok_or_else(|| "bad checker id".to_string())
                })
                .collect::<Result<Vec<_>, _>>()?;
            targets.push(AtcTargetReport {
                node,
                c: Pair::from_json(&t["c"])?,
                pass: t["pass"].as_bool().ok_or("bad pass")?,
                threshold: t["threshold"].as_f64().ok_or("bad threshold")?,
                checkers,
            });
        }
        Ok(CheckReport { epoch, targets, global_residual, restart_sum })
    }
}

/// Omniscient epoch evaluation straight from a state snapshot: used to
/// re-derive reports from trace rows. `sigmas` are the scalar running sums
/// and `x0s` the initial states (recovered or recorded).
pub fn atc_epoch_from_snapshot<V: Scalar>(
    epoch: usize,
    graph: &DirectedGraph,
    tau_base: f64,
    xs: &[Pair<V>],
    sigmas: &[Pair<V>],
    x0s: &[Pair<V>],
) -> Result<CheckReport<V>, CheckError> {
    let n = graph.n();
    if xs.len() != n || sigmas.len() != n || x0s.len() != n {
        return Err(CheckError::ShapeMismatch { have: xs.len().min(sigmas.len()).min(x0s.len()), want: n });
    }
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let inputs = AtcInputs {
            target: i,
            x_at_epoch: xs[i].clone(),
            sigma_at_epoch: sigmas[i].clone(),
            out_degree: graph.out_degree(i),
            in_sigmas_at_epoch: graph
                .in_neighbors(i)
                .iter()
                .map(|&src| (src, sigmas[src].clone()))
                .collect(),
            x0: x0s[i].clone(),
        };
        let c = atc_evaluate(&inputs, graph.in_neighbors(i))?;
        let threshold = detection_threshold(tau_base, &x0s[i]);
        let pass = c.inf_norm_f64() <= threshold;
        targets.push(AtcTargetReport {
            node: i,
            c,
            pass,
            threshold,
            checkers: graph.out_neighbors(i).to_vec(),
        });
    }
    Ok(CheckReport {
        epoch,
        targets,
        global_residual: global_invariant_residual(xs, x0s),
        restart_sum: {
            let mut sum = Pair::<V>::zero();
            for x in xs {
                sum = sum.add(x);
            }
            sum
        },
    })
}

/// The restart-soundness condition behind property P1: when every ATC passes
/// at the epoch, the held mass equals the initial mass, so a fault-free
/// continuation averages to the true mean.
pub fn verify_restart_soundness<V: Scalar>(
    states_at_epoch: &[Pair<V>],
    initial: &[Pair<V>],
    tol_abs: f64,
) -> bool {
    global_invariant_residual(states_at_epoch, initial).inf_norm_f64() <= tol_abs
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    fn pair(y: f64, z: f64) -> Pair<f64> {
        Pair::new(y, z)
    }

    #[test]
    fn eta_at_round_zero_is_the_initial_state() {
        let x0 = pair(2.0, 1.0);
        let eta = local_invariant_eta_general(&x0, &[], &[pair(0.0, 0.0)]);
        assert_eq!(eta, x0);
        let eta = local_invariant_eta_ratio(&x0, &pair(0.0, 0.0), 3, &[pair(0.0, 0.0)]);
        assert_eq!(eta, x0);
    }

    #[test]
    fn ring_round_one_eta_telescopes_by_hand() {
        // x_1[1]=[4,1], sigma_1[1]=[1,0.5], sigma_3[1]=[3,0.5] -> eta=[2,1]
        let eta = local_invariant_eta_general(
            &pair(4.0, 1.0),
            &[pair(1.0, 0.5)],
            &[pair(3.0, 0.5)],
        );
        assert_eq!(eta, pair(2.0, 1.0));
        // the ratio form with D+=1 collapses to the same value
        let eta = local_invariant_eta_ratio(&pair(4.0, 1.0), &pair(1.0, 0.5), 1, &[pair(3.0, 0.5)]);
        assert_eq!(eta, pair(2.0, 1.0));
    }

    #[test]
    fn global_residual_examples() {
        let x0 = [pair(2.0, 1.0), pair(4.0, 1.0), pair(6.0, 1.0)];
        assert_eq!(global_invariant_residual(&x0, &x0), pair(0.0, 0.0));
        let x1 = [pair(4.0, 1.0), pair(3.0, 1.0), pair(5.0, 1.0)];
        assert_eq!(global_invariant_residual(&x1, &x0), pair(0.0, 0.0));
        let corrupted = [pair(5.0, 1.0), pair(3.0, 1.0), pair(5.0, 1.0)];
        assert_eq!(global_invariant_residual(&corrupted, &x0), pair(1.0, 0.0));
    }

    #[test]
    fn recover_initial_examples() {
        assert_eq!(recover_initial(&pair(1.0, 0.5), 1), pair(2.0, 1.0));
        assert_eq!(recover_initial(&pair(1.5, 0.25), 3), pair(6.0, 1.0));
        let sigma = Pair::new(BigRational::from_ratio(2, 3), BigRational::from_ratio(1, 3));
        let recovered = recover_initial(&sigma, 2);
        assert_eq!(recovered, Pair::new(BigRational::from_ratio(2, 1), BigRational::from_ratio(1, 1)));
    }

    #[test]
    fn atc_missing_two_hop_is_reported() {
        let inputs = AtcInputs {
            target: 1,
            x_at_epoch: pair(1.0, 1.0),
            sigma_at_epoch: pair(0.0, 0.0),
            out_degree: 1,
            in_sigmas_at_epoch: BTreeMap::new(),
            x0: pair(1.0, 1.0),
        };
        assert_eq!(
            atc_evaluate(&inputs, &[0]).unwrap_err(),
            CheckError::MissingTwoHop { target: 1, missing: 0 }
        );
    }

    #[test]
    fn atc_zero_for_consistent_inputs() {
        // the ring round-1 snapshot for node 1
        let inputs = AtcInputs {
            target: 0,
            x_at_epoch: pair(4.0, 1.0),
            sigma_at_epoch: pair(1.0, 0.5),
            out_degree: 1,
            in_sigmas_at_epoch: [(2usize, pair(3.0, 0.5))].into_iter().collect(),
            x0: pair(2.0, 1.0),
        };
        assert_eq!(atc_evaluate(&inputs, &[2]).unwrap(), pair(0.0, 0.0));
    }

    #[test]
    fn threshold_scales_with_initial_magnitude() {
        assert_eq!(detection_threshold(1e-9, &pair(0.5, 1.0)), 1e-9);
        assert_eq!(detection_threshold(1e-9, &pair(-200.0, 1.0)), 2e-7);
    }

    #[test]
    fn report_json_round_trip() {
        let report = CheckReport {
            epoch: 25,
            targets: vec![AtcTargetReport {
                node: 1,
                c: pair(0.0, 0.0),
                pass: true,
                threshold: 1e-9,
                checkers: vec![2],
            }],
            global_residual: pair(0.0, 0.0),
            restart_sum: pair(12.0, 3.0),
        };
        let j = report.to_json();
        assert_eq!(j["targets"][0]["node"], serde_json::json!(2));
        let back = CheckReport::<f64>::from_json(&j).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn restart_soundness_tolerates_only_small_residuals() {
        let x0 = [pair(2.0, 1.0), pair(4.0, 1.0)];
        let ok = [pair(3.0, 1.0), pair(3.0, 1.0)];
        assert!(verify_restart_soundness(&ok, &x0, 1e-12));
        let bad = [pair(3.5, 1.0), pair(3.0, 1.0)];
        assert!(!verify_restart_soundness(&bad, &x0, 1e-12));
    }
}
