//! Per-round weight matrices for the three schemes: static ratio-consensus
//! weights, generalized push-sum weights over active subsets, and balanced
//! (doubly stochastic) weights for symmetric activity.
//!
//! Every constructed matrix is column stochastic with support restricted to
//! each column's active out-set plus the diagonal. `validate_weight_matrix`
//! re-checks all of that and reports violations as data.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::arith::Scalar;
use crate::graph::DirectedGraph;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum WeightError {
    #[error("active set of node {node} contains {target}, which is not a static out-neighbor")]
    ActiveNotSubset { node: usize, target: usize },
    #[error("balanced weights need symmetric activity, but edge ({receiver}, {sender}) has no reverse")]
    AsymmetricActivity { receiver: usize, sender: usize },
    #[error("active sets cover {have} nodes, graph has {n}")]
    ShapeMismatch { have: usize, n: usize },
}

/// Weight construction scheme named in run configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    RatioConsensus,
    PushSum,
    Balanced,
}

impl std::fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightScheme::RatioConsensus => write!(f, "ratio_consensus"),
            WeightScheme::PushSum => write!(f, "push_sum"),
            WeightScheme::Balanced => write!(f, "balanced"),
        }
    }
}

/// One column of a weight matrix: the diagonal entry plus the off-diagonal
/// support, sorted by row.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightColumn<V> {
    pub diag: V,
    pub off: Vec<(usize, V)>,
}

/// Sparse column-major weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix<V> {
    n: usize,
    cols: Vec<WeightColumn<V>>,
}

impl<V: Scalar> WeightMatrix<V> {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn column(&self, j: usize) -> &WeightColumn<V> {
        &self.cols[j]
    }

    /// Entry `w_{l,j}`; zero off the support.
    pub fn entry(&self, l: usize, j: usize) -> V {
        if l == j {
            return self.cols[j].diag.clone();
        }
        self.cols[j]
            .off
            .iter()
            .find(|(row, _)| *row == l)
            .map(|(_, w)| w.clone())
            .unwrap_or_else(V::zero)
    }

    /// Dense row-major materialization (oracle cross-checks, CSV dumps).
    pub fn to_dense(&self) -> Vec<Vec<V>> {
        let mut rows = vec![vec![V::zero(); self.n]; self.n];
        for (j, col) in self.cols.iter().enumerate() {
            rows[j][j] = col.diag.clone();
            for (l, w) in &col.off {
                rows[*l][j] = w.clone();
            }
        }
        rows
    }

    /// Row-major CSV dump of the dense matrix.
    pub fn dense_csv(&self) -> String {
        self.to_dense()
            .iter()
            .map(|row| row.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))
            .map(|line| line + "\n")
            .collect()
    }
}

/// Static weights `w_{l,j} = 1/(1 + D_j^+)` on the full out-neighborhood.
pub fn ratio_consensus_weights<V: Scalar>(g: &DirectedGraph) -> WeightMatrix<V> {
    let cols = (0..g.n())
        .map(|j| {
            let w = V::from_ratio(1, 1 + g.out_degree(j) as i64);
            WeightColumn {
                diag: w.clone(),
                off: g.out_neighbors(j).iter().map(|&l| (l, w.clone())).collect(),
            }
        })
        .collect();
    WeightMatrix { n: g.n(), cols }
}

fn check_shape_and_subsets(
    g: &DirectedGraph,
    active: &[Vec<usize>],
) -> Result<(), WeightError> {
    if active.len() != g.n() {
        return Err(WeightError::ShapeMismatch { have: active.len(), n: g.n() });
    }
    for (j, set) in active.iter().enumerate() {
        for &l in set {
            if l >= g.n() || !g.out_neighbors(j).contains(&l) {
                return Err(WeightError::ActiveNotSubset { node: j, target: l });
            }
        }
    }
    Ok(())
}

/// Per-round weights `w_{l,j} = 1/(1 + D_j^+[k])` over the active out-sets.
/// A node sending to nobody gets the unit column.
pub fn push_sum_weights<V: Scalar>(
    g: &DirectedGraph,
    active: &[Vec<usize>],
) -> Result<WeightMatrix<V>, WeightError> {
    check_shape_and_subsets(g, active)?;
    let cols = active
        .iter()
        .map(|set| {
            let w = V::from_ratio(1, 1 + set.len() as i64);
            let mut off: Vec<(usize, V)> = set.iter().map(|&l| (l, w.clone())).collect();
            off.sort_by_key(|(l, _)| *l);
            WeightColumn { diag: w, off }
        })
        .collect();
    Ok(WeightMatrix { n: g.n(), cols })
}

/// Balanced weights for symmetric activity: `w_{l,j} = 1/N` on the active
/// neighborhood and `w_{j,j} = 1 - D_j[k]/N`. The result is doubly stochastic.
pub fn balanced_weights<V: Scalar>(
    g: &DirectedGraph,
    active: &[Vec<usize>],
) -> Result<WeightMatrix<V>, WeightError> {
    check_shape_and_subsets(g, active)?;
    for (j, set) in active.iter().enumerate() {
        for &l in set {
            if !active[l].contains(&j) {
                return Err(WeightError::AsymmetricActivity { receiver: l, sender: j });
            }
        }
    }
    let n = g.n() as i64;
    let cols = active
        .iter()
        .map(|set| {
            let d = set.len() as i64;
            let w = V::from_ratio(1, n);
            let mut off: Vec<(usize, V)> = set.iter().map(|&l| (l, w.clone())).collect();
            off.sort_by_key(|(l, _)| *l);
            WeightColumn { diag: V::from_ratio(n - d, n), off }
        })
        .collect();
    Ok(WeightMatrix { n: g.n(), cols })
}

/// One violated weight property. Node ids are 0-based in the fields and
/// printed 1-based, matching the external format.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WeightViolation {
    /// W1: nonzero entry outside the active out-set plus diagonal.
    Support { row: usize, col: usize },
    /// W2: off-diagonal entry outside `(eps, 1 - eps)`.
    Range { row: usize, col: usize },
    /// W3: diagonal differs from `1 - sum(off-diagonal column entries)`.
    DiagonalIdentity { col: usize },
    /// W3: diagonal not above `eps`.
    DiagonalNotAboveEpsilon { col: usize },
    /// Column does not sum to 1 within tolerance.
    ColumnSum { col: usize },
}

impl std::fmt::Display for WeightViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WeightViolation::Support { row, col } => {
                write!(f, "W1: entry ({}, {}) outside the active support", row + 1, col + 1)
            }
            WeightViolation::Range { row, col } => {
                write!(f, "W2: entry ({}, {}) outside (eps, 1-eps)", row + 1, col + 1)
            }
            WeightViolation::DiagonalIdentity { col } => {
                write!(f, "W3: diagonal of column {} != 1 - sum of sent weights", col + 1)
            }
            WeightViolation::DiagonalNotAboveEpsilon { col } => {
                write!(f, "W3: diagonal of column {} not above eps", col + 1)
            }
            WeightViolation::ColumnSum { col } => {
                write!(f, "column {} does not sum to 1", col + 1)
            }
        }
    }
}

/// Validation outcome; empty means the matrix satisfies W1-W3 and column
/// stochasticity at the given tolerance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WeightReport {
    pub violations: Vec<WeightViolation>,
}

impl WeightReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Default W2 lower bound used when a run does not configure one: `1/(2N)`,
/// strictly below the smallest weight any scheme can produce.
pub fn default_epsilon<V: Scalar>(n: usize) -> V {
    V::from_ratio(1, 2 * n as i64)
}

/// Checks W1 (support), W2 (range), W3 (diagonal identity and lower bound),
/// and column stochasticity within `tol`. Violations are data, not errors.
pub fn validate_weight_matrix<V: Scalar>(
    w: &WeightMatrix<V>,
    active: &[Vec<usize>],
    epsilon: &V,
    tol: &V,
) -> WeightReport {
    let mut violations = Vec::new();
    let one = V::one();
    for (j, col) in w.cols.iter().enumerate() {
        let mut off_sum = V::zero();
        for (l, weight) in &col.off {
            if *l == j || !active.get(j).is_some_and(|set| set.contains(l)) {
                violations.push(WeightViolation::Support { row: *l, col: j });
            }
            if !(weight > epsilon && weight.clone() + epsilon < one) {
                violations.push(WeightViolation::Range { row: *l, col: j });
            }
            off_sum = off_sum + weight;
        }
        let expected_diag = one.clone() - &off_sum;
        let diag_gap = col.diag.clone() - &expected_diag;
        if diag_gap.abs_f64() > tol.to_f64() {
            violations.push(WeightViolation::DiagonalIdentity { col: j });
        }
        if &col.diag <= epsilon {
            violations.push(WeightViolation::DiagonalNotAboveEpsilon { col: j });
        }
        let total = off_sum + &col.diag;
        if (total - &one).abs_f64() > tol.to_f64() {
            violations.push(WeightViolation::ColumnSum { col: j });
        }
    }
    WeightReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate, GraphModel};
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn ring3() -> DirectedGraph {
        DirectedGraph::new(3, [(1, 0), (2, 1), (0, 2)]).unwrap()
    }

    fn all_active(g: &DirectedGraph) -> Vec<Vec<usize>> {
        (0..g.n()).map(|j| g.out_neighbors(j).to_vec()).collect()
    }

    #[test]
    fn ring_weights_are_one_half() {
        let w = ratio_consensus_weights::<f64>(&ring3());
        for j in 0..3 {
            assert_eq!(w.column(j).diag, 0.5);
            assert_eq!(w.column(j).off.len(), 1);
            assert_eq!(w.column(j).off[0].1, 0.5);
        }
    }

    #[test]
    fn complete_weights_are_one_third() {
        let g = generate(3, GraphModel::Complete, 0).unwrap();
        let w = ratio_consensus_weights::<BigRational>(&g);
        let third = BigRational::from_ratio(1, 3);
        for j in 0..3 {
            assert_eq!(w.column(j).diag, third);
            for (_, v) in &w.column(j).off {
                assert_eq!(v, &third);
            }
        }
    }

    #[test]
    fn mixed_degree_weights() {
        // column 1 has out-degree 2, columns 2 and 3 have out-degree 1
        let g = DirectedGraph::new(3, [(1, 0), (2, 0), (0, 1), (0, 2)]).unwrap();
        let w = ratio_consensus_weights::<BigRational>(&g);
        assert_eq!(w.column(0).diag, BigRational::from_ratio(1, 3));
        assert_eq!(w.column(1).diag, BigRational::from_ratio(1, 2));
        assert_eq!(w.column(2).diag, BigRational::from_ratio(1, 2));
    }

    #[test]
    fn push_sum_all_active_equals_ratio() {
        let g = generate(6, GraphModel::CycleChords { extra: 5 }, 3).unwrap();
        let a = ratio_consensus_weights::<f64>(&g);
        let b = push_sum_weights::<f64>(&g, &all_active(&g)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn push_sum_idle_node_gets_unit_column() {
        let g = ring3();
        let w = push_sum_weights::<f64>(&g, &[vec![1], vec![], vec![]]).unwrap();
        assert_eq!(w.column(0).diag, 0.5);
        assert_eq!(w.column(0).off, vec![(1, 0.5)]);
        assert_eq!(w.column(1).diag, 1.0);
        assert!(w.column(1).off.is_empty());
        assert_eq!(w.column(2).diag, 1.0);
    }

    #[test]
    fn push_sum_rejects_non_subset() {
        let err = push_sum_weights::<f64>(&ring3(), &[vec![2], vec![], vec![]]).unwrap_err();
        assert_eq!(err, WeightError::ActiveNotSubset { node: 0, target: 2 });
    }

    #[test]
    fn balanced_symmetric_pair() {
        let g = DirectedGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        let w = balanced_weights::<f64>(&g, &all_active(&g)).unwrap();
        for j in 0..2 {
            assert_eq!(w.column(j).diag, 0.5);
            assert_eq!(w.column(j).off[0].1, 0.5);
        }
    }

    #[test]
    fn balanced_no_activity_is_identity() {
        let g = DirectedGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        let w = balanced_weights::<f64>(&g, &[vec![], vec![]]).unwrap();
        for j in 0..2 {
            assert_eq!(w.column(j).diag, 1.0);
            assert!(w.column(j).off.is_empty());
        }
    }

    #[test]
    fn balanced_path_columns_and_rows() {
        // symmetric path 1 <-> 2 <-> 3
        let g = DirectedGraph::new(3, [(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap();
        let w = balanced_weights::<BigRational>(&g, &all_active(&g)).unwrap();
        let third = BigRational::from_ratio(1, 3);
        let two_thirds = BigRational::from_ratio(2, 3);
        assert_eq!(w.entry(0, 0), two_thirds);
        assert_eq!(w.entry(1, 0), third);
        assert_eq!(w.entry(2, 0), BigRational::from_ratio(0, 1));
        assert_eq!(w.entry(1, 1), third);
        assert_eq!(w.entry(2, 2), two_thirds);
        // doubly stochastic: rows also sum to 1
        let dense = w.to_dense();
        for row in dense {
            let sum: BigRational = row.into_iter().fold(BigRational::from_ratio(0, 1), |a, b| a + b);
            assert_eq!(sum, BigRational::from_ratio(1, 1));
        }
    }

    #[test]
    fn balanced_rejects_asymmetric_activity() {
        let g = DirectedGraph::new(2, [(0, 1), (1, 0)]).unwrap();
        let err = balanced_weights::<f64>(&g, &[vec![1], vec![]]).unwrap_err();
        assert_eq!(err, WeightError::AsymmetricActivity { receiver: 1, sender: 0 });
    }

    #[test]
    fn validation_accepts_ring_weights() {
        let g = ring3();
        let w = ratio_consensus_weights::<f64>(&g);
        let report = validate_weight_matrix(&w, &all_active(&g), &0.1, &1e-12);
        assert!(report.is_valid(), "{:?}", report.violations);
    }

    #[test]
    fn validation_flags_bad_column_sum() {
        let g = ring3();
        let mut w = ratio_consensus_weights::<f64>(&g);
        w.cols[0].diag = 0.4; // column now sums to 0.9 and breaks W3
        let report = validate_weight_matrix(&w, &all_active(&g), &0.1, &1e-12);
        assert!(report.violations.contains(&WeightViolation::ColumnSum { col: 0 }));
        assert!(report.violations.contains(&WeightViolation::DiagonalIdentity { col: 0 }));
    }

    #[test]
    fn validation_flags_support_violation() {
        let g = ring3();
        let mut w = ratio_consensus_weights::<f64>(&g);
        w.cols[0].off.push((2, 0.1)); // (3,1) is not an edge
        let report = validate_weight_matrix(&w, &all_active(&g), &0.01, &1.0);
        assert!(report.violations.contains(&WeightViolation::Support { row: 2, col: 0 }));
    }

    #[test]
    fn dense_csv_shape() {
        let w = ratio_consensus_weights::<f64>(&ring3());
        let csv = w.dense_csv();
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().next().unwrap().split(',').count(), 3);
    }

    fn arb_graph() -> impl Strategy<Value = DirectedGraph> {
        (2usize..=10, any::<u64>()).prop_map(|(n, seed)| {
            generate(n, GraphModel::CycleChords { extra: n / 2 }, seed).unwrap()
        })
    }

    proptest! {
        #[test]
        fn constructed_matrices_validate(g in arb_graph()) {
            let active = all_active(&g);
            let eps = default_epsilon::<f64>(g.n());
            let ratio = ratio_consensus_weights::<f64>(&g);
            prop_assert!(validate_weight_matrix(&ratio, &active, &eps, &1e-12).is_valid());
            let push = push_sum_weights::<f64>(&g, &active).unwrap();
            prop_assert!(validate_weight_matrix(&push, &active, &eps, &1e-12).is_valid());
            let sym = g.symmetrized();
            let sym_active: Vec<Vec<usize>> =
                (0..sym.n()).map(|j| sym.out_neighbors(j).to_vec()).collect();
            let bal = balanced_weights::<f64>(&sym, &sym_active).unwrap();
            prop_assert!(validate_weight_matrix(&bal, &sym_active, &default_epsilon::<f64>(sym.n()), &1e-12).is_valid());
            // doubly stochastic within 1e-12
            let dense = bal.to_dense();
            for row in dense {
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-12);
            }
        }
    }
}
