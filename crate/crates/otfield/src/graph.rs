//! Attributed graphs, per-node signals, and the continuous
//! Weisfeiler-Lehman feature lifting that turns a graph into a point cloud.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::order_independent_sum;

/// Raw graph parts before validation. Produced by parsers and test setups.
#[derive(Clone, Debug)]
pub struct GraphData {
    pub node_count: usize,
    /// `node_count x attr_dim`, one row per node.
    pub features: DMatrix<f64>,
    /// Undirected edges as index pairs.
    pub edges: Vec<(usize, usize)>,
    /// Per-edge weights; `None` means every edge has weight 1.
    pub weights: Option<Vec<f64>>,
}

/// One reason a [`GraphData`] cannot become an [`AttributedGraph`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    EmptyGraph,
    ZeroFeatureDim,
    NodeCountMismatch {
        node_count: usize,
        feature_rows: usize,
    },
    EdgeEndpointOutOfRange {
        edge: usize,
        node: usize,
    },
    DuplicateEdge {
        u: usize,
        v: usize,
    },
    NonFiniteFeature {
        node: usize,
        column: usize,
    },
    WeightCountMismatch {
        expected: usize,
        found: usize,
    },
    NonFiniteWeight {
        edge: usize,
    },
    NonPositiveWeight {
        edge: usize,
    },
}

/// Everything wrong with a candidate graph, in deterministic order.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check all structural invariants without constructing a graph.
pub fn validate_graph(data: &GraphData) -> ValidationReport {
    let mut v = Vec::new();
    if data.node_count == 0 {
        v.push(Violation::EmptyGraph);
    }
    if data.features.ncols() == 0 {
        v.push(Violation::ZeroFeatureDim);
    }
    if data.features.nrows() != data.node_count {
        v.push(Violation::NodeCountMismatch {
            node_count: data.node_count,
            feature_rows: data.features.nrows(),
        });
    }
    for r in 0..data.features.nrows() {
        for c in 0..data.features.ncols() {
            if !data.features[(r, c)].is_finite() {
                v.push(Violation::NonFiniteFeature { node: r, column: c });
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    for (i, &(a, b)) in data.edges.iter().enumerate() {
        if a >= data.node_count {
            v.push(Violation::EdgeEndpointOutOfRange { edge: i, node: a });
        }
        if b >= data.node_count {
            v.push(Violation::EdgeEndpointOutOfRange { edge: i, node: b });
        }
        if !seen.insert((a.min(b), a.max(b))) {
            v.push(Violation::DuplicateEdge {
                u: a.min(b),
                v: a.max(b),
            });
        }
    }
    if let Some(w) = &data.weights {
        if w.len() != data.edges.len() {
            v.push(Violation::WeightCountMismatch {
                expected: data.edges.len(),
                found: w.len(),
            });
        }
        for (i, &x) in w.iter().enumerate() {
            if !x.is_finite() {
                v.push(Violation::NonFiniteWeight { edge: i });
            } else if x <= 0.0 {
                v.push(Violation::NonPositiveWeight { edge: i });
            }
        }
    }
    ValidationReport { violations: v }
}

/// A validated undirected graph with node features. Construction fails
/// unless [`validate_graph`] reports no violations, so holders never need
/// to re-check indices or finiteness.
#[derive(Clone, Debug)]
pub struct AttributedGraph {
    node_count: usize,
    attr_dim: usize,
    features: DMatrix<f64>,
    edges: Vec<(usize, usize)>,
    weights: Vec<f64>,
    /// adjacency[u] lists (neighbor, weight); a self-loop appears once.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl AttributedGraph {
    pub fn from_data(data: GraphData) -> Result<Self> {
        let report = validate_graph(&data);
        if !report.is_valid() {
            return Err(Error::InvalidGraph {
                sample: None,
                violations: report.violations,
            });
        }
        let weights = data.weights.unwrap_or_else(|| vec![1.0; data.edges.len()]);
        let mut adjacency = vec![Vec::new(); data.node_count];
        for (&(a, b), &w) in data.edges.iter().zip(&weights) {
            adjacency[a].push((b, w));
            if a != b {
                adjacency[b].push((a, w));
            }
        }
        Ok(Self {
            node_count: data.node_count,
            attr_dim: data.features.ncols(),
            features: data.features,
            edges: data.edges,
            weights,
            adjacency,
        })
    }

    /// Convenience constructor with unit weights and node count taken
    /// from the feature matrix.
    pub fn new(features: DMatrix<f64>, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::from_data(GraphData {
            node_count: features.nrows(),
            features,
            edges,
            weights: None,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn features(&self) -> &DMatrix<f64> {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn neighbors(&self, u: usize) -> &[(usize, f64)] {
        &self.adjacency[u]
    }

    /// Weighted degree, summed in value order so node relabeling cannot
    /// change the result in the last bit.
    pub fn weighted_degree(&self, u: usize) -> f64 {
        let mut ws: Vec<f64> = self.adjacency[u].iter().map(|&(_, w)| w).collect();
        order_independent_sum(&mut ws)
    }
}

/// A scalar value per node of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeSignal {
    values: DVector<f64>,
}

impl NodeSignal {
    pub fn new(values: Vec<f64>, node_count: usize) -> Result<Self> {
        if values.len() != node_count {
            return Err(Error::ShapeMismatch(format!(
                "signal has {} values but the graph has {} nodes",
                values.len(),
                node_count
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data {
                sample: None,
                message: format!("signal value at node {i} is not finite"),
            });
        }
        Ok(Self {
            values: DVector::from_vec(values),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.len() == 0
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }
}

/// Node embeddings after `iterations` rounds of continuous WL smoothing,
/// with the original features in the leading columns. Shape is
/// `node_count x (attr_dim * (iterations + 1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct WlFeatures {
    values: DMatrix<f64>,
    iterations: usize,
    attr_dim: usize,
}

impl WlFeatures {
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn node_count(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }
}

/// Continuous WL lifting: each round averages a node with the weighted
/// mean of its neighbors, and every round's result is concatenated.
/// Isolated nodes carry their value forward unchanged. Neighbor sums are
/// accumulated in value order, which makes the output exactly
/// permutation-equivariant, not just up to roundoff.
pub fn continuous_wl_embed(graph: &AttributedGraph, iterations: usize) -> WlFeatures {
    let n = graph.node_count();
    let d = graph.attr_dim();
    let mut values = DMatrix::zeros(n, d * (iterations + 1));
    values.view_mut((0, 0), (n, d)).copy_from(graph.features());

    let degrees: Vec<f64> = (0..n).map(|u| graph.weighted_degree(u)).collect();
    let mut summands = Vec::new();
    for h in 1..=iterations {
        let prev = (h - 1) * d;
        let cur = h * d;
        for u in 0..n {
            let nbrs = graph.neighbors(u);
            for c in 0..d {
                let own = values[(u, prev + c)];
                values[(u, cur + c)] = if nbrs.is_empty() {
                    own
                } else {
                    summands.clear();
                    summands.extend(nbrs.iter().map(|&(v, w)| w * values[(v, prev + c)]));
                    let total = order_independent_sum(&mut summands);
                    0.5 * (own + total / degrees[u])
                };
            }
        }
    }
    WlFeatures {
        values,
        iterations,
        attr_dim: d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    fn path_graph() -> AttributedGraph {
        AttributedGraph::new(dmatrix![0.0; 1.0], vec![(0, 1)]).unwrap()
    }

    #[test]
    fn zero_iterations_returns_input_features() {
        let g = AttributedGraph::new(dmatrix![1.0, 2.0; 3.0, 4.0; 5.0, 6.0], vec![(0, 1), (1, 2)])
            .unwrap();
        let wl = continuous_wl_embed(&g, 0);
        assert_eq!(wl.values(), g.features());
        assert_eq!(wl.dim(), 2);
    }

    #[test]
    fn two_node_path_single_iteration() {
        // By hand: each endpoint has one neighbor, so the appended entry is
        // 0.5 * (own + neighbor). Node 0: 0.5*(0+1) = 0.5; node 1: 0.5*(1+0) = 0.5.
        let wl = continuous_wl_embed(&path_graph(), 1);
        let expected = dmatrix![0.0, 0.5; 1.0, 0.5];
        assert_eq!(wl.values(), &expected);
    }

    #[test]
    fn two_node_path_second_iteration() {
        // Round 2 from (0.5, 0.5): both nodes see 0.5*(0.5+0.5) = 0.5.
        let wl = continuous_wl_embed(&path_graph(), 2);
        let expected = dmatrix![0.0, 0.5, 0.5; 1.0, 0.5, 0.5];
        assert_eq!(wl.values(), &expected);
    }

    #[test]
    fn isolated_node_copies_feature_forward() {
        let g = AttributedGraph::new(dmatrix![7.0; -1.0; 3.0], vec![(0, 1)]).unwrap();
        let wl = continuous_wl_embed(&g, 3);
        for h in 0..=3 {
            assert_eq!(wl.values()[(2, h)], 3.0);
        }
    }

    #[test]
    fn self_loop_counts_once_in_degree_and_sum() {
        // Node 0 has a self-loop (w=2) and an edge to node 1 (w=1):
        // degree 3, neighbor average (2*4 + 1*1)/3 = 3, update 0.5*(4+3) = 3.5.
        let g = AttributedGraph::from_data(GraphData {
            node_count: 2,
            features: dmatrix![4.0; 1.0],
            edges: vec![(0, 0), (0, 1)],
            weights: Some(vec![2.0, 1.0]),
        })
        .unwrap();
        assert_eq!(g.weighted_degree(0), 3.0);
        let wl = continuous_wl_embed(&g, 1);
        assert_eq!(wl.values()[(0, 1)], 3.5);
    }

    #[test]
    fn weighted_average_uses_weighted_degree() {
        // Node 0 neighbors: node 1 (w=3, value 2) and node 2 (w=1, value 6).
        // Average = (3*2 + 1*6)/4 = 3; update = 0.5*(0+3) = 1.5.
        let g = AttributedGraph::from_data(GraphData {
            node_count: 3,
            features: dmatrix![0.0; 2.0; 6.0],
            edges: vec![(0, 1), (0, 2)],
            weights: Some(vec![3.0, 1.0]),
        })
        .unwrap();
        let wl = continuous_wl_embed(&g, 1);
        assert_eq!(wl.values()[(0, 1)], 1.5);
    }

    #[test]
    fn validation_reports_each_violation() {
        let report = validate_graph(&GraphData {
            node_count: 2,
            features: dmatrix![0.0; f64::NAN],
            edges: vec![(0, 5), (0, 1), (1, 0)],
            weights: Some(vec![1.0, -1.0]),
        });
        assert!(!report.is_valid());
        assert!(report
            .violations
            .contains(&Violation::EdgeEndpointOutOfRange { edge: 0, node: 5 }));
        assert!(report
            .violations
            .contains(&Violation::DuplicateEdge { u: 0, v: 1 }));
        assert!(report
            .violations
            .contains(&Violation::NonFiniteFeature { node: 1, column: 0 }));
        assert!(report.violations.contains(&Violation::WeightCountMismatch {
            expected: 3,
            found: 2
        }));
        assert!(report
            .violations
            .contains(&Violation::NonPositiveWeight { edge: 1 }));
    }

    #[test]
    fn construction_rejects_invalid_graphs() {
        let err = AttributedGraph::new(dmatrix![1.0], vec![(0, 3)]).unwrap_err();
        assert!(matches!(err, Error::InvalidGraph { .. }));
        let empty = AttributedGraph::new(DMatrix::zeros(0, 1), vec![]).unwrap_err();
        assert!(matches!(empty, Error::InvalidGraph { .. }));
    }

    #[test]
    fn signal_length_must_match_node_count() {
        assert!(NodeSignal::new(vec![1.0, 2.0], 2).is_ok());
        assert!(NodeSignal::new(vec![1.0], 2).is_err());
        assert!(NodeSignal::new(vec![1.0, f64::INFINITY], 2).is_err());
    }

    /// Random connected-ish graph with a permutation of its nodes.
    fn graph_and_permutation() -> impl Strategy<Value = (GraphData, Vec<usize>)> {
        (2usize..8, 1usize..3).prop_flat_map(|(n, d)| {
            let all_pairs: Vec<(usize, usize)> =
                (0..n).flat_map(|a| (a..n).map(move |b| (a, b))).collect();
            let feats = proptest::collection::vec(-10.0..10.0f64, n * d);
            let edges = proptest::sample::subsequence(all_pairs.clone(), 0..=all_pairs.len());
            let perm_keys = proptest::collection::vec(any::<u64>(), n);
            (Just(n), Just(d), feats, edges, perm_keys).prop_map(|(n, d, feats, edges, keys)| {
                let weights = edges
                    .iter()
                    .enumerate()
                    .map(|(i, _)| 0.5 + (i as f64) * 0.25)
                    .collect();
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by_key(|&i| (keys[i], i));
                let data = GraphData {
                    node_count: n,
                    features: DMatrix::from_row_slice(n, d, &feats),
                    edges,
                    weights: Some(weights),
                };
                (data, order)
            })
        })
    }

    proptest! {
        #[test]
        fn wl_is_exactly_permutation_equivariant((data, perm) in graph_and_permutation()) {
            let n = data.node_count;
            let d = data.features.ncols();
            // perm[u] = new label of old node u.
            let mut pf = DMatrix::zeros(n, d);
            for u in 0..n {
                for c in 0..d {
                    pf[(perm[u], c)] = data.features[(u, c)];
                }
            }
            let pedges: Vec<_> = data.edges.iter().map(|&(a, b)| (perm[a], perm[b])).collect();
            let g = AttributedGraph::from_data(data.clone()).unwrap();
            let pg = AttributedGraph::from_data(GraphData {
                node_count: n,
                features: pf,
                edges: pedges,
                weights: data.weights.clone(),
            }).unwrap();
            let wl = continuous_wl_embed(&g, 3);
            let pwl = continuous_wl_embed(&pg, 3);
            for (u, &pu) in perm.iter().enumerate() {
                for c in 0..wl.dim() {
                    prop_assert_eq!(
                        wl.values()[(u, c)].to_bits(),
                        pwl.values()[(pu, c)].to_bits()
                    );
                }
            }
        }

        #[test]
        fn wl_values_stay_in_previous_level_hull((data, _) in graph_and_permutation()) {
            let g = AttributedGraph::from_data(data).unwrap();
            let d = g.attr_dim();
            let wl = continuous_wl_embed(&g, 3);
            for h in 1..=3usize {
                for c in 0..d {
                    let prev_col = wl.values().column((h - 1) * d + c);
                    let lo = prev_col.min();
                    let hi = prev_col.max();
                    let span = (hi - lo).abs().max(1.0);
                    for u in 0..g.node_count() {
                        let x = wl.values()[(u, h * d + c)];
                        prop_assert!(x >= lo - 1e-12 * span && x <= hi + 1e-12 * span);
                    }
                }
            }
        }

        #[test]
        fn wl_is_linear_in_features((data, _) in graph_and_permutation()) {
            let g1 = AttributedGraph::from_data(data.clone()).unwrap();
            let scaled = GraphData { features: &data.features * 2.0 + DMatrix::from_element(data.node_count, data.features.ncols(), 0.7), ..data };
            let g2 = AttributedGraph::from_data(scaled).unwrap();
            let w1 = continuous_wl_embed(&g1, 2);
            let w2 = continuous_wl_embed(&g2, 2);
            // The update is an affine average, so affine feature maps commute with it.
            for u in 0..g1.node_count() {
                for c in 0..w1.dim() {
                    let expect = 2.0 * w1.values()[(u, c)] + 0.7;
                    prop_assert!((w2.values()[(u, c)] - expect).abs() <= 1e-9 * (1.0 + expect.abs()));
                }
            }
        }
    }
}
