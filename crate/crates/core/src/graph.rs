//! Undirected simple graphs with node/edge features and the structural
//! algebra used by extrapolation: splicing components with bridges and
//! mask-induced subgraphs.

use ndarray::{concatenate, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node index {node} out of range for graph with {num_nodes} nodes")]
    IndexOutOfRange { node: usize, num_nodes: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("node feature matrix has {found} rows, expected {expected}")]
    NodeFeatureRows { expected: usize, found: usize },
    #[error("edge feature matrix has {found} rows, expected {expected}")]
    EdgeFeatureRows { expected: usize, found: usize },
    #[error("feature width mismatch: expected {expected}, found {found}")]
    FeatureWidth { expected: usize, found: usize },
    #[error("bridge ({u}, {v}) joins two nodes of component {component}")]
    IntraComponentBridge { u: usize, v: usize, component: usize },
    #[error("bridge ({u}, {v}) is tagged with components ({comp_u}, {comp_v}) but its endpoints lie elsewhere")]
    BridgeComponentMismatch {
        u: usize,
        v: usize,
        comp_u: usize,
        comp_v: usize,
    },
    #[error("mask length {found} does not match node count {expected}")]
    MaskLength { expected: usize, found: usize },
    #[error("induced subgraph would be empty")]
    EmptySubgraph,
    #[error("splice needs at least one component")]
    NoComponents,
}

/// An undirected simple graph. Edges are stored once with `u < v`, in
/// insertion order; `edge_features` rows follow the same order.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Array2<f64>,
    edge_features: Option<Array2<f64>>,
}

impl Graph {
    pub fn new(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_features: Array2<f64>,
        edge_features: Option<Array2<f64>>,
    ) -> Result<Self, GraphError> {
        if node_features.nrows() != num_nodes {
            return Err(GraphError::NodeFeatureRows {
                expected: num_nodes,
                found: node_features.nrows(),
            });
        }
        let mut seen = std::collections::HashSet::with_capacity(edges.len());
        let mut normalized = Vec::with_capacity(edges.len());
        for (a, b) in edges {
            for node in [a, b] {
                if node >= num_nodes {
                    return Err(GraphError::IndexOutOfRange { node, num_nodes });
                }
            }
            if a == b {
                return Err(GraphError::SelfLoop(a));
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
            normalized.push(e);
        }
        if let Some(ef) = &edge_features {
            if ef.nrows() != normalized.len() {
                return Err(GraphError::EdgeFeatureRows {
                    expected: normalized.len(),
                    found: ef.nrows(),
                });
            }
        }
        Ok(Self {
            num_nodes,
            edges: normalized,
            node_features,
            edge_features,
        })
    }

    /// Structure-only graph whose node features are a single constant 1.
    pub fn unit_features(num_nodes: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        Self::new(num_nodes, edges, Array2::ones((num_nodes, 1)), None)
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn edge_features(&self) -> Option<&Array2<f64>> {
        self.edge_features.as_ref()
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.edge_features.as_ref().map_or(0, |e| e.ncols())
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let e = (u.min(v), u.max(v));
        self.edges.contains(&e)
    }

    /// Same structure with a replacement feature matrix.
    pub fn with_node_features(&self, x: Array2<f64>) -> Result<Self, GraphError> {
        if x.nrows() != self.num_nodes {
            return Err(GraphError::NodeFeatureRows {
                expected: self.num_nodes,
                found: x.nrows(),
            });
        }
        Ok(Self {
            node_features: x,
            ..self.clone()
        })
    }

    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Connected-component label for every node, labels dense from 0 in
    /// order of first appearance.
    pub fn component_labels(&self) -> Vec<usize> {
        let mut uf = UnionFind::new(self.num_nodes);
        for &(u, v) in &self.edges {
            uf.union(u, v);
        }
        uf.dense_labels()
    }

    pub fn num_connected_components(&self) -> usize {
        self.component_labels().into_iter().max().map_or(0, |m| m + 1)
    }

    pub fn is_connected(&self) -> bool {
        self.num_connected_components() <= 1
    }

    /// Relabel nodes: node `i` becomes node `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self, GraphError> {
        if perm.len() != self.num_nodes {
            return Err(GraphError::MaskLength {
                expected: self.num_nodes,
                found: perm.len(),
            });
        }
        let mut x = Array2::zeros(self.node_features.dim());
        for (i, &p) in perm.iter().enumerate() {
            if p >= self.num_nodes {
                return Err(GraphError::IndexOutOfRange {
                    node: p,
                    num_nodes: self.num_nodes,
                });
            }
            x.row_mut(p).assign(&self.node_features.row(i));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(self.num_nodes, edges, x, self.edge_features.clone())
    }
}

/// A generated cross-component edge.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    pub u: usize,
    pub v: usize,
    pub comp_u: usize,
    pub comp_v: usize,
    pub attr: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BridgeSet {
    bridges: Vec<Bridge>,
}

impl BridgeSet {
    pub fn new(bridges: Vec<Bridge>) -> Result<Self, GraphError> {
        for b in &bridges {
            if b.comp_u == b.comp_v {
                return Err(GraphError::IntraComponentBridge {
                    u: b.u,
                    v: b.v,
                    component: b.comp_u,
                });
            }
        }
        Ok(Self { bridges })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.bridges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bridges.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Bridge> {
        self.bridges.iter()
    }

    pub fn push(&mut self, b: Bridge) -> Result<(), GraphError> {
        if b.comp_u == b.comp_v {
            return Err(GraphError::IntraComponentBridge {
                u: b.u,
                v: b.v,
                component: b.comp_u,
            });
        }
        self.bridges.push(b);
        Ok(())
    }

    pub fn contains_pair(&self, u: usize, v: usize) -> bool {
        self.bridges
            .iter()
            .any(|b| (b.u == u && b.v == v) || (b.u == v && b.v == u))
    }
}

impl<'a> IntoIterator for &'a BridgeSet {
    type Item = &'a Bridge;
    type IntoIter = std::slice::Iter<'a, Bridge>;
    fn into_iter(self) -> Self::IntoIter {
        self.bridges.iter()
    }
}

/// Node offsets of each component under concatenated indexing, plus the
/// total node count.
pub fn component_offsets<G: AsRef<Graph>>(components: &[G]) -> (Vec<usize>, usize) {
    let mut offsets = Vec::with_capacity(components.len());
    let mut total = 0;
    for c in components {
        offsets.push(total);
        total += c.as_ref().num_nodes();
    }
    (offsets, total)
}

/// Component index owning each global node.
pub fn component_of_nodes<G: AsRef<Graph>>(components: &[G]) -> Vec<usize> {
    components
        .iter()
        .enumerate()
        .flat_map(|(k, c)| std::iter::repeat_n(k, c.as_ref().num_nodes()))
        .collect()
}

impl AsRef<Graph> for Graph {
    fn as_ref(&self) -> &Graph {
        self
    }
}

/// Splice components into one graph joined by `bridges`. Component `k`'s
/// nodes are offset by the sizes of components `0..k`.
pub fn splice<G: AsRef<Graph>>(components: &[G], bridges: &BridgeSet) -> Result<Graph, GraphError> {
    let first = components.first().ok_or(GraphError::NoComponents)?.as_ref();
    let p = first.feature_dim();
    let q = components
        .iter()
        .map(|c| c.as_ref().edge_feature_dim())
        .chain(bridges.iter().map(|b| b.attr.as_ref().map_or(0, Vec::len)))
        .max()
        .unwrap_or(0);
    let with_edge_features = q > 0;

    let (offsets, total) = component_offsets(components);
    let owner = component_of_nodes(components);

    let mut edges = Vec::new();
    let mut edge_rows: Vec<Vec<f64>> = Vec::new();
    for (k, c) in components.iter().enumerate() {
        let c = c.as_ref();
        if c.feature_dim() != p {
            return Err(GraphError::FeatureWidth {
                expected: p,
                found: c.feature_dim(),
            });
        }
        let ef = c.edge_features();
        if let Some(ef) = ef {
            if ef.ncols() != q {
                return Err(GraphError::FeatureWidth {
                    expected: q,
                    found: ef.ncols(),
                });
            }
        }
        for (i, &(u, v)) in c.edges().iter().enumerate() {
            edges.push((u + offsets[k], v + offsets[k]));
            if with_edge_features {
                edge_rows.push(match ef {
                    Some(ef) => ef.row(i).to_vec(),
                    None => vec![0.0; q],
                });
            }
        }
    }

    for b in bridges {
        for node in [b.u, b.v] {
            if node >= total {
                return Err(GraphError::IndexOutOfRange {
                    node,
                    num_nodes: total,
                });
            }
        }
        let (cu, cv) = (owner[b.u], owner[b.v]);
        if cu == cv {
            return Err(GraphError::IntraComponentBridge {
                u: b.u,
                v: b.v,
                component: cu,
            });
        }
        if (cu, cv) != (b.comp_u, b.comp_v) {
            return Err(GraphError::BridgeComponentMismatch {
                u: b.u,
                v: b.v,
                comp_u: b.comp_u,
                comp_v: b.comp_v,
            });
        }
        edges.push((b.u, b.v));
        if with_edge_features {
            match &b.attr {
                Some(a) if a.len() == q => edge_rows.push(a.clone()),
                Some(a) => {
                    return Err(GraphError::FeatureWidth {
                        expected: q,
                        found: a.len(),
                    })
                }
                None => edge_rows.push(vec![0.0; q]),
            }
        }
    }

    let views: Vec<_> = components.iter().map(|c| c.as_ref().node_features().view()).collect();
    let x = concatenate(Axis(0), &views).expect("feature widths checked above");
    let ef = if with_edge_features {
        let flat: Vec<f64> = edge_rows.into_iter().flatten().collect();
        Some(Array2::from_shape_vec((edges.len(), q), flat).expect("row widths checked above"))
    } else {
        None
    };
    Graph::new(total, edges, x, ef)
}

/// Subgraph induced by the kept nodes, reindexed densely in original order.
pub fn induced_subgraph(g: &Graph, keep: &[bool]) -> Result<Graph, GraphError> {
    induced_subgraph_with_map(g, keep).map(|(sub, _)| sub)
}

/// As [`induced_subgraph`], also returning old-index → new-index.
pub fn induced_subgraph_with_map(g: &Graph, keep: &[bool]) -> Result<(Graph, Vec<Option<usize>>), GraphError> {
    if keep.len() != g.num_nodes() {
        return Err(GraphError::MaskLength {
            expected: g.num_nodes(),
            found: keep.len(),
        });
    }
    let mut map = vec![None; keep.len()];
    let mut kept = Vec::new();
    for (i, &k) in keep.iter().enumerate() {
        if k {
            map[i] = Some(kept.len());
            kept.push(i);
        }
    }
    if kept.is_empty() {
        return Err(GraphError::EmptySubgraph);
    }
    let x = g.node_features().select(Axis(0), &kept);
    let mut edges = Vec::new();
    let mut edge_idx = Vec::new();
    for (i, &(u, v)) in g.edges().iter().enumerate() {
        if let (Some(a), Some(b)) = (map[u], map[v]) {
            edges.push((a, b));
            edge_idx.push(i);
        }
    }
    let ef = g.edge_features().map(|ef| ef.select(Axis(0), &edge_idx));
    Ok((Graph::new(kept.len(), edges, x, ef)?, map))
}

#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Returns true when two distinct sets were merged.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (lo, hi) = (ra.min(rb), ra.max(rb));
        self.parent[hi] = lo;
        true
    }

    pub fn dense_labels(&mut self) -> Vec<usize> {
        let n = self.parent.len();
        let mut label_of_root = vec![usize::MAX; n];
        let mut next = 0;
        (0..n)
            .map(|i| {
                let r = self.find(i);
                if label_of_root[r] == usize::MAX {
                    label_of_root[r] = next;
                    next += 1;
                }
                label_of_root[r]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> Graph {
        Graph::unit_features(3, vec![(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    fn edge() -> Graph {
        Graph::unit_features(2, vec![(0, 1)]).unwrap()
    }

    fn bridge(u: usize, v: usize, cu: usize, cv: usize) -> Bridge {
        Bridge {
            u,
            v,
            comp_u: cu,
            comp_v: cv,
            attr: None,
        }
    }

    #[test]
    fn constructor_rejects_invalid_graphs() {
        assert_eq!(
            Graph::unit_features(2, vec![(0, 2)]),
            Err(GraphError::IndexOutOfRange { node: 2, num_nodes: 2 })
        );
        assert_eq!(Graph::unit_features(2, vec![(1, 1)]), Err(GraphError::SelfLoop(1)));
        assert_eq!(
            Graph::unit_features(2, vec![(0, 1), (1, 0)]),
            Err(GraphError::DuplicateEdge(0, 1))
        );
        assert!(matches!(
            Graph::new(3, vec![], Array2::ones((2, 1)), None),
            Err(GraphError::NodeFeatureRows { .. })
        ));
        assert!(matches!(
            Graph::new(2, vec![(0, 1)], Array2::ones((2, 1)), Some(Array2::zeros((2, 1)))),
            Err(GraphError::EdgeFeatureRows { .. })
        ));
    }

    #[test]
    fn splice_triangle_and_edge() {
        let bridges = BridgeSet::new(vec![bridge(2, 3, 0, 1)]).unwrap();
        let g = splice(&[triangle(), edge()], &bridges).unwrap();
        assert_eq!(g.num_nodes(), 5);
        assert_eq!(g.num_edges(), 5);
        assert!(g.has_edge(3, 4));
        assert!(g.is_connected());
    }

    #[test]
    fn splice_single_component_without_bridges_is_identity() {
        let g = triangle();
        assert_eq!(splice(&[g.clone()], &BridgeSet::empty()).unwrap(), g);
    }

    #[test]
    fn splice_three_edges_into_a_path() {
        let bridges = BridgeSet::new(vec![bridge(0, 2, 0, 1), bridge(2, 4, 1, 2)]).unwrap();
        let g = splice(&[edge(), edge(), edge()], &bridges).unwrap();
        assert_eq!(g.num_nodes(), 6);
        assert_eq!(g.num_edges(), 5);
        assert!(g.is_connected());
    }

    #[test]
    fn splice_rejects_intra_component_bridge() {
        let bridges = BridgeSet::new(vec![bridge(0, 1, 0, 1)]).unwrap();
        assert!(matches!(
            splice(&[triangle(), edge()], &bridges),
            Err(GraphError::IntraComponentBridge { component: 0, .. })
        ));
        assert!(BridgeSet::new(vec![bridge(0, 3, 1, 1)]).is_err());
    }

    #[test]
    fn splice_rejects_out_of_range_bridge() {
        let bridges = BridgeSet::new(vec![bridge(0, 9, 0, 1)]).unwrap();
        assert!(matches!(
            splice(&[triangle(), edge()], &bridges),
            Err(GraphError::IndexOutOfRange { node: 9, .. })
        ));
    }

    #[test]
    fn splice_fills_missing_bridge_attributes_with_zeros() {
        let a = Graph::new(2, vec![(0, 1)], Array2::ones((2, 1)), Some(Array2::from_elem((1, 2), 1.0))).unwrap();
        let b = a.clone();
        let bridges = BridgeSet::new(vec![bridge(1, 2, 0, 1)]).unwrap();
        let g = splice(&[a, b], &bridges).unwrap();
        let ef = g.edge_features().unwrap();
        assert_eq!(ef.nrows(), 3);
        assert_eq!(ef.row(2).to_vec(), vec![0.0, 0.0]);
        assert_eq!(ef.row(1).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn induced_subgraph_full_mask_is_identity() {
        let g = triangle();
        assert_eq!(induced_subgraph(&g, &[true; 3]).unwrap(), g);
    }

    #[test]
    fn induced_subgraph_empty_mask_errors() {
        assert_eq!(induced_subgraph(&triangle(), &[false; 3]), Err(GraphError::EmptySubgraph));
        assert!(matches!(
            induced_subgraph(&triangle(), &[true; 2]),
            Err(GraphError::MaskLength { .. })
        ));
    }

    #[test]
    fn induced_subgraph_reindexes_in_order() {
        let g = Graph::unit_features(4, vec![(0, 1), (1, 2), (2, 3)]).unwrap();
        let (sub, map) = induced_subgraph_with_map(&g, &[false, true, true, true]).unwrap();
        assert_eq!(sub.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(map, vec![None, Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn permutation_preserves_edge_count_and_degrees() {
        let g = Graph::unit_features(4, vec![(0, 1), (1, 2), (1, 3)]).unwrap();
        let p = g.permute(&[3, 2, 1, 0]).unwrap();
        assert_eq!(p.degrees(), vec![1, 1, 3, 1]);
        assert!(p.has_edge(2, 0));
    }
}
