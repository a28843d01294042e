//! Undirected graphs with node features, TU-format datasets and
//! disjoint-union batching.

mod batch;
mod features;
mod tu;

pub use batch::{make_batch, GraphBatch};
pub use features::{build_features, max_degree, FeatureMode};
pub use tu::{parse_tu_dataset, write_tu_dataset};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Immutable undirected simple graph.
///
/// Edges are stored once per unordered pair as `(lo, hi)` with `lo < hi`,
/// sorted lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Tensor,
    node_labels: Option<Vec<usize>>,
    label: Option<usize>,
}

impl Graph {
    /// Validates and normalizes the edge list. Self-loops, duplicate pairs
    /// and out-of-range endpoints are rejected.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_features: Tensor,
        label: Option<usize>,
    ) -> Result<Self> {
        if node_features.rank() != 2 || node_features.rows() != num_nodes {
            return Err(Error::dim(
                "graph features",
                &[num_nodes],
                node_features.shape(),
            ));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::MalformedDataset(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            if u == v {
                return Err(Error::MalformedDataset(format!("self-loop at node {u}")));
            }
            if !set.insert((u.min(v), u.max(v))) {
                return Err(Error::MalformedDataset(format!(
                    "duplicate edge ({u}, {v})"
                )));
            }
        }
        Ok(Graph {
            num_nodes,
            edges: set.into_iter().collect(),
            node_features,
            node_labels: None,
            label,
        })
    }

    /// Graph whose features are a single constant column of ones.
    pub fn unfeatured(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: Option<usize>,
    ) -> Result<Self> {
        Graph::new(num_nodes, edges, Tensor::full(&[num_nodes, 1], 1.0), label)
    }

    pub fn with_node_labels(mut self, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != self.num_nodes {
            return Err(Error::dim(
                "node labels",
                &[self.num_nodes],
                &[labels.len()],
            ));
        }
        self.node_labels = Some(labels);
        Ok(self)
    }

    pub fn with_features(mut self, features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.rows() != self.num_nodes {
            return Err(Error::dim(
                "graph features",
                &[self.num_nodes],
                features.shape(),
            ));
        }
        self.node_features = features;
        Ok(self)
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

    pub fn node_features(&self) -> &Tensor {
        &self.node_features
    }

    pub fn feature_dim(&self) -> usize {
        self.node_features.cols()
    }

    pub fn node_labels(&self) -> Option<&[usize]> {
        self.node_labels.as_deref()
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.num_nodes];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj
    }

    /// Subgraph induced by `keep` (sorted, distinct), reindexed in order.
    pub fn induced(&self, keep: &[usize]) -> Result<Graph> {
        let mut map = vec![usize::MAX; self.num_nodes];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter(|(u, v)| map[*u] != usize::MAX && map[*v] != usize::MAX)
            .map(|(u, v)| (map[*u], map[*v]));
        let rows: Vec<&[f64]> = keep.iter().map(|&i| self.node_features.row(i)).collect();
        let features = if rows.is_empty() {
            Tensor::zeros(&[0, self.feature_dim()])
        } else {
            Tensor::from_rows(&rows)?
        };
        let mut g = Graph::new(keep.len(), edges, features, self.label)?;
        if let Some(labels) = &self.node_labels {
            g.node_labels = Some(keep.iter().map(|&i| labels[i]).collect());
        }
        Ok(g)
    }

    /// Same nodes and features, different edge set.
    pub fn with_edges(&self, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Graph> {
        let mut g = Graph::new(
            self.num_nodes,
            edges,
            self.node_features.clone(),
            self.label,
        )?;
        g.node_labels = self.node_labels.clone();
        Ok(g)
    }

    /// Relabels node `i` to `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Graph> {
        if perm.len() != self.num_nodes {
            return Err(Error::dim("permutation", &[self.num_nodes], &[perm.len()]));
        }
        let f = self.feature_dim();
        let mut features = Tensor::zeros(&[self.num_nodes, f]);
        for (old, &new) in perm.iter().enumerate() {
            features
                .row_mut(new)
                .copy_from_slice(self.node_features.row(old));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v]));
        let mut g = Graph::new(self.num_nodes, edges, features, self.label)?;
        if let Some(labels) = &self.node_labels {
            let mut nl = vec![0; self.num_nodes];
            for (old, &new) in perm.iter().enumerate() {
                nl[new] = labels[old];
            }
            g.node_labels = Some(nl);
        }
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphDataset {
    pub name: String,
    pub graphs: Vec<Graph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl GraphDataset {
    pub fn new(name: impl Into<String>, graphs: Vec<Graph>, num_classes: usize) -> Result<Self> {
        let feature_dim = graphs.first().map_or(0, Graph::feature_dim);
        for (i, g) in graphs.iter().enumerate() {
            if g.feature_dim() != feature_dim {
                return Err(Error::MalformedDataset(format!(
                    "graph {i} has feature dim {} but dataset has {feature_dim}",
                    g.feature_dim()
                )));
            }
            if let Some(l) = g.label() {
                if l >= num_classes {
                    return Err(Error::MalformedDataset(format!(
                        "graph {i} label {l} outside [0, {num_classes})"
                    )));
                }
            }
        }
        Ok(GraphDataset {
            name: name.into(),
            graphs,
            num_classes,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<usize>> {
        self.graphs.iter().map(Graph::label).collect()
    }

    pub fn average_nodes(&self) -> f64 {
        let total: usize = self.graphs.iter().map(Graph::num_nodes).sum();
        total as f64 / self.graphs.len().max(1) as f64
    }
}
