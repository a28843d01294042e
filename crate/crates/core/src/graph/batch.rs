use std::borrow::Borrow;

use super::Graph;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Disjoint union of graphs with node indices offset per graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub node_features: Tensor,
    /// Undirected edges in global node indices.
    pub edges: Vec<(usize, usize)>,
    /// Graph slot of every node; non-decreasing.
    pub graph_id: Vec<usize>,
    pub num_graphs: usize,
    msg_src: Vec<usize>,
    msg_dst: Vec<usize>,
}

impl GraphBatch {
    pub fn total_nodes(&self) -> usize {
        self.graph_id.len()
    }

    /// Node counts per graph recovered from `graph_id`.
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_graphs];
        for &g in &self.graph_id {
            sizes[g] += 1;
        }
        sizes
    }

    /// Directed messages `(source, destination)` covering both directions of
    /// every edge, sorted by destination so they can be segment-summed.
    pub fn messages(&self) -> (&[usize], &[usize]) {
        (&self.msg_src, &self.msg_dst)
    }
}

pub fn make_batch<G: Borrow<Graph>>(graphs: &[G]) -> Result<GraphBatch> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::Argument("cannot batch an empty list of graphs".into()))?;
    let width = first.borrow().feature_dim();
    let total: usize = graphs.iter().map(|g| g.borrow().num_nodes()).sum();

    let mut features = Vec::with_capacity(total * width);
    let mut edges = Vec::new();
    let mut graph_id = Vec::with_capacity(total);
    let mut offset = 0;
    for (slot, g) in graphs.iter().enumerate() {
        let g = g.borrow();
        if g.feature_dim() != width {
            return Err(Error::dim("make_batch", &[width], &[g.feature_dim()]));
        }
        features.extend_from_slice(g.node_features().data());
        edges.extend(g.edges().iter().map(|&(u, v)| (u + offset, v + offset)));
        graph_id.extend(std::iter::repeat_n(slot, g.num_nodes()));
        offset += g.num_nodes();
    }

    let mut messages: Vec<(usize, usize)> =
        edges.iter().flat_map(|&(u, v)| [(v, u), (u, v)]).collect();
    messages.sort_unstable_by_key(|&(src, dst)| (dst, src));
    let (msg_src, msg_dst) = messages.into_iter().unzip();

    Ok(GraphBatch {
        node_features: Tensor::new(vec![total, width], features)?,
        edges,
        graph_id,
        num_graphs: graphs.len(),
        msg_src,
        msg_dst,
    })
}
