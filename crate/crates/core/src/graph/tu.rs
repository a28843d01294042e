//! TU benchmark format.
//!
//! A dataset `DS` is a directory of comma/newline separated text files:
//!
//! * `DS_A.txt`: one `row, col` pair per line, 1-indexed global node ids,
//!   each undirected edge listed in both directions
//! * `DS_graph_indicator.txt`: the 1-indexed graph id of every node
//! * `DS_graph_labels.txt`: one integer class label per graph
//! * `DS_node_labels.txt` (optional): one integer label per node

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;

use super::{Graph, GraphDataset};
use crate::error::{Error, Result};

fn read_file(dir: &Path, name: &str, suffix: &str) -> Result<(PathBuf, String)> {
    let path = dir.join(format!("{name}_{suffix}.txt"));
    match fs::read_to_string(&path) {
        Ok(text) => Ok((path, text)),
        Err(source) => Err(Error::Ingestion { path, source }),
    }
}

fn parse_ints(path: &Path, text: &str) -> Result<Vec<i64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse::<i64>()
                .map_err(|e| Error::MalformedDataset(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn parse_pairs(path: &Path, text: &str) -> Result<Vec<(usize, usize)>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad =
            |what: &str| Error::MalformedDataset(format!("{}:{}: {what}", path.display(), i + 1));
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(bad("expected `row, col`"));
        };
        let a: usize = a.parse().map_err(|_| bad("invalid node id"))?;
        let b: usize = b.parse().map_err(|_| bad("invalid node id"))?;
        if a == 0 || b == 0 {
            return Err(bad("node ids are 1-indexed"));
        }
        pairs.push((a - 1, b - 1));
    }
    Ok(pairs)
}

/// Maps the distinct values of `raw` onto `0..k` in ascending order.
fn dense_remap(raw: &[i64]) -> (Vec<usize>, usize) {
    let distinct: BTreeSet<i64> = raw.iter().copied().collect();
    let index: BTreeMap<i64, usize> = distinct.iter().enumerate().map(|(i, &v)| (v, i)).collect();
    (raw.iter().map(|v| index[v]).collect(), distinct.len())
}

/// Reads dataset `name` from `dir`.
///
/// Graphs keep indicator order, directed edge lines are merged into
/// undirected edges, and graph labels are remapped to `0..num_classes`.
/// Node features are a constant column of ones until
/// [`build_features`](super::build_features) replaces them.
pub fn parse_tu_dataset(dir: impl AsRef<Path>, name: &str) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let (a_path, a_text) = read_file(dir, name, "A")?;
    let (ind_path, ind_text) = read_file(dir, name, "graph_indicator")?;
    let (gl_path, gl_text) = read_file(dir, name, "graph_labels")?;
    let node_labels_file = match read_file(dir, name, "node_labels") {
        Ok(found) => Some(found),
        Err(Error::Ingestion { source, .. }) if source.kind() == std::io::ErrorKind::NotFound => {
            None
        }
        Err(e) => return Err(e),
    };

    let indicator = parse_ints(&ind_path, &ind_text)?;
    let graph_labels = parse_ints(&gl_path, &gl_text)?;
    let num_graphs = graph_labels.len();
    let num_nodes_total = indicator.len();

    // global node -> (graph, local index)
    let mut graph_of = Vec::with_capacity(num_nodes_total);
    let mut local_of = Vec::with_capacity(num_nodes_total);
    let mut sizes = vec![0usize; num_graphs];
    for (node, &gid) in indicator.iter().enumerate() {
        if gid < 1 || gid as usize > num_graphs {
            return Err(Error::MalformedDataset(format!(
                "{}:{}: graph id {gid} outside 1..={num_graphs}",
                ind_path.display(),
                node + 1
            )));
        }
        let g = gid as usize - 1;
        graph_of.push(g);
        local_of.push(sizes[g]);
        sizes[g] += 1;
    }

    let pairs = parse_pairs(&a_path, &a_text)?;
    let directed: HashSet<(usize, usize)> = pairs.iter().copied().collect();
    let mut edges: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); num_graphs];
    let mut asymmetric = 0usize;
    let mut self_loops = 0usize;
    for &(u, v) in &pairs {
        if u >= num_nodes_total || v >= num_nodes_total {
            return Err(Error::MalformedDataset(format!(
                "{}: edge ({}, {}) references a node beyond {num_nodes_total}",
                a_path.display(),
                u + 1,
                v + 1
            )));
        }
        if graph_of[u] != graph_of[v] {
            return Err(Error::MalformedDataset(format!(
                "{}: edge ({}, {}) joins graphs {} and {}",
                a_path.display(),
                u + 1,
                v + 1,
                graph_of[u] + 1,
                graph_of[v] + 1
            )));
        }
        if u == v {
            self_loops += 1;
            continue;
        }
        if !directed.contains(&(v, u)) {
            asymmetric += 1;
        }
        let (lu, lv) = (local_of[u], local_of[v]);
        edges[graph_of[u]].insert((lu.min(lv), lu.max(lv)));
    }
    if asymmetric > 0 {
        warn!(
            "{}: {asymmetric} edge lines have no reverse direction; treated as undirected",
            a_path.display()
        );
    }
    if self_loops > 0 {
        warn!("{}: dropped {self_loops} self-loop lines", a_path.display());
    }

    let node_labels = match node_labels_file {
        Some((path, text)) => {
            let raw = parse_ints(&path, &text)?;
            if raw.len() != num_nodes_total {
                return Err(Error::MalformedDataset(format!(
                    "{}: {} labels for {num_nodes_total} nodes",
                    path.display(),
                    raw.len()
                )));
            }
            Some(dense_remap(&raw).0)
        }
        None => None,
    };

    let (labels, num_classes) = dense_remap(&graph_labels);
    let mut per_graph_node_labels: Vec<Vec<usize>> = vec![Vec::new(); num_graphs];
    if let Some(nl) = &node_labels {
        for (node, &l) in nl.iter().enumerate() {
            per_graph_node_labels[graph_of[node]].push(l);
        }
    }

    let mut graphs = Vec::with_capacity(num_graphs);
    for (g, edge_set) in edges.into_iter().enumerate() {
        let mut graph = Graph::unfeatured(sizes[g], edge_set, Some(labels[g]))?;
        if node_labels.is_some() {
            graph = graph.with_node_labels(std::mem::take(&mut per_graph_node_labels[g]))?;
        }
        graphs.push(graph);
    }
    GraphDataset::new(name, graphs, num_classes)
}

/// Writes `dataset` in TU format under `dir` using the dataset's name.
/// Labels are written in their dense form; node labels are written only
/// when every graph carries them.
pub fn write_tu_dataset(dir: impl AsRef<Path>, dataset: &GraphDataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let name = &dataset.name;
    let mut a = String::new();
    let mut indicator = String::new();
    let mut graph_labels = String::new();
    let mut node_labels = String::new();
    let all_node_labels = dataset.graphs.iter().all(|g| g.node_labels().is_some());

    let mut offset = 0;
    for (gi, g) in dataset.graphs.iter().enumerate() {
        let label = g.label().ok_or_else(|| {
            Error::Argument(format!("graph {gi} has no label; TU format requires one"))
        })?;
        let _ = writeln!(graph_labels, "{label}");
        for _ in 0..g.num_nodes() {
            let _ = writeln!(indicator, "{}", gi + 1);
        }
        for &(u, v) in g.edges() {
            let _ = writeln!(a, "{}, {}", offset + u + 1, offset + v + 1);
            let _ = writeln!(a, "{}, {}", offset + v + 1, offset + u + 1);
        }
        if all_node_labels {
            for l in g.node_labels().unwrap_or_default() {
                let _ = writeln!(node_labels, "{l}");
            }
        }
        offset += g.num_nodes();
    }
    fs::write(dir.join(format!("{name}_A.txt")), a)?;
    fs::write(dir.join(format!("{name}_graph_indicator.txt")), indicator)?;
    fs::write(dir.join(format!("{name}_graph_labels.txt")), graph_labels)?;
    if all_node_labels && !dataset.graphs.is_empty() {
        fs::write(dir.join(format!("{name}_node_labels.txt")), node_labels)?;
    }
    Ok(())
}
