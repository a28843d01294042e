use super::{Graph, GraphDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// One-hot of the (dense) node label.
    NodeLabel,
    /// One-hot of the node degree with `max_degree + 1` buckets. With
    /// `clamp`, larger degrees fall into the top bucket; otherwise they are
    /// a configuration error.
    Degree { max_degree: usize, clamp: bool },
}

/// Replaces every graph's node features with one-hot rows.
pub fn build_features(dataset: &GraphDataset, mode: FeatureMode) -> Result<GraphDataset> {
    let width = match mode {
        FeatureMode::NodeLabel => {
            let mut max = None;
            for (i, g) in dataset.graphs.iter().enumerate() {
                let labels = g.node_labels().ok_or_else(|| {
                    Error::Config(format!(
                        "node-label features requested but graph {i} of {} has no node labels",
                        dataset.name
                    ))
                })?;
                max = labels.iter().copied().chain(max).max();
            }
            max.map_or(0, |m| m + 1)
        }
        FeatureMode::Degree { max_degree, .. } => max_degree + 1,
    };

    let mut graphs = Vec::with_capacity(dataset.len());
    for g in &dataset.graphs {
        let buckets: Vec<usize> = match mode {
            FeatureMode::NodeLabel => g.node_labels().unwrap_or_default().to_vec(),
            FeatureMode::Degree { max_degree, clamp } => g
                .degrees()
                .into_iter()
                .map(|d| {
                    if d <= max_degree {
                        Ok(d)
                    } else if clamp {
                        Ok(max_degree)
                    } else {
                        Err(Error::Config(format!(
                            "degree {d} exceeds max_degree {max_degree} and clamping is off"
                        )))
                    }
                })
                .collect::<Result<_>>()?,
        };
        graphs.push(g.clone().with_features(one_hot(&buckets, width))?);
    }
    GraphDataset::new(dataset.name.clone(), graphs, dataset.num_classes)
}

fn one_hot(indices: &[usize], width: usize) -> Tensor {
    let mut t = Tensor::zeros(&[indices.len(), width]);
    for (r, &i) in indices.iter().enumerate() {
        t.row_mut(r)[i] = 1.0;
    }
    t
}

/// Largest node degree across the dataset.
pub fn max_degree(dataset: &GraphDataset) -> usize {
    dataset
        .graphs
        .iter()
        .flat_map(Graph::degrees)
        .max()
        .unwrap_or(0)
}
