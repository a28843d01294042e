//! Stochastic graph augmentations of tunable intensity and the
//! (anchor, positive, negative) triples built from them.
//!
//! Every augmentation takes a rate `r ∈ [0, 1)`. Perturbation counts use
//! `floor(r · size)` and subgraph retention uses `ceil((1 − r) · N)`, so
//! `r = 0` is always an exact identity.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    NodeDrop,
    EdgePerturb,
    AttrMask,
    Subgraph,
}

impl AugmentKind {
    pub const ALL: [AugmentKind; 4] = [
        AugmentKind::NodeDrop,
        AugmentKind::EdgePerturb,
        AugmentKind::AttrMask,
        AugmentKind::Subgraph,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentKind::NodeDrop => "node_drop",
            AugmentKind::EdgePerturb => "edge_perturb",
            AugmentKind::AttrMask => "attr_mask",
            AugmentKind::Subgraph => "subgraph",
        }
    }

    pub fn apply<R: Rng + ?Sized>(self, g: &Graph, r: f64, rng: &mut R) -> Result<Graph> {
        match self {
            AugmentKind::NodeDrop => node_drop(g, r, rng),
            AugmentKind::EdgePerturb => edge_perturb(g, r, rng).map(|p| p.graph),
            AugmentKind::AttrMask => attr_mask(g, r, rng),
            AugmentKind::Subgraph => subgraph(g, r, rng),
        }
    }
}

impl fmt::Display for AugmentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugmentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

/// Which augmentation a call applies. A combo picks one of its kinds
/// uniformly per call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AugmentationSpec {
    Single(AugmentKind),
    Combo(Vec<AugmentKind>),
}

impl AugmentationSpec {
    pub fn combo(kinds: Vec<AugmentKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(Error::Config(
                "combo augmentation needs at least one kind".into(),
            ));
        }
        Ok(AugmentationSpec::Combo(kinds))
    }

    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentKind {
        match self {
            AugmentationSpec::Single(k) => *k,
            AugmentationSpec::Combo(kinds) => kinds[rng.gen_range(0..kinds.len())],
        }
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationSpec::Single(k) => write!(f, "{k}"),
            AugmentationSpec::Combo(kinds) => {
                let names: Vec<&str> = kinds.iter().map(|k| k.name()).collect();
                write!(f, "combo({})", names.join(","))
            }
        }
    }
}

/// Parses `node_drop`, ... or `combo(node_drop,subgraph)`.
impl FromStr for AugmentationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(inner) = s.strip_prefix("combo(").and_then(|r| r.strip_suffix(')')) {
            let kinds = inner
                .split(',')
                .map(|k| k.trim().parse())
                .collect::<Result<Vec<_>>>()?;
            return AugmentationSpec::combo(kinds);
        }
        s.parse().map(AugmentationSpec::Single)
    }
}

fn check_rate(r: f64) -> Result<()> {
    if (0.0..1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "augmentation rate {r} outside [0, 1)"
        )))
    }
}

fn perturb_count(r: f64, n: usize) -> usize {
    (r * n as f64).floor() as usize
}

/// Removes `floor(r·N)` uniformly chosen nodes and their edges.
pub fn node_drop<R: Rng + ?Sized>(g: &Graph, r: f64, rng: &mut R) -> Result<Graph> {
    check_rate(r)?;
    let n = g.num_nodes();
    let k = perturb_count(r, n);
    if k >= n {
        return Err(Error::DegenerateAugmentation(format!(
            "node_drop at rate {r} leaves no nodes of {n}"
        )));
    }
    if k == 0 {
        return Ok(g.clone());
    }
    let mut dropped = vec![false; n];
    for i in sample(rng, n, k) {
        dropped[i] = true;
    }
    let keep: Vec<usize> = (0..n).filter(|&i| !dropped[i]).collect();
    g.induced(&keep)
}

/// Result of [`edge_perturb`]. `inserted < removed` means the graph was too
/// dense to add back as many absent edges as were deleted.
#[derive(Debug, Clone)]
pub struct EdgePerturbation {
    pub graph: Graph,
    pub removed: usize,
    pub inserted: usize,
}

impl EdgePerturbation {
    pub fn is_partial(&self) -> bool {
        self.inserted < self.removed
    }
}

/// Deletes `floor(r·|E|)` existing edges and inserts as many edges chosen
/// uniformly among pairs absent from the original graph.
pub fn edge_perturb<R: Rng + ?Sized>(g: &Graph, r: f64, rng: &mut R) -> Result<EdgePerturbation> {
    check_rate(r)?;
    let m = g.num_edges();
    let k = perturb_count(r, m);
    if k == 0 {
        return Ok(EdgePerturbation {
            graph: g.clone(),
            removed: 0,
            inserted: 0,
        });
    }
    let mut removed = vec![false; m];
    for i in sample(rng, m, k) {
        removed[i] = true;
    }
    let mut edges: Vec<(usize, usize)> = g
        .edges()
        .iter()
        .zip(&removed)
        .filter(|(_, &gone)| !gone)
        .map(|(&e, _)| e)
        .collect();

    let n = g.num_nodes();
    let total_pairs = n * n.saturating_sub(1) / 2;
    let absent = total_pairs - m;
    let existing: HashSet<(usize, usize)> = g.edges().iter().copied().collect();
    let added: Vec<(usize, usize)> = if absent <= k || absent * 4 < total_pairs {
        // dense: enumerate the complement
        let complement: Vec<(usize, usize)> = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter(|e| !existing.contains(e))
            .collect();
        let take = k.min(complement.len());
        sample(rng, complement.len(), take)
            .into_iter()
            .map(|i| complement[i])
            .collect()
    } else {
        let mut chosen = HashSet::with_capacity(k);
        let mut added = Vec::with_capacity(k);
        while added.len() < k {
            let u = rng.gen_range(0..n);
            let v = rng.gen_range(0..n);
            if u == v {
                continue;
            }
            let e = (u.min(v), u.max(v));
            if !existing.contains(&e) && chosen.insert(e) {
                added.push(e);
            }
        }
        added
    };
    let inserted = added.len();
    if inserted < k {
        log::debug!("edge_perturb: inserted {inserted} of {k} edges (graph too dense)");
    }
    edges.extend(added);
    Ok(EdgePerturbation {
        graph: g.with_edges(edges)?,
        removed: k,
        inserted,
    })
}

/// Zeroes the feature rows of `floor(r·N)` uniformly chosen nodes.
pub fn attr_mask<R: Rng + ?Sized>(g: &Graph, r: f64, rng: &mut R) -> Result<Graph> {
    check_rate(r)?;
    let n = g.num_nodes();
    let k = perturb_count(r, n);
    if k == 0 {
        return Ok(g.clone());
    }
    let mut features = g.node_features().clone();
    for i in sample(rng, n, k) {
        features.row_mut(i).iter_mut().for_each(|x| *x = 0.0);
    }
    g.clone().with_features(features)
}

/// Induced subgraph on `ceil((1−r)·N)` nodes grown by a random walk over the
/// frontier of the kept set. When the frontier empties (the kept set covers
/// a whole component) the walk restarts at a uniformly chosen unkept node.
pub fn subgraph<R: Rng + ?Sized>(g: &Graph, r: f64, rng: &mut R) -> Result<Graph> {
    check_rate(r)?;
    let n = g.num_nodes();
    if n == 0 {
        return Err(Error::DegenerateAugmentation(
            "subgraph of an empty graph".into(),
        ));
    }
    let target = (((1.0 - r) * n as f64).ceil() as usize).clamp(1, n);
    if target == n {
        return Ok(g.clone());
    }
    let adjacency = g.adjacency();
    let mut kept = vec![false; n];
    let mut in_frontier = vec![false; n];
    let mut frontier: Vec<usize> = Vec::new();
    let mut count = 0;
    while count < target {
        let next = if frontier.is_empty() {
            let unkept: Vec<usize> = (0..n).filter(|&i| !kept[i]).collect();
            unkept[rng.gen_range(0..unkept.len())]
        } else {
            frontier.swap_remove(rng.gen_range(0..frontier.len()))
        };
        kept[next] = true;
        in_frontier[next] = false;
        count += 1;
        for &nb in &adjacency[next] {
            if !kept[nb] && !in_frontier[nb] {
                in_frontier[nb] = true;
                frontier.push(nb);
            }
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&i| kept[i]).collect();
    g.induced(&keep)
}

/// A graph with its weakly (`positive`) and strongly (`negative`) perturbed
/// views.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleView {
    pub anchor: Graph,
    pub positive: Graph,
    pub negative: Graph,
    pub r_a: f64,
    pub r_b: f64,
}

pub fn check_rates(r_a: f64, r_b: f64) -> Result<()> {
    if !(0.0..1.0).contains(&r_a) || !(r_b > 0.0 && r_b < 1.0) || r_a >= r_b {
        return Err(Error::Argument(format!(
            "need 0 <= r_a < r_b < 1, got r_a = {r_a}, r_b = {r_b}"
        )));
    }
    Ok(())
}

/// Builds `(g, A(g; r_a), A(g; r_b))`. Both views use the same augmentation
/// kind and draw their randomness one after the other from `rng`.
pub fn make_triple<R: Rng + ?Sized>(
    g: &Graph,
    spec: &AugmentationSpec,
    r_a: f64,
    r_b: f64,
    rng: &mut R,
) -> Result<TripleView> {
    check_rates(r_a, r_b)?;
    let kind = spec.choose(rng);
    let positive = kind.apply(g, r_a, rng)?;
    let negative = kind.apply(g, r_b, rng)?;
    Ok(TripleView {
        anchor: g.clone(),
        positive,
        negative,
        r_a,
        r_b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn featured(n: usize) -> Graph {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 + 1.0, 1.0]).collect();
        path(n)
            .with_features(Tensor::from_rows(&rows).unwrap())
            .unwrap()
    }

    #[test]
    fn zero_rate_is_identity() {
        let g = featured(6);
        for kind in AugmentKind::ALL {
            assert_eq!(kind.apply(&g, 0.0, &mut rng(1)).unwrap(), g, "{kind}");
        }
    }

    #[test]
    fn rates_outside_unit_interval_rejected() {
        let g = triangle();
        assert!(node_drop(&g, 1.0, &mut rng(0)).is_err());
        assert!(attr_mask(&g, -0.1, &mut rng(0)).is_err());
    }

    #[test]
    fn node_drop_counts() {
        let g = path(20);
        let out = node_drop(&g, 0.1, &mut rng(3)).unwrap();
        assert_eq!(out.num_nodes(), 18);
    }

    #[test]
    fn node_drop_triangle_leaves_one_edge() {
        // every single-node removal from a triangle leaves exactly one edge
        for seed in 0..20 {
            let out = node_drop(&triangle(), 0.34, &mut rng(seed)).unwrap();
            assert_eq!(out.num_nodes(), 2);
            assert_eq!(out.num_edges(), 1);
        }
    }

    #[test]
    fn node_drop_keeps_relative_order() {
        let g = featured(10);
        let out = node_drop(&g, 0.5, &mut rng(9)).unwrap();
        let firsts: Vec<f64> = (0..out.num_nodes())
            .map(|i| out.node_features().get(i, 0))
            .collect();
        assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn edge_perturb_triangle_is_saturated() {
        // a triangle has no absent pairs: one edge is removed, none can be added
        let p = edge_perturb(&triangle(), 0.34, &mut rng(2)).unwrap();
        assert_eq!(p.removed, 1);
        assert_eq!(p.graph.num_nodes(), 3);
        assert!(p.is_partial());
        assert_eq!(p.graph.num_edges(), 2);
    }

    #[test]
    fn edge_perturb_replaces_edges() {
        // K1,3 plus an isolated node: 3 edges, 7 absent pairs
        let g = Graph::unfeatured(5, [(0, 1), (0, 2), (0, 3)], None).unwrap();
        for seed in 0..20 {
            let p = edge_perturb(&g, 0.34, &mut rng(seed)).unwrap();
            assert_eq!(p.removed, 1);
            assert_eq!(p.inserted, 1);
            assert_eq!(p.graph.num_edges(), 3);
            let original: HashSet<_> = g.edges().iter().collect();
            let new = p
                .graph
                .edges()
                .iter()
                .filter(|e| !original.contains(e))
                .count();
            assert_eq!(new, 1);
        }
    }

    #[test]
    fn edge_perturb_on_edgeless_is_identity() {
        let g = edgeless(4);
        let p = edge_perturb(&g, 0.5, &mut rng(0)).unwrap();
        assert_eq!(p.graph, g);
    }

    #[test]
    fn attr_mask_zero_rows() {
        let g = featured(10);
        let out = attr_mask(&g, 0.2, &mut rng(4)).unwrap();
        let zero_rows = (0..10)
            .filter(|&i| out.node_features().row(i).iter().all(|&x| x == 0.0))
            .count();
        assert_eq!(zero_rows, 2);
        assert_eq!(out.edges(), g.edges());
    }

    #[test]
    fn attr_mask_is_idempotent_on_zeros() {
        let g = path(5).with_features(Tensor::zeros(&[5, 3])).unwrap();
        assert_eq!(attr_mask(&g, 0.6, &mut rng(1)).unwrap(), g);
    }

    #[test]
    fn subgraph_triangle() {
        for seed in 0..20 {
            let out = subgraph(&triangle(), 0.34, &mut rng(seed)).unwrap();
            assert_eq!(out.num_nodes(), 2);
            assert_eq!(out.num_edges(), 1);
        }
    }

    #[test]
    fn subgraph_star_always_keeps_center() {
        for seed in 0..50 {
            let out = subgraph(&star(4), 0.4, &mut rng(seed)).unwrap();
            assert_eq!(out.num_nodes(), 3);
            assert_eq!(out.num_edges(), 2);
        }
    }

    #[test]
    fn subgraph_restarts_on_disconnected_graphs() {
        let g = Graph::unfeatured(4, [(0, 1)], None).unwrap();
        let out = subgraph(&g, 0.2, &mut rng(0)).unwrap();
        assert_eq!(out.num_nodes(), 4);
        let out = subgraph(&edgeless(5), 0.5, &mut rng(0)).unwrap();
        assert_eq!(out.num_nodes(), 3);
    }

    #[test]
    fn triple_requires_strict_rates() {
        let spec = AugmentationSpec::Single(AugmentKind::NodeDrop);
        assert!(make_triple(&triangle(), &spec, 0.0, 0.0, &mut rng(0)).is_err());
        assert!(make_triple(&triangle(), &spec, 0.3, 0.2, &mut rng(0)).is_err());
    }

    #[test]
    fn triple_positive_at_least_as_large_under_node_drop() {
        let spec = AugmentationSpec::Single(AugmentKind::NodeDrop);
        let g = path(17);
        for seed in 0..20 {
            let t = make_triple(&g, &spec, 0.1, 0.25, &mut rng(seed)).unwrap();
            assert!(t.positive.num_nodes() >= t.negative.num_nodes());
            assert_eq!(t.anchor, g);
        }
    }

    #[test]
    fn combo_picks_uniformly() {
        let spec =
            AugmentationSpec::combo(vec![AugmentKind::NodeDrop, AugmentKind::Subgraph]).unwrap();
        let mut r = rng(11);
        let drops = (0..1000)
            .filter(|_| spec.choose(&mut r) == AugmentKind::NodeDrop)
            .count();
        assert!((400..=600).contains(&drops), "{drops}");
    }

    #[test]
    fn spec_parsing() {
        assert_eq!(
            "combo(node_drop, subgraph)"
                .parse::<AugmentationSpec>()
                .unwrap(),
            AugmentationSpec::Combo(vec![AugmentKind::NodeDrop, AugmentKind::Subgraph])
        );
        assert!("combo()".parse::<AugmentationSpec>().is_err());
        assert!("dropout".parse::<AugmentationSpec>().is_err());
        let spec = AugmentationSpec::Combo(vec![AugmentKind::AttrMask]);
        assert_eq!(spec.to_string().parse::<AugmentationSpec>().unwrap(), spec);
    }

    #[test]
    fn node_drop_destruction_is_monotone_in_rate() {
        let g = Graph::unfeatured(
            12,
            (0..12).flat_map(|u| {
                (u + 1..12)
                    .filter(move |v| (u * v) % 3 != 1)
                    .map(move |v| (u, v))
            }),
            None,
        )
        .unwrap();
        let mean_edges = |r: f64| -> f64 {
            (0..200)
                .map(|s| node_drop(&g, r, &mut rng(s)).unwrap().num_edges() as f64)
                .sum::<f64>()
                / 200.0
        };
        let rates = [0.0, 0.1, 0.2, 0.3, 0.5, 0.7];
        let means: Vec<f64> = rates.iter().map(|&r| mean_edges(r)).collect();
        assert!(means.windows(2).all(|w| w[1] <= w[0]), "{means:?}");
    }
}
