//! The multimodal link graph and the triplet sampler that feeds training.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DmanError, Result};
use crate::regions::RegionFeatures;

/// Default cap on sampled links per node.
pub const DEFAULT_MAX_LINKS: usize = 50;

/// One image-text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalNode {
    pub id: usize,
    pub regions: RegionFeatures,
    /// Sorted, distinct vocabulary indices whose one-hot entry is 1.
    words: Vec<usize>,
    vocab_size: usize,
    /// Sorted, distinct ground-truth labels. Only used to build edges and score.
    labels: Vec<usize>,
}

impl MultimodalNode {
    pub fn new(
        id: usize,
        regions: RegionFeatures,
        mut words: Vec<usize>,
        vocab_size: usize,
        mut labels: Vec<usize>,
    ) -> Result<Self> {
        words.sort_unstable();
        words.dedup();
        labels.sort_unstable();
        labels.dedup();
        if words.is_empty() {
            return Err(DmanError::Input(format!("node {id} has no vocabulary words")));
        }
        if let Some(&w) = words.iter().find(|&&w| w >= vocab_size) {
            return Err(DmanError::Input(format!(
                "node {id}: word index {w} outside vocabulary of size {vocab_size}"
            )));
        }
        Ok(Self {
            id,
            regions,
            words,
            vocab_size,
            labels,
        })
    }

    pub fn words(&self) -> &[usize] {
        &self.words
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Dense 0/1 text vector of length `L`.
    pub fn text(&self) -> Vec<f64> {
        let mut t = vec![0.0; self.vocab_size];
        for &w in &self.words {
            t[w] = 1.0;
        }
        t
    }

    pub fn shares_label(&self, other: &MultimodalNode) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.labels.len() && j < other.labels.len() {
            match self.labels[i].cmp(&other.labels[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

/// Undirected graph over nodes with sorted adjacency lists.
#[derive(Debug, Clone)]
pub struct MultimodalGraph {
    nodes: Vec<MultimodalNode>,
    adjacency: Vec<Vec<usize>>,
    max_links: usize,
    max_picks: usize,
}

impl MultimodalGraph {
    pub fn nodes(&self) -> &[MultimodalNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &MultimodalNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn max_links(&self) -> usize {
        self.max_links
    }

    /// Largest number of links any node picked before re-symmetrization.
    pub fn max_picks(&self) -> usize {
        self.max_picks
    }

    /// `(D, M_feat)` shared by every node.
    pub fn region_shape(&self) -> (usize, usize) {
        let r = &self.nodes[0].regions;
        (r.regions(), r.dim())
    }

    pub fn vocab_size(&self) -> usize {
        self.nodes[0].vocab_size()
    }
}

/// Adjacency of the uncapped shared-label graph.
pub fn shared_label_adjacency(nodes: &[MultimodalNode]) -> Vec<Vec<usize>> {
    let mut by_label: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for n in nodes {
        for &l in n.labels() {
            by_label.entry(l).or_default().push(n.id);
        }
    }
    let mut adj = vec![Vec::new(); nodes.len()];
    for n in nodes {
        let list = &mut adj[n.id];
        for l in n.labels() {
            list.extend(by_label[l].iter().copied().filter(|&j| j != n.id));
        }
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Each node keeps at most `max_links` of its neighbors, drawn uniformly
/// without replacement. Nodes are visited in id order; nodes under the cap
/// keep everything and draw nothing from `rng`.
pub fn cap_links<R: Rng + ?Sized>(full: &[Vec<usize>], max_links: usize, rng: &mut R) -> Vec<Vec<usize>> {
    full.iter()
        .map(|nbrs| {
            if nbrs.len() <= max_links {
                return nbrs.clone();
            }
            let mut picked: Vec<usize> = index::sample(rng, nbrs.len(), max_links)
                .into_iter()
                .map(|k| nbrs[k])
                .collect();
            picked.sort_unstable();
            picked
        })
        .collect()
}

/// Builds the graph: an edge wherever two nodes share a label, each node's
/// list down-sampled to `max_links`, then the union of picks made symmetric.
pub fn build_graph(nodes: Vec<MultimodalNode>, max_links: usize, seed: u64) -> Result<MultimodalGraph> {
    if nodes.is_empty() {
        return Err(DmanError::Input("cannot build a graph from an empty node list".into()));
    }
    if nodes.len() < 2 {
        return Err(DmanError::Input("a graph needs at least two nodes".into()));
    }
    if max_links == 0 {
        return Err(DmanError::Config("max_links must be at least 1".into()));
    }
    for (i, n) in nodes.iter().enumerate() {
        if n.id != i {
            return Err(DmanError::Input(format!("node ids must be dense: position {i} holds id {}", n.id)));
        }
    }
    let shape = (nodes[0].regions.regions(), nodes[0].regions.dim());
    let vocab = nodes[0].vocab_size();
    if let Some(bad) = nodes
        .iter()
        .find(|n| (n.regions.regions(), n.regions.dim()) != shape || n.vocab_size() != vocab)
    {
        return Err(DmanError::Input(format!(
            "node {} disagrees with node 0 on region shape or vocabulary size",
            bad.id
        )));
    }

    let full = shared_label_adjacency(&nodes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = cap_links(&full, max_links, &mut rng);
    let max_picks = picks.iter().map(Vec::len).max().unwrap_or(0);

    let mut adjacency = vec![Vec::new(); nodes.len()];
    for (i, p) in picks.iter().enumerate() {
        for &j in p {
            adjacency[i].push(j);
            adjacency[j].push(i);
        }
    }
    for list in &mut adjacency {
        list.sort_unstable();
        list.dedup();
    }
    Ok(MultimodalGraph {
        nodes,
        adjacency,
        max_links,
        max_picks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TripletBatch {
    pub triplets: Vec<Triplet>,
    /// Anchors that had no neighbor or no eligible in-batch negative.
    pub skipped: usize,
}

/// For every anchor in `batch`, one uniform positive from its neighbors and
/// up to `k` distinct uniform negatives among the batch members that are
/// neither the anchor nor adjacent to it.
pub fn sample_triplets<R: Rng + ?Sized>(
    graph: &MultimodalGraph,
    batch: &[usize],
    k: usize,
    rng: &mut R,
) -> Result<TripletBatch> {
    if k == 0 {
        return Err(DmanError::Config("negatives per anchor (K) must be at least 1".into()));
    }
    if let Some(&bad) = batch.iter().find(|&&i| i >= graph.len()) {
        return Err(DmanError::Input(format!("batch member {bad} is not a node id")));
    }
    let mut out = TripletBatch::default();
    let mut eligible = Vec::with_capacity(batch.len());
    for &anchor in batch {
        let nbrs = graph.neighbors(anchor);
        if nbrs.is_empty() {
            out.skipped += 1;
            continue;
        }
        eligible.clear();
        eligible.extend(
            batch
                .iter()
                .copied()
                .filter(|&m| m != anchor && !graph.is_adjacent(anchor, m)),
        );
        if eligible.is_empty() {
            out.skipped += 1;
            continue;
        }
        let positive = nbrs[rng.random_range(0..nbrs.len())];
        let take = k.min(eligible.len());
        for pick in index::sample(rng, eligible.len(), take) {
            out.triplets.push(Triplet {
                anchor,
                positive,
                negative: eligible[pick],
            });
        }
    }
    Ok(out)
}

/// Uniform (Fisher-Yates) permutation of `order`.
pub fn epoch_shuffle<R: Rng + ?Sized>(mut order: Vec<usize>, rng: &mut R) -> Vec<usize> {
    order.shuffle(rng);
    order
}
