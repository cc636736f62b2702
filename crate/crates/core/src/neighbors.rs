//! Context neighborhoods and pair sampling for embedding pretraining.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{expand, iou, BBox};
use crate::grid::ProposalSet;

/// Default expansion radius, pixels.
pub const DEFAULT_DELTA: u32 = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    adjacency: Vec<Vec<usize>>,
    delta: u32,
}

impl NeighborGraph {
    /// Region `j` neighbors region `i` when `i`, grown by `delta` pixels on
    /// every side, overlaps `j`.
    pub fn build(boxes: &[BBox], page: [u32; 2], delta: u32) -> Self {
        let grown: Vec<BBox> = boxes
            .iter()
            .map(|b| expand(b, delta, page[0], page[1]))
            .collect();
        let adjacency = grown
            .iter()
            .enumerate()
            .map(|(i, g)| {
                boxes
                    .iter()
                    .enumerate()
                    .filter(|&(j, b)| j != i && iou(g, b) > 0.0)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        Self { adjacency, delta }
    }

    pub fn from_adjacency(adjacency: Vec<Vec<usize>>, delta: u32) -> Self {
        Self { adjacency, delta }
    }

    pub fn len(&self) -> usize {
        self.adjacency.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adjacency.is_empty()
    }

    pub fn delta(&self) -> u32 {
        self.delta
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn are_neighbors(&self, i: usize, j: usize) -> bool {
        self.adjacency[i].binary_search(&j).is_ok()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        self.adjacency
            .iter()
            .enumerate()
            .all(|(i, adj)| adj.iter().all(|&j| j != i && self.are_neighbors(j, i)))
    }
}

pub fn build_graph(props: &ProposalSet, delta: u32) -> NeighborGraph {
    NeighborGraph::build(&props.proposals, props.page, delta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSample {
    pub target: usize,
    pub other: usize,
    /// `true` for a neighbor pair.
    pub positive: bool,
}

/// One positive per ordered neighbor edge, each followed by up to `k_neg`
/// negatives drawn without replacement from the target's non-neighbors.
pub fn sample_pairs<R: Rng + ?Sized>(
    g: &NeighborGraph,
    k_neg: usize,
    rng: &mut R,
) -> Vec<PairSample> {
    let n = g.len();
    let mut out = Vec::new();
    for target in 0..n {
        let adj = g.neighbors(target);
        if adj.is_empty() {
            continue;
        }
        let pool: Vec<usize> = (0..n)
            .filter(|&j| j != target && !g.are_neighbors(target, j))
            .collect();
        for &other in adj {
            out.push(PairSample {
                target,
                other,
                positive: true,
            });
            let k = k_neg.min(pool.len());
            for idx in sample(rng, pool.len(), k).into_iter() {
                out.push(PairSample {
                    target,
                    other: pool[idx],
                    positive: false,
                });
            }
        }
    }
    out
}
