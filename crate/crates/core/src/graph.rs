//! The 12-channel montage graph.
//!
//! Nodes are the bipolar channels; two channels are connected when they
//! share a physical electrode, and every node carries a self-loop so each
//! channel always attends to itself.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::real::Real;
use crate::tensor::Tensor;

/// Number of bipolar channels.
pub const CHANNELS: usize = 12;

/// Fixed channel order: (name, source electrode, reference electrode).
pub const CHANNEL_PAIRS: [(&str, &str, &str); CHANNELS] = [
    ("Fp1-T3", "Fp1", "T3"),
    ("T3-O1", "T3", "O1"),
    ("Fp1-C3", "Fp1", "C3"),
    ("C3-O1", "C3", "O1"),
    ("Fp2-C4", "Fp2", "C4"),
    ("C4-O2", "C4", "O2"),
    ("Fp2-T4", "Fp2", "T4"),
    ("T4-O2", "T4", "O2"),
    ("T3-C3", "T3", "C3"),
    ("C3-CZ", "C3", "CZ"),
    ("CZ-C4", "CZ", "C4"),
    ("C4-T4", "C4", "T4"),
];

/// The nine electrodes required to derive the reduced montage.
pub const ELECTRODES: [&str; 9] = ["Fp1", "Fp2", "T3", "T4", "C3", "C4", "CZ", "O1", "O2"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MontageGraph {
    adjacency: [[bool; CHANNELS]; CHANNELS],
}

impl Default for MontageGraph {
    fn default() -> Self {
        Self::build()
    }
}

impl MontageGraph {
    /// Construct the channel graph under the shared-electrode rule, with
    /// self-loops on every node.
    pub fn build() -> Self {
        let mut adjacency = [[false; CHANNELS]; CHANNELS];
        for (i, row) in adjacency.iter_mut().enumerate() {
            let (_, ia, ib) = CHANNEL_PAIRS[i];
            for (j, cell) in row.iter_mut().enumerate() {
                if i == j {
                    *cell = true;
                    continue;
                }
                let (_, ja, jb) = CHANNEL_PAIRS[j];
                *cell = ia == ja || ia == jb || ib == ja || ib == jb;
            }
        }
        Self { adjacency }
    }

    pub fn adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn node_names(&self) -> Vec<&'static str> {
        CHANNEL_PAIRS.iter().map(|(n, _, _)| *n).collect()
    }

    /// Neighbors of `i` including `i` itself.
    pub fn neighborhood(&self, i: usize) -> Vec<usize> {
        (0..CHANNELS).filter(|&j| self.adjacency[i][j]).collect()
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..CHANNELS)
            .filter(|&j| j != i && self.adjacency[i][j])
            .count()
    }

    /// Adjacency (including self-loops) as a dense 0/1 mask tensor.
    pub fn mask<T: Real>(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .adjacency
            .iter()
            .flat_map(|row| row.iter().map(|&a| if a { T::one() } else { T::zero() }))
            .collect();
        Tensor::new(vec![CHANNELS, CHANNELS], data).expect("mask shape")
    }

    /// BFS distances from `start` (self distance 0).
    fn distances(&self, start: usize) -> [usize; CHANNELS] {
        let mut dist = [usize::MAX; CHANNELS];
        dist[start] = 0;
        let mut queue = vec![start];
        let mut head = 0;
        while head < queue.len() {
            let u = queue[head];
            head += 1;
            for v in 0..CHANNELS {
                if v != u && self.adjacency[u][v] && dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push(v);
                }
            }
        }
        dist
    }

    /// Fraction of ordered node pairs `(i, j)`, `i != j`, with graph
    /// distance at most `k`.
    pub fn k_hop_reach(&self, k: usize) -> f64 {
        let mut reached = 0usize;
        for i in 0..CHANNELS {
            let d = self.distances(i);
            reached += (0..CHANNELS)
                .filter(|&j| j != i && d[j] <= k)
                .count();
        }
        reached as f64 / (CHANNELS * (CHANNELS - 1)) as f64
    }

    pub fn diameter(&self) -> usize {
        let mut diam = 0;
        for i in 0..CHANNELS {
            for d in self.distances(i) {
                if d != usize::MAX && d > diam {
                    diam = d;
                }
            }
        }
        diam
    }

    pub fn is_connected(&self) -> bool {
        self.distances(0).iter().all(|&d| d != usize::MAX)
    }

    /// Edge list (i < j, excluding self-loops) as text, one edge per line.
    pub fn edge_list(&self) -> String {
        let mut out = String::new();
        for i in 0..CHANNELS {
            for j in (i + 1)..CHANNELS {
                if self.adjacency[i][j] {
                    out.push_str(&format!(
                        "{}\t{}\n",
                        CHANNEL_PAIRS[i].0, CHANNEL_PAIRS[j].0
                    ));
                }
            }
        }
        out
    }
}
