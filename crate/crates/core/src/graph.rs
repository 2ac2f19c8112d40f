//! Content-induced graph augmentation and normalized bipartite views.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, InteractionSet, Modality};
use crate::error::{MagnetError, Result};
use crate::format;
use crate::scalar::Scalar;
use crate::tensor::Csr;

/// Cosine similarity; zero-norm vectors are similar to nothing (0).
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Descending score, then ascending id.
fn by_score_then_id(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0))
}

/// Top-k cosine neighbors of every item under one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    pub modality: Modality,
    pub k: usize,
    pub lists: Vec<Vec<(usize, f64)>>,
}

impl NeighborIndex {
    pub fn num_items(&self) -> usize {
        self.lists.len()
    }

    /// Similarity of `j` as a neighbor of `i`, if retained.
    pub fn similarity(&self, i: usize, j: usize) -> Option<f64> {
        self.lists[i].iter().find(|&&(n, _)| n == j).map(|&(_, s)| s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_bytes(path, &format::encode_index_lists(self.k, &self.lists))
    }

    pub fn load(path: &Path, modality: Modality) -> Result<Self> {
        let bytes = format::read_bytes(path)?;
        let (k, lists) = format::decode_index_lists(path, &bytes)?;
        Ok(Self {
            modality,
            k,
            lists: lists
                .into_iter()
                .map(|l| l.into_iter().map(|(j, s)| (j, s as f64)).collect())
                .collect(),
        })
    }
}

/// Exact top-k neighbor lists by brute-force cosine similarity.
pub fn build_neighbor_index(features: &FeatureMatrix, k: usize) -> Result<NeighborIndex> {
    let n = features.rows;
    if k == 0 || k >= n {
        return Err(MagnetError::Parameter(format!("knn k = {k} must satisfy 1 <= k < {n} items")));
    }
    let lists = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = features.row(i);
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, cosine(xi, features.row(j))))
                .collect();
            sims.sort_by(by_score_then_id);
            sims.truncate(k);
            sims
        })
        .collect();
    Ok(NeighborIndex {
        modality: features.modality,
        k,
        lists,
    })
}

/// Per-user content-induced candidates and the flattened induced edge set.
#[derive(Clone, Debug, PartialEq)]
pub struct InducedEdges {
    pub r: usize,
    pub candidates: Vec<Vec<(usize, f64)>>,
    pub edges: Vec<(usize, usize)>,
}

impl InducedEdges {
    pub fn empty(num_users: usize) -> Self {
        Self {
            r: 0,
            candidates: vec![Vec::new(); num_users],
            edges: Vec::new(),
        }
    }

    fn from_candidates(r: usize, candidates: Vec<Vec<(usize, f64)>>) -> Self {
        let edges = candidates
            .iter()
            .enumerate()
            .flat_map(|(u, c)| c.iter().map(move |&(j, _)| (u, j)))
            .collect();
        Self { r, candidates, edges }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        format::write_bytes(path, &format::encode_index_lists(self.r, &self.candidates))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = format::read_bytes(path)?;
        let (r, lists) = format::decode_index_lists(path, &bytes)?;
        let candidates = lists
            .into_iter()
            .map(|l| l.into_iter().map(|(j, s)| (j, s as f64)).collect())
            .collect();
        Ok(Self::from_candidates(r, candidates))
    }
}

/// Candidate pool per user is the union of its history items' neighbor lists
/// minus the history; each candidate j scores
/// `sum over history i of (s^A_ij + s^S_ij) / 2` with absent neighbors counting 0.
pub fn expand_candidates(
    train: &InteractionSet,
    idx_a: &NeighborIndex,
    idx_s: &NeighborIndex,
    r: usize,
) -> Result<InducedEdges> {
    if r == 0 {
        return Err(MagnetError::Parameter("expand r must be at least 1".into()));
    }
    let n = train.num_items();
    if idx_a.num_items() != n || idx_s.num_items() != n {
        return Err(MagnetError::Shape("neighbor indices cover a different item space".into()));
    }
    let candidates = (0..train.num_users())
        .into_par_iter()
        .map(|u| {
            let hist = train.history(u);
            let mut score = vec![0.0f64; n];
            let mut seen = vec![false; n];
            for &i in hist {
                let mut touched: Vec<(usize, f64, f64)> = Vec::new();
                for &(j, s) in &idx_a.lists[i] {
                    touched.push((j, s, 0.0));
                }
                for &(j, s) in &idx_s.lists[i] {
                    match touched.iter_mut().find(|t| t.0 == j) {
                        Some(t) => t.2 = s,
                        None => touched.push((j, 0.0, s)),
                    }
                }
                for (j, sa, ss) in touched {
                    score[j] += (sa + ss) / 2.0;
                    seen[j] = true;
                }
            }
            let mut pool: Vec<(usize, f64)> = (0..n)
                .filter(|&j| seen[j] && hist.binary_search(&j).is_err())
                .map(|j| (j, score[j]))
                .collect();
            pool.sort_by(by_score_then_id);
            pool.truncate(r);
            pool
        })
        .collect();
    Ok(InducedEdges::from_candidates(r, candidates))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum View {
    /// Observed user-item graph.
    UI,
    /// Observed plus content-induced edges.
    UIG,
}

/// Symmetrically normalized bipartite graph for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGraph {
    pub view: View,
    pub num_users: usize,
    pub num_items: usize,
    /// Sorted, deduplicated `(user, item)` edges.
    pub edges: Vec<(usize, usize)>,
    /// `1 / sqrt(deg(u) deg(i))` per edge.
    pub coefficients: Vec<f64>,
    pub user_degree: Vec<usize>,
    pub item_degree: Vec<usize>,
}

pub fn build_view_graph(train: &InteractionSet, induced: Option<&InducedEdges>, view: View) -> ViewGraph {
    let mut edges = train.edges().to_vec();
    if view == View::UIG {
        if let Some(extra) = induced {
            edges.extend_from_slice(&extra.edges);
        }
    }
    edges.sort_unstable();
    edges.dedup();
    let mut user_degree = vec![0; train.num_users()];
    let mut item_degree = vec![0; train.num_items()];
    for &(u, i) in &edges {
        user_degree[u] += 1;
        item_degree[i] += 1;
    }
    let coefficients = edges
        .iter()
        .map(|&(u, i)| 1.0 / ((user_degree[u] * item_degree[i]) as f64).sqrt())
        .collect();
    ViewGraph {
        view,
        num_users: train.num_users(),
        num_items: train.num_items(),
        edges,
        coefficients,
        user_degree,
        item_degree,
    }
}

impl ViewGraph {
    pub fn num_nodes(&self) -> usize {
        self.num_users + self.num_items
    }

    /// Neighbor node ids per node over the stacked `[users; items]` space.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let nu = self.num_users;
        let mut adj = vec![Vec::new(); self.num_nodes()];
        for &(u, i) in &self.edges {
            adj[u].push(nu + i);
        }
        for &(u, i) in &self.edges {
            adj[nu + i].push(u);
        }
        adj
    }

    /// Normalized adjacency over stacked `[users; items]` nodes.
    pub fn propagation_matrix<T: Scalar>(&self) -> Csr<T> {
        let nu = self.num_users;
        let mut lists: Vec<Vec<(usize, T)>> = vec![Vec::new(); self.num_nodes()];
        for (&(u, i), &c) in self.edges.iter().zip(&self.coefficients) {
            lists[u].push((nu + i, T::of(c)));
        }
        for (&(u, i), &c) in self.edges.iter().zip(&self.coefficients) {
            lists[nu + i].push((u, T::of(c)));
        }
        Csr::from_row_lists(self.num_nodes(), &lists)
    }
}

/// JSON sidecar describing a cached neighbor index / induced edge set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphCacheMeta {
    pub k: usize,
    pub r: usize,
    pub features_a: String,
    pub features_s: String,
    pub train: String,
}
