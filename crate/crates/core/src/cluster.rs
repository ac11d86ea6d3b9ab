//! HDBSCAN over reduced coordinates.
//!
//! Dense implementation: core distances and Prim's MST both evaluate the
//! mutual-reachability distance on the fly, so time is O(n^2) and memory O(n).

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{euclidean, Matrix};

/// Lambda assigned to zero-distance merges (duplicate points).
pub const LAMBDA_CAP: f64 = 1e12;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("k = {k} must be smaller than the number of points ({n})")]
    TooFewPoints { k: usize, n: usize },
    #[error("min_cluster_size must be at least 2 (got {0})")]
    MinClusterSize(usize),
    #[error("min_samples must be at least 1")]
    MinSamples,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Defaults to `min_cluster_size`.
    pub min_samples: Option<usize>,
}

impl HdbscanParams {
    pub fn new(min_cluster_size: usize) -> Self {
        Self {
            min_cluster_size,
            min_samples: None,
        }
    }

    pub fn min_samples(&self) -> usize {
        self.min_samples.unwrap_or(self.min_cluster_size)
    }

    fn validate(&self) -> Result<(), ClusterError> {
        if self.min_cluster_size < 2 {
            return Err(ClusterError::MinClusterSize(self.min_cluster_size));
        }
        if self.min_samples() < 1 {
            return Err(ClusterError::MinSamples);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterLabels {
    /// `-1` for noise, otherwise `0..n_clusters`, largest cluster first.
    pub labels: Vec<i32>,
    pub n_clusters: usize,
}

impl ClusterLabels {
    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l < 0).count()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }
}

/// Distance to the k-th nearest other point.
pub fn core_distances(points: &Matrix, k: usize) -> Result<Vec<f64>, ClusterError> {
    let n = points.rows();
    if k >= n || k == 0 {
        return Err(ClusterError::TooFewPoints { k, n });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| euclidean(points.row(i), points.row(j)))
                .collect();
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, f64::total_cmp);
            *kth
        })
        .collect())
}

/// `d_mr(a, b) = max(core_a, core_b, d(a, b))`, with `d_mr(a, a) = 0`.
#[derive(Debug, Clone, Copy)]
pub struct MutualReachability<'a> {
    points: &'a Matrix,
    core: &'a [f64],
}

impl<'a> MutualReachability<'a> {
    pub fn new(points: &'a Matrix, core: &'a [f64]) -> Self {
        assert_eq!(points.rows(), core.len(), "one core distance per point");
        Self { points, core }
    }

    pub fn len(&self) -> usize {
        self.core.len()
    }

    pub fn is_empty(&self) -> bool {
        self.core.is_empty()
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 0.0;
        }
        let d = euclidean(self.points.row(a), self.points.row(b));
        d.max(self.core[a]).max(self.core[b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MstEdge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

fn edge_key(w: f64, a: usize, b: usize) -> (f64, usize, usize) {
    (w, a.min(b), a.max(b))
}

fn key_cmp(x: (f64, usize, usize), y: (f64, usize, usize)) -> Ordering {
    x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2))
}

/// Prim's algorithm over an implicit dense distance; ties resolved by
/// `(weight, min index, max index)`.
pub fn mst(n: usize, distance: impl Fn(usize, usize) -> f64) -> Vec<MstEdge> {
    if n < 2 {
        return Vec::new();
    }
    let mut in_tree = vec![false; n];
    let mut best_w = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    in_tree[0] = true;
    for v in 1..n {
        best_w[v] = distance(0, v);
    }
    let mut edges = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let v = (0..n)
            .filter(|&v| !in_tree[v])
            .min_by(|&x, &y| {
                key_cmp(edge_key(best_w[x], x, parent[x]), edge_key(best_w[y], y, parent[y]))
            })
            .expect("a vertex remains outside the tree");
        in_tree[v] = true;
        edges.push(MstEdge {
            a: parent[v].min(v),
            b: parent[v].max(v),
            weight: best_w[v],
        });
        for u in 0..n {
            if in_tree[u] {
                continue;
            }
            let w = distance(v, u);
            if key_cmp(edge_key(w, v, u), edge_key(best_w[u], u, parent[u])) == Ordering::Less {
                best_w[u] = w;
                parent[u] = v;
            }
        }
    }
    edges
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "id")]
pub enum TreeChild {
    Point(usize),
    Cluster(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CondensedEdge {
    pub parent: usize,
    pub child: TreeChild,
    pub lambda: f64,
    pub child_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedCluster {
    pub parent: Option<usize>,
    pub birth_lambda: f64,
    pub size: usize,
    pub stability: f64,
    pub children: Vec<usize>,
}

/// Cluster 0 is the root; children always have larger ids than parents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondensedTree {
    pub n_points: usize,
    pub min_cluster_size: usize,
    pub edges: Vec<CondensedEdge>,
    pub clusters: Vec<CondensedCluster>,
}

fn to_lambda(distance: f64) -> f64 {
    if distance > 0.0 {
        (1.0 / distance).min(LAMBDA_CAP)
    } else {
        LAMBDA_CAP
    }
}

struct Dendrogram {
    n: usize,
    /// Internal node `n + i` merges `children[i]` at `heights[i]`.
    children: Vec<(usize, usize)>,
    heights: Vec<f64>,
    sizes: Vec<usize>,
}

impl Dendrogram {
    fn size(&self, node: usize) -> usize {
        if node < self.n {
            1
        } else {
            self.sizes[node - self.n]
        }
    }

    fn leaves(&self, node: usize, out: &mut Vec<usize>) {
        let mut stack = vec![node];
        while let Some(x) = stack.pop() {
            if x < self.n {
                out.push(x);
            } else {
                let (l, r) = self.children[x - self.n];
                stack.push(r);
                stack.push(l);
            }
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

fn single_linkage(n: usize, edges: &[MstEdge]) -> Dendrogram {
    let mut sorted = edges.to_vec();
    sorted.sort_by(|x, y| key_cmp(edge_key(x.weight, x.a, x.b), edge_key(y.weight, y.a, y.b)));
    let total = 2 * n - 1;
    let mut uf: Vec<usize> = (0..total).collect();
    let mut dendro = Dendrogram {
        n,
        children: Vec::with_capacity(n.saturating_sub(1)),
        heights: Vec::with_capacity(n.saturating_sub(1)),
        sizes: Vec::with_capacity(n.saturating_sub(1)),
    };
    for e in sorted {
        let (ra, rb) = (find(&mut uf, e.a), find(&mut uf, e.b));
        let node = n + dendro.children.len();
        dendro.sizes.push(dendro.size(ra) + dendro.size(rb));
        dendro.children.push((ra, rb));
        dendro.heights.push(e.weight);
        uf[ra] = node;
        uf[rb] = node;
    }
    dendro
}

/// Single-linkage dendrogram from the MST, condensed top-down: a split is
/// kept only when both sides have at least `min_cluster_size` points.
pub fn condense(n_points: usize, edges: &[MstEdge], min_cluster_size: usize) -> CondensedTree {
    let mut tree = CondensedTree {
        n_points,
        min_cluster_size,
        edges: Vec::new(),
        clusters: vec![CondensedCluster {
            parent: None,
            birth_lambda: 0.0,
            size: n_points,
            stability: 0.0,
            children: Vec::new(),
        }],
    };
    if n_points < 2 || edges.len() + 1 != n_points {
        for p in 0..n_points {
            tree.edges.push(CondensedEdge {
                parent: 0,
                child: TreeChild::Point(p),
                lambda: LAMBDA_CAP,
                child_size: 1,
            });
        }
        return tree;
    }
    let dendro = single_linkage(n_points, edges);
    let root = 2 * n_points - 2;
    let mut stack = vec![(root, 0usize)];
    let mut leaves = Vec::new();
    while let Some((node, cluster)) = stack.pop() {
        let (left, right) = dendro.children[node - n_points];
        let lambda = to_lambda(dendro.heights[node - n_points]);
        let (ls, rs) = (dendro.size(left), dendro.size(right));
        if ls >= min_cluster_size && rs >= min_cluster_size {
            for size in [ls, rs] {
                let id = tree.clusters.len();
                tree.clusters.push(CondensedCluster {
                    parent: Some(cluster),
                    birth_lambda: lambda,
                    size,
                    stability: 0.0,
                    children: Vec::new(),
                });
                tree.clusters[cluster].children.push(id);
                tree.edges.push(CondensedEdge {
                    parent: cluster,
                    child: TreeChild::Cluster(id),
                    lambda,
                    child_size: size,
                });
            }
            let ids = tree.clusters[cluster].children.len();
            let (lid, rid) = (
                tree.clusters[cluster].children[ids - 2],
                tree.clusters[cluster].children[ids - 1],
            );
            stack.push((right, rid));
            stack.push((left, lid));
        } else {
            for (child, size) in [(right, rs), (left, ls)] {
                if size >= min_cluster_size {
                    stack.push((child, cluster));
                } else {
                    leaves.clear();
                    dendro.leaves(child, &mut leaves);
                    for &p in &leaves {
                        tree.edges.push(CondensedEdge {
                            parent: cluster,
                            child: TreeChild::Point(p),
                            lambda,
                            child_size: 1,
                        });
                    }
                }
            }
        }
    }
    for e in &tree.edges {
        let birth = tree.clusters[e.parent].birth_lambda;
        tree.clusters[e.parent].stability += (e.lambda - birth) * e.child_size as f64;
    }
    tree
}

impl CondensedTree {
    /// Edges in the flat `(parent, child, lambda, size)` form, with cluster
    /// ids offset by `n_points` so they never collide with point ids.
    pub fn to_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .edges
            .iter()
            .map(|e| {
                let child = match e.child {
                    TreeChild::Point(p) => p,
                    TreeChild::Cluster(c) => self.n_points + c,
                };
                serde_json::json!({
                    "parent": self.n_points + e.parent,
                    "child": child,
                    "lambda": e.lambda,
                    "size": e.child_size,
                })
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("tree serializes")
    }

    pub fn leaf_clusters(&self) -> Vec<usize> {
        (0..self.clusters.len())
            .filter(|&c| self.clusters[c].children.is_empty())
            .collect()
    }

    pub fn is_descendant(&self, mut node: usize, ancestor: usize) -> bool {
        while let Some(p) = self.clusters[node].parent {
            if p == ancestor {
                return true;
            }
            node = p;
        }
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected cluster ids (never the root), ascending.
    pub selected: Vec<usize>,
    /// Best achievable stability within each subtree.
    pub subtree_stability: Vec<f64>,
}

/// Excess-of-mass selection: bottom-up, a cluster is kept when its own
/// stability exceeds the best total of its descendants.
pub fn select_clusters(tree: &CondensedTree) -> Selection {
    let nc = tree.clusters.len();
    let mut selected = vec![false; nc];
    let mut subtree = vec![0.0; nc];
    for c in (1..nc).rev() {
        let node = &tree.clusters[c];
        if node.children.is_empty() {
            selected[c] = true;
            subtree[c] = node.stability;
            continue;
        }
        let below: f64 = node.children.iter().map(|&ch| subtree[ch]).sum();
        if node.stability > below {
            selected[c] = true;
            subtree[c] = node.stability;
            let mut stack = node.children.clone();
            while let Some(d) = stack.pop() {
                selected[d] = false;
                stack.extend(tree.clusters[d].children.iter().copied());
            }
        } else {
            subtree[c] = below;
        }
    }
    Selection {
        selected: (0..nc).filter(|&c| selected[c]).collect(),
        subtree_stability: subtree,
    }
}

pub fn extract_eom(tree: &CondensedTree) -> ClusterLabels {
    let selection = select_clusters(tree);
    let nc = tree.clusters.len();
    // owner[c]: selected cluster containing c, if any.
    let mut owner: Vec<Option<usize>> = vec![None; nc];
    for &s in &selection.selected {
        owner[s] = Some(s);
    }
    for c in 1..nc {
        if owner[c].is_none() {
            if let Some(p) = tree.clusters[c].parent {
                owner[c] = owner[p];
            }
        }
    }
    let mut point_owner = vec![None; tree.n_points];
    for e in &tree.edges {
        if let TreeChild::Point(p) = e.child {
            point_owner[p] = owner[e.parent];
        }
    }
    let mut sizes: Vec<(usize, usize)> = selection
        .selected
        .iter()
        .map(|&s| (s, point_owner.iter().filter(|o| **o == Some(s)).count()))
        .collect();
    sizes.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut label_of = vec![-1i32; nc];
    for (label, &(s, _)) in sizes.iter().enumerate() {
        label_of[s] = label as i32;
    }
    ClusterLabels {
        labels: point_owner
            .iter()
            .map(|o| o.map_or(-1, |s| label_of[s]))
            .collect(),
        n_clusters: sizes.len(),
    }
}

#[derive(Debug, Clone)]
pub struct HdbscanFit {
    pub labels: ClusterLabels,
    pub tree: CondensedTree,
}

pub fn hdbscan_fit(points: &Matrix, params: &HdbscanParams) -> Result<HdbscanFit, ClusterError> {
    params.validate()?;
    let n = points.rows();
    if n < params.min_cluster_size || n < 2 {
        return Err(ClusterError::TooFewPoints {
            k: params.min_cluster_size,
            n,
        });
    }
    // min_samples may equal n when min_cluster_size == n.
    let k = params.min_samples().min(n - 1);
    let core = core_distances(points, k)?;
    let mr = MutualReachability::new(points, &core);
    let edges = mst(n, |a, b| mr.distance(a, b));
    let tree = condense(n, &edges, params.min_cluster_size);
    let labels = extract_eom(&tree);
    Ok(HdbscanFit { labels, tree })
}
