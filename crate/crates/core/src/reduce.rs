//! UMAP: exact kNN graph, fuzzy simplicial set, and the stochastic layout.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::cosine_unchecked;
use crate::matrix::{euclidean, squared_euclidean, Matrix};

const SMOOTH_K_ITERATIONS: usize = 64;
const SMOOTH_K_TOLERANCE: f64 = 1e-5;
const SIGMA_MIN_SCALE: f64 = 1e-3;
const SIGMA_MAX_SCALE: f64 = 1e3;
/// Used as the lower clamp when every neighbor distance is zero.
const SIGMA_FLOOR: f64 = 1e-3;
const FIT_SAMPLES: usize = 300;
/// Largest acceptable RMS residual for the fitted output-space curve.
pub const FIT_MAX_RMS: f64 = 0.03;
const GRADIENT_CLIP: f64 = 4.0;

#[derive(Debug, Error, PartialEq)]
pub enum ReduceError {
    #[error("n_neighbors must satisfy 2 <= k < n_points (k = {k}, n = {n})")]
    Neighbors { k: usize, n: usize },
    #[error("invalid UMAP parameter: {0}")]
    Param(String),
    #[error("curve fit did not converge (rms residual {rms:.4})")]
    NonConvergence { rms: f64 },
    #[error("graph has no edges")]
    EmptyGraph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl Metric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Self::Cosine => (1.0 - cosine_unchecked(a, b)).max(0.0),
            Self::Euclidean => euclidean(a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub n_components: usize,
    pub min_dist: f64,
    pub spread: f64,
    pub n_epochs: usize,
    pub negative_sample_rate: usize,
    pub initial_learning_rate: f64,
    pub metric: Metric,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        Self {
            n_neighbors: 15,
            n_components: 5,
            min_dist: 0.0,
            spread: 1.0,
            n_epochs: 200,
            negative_sample_rate: 5,
            initial_learning_rate: 1.0,
            metric: Metric::Cosine,
            seed: 42,
        }
    }
}

impl UmapParams {
    pub fn validate(&self, n_points: usize) -> Result<(), ReduceError> {
        if self.n_neighbors < 2 || self.n_neighbors >= n_points {
            return Err(ReduceError::Neighbors {
                k: self.n_neighbors,
                n: n_points,
            });
        }
        if self.n_components < 2 {
            return Err(ReduceError::Param("n_components must be at least 2".into()));
        }
        if !(self.min_dist >= 0.0) {
            return Err(ReduceError::Param("min_dist must be non-negative".into()));
        }
        if !(self.spread > 0.0) {
            return Err(ReduceError::Param("spread must be positive".into()));
        }
        Ok(())
    }
}

/// Ascending `(index, distance)` neighbor lists, self excluded.
pub type KnnGraph = Vec<Vec<(usize, f64)>>;

pub fn knn_exact(points: &Matrix, k: usize, metric: Metric) -> Result<KnnGraph, ReduceError> {
    let n = points.rows();
    if k >= n || k == 0 {
        return Err(ReduceError::Neighbors { k, n });
    }
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            let row = points.row(i);
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, metric.distance(row, points.row(j))))
                .collect();
            let order = |a: &(usize, f64), b: &(usize, f64)| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0));
            cand.select_nth_unstable_by(k - 1, order);
            cand.truncate(k);
            cand.sort_by(order);
            cand
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub rho: f64,
    pub sigma: f64,
    /// Target `log2(k)` could not be met inside the sigma bounds.
    pub clamped: bool,
}

fn membership_sum(distances: &[f64], rho: f64, sigma: f64) -> f64 {
    distances
        .iter()
        .map(|&d| {
            let excess = d - rho;
            if excess <= 0.0 {
                1.0
            } else {
                (-excess / sigma).exp()
            }
        })
        .sum()
}

/// Solves `sum_j exp(-max(0, d_j - rho) / sigma) = log2(k)` for sigma by
/// bisection inside `[1e-3 * mean(d), 1e3 * mean(d)]`.
pub fn smooth_knn(distances: &[f64], k: usize) -> Calibration {
    let target = (k as f64).log2();
    let rho = distances.iter().copied().find(|&d| d > 0.0).unwrap_or(0.0);
    let mean = if distances.is_empty() {
        0.0
    } else {
        distances.iter().sum::<f64>() / distances.len() as f64
    };
    let (lo_bound, hi_bound) = if mean > 0.0 {
        (SIGMA_MIN_SCALE * mean, SIGMA_MAX_SCALE * mean)
    } else {
        (SIGMA_FLOOR, SIGMA_FLOOR)
    };
    let residual = |sigma: f64| membership_sum(distances, rho, sigma) - target;
    if residual(lo_bound) >= 0.0 {
        return Calibration { rho, sigma: lo_bound, clamped: true };
    }
    if residual(hi_bound) <= 0.0 {
        return Calibration { rho, sigma: hi_bound, clamped: true };
    }
    let (mut lo, mut hi) = (lo_bound, hi_bound);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..SMOOTH_K_ITERATIONS {
        mid = 0.5 * (lo + hi);
        let r = residual(mid);
        if r.abs() < SMOOTH_K_TOLERANCE {
            break;
        }
        if r > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Calibration { rho, sigma: mid, clamped: false }
}

/// Undirected membership graph; edges are stored once with `i < j`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyGraph {
    pub n: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl FuzzyGraph {
    /// Builds from explicit undirected edges; duplicates are combined with the
    /// probabilistic t-conorm.
    pub fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut map: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (i, j, w) in edges {
            if i == j || w <= 0.0 {
                continue;
            }
            let key = (i.min(j), i.max(j));
            let e = map.entry(key).or_insert(0.0);
            *e = *e + w - *e * w;
        }
        Self {
            n,
            edges: map.into_iter().map(|((i, j), w)| (i, j, w.min(1.0))).collect(),
        }
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&key))
            .map_or(0.0, |pos| self.edges[pos].2)
    }
}

pub fn t_conorm(a: f64, b: f64) -> f64 {
    a + b - a * b
}

pub fn fuzzy_simplicial_set(knn: &KnnGraph, calibration: &[Calibration]) -> FuzzyGraph {
    let mut directed: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for (i, (neighbors, cal)) in knn.iter().zip(calibration).enumerate() {
        for &(j, d) in neighbors {
            if i == j {
                continue;
            }
            let excess = d - cal.rho;
            let w = if excess <= 0.0 {
                1.0
            } else {
                (-excess / cal.sigma).exp()
            };
            directed.insert((i, j), w);
        }
    }
    let mut edges = Vec::new();
    for (&(i, j), &a) in &directed {
        let b = directed.get(&(j, i)).copied();
        match b {
            Some(_) if j < i => continue,
            _ => {}
        }
        let w = t_conorm(a, b.unwrap_or(0.0));
        if w > 0.0 {
            edges.push((i.min(j), i.max(j), w.min(1.0)));
        }
    }
    edges.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    FuzzyGraph { n: knn.len(), edges }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveFit {
    pub a: f64,
    pub b: f64,
    pub rms: f64,
}

impl CurveFit {
    pub fn eval(&self, d: f64) -> f64 {
        1.0 / (1.0 + self.a * d.powf(2.0 * self.b))
    }
}

pub fn target_curve(d: f64, min_dist: f64, spread: f64) -> f64 {
    if d <= min_dist {
        1.0
    } else {
        (-(d - min_dist) / spread).exp()
    }
}

fn fit_residuals(xs: &[f64], ys: &[f64], a: f64, b: f64) -> f64 {
    let fit = CurveFit { a, b, rms: 0.0 };
    let sse: f64 = xs.iter().zip(ys).map(|(&x, &y)| (fit.eval(x) - y).powi(2)).sum();
    (sse / xs.len() as f64).sqrt()
}

/// Least-squares fit of `1 / (1 + a d^(2b))` to the piecewise target on 300
/// points over `[0, 3 * spread]`: coarse log grid, then Levenberg-Marquardt.
pub fn fit_ab(min_dist: f64, spread: f64) -> Result<CurveFit, ReduceError> {
    if !(spread > 0.0) || !(min_dist >= 0.0) {
        return Err(ReduceError::Param("fit_ab needs spread > 0 and min_dist >= 0".into()));
    }
    let xs: Vec<f64> = (0..FIT_SAMPLES)
        .map(|i| 3.0 * spread * i as f64 / (FIT_SAMPLES - 1) as f64)
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| target_curve(x, min_dist, spread)).collect();

    let (mut a, mut b) = (1.0, 1.0);
    let mut best = f64::INFINITY;
    for ia in 0..=40 {
        for ib in 0..=40 {
            let ca = 10f64.powf(-2.0 + 4.0 * ia as f64 / 40.0);
            let cb = 0.1 + 2.9 * ib as f64 / 40.0;
            let r = fit_residuals(&xs, &ys, ca, cb);
            if r < best {
                best = r;
                a = ca;
                b = cb;
            }
        }
    }

    let mut lambda = 1e-3;
    let mut sse = best.powi(2) * xs.len() as f64;
    for _ in 0..500 {
        // Normal equations J^T J and J^T r for the two parameters.
        let (mut jaa, mut jab, mut jbb, mut ga, mut gb) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (&x, &y) in xs.iter().zip(&ys) {
            if x == 0.0 {
                continue;
            }
            let p = x.powf(2.0 * b);
            let denom = 1.0 + a * p;
            let f = 1.0 / denom;
            let r = f - y;
            let da = -p / (denom * denom);
            let db = -a * p * 2.0 * x.ln() / (denom * denom);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        let mut improved = false;
        for _ in 0..20 {
            let (maa, mbb) = (jaa * (1.0 + lambda), jbb * (1.0 + lambda));
            let det = maa * mbb - jab * jab;
            if det.abs() < 1e-300 {
                lambda *= 10.0;
                continue;
            }
            let step_a = -(mbb * ga - jab * gb) / det;
            let step_b = -(maa * gb - jab * ga) / det;
            let (na, nb) = (a + step_a, b + step_b);
            if na > 0.0 && nb > 0.0 {
                let new_sse = fit_residuals(&xs, &ys, na, nb).powi(2) * xs.len() as f64;
                if new_sse < sse {
                    let gain = sse - new_sse;
                    a = na;
                    b = nb;
                    sse = new_sse;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = gain > 1e-15 * sse.max(1e-30);
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    let rms = fit_residuals(&xs, &ys, a, b);
    if !(rms < FIT_MAX_RMS) {
        return Err(ReduceError::NonConvergence { rms });
    }
    Ok(CurveFit { a, b, rms })
}

fn clip(v: f64) -> f64 {
    v.clamp(-GRADIENT_CLIP, GRADIENT_CLIP)
}

/// Seeded random init in `[-10, 10]`, then epochs-per-sample SGD with
/// negative sampling and a linearly decaying learning rate.
pub fn optimize_layout(
    graph: &FuzzyGraph,
    params: &UmapParams,
    curve: &CurveFit,
) -> Result<Matrix, ReduceError> {
    if graph.edges.is_empty() {
        return Err(ReduceError::EmptyGraph);
    }
    let n = graph.n;
    let dim = params.n_components;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut emb = Matrix::zeros(n, dim);
    for i in 0..n {
        for x in emb.row_mut(i) {
            *x = rng.random_range(-10.0..10.0);
        }
    }

    let max_w = graph.edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let epochs_per_sample: Vec<f64> = graph.edges.iter().map(|e| max_w / e.2).collect();
    let neg_rate = params.negative_sample_rate as f64;
    let epochs_per_negative: Vec<f64> = epochs_per_sample
        .iter()
        .map(|&e| if neg_rate > 0.0 { e / neg_rate } else { f64::INFINITY })
        .collect();
    let mut next_sample = epochs_per_sample.clone();
    let mut next_negative = epochs_per_negative.clone();
    let (a, b) = (curve.a, curve.b);
    let mut head = vec![0.0; dim];
    let mut other = vec![0.0; dim];

    for epoch in 0..params.n_epochs {
        let alpha = params.initial_learning_rate * (1.0 - epoch as f64 / params.n_epochs as f64);
        let now = epoch as f64;
        for (e, &(i, j, _)) in graph.edges.iter().enumerate() {
            if next_sample[e] > now {
                continue;
            }
            head.copy_from_slice(emb.row(i));
            other.copy_from_slice(emb.row(j));
            let d2 = squared_euclidean(&head, &other);
            let coeff = if d2 > 0.0 {
                -2.0 * a * b * d2.powf(b - 1.0) / (1.0 + a * d2.powf(b))
            } else {
                0.0
            };
            for d in 0..dim {
                let g = clip(coeff * (head[d] - other[d])) * alpha;
                head[d] += g;
                other[d] -= g;
            }
            emb.row_mut(i).copy_from_slice(&head);
            emb.row_mut(j).copy_from_slice(&other);
            next_sample[e] += epochs_per_sample[e];

            let n_neg = ((now - next_negative[e]) / epochs_per_negative[e]).max(0.0) as usize;
            for _ in 0..n_neg {
                let k = rng.random_range(0..n);
                if k == i {
                    continue;
                }
                let neg = emb.row(k);
                let d2 = squared_euclidean(&head, neg);
                if d2 <= 0.0 {
                    continue;
                }
                let coeff = 2.0 * b / ((0.001 + d2) * (1.0 + a * d2.powf(b)));
                for d in 0..dim {
                    head[d] += clip(coeff * (head[d] - neg[d])) * alpha;
                }
            }
            emb.row_mut(i).copy_from_slice(&head);
            next_negative[e] += n_neg as f64 * epochs_per_negative[e];
        }
    }
    Ok(emb)
}

/// High-dimensional stages: exact kNN, calibration and the fuzzy graph.
/// These do not depend on the layout seed and can be reused across runs.
#[derive(Debug, Clone)]
pub struct UmapGraph {
    pub knn: KnnGraph,
    pub calibration: Vec<Calibration>,
    pub graph: FuzzyGraph,
}

pub fn build_graph(points: &Matrix, params: &UmapParams) -> Result<UmapGraph, ReduceError> {
    params.validate(points.rows())?;
    let knn = knn_exact(points, params.n_neighbors, params.metric)?;
    let calibration: Vec<Calibration> = knn
        .iter()
        .map(|nb| {
            let d: Vec<f64> = nb.iter().map(|x| x.1).collect();
            smooth_knn(&d, params.n_neighbors)
        })
        .collect();
    let graph = fuzzy_simplicial_set(&knn, &calibration);
    Ok(UmapGraph {
        knn,
        calibration,
        graph,
    })
}

pub fn layout_graph(graph: &UmapGraph, params: &UmapParams) -> Result<Matrix, ReduceError> {
    let curve = fit_ab(params.min_dist, params.spread)?;
    optimize_layout(&graph.graph, params, &curve)
}

pub fn umap_fit_transform(points: &Matrix, params: &UmapParams) -> Result<Matrix, ReduceError> {
    let graph = build_graph(points, params)?;
    layout_graph(&graph, params)
}
