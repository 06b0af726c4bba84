//! Ablation drivers: alternative concept-selection strategies, bottleneck-size
//! sweeps, and decomposition- versus similarity-based concept scores.
//!
//! Labels only enter after selection, when a head is trained on the selected
//! bottleneck.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::bank::ConceptBank;
use crate::decompose::{decompose_batch, OmpConfig};
use crate::error::{Error, Result};
use crate::head::{train, LinearHead, TrainConfig};
use crate::linalg::{dot, norm, Matrix, OrthoBasis};
use crate::select::select_concepts;
use crate::synth::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Greedy,
    Random,
    KMeans,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::Random => "random",
            Strategy::KMeans => "kmeans",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "greedy" => Some(Strategy::Greedy),
            "random" => Some(Strategy::Random),
            "kmeans" | "k-means" => Some(Strategy::KMeans),
            _ => None,
        }
    }
}

/// Picks `m` pool concepts with the given strategy.
pub fn select_with(
    strategy: Strategy,
    x: &Matrix,
    pool: &ConceptBank,
    m: usize,
    dependence_tol: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::config("bottleneck size must be at least 1"));
    }
    match strategy {
        Strategy::Greedy => Ok(select_concepts(x, pool, m, dependence_tol)?.selected),
        Strategy::Random => Ok(random_subset(pool.len(), m, seed)),
        Strategy::KMeans => kmeans_medoids(pool.embeddings(), m, seed),
    }
}

/// `min(m, len)` distinct indices drawn uniformly, in draw order.
pub fn random_subset(len: usize, m: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng(seed));
    idx.truncate(m.min(len));
    idx
}

/// Runs k-means with `k` clusters over the rows of `points` and returns, for
/// each centroid in order, the nearest row not already taken.
pub fn kmeans_medoids(points: &Matrix, k: usize, seed: u64) -> Result<Vec<usize>> {
    let centroids = kmeans(points, k, seed, 100)?;
    let mut taken = vec![false; points.rows()];
    let mut out = Vec::with_capacity(centroids.rows());
    for c in centroids.row_iter() {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.row_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = sq_dist(p, c);
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k ≤ number of points");
        taken[i] = true;
        out.push(i);
    }
    Ok(out)
}

/// Lloyd's algorithm with k-means++ seeding. Returns the `k × d` centroids.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize) -> Result<Matrix> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::config(alloc::format!(
            "k-means with k = {k} over {n} points"
        )));
    }
    let mut r = rng(seed);
    let mut chosen = vec![r.gen_range(0..n)];
    let mut d2: Vec<f64> = points
        .row_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = r.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            // All remaining points coincide with chosen ones.
            (0..n).find(|i| !chosen.contains(i)).expect("k ≤ n")
        };
        chosen.push(next);
        for (i, p) in points.row_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    let mut centroids = points.select_rows(&chosen);
    let mut assign = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.row_iter().enumerate() {
            let a = nearest(&centroids, p);
            if a != assign[i] {
                assign[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, p) in points.row_iter().enumerate() {
            counts[assign[i]] += 1;
            crate::linalg::axpy(1.0, p, sums.row_mut(assign[i]));
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Reseed an empty cluster at the point farthest from its centroid.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        sq_dist(points.row(a), centroids.row(assign[a]))
                            .total_cmp(&sq_dist(points.row(b), centroids.row(assign[b])))
                            .then(b.cmp(&a))
                    })
                    .expect("n ≥ 1");
                centroids.row_mut(c).copy_from_slice(points.row(far));
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(centroids)
}

fn nearest(centroids: &Matrix, p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.row_iter().enumerate() {
        let d = sq_dist(p, row);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖X(E − P)‖²_F` with `P` the projector onto the span of the given pool
/// concepts; dependent concepts add nothing.
pub fn subset_residual(x: &Matrix, pool: &ConceptBank, idx: &[usize]) -> Result<f64> {
    let mut basis = OrthoBasis::new(pool.dim());
    for &i in idx {
        match basis.push(pool.embedding(i), 1e-12) {
            Ok(()) | Err(Error::Dependent { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(x.row_iter().map(|r| {
        let res = basis.residual(r);
        dot(&res, &res)
    }).sum())
}

/// Labelled split used to score a bottleneck downstream.
#[derive(Debug, Clone)]
pub struct Downstream<'a> {
    pub train_x: &'a Matrix,
    pub train_y: &'a [usize],
    pub test_x: &'a Matrix,
    pub test_y: &'a [usize],
    pub class_names: &'a [String],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadSetup {
    pub omp: OmpConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPoint {
    pub strategy: Strategy,
    pub m: usize,
    /// Concepts actually selected (may be below `m` if the pool ran out).
    pub selected: usize,
    pub residual: f64,
    pub accuracy: f64,
}

/// Test accuracy of a head trained on reconstructions over `bank`.
pub fn bottleneck_accuracy(bank: &ConceptBank, data: &Downstream<'_>, setup: &HeadSetup) -> Result<f64> {
    let (_, train_recon) = decompose_batch(data.train_x, bank, &setup.omp)?;
    let (_, test_recon) = decompose_batch(data.test_x, bank, &setup.omp)?;
    let head = LinearHead::zeros(bank.dim(), data.class_names.to_vec())?;
    let (head, _) = train(&head, &train_recon, data.train_y, &setup.train)?;
    head.accuracy(&test_recon, data.test_y)
}

/// Bottleneck-size sweep for one strategy: selection on `x` alone, then
/// decomposition and head training on `data`.
pub fn ablate_selection(
    x: &Matrix,
    pool: &ConceptBank,
    grid: &[usize],
    strategy: Strategy,
    seed: u64,
    data: &Downstream<'_>,
    setup: &HeadSetup,
) -> Result<Vec<AblationPoint>> {
    if grid.is_empty() {
        return Err(Error::config("bottleneck grid is empty"));
    }
    let mut out = Vec::with_capacity(grid.len());
    for &m in grid {
        let idx = select_with(strategy, x, pool, m, crate::select::DEFAULT_DEPENDENCE_TOL, seed)?;
        let residual = subset_residual(x, pool, &idx)?;
        let bank = pool.subset(&idx)?;
        let accuracy = bottleneck_accuracy(&bank, data, setup)?;
        out.push(AblationPoint {
            strategy,
            m,
            selected: idx.len(),
            residual,
            accuracy,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationResult {
    /// Head over sparse decomposition coefficients.
    pub decomposition_accuracy: f64,
    /// Head over cosine similarities to every concept.
    pub similarity_accuracy: f64,
}

/// Sparse coefficients of each row over `bank`, scattered to `m` columns.
pub fn decomposition_scores(x: &Matrix, bank: &ConceptBank, omp: &OmpConfig) -> Result<Matrix> {
    let (codes, _) = decompose_batch(x, bank, omp)?;
    let mut out = Matrix::zeros(x.rows(), bank.len());
    for (i, code) in codes.iter().enumerate() {
        out.row_mut(i).copy_from_slice(&code.dense(bank.len()));
    }
    Ok(out)
}

/// `cos(I, c_j)` for every row and concept.
pub fn similarity_scores(x: &Matrix, bank: &ConceptBank) -> Result<Matrix> {
    if x.cols() != bank.dim() {
        return Err(Error::shape("images and concepts differ in dimension"));
    }
    let mut out = Matrix::zeros(x.rows(), bank.len());
    for (i, row) in x.row_iter().enumerate() {
        let rn = norm(row);
        if rn == 0.0 {
            return Err(Error::DegenerateRow { row: i });
        }
        for j in 0..bank.len() {
            let c = bank.embedding(j);
            out[(i, j)] = dot(row, c) / (rn * norm(c));
        }
    }
    Ok(out)
}

/// Trains the same `m`-input linear head on both kinds of concept scores and
/// reports test accuracy for each.
pub fn ablate_association(
    bank: &ConceptBank,
    data: &Downstream<'_>,
    setup: &HeadSetup,
) -> Result<AssociationResult> {
    if bank.is_empty() {
        return Err(Error::config("concept bank is empty"));
    }
    let arm = |train_f: Matrix, test_f: Matrix| -> Result<f64> {
        let head = LinearHead::zeros(bank.len(), data.class_names.to_vec())?;
        let (head, _) = train(&head, &train_f, data.train_y, &setup.train)?;
        head.accuracy(&test_f, data.test_y)
    };
    let decomposition_accuracy = arm(
        decomposition_scores(data.train_x, bank, &setup.omp)?,
        decomposition_scores(data.test_x, bank, &setup.omp)?,
    )?;
    let similarity_accuracy = arm(
        similarity_scores(data.train_x, bank)?,
        similarity_scores(data.test_x, bank)?,
    )?;
    Ok(AssociationResult {
        decomposition_accuracy,
        similarity_accuracy,
    })
}

/// Row indices keeping `shots` examples per class (fewer if a class is
/// short), chosen with a fixed seed and returned sorted.
pub fn few_shot_subsample(labels: &[usize], shots: usize, seed: u64) -> Vec<usize> {
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut r = rng(seed);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        rows.shuffle(&mut r);
        out.extend(rows.into_iter().take(shots));
    }
    out.sort_unstable();
    out
}
