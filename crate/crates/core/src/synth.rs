//! Seeded synthetic fixtures: low-coherence atom sets, sparse mixtures, and a
//! labelled "concept world" whose images are sparse combinations of known
//! concept embeddings. Used by tests, the acceptance suite and the bundled
//! demo pipeline.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::bank::ConceptBank;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect()
}

pub fn unit_vector(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian_vector(rng, dim);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

pub fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng))
}

/// Largest `|cos|` between distinct rows.
pub fn mutual_coherence(rows: &Matrix) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..rows.rows() {
        for j in (i + 1)..rows.rows() {
            let c = dot(rows.row(i), rows.row(j)) / (norm(rows.row(i)) * norm(rows.row(j)));
            worst = worst.max(c.abs());
        }
    }
    worst
}

/// `count` unit vectors in dimension `dim` with pairwise `|cos| < max_coherence`,
/// drawn one at a time with rejection.
pub fn low_coherence_atoms(
    rng: &mut impl Rng,
    count: usize,
    dim: usize,
    max_coherence: f64,
) -> Result<Matrix> {
    let mut atoms: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while atoms.len() < count {
        attempts += 1;
        if attempts > 10_000 * count.max(1) {
            return Err(Error::config(alloc::format!(
                "could not draw {count} atoms in dimension {dim} below coherence {max_coherence}"
            )));
        }
        let v = unit_vector(rng, dim);
        if atoms.iter().all(|a| dot(a, &v).abs() < max_coherence) {
            atoms.push(v);
        }
    }
    Matrix::from_rows(&atoms)
}

/// A sparse combination `Σ coef_j · atom_j` over `support_size` distinct atoms
/// with coefficients uniform in `coef_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMixture {
    pub vector: Vec<f64>,
    /// Sorted atom indices.
    pub support: Vec<usize>,
    /// Aligned with `support`.
    pub coefficients: Vec<f64>,
}

pub fn sparse_mixture(
    rng: &mut impl Rng,
    atoms: &Matrix,
    support_size: usize,
    coef_range: (f64, f64),
) -> SparseMixture {
    let mut idx: Vec<usize> = (0..atoms.rows()).collect();
    idx.shuffle(rng);
    let mut support: Vec<usize> = idx.into_iter().take(support_size).collect();
    support.sort_unstable();
    mixture_on(rng, atoms, support, coef_range)
}

fn mixture_on(
    rng: &mut impl Rng,
    atoms: &Matrix,
    support: Vec<usize>,
    (lo, hi): (f64, f64),
) -> SparseMixture {
    let mut vector = vec![0.0; atoms.cols()];
    let coefficients: Vec<f64> = support.iter().map(|_| rng.gen_range(lo..=hi)).collect();
    for (&j, &w) in support.iter().zip(&coefficients) {
        axpy(w, atoms.row(j), &mut vector);
    }
    SparseMixture {
        vector,
        support,
        coefficients,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConceptWorldConfig {
    pub classes: usize,
    pub concepts: usize,
    pub dim: usize,
    /// Concepts active per image.
    pub active: usize,
    /// Of those, how many come from the image's own class signature.
    pub from_class: usize,
    /// Noise norm relative to the clean signal norm.
    pub noise: f64,
    pub train: usize,
    pub test: usize,
    /// Random unit directions added to the candidate pool.
    pub distractors: usize,
    /// Pool entries that are normalized sums of two true concepts.
    pub dependent: usize,
    pub max_coherence: f64,
    pub seed: u64,
}

impl Default for ConceptWorldConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            concepts: 40,
            dim: 64,
            active: 4,
            from_class: 2,
            noise: 0.05,
            train: 2000,
            test: 500,
            distractors: 8,
            dependent: 4,
            max_coherence: 0.3,
            seed: 0,
        }
    }
}

/// Labelled synthetic dataset whose images are noisy sparse mixtures of known
/// concept embeddings. Every class owns an equal share of the concepts; each
/// image mixes `from_class` concepts of its class with concepts drawn from
/// the whole set.
#[derive(Debug, Clone)]
pub struct ConceptWorld {
    pub config: ConceptWorldConfig,
    /// True concept embeddings, unit rows.
    pub concepts: Matrix,
    /// Concepts owned by each class.
    pub class_concepts: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    /// Class prompt embeddings: normalized mean of each class's concepts.
    pub prompts: Matrix,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
    /// Candidate pool: true concepts, then distractors, then dependent sums.
    pub pool: ConceptBank,
}

impl ConceptWorld {
    pub fn generate(cfg: &ConceptWorldConfig) -> Result<Self> {
        if cfg.classes == 0 || cfg.concepts < cfg.classes || cfg.active == 0 {
            return Err(Error::config("concept world needs classes ≤ concepts and active ≥ 1"));
        }
        if cfg.from_class > cfg.active || cfg.active > cfg.concepts {
            return Err(Error::config("from_class ≤ active ≤ concepts required"));
        }
        let mut rng = rng(cfg.seed);
        let concepts = low_coherence_atoms(&mut rng, cfg.concepts, cfg.dim, cfg.max_coherence)?;

        let mut shuffled: Vec<usize> = (0..cfg.concepts).collect();
        shuffled.shuffle(&mut rng);
        let per_class = cfg.concepts / cfg.classes;
        let class_concepts: Vec<Vec<usize>> = (0..cfg.classes)
            .map(|c| {
                let mut v = shuffled[c * per_class..(c + 1) * per_class].to_vec();
                v.sort_unstable();
                v
            })
            .collect();
        let class_names = (0..cfg.classes).map(|c| alloc::format!("class-{c}")).collect();

        let mut prompts = Matrix::zeros(cfg.classes, cfg.dim);
        for (c, owned) in class_concepts.iter().enumerate() {
            for &j in owned {
                axpy(1.0, concepts.row(j), prompts.row_mut(c));
            }
        }
        crate::embedding::normalize_matrix_rows(&mut prompts)?;

        let draw = |n: usize, rng: &mut ChaCha8Rng| -> (Matrix, Vec<usize>) {
            let mut x = Matrix::zeros(n, cfg.dim);
            let mut y = Vec::with_capacity(n);
            for i in 0..n {
                let label = rng.gen_range(0..cfg.classes);
                let mut owned = class_concepts[label].clone();
                owned.shuffle(rng);
                let mut support: Vec<usize> = owned.into_iter().take(cfg.from_class).collect();
                while support.len() < cfg.active {
                    let j = rng.gen_range(0..cfg.concepts);
                    if !support.contains(&j) {
                        support.push(j);
                    }
                }
                support.sort_unstable();
                let mix = mixture_on(rng, &concepts, support, (0.5, 1.5));
                let mut v = mix.vector;
                let noise = unit_vector(rng, cfg.dim);
                axpy(cfg.noise * norm(&v), &noise, &mut v);
                let n = norm(&v);
                v.iter_mut().for_each(|e| *e /= n);
                x.row_mut(i).copy_from_slice(&v);
                y.push(label);
            }
            (x, y)
        };
        let (train_x, train_y) = draw(cfg.train, &mut rng);
        let (test_x, test_y) = draw(cfg.test, &mut rng);

        let mut pool_rows: Vec<Vec<f64>> = concepts.row_iter().map(<[f64]>::to_vec).collect();
        let mut names: Vec<String> = (0..cfg.concepts)
            .map(|j| alloc::format!("concept-{j:02}"))
            .collect();
        for k in 0..cfg.distractors {
            pool_rows.push(unit_vector(&mut rng, cfg.dim));
            names.push(alloc::format!("distractor-{k:02}"));
        }
        for k in 0..cfg.dependent {
            let a = rng.gen_range(0..cfg.concepts);
            let b = (a + 1 + rng.gen_range(0..cfg.concepts - 1)) % cfg.concepts;
            let mut v = concepts.row(a).to_vec();
            axpy(1.0, concepts.row(b), &mut v);
            let n = norm(&v);
            v.iter_mut().for_each(|e| *e /= n);
            pool_rows.push(v);
            names.push(alloc::format!("blend-{k:02}"));
        }
        let pool = ConceptBank::new(names, Matrix::from_rows(&pool_rows)?)?;

        Ok(Self {
            config: *cfg,
            concepts,
            class_concepts,
            class_names,
            prompts,
            train_x,
            train_y,
            test_x,
            test_y,
            pool,
        })
    }

    /// Rank of the candidate pool's span.
    pub fn pool_rank(&self) -> usize {
        let mut basis = crate::linalg::OrthoBasis::new(self.config.dim);
        for row in self.pool.embeddings().row_iter() {
            let _ = basis.push(row, 1e-10);
        }
        basis.len()
    }

    /// The first `n` training images, used as unlabelled probing images.
    pub fn probing(&self, n: usize) -> Matrix {
        let n = n.min(self.train_x.rows());
        let idx: Vec<usize> = (0..n).collect();
        self.train_x.select_rows(&idx)
    }
}
