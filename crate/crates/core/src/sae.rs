//! Sparse autoencoder over image embeddings.
//!
//! `u = relu(Wₑ I + bₑ)` and `I ≈ V u`, trained by minibatch SGD on
//! `mean ‖I − V u‖² + λ ‖u‖₁`. Each decoder atom (column of `V`, stored here
//! as a row) is a candidate concept direction.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};

/// Activations below this count as inactive when reporting sparsity.
pub const INACTIVE_THRESHOLD: f64 = 1e-4;

/// `8·d / max(1, d/64)`: 256 atoms for small `d`, 512 at `d = 768`.
pub fn default_atoms(dim: usize) -> usize {
    (8 * dim / (dim / 64).max(1)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaeConfig {
    /// Number of atoms `k`.
    pub atoms: usize,
    /// Sparsity penalty `λ`.
    pub l1_penalty: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of epochs after which the step size drops tenfold.
    pub decay_at: f64,
    pub seed: u64,
}

impl SaeConfig {
    pub fn for_dim(dim: usize) -> Self {
        Self {
            atoms: default_atoms(dim),
            ..Self::default()
        }
    }
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            atoms: 256,
            l1_penalty: 0.1,
            epochs: 50,
            learning_rate: 0.05,
            batch_size: 32,
            decay_at: 0.8,
            seed: 0,
        }
    }
}

/// Full-data losses after one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    /// Mean `‖I − V u‖²`.
    pub reconstruction: f64,
    /// Mean `‖u‖₁`.
    pub l1: f64,
    /// `reconstruction + λ · l1`
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub values: Vec<f64>,
}

impl ActivationVector {
    /// Fraction of entries below [`INACTIVE_THRESHOLD`].
    pub fn sparsity(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        let inactive = self.values.iter().filter(|&&v| v < INACTIVE_THRESHOLD).count();
        inactive as f64 / self.values.len() as f64
    }

    pub fn l1(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Gradient of the training objective, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SaeGradient {
    pub decoder: Matrix,
    pub encoder_weights: Matrix,
    pub encoder_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseDictionary {
    /// `k × d`, one unit-norm atom per row.
    decoder: Matrix,
    /// `k × d`
    encoder_weights: Matrix,
    encoder_bias: Vec<f64>,
    l1_penalty: f64,
    trace: Vec<EpochLoss>,
}

impl SparseDictionary {
    pub fn from_parts(
        decoder: Matrix,
        encoder_weights: Matrix,
        encoder_bias: Vec<f64>,
        l1_penalty: f64,
        trace: Vec<EpochLoss>,
    ) -> Result<Self> {
        let (k, d) = (decoder.rows(), decoder.cols());
        if k == 0 || d == 0 {
            return Err(Error::config("dictionary needs k ≥ 1 and d ≥ 1"));
        }
        if encoder_weights.rows() != k || encoder_weights.cols() != d || encoder_bias.len() != k {
            return Err(Error::shape(alloc::format!(
                "decoder {k}x{d}, encoder {}x{}, bias {}",
                encoder_weights.rows(),
                encoder_weights.cols(),
                encoder_bias.len()
            )));
        }
        if !(l1_penalty >= 0.0) {
            return Err(Error::config("sparsity penalty must be non-negative"));
        }
        Ok(Self {
            decoder,
            encoder_weights,
            encoder_bias,
            l1_penalty,
            trace,
        })
    }

    pub fn atoms(&self) -> usize {
        self.decoder.rows()
    }

    pub fn dim(&self) -> usize {
        self.decoder.cols()
    }

    /// Decoder atoms, one per row.
    pub fn decoder(&self) -> &Matrix {
        &self.decoder
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        self.decoder.row(j)
    }

    pub fn encoder_weights(&self) -> &Matrix {
        &self.encoder_weights
    }

    pub fn encoder_bias(&self) -> &[f64] {
        &self.encoder_bias
    }

    pub fn l1_penalty(&self) -> f64 {
        self.l1_penalty
    }

    pub fn trace(&self) -> &[EpochLoss] {
        &self.trace
    }

    pub fn encode(&self, image: &[f64]) -> Result<ActivationVector> {
        if image.len() != self.dim() {
            return Err(Error::shape(alloc::format!(
                "image of dimension {} against a dictionary of dimension {}",
                image.len(),
                self.dim()
            )));
        }
        Ok(ActivationVector {
            values: self.activations(image),
        })
    }

    fn activations(&self, image: &[f64]) -> Vec<f64> {
        self.encoder_weights
            .row_iter()
            .zip(&self.encoder_bias)
            .map(|(w, b)| (dot(w, image) + b).max(0.0))
            .collect()
    }

    /// `V u`
    pub fn reconstruct(&self, u: &ActivationVector) -> Result<Vec<f64>> {
        if u.values.len() != self.atoms() {
            return Err(Error::shape("activation length differs from atom count"));
        }
        Ok(self.decode(&u.values))
    }

    fn decode(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (j, &uj) in u.iter().enumerate() {
            if uj != 0.0 {
                axpy(uj, self.decoder.row(j), &mut out);
            }
        }
        out
    }

    /// Indices of the `count` images with the largest activation of `atom`,
    /// largest first, lower index first on ties.
    pub fn top_activating_images(&self, images: &Matrix, atom: usize, count: usize) -> Result<Vec<usize>> {
        if atom >= self.atoms() {
            return Err(Error::Index {
                index: atom,
                len: self.atoms(),
            });
        }
        if images.cols() != self.dim() {
            return Err(Error::shape("images and dictionary differ in dimension"));
        }
        let w = self.encoder_weights.row(atom);
        let b = self.encoder_bias[atom];
        let acts: Vec<f64> = images.row_iter().map(|r| (dot(w, r) + b).max(0.0)).collect();
        rank_by_activation(&acts, count)
    }

    /// Mean losses over the rows of `x`.
    pub fn evaluate(&self, x: &Matrix) -> EpochLoss {
        let mut rec = 0.0;
        let mut l1 = 0.0;
        for row in x.row_iter() {
            let u = self.activations(row);
            let r = self.decode(&u);
            rec += row.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            l1 += u.iter().sum::<f64>();
        }
        let n = x.rows().max(1) as f64;
        let (rec, l1) = (rec / n, l1 / n);
        EpochLoss {
            reconstruction: rec,
            l1,
            total: rec + self.l1_penalty * l1,
        }
    }

    /// Objective and gradient averaged over the given rows of `x`.
    pub fn objective_and_gradient(&self, x: &Matrix, rows: &[usize]) -> (f64, SaeGradient) {
        let (k, d) = (self.atoms(), self.dim());
        let mut g = SaeGradient {
            decoder: Matrix::zeros(k, d),
            encoder_weights: Matrix::zeros(k, d),
            encoder_bias: vec![0.0; k],
        };
        let scale = 1.0 / rows.len().max(1) as f64;
        let mut total = 0.0;
        let mut residual = vec![0.0; d];
        for &i in rows {
            let xi = x.row(i);
            let u = self.activations(xi);
            let recon = self.decode(&u);
            for ((r, a), b) in residual.iter_mut().zip(&recon).zip(xi) {
                *r = a - b;
            }
            total += dot(&residual, &residual) + self.l1_penalty * u.iter().sum::<f64>();
            for j in 0..k {
                if u[j] <= 0.0 {
                    // Inactive: no gradient through relu, and the decoder row is unused.
                    continue;
                }
                axpy(2.0 * u[j] * scale, &residual, g.decoder.row_mut(j));
                let g_pre = (2.0 * dot(self.decoder.row(j), &residual) + self.l1_penalty) * scale;
                axpy(g_pre, xi, g.encoder_weights.row_mut(j));
                g.encoder_bias[j] += g_pre;
            }
        }
        (total * scale, g)
    }

    // Scales the encoder by the `α` minimizing `Σ‖x − α V relu(W x)‖²`, so
    // a tied initialization does not start far off in scale.
    fn rescale_encoder(&mut self, x: &Matrix) {
        let (mut num, mut den) = (0.0, 0.0);
        for row in x.row_iter() {
            let r = self.decode(&self.activations(row));
            num += dot(row, &r);
            den += dot(&r, &r);
        }
        if den > 0.0 && num > 0.0 {
            let alpha = num / den;
            self.encoder_weights.as_mut_slice().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    fn sgd_step(&mut self, g: &SaeGradient, lr: f64) {
        axpy(-lr, g.decoder.as_slice(), self.decoder.as_mut_slice());
        axpy(-lr, g.encoder_weights.as_slice(), self.encoder_weights.as_mut_slice());
        axpy(-lr, &g.encoder_bias, &mut self.encoder_bias);
    }

    /// Rescales atoms to unit norm and the matching encoder rows by the
    /// inverse factor, which leaves `V u` unchanged.
    fn renormalize(&mut self) {
        for j in 0..self.atoms() {
            let s = norm(self.decoder.row(j));
            if s == 0.0 || !s.is_finite() {
                continue;
            }
            self.decoder.row_mut(j).iter_mut().for_each(|v| *v /= s);
            self.encoder_weights.row_mut(j).iter_mut().for_each(|v| *v *= s);
            self.encoder_bias[j] *= s;
        }
    }
}

/// Sorts indices by decreasing activation (ties by lower index) and keeps `count`.
pub fn rank_by_activation(acts: &[f64], count: usize) -> Result<Vec<usize>> {
    if count > acts.len() {
        return Err(Error::config(alloc::format!(
            "asked for {count} images out of {}",
            acts.len()
        )));
    }
    let mut idx: Vec<usize> = (0..acts.len()).collect();
    idx.sort_by(|&a, &b| acts[b].total_cmp(&acts[a]).then(a.cmp(&b)));
    idx.truncate(count);
    Ok(idx)
}

/// Trains a dictionary on the rows of `images`. Deterministic for a fixed
/// configuration.
pub fn train_dictionary(images: &Matrix, cfg: &SaeConfig) -> Result<SparseDictionary> {
    let (n, d) = (images.rows(), images.cols());
    if n == 0 || d == 0 {
        return Err(Error::config("cannot train a dictionary on no images"));
    }
    if cfg.atoms == 0 {
        return Err(Error::config("dictionary needs at least one atom"));
    }
    if !(cfg.l1_penalty >= 0.0) || !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::config(
            "penalty must be non-negative, learning rate and batch size positive",
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let decoder = init_atoms(images, cfg.atoms, &mut rng);
    let mut dict = SparseDictionary {
        encoder_weights: decoder.clone(),
        encoder_bias: vec![0.0; cfg.atoms],
        decoder,
        l1_penalty: cfg.l1_penalty,
        trace: Vec::with_capacity(cfg.epochs),
    };
    dict.rescale_encoder(images);

    let decay_epoch = libm::ceil(cfg.decay_at * cfg.epochs as f64) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let lr = if epoch < decay_epoch {
            cfg.learning_rate
        } else {
            cfg.learning_rate * 0.1
        };
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, g) = dict.objective_and_gradient(images, batch);
            dict.sgd_step(&g, lr);
        }
        dict.renormalize();
        let loss = dict.evaluate(images);
        dict.trace.push(loss);
    }
    if cfg.epochs == 0 {
        dict.renormalize();
    }
    Ok(dict)
}

// Atoms start at distinct normalized data rows (random directions once the
// data runs out).
fn init_atoms(images: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    use rand_distr::{Distribution, StandardNormal};

    let (n, d) = (images.rows(), images.cols());
    let mut rows: Vec<usize> = (0..n).collect();
    rows.shuffle(rng);
    let mut atoms = Matrix::zeros(k, d);
    let mut next = rows.into_iter().filter(|&r| norm(images.row(r)) > 0.0);
    for j in 0..k {
        let row = atoms.row_mut(j);
        match next.next() {
            Some(r) => row.copy_from_slice(images.row(r)),
            None => row
                .iter_mut()
                .for_each(|v| *v = StandardNormal.sample(&mut *rng)),
        }
        let s = norm(row);
        row.iter_mut().for_each(|v| *v /= s);
    }
    atoms
}
