//! Linear label predictor over (reconstructed) embeddings.
//!
//! Logits are `Wᵀx + b`. When `x = Î = Σ w_j c_j`, the same logits are
//! `Σ w_j (Wᵀc_j) + b`, so the head doubles as a concept bottleneck whose
//! class-concept weights are `Wᵀ[c_1 … c_m]` ([`ConceptWeightMatrix`]).

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bank::ConceptBank;
use crate::decompose::SparseCode;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};

pub const DEFAULT_PROMPT_TEMPLATE: &str = "This is a photo of [cls]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Weights start at the normalized class-prompt embeddings.
    ZeroshotPrompt,
    Zeros,
}

impl InitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InitMode::ZeroshotPrompt => "zeroshot-prompt",
            InitMode::Zeros => "zeros",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "zeroshot-prompt" => Some(InitMode::ZeroshotPrompt),
            "zeros" => Some(InitMode::Zeros),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    /// One row per class: row `y` is column `y` of `W`.
    weights: Matrix,
    bias: Vec<f64>,
    class_names: Vec<String>,
    init_mode: InitMode,
}

impl LinearHead {
    pub fn zeros(in_dim: usize, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::config("a head needs at least one class"));
        }
        Ok(Self {
            weights: Matrix::zeros(class_names.len(), in_dim),
            bias: vec![0.0; class_names.len()],
            class_names,
            init_mode: InitMode::Zeros,
        })
    }

    /// Head whose class weights are the unit-normalized prompt embeddings
    /// (one row of `prompts` per class) and whose bias is zero.
    pub fn init_zeroshot(prompts: &Matrix, class_names: Vec<String>) -> Result<Self> {
        if class_names.is_empty() || prompts.rows() == 0 {
            return Err(Error::config("zero-shot head needs at least one class"));
        }
        if prompts.rows() != class_names.len() {
            return Err(Error::config(alloc::format!(
                "{} prompt embeddings for {} classes",
                prompts.rows(),
                class_names.len()
            )));
        }
        let mut weights = prompts.clone();
        crate::embedding::normalize_matrix_rows(&mut weights)?;
        Ok(Self {
            weights,
            bias: vec![0.0; class_names.len()],
            class_names,
            init_mode: InitMode::ZeroshotPrompt,
        })
    }

    /// Rebuilds a head from stored parts (`weights` is class-major).
    pub fn from_parts(
        weights: Matrix,
        bias: Vec<f64>,
        class_names: Vec<String>,
        init_mode: InitMode,
    ) -> Result<Self> {
        if weights.rows() != class_names.len() || bias.len() != class_names.len() {
            return Err(Error::shape(alloc::format!(
                "{} weight rows, {} biases, {} classes",
                weights.rows(),
                bias.len(),
                class_names.len()
            )));
        }
        if class_names.is_empty() {
            return Err(Error::config("a head needs at least one class"));
        }
        Ok(Self {
            weights,
            bias,
            class_names,
            init_mode,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn init_mode(&self) -> InitMode {
        self.init_mode
    }

    /// Class-major weights (`Wᵀ`).
    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn class_weights(&self, y: usize) -> &[f64] {
        self.weights.row(y)
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(x)?;
        z.iter_mut().zip(&self.bias).for_each(|(z, b)| *z += b);
        Ok(z)
    }

    /// Predicted class (lowest index on ties) and the logits.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, Vec<f64>)> {
        let z = self.logits(x)?;
        Ok((argmax(&z), z))
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<usize>> {
        x.row_iter().map(|r| self.predict(r).map(|(y, _)| y)).collect()
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        check_labels(x, labels, self.num_classes())?;
        let hits = self
            .predict_rows(x)?
            .iter()
            .zip(labels)
            .filter(|(p, y)| p == y)
            .count();
        Ok(hits as f64 / labels.len() as f64)
    }

    /// Class-concept weights `Wᵀ[c_1 … c_m]`, one row per concept.
    pub fn concept_weights(&self, bank: &ConceptBank) -> Result<ConceptWeightMatrix> {
        if bank.dim() != self.in_dim() {
            return Err(Error::shape(alloc::format!(
                "head over dimension {}, concepts of dimension {}",
                self.in_dim(),
                bank.dim()
            )));
        }
        let weights = Matrix::from_fn(bank.len(), self.num_classes(), |j, y| {
            dot(self.weights.row(y), bank.embedding(j))
        });
        Ok(ConceptWeightMatrix { weights })
    }

    /// Logits through the bottleneck: `Σ_j w_j (Wᵀc_j) + b`.
    pub fn concept_logits(&self, code: &SparseCode, cw: &ConceptWeightMatrix) -> Result<Vec<f64>> {
        if cw.num_classes() != self.num_classes() {
            return Err(Error::shape("concept weights built for another head"));
        }
        let mut z = self.bias.clone();
        for (&j, &w) in code.support.iter().zip(&code.coefficients) {
            if j >= cw.num_concepts() {
                return Err(Error::Index {
                    index: j,
                    len: cw.num_concepts(),
                });
            }
            axpy(w, cw.concept_row(j), &mut z);
        }
        Ok(z)
    }

    /// Mean softmax cross-entropy plus `weight_decay/2 · ‖W‖²`.
    pub fn loss(&self, x: &Matrix, labels: &[usize], weight_decay: f64) -> Result<f64> {
        check_labels(x, labels, self.num_classes())?;
        let mut total = 0.0;
        for (row, &y) in x.row_iter().zip(labels) {
            let z = self.logits(row)?;
            total += log_sum_exp(&z) - z[y];
        }
        Ok(total / labels.len() as f64 + 0.5 * weight_decay * self.weights.frobenius_sq())
    }

    /// Loss and its gradient with respect to the class-major weights and bias.
    pub fn loss_and_grad(
        &self,
        x: &Matrix,
        labels: &[usize],
        weight_decay: f64,
    ) -> Result<(f64, Matrix, Vec<f64>)> {
        check_labels(x, labels, self.num_classes())?;
        let rows: Vec<usize> = (0..labels.len()).collect();
        self.batch_loss_and_grad(x, labels, &rows, weight_decay)
    }

    fn batch_loss_and_grad(
        &self,
        x: &Matrix,
        labels: &[usize],
        rows: &[usize],
        weight_decay: f64,
    ) -> Result<(f64, Matrix, Vec<f64>)> {
        let c = self.num_classes();
        let mut gw = Matrix::zeros(c, self.in_dim());
        let mut gb = vec![0.0; c];
        let mut total = 0.0;
        let scale = 1.0 / rows.len() as f64;
        for &i in rows {
            let xi = x.row(i);
            let z = self.logits(xi)?;
            let lse = log_sum_exp(&z);
            total += lse - z[labels[i]];
            for k in 0..c {
                let mut g = libm::exp(z[k] - lse);
                if k == labels[i] {
                    g -= 1.0;
                }
                g *= scale;
                gb[k] += g;
                axpy(g, xi, gw.row_mut(k));
            }
        }
        if weight_decay != 0.0 {
            for (g, w) in gw.as_mut_slice().iter_mut().zip(self.weights.as_slice()) {
                *g += weight_decay * w;
            }
        }
        let loss = total * scale + 0.5 * weight_decay * self.weights.frobenius_sq();
        Ok((loss, gw, gb))
    }
}

/// Class-concept weight matrix: entry `(j, y) = ⟨W_y, c_j⟩`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptWeightMatrix {
    weights: Matrix,
}

impl ConceptWeightMatrix {
    pub fn num_concepts(&self) -> usize {
        self.weights.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.weights.cols()
    }

    pub fn get(&self, concept: usize, class: usize) -> f64 {
        self.weights[(concept, class)]
    }

    pub fn concept_row(&self, concept: usize) -> &[f64] {
        self.weights.row(concept)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.weights
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 64,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(cfg.beta1, f64::from(self.t));
        let c2 = 1.0 - libm::pow(cfg.beta2, f64::from(self.t));
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
}

/// Minimizes softmax cross-entropy with Adam on shuffled mini-batches.
///
/// Returns the trained head and the full-data loss after every epoch.
pub fn train(
    head: &LinearHead,
    x: &Matrix,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(LinearHead, Vec<f64>)> {
    if labels.is_empty() {
        return Err(Error::config("empty training set"));
    }
    check_labels(x, labels, head.num_classes())?;
    if x.cols() != head.in_dim() {
        return Err(Error::shape(alloc::format!(
            "head over dimension {}, data of dimension {}",
            head.in_dim(),
            x.cols()
        )));
    }
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) {
        return Err(Error::config("batch size and learning rate must be positive"));
    }

    let mut out = head.clone();
    let mut w_opt = Adam::new(out.weights.as_slice().len());
    let mut b_opt = Adam::new(out.bias.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, gw, gb) = out.batch_loss_and_grad(x, labels, batch, cfg.weight_decay)?;
            w_opt.step(cfg, out.weights.as_mut_slice(), gw.as_slice());
            b_opt.step(cfg, &mut out.bias, &gb);
        }
        trace.push(out.loss(x, labels, cfg.weight_decay)?);
    }
    Ok((out, trace))
}

fn check_labels(x: &Matrix, labels: &[usize], classes: usize) -> Result<()> {
    if x.rows() != labels.len() {
        return Err(Error::shape(alloc::format!(
            "{} rows but {} labels",
            x.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            index: bad,
            len: classes,
        });
    }
    Ok(())
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>())
}
