use alloc::string::String;
use alloc::vec::Vec;

use crate::bank::ConceptBank;
use crate::decompose::SparseCode;
use crate::error::{Error, Result};
use crate::head::LinearHead;
use crate::linalg::dot;

pub const DEFAULT_TOP_CONCEPTS: usize = 3;

pub const DEGENERATE_NOTE: &str = "reconstruction degenerate";

#[derive(Debug, Clone, PartialEq)]
pub struct Contribution {
    pub concept: usize,
    pub name: String,
    /// Concept score `w_j`.
    pub coefficient: f64,
    /// `w_j · ⟨W_y, c_j⟩` for the predicted class `y`.
    pub contribution: f64,
}

/// Why an image got its predicted class, in terms of concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub image: usize,
    pub predicted: usize,
    pub class_name: String,
    /// Logit of the predicted class.
    pub logit: f64,
    pub bias: f64,
    /// Sorted by decreasing contribution, ties by concept index.
    pub contributions: Vec<Contribution>,
    /// False when `contributions` was truncated.
    pub complete: bool,
    pub residual_norm: f64,
    pub note: Option<&'static str>,
}

impl Explanation {
    /// Bias plus every listed contribution; equals `logit` when complete.
    pub fn reconstructed_logit(&self) -> f64 {
        self.bias + self.contributions.iter().map(|c| c.contribution).sum::<f64>()
    }
}

/// Explains the prediction for one decomposed image, listing at most `top`
/// concepts.
pub fn explain(
    head: &LinearHead,
    bank: &ConceptBank,
    image: usize,
    code: &SparseCode,
    top: usize,
) -> Result<Explanation> {
    if let Some(&bad) = code.support.iter().find(|&&j| j >= bank.len()) {
        return Err(Error::Index {
            index: bad,
            len: bank.len(),
        });
    }
    let (predicted, logits) = head.predict(&code.reconstructed)?;
    let class_w = head.class_weights(predicted);
    let mut contributions: Vec<Contribution> = code
        .support
        .iter()
        .zip(&code.coefficients)
        .map(|(&j, &w)| Contribution {
            concept: j,
            name: String::from(bank.name(j)),
            coefficient: w,
            contribution: w * dot(class_w, bank.embedding(j)),
        })
        .collect();
    contributions.sort_by(|a, b| {
        b.contribution
            .total_cmp(&a.contribution)
            .then(a.concept.cmp(&b.concept))
    });
    let complete = contributions.len() <= top;
    contributions.truncate(top);
    Ok(Explanation {
        image,
        predicted,
        class_name: head.class_names()[predicted].clone(),
        logit: logits[predicted],
        bias: head.bias()[predicted],
        contributions,
        complete,
        residual_norm: code.residual_norm,
        note: code.support.is_empty().then_some(DEGENERATE_NOTE),
    })
}
