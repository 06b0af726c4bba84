use alloc::string::String;
use alloc::vec::Vec;

use crate::embedding::normalize_matrix_rows;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Ordered named concepts with their text embeddings (one row each).
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    names: Vec<String>,
    embeddings: Matrix,
}

impl ConceptBank {
    pub fn new(names: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if names.len() != embeddings.rows() {
            return Err(Error::shape(alloc::format!(
                "{} concept names for {} embeddings",
                names.len(),
                embeddings.rows()
            )));
        }
        Ok(Self { names, embeddings })
    }

    /// Like [`ConceptBank::new`] but rescales every embedding to unit norm.
    pub fn normalized(names: Vec<String>, mut embeddings: Matrix) -> Result<Self> {
        normalize_matrix_rows(&mut embeddings)?;
        Self::new(names, embeddings)
    }

    /// Bank with generated names `concept-0000`, `concept-0001`, …
    pub fn unnamed(embeddings: Matrix) -> Self {
        let names = (0..embeddings.rows())
            .map(|i| alloc::format!("concept-{i:04}"))
            .collect();
        Self { names, embeddings }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, j: usize) -> &str {
        &self.names[j]
    }

    pub fn embeddings(&self) -> &Matrix {
        &self.embeddings
    }

    pub fn embedding(&self, j: usize) -> &[f64] {
        self.embeddings.row(j)
    }

    /// Sub-bank made of the given concepts, in the given order.
    pub fn subset(&self, idx: &[usize]) -> Result<ConceptBank> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::Index {
                index: bad,
                len: self.len(),
            });
        }
        Ok(ConceptBank {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            embeddings: self.embeddings.select_rows(idx),
        })
    }
}
