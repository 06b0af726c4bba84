//! Dataset manifests and label files.

use std::fs;
use std::path::{Path, PathBuf};

use cbm_core::Matrix;
use serde::{Deserialize, Serialize};

use crate::emb::load_embeddings;
use crate::error::{Result, ToolError};

/// A TOML manifest. Relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: Vec<String>,
    pub split: Option<String>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
        let mut m: DatasetManifest =
            toml::from_str(&text).map_err(|e| ToolError::parse(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        m.embeddings = base.join(&m.embeddings);
        m.labels = base.join(&m.labels);
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| ToolError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| ToolError::storage(path, e))
    }

    /// Loads and normalizes the embeddings and checks the labels against them.
    pub fn load(&self) -> Result<Dataset> {
        if self.classes.is_empty() {
            return Err(ToolError::Manifest("class list is empty".into()));
        }
        let x = load_embeddings(&self.embeddings)?;
        let labels = read_labels(&self.labels)?;
        validate_labels(&labels, x.rows(), self.classes.len())?;
        Ok(Dataset {
            x,
            labels,
            classes: self.classes.clone(),
            split: self.split.clone(),
        })
    }
}

pub fn validate_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(ToolError::Manifest(format!(
            "{} labels for {rows} embeddings",
            labels.len()
        )));
    }
    if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= classes) {
        return Err(ToolError::Manifest(format!(
            "label {y} at line {} is outside the {classes} classes",
            i + 1
        )));
    }
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|_| ToolError::parse(path, format!("line {}: not a class id: {l:?}", i + 1)))
        })
        .collect()
}

pub fn write_labels(labels: &[usize], path: &Path) -> Result<()> {
    let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
    fs::write(path, text).map_err(|e| ToolError::storage(path, e))
}

/// One name per line; blank lines are skipped.
pub fn read_names(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

pub fn write_names(names: &[String], path: &Path) -> Result<()> {
    let text: String = names.iter().map(|n| format!("{n}\n")).collect();
    fs::write(path, text).map_err(|e| ToolError::storage(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_range_checked() {
        assert!(validate_labels(&[0, 1, 2], 3, 3).is_ok());
        let err = validate_labels(&[0, 3], 2, 3).unwrap_err().to_string();
        assert!(err.contains("label 3 at line 2"), "{err}");
        assert!(validate_labels(&[0], 2, 3).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            embeddings: "x.emb".into(),
            labels: "y.txt".into(),
            classes: vec!["cat".into(), "dog".into()],
            split: Some("train".into()),
        };
        let p = dir.path().join("train.toml");
        m.write(&p).unwrap();
        let back = DatasetManifest::read(&p).unwrap();
        assert_eq!(back.embeddings, dir.path().join("x.emb"));
        assert_eq!(back.classes, m.classes);
    }

    #[test]
    fn labels_parse() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("y.txt");
        write_labels(&[2, 0, 1], &p).unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![2, 0, 1]);
        fs::write(&p, "1\nx\n").unwrap();
        assert!(read_labels(&p).is_err());
    }
}
