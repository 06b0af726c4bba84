//! Names dictionary atoms by prompting a chat model: describe the top
//! activating images of an atom, summarize the descriptions into candidate
//! concepts, score the candidates, and keep the high scorers.

pub mod endpoint;

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cbm_core::{Matrix, SparseDictionary};
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, ToolError};
use endpoint::{
    encode_image, parse_response, sha256_hex, ChatEndpointConfig, ChatMessage, ChatRequest,
    HttpTransport, MockTransport, Transport,
};

pub const DESCRIBE_TEMPLATE: &str = include_str!("../../prompts/describe.v1.txt");
pub const SUMMARIZE_TEMPLATE: &str = include_str!("../../prompts/summarize.v1.txt");
pub const SCORE_TEMPLATE: &str = include_str!("../../prompts/score.v1.txt");
pub const PROMPT_VERSION: &str = "v1";

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_SCORE_THRESHOLD: u8 = 6;
pub const MAX_NAME_WORDS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceAtom {
    Atom(usize),
    External,
}

impl fmt::Display for SourceAtom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceAtom::Atom(j) => write!(f, "{j}"),
            SourceAtom::External => f.write_str("external"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SourceRepr {
    Atom(usize),
    Tag(String),
}

impl Serialize for SourceAtom {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            SourceAtom::Atom(j) => SourceRepr::Atom(j),
            SourceAtom::External => SourceRepr::Tag("external".into()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SourceAtom {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match SourceRepr::deserialize(d)? {
            SourceRepr::Atom(j) => Ok(SourceAtom::Atom(j)),
            SourceRepr::Tag(t) if t == "external" => Ok(SourceAtom::External),
            SourceRepr::Tag(t) => Err(serde::de::Error::custom(format!("bad source atom {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateConcept {
    pub name: String,
    pub description: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<u8>,
    pub source_atom: SourceAtom,
    /// Set when the score could not be parsed and defaulted to 1.
    #[serde(default)]
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub stage: String,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateFile {
    #[serde(default, rename = "concept")]
    pub concepts: Vec<CandidateConcept>,
    #[serde(default, rename = "warning")]
    pub warnings: Vec<Warning>,
}

impl CandidateFile {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ToolError::storage(path, e))?;
        toml::from_str(&text).map_err(|e| ToolError::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| ToolError::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| ToolError::storage(path, e))
    }
}

fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

pub fn describe_prompt(task: &str) -> String {
    fill(DESCRIBE_TEMPLATE, &[("task", task)])
}

pub fn summarize_prompt(descriptions: &[String], task: &str) -> String {
    let listed: Vec<String> = descriptions
        .iter()
        .enumerate()
        .map(|(i, d)| format!("Image {}: {d}", i + 1))
        .collect();
    fill(
        SUMMARIZE_TEMPLATE,
        &[
            ("task", task),
            ("count", &descriptions.len().to_string()),
            ("descriptions", &listed.join("\n")),
        ],
    )
}

pub fn score_prompt(c: &CandidateConcept, task: &str) -> String {
    fill(
        SCORE_TEMPLATE,
        &[
            ("task", task),
            ("concept", &c.name),
            ("description", &c.description),
        ],
    )
}

/// Parses a numbered or bulleted list into `(name, description)` pairs.
/// Returns the pairs plus the lines rejected as names.
pub fn parse_candidate_list(text: &str) -> (Vec<(String, String)>, Vec<String>) {
    let mut out = Vec::new();
    let mut rejected = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let body = line
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['.', ')', '-', '*', '•'])
            .trim();
        if body.is_empty() {
            continue;
        }
        let (name, description) = match body.split_once(':') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (body, ""),
        };
        let words = name.split_whitespace().count();
        if words == 0 || words > MAX_NAME_WORDS {
            rejected.push(line.to_string());
            continue;
        }
        out.push((name.to_string(), description.to_string()));
    }
    (out, rejected)
}

/// An integer in 1–10, optionally followed by a period.
pub fn parse_score(text: &str) -> Option<u8> {
    let t = text.trim().trim_end_matches('.');
    t.parse::<u8>().ok().filter(|s| (1..=10).contains(s))
}

/// Keeps candidates scoring at least `threshold`, dropping later
/// case-insensitive duplicates. Unscored candidates never pass.
pub fn filter_candidates(candidates: &[CandidateConcept], threshold: u8) -> Vec<CandidateConcept> {
    let mut seen = HashSet::new();
    candidates
        .iter()
        .filter(|c| c.score.is_some_and(|s| s >= threshold))
        .filter(|c| seen.insert(c.name.to_lowercase()))
        .cloned()
        .collect()
}

/// Description cache on disk, one file per key. Writes go through a
/// temporary file and a rename under a lock.
pub struct DescriptionCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

impl DescriptionCache {
    pub fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| ToolError::storage(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            write_lock: Mutex::new(()),
        })
    }

    pub fn key(model: &str, image_hash: &str, prompt_hash: &str) -> String {
        sha256_hex(format!("{model}\n{image_hash}\n{prompt_hash}").as_bytes())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        fs::read_to_string(self.dir.join(format!("{key}.txt"))).ok()
    }

    pub fn put(&self, key: &str, value: &str) -> Result<()> {
        let _guard = self.write_lock.lock().expect("cache lock");
        let tmp = self.dir.join(format!("{key}.tmp"));
        let dst = self.dir.join(format!("{key}.txt"));
        fs::write(&tmp, value).map_err(|e| ToolError::storage(&tmp, e))?;
        fs::rename(&tmp, &dst).map_err(|e| ToolError::storage(&dst, e))
    }
}

pub struct Labeler {
    model: String,
    mock: bool,
    transport: Box<dyn Transport>,
    cache: Option<DescriptionCache>,
    requests: AtomicUsize,
    warnings: Mutex<Vec<Warning>>,
    pool: rayon::ThreadPool,
}

impl Labeler {
    pub fn new(cfg: &ChatEndpointConfig, cache_dir: Option<&Path>) -> Result<Self> {
        cfg.validate()?;
        let transport: Box<dyn Transport> = match &cfg.mock_transcript {
            Some(p) => Box::new(MockTransport::open(p)?),
            None => Box::new(HttpTransport::new(cfg)?),
        };
        Self::with_transport(cfg, transport, cache_dir)
    }

    pub fn with_transport(
        cfg: &ChatEndpointConfig,
        transport: Box<dyn Transport>,
        cache_dir: Option<&Path>,
    ) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.max_in_flight.max(1))
            .build()
            .map_err(|e| ToolError::Config(e.to_string()))?;
        Ok(Self {
            model: cfg.model.clone(),
            mock: cfg.is_mock(),
            transport,
            cache: cache_dir.map(DescriptionCache::open).transpose()?,
            requests: AtomicUsize::new(0),
            warnings: Mutex::new(Vec::new()),
            pool,
        })
    }

    /// Endpoint requests issued so far.
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn take_warnings(&self) -> Vec<Warning> {
        std::mem::take(&mut *self.warnings.lock().expect("warning lock"))
    }

    fn warn(&self, stage: &str, message: String) {
        log::warn!("{stage}: {message}");
        self.warnings.lock().expect("warning lock").push(Warning {
            stage: stage.into(),
            message,
        });
    }

    fn ask(&self, messages: Vec<ChatMessage>) -> Result<String> {
        let req = ChatRequest {
            model: self.model.clone(),
            messages,
        };
        self.requests.fetch_add(1, Ordering::SeqCst);
        let raw = self.transport.send(&req)?;
        match parse_response(&raw) {
            Ok(r) => Ok(r.content),
            Err(e) => {
                log::error!("malformed response payload: {raw}");
                Err(e)
            }
        }
    }

    fn ask_text(&self, prompt: String) -> Result<String> {
        self.ask(vec![ChatMessage {
            role: "user".into(),
            content: prompt,
            image: None,
        }])
    }

    /// One description per image, in input order.
    pub fn describe_images(&self, images: &[PathBuf], task: &str) -> Result<Vec<String>> {
        let prompt = describe_prompt(task);
        let prompt_hash = sha256_hex(prompt.as_bytes());
        self.pool.install(|| {
            images
                .par_iter()
                .map(|path| {
                    let bytes = fs::read(path).map_err(|e| ToolError::storage(path, e))?;
                    let key = DescriptionCache::key(&self.model, &sha256_hex(&bytes), &prompt_hash);
                    if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
                        return Ok(hit);
                    }
                    let image = if self.mock {
                        path.display().to_string()
                    } else {
                        encode_image(path)?
                    };
                    let text = self.ask(vec![ChatMessage {
                        role: "user".into(),
                        content: prompt.clone(),
                        image: Some(image),
                    }])?;
                    let text = text.trim().to_string();
                    if let Some(c) = &self.cache {
                        c.put(&key, &text)?;
                    }
                    Ok(text)
                })
                .collect()
        })
    }

    /// Candidate concepts (unscored) from a set of image descriptions.
    pub fn summarize_concept(
        &self,
        descriptions: &[String],
        task: &str,
        source: SourceAtom,
    ) -> Result<Vec<CandidateConcept>> {
        if descriptions.is_empty() {
            return Err(ToolError::Config("nothing to summarize".into()));
        }
        let reply = self.ask_text(summarize_prompt(descriptions, task))?;
        let (pairs, rejected) = parse_candidate_list(&reply);
        for line in rejected {
            self.warn(
                "summarize",
                format!("atom {source}: not a concept name (over {MAX_NAME_WORDS} words): {line:?}"),
            );
        }
        if pairs.is_empty() {
            self.warn("summarize", format!("atom {source}: no candidates in response"));
        }
        Ok(pairs
            .into_iter()
            .map(|(name, description)| CandidateConcept {
                name,
                description,
                score: None,
                source_atom: source,
                flagged: false,
            })
            .collect())
    }

    /// Attaches a 1–10 score to every candidate, in input order.
    pub fn score_concepts(
        &self,
        candidates: &[CandidateConcept],
        task: &str,
    ) -> Result<Vec<CandidateConcept>> {
        if candidates.is_empty() {
            return Err(ToolError::Config("no candidates to score".into()));
        }
        let replies: Vec<String> = self.pool.install(|| {
            candidates
                .par_iter()
                .map(|c| self.ask_text(score_prompt(c, task)))
                .collect::<Result<_>>()
        })?;
        Ok(candidates
            .iter()
            .zip(replies)
            .map(|(c, reply)| {
                let mut c = c.clone();
                match parse_score(&reply) {
                    Some(s) => c.score = Some(s),
                    None => {
                        self.warn("score", format!("{:?}: unparseable score {reply:?}", c.name));
                        c.score = Some(1);
                        c.flagged = true;
                    }
                }
                c
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelOutcome {
    /// Every scored candidate, atom by atom.
    pub scored: Vec<CandidateConcept>,
    /// Survivors of the score filter.
    pub kept: Vec<CandidateConcept>,
    pub warnings: Vec<Warning>,
}

/// Runs describe, summarize, score and filter for every atom of `dict`.
/// `image_paths[i]` is the image behind row `i` of `images`.
pub fn label_atoms(
    labeler: &Labeler,
    dict: &SparseDictionary,
    images: &Matrix,
    image_paths: &[PathBuf],
    task: &str,
    top_k: usize,
    threshold: u8,
) -> Result<LabelOutcome> {
    if image_paths.len() != images.rows() {
        return Err(ToolError::Config(format!(
            "{} image paths for {} embeddings",
            image_paths.len(),
            images.rows()
        )));
    }
    if !(1..=10).contains(&threshold) {
        return Err(ToolError::Config("score threshold must be in 1..=10".into()));
    }
    let k = top_k.min(images.rows());
    let mut candidates = Vec::new();
    for atom in 0..dict.atoms() {
        let top = dict.top_activating_images(images, atom, k)?;
        let paths: Vec<PathBuf> = top.iter().map(|&i| image_paths[i].clone()).collect();
        let descriptions = labeler.describe_images(&paths, task)?;
        candidates.extend(labeler.summarize_concept(&descriptions, task, SourceAtom::Atom(atom))?);
    }
    let scored = if candidates.is_empty() {
        Vec::new()
    } else {
        labeler.score_concepts(&candidates, task)?
    };
    let kept = filter_candidates(&scored, threshold);
    Ok(LabelOutcome {
        scored,
        kept,
        warnings: labeler.take_warnings(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(name: &str, score: u8) -> CandidateConcept {
        CandidateConcept {
            name: name.into(),
            description: String::new(),
            score: Some(score),
            source_atom: SourceAtom::External,
            flagged: false,
        }
    }

    #[test]
    fn threshold_and_dedup() {
        let c = [cand("a", 9), cand("b", 2), cand("c", 7)];
        let kept: Vec<String> = filter_candidates(&c, 5).into_iter().map(|c| c.name).collect();
        assert_eq!(kept, ["a", "c"]);
        let d = [cand("Red Beak", 8), cand("red beak", 9), cand("x", 1)];
        let kept = filter_candidates(&d, 1);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].name, "Red Beak");
    }

    #[test]
    fn list_parsing() {
        let (p, _) = parse_candidate_list("1. striped wings\n2. hooked beak");
        assert_eq!(p, [("striped wings".into(), String::new()), ("hooked beak".into(), String::new())]);
        let (p, _) = parse_candidate_list("- red crest: a bright red tuft on the head\n\n");
        assert_eq!(p, [("red crest".into(), "a bright red tuft on the head".into())]);
        assert!(parse_candidate_list("").0.is_empty());
        let long = "1. a b c d e f g h i j k l m";
        let (p, rejected) = parse_candidate_list(long);
        assert!(p.is_empty());
        assert_eq!(rejected.len(), 1);
    }

    #[test]
    fn score_parsing() {
        assert_eq!(parse_score(" 9\n"), Some(9));
        assert_eq!(parse_score("10."), Some(10));
        assert_eq!(parse_score("ten"), None);
        assert_eq!(parse_score("0"), None);
        assert_eq!(parse_score("11"), None);
    }

    #[test]
    fn prompts_carry_inputs() {
        let d: Vec<String> = ["red rounded petals", "yellow center", "long green stem"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = summarize_prompt(&d, "flowers");
        for s in &d {
            assert!(p.contains(s.as_str()));
        }
        assert!(p.contains("flowers"));
        assert!(!p.contains('{'));
        let s = score_prompt(&cand("striped wings", 1), "birds");
        assert!(s.contains("visually identifiable, discriminatory, and free of shortcuts"));
        assert!(s.contains("background"));
    }

    #[test]
    fn candidate_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        let mut a = cand("striped wings", 9);
        a.source_atom = SourceAtom::Atom(3);
        let f = CandidateFile {
            concepts: vec![a, cand("x", 2)],
            warnings: vec![Warning {
                stage: "score".into(),
                message: "m".into(),
            }],
        };
        f.write(&p).unwrap();
        assert_eq!(CandidateFile::read(&p).unwrap(), f);
    }
}
