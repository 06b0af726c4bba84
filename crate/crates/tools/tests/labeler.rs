use std::fs;
use std::path::{Path, PathBuf};

use cbm_tools::labeler::endpoint::{sha256_hex, ChatEndpointConfig, MockTranscript, Reply};
use cbm_tools::labeler::{
    score_prompt, summarize_prompt, CandidateConcept, Labeler, SourceAtom,
};
use cbm_tools::ToolError;

const TASK: &str = "bird species";

struct Env {
    dir: tempfile::TempDir,
    transcript: MockTranscript,
}

impl Env {
    fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
            transcript: MockTranscript::default(),
        }
    }

    fn image(&mut self, name: &str, reply: Reply) -> PathBuf {
        let p = self.dir.path().join(name);
        let bytes = format!("pixels of {name}");
        fs::write(&p, &bytes).unwrap();
        self.transcript.images.insert(sha256_hex(bytes.as_bytes()), reply);
        p
    }

    fn prompt(&mut self, prompt: &str, reply: Reply) {
        self.transcript.prompts.insert(sha256_hex(prompt.as_bytes()), reply);
    }

    fn labeler(&self, cache: Option<&Path>) -> Labeler {
        let path = self.dir.path().join("transcript.json");
        self.transcript.write(&path).unwrap();
        Labeler::new(&ChatEndpointConfig::mock(path, "vlm"), cache).unwrap()
    }
}

fn cand(name: &str) -> CandidateConcept {
    CandidateConcept {
        name: name.into(),
        description: format!("{name} seen up close"),
        score: None,
        source_atom: SourceAtom::Atom(0),
        flagged: false,
    }
}

#[test]
fn mock_replies_pass_through_in_order() {
    let mut env = Env::new();
    let paths: Vec<PathBuf> = (0..6)
        .map(|i| env.image(&format!("{i}.jpg"), Reply::content(format!("  bird number {i}\n"))))
        .collect();
    let l = env.labeler(None);
    let d = l.describe_images(&paths, TASK).unwrap();
    let expect: Vec<String> = (0..6).map(|i| format!("bird number {i}")).collect();
    assert_eq!(d, expect);
    assert_eq!(l.request_count(), 6);
}

#[test]
fn warm_cache_issues_no_requests() {
    let mut env = Env::new();
    let paths = vec![
        env.image("a.jpg", Reply::content("red crest")),
        env.image("b.jpg", Reply::content("long tail")),
    ];
    let cache = env.dir.path().join("cache");
    let cold = env.labeler(Some(&cache));
    let first = cold.describe_images(&paths, TASK).unwrap();
    assert_eq!(cold.request_count(), 2);
    let warm = env.labeler(Some(&cache));
    assert_eq!(warm.describe_images(&paths, TASK).unwrap(), first);
    assert_eq!(warm.request_count(), 0);
}

#[test]
fn malformed_body_is_a_protocol_error_and_not_cached() {
    let mut env = Env::new();
    let p = env.image(
        "bad.jpg",
        Reply::Raw {
            raw: "<html>502 bad gateway</html>".into(),
        },
    );
    let cache = env.dir.path().join("cache");
    let l = env.labeler(Some(&cache));
    match l.describe_images(&[p], TASK) {
        Err(ToolError::Protocol { raw, .. }) => assert_eq!(raw, "<html>502 bad gateway</html>"),
        other => panic!("{other:?}"),
    }
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 0);
}

#[test]
fn missing_transcript_entry_is_a_transport_error() {
    let env = Env::new();
    let p = env.dir.path().join("unknown.jpg");
    fs::write(&p, "never recorded").unwrap();
    let l = env.labeler(None);
    assert!(matches!(l.describe_images(&[p], TASK), Err(ToolError::Transport(_))));
}

#[test]
fn summary_becomes_candidates() {
    let mut env = Env::new();
    let descs = vec!["a bird with a red crest".to_string(), "red crest, short beak".to_string()];
    env.prompt(
        &summarize_prompt(&descs, TASK),
        Reply::content("1. red crest: a tuft of red feathers\n2. short beak\n3. a very long rambling line that goes on and on well past twelve words in total"),
    );
    let l = env.labeler(None);
    let c = l.summarize_concept(&descs, TASK, SourceAtom::Atom(7)).unwrap();
    assert_eq!(c.len(), 2);
    assert_eq!(c[0].name, "red crest");
    assert_eq!(c[0].description, "a tuft of red feathers");
    assert_eq!(c[1].description, "");
    assert!(c.iter().all(|c| c.source_atom == SourceAtom::Atom(7) && c.score.is_none()));
    let w = l.take_warnings();
    assert_eq!(w.len(), 1);
    assert!(w[0].message.contains("12 words"));
}

#[test]
fn empty_summary_warns() {
    let mut env = Env::new();
    let descs = vec!["nothing in particular".to_string()];
    env.prompt(&summarize_prompt(&descs, TASK), Reply::content(""));
    let l = env.labeler(None);
    let c = l.summarize_concept(&descs, TASK, SourceAtom::Atom(2)).unwrap();
    assert!(c.is_empty());
    let w = l.take_warnings();
    assert_eq!(w.len(), 1);
    assert_eq!(w[0].stage, "summarize");
}

#[test]
fn unparseable_score_is_lowest_and_flagged() {
    let mut env = Env::new();
    let c = cand("red crest");
    env.prompt(&score_prompt(&c, TASK), Reply::content("ten"));
    let l = env.labeler(None);
    let s = l.score_concepts(&[c], TASK).unwrap();
    assert_eq!(s[0].score, Some(1));
    assert!(s[0].flagged);
    assert_eq!(l.take_warnings().len(), 1);
}

#[test]
fn every_candidate_gets_its_own_score() {
    let mut env = Env::new();
    let cands: Vec<CandidateConcept> = (0..40).map(|i| cand(&format!("concept {i}"))).collect();
    for (i, c) in cands.iter().enumerate() {
        env.prompt(&score_prompt(c, TASK), Reply::content(format!("{}", i % 10 + 1)));
    }
    let l = env.labeler(None);
    let scored = l.score_concepts(&cands, TASK).unwrap();
    assert_eq!(scored.len(), 40);
    assert_eq!(l.request_count(), 40);
    for (i, (s, c)) in scored.iter().zip(&cands).enumerate() {
        assert_eq!(s.name, c.name);
        assert_eq!(s.score, Some((i % 10 + 1) as u8));
        assert!(!s.flagged);
    }
}
