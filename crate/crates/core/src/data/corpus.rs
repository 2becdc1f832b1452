use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use serde::Deserialize;

use super::tokenizer::{tokenize, Token, BOS, VOCAB_SIZE};
use crate::error::{DogeError, Result};

/// Directory (or JSONL domain label) holding the out-of-domain target.
pub const OOD_DIR: &str = "_ood";

/// Selects a training domain or the out-of-domain target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DomainId {
    Train(usize),
    Ood,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub name: String,
    pub sequences: Vec<Vec<Token>>,
}

impl Domain {
    pub fn token_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Tokenized sequences split into named training domains plus an optional
/// out-of-domain target. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainCorpus {
    domains: Vec<Domain>,
    ood: Option<Domain>,
    context: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IngestStats {
    pub files_read: usize,
    pub files_skipped: usize,
    pub remainders_dropped: usize,
}

impl DomainCorpus {
    pub fn new(domains: Vec<Domain>, ood: Option<Domain>, context: usize) -> Result<Self> {
        if domains.is_empty() {
            return Err(DogeError::data("corpus has no training domains"));
        }
        if context < 2 {
            return Err(DogeError::data(format!("context length {context} < 2")));
        }
        let mut seen = std::collections::HashSet::new();
        for d in domains.iter().chain(ood.as_ref()) {
            if !seen.insert(d.name.as_str()) {
                return Err(DogeError::data(format!("duplicate domain name '{}'", d.name)));
            }
            if d.sequences.is_empty() {
                return Err(DogeError::data(format!("domain '{}' is empty", d.name)));
            }
            for s in &d.sequences {
                if s.is_empty() || s.len() > context {
                    return Err(DogeError::data(format!(
                        "domain '{}' has a sequence of length {} (context {context})",
                        d.name,
                        s.len()
                    )));
                }
                if let Some(&t) = s.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
                    return Err(DogeError::data(format!("domain '{}': token {t} out of range", d.name)));
                }
            }
        }
        Ok(DomainCorpus { domains, ood, context })
    }

    /// Reads one subdirectory per domain (lexicographic order) and an optional
    /// `_ood/` target. Files that are not valid UTF-8 are skipped.
    pub fn ingest_dir(root: &Path, context: usize) -> Result<(Self, IngestStats)> {
        let mut stats = IngestStats::default();
        let mut dirs: Vec<_> = fs::read_dir(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
            .collect();
        dirs.sort();
        let mut domains = Vec::new();
        let mut ood = None;
        for (name, path) in dirs {
            let mut files: Vec<_> = fs::read_dir(&path)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let mut sequences = Vec::new();
            for file in files {
                let bytes = fs::read(&file)?;
                if std::str::from_utf8(&bytes).is_err() {
                    warn!("skipping {}: not valid UTF-8", file.display());
                    stats.files_skipped += 1;
                    continue;
                }
                stats.files_read += 1;
                stats.remainders_dropped += chunk_text(&bytes, context, &mut sequences);
            }
            if sequences.is_empty() {
                return Err(DogeError::data(format!("domain '{name}' produced no sequences")));
            }
            let domain = Domain { name, sequences };
            if domain.name == OOD_DIR {
                ood = Some(domain);
            } else {
                domains.push(domain);
            }
        }
        Ok((DomainCorpus::new(domains, ood, context)?, stats))
    }

    /// Reads `{"domain": .., "text": ..}` records. Domains are ordered by
    /// name; the label `_ood` marks the target domain.
    pub fn ingest_jsonl(path: &Path, context: usize) -> Result<(Self, IngestStats)> {
        #[derive(Deserialize)]
        struct Record {
            domain: String,
            text: String,
        }
        let mut stats = IngestStats::default();
        let mut by_name: BTreeMap<String, Vec<Vec<Token>>> = BTreeMap::new();
        let reader = BufReader::new(fs::File::open(path)?);
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)
                .map_err(|e| DogeError::format(path, format!("line {}: {e}", lineno + 1)))?;
            stats.files_read += 1;
            let seqs = by_name.entry(rec.domain).or_default();
            stats.remainders_dropped += chunk_text(rec.text.as_bytes(), context, seqs);
        }
        let mut domains = Vec::new();
        let mut ood = None;
        for (name, sequences) in by_name {
            if sequences.is_empty() {
                return Err(DogeError::data(format!("domain '{name}' produced no sequences")));
            }
            let d = Domain { name, sequences };
            if d.name == OOD_DIR {
                ood = Some(d);
            } else {
                domains.push(d);
            }
        }
        Ok((DomainCorpus::new(domains, ood, context)?, stats))
    }

    pub fn k(&self) -> usize {
        self.domains.len()
    }

    pub fn context(&self) -> usize {
        self.context
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn ood(&self) -> Option<&Domain> {
        self.ood.as_ref()
    }

    pub fn names(&self) -> Vec<String> {
        self.domains.iter().map(|d| d.name.clone()).collect()
    }

    pub fn domain(&self, id: DomainId) -> Result<&Domain> {
        match id {
            DomainId::Train(i) => self.domains.get(i).ok_or_else(|| {
                DogeError::contract(format!("domain {i} requested, corpus has {}", self.k()))
            }),
            DomainId::Ood => self
                .ood
                .as_ref()
                .ok_or_else(|| DogeError::contract("corpus has no out-of-domain target")),
        }
    }

    /// Deterministic held-out split: every `every`-th sequence (index
    /// `every-1`, `2*every-1`, ...) of each domain goes to validation.
    /// Domains too small to spare a sequence keep it in both halves.
    pub fn split_holdout(&self, every: usize) -> Result<(Self, Self)> {
        if every < 2 {
            return Err(DogeError::contract("holdout stride must be at least 2"));
        }
        let split = |d: &Domain| {
            let (mut train, mut valid) = (Vec::new(), Vec::new());
            for (i, s) in d.sequences.iter().enumerate() {
                if i % every == every - 1 {
                    valid.push(s.clone());
                } else {
                    train.push(s.clone());
                }
            }
            if valid.is_empty() {
                valid.push(d.sequences[d.sequences.len() - 1].clone());
            }
            (
                Domain {
                    name: d.name.clone(),
                    sequences: train,
                },
                Domain {
                    name: d.name.clone(),
                    sequences: valid,
                },
            )
        };
        let (train, valid): (Vec<_>, Vec<_>) = self.domains.iter().map(split).unzip();
        let (ood_train, ood_valid) = match &self.ood {
            Some(d) => {
                let (t, v) = split(d);
                (Some(t), Some(v))
            }
            None => (None, None),
        };
        Ok((
            DomainCorpus::new(train, ood_train, self.context)?,
            DomainCorpus::new(valid, ood_valid, self.context)?,
        ))
    }

    /// Copy without the out-of-domain target.
    pub fn without_ood(&self) -> Self {
        DomainCorpus {
            domains: self.domains.clone(),
            ood: None,
            context: self.context,
        }
    }
}

/// Splits `bytes` into BOS-prefixed sequences of at most `context` tokens.
/// A trailing chunk shorter than half the context is dropped; returns the
/// number dropped (0 or 1).
fn chunk_text(bytes: &[u8], context: usize, out: &mut Vec<Vec<Token>>) -> usize {
    let body = context - 1;
    let mut dropped = 0;
    for chunk in bytes.chunks(body) {
        let len = chunk.len() + 1;
        if chunk.len() < body && len * 2 < context {
            dropped += 1;
            continue;
        }
        let mut seq = Vec::with_capacity(len);
        seq.push(BOS);
        seq.extend(tokenize(chunk));
        out.push(seq);
    }
    dropped
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, rel: &str, bytes: &[u8]) {
        let p = dir.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, bytes).unwrap();
    }

    #[test]
    fn chunking_counts() {
        // 127 bytes, context 64: chunks of 63 bytes -> 63, 63, 1; the 1-byte
        // remainder (2 tokens) is under half the context and dropped.
        let mut out = Vec::new();
        assert_eq!(chunk_text(&[b'x'; 127], 64, &mut out), 1);
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(|s| s.len() == 64 && s[0] == BOS));

        // 100 bytes -> 63 + 37; 38 tokens >= 32 so the remainder is kept.
        let mut out = Vec::new();
        assert_eq!(chunk_text(&[b'x'; 100], 64, &mut out), 0);
        assert_eq!(out.iter().map(Vec::len).collect::<Vec<_>>(), vec![64, 38]);
    }

    #[test]
    fn ingest_two_domains_in_lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "web/a.txt", &[b'w'; 127]);
        write(dir.path(), "code/a.txt", &[b'c'; 127]);
        let (corpus, stats) = DomainCorpus::ingest_dir(dir.path(), 64).unwrap();
        assert_eq!(corpus.names(), vec!["code", "web"]);
        assert!(corpus.ood().is_none());
        assert_eq!(corpus.domains()[0].sequences.len(), 2);
        assert_eq!(corpus.domains()[1].sequences.len(), 2);
        assert_eq!(stats.files_read, 2);
        assert_eq!(stats.remainders_dropped, 2);
        assert_eq!(corpus.domains()[0].sequences[0][1], u32::from(b'c'));
    }

    #[test]
    fn ood_directory_becomes_target() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a/x.txt", &[b'a'; 40]);
        write(dir.path(), "b/x.txt", &[b'b'; 40]);
        write(dir.path(), "_ood/x.txt", &[b'o'; 40]);
        let (corpus, _) = DomainCorpus::ingest_dir(dir.path(), 32).unwrap();
        assert_eq!(corpus.k(), 2);
        assert_eq!(corpus.ood().unwrap().name, OOD_DIR);
    }

    #[test]
    fn empty_domain_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a/x.txt", &[b'a'; 40]);
        fs::create_dir_all(dir.path().join("hollow")).unwrap();
        let err = DomainCorpus::ingest_dir(dir.path(), 32).unwrap_err();
        assert!(err.to_string().contains("hollow"), "{err}");
    }

    #[test]
    fn invalid_utf8_is_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "a/good.txt", &[b'a'; 40]);
        write(dir.path(), "a/bad.bin", &[0xff, 0xfe, 0xfd, 0x80]);
        write(dir.path(), "b/x.txt", &[b'b'; 40]);
        let (_, stats) = DomainCorpus::ingest_dir(dir.path(), 32).unwrap();
        assert_eq!(stats.files_skipped, 1);
        assert_eq!(stats.files_read, 2);
    }

    #[test]
    fn jsonl_ingest_groups_by_domain() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let body = [
            r#"{"domain": "web", "text": "hello world, this is a web page of text"}"#,
            r#"{"domain": "arxiv", "text": "we prove the theorem by a careful induction"}"#,
            r#"{"domain": "_ood", "text": "a target domain that is held apart here"}"#,
        ]
        .join("\n");
        fs::write(&path, body).unwrap();
        let (corpus, _) = DomainCorpus::ingest_jsonl(&path, 32).unwrap();
        assert_eq!(corpus.names(), vec!["arxiv", "web"]);
        assert!(corpus.ood().is_some());
    }

    #[test]
    fn holdout_takes_every_twentieth() {
        let seqs: Vec<Vec<Token>> = (0..40).map(|i| vec![BOS, i]).collect();
        let corpus = DomainCorpus::new(
            vec![
                Domain {
                    name: "a".into(),
                    sequences: seqs.clone(),
                },
                Domain {
                    name: "b".into(),
                    sequences: seqs,
                },
            ],
            None,
            8,
        )
        .unwrap();
        let (train, valid) = corpus.split_holdout(20).unwrap();
        assert_eq!(train.domains()[0].sequences.len(), 38);
        assert_eq!(valid.domains()[0].sequences, vec![vec![BOS, 19], vec![BOS, 39]]);
    }

    #[test]
    fn validation_rejects_duplicates_and_bad_tokens() {
        let d = |n: &str, s: Vec<Token>| Domain {
            name: n.into(),
            sequences: vec![s],
        };
        assert!(DomainCorpus::new(vec![d("a", vec![1]), d("a", vec![1])], None, 4).is_err());
        assert!(DomainCorpus::new(vec![d("a", vec![999])], None, 4).is_err());
        assert!(DomainCorpus::new(vec![d("a", vec![1; 5])], None, 4).is_err());
    }
}
