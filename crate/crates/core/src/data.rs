//! Corpus ingestion and chunking for pretraining.
//!
//! Documents come from UTF-8 plain text (blank-line separated) or JSONL
//! files with a `text` key; a directory ingests every regular file inside.
//! Chunking slices non-overlapping windows of `max_context` tokens followed
//! by up to `max_continuation` tokens, never crossing document bounds.

use rand::seq::SliceRandom;
use serde::Deserialize;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::lm::params::seeded_rng;
use crate::lm::tokenizer::tokenize;

pub const MIN_DOC_TOKENS: usize = 16;

#[derive(Debug, Clone)]
pub struct ChunkConfig {
    pub max_context: usize,
    pub max_continuation: usize,
    pub seed: u64,
}

impl Default for ChunkConfig {
    fn default() -> Self {
        Self { max_context: 512, max_continuation: 256, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusChunk {
    pub context: Vec<u32>,
    pub continuation: Option<Vec<u32>>,
    pub doc_id: String,
    /// Token offset of the context within its document.
    pub offset: usize,
}

#[derive(Debug)]
pub struct IngestReport {
    pub chunks: Vec<CorpusChunk>,
    pub docs_seen: usize,
    pub docs_skipped_short: usize,
    pub file_errors: Vec<(PathBuf, String)>,
}

#[derive(Deserialize)]
struct JsonlDoc {
    text: String,
}

fn read_documents(path: &Path) -> Result<Vec<(String, String)>> {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::File { path: path.to_path_buf(), source: e })?;
    let mut docs = Vec::new();
    if path.extension().is_some_and(|e| e == "jsonl") {
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<JsonlDoc>(line) {
                Ok(d) => docs.push((format!("{name}:{}", i + 1), d.text)),
                Err(e) => {
                    return Err(Error::Data(format!("{name} line {}: {e}", i + 1)));
                }
            }
        }
    } else {
        for (i, para) in raw.split("\n\n").enumerate() {
            let trimmed = para.trim();
            if !trimmed.is_empty() {
                docs.push((format!("{name}:p{}", i + 1), trimmed.to_string()));
            }
        }
    }
    Ok(docs)
}

/// Chunk one document's token stream.
fn chunk_document(ids: &[u32], doc_id: &str, cfg: &ChunkConfig, out: &mut Vec<CorpusChunk>) {
    let stride = cfg.max_context + cfg.max_continuation;
    let mut start = 0usize;
    while start < ids.len() {
        let ctx_end = (start + cfg.max_context).min(ids.len());
        let ctx = &ids[start..ctx_end];
        // trailing windows shorter than the document threshold are dropped
        if ctx.len() < MIN_DOC_TOKENS {
            break;
        }
        let cont_end = (ctx_end + cfg.max_continuation).min(ids.len());
        let continuation =
            (cont_end > ctx_end).then(|| ids[ctx_end..cont_end].to_vec());
        out.push(CorpusChunk {
            context: ctx.to_vec(),
            continuation,
            doc_id: doc_id.to_string(),
            offset: start,
        });
        start += stride;
    }
}

/// Plain document texts of a corpus file or directory (id, text) pairs.
pub fn read_texts(path: &Path) -> Result<Vec<(String, String)>> {
    let mut files = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::File { path: path.to_path_buf(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        files.extend(entries);
    } else {
        files.push(path.to_path_buf());
    }
    let mut docs = Vec::new();
    for file in files {
        docs.extend(read_documents(&file)?);
    }
    Ok(docs)
}

/// Ingest a corpus file or directory into a deterministic chunk stream.
/// Unreadable files are recorded and skipped; zero usable documents is fatal.
pub fn ingest_corpus(path: &Path, cfg: &ChunkConfig) -> Result<IngestReport> {
    let mut files = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::File { path: path.to_path_buf(), source: e })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        entries.sort();
        files.extend(entries);
    } else {
        files.push(path.to_path_buf());
    }

    let mut report = IngestReport {
        chunks: Vec::new(),
        docs_seen: 0,
        docs_skipped_short: 0,
        file_errors: Vec::new(),
    };
    for file in files {
        match read_documents(&file) {
            Ok(docs) => {
                for (doc_id, text) in docs {
                    report.docs_seen += 1;
                    let ids = tokenize(&text);
                    if ids.len() < MIN_DOC_TOKENS {
                        report.docs_skipped_short += 1;
                        continue;
                    }
                    chunk_document(ids.ids(), &doc_id, cfg, &mut report.chunks);
                }
            }
            Err(e) => report.file_errors.push((file, e.to_string())),
        }
    }
    if report.chunks.is_empty() {
        return Err(Error::Data(format!(
            "no usable documents under {} ({} seen, {} too short, {} file errors)",
            path.display(),
            report.docs_seen,
            report.docs_skipped_short,
            report.file_errors.len()
        )));
    }
    let mut rng = seeded_rng(cfg.seed);
    report.chunks.shuffle(&mut rng);
    Ok(report)
}
