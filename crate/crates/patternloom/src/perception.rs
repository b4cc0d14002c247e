//! Context Triage (C1xT2) and the RAG Pipeline (C2xT1): priority-based
//! context loading and retrieval over a hashed bag-of-words index.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::CognitiveFunction as CF;
use crate::kernel::{
    self, Context, Priority, Step, StepInput, StepOutcome, TokenLedger, Trace, WorkflowNode,
};
use crate::model::{tokenize, ScriptedModel};

pub const EMBED_DIM: usize = 256;
pub const CHUNK_TOKENS: u64 = 500;

// ---------------------------------------------------------------------------
// Triage

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    UserMessage,
    History,
    ProjectFile,
    Documentation,
    ToolOutput,
    Retrieved,
    Metadata,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InfoSource {
    pub id: String,
    pub content: String,
    pub kind: SourceKind,
    #[serde(default)]
    pub cache_friendly: bool,
}

impl InfoSource {
    pub fn new(id: impl Into<String>, kind: SourceKind, content: impl Into<String>) -> Self {
        Self { id: id.into(), content: content.into(), kind, cache_friendly: false }
    }

    pub fn tokens(&self) -> u64 {
        tokenize(&self.content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TriagePlan {
    pub assignments: std::collections::BTreeMap<String, Priority>,
    pub loaded: Vec<String>,
    /// P2 sources, available on demand but not loaded.
    pub on_demand: Vec<String>,
    pub tokens_used: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum TriageError {
    #[error("budget too small: P0 sources need {needed} tokens, budget is {budget}")]
    BudgetTooSmall { needed: u64, budget: u64 },
    #[error("duplicate source id {0:?}")]
    DuplicateId(String),
}

fn keywords(text: &str) -> BTreeSet<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

/// Keyword overlap against the task: |source ∩ task| / |task|.
pub fn relevance(source: &InfoSource, task: &str) -> f64 {
    let task_kw = keywords(task);
    if task_kw.is_empty() {
        return 0.0;
    }
    let source_kw = keywords(&source.content);
    let shared = task_kw.intersection(&source_kw).count();
    shared as f64 / task_kw.len() as f64
}

/// Priority rule table. Metadata is P3 unless the task mentions it.
fn assign_priority(source: &InfoSource, task: &str) -> Priority {
    let score = relevance(source, task);
    match source.kind {
        SourceKind::UserMessage => Priority::P0,
        SourceKind::ToolOutput => Priority::P1,
        SourceKind::ProjectFile | SourceKind::Documentation | SourceKind::Retrieved => {
            if score >= 0.2 {
                Priority::P1
            } else {
                Priority::P2
            }
        }
        SourceKind::History => Priority::P2,
        SourceKind::Metadata => {
            if score > 0.0 {
                Priority::P2
            } else {
                Priority::P3
            }
        }
    }
}

/// Assign P0-P3 priorities and load greedily: all P0 first, then P1 in
/// descending relevance as long as the budget holds (longest loadable
/// prefix of the sorted P1 list). P2 is recorded as load-on-demand; P3
/// is excluded.
pub fn triage(
    sources: &[InfoSource],
    task: &str,
    budget: u64,
) -> Result<TriagePlan, TriageError> {
    let mut seen = BTreeSet::new();
    for s in sources {
        if !seen.insert(&s.id) {
            return Err(TriageError::DuplicateId(s.id.clone()));
        }
    }

    let mut assignments = std::collections::BTreeMap::new();
    let mut p0 = Vec::new();
    let mut p1 = Vec::new();
    let mut on_demand = Vec::new();
    for s in sources {
        let pri = assign_priority(s, task);
        assignments.insert(s.id.clone(), pri);
        match pri {
            Priority::P0 => p0.push(s),
            Priority::P1 => p1.push(s),
            Priority::P2 => on_demand.push(s.id.clone()),
            Priority::P3 => {}
        }
    }

    let p0_tokens: u64 = p0.iter().map(|s| s.tokens()).sum();
    if p0_tokens > budget {
        return Err(TriageError::BudgetTooSmall { needed: p0_tokens, budget });
    }

    // Descending relevance, then cache-friendly, then id: deterministic.
    p1.sort_by(|a, b| {
        relevance(b, task)
            .partial_cmp(&relevance(a, task))
            .unwrap()
            .then(b.cache_friendly.cmp(&a.cache_friendly))
            .then(a.id.cmp(&b.id))
    });

    let mut loaded: Vec<String> = p0.iter().map(|s| s.id.clone()).collect();
    let mut tokens_used = p0_tokens;
    for s in p1 {
        if tokens_used + s.tokens() > budget {
            break;
        }
        tokens_used += s.tokens();
        loaded.push(s.id.clone());
    }

    Ok(TriagePlan { assignments, loaded, on_demand, tokens_used })
}

// ---------------------------------------------------------------------------
// Embedding and retrieval

/// Hashed bag-of-words embedding, unit-normalized; empty text maps to
/// the zero vector.
pub fn embed(text: &str) -> Vec<f64> {
    let mut v = vec![0.0f64; EMBED_DIM];
    for word in text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
        if word.is_empty() {
            continue;
        }
        v[fnv1a(word) as usize % EMBED_DIM] += 1.0;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

fn fnv1a(word: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Chunk {
    pub doc_id: String,
    pub offset: usize,
    pub text: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct KnowledgeStore {
    pub chunks: Vec<Chunk>,
}

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("knowledge store is empty")]
    EmptyStore,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl KnowledgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fixed 500-token (2000-char) windows, no overlap.
    pub fn add_document(&mut self, doc_id: &str, text: &str) {
        let chars: Vec<char> = text.chars().collect();
        let window = (CHUNK_TOKENS * 4) as usize;
        let mut offset = 0;
        while offset < chars.len() {
            let end = (offset + window).min(chars.len());
            let chunk_text: String = chars[offset..end].iter().collect();
            self.chunks.push(Chunk {
                doc_id: doc_id.to_string(),
                offset,
                vector: embed(&chunk_text),
                text: chunk_text,
            });
            offset = end;
        }
    }

    /// Ingest every regular file in a directory as one document each,
    /// ordered by file name.
    pub fn ingest_dir(&mut self, dir: &Path) -> Result<usize, RetrievalError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();
        let mut docs = 0;
        for path in paths {
            let text = std::fs::read_to_string(&path)?;
            let doc_id = path.file_name().unwrap().to_string_lossy().to_string();
            self.add_document(&doc_id, &text);
            docs += 1;
        }
        Ok(docs)
    }

    pub fn save(&self, path: &Path) -> Result<(), RetrievalError> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn open(path: &Path) -> Result<Self, RetrievalError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Top-k chunks by cosine similarity to the query embedding, ties
/// broken by (doc_id, offset) ascending.
pub fn retrieve<'a>(
    store: &'a KnowledgeStore,
    query: &str,
    k: usize,
) -> Result<Vec<&'a Chunk>, RetrievalError> {
    assert!(k >= 1, "k must be at least 1");
    if store.chunks.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let q = embed(query);
    let mut scored: Vec<(f64, &Chunk)> =
        store.chunks.iter().map(|c| (cosine(&q, &c.vector), c)).collect();
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then(a.1.doc_id.cmp(&b.1.doc_id))
            .then(a.1.offset.cmp(&b.1.offset))
    });
    Ok(scored.into_iter().take(k).map(|(_, c)| c).collect())
}

/// Rerank chunks by keyword overlap count with the question, stable on
/// the incoming order.
pub fn rerank<'a>(chunks: &[&'a Chunk], question: &str) -> Vec<&'a Chunk> {
    let q_kw = keywords(question);
    let mut indexed: Vec<(usize, &Chunk)> = chunks.iter().copied().enumerate().collect();
    indexed.sort_by(|(ia, a), (ib, b)| {
        let oa = keywords(&a.text).intersection(&q_kw).count();
        let ob = keywords(&b.text).intersection(&q_kw).count();
        ob.cmp(&oa).then(ia.cmp(ib))
    });
    indexed.into_iter().map(|(_, c)| c).collect()
}

#[derive(Debug)]
pub struct RagRun {
    pub answer: String,
    pub reranked: Vec<String>,
    pub ledger: TokenLedger,
    pub trace: Trace,
}

/// The four-step retrieval chain: build query, retrieve, rerank,
/// generate. Runs through the kernel so every step is traced and the
/// retrieval cost (sum of chunk tokens) is charged to the ledger.
pub fn rag_pipeline(
    store: &KnowledgeStore,
    question: &str,
    k: usize,
    model: &ScriptedModel,
) -> Result<RagRun, RetrievalError> {
    if store.chunks.is_empty() {
        return Err(RetrievalError::EmptyStore);
    }
    let question_owned = question.to_string();

    let build_query = Step::new("build-query", CF::C2, {
        let q = question_owned.clone();
        move |_input: &StepInput| {
            let mut o = StepOutcome::text(q.clone(), tokenize(&q));
            o.slot_writes.push(kernel::SlotWrite { name: "rag.query".into(), content: q.clone(), priority: None });
            Ok(o)
        }
    });

    let retrieve_step = Step::new("retrieve", CF::C2, {
        let store = store.clone();
        move |input: &StepInput| {
            let query = input.ctx.slot("rag.query").unwrap_or_default().to_string();
            let chunks = retrieve(&store, &query, k)
                .map_err(|e| kernel::StepFailure::new("retrieve", e.to_string()))?;
            let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
            let chunk_tokens: u64 = texts.iter().map(|t| tokenize(t)).sum();
            Ok(StepOutcome {
                output: format!("{} chunks", texts.len()),
                tokens_in: tokenize(&query),
                tokens_out: chunk_tokens,
                label: None,
                slot_writes: vec![kernel::SlotWrite {
                    name: "rag.chunks".into(),
                    content: serde_json::to_string(&texts).unwrap(),
                    priority: None,
                }],
            })
        }
    });

    let rerank_step = Step::new("rerank", CF::C2, {
        let q = question_owned.clone();
        move |input: &StepInput| {
            let raw = input.ctx.slot("rag.chunks").unwrap_or("[]");
            let texts: Vec<String> = serde_json::from_str(raw).unwrap_or_default();
            let q_kw = keywords(&q);
            let mut indexed: Vec<(usize, String)> = texts.into_iter().enumerate().collect();
            indexed.sort_by(|(ia, a), (ib, b)| {
                let oa = keywords(a).intersection(&q_kw).count();
                let ob = keywords(b).intersection(&q_kw).count();
                ob.cmp(&oa).then(ia.cmp(ib))
            });
            let reranked: Vec<String> = indexed.into_iter().map(|(_, t)| t).collect();
            Ok(StepOutcome {
                output: format!("{} chunks reranked", reranked.len()),
                tokens_in: 0,
                tokens_out: 0,
                label: None,
                slot_writes: vec![kernel::SlotWrite {
                    name: "rag.reranked".into(),
                    content: serde_json::to_string(&reranked).unwrap(),
                    priority: None,
                }],
            })
        }
    });

    let generate_step = Step::new("generate", CF::C2, {
        let q = question_owned.clone();
        move |input: &StepInput| {
            let raw = input.ctx.slot("rag.reranked").unwrap_or("[]");
            let texts: Vec<String> = serde_json::from_str(raw).unwrap_or_default();
            let prompt = format!("{q}\n{}", texts.join("\n"));
            let c = input.model.complete(&prompt, 4096);
            Ok(StepOutcome {
                output: c.text,
                tokens_in: c.tokens_in,
                tokens_out: c.tokens_out,
                label: None,
                slot_writes: Vec::new(),
            })
        }
    });

    let root = WorkflowNode::chain(vec![
        WorkflowNode::Step(build_query),
        WorkflowNode::Step(retrieve_step),
        WorkflowNode::Step(rerank_step),
        WorkflowNode::Step(generate_step),
    ]);

    let (ctx, ledger, trace) = kernel::run(&root, Context::new(question), model)
        .map_err(|(e, _)| match e {
            kernel::KernelError::StepFailure(f) if f.message.contains("empty") => {
                RetrievalError::EmptyStore
            }
            other => RetrievalError::Io(std::io::Error::other(other.to_string())),
        })?;

    let reranked: Vec<String> =
        serde_json::from_str(ctx.slot("rag.reranked").unwrap_or("[]")).unwrap_or_default();
    Ok(RagRun {
        answer: ctx.last_output().unwrap_or_default().to_string(),
        reranked,
        ledger,
        trace,
    })
}
