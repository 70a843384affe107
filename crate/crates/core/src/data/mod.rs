//! Corpus ingestion, context/target pairs, reasoning-token filters, and
//! JSON-lines record formats.

pub mod synth;

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::index;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{next_token_distribution, LanguageModel, TokenSequence, Vocabulary};
use crate::rng;

pub use synth::{FormatPrior, SynthData, SynthEnv, SynthEnvSpec};

/// Documents longer than this many tokens are dropped at ingestion.
pub const MAX_DOC_TOKENS: usize = 2048;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    #[serde(skip)]
    pub token_len: usize,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        let text = text.into();
        Document {
            id: id.into(),
            token_len: text.split_whitespace().count(),
            text,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Kept,
    DroppedFunctional,
    DroppedDeterministic,
    DroppedNoLatent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTargetPair {
    pub context: TokenSequence,
    pub gold: usize,
    pub verdict: Verdict,
    pub doc_id: String,
    pub offset: usize,
}

impl ContextTargetPair {
    pub fn new(context: TokenSequence, gold: usize) -> Self {
        let offset = context.len();
        ContextTargetPair {
            context,
            gold,
            verdict: Verdict::Kept,
            doc_id: String::new(),
            offset,
        }
    }

    pub fn is_kept(&self) -> bool {
        self.verdict == Verdict::Kept
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub requires_reasoning: bool,
    #[serde(default)]
    pub explanation: String,
}

/// Anything that can judge whether a next word needs reasoning to predict.
pub trait ReasoningClassifier: Sync {
    fn classify(&self, context: &str, word: &str) -> Result<FilterDecision>;
}

fn open(path: &Path) -> Result<BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|source| Error::UnreadablePath {
            path: path.to_path_buf(),
            source,
        })
}

/// First line of a stamped JSON-lines artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactStamp {
    pub config_hash: String,
}

const TEXT_STAMP: &str = "# config_hash ";

/// Reads one JSON value per non-blank line, skipping a leading [`ArtifactStamp`].
pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && serde_json::from_str::<ArtifactStamp>(&line).is_ok() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Prepends an [`ArtifactStamp`] line to a JSON-lines file.
pub fn stamp_jsonl(path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    let stamp = serde_json::to_string(&ArtifactStamp {
        config_hash: config_hash.to_string(),
    })
    .expect("stamp serializes");
    prepend_line(path.as_ref(), &stamp)
}

/// Prepends a `# config_hash <hash>` line to a plain-text artifact.
pub fn stamp_text(path: impl AsRef<Path>, config_hash: &str) -> Result<()> {
    prepend_line(path.as_ref(), &format!("{TEXT_STAMP}{config_hash}"))
}

/// Drops a leading text stamp, if any.
pub fn strip_text_stamp(text: &str) -> &str {
    match text.strip_prefix(TEXT_STAMP) {
        Some(rest) => rest.split_once('\n').map_or("", |(_, body)| body),
        None => text,
    }
}

/// Hash recorded in an artifact's stamp line.
pub fn read_stamp(path: impl AsRef<Path>) -> Result<Option<String>> {
    let path = path.as_ref();
    let mut first = String::new();
    open(path)?.read_line(&mut first).map_err(|e| Error::io(path, e))?;
    let first = first.trim_end();
    if let Some(h) = first.strip_prefix(TEXT_STAMP) {
        return Ok(Some(h.to_string()));
    }
    Ok(serde_json::from_str::<ArtifactStamp>(first).ok().map(|s| s.config_hash))
}

fn prepend_line(path: &Path, line: &str) -> Result<()> {
    let body = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(body.len() + line.len() + 1);
    out.extend_from_slice(line.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&body);
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct DocRecord {
    id: String,
    text: String,
}

/// Loads `{"id", "text"}` records, dropping documents over [`MAX_DOC_TOKENS`].
pub fn ingest_corpus(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let records: Vec<DocRecord> = read_jsonl(path)?;
    Ok(records
        .into_iter()
        .map(|r| Document::new(r.id, r.text))
        .filter(|d| d.token_len <= MAX_DOC_TOKENS)
        .collect())
}

/// One pair per position `k >= max(min_context, 1)`, with context `tokens[..k]`.
pub fn extract_pairs(doc_id: &str, tokens: &[usize], min_context: usize) -> Vec<ContextTargetPair> {
    (min_context.max(1)..tokens.len())
        .map(|k| ContextTargetPair {
            context: TokenSequence(tokens[..k].to_vec()),
            gold: tokens[k],
            verdict: Verdict::Kept,
            doc_id: doc_id.to_string(),
            offset: k,
        })
        .collect()
}

fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| c.is_ascii_punctuation())
}

/// Rule-based stand-in for the reasoning-token criteria: function words and
/// punctuation are dropped, so are tokens the reference predicts with
/// probability above `threshold`.
pub fn heuristic_filter<M: LanguageModel + ?Sized>(
    pairs: &[ContextTargetPair],
    reference: &M,
    vocab: &Vocabulary,
    stopwords: &HashSet<usize>,
    threshold: f64,
) -> Result<Vec<ContextTargetPair>> {
    pairs
        .iter()
        .map(|p| {
            let word = vocab.token(p.gold).ok_or(Error::GoldOutOfVocabulary(p.gold))?;
            let verdict = if stopwords.contains(&p.gold) || is_punctuation(word) {
                Verdict::DroppedFunctional
            } else if next_token_distribution(reference, &p.context, 1.0)?.prob(p.gold) > threshold {
                Verdict::DroppedDeterministic
            } else {
                Verdict::Kept
            };
            Ok(ContextTargetPair { verdict, ..p.clone() })
        })
        .collect()
}

/// Annotates pairs from classifier decisions. Pairs whose response cannot be
/// parsed are left out of the output.
pub fn classifier_filter<C: ReasoningClassifier + ?Sized>(
    pairs: &[ContextTargetPair],
    classifier: &C,
    vocab: &Vocabulary,
) -> Result<Vec<(ContextTargetPair, FilterDecision)>> {
    let mut out = Vec::with_capacity(pairs.len());
    for p in pairs {
        let context = vocab.decode(&p.context)?;
        let word = vocab.token(p.gold).ok_or(Error::GoldOutOfVocabulary(p.gold))?;
        match classifier.classify(&context, word) {
            Ok(d) => {
                let verdict = if d.requires_reasoning {
                    Verdict::Kept
                } else {
                    Verdict::DroppedNoLatent
                };
                out.push((ContextTargetPair { verdict, ..p.clone() }, d));
            }
            Err(Error::UnparseableJudgment(detail)) => {
                log::warn!("skipping pair {}@{}: unparseable judgment: {detail}", p.doc_id, p.offset);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Uniform sample of `count` pairs without replacement, in input order.
pub fn random_filter(pairs: &[ContextTargetPair], count: usize, seed: u64) -> Result<Vec<ContextTargetPair>> {
    if count > pairs.len() {
        return Err(Error::CountTooLarge {
            requested: count,
            available: pairs.len(),
        });
    }
    let mut picked = index::sample(&mut rng::stream(seed, &[0x5e1ec7]), pairs.len(), count).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| pairs[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairRecord {
    context: String,
    gold: String,
    verdict: Verdict,
    doc_id: String,
    offset: usize,
}

pub fn save_pairs(path: impl AsRef<Path>, pairs: &[ContextTargetPair], vocab: &Vocabulary) -> Result<()> {
    let records = pairs
        .iter()
        .map(|p| {
            Ok(PairRecord {
                context: vocab.decode(&p.context)?,
                gold: vocab.decode(&[p.gold])?,
                verdict: p.verdict,
                doc_id: p.doc_id.clone(),
                offset: p.offset,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_jsonl(path, &records)
}

pub fn load_pairs(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<ContextTargetPair>> {
    let records: Vec<PairRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let malformed = |detail: String| Error::MalformedRecord { line: i + 1, detail };
            let context = vocab.encode(&r.context).map_err(|e| malformed(e.to_string()))?;
            if context.is_empty() {
                return Err(malformed("empty context".into()));
            }
            let gold = vocab.id(&r.gold).ok_or_else(|| malformed(format!("unknown gold `{}`", r.gold)))?;
            Ok(ContextTargetPair {
                context,
                gold,
                verdict: r.verdict,
                doc_id: r.doc_id,
                offset: r.offset,
            })
        })
        .collect()
}
