//! Loading datasets, parses and pair files, and turning sentences into
//! token-level trees.

use std::collections::HashSet;
use std::ops::Range;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{OracleChoice, RunConfig};
use crate::deptree::{
    filter_dataset, read_conllu, Candidate, DepTreeError, DependencyTree, ParseIndex, ParsedSentence, SentenceRecord,
    TokenizedTree,
};
use crate::oracle::toy_token_id;

/// A sentence that produced no output, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub id: String,
    pub reason: String,
    pub detail: String,
}

impl Reject {
    pub fn new(id: impl Into<String>, reason: &str, detail: impl Into<String>) -> Self {
        Reject { id: id.into(), reason: reason.to_string(), detail: detail.into() }
    }
}

#[derive(Debug)]
pub struct Dataset {
    /// Sorted by id.
    pub sentences: Vec<(SentenceRecord, TokenizedTree)>,
    pub rejects: Vec<Reject>,
    pub total: usize,
}

/// JSONL records, or the 1-based line and error of every malformed line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<Result<T, (usize, String)>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect())
}

pub fn read_parses(config: &RunConfig) -> Result<ParseIndex> {
    let Some(path) = &config.conllu else {
        bail!("--conllu is required: sentences are explained over their dependency parses");
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let sentences = read_conllu(&text).with_context(|| format!("parsing {}", path.display()))?;
    Ok(ParseIndex::new(sentences))
}

/// Token features for a word tree. Parses carrying token ids are used as is;
/// otherwise the toy model gets one hashed token per word.
pub fn tokenize(tree: &DependencyTree, oracle: &OracleChoice) -> Result<TokenizedTree, DepTreeError> {
    if let Some(t) = TokenizedTree::from_misc(tree)? {
        return Ok(t);
    }
    match oracle {
        OracleChoice::Toy { vocab_size, .. } => Ok(TokenizedTree::one_token_per_word(tree, |w| toy_token_id(w, *vocab_size))),
        OracleChoice::Remote { .. } => Err(DepTreeError::Alignment(
            "parse carries no model token ids (TokIds) and a remote model needs them".into(),
        )),
    }
}

fn parse_of(parsed: Option<&ParsedSentence>, oracle: &OracleChoice) -> Option<Result<TokenizedTree, DepTreeError>> {
    parsed.map(|p| p.tree.clone().and_then(|t| tokenize(&t, oracle)))
}

/// Loads the dataset (or, without one, every sentence of the CoNLL-U file),
/// matches parses and applies the filters.
pub fn load_dataset(config: &RunConfig) -> Result<Dataset> {
    let index = read_parses(config)?;
    let mut rejects = Vec::new();
    let records: Vec<(SentenceRecord, Option<&ParsedSentence>)> = match &config.dataset {
        Some(path) => read_jsonl::<SentenceRecord>(path)?
            .into_iter()
            .filter_map(|r| match r {
                Ok(rec) => {
                    let parsed = index.lookup(&rec.id, &rec.sentence);
                    Some((rec, parsed))
                }
                Err((line, err)) => {
                    rejects.push(Reject::new(format!("line-{line}"), "malformed", err));
                    None
                }
            })
            .collect(),
        None => index
            .sentences()
            .iter()
            .enumerate()
            .map(|(k, s)| {
                let sentence = match (&s.text, &s.tree) {
                    (Some(t), _) => t.clone(),
                    (None, Ok(tree)) => tree.text(),
                    (None, Err(_)) => String::new(),
                };
                let id = s.sent_id.clone().unwrap_or_else(|| format!("{}", k + 1));
                (SentenceRecord { id, sentence }, Some(s))
            })
            .collect(),
    };
    let total = records.len() + rejects.len();

    let mut seen = HashSet::new();
    let mut candidates = Vec::new();
    for (record, parsed) in records {
        if !seen.insert(record.id.clone()) {
            rejects.push(Reject::new(record.id, "duplicate_id", "id already used by an earlier record"));
            continue;
        }
        candidates.push(Candidate { record, parse: parse_of(parsed, &config.oracle) });
    }

    let outcome = filter_dataset(candidates, &config.filter);
    rejects.extend(outcome.rejected.into_iter().map(|r| Reject::new(r.id, r.reason.as_str(), r.detail)));
    rejects.sort_by(|a, b| a.id.cmp(&b.id));
    let mut sentences = outcome.kept;
    sentences.sort_by(|a, b| a.0.id.cmp(&b.0.id));
    Ok(Dataset { sentences, rejects, total })
}

/// Token positions of the first word equal to `word` (case-insensitive).
pub fn word_tokens(tree: &TokenizedTree, word: &str) -> Option<Range<usize>> {
    let wanted = word.trim().to_lowercase();
    tree.word_tree()
        .nodes()
        .iter()
        .find(|w| w.text.to_lowercase() == wanted)
        .and_then(|w| tree.word_span(w.word_index))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub sentence_a: String,
    pub sentence_b: String,
    pub negation_token: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignRecord {
    pub id: String,
    pub sentence: String,
    pub negation_token: String,
}

/// Looks up and tokenizes one sentence of a pair or alignment file. The
/// parse is found by `sent_id` (`<id>`, `<id>/a`, `<id>/b`) or by text.
pub fn tokenized_sentence(index: &ParseIndex, sent_id: &str, text: &str, config: &RunConfig) -> Result<TokenizedTree, String> {
    let parsed = index.lookup(sent_id, text).ok_or_else(|| format!("no parse for {text:?}"))?;
    let tree = parsed.tree.clone().and_then(|t| tokenize(&t, &config.oracle)).map_err(|e| e.to_string())?;
    if tree.len() > config.filter.max_tokens {
        return Err(format!("{} tokens exceed the limit of {}", tree.len(), config.filter.max_tokens));
    }
    Ok(tree)
}
