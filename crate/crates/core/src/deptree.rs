//! CoNLL-U ingestion and leveled dependency trees.
//!
//! A sentence's dependency tree is leveled by distance from the root: the root
//! sits at level 1, its dependents at level 2, and so on. Level 0 is virtual and
//! only ever holds the empty coalition. Tokenizers that split a word into several
//! pieces are handled by duplicating the word node, so every piece becomes its own
//! feature at the word's level.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Characters that disqualify a raw sentence from the dataset.
pub const DEFAULT_PUNCTUATION: &str = r##"!"#$%&'()*+,-./:;<=>?@[\]^_`{|}~"##;

/// Default upper bound on tokens per explained sentence.
pub const DEFAULT_MAX_TOKENS: usize = 15;

/// MISC key holding the model token ids of a word, comma separated.
pub const MISC_TOKEN_IDS: &str = "TokIds";
/// MISC key holding the surface forms of a word's subtokens, comma separated.
pub const MISC_TOKEN_FORMS: &str = "TokForms";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DepTreeError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("sentence has {roots} roots, expected exactly one")]
    MultiSpan { roots: usize },
    #[error("cycle in head links through word {word}")]
    Cycle { word: usize },
    #[error("word {word} points to head {head} outside the sentence")]
    DanglingHead { word: usize, head: usize },
    #[error("word ids must run 1..n in order, found {found} at position {position}")]
    BadIndex { position: usize, found: usize },
    #[error("sentence has no words")]
    Empty,
    #[error("token alignment: {0}")]
    Alignment(String),
    #[error("dependency distance is undefined for a single-node tree")]
    SingleNode,
}

impl DepTreeError {
    /// True for errors caused by the parse having several roots (several spans).
    pub fn is_multi_span(&self) -> bool {
        matches!(self, DepTreeError::MultiSpan { .. })
    }
}

/// One word row of a CoNLL-U sentence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordNode {
    /// 1-based position in the sentence.
    pub word_index: usize,
    pub text: String,
    /// 1-based position of the syntactic head, 0 for the root.
    pub head_index: usize,
    pub deprel: String,
    pub lemma: String,
    pub upos: String,
    pub xpos: String,
    pub feats: String,
    pub deps: String,
    pub misc: String,
}

impl WordNode {
    pub fn new(word_index: usize, text: impl Into<String>, head_index: usize, deprel: impl Into<String>) -> Self {
        WordNode {
            word_index,
            text: text.into(),
            head_index,
            deprel: deprel.into(),
            lemma: "_".into(),
            upos: "_".into(),
            xpos: "_".into(),
            feats: "_".into(),
            deps: "_".into(),
            misc: "_".into(),
        }
    }

    /// Looks up `key` in the `Key=Value|Key=Value` MISC column.
    pub fn misc_value(&self, key: &str) -> Option<&str> {
        self.misc
            .split('|')
            .filter_map(|kv| kv.split_once('='))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v)
    }
}

/// Features carrying a tree level. Feature `i` (0-based) has level `feature_levels()[i] >= 1`.
pub trait Leveled {
    fn feature_levels(&self) -> &[usize];
}

/// Groups 0-based feature positions by level. `sets[l - 1]` holds level `l`.
fn level_sets_of(levels: &[usize]) -> Vec<Vec<usize>> {
    let depth = levels.iter().copied().max().unwrap_or(0);
    let mut sets = vec![Vec::new(); depth];
    for (i, &l) in levels.iter().enumerate() {
        sets[l - 1].push(i);
    }
    sets
}

/// A parsed sentence leveled by head distance from the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyTree {
    sent_id: Option<String>,
    text: Option<String>,
    nodes: Vec<WordNode>,
    levels: Vec<usize>,
    level_sets: Vec<Vec<usize>>,
}

impl DependencyTree {
    /// Builds the tree and assigns levels. Word ids must run `1..=n` in order.
    pub fn from_nodes(nodes: Vec<WordNode>) -> Result<Self, DepTreeError> {
        if nodes.is_empty() {
            return Err(DepTreeError::Empty);
        }
        let n = nodes.len();
        for (pos, node) in nodes.iter().enumerate() {
            if node.word_index != pos + 1 {
                return Err(DepTreeError::BadIndex { position: pos + 1, found: node.word_index });
            }
            if node.head_index > n {
                return Err(DepTreeError::DanglingHead { word: node.word_index, head: node.head_index });
            }
            if node.head_index == node.word_index {
                return Err(DepTreeError::Cycle { word: node.word_index });
            }
        }
        let roots = nodes.iter().filter(|w| w.head_index == 0).count();
        if roots != 1 {
            return Err(DepTreeError::MultiSpan { roots });
        }

        // levels[i] == 0 means "not yet known"
        let mut levels = vec![0usize; n];
        for start in 0..n {
            let mut path = Vec::new();
            let mut cur = start;
            while levels[cur] == 0 {
                path.push(cur);
                if path.len() > n {
                    return Err(DepTreeError::Cycle { word: start + 1 });
                }
                let head = nodes[cur].head_index;
                if head == 0 {
                    break;
                }
                cur = head - 1;
            }
            // Either `cur` is the root (still unknown, last on path) or already leveled.
            let mut level = if levels[cur] == 0 { 0 } else { levels[cur] };
            for &p in path.iter().rev() {
                level += 1;
                levels[p] = level;
            }
        }

        let level_sets = level_sets_of(&levels);
        Ok(DependencyTree { sent_id: None, text: None, nodes, levels, level_sets })
    }

    /// Tree over placeholder words `w1..wn` from a head vector (1-based, 0 = root).
    pub fn from_heads(heads: &[usize]) -> Result<Self, DepTreeError> {
        let nodes = heads
            .iter()
            .enumerate()
            .map(|(i, &h)| WordNode::new(i + 1, format!("w{}", i + 1), h, if h == 0 { "root" } else { "dep" }))
            .collect();
        Self::from_nodes(nodes)
    }

    pub fn with_meta(mut self, sent_id: Option<String>, text: Option<String>) -> Self {
        self.sent_id = sent_id;
        self.text = text;
        self
    }

    pub fn sent_id(&self) -> Option<&str> {
        self.sent_id.as_deref()
    }

    /// The `# text` comment if present, otherwise the forms joined by spaces.
    pub fn text(&self) -> String {
        match &self.text {
            Some(t) => t.clone(),
            None => self.nodes.iter().map(|w| w.text.as_str()).collect::<Vec<_>>().join(" "),
        }
    }

    pub fn nodes(&self) -> &[WordNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Level of every word (1-based levels, 0-based word positions).
    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// Number of levels `L`.
    pub fn depth(&self) -> usize {
        self.level_sets.len()
    }

    /// 0-based word positions at level `l` (1-based level).
    pub fn level_set(&self, l: usize) -> &[usize] {
        &self.level_sets[l - 1]
    }

    /// `n_l` for `l = 1..=L`.
    pub fn level_widths(&self) -> Vec<usize> {
        self.level_sets.iter().map(Vec::len).collect()
    }

    /// Serializes the sentence as one CoNLL-U block (with trailing blank line).
    pub fn to_conllu(&self) -> String {
        let mut out = String::new();
        if let Some(id) = &self.sent_id {
            let _ = writeln!(out, "# sent_id = {id}");
        }
        if let Some(text) = &self.text {
            let _ = writeln!(out, "# text = {text}");
        }
        for w in &self.nodes {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                w.word_index, w.text, w.lemma, w.upos, w.xpos, w.feats, w.head_index, w.deprel, w.deps, w.misc
            );
        }
        out.push('\n');
        out
    }
}

impl Leveled for DependencyTree {
    fn feature_levels(&self) -> &[usize] {
        &self.levels
    }
}

/// A sentence block as read from a CoNLL-U document. Structural problems are
/// kept per sentence so datasets can reject them with a reason.
#[derive(Debug, Clone)]
pub struct ParsedSentence {
    pub sent_id: Option<String>,
    pub text: Option<String>,
    /// 1-based line of the block's first row.
    pub line: usize,
    pub tree: Result<DependencyTree, DepTreeError>,
}

/// Reads every sentence block. Malformed lines fail the whole document;
/// tree-shape errors (cycles, several roots) are reported per sentence.
pub fn read_conllu(document: &str) -> Result<Vec<ParsedSentence>, DepTreeError> {
    let mut sentences = Vec::new();
    let mut block: Option<Block> = None;

    for (idx, raw) in document.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = block.take() {
                sentences.push(b.finish());
            }
            continue;
        }
        let b = block.get_or_insert_with(|| Block::new(line_no));
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((key, value)) = comment.split_once('=') {
                match key.trim() {
                    "sent_id" => b.sent_id = Some(value.trim().to_string()),
                    "text" => b.text = Some(value.trim().to_string()),
                    _ => {}
                }
            }
            continue;
        }
        if let Some(node) = parse_row(line, line_no)? {
            b.nodes.push(node);
        }
    }
    if let Some(b) = block.take() {
        sentences.push(b.finish());
    }
    Ok(sentences)
}

/// Strict variant of [`read_conllu`]: any structural error fails the document.
pub fn parse_conllu(document: &str) -> Result<Vec<DependencyTree>, DepTreeError> {
    read_conllu(document)?.into_iter().map(|s| s.tree).collect()
}

/// Serializes trees as a CoNLL-U document.
pub fn write_conllu(trees: &[DependencyTree]) -> String {
    trees.iter().map(DependencyTree::to_conllu).collect()
}

struct Block {
    line: usize,
    sent_id: Option<String>,
    text: Option<String>,
    nodes: Vec<WordNode>,
}

impl Block {
    fn new(line: usize) -> Self {
        Block { line, sent_id: None, text: None, nodes: Vec::new() }
    }

    fn finish(self) -> ParsedSentence {
        let tree = DependencyTree::from_nodes(self.nodes).map(|t| t.with_meta(self.sent_id.clone(), self.text.clone()));
        ParsedSentence { sent_id: self.sent_id, text: self.text, line: self.line, tree }
    }
}

/// Parses a word row. Multiword-token ranges (`1-2`) and empty nodes (`1.1`)
/// yield `None`.
fn parse_row(line: &str, line_no: usize) -> Result<Option<WordNode>, DepTreeError> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 10 {
        return Err(DepTreeError::Parse {
            line: line_no,
            message: format!("expected 10 tab-separated columns, found {}", cols.len()),
        });
    }
    if cols[0].contains('-') || cols[0].contains('.') {
        return Ok(None);
    }
    let num = |col: usize, what: &str| -> Result<usize, DepTreeError> {
        cols[col].parse::<usize>().map_err(|_| DepTreeError::Parse {
            line: line_no,
            message: format!("invalid {what} {:?}", cols[col]),
        })
    };
    let word_index = num(0, "ID")?;
    if word_index == 0 {
        return Err(DepTreeError::Parse { line: line_no, message: "word ID must be positive".into() });
    }
    let head_index = num(6, "HEAD")?;
    Ok(Some(WordNode {
        word_index,
        text: cols[1].to_string(),
        lemma: cols[2].to_string(),
        upos: cols[3].to_string(),
        xpos: cols[4].to_string(),
        feats: cols[5].to_string(),
        head_index,
        deprel: cols[7].to_string(),
        deps: cols[8].to_string(),
        misc: cols[9].to_string(),
    }))
}

/// One model token aligned to a word of the tree.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub text: String,
    /// 1-based index of the owning word.
    pub word_index: usize,
    /// Opaque model token id.
    pub id: u32,
}

/// A token-level feature: a (possibly duplicated) word node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenNode {
    pub text: String,
    pub id: u32,
    pub word_index: usize,
    pub level: usize,
}

/// A dependency tree whose features are model tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedTree {
    tree: DependencyTree,
    tokens: Vec<TokenNode>,
    alignment: Vec<Range<usize>>,
    levels: Vec<usize>,
    level_sets: Vec<Vec<usize>>,
}

impl TokenizedTree {
    pub fn word_tree(&self) -> &DependencyTree {
        &self.tree
    }

    pub fn tokens(&self) -> &[TokenNode] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.tokens.iter().map(|t| t.id).collect()
    }

    pub fn token_texts(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.text.clone()).collect()
    }

    /// Token range owned by the word at 1-based `word_index`.
    pub fn word_span(&self, word_index: usize) -> Option<Range<usize>> {
        self.alignment.get(word_index.checked_sub(1)?).cloned()
    }

    pub fn depth(&self) -> usize {
        self.level_sets.len()
    }

    pub fn level_set(&self, l: usize) -> &[usize] {
        &self.level_sets[l - 1]
    }

    pub fn level_widths(&self) -> Vec<usize> {
        self.level_sets.iter().map(Vec::len).collect()
    }

    /// Head of token `i` expressed as a token-level word index (the word's head).
    pub fn head_word(&self, i: usize) -> usize {
        self.tree.nodes[self.tokens[i].word_index - 1].head_index
    }

    /// Tokenizes with one token per word, ids from `id_of(word form)`.
    pub fn one_token_per_word(tree: &DependencyTree, id_of: impl Fn(&str) -> u32) -> Self {
        let spans: Vec<TokenSpan> = tree
            .nodes()
            .iter()
            .map(|w| TokenSpan { text: w.text.clone(), word_index: w.word_index, id: id_of(&w.text) })
            .collect();
        expand_subtokens(tree, &spans).expect("one span per word always aligns")
    }

    /// Tokenizes from the `TokIds` (and optional `TokForms`) MISC keys written by
    /// an external parser. Returns `Ok(None)` when no word carries `TokIds`.
    pub fn from_misc(tree: &DependencyTree) -> Result<Option<Self>, DepTreeError> {
        if tree.nodes().iter().all(|w| w.misc_value(MISC_TOKEN_IDS).is_none()) {
            return Ok(None);
        }
        let mut spans = Vec::new();
        for w in tree.nodes() {
            let ids = w.misc_value(MISC_TOKEN_IDS).ok_or_else(|| {
                DepTreeError::Alignment(format!("word {} has no {MISC_TOKEN_IDS}", w.word_index))
            })?;
            let ids: Vec<u32> = ids
                .split(',')
                .map(|s| s.trim().parse::<u32>())
                .collect::<Result<_, _>>()
                .map_err(|_| DepTreeError::Alignment(format!("word {}: bad {MISC_TOKEN_IDS} {ids:?}", w.word_index)))?;
            let forms: Vec<String> = match w.misc_value(MISC_TOKEN_FORMS) {
                Some(f) => f.split(',').map(str::to_string).collect(),
                None if ids.len() == 1 => vec![w.text.clone()],
                None => (0..ids.len()).map(|k| format!("{}#{}", w.text, k + 1)).collect(),
            };
            if forms.len() != ids.len() {
                return Err(DepTreeError::Alignment(format!(
                    "word {}: {} token ids but {} forms",
                    w.word_index,
                    ids.len(),
                    forms.len()
                )));
            }
            spans.extend(ids.into_iter().zip(forms).map(|(id, text)| TokenSpan { text, word_index: w.word_index, id }));
        }
        expand_subtokens(tree, &spans).map(Some)
    }

    /// Sums token values back to one value per word.
    pub fn word_values(&self, token_values: &[f64]) -> Vec<f64> {
        self.alignment.iter().map(|r| token_values[r.clone()].iter().sum()).collect()
    }
}

impl Leveled for TokenizedTree {
    fn feature_levels(&self) -> &[usize] {
        &self.levels
    }
}

/// Duplicates word nodes so every model token becomes a feature at its word's level.
/// Spans must list tokens in sentence order and cover every word.
pub fn expand_subtokens(tree: &DependencyTree, token_spans: &[TokenSpan]) -> Result<TokenizedTree, DepTreeError> {
    let n = tree.len();
    let mut alignment: Vec<Range<usize>> = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(token_spans.len());
    for (pos, span) in token_spans.iter().enumerate() {
        if span.word_index == 0 || span.word_index > n {
            return Err(DepTreeError::Alignment(format!(
                "token {:?} references unknown word {}",
                span.text, span.word_index
            )));
        }
        let covered = alignment.len();
        match alignment.last_mut() {
            Some(r) if span.word_index == covered => r.end = pos + 1,
            _ if span.word_index == covered + 1 => alignment.push(pos..pos + 1),
            _ => {
                return Err(DepTreeError::Alignment(format!(
                    "token {:?} for word {} is out of order",
                    span.text, span.word_index
                )))
            }
        }
        tokens.push(TokenNode {
            text: span.text.clone(),
            id: span.id,
            word_index: span.word_index,
            level: tree.levels[span.word_index - 1],
        });
    }
    if alignment.len() != n {
        return Err(DepTreeError::Alignment(format!("spans cover {} of {} words", alignment.len(), n)));
    }
    let levels: Vec<usize> = tokens.iter().map(|t| t.level).collect();
    let level_sets = level_sets_of(&levels);
    Ok(TokenizedTree { tree: tree.clone(), tokens, alignment, levels, level_sets })
}

/// Mean `|word_index - head_index|` over non-root words.
pub fn avg_dependency_distance(tree: &DependencyTree) -> Result<f64, DepTreeError> {
    if tree.len() < 2 {
        return Err(DepTreeError::SingleNode);
    }
    let (sum, count) = tree
        .nodes()
        .iter()
        .filter(|w| w.head_index != 0)
        .fold((0usize, 0usize), |(s, c), w| (s + w.word_index.abs_diff(w.head_index), c + 1));
    Ok(sum as f64 / count as f64)
}

/// A dataset line `{"id": ..., "sentence": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub sentence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooLong,
    TooShort,
    MultiSpan,
    Punctuation,
    Malformed,
    Unparsed,
    Alignment,
}

impl RejectReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::TooLong => "too_long",
            RejectReason::TooShort => "too_short",
            RejectReason::MultiSpan => "multi_span",
            RejectReason::Punctuation => "punctuation",
            RejectReason::Malformed => "malformed",
            RejectReason::Unparsed => "unparsed",
            RejectReason::Alignment => "alignment",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub id: String,
    pub reason: RejectReason,
    pub detail: String,
}

/// Whether the length limits count model tokens or dependency-tree words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthUnit {
    #[default]
    Tokens,
    Words,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub max_tokens: usize,
    pub min_tokens: usize,
    pub punctuation: String,
    pub length_unit: LengthUnit,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            max_tokens: DEFAULT_MAX_TOKENS,
            min_tokens: 1,
            punctuation: DEFAULT_PUNCTUATION.to_string(),
            length_unit: LengthUnit::Tokens,
        }
    }
}

/// A dataset sentence paired with the outcome of parsing and tokenizing it.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub record: SentenceRecord,
    /// `None` when no parse exists for the sentence.
    pub parse: Option<Result<TokenizedTree, DepTreeError>>,
}

#[derive(Debug, Clone, Default)]
pub struct FilterOutcome {
    pub kept: Vec<(SentenceRecord, TokenizedTree)>,
    pub rejected: Vec<Rejection>,
}

/// Applies the dataset rules in order: punctuation in the raw text, missing or
/// broken parse, several roots, then the length bounds.
pub fn filter_dataset(candidates: Vec<Candidate>, config: &FilterConfig) -> FilterOutcome {
    let mut out = FilterOutcome::default();
    for Candidate { record, parse } in candidates {
        let reject = |reason: RejectReason, detail: String| Rejection { id: record.id.clone(), reason, detail };
        if let Some(c) = record.sentence.chars().find(|c| config.punctuation.contains(*c)) {
            out.rejected.push(reject(RejectReason::Punctuation, format!("contains {c:?}")));
            continue;
        }
        let tree = match parse {
            None => {
                out.rejected.push(reject(RejectReason::Unparsed, "no dependency parse".into()));
                continue;
            }
            Some(Err(e)) => {
                let reason = match &e {
                    DepTreeError::MultiSpan { .. } => RejectReason::MultiSpan,
                    DepTreeError::Alignment(_) => RejectReason::Alignment,
                    _ => RejectReason::Malformed,
                };
                out.rejected.push(reject(reason, e.to_string()));
                continue;
            }
            Some(Ok(t)) => t,
        };
        let length = match config.length_unit {
            LengthUnit::Tokens => tree.len(),
            LengthUnit::Words => tree.word_tree().len(),
        };
        if length > config.max_tokens {
            out.rejected.push(reject(RejectReason::TooLong, format!("{length} > {}", config.max_tokens)));
        } else if length < config.min_tokens {
            out.rejected.push(reject(RejectReason::TooShort, format!("{length} < {}", config.min_tokens)));
        } else {
            out.kept.push((record, tree));
        }
    }
    out
}

/// Indexes parsed sentences by `sent_id` and by normalized text.
#[derive(Debug, Default)]
pub struct ParseIndex {
    by_id: HashMap<String, usize>,
    by_text: HashMap<String, usize>,
    sentences: Vec<ParsedSentence>,
}

pub fn normalize_text(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl ParseIndex {
    pub fn new(sentences: Vec<ParsedSentence>) -> Self {
        let mut index = ParseIndex::default();
        for (i, s) in sentences.iter().enumerate() {
            if let Some(id) = &s.sent_id {
                index.by_id.entry(id.clone()).or_insert(i);
            }
            let text = match (&s.text, &s.tree) {
                (Some(t), _) => Some(normalize_text(t)),
                (None, Ok(tree)) => Some(normalize_text(&tree.text())),
                (None, Err(_)) => None,
            };
            if let Some(t) = text {
                index.by_text.entry(t).or_insert(i);
            }
        }
        index.sentences = sentences;
        index
    }

    /// Finds the parse for a sentence, preferring a `sent_id` match.
    pub fn lookup(&self, id: &str, text: &str) -> Option<&ParsedSentence> {
        self.by_id
            .get(id)
            .or_else(|| self.by_text.get(&normalize_text(text)))
            .map(|&i| &self.sentences[i])
    }

    pub fn sentences(&self) -> &[ParsedSentence] {
        &self.sentences
    }
}
