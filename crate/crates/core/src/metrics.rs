//! Faithfulness metrics (fidelity, top-K probability divergence, top-K overlap)
//! and the two qualitative procedures: pair coherency and negation alignment.
//!
//! Every masked input keeps the `ceil(t·n)` best-ranked tokens (at least one).
//! Metrics consume ranks, so any order-preserving rescaling of the attribution
//! values leaves them unchanged.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{ranks, Explanation};
use crate::oracle::{OracleError, Strategy, ValueOracle, ValueRequest};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConfig {
    /// Fraction of tokens kept, in (0, 1].
    pub t: f64,
    pub k: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig { t: 0.5, k: 10, strategy: Strategy::ZeroAttention, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("invalid metric config: {0}")]
    Config(String),
    #[error("record {id}: {message}")]
    Record { id: String, message: String },
    #[error("record {id}: {source}")]
    Oracle {
        id: String,
        #[source]
        source: OracleError,
    },
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), MetricError> {
        if !(self.t > 0.0 && self.t <= 1.0) {
            return Err(MetricError::Config(format!("t = {} outside (0, 1]", self.t)));
        }
        if self.k == 0 {
            return Err(MetricError::Config("K must be at least 1".into()));
        }
        Ok(())
    }
}

/// Number of tokens kept out of `n` at fraction `t`: `ceil(t·n)`, at least 1.
pub fn keep_count(n: usize, t: f64) -> usize {
    // the epsilon absorbs products like 0.7 * 10 = 7.000000000000001
    let raw = (t * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSentence {
    pub tokens: Vec<u32>,
    pub keep: Vec<bool>,
}

impl MaskedSentence {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Keeps the best-ranked `ceil(t·n)` tokens of an explanation.
pub fn top_tokens(explanation: &Explanation, t: f64) -> MaskedSentence {
    let ranks = &explanation.result.ranks;
    let kept = keep_count(ranks.len(), t);
    MaskedSentence { tokens: explanation.token_ids.clone(), keep: ranks.iter().map(|&r| r <= kept).collect() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMetrics {
    pub id: String,
    pub fid: f64,
    pub fid_rand: f64,
    pub div_at_k: f64,
    pub acc_at_k: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricMeans {
    pub fid: f64,
    pub fid_rand: f64,
    pub div_at_k: f64,
    pub acc_at_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub config: MetricConfig,
    /// Records that contributed to the means.
    pub n: usize,
    pub records: Vec<RecordMetrics>,
    pub mean: MetricMeans,
    pub failures: Vec<RecordFailure>,
}

/// Scores one explanation: two or three oracle calls (full input, masked
/// input, and masked input under random replacement).
pub fn evaluate_record<O: ValueOracle + ?Sized>(
    explanation: &Explanation,
    oracle: &O,
    config: &MetricConfig,
) -> Result<RecordMetrics, MetricError> {
    let id = explanation.id.clone();
    let oracle_err = |source| MetricError::Oracle { id: id.clone(), source };
    let target = explanation
        .result
        .target_token
        .ok_or_else(|| MetricError::Record { id: id.clone(), message: "explanation has no target token".into() })?;
    let tokens = &explanation.token_ids;
    if explanation.result.ranks.len() != tokens.len() {
        return Err(MetricError::Record { id, message: "rank vector length differs from token count".into() });
    }

    let full = oracle
        .evaluate(&ValueRequest {
            tokens: tokens.clone(),
            keep: vec![true; tokens.len()],
            strategy: config.strategy,
            targets: vec![target],
            top_k: config.k,
            seed: config.seed,
        })
        .map_err(oracle_err)?;

    let masked = top_tokens(explanation, config.t);
    let mut targets = vec![target];
    targets.extend(full.top.iter().map(|&(tok, _)| tok));
    let reduced = oracle
        .evaluate(&ValueRequest {
            tokens: tokens.clone(),
            keep: masked.keep.clone(),
            strategy: config.strategy,
            targets,
            top_k: config.k,
            seed: config.seed,
        })
        .map_err(oracle_err)?;
    let randomized = oracle
        .evaluate(&ValueRequest {
            tokens: tokens.clone(),
            keep: masked.keep,
            strategy: Strategy::RandomReplace,
            targets: vec![target],
            top_k: 0,
            seed: config.seed,
        })
        .map_err(oracle_err)?;

    let shape = |ok: bool| {
        if ok {
            Ok(())
        } else {
            Err(MetricError::Record { id: id.clone(), message: "oracle response has the wrong shape".into() })
        }
    };
    shape(full.target_probs.len() == 1 && reduced.target_probs.len() == full.top.len() + 1 && randomized.target_probs.len() == 1)?;

    let base = full.target_probs[0];
    let div_at_k = full.top.iter().zip(&reduced.target_probs[1..]).map(|(&(_, p), &q)| p - q).sum();
    let full_top: HashSet<u32> = full.top.iter().map(|&(t, _)| t).collect();
    let common = reduced.top.iter().filter(|(t, _)| full_top.contains(t)).count();
    Ok(RecordMetrics {
        id,
        fid: base - reduced.target_probs[0],
        fid_rand: base - randomized.target_probs[0],
        div_at_k,
        acc_at_k: common as f64 / config.k as f64,
    })
}

/// Scores every record; failed records are listed and left out of the means.
pub fn evaluate_dataset<O: ValueOracle + ?Sized>(
    explanations: &[Explanation],
    oracle: &O,
    config: &MetricConfig,
) -> Result<MetricReport, MetricError> {
    config.validate()?;
    let outcomes: Vec<_> = explanations.par_iter().map(|e| evaluate_record(e, oracle, config)).collect();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (e, outcome) in explanations.iter().zip(outcomes) {
        match outcome {
            Ok(r) => records.push(r),
            Err(err) => failures.push(RecordFailure { id: e.id.clone(), error: err.to_string() }),
        }
    }
    let n = records.len();
    let mean = if n == 0 {
        MetricMeans::default()
    } else {
        let avg = |f: fn(&RecordMetrics) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
        MetricMeans {
            fid: avg(|r| r.fid),
            fid_rand: avg(|r| r.fid_rand),
            div_at_k: avg(|r| r.div_at_k),
            acc_at_k: avg(|r| r.acc_at_k),
        }
    };
    Ok(MetricReport { config: *config, n, records, mean, failures })
}

/// Mean drop of the explained token's probability after masking.
pub fn fidelity<O: ValueOracle + ?Sized>(explanations: &[Explanation], oracle: &O, config: &MetricConfig) -> Result<f64, MetricError> {
    Ok(evaluate_dataset(explanations, oracle, config)?.mean.fid)
}

/// Fidelity with masked tokens replaced by seeded random vocabulary tokens.
pub fn fidelity_random<O: ValueOracle + ?Sized>(explanations: &[Explanation], oracle: &O, config: &MetricConfig) -> Result<f64, MetricError> {
    Ok(evaluate_dataset(explanations, oracle, config)?.mean.fid_rand)
}

/// Mean summed probability drop over the unmasked top-K tokens.
pub fn prob_divergence_at_k<O: ValueOracle + ?Sized>(explanations: &[Explanation], oracle: &O, config: &MetricConfig) -> Result<f64, MetricError> {
    Ok(evaluate_dataset(explanations, oracle, config)?.mean.div_at_k)
}

/// Mean share of the unmasked top-K tokens still in the masked top-K.
pub fn accuracy_at_k<O: ValueOracle + ?Sized>(explanations: &[Explanation], oracle: &O, config: &MetricConfig) -> Result<f64, MetricError> {
    Ok(evaluate_dataset(explanations, oracle, config)?.mean.acc_at_k)
}

/// Population mean and variance.
pub fn mean_variance(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var))
}

/// Cosine similarity of two rank vectors, `None` if the lengths differ or a
/// vector is all zeros.
pub fn cosine(a: &[usize], b: &[usize]) -> Option<f64> {
    if a.len() != b.len() || a.is_empty() {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(dot / (na * nb))
}

/// Ranks of `values` after dropping the `excluded` positions.
pub fn ranks_excluding(values: &[f64], excluded: &[usize]) -> Vec<usize> {
    let kept: Vec<f64> = values.iter().enumerate().filter(|(i, _)| !excluded.contains(i)).map(|(_, &v)| v).collect();
    ranks(&kept)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub id: String,
    pub predictions_equal: bool,
    /// Rank vectors with the negation tokens already removed.
    pub ranks_a: Vec<usize>,
    pub ranks_b: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub mean_cosine: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencyReport {
    pub equal: GroupStats,
    pub different: GroupStats,
    /// Equal-group mean minus different-group mean; absent if a group is empty.
    pub difference: Option<f64>,
    pub skipped: Vec<String>,
}

pub fn coherency(pairs: &[SentencePair]) -> CoherencyReport {
    let mut equal = Vec::new();
    let mut different = Vec::new();
    let mut skipped = Vec::new();
    for p in pairs {
        match cosine(&p.ranks_a, &p.ranks_b) {
            Some(c) if p.predictions_equal => equal.push(c),
            Some(c) => different.push(c),
            None => {
                log::warn!("pair {}: rank vectors of length {} and {} skipped", p.id, p.ranks_a.len(), p.ranks_b.len());
                skipped.push(p.id.clone());
            }
        }
    }
    let group = |xs: &[f64]| GroupStats { n: xs.len(), mean_cosine: mean_variance(xs).map(|(m, _)| m) };
    let (equal, different) = (group(&equal), group(&different));
    let difference = match (equal.mean_cosine, different.mean_cosine) {
        (Some(a), Some(b)) => Some(a - b),
        _ => None,
    };
    CoherencyReport { equal, different, difference, skipped }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentRecord {
    pub id: String,
    /// 0-based token position of the negation, if found.
    pub negation_index: Option<usize>,
    pub ranks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub n: usize,
    /// `(id, rank of the negation token)` per accepted record.
    pub negation_ranks: Vec<(String, usize)>,
    /// rank → number of records.
    pub distribution: BTreeMap<usize, usize>,
    pub top_rank_share: Option<f64>,
    pub rejected: Vec<String>,
}

/// Where the negation token lands in each explanation's ranking.
pub fn semantic_alignment(records: &[AlignmentRecord]) -> AlignmentReport {
    let mut negation_ranks = Vec::new();
    let mut rejected = Vec::new();
    for r in records {
        match r.negation_index.and_then(|i| r.ranks.get(i)) {
            Some(&rank) => negation_ranks.push((r.id.clone(), rank)),
            None => rejected.push(r.id.clone()),
        }
    }
    let mut distribution = BTreeMap::new();
    for (_, rank) in &negation_ranks {
        *distribution.entry(*rank).or_insert(0) += 1;
    }
    let n = negation_ranks.len();
    let top_rank_share = (n > 0).then(|| distribution.get(&1).copied().unwrap_or(0) as f64 / n as f64);
    AlignmentReport { n, negation_ranks, distribution, top_rank_share, rejected }
}
