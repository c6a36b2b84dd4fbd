//! The value-function contract: the probability a model assigns to target next
//! tokens when only a subset of the sentence is visible.
//!
//! Masking happens on the oracle side. The engine only ever sends keep vectors;
//! how a masked position is hidden from the model is the oracle's business
//! (zero attention or seeded random replacement).

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod combinators;
mod memo;
mod remote;
mod toy;

pub use combinators::{ignore_token_lm, sum_oracle, IgnoreToken, SumOracle, TableOracle};
pub use memo::{memoized, CallCounters, Memoized};
pub use remote::{remote_oracle, RemoteOracle, AUTH_TOKEN_ENV};
pub use toy::{toy_hash_lm, toy_token_id, ToyHashLm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    ZeroAttention,
    RandomReplace,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::ZeroAttention => "zero_attention",
            Strategy::RandomReplace => "random_replace",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "zero_attention" => Ok(Strategy::ZeroAttention),
            "random_replace" => Ok(Strategy::RandomReplace),
            other => Err(format!("unknown masking strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ValueRequest {
    pub tokens: Vec<u32>,
    /// `true` = token is part of the coalition.
    pub keep: Vec<bool>,
    pub strategy: Strategy,
    pub targets: Vec<u32>,
    /// Number of top predictions to return, 0 for none.
    pub top_k: usize,
    pub seed: u64,
}

impl ValueRequest {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.keep.len() != self.tokens.len() {
            return Err(OracleError::InvalidRequest(format!(
                "keep has {} entries for {} tokens",
                self.keep.len(),
                self.tokens.len()
            )));
        }
        if self.top_k == 0 && self.targets.is_empty() {
            return Err(OracleError::InvalidRequest("no targets and top_k = 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueResponse {
    /// Aligned with the request's `targets`.
    pub target_probs: Vec<f64>,
    /// `(token id, probability)`, probability descending, ties by id ascending.
    pub top: Vec<(u32, f64)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub model: String,
    pub vocab_size: u32,
    #[serde(default)]
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("protocol: {message} (payload: {excerpt})")]
    Protocol { message: String, excerpt: String },
    #[error("{0}")]
    Model(String),
}

/// A model scoring next tokens under a keep vector. Identical requests must
/// produce identical responses.
pub trait ValueOracle: Send + Sync {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError>;
    fn meta(&self) -> ModelMeta;
}

impl<T: ValueOracle + ?Sized> ValueOracle for &T {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        (**self).evaluate(request)
    }
    fn meta(&self) -> ModelMeta {
        (**self).meta()
    }
}

impl<T: ValueOracle + ?Sized> ValueOracle for Box<T> {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        (**self).evaluate(request)
    }
    fn meta(&self) -> ModelMeta {
        (**self).meta()
    }
}

impl<T: ValueOracle + ?Sized> ValueOracle for Arc<T> {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        (**self).evaluate(request)
    }
    fn meta(&self) -> ModelMeta {
        (**self).meta()
    }
}

/// The `k` most probable tokens of a full distribution, ties by smaller id.
pub fn top_k_of(dist: &[f64], k: usize) -> Vec<(u32, f64)> {
    let mut order: Vec<u32> = (0..dist.len() as u32).collect();
    order.sort_by(|&a, &b| dist[b as usize].total_cmp(&dist[a as usize]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|t| (t, dist[t as usize])).collect()
}

/// Answers a request from a full distribution over the vocabulary.
pub fn respond_from_distribution(dist: &[f64], request: &ValueRequest) -> Result<ValueResponse, OracleError> {
    let target_probs = request
        .targets
        .iter()
        .map(|&t| {
            dist.get(t as usize)
                .copied()
                .ok_or_else(|| OracleError::InvalidRequest(format!("target {t} outside vocabulary of {}", dist.len())))
        })
        .collect::<Result<_, _>>()?;
    Ok(ValueResponse { target_probs, top: top_k_of(dist, request.top_k) })
}

/// Checks a response against its request: shapes, probability range and top ordering.
pub fn validate_response(request: &ValueRequest, response: &ValueResponse) -> Result<(), String> {
    if response.target_probs.len() != request.targets.len() {
        return Err(format!(
            "{} target probabilities for {} targets",
            response.target_probs.len(),
            request.targets.len()
        ));
    }
    let in_range = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
    if let Some(p) = response.target_probs.iter().find(|&&p| !in_range(p)) {
        return Err(format!("target probability {p} outside [0, 1]"));
    }
    if response.top.len() > request.top_k {
        return Err(format!("{} top entries for top_k = {}", response.top.len(), request.top_k));
    }
    if let Some(&(t, p)) = response.top.iter().find(|(_, p)| !in_range(*p)) {
        return Err(format!("top probability {p} for token {t} outside [0, 1]"));
    }
    for w in response.top.windows(2) {
        let ((a, pa), (b, pb)) = (w[0], w[1]);
        if !(pa > pb || (pa == pb && a < b)) {
            return Err(format!("top list not sorted at tokens {a} and {b}"));
        }
    }
    Ok(())
}

/// Probability of a single target under a keep vector.
pub fn target_prob(
    oracle: &(impl ValueOracle + ?Sized),
    tokens: &[u32],
    keep: Vec<bool>,
    strategy: Strategy,
    seed: u64,
    target: u32,
) -> Result<f64, OracleError> {
    let request = ValueRequest { tokens: tokens.to_vec(), keep, strategy, targets: vec![target], top_k: 0, seed };
    let response = oracle.evaluate(&request)?;
    response
        .target_probs
        .first()
        .copied()
        .ok_or_else(|| OracleError::Protocol { message: "empty target_probs".into(), excerpt: String::new() })
}

/// The model's most probable next token on the unmasked sentence.
pub fn top1(oracle: &(impl ValueOracle + ?Sized), tokens: &[u32], seed: u64) -> Result<(u32, f64), OracleError> {
    let request = ValueRequest {
        tokens: tokens.to_vec(),
        keep: vec![true; tokens.len()],
        strategy: Strategy::ZeroAttention,
        targets: Vec::new(),
        top_k: 1,
        seed,
    };
    let response = oracle.evaluate(&request)?;
    response
        .top
        .first()
        .copied()
        .ok_or_else(|| OracleError::Protocol { message: "empty top list".into(), excerpt: String::new() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(top_k: usize, targets: Vec<u32>) -> ValueRequest {
        ValueRequest { tokens: vec![1, 2], keep: vec![true, false], strategy: Strategy::ZeroAttention, targets, top_k, seed: 0 }
    }

    #[test]
    fn request_validation() {
        assert!(req(0, vec![]).validate().is_err());
        assert!(req(1, vec![]).validate().is_ok());
        let mut r = req(0, vec![3]);
        r.keep.pop();
        assert!(r.validate().is_err());
    }

    #[test]
    fn top_k_tie_break() {
        assert_eq!(top_k_of(&[0.25, 0.5, 0.25], 3), vec![(1, 0.5), (0, 0.25), (2, 0.25)]);
    }

    #[test]
    fn response_validation() {
        let r = req(2, vec![0]);
        let ok = ValueResponse { target_probs: vec![0.2], top: vec![(1, 0.5), (0, 0.2)] };
        assert!(validate_response(&r, &ok).is_ok());
        let bad = ValueResponse { target_probs: vec![1.5], top: vec![] };
        assert!(validate_response(&r, &bad).unwrap_err().contains("outside"));
        let unsorted = ValueResponse { target_probs: vec![0.2], top: vec![(1, 0.2), (0, 0.2)] };
        assert!(validate_response(&r, &unsorted).is_err());
        let short = ValueResponse { target_probs: vec![], top: vec![] };
        assert!(validate_response(&r, &short).is_err());
    }

    #[test]
    fn wire_format() {
        let r = req(1, vec![5]);
        let json = serde_json::to_string(&r).unwrap();
        assert_eq!(
            json,
            r#"{"tokens":[1,2],"keep":[true,false],"strategy":"zero_attention","targets":[5],"top_k":1,"seed":0}"#
        );
        let resp: ValueResponse = serde_json::from_str(r#"{"target_probs":[0.1],"top":[[5,0.1]]}"#).unwrap();
        assert_eq!(resp.top, vec![(5, 0.1)]);
    }
}
