use std::collections::HashMap;

use super::{respond_from_distribution, top_k_of, ModelMeta, OracleError, ValueOracle, ValueRequest, ValueResponse};
use crate::coalition::Coalition;

/// Wraps an oracle so that one position never influences the output.
#[derive(Debug, Clone)]
pub struct IgnoreToken<O> {
    inner: O,
    ignored: usize,
}

pub fn ignore_token_lm<O: ValueOracle>(inner: O, ignored: usize) -> IgnoreToken<O> {
    IgnoreToken { inner, ignored }
}

impl<O: ValueOracle> ValueOracle for IgnoreToken<O> {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        if self.ignored >= request.keep.len() {
            return Err(OracleError::InvalidRequest(format!(
                "ignored position {} outside {} tokens",
                self.ignored,
                request.keep.len()
            )));
        }
        let mut forced = request.clone();
        forced.keep[self.ignored] = false;
        self.inner.evaluate(&forced)
    }

    fn meta(&self) -> ModelMeta {
        let inner = self.inner.meta();
        ModelMeta { model: format!("ignore({},{})", inner.model, self.ignored), ..inner }
    }
}

/// Pointwise sum of two oracles.
///
/// The sum is not a distribution; probabilities may exceed 1. It exists to
/// exercise the linearity of the attribution in the value function.
#[derive(Debug, Clone)]
pub struct SumOracle<F, G> {
    f: F,
    g: G,
}

pub fn sum_oracle<F: ValueOracle, G: ValueOracle>(f: F, g: G) -> SumOracle<F, G> {
    SumOracle { f, g }
}

impl<F: ValueOracle, G: ValueOracle> ValueOracle for SumOracle<F, G> {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        if request.top_k == 0 {
            let a = self.f.evaluate(request)?;
            let b = self.g.evaluate(request)?;
            let target_probs = a.target_probs.iter().zip(&b.target_probs).map(|(x, y)| x + y).collect();
            return Ok(ValueResponse { target_probs, top: Vec::new() });
        }
        // Ranking a sum needs both full distributions.
        let vocab = self.f.meta().vocab_size.min(self.g.meta().vocab_size);
        let mut full = request.clone();
        full.targets = (0..vocab).collect();
        full.top_k = 0;
        let a = self.f.evaluate(&full)?;
        let b = self.g.evaluate(&full)?;
        let dist: Vec<f64> = a.target_probs.iter().zip(&b.target_probs).map(|(x, y)| x + y).collect();
        let mut response = respond_from_distribution(&dist, request)?;
        response.top = top_k_of(&dist, request.top_k);
        Ok(response)
    }

    fn meta(&self) -> ModelMeta {
        let (a, b) = (self.f.meta(), self.g.meta());
        ModelMeta {
            model: format!("sum({},{})", a.model, b.model),
            vocab_size: a.vocab_size.min(b.vocab_size),
            max_tokens: a.max_tokens.min(b.max_tokens),
        }
    }
}

/// Tabulated value function for one target token.
///
/// The target's probability is looked up by coalition (the keep vector) and
/// falls back to `default`; every other token has probability 0.
#[derive(Debug, Clone)]
pub struct TableOracle {
    target: u32,
    vocab_size: u32,
    table: HashMap<Coalition, f64>,
    default: f64,
}

impl TableOracle {
    pub fn new(target: u32, vocab_size: u32) -> Self {
        assert!(target < vocab_size);
        TableOracle { target, vocab_size, table: HashMap::new(), default: 0.0 }
    }

    #[must_use]
    pub fn with_default(mut self, default: f64) -> Self {
        self.default = default;
        self
    }

    pub fn insert(&mut self, coalition: Coalition, value: f64) {
        self.table.insert(coalition, value);
    }

    #[must_use]
    pub fn with(mut self, members: &[usize], value: f64) -> Self {
        self.insert(Coalition::from_members(members.iter().copied()), value);
        self
    }

    pub fn value(&self, coalition: Coalition) -> f64 {
        self.table.get(&coalition).copied().unwrap_or(self.default)
    }

    pub fn target(&self) -> u32 {
        self.target
    }
}

impl ValueOracle for TableOracle {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        request.validate()?;
        let mut dist = vec![0.0; self.vocab_size as usize];
        dist[self.target as usize] = self.value(Coalition::from_keep(&request.keep));
        respond_from_distribution(&dist, request)
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta { model: "table".into(), vocab_size: self.vocab_size, max_tokens: 64 }
    }
}
