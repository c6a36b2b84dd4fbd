//! Token attributions: the tree-constrained Shapley value, its level-weighted
//! variant, an exact Shapley reference and a random baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coalition::{Coalition, CoalitionError, LevelIndex};
use crate::deptree::TokenizedTree;
use crate::oracle::{memoized, target_prob, top1, OracleError, Strategy, ValueOracle};

/// Largest sentence the exact Shapley reference accepts.
pub const EXACT_SHAPLEY_MAX_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Syntaxshap,
    SyntaxshapW,
    ExactShapley,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Syntaxshap, Method::SyntaxshapW, Method::ExactShapley, Method::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Syntaxshap => "syntaxshap",
            Method::SyntaxshapW => "syntaxshap_w",
            Method::ExactShapley => "exact_shapley",
            Method::Random => "random",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?}, expected one of syntaxshap, syntaxshap_w, exact_shapley, random"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleCalls {
    /// (coalition, feature) marginal terms evaluated.
    pub pairs: u64,
    /// Distinct value-function evaluations.
    pub unique: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: Method,
    pub seed: u64,
    pub target_token: Option<u32>,
    pub values: Vec<f64>,
    pub ranks: Vec<usize>,
    pub oracle_calls: OracleCalls,
}

impl AttributionResult {
    #[must_use]
    pub fn with_target(mut self, target: u32) -> Self {
        self.target_token = Some(target);
        self
    }
}

/// One explained sentence as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub id: String,
    pub tokens: Vec<String>,
    pub token_ids: Vec<u32>,
    pub levels: Vec<usize>,
    #[serde(flatten)]
    pub result: AttributionResult,
}

impl Explanation {
    pub fn new(id: impl Into<String>, tree: &TokenizedTree, result: AttributionResult) -> Self {
        Explanation {
            id: id.into(),
            tokens: tree.token_texts(),
            token_ids: tree.token_ids(),
            levels: tree.tokens().iter().map(|t| t.level).collect(),
            result,
        }
    }
}

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Coalition(#[from] CoalitionError),
    #[error("oracle failed on coalition {coalition:?}: {source}")]
    Oracle {
        coalition: Vec<usize>,
        #[source]
        source: OracleError,
    },
    #[error("{n} features exceed the limit of {max}")]
    TooLarge { n: usize, max: usize },
    #[error("nothing to explain: empty sentence")]
    Empty,
}

/// Per-run knobs shared by every method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunSettings {
    pub strategy: Strategy,
    pub seed: u64,
    /// Token to explain; `None` explains the model's top-1 prediction.
    pub target: Option<u32>,
}

fn resolve_target<O: ValueOracle + ?Sized>(oracle: &O, tokens: &[u32], settings: &RunSettings) -> Result<u32, AttributionError> {
    match settings.target {
        Some(t) => Ok(t),
        None => top1(oracle, tokens, settings.seed)
            .map(|(t, _)| t)
            .map_err(|source| AttributionError::Oracle { coalition: (0..tokens.len()).collect(), source }),
    }
}

/// Averages `f(S ∪ {i}) - f(S)` over the allowed coalitions of each token.
pub fn syntaxshap<O: ValueOracle + ?Sized>(
    tree: &TokenizedTree,
    oracle: &O,
    settings: &RunSettings,
) -> Result<AttributionResult, AttributionError> {
    if tree.is_empty() {
        return Err(AttributionError::Empty);
    }
    let index = LevelIndex::new(tree)?;
    let tokens = tree.token_ids();
    let n = tokens.len();
    let target = resolve_target(oracle, &tokens, settings)?;

    let memo = memoized(oracle);
    let value = |c: Coalition| {
        target_prob(&memo, &tokens, c.keep_vector(n), settings.strategy, settings.seed, target)
            .map_err(|source| AttributionError::Oracle { coalition: c.members().collect(), source })
    };

    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let updates = index.count_updates(index.level_of(i)?)?.count;
        let mut total = 0.0;
        let mut seen = 0u64;
        for s in index.feature_coalitions(i)? {
            total += value(s.with(i))? - value(s)?;
            seen += 1;
        }
        debug_assert_eq!(seen, updates);
        values.push(total / updates as f64);
    }

    let counters = memo.counters();
    Ok(AttributionResult {
        method: Method::Syntaxshap,
        seed: settings.seed,
        target_token: Some(target),
        ranks: ranks(&values),
        values,
        oracle_calls: OracleCalls { pairs: counters.total / 2, unique: counters.unique },
    })
}

/// The tree-constrained value scaled by `1 / level`.
pub fn syntaxshap_weighted<O: ValueOracle + ?Sized>(
    tree: &TokenizedTree,
    oracle: &O,
    settings: &RunSettings,
) -> Result<AttributionResult, AttributionError> {
    let plain = syntaxshap(tree, oracle, settings)?;
    Ok(weight_by_level(plain, tree))
}

/// Rescales an unweighted result by the inverse token levels.
pub fn weight_by_level(mut result: AttributionResult, tree: &TokenizedTree) -> AttributionResult {
    for (v, t) in result.values.iter_mut().zip(tree.tokens()) {
        *v /= t.level as f64;
    }
    result.ranks = ranks(&result.values);
    result.method = Method::SyntaxshapW;
    result
}

/// Classic Shapley values by full subset enumeration.
pub fn exact_shapley<O: ValueOracle + ?Sized>(
    tokens: &[u32],
    oracle: &O,
    settings: &RunSettings,
) -> Result<AttributionResult, AttributionError> {
    let n = tokens.len();
    if n == 0 {
        return Err(AttributionError::Empty);
    }
    if n > EXACT_SHAPLEY_MAX_FEATURES {
        return Err(AttributionError::TooLarge { n, max: EXACT_SHAPLEY_MAX_FEATURES });
    }
    let target = resolve_target(oracle, tokens, settings)?;
    let memo = memoized(oracle);
    let value = |c: Coalition| {
        target_prob(&memo, tokens, c.keep_vector(n), settings.strategy, settings.seed, target)
            .map_err(|source| AttributionError::Oracle { coalition: c.members().collect(), source })
    };

    // weight[s] = s! (n - s - 1)! / n!
    let fact: Vec<f64> = (0..=n).scan(1.0, |acc, k| {
        if k > 0 {
            *acc *= k as f64;
        }
        Some(*acc)
    })
    .collect();
    let weight: Vec<f64> = (0..n).map(|s| fact[s] * fact[n - s - 1] / fact[n]).collect();

    let full = (1u64 << n) - 1;
    let mut values = Vec::with_capacity(n);
    for i in 0..n {
        let others = full & !(1 << i);
        let mut phi = 0.0;
        let mut sub = others;
        loop {
            let s = Coalition::from_bits(sub);
            phi += weight[s.len()] * (value(s.with(i))? - value(s)?);
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & others;
        }
        values.push(phi);
    }

    let counters = memo.counters();
    Ok(AttributionResult {
        method: Method::ExactShapley,
        seed: settings.seed,
        target_token: Some(target),
        ranks: ranks(&values),
        values,
        oracle_calls: OracleCalls { pairs: counters.total / 2, unique: counters.unique },
    })
}

/// I.i.d. standard normal scores from a seeded generator.
pub fn random_attribution(n: usize, seed: u64) -> AttributionResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    AttributionResult {
        method: Method::Random,
        seed,
        target_token: None,
        ranks: ranks(&values),
        values,
        oracle_calls: OracleCalls::default(),
    }
}

/// Mixes the token ids into the run seed so equal-length sentences get
/// different random baselines.
fn sentence_seed(seed: u64, tokens: &[u32]) -> u64 {
    tokens.iter().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, &t| (h ^ t as u64).wrapping_mul(0x0100_0000_01b3).rotate_left(17))
}

/// Rank 1 for the largest value; ties go to the smaller index.
pub fn ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut out = vec![0; values.len()];
    for (pos, idx) in order.into_iter().enumerate() {
        out[idx] = pos + 1;
    }
    out
}

/// Runs `method` on one sentence. The random baseline still asks the oracle
/// for the explained token so downstream metrics have a target.
pub fn explain<O: ValueOracle + ?Sized>(
    method: Method,
    tree: &TokenizedTree,
    oracle: &O,
    settings: &RunSettings,
) -> Result<AttributionResult, AttributionError> {
    match method {
        Method::Syntaxshap => syntaxshap(tree, oracle, settings),
        Method::SyntaxshapW => syntaxshap_weighted(tree, oracle, settings),
        Method::ExactShapley => exact_shapley(&tree.token_ids(), oracle, settings),
        Method::Random => {
            if tree.is_empty() {
                return Err(AttributionError::Empty);
            }
            let tokens = tree.token_ids();
            let target = resolve_target(oracle, &tokens, settings)?;
            let mut r = random_attribution(tree.len(), sentence_seed(settings.seed, &tokens));
            r.seed = settings.seed;
            Ok(r.with_target(target))
        }
    }
}
