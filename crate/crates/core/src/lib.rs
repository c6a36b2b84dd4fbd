//! Shapley-style attributions for next-token predictions, restricted to the
//! coalitions a sentence's dependency tree allows.
//!
//! - [`deptree`]: CoNLL-U input, leveled trees, subtoken expansion, dataset filtering.
//! - [`coalition`]: allowed coalitions per level and their closed-form update counts.
//! - [`attribution`]: the tree-constrained value, its level-weighted variant,
//!   exact Shapley and a random baseline.
//! - [`oracle`]: the value-function contract, toy models, memoization and the
//!   HTTP client.
//! - [`metrics`]: fidelity, div@K, acc@K, coherency and negation alignment.
//! - [`cli`]: the `syntaxshap` command line.

pub mod attribution;
pub mod cli;
pub mod coalition;
pub mod deptree;
pub mod metrics;
pub mod oracle;

pub use attribution::{
    exact_shapley, random_attribution, ranks, syntaxshap, syntaxshap_weighted, AttributionError, AttributionResult,
    Explanation, Method, RunSettings,
};
pub use coalition::{coalitions_at_level, coalitions_for_feature, count_updates, predicted_evaluations, Coalition};
pub use deptree::{parse_conllu, DependencyTree, TokenizedTree};
pub use oracle::{Strategy, ValueOracle, ValueRequest, ValueResponse};
