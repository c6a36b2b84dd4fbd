//! Allowed coalitions over a leveled tree and their update counts.
//!
//! A coalition at level `l` holds every feature above `l` plus any subset of the
//! features at `l`, and nothing deeper. Level 0 holds only the empty coalition.
//! The empty subset at level `l >= 1` reproduces the full coalition of level
//! `l - 1`, so it is skipped: level `l` contributes `2^{n_l} - 1` coalitions.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::deptree::Leveled;

/// Widest level we enumerate (2^20 coalitions).
pub const MAX_LEVEL_WIDTH: usize = 20;
/// Coalitions are 64-bit masks.
pub const MAX_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CoalitionError {
    #[error("level {level} outside 0..={depth}")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("feature {index} outside 0..{n}")]
    FeatureOutOfRange { index: usize, n: usize },
    #[error("level {level} has {width} features, limit is {MAX_LEVEL_WIDTH}")]
    LevelTooWide { level: usize, width: usize },
    #[error("{n} features, limit is {MAX_FEATURES}")]
    TooManyFeatures { n: usize },
}

/// A set of 0-based feature indices.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Coalition(u64);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn from_bits(bits: u64) -> Self {
        Coalition(bits)
    }

    pub fn from_members(members: impl IntoIterator<Item = usize>) -> Self {
        Coalition(members.into_iter().fold(0u64, |m, i| m | (1 << i)))
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < 64 && self.0 & (1 << i) != 0
    }

    #[must_use]
    pub fn with(self, i: usize) -> Self {
        Coalition(self.0 | (1 << i))
    }

    #[must_use]
    pub fn without(self, i: usize) -> Self {
        Coalition(self.0 & !(1 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in increasing order.
    pub fn members(self) -> impl Iterator<Item = usize> {
        let mut rest = self.0;
        std::iter::from_fn(move || {
            if rest == 0 {
                return None;
            }
            let i = rest.trailing_zeros() as usize;
            rest &= rest - 1;
            Some(i)
        })
    }

    /// Keep vector of length `n` (true = present).
    pub fn keep_vector(self, n: usize) -> Vec<bool> {
        (0..n).map(|i| self.contains(i)).collect()
    }

    pub fn from_keep(keep: &[bool]) -> Self {
        Coalition::from_members(keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i))
    }
}

impl fmt::Debug for Coalition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.members()).finish()
    }
}

/// Lexicographic order of the sorted member lists.
impl Ord for Coalition {
    fn cmp(&self, other: &Self) -> Ordering {
        self.members().cmp(other.members())
    }
}

impl PartialOrd for Coalition {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoalitionFamily {
    pub level: usize,
    pub coalitions: Vec<Coalition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateCount {
    pub level: usize,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationCounts {
    /// Σ_l n_l·N_l: (coalition, feature) pairs a full run updates.
    pub pair_count: u64,
    /// n·2^{n-1}: pairs needed by exact Shapley values.
    pub naive_shapley_count: u128,
}

/// Level masks of a leveled feature set.
#[derive(Debug, Clone)]
pub struct LevelIndex {
    levels: Vec<usize>,
    /// `sets[l]` is the mask of level `l`; `sets[0] == 0`.
    sets: Vec<u64>,
    /// `above[l]` is the mask of all features with level `< l`.
    above: Vec<u64>,
}

impl LevelIndex {
    pub fn new(tree: &(impl Leveled + ?Sized)) -> Result<Self, CoalitionError> {
        let levels = tree.feature_levels().to_vec();
        if levels.len() > MAX_FEATURES {
            return Err(CoalitionError::TooManyFeatures { n: levels.len() });
        }
        let depth = levels.iter().copied().max().unwrap_or(0);
        let mut sets = vec![0u64; depth + 1];
        for (i, &l) in levels.iter().enumerate() {
            sets[l] |= 1 << i;
        }
        for (l, &m) in sets.iter().enumerate() {
            let width = m.count_ones() as usize;
            if width > MAX_LEVEL_WIDTH {
                return Err(CoalitionError::LevelTooWide { level: l, width });
            }
        }
        let mut above = vec![0u64; depth + 2];
        for l in 1..=depth + 1 {
            above[l] = above[l - 1] | sets[l - 1];
        }
        Ok(LevelIndex { levels, sets, above })
    }

    pub fn n(&self) -> usize {
        self.levels.len()
    }

    pub fn depth(&self) -> usize {
        self.sets.len() - 1
    }

    pub fn level_of(&self, i: usize) -> Result<usize, CoalitionError> {
        self.levels.get(i).copied().ok_or(CoalitionError::FeatureOutOfRange { index: i, n: self.n() })
    }

    pub fn levels(&self) -> &[usize] {
        &self.levels
    }

    /// `n_l`, with `n_0 = 0`.
    pub fn width(&self, l: usize) -> usize {
        self.sets.get(l).map_or(0, |m| m.count_ones() as usize)
    }

    fn check_level(&self, l: usize) -> Result<(), CoalitionError> {
        if l > self.depth() {
            Err(CoalitionError::LevelOutOfRange { level: l, depth: self.depth() })
        } else {
            Ok(())
        }
    }

    /// Level-`l` coalitions built from subsets of `X_l \ excluded`, sorted.
    fn level_family(&self, l: usize, excluded: u64) -> Vec<Coalition> {
        if l == 0 {
            return vec![Coalition::EMPTY];
        }
        let base = self.above[l];
        let free = self.sets[l] & !excluded;
        let mut out = Vec::with_capacity((1usize << free.count_ones()) - 1);
        let mut sub = free;
        while sub != 0 {
            out.push(Coalition(base | sub));
            sub = (sub - 1) & free;
        }
        out.sort_unstable();
        out
    }

    pub fn coalitions_at_level(&self, l: usize) -> Result<CoalitionFamily, CoalitionError> {
        self.check_level(l)?;
        Ok(CoalitionFamily { level: l, coalitions: self.level_family(l, 0) })
    }

    /// Lazily walks the coalitions feature `i` can join, one level at a time.
    pub fn feature_coalitions(&self, i: usize) -> Result<FeatureCoalitions<'_>, CoalitionError> {
        let level = self.level_of(i)?;
        Ok(FeatureCoalitions { index: self, feature: i, target_level: level, next_level: 0, buffer: Vec::new().into_iter() })
    }

    /// Closed-form `N_l = Σ_{p=0}^{l-1} 2^{n_p} + 2^{n_l - 1} - l`.
    pub fn count_updates(&self, l: usize) -> Result<UpdateCount, CoalitionError> {
        if l == 0 || l > self.depth() {
            return Err(CoalitionError::LevelOutOfRange { level: l, depth: self.depth() });
        }
        let below: u64 = (0..l).map(|p| 1u64 << self.width(p)).sum();
        let count = below + (1u64 << (self.width(l) - 1)) - l as u64;
        Ok(UpdateCount { level: l, count })
    }

    pub fn predicted_evaluations(&self) -> EvaluationCounts {
        let pair_count = (1..=self.depth())
            .map(|l| self.width(l) as u64 * self.count_updates(l).map(|c| c.count).unwrap_or(0))
            .sum();
        let n = self.n() as u128;
        let naive_shapley_count = if n == 0 { 0 } else { n << (n - 1) };
        EvaluationCounts { pair_count, naive_shapley_count }
    }
}

/// Coalitions a feature can join, ordered by level then member list.
pub struct FeatureCoalitions<'a> {
    index: &'a LevelIndex,
    feature: usize,
    target_level: usize,
    next_level: usize,
    buffer: std::vec::IntoIter<Coalition>,
}

impl Iterator for FeatureCoalitions<'_> {
    type Item = Coalition;

    fn next(&mut self) -> Option<Coalition> {
        loop {
            if let Some(c) = self.buffer.next() {
                return Some(c);
            }
            if self.next_level > self.target_level {
                return None;
            }
            let l = self.next_level;
            self.next_level += 1;
            let excluded = if l == self.target_level { 1u64 << self.feature } else { 0 };
            self.buffer = self.index.level_family(l, excluded).into_iter();
        }
    }
}

pub fn coalitions_at_level(tree: &(impl Leveled + ?Sized), l: usize) -> Result<CoalitionFamily, CoalitionError> {
    LevelIndex::new(tree)?.coalitions_at_level(l)
}

/// Every allowed coalition feature `i` (0-based) can join; never contains `i`.
pub fn coalitions_for_feature(tree: &(impl Leveled + ?Sized), i: usize) -> Result<Vec<Coalition>, CoalitionError> {
    Ok(LevelIndex::new(tree)?.feature_coalitions(i)?.collect())
}

pub fn count_updates(tree: &(impl Leveled + ?Sized), l: usize) -> Result<UpdateCount, CoalitionError> {
    LevelIndex::new(tree)?.count_updates(l)
}

pub fn predicted_evaluations(tree: &(impl Leveled + ?Sized)) -> Result<EvaluationCounts, CoalitionError> {
    Ok(LevelIndex::new(tree)?.predicted_evaluations())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deptree::DependencyTree;
    use proptest::prelude::*;

    fn tree(heads: &[usize]) -> DependencyTree {
        DependencyTree::from_heads(heads).unwrap()
    }

    fn sets(cs: &[Coalition]) -> Vec<Vec<usize>> {
        cs.iter().map(|c| c.members().collect()).collect()
    }

    #[test]
    fn root_with_two_children() {
        // root is word 1 (index 0), children 2 and 3
        let t = tree(&[0, 1, 1]);
        assert_eq!(sets(&coalitions_at_level(&t, 1).unwrap().coalitions), vec![vec![0]]);
        assert_eq!(
            sets(&coalitions_at_level(&t, 2).unwrap().coalitions),
            vec![vec![0, 1], vec![0, 1, 2], vec![0, 2]]
        );
        assert_eq!(coalitions_at_level(&t, 0).unwrap().coalitions, vec![Coalition::EMPTY]);
        assert!(coalitions_at_level(&t, 3).is_err());

        assert_eq!(sets(&coalitions_for_feature(&t, 1).unwrap()), vec![vec![], vec![0], vec![0, 2]]);
        assert_eq!(count_updates(&t, 2).unwrap().count, 3);
        assert_eq!(coalitions_for_feature(&t, 0).unwrap(), vec![Coalition::EMPTY]);
        let counts = predicted_evaluations(&t).unwrap();
        assert_eq!((counts.pair_count, counts.naive_shapley_count), (7, 12));
    }

    #[test]
    fn chain_of_three_top_level() {
        let t = tree(&[0, 1, 2]);
        assert_eq!(sets(&coalitions_at_level(&t, 3).unwrap().coalitions), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn chain_of_four_third_level() {
        let t = tree(&[0, 1, 2, 3]);
        assert_eq!(sets(&coalitions_for_feature(&t, 2).unwrap()), vec![vec![], vec![0], vec![0, 1]]);
        for l in 1..=4 {
            assert_eq!(count_updates(&t, l).unwrap().count, l as u64);
        }
    }

    #[test]
    fn star_closed_form() {
        for k in 1..=8usize {
            let mut heads = vec![0];
            heads.extend(std::iter::repeat(1).take(k));
            let t = tree(&heads);
            assert_eq!(count_updates(&t, 2).unwrap().count, (1u64 << (k - 1)) + 1);
            assert_eq!(count_updates(&t, 1).unwrap().count, 1);
        }
    }

    #[test]
    fn single_token() {
        let counts = predicted_evaluations(&tree(&[0])).unwrap();
        assert_eq!((counts.pair_count, counts.naive_shapley_count), (1, 1));
    }

    #[test]
    fn errors() {
        let t = tree(&[0, 1]);
        assert!(matches!(count_updates(&t, 0), Err(CoalitionError::LevelOutOfRange { .. })));
        assert!(matches!(coalitions_for_feature(&t, 2), Err(CoalitionError::FeatureOutOfRange { .. })));
        let mut heads = vec![0];
        heads.extend(std::iter::repeat(1).take(21));
        assert!(matches!(LevelIndex::new(&tree(&heads)), Err(CoalitionError::LevelTooWide { level: 2, width: 21 })));
    }

    #[test]
    fn ordering_is_lexicographic() {
        let a = Coalition::from_members([0, 2]);
        let b = Coalition::from_members([0, 1, 5]);
        assert!(b < a);
        assert!(Coalition::EMPTY < b);
    }

    fn random_heads() -> impl Strategy<Value = Vec<usize>> {
        (1usize..=12).prop_flat_map(|n| {
            proptest::collection::vec(any::<prop::sample::Index>(), n - 1).prop_map(move |picks| {
                let mut heads = vec![0usize];
                for (k, p) in picks.iter().enumerate() {
                    heads.push(p.index(k + 1) + 1);
                }
                heads
            })
        })
    }

    proptest! {
        #[test]
        fn family_sizes_and_properties(heads in random_heads()) {
            let t = tree(&heads);
            let idx = LevelIndex::new(&t).unwrap();
            let mut total = 1usize;
            for l in 1..=idx.depth() {
                let fam = idx.coalitions_at_level(l).unwrap();
                prop_assert_eq!(fam.coalitions.len(), (1usize << idx.width(l)) - 1);
                total += fam.coalitions.len();
                for c in &fam.coalitions {
                    for (i, &li) in t.levels().iter().enumerate() {
                        if li > l { prop_assert!(!c.contains(i)); }
                        if li < l { prop_assert!(c.contains(i)); }
                    }
                }
                prop_assert!(fam.coalitions.windows(2).all(|w| w[0] < w[1]));
            }
            let expected: usize = 1 + (1..=idx.depth()).map(|l| (1usize << idx.width(l)) - 1).sum::<usize>();
            prop_assert_eq!(total, expected);
        }

        #[test]
        fn feature_coalitions_match_count(heads in random_heads()) {
            let t = tree(&heads);
            for i in 0..t.len() {
                let l = t.levels()[i];
                let cs = coalitions_for_feature(&t, i).unwrap();
                prop_assert_eq!(cs.len() as u64, count_updates(&t, l).unwrap().count);
                let mut dedup = cs.clone();
                dedup.sort();
                dedup.dedup();
                prop_assert_eq!(dedup.len(), cs.len());
                for c in &cs {
                    prop_assert!(!c.contains(i));
                    if c.is_empty() {
                        continue;
                    }
                    // a nonempty S is an allowed coalition at some level <= l_i
                    let lvl = c.members().map(|m| t.levels()[m]).max().unwrap();
                    prop_assert!(lvl <= l);
                    for (j, &lj) in t.levels().iter().enumerate() {
                        if lj < lvl { prop_assert!(c.contains(j)); }
                    }
                }
            }
        }
    }
}
