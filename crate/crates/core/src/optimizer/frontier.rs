//! Per-instance Pareto frontier over validation scores.
//!
//! A candidate's win set is the set of validation instances where it attains
//! the pool maximum. The frontier keeps every candidate with a non-empty win
//! set that is not a strict subset of another candidate's win set.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use super::{CandidateId, OptimizerError};

/// Rows are candidates, columns validation instances.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ScoreMatrix {
    n_instances: usize,
    ids: Vec<CandidateId>,
    rows: Vec<Vec<u8>>,
}

/// Fixed-width bitset over validation instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WinSet {
    words: Vec<u64>,
}

impl WinSet {
    fn empty(n: usize) -> Self {
        Self {
            words: vec![0; n.div_ceil(64)],
        }
    }

    fn insert(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.words[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn is_subset(&self, other: &WinSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn is_strict_subset(&self, other: &WinSet) -> bool {
        self.is_subset(other) && self != other
    }
}

impl ScoreMatrix {
    pub fn new(n_instances: usize) -> Self {
        Self {
            n_instances,
            ..Self::default()
        }
    }

    pub fn push(&mut self, id: CandidateId, scores: Vec<u8>) -> Result<(), OptimizerError> {
        if scores.len() != self.n_instances {
            return Err(OptimizerError::ShapeMismatch {
                expected: self.n_instances,
                found: scores.len(),
            });
        }
        if self.ids.contains(&id) {
            return Err(OptimizerError::InvalidConfig(format!("candidate {id} already scored")));
        }
        self.ids.push(id);
        self.rows.push(scores);
        Ok(())
    }

    pub fn n_instances(&self) -> usize {
        self.n_instances
    }

    pub fn ids(&self) -> &[CandidateId] {
        &self.ids
    }

    pub fn scores(&self, id: CandidateId) -> Option<&[u8]> {
        self.ids
            .iter()
            .position(|&c| c == id)
            .map(|i| self.rows[i].as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn column_max(&self) -> Vec<u8> {
        let mut max = vec![0u8; self.n_instances];
        for row in &self.rows {
            for (m, &s) in max.iter_mut().zip(row) {
                *m = (*m).max(s);
            }
        }
        max
    }

    /// Win set of every row, in row order.
    pub fn win_sets(&self) -> Vec<WinSet> {
        let max = self.column_max();
        self.rows
            .iter()
            .map(|row| {
                let mut w = WinSet::empty(self.n_instances);
                for (i, (&s, &m)) in row.iter().zip(&max).enumerate() {
                    if s == m {
                        w.insert(i);
                    }
                }
                w
            })
            .collect()
    }

    pub fn win_set(&self, id: CandidateId) -> Option<WinSet> {
        let idx = self.ids.iter().position(|&c| c == id)?;
        Some(self.win_sets().swap_remove(idx))
    }
}

/// Frontier members in pool order.
pub fn update_frontier(m: &ScoreMatrix) -> Result<Vec<CandidateId>, OptimizerError> {
    if m.is_empty() {
        return Err(OptimizerError::EmptyPool);
    }
    let wins = m.win_sets();
    let frontier = m
        .ids
        .iter()
        .zip(&wins)
        .filter(|(_, w)| !w.is_empty())
        .filter(|(_, w)| !wins.iter().any(|other| w.is_strict_subset(other)))
        .map(|(&id, _)| id)
        .collect();
    Ok(frontier)
}

/// Samples a frontier member with probability proportional to its win-set
/// size. Falls back to uniform sampling when every weight is zero.
pub fn select_parent<R: Rng + ?Sized>(
    frontier: &[CandidateId],
    m: &ScoreMatrix,
    rng: &mut R,
) -> Result<CandidateId, OptimizerError> {
    if frontier.is_empty() {
        return Err(OptimizerError::EmptyPool);
    }
    let wins = m.win_sets();
    let weights: Vec<usize> = frontier
        .iter()
        .map(|id| {
            m.ids
                .iter()
                .position(|c| c == id)
                .map(|i| wins[i].len())
                .ok_or(OptimizerError::UnknownCandidate(*id))
        })
        .collect::<Result<_, _>>()?;
    let idx = match WeightedIndex::new(&weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => rng.random_range(0..frontier.len()),
    };
    Ok(frontier[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn matrix(rows: &[&[u8]]) -> ScoreMatrix {
        let mut m = ScoreMatrix::new(rows[0].len());
        for (i, r) in rows.iter().enumerate() {
            m.push(CandidateId(i as u32), r.to_vec()).unwrap();
        }
        m
    }

    fn ids(v: &[u32]) -> Vec<CandidateId> {
        v.iter().map(|&i| CandidateId(i)).collect()
    }

    #[test]
    fn complementary_candidates_both_kept() {
        assert_eq!(update_frontier(&matrix(&[&[1, 0], &[0, 1]])).unwrap(), ids(&[0, 1]));
    }

    #[test]
    fn strict_subset_pruned() {
        assert_eq!(update_frontier(&matrix(&[&[1, 1], &[1, 0]])).unwrap(), ids(&[0]));
    }

    #[test]
    fn single_candidate() {
        assert_eq!(update_frontier(&matrix(&[&[0, 0, 0]])).unwrap(), ids(&[0]));
        assert_eq!(update_frontier(&matrix(&[&[1, 0, 1]])).unwrap(), ids(&[0]));
    }

    #[test]
    fn identical_win_sets_all_kept() {
        assert_eq!(update_frontier(&matrix(&[&[1, 0], &[1, 0], &[0, 0]])).unwrap(), ids(&[0, 1]));
    }

    #[test]
    fn errors() {
        assert!(matches!(update_frontier(&ScoreMatrix::new(3)), Err(OptimizerError::EmptyPool)));
        let mut m = ScoreMatrix::new(2);
        assert!(matches!(m.push(CandidateId(0), vec![1]), Err(OptimizerError::ShapeMismatch { .. })));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(select_parent(&[], &m, &mut rng).is_err());
    }

    #[test]
    fn win_sets_span_words() {
        let mut row = vec![0u8; 130];
        row[129] = 1;
        row[3] = 1;
        let m = matrix(&[&row, &[0u8; 130]]);
        let w = m.win_set(CandidateId(0)).unwrap();
        assert_eq!(w.len(), 130);
        let w1 = m.win_set(CandidateId(1)).unwrap();
        assert_eq!(w1.len(), 128);
        assert!(!w1.contains(129));
        assert!(w1.is_strict_subset(&w));
    }

    #[test]
    fn select_single_member() {
        let m = matrix(&[&[1, 0], &[0, 0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            assert_eq!(select_parent(&ids(&[0]), &m, &mut rng).unwrap(), CandidateId(0));
        }
    }

    #[test]
    fn selection_proportional_to_win_set_size() {
        // W(c0) = {0,1,2}, W(c1) = {3}
        let m = matrix(&[&[1, 1, 1, 0], &[0, 0, 0, 1]]);
        let frontier = update_frontier(&m).unwrap();
        assert_eq!(frontier, ids(&[0, 1]));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 10_000;
        let c0 = (0..draws)
            .filter(|_| select_parent(&frontier, &m, &mut rng).unwrap() == CandidateId(0))
            .count();
        let ratio = c0 as f64 / (draws - c0) as f64;
        assert!((ratio - 3.0).abs() <= 3.0 * 0.05, "ratio {ratio}");
    }

    #[test]
    fn selection_deterministic_for_seed() {
        let m = matrix(&[&[1, 1, 0, 0], &[0, 0, 1, 0], &[0, 1, 0, 1]]);
        let frontier = update_frontier(&m).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| select_parent(&frontier, &m, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
    }

    /// Set-based reference: win sets as `BTreeSet`s, dominance by explicit
    /// subset comparison.
    fn oracle(rows: &[Vec<u8>]) -> Vec<CandidateId> {
        let n = rows[0].len();
        let win: Vec<BTreeSet<usize>> = rows
            .iter()
            .map(|r| (0..n).filter(|&i| rows.iter().all(|o| r[i] >= o[i])).collect())
            .collect();
        (0..rows.len())
            .filter(|&c| {
                !win[c].is_empty()
                    && !(0..rows.len()).any(|d| win[c].is_subset(&win[d]) && win[c] != win[d])
            })
            .map(|c| CandidateId(c as u32))
            .collect()
    }

    #[test]
    fn matches_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..2_000 {
            let p = rng.random_range(1..=8);
            let n = rng.random_range(1..=12);
            let rows: Vec<Vec<u8>> = (0..p)
                .map(|_| (0..n).map(|_| rng.random_range(0..=1)).collect())
                .collect();
            let mut m = ScoreMatrix::new(n);
            for (i, r) in rows.iter().enumerate() {
                m.push(CandidateId(i as u32), r.clone()).unwrap();
            }
            let frontier = update_frontier(&m).unwrap();
            assert_eq!(frontier, oracle(&rows), "{rows:?}");
            // coverage
            let wins = m.win_sets();
            for i in 0..n {
                assert!(frontier.iter().any(|c| wins[c.0 as usize].contains(i)));
            }
        }
    }
}
