//! Held-out RMSE and the average-percentile-score ranking metric.
//!
//! For one user, the scored items are that user's held-out items. They are
//! ranked by descending predicted score (1 = best); tied scores share their
//! midrank. An item at rank `k` of `n` sits at percentile `100·k/n`, and the
//! user's APS is the mean percentile of the items they liked. Lower is
//! better; the best possible value for a single liked item is `100/n`.

use std::collections::{BTreeMap, HashSet};

use crate::centralized::CentralState;
use crate::data::{owner_of, RatingMatrix};
use crate::engine::AgentState;
use crate::error::{Error, Result};
use crate::matrix::Dense;

/// Anything that scores a (user, item) pair.
pub trait Predictor {
    fn users(&self) -> usize;
    fn items(&self) -> usize;
    fn predict(&self, user: usize, item: usize) -> f64;
}

impl Predictor for CentralState {
    fn users(&self) -> usize {
        self.u.rows()
    }

    fn items(&self) -> usize {
        self.v.cols()
    }

    fn predict(&self, user: usize, item: usize) -> f64 {
        CentralState::predict(self, user, item)
    }
}

/// Column-blocked factors: block `b` covers columns `[start, end)` and is
/// predicted with its own `(U, V)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockModel {
    ranges: Vec<(usize, usize)>,
    factors: Vec<(Dense, Dense)>,
}

impl BlockModel {
    pub fn new(blocks: Vec<((usize, usize), Dense, Dense)>) -> Result<Self> {
        let mut ranges = Vec::with_capacity(blocks.len());
        let mut factors = Vec::with_capacity(blocks.len());
        let mut expected_start = 0;
        let users = blocks.first().map(|b| b.1.rows());
        for ((start, end), u, v) in blocks {
            if start != expected_start || end <= start {
                return Err(Error::data(format!(
                    "block [{start}, {end}) does not continue contiguous coverage from {expected_start}"
                )));
            }
            if Some(u.rows()) != users || u.cols() != v.rows() || v.cols() != end - start {
                return Err(Error::data(format!(
                    "block [{start}, {end}) has U {}x{} and V {}x{}",
                    u.rows(),
                    u.cols(),
                    v.rows(),
                    v.cols()
                )));
            }
            expected_start = end;
            ranges.push((start, end));
            factors.push((u, v));
        }
        if ranges.is_empty() {
            return Err(Error::data("model has no factor blocks"));
        }
        Ok(BlockModel { ranges, factors })
    }

    /// Each shard's columns predicted with that agent's own replica.
    pub fn from_agents(agents: &[AgentState]) -> Result<Self> {
        BlockModel::new(
            agents
                .iter()
                .map(|a| ((a.shard().start, a.shard().end), a.u().clone(), a.v().clone()))
                .collect(),
        )
    }

    /// Every shard predicted with the mean replica `Ū`.
    pub fn averaged_from_agents(agents: &[AgentState]) -> Result<Self> {
        let first = agents.first().ok_or_else(|| Error::data("no agents"))?;
        let mut mean = Dense::zeros(first.u().rows(), first.u().cols());
        for a in agents {
            mean.add_scaled(a.u(), 1.0);
        }
        let mean = mean.scale(1.0 / agents.len() as f64);
        BlockModel::new(
            agents
                .iter()
                .map(|a| ((a.shard().start, a.shard().end), mean.clone(), a.v().clone()))
                .collect(),
        )
    }

    pub fn blocks(&self) -> impl Iterator<Item = ((usize, usize), &Dense, &Dense)> {
        self.ranges
            .iter()
            .zip(&self.factors)
            .map(|(&r, (u, v))| (r, u, v))
    }
}

impl Predictor for BlockModel {
    fn users(&self) -> usize {
        self.factors[0].0.rows()
    }

    fn items(&self) -> usize {
        self.ranges.last().map_or(0, |r| r.1)
    }

    fn predict(&self, user: usize, item: usize) -> f64 {
        let b = owner_of(&self.ranges, item);
        let (u, v) = &self.factors[b];
        let col = item - self.ranges[b].0;
        let mut s = 0.0;
        for (k, &x) in u.row(user).iter().enumerate() {
            s += x * v.get(k, col);
        }
        s
    }
}

fn check_coverage(model: &dyn Predictor, truth: &RatingMatrix) -> Result<()> {
    if let Some(e) = truth
        .entries()
        .iter()
        .find(|e| e.user >= model.users() || e.item >= model.items())
    {
        return Err(Error::data(format!(
            "model covers {}x{} but an entry refers to user {}, item {}",
            model.users(),
            model.items(),
            e.user,
            e.item
        )));
    }
    Ok(())
}

/// Root mean squared error over every entry of `truth`.
pub fn rmse(model: &dyn Predictor, truth: &RatingMatrix) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::data("cannot compute RMSE over zero entries"));
    }
    check_coverage(model, truth)?;
    let mut sq = 0.0;
    for e in truth.entries() {
        let d = model.predict(e.user, e.item) - e.value;
        sq += d * d;
    }
    Ok((sq / truth.len() as f64).sqrt())
}

/// APS for one user. `scores` lists that user's held-out items with their
/// predicted scores. Returns `Ok(None)` when nothing is liked.
pub fn aps_user(scores: &[(usize, f64)], liked: &HashSet<usize>) -> Result<Option<f64>> {
    if liked.is_empty() {
        return Ok(None);
    }
    let mut order: Vec<(usize, f64)> = scores.to_vec();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n = order.len() as f64;

    let mut total = 0.0;
    let mut found = 0usize;
    let mut pos = 0;
    while pos < order.len() {
        let tie_end = pos
            + order[pos..]
                .iter()
                .take_while(|(_, s)| s.total_cmp(&order[pos].1).is_eq())
                .count();
        // Positions pos..tie_end are 1-based ranks pos+1..=tie_end.
        let midrank = (pos + 1 + tie_end) as f64 / 2.0;
        for &(item, _) in &order[pos..tie_end] {
            if liked.contains(&item) {
                total += 100.0 * midrank / n;
                found += 1;
            }
        }
        pos = tie_end;
    }
    if found != liked.len() {
        return Err(Error::data(format!(
            "{} liked item(s) are missing from the scored list",
            liked.len() - found
        )));
    }
    Ok(Some(total / found as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingResult {
    /// APS per user that had at least one liked held-out item.
    pub per_user: BTreeMap<usize, f64>,
    pub maps: f64,
    pub counted_users: usize,
    /// Users with held-out items but none liked.
    pub excluded_users: usize,
}

/// Mean APS over users with at least one held-out rating ≥ `like_threshold`.
pub fn maps(model: &dyn Predictor, test: &RatingMatrix, like_threshold: f64) -> Result<RankingResult> {
    if test.is_empty() {
        return Err(Error::data("test set is empty"));
    }
    check_coverage(model, test)?;
    let mut per_user = BTreeMap::new();
    let mut excluded = 0;
    let entries = test.entries();
    let mut start = 0;
    while start < entries.len() {
        let user = entries[start].user;
        let end = start + entries[start..].iter().take_while(|e| e.user == user).count();
        let block = &entries[start..end];
        let scores: Vec<(usize, f64)> = block
            .iter()
            .map(|e| (e.item, model.predict(user, e.item)))
            .collect();
        let liked: HashSet<usize> = block
            .iter()
            .filter(|e| e.value >= like_threshold)
            .map(|e| e.item)
            .collect();
        match aps_user(&scores, &liked)? {
            Some(aps) => {
                per_user.insert(user, aps);
            }
            None => excluded += 1,
        }
        start = end;
    }
    if per_user.is_empty() {
        return Err(Error::data(format!(
            "no user has a held-out rating >= {like_threshold}"
        )));
    }
    let mut sum = 0.0;
    for aps in per_user.values() {
        sum += aps;
    }
    Ok(RankingResult {
        maps: sum / per_user.len() as f64,
        counted_users: per_user.len(),
        excluded_users: excluded,
        per_user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rating;
    use proptest::prelude::*;

    fn liked(items: &[usize]) -> HashSet<usize> {
        items.iter().copied().collect()
    }

    /// Mean percentile of liked items over every ordering of tied groups:
    /// the brute-force definition midranks are meant to match.
    fn permutation_average(scores: &[(usize, f64)], liked: &HashSet<usize>) -> f64 {
        fn permutations(items: Vec<usize>) -> Vec<Vec<usize>> {
            if items.len() <= 1 {
                return vec![items];
            }
            let mut out = Vec::new();
            for i in 0..items.len() {
                let mut rest = items.clone();
                let head = rest.remove(i);
                for mut p in permutations(rest) {
                    p.insert(0, head);
                    out.push(p);
                }
            }
            out
        }
        let n = scores.len();
        let mut total = 0.0;
        let mut count = 0.0;
        for perm in permutations((0..n).collect()) {
            // Accept orderings consistent with descending score.
            if perm.windows(2).all(|w| scores[w[0]].1 >= scores[w[1]].1) {
                let aps: f64 = perm
                    .iter()
                    .enumerate()
                    .filter(|(_, &i)| liked.contains(&scores[i].0))
                    .map(|(k, _)| 100.0 * (k + 1) as f64 / n as f64)
                    .sum::<f64>()
                    / liked.len() as f64;
                total += aps;
                count += 1.0;
            }
        }
        total / count
    }

    #[test]
    fn aps_examples() {
        let ten: Vec<(usize, f64)> = (0..10).map(|i| (i, 10.0 - i as f64)).collect();
        assert_eq!(aps_user(&ten, &liked(&[0])).unwrap(), Some(10.0));

        let four: Vec<(usize, f64)> = vec![(0, 0.9), (1, 0.8), (2, 0.7), (3, 0.1)];
        assert_eq!(aps_user(&four, &liked(&[0, 1, 2, 3])).unwrap(), Some(62.5));

        let tied = vec![(0, 1.0), (1, 1.0), (2, 0.5), (3, 0.2)];
        let got = aps_user(&tied, &liked(&[1])).unwrap().unwrap();
        assert_eq!(got, 37.5);
        assert!((permutation_average(&tied, &liked(&[1])) - 37.5).abs() < 1e-12);
    }

    #[test]
    fn aps_skips_and_rejects() {
        assert_eq!(aps_user(&[(0, 1.0)], &HashSet::new()).unwrap(), None);
        assert!(matches!(aps_user(&[(0, 1.0)], &liked(&[5])), Err(Error::Data(_))));
    }

    #[test]
    fn rmse_examples() {
        let model = BlockModel::new(vec![(
            (0, 1),
            Dense::from_rows(&[vec![1.0]]).unwrap(),
            Dense::from_rows(&[vec![2.0]]).unwrap(),
        )])
        .unwrap();
        let truth = RatingMatrix::new(1, 1, vec![Rating { user: 0, item: 0, value: 5.0 }]).unwrap();
        assert_eq!(rmse(&model, &truth).unwrap(), 3.0);
        let exact = RatingMatrix::new(1, 1, vec![Rating { user: 0, item: 0, value: 2.0 }]).unwrap();
        assert_eq!(rmse(&model, &exact).unwrap(), 0.0);
        let empty = RatingMatrix::new(1, 1, vec![]).unwrap();
        assert!(matches!(rmse(&model, &empty), Err(Error::Data(_))));
        let outside = RatingMatrix::new(2, 1, vec![Rating { user: 1, item: 0, value: 1.0 }]).unwrap();
        assert!(matches!(rmse(&model, &outside), Err(Error::Data(_))));
    }

    #[test]
    fn rmse_matches_entry_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let u = Dense::from_fn(6, 2, |_, _| rng.random_range(-1.0..1.0));
        let v = Dense::from_fn(2, 5, |_, _| rng.random_range(-1.0..1.0));
        let model = BlockModel::new(vec![((0, 5), u.clone(), v.clone())]).unwrap();
        let entries: Vec<Rating> = (0..6)
            .flat_map(|a| (0..5).map(move |b| (a, b)))
            .filter(|_| rng.random_bool(0.5))
            .map(|(user, item)| Rating { user, item, value: (user * item) as f64 * 0.1 })
            .collect();
        let truth = RatingMatrix::new(6, 5, entries).unwrap();
        let full = u.matmul(&v).unwrap();
        let mut sq = 0.0;
        for e in truth.entries() {
            sq += (full.get(e.user, e.item) - e.value).powi(2);
        }
        let oracle = (sq / truth.len() as f64).sqrt();
        assert!((rmse(&model, &truth).unwrap() - oracle).abs() <= 1e-12);
    }

    #[test]
    fn block_model_routes_columns() {
        let u0 = Dense::from_rows(&[vec![1.0]]).unwrap();
        let u1 = Dense::from_rows(&[vec![10.0]]).unwrap();
        let v0 = Dense::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let v1 = Dense::from_rows(&[vec![3.0]]).unwrap();
        let m = BlockModel::new(vec![((0, 2), u0, v0), ((2, 3), u1, v1)]).unwrap();
        assert_eq!(m.items(), 3);
        assert_eq!(m.predict(0, 1), 2.0);
        assert_eq!(m.predict(0, 2), 30.0);
        let gap = BlockModel::new(vec![((1, 2), Dense::zeros(1, 1), Dense::zeros(1, 1))]);
        assert!(gap.is_err());
    }

    /// Oracle model: item score is looked up from a table.
    struct Table(usize, usize, Vec<f64>);

    impl Predictor for Table {
        fn users(&self) -> usize {
            self.0
        }
        fn items(&self) -> usize {
            self.1
        }
        fn predict(&self, user: usize, item: usize) -> f64 {
            self.2[user * self.1 + item]
        }
    }

    #[test]
    fn perfect_model_scores_ten() {
        let (users, items) = (20, 10);
        let mut entries = Vec::new();
        let mut scores = vec![0.0; users * items];
        for u in 0..users {
            let liked_item = (u * 3) % items;
            for i in 0..items {
                let like = i == liked_item;
                entries.push(Rating { user: u, item: i, value: if like { 1.0 } else { 0.0 } });
                scores[u * items + i] = if like { 5.0 } else { -(i as f64) };
            }
        }
        let test = RatingMatrix::new(users, items, entries).unwrap();
        let res = maps(&Table(users, items, scores), &test, 1.0).unwrap();
        assert_eq!(res.maps, 10.0);
        assert_eq!(res.counted_users, 20);
    }

    #[test]
    fn users_without_likes_are_excluded() {
        let test = RatingMatrix::new(
            2,
            2,
            vec![
                Rating { user: 0, item: 0, value: 1.0 },
                Rating { user: 0, item: 1, value: 0.0 },
                Rating { user: 1, item: 0, value: 0.0 },
            ],
        )
        .unwrap();
        let res = maps(&Table(2, 2, vec![1.0, 0.0, 0.0, 0.0]), &test, 1.0).unwrap();
        assert_eq!(res.excluded_users, 1);
        assert_eq!(res.maps, 50.0);

        let none = RatingMatrix::new(1, 1, vec![Rating { user: 0, item: 0, value: 0.0 }]).unwrap();
        assert!(matches!(maps(&Table(1, 1, vec![0.0]), &none, 1.0), Err(Error::Data(_))));
        let empty = RatingMatrix::new(1, 1, vec![]).unwrap();
        assert!(matches!(maps(&Table(1, 1, vec![0.0]), &empty, 1.0), Err(Error::Data(_))));
    }

    fn distinct_scores() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(-1000i32..1000, 2..25)
            .prop_map(|s| s.into_iter().map(|v| v as f64 / 7.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn invariant_under_increasing_transform(raw in prop::collection::vec(-50i32..50, 2..20), pick in any::<prop::sample::Index>()) {
            let scores: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, &s)| (i, s as f64)).collect();
            let l = liked(&[pick.index(scores.len())]);
            let warped: Vec<(usize, f64)> = scores.iter().map(|&(i, s)| (i, (s / 10.0).exp() * 3.0 + 1.0)).collect();
            prop_assert_eq!(aps_user(&scores, &l).unwrap(), aps_user(&warped, &l).unwrap());
        }

        #[test]
        fn reversal_reflects_percentile(scores in distinct_scores(), pick in any::<prop::sample::Index>()) {
            let n = scores.len() as f64;
            let forward: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
            let reversed: Vec<(usize, f64)> = scores.iter().map(|s| -s).enumerate().collect();
            let l = liked(&[pick.index(scores.len())]);
            let a = aps_user(&forward, &l).unwrap().unwrap();
            let b = aps_user(&reversed, &l).unwrap().unwrap();
            prop_assert!((b - (100.0 * (n + 1.0) / n - a)).abs() < 1e-9);
        }

        #[test]
        fn presentation_order_is_irrelevant(raw in prop::collection::vec((-5i32..5, any::<bool>()), 1..20), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scores: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, &(s, _))| (i, s as f64)).collect();
            let l: HashSet<usize> = raw.iter().enumerate().filter(|(_, &(_, like))| like).map(|(i, _)| i).collect();
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(aps_user(&scores, &l).unwrap(), aps_user(&shuffled, &l).unwrap());
        }

        #[test]
        fn midrank_matches_permutation_average(raw in prop::collection::vec(0i32..3, 2..7), pick in any::<prop::sample::Index>()) {
            let scores: Vec<(usize, f64)> = raw.iter().enumerate().map(|(i, &s)| (i, s as f64)).collect();
            let l = liked(&[pick.index(scores.len())]);
            let got = aps_user(&scores, &l).unwrap().unwrap();
            prop_assert!((got - permutation_average(&scores, &l)).abs() < 1e-9);
        }
    }
}
