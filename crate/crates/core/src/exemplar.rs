//! Fixed-budget exemplar memory, balanced across seen classes, with random
//! and herding selection. The store holds indices into an immutable
//! canonical corpus, never copies of the samples.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Random,
    Herding,
}

/// Per-class lookup of candidate sample indices (typically the train split).
#[derive(Clone, Debug, Default)]
pub struct ClassIndex {
    by_class: BTreeMap<usize, Vec<usize>>,
}

impl ClassIndex {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in indices {
            by_class.entry(ds.labels[i]).or_default().push(i);
        }
        ClassIndex { by_class }
    }

    pub fn of(&self, class: usize) -> Option<&[usize]> {
        self.by_class.get(&class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.by_class.keys().copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarStore {
    pub capacity: usize,
    pub strategy: SelectionStrategy,
    pub seed: u64,
    /// class label -> retained sample indices, in selection order.
    per_class: BTreeMap<usize, Vec<usize>>,
}

impl ExemplarStore {
    pub fn new(capacity: usize, strategy: SelectionStrategy, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("exemplar capacity must be positive".into()));
        }
        Ok(ExemplarStore { capacity, strategy, seed, per_class: BTreeMap::new() })
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    pub fn classes(&self) -> Vec<usize> {
        self.per_class.keys().copied().collect()
    }

    pub fn class_indices(&self, class: usize) -> Option<&[usize]> {
        self.per_class.get(&class).map(Vec::as_slice)
    }

    /// All stored indices, classes in ascending order, each class in
    /// selection order.
    pub fn all_indices(&self) -> Vec<usize> {
        self.per_class.values().flatten().copied().collect()
    }

    /// Per-class quota for a given number of seen classes: floor(K/seen),
    /// with the remainder handed out one each to the lowest class labels.
    fn quotas(&self, seen_sorted: &[usize]) -> Result<BTreeMap<usize, usize>> {
        let n = seen_sorted.len();
        if n == 0 {
            return Err(Error::InvalidConfig("rebalance over an empty class set".into()));
        }
        if self.capacity < n {
            return Err(Error::Infeasible(format!(
                "capacity {} cannot cover {n} classes with at least one exemplar each",
                self.capacity
            )));
        }
        let base = self.capacity / n;
        let remainder = self.capacity % n;
        Ok(seen_sorted
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, base + usize::from(i < remainder)))
            .collect())
    }

    /// Shrink existing classes to their new quotas (keeping the first
    /// selected) and fill newly seen classes per the selection strategy.
    /// Herding requires a model for embeddings.
    pub fn rebalance(
        &mut self,
        seen_classes: &[usize],
        dataset: &Dataset,
        pool: &ClassIndex,
        model: Option<&ModelState<f32>>,
    ) -> Result<()> {
        let mut seen = seen_classes.to_vec();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != seen_classes.len() {
            return Err(Error::InvalidConfig("duplicate classes in rebalance".into()));
        }
        let quotas = self.quotas(&seen)?;
        // Classes no longer tracked are dropped outright.
        self.per_class.retain(|c, _| quotas.contains_key(c));
        for (&class, &quota) in &quotas {
            match self.per_class.get_mut(&class) {
                Some(existing) => {
                    existing.truncate(quota);
                }
                None => {
                    let candidates = pool.of(class).ok_or_else(|| {
                        Error::InvalidConfig(format!("class {class} has no training samples"))
                    })?;
                    if candidates.is_empty() {
                        return Err(Error::InvalidConfig(format!(
                            "class {class} has no training samples"
                        )));
                    }
                    if candidates.len() < quota {
                        return Err(Error::Infeasible(format!(
                            "class {class} has {} samples, quota is {quota}",
                            candidates.len()
                        )));
                    }
                    let picked = match self.strategy {
                        SelectionStrategy::Random => {
                            let mut rng = class_rng(self.seed, class);
                            let sel = rand::seq::index::sample(&mut rng, candidates.len(), quota);
                            sel.iter().map(|i| candidates[i]).collect()
                        }
                        SelectionStrategy::Herding => {
                            let model = model.ok_or_else(|| {
                                Error::InvalidConfig(
                                    "herding selection requires a model for embeddings".into(),
                                )
                            })?;
                            let (features, _) = dataset.gather(candidates);
                            let emb = model.embed_eval(&features)?;
                            herding_order(&emb, quota)
                                .into_iter()
                                .map(|i| candidates[i])
                                .collect()
                        }
                    };
                    self.per_class.insert(class, picked);
                }
            }
        }
        Ok(())
    }

    /// A small balanced set: `per_class_m` exemplars from every stored class
    /// plus `per_class_m` seeded draws from every current new class.
    pub fn build_balanced_set(
        &self,
        new_pool: &ClassIndex,
        per_class_m: usize,
        seed: u64,
    ) -> Result<Vec<usize>> {
        if per_class_m == 0 {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (&class, kept) in &self.per_class {
            if kept.len() < per_class_m {
                return Err(Error::Infeasible(format!(
                    "class {class} holds {} exemplars, need {per_class_m}",
                    kept.len()
                )));
            }
            out.extend_from_slice(&kept[..per_class_m]);
        }
        for class in new_pool.classes() {
            if self.per_class.contains_key(&class) {
                continue;
            }
            let candidates = new_pool.of(class).unwrap_or(&[]);
            if candidates.len() < per_class_m {
                return Err(Error::Infeasible(format!(
                    "class {class} has {} samples, need {per_class_m}",
                    candidates.len()
                )));
            }
            let mut rng = class_rng(seed, class);
            let sel = rand::seq::index::sample(&mut rng, candidates.len(), per_class_m);
            out.extend(sel.iter().map(|i| candidates[i]));
        }
        Ok(out)
    }
}

fn class_rng(seed: u64, class: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed ^ (class as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    )
}

/// Greedy herding over embedding rows: at each step pick the candidate that
/// brings the running mean of the selected set closest (L2) to the class
/// mean. Ties break toward the lowest row index. Returns row positions in
/// selection order.
pub fn herding_order(embeddings: &Tensor<f32>, m: usize) -> Vec<usize> {
    let n = embeddings.rows();
    let d = embeddings.row_len();
    let m = m.min(n);
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (acc, &v) in mean.iter_mut().zip(embeddings.row(r)) {
            *acc += v as f64;
        }
    }
    for v in &mut mean {
        *v /= n as f64;
    }
    let mut selected: Vec<usize> = Vec::with_capacity(m);
    let mut sum_sel = vec![0.0f64; d];
    let mut taken = vec![false; n];
    for step in 1..=m {
        let mut best: Option<(f64, usize)> = None;
        for cand in 0..n {
            if taken[cand] {
                continue;
            }
            let row = embeddings.row(cand);
            let mut dist2 = 0.0f64;
            for j in 0..d {
                let sel_mean = (sum_sel[j] + row[j] as f64) / step as f64;
                let diff = mean[j] - sel_mean;
                dist2 += diff * diff;
            }
            if best.is_none_or(|(b, _)| dist2 < b) {
                best = Some((dist2, cand));
            }
        }
        let (_, pick) = best.expect("at least one candidate remains");
        taken[pick] = true;
        for (acc, &v) in sum_sel.iter_mut().zip(embeddings.row(pick)) {
            *acc += v as f64;
        }
        selected.push(pick);
    }
    selected
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;

    fn toy_pool(classes: usize, per_class: usize) -> (Dataset, ClassIndex) {
        let ds = synth_blobs(classes, per_class, 4, 4.0, 0.5, 13).unwrap();
        let all: Vec<usize> = (0..ds.num_samples()).collect();
        let pool = ClassIndex::from_dataset(&ds, &all);
        (ds, pool)
    }

    #[test]
    fn even_split_between_two_classes() {
        let (ds, pool) = toy_pool(2, 20);
        let mut store = ExemplarStore::new(10, SelectionStrategy::Random, 5).unwrap();
        store.rebalance(&[0, 1], &ds, &pool, None).unwrap();
        assert_eq!(store.class_indices(0).unwrap().len(), 5);
        assert_eq!(store.class_indices(1).unwrap().len(), 5);
    }

    #[test]
    fn quota_remainder_goes_to_lowest_labels() {
        let (ds, pool) = toy_pool(6, 30);
        let mut store = ExemplarStore::new(100, SelectionStrategy::Random, 5).unwrap();
        store.rebalance(&[0, 1, 2, 3, 4, 5], &ds, &pool, None).unwrap();
        let counts: Vec<usize> =
            (0..6).map(|c| store.class_indices(c).unwrap().len()).collect();
        assert_eq!(counts, vec![17, 17, 17, 17, 16, 16]);
        assert_eq!(store.total(), 100);
    }

    #[test]
    fn capacity_below_class_count_is_rejected() {
        let (ds, pool) = toy_pool(4, 10);
        let mut store = ExemplarStore::new(3, SelectionStrategy::Random, 0).unwrap();
        assert!(matches!(
            store.rebalance(&[0, 1, 2, 3], &ds, &pool, None),
            Err(Error::Infeasible(_))
        ));
    }

    #[test]
    fn herding_requires_a_model() {
        let (ds, pool) = toy_pool(2, 10);
        let mut store = ExemplarStore::new(4, SelectionStrategy::Herding, 0).unwrap();
        assert!(store.rebalance(&[0, 1], &ds, &pool, None).is_err());
    }

    #[test]
    fn truncation_keeps_a_prefix_of_the_selection_order() {
        let (ds, pool) = toy_pool(2, 30);
        let mut store = ExemplarStore::new(12, SelectionStrategy::Random, 99).unwrap();
        store.rebalance(&[0, 1], &ds, &pool, None).unwrap();
        let before: Vec<usize> = store.class_indices(0).unwrap().to_vec();
        assert_eq!(before.len(), 6);
        // Folding in a third class shrinks the quota to 4.
        let (ds3, pool3) = toy_pool(3, 30);
        store.rebalance(&[0, 1, 2], &ds3, &pool3, None).unwrap();
        let after = store.class_indices(0).unwrap();
        assert_eq!(after, &before[..4]);
    }

    #[test]
    fn random_selection_is_seed_deterministic() {
        let (ds, pool) = toy_pool(3, 25);
        let mut a = ExemplarStore::new(9, SelectionStrategy::Random, 7).unwrap();
        let mut b = ExemplarStore::new(9, SelectionStrategy::Random, 7).unwrap();
        a.rebalance(&[0, 1, 2], &ds, &pool, None).unwrap();
        b.rebalance(&[0, 1, 2], &ds, &pool, None).unwrap();
        assert_eq!(a, b);
        let mut c = ExemplarStore::new(9, SelectionStrategy::Random, 8).unwrap();
        c.rebalance(&[0, 1, 2], &ds, &pool, None).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn herding_matches_exhaustive_greedy_oracle() {
        // Five 2-D points; the oracle recomputes the objective from scratch
        // at every step.
        let emb = Tensor::from_vec(
            &[5, 2],
            vec![0.9, 0.1, -0.5, 0.4, 0.2, -0.8, 0.05, 0.02, -0.3, 0.3],
        )
        .unwrap();
        let got = herding_order(&emb, 5);

        let n = 5;
        let d = 2;
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|r| emb.row(r)[j] as f64).sum::<f64>() / n as f64)
            .collect();
        let mut taken: Vec<usize> = Vec::new();
        for _ in 0..n {
            let mut best: Option<(f64, usize)> = None;
            for cand in 0..n {
                if taken.contains(&cand) {
                    continue;
                }
                let mut trial = taken.clone();
                trial.push(cand);
                let mut dist2 = 0.0;
                for j in 0..d {
                    let sel: f64 =
                        trial.iter().map(|&r| emb.row(r)[j] as f64).sum::<f64>() / trial.len() as f64;
                    dist2 += (mean[j] - sel) * (mean[j] - sel);
                }
                if best.is_none_or(|(b, _)| dist2 < b) {
                    best = Some((dist2, cand));
                }
            }
            taken.push(best.unwrap().1);
        }
        assert_eq!(got, taken);
    }

    #[test]
    fn herding_first_pick_is_nearest_to_the_mean() {
        let emb = Tensor::from_vec(
            &[4, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.3, 0.3, -1.0, -1.0, 0.0],
        )
        .unwrap();
        let order = herding_order(&emb, 1);
        let d = 3;
        let mean: Vec<f64> = (0..d)
            .map(|j| (0..4).map(|r| emb.row(r)[j] as f64).sum::<f64>() / 4.0)
            .collect();
        let mut best = (f64::INFINITY, 0);
        for r in 0..4 {
            let dist2: f64 = (0..d)
                .map(|j| (mean[j] - emb.row(r)[j] as f64).powi(2))
                .sum();
            if dist2 < best.0 {
                best = (dist2, r);
            }
        }
        assert_eq!(order[0], best.1);
    }

    #[test]
    fn store_round_trips_through_json() {
        let (ds, pool) = toy_pool(3, 20);
        let mut store = ExemplarStore::new(9, SelectionStrategy::Random, 7).unwrap();
        store.rebalance(&[0, 1, 2], &ds, &pool, None).unwrap();
        let text = serde_json::to_string(&store).unwrap();
        let back: ExemplarStore = serde_json::from_str(&text).unwrap();
        assert_eq!(store, back);
    }

    #[test]
    fn balanced_set_counts_and_determinism() {
        let (ds, pool) = toy_pool(3, 20);
        let mut store = ExemplarStore::new(10, SelectionStrategy::Random, 3).unwrap();
        store.rebalance(&[0, 1], &ds, &pool, None).unwrap();
        // Class 2 plays the "new class" role.
        let new_only: Vec<usize> =
            (0..ds.num_samples()).filter(|&i| ds.labels[i] == 2).collect();
        let new_pool = ClassIndex::from_dataset(&ds, &new_only);
        let set = store.build_balanced_set(&new_pool, 3, 77).unwrap();
        assert_eq!(set.len(), 9);
        for c in 0..3 {
            let count = set.iter().filter(|&&i| ds.labels[i] == c).count();
            assert_eq!(count, 3, "class {c}");
        }
        assert_eq!(set, store.build_balanced_set(&new_pool, 3, 77).unwrap());
        assert!(store.build_balanced_set(&new_pool, 0, 77).unwrap().is_empty());
        assert!(store.build_balanced_set(&new_pool, 100, 77).is_err());
    }
}
