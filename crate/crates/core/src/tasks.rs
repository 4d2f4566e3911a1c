//! Task plans for multitask base training: the full class set plus sampled
//! distinct subsets, explored along two directions (shrinking sizes, or a
//! fixed size with different members).

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One classification task: an ordered set of global class labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub class_labels: Vec<usize>, // sorted ascending
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskPlan {
    pub tasks: Vec<TaskSpec>,
    pub base_classes: Vec<usize>, // sorted ascending
    pub seed: u64,
}

impl TaskPlan {
    /// The invariants every factory output satisfies: the full-set task
    /// exists and comes first, every task has at least two classes drawn
    /// from the base set, and all label sets are pairwise distinct.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::InvalidConfig("a plan needs at least one task".into()));
        }
        if self.base_classes.len() < 2 {
            return Err(Error::InvalidConfig("base set needs at least two classes".into()));
        }
        if !is_sorted_distinct(&self.base_classes) {
            return Err(Error::InvalidConfig("base classes must be sorted and distinct".into()));
        }
        if self.tasks[0].class_labels != self.base_classes {
            return Err(Error::InvalidConfig(
                "the first task must cover the full base set".into(),
            ));
        }
        let base: BTreeSet<usize> = self.base_classes.iter().copied().collect();
        let mut seen_sets: BTreeSet<Vec<usize>> = BTreeSet::new();
        for (i, task) in self.tasks.iter().enumerate() {
            if task.class_labels.len() < 2 {
                return Err(Error::InvalidConfig(format!(
                    "task {i} has fewer than two classes"
                )));
            }
            if !is_sorted_distinct(&task.class_labels) {
                return Err(Error::InvalidConfig(format!(
                    "task {i} labels must be sorted and distinct"
                )));
            }
            if !task.class_labels.iter().all(|l| base.contains(l)) {
                return Err(Error::InvalidConfig(format!(
                    "task {i} uses labels outside the base set"
                )));
            }
            if !seen_sets.insert(task.class_labels.clone()) {
                return Err(Error::InvalidConfig(format!(
                    "task {i} duplicates another task's label set"
                )));
            }
        }
        Ok(())
    }

    /// The JSON fragment stored in experiment configs: a list of label lists.
    pub fn label_sets(&self) -> Vec<Vec<usize>> {
        self.tasks.iter().map(|t| t.class_labels.clone()).collect()
    }
}

fn is_sorted_distinct(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

/// Number of distinct nonempty class subsets of an N-class base set: 2^N - 1.
pub fn enumerate_task_count(n: usize) -> Result<u64> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one class".into()));
    }
    if n > 62 {
        return Err(Error::Infeasible(format!("2^{n} - 1 overflows the task counter")));
    }
    Ok((1u64 << n) - 1)
}

fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.saturating_mul((n - i) as u128) / (i as u128 + 1);
    }
    acc
}

/// Plan with shrinking task sizes, e.g. [5, 4, 3, 2]: task 0 is the full
/// base set, each later task is a seeded uniform subset of the stated size,
/// resampled until distinct from all earlier tasks. With `nested`, each
/// task is drawn from the previous task's labels instead of the full set
/// (sizes must then be strictly decreasing).
pub fn make_decreasing_plan(
    base_classes: &[usize],
    sizes: &[usize],
    seed: u64,
    nested: bool,
) -> Result<TaskPlan> {
    let base = canonical_base(base_classes)?;
    let n = base.len();
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("sizes must be nonempty".into()));
    }
    if sizes[0] != n {
        return Err(Error::InvalidConfig(format!(
            "sizes[0] = {} must equal the base set size {n}",
            sizes[0]
        )));
    }
    if sizes.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::InvalidConfig(format!("sizes must be nonincreasing, got {sizes:?}")));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s < 2) {
        return Err(Error::InvalidConfig(format!("task size {s} below the minimum of 2")));
    }
    if nested && sizes[1..].windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Infeasible(
            "nested sampling needs strictly decreasing sizes (an equal-size nested subset \
             would duplicate its parent)"
            .into(),
        ));
    }
    if nested && sizes.len() > 1 && sizes[1] >= n {
        return Err(Error::Infeasible(
            "nested sampling needs sizes[1] < the base size".into(),
        ));
    }
    // Distinctness feasibility per size class (the full set occupies size n).
    for &s in sizes.iter().skip(1).collect::<BTreeSet<_>>() {
        let needed = sizes[1..].iter().filter(|&&x| x == s).count() as u128
            + u128::from(s == n);
        if needed > binomial(n, s) {
            return Err(Error::Infeasible(format!(
                "cannot draw {needed} distinct subsets of size {s} from {n} classes"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = vec![TaskSpec { task_id: 0, class_labels: base.clone() }];
    let mut used: BTreeSet<Vec<usize>> = BTreeSet::new();
    used.insert(base.clone());
    for (i, &size) in sizes.iter().enumerate().skip(1) {
        let pool = if nested { tasks[i - 1].class_labels.clone() } else { base.clone() };
        let labels = sample_distinct_subset(&mut rng, &pool, size, &used)?;
        used.insert(labels.clone());
        tasks.push(TaskSpec { task_id: i, class_labels: labels });
    }
    let plan = TaskPlan { tasks, base_classes: base, seed };
    plan.validate()?;
    Ok(plan)
}

/// Plan with `head_count` tasks: the full set first, then distinct seeded
/// subsets of one fixed size. `head_count == 1` is the conventional
/// single-task baseline.
pub fn make_fixed_size_plan(
    base_classes: &[usize],
    head_count: usize,
    size: usize,
    seed: u64,
) -> Result<TaskPlan> {
    let base = canonical_base(base_classes)?;
    let n = base.len();
    if head_count == 0 {
        return Err(Error::InvalidConfig("head_count must be at least 1".into()));
    }
    if head_count > 1 {
        if size < 2 {
            return Err(Error::InvalidConfig(format!("task size {size} below the minimum of 2")));
        }
        if size > n {
            return Err(Error::InvalidConfig(format!(
                "task size {size} exceeds the base set size {n}"
            )));
        }
        let available = binomial(n, size) - u128::from(size == n);
        if (head_count - 1) as u128 > available {
            return Err(Error::Infeasible(format!(
                "cannot draw {} distinct subsets of size {size} from {n} classes",
                head_count - 1
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tasks = vec![TaskSpec { task_id: 0, class_labels: base.clone() }];
    let mut used: BTreeSet<Vec<usize>> = BTreeSet::new();
    used.insert(base.clone());
    for i in 1..head_count {
        let labels = sample_distinct_subset(&mut rng, &base, size, &used)?;
        used.insert(labels.clone());
        tasks.push(TaskSpec { task_id: i, class_labels: labels });
    }
    let plan = TaskPlan { tasks, base_classes: base, seed };
    plan.validate()?;
    Ok(plan)
}

/// Plan from explicit label lists (the config-file form). The first list
/// must be the full base set.
pub fn make_explicit_plan(base_classes: &[usize], label_sets: &[Vec<usize>]) -> Result<TaskPlan> {
    let base = canonical_base(base_classes)?;
    let tasks = label_sets
        .iter()
        .enumerate()
        .map(|(i, labels)| {
            let mut sorted = labels.clone();
            sorted.sort_unstable();
            TaskSpec { task_id: i, class_labels: sorted }
        })
        .collect();
    let plan = TaskPlan { tasks, base_classes: base, seed: 0 };
    plan.validate()?;
    Ok(plan)
}

fn canonical_base(base_classes: &[usize]) -> Result<Vec<usize>> {
    let set: BTreeSet<usize> = base_classes.iter().copied().collect();
    if set.len() != base_classes.len() {
        return Err(Error::InvalidConfig("base classes contain duplicates".into()));
    }
    if set.len() < 2 {
        return Err(Error::InvalidConfig("base set needs at least two classes".into()));
    }
    Ok(set.into_iter().collect())
}

/// Uniform `size`-subset of `pool`, conditioned on not being in `used`.
/// Small subset spaces are enumerated (uniform over the remainder); large
/// ones use rejection sampling, which is the same distribution.
fn sample_distinct_subset(
    rng: &mut ChaCha8Rng,
    pool: &[usize],
    size: usize,
    used: &BTreeSet<Vec<usize>>,
) -> Result<Vec<usize>> {
    let n = pool.len();
    let space = binomial(n, size);
    if space <= 5_000 {
        let mut eligible: Vec<Vec<usize>> = Vec::new();
        let mut combo: Vec<usize> = (0..size).collect();
        loop {
            let labels: Vec<usize> = combo.iter().map(|&i| pool[i]).collect();
            if !used.contains(&labels) {
                eligible.push(labels);
            }
            if !advance_combination(&mut combo, n) {
                break;
            }
        }
        if eligible.is_empty() {
            return Err(Error::Infeasible(format!(
                "no unused subset of size {size} remains"
            )));
        }
        let pick = rng.random_range(0..eligible.len());
        return Ok(eligible.swap_remove(pick));
    }
    for _ in 0..1_000_000 {
        let picked = rand::seq::index::sample(rng, n, size);
        let mut labels: Vec<usize> = picked.iter().map(|i| pool[i]).collect();
        labels.sort_unstable();
        if !used.contains(&labels) {
            return Ok(labels);
        }
    }
    Err(Error::Infeasible(format!(
        "rejection sampling could not find an unused subset of size {size}"
    )))
}

/// Advance `combo` to the next lexicographic k-combination of 0..n.
/// Returns false when the last combination has been visited.
fn advance_combination(combo: &mut [usize], n: usize) -> bool {
    let k = combo.len();
    for i in (0..k).rev() {
        if combo[i] != i + n - k {
            combo[i] += 1;
            for j in i + 1..k {
                combo[j] = combo[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn task_count_closed_form() {
        assert_eq!(enumerate_task_count(1).unwrap(), 1);
        assert_eq!(enumerate_task_count(4).unwrap(), 15);
        assert_eq!(enumerate_task_count(10).unwrap(), 1023);
        assert!(enumerate_task_count(0).is_err());
        assert!(enumerate_task_count(63).is_err());
        assert_eq!(enumerate_task_count(62).unwrap(), (1u64 << 62) - 1);
    }

    #[test]
    fn single_size_plan_is_the_full_set() {
        let plan = make_decreasing_plan(&[0, 1, 2, 3, 4], &[5], 1, false).unwrap();
        assert_eq!(plan.tasks.len(), 1);
        assert_eq!(plan.tasks[0].class_labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn decreasing_plan_shapes_and_determinism() {
        let base = [0, 1, 2, 3, 4];
        let a = make_decreasing_plan(&base, &[5, 4, 3, 2], 99, false).unwrap();
        assert_eq!(a.tasks.len(), 4);
        assert_eq!(a.tasks[0].class_labels, base.to_vec());
        let sizes: Vec<usize> = a.tasks.iter().map(|t| t.class_labels.len()).collect();
        assert_eq!(sizes, vec![5, 4, 3, 2]);
        a.validate().unwrap();
        let b = make_decreasing_plan(&base, &[5, 4, 3, 2], 99, false).unwrap();
        assert_eq!(a, b);
        let c = make_decreasing_plan(&base, &[5, 4, 3, 2], 100, false).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn nested_plan_tasks_are_chained_subsets() {
        let base = [3, 5, 7, 9, 11];
        let plan = make_decreasing_plan(&base, &[5, 4, 3, 2], 7, true).unwrap();
        for w in plan.tasks.windows(2) {
            let parent: BTreeSet<usize> = w[0].class_labels.iter().copied().collect();
            assert!(w[1].class_labels.iter().all(|l| parent.contains(l)));
        }
        assert!(make_decreasing_plan(&base, &[5, 4, 4, 2], 7, true).is_err());
    }

    #[test]
    fn decreasing_plan_validates_sizes() {
        let base = [0, 1, 2, 3, 4];
        assert!(make_decreasing_plan(&base, &[4, 3], 0, false).is_err()); // sizes[0] != |base|
        assert!(make_decreasing_plan(&base, &[5, 4, 5], 0, false).is_err()); // not decreasing
        assert!(make_decreasing_plan(&base, &[5, 1], 0, false).is_err()); // below minimum
        assert!(make_decreasing_plan(&base, &[5, 5], 0, false).is_err()); // second 5-set impossible
    }

    #[test]
    fn fixed_size_single_head_is_the_baseline() {
        let plan = make_fixed_size_plan(&[0, 1, 2, 3, 4], 1, 4, 123).unwrap();
        assert_eq!(plan.tasks.len(), 1);
        assert_eq!(plan.tasks[0].class_labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fixed_size_plan_draws_distinct_subsets() {
        let plan = make_fixed_size_plan(&[0, 1, 2, 3, 4], 3, 4, 5).unwrap();
        let sizes: Vec<usize> = plan.tasks.iter().map(|t| t.class_labels.len()).collect();
        assert_eq!(sizes, vec![5, 4, 4]);
        plan.validate().unwrap();
    }

    #[test]
    fn fixed_size_plan_exhausts_small_spaces_exactly() {
        // On base {0,1,2} there are exactly C(3,2) = 3 two-class subsets.
        let plan = make_fixed_size_plan(&[0, 1, 2], 4, 2, 11).unwrap();
        let mut subsets: Vec<Vec<usize>> =
            plan.tasks[1..].iter().map(|t| t.class_labels.clone()).collect();
        subsets.sort();
        assert_eq!(subsets, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
        assert!(make_fixed_size_plan(&[0, 1, 2], 5, 2, 11).is_err());
    }

    #[test]
    fn explicit_plan_round_trips_label_sets() {
        let plan =
            make_explicit_plan(&[0, 1, 2, 3], &[vec![0, 1, 2, 3], vec![2, 0]]).unwrap();
        assert_eq!(plan.label_sets(), vec![vec![0, 1, 2, 3], vec![0, 2]]);
        assert!(make_explicit_plan(&[0, 1, 2, 3], &[vec![0, 1]]).is_err()); // full set missing
        assert!(
            make_explicit_plan(&[0, 1, 2, 3], &[vec![0, 1, 2, 3], vec![0, 1, 2, 3]]).is_err()
        );
    }
}
