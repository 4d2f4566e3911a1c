//! Dataset loading and persistence, stratified splitting, class schedules,
//! and the synthetic blob generator used for desk-scale runs.
//!
//! On-disk layout of a dataset directory:
//!   manifest.json  { version: 1, num_samples, feature_shape, class_names }
//!   features.bin   little-endian IEEE-754 f32, row-major
//!   labels.bin     little-endian u32

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: Tensor<f32>, // [n, ...feature_shape]
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(features: Tensor<f32>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        let n = features.rows();
        if labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} feature rows vs {} labels",
                n,
                labels.len()
            )));
        }
        let c = class_names.len();
        if c == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one class".into()));
        }
        let mut present = vec![false; c];
        for &l in &labels {
            if l >= c {
                return Err(Error::LabelOutOfRange { label: l, width: c });
            }
            present[l] = true;
        }
        if let Some(missing) = present.iter().position(|p| !p) {
            return Err(Error::InvalidConfig(format!("class {missing} has no samples")));
        }
        Ok(Dataset { features, labels, class_names })
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Batch tensor plus labels for the given sample indices.
    pub fn gather(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let features = self.features.gather_rows(indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (features, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, test: 0.2, val: 0.1 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("train", self.train), ("test", self.test), ("val", self.val)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} fraction {v} out of [0, 1]")));
            }
        }
        let sum = self.train + self.test + self.val;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// Per class: seeded shuffle, then contiguous cuts at round(n * train) and
/// round(n * (train + test)). The three parts partition the dataset exactly.
pub fn stratified_split(ds: &Dataset, spec: &SplitSpec, seed: u64) -> Result<SplitIndices> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitIndices { train: Vec::new(), test: Vec::new(), val: Vec::new() };
    for class in 0..ds.num_classes() {
        let mut idx: Vec<usize> =
            (0..ds.num_samples()).filter(|&i| ds.labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let cut_train = ((n as f64) * spec.train).round() as usize;
        let cut_test = ((n as f64) * (spec.train + spec.test)).round() as usize;
        let cut_train = cut_train.min(n);
        let cut_test = cut_test.clamp(cut_train, n);
        if cut_train == 0 {
            return Err(Error::InvalidConfig(format!(
                "class {class} would receive 0 train samples"
            )));
        }
        out.train.extend_from_slice(&idx[..cut_train]);
        out.test.extend_from_slice(&idx[cut_train..cut_test]);
        out.val.extend_from_slice(&idx[cut_test..]);
    }
    Ok(out)
}

/// Restrict a split index list to samples of the given classes.
pub fn filter_by_classes(ds: &Dataset, indices: &[usize], classes: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = classes.iter().copied().collect();
    indices.iter().copied().filter(|&i| set.contains(&ds.labels[i])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSchedule {
    pub step_sizes: Vec<usize>,
    /// Class labels per step; pairwise disjoint, sizes match `step_sizes`.
    pub class_assignment: Vec<Vec<usize>>,
    pub seed: u64,
}

impl ClassSchedule {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.step_sizes.is_empty() {
            return Err(Error::InvalidConfig("schedule has no steps".into()));
        }
        if self.step_sizes.len() != self.class_assignment.len() {
            return Err(Error::InvalidConfig("schedule sizes/assignment mismatch".into()));
        }
        let total: usize = self.step_sizes.iter().sum();
        if total > num_classes {
            return Err(Error::InvalidConfig(format!(
                "schedule covers {total} classes but the dataset has {num_classes}"
            )));
        }
        let mut seen = BTreeSet::new();
        for (step, labels) in self.class_assignment.iter().enumerate() {
            if labels.len() != self.step_sizes[step] {
                return Err(Error::InvalidConfig(format!(
                    "step {step} assigns {} classes, expected {}",
                    labels.len(),
                    self.step_sizes[step]
                )));
            }
            for &l in labels {
                if l >= num_classes {
                    return Err(Error::LabelOutOfRange { label: l, width: num_classes });
                }
                if !seen.insert(l) {
                    return Err(Error::InvalidConfig(format!(
                        "class {l} assigned to more than one step"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn base_classes(&self) -> &[usize] {
        &self.class_assignment[0]
    }
}

fn parse_step_sizes(text: &str) -> Result<Vec<usize>> {
    let mut sizes = Vec::new();
    for token in text.split('-') {
        let v: usize = token
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad schedule token {token:?}")))?;
        if v == 0 {
            return Err(Error::InvalidConfig("schedule steps must be positive".into()));
        }
        sizes.push(v);
    }
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("empty schedule".into()));
    }
    Ok(sizes)
}

/// Parse a dash-separated schedule like "4-2-2-2" and assign classes to
/// steps from a seeded permutation of 0..num_classes.
pub fn parse_schedule(text: &str, num_classes: usize, seed: u64) -> Result<ClassSchedule> {
    let step_sizes = parse_step_sizes(text)?;
    let mut perm: Vec<usize> = (0..num_classes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perm.shuffle(&mut rng);
    assign_from_order(text, step_sizes, perm, seed, num_classes)
}

/// Like [`parse_schedule`] but assigns classes in ascending label order;
/// handy for fixtures where the class-to-step mapping must be obvious.
pub fn parse_schedule_ordered(text: &str, num_classes: usize) -> Result<ClassSchedule> {
    let step_sizes = parse_step_sizes(text)?;
    let order: Vec<usize> = (0..num_classes).collect();
    assign_from_order(text, step_sizes, order, 0, num_classes)
}

fn assign_from_order(
    text: &str,
    step_sizes: Vec<usize>,
    order: Vec<usize>,
    seed: u64,
    num_classes: usize,
) -> Result<ClassSchedule> {
    let total: usize = step_sizes.iter().sum();
    if total > num_classes {
        return Err(Error::InvalidConfig(format!(
            "schedule {text:?} needs {total} classes but the dataset has {num_classes}"
        )));
    }
    let mut assignment = Vec::with_capacity(step_sizes.len());
    let mut cursor = 0;
    for &size in &step_sizes {
        let mut step: Vec<usize> = order[cursor..cursor + size].to_vec();
        step.sort_unstable();
        assignment.push(step);
        cursor += size;
    }
    let schedule = ClassSchedule { step_sizes, class_assignment: assignment, seed };
    schedule.validate(num_classes)?;
    Ok(schedule)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    num_samples: usize,
    feature_shape: Vec<usize>,
    class_names: Vec<String>,
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        version: DATASET_FORMAT_VERSION,
        num_samples: ds.num_samples(),
        feature_shape: ds.feature_shape().to_vec(),
        class_names: ds.class_names.clone(),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut fbytes = Vec::with_capacity(ds.features.len() * 4);
    for v in ds.features.data() {
        fbytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.join("features.bin"), fbytes)?;
    let mut lbytes = Vec::with_capacity(ds.labels.len() * 4);
    for &l in &ds.labels {
        lbytes.extend_from_slice(&(l as u32).to_le_bytes());
    }
    std::fs::write(dir.join("labels.bin"), lbytes)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_bytes = std::fs::read(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset version {}",
            manifest.version
        )));
    }
    let row: usize = manifest.feature_shape.iter().product();
    if row == 0 {
        return Err(Error::Format("feature shape has a zero extent".into()));
    }
    let fbytes = std::fs::read(dir.join("features.bin"))?;
    let expected = manifest
        .num_samples
        .checked_mul(row)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format("feature size overflow".into()))?;
    if fbytes.len() != expected {
        return Err(Error::Format(format!(
            "features.bin is {} bytes, manifest implies {expected}",
            fbytes.len()
        )));
    }
    let mut data = Vec::with_capacity(manifest.num_samples * row);
    for chunk in fbytes.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let mut shape = vec![manifest.num_samples];
    shape.extend_from_slice(&manifest.feature_shape);
    let features = Tensor::from_vec(&shape, data)?;

    let lbytes = std::fs::read(dir.join("labels.bin"))?;
    if lbytes.len() != manifest.num_samples * 4 {
        return Err(Error::Format(format!(
            "labels.bin is {} bytes, manifest implies {}",
            lbytes.len(),
            manifest.num_samples * 4
        )));
    }
    let labels: Vec<usize> = lbytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    Dataset::new(features, labels, manifest.class_names)
}

/// Gaussian blob classes: each class center is a seeded random unit
/// direction scaled by `separation`; samples add N(0, sigma^2) noise.
pub fn synth_blobs(
    classes: usize,
    n_per_class: usize,
    dim: usize,
    separation: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("need at least two classes".into()));
    }
    if n_per_class == 0 || dim == 0 {
        return Err(Error::InvalidConfig("n_per_class and dim must be positive".into()));
    }
    if separation <= 0.0 {
        return Err(Error::InvalidConfig("separation must be positive".into()));
    }
    if noise_sigma < 0.0 {
        return Err(Error::InvalidConfig("noise_sigma must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).expect("valid normal");
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut dir: Vec<f64> = (0..dim).map(|_| unit.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            dir[0] = 1.0;
        } else {
            for v in &mut dir {
                *v /= norm;
            }
        }
        centers.push(dir.into_iter().map(|v| v * separation).collect::<Vec<f64>>());
    }
    let n = classes * n_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            for &cv in center {
                let noise = if noise_sigma > 0.0 { unit.sample(&mut rng) * noise_sigma } else { 0.0 };
                data.push((cv + noise) as f32);
            }
            labels.push(c);
        }
    }
    let features = Tensor::from_vec(&[n, dim], data)?;
    let class_names = (0..classes).map(|c| format!("class_{c:02}")).collect();
    Dataset::new(features, labels, class_names)
}
