//! Experiment configuration: a single JSON document, with command-line
//! flags overriding individual fields. Every run embeds the fully resolved
//! config in its report so it can be reproduced bit-identically.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cil_core::data::{
    load_dataset, parse_schedule, parse_schedule_ordered, synth_blobs, ClassSchedule, Dataset,
    SplitSpec,
};
use cil_core::engine::{ExemplarConfig, StepConfig};
use cil_core::model::{BackboneSpec, BackboneVariant};
use cil_core::tasks::{make_decreasing_plan, make_explicit_plan, make_fixed_size_plan, TaskPlan};
use cil_core::trainer::BaseTrainConfig;
use cil_core::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataConfig {
    Path(PathBuf),
    Synth(SynthConfig),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Reshape flat features to a square [s, s] grid (dim must be s^2);
    /// lets the conv backbone run on synthetic data.
    #[serde(default)]
    pub grid: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            per_class: 60,
            dim: 32,
            separation: 6.0,
            noise_sigma: 1.0,
            seed: 424,
            grid: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitConfig {
    #[serde(flatten)]
    pub spec: SplitSpec,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { spec: SplitSpec::default(), seed: 1000 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    Seeded,
    Sorted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub text: String,
    #[serde(default = "default_class_order")]
    pub class_order: ClassOrder,
    #[serde(default = "default_schedule_seed")]
    pub seed: u64,
}

fn default_class_order() -> ClassOrder {
    ClassOrder::Seeded
}

fn default_schedule_seed() -> u64 {
    2024
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { text: "4-2-2-2".into(), class_order: ClassOrder::Seeded, seed: 2024 }
    }
}

/// Backbone shape without the input extents; those come from the dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneConfig {
    Mlp { hidden_sizes: Vec<usize>, embedding_dim: usize },
    ConvNet { conv_channels: [usize; 4], kernel_size: usize, dropout_rate: f64 },
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::Mlp { hidden_sizes: vec![32], embedding_dim: 16 }
    }
}

impl BackboneConfig {
    pub fn to_spec(&self, feature_shape: &[usize]) -> Result<BackboneSpec> {
        let spec = match self {
            BackboneConfig::Mlp { hidden_sizes, embedding_dim } => BackboneSpec {
                variant: BackboneVariant::Mlp { hidden_sizes: hidden_sizes.clone() },
                input_shape: feature_shape.to_vec(),
                embedding_dim: *embedding_dim,
            },
            BackboneConfig::ConvNet { conv_channels, kernel_size, dropout_rate } => BackboneSpec {
                variant: BackboneVariant::ConvNet {
                    conv_channels: *conv_channels,
                    kernel_size: *kernel_size,
                    dropout_rate: *dropout_rate,
                },
                input_shape: feature_shape.to_vec(),
                embedding_dim: conv_channels[3],
            },
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanConfig {
    /// Nonincreasing task sizes, e.g. [5, 4, 3, 2]; covers both sweep
    /// directions (distinct sizes or repeated fixed sizes).
    Decreasing { sizes: Vec<usize>, #[serde(default)] nested: bool },
    FixedSize { head_count: usize, size: usize },
    /// Explicit label lists; the first must be the full base set.
    Explicit(Vec<Vec<usize>>),
}

impl Default for PlanConfig {
    fn default() -> Self {
        // Single-task baseline unless the config says otherwise.
        PlanConfig::FixedSize { head_count: 1, size: 2 }
    }
}

impl PlanConfig {
    pub fn build(&self, base_classes: &[usize], seed: u64) -> Result<TaskPlan> {
        match self {
            PlanConfig::Decreasing { sizes, nested } => {
                make_decreasing_plan(base_classes, sizes, seed, *nested)
            }
            PlanConfig::FixedSize { head_count, size } => {
                make_fixed_size_plan(base_classes, *head_count, *size, seed)
            }
            PlanConfig::Explicit(lists) => make_explicit_plan(base_classes, lists),
        }
    }

    pub fn from_heads_flag(flag: &str) -> Result<PlanConfig> {
        let sizes = flag
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("bad head size {t:?}")))
            })
            .collect::<Result<Vec<usize>>>()?;
        Ok(PlanConfig::Decreasing { sizes, nested: false })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepHeadsConfig {
    /// Size lists, one plan per entry.
    pub plans: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepExemplarsConfig {
    pub capacities: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_data")]
    pub data: DataConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub plan: PlanConfig,
    #[serde(default = "default_plan_seed")]
    pub plan_seed: u64,
    #[serde(default)]
    pub base_train: BaseTrainConfig,
    #[serde(default)]
    pub incremental: StepConfig,
    #[serde(default)]
    pub exemplar: ExemplarConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub sweep_heads: Option<SweepHeadsConfig>,
    #[serde(default)]
    pub sweep_exemplars: Option<SweepExemplarsConfig>,
}

fn default_data() -> DataConfig {
    DataConfig::Synth(SynthConfig::default())
}

fn default_plan_seed() -> u64 {
    7
}

fn default_seeds() -> Vec<u64> {
    vec![101, 202, 303]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields carry defaults")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: ExperimentConfig = serde_json::from_slice(&bytes)?;
        Ok(cfg)
    }

    /// Apply command-line overrides: flags win over the file.
    pub fn apply_overrides(&mut self, seed: Option<u64>, out: Option<PathBuf>) {
        if let Some(s) = seed {
            self.seeds = vec![s];
        }
        if let Some(o) = out {
            self.out_dir = o;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("seeds list must be nonempty".into()));
        }
        self.split.spec.validate()?;
        self.base_train.validate()?;
        self.incremental.validate()?;
        if self.exemplar.capacity == 0 {
            return Err(Error::InvalidConfig("exemplar capacity must be positive".into()));
        }
        if let DataConfig::Synth(s) = &self.data {
            if s.grid {
                let side = (s.dim as f64).sqrt() as usize;
                if side * side != s.dim {
                    return Err(Error::InvalidConfig(format!(
                        "grid synth features need a square dim, got {}",
                        s.dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn resolve_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataConfig::Path(p) => load_dataset(p),
            DataConfig::Synth(s) => {
                let ds = synth_blobs(
                    s.classes,
                    s.per_class,
                    s.dim,
                    s.separation,
                    s.noise_sigma,
                    s.seed,
                )?;
                if s.grid {
                    let side = (s.dim as f64).sqrt() as usize;
                    let n = ds.num_samples();
                    let features = ds.features.reshaped(&[n, side, side])?;
                    Dataset::new(features, ds.labels, ds.class_names)
                } else {
                    Ok(ds)
                }
            }
        }
    }

    pub fn resolve_schedule(&self, num_classes: usize) -> Result<ClassSchedule> {
        match self.schedule.class_order {
            ClassOrder::Seeded => {
                parse_schedule(&self.schedule.text, num_classes, self.schedule.seed)
            }
            ClassOrder::Sorted => parse_schedule_ordered(&self.schedule.text, num_classes),
        }
    }

    /// Per-run config slices for one seed: the run seed drives training and
    /// exemplar selection; split/schedule/plan seeds stay as configured so
    /// that a seed sweep varies training, not the data layout.
    pub fn base_train_for_seed(&self, seed: u64) -> BaseTrainConfig {
        BaseTrainConfig { seed, ..self.base_train.clone() }
    }

    pub fn step_for_seed(&self, seed: u64) -> StepConfig {
        StepConfig { seed, ..self.incremental.clone() }
    }

    pub fn exemplar_for_seed(&self, seed: u64) -> ExemplarConfig {
        ExemplarConfig {
            seed: self.exemplar.seed.wrapping_add(seed),
            ..self.exemplar.clone()
        }
    }

    pub fn echo(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

/// Default sweep grid over plans for a base set of size `f`: the shrinking
/// direction (`[F]`, `[F,F-1]`, ..., down to 2) plus the fixed-size
/// direction (`[F,F-1]`, `[F,F-1,F-1]`, ...), feasibility permitting.
pub fn default_head_grid(f: usize) -> Vec<Vec<usize>> {
    let mut grid: Vec<Vec<usize>> = Vec::new();
    let mut sizes = vec![f];
    grid.push(sizes.clone());
    let mut s = f;
    while s > 2 {
        s -= 1;
        sizes.push(s);
        grid.push(sizes.clone());
    }
    if f >= 3 {
        // Up to f distinct (f-1)-subsets exist; cap the repeats at 4.
        let max_extra = (f - 1).min(4);
        for repeats in 2..=max_extra {
            let mut fixed = vec![f];
            fixed.extend(std::iter::repeat_n(f - 1, repeats));
            grid.push(fixed);
        }
    }
    grid.sort();
    grid.dedup();
    grid
}

pub fn plan_label(sizes: &[Vec<usize>]) -> String {
    let sizes: Vec<String> =
        sizes.iter().map(|t| t.len().to_string()).collect();
    format!("[{}]", sizes.join(","))
}
