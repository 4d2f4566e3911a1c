//! Central finite-difference verification of every analytic backward rule.
//!
//! Checks run in f64 with dropout disabled; batch-norm layers are exercised
//! in both eval mode (running statistics) and train mode (batch statistics,
//! where the gradient flows through the mean and variance).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::layers::Mode;
use crate::model::{BackboneSpec, Gradients, LossTerm, ModelState};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub worst_group: String,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn summary_lines(&self) -> Vec<String> {
        self.cases
            .iter()
            .map(|c| {
                format!(
                    "{} seed={} max_rel_err={:.3e} worst={} {}",
                    c.name,
                    c.seed,
                    c.max_rel_err,
                    c.worst_group,
                    if c.passed { "ok" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Central finite differences over every trainable parameter scalar:
/// g = (f(p + eps) - f(p - eps)) / (2 eps). Each evaluation runs on a fresh
/// clone, so mutation inside the loss (running statistics) cannot leak.
pub fn finite_difference_grads<F>(
    model: &ModelState<f64>,
    eps: f64,
    loss_fn: &F,
) -> Result<Gradients<f64>>
where
    F: Fn(&mut ModelState<f64>) -> Result<f64>,
{
    let mut grads = Gradients::empty(model.group_count());
    for g in 0..model.group_count() {
        if !model.group_is_trainable(g) {
            continue;
        }
        let shape = model.group(g).shape().to_vec();
        let mut out = Tensor::zeros(&shape);
        for i in 0..model.group(g).len() {
            let mut plus = model.clone();
            plus.group_mut(g).data_mut()[i] += eps;
            let f_plus = loss_fn(&mut plus)?;
            let mut minus = model.clone();
            minus.group_mut(g).data_mut()[i] -= eps;
            let f_minus = loss_fn(&mut minus)?;
            out.data_mut()[i] = (f_plus - f_minus) / (2.0 * eps);
        }
        grads.set(g, out);
    }
    Ok(grads)
}

/// Worst relative error over all trainable entries, with an absolute floor:
/// |a - n| / max(1, |a|, |n|). Missing analytic gradients count as zero.
pub fn max_relative_error(
    model: &ModelState<f64>,
    analytic: &Gradients<f64>,
    numeric: &Gradients<f64>,
) -> (f64, String) {
    let infos = model.group_infos();
    let zero = Tensor::zeros(&[0]);
    let mut worst = 0.0f64;
    let mut worst_group = String::from("-");
    for g in 0..model.group_count() {
        if !model.group_is_trainable(g) {
            continue;
        }
        let shape = model.group(g).shape().to_vec();
        let zeros_like = Tensor::zeros(&shape);
        let a = analytic.get(g).unwrap_or(&zeros_like);
        let n = numeric.get(g).unwrap_or(&zero);
        for (av, nv) in a.data().iter().zip(n.data()) {
            let denom = 1.0f64.max(av.abs()).max(nv.abs());
            let rel = (av - nv).abs() / denom;
            if rel > worst {
                worst = rel;
                worst_group = infos[g].name.clone();
            }
        }
    }
    (worst, worst_group)
}

fn random_batch(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let data = (0..len).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..width)).collect()
}

/// Randomize batch-norm running statistics so eval-mode checks do not run
/// against the trivial identity transform.
fn scramble_bn_stats(model: &mut ModelState<f64>, rng: &mut ChaCha8Rng) {
    let infos = model.group_infos();
    for (g, info) in infos.iter().enumerate() {
        if info.name.ends_with("running_mean") {
            for v in model.group_mut(g).data_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
        } else if info.name.ends_with("running_var") {
            for v in model.group_mut(g).data_mut() {
                *v = 0.5 + rng.random::<f64>();
            }
        } else if info.name.ends_with("gamma") || info.name.ends_with("beta") {
            for v in model.group_mut(g).data_mut() {
                *v = rng.random::<f64>() * 2.0 - 1.0;
            }
        }
    }
}

struct Case {
    name: &'static str,
    spec: BackboneSpec,
    batch_shape: Vec<usize>,
    mode: Mode,
    with_kd: bool,
    with_ce: bool,
}

fn standard_cases() -> Vec<Case> {
    let mlp = BackboneSpec::mlp(&[7], &[6, 5], 4);
    let conv = BackboneSpec::conv_net(&[5, 5], [2, 3, 3, 4], 3, 0.0);
    vec![
        Case {
            name: "dense_relu_softmax_ce",
            spec: mlp.clone(),
            batch_shape: vec![3, 7],
            mode: Mode::Eval,
            with_kd: false,
            with_ce: true,
        },
        Case {
            name: "dense_relu_kd",
            spec: mlp.clone(),
            batch_shape: vec![3, 7],
            mode: Mode::Eval,
            with_kd: true,
            with_ce: false,
        },
        Case {
            name: "dense_relu_weighted_ce_plus_kd",
            spec: mlp,
            batch_shape: vec![3, 7],
            mode: Mode::Eval,
            with_kd: true,
            with_ce: true,
        },
        Case {
            name: "conv_bn_eval_relu_pool_ce",
            spec: conv.clone(),
            batch_shape: vec![2, 5, 5],
            mode: Mode::Eval,
            with_kd: false,
            with_ce: true,
        },
        Case {
            name: "conv_bn_train_relu_pool_ce",
            spec: conv.clone(),
            batch_shape: vec![2, 5, 5],
            mode: Mode::Train,
            with_kd: false,
            with_ce: true,
        },
        Case {
            name: "conv_bn_eval_kd",
            spec: conv,
            batch_shape: vec![2, 5, 5],
            mode: Mode::Eval,
            with_kd: true,
            with_ce: false,
        },
    ]
}

fn run_case(case: &Case, seed: u64, eps: f64, tolerance: f64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
    let head_width = 3usize;
    let mut model = ModelState::<f64>::new(&case.spec, &[(0..head_width).collect()], seed)?;
    model.set_dropout_enabled(false);
    scramble_bn_stats(&mut model, &mut rng);
    let batch = random_batch(&mut rng, &case.batch_shape);
    let n = case.batch_shape[0];

    let mut terms: Vec<LossTerm<f64>> = Vec::new();
    if case.with_ce {
        let weight = if case.with_kd { 0.7 } else { 1.0 };
        terms.push(LossTerm::CrossEntropy {
            rows: None,
            labels: random_labels(&mut rng, n, head_width),
            weight,
        });
    }
    if case.with_kd {
        // Compare against two teacher columns so the student is wider than
        // the teacher, as during incremental steps.
        let teacher = random_batch(&mut rng, &[n, 2]);
        let weight = if case.with_ce { 1.3 } else { 1.0 };
        terms.push(LossTerm::Distillation { rows: None, teacher, temperature: 2.0, weight });
    }

    let (_, analytic) = model.clone().backward(&batch, 0, &terms, case.mode)?;
    let numeric = finite_difference_grads(&model, eps, &|m: &mut ModelState<f64>| {
        m.evaluate_loss(&batch, 0, &terms, case.mode)
    })?;
    let (max_rel_err, worst_group) = max_relative_error(&model, &analytic, &numeric);
    Ok(CaseResult {
        name: case.name.to_string(),
        seed,
        max_rel_err,
        worst_group,
        passed: max_rel_err < tolerance,
    })
}

/// Run every layer/loss case for each seed at the given tolerance.
pub fn run_standard_suite(seeds: &[u64], tolerance: f64) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for case in standard_cases() {
        for &seed in seeds {
            report.cases.push(run_case(&case, seed, DEFAULT_EPSILON, tolerance)?);
        }
    }
    Ok(report)
}
