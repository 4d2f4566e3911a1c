//! Model state: a shared backbone plus one classification head per task,
//! with a stable parameter-group registry used by the optimizer, freeze
//! masks, checksums, and the snapshot format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    BatchNorm2d, Conv2d, Dense, ForwardOpts, Layer, LayerCache, Mode,
};
use crate::loss::{cross_entropy_with_grad, kd_loss_with_grad};
use crate::tensor::{checksum, matmul_nt, matmul_tn, Scalar, Tensor};

pub const SNAPSHOT_MAGIC: &[u8; 4] = b"CILM";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneVariant {
    /// Chain of linear layers with ReLU, ending at the embedding width.
    Mlp { hidden_sizes: Vec<usize> },
    /// Four conv stages (conv -> batch norm -> ReLU), then dropout and a
    /// global average pool producing a `conv_channels[3]`-wide embedding.
    ConvNet {
        conv_channels: [usize; 4],
        kernel_size: usize,
        #[serde(default = "default_dropout")]
        dropout_rate: f64,
    },
}

fn default_dropout() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub variant: BackboneVariant,
    pub input_shape: Vec<usize>,
    pub embedding_dim: usize,
}

impl BackboneSpec {
    pub fn mlp(input_shape: &[usize], hidden_sizes: &[usize], embedding_dim: usize) -> Self {
        BackboneSpec {
            variant: BackboneVariant::Mlp { hidden_sizes: hidden_sizes.to_vec() },
            input_shape: input_shape.to_vec(),
            embedding_dim,
        }
    }

    pub fn conv_net(
        input_shape: &[usize],
        conv_channels: [usize; 4],
        kernel_size: usize,
        dropout_rate: f64,
    ) -> Self {
        BackboneSpec {
            variant: BackboneVariant::ConvNet { conv_channels, kernel_size, dropout_rate },
            input_shape: input_shape.to_vec(),
            embedding_dim: conv_channels[3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "input shape must have positive extents, got {:?}",
                self.input_shape
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidConfig("embedding_dim must be positive".into()));
        }
        match &self.variant {
            BackboneVariant::Mlp { hidden_sizes } => {
                if hidden_sizes.contains(&0) {
                    return Err(Error::InvalidConfig("hidden sizes must be positive".into()));
                }
            }
            BackboneVariant::ConvNet { conv_channels, kernel_size, dropout_rate } => {
                if conv_channels.contains(&0) {
                    return Err(Error::InvalidConfig("conv channels must be positive".into()));
                }
                if *kernel_size == 0 || kernel_size % 2 == 0 {
                    // Same-shape zero padding needs an odd kernel.
                    return Err(Error::InvalidConfig(format!(
                        "kernel size must be a positive odd integer, got {kernel_size}"
                    )));
                }
                if !(0.0..=1.0).contains(dropout_rate) {
                    return Err(Error::InvalidConfig(format!(
                        "dropout rate must be in [0, 1], got {dropout_rate}"
                    )));
                }
                if self.embedding_dim != conv_channels[3] {
                    return Err(Error::InvalidConfig(format!(
                        "embedding_dim {} must equal the final conv width {}",
                        self.embedding_dim, conv_channels[3]
                    )));
                }
                if !(self.input_shape.len() == 2 || self.input_shape.len() == 3) {
                    return Err(Error::InvalidConfig(format!(
                        "conv net input must be [h, w] or [c, h, w], got {:?}",
                        self.input_shape
                    )));
                }
            }
        }
        Ok(())
    }

    fn input_features(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn input_channels(&self) -> usize {
        if self.input_shape.len() == 3 {
            self.input_shape[0]
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task_id: usize,
    pub class_labels: Vec<usize>,
}

/// Task-specific linear classifier over the shared embedding.
#[derive(Clone, Debug)]
pub struct Head<S: Scalar> {
    pub task_id: usize,
    pub class_labels: Vec<usize>,
    pub weight: Tensor<S>, // [embedding_dim, |class_labels|]
    pub bias: Tensor<S>,   // [|class_labels|]
}

impl<S: Scalar> Head<S> {
    pub fn width(&self) -> usize {
        self.class_labels.len()
    }

    /// Position of a global class label among this head's outputs.
    pub fn local_index(&self, label: usize) -> Option<usize> {
        self.class_labels.iter().position(|&l| l == label)
    }

    pub fn spec(&self) -> HeadSpec {
        HeadSpec { task_id: self.task_id, class_labels: self.class_labels.clone() }
    }

    fn forward(&self, embedding: &Tensor<S>) -> Result<Tensor<S>> {
        let mut logits = crate::tensor::matmul(embedding, &self.weight)?;
        for r in 0..logits.rows() {
            for (v, b) in logits.row_mut(r).iter_mut().zip(self.bias.data()) {
                *v += *b;
            }
        }
        Ok(logits)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FreezeScope {
    /// Freeze every backbone parameter (batch-norm statistics included);
    /// heads stay trainable.
    BackboneOnly,
    /// Everything trainable.
    None,
}

/// Per-parameter-group freeze flags, aligned with the model's group order.
#[derive(Clone, Debug, PartialEq)]
pub struct FreezeMask {
    frozen: Vec<bool>,
}

impl FreezeMask {
    pub fn none_for(model_groups: usize) -> Self {
        FreezeMask { frozen: vec![false; model_groups] }
    }

    pub fn all_frozen(model_groups: usize) -> Self {
        FreezeMask { frozen: vec![true; model_groups] }
    }

    pub fn is_frozen(&self, group: usize) -> bool {
        self.frozen[group]
    }

    pub fn len(&self) -> usize {
        self.frozen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn all_unfrozen(&self) -> bool {
        self.frozen.iter().all(|f| !f)
    }
}

#[derive(Clone, Debug)]
pub struct GroupInfo {
    pub name: String,
    pub trainable: bool,
}

/// Gradients keyed by parameter group, aligned with the model's group order.
#[derive(Clone, Debug)]
pub struct Gradients<S: Scalar> {
    groups: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn empty(n_groups: usize) -> Self {
        Gradients { groups: vec![None; n_groups] }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, group: usize) -> Option<&Tensor<S>> {
        self.groups[group].as_ref()
    }

    pub fn set(&mut self, group: usize, grad: Tensor<S>) {
        self.groups[group] = Some(grad);
    }

    pub fn take(&mut self, group: usize) -> Option<Tensor<S>> {
        self.groups[group].take()
    }

    pub fn accumulate(&mut self, group: usize, grad: Tensor<S>) -> Result<()> {
        match &mut self.groups[group] {
            slot @ None => {
                *slot = Some(grad);
                Ok(())
            }
            Some(existing) => existing.add_assign_tensor(&grad),
        }
    }

    /// Sum another gradient set into this one.
    pub fn merge(&mut self, other: Gradients<S>) -> Result<()> {
        for (g, grad) in other.groups.into_iter().enumerate() {
            if let Some(t) = grad {
                self.accumulate(g, t)?;
            }
        }
        Ok(())
    }

    pub fn ensure_finite(&self) -> Result<()> {
        for (g, grad) in self.groups.iter().enumerate() {
            if let Some(t) = grad {
                t.ensure_finite(&format!("gradient of group {g}"))?;
            }
        }
        Ok(())
    }
}

/// Row selection plus head-local labels for one head in a multitask batch.
#[derive(Clone, Debug)]
pub struct HeadBatch {
    pub head_id: usize,
    /// Row positions within the batch tensor.
    pub rows: Vec<usize>,
    pub local_labels: Vec<usize>,
}

/// One term of a composite training loss, evaluated on a row subset of the
/// batch logits.
#[derive(Clone, Debug)]
pub enum LossTerm<S: Scalar> {
    CrossEntropy {
        /// None = all rows. An empty selection contributes nothing.
        rows: Option<Vec<usize>>,
        labels: Vec<usize>,
        weight: S,
    },
    Distillation {
        rows: Option<Vec<usize>>,
        /// Teacher logits, one row per selected row, width = columns compared.
        teacher: Tensor<S>,
        temperature: S,
        weight: S,
    },
}

enum GroupSlot {
    Backbone { layer: usize, slot: usize },
    Head { head: usize, slot: usize },
}

#[derive(Debug)]
pub struct ModelState<S: Scalar> {
    spec: BackboneSpec,
    backbone: Vec<Layer<S>>,
    heads: Vec<Head<S>>,
    seed: u64,
    rng: ChaCha8Rng,
    bn_stats_frozen: bool,
    dropout_enabled: bool,
}

impl<S: Scalar> Clone for ModelState<S> {
    fn clone(&self) -> Self {
        ModelState {
            spec: self.spec.clone(),
            backbone: self.backbone.clone(),
            heads: self.heads.clone(),
            seed: self.seed,
            rng: self.rng.clone(),
            bn_stats_frozen: self.bn_stats_frozen,
            dropout_enabled: self.dropout_enabled,
        }
    }
}

impl<S: Scalar> ModelState<S> {
    /// Fresh model with seeded initialization: dense/conv weights uniform in
    /// +/- 1/sqrt(fan_in), biases zero, batch-norm gamma 1 / beta 0, head
    /// weights uniform in +/- 1/sqrt(embedding_dim).
    pub fn new(spec: &BackboneSpec, head_label_sets: &[Vec<usize>], seed: u64) -> Result<Self> {
        spec.validate()?;
        if head_label_sets.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one head".into()));
        }
        let mut model = Self::zeroed(spec, head_label_sets, seed)?;
        model.initialize_params();
        Ok(model)
    }

    /// All-zero parameters (batch-norm gamma/var set to one); used by the
    /// snapshot loader before overwriting from the payload.
    fn zeroed(spec: &BackboneSpec, head_label_sets: &[Vec<usize>], seed: u64) -> Result<Self> {
        let backbone = build_backbone(spec)?;
        let mut heads = Vec::with_capacity(head_label_sets.len());
        for (task_id, labels) in head_label_sets.iter().enumerate() {
            heads.push(build_head(spec, task_id, labels)?);
        }
        Ok(ModelState {
            spec: spec.clone(),
            backbone,
            heads,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_stats_frozen: false,
            dropout_enabled: true,
        })
    }

    fn initialize_params(&mut self) {
        let rng = &mut self.rng;
        for layer in &mut self.backbone {
            match layer {
                Layer::Dense(d) => {
                    let fan_in = d.weight.shape()[0];
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    init_uniform(&mut d.weight, scale, rng);
                    // Nonzero bias keeps ReLU pre-activations off the exact
                    // kink when an upstream layer emits all zeros.
                    init_uniform(&mut d.bias, scale, rng);
                }
                Layer::Conv2d(c) => {
                    let s = c.weight.shape();
                    let fan_in = s[1] * s[2] * s[3];
                    let scale = 1.0 / (fan_in as f64).sqrt();
                    init_uniform(&mut c.weight, scale, rng);
                    init_uniform(&mut c.bias, scale, rng);
                }
                _ => {}
            }
        }
        let emb = self.spec.embedding_dim;
        for head in &mut self.heads {
            init_uniform(&mut head.weight, 1.0 / (emb as f64).sqrt(), rng);
        }
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn heads(&self) -> &[Head<S>] {
        &self.heads
    }

    pub fn head(&self, head_id: usize) -> Result<&Head<S>> {
        self.heads.get(head_id).ok_or(Error::UnknownHead(head_id))
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn dropout_enabled(&self) -> bool {
        self.dropout_enabled
    }

    pub fn set_dropout_enabled(&mut self, enabled: bool) {
        self.dropout_enabled = enabled;
    }

    pub fn bn_stats_frozen(&self) -> bool {
        self.bn_stats_frozen
    }

    /// Keep only the given head, discarding all others. Backbone parameters
    /// and the rng stream are untouched.
    pub fn retain_single_head(&mut self, head_id: usize) -> Result<()> {
        if head_id >= self.heads.len() {
            return Err(Error::UnknownHead(head_id));
        }
        let head = self.heads.swap_remove(head_id);
        self.heads = vec![head];
        Ok(())
    }

    fn batch_to_backbone_input(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = batch.shape();
        if shape.len() < 2 || shape[1..] != self.spec.input_shape[..] {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {:?} does not match input shape {:?}",
                shape, self.spec.input_shape
            )));
        }
        let n = shape[0];
        match &self.spec.variant {
            BackboneVariant::Mlp { .. } => batch.reshaped(&[n, self.spec.input_features()]),
            BackboneVariant::ConvNet { .. } => {
                let (c, h, w) = match self.spec.input_shape[..] {
                    [h, w] => (1, h, w),
                    [c, h, w] => (c, h, w),
                    _ => unreachable!("validated at construction"),
                };
                batch.reshaped(&[n, c, h, w])
            }
        }
    }

    fn forward_opts(&self, mode: Mode) -> ForwardOpts {
        ForwardOpts {
            mode,
            update_bn_stats: mode == Mode::Train && !self.bn_stats_frozen,
            dropout_active: self.dropout_enabled,
        }
    }

    fn embed_with_cache(
        &mut self,
        batch: &Tensor<S>,
        mode: Mode,
    ) -> Result<(Tensor<S>, Vec<LayerCache<S>>, Vec<Vec<usize>>)> {
        let opts = self.forward_opts(mode);
        let mut x = self.batch_to_backbone_input(batch)?;
        let mut caches = Vec::with_capacity(self.backbone.len());
        let mut shapes = Vec::with_capacity(self.backbone.len());
        let rng = &mut self.rng;
        for layer in &mut self.backbone {
            shapes.push(x.shape().to_vec());
            let (y, cache) = layer.forward(&x, opts, rng)?;
            caches.push(cache);
            x = y;
        }
        Ok((x, caches, shapes))
    }

    /// Backbone embedding in eval mode; no mutation, safe for concurrent
    /// readers.
    pub fn embed_eval(&self, batch: &Tensor<S>) -> Result<Tensor<S>> {
        let mut x = self.batch_to_backbone_input(batch)?;
        for layer in &self.backbone {
            x = layer.forward_eval(&x)?;
        }
        x.ensure_finite("embedding")?;
        Ok(x)
    }

    /// Forward pass through the backbone and one head.
    ///
    /// Train mode draws dropout masks from the model rng and refreshes
    /// batch-norm running statistics (unless the backbone is frozen); eval
    /// mode uses running statistics and no dropout.
    pub fn forward(&mut self, batch: &Tensor<S>, head_id: usize, mode: Mode) -> Result<Tensor<S>> {
        if mode == Mode::Eval {
            return self.forward_eval(batch, head_id);
        }
        if head_id >= self.heads.len() {
            return Err(Error::UnknownHead(head_id));
        }
        let (emb, _, _) = self.embed_with_cache(batch, mode)?;
        let logits = self.heads[head_id].forward(&emb)?;
        logits.ensure_finite("logits")?;
        Ok(logits)
    }

    /// Eval-mode forward without mutation.
    pub fn forward_eval(&self, batch: &Tensor<S>, head_id: usize) -> Result<Tensor<S>> {
        let head = self.head(head_id)?;
        let emb = self.embed_eval(batch)?;
        let logits = head.forward(&emb)?;
        logits.ensure_finite("logits")?;
        Ok(logits)
    }

    /// Composite-loss backward pass: runs a forward with caches, evaluates
    /// the loss terms on the head logits, and backpropagates. Returns the
    /// total loss and one gradient per parameter group (heads that did not
    /// participate get none).
    pub fn backward(
        &mut self,
        batch: &Tensor<S>,
        head_id: usize,
        terms: &[LossTerm<S>],
        mode: Mode,
    ) -> Result<(S, Gradients<S>)> {
        if head_id >= self.heads.len() {
            return Err(Error::UnknownHead(head_id));
        }
        let (emb, caches, shapes) = self.embed_with_cache(batch, mode)?;
        let head = &self.heads[head_id];
        let logits = head.forward(&emb)?;
        logits.ensure_finite("logits")?;

        let (loss, d_logits) = evaluate_terms(&logits, terms)?;

        let (dw, db, d_emb) = head_backward(head, &emb, &d_logits)?;
        let mut grads = self.backbone_backward(&caches, &shapes, d_emb)?;
        let head_base = self.backbone_group_count();
        grads.set(head_base + 2 * head_id, dw);
        grads.set(head_base + 2 * head_id + 1, db);
        grads.ensure_finite()?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((loss, grads))
    }

    /// Loss value only, same term semantics as [`ModelState::backward`].
    pub fn evaluate_loss(
        &mut self,
        batch: &Tensor<S>,
        head_id: usize,
        terms: &[LossTerm<S>],
        mode: Mode,
    ) -> Result<S> {
        if head_id >= self.heads.len() {
            return Err(Error::UnknownHead(head_id));
        }
        let (emb, _, _) = self.embed_with_cache(batch, mode)?;
        let logits = self.heads[head_id].forward(&emb)?;
        logits.ensure_finite("logits")?;
        let (loss, _) = evaluate_terms(&logits, terms)?;
        Ok(loss)
    }

    /// One shared backbone pass, then per-head cross entropy on each head's
    /// row selection. Heads with empty selections contribute exactly zero
    /// loss and no gradient. Returns per-selection mean losses (None when
    /// empty), the summed loss, and gradients for backbone plus all
    /// participating heads.
    pub fn multi_head_ce_backward(
        &mut self,
        batch: &Tensor<S>,
        selections: &[HeadBatch],
        mode: Mode,
    ) -> Result<(Vec<Option<S>>, S, Gradients<S>)> {
        for sel in selections {
            if sel.head_id >= self.heads.len() {
                return Err(Error::UnknownHead(sel.head_id));
            }
            if sel.rows.len() != sel.local_labels.len() {
                return Err(Error::ShapeMismatch(format!(
                    "head {}: {} rows vs {} labels",
                    sel.head_id,
                    sel.rows.len(),
                    sel.local_labels.len()
                )));
            }
        }
        let (emb, caches, shapes) = self.embed_with_cache(batch, mode)?;
        let mut d_emb = Tensor::zeros(emb.shape());
        let mut losses = Vec::with_capacity(selections.len());
        let mut total = S::ZERO;
        let head_base = self.backbone_group_count();
        let mut head_grads: Vec<(usize, Tensor<S>, Tensor<S>)> = Vec::new();
        for sel in selections {
            if sel.rows.is_empty() {
                losses.push(None);
                continue;
            }
            let head = &self.heads[sel.head_id];
            let emb_rows = emb.gather_rows(&sel.rows);
            let logits = head.forward(&emb_rows)?;
            logits.ensure_finite("logits")?;
            let (loss, d_logits) = cross_entropy_with_grad(&logits, &sel.local_labels)?;
            let (dw, db, d_emb_rows) = head_backward(head, &emb_rows, &d_logits)?;
            d_emb.scatter_add_rows(&sel.rows, &d_emb_rows);
            head_grads.push((sel.head_id, dw, db));
            losses.push(Some(loss));
            total += loss;
        }
        let mut grads = self.backbone_backward(&caches, &shapes, d_emb)?;
        for (head_id, dw, db) in head_grads {
            grads.accumulate(head_base + 2 * head_id, dw)?;
            grads.accumulate(head_base + 2 * head_id + 1, db)?;
        }
        grads.ensure_finite()?;
        if !total.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        Ok((losses, total, grads))
    }

    fn backbone_backward(
        &self,
        caches: &[LayerCache<S>],
        input_shapes: &[Vec<usize>],
        d_emb: Tensor<S>,
    ) -> Result<Gradients<S>> {
        let mut grads = Gradients::empty(self.group_count());
        let mut dy = d_emb;
        let mut group = self.backbone_group_count();
        for (idx, layer) in self.backbone.iter().enumerate().rev() {
            let slots = layer.param_slots().len();
            group -= slots;
            let (dx, layer_grads) = layer.backward(&caches[idx], &dy)?;
            for (s, g) in layer_grads.into_iter().enumerate() {
                if let Some(t) = g {
                    grads.set(group + s, t);
                }
            }
            // The pool backward emits a flattened spatial axis; restore the
            // recorded input shape before feeding the next layer down.
            dy = if dx.shape() != input_shapes[idx].as_slice() {
                dx.reshaped(&input_shapes[idx])?
            } else {
                dx
            };
        }
        Ok(grads)
    }

    /// Grow a head with new class columns. Existing columns are untouched;
    /// new columns are drawn uniform in +/- `init_scale` from the model rng,
    /// new biases are zero.
    pub fn expand_head(
        &mut self,
        head_id: usize,
        new_labels: &[usize],
        init_scale: f64,
    ) -> Result<()> {
        if head_id >= self.heads.len() {
            return Err(Error::UnknownHead(head_id));
        }
        if init_scale < 0.0 {
            return Err(Error::InvalidConfig("init_scale must be nonnegative".into()));
        }
        {
            let head = &self.heads[head_id];
            for l in new_labels {
                if head.class_labels.contains(l) {
                    return Err(Error::InvalidConfig(format!(
                        "label {l} already present in head {head_id}"
                    )));
                }
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in new_labels {
            if !seen.insert(*l) {
                return Err(Error::InvalidConfig(format!("duplicate new label {l}")));
            }
        }
        if new_labels.is_empty() {
            return Ok(());
        }
        let emb = self.spec.embedding_dim;
        let rng = &mut self.rng;
        let head = &mut self.heads[head_id];
        let old_w = head.width();
        let new_w = old_w + new_labels.len();
        let mut weight = Tensor::zeros(&[emb, new_w]);
        for r in 0..emb {
            let dst = weight.row_mut(r);
            dst[..old_w].copy_from_slice(&head.weight.row(r)[..old_w]);
            for v in dst[old_w..].iter_mut() {
                *v = S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * init_scale);
            }
        }
        let mut bias = Tensor::zeros(&[new_w]);
        bias.data_mut()[..old_w].copy_from_slice(head.bias.data());
        head.weight = weight;
        head.bias = bias;
        head.class_labels.extend_from_slice(new_labels);
        Ok(())
    }

    /// Build a freeze mask for the given scope. `BackboneOnly` also pins the
    /// batch-norm running statistics: subsequent train-mode forwards will
    /// not refresh them until the scope is reset to `None`.
    pub fn set_freeze(&mut self, scope: FreezeScope) -> FreezeMask {
        let infos = self.group_infos();
        let frozen = match scope {
            FreezeScope::None => vec![false; infos.len()],
            FreezeScope::BackboneOnly => {
                infos.iter().map(|i| i.name.starts_with("backbone.")).collect()
            }
        };
        self.bn_stats_frozen = scope == FreezeScope::BackboneOnly;
        FreezeMask { frozen }
    }

    // ----- parameter-group registry -----

    fn backbone_group_count(&self) -> usize {
        self.backbone.iter().map(|l| l.param_slots().len()).sum()
    }

    pub fn group_count(&self) -> usize {
        self.backbone_group_count() + 2 * self.heads.len()
    }

    pub fn group_infos(&self) -> Vec<GroupInfo> {
        let mut infos = Vec::with_capacity(self.group_count());
        let mut kind_counts: std::collections::HashMap<&'static str, usize> =
            std::collections::HashMap::new();
        for layer in &self.backbone {
            let kind = layer.kind();
            let slots = layer.param_slots();
            if slots.is_empty() {
                continue;
            }
            let n = kind_counts.entry(kind).or_insert(0);
            let ordinal = *n;
            *n += 1;
            for (slot_name, trainable) in slots {
                infos.push(GroupInfo {
                    name: format!("backbone.{kind}{ordinal}.{slot_name}"),
                    trainable: *trainable,
                });
            }
        }
        for (h, _) in self.heads.iter().enumerate() {
            infos.push(GroupInfo { name: format!("head{h}.weight"), trainable: true });
            infos.push(GroupInfo { name: format!("head{h}.bias"), trainable: true });
        }
        infos
    }

    fn resolve_group(&self, group: usize) -> GroupSlot {
        let mut g = group;
        for (layer_idx, layer) in self.backbone.iter().enumerate() {
            let n = layer.param_slots().len();
            if g < n {
                return GroupSlot::Backbone { layer: layer_idx, slot: g };
            }
            g -= n;
        }
        GroupSlot::Head { head: g / 2, slot: g % 2 }
    }

    pub fn group(&self, group: usize) -> &Tensor<S> {
        match self.resolve_group(group) {
            GroupSlot::Backbone { layer, slot } => self.backbone[layer].param(slot),
            GroupSlot::Head { head, slot } => {
                if slot == 0 {
                    &self.heads[head].weight
                } else {
                    &self.heads[head].bias
                }
            }
        }
    }

    pub fn group_mut(&mut self, group: usize) -> &mut Tensor<S> {
        match self.resolve_group(group) {
            GroupSlot::Backbone { layer, slot } => self.backbone[layer].param_mut(slot),
            GroupSlot::Head { head, slot } => {
                if slot == 0 {
                    &mut self.heads[head].weight
                } else {
                    &mut self.heads[head].bias
                }
            }
        }
    }

    pub fn group_is_trainable(&self, group: usize) -> bool {
        match self.resolve_group(group) {
            GroupSlot::Backbone { layer, slot } => self.backbone[layer].param_slots()[slot].1,
            GroupSlot::Head { .. } => true,
        }
    }

    /// FNV checksum over every parameter group in declaration order.
    pub fn checksum_all(&self) -> u64 {
        let tensors: Vec<&Tensor<S>> = (0..self.group_count()).map(|g| self.group(g)).collect();
        checksum(&tensors)
    }

    /// Checksum over backbone groups only (running statistics included).
    pub fn checksum_backbone(&self) -> u64 {
        let tensors: Vec<&Tensor<S>> =
            (0..self.backbone_group_count()).map(|g| self.group(g)).collect();
        checksum(&tensors)
    }

    /// Bitwise equality of all parameters and head label lists.
    pub fn params_bits_eq(&self, other: &ModelState<S>) -> bool {
        if self.group_count() != other.group_count() {
            return false;
        }
        if self.heads.len() != other.heads.len() {
            return false;
        }
        for (a, b) in self.heads.iter().zip(other.heads.iter()) {
            if a.class_labels != b.class_labels {
                return false;
            }
        }
        (0..self.group_count()).all(|g| self.group(g).bits_eq(other.group(g)))
    }
}

impl ModelState<f32> {
    /// Write the snapshot: `CILM`, a version word, a length-prefixed JSON
    /// manifest (backbone spec, head specs, rng seed and stream position),
    /// then every parameter group as little-endian f32 in declaration order.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let manifest = SnapshotManifest {
            backbone: self.spec.clone(),
            heads: self.heads.iter().map(Head::spec).collect(),
            rng_seed: self.seed,
            rng_word_pos_hi: (self.rng.get_word_pos() >> 64) as u64,
            rng_word_pos_lo: self.rng.get_word_pos() as u64,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_bytes);
        for g in 0..self.group_count() {
            for v in self.group(g).data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&out)?;
        Ok(())
    }

    pub fn load_snapshot(path: &Path) -> Result<ModelState<f32>> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[0..4] != SNAPSHOT_MAGIC {
            return Err(Error::Format("bad snapshot magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + mlen {
            return Err(Error::Format("snapshot manifest truncated".into()));
        }
        let manifest: SnapshotManifest = serde_json::from_slice(&bytes[12..12 + mlen])?;
        let label_sets: Vec<Vec<usize>> =
            manifest.heads.iter().map(|h| h.class_labels.clone()).collect();
        let mut model = ModelState::<f32>::zeroed(&manifest.backbone, &label_sets, manifest.rng_seed)?;
        for (h, spec) in manifest.heads.iter().enumerate() {
            model.heads[h].task_id = spec.task_id;
        }
        let mut cursor = 12 + mlen;
        for g in 0..model.group_count() {
            let n = model.group(g).len();
            let end = cursor + 4 * n;
            if bytes.len() < end {
                return Err(Error::Format(format!(
                    "snapshot payload truncated in group {g} (need {end} bytes, have {})",
                    bytes.len()
                )));
            }
            let data = model.group_mut(g).data_mut();
            for (i, chunk) in bytes[cursor..end].chunks_exact(4).enumerate() {
                data[i] = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(Error::Format(format!(
                "snapshot has {} trailing bytes",
                bytes.len() - cursor
            )));
        }
        let word_pos =
            (u128::from(manifest.rng_word_pos_hi) << 64) | u128::from(manifest.rng_word_pos_lo);
        model.rng.set_word_pos(word_pos);
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotManifest {
    backbone: BackboneSpec,
    heads: Vec<HeadSpec>,
    rng_seed: u64,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
}

fn init_uniform<S: Scalar>(t: &mut Tensor<S>, scale: f64, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = S::from_f64((rng.random::<f64>() * 2.0 - 1.0) * scale);
    }
}

fn build_backbone<S: Scalar>(spec: &BackboneSpec) -> Result<Vec<Layer<S>>> {
    let mut layers = Vec::new();
    match &spec.variant {
        BackboneVariant::Mlp { hidden_sizes } => {
            let mut in_dim = spec.input_features();
            for &out_dim in hidden_sizes.iter().chain(std::iter::once(&spec.embedding_dim)) {
                layers.push(Layer::Dense(Dense {
                    weight: Tensor::zeros(&[in_dim, out_dim]),
                    bias: Tensor::zeros(&[out_dim]),
                }));
                layers.push(Layer::Relu);
                in_dim = out_dim;
            }
        }
        BackboneVariant::ConvNet { conv_channels, kernel_size, dropout_rate } => {
            let mut in_ch = spec.input_channels();
            for &out_ch in conv_channels {
                layers.push(Layer::Conv2d(Conv2d {
                    weight: Tensor::zeros(&[out_ch, in_ch, *kernel_size, *kernel_size]),
                    bias: Tensor::zeros(&[out_ch]),
                    kernel: *kernel_size,
                }));
                layers.push(Layer::BatchNorm2d(BatchNorm2d {
                    gamma: Tensor::scalar_filled(&[out_ch], S::ONE),
                    beta: Tensor::zeros(&[out_ch]),
                    running_mean: Tensor::zeros(&[out_ch]),
                    running_var: Tensor::scalar_filled(&[out_ch], S::ONE),
                }));
                layers.push(Layer::Relu);
                in_ch = out_ch;
            }
            layers.push(Layer::Dropout { rate: *dropout_rate });
            layers.push(Layer::GlobalAvgPool);
        }
    }
    Ok(layers)
}

fn build_head<S: Scalar>(spec: &BackboneSpec, task_id: usize, labels: &[usize]) -> Result<Head<S>> {
    if labels.is_empty() {
        return Err(Error::InvalidConfig(format!("head {task_id} has no classes")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in labels {
        if !seen.insert(*l) {
            return Err(Error::InvalidConfig(format!(
                "head {task_id} has duplicate class label {l}"
            )));
        }
    }
    Ok(Head {
        task_id,
        class_labels: labels.to_vec(),
        weight: Tensor::zeros(&[spec.embedding_dim, labels.len()]),
        bias: Tensor::zeros(&[labels.len()]),
    })
}

fn head_backward<S: Scalar>(
    head: &Head<S>,
    emb: &Tensor<S>,
    d_logits: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let dw = matmul_tn(emb, d_logits)?;
    let mut db = Tensor::zeros(&[head.width()]);
    for r in 0..d_logits.rows() {
        for (acc, v) in db.data_mut().iter_mut().zip(d_logits.row(r)) {
            *acc += *v;
        }
    }
    let d_emb = matmul_nt(d_logits, &head.weight)?;
    Ok((dw, db, d_emb))
}

fn evaluate_terms<S: Scalar>(
    logits: &Tensor<S>,
    terms: &[LossTerm<S>],
) -> Result<(S, Tensor<S>)> {
    let batch = logits.rows();
    let mut d_logits = Tensor::zeros(logits.shape());
    let mut loss = S::ZERO;
    for term in terms {
        match term {
            LossTerm::CrossEntropy { rows, labels, weight } => {
                let selected = resolve_rows(rows, batch)?;
                if selected.is_empty() {
                    continue;
                }
                if labels.len() != selected.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "cross-entropy term: {} rows vs {} labels",
                        selected.len(),
                        labels.len()
                    )));
                }
                let sub = logits.gather_rows(&selected);
                let (l, mut g) = cross_entropy_with_grad(&sub, labels)?;
                g.scale(*weight);
                d_logits.scatter_add_rows(&selected, &g);
                loss += *weight * l;
            }
            LossTerm::Distillation { rows, teacher, temperature, weight } => {
                let selected = resolve_rows(rows, batch)?;
                if selected.is_empty() {
                    continue;
                }
                if teacher.rows() != selected.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "distillation term: {} rows vs {} teacher rows",
                        selected.len(),
                        teacher.rows()
                    )));
                }
                let sub = logits.gather_rows(&selected);
                let (l, mut g) = kd_loss_with_grad(&sub, teacher, *temperature)?;
                g.scale(*weight);
                // KD gradients only touch the teacher-known leading columns.
                let width = teacher.row_len();
                for (i, &r) in selected.iter().enumerate() {
                    for (dst, src) in
                        d_logits.row_mut(r)[..width].iter_mut().zip(g.row(i))
                    {
                        *dst += *src;
                    }
                }
                loss += *weight * l;
            }
        }
    }
    Ok((loss, d_logits))
}

fn resolve_rows(rows: &Option<Vec<usize>>, batch: usize) -> Result<Vec<usize>> {
    match rows {
        None => Ok((0..batch).collect()),
        Some(v) => {
            for &r in v {
                if r >= batch {
                    return Err(Error::ShapeMismatch(format!(
                        "row {r} out of range for batch {batch}"
                    )));
                }
            }
            Ok(v.clone())
        }
    }
}
