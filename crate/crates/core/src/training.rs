//! The adaptation engine: three gradient-isolated sub-updates per batch.
//!
//! Each batch triple runs, in fixed order, a retain update (cross-entropy
//! plus a teacher embedding anchor), a forget update (MSE toward the solved
//! escape point), and a new-class update (plain cross-entropy). Every loss
//! steps only its own adapter pathway and its own classifier-head rows;
//! non-target head gradients are masked at the optimizer. After the epoch
//! loop, the bundle merges into the base weights.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    self, AdapterOverlay, MergeReport, PathwayBundle, PathwayGate, Pathway, SignConvention,
    StandardAdapterSet,
};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::escape::{self, EscapeSolverOpts};
use crate::harness::TaskSpec;
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Loss weighting: `lambda_ce`/`lambda_emb` balance the retention terms,
/// `lambda_esc` scales the escape point. `lambda_esc == 0` degenerates the
/// escape target to the origin (used by the scaling ablation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_emb: f64,
    pub lambda_esc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_ce: 1.0,
            lambda_emb: 1.0,
            lambda_esc: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ce", self.lambda_ce),
            ("lambda_emb", self.lambda_emb),
            ("lambda_esc", self.lambda_esc),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One adaptation step's hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_retain: f64,
    pub lr_new: f64,
    pub lr_forget: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub sign_convention: SignConvention,
    /// The {learn, unlearn} mask: with `unlearn` off the forget update is
    /// skipped entirely, and symmetrically for `learn`.
    pub learn_enabled: bool,
    pub unlearn_enabled: bool,
    pub solver: EscapeSolverOpts,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr_retain: 0.05,
            lr_new: 0.05,
            lr_forget: 0.02,
            weights: LossWeights::default(),
            seed: 0,
            sign_convention: SignConvention::Additive,
            learn_enabled: true,
            unlearn_enabled: true,
            solver: EscapeSolverOpts::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.weights.validate()
    }
}

/// One sub-update's log record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SubUpdateRecord {
    pub task: usize,
    pub epoch: usize,
    pub batch: usize,
    pub pathway: String,
    pub loss: f64,
}

/// Loss traces and per-pathway update norms for one adaptation step.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StepReport {
    pub task_index: usize,
    pub retain_trace: Vec<f64>,
    pub forget_trace: Vec<f64>,
    pub new_trace: Vec<f64>,
    /// L2 norm of the cumulative parameter updates applied per pathway.
    pub update_norms: std::collections::BTreeMap<String, f64>,
    pub records: Vec<SubUpdateRecord>,
}

impl StepReport {
    /// Writes one JSON record per sub-update.
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// `lambda_ce * CE(logits, labels) + lambda_emb * MSE(student_emb, teacher_emb)`.
pub fn retention_loss<T: Scalar>(
    student_logits: &Tensor<T>,
    labels: &[usize],
    student_emb: &Tensor<T>,
    teacher_emb: &Tensor<T>,
    weights: &LossWeights,
    retain_classes: &BTreeSet<usize>,
) -> Result<Tensor<T>> {
    for &l in labels {
        if !retain_classes.contains(&l) {
            return Err(Error::contract(
                "retention_loss",
                format!("label {l} outside the retain set {retain_classes:?}"),
            ));
        }
    }
    let ce = student_logits.softmax_cross_entropy(labels)?;
    let anchor = student_emb.mse(teacher_emb)?;
    ce.scale(T::from_f(weights.lambda_ce))
        .add(&anchor.scale(T::from_f(weights.lambda_emb)))
}

/// The three input streams of one adaptation step.
pub struct AdaptStreams<'a, T: Scalar> {
    pub replay: &'a LabeledDataset<T>,
    pub forget: &'a LabeledDataset<T>,
    pub new: &'a LabeledDataset<T>,
}

/// Runs the full adaptation step and merges the bundle into the model.
pub fn adapt<T: Scalar>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    bundle: PathwayBundle<T>,
    task: &TaskSpec,
    streams: AdaptStreams<'_, T>,
    cfg: &TrainConfig,
) -> Result<(StepReport, MergeReport)> {
    let mut bundle = bundle;
    let report = adapt_unmerged(student, teacher, &mut bundle, task, streams, cfg)?;
    let merge = adapters::merge(bundle, student, cfg.sign_convention)?;
    Ok((report, merge))
}

/// The adaptation loop without the final merge; the gate ablation evaluates
/// the returned bundle with pathways selectively disabled.
pub fn adapt_unmerged<T: Scalar>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    bundle: &mut PathwayBundle<T>,
    task: &TaskSpec,
    streams: AdaptStreams<'_, T>,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    cfg.validate()?;
    validate_streams(task, &streams, cfg)?;
    student.activate_classes(&task.new_classes)?;

    bundle.bind_head_rows(Pathway::Retain, &task.retain_classes);
    bundle.bind_head_rows(Pathway::New, &task.new_classes);
    bundle.bind_head_rows(Pathway::Forget, &task.forget_classes);

    // Escape target once per task, from replay-buffer embeddings under the
    // frozen teacher, before the epoch loop.
    let escape_target: Option<Vec<T>> = if cfg.unlearn_enabled {
        Some(compute_escape_target(teacher, streams.replay, cfg)?)
    } else {
        None
    };

    let mut report = StepReport {
        task_index: task.index,
        ..StepReport::default()
    };
    let mut norms_sq = [0.0f64; 3]; // retain, forget, new

    let mut enabled_lens = vec![streams.replay.len()];
    if cfg.unlearn_enabled {
        enabled_lens.push(streams.forget.len());
    }
    if cfg.learn_enabled {
        enabled_lens.push(streams.new.len());
    }
    let longest = enabled_lens.into_iter().max().unwrap_or(0);
    let batches = longest.div_ceil(cfg.batch_size);

    let head_weight = student.head().weight.clone();
    let head_bias = student.head().bias.clone();
    let embed_dim = student.config().embed_dim;

    for epoch in 0..cfg.epochs {
        let replay_idx = epoch_order(streams.replay.len(), cfg.seed, epoch, 0);
        let forget_idx = epoch_order(streams.forget.len(), cfg.seed, epoch, 1);
        let new_idx = epoch_order(streams.new.len(), cfg.seed, epoch, 2);

        for batch in 0..batches {
            // Retention update.
            {
                adapters::set_trainable(bundle, student, Pathway::Retain);
                zero_step_grads(bundle, &head_weight, &head_bias);
                let rows = cyclic_batch(&replay_idx, batch, cfg.batch_size);
                let (x, labels) = streams.replay.batch(&rows)?;
                let overlay = AdapterOverlay::Tri {
                    bundle,
                    gate: PathwayGate::all(),
                };
                let emb = student.embed(&x, overlay)?;
                let logits = student.head().logits(&emb)?;
                let teacher_emb = teacher.embed(&x, AdapterOverlay::None)?;
                let loss = retention_loss(
                    &logits,
                    &labels,
                    &emb,
                    &teacher_emb,
                    &cfg.weights,
                    &task.retain_classes,
                )?;
                let value = finite_or_err(&loss, "retain", epoch, batch)?;
                loss.backward()?;
                norms_sq[0] += step_pathway(
                    bundle,
                    Pathway::Retain,
                    &head_weight,
                    &head_bias,
                    embed_dim,
                    cfg.lr_retain,
                );
                push_record(&mut report, task.index, epoch, batch, "retain", value);
            }

            // Forget update.
            if let Some(target) = &escape_target {
                adapters::set_trainable(bundle, student, Pathway::Forget);
                zero_step_grads(bundle, &head_weight, &head_bias);
                let rows = cyclic_batch(&forget_idx, batch, cfg.batch_size);
                let (x, _) = streams.forget.batch(&rows)?;
                let overlay = AdapterOverlay::Tri {
                    bundle,
                    gate: PathwayGate::all(),
                };
                let emb = student.embed(&x, overlay)?;
                let loss = escape::forget_loss(&emb, target)?;
                let value = finite_or_err(&loss, "forget", epoch, batch)?;
                loss.backward()?;
                norms_sq[1] += step_pathway(
                    bundle,
                    Pathway::Forget,
                    &head_weight,
                    &head_bias,
                    embed_dim,
                    cfg.lr_forget,
                );
                push_record(&mut report, task.index, epoch, batch, "forget", value);
            }

            // New-knowledge update.
            if cfg.learn_enabled {
                adapters::set_trainable(bundle, student, Pathway::New);
                zero_step_grads(bundle, &head_weight, &head_bias);
                let rows = cyclic_batch(&new_idx, batch, cfg.batch_size);
                let (x, labels) = streams.new.batch(&rows)?;
                let overlay = AdapterOverlay::Tri {
                    bundle,
                    gate: PathwayGate::all(),
                };
                let logits = student.forward(&x, overlay)?;
                let loss = logits.softmax_cross_entropy(&labels)?;
                let value = finite_or_err(&loss, "new", epoch, batch)?;
                loss.backward()?;
                norms_sq[2] += step_pathway(
                    bundle,
                    Pathway::New,
                    &head_weight,
                    &head_bias,
                    embed_dim,
                    cfg.lr_new,
                );
                push_record(&mut report, task.index, epoch, batch, "new", value);
            }
        }
    }

    report
        .update_norms
        .insert("retain".into(), norms_sq[0].sqrt());
    report
        .update_norms
        .insert("forget".into(), norms_sq[1].sqrt());
    report.update_norms.insert("new".into(), norms_sq[2].sqrt());
    Ok(report)
}

/// Ablation baseline: the same protocol with one shared adapter per layer
/// receiving all three losses sequentially, no isolation. The merge is
/// always additive.
pub fn standard_lora_adapt<T: Scalar>(
    student: &mut Model<T>,
    teacher: &Model<T>,
    set: StandardAdapterSet<T>,
    task: &TaskSpec,
    streams: AdaptStreams<'_, T>,
    cfg: &TrainConfig,
) -> Result<(StepReport, MergeReport)> {
    cfg.validate()?;
    validate_streams(task, &streams, cfg)?;
    student.activate_classes(&task.new_classes)?;

    let escape_target: Option<Vec<T>> = if cfg.unlearn_enabled {
        Some(compute_escape_target(teacher, streams.replay, cfg)?)
    } else {
        None
    };

    let mut report = StepReport {
        task_index: task.index,
        ..StepReport::default()
    };
    let mut norms_sq = [0.0f64; 3];

    let mut enabled_lens = vec![streams.replay.len()];
    if cfg.unlearn_enabled {
        enabled_lens.push(streams.forget.len());
    }
    if cfg.learn_enabled {
        enabled_lens.push(streams.new.len());
    }
    let longest = enabled_lens.into_iter().max().unwrap_or(0);
    let batches = longest.div_ceil(cfg.batch_size);

    let head_weight = student.head().weight.clone();
    let head_bias = student.head().bias.clone();
    let embed_dim = student.config().embed_dim;
    head_weight.set_requires_grad(true);
    head_bias.set_requires_grad(true);
    for layer in &set.layers {
        layer.a.set_requires_grad(true);
        layer.b.set_requires_grad(true);
    }
    let retain_rows: Vec<usize> = task.retain_classes.iter().copied().collect();
    let forget_rows: Vec<usize> = task.forget_classes.iter().copied().collect();
    let new_rows: Vec<usize> = task.new_classes.iter().copied().collect();

    let zero_grads = |set: &StandardAdapterSet<T>| {
        for layer in &set.layers {
            layer.a.zero_grad();
            layer.b.zero_grad();
        }
        head_weight.zero_grad();
        head_bias.zero_grad();
    };
    let step_shared = |set: &StandardAdapterSet<T>, rows: &[usize], lr: f64| -> f64 {
        let lr_t = T::from_f(lr);
        let mut sq = 0.0;
        for layer in &set.layers {
            sq += sgd_step(&layer.a, lr_t);
            sq += sgd_step(&layer.b, lr_t);
        }
        sq += sgd_step_rows(&head_weight, lr_t, rows, embed_dim);
        sq += sgd_step_rows(&head_bias, lr_t, rows, 1);
        sq
    };

    for epoch in 0..cfg.epochs {
        let replay_idx = epoch_order(streams.replay.len(), cfg.seed, epoch, 0);
        let forget_idx = epoch_order(streams.forget.len(), cfg.seed, epoch, 1);
        let new_idx = epoch_order(streams.new.len(), cfg.seed, epoch, 2);

        for batch in 0..batches {
            {
                zero_grads(&set);
                let rows = cyclic_batch(&replay_idx, batch, cfg.batch_size);
                let (x, labels) = streams.replay.batch(&rows)?;
                let emb = student.embed(&x, AdapterOverlay::Shared(&set))?;
                let logits = student.head().logits(&emb)?;
                let teacher_emb = teacher.embed(&x, AdapterOverlay::None)?;
                let loss = retention_loss(
                    &logits,
                    &labels,
                    &emb,
                    &teacher_emb,
                    &cfg.weights,
                    &task.retain_classes,
                )?;
                let value = finite_or_err(&loss, "retain", epoch, batch)?;
                loss.backward()?;
                norms_sq[0] += step_shared(&set, &retain_rows, cfg.lr_retain);
                push_record(&mut report, task.index, epoch, batch, "retain", value);
            }
            if let Some(target) = &escape_target {
                zero_grads(&set);
                let rows = cyclic_batch(&forget_idx, batch, cfg.batch_size);
                let (x, _) = streams.forget.batch(&rows)?;
                let emb = student.embed(&x, AdapterOverlay::Shared(&set))?;
                let loss = escape::forget_loss(&emb, target)?;
                let value = finite_or_err(&loss, "forget", epoch, batch)?;
                loss.backward()?;
                norms_sq[1] += step_shared(&set, &forget_rows, cfg.lr_forget);
                push_record(&mut report, task.index, epoch, batch, "forget", value);
            }
            if cfg.learn_enabled {
                zero_grads(&set);
                let rows = cyclic_batch(&new_idx, batch, cfg.batch_size);
                let (x, labels) = streams.new.batch(&rows)?;
                let logits = student.forward(&x, AdapterOverlay::Shared(&set))?;
                let loss = logits.softmax_cross_entropy(&labels)?;
                let value = finite_or_err(&loss, "new", epoch, batch)?;
                loss.backward()?;
                norms_sq[2] += step_shared(&set, &new_rows, cfg.lr_new);
                push_record(&mut report, task.index, epoch, batch, "new", value);
            }
        }
    }

    report
        .update_norms
        .insert("retain".into(), norms_sq[0].sqrt());
    report
        .update_norms
        .insert("forget".into(), norms_sq[1].sqrt());
    report.update_norms.insert("new".into(), norms_sq[2].sqrt());
    let merge = adapters::merge_standard(set, student)?;
    Ok((report, merge))
}

// ── Shared machinery ────────────────────────────────────────────────────────

fn validate_streams<T: Scalar>(
    task: &TaskSpec,
    streams: &AdaptStreams<'_, T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if !streams.replay.classes().is_subset(&task.retain_classes) {
        return Err(Error::contract(
            "adapt",
            "replay stream contains labels outside the task's retain set",
        ));
    }
    if cfg.unlearn_enabled {
        if streams.forget.is_empty() {
            return Err(Error::contract(
                "adapt",
                "unlearning enabled but the forget stream is empty",
            ));
        }
        if !streams.forget.classes().is_subset(&task.forget_classes) {
            return Err(Error::contract(
                "adapt",
                "forget stream contains labels outside the task's forget set",
            ));
        }
    }
    if cfg.learn_enabled {
        if streams.new.is_empty() {
            return Err(Error::contract(
                "adapt",
                "learning enabled but the new stream is empty",
            ));
        }
        if !streams.new.classes().is_subset(&task.new_classes) {
            return Err(Error::contract(
                "adapt",
                "new stream contains labels outside the task's new set",
            ));
        }
    }
    if streams.replay.is_empty() {
        return Err(Error::contract("adapt", "replay stream is empty"));
    }
    Ok(())
}

fn compute_escape_target<T: Scalar>(
    teacher: &Model<T>,
    replay: &LabeledDataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<T>> {
    let (x, labels) = replay.all()?;
    let emb = teacher.embed(&x, AdapterOverlay::None)?;
    let cents = escape::centroids(&emb, &labels)?;
    let mut opts = cfg.solver.clone();
    opts.seed = mix_seed(cfg.seed, esc_tag(), 0);
    let dir = escape::solve_escape_direction(&cents, &opts)?;
    if cfg.weights.lambda_esc == 0.0 {
        // Degenerate scaling: the target collapses to the origin.
        return Ok(vec![T::zero(); dir.direction.len()]);
    }
    let target =
        escape::EscapeTarget::from_direction(dir, T::from_f(cfg.weights.lambda_esc))?;
    Ok(target.point)
}

const fn esc_tag() -> u64 {
    0x65736370 // "escp"
}

fn finite_or_err<T: Scalar>(
    loss: &Tensor<T>,
    pathway: &'static str,
    epoch: usize,
    batch: usize,
) -> Result<f64> {
    let v = loss.item().to_f();
    if !v.is_finite() {
        return Err(Error::Training {
            pathway,
            epoch,
            batch,
        });
    }
    Ok(v)
}

fn push_record(
    report: &mut StepReport,
    task: usize,
    epoch: usize,
    batch: usize,
    pathway: &str,
    loss: f64,
) {
    match pathway {
        "retain" => report.retain_trace.push(loss),
        "forget" => report.forget_trace.push(loss),
        _ => report.new_trace.push(loss),
    }
    report.records.push(SubUpdateRecord {
        task,
        epoch,
        batch,
        pathway: pathway.to_string(),
        loss,
    });
}

fn zero_step_grads<T: Scalar>(
    bundle: &PathwayBundle<T>,
    head_weight: &Tensor<T>,
    head_bias: &Tensor<T>,
) {
    for layer in &bundle.layers {
        for p in Pathway::ALL {
            layer.get(p).a.zero_grad();
            layer.get(p).b.zero_grad();
        }
    }
    head_weight.zero_grad();
    head_bias.zero_grad();
}

fn step_pathway<T: Scalar>(
    bundle: &PathwayBundle<T>,
    pathway: Pathway,
    head_weight: &Tensor<T>,
    head_bias: &Tensor<T>,
    embed_dim: usize,
    lr: f64,
) -> f64 {
    let lr_t = T::from_f(lr);
    let mut sq = 0.0;
    for layer in &bundle.layers {
        let ad = layer.get(pathway);
        sq += sgd_step(&ad.a, lr_t);
        sq += sgd_step(&ad.b, lr_t);
    }
    let rows = bundle.head_rows(pathway);
    sq += sgd_step_rows(head_weight, lr_t, rows, embed_dim);
    sq += sgd_step_rows(head_bias, lr_t, rows, 1);
    sq
}

/// Plain SGD on one tensor; returns the squared L2 norm of the applied update.
pub fn sgd_step<T: Scalar>(param: &Tensor<T>, lr: T) -> f64 {
    let Some(grad) = param.grad() else {
        return 0.0;
    };
    let mut sq = 0.0;
    param.update_values(|vals| {
        for (v, g) in vals.iter_mut().zip(grad.iter()) {
            let delta = lr * *g;
            sq += (delta.to_f()).powi(2);
            *v = *v - delta;
        }
    });
    sq
}

/// SGD restricted to the given rows of a `[rows x row_len]` tensor; the
/// masked rows stay bit-identical. `row_len == 1` addresses a vector.
pub fn sgd_step_rows<T: Scalar>(param: &Tensor<T>, lr: T, rows: &[usize], row_len: usize) -> f64 {
    let Some(grad) = param.grad() else {
        return 0.0;
    };
    let mut sq = 0.0;
    param.update_values(|vals| {
        for &r in rows {
            for j in 0..row_len {
                let idx = r * row_len + j;
                let delta = lr * grad[idx];
                sq += (delta.to_f()).powi(2);
                vals[idx] = vals[idx] - delta;
            }
        }
    });
    sq
}

/// Per-epoch sample order for one stream; seeded and stream-specific.
fn epoch_order(len: usize, seed: u64, epoch: usize, stream: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch as u64, stream));
    crate::model::shuffle(&mut order, &mut rng);
    order
}

/// Cyclic batch slice: shorter streams wrap so every batch triple is full.
fn cyclic_batch(order: &[usize], batch: usize, batch_size: usize) -> Vec<usize> {
    let len = order.len();
    (0..batch_size)
        .map(|j| order[(batch * batch_size + j) % len])
        .collect()
}

/// Deterministic seed derivation (splitmix-style avalanche).
pub fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{attach, attach_standard, AdapterConfig, AdapterOverlay};
    use crate::data::{generate, SyntheticSpec};
    use crate::fdiff::{max_rel_err, numeric_grad};
    use crate::model::{pretrain, BackboneConfig, Model};
    use sha2::{Digest, Sha256};

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            input_dim: 4,
            seq_len: 3,
            depth: 2,
            embed_dim: 8,
            heads: 2,
            mlp_ratio: 2,
            num_class_slots: 8,
        }
    }

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 6,
            train_per_class: 12,
            test_per_class: 6,
            seq_len: 3,
            input_dim: 4,
            noise_sigma: 0.3,
            seed: 31,
        }
    }

    fn tiny_task() -> TaskSpec {
        TaskSpec {
            index: 1,
            forget_classes: [0, 1].into_iter().collect(),
            retain_classes: [2, 3].into_iter().collect(),
            new_classes: [4, 5].into_iter().collect(),
        }
    }

    fn tiny_train_cfg(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    struct Fixture {
        student: Model<f64>,
        teacher: Model<f64>,
        data: crate::data::SyntheticDataset<f64>,
    }

    fn fixture() -> Fixture {
        let data = generate::<f64>(&tiny_spec());
        let mut student = Model::init(&tiny_cfg(), 41).unwrap();
        let initial: std::collections::BTreeSet<usize> = (0..4).collect();
        let pre = data.train.filter_classes(&initial);
        pretrain(&mut student, &pre, 15, 0.05, 8, 7).unwrap();
        let teacher = student.clone_frozen();
        Fixture {
            student,
            teacher,
            data,
        }
    }

    fn streams(data: &crate::data::SyntheticDataset<f64>, task: &TaskSpec) -> (
        crate::data::LabeledDataset<f64>,
        crate::data::LabeledDataset<f64>,
        crate::data::LabeledDataset<f64>,
    ) {
        (
            data.train.filter_classes(&task.retain_classes),
            data.train.filter_classes(&task.forget_classes),
            data.train.filter_classes(&task.new_classes),
        )
    }

    fn param_bits(model: &Model<f64>) -> Vec<u64> {
        model
            .named_params()
            .iter()
            .flat_map(|(_, t)| t.values().into_iter().map(f64::to_bits))
            .collect()
    }

    #[test]
    fn retention_loss_vanishes_in_the_ideal_case() {
        let logits =
            crate::tensor::Tensor::<f64>::from_vec(vec![1, 3], vec![30.0, -30.0, -30.0]).unwrap();
        let emb = crate::tensor::Tensor::from_vec(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let retain: std::collections::BTreeSet<usize> = [0].into_iter().collect();
        let loss = retention_loss(&logits, &[0], &emb, &emb, &LossWeights::default(), &retain)
            .unwrap()
            .item();
        assert!(loss < 1e-12, "loss {loss}");
    }

    #[test]
    fn retention_loss_reduces_to_ce_when_anchor_masked() {
        let logits =
            crate::tensor::Tensor::<f64>::from_vec(vec![2, 3], vec![1.0, 0.2, -0.5, 0.0, 0.1, 0.4])
                .unwrap();
        let e1 = crate::tensor::Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let e2 = crate::tensor::Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let weights = LossWeights {
            lambda_emb: 0.0,
            ..LossWeights::default()
        };
        let retain: std::collections::BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let combined = retention_loss(&logits, &[0, 2], &e1, &e2, &weights, &retain)
            .unwrap()
            .item();
        let ce = logits.softmax_cross_entropy(&[0, 2]).unwrap().item();
        assert!((combined - ce).abs() < 1e-15);
    }

    #[test]
    fn retention_loss_rejects_labels_outside_retain_set() {
        let logits = crate::tensor::Tensor::<f64>::zeros(vec![1, 3]);
        let emb = crate::tensor::Tensor::<f64>::zeros(vec![1, 2]);
        let retain: std::collections::BTreeSet<usize> = [0].into_iter().collect();
        assert!(matches!(
            retention_loss(&logits, &[2], &emb, &emb, &LossWeights::default(), &retain),
            Err(Error::Contract { .. })
        ));
    }

    #[test]
    fn retention_loss_gradient_matches_finite_differences() {
        let mut state = 0.3;
        let mut next = || {
            state = (state * 91.7 + 0.23) % 1.0;
            state - 0.5
        };
        let z0: Vec<f64> = (0..6).map(|_| next()).collect();
        let e0: Vec<f64> = (0..4).map(|_| next()).collect();
        let et: Vec<f64> = (0..4).map(|_| next()).collect();
        let retain: std::collections::BTreeSet<usize> = [0, 1, 2].into_iter().collect();
        let weights = LossWeights {
            lambda_ce: 0.7,
            lambda_emb: 1.3,
            lambda_esc: 10.0,
        };

        let z = crate::tensor::Tensor::param(vec![2, 3], z0.clone()).unwrap();
        let e = crate::tensor::Tensor::param(vec![2, 2], e0.clone()).unwrap();
        let t = crate::tensor::Tensor::from_vec(vec![2, 2], et.clone()).unwrap();
        retention_loss(&z, &[0, 1], &e, &t, &weights, &retain)
            .unwrap()
            .backward()
            .unwrap();

        let fz = |x: &[f64]| {
            let z = crate::tensor::Tensor::from_vec(vec![2, 3], x.to_vec()).unwrap();
            let e = crate::tensor::Tensor::from_vec(vec![2, 2], e0.clone()).unwrap();
            let t = crate::tensor::Tensor::from_vec(vec![2, 2], et.clone()).unwrap();
            retention_loss(&z, &[0, 1], &e, &t, &weights, &retain)
                .unwrap()
                .item()
        };
        let fe = |x: &[f64]| {
            let z = crate::tensor::Tensor::from_vec(vec![2, 3], z0.clone()).unwrap();
            let e = crate::tensor::Tensor::from_vec(vec![2, 2], x.to_vec()).unwrap();
            let t = crate::tensor::Tensor::from_vec(vec![2, 2], et.clone()).unwrap();
            retention_loss(&z, &[0, 1], &e, &t, &weights, &retain)
                .unwrap()
                .item()
        };
        assert!(max_rel_err(&z.grad().unwrap(), &numeric_grad(fz, &z0, 1e-5)) < 1e-6);
        assert!(max_rel_err(&e.grad().unwrap(), &numeric_grad(fe, &e0, 1e-5)) < 1e-6);
    }

    #[test]
    fn zero_epochs_returns_the_input_model_bitwise() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let before = param_bits(&student);
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        let (report, merge) = adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &tiny_train_cfg(0),
        )
        .unwrap();
        assert_eq!(param_bits(&student), before);
        assert!(report.retain_trace.is_empty());
        assert_eq!(merge.probe_deviation, 0.0);
    }

    #[test]
    fn gradient_isolation_between_pathways_and_head_rows() {
        let Fixture {
            mut student,
            teacher: _teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let (_retain, forget, _new) = streams(&data, &task);
        let mut bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        bundle.bind_head_rows(Pathway::Retain, &task.retain_classes);
        bundle.bind_head_rows(Pathway::New, &task.new_classes);
        bundle.bind_head_rows(Pathway::Forget, &task.forget_classes);
        student.activate_classes(&task.new_classes).unwrap();

        // One forget-only sub-update: everything except the forget adapters
        // and forget head rows must stay bit-identical.
        let snapshot: Vec<Vec<u64>> = bundle
            .layers
            .iter()
            .flat_map(|l| {
                [
                    l.retain.a.values(),
                    l.retain.b.values(),
                    l.new.a.values(),
                    l.new.b.values(),
                ]
            })
            .map(|v| v.into_iter().map(f64::to_bits).collect())
            .collect();
        let head_before = student.head().weight.values();

        crate::adapters::set_trainable(&bundle, &student, Pathway::Forget);
        let (x, _) = forget.all().unwrap();
        let emb = student
            .embed(
                &x,
                AdapterOverlay::Tri {
                    bundle: &bundle,
                    gate: crate::adapters::PathwayGate::all(),
                },
            )
            .unwrap();
        let target = vec![1.0; 8];
        crate::escape::forget_loss(&emb, &target)
            .unwrap()
            .backward()
            .unwrap();
        let lr = 0.05;
        for layer in &bundle.layers {
            sgd_step(&layer.forget.a, lr);
            sgd_step(&layer.forget.b, lr);
        }
        sgd_step_rows(&student.head().weight, lr, bundle.head_rows(Pathway::Forget), 8);

        let after: Vec<Vec<u64>> = bundle
            .layers
            .iter()
            .flat_map(|l| {
                [
                    l.retain.a.values(),
                    l.retain.b.values(),
                    l.new.a.values(),
                    l.new.b.values(),
                ]
            })
            .map(|v| v.into_iter().map(f64::to_bits).collect())
            .collect();
        assert_eq!(snapshot, after);
        let head_after = student.head().weight.values();
        let d = 8;
        for row in 0..student.config().num_class_slots {
            let same = head_before[row * d..(row + 1) * d] == head_after[row * d..(row + 1) * d];
            if task.forget_classes.contains(&row) {
                // Escape loss carries no head gradient; rows may stay equal,
                // but only forget rows are permitted to move at all.
                continue;
            }
            assert!(same, "row {row} moved");
        }
    }

    #[test]
    fn masked_learn_keeps_new_trace_empty_and_forget_runs() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        let cfg = TrainConfig {
            learn_enabled: false,
            ..tiny_train_cfg(2)
        };
        let (report, _) = adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &cfg,
        )
        .unwrap();
        assert!(report.new_trace.is_empty());
        assert!(!report.forget_trace.is_empty());
        assert_eq!(report.retain_trace.len(), report.forget_trace.len());
    }

    #[test]
    fn masked_unlearn_leaves_forget_accuracy_untouched() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let acc_before =
            crate::metrics::accuracy(&student, &data.test, &task.forget_classes).unwrap();
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        let cfg = TrainConfig {
            unlearn_enabled: false,
            ..tiny_train_cfg(4)
        };
        let (report, _) = adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &cfg,
        )
        .unwrap();
        assert!(report.forget_trace.is_empty());
        let acc_after =
            crate::metrics::accuracy(&student, &data.test, &task.forget_classes).unwrap();
        assert!(
            (acc_after - acc_before).abs() <= 0.25,
            "forget accuracy moved {acc_before} -> {acc_after} with unlearning masked"
        );
    }

    #[test]
    fn empty_forget_set_with_unlearning_enabled_is_a_contract_error() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let (retain, _unused_forget, new) = streams(&data, &task);
        let empty = crate::data::LabeledDataset::new(3, 4);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        let err = adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &empty,
                new: &new,
            },
            &tiny_train_cfg(1),
        );
        assert!(matches!(err, Err(Error::Contract { .. })));
    }

    #[test]
    fn adapt_is_deterministic_under_identical_seeds() {
        let run = || {
            let Fixture {
                mut student,
                teacher,
                data,
            } = fixture();
            let task = tiny_task();
            let (retain, forget, new) = streams(&data, &task);
            let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
            let (report, _) = adapt(
                &mut student,
                &teacher,
                bundle,
                &task,
                AdaptStreams {
                    replay: &retain,
                    forget: &forget,
                    new: &new,
                },
                &tiny_train_cfg(3),
            )
            .unwrap();
            (report, param_bits(&student))
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn teacher_is_invariant_and_its_outputs_stable() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let probe = teacher.probe_batch(8, 99);
        let hash_outputs = |m: &Model<f64>| {
            let out = m.embed(&probe, AdapterOverlay::None).unwrap().values();
            let mut h = Sha256::new();
            for v in out {
                h.update(v.to_le_bytes());
            }
            format!("{:x}", h.finalize())
        };
        let teacher_bits_before = param_bits(&teacher);
        let hash_before = hash_outputs(&teacher);

        let task = tiny_task();
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &tiny_train_cfg(3),
        )
        .unwrap();

        assert_eq!(param_bits(&teacher), teacher_bits_before);
        assert_eq!(hash_outputs(&teacher), hash_before);
    }

    #[test]
    fn divergent_learning_rate_reports_pathway_and_step() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        let cfg = TrainConfig {
            lr_retain: 1e12,
            lr_new: 1e12,
            lr_forget: 1e12,
            ..tiny_train_cfg(50)
        };
        let err = adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &cfg,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Training { .. }), "got {err}");
    }

    #[test]
    fn retain_embeddings_drift_less_than_forget_embeddings() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &tiny_train_cfg(10),
        )
        .unwrap();
        let drift = |set: &crate::data::LabeledDataset<f64>| {
            let (x, _) = set.all().unwrap();
            let s = student.embed(&x, AdapterOverlay::None).unwrap().values();
            let t = teacher.embed(&x, AdapterOverlay::None).unwrap().values();
            let d = 8;
            let n = set.len();
            (0..n)
                .map(|i| {
                    (0..d)
                        .map(|j| (s[i * d + j] - t[i * d + j]).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .sum::<f64>()
                / n as f64
        };
        let retain_test = data.test.filter_classes(&task.retain_classes);
        let forget_test = data.test.filter_classes(&task.forget_classes);
        let dr = drift(&retain_test);
        let df = drift(&forget_test);
        assert!(dr < df, "retain drift {dr} not below forget drift {df}");
    }

    #[test]
    fn trace_lengths_match_epochs_times_batches() {
        let Fixture {
            mut student,
            teacher,
            data,
        } = fixture();
        let task = tiny_task();
        let (retain, forget, new) = streams(&data, &task);
        let bundle = attach(&mut student, &AdapterConfig::default(), 5).unwrap();
        let cfg = tiny_train_cfg(3);
        let (report, _) = adapt(
            &mut student,
            &teacher,
            bundle,
            &task,
            AdaptStreams {
                replay: &retain,
                forget: &forget,
                new: &new,
            },
            &cfg,
        )
        .unwrap();
        let longest = retain.len().max(forget.len()).max(new.len());
        let batches = longest.div_ceil(cfg.batch_size);
        assert_eq!(report.retain_trace.len(), cfg.epochs * batches);
        assert_eq!(report.forget_trace.len(), cfg.epochs * batches);
        assert_eq!(report.new_trace.len(), cfg.epochs * batches);
        assert!(report.update_norms["retain"] > 0.0);
    }

    #[test]
    fn step_report_writes_one_json_record_per_sub_update() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = StepReport {
            task_index: 2,
            ..StepReport::default()
        };
        report.records.push(SubUpdateRecord {
            task: 2,
            epoch: 0,
            batch: 1,
            pathway: "retain".into(),
            loss: 0.25,
        });
        let path = dir.path().join("log.jsonl");
        report.write_jsonl(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1);
        let parsed: SubUpdateRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed, report.records[0]);
    }

    #[test]
    fn standard_mode_uses_a_third_of_the_adapter_parameters() {
        let Fixture { mut student, .. } = fixture();
        let rank = 8;
        let bundle = attach(
            &mut student,
            &AdapterConfig {
                rank_retain_new: rank,
                rank_forget: rank,
                scaling: 1.0,
            },
            5,
        )
        .unwrap();
        let tri_params = bundle.adapter_param_count();
        let Fixture {
            student: mut other, ..
        } = fixture();
        let set = attach_standard(&mut other, rank, 1.0, 5).unwrap();
        let shared_params: usize = set.layers.iter().map(|l| l.a.numel() + l.b.numel()).sum();
        assert_eq!(shared_params * 3, tri_params);
    }

    #[test]
    fn standard_mode_is_reproducible() {
        let run = || {
            let Fixture {
                mut student,
                teacher,
                data,
            } = fixture();
            let task = tiny_task();
            let (retain, forget, new) = streams(&data, &task);
            let set = attach_standard(&mut student, 8, 1.0, 5).unwrap();
            let (report, _) = standard_lora_adapt(
                &mut student,
                &teacher,
                set,
                &task,
                AdaptStreams {
                    replay: &retain,
                    forget: &forget,
                    new: &new,
                },
                &tiny_train_cfg(2),
            )
            .unwrap();
            (report, param_bits(&student))
        };
        let (r1, p1) = run();
        let (r2, p2) = run();
        assert_eq!(r1, r2);
        assert_eq!(p1, p2);
    }

    #[test]
    fn mix_seed_spreads_inputs() {
        let a = mix_seed(0, 1, 2);
        let b = mix_seed(0, 2, 1);
        let c = mix_seed(1, 1, 2);
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}
