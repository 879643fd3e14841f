//! Evaluation quantities: per-split accuracies, KL divergence to the oracle,
//! and a label-only membership-inference attack.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::AdapterOverlay;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;

const EVAL_BATCH: usize = 64;

/// All metric fields for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: usize,
    pub acc_f: f64,
    pub acc_r: f64,
    pub acc_n: f64,
    pub acc_o: f64,
    pub kl_to_oracle: f64,
    pub mia_rate: f64,
    pub tunable_ratio: f64,
    pub chance_level: f64,
}

/// Membership-inference attack settings: a max-softmax-confidence threshold
/// attack scored by balanced accuracy, swept over `thresholds` points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaConfig {
    pub thresholds: usize,
}

impl Default for MiaConfig {
    fn default() -> Self {
        MiaConfig { thresholds: 201 }
    }
}

/// Predicted class per sample: argmax restricted to the model's active head
/// rows, lowest class id on ties.
pub fn predict<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>) -> Result<Vec<usize>> {
    predict_overlay(model, AdapterOverlay::None, data)
}

fn predict_overlay<T: Scalar>(
    model: &Model<T>,
    overlay: AdapterOverlay<'_, T>,
    data: &LabeledDataset<T>,
) -> Result<Vec<usize>> {
    let active: Vec<usize> = model.head().active_classes.iter().copied().collect();
    if active.is_empty() {
        return Err(Error::contract("predict", "model has no active classes"));
    }
    let classes = model.config().num_class_slots;
    let mut out = Vec::with_capacity(data.len());
    let idx_all: Vec<usize> = (0..data.len()).collect();
    for chunk in idx_all.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        let logits = model.forward(&x, reborrow(&overlay))?;
        let vals = logits.values();
        for row in 0..chunk.len() {
            let mut best = active[0];
            let mut best_v = vals[row * classes + active[0]].to_f();
            for &c in &active[1..] {
                let v = vals[row * classes + c].to_f();
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn reborrow<'a, T: Scalar>(overlay: &AdapterOverlay<'a, T>) -> AdapterOverlay<'a, T> {
    match overlay {
        AdapterOverlay::None => AdapterOverlay::None,
        AdapterOverlay::Tri { bundle, gate } => AdapterOverlay::Tri {
            bundle,
            gate: *gate,
        },
        AdapterOverlay::Shared(set) => AdapterOverlay::Shared(set),
    }
}

/// Exact-match rate over the samples whose label lies in `class_subset`.
pub fn accuracy<T: Scalar>(
    model: &Model<T>,
    data: &LabeledDataset<T>,
    class_subset: &BTreeSet<usize>,
) -> Result<f64> {
    accuracy_gated(model, AdapterOverlay::None, data, class_subset)
}

/// Accuracy under an explicit adapter overlay (used by the gate ablation).
pub fn accuracy_gated<T: Scalar>(
    model: &Model<T>,
    overlay: AdapterOverlay<'_, T>,
    data: &LabeledDataset<T>,
    class_subset: &BTreeSet<usize>,
) -> Result<f64> {
    let keep: Vec<usize> = (0..data.len())
        .filter(|&i| class_subset.contains(&data.label(i)))
        .collect();
    if keep.is_empty() {
        return Err(Error::contract(
            "accuracy",
            format!("no evaluation samples for classes {class_subset:?}"),
        ));
    }
    let subset = data.subset(&keep);
    let preds = predict_overlay(model, overlay, &subset)?;
    let hits = preds
        .iter()
        .zip(subset.labels().iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / keep.len() as f64)
}

/// Mean `KL(softmax(oracle) || softmax(model))` over the evaluation set,
/// with both distributions restricted to `classes` (the task's retain
/// union new set). Computed in log space, in nats.
pub fn kl_to_oracle<T: Scalar>(
    model: &Model<T>,
    oracle: &Model<T>,
    eval_set: &LabeledDataset<T>,
    classes: &BTreeSet<usize>,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::contract("kl_to_oracle", "empty evaluation set"));
    }
    if classes.is_empty() {
        return Err(Error::contract("kl_to_oracle", "empty class set"));
    }
    for (name, m) in [("model", model), ("oracle", oracle)] {
        if !classes.is_subset(&m.head().active_classes) {
            return Err(Error::contract(
                "kl_to_oracle",
                format!("{name} does not expose all evaluation classes {classes:?}"),
            ));
        }
    }
    let cols: Vec<usize> = classes.iter().copied().collect();
    let slots = model.config().num_class_slots;
    let mut total = 0.0;
    let idx_all: Vec<usize> = (0..eval_set.len()).collect();
    for chunk in idx_all.chunks(EVAL_BATCH) {
        let (x, _) = eval_set.batch(chunk)?;
        let zm = model.forward(&x, AdapterOverlay::None)?.values();
        let zo = oracle.forward(&x, AdapterOverlay::None)?.values();
        for row in 0..chunk.len() {
            let m_row: Vec<f64> = cols.iter().map(|&c| zm[row * slots + c].to_f()).collect();
            let o_row: Vec<f64> = cols.iter().map(|&c| zo[row * slots + c].to_f()).collect();
            let log_q = log_softmax(&m_row);
            let log_p = log_softmax(&o_row);
            total += log_p
                .iter()
                .zip(log_q.iter())
                .map(|(&lp, &lq)| lp.exp() * (lp - lq))
                .sum::<f64>();
        }
    }
    Ok(total / eval_set.len() as f64)
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let maxv = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = z.iter().map(|v| (v - maxv).exp()).sum::<f64>().ln() + maxv;
    z.iter().map(|v| v - lse).collect()
}

/// Max-softmax confidence per sample, over the active classes.
pub fn max_confidences<T: Scalar>(model: &Model<T>, data: &LabeledDataset<T>) -> Result<Vec<f64>> {
    let active: Vec<usize> = model.head().active_classes.iter().copied().collect();
    if active.is_empty() {
        return Err(Error::contract("max_confidences", "no active classes"));
    }
    let slots = model.config().num_class_slots;
    let mut out = Vec::with_capacity(data.len());
    let idx_all: Vec<usize> = (0..data.len()).collect();
    for chunk in idx_all.chunks(EVAL_BATCH) {
        let (x, _) = data.batch(chunk)?;
        let logits = model.forward(&x, AdapterOverlay::None)?.values();
        for row in 0..chunk.len() {
            let z: Vec<f64> = active
                .iter()
                .map(|&c| logits[row * slots + c].to_f())
                .collect();
            let ls = log_softmax(&z);
            let best = ls.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            out.push(best.exp());
        }
    }
    Ok(out)
}

/// Best balanced accuracy over the threshold sweep (both orientations) for
/// separating two confidence samples. 0.5 means indistinguishable.
pub fn mia_from_confidences(member: &[f64], non_member: &[f64], cfg: &MiaConfig) -> Result<f64> {
    if member.is_empty() || non_member.is_empty() {
        return Err(Error::contract(
            "mia_from_confidences",
            "both confidence sets must be nonempty",
        ));
    }
    if cfg.thresholds < 2 {
        return Err(Error::Config("mia thresholds must be >= 2".into()));
    }
    let mut best = 0.5f64;
    for k in 0..cfg.thresholds {
        let theta = k as f64 / (cfg.thresholds - 1) as f64;
        let tpr = member.iter().filter(|&&c| c >= theta).count() as f64 / member.len() as f64;
        let tnr = non_member.iter().filter(|&&c| c < theta).count() as f64 / non_member.len() as f64;
        let ba = 0.5 * (tpr + tnr);
        // An attacker may use either decision orientation.
        best = best.max(ba).max(1.0 - ba);
    }
    Ok(best)
}

/// Label-only membership inference: distinguishes forgotten samples from
/// never-seen samples by thresholding max-softmax confidence.
pub fn mia_rate<T: Scalar>(
    model: &Model<T>,
    forget_set: &LabeledDataset<T>,
    unseen_set: &LabeledDataset<T>,
    cfg: &MiaConfig,
) -> Result<f64> {
    if forget_set.is_empty() || unseen_set.is_empty() {
        return Err(Error::contract(
            "mia_rate",
            "forget and unseen sets must be nonempty",
        ));
    }
    if !forget_set.classes().is_disjoint(&unseen_set.classes()) {
        return Err(Error::contract(
            "mia_rate",
            "forget and unseen class sets overlap",
        ));
    }
    let conf_f = max_confidences(model, forget_set)?;
    let conf_u = max_confidences(model, unseen_set)?;
    mia_from_confidences(&conf_f, &conf_u, cfg)
}

/// Validated report assembly; `acc_o` is the sample-weighted mean of the
/// retain and new accuracies.
#[allow(clippy::too_many_arguments)]
pub fn assemble_report(
    task: usize,
    acc_f: f64,
    acc_r: f64,
    acc_n: f64,
    n_retain: usize,
    n_new: usize,
    kl_to_oracle: f64,
    mia_rate: f64,
    tunable_ratio: f64,
    chance_level: f64,
) -> Result<MetricsReport> {
    for (name, v) in [
        ("acc_f", acc_f),
        ("acc_r", acc_r),
        ("acc_n", acc_n),
        ("mia_rate", mia_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::contract(
                "assemble_report",
                format!("{name} = {v} outside [0, 1]"),
            ));
        }
    }
    if kl_to_oracle < -1e-12 || !kl_to_oracle.is_finite() {
        return Err(Error::contract(
            "assemble_report",
            format!("kl_to_oracle = {kl_to_oracle} must be finite and >= 0"),
        ));
    }
    if !(0.0..1.0).contains(&tunable_ratio) || tunable_ratio == 0.0 {
        return Err(Error::contract(
            "assemble_report",
            format!("tunable_ratio = {tunable_ratio} outside (0, 1)"),
        ));
    }
    if n_retain == 0 || n_new == 0 {
        return Err(Error::contract(
            "assemble_report",
            "retain and new sample counts must be nonzero",
        ));
    }
    let acc_o = (n_retain as f64 * acc_r + n_new as f64 * acc_n) / (n_retain + n_new) as f64;
    Ok(MetricsReport {
        task,
        acc_f,
        acc_r,
        acc_n,
        acc_o,
        kl_to_oracle: kl_to_oracle.max(0.0),
        mia_rate,
        tunable_ratio,
        chance_level,
    })
}
