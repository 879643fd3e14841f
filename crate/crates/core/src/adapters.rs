//! Low-rank adapter pathways.
//!
//! Every attention projection (Q, K, V, output) of every block carries three
//! adapters, one per objective: retain, new, forget. `B` starts at zero so a
//! freshly attached bundle changes no output; training toggles exactly one
//! pathway at a time, and at the end of a task the enabled composition is
//! folded back into the base weights.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One of the three dedicated adapter pathways.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Retain,
    New,
    Forget,
}

impl Pathway {
    pub const ALL: [Pathway; 3] = [Pathway::Retain, Pathway::New, Pathway::Forget];

    pub fn name(self) -> &'static str {
        match self {
            Pathway::Retain => "retain",
            Pathway::New => "new",
            Pathway::Forget => "forget",
        }
    }
}

/// Evaluation-time switch for adapter contributions. Gating never mutates
/// parameters; a disabled pathway simply contributes zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PathwayGate {
    pub retain: bool,
    pub new: bool,
    pub forget: bool,
}

impl PathwayGate {
    pub fn all() -> Self {
        PathwayGate {
            retain: true,
            new: true,
            forget: true,
        }
    }

    pub fn none() -> Self {
        PathwayGate {
            retain: false,
            new: false,
            forget: false,
        }
    }

    pub fn without(pathway: Pathway) -> Self {
        let mut g = Self::all();
        match pathway {
            Pathway::Retain => g.retain = false,
            Pathway::New => g.new = false,
            Pathway::Forget => g.forget = false,
        }
        g
    }

    pub fn enabled(&self, pathway: Pathway) -> bool {
        match pathway {
            Pathway::Retain => self.retain,
            Pathway::New => self.new,
            Pathway::Forget => self.forget,
        }
    }
}

/// Ranks and scaling for a bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank_retain_new: usize,
    pub rank_forget: usize,
    pub scaling: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank_retain_new: 8,
            rank_forget: 4,
            scaling: 1.0,
        }
    }
}

/// A single low-rank pair: `delta(x) = S * x A^T B^T` beside a frozen
/// `[d x k]` linear layer. `B` is zero-initialized; `A` is uniform in
/// `[-1/sqrt(k), 1/sqrt(k)]`.
pub struct LoraAdapter<T: Scalar> {
    pub a: Tensor<T>, // [rank x k]
    pub b: Tensor<T>, // [d x rank]
    pub rank: usize,
    pub pathway: Pathway,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn new(d: usize, k: usize, rank: usize, pathway: Pathway, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (k as f64).sqrt();
        let a_vals: Vec<T> = (0..rank * k)
            .map(|_| T::from_f(rng.gen_range(-bound..bound)))
            .collect();
        let a = Tensor::from_vec(vec![rank, k], a_vals).expect("adapter A shape");
        let b = Tensor::zeros(vec![d, rank]);
        LoraAdapter {
            a,
            b,
            rank,
            pathway,
        }
    }

    /// Adapter contribution for row-major inputs `x: [N x k]`.
    pub fn delta(&self, x: &Tensor<T>, scaling: T) -> Result<Tensor<T>> {
        Ok(x.matmul(&self.a.transpose2()?)?
            .matmul(&self.b.transpose2()?)?
            .scale(scaling))
    }

    /// Dense `S * B A` as a flat `[d x k]` buffer.
    pub fn merged_delta(&self, scaling: T) -> Vec<T> {
        let (bv, av) = (self.b.values(), self.a.values());
        let d = self.b.shape()[0];
        let k = self.a.shape()[1];
        let r = self.rank;
        let mut out = vec![T::zero(); d * k];
        for i in 0..d {
            for p in 0..r {
                let b = bv[i * r + p];
                for j in 0..k {
                    out[i * k + j] += b * av[p * k + j];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * scaling;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    pub fn set_trainable(&self, flag: bool) {
        self.a.set_requires_grad(flag);
        self.b.set_requires_grad(flag);
    }
}

/// The three adapters of one adapted linear layer.
pub struct LayerAdapters<T: Scalar> {
    pub retain: LoraAdapter<T>,
    pub new: LoraAdapter<T>,
    pub forget: LoraAdapter<T>,
}

impl<T: Scalar> LayerAdapters<T> {
    pub fn get(&self, pathway: Pathway) -> &LoraAdapter<T> {
        match pathway {
            Pathway::Retain => &self.retain,
            Pathway::New => &self.new,
            Pathway::Forget => &self.forget,
        }
    }
}

/// All adapters attached to a model, plus the shared scaling factor and the
/// head rows each pathway is allowed to update.
pub struct PathwayBundle<T: Scalar> {
    pub layers: Vec<LayerAdapters<T>>,
    pub scaling: T,
    head_rows: [Vec<usize>; 3],
}

/// Single shared adapter per layer: the no-isolation baseline.
pub struct SharedAdapter<T: Scalar> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub rank: usize,
}

/// The standard-mode counterpart of a bundle.
pub struct StandardAdapterSet<T: Scalar> {
    pub layers: Vec<SharedAdapter<T>>,
    pub scaling: T,
}

/// Adapter composition applied during a forward pass.
pub enum AdapterOverlay<'a, T: Scalar> {
    None,
    Tri {
        bundle: &'a PathwayBundle<T>,
        gate: PathwayGate,
    },
    Shared(&'a StandardAdapterSet<T>),
}

impl<'a, T: Scalar> AdapterOverlay<'a, T> {
    /// Sum of enabled adapter contributions at one adapted layer.
    pub(crate) fn delta(&self, layer_idx: usize, x: &Tensor<T>) -> Result<Option<Tensor<T>>> {
        match self {
            AdapterOverlay::None => Ok(None),
            AdapterOverlay::Tri { bundle, gate } => {
                let layer = bundle.layers.get(layer_idx).ok_or(Error::Index {
                    context: "adapter overlay layer",
                    index: layer_idx,
                    limit: bundle.layers.len(),
                })?;
                let mut acc: Option<Tensor<T>> = None;
                for pathway in Pathway::ALL {
                    if gate.enabled(pathway) {
                        let d = layer.get(pathway).delta(x, bundle.scaling)?;
                        acc = Some(match acc {
                            None => d,
                            Some(prev) => prev.add(&d)?,
                        });
                    }
                }
                Ok(acc)
            }
            AdapterOverlay::Shared(set) => {
                let layer = set.layers.get(layer_idx).ok_or(Error::Index {
                    context: "adapter overlay layer",
                    index: layer_idx,
                    limit: set.layers.len(),
                })?;
                let d = x
                    .matmul(&layer.a.transpose2()?)?
                    .matmul(&layer.b.transpose2()?)?
                    .scale(set.scaling);
                Ok(Some(d))
            }
        }
    }
}

/// Sign used when folding the forget pathway into the base weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Matches the training-time forward: all three pathways add.
    Additive,
    /// Folds the forget pathway with a minus sign; kept for ablation.
    SubtractiveForget,
}

/// Result of a merge, including the train/infer equivalence self-check.
#[derive(Clone, Debug)]
pub struct MergeReport {
    pub probe_deviation: f64,
    pub convention: SignConvention,
}

/// Probe-batch agreement required between adapter forward and merged forward
/// under the additive convention.
pub const MERGE_PROBE_TOL: f64 = 1e-8;

impl<T: Scalar> PathwayBundle<T> {
    pub fn adapter(&self, layer_idx: usize, pathway: Pathway) -> &LoraAdapter<T> {
        self.layers[layer_idx].get(pathway)
    }

    /// Rows of the classifier head a pathway's loss may update.
    pub fn head_rows(&self, pathway: Pathway) -> &[usize] {
        &self.head_rows[pathway_slot(pathway)]
    }

    pub fn bind_head_rows(&mut self, pathway: Pathway, classes: &BTreeSet<usize>) {
        self.head_rows[pathway_slot(pathway)] = classes.iter().copied().collect();
    }

    pub fn adapter_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                Pathway::ALL
                    .iter()
                    .map(|&p| l.get(p).param_count())
                    .sum::<usize>()
            })
            .sum()
    }

    /// Count of trainable units under `set_trainable(pathway)`: two adapter
    /// matrices per adapted layer plus that pathway's head rows.
    pub fn trainable_unit_count(&self, pathway: Pathway) -> usize {
        2 * self.layers.len() + self.head_rows(pathway).len()
    }
}

fn pathway_slot(p: Pathway) -> usize {
    match p {
        Pathway::Retain => 0,
        Pathway::New => 1,
        Pathway::Forget => 2,
    }
}

/// Creates a tri-pathway bundle on every attention projection and freezes
/// the backbone. The model's forward is unchanged until training starts.
pub fn attach<T: Scalar>(
    model: &mut Model<T>,
    cfg: &AdapterConfig,
    seed: u64,
) -> Result<PathwayBundle<T>> {
    let dims = model.adapted_layer_dims();
    validate_ranks(cfg.rank_retain_new, cfg.rank_forget, &dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len());
    for &(d, k) in &dims {
        layers.push(LayerAdapters {
            retain: LoraAdapter::new(d, k, cfg.rank_retain_new, Pathway::Retain, &mut rng),
            new: LoraAdapter::new(d, k, cfg.rank_retain_new, Pathway::New, &mut rng),
            forget: LoraAdapter::new(d, k, cfg.rank_forget, Pathway::Forget, &mut rng),
        });
    }
    model.freeze_all();
    Ok(PathwayBundle {
        layers,
        scaling: T::from_f(cfg.scaling),
        head_rows: [Vec::new(), Vec::new(), Vec::new()],
    })
}

/// Single-adapter attach for the standard-mode baseline.
pub fn attach_standard<T: Scalar>(
    model: &mut Model<T>,
    rank: usize,
    scaling: f64,
    seed: u64,
) -> Result<StandardAdapterSet<T>> {
    let dims = model.adapted_layer_dims();
    validate_ranks(rank, rank, &dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len());
    for &(d, k) in &dims {
        let proto = LoraAdapter::<T>::new(d, k, rank, Pathway::Retain, &mut rng);
        layers.push(SharedAdapter {
            a: proto.a,
            b: proto.b,
            rank,
        });
    }
    model.freeze_all();
    Ok(StandardAdapterSet {
        layers,
        scaling: T::from_f(scaling),
    })
}

fn validate_ranks(rank_rn: usize, rank_f: usize, dims: &[(usize, usize)]) -> Result<()> {
    for &(d, k) in dims {
        let cap = d.min(k);
        for rank in [rank_rn, rank_f] {
            if rank == 0 || rank > cap {
                return Err(Error::Config(format!(
                    "adapter rank {rank} invalid for layer dims {d}x{k} (must be in 1..={cap})"
                )));
            }
        }
    }
    Ok(())
}

/// Makes exactly one pathway trainable: its A/B matrices plus the classifier
/// head (whose step is masked to that pathway's rows). Idempotent.
pub fn set_trainable<T: Scalar>(bundle: &PathwayBundle<T>, model: &Model<T>, pathway: Pathway) {
    for layer in &bundle.layers {
        for p in Pathway::ALL {
            layer.get(p).set_trainable(p == pathway);
        }
    }
    model.head().weight.set_requires_grad(true);
    model.head().bias.set_requires_grad(true);
}

/// Folds the bundle into the base weights and drops it. The self-check runs
/// a seeded probe batch through both forms; under a convention that matches
/// the training-time forward the deviation stays below [`MERGE_PROBE_TOL`],
/// otherwise the mismatch is logged and reported, never silently ignored.
pub fn merge<T: Scalar>(
    bundle: PathwayBundle<T>,
    model: &mut Model<T>,
    convention: SignConvention,
) -> Result<MergeReport> {
    // Compare embeddings, not logits: the head sits outside the adapted
    // layers and could mask a mismatch.
    let probe = model.probe_batch(32, 0xA11CE);
    let before = model
        .embed(
            &probe,
            AdapterOverlay::Tri {
                bundle: &bundle,
                gate: PathwayGate::all(),
            },
        )?
        .values();

    let weights = model.adapted_layer_weights();
    debug_assert_eq!(weights.len(), bundle.layers.len());
    for (layer, weight) in bundle.layers.iter().zip(weights.iter()) {
        let mut delta = layer.retain.merged_delta(bundle.scaling);
        let new_d = layer.new.merged_delta(bundle.scaling);
        let forget_d = layer.forget.merged_delta(bundle.scaling);
        for i in 0..delta.len() {
            delta[i] += new_d[i];
            match convention {
                SignConvention::Additive => delta[i] += forget_d[i],
                SignConvention::SubtractiveForget => delta[i] -= forget_d[i],
            }
        }
        weight.update_values(|w| {
            for (wi, di) in w.iter_mut().zip(delta.iter()) {
                *wi += *di;
            }
        });
    }

    let after = model.embed(&probe, AdapterOverlay::None)?.values();
    let deviation = before
        .iter()
        .zip(after.iter())
        .map(|(&a, &b)| (a - b).abs().to_f())
        .fold(0.0, f64::max);
    if deviation > MERGE_PROBE_TOL {
        log::warn!(
            "merge self-check: merged forward deviates from adapter forward by {deviation:.3e} \
             under {convention:?}; training used the additive composition"
        );
    }
    Ok(MergeReport {
        probe_deviation: deviation,
        convention,
    })
}

/// Folds a shared adapter set into the base weights (always additive).
pub fn merge_standard<T: Scalar>(
    set: StandardAdapterSet<T>,
    model: &mut Model<T>,
) -> Result<MergeReport> {
    let probe = model.probe_batch(32, 0xA11CE);
    let before = model.embed(&probe, AdapterOverlay::Shared(&set))?.values();
    let weights = model.adapted_layer_weights();
    for (layer, weight) in set.layers.iter().zip(weights.iter()) {
        let ad = LoraAdapter {
            a: layer.a.clone(),
            b: layer.b.clone(),
            rank: layer.rank,
            pathway: Pathway::Retain,
        };
        let delta = ad.merged_delta(set.scaling);
        weight.update_values(|w| {
            for (wi, di) in w.iter_mut().zip(delta.iter()) {
                *wi += *di;
            }
        });
    }
    let after = model.embed(&probe, AdapterOverlay::None)?.values();
    let deviation = before
        .iter()
        .zip(after.iter())
        .map(|(&a, &b)| (a - b).abs().to_f())
        .fold(0.0, f64::max);
    if deviation > MERGE_PROBE_TOL {
        log::warn!("standard merge self-check deviation {deviation:.3e}");
    }
    Ok(MergeReport {
        probe_deviation: deviation,
        convention: SignConvention::Additive,
    })
}

/// Fraction of parameters a CLU step may update: all three pathways' A/B
/// matrices plus the head rows bound to them, over the full parameter count
/// (backbone, head, and attached adapters).
pub fn tunable_ratio<T: Scalar>(model: &Model<T>, bundle: &PathwayBundle<T>) -> f64 {
    let head_in = model.config().embed_dim;
    let head_row_params: usize = Pathway::ALL
        .iter()
        .map(|&p| bundle.head_rows(p).len() * (head_in + 1))
        .sum();
    let trainable = bundle.adapter_param_count() + head_row_params;
    let total = model.param_count() + bundle.adapter_param_count();
    trainable as f64 / total as f64
}
