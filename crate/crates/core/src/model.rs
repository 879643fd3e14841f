//! Desk-scale transformer classifier.
//!
//! Pre-norm blocks with multi-head self-attention and a GELU MLP over a
//! token projection plus learned positions. The Q/K/V/output projections of
//! every block are the adapted layers; the pooled post-norm representation
//! (mean over tokens) is the embedding the classifier head consumes, so
//! `forward == head(embed)` by construction. A frozen deep copy serves as
//! the teacher during adaptation.

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::AdapterOverlay;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture parameters. `num_class_slots` is the head capacity; classes
/// are activated and retired by the harness, never resized mid-run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub input_dim: usize,
    pub seq_len: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub num_class_slots: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_dim: 16,
            seq_len: 8,
            depth: 2,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2,
            num_class_slots: 24,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.input_dim == 0 || self.seq_len == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("input_dim, seq_len, mlp_ratio must be >= 1".into()));
        }
        if self.num_class_slots == 0 {
            return Err(Error::Config("num_class_slots must be >= 1".into()));
        }
        Ok(())
    }
}

pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>, // [out x in]
    pub bias: Tensor<T>,   // [out]
}

impl<T: Scalar> LinearLayer<T> {
    fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w: Vec<T> = (0..out_dim * in_dim)
            .map(|_| T::from_f(rng.gen_range(-bound..bound)))
            .collect();
        LinearLayer {
            weight: Tensor::from_vec(vec![out_dim, in_dim], w).expect("linear weight"),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight.transpose2()?)?.add_row(&self.bias)
    }
}

pub struct NormParams<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> NormParams<T> {
    fn init(dim: usize) -> Self {
        NormParams {
            gamma: Tensor::full(vec![dim], T::one()),
            beta: Tensor::zeros(vec![dim]),
        }
    }

    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layernorm()?.mul_row(&self.gamma)?.add_row(&self.beta)
    }
}

pub struct Block<T: Scalar> {
    pub norm1: NormParams<T>,
    pub q: LinearLayer<T>,
    pub k: LinearLayer<T>,
    pub v: LinearLayer<T>,
    pub o: LinearLayer<T>,
    pub norm2: NormParams<T>,
    pub mlp_in: LinearLayer<T>,
    pub mlp_out: LinearLayer<T>,
}

/// Classifier head over the pooled embedding. Rows outside `active_classes`
/// are excluded from evaluation-time argmax.
pub struct ClassifierHead<T: Scalar> {
    pub weight: Tensor<T>, // [num_class_slots x embed_dim]
    pub bias: Tensor<T>,   // [num_class_slots]
    pub active_classes: BTreeSet<usize>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn logits(&self, emb: &Tensor<T>) -> Result<Tensor<T>> {
        emb.matmul(&self.weight.transpose2()?)?.add_row(&self.bias)
    }
}

pub struct Model<T: Scalar> {
    cfg: BackboneConfig,
    pub token_proj: LinearLayer<T>,
    pub pos_embed: Tensor<T>, // [seq_len * embed_dim], added per token
    pub blocks: Vec<Block<T>>,
    pub final_norm: NormParams<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model with seeded initialization. Head rows start at zero so a
    /// class carries no response until it is trained.
    pub fn init(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.embed_dim;
        let token_proj = LinearLayer::init(d, cfg.input_dim, &mut rng);
        let pos: Vec<T> = (0..cfg.seq_len * d)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                T::from_f(0.02 * n)
            })
            .collect();
        let pos_embed = Tensor::from_vec(vec![cfg.seq_len * d], pos)?;
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                norm1: NormParams::init(d),
                q: LinearLayer::init(d, d, &mut rng),
                k: LinearLayer::init(d, d, &mut rng),
                v: LinearLayer::init(d, d, &mut rng),
                o: LinearLayer::init(d, d, &mut rng),
                norm2: NormParams::init(d),
                mlp_in: LinearLayer::init(d * cfg.mlp_ratio, d, &mut rng),
                mlp_out: LinearLayer::init(d, d * cfg.mlp_ratio, &mut rng),
            })
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            token_proj,
            pos_embed,
            blocks,
            final_norm: NormParams::init(d),
            head: ClassifierHead {
                weight: Tensor::zeros(vec![cfg.num_class_slots, d]),
                bias: Tensor::zeros(vec![cfg.num_class_slots]),
                active_classes: BTreeSet::new(),
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn head(&self) -> &ClassifierHead<T> {
        &self.head
    }

    pub fn set_active_classes(&mut self, classes: BTreeSet<usize>) -> Result<()> {
        if let Some(&max) = classes.iter().next_back() {
            if max >= self.cfg.num_class_slots {
                return Err(Error::Index {
                    context: "active class id",
                    index: max,
                    limit: self.cfg.num_class_slots,
                });
            }
        }
        self.head.active_classes = classes;
        Ok(())
    }

    pub fn activate_classes(&mut self, classes: &BTreeSet<usize>) -> Result<()> {
        let merged: BTreeSet<usize> = self
            .head
            .active_classes
            .union(classes)
            .copied()
            .collect();
        self.set_active_classes(merged)
    }

    /// Pooled pre-head representation: mean over tokens of the post-norm
    /// sequence. Invariant to head weights.
    pub fn embed(&self, x: &Tensor<T>, overlay: AdapterOverlay<'_, T>) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != self.cfg.seq_len || shape[2] != self.cfg.input_dim {
            return Err(Error::Dimension {
                op: "model input",
                lhs: shape,
                rhs: vec![0, self.cfg.seq_len, self.cfg.input_dim],
            });
        }
        let batch = shape[0];
        let (seq, d, heads) = (self.cfg.seq_len, self.cfg.embed_dim, self.cfg.heads);
        let head_dim = d / heads;

        let flat = x.reshape(vec![batch * seq, self.cfg.input_dim])?;
        let tokens = self.token_proj.forward(&flat)?;
        // Positions broadcast across the batch: rows of [batch, seq*d].
        let mut h = tokens
            .reshape(vec![batch, seq * d])?
            .add_row(&self.pos_embed)?
            .reshape(vec![batch * seq, d])?;

        for (bi, block) in self.blocks.iter().enumerate() {
            let ln1 = block.norm1.apply(&h)?;
            let q = self.adapted_linear(4 * bi, &block.q, &ln1, &overlay)?;
            let k = self.adapted_linear(4 * bi + 1, &block.k, &ln1, &overlay)?;
            let v = self.adapted_linear(4 * bi + 2, &block.v, &ln1, &overlay)?;

            let split = |t: &Tensor<T>| -> Result<Tensor<T>> {
                t.reshape(vec![batch, seq, heads, head_dim])?
                    .swap_axes12()?
                    .reshape(vec![batch * heads, seq, head_dim])
            };
            let q3 = split(&q)?;
            let k3 = split(&k)?;
            let v3 = split(&v)?;

            let inv_sqrt = T::from_f(1.0 / (head_dim as f64).sqrt());
            let scores = q3.bmm(&k3.transpose_last()?)?.scale(inv_sqrt);
            let probs = scores.softmax(2)?;
            let ctx = probs
                .bmm(&v3)?
                .reshape(vec![batch, heads, seq, head_dim])?
                .swap_axes12()?
                .reshape(vec![batch * seq, d])?;
            let attn = self.adapted_linear(4 * bi + 3, &block.o, &ctx, &overlay)?;
            h = h.add(&attn)?;

            let ln2 = block.norm2.apply(&h)?;
            let m = block
                .mlp_out
                .forward(&block.mlp_in.forward(&ln2)?.gelu())?;
            h = h.add(&m)?;
        }

        let pooled = self
            .final_norm
            .apply(&h)?
            .reshape(vec![batch, seq, d])?
            .mean_axis1()?;
        Ok(pooled)
    }

    /// Logits over every head slot; masking to active classes happens at
    /// evaluation time.
    pub fn forward(&self, x: &Tensor<T>, overlay: AdapterOverlay<'_, T>) -> Result<Tensor<T>> {
        let emb = self.embed(x, overlay)?;
        self.head.logits(&emb)
    }

    fn adapted_linear(
        &self,
        layer_idx: usize,
        lin: &LinearLayer<T>,
        x: &Tensor<T>,
        overlay: &AdapterOverlay<'_, T>,
    ) -> Result<Tensor<T>> {
        let base = lin.forward(x)?;
        match overlay.delta(layer_idx, x)? {
            None => Ok(base),
            Some(delta) => base.add(&delta),
        }
    }

    /// `(d, k)` of every adapted linear layer, in layer order
    /// (per block: Q, K, V, output).
    pub fn adapted_layer_dims(&self) -> Vec<(usize, usize)> {
        let d = self.cfg.embed_dim;
        vec![(d, d); 4 * self.blocks.len()]
    }

    /// Weight tensors of the adapted layers, same order as
    /// [`Model::adapted_layer_dims`].
    pub fn adapted_layer_weights(&self) -> Vec<Tensor<T>> {
        let mut out = Vec::with_capacity(4 * self.blocks.len());
        for b in &self.blocks {
            out.push(b.q.weight.clone());
            out.push(b.k.weight.clone());
            out.push(b.v.weight.clone());
            out.push(b.o.weight.clone());
        }
        out
    }

    /// Every parameter with a stable canonical name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out: Vec<(String, Tensor<T>)> = vec![
            ("token_proj.weight".into(), self.token_proj.weight.clone()),
            ("token_proj.bias".into(), self.token_proj.bias.clone()),
            ("pos_embed".into(), self.pos_embed.clone()),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.push((p("norm1.gamma"), b.norm1.gamma.clone()));
            out.push((p("norm1.beta"), b.norm1.beta.clone()));
            out.push((p("attn.q.weight"), b.q.weight.clone()));
            out.push((p("attn.q.bias"), b.q.bias.clone()));
            out.push((p("attn.k.weight"), b.k.weight.clone()));
            out.push((p("attn.k.bias"), b.k.bias.clone()));
            out.push((p("attn.v.weight"), b.v.weight.clone()));
            out.push((p("attn.v.bias"), b.v.bias.clone()));
            out.push((p("attn.o.weight"), b.o.weight.clone()));
            out.push((p("attn.o.bias"), b.o.bias.clone()));
            out.push((p("norm2.gamma"), b.norm2.gamma.clone()));
            out.push((p("norm2.beta"), b.norm2.beta.clone()));
            out.push((p("mlp.fc1.weight"), b.mlp_in.weight.clone()));
            out.push((p("mlp.fc1.bias"), b.mlp_in.bias.clone()));
            out.push((p("mlp.fc2.weight"), b.mlp_out.weight.clone()));
            out.push((p("mlp.fc2.bias"), b.mlp_out.bias.clone()));
        }
        out.push(("final_norm.gamma".into(), self.final_norm.gamma.clone()));
        out.push(("final_norm.beta".into(), self.final_norm.beta.clone()));
        out.push(("head.weight".into(), self.head.weight.clone()));
        out.push(("head.bias".into(), self.head.bias.clone()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn freeze_all(&self) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(false);
        }
    }

    pub fn set_all_trainable(&self) {
        for (_, t) in self.named_params() {
            t.set_requires_grad(true);
        }
    }

    pub fn zero_all_grads(&self) {
        for (_, t) in self.named_params() {
            t.zero_grad();
        }
    }

    /// Deep copy with every parameter frozen; later updates to the source
    /// never touch the clone.
    pub fn clone_frozen(&self) -> Model<T> {
        self.deep_clone(false)
    }

    /// Deep copy preserving values; `trainable` sets the requires-grad flag
    /// on every parameter of the copy.
    pub fn deep_clone(&self, trainable: bool) -> Model<T> {
        let copy_lin = |l: &LinearLayer<T>| LinearLayer {
            weight: clone_param(&l.weight, trainable),
            bias: clone_param(&l.bias, trainable),
        };
        let copy_norm = |n: &NormParams<T>| NormParams {
            gamma: clone_param(&n.gamma, trainable),
            beta: clone_param(&n.beta, trainable),
        };
        Model {
            cfg: self.cfg.clone(),
            token_proj: copy_lin(&self.token_proj),
            pos_embed: clone_param(&self.pos_embed, trainable),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: copy_norm(&b.norm1),
                    q: copy_lin(&b.q),
                    k: copy_lin(&b.k),
                    v: copy_lin(&b.v),
                    o: copy_lin(&b.o),
                    norm2: copy_norm(&b.norm2),
                    mlp_in: copy_lin(&b.mlp_in),
                    mlp_out: copy_lin(&b.mlp_out),
                })
                .collect(),
            final_norm: copy_norm(&self.final_norm),
            head: ClassifierHead {
                weight: clone_param(&self.head.weight, trainable),
                bias: clone_param(&self.head.bias, trainable),
                active_classes: self.head.active_classes.clone(),
            },
        }
    }

    /// Seeded random input batch, used by merge self-checks and probe tests.
    pub fn probe_batch(&self, n: usize, seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = n * self.cfg.seq_len * self.cfg.input_dim;
        let vals: Vec<T> = (0..len)
            .map(|_| {
                let v: f64 = rng.sample(StandardNormal);
                T::from_f(v)
            })
            .collect();
        Tensor::from_vec(vec![n, self.cfg.seq_len, self.cfg.input_dim], vals)
            .expect("probe batch shape")
    }
}

fn clone_param<T: Scalar>(t: &Tensor<T>, trainable: bool) -> Tensor<T> {
    let c = t.detach();
    c.set_requires_grad(trainable);
    c
}

/// Plain cross-entropy training of every backbone and head parameter; the
/// pre-adaptation stage. Activates the classes present in `data` and returns
/// the per-batch loss trace.
pub fn pretrain<T: Scalar>(
    model: &mut Model<T>,
    data: &crate::data::LabeledDataset<T>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    for &l in data.labels() {
        if l >= model.cfg.num_class_slots {
            return Err(Error::Index {
                context: "pretrain label",
                index: l,
                limit: model.cfg.num_class_slots,
            });
        }
    }
    model.activate_classes(&data.classes())?;
    if epochs == 0 || data.is_empty() {
        return Ok(Vec::new());
    }
    model.set_all_trainable();
    let params = model.named_params();
    let lr_t = T::from_f(lr);
    let mut trace = Vec::new();
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(crate::training::mix_seed(seed, epoch as u64, 0x9e));
        shuffle(&mut order, &mut rng);
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let (x, labels) = data.batch(chunk)?;
            let logits = model.forward(&x, AdapterOverlay::None)?;
            let loss = logits.softmax_cross_entropy(&labels)?;
            let loss_val = loss.item().to_f();
            if !loss_val.is_finite() {
                return Err(Error::Training {
                    pathway: "pretrain",
                    epoch,
                    batch: bi,
                });
            }
            loss.backward()?;
            for (_, t) in &params {
                crate::training::sgd_step(t, lr_t);
                t.zero_grad();
            }
            trace.push(loss_val);
        }
    }
    model.freeze_all();
    Ok(trace)
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    // Fisher-Yates with the seeded stream.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
