//! The benchmark harness: sliding-window plans, replay buffers, oracle
//! training, the multi-task protocol, and ablation sweeps.
//!
//! A plan moves a fixed-size class window by `stride` every task: the
//! lowest `stride` classes of the previous window are forgotten, the rest
//! retained, and `stride` fresh classes learned. After the last task the
//! active window shares no class with the pretraining window. Classes past
//! the plan's coverage are never trained and serve as the never-seen
//! negative set for membership inference.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapters::{self, AdapterOverlay, PathwayGate, Pathway};
use crate::checkpoint::{self, Checkpoint, ParamRecord};
use crate::config::{PlanConfig, RunConfig};
use crate::data::{LabeledDataset, SyntheticDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::model::{self, Model};
use crate::report::{self, SweepRow};
use crate::scalar::Scalar;
use crate::training::{self, mix_seed, AdaptStreams, StepReport};

/// Slack on the `1/C` forgetting bound, absorbing desk-scale sampling noise.
pub const FORGET_BOUND_SLACK: f64 = 0.05;

// Seed derivation tags.
const SEED_MODEL: u64 = 1;
const SEED_PRETRAIN: u64 = 2;
const SEED_ATTACH: u64 = 3;
const SEED_TRAIN: u64 = 4;
const SEED_BUFFER: u64 = 5;
const SEED_ORACLE_INIT: u64 = 6;
const SEED_ORACLE_TRAIN: u64 = 7;

/// One CLU step: which classes to forget, retain, and learn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub index: usize,
    pub forget_classes: BTreeSet<usize>,
    pub retain_classes: BTreeSet<usize>,
    pub new_classes: BTreeSet<usize>,
}

impl TaskSpec {
    /// Pairwise disjointness plus consistency with the previous window.
    pub fn validate(&self, prev_active: &BTreeSet<usize>) -> Result<()> {
        if !self.forget_classes.is_disjoint(&self.retain_classes)
            || !self.forget_classes.is_disjoint(&self.new_classes)
            || !self.retain_classes.is_disjoint(&self.new_classes)
        {
            return Err(Error::Config(format!(
                "task {}: forget/retain/new sets must be pairwise disjoint",
                self.index
            )));
        }
        let union: BTreeSet<usize> = self
            .forget_classes
            .union(&self.retain_classes)
            .copied()
            .collect();
        if &union != prev_active {
            return Err(Error::Config(format!(
                "task {}: forget + retain must equal the previous active window",
                self.index
            )));
        }
        if !self.new_classes.is_disjoint(prev_active) {
            return Err(Error::Config(format!(
                "task {}: new classes overlap the previous active window",
                self.index
            )));
        }
        Ok(())
    }

    /// The active window after this task.
    pub fn active_after(&self) -> BTreeSet<usize> {
        self.retain_classes.union(&self.new_classes).copied().collect()
    }

    /// Classes the oracle trains on.
    pub fn target_classes(&self) -> BTreeSet<usize> {
        self.active_after()
    }
}

/// The full schedule.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlidingWindowPlan {
    pub total_classes: usize,
    pub window: usize,
    pub stride: usize,
    pub num_tasks: usize,
    pub initial_classes: BTreeSet<usize>,
    pub tasks: Vec<TaskSpec>,
}

impl SlidingWindowPlan {
    pub fn from_config(cfg: &PlanConfig) -> Result<SlidingWindowPlan> {
        make_plan(cfg.total_classes, cfg.window, cfg.stride, cfg.num_tasks)
    }

    /// Lowest class id past the plan's coverage; everything from here up is
    /// never trained.
    pub fn coverage(&self) -> usize {
        self.window + self.num_tasks * self.stride
    }

    /// Never-trained classes available as the membership-inference negative
    /// set.
    pub fn unseen_classes(&self) -> BTreeSet<usize> {
        (self.coverage()..self.total_classes).collect()
    }
}

/// Builds the schedule: task `t` (1-based) forgets
/// `[(t-1)*stride, t*stride)`, retains the rest of the previous window, and
/// learns `[(t-1)*stride + window, t*stride + window)`.
pub fn make_plan(
    total_classes: usize,
    window: usize,
    stride: usize,
    num_tasks: usize,
) -> Result<SlidingWindowPlan> {
    if stride == 0 || window <= stride {
        return Err(Error::Config(format!(
            "window {window} must exceed stride {stride} (stride >= 1)"
        )));
    }
    if total_classes < window + num_tasks * stride {
        return Err(Error::Config(format!(
            "need at least {} classes for window {window}, stride {stride}, {num_tasks} tasks; got {total_classes}",
            window + num_tasks * stride
        )));
    }
    let initial: BTreeSet<usize> = (0..window).collect();
    let mut tasks = Vec::with_capacity(num_tasks);
    let mut prev_active = initial.clone();
    for t in 1..=num_tasks {
        let task = TaskSpec {
            index: t,
            forget_classes: ((t - 1) * stride..t * stride).collect(),
            retain_classes: (t * stride..(t - 1) * stride + window).collect(),
            new_classes: ((t - 1) * stride + window..t * stride + window).collect(),
        };
        task.validate(&prev_active)?;
        prev_active = task.active_after();
        tasks.push(task);
    }
    Ok(SlidingWindowPlan {
        total_classes,
        window,
        stride,
        num_tasks,
        initial_classes: initial,
        tasks,
    })
}

/// Per-class uniform subsample of the full retain set, fixed seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    pub ratio: f64,
    pub seed: u64,
    /// Indices into the full retain dataset, ascending.
    pub indices: Vec<usize>,
}

/// Draws `round(ratio * n_c)` samples per class (at least one), uniformly
/// without replacement, deterministically under `seed`.
pub fn build_buffer<T: Scalar>(
    full_retain: &LabeledDataset<T>,
    ratio: f64,
    seed: u64,
) -> Result<ReplayBuffer> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!(
            "buffer ratio must be in (0, 1], got {ratio}"
        )));
    }
    let mut indices = Vec::new();
    for (class, rows) in full_retain.per_class_indices() {
        let take = ((ratio * rows.len() as f64).round() as usize).clamp(1, rows.len());
        let mut order = rows.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, class as u64, 0xb0f));
        model::shuffle(&mut order, &mut rng);
        indices.extend_from_slice(&order[..take]);
    }
    indices.sort_unstable();
    Ok(ReplayBuffer {
        ratio,
        seed,
        indices,
    })
}

/// Which adaptation engine a run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    /// Tri-pathway adapters with gradient isolation.
    Bid,
    /// Single shared adapter per layer, no isolation.
    Standard,
}

impl std::str::FromStr for EngineMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bid" => Ok(EngineMode::Bid),
            "standard" => Ok(EngineMode::Standard),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (expected 'bid' or 'standard')"
            ))),
        }
    }
}

/// Record of which classes an oracle's training data contained.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleAudit {
    pub observed_classes: BTreeSet<usize>,
}

/// Trains (or loads from the cache) the from-scratch reference model for one
/// task: fresh backbone, trained only on that task's retain and new classes.
pub fn train_oracle<T: Scalar>(
    task: &TaskSpec,
    dataset: &SyntheticDataset<T>,
    cfg: &RunConfig,
    cache_dir: Option<&Path>,
) -> Result<(Model<T>, OracleAudit)> {
    let targets = task.target_classes();
    let train_data = dataset.train.filter_classes(&targets);
    let audit = OracleAudit {
        observed_classes: train_data.classes(),
    };
    debug_assert!(audit.observed_classes.is_disjoint(&task.forget_classes));

    let init_seed = mix_seed(cfg.seed, task.index as u64, SEED_ORACLE_INIT);
    let train_seed = mix_seed(cfg.seed, task.index as u64, SEED_ORACLE_TRAIN);

    let cache_path = cache_dir.map(|dir| {
        dir.join(format!(
            "oracle_{}.bin",
            oracle_cache_key(cfg, &targets, init_seed, train_seed)
        ))
    });
    if let Some(path) = &cache_path {
        if path.exists() {
            let params = checkpoint::load_params(path)?;
            let mut model = Model::init(&cfg.model, init_seed)?;
            checkpoint::import_model_params(&mut model, &params)?;
            model.set_active_classes(targets)?;
            model.freeze_all();
            return Ok((model, audit));
        }
    }

    let mut model = Model::init(&cfg.model, init_seed)?;
    model::pretrain(
        &mut model,
        &train_data,
        cfg.oracle.epochs,
        cfg.oracle.lr,
        cfg.oracle.batch_size,
        train_seed,
    )?;
    if let Some(path) = &cache_path {
        checkpoint::save_params(&checkpoint::export_model_params(&model), path)?;
    }
    Ok((model, audit))
}

fn oracle_cache_key(
    cfg: &RunConfig,
    targets: &BTreeSet<usize>,
    init_seed: u64,
    train_seed: u64,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&cfg.model).unwrap_or_default());
    hasher.update(serde_json::to_vec(&cfg.dataset).unwrap_or_default());
    hasher.update(serde_json::to_vec(&cfg.oracle).unwrap_or_default());
    for &c in targets {
        hasher.update(c.to_le_bytes());
    }
    hasher.update(init_seed.to_le_bytes());
    hasher.update(train_seed.to_le_bytes());
    let digest = hasher.finalize();
    digest
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect::<String>()
}

/// Cumulative-forgetting audit after one task: every previously forgotten
/// class set must stay at or below chance plus slack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgettingAudit {
    pub task: usize,
    pub bound: f64,
    pub checks: Vec<ForgetCheck>,
    pub ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForgetCheck {
    pub source_task: usize,
    pub accuracy: f64,
}

/// Outcome of one full CLU step on one task.
pub struct TaskOutcome {
    pub report: MetricsReport,
    pub step: StepReport,
    pub audit: ForgettingAudit,
}

/// Initial pretraining on the plan's starting window.
pub fn pretrain_initial<T: Scalar>(
    cfg: &RunConfig,
    dataset: &SyntheticDataset<T>,
    plan: &SlidingWindowPlan,
) -> Result<(Model<T>, Vec<f64>)> {
    let mut model = Model::init(&cfg.model, mix_seed(cfg.seed, 0, SEED_MODEL))?;
    let data = dataset.train.filter_classes(&plan.initial_classes);
    let trace = model::pretrain(
        &mut model,
        &data,
        cfg.pretrain.epochs,
        cfg.pretrain.lr,
        cfg.pretrain.batch_size,
        mix_seed(cfg.seed, 0, SEED_PRETRAIN),
    )?;
    Ok((model, trace))
}

/// One CLU step: buffer, fresh bundle, adapt, evaluate against the task's
/// oracle, audit cumulative forgetting. Mutates `student` into the merged
/// post-task model.
pub fn run_task<T: Scalar>(
    student: &mut Model<T>,
    plan: &SlidingWindowPlan,
    task_pos: usize,
    dataset: &SyntheticDataset<T>,
    mode: EngineMode,
    cfg: &RunConfig,
    oracle_cache: Option<&Path>,
) -> Result<TaskOutcome> {
    let task = plan.tasks.get(task_pos).ok_or(Error::Index {
        context: "plan task",
        index: task_pos,
        limit: plan.tasks.len(),
    })?;
    let t = task.index as u64;

    let full_retain = dataset.train.filter_classes(&task.retain_classes);
    let buffer = build_buffer(&full_retain, cfg.buffer_ratio, mix_seed(cfg.seed, t, SEED_BUFFER))?;
    let replay = full_retain.subset(&buffer.indices);
    let forget_stream = dataset.train.filter_classes(&task.forget_classes);
    let new_stream = dataset.train.filter_classes(&task.new_classes);

    let teacher = student.clone_frozen();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = mix_seed(cfg.seed, t, SEED_TRAIN);

    let streams = AdaptStreams {
        replay: &replay,
        forget: &forget_stream,
        new: &new_stream,
    };

    let attach_seed = mix_seed(cfg.seed, t, SEED_ATTACH);
    let (step, tunable) = match mode {
        EngineMode::Bid => {
            let mut bundle = adapters::attach(student, &cfg.adapters, attach_seed)?;
            bundle.bind_head_rows(Pathway::Retain, &task.retain_classes);
            bundle.bind_head_rows(Pathway::New, &task.new_classes);
            bundle.bind_head_rows(Pathway::Forget, &task.forget_classes);
            let tunable = adapters::tunable_ratio(student, &bundle);
            let (step, _merge) =
                training::adapt(student, &teacher, bundle, task, streams, &train_cfg)?;
            (step, tunable)
        }
        EngineMode::Standard => {
            let set = adapters::attach_standard(
                student,
                cfg.adapters.rank_retain_new,
                cfg.adapters.scaling,
                attach_seed,
            )?;
            let head_in = student.config().embed_dim;
            let head_rows = task.retain_classes.len()
                + task.new_classes.len()
                + task.forget_classes.len();
            let set_params: usize = set.layers.iter().map(|l| l.a.numel() + l.b.numel()).sum();
            let tunable = (set_params + head_rows * (head_in + 1)) as f64
                / (student.param_count() + set_params) as f64;
            let (step, _merge) =
                training::standard_lora_adapt(student, &teacher, set, task, streams, &train_cfg)?;
            (step, tunable)
        }
    };

    let (oracle, _audit) = train_oracle(task, dataset, cfg, oracle_cache)?;
    let report = evaluate_task_metrics(student, &oracle, plan, task, dataset, cfg, tunable)?;
    let audit = audit_forgetting(student, plan, task.index, dataset)?;
    Ok(TaskOutcome {
        report,
        step,
        audit,
    })
}

/// All metric fields for a merged post-task model.
pub fn evaluate_task_metrics<T: Scalar>(
    student: &Model<T>,
    oracle: &Model<T>,
    plan: &SlidingWindowPlan,
    task: &TaskSpec,
    dataset: &SyntheticDataset<T>,
    cfg: &RunConfig,
    tunable_ratio: f64,
) -> Result<MetricsReport> {
    let acc_f = metrics::accuracy(student, &dataset.test, &task.forget_classes)?;
    let acc_r = metrics::accuracy(student, &dataset.test, &task.retain_classes)?;
    let acc_n = metrics::accuracy(student, &dataset.test, &task.new_classes)?;

    let targets = task.target_classes();
    let eval_set = dataset.test.filter_classes(&targets);
    let kl = metrics::kl_to_oracle(student, oracle, &eval_set, &targets)?;

    let forget_test = dataset.test.filter_classes(&task.forget_classes);
    let unseen_test = dataset.test.filter_classes(&plan.unseen_classes());
    let mia = metrics::mia_rate(student, &forget_test, &unseen_test, &cfg.mia)?;

    let n_retain = dataset
        .test
        .labels()
        .iter()
        .filter(|l| task.retain_classes.contains(l))
        .count();
    let n_new = dataset
        .test
        .labels()
        .iter()
        .filter(|l| task.new_classes.contains(l))
        .count();
    let chance = 1.0 / student.head().active_classes.len() as f64;
    metrics::assemble_report(
        task.index,
        acc_f,
        acc_r,
        acc_n,
        n_retain,
        n_new,
        kl,
        mia,
        tunable_ratio,
        chance,
    )
}

/// Checks every previously forgotten class set against the chance bound.
pub fn audit_forgetting<T: Scalar>(
    student: &Model<T>,
    plan: &SlidingWindowPlan,
    through_task: usize,
    dataset: &SyntheticDataset<T>,
) -> Result<ForgettingAudit> {
    let bound = 1.0 / student.head().active_classes.len() as f64 + FORGET_BOUND_SLACK;
    let mut checks = Vec::new();
    let mut ok = true;
    for task in &plan.tasks {
        if task.index > through_task {
            break;
        }
        let acc = metrics::accuracy(student, &dataset.test, &task.forget_classes)?;
        if acc > bound {
            ok = false;
        }
        checks.push(ForgetCheck {
            source_task: task.index,
            accuracy: acc,
        });
    }
    Ok(ForgettingAudit {
        task: through_task,
        bound,
        checks,
        ok,
    })
}

/// Results of a full protocol run.
pub struct ProtocolArtifacts {
    pub reports: Vec<MetricsReport>,
    pub audits: Vec<ForgettingAudit>,
    pub aggregate_csv: String,
}

impl ProtocolArtifacts {
    /// The 1/C cumulative-forgetting bound at every task, plus the
    /// full-replacement property (the paper-shaped leakage invariants).
    pub fn check_invariants(&self, plan: &SlidingWindowPlan) -> Result<()> {
        for audit in &self.audits {
            if !audit.ok {
                let detail: Vec<String> = audit
                    .checks
                    .iter()
                    .filter(|c| c.accuracy > audit.bound)
                    .map(|c| format!("task {} forget set at {:.3}", c.source_task, c.accuracy))
                    .collect();
                return Err(Error::InvariantViolation(format!(
                    "forgetting bound {:.3} exceeded after task {}: {}",
                    audit.bound,
                    audit.task,
                    detail.join(", ")
                )));
            }
        }
        if let Some(last) = plan.tasks.last() {
            if !last.active_after().is_disjoint(&plan.initial_classes) {
                return Err(Error::InvariantViolation(
                    "final active window overlaps the pretraining classes".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Runs every task of the plan in sequence, consuming the previous task's
/// model, evaluating against per-task oracles, and persisting artifacts
/// under `out_dir` when given (`task_<t>/{checkpoint.bin,report.json,log.jsonl}`
/// plus `aggregate.csv`).
pub fn run_protocol<T: Scalar>(
    pretrained: &Model<T>,
    dataset: &SyntheticDataset<T>,
    mode: EngineMode,
    cfg: &RunConfig,
    out_dir: Option<&Path>,
) -> Result<ProtocolArtifacts> {
    let plan = SlidingWindowPlan::from_config(&cfg.plan)?;
    let oracle_cache: Option<PathBuf> = out_dir.map(|d| d.join("oracles"));
    if let Some(dir) = &oracle_cache {
        std::fs::create_dir_all(dir)?;
    }
    let mut student = pretrained.deep_clone(false);
    let mut reports = Vec::new();
    let mut audits = Vec::new();
    for pos in 0..plan.tasks.len() {
        let outcome = run_task(
            &mut student,
            &plan,
            pos,
            dataset,
            mode,
            cfg,
            oracle_cache.as_deref(),
        )?;
        if let Some(dir) = out_dir {
            let task_dir = dir.join(format!("task_{}", plan.tasks[pos].index));
            std::fs::create_dir_all(&task_dir)?;
            Checkpoint::capture(&student, cfg, plan.tasks[pos].index)
                .save(&task_dir.join("checkpoint.bin"))?;
            report::write_report_json(&outcome.report, &task_dir.join("report.json"))?;
            outcome.step.write_jsonl(&task_dir.join("log.jsonl"))?;
        }
        reports.push(outcome.report);
        audits.push(outcome.audit);
    }
    let aggregate = report::aggregate_csv(&reports);
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("aggregate.csv"), &aggregate)?;
    }
    Ok(ProtocolArtifacts {
        reports,
        audits,
        aggregate_csv: aggregate,
    })
}

/// Which knob an ablation sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParameter {
    Rank,
    BufferRatio,
    LambdaEsc,
    PathwayGate,
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rank" => Ok(SweepParameter::Rank),
            "buffer_ratio" => Ok(SweepParameter::BufferRatio),
            "lambda_esc" => Ok(SweepParameter::LambdaEsc),
            "pathway_gate" => Ok(SweepParameter::PathwayGate),
            other => Err(Error::Config(format!(
                "unknown sweep parameter '{other}' \
                 (expected rank | buffer_ratio | lambda_esc | pathway_gate)"
            ))),
        }
    }
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::Rank => "rank",
            SweepParameter::BufferRatio => "buffer_ratio",
            SweepParameter::LambdaEsc => "lambda_esc",
            SweepParameter::PathwayGate => "pathway_gate",
        }
    }
}

/// Runs one single-task ablation per value (or per gate combination) and
/// emits rows mirroring the ablation-table schema. Value runs are
/// independent, so up to `jobs` of them execute in parallel.
pub fn sweep<T: Scalar>(
    param: SweepParameter,
    values: &[f64],
    cfg: &RunConfig,
    jobs: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let plan = SlidingWindowPlan::from_config(&cfg.plan)?;
    let dataset = crate::data::generate::<T>(&cfg.dataset);
    let (pretrained, _) = pretrain_initial(cfg, &dataset, &plan)?;
    let snapshot = checkpoint::export_model_params(&pretrained);
    let active = pretrained.head().active_classes.clone();

    let rows = match param {
        SweepParameter::PathwayGate => {
            gate_sweep_rows(cfg, &plan, &dataset, &snapshot, &active)?
        }
        _ => {
            if values.is_empty() {
                return Err(Error::Config("sweep needs at least one value".into()));
            }
            let jobs = jobs.max(1);
            let mut rows: Vec<Option<SweepRow>> = vec![None; values.len()];
            let mut first_err: Option<Error> = None;
            for chunk_start in (0..values.len()).step_by(jobs) {
                let chunk_end = (chunk_start + jobs).min(values.len());
                let results: Vec<(usize, Result<SweepRow>)> = std::thread::scope(|scope| {
                    let mut handles = Vec::new();
                    for i in chunk_start..chunk_end {
                        let value = values[i];
                        let dataset = &dataset;
                        let plan = &plan;
                        let snapshot = &snapshot;
                        let active = &active;
                        handles.push((
                            i,
                            scope.spawn(move || {
                                single_value_row::<T>(
                                    param, value, cfg, plan, dataset, snapshot, active,
                                )
                            }),
                        ));
                    }
                    handles
                        .into_iter()
                        .map(|(i, h)| (i, h.join().expect("sweep worker panicked")))
                        .collect()
                });
                for (i, res) in results {
                    match res {
                        Ok(row) => rows[i] = Some(row),
                        Err(e) => {
                            if first_err.is_none() {
                                first_err = Some(e);
                            }
                        }
                    }
                }
            }
            if let Some(e) = first_err {
                return Err(e);
            }
            rows.into_iter().map(|r| r.unwrap()).collect()
        }
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report::write_sweep(&rows, &dir.join(format!("sweep_{}.csv", param.name())))?;
    }
    Ok(rows)
}

fn restore_model<T: Scalar>(
    cfg: &RunConfig,
    snapshot: &[ParamRecord],
    active: &BTreeSet<usize>,
) -> Result<Model<T>> {
    let mut model = Model::init(&cfg.model, mix_seed(cfg.seed, 0, SEED_MODEL))?;
    checkpoint::import_model_params(&mut model, snapshot)?;
    model.set_active_classes(active.clone())?;
    model.freeze_all();
    Ok(model)
}

fn single_value_row<T: Scalar>(
    param: SweepParameter,
    value: f64,
    base: &RunConfig,
    plan: &SlidingWindowPlan,
    dataset: &SyntheticDataset<T>,
    snapshot: &[ParamRecord],
    active: &BTreeSet<usize>,
) -> Result<SweepRow> {
    let mut cfg = base.clone();
    let value_label = match param {
        SweepParameter::Rank => {
            let rank = value as usize;
            if rank == 0 {
                return Err(Error::Config("rank sweep values must be >= 1".into()));
            }
            cfg.adapters.rank_retain_new = rank;
            cfg.adapters.rank_forget = rank;
            format!("{rank}")
        }
        SweepParameter::BufferRatio => {
            cfg.buffer_ratio = value;
            format!("{value}")
        }
        SweepParameter::LambdaEsc => {
            cfg.train.weights.lambda_esc = value;
            format!("{value}")
        }
        SweepParameter::PathwayGate => unreachable!("gate sweep handled separately"),
    };
    let mut student = restore_model::<T>(&cfg, snapshot, active)?;
    let outcome = run_task(&mut student, plan, 0, dataset, EngineMode::Bid, &cfg, None)?;
    Ok(SweepRow {
        parameter: param.name().into(),
        value: value_label,
        tunable_ratio: outcome.report.tunable_ratio,
        acc_f: outcome.report.acc_f,
        acc_r: outcome.report.acc_r,
        acc_n: outcome.report.acc_n,
        acc_o: outcome.report.acc_o,
    })
}

/// Trains task 1 once without merging, then evaluates with pathways
/// selectively disabled at test time (adapters gated, trained head kept).
fn gate_sweep_rows<T: Scalar>(
    cfg: &RunConfig,
    plan: &SlidingWindowPlan,
    dataset: &SyntheticDataset<T>,
    snapshot: &[ParamRecord],
    active: &BTreeSet<usize>,
) -> Result<Vec<SweepRow>> {
    let task = plan
        .tasks
        .first()
        .ok_or_else(|| Error::Config("gate sweep needs a plan with at least one task".into()))?;
    let mut student = restore_model::<T>(cfg, snapshot, active)?;

    // Pre-adaptation reference row.
    let mut pre_eval = restore_model::<T>(cfg, snapshot, active)?;
    pre_eval.activate_classes(&task.new_classes)?;
    let pre_row = gated_row(
        &pre_eval,
        None,
        PathwayGate::none(),
        task,
        dataset,
        "pretrain",
    )?;

    let full_retain = dataset.train.filter_classes(&task.retain_classes);
    let buffer = build_buffer(
        &full_retain,
        cfg.buffer_ratio,
        mix_seed(cfg.seed, task.index as u64, SEED_BUFFER),
    )?;
    let replay = full_retain.subset(&buffer.indices);
    let forget_stream = dataset.train.filter_classes(&task.forget_classes);
    let new_stream = dataset.train.filter_classes(&task.new_classes);
    let teacher = student.clone_frozen();
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = mix_seed(cfg.seed, task.index as u64, SEED_TRAIN);

    let mut bundle = adapters::attach(
        &mut student,
        &cfg.adapters,
        mix_seed(cfg.seed, task.index as u64, SEED_ATTACH),
    )?;
    training::adapt_unmerged(
        &mut student,
        &teacher,
        &mut bundle,
        task,
        AdaptStreams {
            replay: &replay,
            forget: &forget_stream,
            new: &new_stream,
        },
        &train_cfg,
    )?;

    let mut rows = vec![pre_row];
    for (label, gate) in [
        ("all", PathwayGate::all()),
        ("no_forget", PathwayGate::without(Pathway::Forget)),
        ("no_retain", PathwayGate::without(Pathway::Retain)),
        ("no_new", PathwayGate::without(Pathway::New)),
    ] {
        rows.push(gated_row(
            &student,
            Some(&bundle),
            gate,
            task,
            dataset,
            label,
        )?);
    }
    Ok(rows)
}

fn gated_row<T: Scalar>(
    model: &Model<T>,
    bundle: Option<&adapters::PathwayBundle<T>>,
    gate: PathwayGate,
    task: &TaskSpec,
    dataset: &SyntheticDataset<T>,
    label: &str,
) -> Result<SweepRow> {
    let overlay = || match bundle {
        Some(b) => AdapterOverlay::Tri { bundle: b, gate },
        None => AdapterOverlay::None,
    };
    let acc_f = metrics::accuracy_gated(model, overlay(), &dataset.test, &task.forget_classes)?;
    let acc_r = metrics::accuracy_gated(model, overlay(), &dataset.test, &task.retain_classes)?;
    let acc_n = metrics::accuracy_gated(model, overlay(), &dataset.test, &task.new_classes)?;
    let n_r = dataset
        .test
        .labels()
        .iter()
        .filter(|l| task.retain_classes.contains(l))
        .count() as f64;
    let n_n = dataset
        .test
        .labels()
        .iter()
        .filter(|l| task.new_classes.contains(l))
        .count() as f64;
    Ok(SweepRow {
        parameter: "pathway_gate".into(),
        value: label.into(),
        tunable_ratio: 0.0,
        acc_f,
        acc_r,
        acc_n,
        acc_o: (n_r * acc_r + n_n * acc_n) / (n_r + n_n),
    })
}
