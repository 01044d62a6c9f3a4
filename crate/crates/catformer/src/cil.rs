//! Class-incremental training protocol.
//!
//! Task 0 trains the backbone, its thresholds, and the first head jointly.
//! Every later task freezes all previous parameters and optimizes only that
//! task's head and thresholds. After each task, features extracted at BASE
//! thresholds feed the accumulated buffer that retrains the routing gate.
//! Freeze soundness is enforced two ways: frozen tensors enter tapes as
//! constants (no gradient can exist), and SHA-256 group checksums are
//! re-verified after every task.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::backbone::{head_forward, ForwardOpts, ModelConfig, PKey};
use crate::data::{Dataset, TaskData, TaskSequence};
use crate::dtlif::{ActiveTask, PHI_CLAMP};
use crate::error::{Error, Result};
use crate::heads::FeatureBuffer;
use crate::metrics::{EvalScope, EventKind, MetricsRecord, MetricsSink};
use crate::model::{bind_param, Model};
use crate::rng::{salt, SplitMix64};
use crate::router::{argmax, evaluate_cil, oracle_probe_logits, EvalMetrics};
use crate::tensor::sgd_step_tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr_backbone: f32,
    pub lr_threshold: f32,
    pub lr_head: f32,
    pub lr_gate: f32,
    pub epochs_task0: usize,
    pub epochs_taskk: usize,
    pub epochs_gate: usize,
    pub batch_size: usize,
    pub per_task_cap: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_backbone: 0.05,
            lr_threshold: 0.1,
            lr_head: 0.05,
            lr_gate: 0.05,
            epochs_task0: 30,
            epochs_taskk: 15,
            epochs_gate: 20,
            batch_size: 16,
            per_task_cap: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Learning rates may be zero (null-training diagnostics) but never
    /// negative; epoch and batch counts must be positive.
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_threshold", self.lr_threshold),
            ("lr_head", self.lr_head),
            ("lr_gate", self.lr_gate),
        ] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {lr}")));
            }
        }
        if self.epochs_task0 == 0 || self.epochs_taskk == 0 || self.epochs_gate == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if self.batch_size == 0 || self.per_task_cap == 0 {
            return Err(Error::Config("batch_size and per_task_cap must be positive".into()));
        }
        Ok(())
    }
}

// ── optimizer ────────────────────────────────────────────────────────────

pub struct ParamGroup {
    pub keys: Vec<PKey>,
    pub lr: f32,
    pub clamp: Option<(f32, f32)>,
}

/// Plain SGD over explicit parameter groups. The key list IS the freeze
/// boundary: stepping consumes listed gradients, and any gradient found
/// elsewhere afterward is an invariant violation.
pub struct SgdOptimizer {
    pub groups: Vec<ParamGroup>,
}

impl SgdOptimizer {
    pub fn keys(&self) -> Vec<PKey> {
        self.groups.iter().flat_map(|g| g.keys.clone()).collect()
    }

    pub fn trainable_count(&self, model: &Model) -> Result<usize> {
        let mut n = 0;
        for g in &self.groups {
            for k in &g.keys {
                n += model.tensor(k)?.numel();
            }
        }
        Ok(n)
    }

    pub fn step(&self, model: &mut Model) -> Result<()> {
        for g in &self.groups {
            for k in &g.keys {
                sgd_step_tensor(model.tensor_mut(k)?, g.lr, g.clamp)
                    .map_err(|e| Error::Contract(format!("step on {k:?}: {e}")))?;
            }
        }
        // All listed gradients were consumed; anything left is a leak onto
        // a frozen tensor.
        model.assert_grads_only_on(&[])
    }
}

// ── shared epoch loop ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EpochStats {
    pub loss: f64,
    pub acc: f64,
}

#[allow(clippy::too_many_arguments)]
fn run_task_epochs(
    model: &mut Model,
    task: &TaskData,
    optimizer: &SgdOptimizer,
    trainable: &[PKey],
    epochs: usize,
    batch_size: usize,
    train_norm: bool,
    shuffle_rng: &mut SplitMix64,
    mut per_epoch: impl FnMut(usize, &EpochStats, u64) -> Result<()>,
) -> Result<EpochStats> {
    if task.train.is_empty() {
        return Err(Error::Data(format!("task {} has no training data", task.id)));
    }
    let local_labels: Vec<usize> = task
        .train
        .labels
        .iter()
        .map(|&g| {
            task.local_label(g)
                .ok_or_else(|| Error::Data(format!("label {g} not in task {}", task.id)))
        })
        .collect::<Result<_>>()?;
    let head_task = task.id;
    let kind = task.train.kind;
    let mut last = EpochStats { loss: f64::NAN, acc: 0.0 };

    for epoch in 0..epochs {
        let t0 = Instant::now();
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;

        for chunk in order.chunks(batch_size) {
            let samples: Vec<&[f32]> = chunk.iter().map(|&i| task.train.samples[i].as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| local_labels[i]).collect();

            let opts = ForwardOpts { train_norm, relaxed: false };
            let mut fr = model.forward_batch(&samples, kind, trainable, opts)?;
            let (w, b) = model.heads.weights(head_task)?;
            let w_id = bind_param(
                &mut fr.tape,
                &mut fr.bound,
                PKey::HeadW(head_task),
                w,
                trainable.contains(&PKey::HeadW(head_task)),
            );
            let b_id = bind_param(
                &mut fr.tape,
                &mut fr.bound,
                PKey::HeadB(head_task),
                b,
                trainable.contains(&PKey::HeadB(head_task)),
            );
            let logits = head_forward(&mut fr.tape, fr.features, w_id, b_id)?;
            let loss = fr.tape.cross_entropy(logits, &labels)?;

            let c = model.heads.classes_per_task;
            for (row, &label) in fr.tape.data(logits).chunks(c).zip(&labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            loss_sum += fr.tape.data(loss)[0] as f64 * labels.len() as f64;

            fr.tape.backward(loss)?;
            model.apply_tape_grads(&fr.tape, &fr.bound)?;
            for (prefix, stats) in &fr.stat_updates {
                model.backbone.update_running_stats(prefix, stats)?;
            }
            optimizer.step(model)?;
        }

        last = EpochStats {
            loss: loss_sum / task.train.len() as f64,
            acc: correct as f64 / task.train.len() as f64,
        };
        per_epoch(epoch, &last, t0.elapsed().as_millis() as u64)?;
    }
    Ok(last)
}

/// Recompute norm running statistics exactly over a dataset with the final
/// weights: one pass of averaged batch moments. Closes the batch-stat vs
/// running-stat gap before the backbone freezes.
pub fn recalibrate_norm_stats(model: &mut Model, data: &Dataset, batch_size: usize) -> Result<()> {
    let mut sums: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
    for chunk in data.samples.chunks(batch_size) {
        let refs: Vec<&[f32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let fr = model.forward_batch(
            &refs,
            data.kind,
            &[],
            ForwardOpts { train_norm: true, relaxed: false },
        )?;
        for (prefix, stats) in &fr.stat_updates {
            let e = sums.entry(prefix.clone()).or_insert_with(|| {
                (vec![0.0; stats.mean.len()], vec![0.0; stats.var.len()], 0)
            });
            for (a, &m) in e.0.iter_mut().zip(&stats.mean) {
                *a += m as f64;
            }
            for (a, &v) in e.1.iter_mut().zip(&stats.var) {
                *a += v as f64;
            }
            e.2 += 1;
        }
    }
    for (prefix, (msum, vsum, n)) in sums {
        let rmean = model.backbone.get_mut(&format!("{prefix}.rmean"))?;
        for (r, s) in rmean.data.iter_mut().zip(&msum) {
            *r = (s / n as f64) as f32;
        }
        let rvar = model.backbone.get_mut(&format!("{prefix}.rvar"))?;
        for (r, s) in rvar.data.iter_mut().zip(&vsum) {
            *r = (s / n as f64) as f32;
        }
    }
    Ok(())
}

fn bank_keys(model: &Model, task: u32) -> Vec<PKey> {
    (0..model.bank.num_layers()).map(|layer| PKey::Bank { task, layer }).collect()
}

fn head_keys(task: u32) -> Vec<PKey> {
    vec![PKey::HeadW(task), PKey::HeadB(task)]
}

/// Joint optimizer for task 0: backbone, thresholds, first head.
pub fn task0_optimizer(model: &Model, tcfg: &TrainConfig, train_thresholds: bool) -> SgdOptimizer {
    let backbone_keys: Vec<PKey> = model
        .backbone
        .trainable_names(&model.cfg)
        .into_iter()
        .map(PKey::Backbone)
        .collect();
    let mut groups = vec![
        ParamGroup { keys: backbone_keys, lr: tcfg.lr_backbone, clamp: None },
        ParamGroup { keys: head_keys(0), lr: tcfg.lr_head, clamp: None },
    ];
    if train_thresholds {
        groups.push(ParamGroup {
            keys: bank_keys(model, 0),
            lr: tcfg.lr_threshold,
            clamp: Some(PHI_CLAMP),
        });
    }
    SgdOptimizer { groups }
}

/// Optimizer for task k > 0: exactly {W_k, b_k} plus phi^(k) when threshold
/// training is enabled.
pub fn task_k_optimizer(model: &Model, task: u32, tcfg: &TrainConfig, train_thresholds: bool) -> SgdOptimizer {
    let mut groups = vec![ParamGroup { keys: head_keys(task), lr: tcfg.lr_head, clamp: None }];
    if train_thresholds {
        groups.push(ParamGroup {
            keys: bank_keys(model, task),
            lr: tcfg.lr_threshold,
            clamp: Some(PHI_CLAMP),
        });
    }
    SgdOptimizer { groups }
}

// ── harvesting and gate training ─────────────────────────────────────────

/// Extract up to the buffer cap of BASE-threshold features from the task's
/// training data and append them. Earlier tasks' entries are untouched.
pub fn harvest_features(model: &mut Model, task: &TaskData, buffer: &mut FeatureBuffer) -> Result<()> {
    let take = buffer.per_task_cap.min(task.train.len());
    let kind = task.train.kind;
    for chunk in task.train.samples[..take].chunks(64) {
        let refs: Vec<&[f32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let feats = model.features_at(ActiveTask::Base, &refs, kind)?;
        for f in feats {
            buffer.push(f, task.id);
        }
    }
    Ok(())
}

/// Retrain the gate on the accumulated buffer. The output width must equal
/// the number of tasks seen (grown beforehand).
pub fn train_gating(
    model: &mut Model,
    buffer: &FeatureBuffer,
    tasks_seen: usize,
    tcfg: &TrainConfig,
    shuffle_rng: &mut SplitMix64,
) -> Result<EpochStats> {
    if buffer.is_empty() {
        return Err(Error::Data("feature buffer is empty".into()));
    }
    if model.gate.tasks_seen() != tasks_seen {
        return Err(Error::Config(format!(
            "gate width {} does not match {tasks_seen} tasks seen",
            model.gate.tasks_seen()
        )));
    }
    let d = model.cfg.embed_dim;
    let gate_keys = [PKey::GateW1, PKey::GateB1, PKey::GateW2, PKey::GateB2];
    let optimizer = SgdOptimizer {
        groups: vec![ParamGroup { keys: gate_keys.to_vec(), lr: tcfg.lr_gate, clamp: None }],
    };

    let mut last = EpochStats { loss: f64::NAN, acc: 0.0 };
    for _epoch in 0..tcfg.epochs_gate {
        let mut order: Vec<usize> = (0..buffer.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;

        for chunk in order.chunks(tcfg.batch_size) {
            let mut flat = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let e = &buffer.entries()[i];
                flat.extend_from_slice(&e.feature);
                labels.push(e.task as usize);
            }
            let mut tape = crate::tape::Tape::new();
            let mut bound = BTreeMap::new();
            let f = tape.constant(vec![chunk.len(), d], flat);
            let w1 = bind_param(&mut tape, &mut bound, PKey::GateW1, &model.gate.w1, true);
            let b1 = bind_param(&mut tape, &mut bound, PKey::GateB1, &model.gate.b1, true);
            let w2 = bind_param(&mut tape, &mut bound, PKey::GateW2, &model.gate.w2, true);
            let b2 = bind_param(&mut tape, &mut bound, PKey::GateB2, &model.gate.b2, true);
            let logits = model.gate.forward_bound(&mut tape, f, w1, b1, w2, b2)?;
            let loss = tape.cross_entropy(logits, &labels)?;

            for (row, &label) in tape.data(logits).chunks(tasks_seen).zip(&labels) {
                if argmax(row) == label {
                    correct += 1;
                }
            }
            loss_sum += tape.data(loss)[0] as f64 * labels.len() as f64;

            tape.backward(loss)?;
            model.apply_tape_grads(&tape, &bound)?;
            optimizer.step(model)?;
        }
        last = EpochStats {
            loss: loss_sum / buffer.len() as f64,
            acc: correct as f64 / buffer.len() as f64,
        };
    }
    Ok(last)
}

// ── freeze accounting ────────────────────────────────────────────────────

/// Pass/fail per recorded checksum group.
pub struct FreezeReport {
    pub groups: Vec<(String, bool)>,
}

impl FreezeReport {
    pub fn all_pass(&self) -> bool {
        self.groups.iter().all(|(_, ok)| *ok)
    }
}

pub fn freeze_check(model: &Model, reference: &BTreeMap<String, [u8; 32]>) -> FreezeReport {
    let current = model.checksum_groups();
    FreezeReport {
        groups: reference
            .iter()
            .map(|(name, hash)| (name.clone(), current.get(name) == Some(hash)))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub bank_bytes: usize,
}

/// Totals by enumeration; `trainable` reflects the supplied optimizer's
/// parameter list (0 when evaluating).
pub fn count_parameters(model: &Model, optimizer: Option<&SgdOptimizer>) -> Result<ParamCounts> {
    let bank_total: usize = model.bank.num_tasks() * model.bank.entries_per_task();
    let heads_total: usize = model.heads.num_tasks() * model.heads.params_per_head();
    let total = model.backbone.param_count() + bank_total + heads_total + model.gate.param_count();
    let trainable = match optimizer {
        Some(o) => o.trainable_count(model)?,
        None => 0,
    };
    Ok(ParamCounts { total, trainable, bank_bytes: model.bank.bytes_per_task() })
}

// ── full protocol ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ProtocolOptions {
    /// Disabled by the fixed-threshold ablation: thresholds stay at
    /// phi_init and leave every optimizer list.
    pub train_thresholds: bool,
    /// Probe batch size per task for bitwise retroactive-stability checks.
    pub probe_size: usize,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        ProtocolOptions { train_thresholds: true, probe_size: 8 }
    }
}

/// Hooks for the CLI driver (checkpointing, fault injection for tests).
#[derive(Default)]
pub struct RunHooks<'a> {
    #[allow(clippy::type_complexity)]
    pub after_task_trained: Option<Box<dyn FnMut(&mut Model, u32) -> Result<()> + 'a>>,
    #[allow(clippy::type_complexity)]
    pub save_checkpoint: Option<Box<dyn FnMut(&Model, u32) -> Result<()> + 'a>>,
}

pub struct RunReport {
    /// Evaluation after each task (over tasks seen so far).
    pub evals: Vec<EvalMetrics>,
    /// Reference oracle-probe logit bits per task, recorded at finalization.
    pub probe_bits: BTreeMap<u32, Vec<Vec<u32>>>,
    /// Recorded freeze-group checksums.
    pub freeze_refs: BTreeMap<String, [u8; 32]>,
}

impl RunReport {
    pub fn final_eval(&self) -> &EvalMetrics {
        self.evals.last().expect("protocol ran at least one task")
    }
}

fn probe_dataset(task: &TaskData, probe_size: usize) -> Dataset {
    let take = probe_size.min(task.test.len());
    Dataset {
        kind: task.test.kind,
        samples: task.test.samples[..take].to_vec(),
        labels: task.test.labels[..take].to_vec(),
    }
}

fn logits_bits(logits: &[Vec<f32>]) -> Vec<u32> {
    logits.iter().flatten().map(|v| v.to_bits()).collect()
}

/// Run the full incremental protocol over a task sequence.
pub fn run_protocol(
    model_cfg: ModelConfig,
    tcfg: &TrainConfig,
    seq: &TaskSequence,
    opts: &ProtocolOptions,
    sink: &mut dyn MetricsSink,
    hooks: &mut RunHooks,
) -> Result<(Model, RunReport)> {
    tcfg.validate()?;
    let mut model = Model::new(model_cfg, seq.classes_per_task, tcfg.seed)?;
    let mut init_rng = SplitMix64::stream(tcfg.seed, salt::INIT ^ 0xABCD);
    let mut shuffle_rng = SplitMix64::stream(tcfg.seed, salt::SHUFFLE);
    let mut gate_rng = SplitMix64::stream(tcfg.seed, salt::GATE ^ 0xABCD);

    let mut buffer = FeatureBuffer::new(tcfg.per_task_cap);
    let mut freeze_refs: BTreeMap<String, [u8; 32]> = BTreeMap::new();
    let mut probe_bits: BTreeMap<u32, Vec<Vec<u32>>> = BTreeMap::new();
    let mut probes: Vec<Dataset> = Vec::new();
    let mut evals = Vec::new();

    for task in &seq.tasks {
        let k = task.id;
        let task_t0 = Instant::now();

        // New-task state: thresholds at phi_init, Xavier head.
        model.bank.clone_thresholds(ActiveTask::Base, k)?;
        model.heads.add_head(k, &mut init_rng)?;
        model.bank.active_task = ActiveTask::Task(k);

        let optimizer = if k == 0 {
            task0_optimizer(&model, tcfg, opts.train_thresholds)
        } else {
            for prev in 0..k {
                if !model.bank.is_finalized(prev) || !model.heads.is_finalized(prev) {
                    return Err(Error::Protocol(format!(
                        "task {prev} not finalized before training task {k}"
                    )));
                }
            }
            task_k_optimizer(&model, k, tcfg, opts.train_thresholds)
        };
        let trainable = optimizer.keys();
        let counts = count_parameters(&model, Some(&optimizer))?;
        let epochs = if k == 0 { tcfg.epochs_task0 } else { tcfg.epochs_taskk };

        let final_stats = run_task_epochs(
            &mut model,
            task,
            &optimizer,
            &trainable,
            epochs,
            tcfg.batch_size,
            k == 0,
            &mut shuffle_rng,
            |epoch, stats, wall_ms| {
                sink.emit(&MetricsRecord {
                    event: EventKind::Epoch,
                    task: k as i64,
                    epoch: epoch as i64,
                    loss: stats.loss,
                    acc: stats.acc,
                    routing_acc: None,
                    scope: None,
                    trainable_params: counts.trainable as u64,
                    bank_bytes: counts.bank_bytes as u64,
                    wall_ms,
                    seed: tcfg.seed,
                })
            },
        )?;

        if k == 0 {
            recalibrate_norm_stats(&mut model, &task.train, tcfg.batch_size)?;
        }

        if let Some(hook) = hooks.after_task_trained.as_mut() {
            hook(&mut model, k)?;
        }

        // Finalize and record freeze references.
        model.bank.finalize(k)?;
        model.heads.finalize(k)?;
        let groups = model.checksum_groups();
        if k == 0 {
            freeze_refs.insert("backbone".into(), groups["backbone"]);
        }
        freeze_refs.insert(format!("bank.task{k}"), groups[&format!("bank.task{k}")]);
        freeze_refs.insert(format!("head.task{k}"), groups[&format!("head.task{k}")]);

        let report = freeze_check(&model, &freeze_refs);
        if !report.all_pass() {
            let failed: Vec<&str> = report
                .groups
                .iter()
                .filter(|(_, ok)| !ok)
                .map(|(n, _)| n.as_str())
                .collect();
            return Err(Error::Invariant(format!("freeze check failed: {failed:?}")));
        }

        // Probe logits: record task k's reference, re-verify all others.
        probes.push(probe_dataset(task, opts.probe_size));
        for j in 0..=k {
            let probe = probes[j as usize].clone();
            let logits = oracle_probe_logits(&mut model, seq.task(j)?, &probe)?;
            let bits = logits_bits(&logits);
            match probe_bits.get(&j) {
                None => {
                    probe_bits.insert(j, logits.iter().map(|l| l.iter().map(|v| v.to_bits()).collect()).collect());
                }
                Some(reference) => {
                    let ref_flat: Vec<u32> = reference.iter().flatten().copied().collect();
                    if ref_flat != bits {
                        return Err(Error::Invariant(format!(
                            "probe logits for task {j} changed after training task {k}"
                        )));
                    }
                }
            }
        }

        sink.emit(&MetricsRecord {
            event: EventKind::TaskDone,
            task: k as i64,
            epoch: -1,
            loss: final_stats.loss,
            acc: final_stats.acc,
            routing_acc: None,
            scope: None,
            trainable_params: counts.trainable as u64,
            bank_bytes: counts.bank_bytes as u64,
            wall_ms: task_t0.elapsed().as_millis() as u64,
            seed: tcfg.seed,
        })?;

        // Harvest and retrain the gate on the accumulated buffer.
        harvest_features(&mut model, task, &mut buffer)?;
        model.gate.grow(&mut gate_rng);
        let gate_t0 = Instant::now();
        let gate_stats = train_gating(&mut model, &buffer, (k + 1) as usize, tcfg, &mut shuffle_rng)?;
        sink.emit(&MetricsRecord {
            event: EventKind::GateDone,
            task: k as i64,
            epoch: -1,
            loss: gate_stats.loss,
            acc: gate_stats.acc,
            routing_acc: None,
            scope: None,
            trainable_params: model.gate.param_count() as u64,
            bank_bytes: counts.bank_bytes as u64,
            wall_ms: gate_t0.elapsed().as_millis() as u64,
            seed: tcfg.seed,
        })?;

        // Evaluate everything seen so far.
        let eval_t0 = Instant::now();
        let seen = &seq.tasks[..=(k as usize)];
        let em = evaluate_cil(&mut model, seen)?;
        emit_eval_records(sink, &em, counts.bank_bytes, eval_t0.elapsed().as_millis() as u64, tcfg.seed)?;
        evals.push(em);

        if let Some(save) = hooks.save_checkpoint.as_mut() {
            save(&model, k)?;
        }
    }

    Ok((model, RunReport { evals, probe_bits, freeze_refs }))
}

/// Emit the eval record set: routed per-task, oracle profile rows, the
/// overall record (with routing accuracy), and the oracle aggregate.
pub fn emit_eval_records(
    sink: &mut dyn MetricsSink,
    em: &EvalMetrics,
    bank_bytes: usize,
    wall_ms: u64,
    seed: u64,
) -> Result<()> {
    let base = MetricsRecord {
        event: EventKind::Eval,
        task: -1,
        epoch: -1,
        loss: 0.0,
        acc: 0.0,
        routing_acc: None,
        scope: None,
        trainable_params: 0,
        bank_bytes: bank_bytes as u64,
        wall_ms,
        seed,
    };
    for &(task, acc) in &em.per_task_routed {
        sink.emit(&MetricsRecord {
            task: task as i64,
            acc,
            routing_acc: Some(em.routing_accuracy),
            scope: Some(EvalScope::PerTask),
            ..base.clone()
        })?;
    }
    for &(task, acc) in &em.per_task_oracle {
        sink.emit(&MetricsRecord {
            task: task as i64,
            acc,
            scope: Some(EvalScope::Profile),
            ..base.clone()
        })?;
    }
    sink.emit(&MetricsRecord {
        acc: em.overall_routed,
        routing_acc: Some(em.routing_accuracy),
        scope: Some(EvalScope::Overall),
        ..base.clone()
    })?;
    sink.emit(&MetricsRecord {
        acc: em.overall_oracle,
        scope: Some(EvalScope::Oracle),
        ..base.clone()
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_splits, synth_train_test, InputKind, SplitSpec, SyntheticSpec};
    use crate::metrics::VecSink;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default();
        cfg.timesteps = 2;
        cfg.embed_dim = 16;
        cfg.num_blocks = 1;
        cfg.num_heads = 2;
        cfg.patch_size = 4;
        cfg.image_h = 8;
        cfg.image_w = 8;
        cfg
    }

    fn tiny_seq(classes: usize, tasks: usize, seed: u64) -> TaskSequence {
        let spec = SyntheticSpec {
            classes,
            kind: InputKind::Image { channels: 1, height: 8, width: 8 },
            margin: 4.0,
            noise_sigma: 0.5,
            samples_per_class: 24,
            seed,
        };
        let (train, test) = synth_train_test(&spec, 12).unwrap();
        make_splits(&train, &test, &SplitSpec::identity(classes, tasks)).unwrap()
    }

    fn quick_tcfg() -> TrainConfig {
        TrainConfig {
            epochs_task0: 8,
            epochs_taskk: 6,
            epochs_gate: 12,
            batch_size: 8,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn trainable_counts_match_formula() {
        let cfg = tiny_cfg();
        let model = {
            let mut m = Model::new(cfg, 2, 3).unwrap();
            m.bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
            m.bank.clone_thresholds(ActiveTask::Base, 1).unwrap();
            let mut rng = SplitMix64::new(4);
            m.heads.add_head(0, &mut rng).unwrap();
            m.heads.add_head(1, &mut rng).unwrap();
            m
        };
        let tcfg = TrainConfig::default();
        let opt = task_k_optimizer(&model, 1, &tcfg, true);
        let counts = count_parameters(&model, Some(&opt)).unwrap();
        let d = model.cfg.embed_dim;
        let c = model.heads.classes_per_task;
        let expected = d * c + c + model.bank.entries_per_task();
        assert_eq!(counts.trainable, expected);
        assert_eq!(counts.bank_bytes, 4 * model.bank.entries_per_task());

        let opt0 = task0_optimizer(&model, &tcfg, true);
        let counts0 = count_parameters(&model, Some(&opt0)).unwrap();
        assert_eq!(
            counts0.trainable,
            model.cfg.backbone_param_count() + d * c + c + model.bank.entries_per_task()
        );

        // Fixed-threshold ablation: head only.
        let opt_fixed = task_k_optimizer(&model, 1, &tcfg, false);
        assert_eq!(
            count_parameters(&model, Some(&opt_fixed)).unwrap().trainable,
            d * c + c
        );
    }

    #[test]
    fn paper_scale_bank_fits_budget() {
        // 16,032 FP32 thresholds per task stay within 64.2 KB.
        let bytes = 16_032 * 4;
        assert_eq!(bytes, 64_128);
        assert!(bytes <= 64_200);
    }

    #[test]
    fn two_task_protocol_freezes_and_routes() {
        let seq = tiny_seq(4, 2, 21);
        let mut sink = VecSink::default();
        let mut hooks = RunHooks::default();
        let (model, report) = run_protocol(
            tiny_cfg(),
            &quick_tcfg(),
            &seq,
            &ProtocolOptions::default(),
            &mut sink,
            &mut hooks,
        )
        .unwrap();

        assert_eq!(report.evals.len(), 2);
        let task_done = sink
            .records
            .iter()
            .filter(|r| r.event == EventKind::TaskDone)
            .count();
        assert_eq!(task_done, 2);

        // Freeze references still verify at the end.
        assert!(freeze_check(&model, &report.freeze_refs).all_pass());

        // Identities hold on the final eval.
        let em = report.final_eval();
        assert!(em.overall_routed <= em.routing_accuracy + 1e-12);
        assert!(em.overall_routed <= em.overall_oracle + 1e-12);
    }

    #[test]
    fn zero_lr_changes_nothing() {
        let seq = tiny_seq(2, 1, 33);
        let tcfg = TrainConfig {
            lr_backbone: 0.0,
            lr_threshold: 0.0,
            lr_head: 0.0,
            lr_gate: 0.0,
            epochs_task0: 2,
            epochs_taskk: 2,
            epochs_gate: 2,
            batch_size: 8,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut model = Model::new(tiny_cfg(), seq.classes_per_task, tcfg.seed).unwrap();
        model.bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
        let mut rng = SplitMix64::new(9);
        model.heads.add_head(0, &mut rng).unwrap();
        model.bank.active_task = ActiveTask::Task(0);
        let before_w = model.heads.weights(0).unwrap().0.data.clone();
        let before_phi = model.bank.layer(0, 0).unwrap().data.clone();
        let before_backbone = model.backbone.get("patch.proj.w").unwrap().data.clone();

        let optimizer = task0_optimizer(&model, &tcfg, true);
        let trainable = optimizer.keys();
        let mut shuffle = SplitMix64::new(1);
        // Norm running stats still update in train mode, so compare params.
        run_task_epochs(
            &mut model,
            seq.task(0).unwrap(),
            &optimizer,
            &trainable,
            2,
            8,
            true,
            &mut shuffle,
            |_, _, _| Ok(()),
        )
        .unwrap();

        assert_eq!(model.heads.weights(0).unwrap().0.data, before_w);
        assert_eq!(model.bank.layer(0, 0).unwrap().data, before_phi);
        assert_eq!(model.backbone.get("patch.proj.w").unwrap().data, before_backbone);
    }

    #[test]
    fn harvest_respects_cap_and_base_flag() {
        let seq = tiny_seq(2, 1, 44);
        let mut model = Model::new(tiny_cfg(), 2, 1).unwrap();
        model.bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
        let mut buffer = FeatureBuffer::new(10);
        harvest_features(&mut model, seq.task(0).unwrap(), &mut buffer).unwrap();
        assert_eq!(buffer.len(), 10);
        assert!(buffer.entries().iter().all(|e| e.base_thresholds && e.task == 0));
    }

    #[test]
    fn gate_width_mismatch_is_config_error() {
        let mut model = Model::new(tiny_cfg(), 2, 1).unwrap();
        let mut buffer = FeatureBuffer::new(4);
        buffer.push(vec![0.0; 16], 0);
        let mut rng = SplitMix64::new(2);
        let err = train_gating(&mut model, &buffer, 1, &quick_tcfg(), &mut rng).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
