//! Gated inference: task prediction from base-threshold features, then
//! classification with the predicted task's thresholds and head; plus the
//! evaluation metrics for class-incremental runs.
//!
//! Two full passes per sample by design: thresholds change the entire spike
//! cascade, so base features cannot be reused for the task pass.

use crate::data::{Dataset, TaskData};
use crate::dtlif::ActiveTask;
use crate::error::{Error, Result};
use crate::model::Model;

/// Argmax with ties broken toward the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone)]
pub struct RoutedPrediction {
    pub predicted_task: u32,
    /// Global class id under the predicted task's label set.
    pub predicted_class: usize,
    pub gate_logits: Vec<f32>,
    pub task_logits: Vec<f32>,
}

/// Predict the task for one sample: base thresholds, fresh state, gate
/// argmax. With a single task seen the gate is bypassed.
pub fn predict_task(model: &mut Model, sample: &[f32], kind: crate::data::InputKind) -> Result<(u32, Vec<f32>)> {
    if model.heads.num_tasks() == 0 {
        return Err(Error::Protocol("no tasks trained yet".into()));
    }
    if model.heads.num_tasks() == 1 {
        return Ok((0, vec![0.0]));
    }
    let f = model.features_at(ActiveTask::Base, &[sample], kind)?;
    let logits = model.gate_logits(&f[0])?;
    Ok((argmax(&logits) as u32, logits))
}

/// Full two-pass inference for one sample; no task oracle consulted.
pub fn classify(
    model: &mut Model,
    sample: &[f32],
    kind: crate::data::InputKind,
    class_map: &[Vec<usize>],
) -> Result<RoutedPrediction> {
    let (k_star, gate_logits) = predict_task(model, sample, kind)?;
    let f = model.features_at(ActiveTask::Task(k_star), &[sample], kind)?;
    let task_logits = model.head_logits(k_star, &f[0])?;
    let local = argmax(&task_logits);
    Ok(RoutedPrediction {
        predicted_task: k_star,
        predicted_class: class_map[k_star as usize][local],
        gate_logits,
        task_logits,
    })
}

/// Integer outcome counts over an evaluation; accuracies derive from these
/// so the decomposition identities hold exactly.
#[derive(Debug, Clone, Default)]
pub struct EvalCounts {
    pub n: usize,
    pub route_correct: usize,
    pub routed_correct: usize,
    pub oracle_correct: usize,
}

#[derive(Debug, Clone)]
pub struct EvalMetrics {
    /// Routed accuracy per task id.
    pub per_task_routed: Vec<(u32, f64)>,
    /// Oracle-routed accuracy per task id.
    pub per_task_oracle: Vec<(u32, f64)>,
    pub routing_accuracy: f64,
    pub overall_routed: f64,
    pub overall_oracle: f64,
    pub counts: EvalCounts,
}

const EVAL_CHUNK: usize = 64;

/// Per-sample evaluation rows for one task's test set.
struct TaskEval {
    routed_task: Vec<u32>,
    routed_global: Vec<usize>,
    oracle_global: Vec<usize>,
    pub oracle_logits: Vec<Vec<f32>>,
}

fn eval_task(model: &mut Model, task: &TaskData, tasks: &[TaskData]) -> Result<TaskEval> {
    let test = &task.test;
    let kind = test.kind;
    let n = test.len();
    let class_map: Vec<Vec<usize>> = tasks.iter().map(|t| t.classes.clone()).collect();

    let mut routed_task = vec![0u32; n];
    let single = model.heads.num_tasks() == 1;
    if single {
        // Alg-2 single-task branch: the gate is bypassed entirely.
        for r in routed_task.iter_mut() {
            *r = 0;
        }
    } else {
        for (start, chunk) in test.samples.chunks(EVAL_CHUNK).enumerate().map(|(i, c)| (i * EVAL_CHUNK, c)) {
            let refs: Vec<&[f32]> = chunk.iter().map(|s| s.as_slice()).collect();
            let base = model.features_at(ActiveTask::Base, &refs, kind)?;
            for (i, f) in base.iter().enumerate() {
                let logits = model.gate_logits(f)?;
                routed_task[start + i] = argmax(&logits) as u32;
            }
        }
    }

    // Oracle pass: every sample through its true task's thresholds and head.
    let mut oracle_global = vec![0usize; n];
    let mut oracle_logits = vec![Vec::new(); n];
    for (start, chunk) in test.samples.chunks(EVAL_CHUNK).enumerate().map(|(i, c)| (i * EVAL_CHUNK, c)) {
        let refs: Vec<&[f32]> = chunk.iter().map(|s| s.as_slice()).collect();
        let feats = model.features_at(ActiveTask::Task(task.id), &refs, kind)?;
        for (i, f) in feats.iter().enumerate() {
            let logits = model.head_logits(task.id, f)?;
            oracle_global[start + i] = task.classes[argmax(&logits)];
            oracle_logits[start + i] = logits;
        }
    }

    // Routed pass: group samples by predicted task, batch each group.
    let mut routed_global = vec![0usize; n];
    for k in tasks.iter().map(|t| t.id) {
        let idx: Vec<usize> = (0..n).filter(|&i| routed_task[i] == k).collect();
        if idx.is_empty() {
            continue;
        }
        if k == task.id {
            // Same computation path as the oracle pass; reuse it so routed
            // and oracle predictions agree bitwise when routing is correct.
            for &i in &idx {
                routed_global[i] = oracle_global[i];
            }
            continue;
        }
        for chunk in idx.chunks(EVAL_CHUNK) {
            let refs: Vec<&[f32]> = chunk.iter().map(|&i| test.samples[i].as_slice()).collect();
            let feats = model.features_at(ActiveTask::Task(k), &refs, kind)?;
            for (slot, f) in chunk.iter().zip(&feats) {
                let logits = model.head_logits(k, f)?;
                routed_global[*slot] = class_map[k as usize][argmax(&logits)];
            }
        }
    }

    Ok(TaskEval { routed_task, routed_global, oracle_global, oracle_logits })
}

/// Evaluate the gated pipeline over all finalized tasks' test sets.
///
/// Asserts the decomposition identities on integer counts:
/// routed <= routing, routed <= oracle, routed >= oracle - misrouted.
pub fn evaluate_cil(model: &mut Model, tasks: &[TaskData]) -> Result<EvalMetrics> {
    let mut counts = EvalCounts::default();
    let mut per_task_routed = Vec::new();
    let mut per_task_oracle = Vec::new();

    for task in tasks {
        let te = eval_task(model, task, tasks)?;
        let n = task.test.len();
        let mut task_routed = 0usize;
        let mut task_oracle = 0usize;
        for i in 0..n {
            let label = task.test.labels[i];
            let route_ok = te.routed_task[i] == task.id;
            let routed_ok = te.routed_global[i] == label;
            let oracle_ok = te.oracle_global[i] == label;
            // In disjoint-label CIL a routed prediction is correct iff the
            // route is correct and the local class is correct.
            if routed_ok && !route_ok {
                return Err(Error::Invariant(
                    "routed prediction correct despite wrong task route".into(),
                ));
            }
            counts.n += 1;
            counts.route_correct += route_ok as usize;
            counts.routed_correct += routed_ok as usize;
            counts.oracle_correct += oracle_ok as usize;
            task_routed += routed_ok as usize;
            task_oracle += oracle_ok as usize;
        }
        per_task_routed.push((task.id, task_routed as f64 / n.max(1) as f64));
        per_task_oracle.push((task.id, task_oracle as f64 / n.max(1) as f64));
    }

    if counts.routed_correct > counts.route_correct {
        return Err(Error::Invariant("overall routed accuracy exceeds routing accuracy".into()));
    }
    if counts.routed_correct > counts.oracle_correct {
        return Err(Error::Invariant("routed accuracy exceeds oracle accuracy".into()));
    }
    let misrouted = counts.n - counts.route_correct;
    if counts.routed_correct + misrouted < counts.oracle_correct {
        return Err(Error::Invariant(
            "routed accuracy below oracle minus misroute bound".into(),
        ));
    }

    let n = counts.n.max(1) as f64;
    Ok(EvalMetrics {
        per_task_routed,
        per_task_oracle,
        routing_accuracy: counts.route_correct as f64 / n,
        overall_routed: counts.routed_correct as f64 / n,
        overall_oracle: counts.oracle_correct as f64 / n,
        counts,
    })
}

/// Oracle-routed logits for a probe batch of one task (freeze diagnostics).
pub fn oracle_probe_logits(model: &mut Model, task: &TaskData, probe: &Dataset) -> Result<Vec<Vec<f32>>> {
    let refs: Vec<&[f32]> = probe.samples.iter().map(|s| s.as_slice()).collect();
    let feats = model.features_at(ActiveTask::Task(task.id), &refs, probe.kind)?;
    feats.iter().map(|f| model.head_logits(task.id, f)).collect()
}
