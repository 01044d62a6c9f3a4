//! Task-specific classifier heads, the task-routing gate, and the feature
//! buffer that feeds gate training.

use std::collections::{BTreeMap, BTreeSet};

use crate::backbone::head_forward;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Per-task affine heads W_k [D x c], b_k [c]. Heads are Xavier-initialized
/// on creation and immutable once finalized.
pub struct HeadBank {
    pub feature_dim: usize,
    pub classes_per_task: usize,
    heads: BTreeMap<u32, (Tensor, Tensor)>,
    finalized: BTreeSet<u32>,
}

impl HeadBank {
    pub fn new(feature_dim: usize, classes_per_task: usize) -> Self {
        HeadBank { feature_dim, classes_per_task, heads: BTreeMap::new(), finalized: BTreeSet::new() }
    }

    pub fn add_head(&mut self, task: u32, rng: &mut SplitMix64) -> Result<()> {
        if self.finalized.contains(&task) {
            return Err(Error::Immutable(format!("head for task {task} is finalized")));
        }
        let w = Tensor::xavier(self.feature_dim, self.classes_per_task, rng).with_grad();
        let b = Tensor::zeros(vec![self.classes_per_task]).with_grad();
        self.heads.insert(task, (w, b));
        Ok(())
    }

    pub fn weights(&self, task: u32) -> Result<&(Tensor, Tensor)> {
        self.heads
            .get(&task)
            .ok_or_else(|| Error::Lookup(format!("no head for task {task}")))
    }

    pub fn weights_mut(&mut self, task: u32) -> Result<&mut (Tensor, Tensor)> {
        if self.finalized.contains(&task) {
            return Err(Error::Immutable(format!("head for task {task} is finalized")));
        }
        self.heads
            .get_mut(&task)
            .ok_or_else(|| Error::Lookup(format!("no head for task {task}")))
    }

    pub fn finalize(&mut self, task: u32) -> Result<()> {
        if !self.heads.contains_key(&task) {
            return Err(Error::Lookup(format!("cannot finalize missing head {task}")));
        }
        self.finalized.insert(task);
        Ok(())
    }

    pub fn is_finalized(&self, task: u32) -> bool {
        self.finalized.contains(&task)
    }

    pub fn tasks(&self) -> impl Iterator<Item = u32> + '_ {
        self.heads.keys().copied()
    }

    pub fn num_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn params_per_head(&self) -> usize {
        self.feature_dim * self.classes_per_task + self.classes_per_task
    }

    /// Restore a head from checkpoint data.
    pub fn insert_raw(&mut self, task: u32, w: Tensor, b: Tensor) -> Result<()> {
        if w.shape != vec![self.feature_dim, self.classes_per_task]
            || b.shape != vec![self.classes_per_task]
        {
            return Err(Error::Checkpoint(format!(
                "head {task} shape {:?}/{:?} does not match config",
                w.shape, b.shape
            )));
        }
        self.heads.insert(task, (w.with_grad(), b.with_grad()));
        Ok(())
    }
}

/// Two-layer task-routing MLP: logits = relu(f W1 + b1) W2 + b2 with the
/// hidden width pinned at D/4 and one output per task seen. Growing a task
/// preserves prior output units and Xavier-initializes the new one.
pub struct GatingMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GatingMlp {
    pub fn hidden_dim(feature_dim: usize) -> usize {
        feature_dim / 4
    }

    pub fn new(feature_dim: usize, rng: &mut SplitMix64) -> Self {
        let h = Self::hidden_dim(feature_dim);
        GatingMlp {
            w1: Tensor::xavier(feature_dim, h, rng).with_grad(),
            b1: Tensor::zeros(vec![h]).with_grad(),
            w2: Tensor::from_vec(vec![h, 0], vec![]).with_grad(),
            b2: Tensor::from_vec(vec![0], vec![]).with_grad(),
        }
    }

    pub fn tasks_seen(&self) -> usize {
        self.w2.shape[1]
    }

    /// Widen the output layer by one task, keeping existing units bitwise.
    pub fn grow(&mut self, rng: &mut SplitMix64) {
        let h = self.w1.shape[1];
        let old = self.tasks_seen();
        let new = old + 1;
        let a = (6.0 / (h + new) as f64).sqrt() as f32;
        let mut w2 = vec![0.0f32; h * new];
        for r in 0..h {
            for c in 0..old {
                w2[r * new + c] = self.w2.data[r * old + c];
            }
            w2[r * new + old] = rng.uniform_sym(a);
        }
        let mut b2 = vec![0.0f32; new];
        b2[..old].copy_from_slice(&self.b2.data);
        self.w2 = Tensor::from_vec(vec![h, new], w2).with_grad();
        self.b2 = Tensor::from_vec(vec![new], b2).with_grad();
    }

    /// Gate logits for a feature batch on a tape.
    pub fn forward(&self, tape: &mut Tape, features: NodeId) -> Result<NodeId> {
        let w1 = tape.leaf(&self.w1);
        let b1 = tape.leaf(&self.b1);
        let w2 = tape.leaf(&self.w2);
        let b2 = tape.leaf(&self.b2);
        self.forward_bound(tape, features, w1, b1, w2, b2)
    }

    pub fn forward_bound(
        &self,
        tape: &mut Tape,
        features: NodeId,
        w1: NodeId,
        b1: NodeId,
        w2: NodeId,
        b2: NodeId,
    ) -> Result<NodeId> {
        if self.tasks_seen() == 0 {
            return Err(Error::Config("gating MLP has no output units yet".into()));
        }
        let h = head_forward(tape, features, w1, b1)?;
        let a = tape.relu(h)?;
        head_forward(tape, a, w2, b2)
    }

    pub fn param_count(&self) -> usize {
        self.w1.numel() + self.b1.numel() + self.w2.numel() + self.b2.numel()
    }
}

/// One harvested feature: extracted at BASE thresholds, labeled with its
/// task id. The buffer never stores raw inputs.
#[derive(Debug, Clone)]
pub struct FeatureEntry {
    pub feature: Vec<f32>,
    pub task: u32,
    /// Extraction used BASE thresholds (recorded per entry, asserted by the
    /// harvest path).
    pub base_thresholds: bool,
}

/// Capped, append-only store of (feature, task) pairs for gate training.
/// Extraction is local to each task's data; the accumulated buffer spans
/// all tasks seen so far.
pub struct FeatureBuffer {
    pub per_task_cap: usize,
    entries: Vec<FeatureEntry>,
}

impl FeatureBuffer {
    pub fn new(per_task_cap: usize) -> Self {
        FeatureBuffer { per_task_cap, entries: Vec::new() }
    }

    pub fn count_for(&self, task: u32) -> usize {
        self.entries.iter().filter(|e| e.task == task).count()
    }

    /// Append one feature if the task's cap allows it. Returns whether it
    /// was stored.
    pub fn push(&mut self, feature: Vec<f32>, task: u32) -> bool {
        if self.count_for(task) >= self.per_task_cap {
            return false;
        }
        self.entries.push(FeatureEntry { feature, task, base_thresholds: true });
        true
    }

    pub fn entries(&self) -> &[FeatureEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_bank_xavier_and_freeze() {
        let mut rng = SplitMix64::new(3);
        let mut bank = HeadBank::new(64, 2);
        bank.add_head(0, &mut rng).unwrap();
        let (w, b) = bank.weights(0).unwrap();
        let a = (6.0f64 / 66.0).sqrt() as f32;
        assert!(w.data.iter().all(|v| v.abs() <= a));
        assert!(b.data.iter().all(|&v| v == 0.0));
        assert_eq!(bank.params_per_head(), 130);

        bank.finalize(0).unwrap();
        assert!(matches!(bank.weights_mut(0), Err(Error::Immutable(_))));
        assert!(matches!(bank.add_head(0, &mut rng), Err(Error::Immutable(_))));
    }

    #[test]
    fn gate_grows_preserving_old_units() {
        let mut rng = SplitMix64::new(9);
        let mut gate = GatingMlp::new(16, &mut rng);
        assert_eq!(gate.tasks_seen(), 0);
        gate.grow(&mut rng);
        gate.grow(&mut rng);
        assert_eq!(gate.tasks_seen(), 2);
        assert_eq!(gate.w1.shape, vec![16, 4]);

        let w2_before = gate.w2.data.clone();
        let b2_before = gate.b2.data.clone();
        gate.grow(&mut rng);
        assert_eq!(gate.tasks_seen(), 3);
        for r in 0..4 {
            for c in 0..2 {
                assert_eq!(
                    gate.w2.data[r * 3 + c].to_bits(),
                    w2_before[r * 2 + c].to_bits()
                );
            }
        }
        assert_eq!(gate.b2.data[0].to_bits(), b2_before[0].to_bits());
        assert_eq!(gate.b2.data[1].to_bits(), b2_before[1].to_bits());
        assert_eq!(gate.b2.data[2], 0.0);
    }

    #[test]
    fn gate_hidden_width_is_quarter() {
        let mut rng = SplitMix64::new(9);
        let gate = GatingMlp::new(64, &mut rng);
        assert_eq!(gate.w1.shape, vec![64, 16]);
    }

    #[test]
    fn gate_forward_shapes() {
        let mut rng = SplitMix64::new(9);
        let mut gate = GatingMlp::new(16, &mut rng);
        gate.grow(&mut rng);
        gate.grow(&mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(vec![3, 16], vec![0.25; 48]);
        let logits = gate.forward(&mut tape, f).unwrap();
        assert_eq!(tape.shape(logits), &[3, 2]);
    }

    #[test]
    fn buffer_respects_cap_and_append_order() {
        let mut buf = FeatureBuffer::new(2);
        assert!(buf.push(vec![1.0], 0));
        assert!(buf.push(vec![2.0], 0));
        assert!(!buf.push(vec![3.0], 0));
        assert!(buf.push(vec![4.0], 1));
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.count_for(0), 2);
        assert!(buf.entries().iter().all(|e| e.base_thresholds));
        // Harvesting later tasks never rewrites earlier entries.
        assert_eq!(buf.entries()[0].feature, vec![1.0]);
        assert_eq!(buf.entries()[1].feature, vec![2.0]);
    }
}
