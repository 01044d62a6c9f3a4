//! The full model: backbone parameters, per-task thresholds, task heads,
//! and the routing gate, with checksum groups for freeze verification.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::backbone::{
    encode_event_batch, encode_image_batch, forward_features, BackboneParams, Binder, ForwardOpts,
    ModelConfig, PKey,
};
use crate::data::InputKind;
use crate::dtlif::{ActiveTask, ThresholdBank};
use crate::error::{Error, Result};
use crate::heads::{GatingMlp, HeadBank};
use crate::rng::{salt, SplitMix64};
use crate::tape::{BatchStats, NodeId, Tape};
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: BackboneParams,
    pub bank: ThresholdBank,
    pub heads: HeadBank,
    pub gate: GatingMlp,
    /// Stream feeding the random token mixer; advances per forward call.
    pub mixer_rng: SplitMix64,
}

/// Output of one tape-building forward pass.
pub struct ForwardResult {
    pub tape: Tape,
    pub features: NodeId,
    /// Parameter-to-node routing for gradient application.
    pub bound: BTreeMap<PKey, NodeId>,
    pub stat_updates: Vec<(String, BatchStats)>,
}

/// Register one tensor on a tape under its parameter key.
pub fn bind_param(
    tape: &mut Tape,
    bound: &mut BTreeMap<PKey, NodeId>,
    key: PKey,
    t: &Tensor,
    trainable: bool,
) -> NodeId {
    if let Some(&id) = bound.get(&key) {
        return id;
    }
    let id = if trainable {
        let mut copy = t.clone();
        copy.requires_grad = true;
        tape.leaf(&copy)
    } else {
        tape.constant(t.shape.clone(), t.data.clone())
    };
    bound.insert(key, id);
    id
}

impl Model {
    pub fn new(cfg: ModelConfig, classes_per_task: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = SplitMix64::stream(seed, salt::INIT);
        let backbone = BackboneParams::init(&cfg, &mut init_rng);
        let bank = ThresholdBank::new(cfg.bank_layer_channels(), cfg.phi_init);
        let heads = HeadBank::new(cfg.embed_dim, classes_per_task);
        let mut gate_rng = SplitMix64::stream(seed, salt::GATE);
        let gate = GatingMlp::new(cfg.embed_dim, &mut gate_rng);
        let mixer_rng = SplitMix64::stream(cfg.mixer_seed, salt::MIXER);
        Ok(Model { cfg, backbone, bank, heads, gate, mixer_rng })
    }

    // ── parameter access by key ─────────────────────────────────────────

    pub fn tensor(&self, key: &PKey) -> Result<&Tensor> {
        match key {
            PKey::Backbone(name) => self.backbone.get(name),
            PKey::Bank { task, layer } => self.bank.layer(*task, *layer),
            PKey::HeadW(k) => Ok(&self.heads.weights(*k)?.0),
            PKey::HeadB(k) => Ok(&self.heads.weights(*k)?.1),
            PKey::GateW1 => Ok(&self.gate.w1),
            PKey::GateB1 => Ok(&self.gate.b1),
            PKey::GateW2 => Ok(&self.gate.w2),
            PKey::GateB2 => Ok(&self.gate.b2),
        }
    }

    pub fn tensor_mut(&mut self, key: &PKey) -> Result<&mut Tensor> {
        match key {
            PKey::Backbone(name) => self.backbone.get_mut(name),
            PKey::Bank { task, layer } => self.bank.layer_mut(*task, *layer),
            PKey::HeadW(k) => Ok(&mut self.heads.weights_mut(*k)?.0),
            PKey::HeadB(k) => Ok(&mut self.heads.weights_mut(*k)?.1),
            PKey::GateW1 => Ok(&mut self.gate.w1),
            PKey::GateB1 => Ok(&mut self.gate.b1),
            PKey::GateW2 => Ok(&mut self.gate.w2),
            PKey::GateB2 => Ok(&mut self.gate.b2),
        }
    }

    /// Every parameter key currently stored in the model.
    pub fn all_keys(&self) -> Vec<PKey> {
        let mut keys: Vec<PKey> = self
            .backbone
            .names()
            .map(|n| PKey::Backbone(n.clone()))
            .collect();
        for task in self.bank.tasks() {
            for layer in 0..self.bank.num_layers() {
                keys.push(PKey::Bank { task, layer });
            }
        }
        for task in self.heads.tasks() {
            keys.push(PKey::HeadW(task));
            keys.push(PKey::HeadB(task));
        }
        keys.extend([PKey::GateW1, PKey::GateB1, PKey::GateW2, PKey::GateB2]);
        keys
    }

    /// Route tape gradients back onto model tensors.
    pub fn apply_tape_grads(&mut self, tape: &Tape, bound: &BTreeMap<PKey, NodeId>) -> Result<()> {
        for (key, node) in bound {
            if let Some(g) = tape.grad(*node) {
                self.tensor_mut(key)?.accumulate_grad(g);
            }
        }
        Ok(())
    }

    /// Hard freeze check: no tensor outside the allowed set may hold a
    /// gradient. Violations are invariant errors, not warnings.
    pub fn assert_grads_only_on(&self, allowed: &[PKey]) -> Result<()> {
        for key in self.all_keys() {
            let t = match self.tensor(&key) {
                Ok(t) => t,
                Err(_) => continue,
            };
            if t.grad.is_some() && !allowed.contains(&key) {
                return Err(Error::Invariant(format!(
                    "gradient detected on frozen tensor {key:?}"
                )));
            }
        }
        Ok(())
    }

    // ── forward passes ──────────────────────────────────────────────────

    /// Build a tape over one batch and return the feature node. Samples are
    /// flat rows of the dataset's input kind; `trainable` keys register with
    /// gradient tracking, everything else enters as constants.
    pub fn forward_batch(
        &mut self,
        samples: &[&[f32]],
        kind: InputKind,
        trainable: &[PKey],
        opts: ForwardOpts,
    ) -> Result<ForwardResult> {
        let inputs = match kind {
            InputKind::Image { .. } => encode_image_batch(&self.cfg, samples)?,
            InputKind::Events { timesteps, channels } => {
                if timesteps != self.cfg.timesteps {
                    return Err(Error::Config(format!(
                        "event data has {timesteps} timesteps, model expects {}",
                        self.cfg.timesteps
                    )));
                }
                encode_event_batch(&self.cfg, samples, channels)?
            }
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.backbone, &self.bank, trainable);
        let out = forward_features(
            &mut tape,
            &mut binder,
            &self.cfg,
            &inputs,
            &mut self.mixer_rng,
            opts,
        )?;
        Ok(ForwardResult {
            tape,
            features: out.features,
            bound: binder.into_bound(),
            stat_updates: out.stat_updates,
        })
    }

    /// Eval-mode feature extraction (no gradients): one [D] row per sample.
    pub fn extract_features(&mut self, samples: &[&[f32]], kind: InputKind) -> Result<Vec<Vec<f32>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let fr = self.forward_batch(samples, kind, &[], ForwardOpts::default())?;
        let d = self.cfg.embed_dim;
        let data = fr.tape.data(fr.features);
        Ok(data.chunks(d).map(|c| c.to_vec()).collect())
    }

    /// Task-head logits for precomputed features (plain data path).
    pub fn head_logits(&self, task: u32, feature: &[f32]) -> Result<Vec<f32>> {
        let (w, b) = self.heads.weights(task)?;
        let (d, c) = (w.shape[0], w.shape[1]);
        if feature.len() != d {
            return Err(Error::ShapeMismatch {
                op: "head_logits",
                lhs: vec![feature.len()],
                rhs: vec![d],
            });
        }
        let mut logits = b.data.clone();
        for (i, &f) in feature.iter().enumerate() {
            if f != 0.0 {
                for (l, &wv) in logits.iter_mut().zip(&w.data[i * c..(i + 1) * c]) {
                    *l += f * wv;
                }
            }
        }
        Ok(logits)
    }

    /// Gate logits for a precomputed feature row.
    pub fn gate_logits(&self, feature: &[f32]) -> Result<Vec<f32>> {
        let mut tape = Tape::new();
        let f = tape.constant(vec![1, feature.len()], feature.to_vec());
        let out = self.gate.forward(&mut tape, f)?;
        Ok(tape.data(out).to_vec())
    }

    /// Extract features for samples with a chosen threshold set, restoring
    /// the previous active task afterward.
    pub fn features_at(
        &mut self,
        active: ActiveTask,
        samples: &[&[f32]],
        kind: InputKind,
    ) -> Result<Vec<Vec<f32>>> {
        let prev = self.bank.active_task;
        self.bank.active_task = active;
        let out = self.extract_features(samples, kind);
        self.bank.active_task = prev;
        out
    }

    // ── checksums ───────────────────────────────────────────────────────

    /// SHA-256 per freeze group: the whole backbone (including norm running
    /// statistics), each task's thresholds, and each task's head.
    pub fn checksum_groups(&self) -> BTreeMap<String, [u8; 32]> {
        let mut groups = BTreeMap::new();

        let mut h = Sha256::new();
        for (name, t) in self.backbone.iter() {
            h.update(name.as_bytes());
            h.update(t.le_bytes());
        }
        groups.insert("backbone".to_string(), h.finalize().into());

        for task in self.bank.tasks() {
            let mut h = Sha256::new();
            h.update(self.bank.serialize_task(task).expect("task present"));
            groups.insert(format!("bank.task{task}"), h.finalize().into());
        }
        for task in self.heads.tasks() {
            let (w, b) = self.heads.weights(task).expect("task present");
            let mut h = Sha256::new();
            h.update(w.le_bytes());
            h.update(b.le_bytes());
            groups.insert(format!("head.task{task}"), h.finalize().into());
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        let mut cfg = ModelConfig::desk_default();
        cfg.timesteps = 2;
        cfg.embed_dim = 16;
        cfg.num_blocks = 1;
        cfg.num_heads = 2;
        cfg.patch_size = 4;
        cfg.image_h = 8;
        cfg.image_w = 8;
        Model::new(cfg, 2, 7).unwrap()
    }

    #[test]
    fn checksum_avalanche_on_tiny_perturbation() {
        let mut model = tiny_model();
        model.bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
        let mut rng = SplitMix64::new(1);
        model.heads.add_head(0, &mut rng).unwrap();

        let before = model.checksum_groups();
        model
            .backbone
            .get_mut("patch.proj.w")
            .unwrap()
            .data[0] += 1e-7;
        let after = model.checksum_groups();
        assert_ne!(before["backbone"], after["backbone"]);
        assert_eq!(before["bank.task0"], after["bank.task0"]);
        assert_eq!(before["head.task0"], after["head.task0"]);
    }

    #[test]
    fn grads_on_frozen_tensor_is_invariant_error() {
        let mut model = tiny_model();
        model
            .backbone
            .get_mut("patch.proj.w")
            .unwrap()
            .accumulate_grad(&vec![1.0; 16 * 16]);
        let err = model.assert_grads_only_on(&[]).unwrap_err();
        assert!(matches!(err, Error::Invariant(_)));
        let key = PKey::Backbone("patch.proj.w".to_string());
        model.assert_grads_only_on(&[key]).unwrap();
    }

    #[test]
    fn base_vs_task_thresholds_change_features() {
        let mut model = tiny_model();
        model.bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
        // Nudge the task thresholds away from base so the cascade differs.
        for layer in 0..model.bank.num_layers() {
            for v in model.bank.layer_mut(0, layer).unwrap().data.iter_mut() {
                *v = 0.25;
            }
        }
        // Make eval-mode stats produce activity: lower rvar so currents pass
        // threshold for this untrained net.
        for name in model.backbone.names().cloned().collect::<Vec<_>>() {
            if name.ends_with(".rvar") {
                model.backbone.get_mut(&name).unwrap().data.fill(0.01);
            }
        }
        let kind = InputKind::Image { channels: 1, height: 8, width: 8 };
        let sample: Vec<f32> = (0..64).map(|i| ((i * 13) % 11) as f32 / 11.0).collect();
        let base = model.features_at(ActiveTask::Base, &[&sample], kind).unwrap();
        let task = model.features_at(ActiveTask::Task(0), &[&sample], kind).unwrap();
        assert_ne!(base[0], task[0]);
    }
}
