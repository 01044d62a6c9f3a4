//! Dynamic-threshold leaky integrate-and-fire neurons.
//!
//! Membrane update: V~ = (1 - 1/tau) * V + (1/tau) * I, spike against a
//! per-channel threshold selected by task, soft reset V = V~ - S * phi.
//! Thresholds are the per-task knowledge-retention state: one learnable
//! entry per channel per DTLIF layer, stored in a [`ThresholdBank`] and
//! frozen once the task is finalized.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tape::{NodeId, SurrogateSpec, Tape};
use crate::tensor::Tensor;

/// Clamp range applied to thresholds after each optimizer step. Keeps layers
/// away from degenerate always-fire / never-fire regimes.
pub const PHI_CLAMP: (f32, f32) = (0.01, 10.0);

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtlifConfig {
    /// Membrane time constant; >= 1 so the leak factor (1 - 1/tau) is in [0, 1).
    pub tau: f32,
    /// Base threshold used for fresh tasks and task-agnostic extraction.
    pub phi_init: f32,
    pub surrogate: SurrogateSpec,
}

impl DtlifConfig {
    pub fn new(tau: f32, phi_init: f32, surrogate: SurrogateSpec) -> Result<Self> {
        if !(tau >= 1.0) || !tau.is_finite() {
            return Err(Error::Domain(format!("tau must be >= 1, got {tau}")));
        }
        if !(phi_init > 0.0) || !phi_init.is_finite() {
            return Err(Error::Domain(format!("phi_init must be > 0, got {phi_init}")));
        }
        Ok(DtlifConfig { tau, phi_init, surrogate })
    }

    pub fn leak(&self) -> f32 {
        1.0 - 1.0 / self.tau
    }
}

/// Membrane potentials carried across timesteps within one forward pass.
///
/// By default the carried state is detached (gradients flow through the
/// current timestep only); with `bptt` the state stays on the tape and
/// gradients flow through the soft reset into earlier timesteps.
pub struct DtlifState {
    shape: Vec<usize>,
    v: Vec<f32>,
    /// Tape-resident state for full-BPTT mode; None when detached.
    node: Option<NodeId>,
}

impl DtlifState {
    pub fn new(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        DtlifState { shape, v: vec![0.0; n], node: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn potentials(&self) -> &[f32] {
        &self.v
    }
}

/// Zero all membrane potentials. Idempotent.
pub fn reset_state(state: &mut DtlifState) {
    state.v.fill(0.0);
    state.node = None;
}

/// Which threshold set the bank serves during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveTask {
    /// All thresholds pinned at phi_init (task-agnostic extraction).
    Base,
    Task(u32),
}

/// Per-task, per-channel firing thresholds across all DTLIF layers.
///
/// Layer ids index into `layer_channels`; the per-task entry count is the
/// sum of channel counts over layers. Finalized tasks are immutable.
pub struct ThresholdBank {
    layer_channels: Vec<usize>,
    phi_init: f32,
    per_task: BTreeMap<u32, Vec<Tensor>>,
    finalized: BTreeSet<u32>,
    pub active_task: ActiveTask,
}

impl ThresholdBank {
    pub fn new(layer_channels: Vec<usize>, phi_init: f32) -> Self {
        ThresholdBank {
            layer_channels,
            phi_init,
            per_task: BTreeMap::new(),
            finalized: BTreeSet::new(),
            active_task: ActiveTask::Base,
        }
    }

    pub fn phi_init(&self) -> f32 {
        self.phi_init
    }

    pub fn num_layers(&self) -> usize {
        self.layer_channels.len()
    }

    pub fn layer_channels(&self) -> &[usize] {
        &self.layer_channels
    }

    /// Threshold entries per task: sum of channel counts over all layers.
    pub fn entries_per_task(&self) -> usize {
        self.layer_channels.iter().sum()
    }

    /// Bank bytes per task at 4 bytes per FP32 entry.
    pub fn bytes_per_task(&self) -> usize {
        4 * self.entries_per_task()
    }

    pub fn tasks(&self) -> impl Iterator<Item = u32> + '_ {
        self.per_task.keys().copied()
    }

    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }

    pub fn is_finalized(&self, task: u32) -> bool {
        self.finalized.contains(&task)
    }

    /// Initialize thresholds for `to_task`: constant phi_init when cloning
    /// from BASE, an exact copy when warm-starting from a prior task.
    pub fn clone_thresholds(&mut self, from: ActiveTask, to_task: u32) -> Result<()> {
        if self.finalized.contains(&to_task) {
            return Err(Error::Immutable(format!(
                "task {to_task} thresholds are finalized and cannot be re-initialized"
            )));
        }
        let tensors = match from {
            ActiveTask::Base => self
                .layer_channels
                .iter()
                .map(|&c| Tensor::full(vec![c], self.phi_init).with_grad())
                .collect(),
            ActiveTask::Task(src) => {
                let src_tensors = self.per_task.get(&src).ok_or_else(|| {
                    Error::Lookup(format!("no thresholds stored for task {src}"))
                })?;
                src_tensors.iter().map(|t| t.clone().with_grad()).collect()
            }
        };
        self.per_task.insert(to_task, tensors);
        Ok(())
    }

    pub fn finalize(&mut self, task: u32) -> Result<()> {
        if !self.per_task.contains_key(&task) {
            return Err(Error::Lookup(format!("cannot finalize unknown task {task}")));
        }
        self.finalized.insert(task);
        Ok(())
    }

    pub fn layer(&self, task: u32, layer_id: usize) -> Result<&Tensor> {
        self.per_task
            .get(&task)
            .and_then(|v| v.get(layer_id))
            .ok_or_else(|| Error::Lookup(format!("no thresholds for task {task} layer {layer_id}")))
    }

    pub fn layer_mut(&mut self, task: u32, layer_id: usize) -> Result<&mut Tensor> {
        if self.finalized.contains(&task) {
            return Err(Error::Immutable(format!("task {task} thresholds are finalized")));
        }
        self.per_task
            .get_mut(&task)
            .and_then(|v| v.get_mut(layer_id))
            .ok_or_else(|| Error::Lookup(format!("no thresholds for task {task} layer {layer_id}")))
    }

    /// Threshold data for (active task, layer) as a flat channel vector.
    pub fn active_layer_data(&self, layer_id: usize) -> Result<Vec<f32>> {
        let channels = *self
            .layer_channels
            .get(layer_id)
            .ok_or_else(|| Error::Lookup(format!("unknown DTLIF layer id {layer_id}")))?;
        match self.active_task {
            ActiveTask::Base => Ok(vec![self.phi_init; channels]),
            ActiveTask::Task(k) => Ok(self.layer(k, layer_id)?.data.clone()),
        }
    }

    /// Serialized form for the checkpoint container: task id (u32 LE),
    /// entry count (u32 LE), then the per-layer threshold arrays in layer
    /// order as little-endian f32.
    pub fn serialize_task(&self, task: u32) -> Result<Vec<u8>> {
        let tensors = self
            .per_task
            .get(&task)
            .ok_or_else(|| Error::Lookup(format!("no thresholds stored for task {task}")))?;
        let entries: usize = tensors.iter().map(|t| t.numel()).sum();
        let mut out = Vec::with_capacity(8 + entries * 4);
        out.extend_from_slice(&task.to_le_bytes());
        out.extend_from_slice(&(entries as u32).to_le_bytes());
        for t in tensors {
            out.extend_from_slice(&t.le_bytes());
        }
        Ok(out)
    }

    /// Inverse of [`serialize_task`]; the payload must match this bank's
    /// layer layout.
    pub fn deserialize_task(&mut self, bytes: &[u8]) -> Result<u32> {
        if bytes.len() < 8 {
            return Err(Error::Format { offset: 0, msg: "threshold section too short".into() });
        }
        let task = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let entries = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if entries != self.entries_per_task() {
            return Err(Error::Format {
                offset: 4,
                msg: format!(
                    "threshold entry count {entries} does not match bank layout {}",
                    self.entries_per_task()
                ),
            });
        }
        if bytes.len() != 8 + entries * 4 {
            return Err(Error::Format {
                offset: 8,
                msg: format!("expected {} payload bytes, got {}", 8 + entries * 4, bytes.len()),
            });
        }
        let mut tensors = Vec::with_capacity(self.layer_channels.len());
        let mut off = 8;
        for &c in &self.layer_channels {
            let mut data = Vec::with_capacity(c);
            for _ in 0..c {
                data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            tensors.push(Tensor::from_vec(vec![c], data).with_grad());
        }
        self.per_task.insert(task, tensors);
        Ok(task)
    }
}

// ── tape-level neuron operations ─────────────────────────────────────────

/// Leaky integration for one timestep: returns V~ = (1-1/tau)*V + (1/tau)*I.
///
/// The carried state enters as a constant in detached mode, or as the live
/// node from the previous step in BPTT mode.
pub fn membrane_update(
    tape: &mut Tape,
    state: &DtlifState,
    input_current: NodeId,
    cfg: &DtlifConfig,
) -> Result<NodeId> {
    let in_shape = tape.shape(input_current).to_vec();
    if in_shape != state.shape {
        return Err(Error::ShapeMismatch {
            op: "membrane_update",
            lhs: state.shape.clone(),
            rhs: in_shape,
        });
    }
    let scaled_input = tape.scale(input_current, 1.0 / cfg.tau)?;
    let leak = cfg.leak();
    match state.node {
        Some(v_node) => {
            let leaked = tape.scale(v_node, leak)?;
            tape.add(leaked, scaled_input)
        }
        None => {
            let leaked: Vec<f32> = state.v.iter().map(|&v| v * leak).collect();
            let leaked_node = tape.constant(state.shape.clone(), leaked);
            tape.add(leaked_node, scaled_input)
        }
    }
}

/// Threshold crossing with soft reset: S = H(V~ - phi), V_next = V~ - S*phi.
///
/// `phi` holds one entry per channel (the trailing dimension of `vtilde`).
/// Gradients reach V~ through the surrogate and phi through both the
/// threshold subtraction and the reset product.
pub fn spike_and_reset(
    tape: &mut Tape,
    vtilde: NodeId,
    phi: NodeId,
    cfg: &DtlifConfig,
    relaxed: bool,
) -> Result<(NodeId, NodeId)> {
    if tape.data(phi).iter().any(|&p| p <= 0.0) {
        return Err(Error::Domain("spike threshold must be positive".into()));
    }
    let centered = tape.sub_channel(vtilde, phi)?;
    let spikes = tape.heaviside(centered, cfg.surrogate, relaxed)?;
    let reset_amount = tape.mul_channel(spikes, phi)?;
    let v_next = tape.sub(vtilde, reset_amount)?;
    Ok((spikes, v_next))
}

/// One full neuron step for a layer: integrate, spike against the bank's
/// thresholds for (active task, layer), soft reset, and advance the carried
/// state. Returns the spike tensor.
pub fn dtlif_step(
    tape: &mut Tape,
    state: &mut DtlifState,
    input_current: NodeId,
    bank: &ThresholdBank,
    layer_id: usize,
    cfg: &DtlifConfig,
    bptt: bool,
) -> Result<NodeId> {
    dtlif_step_with_phi_node(tape, state, input_current, None, bank, layer_id, cfg, bptt, false)
}

/// As [`dtlif_step`], but allows the caller to pass a pre-registered
/// threshold node (the trainable leaf during task training).
#[allow(clippy::too_many_arguments)]
pub fn dtlif_step_with_phi_node(
    tape: &mut Tape,
    state: &mut DtlifState,
    input_current: NodeId,
    phi_node: Option<NodeId>,
    bank: &ThresholdBank,
    layer_id: usize,
    cfg: &DtlifConfig,
    bptt: bool,
    relaxed: bool,
) -> Result<NodeId> {
    let phi = match phi_node {
        Some(n) => n,
        None => {
            let data = bank.active_layer_data(layer_id)?;
            let c = data.len();
            tape.constant(vec![c], data)
        }
    };
    let vtilde = membrane_update(tape, state, input_current, cfg)?;
    let (spikes, v_next) = spike_and_reset(tape, vtilde, phi, cfg, relaxed)?;
    state.v.copy_from_slice(tape.data(v_next));
    state.node = if bptt { Some(v_next) } else { None };
    Ok(spikes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(tau: f32) -> DtlifConfig {
        DtlifConfig::new(tau, 0.5, SurrogateSpec::rectangular(0.5)).unwrap()
    }

    /// Independent scalar neuron simulator: plain f32 recurrence, one neuron.
    pub fn scalar_sim(tau: f32, phi: f32, inputs: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let leak = 1.0 - 1.0 / tau;
        let mut v = 0.0f32;
        let mut spikes = Vec::with_capacity(inputs.len());
        let mut potentials = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let vt = leak * v + i / tau;
            let s = if vt - phi >= 0.0 { 1.0 } else { 0.0 };
            v = vt - s * phi;
            spikes.push(s);
            potentials.push(v);
        }
        (spikes, potentials)
    }

    fn run_layer(tau: f32, phi: f32, inputs: &[f32]) -> (Vec<f32>, Vec<f32>) {
        let c = cfg(tau);
        let bank = ThresholdBank::new(vec![1], phi);
        let mut state = DtlifState::new(vec![1, 1]);
        let mut spikes = Vec::new();
        let mut potentials = Vec::new();
        for &i in inputs {
            let mut tape = Tape::new();
            let input = tape.constant(vec![1, 1], vec![i]);
            let s = dtlif_step(&mut tape, &mut state, input, &bank, 0, &c, false).unwrap();
            spikes.push(tape.data(s)[0]);
            potentials.push(state.v[0]);
        }
        (spikes, potentials)
    }

    #[test]
    fn membrane_update_direct_values() {
        let c = cfg(2.0);
        let mut tape = Tape::new();
        let mut state = DtlifState::new(vec![1, 1]);
        state.v[0] = 1.0;
        let i = tape.constant(vec![1, 1], vec![0.5]);
        let vt = membrane_update(&mut tape, &state, i, &c).unwrap();
        assert!((tape.data(vt)[0] - 0.75).abs() < 1e-7);
    }

    #[test]
    fn membrane_update_tau_one_is_memoryless() {
        let c = cfg(1.0);
        let mut tape = Tape::new();
        let mut state = DtlifState::new(vec![1, 1]);
        state.v[0] = 123.0;
        let i = tape.constant(vec![1, 1], vec![0.3]);
        let vt = membrane_update(&mut tape, &state, i, &c).unwrap();
        assert!((tape.data(vt)[0] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn membrane_update_recurrence_matches_scalar_oracle() {
        // tau=4: three silent steps then one 4.0 kick lands V~ at exactly 1.0.
        let (_, pots) = run_layer(4.0, 100.0, &[0.0, 0.0, 0.0, 4.0]);
        assert!((pots[3] - 1.0).abs() < 1e-6);
        let (_, oracle) = scalar_sim(4.0, 100.0, &[0.0, 0.0, 0.0, 4.0]);
        for (a, b) in pots.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn spike_and_reset_cases() {
        let c = cfg(2.0);
        let cases = [
            // (vtilde, phi, spike, v_next)
            (0.75, 0.5, 1.0, 0.25),
            (0.4, 0.5, 0.0, 0.4),
            (1.2, 0.5, 1.0, 0.7),
        ];
        for (vt, phi, s_want, v_want) in cases {
            let mut tape = Tape::new();
            let v = tape.constant(vec![1, 1], vec![vt]);
            let p = tape.constant(vec![1], vec![phi]);
            let (s, vn) = spike_and_reset(&mut tape, v, p, &c, false).unwrap();
            assert_eq!(tape.data(s)[0], s_want);
            assert!((tape.data(vn)[0] - v_want).abs() < 1e-7);
        }
    }

    #[test]
    fn spike_and_reset_rejects_nonpositive_threshold() {
        let c = cfg(2.0);
        let mut tape = Tape::new();
        let v = tape.constant(vec![1, 1], vec![0.5]);
        let p = tape.constant(vec![1], vec![0.0]);
        let err = spike_and_reset(&mut tape, v, p, &c, false).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn dtlif_step_matches_scalar_oracle_on_random_cases() {
        let mut rng = crate::rng::SplitMix64::new(2024);
        for _ in 0..200 {
            let tau = 1.0 + rng.next_f32() * 4.0;
            let phi = 0.1 + rng.next_f32() * 1.5;
            let inputs: Vec<f32> = (0..12).map(|_| rng.uniform_sym(1.5)).collect();
            let (s_impl, v_impl) = run_layer(tau, phi, &inputs);
            let (s_oracle, v_oracle) = scalar_sim(tau, phi, &inputs);
            assert_eq!(s_impl, s_oracle, "spikes diverge at tau={tau} phi={phi}");
            for (a, b) in v_impl.iter().zip(&v_oracle) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn dtlif_step_integration_trace() {
        // tau=2, constant drive 0.6 against phi=0.5: the leaky recurrence
        // crosses at t=2 and resets softly (oracle-derived trace).
        let (spikes, _) = run_layer(2.0, 0.5, &[0.6, 0.6, 0.6, 0.6]);
        let (oracle, _) = scalar_sim(2.0, 0.5, &[0.6, 0.6, 0.6, 0.6]);
        assert_eq!(spikes, oracle);
        assert_eq!(spikes, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_input_stays_silent() {
        let (spikes, pots) = run_layer(2.0, 0.5, &[0.0; 6]);
        assert!(spikes.iter().all(|&s| s == 0.0));
        assert!(pots.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spikes_are_binary_and_soft_reset_identity_holds() {
        let c = cfg(3.0);
        let mut rng = crate::rng::SplitMix64::new(8);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vals: Vec<f32> = (0..16).map(|_| rng.uniform_sym(2.0)).collect();
            let phi_vals: Vec<f32> = (0..4).map(|_| 0.2 + rng.next_f32()).collect();
            let v = tape.constant(vec![4, 4], vals.clone());
            let p = tape.constant(vec![4], phi_vals.clone());
            let (s, vn) = spike_and_reset(&mut tape, v, p, &c, false).unwrap();
            let sd = tape.data(s);
            let vd = tape.data(vn);
            for (i, &spike) in sd.iter().enumerate() {
                assert!(spike == 0.0 || spike == 1.0);
                // V_next is the defining subtraction V~ - S*phi, bitwise.
                let defined = vals[i] - spike * phi_vals[i % 4];
                assert_eq!(vd[i].to_bits(), defined.to_bits());
            }
        }
    }

    #[test]
    fn leak_decay_without_input() {
        let tau = 4.0f32;
        let c = cfg(tau);
        let bank = ThresholdBank::new(vec![1], 100.0);
        let mut state = DtlifState::new(vec![1, 1]);
        state.v[0] = 1.0;
        let n = 6;
        for _ in 0..n {
            let mut tape = Tape::new();
            let i = tape.constant(vec![1, 1], vec![0.0]);
            dtlif_step(&mut tape, &mut state, i, &bank, 0, &c, false).unwrap();
        }
        let expected = (1.0 - 1.0 / tau).powi(n);
        assert!((state.v[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn reset_state_is_idempotent_and_replays_bitwise() {
        let c = cfg(2.0);
        let bank = ThresholdBank::new(vec![2], 0.5);
        let inputs = [0.7f32, 0.2, 0.9];

        let run = |state: &mut DtlifState| -> Vec<u32> {
            let mut bits = Vec::new();
            for &i in &inputs {
                let mut tape = Tape::new();
                let x = tape.constant(vec![1, 2], vec![i, -i]);
                let s = dtlif_step(&mut tape, state, x, &bank, 0, &c, false).unwrap();
                bits.extend(tape.data(s).iter().map(|v| v.to_bits()));
            }
            bits
        };

        let mut fresh = DtlifState::new(vec![1, 2]);
        let reference = run(&mut fresh);

        let mut reused = DtlifState::new(vec![1, 2]);
        reused.v.copy_from_slice(&[0.3, 0.9]);
        reset_state(&mut reused);
        assert!(reused.v.iter().all(|&v| v == 0.0));
        reset_state(&mut reused);
        assert!(reused.v.iter().all(|&v| v == 0.0));
        assert_eq!(run(&mut reused), reference);
    }

    #[test]
    fn threshold_monotonicity_at_tau_one() {
        let mut rng = crate::rng::SplitMix64::new(55);
        for _ in 0..50 {
            let inputs: Vec<f32> = (0..20).map(|_| rng.next_f32() * 1.2).collect();
            let mut last_count = usize::MAX;
            for step in 0..25 {
                let phi = 0.05 + 0.06 * step as f32;
                let (spikes, _) = run_layer(1.0, phi, &inputs);
                let count = spikes.iter().filter(|&&s| s == 1.0).count();
                let (oracle, _) = scalar_sim(1.0, phi, &inputs);
                assert_eq!(count, oracle.iter().filter(|&&s| s == 1.0).count());
                assert!(count <= last_count, "spike count increased with phi");
                last_count = count;
            }
        }
    }

    #[test]
    fn threshold_gradient_sign_inside_window() {
        // Loss = -S rewards spiking; raising phi suppresses the spike, so
        // dL/dphi must be positive while V~ - phi is inside the window.
        let c = cfg(2.0);
        let mut tape = Tape::new();
        let v = tape.constant(vec![1, 1], vec![0.8]);
        let phi_t = Tensor::from_vec(vec![1], vec![0.5]).with_grad();
        let phi = tape.leaf(&phi_t);
        let (s, _) = spike_and_reset(&mut tape, v, phi, &c, false).unwrap();
        let neg = tape.scale(s, -1.0).unwrap();
        let loss = tape.sum_all(neg).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(phi).unwrap()[0];
        assert!(g > 0.0, "dL/dphi = {g}");
    }

    #[test]
    fn clone_thresholds_base_and_copy() {
        let mut bank = ThresholdBank::new(vec![2, 3], 0.5);
        bank.clone_thresholds(ActiveTask::Base, 3).unwrap();
        assert!(bank.layer(3, 0).unwrap().data.iter().all(|&v| v == 0.5));
        assert!(bank.layer(3, 1).unwrap().data.iter().all(|&v| v == 0.5));

        bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
        bank.layer_mut(0, 0).unwrap().data[1] = 0.9;
        bank.clone_thresholds(ActiveTask::Task(0), 1).unwrap();
        assert_eq!(bank.layer(1, 0).unwrap().data, bank.layer(0, 0).unwrap().data);
    }

    #[test]
    fn finalized_task_cannot_be_recloned() {
        let mut bank = ThresholdBank::new(vec![2], 0.5);
        bank.clone_thresholds(ActiveTask::Base, 0).unwrap();
        bank.finalize(0).unwrap();
        let err = bank.clone_thresholds(ActiveTask::Base, 0).unwrap_err();
        assert!(matches!(err, Error::Immutable(_)));
        let err = bank.layer_mut(0, 0).unwrap_err();
        assert!(matches!(err, Error::Immutable(_)));
    }

    #[test]
    fn bank_sizing() {
        let bank = ThresholdBank::new(vec![64, 64, 64], 0.5);
        assert_eq!(bank.entries_per_task(), 192);
        assert_eq!(bank.bytes_per_task(), 768);
    }

    #[test]
    fn task_serialization_round_trip() {
        let mut bank = ThresholdBank::new(vec![3, 2], 0.5);
        bank.clone_thresholds(ActiveTask::Base, 2).unwrap();
        bank.layer_mut(2, 0).unwrap().data.copy_from_slice(&[0.1, 0.2, 0.3]);
        bank.layer_mut(2, 1).unwrap().data.copy_from_slice(&[1.5, 2.5]);
        let bytes = bank.serialize_task(2).unwrap();
        assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 5);

        let mut other = ThresholdBank::new(vec![3, 2], 0.5);
        let task = other.deserialize_task(&bytes).unwrap();
        assert_eq!(task, 2);
        assert_eq!(other.layer(2, 0).unwrap().data, vec![0.1, 0.2, 0.3]);
        assert_eq!(other.layer(2, 1).unwrap().data, vec![1.5, 2.5]);
    }

    #[test]
    fn unknown_layer_is_lookup_error() {
        let bank = ThresholdBank::new(vec![2], 0.5);
        let err = bank.active_layer_data(5).unwrap_err();
        assert!(matches!(err, Error::Lookup(_)));
    }
}
