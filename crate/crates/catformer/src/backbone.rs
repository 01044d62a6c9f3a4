//! Spiking-transformer feature extractor.
//!
//! Direct-coded input frames pass through a spiking patch embedding and a
//! stack of blocks (token mixer + FFN, each residual) over T timesteps; the
//! feature vector is the mean over timesteps and tokens of the final block's
//! spike output. Every linear is bias-free and followed by per-channel
//! normalization and a DTLIF layer, so inter-layer activations stay binary.
//!
//! The token mixer is dispatchable: spiking self-attention (Q Kᵀ V without
//! softmax), an identity pass-through that contributes nothing, or uniform
//! random noise from a seeded stream — the latter two exist for ablations.

use std::collections::BTreeMap;

use crate::dtlif::{dtlif_step_with_phi_node, ActiveTask, DtlifConfig, DtlifState, ThresholdBank};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tape::{BatchStats, BnMode, NodeId, SurrogateSpec, Tape};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MixerMode {
    SpikingAttention,
    Identity,
    Random,
    Full,
}

impl MixerMode {
    pub fn uses_attention(&self) -> bool {
        matches!(self, MixerMode::SpikingAttention | MixerMode::Full)
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spiking_attention" => Ok(MixerMode::SpikingAttention),
            "identity" => Ok(MixerMode::Identity),
            "random" => Ok(MixerMode::Random),
            "full" => Ok(MixerMode::Full),
            other => Err(Error::Config(format!("unknown mixer mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            MixerMode::SpikingAttention => "spiking_attention",
            MixerMode::Identity => "identity",
            MixerMode::Random => "random",
            MixerMode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Simulation timesteps T.
    pub timesteps: usize,
    /// Feature width D; divisible by 4 (gating hidden is D/4) and by heads.
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub mixer_mode: MixerMode,
    /// Seed of the random-mixer stream; recorded so random ablations replay.
    pub mixer_seed: u64,
    pub ffn_trainable: bool,
    pub in_channels: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub tau: f32,
    pub phi_init: f32,
    pub surrogate: SurrogateSpec,
    /// Attention product scale s.
    pub attn_scale: f32,
    /// Carry membrane-state gradients across timesteps.
    pub bptt: bool,
}

impl ModelConfig {
    pub fn desk_default() -> Self {
        ModelConfig {
            timesteps: 4,
            embed_dim: 64,
            num_blocks: 2,
            num_heads: 4,
            patch_size: 4,
            mixer_mode: MixerMode::Full,
            mixer_seed: 0,
            ffn_trainable: true,
            in_channels: 1,
            image_h: 16,
            image_w: 16,
            tau: 2.0,
            phi_init: 0.5,
            surrogate: SurrogateSpec::rectangular(0.5),
            attn_scale: 0.125,
            bptt: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.embed_dim;
        if d == 0 || d % 4 != 0 {
            return Err(Error::Config(format!("embed_dim {d} must be a positive multiple of 4")));
        }
        if self.num_heads == 0 || d % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {d} must be divisible by num_heads {}",
                self.num_heads
            )));
        }
        if self.timesteps == 0 || self.num_blocks == 0 {
            return Err(Error::Config("timesteps and num_blocks must be positive".into()));
        }
        if self.image_h % self.patch_size != 0 || self.image_w % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {}",
                self.image_h, self.image_w, self.patch_size
            )));
        }
        DtlifConfig::new(self.tau, self.phi_init, self.surrogate)?;
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    /// Flattened input dimension of one patch (and of one event-token chunk).
    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }

    pub fn ffn_hidden(&self) -> usize {
        2 * self.embed_dim
    }

    pub fn neuron(&self) -> DtlifConfig {
        DtlifConfig::new(self.tau, self.phi_init, self.surrogate).expect("validated config")
    }

    /// Ordered DTLIF layer registry: (name, channels). Layer ids used by the
    /// threshold bank are indices into this list.
    pub fn dtlif_layers(&self) -> Vec<(String, usize)> {
        let d = self.embed_dim;
        let mut layers = vec![("patch".to_string(), d)];
        for l in 0..self.num_blocks {
            if self.mixer_mode.uses_attention() {
                for part in ["q", "k", "v", "proj"] {
                    layers.push((format!("block{l}.attn.{part}"), d));
                }
            }
            layers.push((format!("block{l}.ffn.hidden"), self.ffn_hidden()));
            layers.push((format!("block{l}.ffn.out"), d));
        }
        layers
    }

    pub fn bank_layer_channels(&self) -> Vec<usize> {
        self.dtlif_layers().into_iter().map(|(_, c)| c).collect()
    }

    /// Analytic backbone parameter count (weights plus norm affines,
    /// excluding running statistics).
    pub fn backbone_param_count(&self) -> usize {
        let d = self.embed_dim;
        let f = self.ffn_hidden();
        let patch = self.patch_dim() * d + self.tokens() * d + 2 * d;
        let attn = if self.mixer_mode.uses_attention() { 4 * (d * d + 2 * d) } else { 0 };
        let ffn = d * f + 2 * f + f * d + 2 * d;
        patch + self.num_blocks * (attn + ffn)
    }
}

/// Backbone weights, norm affines, and norm running statistics, keyed by
/// structured names. Running statistics (`.rmean`/`.rvar`) are state, not
/// trainable parameters, but freeze alongside the weights after task 0.
pub struct BackboneParams {
    tensors: BTreeMap<String, Tensor>,
}

pub fn is_stat_name(name: &str) -> bool {
    name.ends_with(".rmean") || name.ends_with(".rvar")
}

impl BackboneParams {
    pub fn init(cfg: &ModelConfig, rng: &mut SplitMix64) -> Self {
        let mut tensors = BTreeMap::new();
        let d = cfg.embed_dim;
        let add_norm = |tensors: &mut BTreeMap<String, Tensor>, prefix: &str, c: usize| {
            tensors.insert(format!("{prefix}.gamma"), Tensor::full(vec![c], 1.0).with_grad());
            tensors.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c]).with_grad());
            tensors.insert(format!("{prefix}.rmean"), Tensor::zeros(vec![c]));
            tensors.insert(format!("{prefix}.rvar"), Tensor::full(vec![c], 1.0));
        };

        tensors.insert(
            "patch.proj.w".to_string(),
            Tensor::xavier(cfg.patch_dim(), d, rng).with_grad(),
        );
        let pos: Vec<f32> = (0..cfg.tokens() * d).map(|_| rng.uniform_sym(0.5)).collect();
        tensors.insert(
            "patch.pos".to_string(),
            Tensor::from_vec(vec![cfg.tokens(), d], pos).with_grad(),
        );
        add_norm(&mut tensors, "patch.norm", d);

        for l in 0..cfg.num_blocks {
            if cfg.mixer_mode.uses_attention() {
                for part in ["q", "k", "v", "proj"] {
                    tensors.insert(
                        format!("block{l}.attn.{part}.w"),
                        Tensor::xavier(d, d, rng).with_grad(),
                    );
                    add_norm(&mut tensors, &format!("block{l}.attn.{part}.norm"), d);
                }
            }
            tensors.insert(
                format!("block{l}.ffn.fc1.w"),
                Tensor::xavier(d, cfg.ffn_hidden(), rng).with_grad(),
            );
            add_norm(&mut tensors, &format!("block{l}.ffn.norm1"), cfg.ffn_hidden());
            tensors.insert(
                format!("block{l}.ffn.fc2.w"),
                Tensor::xavier(cfg.ffn_hidden(), d, rng).with_grad(),
            );
            add_norm(&mut tensors, &format!("block{l}.ffn.norm2"), d);
        }
        BackboneParams { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("unknown backbone tensor '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("unknown backbone tensor '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    /// Trainable names for the task-0 phase (weights and affines; running
    /// stats excluded; FFN tensors excluded when the config freezes them).
    pub fn trainable_names(&self, cfg: &ModelConfig) -> Vec<String> {
        self.tensors
            .keys()
            .filter(|n| !is_stat_name(n))
            .filter(|n| cfg.ffn_trainable || !n.contains(".ffn."))
            .cloned()
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| !is_stat_name(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Momentum update of one norm layer's running statistics.
    pub fn update_running_stats(&mut self, prefix: &str, stats: &BatchStats) -> Result<()> {
        let rmean = self.get_mut(&format!("{prefix}.rmean"))?;
        for (r, &m) in rmean.data.iter_mut().zip(&stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rvar = self.get_mut(&format!("{prefix}.rvar"))?;
        for (r, &v) in rvar.data.iter_mut().zip(&stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
        }
        Ok(())
    }
}

// ── parameter binding ────────────────────────────────────────────────────

/// Identity of a parameter tensor across the model's stores.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum PKey {
    Backbone(String),
    Bank { task: u32, layer: usize },
    HeadW(u32),
    HeadB(u32),
    GateW1,
    GateB1,
    GateW2,
    GateB2,
}

/// Registers model tensors as tape leaves on demand, once each, recording
/// which node corresponds to which parameter so gradients can be routed
/// back after the backward pass.
///
/// Only keys listed as trainable register with gradient tracking; everything
/// else enters the tape as constant data, which is what enforces the freeze
/// protocol structurally.
pub struct Binder<'a> {
    pub backbone: &'a BackboneParams,
    pub bank: &'a ThresholdBank,
    trainable: &'a [PKey],
    bound: BTreeMap<PKey, NodeId>,
}

impl<'a> Binder<'a> {
    pub fn new(backbone: &'a BackboneParams, bank: &'a ThresholdBank, trainable: &'a [PKey]) -> Self {
        Binder { backbone, bank, trainable, bound: BTreeMap::new() }
    }

    pub fn is_trainable(&self, key: &PKey) -> bool {
        self.trainable.contains(key)
    }

    pub fn bound(&self) -> &BTreeMap<PKey, NodeId> {
        &self.bound
    }

    pub fn into_bound(self) -> BTreeMap<PKey, NodeId> {
        self.bound
    }

    fn bind_tensor(&mut self, tape: &mut Tape, key: PKey, t: &Tensor) -> NodeId {
        if let Some(&id) = self.bound.get(&key) {
            return id;
        }
        let id = if self.is_trainable(&key) {
            let mut copy = t.clone();
            copy.requires_grad = true;
            tape.leaf(&copy)
        } else {
            tape.constant(t.shape.clone(), t.data.clone())
        };
        self.bound.insert(key, id);
        id
    }

    pub fn bind_backbone(&mut self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let t = self.backbone.get(name)?;
        Ok(self.bind_tensor(tape, PKey::Backbone(name.to_string()), t))
    }

    /// Bind the active task's thresholds for a layer. BASE thresholds enter
    /// as constants; task thresholds are leaves (trainable when listed).
    pub fn bind_phi(&mut self, tape: &mut Tape, layer: usize) -> Result<NodeId> {
        match self.bank.active_task {
            ActiveTask::Base => {
                let data = self.bank.active_layer_data(layer)?;
                let c = data.len();
                Ok(tape.constant(vec![c], data))
            }
            ActiveTask::Task(task) => {
                let t = self.bank.layer(task, layer)?;
                Ok(self.bind_tensor(tape, PKey::Bank { task, layer }, t))
            }
        }
    }
}

// ── input encoding ───────────────────────────────────────────────────────

/// Replicate a static input across T timesteps (direct coding). The first
/// DTLIF layer converts the repeated currents to spikes.
pub fn encode_input(x: &[f32], timesteps: usize) -> Result<Vec<Vec<f32>>> {
    if let Some(bad) = x.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("input value {bad} outside [0,1]")));
    }
    Ok(vec![x.to_vec(); timesteps])
}

/// Per-timestep token matrices for one batch, laid out [B*N, patch_dim].
pub struct BatchInputs {
    pub batch: usize,
    per_step: PerStep,
}

enum PerStep {
    /// Static images: one token matrix shared by every timestep.
    Shared(Vec<f32>),
    /// Event streams: one token matrix per timestep.
    Steps(Vec<Vec<f32>>),
}

impl BatchInputs {
    pub fn step(&self, _t: usize) -> &[f32] {
        match &self.per_step {
            PerStep::Shared(m) => m,
            PerStep::Steps(ms) => &ms[_t],
        }
    }
}

/// Patchify a batch of images into token rows. Input samples are flat
/// [C*H*W] in [0,1].
pub fn encode_image_batch(cfg: &ModelConfig, samples: &[&[f32]]) -> Result<BatchInputs> {
    let (c, h, w, p) = (cfg.in_channels, cfg.image_h, cfg.image_w, cfg.patch_size);
    let tokens = cfg.tokens();
    let pdim = cfg.patch_dim();
    let mut m = vec![0.0f32; samples.len() * tokens * pdim];
    for (b, sample) in samples.iter().enumerate() {
        if sample.len() != c * h * w {
            return Err(Error::Data(format!(
                "sample {b} has {} values, expected {}",
                sample.len(),
                c * h * w
            )));
        }
        if let Some(bad) = sample.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("input value {bad} outside [0,1]")));
        }
        for ty in 0..h / p {
            for tx in 0..w / p {
                let tok = ty * (w / p) + tx;
                let row = (b * tokens + tok) * pdim;
                let mut i = 0;
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            let y = ty * p + dy;
                            let x = tx * p + dx;
                            m[row + i] = sample[ch * h * w + y * w + x];
                            i += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(BatchInputs { batch: samples.len(), per_step: PerStep::Shared(m) })
}

/// Tokenize event streams laid out [T, channels] per sample, chunking the
/// channel axis into groups of patch_size^2 so event data bypasses the
/// replication encoding and feeds the first DTLIF layer directly.
pub fn encode_event_batch(cfg: &ModelConfig, samples: &[&[f32]], channels: usize) -> Result<BatchInputs> {
    let pdim = cfg.patch_dim();
    if channels % pdim != 0 {
        return Err(Error::Config(format!(
            "event channels {channels} not divisible by token chunk {pdim}"
        )));
    }
    let tokens = channels / pdim;
    let t_steps = cfg.timesteps;
    let mut steps = vec![vec![0.0f32; samples.len() * tokens * pdim]; t_steps];
    for (b, sample) in samples.iter().enumerate() {
        if sample.len() != t_steps * channels {
            return Err(Error::Data(format!(
                "event sample {b} has {} values, expected {}",
                sample.len(),
                t_steps * channels
            )));
        }
        for (t, step) in steps.iter_mut().enumerate() {
            let frame = &sample[t * channels..(t + 1) * channels];
            step[b * channels..(b + 1) * channels].copy_from_slice(frame);
        }
    }
    Ok(BatchInputs { batch: samples.len(), per_step: PerStep::Steps(steps) })
}

/// Token count implied by a batch encoding (images use the configured grid;
/// events derive it from the channel count).
pub fn batch_tokens(cfg: &ModelConfig, inputs: &BatchInputs) -> usize {
    let rows = inputs.step(0).len() / cfg.patch_dim();
    rows / inputs.batch
}

// ── forward pass ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    /// Normalize with batch statistics and collect running-stat updates
    /// (task-0 training only).
    pub train_norm: bool,
    /// Smooth spike forward for gradient testing; never used in training or
    /// inference paths.
    pub relaxed: bool,
}

pub struct ForwardOut {
    /// Feature node [B, D].
    pub features: NodeId,
    /// Pending running-stat updates in application order (train_norm only).
    pub stat_updates: Vec<(String, BatchStats)>,
}

struct LayerCtx<'a, 'b> {
    tape: &'a mut Tape,
    binder: &'a mut Binder<'b>,
    states: &'a mut Vec<DtlifState>,
    layer_names: &'a [(String, usize)],
    stat_updates: &'a mut Vec<(String, BatchStats)>,
    neuron: DtlifConfig,
    opts: ForwardOpts,
    bptt: bool,
    rows: usize,
}

impl LayerCtx<'_, '_> {
    fn norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gamma = self.binder.bind_backbone(self.tape, &format!("{prefix}.gamma"))?;
        let beta = self.binder.bind_backbone(self.tape, &format!("{prefix}.beta"))?;
        if self.opts.train_norm {
            let (y, stats) = self.tape.batch_norm(x, gamma, beta, BnMode::Train)?;
            self.stat_updates.push((prefix.to_string(), stats.expect("train stats")));
            Ok(y)
        } else {
            let mean = self.binder.backbone.get(&format!("{prefix}.rmean"))?.data.clone();
            let var = self.binder.backbone.get(&format!("{prefix}.rvar"))?.data.clone();
            let (y, _) = self.tape.batch_norm(x, gamma, beta, BnMode::Eval { mean: &mean, var: &var })?;
            Ok(y)
        }
    }

    fn spike(&mut self, layer_id: usize, currents: NodeId) -> Result<NodeId> {
        let phi = self.binder.bind_phi(self.tape, layer_id)?;
        if self.states.len() <= layer_id {
            return Err(Error::Lookup(format!("no state for DTLIF layer {layer_id}")));
        }
        dtlif_step_with_phi_node(
            self.tape,
            &mut self.states[layer_id],
            currents,
            Some(phi),
            self.binder.bank,
            layer_id,
            &self.neuron,
            self.bptt,
            self.opts.relaxed,
        )
    }

    /// linear -> norm -> DTLIF, the standard spiking sub-layer.
    fn linear_norm_spike(
        &mut self,
        weight: &str,
        norm_prefix: &str,
        layer_id: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let w = self.binder.bind_backbone(self.tape, weight)?;
        let h = self.tape.matmul(x, w)?;
        let n = self.norm(norm_prefix, h)?;
        self.spike(layer_id, n)
    }

}

/// Full feature extraction for one batch; returns f(x) as a [B, D] node.
///
/// Deterministic given (inputs, params, bank, mixer stream state); fresh
/// membrane states are created internally, so every call starts reset.
pub fn forward_features(
    tape: &mut Tape,
    binder: &mut Binder,
    cfg: &ModelConfig,
    inputs: &BatchInputs,
    mixer_rng: &mut SplitMix64,
    opts: ForwardOpts,
) -> Result<ForwardOut> {
    let layer_names = cfg.dtlif_layers();
    let tokens = batch_tokens(cfg, inputs);
    if tokens != cfg.tokens() {
        return Err(Error::Config(format!(
            "batch has {tokens} tokens per sample but the model is configured for {}",
            cfg.tokens()
        )));
    }
    let rows = inputs.batch * tokens;
    let mut states: Vec<DtlifState> = layer_names
        .iter()
        .map(|(_, c)| DtlifState::new(vec![rows, *c]))
        .collect();
    let mut stat_updates = Vec::new();

    let layer_index: BTreeMap<&str, usize> = layer_names
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.as_str(), i))
        .collect();
    let idx = |name: &str| -> usize { layer_index[name] };

    let mut feature_sum: Option<NodeId> = None;
    let pdim = cfg.patch_dim();

    for t in 0..cfg.timesteps {
        let mut ctx = LayerCtx {
            tape,
            binder,
            states: &mut states,
            layer_names: &layer_names,
            stat_updates: &mut stat_updates,
            neuron: cfg.neuron(),
            opts,
            bptt: cfg.bptt,
            rows,
        };
        let _ = &ctx.layer_names;
        let _ = ctx.rows;

        // Residual stream: real-valued accumulated pre-threshold currents.
        // Junction DTLIFs quantize the whole stream into the spike tensors
        // that feed the next submodule's linears.
        let x = ctx.tape.constant(vec![rows, pdim], inputs.step(t).to_vec());
        let w = ctx.binder.bind_backbone(ctx.tape, "patch.proj.w")?;
        let h = ctx.tape.matmul(x, w)?;
        let pos = ctx.binder.bind_backbone(ctx.tape, "patch.pos")?;
        let h = ctx.tape.add_tiled(h, pos)?;
        let mut stream = ctx.norm("patch.norm", h)?;
        let mut spikes = ctx.spike(idx("patch"), stream)?;

        for l in 0..cfg.num_blocks {
            match cfg.mixer_mode {
                MixerMode::SpikingAttention | MixerMode::Full => {
                    let mixed = mixer_dispatch(&mut ctx, cfg, l, spikes, mixer_rng, tokens, &idx)?;
                    stream = ctx.tape.add(stream, mixed)?;
                    spikes = ctx.spike(idx(&format!("block{l}.attn.proj")), stream)?;
                }
                MixerMode::Identity => {}
                MixerMode::Random => {
                    let mixed = mixer_dispatch(&mut ctx, cfg, l, spikes, mixer_rng, tokens, &idx)?;
                    stream = ctx.tape.add(stream, mixed)?;
                }
            }

            let h = ctx.linear_norm_spike(
                &format!("block{l}.ffn.fc1.w"),
                &format!("block{l}.ffn.norm1"),
                idx(&format!("block{l}.ffn.hidden")),
                spikes,
            )?;
            let w2 = ctx.binder.bind_backbone(ctx.tape, &format!("block{l}.ffn.fc2.w"))?;
            let c = ctx.tape.matmul(h, w2)?;
            let c = ctx.norm(&format!("block{l}.ffn.norm2"), c)?;
            stream = ctx.tape.add(stream, c)?;
            spikes = ctx.spike(idx(&format!("block{l}.ffn.out")), stream)?;
        }

        let pooled = tape.mean_pool(spikes, tokens)?;
        feature_sum = Some(match feature_sum {
            Some(acc) => tape.add(acc, pooled)?,
            None => pooled,
        });
    }

    let features = tape.scale(feature_sum.expect("timesteps >= 1"), 1.0 / cfg.timesteps as f32)?;
    Ok(ForwardOut { features, stat_updates })
}

/// Token-mixer dispatch: attention modes return the projection currents of
/// spiking self-attention (joined to the stream by the caller), identity
/// returns its input node unchanged, random returns a uniform[0,1) tensor
/// drawn from the seeded stream.
fn mixer_dispatch(
    ctx: &mut LayerCtx,
    cfg: &ModelConfig,
    block: usize,
    spikes: NodeId,
    mixer_rng: &mut SplitMix64,
    tokens: usize,
    idx: &dyn Fn(&str) -> usize,
) -> Result<NodeId> {
    match cfg.mixer_mode {
        MixerMode::SpikingAttention | MixerMode::Full => {
            spiking_self_attention(ctx, cfg, block, spikes, tokens, idx)
        }
        MixerMode::Identity => Ok(spikes),
        MixerMode::Random => {
            let shape = ctx.tape.shape(spikes).to_vec();
            let n: usize = shape.iter().product();
            let noise: Vec<f32> = (0..n).map(|_| mixer_rng.next_f32()).collect();
            Ok(ctx.tape.constant(shape, noise))
        }
    }
}

/// Q, K, V are each linear -> norm -> DTLIF over the input spikes (binary
/// tensors); the mixing product (Q Kᵀ) V is scaled without softmax and
/// projected. Returns the projection currents; the caller joins them with
/// the residual stream ahead of the junction DTLIF.
fn spiking_self_attention(
    ctx: &mut LayerCtx,
    cfg: &ModelConfig,
    block: usize,
    spikes: NodeId,
    tokens: usize,
    idx: &dyn Fn(&str) -> usize,
) -> Result<NodeId> {
    let batch = ctx.tape.shape(spikes)[0] / tokens;
    let q = ctx.linear_norm_spike(
        &format!("block{block}.attn.q.w"),
        &format!("block{block}.attn.q.norm"),
        idx(&format!("block{block}.attn.q")),
        spikes,
    )?;
    let k = ctx.linear_norm_spike(
        &format!("block{block}.attn.k.w"),
        &format!("block{block}.attn.k.norm"),
        idx(&format!("block{block}.attn.k")),
        spikes,
    )?;
    let v = ctx.linear_norm_spike(
        &format!("block{block}.attn.v.w"),
        &format!("block{block}.attn.v.norm"),
        idx(&format!("block{block}.attn.v")),
        spikes,
    )?;
    let mixed = ctx.tape.attention(q, k, v, batch, tokens, cfg.num_heads, cfg.attn_scale)?;
    let w = ctx.binder.bind_backbone(ctx.tape, &format!("block{block}.attn.proj.w"))?;
    let c = ctx.tape.matmul(mixed, w)?;
    ctx.norm(&format!("block{block}.attn.proj.norm"), c)
}

/// Affine task head: logits = f · W + b.
pub fn head_forward(tape: &mut Tape, f: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let logits = tape.matmul(f, w)?;
    tape.add_bias(logits, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::salt;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::desk_default();
        cfg.timesteps = 2;
        cfg.embed_dim = 16;
        cfg.num_blocks = 1;
        cfg.num_heads = 2;
        cfg.patch_size = 4;
        cfg.image_h = 8;
        cfg.image_w = 8;
        cfg.validate().unwrap();
        cfg
    }

    fn forward_once(cfg: &ModelConfig, sample: &[f32], bank: &ThresholdBank) -> Vec<f32> {
        let mut rng = SplitMix64::stream(1, salt::INIT);
        let params = BackboneParams::init(cfg, &mut rng);
        forward_with(cfg, &params, sample, bank)
    }

    fn forward_with(
        cfg: &ModelConfig,
        params: &BackboneParams,
        sample: &[f32],
        bank: &ThresholdBank,
    ) -> Vec<f32> {
        forward_opts(cfg, params, sample, bank, ForwardOpts::default())
    }

    fn forward_opts(
        cfg: &ModelConfig,
        params: &BackboneParams,
        sample: &[f32],
        bank: &ThresholdBank,
        opts: ForwardOpts,
    ) -> Vec<f32> {
        let mut tape = Tape::new();
        let trainable = vec![];
        let mut binder = Binder::new(params, bank, &trainable);
        let inputs = encode_image_batch(cfg, &[sample]).unwrap();
        let mut mixer = SplitMix64::stream(cfg.mixer_seed, salt::MIXER);
        let out = forward_features(&mut tape, &mut binder, cfg, &inputs, &mut mixer, opts).unwrap();
        tape.data(out.features).to_vec()
    }

    #[test]
    fn encode_input_replicates_and_checks_range() {
        let frames = encode_input(&[0.5, 0.25], 4).unwrap();
        assert_eq!(frames.len(), 4);
        assert!(frames.iter().all(|f| f == &vec![0.5, 0.25]));
        let total: f32 = frames.iter().flatten().sum();
        assert!((total - 4.0 * 0.75).abs() < 1e-6);

        let one = encode_input(&[0.1], 1).unwrap();
        assert_eq!(one, vec![vec![0.1]]);

        assert!(matches!(encode_input(&[1.5], 2), Err(Error::Data(_))));
    }

    #[test]
    fn patch_count_and_binary_outputs() {
        let cfg = tiny_cfg();
        assert_eq!(cfg.tokens(), 4);

        let sample = vec![0.8f32; 64];
        let bank = ThresholdBank::new(cfg.bank_layer_channels(), cfg.phi_init);
        let f = forward_once(&cfg, &sample, &bank);
        assert_eq!(f.len(), cfg.embed_dim);
        assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)), "{f:?}");
    }

    #[test]
    fn zero_image_produces_zero_spikes() {
        let cfg = tiny_cfg();
        let sample = vec![0.0f32; 64];
        let mut rng = SplitMix64::stream(1, salt::INIT);
        let mut params = BackboneParams::init(&cfg, &mut rng);
        // Zero the norm shifts so zero input stays zero current.
        for name in params.names().cloned().collect::<Vec<_>>() {
            if name.ends_with(".beta") {
                params.get_mut(&name).unwrap().data.fill(0.0);
            }
        }
        let bank = ThresholdBank::new(cfg.bank_layer_channels(), cfg.phi_init);
        let f = forward_with(&cfg, &params, &sample, &bank);
        assert!(f.iter().all(|&v| v == 0.0), "{f:?}");
    }

    #[test]
    fn forward_is_deterministic_and_pure() {
        let cfg = tiny_cfg();
        let mut rng = SplitMix64::stream(3, salt::INIT);
        let params = BackboneParams::init(&cfg, &mut rng);
        let bank = ThresholdBank::new(cfg.bank_layer_channels(), cfg.phi_init);
        let a: Vec<f32> = (0..64).map(|i| (i % 5) as f32 / 5.0).collect();
        let b: Vec<f32> = (0..64).map(|i| (i % 3) as f32 / 3.0).collect();

        // Batch-statistics mode keeps the untrained net spiking; the stat
        // updates are discarded, so the forward stays pure.
        let opts = ForwardOpts { train_norm: true, relaxed: false };
        let fa1 = forward_opts(&cfg, &params, &a, &bank, opts);
        let fb = forward_opts(&cfg, &params, &b, &bank, opts);
        let fa2 = forward_opts(&cfg, &params, &a, &bank, opts);
        assert_eq!(
            fa1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            fa2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(fa1, fb);
    }

    #[test]
    fn identity_mixer_contributes_nothing() {
        let mut cfg = tiny_cfg();
        cfg.mixer_mode = MixerMode::Identity;
        cfg.validate().unwrap();
        let mut rng = SplitMix64::stream(4, salt::INIT);
        let params = BackboneParams::init(&cfg, &mut rng);
        let bank = ThresholdBank::new(cfg.bank_layer_channels(), cfg.phi_init);
        let sample: Vec<f32> = (0..64).map(|i| ((i * 7) % 10) as f32 / 10.0).collect();
        let via_model = forward_with(&cfg, &params, &sample, &bank);

        // Hand-built FFN-only forward: patch embed then L x (FFN + residual).
        let mut tape = Tape::new();
        let trainable = vec![];
        let mut binder = Binder::new(&params, &bank, &trainable);
        let inputs = encode_image_batch(&cfg, &[&sample]).unwrap();
        let layer_names = cfg.dtlif_layers();
        let tokens = cfg.tokens();
        let mut states: Vec<DtlifState> =
            layer_names.iter().map(|(_, c)| DtlifState::new(vec![tokens, *c])).collect();
        let mut stat_updates = Vec::new();
        let mut feature_sum: Option<NodeId> = None;
        for t in 0..cfg.timesteps {
            let mut ctx = LayerCtx {
                tape: &mut tape,
                binder: &mut binder,
                states: &mut states,
                layer_names: &layer_names,
                stat_updates: &mut stat_updates,
                neuron: cfg.neuron(),
                opts: ForwardOpts::default(),
                bptt: false,
                rows: tokens,
            };
            let x = ctx.tape.constant(vec![tokens, cfg.patch_dim()], inputs.step(t).to_vec());
            let w = ctx.binder.bind_backbone(ctx.tape, "patch.proj.w").unwrap();
            let h = ctx.tape.matmul(x, w).unwrap();
            let pos = ctx.binder.bind_backbone(ctx.tape, "patch.pos").unwrap();
            let h = ctx.tape.add_tiled(h, pos).unwrap();
            let mut stream = ctx.norm("patch.norm", h).unwrap();
            let mut spikes = ctx.spike(0, stream).unwrap();
            for l in 0..cfg.num_blocks {
                let h = ctx
                    .linear_norm_spike(
                        &format!("block{l}.ffn.fc1.w"),
                        &format!("block{l}.ffn.norm1"),
                        1 + l * 2,
                        spikes,
                    )
                    .unwrap();
                let w2 = ctx.binder.bind_backbone(ctx.tape, &format!("block{l}.ffn.fc2.w")).unwrap();
                let c = ctx.tape.matmul(h, w2).unwrap();
                let c = ctx.norm(&format!("block{l}.ffn.norm2"), c).unwrap();
                stream = ctx.tape.add(stream, c).unwrap();
                spikes = ctx.spike(2 + l * 2, stream).unwrap();
            }
            let pooled = tape.mean_pool(spikes, tokens).unwrap();
            feature_sum = Some(match feature_sum {
                Some(acc) => tape.add(acc, pooled).unwrap(),
                None => pooled,
            });
        }
        let f = tape.scale(feature_sum.unwrap(), 1.0 / cfg.timesteps as f32).unwrap();
        let by_hand = tape.data(f).to_vec();
        assert_eq!(
            via_model.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            by_hand.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn random_mixer_is_seeded_and_uniform() {
        let mut cfg = tiny_cfg();
        cfg.mixer_mode = MixerMode::Random;
        cfg.mixer_seed = 77;
        let mut rng = SplitMix64::stream(4, salt::INIT);
        let params = BackboneParams::init(&cfg, &mut rng);
        let bank = ThresholdBank::new(cfg.bank_layer_channels(), cfg.phi_init);
        let sample = vec![0.5f32; 64];

        let run = || {
            let mut tape = Tape::new();
            let trainable = vec![];
            let mut binder = Binder::new(&params, &bank, &trainable);
            let inputs = encode_image_batch(&cfg, &[&sample[..]]).unwrap();
            let mut mixer = SplitMix64::stream(cfg.mixer_seed, salt::MIXER);
            let out = forward_features(
                &mut tape,
                &mut binder,
                &cfg,
                &inputs,
                &mut mixer,
                ForwardOpts::default(),
            )
            .unwrap();
            tape.data(out.features).to_vec()
        };
        assert_eq!(run(), run());

        // Law of large numbers on the raw stream the mixer consumes.
        let mut mixer = SplitMix64::stream(cfg.mixer_seed, salt::MIXER);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| mixer.next_f64()).sum::<f64>() / n as f64;
        assert!((0.45..=0.55).contains(&mean), "mean {mean}");
    }

    #[test]
    fn head_forward_cases() {
        let mut tape = Tape::new();
        let f0 = tape.constant(vec![1, 3], vec![0.0, 0.0, 0.0]);
        let w = tape.constant(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.constant(vec![2], vec![0.5, -0.5]);
        let logits = head_forward(&mut tape, f0, w, b).unwrap();
        assert_eq!(tape.data(logits), &[0.5, -0.5]);

        let mut tape = Tape::new();
        let f = tape.constant(vec![1, 2], vec![0.3, 0.7]);
        let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let zb = tape.constant(vec![2], vec![0.0, 0.0]);
        let logits = head_forward(&mut tape, f, eye, zb).unwrap();
        assert_eq!(tape.data(logits), &[0.3, 0.7]);
    }

    #[test]
    fn parameter_count_formula_matches_enumeration() {
        let mut rng = SplitMix64::new(11);
        for seed in 0..5u64 {
            let mut r = SplitMix64::new(seed + 100);
            let mut cfg = ModelConfig::desk_default();
            cfg.embed_dim = [16usize, 32, 64][r.next_usize(3)];
            cfg.num_heads = [2usize, 4][r.next_usize(2)];
            cfg.num_blocks = 1 + r.next_usize(3);
            cfg.mixer_mode =
                [MixerMode::Full, MixerMode::Identity, MixerMode::Random][r.next_usize(3)];
            cfg.validate().unwrap();
            let params = BackboneParams::init(&cfg, &mut rng);
            assert_eq!(
                cfg.backbone_param_count(),
                params.param_count(),
                "config {cfg:?}"
            );
        }
    }

    #[test]
    fn event_encoding_round_trip() {
        let mut cfg = tiny_cfg();
        cfg.timesteps = 3;
        let channels = cfg.patch_dim() * 2; // two tokens
        let sample: Vec<f32> =
            (0..3 * channels).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let inputs = encode_event_batch(&cfg, &[&sample], channels).unwrap();
        assert_eq!(batch_tokens(&cfg, &inputs), 2);
        for t in 0..3 {
            assert_eq!(inputs.step(t), &sample[t * channels..(t + 1) * channels]);
        }
        let bad = encode_event_batch(&cfg, &[&sample[..10]], channels);
        assert!(bad.is_err());
    }
}
