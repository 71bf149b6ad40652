//! The fusion network: frozen per-modality encoders, a joint feature
//! sequence, role-specialized transformer experts and a softmax gate.
//!
//! Three flavors share the same encoders:
//!
//! * [`Flavor::FeatureLevel`] runs every expert over the full joint token
//!   sequence (one unique expert per modality plus synergy and redundancy).
//! * [`Flavor::Pooled`] mean-pools each modality to a single position before
//!   the same experts, the classic pooled-vector interaction MoE.
//! * [`Flavor::Dense`] is a single full-visibility expert without a gate.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use thiserror::Error;

use crate::seed::rng_for;
use crate::synthdata::{Sample, NUM_LABELS};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("modality {modality}: token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        modality: usize,
        id: u32,
        vocab: usize,
    },
    #[error("input layout does not match the model: {0}")]
    Layout(String),
    #[error("cannot mask position {position}: {reason}")]
    MaskContract {
        position: usize,
        reason: &'static str,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("unknown expert {0}")]
    UnknownExpert(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flavor {
    FeatureLevel,
    Pooled,
    Dense,
}

impl fmt::Display for Flavor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Flavor::FeatureLevel => "feature",
            Flavor::Pooled => "pooled",
            Flavor::Dense => "dense",
        })
    }
}

impl FromStr for Flavor {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "feature" => Ok(Flavor::FeatureLevel),
            "pooled" => Ok(Flavor::Pooled),
            "dense" => Ok(Flavor::Dense),
            other => Err(format!(
                "unknown model flavor {other:?} (feature|pooled|dense)"
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExpertRole {
    Unique(usize),
    Synergy,
    Redundancy,
    /// The single expert of the dense flavor.
    Fused,
}

impl fmt::Display for ExpertRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExpertRole::Unique(m) => write!(f, "unique{m}"),
            ExpertRole::Synergy => f.write_str("synergy"),
            ExpertRole::Redundancy => f.write_str("redundancy"),
            ExpertRole::Fused => f.write_str("fused"),
        }
    }
}

impl FromStr for ExpertRole {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "synergy" => Ok(ExpertRole::Synergy),
            "redundancy" => Ok(ExpertRole::Redundancy),
            "fused" => Ok(ExpertRole::Fused),
            _ => s
                .strip_prefix("unique")
                .and_then(|m| m.parse().ok())
                .map(ExpertRole::Unique)
                .ok_or_else(|| format!("unknown expert {s:?}")),
        }
    }
}

impl ExpertRole {
    /// Whether this expert may look at key positions of modality `m`.
    fn sees(self, m: usize) -> bool {
        match self {
            ExpertRole::Unique(own) => own == m,
            _ => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub flavor: Flavor,
    /// `(vocab, length)` per modality.
    pub modalities: Vec<(usize, usize)>,
    pub d_raw: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub gate_hidden: usize,
    pub num_labels: usize,
    /// Gate softmax temperature.
    pub temperature: f64,
    pub ln_eps: f64,
    /// Seed of the frozen encoders; shared across training seeds.
    pub encoder_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            flavor: Flavor::FeatureLevel,
            modalities: vec![(64, 16), (64, 16)],
            d_raw: 24,
            d_model: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2,
            gate_hidden: 32,
            num_labels: NUM_LABELS,
            temperature: 1.0,
            ln_eps: 1e-5,
            encoder_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn num_modalities(&self) -> usize {
        self.modalities.len()
    }

    pub fn roles(&self) -> Vec<ExpertRole> {
        match self.flavor {
            Flavor::Dense => vec![ExpertRole::Fused],
            _ => (0..self.num_modalities())
                .map(ExpertRole::Unique)
                .chain([ExpertRole::Synergy, ExpertRole::Redundancy])
                .collect(),
        }
    }

    /// Length of the joint sequence including the fusion CLS position.
    pub fn joint_len(&self) -> usize {
        1 + self.modalities.iter().map(|m| m.1).sum::<usize>()
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::Layout(msg));
        if self.modalities.is_empty() {
            return bad("no modalities".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            ));
        }
        if self.temperature <= 0.0 {
            return bad(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        if self.layers == 0 {
            return bad("at least one fusion layer required".into());
        }
        Ok(())
    }

    pub fn to_echo(&self) -> String {
        let mods: Vec<String> = self
            .modalities
            .iter()
            .map(|(v, l)| format!("{v}x{l}"))
            .collect();
        format!(
            "flavor={}\nmodalities={}\nd_raw={}\nd_model={}\nlayers={}\nheads={}\nmlp_ratio={}\ngate_hidden={}\nnum_labels={}\ntemperature={:?}\nln_eps={:?}\nencoder_seed={}\n",
            self.flavor,
            mods.join(","),
            self.d_raw,
            self.d_model,
            self.layers,
            self.heads,
            self.mlp_ratio,
            self.gate_hidden,
            self.num_labels,
            self.temperature,
            self.ln_eps,
            self.encoder_seed
        )
    }

    pub fn from_echo(text: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::Checkpoint(format!("bad config line {line:?}")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            map.get(k)
                .cloned()
                .ok_or_else(|| ModelError::Checkpoint(format!("config key {k} missing")))
        };
        fn num<T: FromStr>(k: &str, v: String) -> Result<T> {
            v.parse()
                .map_err(|_| ModelError::Checkpoint(format!("bad value {v:?} for {k}")))
        }
        let modalities = get("modalities")?
            .split(',')
            .map(|m| {
                let (v, l) = m
                    .split_once('x')
                    .ok_or_else(|| ModelError::Checkpoint(format!("bad modality {m:?}")))?;
                Ok((num("modalities", v.into())?, num("modalities", l.into())?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            flavor: get("flavor")?.parse().map_err(ModelError::Checkpoint)?,
            modalities,
            d_raw: num("d_raw", get("d_raw")?)?,
            d_model: num("d_model", get("d_model")?)?,
            layers: num("layers", get("layers")?)?,
            heads: num("heads", get("heads")?)?,
            mlp_ratio: num("mlp_ratio", get("mlp_ratio")?)?,
            gate_hidden: num("gate_hidden", get("gate_hidden")?)?,
            num_labels: num("num_labels", get("num_labels")?)?,
            temperature: num("temperature", get("temperature")?)?,
            ln_eps: num("ln_eps", get("ln_eps")?)?,
            encoder_seed: num("encoder_seed", get("encoder_seed")?)?,
        })
    }
}

/// Token ids of one modality with a validity flag per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalTokens {
    pub ids: Vec<u32>,
    pub valid: Vec<bool>,
}

impl ModalTokens {
    pub fn all_valid(ids: Vec<u32>) -> Self {
        let valid = vec![true; ids.len()];
        Self { ids, valid }
    }
}

/// Raw multimodal input for one example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultimodalInput {
    pub modalities: Vec<ModalTokens>,
}

impl From<&Sample> for MultimodalInput {
    fn from(s: &Sample) -> Self {
        Self {
            modalities: vec![
                ModalTokens::all_valid(s.tokens_a.clone()),
                ModalTokens::all_valid(s.tokens_b.clone()),
            ],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Cls,
    Modality(usize),
}

/// Encoded joint sequence: fusion CLS at position 0 followed by the
/// modality blocks in order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSequence {
    pub features: Tensor,
    pub segments: Vec<Segment>,
    pub valid: Vec<bool>,
    /// First joint position of each modality block.
    pub offsets: Vec<usize>,
    pub lens: Vec<usize>,
}

impl JointSequence {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn d_model(&self) -> usize {
        self.features.last_dim()
    }

    pub fn num_modalities(&self) -> usize {
        self.offsets.len()
    }

    pub fn modality_range(&self, m: usize) -> std::ops::Range<usize> {
        self.offsets[m]..self.offsets[m] + self.lens[m]
    }

    pub fn joint_index(&self, m: usize, local: usize) -> usize {
        self.offsets[m] + local
    }

    /// `(modality, local position)` of a non-CLS joint position.
    pub fn local(&self, pos: usize) -> Option<(usize, usize)> {
        match self.segments.get(pos)? {
            Segment::Cls => None,
            Segment::Modality(m) => Some((*m, pos - self.offsets[*m])),
        }
    }

    /// Valid non-CLS positions of modality `m`.
    pub fn valid_positions(&self, m: usize) -> Vec<usize> {
        self.modality_range(m).filter(|&p| self.valid[p]).collect()
    }

    pub fn same_layout(&self, other: &JointSequence) -> bool {
        self.segments == other.segments && self.offsets == other.offsets
    }
}

/// Zeroes the listed feature vectors; shapes, segments and validity are kept.
pub fn mask_features(seq: &JointSequence, positions: &[usize]) -> Result<JointSequence> {
    let mut out = seq.clone();
    let d = seq.d_model();
    for &p in positions {
        match seq.segments.get(p) {
            None => {
                return Err(ModelError::MaskContract {
                    position: p,
                    reason: "out of range",
                })
            }
            Some(Segment::Cls) => {
                return Err(ModelError::MaskContract {
                    position: p,
                    reason: "the CLS position is always active",
                })
            }
            Some(Segment::Modality(_)) if !seq.valid[p] => {
                return Err(ModelError::MaskContract {
                    position: p,
                    reason: "padding position",
                })
            }
            _ => out.features.data_mut()[p * d..(p + 1) * d].fill(0.0),
        }
    }
    Ok(out)
}

/// Zeroes every valid position of modality `m`.
pub fn ablate_modality(seq: &JointSequence, m: usize) -> JointSequence {
    let positions = seq.valid_positions(m);
    mask_features(seq, &positions).expect("valid positions are maskable")
}

fn uniform(rng: &mut impl Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Frozen token encoders: embedding table followed by a linear projection
/// into the shared model width, plus the fusion CLS vector.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBank {
    embeddings: Vec<Tensor>,
    projections: Vec<Tensor>,
    cls: Tensor,
    /// `embedding · projection`, one row per token id.
    projected: Vec<Tensor>,
}

impl EncoderBank {
    pub fn new(config: &ModelConfig) -> Self {
        let mut rng = rng_for(config.encoder_seed, &[0xE4C0]);
        let unit = 3f64.sqrt();
        let mut embeddings = Vec::new();
        let mut projections = Vec::new();
        for &(vocab, _) in &config.modalities {
            embeddings.push(
                Tensor::new(
                    vec![vocab, config.d_raw],
                    uniform(&mut rng, vocab * config.d_raw, unit),
                )
                .expect("shape"),
            );
            projections.push(
                Tensor::new(
                    vec![config.d_raw, config.d_model],
                    uniform(
                        &mut rng,
                        config.d_raw * config.d_model,
                        unit / (config.d_raw as f64).sqrt(),
                    ),
                )
                .expect("shape"),
            );
        }
        let cls = Tensor::new(
            vec![config.d_model],
            uniform(&mut rng, config.d_model, unit),
        )
        .expect("shape");
        Self::from_parts(embeddings, projections, cls).expect("consistent shapes")
    }

    fn from_parts(embeddings: Vec<Tensor>, projections: Vec<Tensor>, cls: Tensor) -> Result<Self> {
        let projected = embeddings
            .iter()
            .zip(&projections)
            .map(|(e, p)| crate::tensor::matmul(e, p))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self {
            embeddings,
            projections,
            cls,
            projected,
        })
    }

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("encoder.cls".to_string(), &self.cls)];
        for (m, (e, p)) in self.embeddings.iter().zip(&self.projections).enumerate() {
            out.push((format!("encoder.{m}.embedding"), e));
            out.push((format!("encoder.{m}.projection"), p));
        }
        out
    }

    /// FNV-1a over the bit patterns of every encoder parameter.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (_, t) in self.named() {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn encode(&self, input: &MultimodalInput, config: &ModelConfig) -> Result<JointSequence> {
        if input.modalities.len() != config.num_modalities() {
            return Err(ModelError::Layout(format!(
                "expected {} modalities, got {}",
                config.num_modalities(),
                input.modalities.len()
            )));
        }
        let d = config.d_model;
        let total = config.joint_len();
        let mut features = vec![0.0; total * d];
        let mut segments = vec![Segment::Cls];
        let mut valid = vec![true];
        let mut offsets = Vec::new();
        let mut lens = Vec::new();
        features[..d].copy_from_slice(self.cls.data());
        let mut pos = 1;
        for (m, (tokens, &(vocab, len))) in
            input.modalities.iter().zip(&config.modalities).enumerate()
        {
            if tokens.ids.len() != len || tokens.valid.len() != len {
                return Err(ModelError::Layout(format!(
                    "modality {m}: expected {len} positions, got {}",
                    tokens.ids.len()
                )));
            }
            offsets.push(pos);
            lens.push(len);
            for (&id, &ok) in tokens.ids.iter().zip(&tokens.valid) {
                segments.push(Segment::Modality(m));
                valid.push(ok);
                if ok {
                    if id as usize >= vocab {
                        return Err(ModelError::TokenOutOfRange {
                            modality: m,
                            id,
                            vocab,
                        });
                    }
                    features[pos * d..(pos + 1) * d]
                        .copy_from_slice(self.projected[m].row(id as usize));
                }
                pos += 1;
            }
        }
        Ok(JointSequence {
            features: Tensor::new(vec![total, d], features)?,
            segments,
            valid,
            offsets,
            lens,
        })
    }
}

/// Ordered, named parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    fn add(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for t in &self.tensors {
            for v in t.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerIdx {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    w1: (usize, usize),
    w2: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
struct ExpertIdx {
    layers: Vec<LayerIdx>,
    ln_f: (usize, usize),
    head: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
struct GateIdx {
    w1: (usize, usize),
    w2: (usize, usize),
}

/// Per-expert recorded attention, `[layers, heads, seq, seq]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub layers: usize,
    pub heads: usize,
    pub seq: usize,
    pub probs: Vec<f64>,
}

impl AttentionStack {
    pub fn head(&self, layer: usize, head: usize) -> &[f64] {
        let n = self.seq * self.seq;
        &self.probs[(layer * self.heads + head) * n..][..n]
    }
}

/// Outputs of one forward pass for one example.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertBundle {
    pub roles: Vec<ExpertRole>,
    /// One logit vector per expert.
    pub expert_logits: Vec<Vec<f64>>,
    pub gate: Vec<f64>,
    pub mixture: Vec<f64>,
    /// Empty unless attention was recorded.
    pub attention: Vec<AttentionStack>,
}

/// Handles produced by a recorded forward pass over a batch.
#[derive(Debug)]
pub struct TapeForward {
    /// `(expert index, logits [batch × labels])`.
    pub expert_logits: Vec<(usize, Var)>,
    pub gate: Option<Var>,
    pub mixture: Option<Var>,
    /// Attention nodes per computed expert, one per layer.
    pub attention: Vec<Vec<Var>>,
    pub batch: usize,
    /// Sequence length seen by the experts (3 for the pooled flavor).
    pub expert_seq: usize,
}

/// Which parts of the network a tape forward should build.
#[derive(Clone, Debug)]
pub struct ForwardPlan {
    pub experts: Vec<usize>,
    pub gate: bool,
    /// Compute every query row of the last layer. Only the CLS row reaches
    /// the heads, so this is needed only to record full attention maps.
    pub full_attention: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    config: ModelConfig,
    encoders: EncoderBank,
    params: ParamSet,
    experts: Vec<ExpertIdx>,
    gate: Option<GateIdx>,
}

impl FusionModel {
    /// Builds a model with frozen encoders from `config.encoder_seed` and
    /// trainable layers initialized from `init_seed`.
    pub fn new(config: ModelConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let encoders = EncoderBank::new(&config);
        let mut rng = rng_for(init_seed, &[0x1417]);
        let mut params = ParamSet::default();
        let d = config.d_model;
        let dense = |params: &mut ParamSet,
                     rng: &mut _,
                     name: &str,
                     fan_in: usize,
                     fan_out: usize,
                     gain: f64| {
            let bound = gain * (3.0 / fan_in as f64).sqrt();
            let w = params.add(
                format!("{name}.weight"),
                Tensor::new(vec![fan_in, fan_out], uniform(rng, fan_in * fan_out, bound)).unwrap(),
            );
            let b = params.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
            (w, b)
        };
        let norm = |params: &mut ParamSet, name: &str| {
            let g = params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0));
            let b = params.add(format!("{name}.bias"), Tensor::zeros(&[d]));
            (g, b)
        };
        let roles = config.roles();
        let mut experts = Vec::new();
        for (e, role) in roles.iter().enumerate() {
            let p = format!("expert.{e}.{role}");
            let mut layers = Vec::new();
            for l in 0..config.layers {
                let lp = format!("{p}.layer{l}");
                let hidden = config.mlp_ratio * d;
                layers.push(LayerIdx {
                    ln1: norm(&mut params, &format!("{lp}.ln1")),
                    wq: dense(&mut params, &mut rng, &format!("{lp}.attn.q"), d, d, 1.0),
                    wk: dense(&mut params, &mut rng, &format!("{lp}.attn.k"), d, d, 1.0),
                    wv: dense(&mut params, &mut rng, &format!("{lp}.attn.v"), d, d, 1.0),
                    wo: dense(&mut params, &mut rng, &format!("{lp}.attn.out"), d, d, 0.5),
                    ln2: norm(&mut params, &format!("{lp}.ln2")),
                    w1: dense(
                        &mut params,
                        &mut rng,
                        &format!("{lp}.mlp.fc1"),
                        d,
                        hidden,
                        1.0,
                    ),
                    w2: dense(
                        &mut params,
                        &mut rng,
                        &format!("{lp}.mlp.fc2"),
                        hidden,
                        d,
                        0.5,
                    ),
                });
            }
            let ln_f = norm(&mut params, &format!("{p}.ln_f"));
            let head = dense(
                &mut params,
                &mut rng,
                &format!("{p}.head"),
                d,
                config.num_labels,
                0.5,
            );
            experts.push(ExpertIdx { layers, ln_f, head });
        }
        let gate = (config.flavor != Flavor::Dense).then(|| {
            let m = config.num_modalities();
            GateIdx {
                w1: dense(
                    &mut params,
                    &mut rng,
                    "gate.fc1",
                    m * d,
                    config.gate_hidden,
                    1.0,
                ),
                w2: dense(
                    &mut params,
                    &mut rng,
                    "gate.fc2",
                    config.gate_hidden,
                    roles.len(),
                    0.5,
                ),
            }
        });
        Ok(Self {
            config,
            encoders,
            params,
            experts,
            gate,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoders(&self) -> &EncoderBank {
        &self.encoders
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn roles(&self) -> Vec<ExpertRole> {
        self.config.roles()
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn expert_index(&self, role: ExpertRole) -> Option<usize> {
        self.roles().iter().position(|&r| r == role)
    }

    pub fn encode(&self, input: &MultimodalInput) -> Result<JointSequence> {
        self.encoders.encode(input, &self.config)
    }

    pub fn encode_sample(&self, sample: &Sample) -> Result<JointSequence> {
        self.encode(&MultimodalInput::from(sample))
    }

    /// Expert input layout for a batch: features as `[batch·seq, d]` plus
    /// per-position segments and validity.
    fn expert_inputs(
        &self,
        tape: &mut Tape,
        feats: Var,
        seqs: &[&JointSequence],
    ) -> Result<(Var, Vec<Segment>, Vec<bool>, usize)> {
        let first = seqs[0];
        match self.config.flavor {
            Flavor::Pooled => {
                let m_count = first.num_modalities();
                let seq = 1 + m_count;
                let t = first.len();
                let mut entries = Vec::new();
                let mut valid = Vec::with_capacity(seqs.len() * seq);
                for (b, s) in seqs.iter().enumerate() {
                    entries.push((b * seq, b * t, 1.0));
                    valid.push(true);
                    for m in 0..m_count {
                        let pos = s.valid_positions(m);
                        let w = 1.0 / pos.len().max(1) as f64;
                        for p in &pos {
                            entries.push((b * seq + 1 + m, b * t + p, w));
                        }
                        valid.push(!pos.is_empty());
                    }
                }
                let pooled = tape.row_map(feats, seqs.len() * seq, &entries)?;
                let segments = std::iter::once(Segment::Cls)
                    .chain((0..m_count).map(Segment::Modality))
                    .collect();
                Ok((pooled, segments, valid, seq))
            }
            _ => {
                let valid = seqs.iter().flat_map(|s| s.valid.iter().copied()).collect();
                Ok((feats, first.segments.clone(), valid, first.len()))
            }
        }
    }

    /// Puts every trainable parameter on `tape`, in [`ParamSet`] order.
    pub fn param_leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone(), requires_grad))
            .collect()
    }

    /// Records a forward pass over `seqs` (which must share one layout) on
    /// `tape`, reading parameters from `param_vars`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        param_vars: &[Var],
        feats: Var,
        seqs: &[&JointSequence],
        plan: &ForwardPlan,
    ) -> Result<TapeForward> {
        let Some(first) = seqs.first() else {
            return Err(ModelError::Layout("empty batch".into()));
        };
        if seqs.iter().any(|s| !s.same_layout(first)) {
            return Err(ModelError::Layout("batch mixes sequence layouts".into()));
        }
        if first.num_modalities() != self.config.num_modalities()
            || first.d_model() != self.config.d_model
        {
            return Err(ModelError::Layout(
                "sequence was encoded for another model".into(),
            ));
        }
        if param_vars.len() != self.params.len() {
            return Err(ModelError::Layout("parameter handle count mismatch".into()));
        }
        let batch = seqs.len();
        let (x_in, segments, valid, seq) = self.expert_inputs(tape, feats, seqs)?;

        let roles = self.roles();
        let mut expert_logits = Vec::new();
        let mut attention = Vec::new();
        for &e in &plan.experts {
            let idx = self.experts.get(e).ok_or(ModelError::UnknownExpert(e))?;
            let role = roles[e];
            let sees = |seg: Segment| match seg {
                Segment::Cls => true,
                Segment::Modality(m) => role.sees(m),
            };
            // Without recorded maps, hidden positions can be dropped outright:
            // no visible query ever reads them.
            let keep: Vec<usize> = if plan.full_attention {
                (0..seq).collect()
            } else {
                (0..seq).filter(|&j| sees(segments[j])).collect()
            };
            let x_e = if keep.len() == seq {
                x_in
            } else {
                let n = keep.len();
                let mut entries = Vec::with_capacity(batch * n);
                for b in 0..batch {
                    entries.extend(
                        keep.iter()
                            .enumerate()
                            .map(|(ii, &j)| (b * n + ii, b * seq + j, 1.0)),
                    );
                }
                tape.row_map(x_in, batch * keep.len(), &entries)?
            };
            let seq_e = keep.len();
            let mut mask = vec![false; batch * seq_e * seq_e];
            for b in 0..batch {
                for i in 0..seq_e {
                    for (jj, &j) in keep.iter().enumerate() {
                        mask[(b * seq_e + i) * seq_e + jj] =
                            sees(segments[j]) && valid[b * seq + j];
                    }
                }
            }
            let (logits, attn) = self.expert_forward(
                tape,
                param_vars,
                idx,
                x_e,
                (batch, seq_e),
                &mask,
                plan.full_attention,
            )?;
            expert_logits.push((e, logits));
            attention.push(attn);
        }

        let gate = if plan.gate {
            Some(self.gate_forward(tape, param_vars, feats, seqs)?)
        } else {
            None
        };
        let mixture = match (gate, self.config.flavor) {
            (_, Flavor::Dense) if expert_logits.len() == 1 => Some(expert_logits[0].1),
            (Some(g), _)
                if plan.experts.len() == self.num_experts()
                    && plan.experts.iter().enumerate().all(|(i, &e)| i == e) =>
            {
                let vars: Vec<Var> = expert_logits.iter().map(|p| p.1).collect();
                Some(tape.mixture(g, &vars)?)
            }
            _ => None,
        };
        Ok(TapeForward {
            expert_logits,
            gate,
            mixture,
            attention,
            batch,
            expert_seq: seq,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn expert_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        idx: &ExpertIdx,
        x_in: Var,
        (batch, seq): (usize, usize),
        mask: &[bool],
        full_attention: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let eps = self.config.ln_eps;
        let heads = self.config.heads;
        let linear = |tape: &mut Tape, x: Var, (w, b): (usize, usize)| -> Result<Var> {
            Ok(tape.linear(x, p[w], p[b])?)
        };
        let cls_rows: Vec<_> = (0..batch).map(|b| (b, b * seq, 1.0)).collect();
        let mut x = x_in;
        let mut attn_nodes = Vec::new();
        let last = idx.layers.len() - 1;
        for (l, layer) in idx.layers.iter().enumerate() {
            let h = tape.layer_norm(x, p[layer.ln1.0], p[layer.ln1.1], eps)?;
            let k = linear(tape, h, layer.wk)?;
            let v = linear(tape, h, layer.wv)?;
            let a = if l == last && !full_attention {
                let h_cls = tape.row_map(h, batch, &cls_rows)?;
                let q = linear(tape, h_cls, layer.wq)?;
                let cls_mask: Vec<bool> = (0..batch)
                    .flat_map(|b| mask[b * seq * seq..][..seq].iter().copied())
                    .collect();
                x = tape.row_map(x, batch, &cls_rows)?;
                tape.cross_attention(q, k, v, batch, 1, seq, heads, &cls_mask)?
            } else {
                let q = linear(tape, h, layer.wq)?;
                tape.attention(q, k, v, batch, seq, heads, mask)?
            };
            attn_nodes.push(a);
            let o = linear(tape, a, layer.wo)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, p[layer.ln2.0], p[layer.ln2.1], eps)?;
            let h = linear(tape, h, layer.w1)?;
            let h = tape.gelu(h)?;
            let h = linear(tape, h, layer.w2)?;
            x = tape.add(x, h)?;
        }
        let cls = if full_attention {
            tape.row_map(x, batch, &cls_rows)?
        } else {
            x
        };
        let cls = tape.layer_norm(cls, p[idx.ln_f.0], p[idx.ln_f.1], eps)?;
        let logits = linear(tape, cls, idx.head)?;
        Ok((logits, attn_nodes))
    }

    fn gate_forward(
        &self,
        tape: &mut Tape,
        p: &[Var],
        feats: Var,
        seqs: &[&JointSequence],
    ) -> Result<Var> {
        let gate = self
            .gate
            .as_ref()
            .ok_or_else(|| ModelError::Layout("dense flavor has no gate".into()))?;
        let t = seqs[0].len();
        let mut pooled = Vec::new();
        for m in 0..self.config.num_modalities() {
            let mut entries = Vec::new();
            for (b, s) in seqs.iter().enumerate() {
                let pos = s.valid_positions(m);
                let w = 1.0 / pos.len().max(1) as f64;
                entries.extend(pos.iter().map(|&q| (b, b * t + q, w)));
            }
            pooled.push(tape.row_map(feats, seqs.len(), &entries)?);
        }
        let x = tape.concat_cols(&pooled)?;
        let h = tape.linear(x, p[gate.w1.0], p[gate.w1.1])?;
        let h = tape.gelu(h)?;
        let h = tape.linear(h, p[gate.w2.0], p[gate.w2.1])?;
        let h = tape.scale(h, 1.0 / self.config.temperature)?;
        let all = vec![true; seqs.len() * self.num_experts()];
        Ok(tape.softmax_rows(h, &all)?)
    }

    /// Stacks sequence features into one `[batch·seq, d]` tensor.
    pub fn stack_features(seqs: &[&JointSequence]) -> Tensor {
        let d = seqs[0].d_model();
        let t = seqs[0].len();
        let mut data = Vec::with_capacity(seqs.len() * t * d);
        for s in seqs {
            data.extend_from_slice(s.features.data());
        }
        Tensor::new(vec![seqs.len() * t, d], data).expect("uniform layout")
    }

    fn all_experts_plan(&self) -> ForwardPlan {
        ForwardPlan {
            experts: (0..self.num_experts()).collect(),
            gate: self.gate.is_some(),
            full_attention: false,
        }
    }

    /// Full forward for a batch, with recorded attention.
    pub fn forward_batch(&self, seqs: &[&JointSequence]) -> Result<Vec<ExpertBundle>> {
        self.forward_batch_inner(seqs, None)
    }

    pub fn forward(&self, seq: &JointSequence) -> Result<ExpertBundle> {
        Ok(self.forward_batch(&[seq])?.remove(0))
    }

    /// Forward with externally fixed gate weights (one per expert).
    pub fn forward_with_gate(&self, seq: &JointSequence, weights: &[f64]) -> Result<ExpertBundle> {
        if weights.len() != self.num_experts() {
            return Err(ModelError::Layout(format!(
                "{} gate weights for {} experts",
                weights.len(),
                self.num_experts()
            )));
        }
        Ok(self.forward_batch_inner(&[seq], Some(weights))?.remove(0))
    }

    fn forward_batch_inner(
        &self,
        seqs: &[&JointSequence],
        forced_gate: Option<&[f64]>,
    ) -> Result<Vec<ExpertBundle>> {
        let mut tape = Tape::new();
        let params = self.param_leaves(&mut tape, false);
        let feats = tape.constant(Self::stack_features(seqs));
        let mut plan = self.all_experts_plan();
        plan.gate &= forced_gate.is_none();
        plan.full_attention = true;
        let fwd = self.forward_on_tape(&mut tape, &params, feats, seqs, &plan)?;
        let batch = seqs.len();
        let c = self.config.num_labels;
        let e_count = self.num_experts();
        let gate: Vec<f64> = match (forced_gate, fwd.gate) {
            (Some(w), _) => w.iter().copied().cycle().take(batch * e_count).collect(),
            (None, Some(g)) => tape.value(g).data().to_vec(),
            (None, None) => vec![1.0; batch],
        };
        let seq = fwd.expert_seq;
        let heads = self.config.heads;
        let roles = self.roles();
        let mut out = Vec::with_capacity(batch);
        for b in 0..batch {
            let expert_logits: Vec<Vec<f64>> = fwd
                .expert_logits
                .iter()
                .map(|&(_, v)| tape.value(v).row(b).to_vec())
                .collect();
            let w = &gate[b * e_count..(b + 1) * e_count];
            let mixture = (0..c)
                .map(|j| w.iter().zip(&expert_logits).map(|(wi, y)| wi * y[j]).sum())
                .collect();
            let attention = fwd
                .attention
                .iter()
                .map(|layers| {
                    let mut probs = Vec::with_capacity(layers.len() * heads * seq * seq);
                    for &a in layers {
                        let all = tape.attention_probs(a).expect("attention node");
                        probs.extend_from_slice(&all[b * heads * seq * seq..][..heads * seq * seq]);
                    }
                    AttentionStack {
                        layers: layers.len(),
                        heads,
                        seq,
                        probs,
                    }
                })
                .collect();
            out.push(ExpertBundle {
                roles: roles.clone(),
                expert_logits,
                gate: w.to_vec(),
                mixture,
                attention,
            });
        }
        Ok(out)
    }

    /// Mixture logits only, evaluated in chunks.
    pub fn predict(&self, seqs: &[JointSequence]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let refs: Vec<&JointSequence> = chunk.iter().collect();
            let mut tape = Tape::new();
            let params = self.param_leaves(&mut tape, false);
            let feats = tape.constant(Self::stack_features(&refs));
            let fwd =
                self.forward_on_tape(&mut tape, &params, feats, &refs, &self.all_experts_plan())?;
            let mix = tape.value(fwd.mixture.expect("full plan has a mixture"));
            out.extend((0..refs.len()).map(|b| mix.row(b).to_vec()));
        }
        Ok(out)
    }

    /// Logits of a single expert for each sequence.
    pub fn expert_predict(&self, seqs: &[&JointSequence], expert: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let mut tape = Tape::new();
            let params = self.param_leaves(&mut tape, false);
            let feats = tape.constant(Self::stack_features(chunk));
            let plan = ForwardPlan {
                experts: vec![expert],
                gate: false,
                full_attention: false,
            };
            let fwd = self.forward_on_tape(&mut tape, &params, feats, chunk, &plan)?;
            let logits = tape.value(fwd.expert_logits[0].1);
            out.extend((0..chunk.len()).map(|b| logits.row(b).to_vec()));
        }
        Ok(out)
    }

    // ---- checkpoints ----

    const MAGIC: &'static [u8; 8] = b"FLIMOE\0\x01";
    const VERSION: u32 = 1;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        let echo = self.config.to_echo();
        out.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        out.extend_from_slice(echo.as_bytes());
        let mut table: Vec<(String, &Tensor)> = self.encoders.named();
        table.extend(
            self.params
                .names
                .iter()
                .cloned()
                .zip(self.params.tensors.iter()),
        );
        out.extend_from_slice(&(table.len() as u32).to_le_bytes());
        for (name, t) in table {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &dim in t.shape() {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != Self::MAGIC {
            return Err(ModelError::Checkpoint("bad magic header".into()));
        }
        let version = r.u32()?;
        if version != Self::VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported version {version}"
            )));
        }
        let echo_len = r.u32()? as usize;
        let echo = std::str::from_utf8(r.take(echo_len)?)
            .map_err(|_| ModelError::Checkpoint("config echo is not UTF-8".into()))?;
        let config = ModelConfig::from_echo(echo)?;
        let mut model = Self::new(config.clone(), 0)?;
        let count = r.u32()? as usize;
        let mut table = HashMap::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| ModelError::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            table.insert(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(ModelError::Checkpoint("trailing bytes".into()));
        }
        let mut take = |name: &str, like: &Tensor| -> Result<Tensor> {
            let t = table
                .remove(name)
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != like.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t)
        };
        let m = config.num_modalities();
        let cls = take("encoder.cls", &model.encoders.cls)?;
        let mut embeddings = Vec::new();
        let mut projections = Vec::new();
        for i in 0..m {
            embeddings.push(take(
                &format!("encoder.{i}.embedding"),
                &model.encoders.embeddings[i],
            )?);
            projections.push(take(
                &format!("encoder.{i}.projection"),
                &model.encoders.projections[i],
            )?);
        }
        model.encoders = EncoderBank::from_parts(embeddings, projections, cls)?;
        for i in 0..model.params.len() {
            let name = model.params.names[i].clone();
            model.params.tensors[i] = take(&name, &model.params.tensors[i])?;
        }
        if let Some(extra) = table.keys().next() {
            return Err(ModelError::Checkpoint(format!(
                "unexpected parameter {extra}"
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
