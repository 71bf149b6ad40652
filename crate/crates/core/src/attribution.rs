//! Feature importance over the joint sequence: attention rollout,
//! gradient-modulated rollout and integrated gradients, split by modality
//! and min–max normalized over valid positions.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    AttentionStack, ExpertRole, ForwardPlan, FusionModel, JointSequence, ModelError, Segment,
};
use crate::seed::rng_for;
use crate::synthdata::{LABEL_REDUNDANCY, LABEL_SYNERGY, LABEL_UNIQUE};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty attention stack")]
    EmptyStack,
    #[error("integrated gradients needs at least {min} steps, got {steps}")]
    TooFewSteps { steps: usize, min: usize },
    #[error("label {label} out of range for {labels} labels")]
    BadLabel { label: usize, labels: usize },
    #[error("{0}")]
    Invalid(String),
}

impl From<TensorError> for AttributionError {
    fn from(e: TensorError) -> Self {
        AttributionError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, AttributionError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[serde(rename = "attnroll")]
    AttnRoll,
    #[serde(rename = "grad_attnroll")]
    GradAttnRoll,
    #[serde(rename = "ig")]
    IntegratedGradients,
    Random,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Random,
        Method::AttnRoll,
        Method::IntegratedGradients,
        Method::GradAttnRoll,
    ];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::AttnRoll => "attnroll",
            Method::GradAttnRoll => "grad_attnroll",
            Method::IntegratedGradients => "ig",
            Method::Random => "random",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "attnroll" => Ok(Method::AttnRoll),
            "grad_attnroll" => Ok(Method::GradAttnRoll),
            "ig" => Ok(Method::IntegratedGradients),
            "random" => Ok(Method::Random),
            other => Err(format!(
                "unknown attribution method {other:?} (random|attnroll|ig|grad_attnroll)"
            )),
        }
    }
}

/// Which scalar score is explained.
///
/// For a binary label with ground truth `y`, the true-class score is the
/// logit `z` when `y = 1` and `-z` when `y = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Label(usize),
    /// Sum of the true-class scores of every label.
    AllLabels,
}

impl Target {
    /// Label explained by default for an expert of `role`.
    pub fn for_role(role: ExpertRole) -> Self {
        match role {
            ExpertRole::Unique(_) => Target::Label(LABEL_UNIQUE),
            ExpertRole::Redundancy => Target::Label(LABEL_REDUNDANCY),
            ExpertRole::Synergy => Target::Label(LABEL_SYNERGY),
            ExpertRole::Fused => Target::AllLabels,
        }
    }

    pub fn weights(&self, labels: &[u8; 3]) -> Result<Vec<f64>> {
        let sign = |y: u8| if y == 1 { 1.0 } else { -1.0 };
        match *self {
            Target::Label(l) if l >= labels.len() => Err(AttributionError::BadLabel {
                label: l,
                labels: labels.len(),
            }),
            Target::Label(l) => Ok((0..labels.len())
                .map(|j| if j == l { sign(labels[j]) } else { 0.0 })
                .collect()),
            Target::AllLabels => Ok(labels.iter().map(|&y| sign(y)).collect()),
        }
    }
}

/// Whose output is explained: one expert, or the gated mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Expert(usize),
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `None` for model-level maps.
    pub expert: Option<usize>,
    pub method: Method,
    /// Raw score per joint position; CLS and padding hold 0.
    pub raw: Vec<f64>,
    /// Min–max normalized score per valid non-CLS position.
    pub normalized: Vec<Option<f64>>,
    /// Valid non-CLS joint positions of each modality, in order.
    pub modality_positions: Vec<Vec<usize>>,
    /// Modalities whose raw scores had no dynamic range.
    pub flat: Vec<bool>,
}

impl AttributionMap {
    /// Builds a map from raw scores over the layout of `seq`.
    pub fn from_raw(
        seq: &JointSequence,
        expert: Option<usize>,
        method: Method,
        mut raw: Vec<f64>,
    ) -> Self {
        let modality_positions: Vec<Vec<usize>> = (0..seq.num_modalities())
            .map(|m| seq.valid_positions(m))
            .collect();
        for (p, r) in raw.iter_mut().enumerate() {
            if seq.segments[p] == Segment::Cls || !seq.valid[p] {
                *r = 0.0;
            }
        }
        let mut normalized = vec![None; raw.len()];
        let mut flat = Vec::with_capacity(modality_positions.len());
        for positions in &modality_positions {
            let (lo, hi) = positions
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &p| {
                    (lo.min(raw[p]), hi.max(raw[p]))
                });
            let is_flat = positions.is_empty() || hi <= lo;
            flat.push(is_flat);
            for &p in positions {
                normalized[p] = Some(if is_flat {
                    0.0
                } else {
                    (raw[p] - lo) / (hi - lo)
                });
            }
        }
        Self {
            expert,
            method,
            raw,
            normalized,
            modality_positions,
            flat,
        }
    }

    pub fn score(&self, pos: usize) -> Option<f64> {
        self.normalized.get(pos).copied().flatten()
    }

    /// Export records, one per modality.
    pub fn records(&self, sample: usize) -> Vec<MapRecord> {
        self.modality_positions
            .iter()
            .enumerate()
            .map(|(m, positions)| MapRecord {
                sample,
                expert: self.expert,
                method: self.method,
                modality: m,
                positions: positions.clone(),
                scores: positions
                    .iter()
                    .map(|&p| self.normalized[p].unwrap_or(0.0))
                    .collect(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapRecord {
    pub sample: usize,
    pub expert: Option<usize>,
    pub method: Method,
    pub modality: usize,
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Residual-aware rollout: per layer the head-averaged attention `A`
/// becomes `0.5·A + 0.5·I` with rows renormalized over valid columns, and
/// the layer matrices are multiplied in depth order (later layers on the
/// left). Returns a `seq × seq` row-major matrix.
pub fn attention_rollout(stack: &AttentionStack, valid: &[bool]) -> Result<Vec<f64>> {
    let n = stack.seq;
    if stack.layers == 0 || stack.heads == 0 || n == 0 {
        return Err(AttributionError::EmptyStack);
    }
    if valid.len() != n {
        return Err(AttributionError::Invalid(format!(
            "validity mask of length {} for a {n}-position stack",
            valid.len()
        )));
    }
    let mut rollout: Option<Vec<f64>> = None;
    for layer in 0..stack.layers {
        let mut a = vec![0.0; n * n];
        for h in 0..stack.heads {
            for (x, y) in a.iter_mut().zip(stack.head(layer, h)) {
                *x += y / stack.heads as f64;
            }
        }
        for i in 0..n {
            let row = &mut a[i * n..(i + 1) * n];
            for (j, x) in row.iter_mut().enumerate() {
                *x = if valid[j] {
                    0.5 * *x + if i == j { 0.5 } else { 0.0 }
                } else {
                    0.0
                };
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
        rollout = Some(match rollout {
            None => a,
            Some(prev) => {
                let out = crate::tensor::matmul(
                    &Tensor::new(vec![n, n], a)?,
                    &Tensor::new(vec![n, n], prev)?,
                )?;
                out.into_data()
            }
        });
    }
    Ok(rollout.expect("at least one layer"))
}

/// Rollout importance of every joint position as seen from CLS.
///
/// For the pooled flavor each token inherits the weight of its modality's
/// pooled slot.
fn cls_rollout_per_position(
    model: &FusionModel,
    seq: &JointSequence,
    stack: &AttentionStack,
) -> Result<Vec<f64>> {
    let slots = stack.seq;
    let slot_valid: Vec<bool> = if slots == seq.len() {
        seq.valid.clone()
    } else {
        std::iter::once(true)
            .chain((0..seq.num_modalities()).map(|m| !seq.valid_positions(m).is_empty()))
            .collect()
    };
    let rollout = attention_rollout(stack, &slot_valid)?;
    let cls_row = &rollout[..slots];
    if slots == seq.len() {
        return Ok(cls_row.to_vec());
    }
    debug_assert_eq!(model.config().flavor, crate::model::Flavor::Pooled);
    Ok(seq
        .segments
        .iter()
        .map(|s| match s {
            Segment::Cls => cls_row[0],
            Segment::Modality(m) => cls_row[1 + m],
        })
        .collect())
}

/// One recorded pass of a single expert: gradient of the target score
/// with respect to the input features, plus attention maps.
struct ExpertPass {
    grads: Vec<Vec<f64>>,
    stacks: Vec<AttentionStack>,
}

fn expert_pass(
    model: &FusionModel,
    seqs: &[&JointSequence],
    expert: usize,
    weights: &[Vec<f64>],
) -> Result<ExpertPass> {
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape, false);
    let feats = tape.leaf(FusionModel::stack_features(seqs), true);
    let plan = ForwardPlan {
        experts: vec![expert],
        gate: false,
        full_attention: true,
    };
    let fwd = model.forward_on_tape(&mut tape, &params, feats, seqs, &plan)?;
    let flat: Vec<f64> = weights.iter().flatten().copied().collect();
    let score = tape.dot(fwd.expert_logits[0].1, &flat)?;
    tape.backward(score)?;
    let t = seqs[0].len();
    let d = seqs[0].d_model();
    let grad = tape.grad(feats).expect("features require grad").data();
    let grads = (0..seqs.len())
        .map(|b| grad[b * t * d..(b + 1) * t * d].to_vec())
        .collect();
    let heads = model.config().heads;
    let seq = fwd.expert_seq;
    let stacks = (0..seqs.len())
        .map(|b| {
            let mut probs = Vec::new();
            for &a in &fwd.attention[0] {
                let all = tape.attention_probs(a).expect("attention node");
                probs.extend_from_slice(&all[b * heads * seq * seq..][..heads * seq * seq]);
            }
            AttentionStack {
                layers: fwd.attention[0].len(),
                heads,
                seq,
                probs,
            }
        })
        .collect();
    Ok(ExpertPass { grads, stacks })
}

/// `max(0, ∂S/∂h_t · h_t)` per position.
fn positive_grad_times_input(seq: &JointSequence, grad: &[f64]) -> Vec<f64> {
    let d = seq.d_model();
    (0..seq.len())
        .map(|t| {
            let h = seq.features.row(t);
            let g = &grad[t * d..(t + 1) * d];
            h.iter().zip(g).map(|(a, b)| a * b).sum::<f64>().max(0.0)
        })
        .collect()
}

/// Raw rollout and Grad×AttnRoll scores of one expert for a batch.
fn expert_raw_scores(
    model: &FusionModel,
    seqs: &[&JointSequence],
    expert: usize,
    weights: &[Vec<f64>],
    method: Method,
) -> Result<Vec<Vec<f64>>> {
    let pass = expert_pass(model, seqs, expert, weights)?;
    seqs.iter()
        .zip(pass.stacks.iter().zip(&pass.grads))
        .map(|(seq, (stack, grad))| {
            let roll = cls_rollout_per_position(model, seq, stack)?;
            Ok(match method {
                Method::AttnRoll => roll,
                _ => roll
                    .iter()
                    .zip(positive_grad_times_input(seq, grad))
                    .map(|(r, g)| r * g)
                    .collect(),
            })
        })
        .collect()
}

/// How the path integral is discretized.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Quadrature {
    /// Fixed midpoint nodes of the warped grid.
    Midpoint,
    /// Globally adaptive Simpson rule on the warped grid: the panels with the
    /// largest local error estimate are halved until the gradient budget is
    /// spent.
    #[default]
    Adaptive,
}

impl FromStr for Quadrature {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "midpoint" => Ok(Quadrature::Midpoint),
            "adaptive" => Ok(Quadrature::Adaptive),
            other => Err(format!("unknown quadrature {other:?} (midpoint|adaptive)")),
        }
    }
}

impl fmt::Display for Quadrature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Quadrature::Midpoint => "midpoint",
            Quadrature::Adaptive => "adaptive",
        })
    }
}

/// Discretization of the straight path from the baseline (`alpha = 0`) to
/// the input (`alpha = 1`) with at most `steps` gradient evaluations.
///
/// Both rules integrate over `u ∈ [0, 1]` with
/// `alpha = phi(u) = (exp(c·u) − 1) / (exp(c) − 1)`, so cells shrink towards
/// the baseline; `curvature = 0` makes the warp the identity. Layer
/// normalization makes scores change fastest for tiny `alpha`, and trained
/// models add narrow bumps further along the path, which the adaptive rule
/// resolves where a fixed grid misses them.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IgPath {
    pub steps: usize,
    pub curvature: f64,
    pub rule: Quadrature,
}

impl Default for IgPath {
    fn default() -> Self {
        Self {
            steps: 64,
            curvature: 10.0,
            rule: Quadrature::Adaptive,
        }
    }
}

const ADAPTIVE_PANELS: usize = 4;
const REFINE_PER_ROUND: usize = 4;

impl IgPath {
    fn validate(&self) -> Result<()> {
        let min = match self.rule {
            Quadrature::Midpoint => 8,
            Quadrature::Adaptive => 2 * ADAPTIVE_PANELS + 1,
        };
        if self.steps < min {
            return Err(AttributionError::TooFewSteps {
                steps: self.steps,
                min,
            });
        }
        if !(self.curvature.is_finite() && self.curvature >= 0.0) {
            return Err(AttributionError::Invalid(format!(
                "path curvature must be finite and non-negative, got {}",
                self.curvature
            )));
        }
        Ok(())
    }

    fn warp(&self, u: f64) -> f64 {
        let c = self.curvature;
        if c == 0.0 {
            u
        } else {
            (c * u).exp_m1() / c.exp_m1()
        }
    }

    fn warp_slope(&self, u: f64) -> f64 {
        let c = self.curvature;
        if c == 0.0 {
            1.0
        } else {
            c * (c * u).exp() / c.exp_m1()
        }
    }

    /// `(alpha, weight)` of the midpoint rule; weights sum to 1.
    pub fn midpoint_nodes(&self) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let n = self.steps as f64;
        Ok((0..self.steps)
            .map(|k| {
                let k = k as f64;
                let lo = self.warp(k / n);
                let hi = self.warp((k + 1.0) / n);
                (self.warp((k + 0.5) / n), hi - lo)
            })
            .collect())
    }

    /// Runs the adaptive rule. `eval` receives the `alpha` of new nodes and
    /// returns the scalar integrand `dS/dalpha` at each. Returns
    /// `(alpha, weight)` for every evaluated node in evaluation order.
    pub fn adaptive_nodes(
        &self,
        mut eval: impl FnMut(&[f64]) -> Result<Vec<f64>>,
    ) -> Result<Vec<(f64, f64)>> {
        self.validate()?;
        let mut us: Vec<f64> = Vec::with_capacity(self.steps);
        let mut values: Vec<f64> = Vec::with_capacity(self.steps);
        let mut index: HashMap<u64, usize> = HashMap::new();
        let mut run = |new: Vec<f64>,
                       us: &mut Vec<f64>,
                       values: &mut Vec<f64>,
                       index: &mut HashMap<u64, usize>|
         -> Result<()> {
            let alphas: Vec<f64> = new.iter().map(|&u| self.warp(u)).collect();
            let got = eval(&alphas)?;
            if got.len() != new.len() {
                return Err(AttributionError::Invalid(
                    "integrand returned the wrong count".into(),
                ));
            }
            for (u, g) in new.into_iter().zip(got) {
                index.insert(u.to_bits(), us.len());
                values.push(g * self.warp_slope(u));
                us.push(u);
            }
            Ok(())
        };
        let f = |values: &[f64], index: &HashMap<u64, usize>, u: f64| values[index[&u.to_bits()]];
        let simpson = |values: &[f64], index: &HashMap<u64, usize>, a: f64, b: f64| {
            let m = 0.5 * (a + b);
            (b - a) / 6.0 * (f(values, index, a) + 4.0 * f(values, index, m) + f(values, index, b))
        };

        let grid = 2 * ADAPTIVE_PANELS;
        run(
            (0..=grid).map(|k| k as f64 / grid as f64).collect(),
            &mut us,
            &mut values,
            &mut index,
        )?;
        // (a, b, error estimate); unrefined panels come first.
        let mut panels: Vec<(f64, f64, f64)> = (0..ADAPTIVE_PANELS)
            .map(|k| {
                let n = ADAPTIVE_PANELS as f64;
                (k as f64 / n, (k + 1) as f64 / n, f64::INFINITY)
            })
            .collect();
        while self.steps - us.len() >= 2 {
            panels.sort_by(|x, y| y.2.total_cmp(&x.2).then(x.0.total_cmp(&y.0)));
            let take = REFINE_PER_ROUND.min((self.steps - us.len()) / 2);
            let chosen: Vec<(f64, f64, f64)> = panels.drain(..take).collect();
            let new = chosen
                .iter()
                .flat_map(|&(a, b, _)| {
                    let m = 0.5 * (a + b);
                    [0.5 * (a + m), 0.5 * (m + b)]
                })
                .collect();
            run(new, &mut us, &mut values, &mut index)?;
            for (a, b, _) in chosen {
                let m = 0.5 * (a + b);
                let whole = simpson(&values, &index, a, b);
                let halves = simpson(&values, &index, a, m) + simpson(&values, &index, m, b);
                let err = 0.5 * (halves - whole).abs();
                panels.push((a, m, err));
                panels.push((m, b, err));
            }
        }
        let mut weights = vec![0.0; us.len()];
        for &(a, b, _) in &panels {
            let h = (b - a) / 6.0;
            let m = 0.5 * (a + b);
            for (u, w) in [(a, h), (m, 4.0 * h), (b, h)] {
                weights[index[&u.to_bits()]] += w;
            }
        }
        Ok(us
            .iter()
            .zip(weights)
            .map(|(&u, w)| (self.warp(u), w * self.warp_slope(u)))
            .collect())
    }
}

/// Path-integrated gradients from a baseline to `features`.
///
/// Rows with `keep[t] = true` stay at their input value along the whole
/// path; every other row is scaled by `alpha`. `score_and_grad` evaluates the
/// score gradient for a batch of scaled feature matrices. Returns the
/// per-channel attribution `h · Σ weight·∂S/∂h`.
pub fn integrated_gradients_with(
    features: &Tensor,
    keep: &[bool],
    path: &IgPath,
    mut score_and_grad: impl FnMut(&[Tensor]) -> Result<Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let d = features.last_dim();
    let scaled = |alpha: f64| {
        let mut t = features.clone();
        for (r, row) in t.data_mut().chunks_mut(d).enumerate() {
            if !keep[r] {
                row.iter_mut().for_each(|x| *x *= alpha);
            }
        }
        t
    };
    let (grads, weights): (Vec<Vec<f64>>, Vec<f64>) = match path.rule {
        Quadrature::Midpoint => {
            let nodes = path.midpoint_nodes()?;
            let inputs: Vec<Tensor> = nodes.iter().map(|&(alpha, _)| scaled(alpha)).collect();
            (
                score_and_grad(&inputs)?,
                nodes.iter().map(|n| n.1).collect(),
            )
        }
        Quadrature::Adaptive => {
            let mut grads = Vec::with_capacity(path.steps);
            let nodes = path.adaptive_nodes(|alphas| {
                let inputs: Vec<Tensor> = alphas.iter().map(|&a| scaled(a)).collect();
                let batch = score_and_grad(&inputs)?;
                let slopes = batch
                    .iter()
                    .map(|g| {
                        g.chunks(d)
                            .enumerate()
                            .filter(|(r, _)| !keep[*r])
                            .map(|(r, row)| {
                                row.iter()
                                    .zip(features.row(r))
                                    .map(|(x, h)| x * h)
                                    .sum::<f64>()
                            })
                            .sum()
                    })
                    .collect();
                grads.extend(batch);
                Ok(slopes)
            })?;
            (grads, nodes.iter().map(|n| n.1).collect())
        }
    };
    let mut ig = vec![0.0; features.numel()];
    for (g, weight) in grads.iter().zip(weights) {
        for (acc, x) in ig.iter_mut().zip(g) {
            *acc += weight * x;
        }
    }
    for (r, row) in ig.chunks_mut(d).enumerate() {
        if keep[r] {
            row.iter_mut().for_each(|x| *x = 0.0);
        } else {
            for (x, h) in row.iter_mut().zip(features.row(r)) {
                *x *= h;
            }
        }
    }
    Ok(ig)
}

/// Scores `S` of `scope` for each sequence, without gradients.
pub fn target_scores(
    model: &FusionModel,
    seqs: &[&JointSequence],
    scope: Scope,
    weights: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let logits = match scope {
        Scope::Expert(e) => model.expert_predict(seqs, e)?,
        Scope::Model => {
            let owned: Vec<JointSequence> = seqs.iter().map(|s| (*s).clone()).collect();
            model.predict(&owned)?
        }
    };
    Ok(logits
        .iter()
        .zip(weights)
        .map(|(z, w)| z.iter().zip(w).map(|(a, b)| a * b).sum())
        .collect())
}

/// Gradient of `Σ_b w_b · S(x_b)` for sequences that share `template`'s
/// layout but carry the given feature matrices.
fn batch_gradients(
    model: &FusionModel,
    template: &JointSequence,
    features: &[Tensor],
    scope: Scope,
    weights: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let seqs: Vec<JointSequence> = features
        .iter()
        .map(|f| JointSequence {
            features: f.clone(),
            ..template.clone()
        })
        .collect();
    let refs: Vec<&JointSequence> = seqs.iter().collect();
    let mut tape = Tape::new();
    let params = model.param_leaves(&mut tape, false);
    let feats = tape.leaf(FusionModel::stack_features(&refs), true);
    let (experts, gate) = match scope {
        Scope::Expert(e) => (vec![e], false),
        Scope::Model => ((0..model.num_experts()).collect(), model.num_experts() > 1),
    };
    let plan = ForwardPlan {
        experts,
        gate,
        full_attention: false,
    };
    let fwd = model.forward_on_tape(&mut tape, &params, feats, &refs, &plan)?;
    let out = match scope {
        Scope::Expert(_) => fwd.expert_logits[0].1,
        Scope::Model => fwd.mixture.expect("full plan yields a mixture"),
    };
    let flat: Vec<f64> = weights
        .iter()
        .copied()
        .cycle()
        .take(weights.len() * refs.len())
        .collect();
    let score = tape.dot(out, &flat)?;
    tape.backward(score)?;
    let grad = tape.grad(feats).expect("features require grad").data();
    let n = template.features.numel();
    Ok((0..refs.len())
        .map(|b| grad[b * n..(b + 1) * n].to_vec())
        .collect())
}

/// Signed integrated gradients of one sequence summed over channels, with
/// the scores at the input and at the baseline. The baseline zeroes every
/// valid non-CLS position and keeps CLS.
pub struct IgResult {
    pub per_position: Vec<f64>,
    pub score_input: f64,
    pub score_baseline: f64,
}

impl IgResult {
    /// `|Σ IG − (S(x) − S(baseline))|` relative to `|S(x) − S(baseline)|`.
    pub fn completeness_error(&self) -> f64 {
        let total: f64 = self.per_position.iter().sum();
        let diff = self.score_input - self.score_baseline;
        (total - diff).abs() / diff.abs().max(1e-12)
    }
}

pub fn integrated_gradients(
    model: &FusionModel,
    seq: &JointSequence,
    scope: Scope,
    weights: &[f64],
    path: &IgPath,
) -> Result<IgResult> {
    let keep: Vec<bool> = seq.segments.iter().map(|s| *s == Segment::Cls).collect();
    let ig = integrated_gradients_with(&seq.features, &keep, path, |inputs| {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            out.extend(batch_gradients(model, seq, chunk, scope, weights)?);
        }
        Ok(out)
    })?;
    let d = seq.d_model();
    let per_position = ig.chunks(d).map(|row| row.iter().sum()).collect();
    let baseline_positions: Vec<usize> = (0..seq.num_modalities())
        .flat_map(|m| seq.valid_positions(m))
        .collect();
    let baseline = crate::model::mask_features(seq, &baseline_positions)?;
    let w = vec![weights.to_vec()];
    let score_input = target_scores(model, &[seq], scope, &w)?[0];
    let score_baseline = target_scores(model, &[&baseline], scope, &w)?[0];
    Ok(IgResult {
        per_position,
        score_input,
        score_baseline,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionOptions {
    pub ig: IgPath,
    /// Seed for the random baseline; maps also depend on the sample id.
    pub seed: u64,
    /// Sequences per recorded pass.
    pub chunk: usize,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        Self {
            ig: IgPath::default(),
            seed: 0,
            chunk: 32,
        }
    }
}

/// Uniform random scores, reproducible from `(seed, sample id)`.
pub fn random_map(seq: &JointSequence, seed: u64, sample_id: usize) -> AttributionMap {
    let mut rng = rng_for(seed, &[0x4A2D, sample_id as u64]);
    let raw = (0..seq.len()).map(|_| rng.gen::<f64>()).collect();
    AttributionMap::from_raw(seq, None, Method::Random, raw)
}

/// Attribution maps for a batch of sequences.
///
/// Model-level rollout maps of a gated model sum each expert's raw map
/// weighted by that expert's gate weight; integrated gradients explain the
/// mixture output directly.
pub fn attribute(
    model: &FusionModel,
    seqs: &[&JointSequence],
    labels: &[[u8; 3]],
    sample_ids: &[usize],
    scope: Scope,
    method: Method,
    target: Target,
    opts: &AttributionOptions,
) -> Result<Vec<AttributionMap>> {
    if seqs.len() != labels.len() || seqs.len() != sample_ids.len() {
        return Err(AttributionError::Invalid(
            "sequences, labels and sample ids differ in length".into(),
        ));
    }
    let expert_tag = match scope {
        Scope::Expert(e) => Some(e),
        Scope::Model => None,
    };
    if let Scope::Expert(e) = scope {
        if e >= model.num_experts() {
            return Err(ModelError::UnknownExpert(e).into());
        }
    }
    let weights: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| target.weights(l))
        .collect::<Result<_>>()?;
    let mut maps = Vec::with_capacity(seqs.len());
    match method {
        Method::Random => {
            for (seq, &id) in seqs.iter().zip(sample_ids) {
                let mut map = random_map(seq, opts.seed, id);
                map.expert = expert_tag;
                maps.push(map);
            }
        }
        Method::IntegratedGradients => {
            for (seq, w) in seqs.iter().zip(&weights) {
                let ig = integrated_gradients(model, seq, scope, w, &opts.ig)?;
                let raw = ig.per_position.iter().map(|x| x.abs()).collect();
                maps.push(AttributionMap::from_raw(seq, expert_tag, method, raw));
            }
        }
        Method::AttnRoll | Method::GradAttnRoll => {
            for (chunk, w) in seqs
                .chunks(opts.chunk.max(1))
                .zip(weights.chunks(opts.chunk.max(1)))
            {
                let raw = match scope {
                    Scope::Expert(e) => expert_raw_scores(model, chunk, e, w, method)?,
                    Scope::Model => {
                        let gates: Vec<Vec<f64>> = model
                            .forward_batch(chunk)?
                            .into_iter()
                            .map(|b| b.gate)
                            .collect();
                        let mut total = vec![vec![0.0; chunk[0].len()]; chunk.len()];
                        for e in 0..model.num_experts() {
                            let per = expert_raw_scores(model, chunk, e, w, method)?;
                            for (b, scores) in per.iter().enumerate() {
                                for (t, s) in scores.iter().enumerate() {
                                    total[b][t] += gates[b][e] * s;
                                }
                            }
                        }
                        total
                    }
                };
                for (seq, r) in chunk.iter().zip(raw) {
                    maps.push(AttributionMap::from_raw(seq, expert_tag, method, r));
                }
            }
        }
    }
    Ok(maps)
}

/// `ceil(fraction · n)` with a small tolerance so that exact products such
/// as `0.3 · 10` are not rounded up by representation error.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(n)
}

/// Per modality, the `ceil(fraction · valid count)` highest-scoring valid
/// non-CLS positions, ties broken by lower position. Each list is ordered
/// by decreasing score.
pub fn select_top_fraction(map: &AttributionMap, fraction: f64) -> Vec<Vec<usize>> {
    map.modality_positions
        .iter()
        .map(|positions| {
            let mut ranked = positions.clone();
            ranked.sort_by(|&a, &b| {
                let (sa, sb) = (map.score(a).unwrap_or(0.0), map.score(b).unwrap_or(0.0));
                sb.total_cmp(&sa).then(a.cmp(&b))
            });
            ranked.truncate(fraction_count(fraction, positions.len()));
            ranked
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModalTokens, ModelConfig, MultimodalInput};
    use crate::synthdata::{generate, GenSpec};
    use proptest::prelude::*;

    fn small_model() -> FusionModel {
        FusionModel::new(ModelConfig::default(), 3).unwrap()
    }

    fn seqs(model: &FusionModel, n: usize) -> (Vec<JointSequence>, Vec<[u8; 3]>) {
        let samples = generate(&GenSpec {
            n_samples: n,
            ..GenSpec::default()
        })
        .unwrap();
        (
            samples
                .iter()
                .map(|s| model.encode_sample(s).unwrap())
                .collect(),
            samples.iter().map(|s| s.labels).collect(),
        )
    }

    fn uniform_stack(n: usize, valid: &[bool], layers: usize) -> AttentionStack {
        let v = valid.iter().filter(|&&x| x).count() as f64;
        let row: Vec<f64> = valid
            .iter()
            .map(|&ok| if ok { 1.0 / v } else { 0.0 })
            .collect();
        AttentionStack {
            layers,
            heads: 2,
            seq: n,
            probs: (0..layers * 2 * n).flat_map(|_| row.clone()).collect(),
        }
    }

    #[test]
    fn single_layer_uniform_rollout_closed_form() {
        let valid = [true, true, false, true];
        let r = attention_rollout(&uniform_stack(4, &valid, 1), &valid).unwrap();
        // 0.5/3 off-diagonal, 0.5/3 + 0.5 on the diagonal, padding column 0
        for i in [0usize, 1, 3] {
            for j in 0..4 {
                let want = match (valid[j], i == j) {
                    (false, _) => 0.0,
                    (true, true) => 0.5 / 3.0 + 0.5,
                    (true, false) => 0.5 / 3.0,
                };
                assert!((r[i * 4 + j] - want).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn identity_attention_gives_identity_rollout() {
        let n = 3;
        let eye: Vec<f64> = (0..n * n)
            .map(|k| if k / n == k % n { 1.0 } else { 0.0 })
            .collect();
        let stack = AttentionStack {
            layers: 2,
            heads: 1,
            seq: n,
            probs: [eye.clone(), eye.clone()].concat(),
        };
        assert_eq!(attention_rollout(&stack, &[true; 3]).unwrap(), eye);
    }

    #[test]
    fn empty_stack_is_an_error() {
        let stack = AttentionStack {
            layers: 0,
            heads: 1,
            seq: 2,
            probs: vec![],
        };
        assert!(matches!(
            attention_rollout(&stack, &[true; 2]),
            Err(AttributionError::EmptyStack)
        ));
    }

    #[test]
    fn model_rollouts_are_row_stochastic() {
        let model = small_model();
        let (s, _) = seqs(&model, 2);
        for bundle in model.forward_batch(&s.iter().collect::<Vec<_>>()).unwrap() {
            for stack in &bundle.attention {
                let r = attention_rollout(stack, &s[0].valid).unwrap();
                for row in r.chunks(stack.seq) {
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn normalization_contract() {
        let model = small_model();
        let (s, labels) = seqs(&model, 3);
        let refs: Vec<_> = s.iter().collect();
        for method in Method::ALL {
            let maps = attribute(
                &model,
                &refs,
                &labels,
                &[0, 1, 2],
                Scope::Expert(2),
                method,
                Target::Label(2),
                &AttributionOptions::default(),
            )
            .unwrap();
            for map in maps {
                assert_eq!(map.normalized[0], None);
                for (m, positions) in map.modality_positions.iter().enumerate() {
                    let scores: Vec<f64> =
                        positions.iter().map(|&p| map.score(p).unwrap()).collect();
                    assert!(scores.iter().all(|&x| (0.0..=1.0).contains(&x)));
                    if !map.flat[m] {
                        assert!(scores.contains(&0.0) && scores.contains(&1.0), "{method}");
                    }
                }
            }
        }
    }

    #[test]
    fn zero_gradient_gives_zero_scores() {
        let model = small_model();
        let (s, _) = seqs(&model, 1);
        let raw =
            expert_raw_scores(&model, &[&s[0]], 0, &[vec![0.0; 3]], Method::GradAttnRoll).unwrap();
        assert!(raw[0].iter().all(|&x| x == 0.0));
        let map = AttributionMap::from_raw(&s[0], Some(0), Method::GradAttnRoll, raw[0].clone());
        assert!(map.flat.iter().all(|&f| f));
        assert!(map.normalized.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn padding_and_cls_carry_no_score() {
        let model = small_model();
        let samples = generate(&GenSpec {
            n_samples: 1,
            ..GenSpec::default()
        })
        .unwrap();
        let mut input = MultimodalInput::from(&samples[0]);
        input.modalities[1] = ModalTokens {
            ids: input.modalities[1].ids.clone(),
            valid: (0..16).map(|i| i < 10).collect(),
        };
        let seq = model.encode(&input).unwrap();
        let maps = attribute(
            &model,
            &[&seq],
            &[samples[0].labels],
            &[0],
            Scope::Expert(3),
            Method::GradAttnRoll,
            Target::AllLabels,
            &AttributionOptions::default(),
        )
        .unwrap();
        let map = &maps[0];
        assert_eq!(map.modality_positions[1].len(), 10);
        for p in 27..33 {
            assert_eq!(map.normalized[p], None);
            assert_eq!(map.raw[p], 0.0);
        }
    }

    #[test]
    fn ig_is_exact_for_linear_scores() {
        let features = Tensor::new(vec![3, 2], vec![9.0, 9.0, 1.0, -2.0, 0.5, 4.0]).unwrap();
        let w = [0.3, -0.7, 1.5, 2.0, -1.0, 0.25];
        let keep = [true, false, false];
        for rule in [Quadrature::Midpoint, Quadrature::Adaptive] {
            for (steps, curvature) in [(9, 0.0), (13, 0.0), (64, 0.0), (64, 10.0)] {
                let path = IgPath {
                    steps,
                    curvature,
                    rule,
                };
                let ig = integrated_gradients_with(&features, &keep, &path, |inputs| {
                    Ok(inputs.iter().map(|_| w.to_vec()).collect())
                })
                .unwrap();
                let want = [0.0, 0.0, 1.5, -4.0, -0.5, 1.0];
                // Simpson panels integrate the warp slope only approximately.
                let tol = if rule == Quadrature::Adaptive && curvature > 0.0 {
                    1e-5
                } else {
                    1e-12
                };
                for (a, b) in ig.iter().zip(want) {
                    assert!(
                        (a - b).abs() < tol,
                        "{rule} {steps} {curvature}: {a} vs {b}"
                    );
                }
            }
        }
        let short = IgPath {
            steps: 8,
            curvature: 0.0,
            rule: Quadrature::Adaptive,
        };
        assert!(matches!(
            integrated_gradients_with(&features, &keep, &short, |_| Ok(vec![])),
            Err(AttributionError::TooFewSteps { steps: 8, min: 9 })
        ));
    }

    #[test]
    fn path_weights_sum_to_one() {
        for curvature in [0.0, 3.0, 10.0] {
            let path = IgPath {
                steps: 64,
                curvature,
                rule: Quadrature::Midpoint,
            };
            let nodes = path.midpoint_nodes().unwrap();
            let total: f64 = nodes.iter().map(|n| n.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(nodes.windows(2).all(|w| w[0].0 < w[1].0));

            let adaptive = IgPath {
                rule: Quadrature::Adaptive,
                ..path
            };
            let mut calls = 0;
            let nodes = adaptive
                .adaptive_nodes(|alphas| {
                    calls += 1;
                    Ok(alphas
                        .iter()
                        .map(|a| (-(a - 0.4f64).powi(2) * 400.0).exp())
                        .collect())
                })
                .unwrap();
            assert!(calls > 1);
            assert!(nodes.len() <= 64 && nodes.len() >= 62);
            let total: f64 = nodes.iter().map(|n| n.1).sum();
            let tol = if curvature > 0.0 { 1e-4 } else { 1e-12 };
            assert!((total - 1.0).abs() < tol, "{total}");
        }
        assert!(IgPath {
            steps: 64,
            curvature: -1.0,
            rule: Quadrature::Midpoint
        }
        .midpoint_nodes()
        .is_err());
    }

    #[test]
    fn adaptive_rule_resolves_a_narrow_bump() {
        // Integral of the bump over [0, 1] is sqrt(pi) / 40.
        let bump = |a: f64| (-(a - 0.4).powi(2) * 1600.0).exp();
        let want = std::f64::consts::PI.sqrt() / 40.0;
        let integral = |rule| {
            let path = IgPath {
                rule,
                ..IgPath::default()
            };
            let nodes = match rule {
                Quadrature::Midpoint => path.midpoint_nodes().unwrap(),
                Quadrature::Adaptive => path
                    .adaptive_nodes(|alphas| Ok(alphas.iter().map(|&a| bump(a)).collect()))
                    .unwrap(),
            };
            nodes.iter().map(|&(a, w)| w * bump(a)).sum::<f64>()
        };
        let adaptive = (integral(Quadrature::Adaptive) - want).abs() / want;
        let midpoint = (integral(Quadrature::Midpoint) - want).abs() / want;
        assert!(adaptive < 1e-3, "{adaptive}");
        assert!(adaptive < midpoint);
    }

    #[test]
    fn ig_of_zero_input_is_zero() {
        let model = small_model();
        let (s, labels) = seqs(&model, 1);
        let mut seq = s[0].clone();
        let positions: Vec<usize> = (1..seq.len()).collect();
        seq = crate::model::mask_features(&seq, &positions).unwrap();
        let w = Target::AllLabels.weights(&labels[0]).unwrap();
        let ig =
            integrated_gradients(&model, &seq, Scope::Expert(2), &w, &IgPath::default()).unwrap();
        assert!(ig.per_position.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ig_completeness_on_untrained_model() {
        let model = small_model();
        let (s, labels) = seqs(&model, 2);
        for (seq, l) in s.iter().zip(&labels) {
            let w = Target::AllLabels.weights(l).unwrap();
            for scope in [Scope::Expert(2), Scope::Model] {
                let ig = integrated_gradients(&model, seq, scope, &w, &IgPath::default()).unwrap();
                assert!(
                    ig.completeness_error() <= 0.01,
                    "{}",
                    ig.completeness_error()
                );
            }
        }
    }

    #[test]
    fn selection_rules() {
        let model = small_model();
        let (s, _) = seqs(&model, 1);
        let seq = &s[0];
        let mut raw = vec![0.0; seq.len()];
        raw[4] = 2.0;
        raw[8] = 2.0;
        raw[20] = 1.0;
        let map = AttributionMap::from_raw(seq, None, Method::AttnRoll, raw);
        let all = select_top_fraction(&map, 1.0);
        assert_eq!(all[0].len(), 16);
        assert_eq!(all[1].len(), 16);
        let one = select_top_fraction(&map, 0.05);
        assert_eq!(one, vec![vec![4], vec![20]]);
        assert_eq!(
            select_top_fraction(&map, 0.0),
            vec![Vec::<usize>::new(), vec![]]
        );
        assert_eq!(fraction_count(0.3, 10), 3);
        assert_eq!(fraction_count(0.05, 16), 1);
        assert_eq!(fraction_count(0.1, 16), 2);
    }

    #[test]
    fn random_maps_are_seeded() {
        let model = small_model();
        let (s, _) = seqs(&model, 1);
        assert_eq!(random_map(&s[0], 1, 5), random_map(&s[0], 1, 5));
        assert_ne!(random_map(&s[0], 1, 5), random_map(&s[0], 2, 5));
    }

    #[test]
    fn target_weights() {
        assert_eq!(
            Target::Label(2).weights(&[1, 1, 0]).unwrap(),
            vec![0.0, 0.0, -1.0]
        );
        assert_eq!(
            Target::AllLabels.weights(&[1, 0, 1]).unwrap(),
            vec![1.0, -1.0, 1.0]
        );
        assert!(Target::Label(3).weights(&[1, 0, 1]).is_err());
        for m in Method::ALL {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ranking_invariant_to_rollout_rescaling(
            raw in proptest::collection::vec(0.0f64..1.0, 33),
            scale in 0.01f64..100.0,
        ) {
            let model = small_model();
            let (s, _) = seqs(&model, 1);
            let a = AttributionMap::from_raw(&s[0], None, Method::GradAttnRoll, raw.clone());
            let b = AttributionMap::from_raw(
                &s[0], None, Method::GradAttnRoll, raw.iter().map(|x| x * scale).collect());
            for rho in [0.05, 0.1, 0.3, 1.0] {
                prop_assert_eq!(select_top_fraction(&a, rho), select_top_fraction(&b, rho));
            }
        }

        #[test]
        fn rollout_rows_sum_to_one(
            probs in proptest::collection::vec(0.01f64..1.0, 2 * 3 * 5 * 5),
            valid_mask in proptest::collection::vec(any::<bool>(), 4),
        ) {
            let valid: Vec<bool> = std::iter::once(true).chain(valid_mask).collect();
            let mut probs = probs;
            for row in probs.chunks_mut(5) {
                for (j, x) in row.iter_mut().enumerate() {
                    if !valid[j] { *x = 0.0; }
                }
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|x| *x /= s);
            }
            let stack = AttentionStack { layers: 2, heads: 3, seq: 5, probs };
            let r = attention_rollout(&stack, &valid).unwrap();
            for row in r.chunks(5) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}
