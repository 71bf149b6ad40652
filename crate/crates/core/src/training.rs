//! Training loop: mixture cross-entropy plus a role-specialization loss
//! built from single-modality ablation views, optimized with Adam.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{MetricError, Metrics};
use crate::model::{
    ablate_modality, ExpertRole, ForwardPlan, FusionModel, JointSequence, ModelError,
};
use crate::seed::rng_for;
use crate::synthdata::Sample;
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("encoder parameters changed during training")]
    EncoderDrift,
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_int: f64,
    pub seed: u64,
    /// Stop once this many epochs pass without a new best validation score.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 15,
            lambda_int: 0.5,
            seed: 1,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.lambda_int >= 0.0 && self.lambda_int.is_finite()) {
            return Err(TrainError::Config(format!(
                "interaction weight must be non-negative, got {}",
                self.lambda_int
            )));
        }
        Ok(())
    }
}

/// Encoded examples with their label targets.
#[derive(Clone, Debug)]
pub struct EncodedSet {
    pub seqs: Vec<JointSequence>,
    pub labels: Vec<[u8; 3]>,
}

impl EncodedSet {
    pub fn new(model: &FusionModel, samples: &[Sample]) -> Result<Self> {
        Ok(Self {
            seqs: samples
                .iter()
                .map(|s| model.encode_sample(s))
                .collect::<std::result::Result<_, _>>()?,
            labels: samples.iter().map(|s| s.labels).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }
}

/// Scalar handles of one recorded objective.
#[derive(Clone, Copy, Debug)]
pub struct Objective {
    pub total: Var,
    pub task: Var,
    pub interaction: Option<Var>,
}

fn targets(labels: &[[u8; 3]]) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|l| l.iter().map(|&b| f64::from(b)))
        .collect()
}

/// Records the full objective for one batch:
/// `task + λ · interaction`, where `task` is the mean per-label binary
/// cross-entropy of the mixture.
///
/// The interaction term sums, per modality `m` with `m` zeroed out as the
/// ablated view: the unique expert's CE on the full input, the redundancy
/// expert's CE on the full and every ablated view, and the synergy expert's
/// CE on the full view plus the KL divergence of its ablated predictions
/// from the uniform distribution.
pub fn record_objective(
    model: &FusionModel,
    tape: &mut Tape,
    params: &[Var],
    seqs: &[&JointSequence],
    labels: &[[u8; 3]],
    lambda_int: f64,
) -> Result<Objective> {
    let y = targets(labels);
    let with_interaction = lambda_int > 0.0 && model.num_experts() > 1;
    let feats = tape.constant(FusionModel::stack_features(seqs));
    let plan = ForwardPlan {
        experts: (0..model.num_experts()).collect(),
        gate: model.num_experts() > 1,
        full_attention: false,
    };
    let full = model.forward_on_tape(tape, params, feats, seqs, &plan)?;
    let mixture = full.mixture.expect("full plan yields a mixture");
    let task = tape.bce_with_logits(mixture, &y)?;
    if !with_interaction {
        return Ok(Objective {
            total: task,
            task,
            interaction: None,
        });
    }

    let roles = model.roles();
    let m_count = model.config().num_modalities();
    let syn = model
        .expert_index(ExpertRole::Synergy)
        .expect("synergy expert");
    let red = model
        .expert_index(ExpertRole::Redundancy)
        .expect("redundancy expert");
    let mut terms = Vec::new();
    for &(e, logits) in &full.expert_logits {
        if matches!(
            roles[e],
            ExpertRole::Unique(_) | ExpertRole::Synergy | ExpertRole::Redundancy
        ) {
            terms.push((tape.bce_with_logits(logits, &y)?, 1.0));
        }
    }

    // Ablated views of every modality stacked into one batch.
    let ablated: Vec<JointSequence> = (0..m_count)
        .flat_map(|m| seqs.iter().map(move |s| ablate_modality(s, m)))
        .collect();
    let ablated_refs: Vec<&JointSequence> = ablated.iter().collect();
    let ablated_feats = tape.constant(FusionModel::stack_features(&ablated_refs));
    let plan = ForwardPlan {
        experts: vec![syn, red],
        gate: false,
        full_attention: false,
    };
    let views = model.forward_on_tape(tape, params, ablated_feats, &ablated_refs, &plan)?;
    let y_stacked: Vec<f64> = y.iter().copied().cycle().take(y.len() * m_count).collect();
    // Means over the stacked batch, rescaled to a sum over modalities.
    let red_ce = tape.bce_with_logits(views.expert_logits[1].1, &y_stacked)?;
    terms.push((red_ce, m_count as f64));
    let syn_kl = tape.kl_to_uniform(views.expert_logits[0].1)?;
    terms.push((syn_kl, m_count as f64));

    let interaction = tape.combine(&terms)?;
    let total = tape.combine(&[(task, 1.0), (interaction, lambda_int)])?;
    Ok(Objective {
        total,
        task,
        interaction: Some(interaction),
    })
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub per_label_accuracy: Vec<f64>,
    pub micro_f1: f64,
    pub macro_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

/// Mean per-label BCE of the mixture and metrics over a whole set.
pub fn evaluate(model: &FusionModel, set: &EncodedSet) -> Result<(f64, Metrics)> {
    let logits = model.predict(&set.seqs)?;
    let y = targets(&set.labels);
    let flat: Vec<f64> = logits.iter().flatten().copied().collect();
    let loss = flat
        .iter()
        .zip(&y)
        .map(|(&z, &t)| crate::tensor::softplus(z) - t * z)
        .sum::<f64>()
        / flat.len() as f64;
    Ok((loss, Metrics::from_logits(&logits, &set.labels)?))
}

/// Trains `model` in place and leaves it holding the parameters of the
/// epoch with the best mean validation accuracy.
pub fn train(
    model: &mut FusionModel,
    train_set: &EncodedSet,
    val_set: &EncodedSet,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(TrainError::Config(
            "empty training or validation set".into(),
        ));
    }
    let encoder_checksum = model.encoders().checksum();
    let mut adam = Adam::new(cfg.learning_rate, model.params().tensors());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = TrainLog {
        best_val_accuracy: f64::NEG_INFINITY,
        ..TrainLog::default()
    };
    let mut best_params = model.params().clone();
    let mut since_best = 0;

    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &[0x7EA1, epoch as u64]));
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let seqs: Vec<&JointSequence> = chunk.iter().map(|&i| &train_set.seqs[i]).collect();
            let labels: Vec<[u8; 3]> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let diverged = |detail: String| TrainError::Diverged {
                epoch,
                step,
                detail,
            };
            let mut tape = Tape::new();
            let params = model.param_leaves(&mut tape, true);
            let objective =
                record_objective(model, &mut tape, &params, &seqs, &labels, cfg.lambda_int)
                    .map_err(|e| diverged(e.to_string()))?;
            let loss = tape.value(objective.total).data()[0];
            tape.backward(objective.total)
                .map_err(|e| diverged(e.to_string()))?;
            let grads: Vec<Option<&Tensor>> = params.iter().map(|&p| tape.grad(p)).collect();
            if let Some(bad) = grads
                .iter()
                .zip(model.params().names())
                .find(|(g, _)| g.is_some_and(|g| !g.is_finite()))
            {
                return Err(diverged(format!("non-finite gradient for {}", bad.1)));
            }
            adam.update(model.params_mut().tensors_mut(), &grads);
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let (val_loss, val) = evaluate(model, val_set)?;
        for (split, loss, metrics) in [("train", train_loss, None), ("val", val_loss, Some(&val))] {
            let record = EpochRecord {
                epoch,
                split: split.into(),
                loss,
                per_label_accuracy: metrics
                    .map(|m| m.per_label_accuracy.clone())
                    .unwrap_or_default(),
                micro_f1: metrics.map_or(f64::NAN, |m| m.micro_f1),
                macro_f1: metrics.map_or(f64::NAN, |m| m.macro_f1),
            };
            on_epoch(&record);
            log.records.push(record);
        }
        if val.mean_accuracy > log.best_val_accuracy {
            log.best_val_accuracy = val.mean_accuracy;
            log.best_epoch = epoch;
            best_params = model.params().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    *model.params_mut() = best_params;
    if model.encoders().checksum() != encoder_checksum {
        return Err(TrainError::EncoderDrift);
    }
    Ok(log)
}
