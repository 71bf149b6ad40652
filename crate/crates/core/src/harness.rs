//! Evaluation protocols: top-K% faithfulness drop curves, alignment of
//! importance bins with interaction scores, and pair-level masking.

use std::fmt::Write as _;

use rand::seq::index::sample as sample_indices;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{
    attribute, fraction_count, select_top_fraction, AttributionError, AttributionMap,
    AttributionOptions, Method, Scope, Target,
};
use crate::interaction::{
    rank_pairs, score_pairs, Feature, FeatureUniverse, InteractionError, MaskScope, ModelProbe,
    PairBudget, PairInteraction, RankKey,
};
use crate::metrics::{MetricError, Metrics};
use crate::model::{mask_features, ExpertRole, FusionModel, JointSequence, ModelError};
use crate::seed::rng_for;
use crate::training::EncodedSet;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attribution(#[from] AttributionError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error(
        "expert {expert} ({role}) has no interaction metric; use the synergy or redundancy expert"
    )]
    NoInteractionMetric { expert: usize, role: ExpertRole },
    #[error("sample {0} has an empty candidate pair pool")]
    EmptyPool(usize),
    #[error("{0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn metric_of(
    model: &FusionModel,
    seqs: &[JointSequence],
    labels: &[[u8; 3]],
    name: &str,
) -> Result<f64> {
    let m = Metrics::from_logits(&model.predict(seqs)?, labels)?;
    m.get(name)
        .ok_or_else(|| HarnessError::UnknownMetric(name.to_string()))
}

/// Attribution maps for `ids`, computed in parallel chunks.
pub fn maps_for(
    model: &FusionModel,
    set: &EncodedSet,
    ids: &[usize],
    scope: Scope,
    method: Method,
    target: Target,
    opts: &AttributionOptions,
) -> Result<Vec<AttributionMap>> {
    let chunks: Vec<Vec<AttributionMap>> = ids
        .par_chunks(opts.chunk.max(1))
        .map(|chunk| {
            let seqs: Vec<&JointSequence> = chunk.iter().map(|&i| &set.seqs[i]).collect();
            let labels: Vec<[u8; 3]> = chunk.iter().map(|&i| set.labels[i]).collect();
            attribute(model, &seqs, &labels, chunk, scope, method, target, opts)
        })
        .collect::<std::result::Result<_, _>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Zeroes the positions selected per modality.
fn mask_selected(seq: &JointSequence, selected: &[Vec<usize>]) -> Result<JointSequence> {
    let flat: Vec<usize> = selected.iter().flatten().copied().collect();
    Ok(mask_features(seq, &flat)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropPoint {
    /// Percent of each modality's valid positions that were masked.
    pub k: f64,
    pub m_masked: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropCurve {
    pub method: Method,
    pub metric: String,
    pub m_base: f64,
    /// Seed-averaged points, ascending in `k`.
    pub points: Vec<DropPoint>,
    pub per_seed: Vec<Vec<DropPoint>>,
    pub seeds: Vec<u64>,
}

impl DropCurve {
    /// Mean drop over every K and seed.
    pub fn summary(&self) -> f64 {
        self.points.iter().map(|p| p.delta).sum::<f64>() / self.points.len().max(1) as f64
    }

    pub const CSV_HEADER: &'static str = "method,metric,k,m_base,m_masked,delta_m";

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6}",
                self.method, self.metric, p.k, self.m_base, p.m_masked, p.delta
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    /// Percentages, ascending.
    pub ks: Vec<f64>,
    pub seeds: Vec<u64>,
    pub metric: String,
    pub attribution: AttributionOptions,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ks: vec![5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            seeds: vec![1, 2, 3],
            metric: "micro_f1".into(),
            attribution: AttributionOptions::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.seeds.is_empty() {
            return Err(HarnessError::Config(
                "need at least one K and one seed".into(),
            ));
        }
        if self.ks.iter().any(|k| !(0.0..=100.0).contains(k)) {
            return Err(HarnessError::Config("K values must lie in [0, 100]".into()));
        }
        if self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(HarnessError::Config(
                "K values must be strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Masks each sample's top-K% positions per modality under `method`'s
/// model-level maps and records the metric drop. Deterministic methods
/// yield the same maps for every seed, so their masked metrics are computed
/// once.
pub fn faithfulness_sweep(
    model: &FusionModel,
    set: &EncodedSet,
    method: Method,
    cfg: &SweepConfig,
) -> Result<DropCurve> {
    cfg.validate()?;
    let m_base = metric_of(model, &set.seqs, &set.labels, &cfg.metric)?;
    let ids: Vec<usize> = (0..set.len()).collect();
    let masked_curve = |maps: &[AttributionMap]| -> Result<Vec<DropPoint>> {
        cfg.ks
            .iter()
            .map(|&k| {
                let masked: Vec<JointSequence> = set
                    .seqs
                    .par_iter()
                    .zip(maps)
                    .map(|(seq, map)| mask_selected(seq, &select_top_fraction(map, k / 100.0)))
                    .collect::<Result<_>>()?;
                let m_masked = metric_of(model, &masked, &set.labels, &cfg.metric)?;
                Ok(DropPoint {
                    k,
                    m_masked,
                    delta: m_base - m_masked,
                })
            })
            .collect()
    };
    let per_seed = if method == Method::Random {
        cfg.seeds
            .iter()
            .map(|&seed| {
                let opts = AttributionOptions {
                    seed,
                    ..cfg.attribution.clone()
                };
                let maps = maps_for(
                    model,
                    set,
                    &ids,
                    Scope::Model,
                    method,
                    Target::AllLabels,
                    &opts,
                )?;
                masked_curve(&maps)
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        let maps = maps_for(
            model,
            set,
            &ids,
            Scope::Model,
            method,
            Target::AllLabels,
            &cfg.attribution,
        )?;
        vec![masked_curve(&maps)?; cfg.seeds.len()]
    };
    let points = cfg
        .ks
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let n = per_seed.len() as f64;
            let m_masked = per_seed.iter().map(|c| c[i].m_masked).sum::<f64>() / n;
            DropPoint {
                k,
                m_masked,
                delta: per_seed.iter().map(|c| c[i].delta).sum::<f64>() / n,
            }
        })
        .collect();
    Ok(DropCurve {
        method,
        metric: cfg.metric.clone(),
        m_base,
        points,
        per_seed,
        seeds: cfg.seeds.clone(),
    })
}

fn interaction_key(model: &FusionModel, expert: usize) -> Result<(ExpertRole, RankKey)> {
    let role = *model
        .roles()
        .get(expert)
        .ok_or(ModelError::UnknownExpert(expert))?;
    match role {
        ExpertRole::Synergy => Ok((role, RankKey::Sii)),
        ExpertRole::Redundancy => Ok((role, RankKey::RRed)),
        _ => Err(HarnessError::NoInteractionMetric { expert, role }),
    }
}

/// Seeded subsample of `count` indices out of `len`, ascending.
pub fn subsample(len: usize, count: usize, seed: u64) -> Vec<usize> {
    if count >= len {
        return (0..len).collect();
    }
    let mut rng = rng_for(seed, &[0xB1A5]);
    let mut ids = sample_indices(&mut rng, len, count).into_vec();
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinConfig {
    /// Cumulative upper edges of the importance bins, as fractions.
    pub edges: Vec<f64>,
    pub qs: Vec<f64>,
    pub budget: PairBudget,
    pub subsample: usize,
    pub seed: u64,
    pub scope: MaskScope,
    pub attribution: AttributionOptions,
}

impl Default for BinConfig {
    fn default() -> Self {
        Self {
            edges: vec![0.1, 0.2, 0.3],
            qs: vec![0.05, 0.1, 0.2],
            budget: PairBudget::default(),
            subsample: 32,
            seed: 1,
            scope: MaskScope::Universe,
            attribution: AttributionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QMean {
    pub q: f64,
    pub mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinSummary {
    pub label: String,
    pub pairs: usize,
    pub empty: bool,
    pub means: Vec<QMean>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub expert: usize,
    pub role: String,
    pub key: RankKey,
    pub bins: Vec<BinSummary>,
    pub samples: Vec<usize>,
    pub seed: u64,
}

impl BinReport {
    pub const CSV_HEADER: &'static str = "expert,role,key,seed,bin,q,mean,pairs";

    pub fn csv_rows(&self) -> String {
        let key = match self.key {
            RankKey::Sii => "sii",
            RankKey::RRed => "r_red",
        };
        let mut out = String::new();
        for b in &self.bins {
            for m in &b.means {
                let mean = m.mean.map_or("".to_string(), |x| format!("{x:.9e}"));
                let _ = writeln!(
                    out,
                    "{},{},{key},{},{},{},{mean},{}",
                    self.expert, self.role, self.seed, b.label, m.q, b.pairs
                );
            }
        }
        out
    }

    /// Mean over the top `q` pairs of each bin, in bin order.
    pub fn means_at(&self, q: f64) -> Vec<Option<f64>> {
        self.bins
            .iter()
            .map(|b| b.means.iter().find(|m| m.q == q).and_then(|m| m.mean))
            .collect()
    }
}

fn bin_label(lo: f64, hi: f64) -> String {
    let (lo, hi) = ((lo * 100.0).round() as u32, (hi * 100.0).round() as u32);
    if lo == 0 {
        format!("top-{hi}")
    } else {
        format!("{}-{hi}", lo + 1)
    }
}

/// Bin index of each selected position per modality: ranks in
/// `[ceil(e_{b-1}·n), ceil(e_b·n))` fall in bin `b`.
fn binned_features(map: &AttributionMap, edges: &[f64]) -> Vec<Vec<Feature>> {
    let top = edges.last().copied().unwrap_or(0.0);
    let ranked = select_top_fraction(map, top);
    let mut bins = vec![Vec::new(); edges.len()];
    for (m, positions) in ranked.iter().enumerate() {
        let n = map.modality_positions[m].len();
        let mut lo = 0;
        for (b, &e) in edges.iter().enumerate() {
            let hi = fraction_count(e, n).min(positions.len());
            for &position in &positions[lo.min(hi)..hi] {
                bins[b].push(Feature {
                    modality: m,
                    position,
                });
            }
            lo = hi;
        }
    }
    bins
}

fn universe_pairs(universe: &FeatureUniverse, members: &[Feature]) -> Vec<(usize, usize)> {
    let idx: Vec<usize> = members
        .iter()
        .filter_map(|f| universe.index_of(f.position))
        .collect();
    let mut pairs = Vec::new();
    for &i in &idx {
        for &j in &idx {
            if universe.entries[i].modality < universe.entries[j].modality {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Interaction scores of same-bin cross-modal pairs, pooled over a seeded
/// subsample and summarized by the mean over the top-q pairs of each bin.
pub fn bin_alignment(
    model: &FusionModel,
    expert: usize,
    set: &EncodedSet,
    cfg: &BinConfig,
) -> Result<BinReport> {
    let (role, key) = interaction_key(model, expert)?;
    if cfg.edges.is_empty() || cfg.edges.windows(2).any(|w| w[0] >= w[1]) || cfg.edges[0] <= 0.0 {
        return Err(HarnessError::Config(
            "bin edges must be positive and ascending".into(),
        ));
    }
    if *cfg.edges.last().expect("nonempty") > 1.0 {
        return Err(HarnessError::Config("bin edges must not exceed 1".into()));
    }
    let ids = subsample(set.len(), cfg.subsample, cfg.seed);
    let target = Target::for_role(role);
    let maps = maps_for(
        model,
        set,
        &ids,
        Scope::Expert(expert),
        Method::GradAttnRoll,
        target,
        &cfg.attribution,
    )?;
    let per_sample: Vec<Vec<Vec<PairInteraction>>> = ids
        .par_iter()
        .zip(&maps)
        .map(|(&id, map)| {
            let bins = binned_features(map, &cfg.edges);
            let universe = FeatureUniverse {
                expert,
                entries: bins.iter().flatten().copied().collect(),
                rho: *cfg.edges.last().expect("nonempty"),
            };
            let pair_sets: Vec<Vec<(usize, usize)>> =
                bins.iter().map(|b| universe_pairs(&universe, b)).collect();
            let all: Vec<(usize, usize)> = pair_sets.iter().flatten().copied().collect();
            if all.is_empty() {
                return Ok(vec![Vec::new(); bins.len()]);
            }
            let mut probe = ModelProbe::new(
                model,
                expert,
                set.seqs[id].clone(),
                target.weights(&set.labels[id])?,
                universe,
                cfg.scope,
            )?;
            let scored = score_pairs(&mut probe, &all, &cfg.budget, cfg.seed, id)?;
            let mut it = scored.into_iter();
            Ok(pair_sets
                .iter()
                .map(|p| it.by_ref().take(p.len()).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut lo = 0.0;
    let bins = cfg
        .edges
        .iter()
        .enumerate()
        .map(|(b, &hi)| {
            let pool: Vec<PairInteraction> = per_sample
                .iter()
                .flat_map(|s| s[b].iter().cloned())
                .collect();
            let label = bin_label(lo, hi);
            lo = hi;
            let means = cfg
                .qs
                .iter()
                .map(|&q| {
                    let mean = rank_pairs(&pool, key, q)
                        .ok()
                        .map(|top| top.iter().map(|p| key.of(p)).sum::<f64>() / top.len() as f64);
                    QMean { q, mean }
                })
                .collect();
            BinSummary {
                label,
                pairs: pool.len(),
                empty: pool.is_empty(),
                means,
            }
        })
        .collect();
    Ok(BinReport {
        expert,
        role: role.to_string(),
        key,
        bins,
        samples: ids,
        seed: cfg.seed,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairRule {
    Random,
    Sii,
    RRed,
}

impl std::str::FromStr for PairRule {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(PairRule::Random),
            "sii" => Ok(PairRule::Sii),
            "r_red" => Ok(PairRule::RRed),
            other => Err(format!("unknown pair rule {other:?} (random|sii|r_red)")),
        }
    }
}

impl std::fmt::Display for PairRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairRule::Random => "random",
            PairRule::Sii => "sii",
            PairRule::RRed => "r_red",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMaskConfig {
    /// Top fraction of positions per modality forming the candidate pool.
    pub pool_fraction: f64,
    /// Fraction of candidate pairs masked.
    pub budget: f64,
    pub seeds: Vec<u64>,
    pub subsample: usize,
    pub subsample_seed: u64,
    pub pair_budget: PairBudget,
    pub metric: String,
    pub scope: MaskScope,
    pub attribution: AttributionOptions,
}

impl Default for PairMaskConfig {
    fn default() -> Self {
        Self {
            pool_fraction: 0.1,
            budget: 0.05,
            seeds: vec![1, 2, 3, 4, 5],
            subsample: 64,
            subsample_seed: 1,
            pair_budget: PairBudget::default(),
            metric: "micro_f1".into(),
            scope: MaskScope::Universe,
            attribution: AttributionOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedDrop {
    pub seed: u64,
    pub m_after: f64,
    pub drop: f64,
    pub masked_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMaskReport {
    pub expert: usize,
    pub rule: PairRule,
    pub budget: f64,
    pub metric: String,
    pub m_before: f64,
    pub per_seed: Vec<SeedDrop>,
    pub samples: Vec<usize>,
}

impl PairMaskReport {
    pub fn mean_drop(&self) -> f64 {
        self.per_seed.iter().map(|s| s.drop).sum::<f64>() / self.per_seed.len().max(1) as f64
    }

    pub const CSV_HEADER: &'static str =
        "expert,rule,budget,metric,seed,m_before,m_after,drop,masked_pairs";

    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for s in &self.per_seed {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6},{:.6},{}",
                self.expert,
                self.rule,
                self.budget,
                self.metric,
                s.seed,
                self.m_before,
                s.m_after,
                s.drop,
                s.masked_pairs
            );
        }
        out
    }
}

/// Per sample, masks `ceil(budget · pool)` cross-modal pairs from the pool
/// built over the expert's top positions, chosen at random or by the
/// interaction score, and records the metric drop on the subsample.
pub fn pair_masking(
    model: &FusionModel,
    expert: usize,
    set: &EncodedSet,
    rule: PairRule,
    cfg: &PairMaskConfig,
) -> Result<PairMaskReport> {
    let role = *model
        .roles()
        .get(expert)
        .ok_or(ModelError::UnknownExpert(expert))?;
    if !(0.0..=1.0).contains(&cfg.budget) || !(cfg.pool_fraction > 0.0 && cfg.pool_fraction <= 1.0)
    {
        return Err(HarnessError::Config(
            "budget must lie in [0, 1] and pool fraction in (0, 1]".into(),
        ));
    }
    if cfg.seeds.is_empty() {
        return Err(HarnessError::Config("need at least one seed".into()));
    }
    let ids = subsample(set.len(), cfg.subsample, cfg.subsample_seed);
    let target = Target::for_role(role);
    let maps = maps_for(
        model,
        set,
        &ids,
        Scope::Expert(expert),
        Method::GradAttnRoll,
        target,
        &cfg.attribution,
    )?;
    let seqs: Vec<JointSequence> = ids.iter().map(|&i| set.seqs[i].clone()).collect();
    let labels: Vec<[u8; 3]> = ids.iter().map(|&i| set.labels[i]).collect();
    let m_before = metric_of(model, &seqs, &labels, &cfg.metric)?;
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let masked: Vec<(JointSequence, usize)> = ids
            .par_iter()
            .zip(&maps)
            .map(|(&id, map)| {
                let universe = FeatureUniverse::from_map(map, expert, cfg.pool_fraction)?;
                let pool = universe.cross_modal_pairs();
                if pool.is_empty() {
                    return Err(HarnessError::EmptyPool(id));
                }
                let count = fraction_count(cfg.budget, pool.len());
                let chosen: Vec<(usize, usize)> = match rule {
                    PairRule::Random => {
                        let mut rng = rng_for(seed, &[0x9A1F, id as u64]);
                        sample_indices(&mut rng, pool.len(), count)
                            .into_iter()
                            .map(|i| pool[i])
                            .collect()
                    }
                    PairRule::Sii | PairRule::RRed if count == 0 => Vec::new(),
                    PairRule::Sii | PairRule::RRed => {
                        let key = if rule == PairRule::Sii {
                            RankKey::Sii
                        } else {
                            RankKey::RRed
                        };
                        let mut probe = ModelProbe::new(
                            model,
                            expert,
                            set.seqs[id].clone(),
                            target.weights(&set.labels[id])?,
                            universe.clone(),
                            cfg.scope,
                        )?;
                        let scored = score_pairs(&mut probe, &pool, &cfg.pair_budget, seed, id)?;
                        rank_pairs(&scored, key, cfg.budget)?
                            .iter()
                            .map(|p| {
                                let u = universe
                                    .index_of(p.u.position)
                                    .expect("scored from universe");
                                let v = universe
                                    .index_of(p.v.position)
                                    .expect("scored from universe");
                                (u, v)
                            })
                            .collect()
                    }
                };
                let mut positions: Vec<usize> = chosen
                    .iter()
                    .flat_map(|&(u, v)| {
                        [universe.entries[u].position, universe.entries[v].position]
                    })
                    .collect();
                positions.sort_unstable();
                positions.dedup();
                Ok((mask_features(&set.seqs[id], &positions)?, chosen.len()))
            })
            .collect::<Result<_>>()?;
        let masked_pairs = masked.iter().map(|m| m.1).sum();
        let masked_seqs: Vec<JointSequence> = masked.into_iter().map(|m| m.0).collect();
        let m_after = metric_of(model, &masked_seqs, &labels, &cfg.metric)?;
        per_seed.push(SeedDrop {
            seed,
            m_after,
            drop: m_before - m_after,
            masked_pairs,
        });
    }
    Ok(PairMaskReport {
        expert,
        rule,
        budget: cfg.budget,
        metric: cfg.metric.clone(),
        m_before,
        per_seed,
        samples: ids,
    })
}
