//! Pairwise interaction scores over set functions: the Shapley interaction
//! index (exact and Monte Carlo) and the redundancy-gap score, with a probe
//! that turns an expert and a sample into a set function by masking.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::num::NonZeroUsize;

use lru::LruCache;
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attribution::{fraction_count, select_top_fraction, AttributionMap};
use crate::model::{mask_features, FusionModel, JointSequence, ModelError, Segment};
use crate::seed::{derive_seed, rng_for};

#[derive(Debug, Error)]
pub enum InteractionError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("feature {index} outside a universe of {size}")]
    OutOfUniverse { index: usize, size: usize },
    #[error("pair features must differ, got ({0}, {0})")]
    SamePair(usize),
    #[error("feature {0} is already in the context coalition")]
    PairInContext(usize),
    #[error("exact enumeration supports at most {max} features, got {got}")]
    TooLarge { got: usize, max: usize },
    #[error("universe needs at least 2 features, got {0}")]
    TooSmall(usize),
    #[error("pair ({u}, {v}) is not cross-modal")]
    NotCrossModal { u: usize, v: usize },
    #[error("nothing to rank")]
    Empty,
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, InteractionError>;

pub const MAX_EXACT: usize = 20;

/// Bit set of active features over a universe of `n`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Coalition {
    n: usize,
    words: Vec<u64>,
}

impl Coalition {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            words: vec![0; n.div_ceil(64)],
        }
    }

    pub fn full(n: usize) -> Self {
        Self::from_members(n, 0..n)
    }

    pub fn from_members(n: usize, members: impl IntoIterator<Item = usize>) -> Self {
        let mut c = Self::empty(n);
        for i in members {
            c.insert(i);
        }
        c
    }

    pub fn universe_size(&self) -> usize {
        self.n
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.n && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn insert(&mut self, i: usize) {
        assert!(i < self.n, "feature {i} outside a universe of {}", self.n);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn with(&self, i: usize) -> Self {
        let mut c = self.clone();
        c.insert(i);
        c
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn members(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|&i| self.contains(i))
    }
}

/// A real-valued function of coalitions over a fixed universe.
pub trait SetFunction {
    fn universe_size(&self) -> usize;

    fn evaluate_many(&mut self, coalitions: &[Coalition]) -> Result<Vec<f64>>;

    fn evaluate(&mut self, s: &Coalition) -> Result<f64> {
        Ok(self.evaluate_many(std::slice::from_ref(s))?[0])
    }
}

/// Set function backed by a closure.
pub struct FnSet<F> {
    n: usize,
    f: F,
}

impl<F: FnMut(&Coalition) -> f64> FnSet<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: FnMut(&Coalition) -> f64> SetFunction for FnSet<F> {
    fn universe_size(&self) -> usize {
        self.n
    }

    fn evaluate_many(&mut self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        coalitions
            .iter()
            .map(|c| {
                check_subset(c, self.n)?;
                Ok((self.f)(c))
            })
            .collect()
    }
}

fn check_subset(c: &Coalition, n: usize) -> Result<()> {
    if c.universe_size() != n {
        return Err(InteractionError::Invalid(format!(
            "coalition over {} features for a universe of {n}",
            c.universe_size()
        )));
    }
    Ok(())
}

fn check_pair(n: usize, u: usize, v: usize) -> Result<()> {
    for i in [u, v] {
        if i >= n {
            return Err(InteractionError::OutOfUniverse { index: i, size: n });
        }
    }
    if u == v {
        return Err(InteractionError::SamePair(u));
    }
    Ok(())
}

/// The four coalitions of a discrete second derivative, in the order
/// `S∪{u,v}, S∪{u}, S∪{v}, S`.
fn delta_coalitions(s: &Coalition, u: usize, v: usize) -> [Coalition; 4] {
    let su = s.with(u);
    [su.with(v), su, s.with(v), s.clone()]
}

fn delta_of(values: &[f64]) -> f64 {
    values[0] - values[1] - values[2] + values[3]
}

/// `f(S∪{u,v}) − f(S∪{u}) − f(S∪{v}) + f(S)`.
pub fn delta_pair(f: &mut impl SetFunction, u: usize, v: usize, s: &Coalition) -> Result<f64> {
    check_pair(f.universe_size(), u, v)?;
    for i in [u, v] {
        if s.contains(i) {
            return Err(InteractionError::PairInContext(i));
        }
    }
    Ok(delta_of(&f.evaluate_many(&delta_coalitions(s, u, v))?))
}

/// Weight of a context coalition of size `k` in a universe of `n`:
/// `k!(n−k−2)!/(2·n!)`, computed as `1/(2n(n−1)·C(n−2, k))`.
pub fn sii_weight(n: usize, k: usize) -> f64 {
    let mut binom = 1.0;
    for i in 0..k {
        binom = binom * (n - 2 - i) as f64 / (i + 1) as f64;
    }
    1.0 / (2.0 * n as f64 * (n - 1) as f64 * binom)
}

/// Shapley interaction index by enumerating every context coalition.
pub fn sii_exact(f: &mut impl SetFunction, u: usize, v: usize) -> Result<f64> {
    let n = f.universe_size();
    if n > MAX_EXACT {
        return Err(InteractionError::TooLarge {
            got: n,
            max: MAX_EXACT,
        });
    }
    check_pair(n, u, v)?;
    let others: Vec<usize> = (0..n).filter(|&i| i != u && i != v).collect();
    let weights: Vec<f64> = (0..=others.len()).map(|k| sii_weight(n, k)).collect();
    let mut total = 0.0;
    let subsets = 1u64 << others.len();
    let mut mask = 0u64;
    while mask < subsets {
        let end = (mask + 256).min(subsets);
        let contexts: Vec<Coalition> = (mask..end)
            .map(|bits| {
                Coalition::from_members(
                    n,
                    others
                        .iter()
                        .enumerate()
                        .filter(|(j, _)| bits >> j & 1 == 1)
                        .map(|(_, &i)| i),
                )
            })
            .collect();
        let batch: Vec<Coalition> = contexts
            .iter()
            .flat_map(|s| delta_coalitions(s, u, v))
            .collect();
        let values = f.evaluate_many(&batch)?;
        for (s, vals) in contexts.iter().zip(values.chunks(4)) {
            total += weights[s.len()] * delta_of(vals);
        }
        mask = end;
    }
    Ok(total)
}

/// How Monte Carlo context coalitions are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Size uniform on `0..=n−2`, then a uniform coalition of that size.
    /// The scaled mean targets the exact index.
    #[default]
    Stratified,
    /// Every other feature joins independently with probability 1/2; the
    /// estimate is the plain mean of the second differences.
    Uniform,
}

impl std::str::FromStr for Sampling {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "stratified" => Ok(Sampling::Stratified),
            "uniform" => Ok(Sampling::Uniform),
            other => Err(format!("unknown sampling {other:?} (stratified|uniform)")),
        }
    }
}

impl std::fmt::Display for Sampling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Sampling::Stratified => "stratified",
            Sampling::Uniform => "uniform",
        })
    }
}

fn draw_contexts(
    n: usize,
    u: usize,
    v: usize,
    count: usize,
    sampling: Sampling,
    seed: u64,
) -> Vec<Coalition> {
    let others: Vec<usize> = (0..n).filter(|&i| i != u && i != v).collect();
    let mut rng = rng_for(seed, &[0x5117]);
    (0..count)
        .map(|_| match sampling {
            Sampling::Stratified => {
                let k = rng.gen_range(0..=others.len());
                let picked = sample_indices(&mut rng, others.len(), k);
                Coalition::from_members(n, picked.into_iter().map(|j| others[j]))
            }
            Sampling::Uniform => {
                Coalition::from_members(n, others.iter().copied().filter(|_| rng.gen_bool(0.5)))
            }
        })
        .collect()
}

fn check_mc(n: usize, u: usize, v: usize, samples: usize) -> Result<()> {
    if n < 2 {
        return Err(InteractionError::TooSmall(n));
    }
    if samples == 0 {
        return Err(InteractionError::Invalid("need at least one sample".into()));
    }
    check_pair(n, u, v)
}

/// Monte Carlo Shapley interaction index; deterministic given `seed`.
pub fn sii_mc(
    f: &mut impl SetFunction,
    u: usize,
    v: usize,
    samples: usize,
    seed: u64,
    sampling: Sampling,
) -> Result<f64> {
    let n = f.universe_size();
    check_mc(n, u, v, samples)?;
    let contexts = draw_contexts(n, u, v, samples, sampling, seed);
    let batch: Vec<Coalition> = contexts
        .iter()
        .flat_map(|s| delta_coalitions(s, u, v))
        .collect();
    let values = f.evaluate_many(&batch)?;
    Ok(sii_from_values(&values, n, sampling))
}

fn sii_from_values(values: &[f64], n: usize, sampling: Sampling) -> f64 {
    let mean = values.chunks(4).map(delta_of).sum::<f64>() / (values.len() / 4) as f64;
    match sampling {
        Sampling::Stratified => mean / (2.0 * n as f64),
        Sampling::Uniform => mean,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapScore {
    pub base_mean: f64,
    pub span_mean: f64,
    pub r_red: f64,
}

/// Redundancy gap over contexts drawn uniformly from subsets of the other
/// features. Gains are measured against the same masked context:
/// `g_u = f(S∪{u}) − f(S)` and so on.
pub fn redundancy_gap(
    f: &mut impl SetFunction,
    u: usize,
    v: usize,
    samples: usize,
    seed: u64,
) -> Result<GapScore> {
    let n = f.universe_size();
    check_mc(n, u, v, samples)?;
    let contexts = draw_contexts(n, u, v, samples, Sampling::Uniform, seed ^ 0x6A9);
    let batch: Vec<Coalition> = contexts
        .iter()
        .flat_map(|s| delta_coalitions(s, u, v))
        .collect();
    Ok(gap_from_values(&f.evaluate_many(&batch)?))
}

fn gap_from_values(values: &[f64]) -> GapScore {
    let (mut base, mut span) = (0.0, 0.0);
    let count = (values.len() / 4) as f64;
    for vals in values.chunks(4) {
        let g_uv = vals[0] - vals[3];
        let g_max = (vals[1] - vals[3]).max(vals[2] - vals[3]);
        base += g_uv.min(g_max).max(0.0);
        span += (g_uv - g_max).abs();
    }
    let (base_mean, span_mean) = (base / count, span / count);
    GapScore {
        base_mean,
        span_mean,
        r_red: base_mean / (1.0 + span_mean),
    }
}

/// A feature of the joint sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Feature {
    pub modality: usize,
    /// Joint position.
    pub position: usize,
}

/// Top-ρ features per modality under one expert's attribution map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureUniverse {
    pub expert: usize,
    pub entries: Vec<Feature>,
    pub rho: f64,
}

impl FeatureUniverse {
    pub fn from_map(map: &AttributionMap, expert: usize, rho: f64) -> Result<Self> {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(InteractionError::Invalid(format!(
                "rho must lie in (0, 1], got {rho}"
            )));
        }
        let entries = select_top_fraction(map, rho)
            .into_iter()
            .enumerate()
            .flat_map(|(m, ps)| {
                ps.into_iter().map(move |position| Feature {
                    modality: m,
                    position,
                })
            })
            .collect();
        Ok(Self {
            expert,
            entries,
            rho,
        })
    }

    /// Explicit entries, validated against the layout of `seq`.
    pub fn from_entries(seq: &JointSequence, expert: usize, entries: Vec<Feature>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for e in &entries {
            let ok = seq.segments.get(e.position) == Some(&Segment::Modality(e.modality))
                && seq.valid[e.position];
            if !ok || !seen.insert(e.position) {
                return Err(InteractionError::Invalid(format!(
                    "position {} is not a distinct valid position of modality {}",
                    e.position, e.modality
                )));
            }
        }
        Ok(Self {
            expert,
            entries,
            rho: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, position: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.position == position)
    }

    /// Index pairs `(u, v)` with `u` in a lower-numbered modality than `v`.
    pub fn cross_modal_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, a) in self.entries.iter().enumerate() {
            for (j, b) in self.entries.iter().enumerate() {
                if a.modality < b.modality {
                    pairs.push((i, j));
                }
            }
        }
        pairs
    }
}

/// Which features a probe zeroes for an inactive coalition member.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskScope {
    /// Features outside the universe keep their values.
    #[default]
    Universe,
    /// Every valid non-CLS feature outside the coalition is zeroed.
    Global,
}

impl std::str::FromStr for MaskScope {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "universe" => Ok(MaskScope::Universe),
            "global" => Ok(MaskScope::Global),
            other => Err(format!("unknown mask scope {other:?} (universe|global)")),
        }
    }
}

impl std::fmt::Display for MaskScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskScope::Universe => "universe",
            MaskScope::Global => "global",
        })
    }
}

pub const PROBE_CACHE: usize = 1 << 16;

/// One expert's true-class score on one sample, as a function of which
/// universe features are active. CLS is always active.
pub struct ModelProbe<'m> {
    model: &'m FusionModel,
    expert: usize,
    seq: JointSequence,
    weights: Vec<f64>,
    universe: FeatureUniverse,
    scope: MaskScope,
    cache: LruCache<Coalition, f64>,
    hits: u64,
    misses: u64,
}

impl<'m> ModelProbe<'m> {
    /// `weights` select the explained score from the expert's logits.
    pub fn new(
        model: &'m FusionModel,
        expert: usize,
        seq: JointSequence,
        weights: Vec<f64>,
        universe: FeatureUniverse,
        scope: MaskScope,
    ) -> Result<Self> {
        if expert >= model.num_experts() {
            return Err(ModelError::UnknownExpert(expert).into());
        }
        if weights.len() != model.config().num_labels {
            return Err(InteractionError::Invalid(format!(
                "{} score weights for {} labels",
                weights.len(),
                model.config().num_labels
            )));
        }
        let universe =
            FeatureUniverse::from_entries(&seq, universe.expert, universe.entries).map(|u| {
                FeatureUniverse {
                    rho: universe.rho,
                    ..u
                }
            })?;
        Ok(Self {
            model,
            expert,
            seq,
            weights,
            universe,
            scope,
            cache: LruCache::new(NonZeroUsize::new(PROBE_CACHE).expect("nonzero")),
            hits: 0,
            misses: 0,
        })
    }

    pub fn universe(&self) -> &FeatureUniverse {
        &self.universe
    }

    pub fn cache_hits(&self) -> u64 {
        self.hits
    }

    pub fn cache_misses(&self) -> u64 {
        self.misses
    }

    /// The sequence seen by the expert for coalition `s`.
    pub fn masked_sequence(&self, s: &Coalition) -> Result<JointSequence> {
        check_subset(s, self.universe.len())?;
        let active: Vec<usize> = s
            .members()
            .map(|i| self.universe.entries[i].position)
            .collect();
        let zeroed: Vec<usize> = match self.scope {
            MaskScope::Universe => self
                .universe
                .entries
                .iter()
                .enumerate()
                .filter(|(i, _)| !s.contains(*i))
                .map(|(_, e)| e.position)
                .collect(),
            MaskScope::Global => (0..self.seq.num_modalities())
                .flat_map(|m| self.seq.valid_positions(m))
                .filter(|p| !active.contains(p))
                .collect(),
        };
        Ok(mask_features(&self.seq, &zeroed)?)
    }
}

impl SetFunction for ModelProbe<'_> {
    fn universe_size(&self) -> usize {
        self.universe.len()
    }

    fn evaluate_many(&mut self, coalitions: &[Coalition]) -> Result<Vec<f64>> {
        let mut out = vec![f64::NAN; coalitions.len()];
        let mut pending: Vec<&Coalition> = Vec::new();
        let mut waiting: HashMap<&Coalition, Vec<usize>> = HashMap::new();
        for (i, c) in coalitions.iter().enumerate() {
            if let Some(&v) = self.cache.get(c) {
                out[i] = v;
                self.hits += 1;
            } else {
                let slots = waiting.entry(c).or_default();
                if slots.is_empty() {
                    pending.push(c);
                } else {
                    self.hits += 1;
                }
                slots.push(i);
            }
        }
        self.misses += pending.len() as u64;
        for chunk in pending.chunks(64) {
            let seqs: Vec<JointSequence> = chunk
                .iter()
                .map(|c| self.masked_sequence(c))
                .collect::<Result<_>>()?;
            let refs: Vec<&JointSequence> = seqs.iter().collect();
            let logits = self.model.expert_predict(&refs, self.expert)?;
            for (c, z) in chunk.iter().zip(logits) {
                let value: f64 = z.iter().zip(&self.weights).map(|(a, b)| a * b).sum();
                for &i in &waiting[*c] {
                    out[i] = value;
                }
                self.cache.put((*c).clone(), value);
            }
        }
        Ok(out)
    }
}

/// Interaction scores of one cross-modal pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairInteraction {
    pub expert: usize,
    pub u: Feature,
    pub v: Feature,
    pub sii: f64,
    pub base_mean: f64,
    pub span_mean: f64,
    pub r_red: f64,
    pub n_samples: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairBudget {
    pub sii_samples: usize,
    pub gap_samples: usize,
    pub sampling: Sampling,
}

impl Default for PairBudget {
    fn default() -> Self {
        Self {
            sii_samples: 4,
            gap_samples: 4,
            sampling: Sampling::Stratified,
        }
    }
}

/// Seed of a pair, independent of the order in which pairs are scored.
pub fn pair_seed(seed: u64, sample: usize, expert: usize, u: Feature, v: Feature) -> u64 {
    derive_seed(
        seed,
        &[
            sample as u64,
            expert as u64,
            u.position as u64,
            v.position as u64,
        ],
    )
}

/// Scores the given universe index pairs on one probe. All evaluations go
/// through one batched call. A zero sample count skips that score and
/// reports it as 0.
pub fn score_pairs(
    probe: &mut ModelProbe<'_>,
    pairs: &[(usize, usize)],
    budget: &PairBudget,
    seed: u64,
    sample: usize,
) -> Result<Vec<PairInteraction>> {
    let n = probe.universe_size();
    let entries = probe.universe().entries.clone();
    let expert = probe.expert;
    let mut batch = Vec::new();
    let mut seeds = Vec::with_capacity(pairs.len());
    for &(u, v) in pairs {
        check_mc(n, u, v, budget.sii_samples + budget.gap_samples)?;
        if entries[u].modality == entries[v].modality {
            return Err(InteractionError::NotCrossModal { u, v });
        }
        let s = pair_seed(seed, sample, expert, entries[u], entries[v]);
        seeds.push(s);
        for ctx in draw_contexts(n, u, v, budget.sii_samples, budget.sampling, s) {
            batch.extend(delta_coalitions(&ctx, u, v));
        }
        for ctx in draw_contexts(n, u, v, budget.gap_samples, Sampling::Uniform, s ^ 0x6A9) {
            batch.extend(delta_coalitions(&ctx, u, v));
        }
    }
    let values = probe.evaluate_many(&batch)?;
    let per_pair = 4 * (budget.sii_samples + budget.gap_samples);
    Ok(pairs
        .iter()
        .zip(values.chunks(per_pair))
        .zip(seeds)
        .map(|((&(u, v), vals), seed)| {
            let (sii_vals, gap_vals) = vals.split_at(4 * budget.sii_samples);
            let gap = if gap_vals.is_empty() {
                GapScore {
                    base_mean: 0.0,
                    span_mean: 0.0,
                    r_red: 0.0,
                }
            } else {
                gap_from_values(gap_vals)
            };
            PairInteraction {
                expert,
                u: entries[u],
                v: entries[v],
                sii: if sii_vals.is_empty() {
                    0.0
                } else {
                    sii_from_values(sii_vals, n, budget.sampling)
                },
                base_mean: gap.base_mean,
                span_mean: gap.span_mean,
                r_red: gap.r_red,
                n_samples: budget.sii_samples,
                seed,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankKey {
    Sii,
    RRed,
}

impl RankKey {
    pub fn of(&self, p: &PairInteraction) -> f64 {
        match self {
            RankKey::Sii => p.sii,
            RankKey::RRed => p.r_red,
        }
    }
}

impl std::str::FromStr for RankKey {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sii" => Ok(RankKey::Sii),
            "r_red" => Ok(RankKey::RRed),
            other => Err(format!("unknown ranking key {other:?} (sii|r_red)")),
        }
    }
}

/// The top `ceil(q · count)` pairs by `key`, descending, ties by `(u, v)`.
pub fn rank_pairs(pairs: &[PairInteraction], key: RankKey, q: f64) -> Result<Vec<PairInteraction>> {
    if pairs.is_empty() {
        return Err(InteractionError::Empty);
    }
    let mut sorted = pairs.to_vec();
    sorted.sort_by(|a, b| {
        key.of(b)
            .total_cmp(&key.of(a))
            .then_with(|| (a.u, a.v).cmp(&(b.u, b.v)))
    });
    sorted.truncate(fraction_count(q, pairs.len()));
    Ok(sorted)
}

pub const REPORT_HEADER: &str =
    "expert\tu_modality\tu_pos\tv_modality\tv_pos\tsii\tbase_mean\tspan_mean\tr_red\tn_samples\tseed";

/// Tab-separated table, one row per pair. Positions are local to their
/// modality.
pub fn report_table(seq: &JointSequence, pairs: &[PairInteraction]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for p in pairs {
        let local = |f: Feature| seq.local(f.position).map_or(f.position, |(_, l)| l);
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{}\t{}",
            p.expert,
            p.u.modality,
            local(p.u),
            p.v.modality,
            local(p.v),
            p.sii,
            p.base_mean,
            p.span_mean,
            p.r_red,
            p.n_samples,
            p.seed
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use num_traits::{One, Zero};
    use proptest::prelude::*;

    fn and(u: usize, v: usize) -> impl FnMut(&Coalition) -> f64 {
        move |s| f64::from(u8::from(s.contains(u) && s.contains(v)))
    }

    fn additive(weights: Vec<f64>) -> impl FnMut(&Coalition) -> f64 {
        move |s| s.members().map(|i| weights[i]).sum()
    }

    /// Random bounded set function given as a lookup table.
    fn table(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &[n as u64]);
        (0..1usize << n)
            .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
            .collect()
    }

    /// Multilinear game with interaction order at most 3, coefficients
    /// uniform on [-1, 1], rescaled so that `max |f| = 1`.
    fn low_order_game(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_for(seed, &[0x6A3E, n as u64]);
        let mut f = vec![0.0; 1 << n];
        let mut add = |members: &[usize], rng: &mut rand_chacha::ChaCha8Rng| {
            let c: f64 = rand::Rng::gen_range(rng, -1.0..1.0);
            let t: usize = members.iter().map(|i| 1 << i).sum();
            for (mask, x) in f.iter_mut().enumerate() {
                if mask & t == t {
                    *x += c;
                }
            }
        };
        for i in 0..n {
            add(&[i], &mut rng);
        }
        for i in 0..n {
            for j in i + 1..n {
                add(&[i, j], &mut rng);
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    add(&[i, j, k], &mut rng);
                }
            }
        }
        let peak = f.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        f.iter().map(|x| x / peak).collect()
    }

    fn index(s: &Coalition) -> usize {
        s.members().map(|i| 1 << i).sum()
    }

    #[test]
    fn delta_truth_tables() {
        let mut f = FnSet::new(2, and(0, 1));
        assert_eq!(delta_pair(&mut f, 0, 1, &Coalition::empty(2)).unwrap(), 1.0);
        let mut f = FnSet::new(2, |s: &Coalition| f64::from(u8::from(!s.is_empty())));
        assert_eq!(
            delta_pair(&mut f, 0, 1, &Coalition::empty(2)).unwrap(),
            -1.0
        );
        let mut f = FnSet::new(4, additive(vec![0.3, -2.0, 5.0, 1.0]));
        assert_eq!(
            delta_pair(&mut f, 0, 1, &Coalition::from_members(4, [3])).unwrap(),
            0.0
        );
        assert!(matches!(
            delta_pair(&mut f, 0, 1, &Coalition::from_members(4, [1])),
            Err(InteractionError::PairInContext(1))
        ));
        assert!(matches!(
            delta_pair(&mut f, 2, 2, &Coalition::empty(4)),
            Err(InteractionError::SamePair(2))
        ));
    }

    #[test]
    fn exact_hand_values() {
        let mut xor = FnSet::new(2, |s: &Coalition| f64::from(u8::from(s.len() == 2)));
        assert!((sii_exact(&mut xor, 0, 1).unwrap() - 0.25).abs() < 1e-12);
        let mut f = FnSet::new(3, and(0, 1));
        assert!((sii_exact(&mut f, 0, 1).unwrap() - 1.0 / 6.0).abs() < 1e-12);
        let mut f = FnSet::new(3, additive(vec![1.0, 2.0, -4.0]));
        for (u, v) in [(0, 1), (0, 2), (1, 2)] {
            assert_eq!(sii_exact(&mut f, u, v).unwrap(), 0.0);
        }
        let mut big = FnSet::new(21, |_: &Coalition| 0.0);
        assert!(matches!(
            sii_exact(&mut big, 0, 1),
            Err(InteractionError::TooLarge { .. })
        ));
    }

    #[test]
    fn weight_identity_in_rationals() {
        let fact = |k: usize| {
            (1..=k).fold(BigRational::one(), |a, i| {
                a * BigRational::from_integer(i.into())
            })
        };
        for n in 2..=12usize {
            let mut total = BigRational::zero();
            for k in 0..=n - 2 {
                let count = fact(n - 2) / (fact(k) * fact(n - 2 - k));
                total += count * fact(k) * fact(n - k - 2)
                    / (BigRational::from_integer(2.into()) * fact(n));
            }
            assert_eq!(total, BigRational::new(1.into(), (2 * n).into()));
            let float: f64 = (0..=n - 2)
                .map(|k| {
                    sii_weight(n, k)
                        * (fact(n - 2) / (fact(k) * fact(n - 2 - k)))
                            .to_integer()
                            .to_string()
                            .parse::<f64>()
                            .unwrap()
                })
                .sum();
            assert!((float - 1.0 / (2.0 * n as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn mc_single_coalition_case() {
        for samples in [1, 7, 100] {
            let mut xor = FnSet::new(2, |s: &Coalition| f64::from(u8::from(s.len() == 2)));
            assert_eq!(
                sii_mc(&mut xor, 0, 1, samples, 3, Sampling::Stratified).unwrap(),
                0.25
            );
        }
    }

    #[test]
    fn mc_additive_is_exactly_zero() {
        let mut f = FnSet::new(
            9,
            additive((0..9).map(|i| i as f64 * 0.375 - 1.0).collect()),
        );
        for sampling in [Sampling::Stratified, Sampling::Uniform] {
            assert_eq!(sii_mc(&mut f, 2, 5, 300, 1, sampling).unwrap(), 0.0);
        }
    }

    #[test]
    fn mc_matches_exact_on_random_functions() {
        let n = 10;
        for fseed in 0..4 {
            let t = low_order_game(n, fseed);
            let mut f = FnSet::new(n, |s: &Coalition| t[index(s)]);
            let exact = sii_exact(&mut f, 1, 7).unwrap();
            let est = sii_mc(&mut f, 1, 7, 2000, fseed, Sampling::Stratified).unwrap();
            assert!(
                (est - exact).abs() <= 0.05 * exact.abs().max(0.01),
                "{est} vs {exact}"
            );
        }
    }

    #[test]
    fn gap_closed_forms() {
        let mut dup = FnSet::new(2, |s: &Coalition| f64::from(u8::from(!s.is_empty())));
        assert_eq!(
            redundancy_gap(&mut dup, 0, 1, 4, 0).unwrap(),
            GapScore {
                base_mean: 1.0,
                span_mean: 0.0,
                r_red: 1.0
            }
        );
        let mut xor = FnSet::new(2, |s: &Coalition| f64::from(u8::from(s.len() == 2)));
        assert_eq!(
            redundancy_gap(&mut xor, 0, 1, 4, 0).unwrap(),
            GapScore {
                base_mean: 0.0,
                span_mean: 1.0,
                r_red: 0.0
            }
        );
        let mut add = FnSet::new(2, |s: &Coalition| s.len() as f64);
        assert_eq!(
            redundancy_gap(&mut add, 0, 1, 4, 0).unwrap(),
            GapScore {
                base_mean: 1.0,
                span_mean: 1.0,
                r_red: 0.5
            }
        );
    }

    #[test]
    fn ranking_rules() {
        let pair = |u: usize, v: usize, sii: f64| PairInteraction {
            expert: 2,
            u: Feature {
                modality: 0,
                position: u,
            },
            v: Feature {
                modality: 1,
                position: v,
            },
            sii,
            base_mean: 0.0,
            span_mean: 0.0,
            r_red: 0.0,
            n_samples: 1,
            seed: 0,
        };
        let pairs = vec![pair(1, 20, 0.1), pair(2, 20, 0.3)];
        assert_eq!(
            rank_pairs(&pairs, RankKey::Sii, 0.5).unwrap(),
            vec![pairs[1].clone()]
        );
        assert_eq!(rank_pairs(&pairs, RankKey::Sii, 1.0).unwrap().len(), 2);
        let tied = vec![pair(3, 18, 0.0), pair(1, 19, 0.0), pair(1, 18, 0.0)];
        let ranked = rank_pairs(&tied, RankKey::RRed, 1.0).unwrap();
        let order: Vec<_> = ranked
            .iter()
            .map(|p| (p.u.position, p.v.position))
            .collect();
        assert_eq!(order, vec![(1, 18), (1, 19), (3, 18)]);
        assert!(matches!(
            rank_pairs(&[], RankKey::Sii, 1.0),
            Err(InteractionError::Empty)
        ));
    }

    mod probe {
        use super::*;
        use crate::model::ModelConfig;
        use crate::synthdata::{generate, GenSpec};

        fn setup() -> (FusionModel, JointSequence, FeatureUniverse) {
            let model = FusionModel::new(ModelConfig::default(), 5).unwrap();
            let s = generate(&GenSpec {
                n_samples: 1,
                ..GenSpec::default()
            })
            .unwrap();
            let seq = model.encode_sample(&s[0]).unwrap();
            let entries = [1, 2, 3, 17, 18, 19]
                .into_iter()
                .map(|p| Feature {
                    modality: usize::from(p > 16),
                    position: p,
                })
                .collect();
            let universe = FeatureUniverse::from_entries(&seq, 2, entries).unwrap();
            (model, seq, universe)
        }

        #[test]
        fn probe_semantics_and_cache() {
            let (model, seq, universe) = setup();
            let w = vec![0.0, 0.0, 1.0];
            let mut probe = ModelProbe::new(
                &model,
                2,
                seq.clone(),
                w.clone(),
                universe.clone(),
                MaskScope::Universe,
            )
            .unwrap();
            let full = probe.evaluate(&Coalition::full(6)).unwrap();
            assert_eq!(full, model.expert_predict(&[&seq], 2).unwrap()[0][2]);
            let none = probe.evaluate(&Coalition::empty(6)).unwrap();
            let zeroed = mask_features(&seq, &[1, 2, 3, 17, 18, 19]).unwrap();
            assert_eq!(none, model.expert_predict(&[&zeroed], 2).unwrap()[0][2]);
            let misses = probe.cache_misses();
            let again = probe.evaluate(&Coalition::full(6)).unwrap();
            assert_eq!(again.to_bits(), full.to_bits());
            assert_eq!(probe.cache_hits(), 1);
            assert_eq!(probe.cache_misses(), misses);
            assert!(probe.evaluate(&Coalition::empty(5)).is_err());

            let global =
                ModelProbe::new(&model, 2, seq.clone(), w, universe, MaskScope::Global).unwrap();
            let masked = global.masked_sequence(&Coalition::full(6)).unwrap();
            let kept: Vec<usize> = (1..seq.len())
                .filter(|&p| masked.features.row(p).iter().any(|&x| x != 0.0))
                .collect();
            assert_eq!(kept, vec![1, 2, 3, 17, 18, 19]);
        }

        #[test]
        fn scored_pairs_match_standalone_estimators() {
            let (model, seq, universe) = setup();
            let pairs = universe.cross_modal_pairs();
            assert_eq!(pairs.len(), 9);
            let mut probe = ModelProbe::new(
                &model,
                2,
                seq.clone(),
                vec![0.0, 0.0, 1.0],
                universe,
                MaskScope::Universe,
            )
            .unwrap();
            let budget = PairBudget {
                sii_samples: 6,
                gap_samples: 5,
                sampling: Sampling::Stratified,
            };
            let scored = score_pairs(&mut probe, &pairs, &budget, 11, 0).unwrap();
            for (p, &(u, v)) in scored.iter().zip(&pairs) {
                let sii = sii_mc(&mut probe, u, v, 6, p.seed, Sampling::Stratified).unwrap();
                let gap = redundancy_gap(&mut probe, u, v, 5, p.seed).unwrap();
                assert_eq!(p.sii, sii);
                assert_eq!(p.r_red, gap.r_red);
                assert!(p.r_red >= 0.0 && p.r_red <= p.base_mean);
            }
            let table = report_table(&seq, &scored);
            assert_eq!(table.lines().count(), 10);
            assert!(table.lines().nth(1).unwrap().starts_with("2\t0\t0\t1\t0\t"));
        }

        #[test]
        fn same_modality_pair_rejected() {
            let (model, seq, universe) = setup();
            let mut probe = ModelProbe::new(
                &model,
                2,
                seq,
                vec![0.0, 0.0, 1.0],
                universe,
                MaskScope::Universe,
            )
            .unwrap();
            assert!(matches!(
                score_pairs(&mut probe, &[(0, 1)], &PairBudget::default(), 0, 0),
                Err(InteractionError::NotCrossModal { .. })
            ));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn exact_is_scale_equivariant(seed in 0u64..1000, c in 0.1f64..10.0, n in 3usize..8) {
            let t = table(n, seed);
            let mut f = FnSet::new(n, |s: &Coalition| t[index(s)]);
            let mut g = FnSet::new(n, |s: &Coalition| c * t[index(s)]);
            let a = sii_exact(&mut f, 0, n - 1).unwrap();
            let b = sii_exact(&mut g, 0, n - 1).unwrap();
            prop_assert!((b - c * a).abs() <= 1e-12 * (1.0 + (c * a).abs()));
        }

        #[test]
        fn gap_is_bounded(seed in 0u64..1000, n in 2usize..8, samples in 1usize..20) {
            let t = table(n, seed);
            let mut f = FnSet::new(n, |s: &Coalition| t[index(s)]);
            let g = redundancy_gap(&mut f, 0, 1, samples, seed).unwrap();
            prop_assert!(g.r_red >= 0.0 && g.r_red <= g.base_mean);
        }

        #[test]
        fn stratified_mc_is_unbiased_in_the_limit_of_enumeration(seed in 0u64..200) {
            // n = 3: every stratum holds one coalition per size, so with
            // enough samples the estimate concentrates on the exact value
            let t = table(3, seed);
            let mut f = FnSet::new(3, |s: &Coalition| t[index(s)]);
            let exact = sii_exact(&mut f, 0, 2).unwrap();
            let est = sii_mc(&mut f, 0, 2, 20_000, seed, Sampling::Stratified).unwrap();
            prop_assert!((est - exact).abs() < 0.02);
        }
    }
}
