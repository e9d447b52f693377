//! Conditional maximum-entropy models over binary indicator features.
//!
//! A model assigns `P(x | h) ∝ Π_{i active for (x, h)} λ_i`. Every history is
//! given as an [`EventBlock`]: the list of candidate outputs, each carrying the
//! sorted set of feature ids that fire for it. Products are accumulated as sums
//! of logarithms and normalized after subtracting the maximum, so models with
//! many active features neither overflow nor underflow.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};

pub type FeatureId = usize;

/// Weights `λ_i > 0`, one per feature id.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxentModel {
    weights: Vec<f64>,
    names: BTreeMap<FeatureId, String>,
}

impl MaxentModel {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        for (feature, &value) in weights.iter().enumerate() {
            if !(value > 0.0 && value.is_finite()) {
                return Err(Error::InvalidWeight { feature, value });
            }
        }
        Ok(Self {
            weights,
            names: BTreeMap::new(),
        })
    }

    /// All weights equal to one, i.e. the uniform conditional model.
    pub fn uniform(num_features: usize) -> Self {
        Self {
            weights: vec![1.0; num_features],
            names: BTreeMap::new(),
        }
    }

    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        Self::new(log_weights.iter().map(|w| w.exp()).collect())
    }

    pub fn num_features(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, id: FeatureId) -> f64 {
        self.weights[id]
    }

    pub fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }

    pub fn names(&self) -> &BTreeMap<FeatureId, String> {
        &self.names
    }

    pub fn set_name(&mut self, id: FeatureId, name: impl Into<String>) {
        self.names.insert(id, name.into());
    }

    pub fn with_names(mut self, names: BTreeMap<FeatureId, String>) -> Self {
        self.names = names;
        self
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }
}

/// One candidate output with its active features, sorted and duplicate free.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Candidate {
    pub label: String,
    active: Vec<FeatureId>,
}

impl Candidate {
    pub fn new(label: impl Into<String>, mut active: Vec<FeatureId>) -> Result<Self> {
        let label = label.into();
        active.sort_unstable();
        if let Some(w) = active.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::DuplicateFeature { label, feature: w[0] });
        }
        Ok(Self { label, active })
    }

    pub fn active(&self) -> &[FeatureId] {
        &self.active
    }

    pub fn contains(&self, id: FeatureId) -> bool {
        self.active.binary_search(&id).is_ok()
    }

    pub(crate) fn from_sorted(label: String, active: Vec<FeatureId>) -> Self {
        debug_assert!(active.windows(2).all(|w| w[0] < w[1]));
        Self { label, active }
    }
}

/// A single history: its candidate outputs and the label that was observed.
#[derive(Clone, Debug, PartialEq)]
pub struct EventBlock {
    pub id: String,
    true_label: String,
    true_index: usize,
    candidates: Vec<Candidate>,
}

impl EventBlock {
    pub fn new(id: impl Into<String>, true_label: impl Into<String>, candidates: Vec<Candidate>) -> Result<Self> {
        let id = id.into();
        let true_label = true_label.into();
        if candidates.is_empty() {
            return Err(Error::EmptyCandidates(id));
        }
        let mut seen = HashSet::new();
        for c in &candidates {
            if !seen.insert(c.label.as_str()) {
                return Err(Error::DuplicateLabel {
                    event: id,
                    label: c.label.clone(),
                });
            }
        }
        let true_index =
            candidates
                .iter()
                .position(|c| c.label == true_label)
                .ok_or_else(|| Error::MissingTrueLabel {
                    event: id.clone(),
                    label: true_label.clone(),
                })?;
        Ok(Self {
            id,
            true_label,
            true_index,
            candidates,
        })
    }

    pub fn true_label(&self) -> &str {
        &self.true_label
    }

    pub fn true_index(&self) -> usize {
        self.true_index
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn true_candidate(&self) -> &Candidate {
        &self.candidates[self.true_index]
    }

    pub(crate) fn candidates_mut(&mut self) -> &mut [Candidate] {
        &mut self.candidates
    }

    pub fn max_feature(&self) -> Option<FeatureId> {
        self.candidates.iter().filter_map(|c| c.active.last().copied()).max()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    events: Vec<EventBlock>,
    num_features: usize,
}

impl Dataset {
    pub fn new(events: Vec<EventBlock>, num_features: usize) -> Result<Self> {
        for e in &events {
            if let Some(max) = e.max_feature() {
                if max >= num_features {
                    return Err(Error::FeatureOutOfRange {
                        feature: max,
                        num_features,
                    });
                }
            }
        }
        Ok(Self { events, num_features })
    }

    /// Uses the smallest feature count that covers every referenced id.
    pub fn from_events(events: Vec<EventBlock>) -> Self {
        let num_features = events
            .iter()
            .filter_map(EventBlock::max_feature)
            .max()
            .map_or(0, |m| m + 1);
        Self { events, num_features }
    }

    pub fn events(&self) -> &[EventBlock] {
        &self.events
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn with_num_features(mut self, num_features: usize) -> Result<Self> {
        if num_features < self.num_features {
            let max = self.events.iter().filter_map(EventBlock::max_feature).max();
            if let Some(max) = max.filter(|&m| m >= num_features) {
                return Err(Error::FeatureOutOfRange {
                    feature: max,
                    num_features,
                });
            }
        }
        self.num_features = num_features;
        Ok(self)
    }

    pub(crate) fn events_mut(&mut self) -> &mut Vec<EventBlock> {
        &mut self.events
    }

    pub(crate) fn set_num_features(&mut self, num_features: usize) {
        self.num_features = num_features;
    }
}

/// A conditional distribution over candidate labels, in candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct Distribution {
    entries: Vec<(String, f64)>,
}

impl Distribution {
    pub fn new(entries: Vec<(String, f64)>) -> Self {
        Self { entries }
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.entries.iter().find(|(l, _)| l == label).map(|&(_, p)| p)
    }

    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn probs(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|&(_, p)| p)
    }

    pub fn total(&self) -> f64 {
        self.probs().sum()
    }

    /// Highest-probability label; exact ties go to the lexicographically first label.
    pub fn argmax(&self) -> Option<&str> {
        let mut best: Option<&(String, f64)> = None;
        for e in &self.entries {
            best = match best {
                Some(b) if b.1 > e.1 || (b.1 == e.1 && b.0 <= e.0) => Some(b),
                _ => Some(e),
            };
        }
        best.map(|(l, _)| l.as_str())
    }

    /// Half the L1 distance, matching labels by name. Missing labels count as 0.
    pub fn total_variation(&self, other: &Distribution) -> f64 {
        let mut sum = 0.0;
        for (label, p) in &self.entries {
            sum += (p - other.get(label).unwrap_or(0.0)).abs();
        }
        for (label, q) in &other.entries {
            if self.get(label).is_none() {
                sum += q.abs();
            }
        }
        0.5 * sum
    }
}

/// Per-feature real-valued totals (observed or expected indicator frequencies).
#[derive(Clone, Debug, PartialEq)]
pub struct CountVector(pub Vec<f64>);

impl std::ops::Deref for CountVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl CountVector {
    pub fn zeros(len: usize) -> Self {
        CountVector(vec![0.0; len])
    }

    pub fn add_assign(&mut self, other: &CountVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }
}

/// Iteration controls shared by the trainers.
#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub max_iters: usize,
    /// Maximum relative constraint residual `|E − O| / O` accepted as converged.
    pub tol: f64,
    pub seed: u64,
    pub record_trace: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            tol: 1e-6,
            seed: 0,
            record_trace: true,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid("tol must be positive"));
        }
        Ok(())
    }
}

/// Per-iteration record of a training run. Entry `k` describes the model
/// before update `k`; the last entry describes the returned model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainTrace {
    pub log_likelihood: Vec<f64>,
    pub residual: Vec<f64>,
    /// Number of parameter updates applied.
    pub iterations: usize,
    pub converged: bool,
}

impl TrainTrace {
    pub fn final_log_likelihood(&self) -> Option<f64> {
        self.log_likelihood.last().copied()
    }

    pub fn final_residual(&self) -> Option<f64> {
        self.residual.last().copied()
    }

    /// Largest drop between consecutive log-likelihood entries (0 when monotone).
    pub fn max_decrease(&self) -> f64 {
        self.log_likelihood.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
    }
}

fn check_ids(num_features: usize, candidates: &[Candidate]) -> Result<()> {
    for c in candidates {
        if let Some(&max) = c.active.last() {
            if max >= num_features {
                return Err(Error::FeatureOutOfRange {
                    feature: max,
                    num_features,
                });
            }
        }
    }
    Ok(())
}

/// Normalized probabilities for `candidates` under log-weights, in candidate order.
pub(crate) fn candidate_probs(log_weights: &[f64], candidates: &[Candidate]) -> Vec<f64> {
    let mut scores: Vec<f64> = candidates
        .iter()
        .map(|c| c.active.iter().map(|&i| log_weights[i]).sum())
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for s in &mut scores {
        *s = (*s - max).exp();
        total += *s;
    }
    for s in &mut scores {
        *s /= total;
    }
    scores
}

/// Distribution over an arbitrary candidate list (no true label needed).
pub fn evaluate_candidates(model: &MaxentModel, candidates: &[Candidate]) -> Result<Distribution> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates(String::new()));
    }
    check_ids(model.num_features(), candidates)?;
    let probs = candidate_probs(&model.log_weights(), candidates);
    Ok(Distribution::new(
        candidates
            .iter()
            .zip(probs)
            .map(|(c, p)| (c.label.clone(), p))
            .collect(),
    ))
}

/// `P(x | h)` for every candidate of `block`.
pub fn evaluate(model: &MaxentModel, block: &EventBlock) -> Result<Distribution> {
    evaluate_candidates(model, &block.candidates).map_err(|e| match e {
        Error::EmptyCandidates(_) => Error::EmptyCandidates(block.id.clone()),
        other => other,
    })
}

fn check_dataset(model: &MaxentModel, data: &Dataset) -> Result<()> {
    for e in &data.events {
        check_ids(model.num_features(), &e.candidates)?;
    }
    Ok(())
}

/// `Σ_k ln P(x_k | h_k)`.
pub fn log_likelihood(model: &MaxentModel, data: &Dataset) -> Result<f64> {
    check_dataset(model, data)?;
    let lw = model.log_weights();
    Ok(data
        .events
        .iter()
        .map(|e| candidate_probs(&lw, &e.candidates)[e.true_index].ln())
        .sum())
}

/// Number of events whose true candidate activates each feature.
pub fn observed_counts(data: &Dataset) -> CountVector {
    let mut counts = CountVector::zeros(data.num_features);
    for e in &data.events {
        for &i in e.true_candidate().active() {
            counts.0[i] += 1.0;
        }
    }
    counts
}

/// Model expectation of each indicator's frequency over the data's histories.
pub fn expected_counts(model: &MaxentModel, data: &Dataset) -> Result<CountVector> {
    check_dataset(model, data)?;
    let lw = model.log_weights();
    let mut counts = CountVector::zeros(model.num_features().max(data.num_features));
    for e in &data.events {
        let probs = candidate_probs(&lw, &e.candidates);
        for (c, p) in e.candidates.iter().zip(probs) {
            for &i in &c.active {
                counts.0[i] += p;
            }
        }
    }
    Ok(counts)
}

/// Largest number of simultaneously active features on any candidate.
pub fn f_sharp(data: &Dataset) -> Result<usize> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data
        .events
        .iter()
        .flat_map(|e| e.candidates.iter().map(|c| c.active.len()))
        .max()
        .unwrap_or(0))
}

/// Maximum over features of `|expected − observed| / observed`, skipping
/// features with zero observed count.
pub fn max_relative_residual(observed: &[f64], expected: &[f64]) -> f64 {
    observed
        .iter()
        .zip(expected)
        .filter(|(o, _)| **o > 0.0)
        .map(|(o, e)| (e - o).abs() / o)
        .fold(0.0, f64::max)
}

/// The constraint residual of `model` on `data`.
pub fn constraint_residual(model: &MaxentModel, data: &Dataset) -> Result<f64> {
    let observed = observed_counts(data);
    let expected = expected_counts(model, data)?;
    Ok(max_relative_residual(&observed, &expected))
}

/// A history with a soft target over its candidates and a weight.
///
/// Plain training uses one-hot targets with weight 1; latent-variable
/// M-steps use posterior-weighted targets.
#[derive(Clone, Debug)]
pub struct SoftEvent<'a> {
    pub candidates: &'a [Candidate],
    pub weight: f64,
    pub target: Vec<f64>,
}

impl<'a> SoftEvent<'a> {
    pub fn hard(block: &'a EventBlock) -> Self {
        let mut target = vec![0.0; block.candidates.len()];
        target[block.true_index] = 1.0;
        Self {
            candidates: &block.candidates,
            weight: 1.0,
            target,
        }
    }
}

pub(crate) fn soft_observed(num_features: usize, events: &[SoftEvent<'_>]) -> Vec<f64> {
    let mut obs = vec![0.0; num_features];
    for ev in events {
        for (c, &t) in ev.candidates.iter().zip(&ev.target) {
            if t > 0.0 {
                for &i in &c.active {
                    obs[i] += ev.weight * t;
                }
            }
        }
    }
    obs
}

/// Expected counts and the weighted cross-entropy objective `Σ w Σ_x t(x) ln p(x)`.
pub(crate) fn soft_expected(log_weights: &[f64], events: &[SoftEvent<'_>]) -> (Vec<f64>, f64) {
    let mut exp = vec![0.0; log_weights.len()];
    let mut objective = 0.0;
    for ev in events {
        let probs = candidate_probs(log_weights, ev.candidates);
        for ((c, &p), &t) in ev.candidates.iter().zip(&probs).zip(&ev.target) {
            if t > 0.0 {
                objective += ev.weight * t * p.ln();
            }
            for &i in &c.active {
                exp[i] += ev.weight * p;
            }
        }
    }
    (exp, objective)
}

/// Log weights are kept within `±LOG_WEIGHT_BOUND` so that weights driven
/// towards zero by vanishing soft counts stay representable.
pub const LOG_WEIGHT_BOUND: f64 = 500.0;

/// One multiplicative scaling step `λ_i ← λ_i (O_i / E_i)^{1/f#}` in log space.
/// Features with zero observed count are left untouched.
pub(crate) fn gis_step(log_weights: &mut [f64], observed: &[f64], expected: &[f64], f_sharp: usize) {
    let inv = 1.0 / f_sharp as f64;
    for ((lw, &o), &e) in log_weights.iter_mut().zip(observed).zip(expected) {
        if o > 0.0 && e > 0.0 {
            // the bound is per coordinate, so a clamped step still improves the GIS auxiliary function
            *lw = (*lw + inv * (o.ln() - e.ln())).clamp(-LOG_WEIGHT_BOUND, LOG_WEIGHT_BOUND);
        }
    }
}

/// Generalized Iterative Scaling on weighted soft-target events.
pub fn train_gis_soft(
    init: &MaxentModel,
    events: &[SoftEvent<'_>],
    f_sharp: usize,
    opts: &TrainOptions,
) -> Result<(MaxentModel, TrainTrace)> {
    opts.validate()?;
    if f_sharp == 0 {
        return Err(Error::invalid("f# must be at least 1"));
    }
    for ev in events {
        check_ids(init.num_features(), ev.candidates)?;
    }
    let observed = soft_observed(init.num_features(), events);
    let mut lw = init.log_weights();
    let mut trace = TrainTrace::default();
    loop {
        let (expected, objective) = soft_expected(&lw, events);
        let residual = max_relative_residual(&observed, &expected);
        trace.log_likelihood.push(objective);
        trace.residual.push(residual);
        if residual <= opts.tol {
            trace.converged = true;
            break;
        }
        if trace.iterations >= opts.max_iters {
            break;
        }
        gis_step(&mut lw, &observed, &expected, f_sharp);
        trace.iterations += 1;
    }
    if !opts.record_trace {
        let keep = |v: &mut Vec<f64>| {
            let last = v.last().copied();
            v.clear();
            v.extend(last);
        };
        keep(&mut trace.log_likelihood);
        keep(&mut trace.residual);
    }
    let model = MaxentModel::from_log_weights(&lw)?.with_names(init.names.clone());
    Ok((model, trace))
}

/// Generalized Iterative Scaling with exponent `1/f#`.
///
/// Every feature must be observed at least once; otherwise its optimal weight
/// is zero and the caller has to [`prune_unobserved`] first.
pub fn train_gis(init: &MaxentModel, data: &Dataset, opts: &TrainOptions) -> Result<(MaxentModel, TrainTrace)> {
    check_dataset(init, data)?;
    let observed = observed_counts(data);
    let unobserved: Vec<usize> = (0..init.num_features())
        .filter(|&i| observed.get(i).is_none_or(|&o| o == 0.0))
        .collect();
    if !unobserved.is_empty() {
        return Err(Error::UnobservedFeatures(unobserved));
    }
    let fs = f_sharp(data)?;
    let events: Vec<SoftEvent<'_>> = data.events.iter().map(SoftEvent::hard).collect();
    train_gis_soft(init, &events, fs, opts)
}

/// Old-id to new-id mapping produced by pruning.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureRemap {
    pub map: Vec<Option<FeatureId>>,
    pub num_kept: usize,
}

impl FeatureRemap {
    pub fn identity(n: usize) -> Self {
        Self {
            map: (0..n).map(Some).collect(),
            num_kept: n,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, m)| *m == Some(i))
    }

    /// Pulls weights of a pruned model back to the original id space; dropped
    /// features get the neutral weight 1.
    pub fn expand(&self, pruned: &MaxentModel) -> MaxentModel {
        let weights = self.map.iter().map(|m| m.map_or(1.0, |j| pruned.weight(j))).collect();
        MaxentModel {
            weights,
            names: BTreeMap::new(),
        }
    }

    pub fn apply(&self, candidate: &Candidate) -> Candidate {
        Candidate::from_sorted(
            candidate.label.clone(),
            candidate
                .active
                .iter()
                .filter_map(|&i| self.map.get(i).copied().flatten())
                .collect(),
        )
    }
}

/// Builds a remap that keeps features for which `keep` is true.
pub fn remap_keeping(num_features: usize, keep: impl Fn(FeatureId) -> bool) -> FeatureRemap {
    let mut next = 0;
    let map = (0..num_features)
        .map(|i| {
            keep(i).then(|| {
                next += 1;
                next - 1
            })
        })
        .collect();
    FeatureRemap { map, num_kept: next }
}

/// Drops features never active on a true candidate and renumbers the rest densely.
pub fn prune_unobserved(data: &Dataset) -> (Dataset, FeatureRemap) {
    let observed = observed_counts(data);
    let remap = remap_keeping(data.num_features, |i| observed[i] > 0.0);
    let events = data
        .events
        .iter()
        .map(|e| EventBlock {
            id: e.id.clone(),
            true_label: e.true_label.clone(),
            true_index: e.true_index,
            candidates: e.candidates.iter().map(|c| remap.apply(c)).collect(),
        })
        .collect();
    (
        Dataset {
            events,
            num_features: remap.num_kept,
        },
        remap,
    )
}

/// Prunes, trains with GIS from the uniform model, and maps back to the full id space.
pub fn train_gis_pruned(data: &Dataset, opts: &TrainOptions) -> Result<(MaxentModel, TrainTrace)> {
    let (pruned, remap) = prune_unobserved(data);
    let (model, trace) = train_gis(&MaxentModel::uniform(pruned.num_features()), &pruned, opts)?;
    Ok((remap.expand(&model), trace))
}
