//! Reduction of a grouped, sub-unit maxent model to HMMs.
//!
//! For a history with candidates `x_1..x_C`, the network leaves `start` along
//! a fixed `1/C` arc into one chain per candidate. Chain node `j` of candidate
//! `c` advances with probability `λ` of the feature in that position and
//! otherwise falls back to `start`; the last arc emits the candidate label and
//! enters `end`. Every successful pass through chain `c` has probability
//! `Π λ / C`, failed passes restart from scratch, so the emitted label follows
//! exactly the maxent conditional. Training strings one such network per
//! event together, all reading the same parameter table.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hmm::{self, ArcCounts, EmProblem, HmmNetwork, ParamCounts, ParamRef, Segment, SegmentedNetwork, StateId};
use crate::maxent::{
    self, candidate_probs, max_relative_residual, observed_counts, Candidate, Dataset, Distribution, EventBlock,
    MaxentModel, TrainOptions, TrainTrace, LOG_WEIGHT_BOUND,
};
use crate::transforms::{self, GroupPartition};

/// Group maximum enforced after each Baum-Welch update.
pub const STABILIZED_GROUP_MAX: f64 = 0.9;

/// Chain order of every candidate's active parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChainLayout {
    /// Per candidate, `(group, param)` in chain position order.
    pub positions: Vec<Vec<(usize, usize)>>,
    pub num_groups: usize,
}

impl ChainLayout {
    /// Layout in group order; `group_of[i]` is the group of feature `i`.
    pub fn from_groups(candidates: &[Candidate], group_of: &[usize], num_groups: usize) -> Result<Self> {
        let positions = candidates
            .iter()
            .map(|c| {
                let mut chain = c
                    .active()
                    .iter()
                    .map(|&i| {
                        group_of.get(i).map(|&g| (g, i)).ok_or(Error::FeatureOutOfRange {
                            feature: i,
                            num_features: group_of.len(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                chain.sort_unstable();
                Ok(chain)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { positions, num_groups })
    }

    /// Each active feature is its own position, in id order.
    pub fn in_id_order(candidates: &[Candidate]) -> Self {
        let positions: Vec<Vec<(usize, usize)>> = candidates
            .iter()
            .map(|c| c.active().iter().enumerate().map(|(k, &i)| (k, i)).collect())
            .collect();
        let num_groups = positions.iter().map(Vec::len).max().unwrap_or(0);
        Self { positions, num_groups }
    }

    /// Cyclic shift of the group-to-position map: group `g` moves to position
    /// `(g + shift) mod num_groups`. Period is `num_groups`.
    pub fn rotated(&self, shift: usize) -> Self {
        let n = self.num_groups.max(1);
        let positions = self
            .positions
            .iter()
            .map(|chain| {
                let mut c = chain.clone();
                c.sort_by_key(|&(g, _)| (g + shift) % n);
                c
            })
            .collect();
        Self {
            positions,
            num_groups: self.num_groups,
        }
    }

    pub fn chains(&self) -> Vec<Vec<usize>> {
        self.positions
            .iter()
            .map(|c| c.iter().map(|&(_, p)| p).collect())
            .collect()
    }
}

/// Arc indices of one cloud: the chains of a single history plus their exits.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CloudIndex {
    pub entry: Vec<usize>,
    pub direct: Vec<Vec<usize>>,
    pub fail: Vec<Vec<usize>>,
}

/// Wires one chain per candidate from `entry`. Failures return to `fail_to`;
/// the final arc of chain `c` goes to `exits[c].0`, emitting `exits[c].1`.
pub(crate) fn add_cloud(
    net: &mut HmmNetwork,
    entry: StateId,
    fail_to: StateId,
    chains: &[Vec<usize>],
    exits: &[(StateId, Option<&str>)],
) -> CloudIndex {
    let branch = ParamRef::Fixed(1.0 / chains.len() as f64);
    let mut idx = CloudIndex::default();
    for (chain, &(exit, emit)) in chains.iter().zip(exits) {
        let add = |net: &mut HmmNetwork, src, dst, prob| match emit {
            Some(sym) => net.add_emitting_arc(src, dst, prob, sym),
            None => net.add_arc(src, dst, prob),
        };
        if chain.is_empty() {
            idx.entry.push(add(net, entry, exit, branch));
            idx.direct.push(Vec::new());
            idx.fail.push(Vec::new());
            continue;
        }
        let nodes: Vec<StateId> = chain.iter().map(|_| net.add_state()).collect();
        idx.entry.push(net.add_arc(entry, nodes[0], branch));
        let mut direct = Vec::with_capacity(chain.len());
        let mut fail = Vec::with_capacity(chain.len());
        for (j, &p) in chain.iter().enumerate() {
            let a = if j + 1 < chain.len() {
                net.add_arc(nodes[j], nodes[j + 1], ParamRef::Direct(p))
            } else {
                add(net, nodes[j], exit, ParamRef::Direct(p))
            };
            direct.push(a);
            fail.push(net.add_arc(nodes[j], fail_to, ParamRef::Complement(p)));
        }
        idx.direct.push(direct);
        idx.fail.push(fail);
    }
    idx
}

/// A single-history network together with its chain bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct EventNetwork {
    pub net: HmmNetwork,
    pub cloud: CloudIndex,
    pub chains: Vec<Vec<usize>>,
    pub labels: Vec<String>,
}

fn check_subunit(params: &[f64], chains: &[Vec<usize>]) -> Result<()> {
    for &p in chains.iter().flatten() {
        let w = *params.get(p).ok_or(Error::FeatureOutOfRange {
            feature: p,
            num_features: params.len(),
        })?;
        if !(w > 0.0 && w < 1.0) {
            return Err(Error::InvalidWeight { feature: p, value: w });
        }
    }
    Ok(())
}

/// Builds the network whose output distribution equals `evaluate(model, block)`.
/// Parameters are the model weights, which must all lie strictly below one.
pub fn build_event_network(model: &MaxentModel, block: &EventBlock, layout: &ChainLayout) -> Result<EventNetwork> {
    build_candidate_network(model, block.candidates(), layout)
}

pub fn build_candidate_network(
    model: &MaxentModel,
    candidates: &[Candidate],
    layout: &ChainLayout,
) -> Result<EventNetwork> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates(String::new()));
    }
    if layout.positions.len() != candidates.len() {
        return Err(Error::invalid("layout does not cover every candidate"));
    }
    let chains = layout.chains();
    check_subunit(model.weights(), &chains)?;
    let mut net = HmmNetwork::new();
    let (start, end) = (net.start(), net.end());
    let exits: Vec<_> = candidates.iter().map(|c| (end, Some(c.label.as_str()))).collect();
    let cloud = add_cloud(&mut net, start, start, &chains, &exits);
    Ok(EventNetwork {
        net,
        cloud,
        chains,
        labels: candidates.iter().map(|c| c.label.clone()).collect(),
    })
}

/// Training network: one segment per event over a tied table, with the chain
/// layout rotated by `iteration` positions.
pub fn build_training_network(
    model: &MaxentModel,
    data: &Dataset,
    part: &GroupPartition,
    iteration: usize,
) -> Result<SegmentedNetwork> {
    let owner = part.group_of(data.num_features())?;
    let segments = data
        .events()
        .iter()
        .map(|e| {
            let layout = ChainLayout::from_groups(e.candidates(), &owner, part.groups.len())?.rotated(iteration);
            let ev = build_event_network(model, e, &layout)?;
            Ok(Segment {
                net: ev.net,
                observation: vec![e.true_label().to_string()],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SegmentedNetwork {
        segments,
        params: model.weights().to_vec(),
    })
}

/// Closed-form expectations for one cloud whose failures return to its own
/// entry, given observation weights over its candidates.
///
/// With `q_c = Π_j λ_{c,j}` and per-attempt success `S = Σ_c q_c / C`, the
/// number of failed attempts before success is geometric with mean
/// `(1 − S) / S`, independent of which candidate finally succeeds. A failed
/// attempt is in chain `c` and breaks at position `j` with probability
/// `P_{c,j−1} (1 − λ_{c,j}) / C`, where `P` are prefix products.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainStats {
    pub entry: Vec<f64>,
    pub direct: Vec<Vec<f64>>,
    pub fail: Vec<Vec<f64>>,
    /// Expected visits to the cloud entry.
    pub entry_visits: f64,
    /// Per-candidate success probability `q_c / (C S)`.
    pub probs: Vec<f64>,
}

pub fn chain_stats(params: &[f64], chains: &[Vec<usize>], weights: &[f64]) -> ChainStats {
    let c_len = chains.len() as f64;
    let q: Vec<f64> = chains.iter().map(|c| c.iter().map(|&p| params[p]).product()).collect();
    let s = q.iter().sum::<f64>() / c_len;
    let total: f64 = weights.iter().sum();
    // expected failed attempts scaled by 1 / C
    let base = total / (s * c_len);
    let mut stats = ChainStats {
        entry: Vec::with_capacity(chains.len()),
        direct: Vec::with_capacity(chains.len()),
        fail: Vec::with_capacity(chains.len()),
        entry_visits: total / s,
        probs: q.iter().map(|qc| qc / (c_len * s)).collect(),
    };
    for ((chain, &qc), &w) in chains.iter().zip(&q).zip(weights) {
        stats.entry.push(base * (1.0 - qc) + w);
        let mut prefix = 1.0;
        let mut direct = Vec::with_capacity(chain.len());
        let mut fail = Vec::with_capacity(chain.len());
        for &p in chain {
            let lam = params[p];
            fail.push(base * prefix * (1.0 - lam));
            prefix *= lam;
            direct.push(base * (prefix - qc).max(0.0) + w);
        }
        stats.direct.push(direct);
        stats.fail.push(fail);
    }
    stats
}

/// Accumulates the closed-form parameter counts of one cloud without
/// materializing per-arc vectors. Returns `Σ_c w_c ln P(c)`.
pub(crate) fn accumulate_chain_counts(
    params: &[f64],
    chains: &[Vec<usize>],
    weights: &[f64],
    acc: &mut ParamCounts,
) -> f64 {
    let c_len = chains.len() as f64;
    let mut s = 0.0;
    for c in chains {
        s += c.iter().map(|&p| params[p]).product::<f64>();
    }
    s /= c_len;
    let total: f64 = weights.iter().sum();
    let base = total / (s * c_len);
    let mut objective = 0.0;
    for (chain, &w) in chains.iter().zip(weights) {
        let qc: f64 = chain.iter().map(|&p| params[p]).product();
        if w > 0.0 {
            objective += w * (qc / (c_len * s)).ln();
        }
        let mut prefix = 1.0;
        for &p in chain {
            let lam = params[p];
            acc.complement[p] += base * prefix * (1.0 - lam);
            prefix *= lam;
            acc.direct[p] += base * (prefix - qc).max(0.0) + w;
        }
    }
    objective
}

/// Closed-form conditional arc counts for a network from [`build_event_network`].
pub fn closed_form_counts(event: &EventNetwork, params: &[f64], observed: &str) -> Result<ArcCounts> {
    let obs = event
        .labels
        .iter()
        .position(|l| l == observed)
        .ok_or(Error::ZeroProbability)?;
    let mut weights = vec![0.0; event.chains.len()];
    weights[obs] = 1.0;
    let st = chain_stats(params, &event.chains, &weights);
    if !(st.probs[obs] > 0.0) {
        return Err(Error::ZeroProbability);
    }
    let net = &event.net;
    let mut arcs = vec![0.0; net.arcs().len()];
    let mut states = vec![0.0; net.num_states()];
    states[net.start()] = st.entry_visits;
    states[net.end()] = 1.0;
    for c in 0..event.chains.len() {
        arcs[event.cloud.entry[c]] = st.entry[c];
        for (j, (&d, &f)) in event.cloud.direct[c].iter().zip(&event.cloud.fail[c]).enumerate() {
            arcs[d] = st.direct[c][j];
            arcs[f] = st.fail[c][j];
            // node j is entered by the entry arc or the previous direct arc
            states[net.arcs()[d].src] = if j == 0 { st.entry[c] } else { st.direct[c][j - 1] };
        }
    }
    Ok(ArcCounts {
        arcs,
        states,
        log_prob: st.probs[obs].ln(),
    })
}

/// Rescales every group so its largest parameter equals `target`, and keeps
/// parameters at or above `exp(-LOG_WEIGHT_BOUND)` so none underflows to zero
/// when the likelihood keeps improving towards the boundary.
pub(crate) fn stabilize_groups(params: &mut [f64], groups: &[Vec<usize>], target: f64) {
    let floor = (-LOG_WEIGHT_BOUND).exp();
    for g in groups {
        let max = g.iter().map(|&p| params[p]).fold(0.0, f64::max);
        if max > 0.0 {
            let alpha = target / max;
            for &p in g {
                params[p] = (params[p] * alpha).max(floor);
            }
        }
    }
}

struct ChainEvent {
    /// Per candidate, `(group, param)` in group order.
    chains: Vec<Vec<(usize, usize)>>,
    observed: usize,
}

/// EM over the training network using the closed-form counts, with optional rotation.
pub struct ChainProblem<'a> {
    events: Vec<ChainEvent>,
    groups: Vec<Vec<usize>>,
    num_params: usize,
    rotate: bool,
    /// Completed data and original feature count for the constraint residual.
    data: &'a Dataset,
    original_features: usize,
    original_observed: Vec<f64>,
}

impl<'a> ChainProblem<'a> {
    /// `data` must be completed (all groups exact) under `part`.
    pub fn new(data: &'a Dataset, part: &GroupPartition, original_features: usize, rotate: bool) -> Result<Self> {
        let owner = part.group_of(data.num_features())?;
        let events = data
            .events()
            .iter()
            .map(|e| {
                let layout = ChainLayout::from_groups(e.candidates(), &owner, part.groups.len())?;
                Ok(ChainEvent {
                    chains: layout.positions,
                    observed: e.true_index(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let observed = observed_counts(data);
        Ok(Self {
            events,
            groups: part.groups.iter().map(|g| g.members.clone()).collect(),
            num_params: data.num_features(),
            rotate,
            data,
            original_features,
            original_observed: observed[..original_features].to_vec(),
        })
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Approximate arithmetic operations of one closed-form E-step, per event.
    pub fn ops_per_event(&self) -> f64 {
        let total: usize = self
            .events
            .iter()
            .map(|e| e.chains.iter().map(|c| 8 * c.len() + 4).sum::<usize>())
            .sum();
        total as f64 / self.events.len().max(1) as f64
    }
}

impl EmProblem for ChainProblem<'_> {
    fn num_params(&self) -> usize {
        self.num_params
    }

    fn e_step(&self, params: &[f64], iteration: usize) -> Result<(ParamCounts, f64)> {
        let mut acc = ParamCounts::zeros(self.num_params);
        let mut ll = 0.0;
        let shift = if self.rotate { iteration } else { 0 };
        let n = self.groups.len().max(1);
        let mut chains: Vec<Vec<usize>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for e in &self.events {
            chains.clear();
            for c in &e.chains {
                let mut ordered = c.clone();
                if shift % n != 0 {
                    ordered.sort_by_key(|&(g, _)| (g + shift) % n);
                }
                chains.push(ordered.into_iter().map(|(_, p)| p).collect());
            }
            weights.clear();
            weights.resize(chains.len(), 0.0);
            weights[e.observed] = 1.0;
            ll += accumulate_chain_counts(params, &chains, &weights, &mut acc);
        }
        Ok((acc, ll))
    }

    fn stabilize(&self, params: &mut [f64]) {
        stabilize_groups(params, &self.groups, STABILIZED_GROUP_MAX);
    }

    fn residual(&self, params: &[f64]) -> Option<f64> {
        let lw: Vec<f64> = params.iter().map(|p| p.ln()).collect();
        let mut expected = vec![0.0; self.original_features];
        for e in self.data.events() {
            let probs = candidate_probs(&lw, e.candidates());
            for (c, p) in e.candidates().iter().zip(probs) {
                for &i in c.active() {
                    if i < self.original_features {
                        expected[i] += p;
                    }
                }
            }
        }
        Some(max_relative_residual(&self.original_observed, &expected))
    }
}

#[derive(Clone, Debug)]
pub struct ViaHmmOptions {
    pub rotate: bool,
    /// Multiplicative jitter on the initial weights, seeded by `TrainOptions::seed`.
    pub random_init: bool,
    /// GIS-trained model to compare against in the report.
    pub reference: Option<MaxentModel>,
}

impl Default for ViaHmmOptions {
    fn default() -> Self {
        Self {
            rotate: true,
            random_init: false,
            reference: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct HmmReport {
    pub trace: TrainTrace,
    pub final_log_likelihood: f64,
    pub residual: f64,
    pub num_groups: usize,
    pub num_anti_indicators: usize,
    pub f_sharp: usize,
    pub ops_per_event: f64,
    /// Max total variation against the reference model over all training histories.
    pub max_tv: Option<f64>,
}

/// Maximum total variation distance between two models over the data's histories.
pub fn max_tv_distance(a: &MaxentModel, b: &MaxentModel, data: &Dataset) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for e in data.events() {
        let da: Distribution = maxent::evaluate(a, e)?;
        let db = maxent::evaluate(b, e)?;
        worst = worst.max(da.total_variation(&db));
    }
    Ok(worst)
}

/// Trains a maxent model by forward-backward on its HMM reduction.
///
/// The data is partitioned into exclusive sets, completed into groups with
/// anti-indicators, scaled below one, trained with Baum-Welch on the tied
/// network, and finally the anti-indicators are stripped again.
pub fn train_maxent_via_hmm(
    data: &Dataset,
    opts: &TrainOptions,
    hmm_opts: &ViaHmmOptions,
) -> Result<(MaxentModel, HmmReport)> {
    opts.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let observed = observed_counts(data);
    let unobserved: Vec<usize> = (0..data.num_features()).filter(|&i| observed[i] == 0.0).collect();
    if !unobserved.is_empty() {
        return Err(Error::UnobservedFeatures(unobserved));
    }
    let g0 = data.num_features();
    let part = transforms::partition_exclusive(data);
    let (mut init, completed, part) = transforms::complete_groups(&MaxentModel::uniform(g0), data, &part)?;
    if hmm_opts.random_init {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let w: Vec<f64> = init
            .weights()
            .iter()
            .map(|w| w * rng.random_range(-1.0f64..1.0).exp())
            .collect();
        init = MaxentModel::new(w)?;
    }
    let init = transforms::to_subunit(&init, &part)?;
    let problem = ChainProblem::new(&completed, &part, g0, hmm_opts.rotate)?;
    let mut params = init.weights().to_vec();
    problem.stabilize(&mut params);
    let (params, trace) = hmm::train_fb(&problem, &params, opts)?;
    let trained = MaxentModel::new(params)?;
    let (model, _) = transforms::strip_anti_indicators(&trained, &completed, &part)?;
    let residual = maxent::constraint_residual(&model, data)?;
    let max_tv = match &hmm_opts.reference {
        Some(r) => Some(max_tv_distance(&model, r, data)?),
        None => None,
    };
    let report = HmmReport {
        final_log_likelihood: maxent::log_likelihood(&model, data)?,
        residual,
        num_groups: part.groups.len(),
        num_anti_indicators: part.anti_ids.len(),
        f_sharp: maxent::f_sharp(&completed)?,
        ops_per_event: problem.ops_per_event(),
        max_tv,
        trace,
    };
    Ok((model, report))
}
