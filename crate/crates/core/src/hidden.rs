//! Maxent models with a hidden variable.
//!
//! A selector model picks a latent value `z` given the history, then a
//! per-value emitter model picks the output: `P(x | h) = Σ_z P(z | h) P(x | z, h)`.
//! The HMM form puts a selector cloud in front of one emitter cloud per `z`;
//! selector failures return to the global start, emitter failures to the entry
//! of their own emitter cloud, so both stages stay separately normalized.

use rand::Rng;

use crate::error::{Error, Result};
use crate::hmm::{self, EmProblem, HmmNetwork, ParamCounts};
use crate::maxent::{
    self, candidate_probs, max_relative_residual, soft_expected, soft_observed, Candidate, Dataset, Distribution,
    EventBlock, FeatureRemap, MaxentModel, SoftEvent, TrainOptions, TrainTrace,
};
use crate::reduction::{accumulate_chain_counts, add_cloud, stabilize_groups, ChainLayout, STABILIZED_GROUP_MAX};
use crate::transforms::{self, GroupPartition};

/// One hidden value's view of a history.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenBranch {
    /// Selector candidate; its label is the hidden value.
    pub selector: Candidate,
    /// Output candidates under this hidden value, in the block's label order.
    pub outputs: Vec<Candidate>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenEventBlock {
    pub id: String,
    true_label: String,
    labels: Vec<String>,
    branches: Vec<HiddenBranch>,
}

impl HiddenEventBlock {
    /// Every branch must list the same output labels in the same order, or
    /// none at all (for deterministic emitters).
    pub fn new(
        id: impl Into<String>,
        true_label: impl Into<String>,
        labels: Vec<String>,
        branches: Vec<HiddenBranch>,
    ) -> Result<Self> {
        let id = id.into();
        let true_label = true_label.into();
        if labels.is_empty() || branches.is_empty() {
            return Err(Error::EmptyCandidates(id));
        }
        if !labels.contains(&true_label) {
            return Err(Error::MissingTrueLabel {
                event: id,
                label: true_label,
            });
        }
        for b in &branches {
            if !b.outputs.is_empty()
                && (b.outputs.len() != labels.len() || b.outputs.iter().zip(&labels).any(|(c, l)| &c.label != l))
            {
                return Err(Error::invalid(format!(
                    "event {id:?}: output candidates differ between hidden values"
                )));
            }
        }
        Ok(Self {
            id,
            true_label,
            labels,
            branches,
        })
    }

    pub fn true_label(&self) -> &str {
        &self.true_label
    }

    pub fn true_index(&self) -> usize {
        self.labels.iter().position(|l| *l == self.true_label).unwrap()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn branches(&self) -> &[HiddenBranch] {
        &self.branches
    }

    fn selector_candidates(&self) -> Vec<Candidate> {
        self.branches.iter().map(|b| b.selector.clone()).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Emitters {
    /// One maxent model per hidden value.
    Maxent(Vec<MaxentModel>),
    /// Hidden value `z` always produces the given label.
    Deterministic(Vec<String>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenMaxentModel {
    pub hidden_values: Vec<String>,
    pub selector: MaxentModel,
    pub emitters: Emitters,
}

impl HiddenMaxentModel {
    pub fn num_hidden(&self) -> usize {
        self.hidden_values.len()
    }

    /// Selector weights followed by each emitter's weights.
    pub fn param_table(&self) -> (Vec<f64>, Vec<usize>) {
        let mut table = self.selector.weights().to_vec();
        let mut offsets = Vec::new();
        if let Emitters::Maxent(ms) = &self.emitters {
            for m in ms {
                offsets.push(table.len());
                table.extend_from_slice(m.weights());
            }
        }
        (table, offsets)
    }

    fn check(&self, block: &HiddenEventBlock) -> Result<()> {
        if block.branches.len() != self.num_hidden() {
            return Err(Error::invalid(format!(
                "event {:?} has {} hidden branches, model has {}",
                block.id,
                block.branches.len(),
                self.num_hidden()
            )));
        }
        match &self.emitters {
            Emitters::Maxent(ms) if ms.len() != self.num_hidden() => {
                Err(Error::invalid("emitter count differs from hidden value count"))
            }
            Emitters::Maxent(_) if block.branches.iter().any(|b| b.outputs.is_empty()) => {
                Err(Error::EmptyCandidates(block.id.clone()))
            }
            Emitters::Deterministic(map) if map.len() != self.num_hidden() => {
                Err(Error::invalid("deterministic map size differs from hidden value count"))
            }
            _ => Ok(()),
        }
    }

    /// `P(z | h)` and, per hidden value, `P(x | z, h)` over the block's labels.
    fn stage_probs(&self, block: &HiddenEventBlock) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        self.check(block)?;
        let sel = maxent::evaluate_candidates(&self.selector, &block.selector_candidates())?;
        let prior: Vec<f64> = sel.probs().collect();
        let emit = match &self.emitters {
            Emitters::Maxent(ms) => ms
                .iter()
                .zip(&block.branches)
                .map(|(m, b)| Ok(maxent::evaluate_candidates(m, &b.outputs)?.probs().collect()))
                .collect::<Result<Vec<Vec<f64>>>>()?,
            Emitters::Deterministic(map) => map
                .iter()
                .map(|target| block.labels.iter().map(|l| f64::from(u8::from(l == target))).collect())
                .collect(),
        };
        Ok((prior, emit))
    }
}

/// Output marginal `Σ_z P(z | h) P(x | z, h)`.
pub fn hv_evaluate(model: &HiddenMaxentModel, block: &HiddenEventBlock) -> Result<Distribution> {
    let (prior, emit) = model.stage_probs(block)?;
    let probs = (0..block.labels.len())
        .map(|x| prior.iter().zip(&emit).map(|(p, e)| p * e[x]).sum())
        .collect::<Vec<f64>>();
    Ok(Distribution::new(block.labels.iter().cloned().zip(probs).collect()))
}

/// `P(z | x, h)` by Bayes' rule.
pub fn hv_posterior(model: &HiddenMaxentModel, block: &HiddenEventBlock, observed: &str) -> Result<Distribution> {
    let x = block
        .labels
        .iter()
        .position(|l| l == observed)
        .ok_or(Error::ZeroProbability)?;
    let (prior, emit) = model.stage_probs(block)?;
    let joint: Vec<f64> = prior.iter().zip(&emit).map(|(p, e)| p * e[x]).collect();
    let total: f64 = joint.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroProbability);
    }
    Ok(Distribution::new(
        model
            .hidden_values
            .iter()
            .cloned()
            .zip(joint.into_iter().map(|j| j / total))
            .collect(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenPrediction {
    pub label: String,
    pub distribution: Distribution,
    /// Posterior over hidden values for each candidate label with nonzero mass.
    pub posteriors: Vec<(String, Distribution)>,
}

/// Argmax of the output marginal, ties broken by label order.
pub fn hv_predict(model: &HiddenMaxentModel, block: &HiddenEventBlock) -> Result<HiddenPrediction> {
    let distribution = hv_evaluate(model, block)?;
    let label = distribution.argmax().unwrap_or_default().to_string();
    let posteriors = block
        .labels
        .iter()
        .filter(|l| distribution.get(l).is_some_and(|p| p > 0.0))
        .map(|l| Ok((l.clone(), hv_posterior(model, block, l)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HiddenPrediction {
        label,
        distribution,
        posteriors,
    })
}

/// Hidden-variable events plus the feature-space sizes of both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenDataset {
    pub blocks: Vec<HiddenEventBlock>,
    pub hidden_values: Vec<String>,
    pub selector_features: usize,
    pub emitter_features: usize,
}

impl HiddenDataset {
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }
}

pub fn hidden_value_names(n_hidden: usize) -> Vec<String> {
    (0..n_hidden).map(|z| format!("z{z}")).collect()
}

/// Mixture-of-experts view of a plain history with `num_features` features.
///
/// Features active on every candidate describe the history alone; they drive
/// the selector, conjoined with the hidden value (`z · g + i`). The remaining
/// features drive each emitter in the original id space.
pub fn expand_candidates(candidates: &[Candidate], n_hidden: usize, num_features: usize) -> Vec<HiddenBranch> {
    let common: Vec<usize> = match candidates.split_first() {
        Some((first, rest)) => first
            .active()
            .iter()
            .copied()
            .filter(|&i| rest.iter().all(|c| c.contains(i)))
            .collect(),
        None => Vec::new(),
    };
    let outputs: Vec<Candidate> = candidates
        .iter()
        .map(|c| {
            Candidate::from_sorted(
                c.label.clone(),
                c.active()
                    .iter()
                    .copied()
                    .filter(|i| common.binary_search(i).is_err())
                    .collect(),
            )
        })
        .collect();
    hidden_value_names(n_hidden)
        .into_iter()
        .enumerate()
        .map(|(z, name)| HiddenBranch {
            selector: Candidate::from_sorted(name, common.iter().map(|&i| z * num_features + i).collect()),
            outputs: outputs.clone(),
        })
        .collect()
}

pub fn expand_block(block: &EventBlock, n_hidden: usize, num_features: usize) -> Result<HiddenEventBlock> {
    HiddenEventBlock::new(
        block.id.clone(),
        block.true_label(),
        block.candidates().iter().map(|c| c.label.clone()).collect(),
        expand_candidates(block.candidates(), n_hidden, num_features),
    )
}

pub fn expand_dataset(data: &Dataset, n_hidden: usize) -> Result<HiddenDataset> {
    if n_hidden == 0 {
        return Err(Error::invalid("need at least one hidden value"));
    }
    let g = data.num_features();
    Ok(HiddenDataset {
        blocks: data
            .events()
            .iter()
            .map(|e| expand_block(e, n_hidden, g))
            .collect::<Result<_>>()?,
        hidden_values: hidden_value_names(n_hidden),
        selector_features: n_hidden * g,
        emitter_features: g,
    })
}

/// Selector uniform; emitter weights `1 · U[0.9, 1.1]` from `seed`.
pub fn hv_init(data: &HiddenDataset, seed: u64) -> HiddenMaxentModel {
    let mut rng = crate::synth::rng(seed);
    let k = data.hidden_values.len();
    HiddenMaxentModel {
        hidden_values: data.hidden_values.clone(),
        selector: MaxentModel::uniform(data.selector_features),
        emitters: Emitters::Maxent(
            (0..k)
                .map(|_| {
                    MaxentModel::new((0..data.emitter_features).map(|_| rng.random_range(0.9..1.1)).collect())
                        .expect("positive jitter")
                })
                .collect(),
        ),
    }
}

pub fn hv_log_likelihood(model: &HiddenMaxentModel, data: &HiddenDataset) -> Result<f64> {
    data.blocks
        .iter()
        .map(|b| Ok(hv_evaluate(model, b)?.get(b.true_label()).unwrap_or(0.0).ln()))
        .sum()
}

/// Per-stage datasets, pruned of features that can never be observed.
struct Stages {
    selector: Dataset,
    selector_remap: FeatureRemap,
    /// `None` for deterministic emitters.
    emitters: Option<Vec<(Dataset, FeatureRemap)>>,
    det_map: Option<Vec<String>>,
    true_labels: Vec<String>,
}

fn stage_dataset(id: &str, label: &str, cands: Vec<Candidate>) -> Result<EventBlock> {
    EventBlock::new(id, label, cands)
}

fn build_stages(data: &HiddenDataset, det_map: Option<&[String]>) -> Result<Stages> {
    let k = data.hidden_values.len();
    for b in &data.blocks {
        if b.branches.len() != k {
            return Err(Error::invalid(format!(
                "event {:?} has {} hidden branches, expected {k}",
                b.id,
                b.branches.len()
            )));
        }
    }
    // selector: every candidate may be the latent truth, so only never-active features go
    let sel_events = data
        .blocks
        .iter()
        .map(|b| {
            let c = b.selector_candidates();
            stage_dataset(&b.id, &c[0].label.clone(), c)
        })
        .collect::<Result<Vec<_>>>()?;
    let sel = Dataset::new(sel_events, data.selector_features)?;
    let mut active = vec![false; data.selector_features];
    for e in sel.events() {
        for c in e.candidates() {
            for &i in c.active() {
                active[i] = true;
            }
        }
    }
    let selector_remap = maxent::remap_keeping(data.selector_features, |i| active[i]);
    let selector = remap_dataset(&sel, &selector_remap)?;
    let emitters = if det_map.is_some() {
        None
    } else {
        Some(
            (0..k)
                .map(|z| {
                    let events = data
                        .blocks
                        .iter()
                        .map(|b| stage_dataset(&b.id, b.true_label(), b.branches[z].outputs.clone()))
                        .collect::<Result<Vec<_>>>()?;
                    let d = Dataset::new(events, data.emitter_features)?;
                    Ok(maxent::prune_unobserved(&d))
                })
                .collect::<Result<Vec<_>>>()?,
        )
    };
    Ok(Stages {
        selector,
        selector_remap,
        emitters,
        det_map: det_map.map(<[String]>::to_vec),
        true_labels: data.blocks.iter().map(|b| b.true_label.clone()).collect(),
    })
}

fn remap_dataset(data: &Dataset, remap: &FeatureRemap) -> Result<Dataset> {
    let events = data
        .events()
        .iter()
        .map(|e| {
            EventBlock::new(
                e.id.clone(),
                e.true_label(),
                e.candidates().iter().map(|c| remap.apply(c)).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(events, remap.num_kept)
}

fn restrict(model: &MaxentModel, remap: &FeatureRemap) -> Result<MaxentModel> {
    let mut w = vec![1.0; remap.num_kept];
    for (old, new) in remap.map.iter().enumerate() {
        if let Some(j) = new {
            w[*j] = model.weight(old);
        }
    }
    MaxentModel::new(w)
}

fn check_init(init: &HiddenMaxentModel, data: &HiddenDataset) -> Result<()> {
    if init.hidden_values.len() != data.hidden_values.len() {
        return Err(Error::invalid("initial model has a different number of hidden values"));
    }
    if init.selector.num_features() != data.selector_features {
        return Err(Error::invalid("initial selector has the wrong feature count"));
    }
    if let Emitters::Maxent(ms) = &init.emitters {
        if ms.iter().any(|m| m.num_features() != data.emitter_features) {
            return Err(Error::invalid("initial emitter has the wrong feature count"));
        }
    }
    Ok(())
}

/// Posterior-weighted soft events for every stage at the current stage models.
struct SoftStages<'a> {
    selector: Vec<SoftEvent<'a>>,
    emitters: Vec<Vec<SoftEvent<'a>>>,
    log_likelihood: f64,
}

fn soft_stages<'a>(stages: &'a Stages, sel_lw: &[f64], emit_lw: &[Vec<f64>]) -> SoftStages<'a> {
    let k = stages.selector.events().first().map_or(0, |e| e.candidates().len());
    let mut out = SoftStages {
        selector: Vec::with_capacity(stages.selector.len()),
        emitters: vec![Vec::with_capacity(stages.selector.len()); if stages.emitters.is_some() { k } else { 0 }],
        log_likelihood: 0.0,
    };
    for (n, sel_ev) in stages.selector.events().iter().enumerate() {
        let prior = candidate_probs(sel_lw, sel_ev.candidates());
        let joint: Vec<f64> = match &stages.emitters {
            Some(es) => (0..k)
                .map(|z| {
                    let e = &es[z].0.events()[n];
                    prior[z] * candidate_probs(&emit_lw[z], e.candidates())[e.true_index()]
                })
                .collect(),
            None => {
                let map = stages.det_map.as_ref().unwrap();
                let truth = &stages.true_labels[n];
                (0..k).map(|z| if &map[z] == truth { prior[z] } else { 0.0 }).collect()
            }
        };
        let total: f64 = joint.iter().sum();
        out.log_likelihood += total.ln();
        let post: Vec<f64> = joint.iter().map(|j| j / total).collect();
        if let Some(es) = &stages.emitters {
            for z in 0..k {
                out.emitters[z].push(SoftEvent {
                    weight: post[z],
                    ..SoftEvent::hard(&es[z].0.events()[n])
                });
            }
        }
        out.selector.push(SoftEvent {
            candidates: sel_ev.candidates(),
            weight: 1.0,
            target: post,
        });
    }
    out
}

/// Max relative residual of the posterior-weighted constraints of every stage.
fn soft_residual(soft: &SoftStages<'_>, sel_lw: &[f64], emit_lw: &[Vec<f64>]) -> f64 {
    let obs = soft_observed(sel_lw.len(), &soft.selector);
    let (exp, _) = soft_expected(sel_lw, &soft.selector);
    let mut r = max_relative_residual(&obs, &exp);
    for (evs, lw) in soft.emitters.iter().zip(emit_lw) {
        let obs = soft_observed(lw.len(), evs);
        let (exp, _) = soft_expected(lw, evs);
        r = r.max(max_relative_residual(&obs, &exp));
    }
    r
}

/// z-augmented f#: the largest selector plus emitter activation count.
fn augmented_f_sharp(stages: &Stages) -> usize {
    let mut best = 0;
    for (n, sel_ev) in stages.selector.events().iter().enumerate() {
        for (z, sc) in sel_ev.candidates().iter().enumerate() {
            let emit = match &stages.emitters {
                Some(es) => es[z].0.events()[n]
                    .candidates()
                    .iter()
                    .map(|c| c.active().len())
                    .max()
                    .unwrap_or(0),
                None => 0,
            };
            best = best.max(sc.active().len() + emit);
        }
    }
    best
}

fn prepare(data: &HiddenDataset, init: &HiddenMaxentModel) -> Result<Stages> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_init(init, data)?;
    let det = match &init.emitters {
        Emitters::Deterministic(map) => Some(map.as_slice()),
        Emitters::Maxent(_) => None,
    };
    build_stages(data, det)
}

fn finish(
    stages: &Stages,
    data: &HiddenDataset,
    init: &HiddenMaxentModel,
    selector: &MaxentModel,
    emitters: &[MaxentModel],
) -> HiddenMaxentModel {
    let selector = stages.selector_remap.expand(selector);
    let emitters = match (&stages.emitters, &init.emitters) {
        (Some(es), _) => Emitters::Maxent(es.iter().zip(emitters).map(|((_, r), m)| r.expand(m)).collect()),
        (None, e) => e.clone(),
    };
    HiddenMaxentModel {
        hidden_values: data.hidden_values.clone(),
        selector,
        emitters,
    }
}

/// Classical EM: exact posteriors over hidden values, then one fractional-count
/// GIS step per stage. Stops when the posterior-weighted constraints of every
/// stage hold to `opts.tol`.
pub fn train_hv_em_gis(
    data: &HiddenDataset,
    init: &HiddenMaxentModel,
    opts: &TrainOptions,
) -> Result<(HiddenMaxentModel, TrainTrace)> {
    opts.validate()?;
    let stages = prepare(data, init)?;
    let fs = augmented_f_sharp(&stages).max(1);
    let mut sel_lw = restrict(&init.selector, &stages.selector_remap)?.log_weights();
    let mut emit_lw: Vec<Vec<f64>> = match (&stages.emitters, &init.emitters) {
        (Some(es), Emitters::Maxent(ms)) => es
            .iter()
            .zip(ms)
            .map(|((_, r), m)| Ok(restrict(m, r)?.log_weights()))
            .collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    let mut trace = TrainTrace::default();
    loop {
        let soft = soft_stages(&stages, &sel_lw, &emit_lw);
        let residual = soft_residual(&soft, &sel_lw, &emit_lw);
        trace.log_likelihood.push(soft.log_likelihood);
        trace.residual.push(residual);
        if residual <= opts.tol {
            trace.converged = true;
            break;
        }
        if trace.iterations >= opts.max_iters {
            break;
        }
        let obs = soft_observed(sel_lw.len(), &soft.selector);
        let (exp, _) = soft_expected(&sel_lw, &soft.selector);
        let mut next_sel = sel_lw.clone();
        maxent::gis_step(&mut next_sel, &obs, &exp, fs);
        let mut next_emit = emit_lw.clone();
        for (lw, evs) in next_emit.iter_mut().zip(&soft.emitters) {
            let obs = soft_observed(lw.len(), evs);
            let (exp, _) = soft_expected(lw, evs);
            maxent::gis_step(lw, &obs, &exp, fs);
        }
        sel_lw = next_sel;
        emit_lw = next_emit;
        trace.iterations += 1;
    }
    let selector = MaxentModel::from_log_weights(&sel_lw)?;
    let emitters = emit_lw
        .iter()
        .map(|lw| MaxentModel::from_log_weights(lw))
        .collect::<Result<Vec<_>>>()?;
    Ok((finish(&stages, data, init, &selector, &emitters), trace))
}

/// A stage after grouping, completion and scaling, placed in the joint table.
struct FbStage {
    completed: Dataset,
    part: GroupPartition,
    original_features: usize,
    offset: usize,
    /// Per event, per candidate chain of parameter ids (offset applied).
    chains: Vec<Vec<Vec<usize>>>,
}

impl FbStage {
    fn new(data: &Dataset, init: &MaxentModel, offset: usize) -> Result<(Self, Vec<f64>)> {
        let part = transforms::partition_exclusive(data);
        let (model, completed, part) = transforms::complete_groups(init, data, &part)?;
        let model = transforms::to_subunit(&model, &part)?;
        let owner = part.group_of(completed.num_features())?;
        let chains = completed
            .events()
            .iter()
            .map(|e| {
                let layout = ChainLayout::from_groups(e.candidates(), &owner, part.groups.len())?;
                Ok(layout
                    .chains()
                    .into_iter()
                    .map(|c| c.into_iter().map(|p| p + offset).collect())
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((
            Self {
                original_features: data.num_features(),
                completed,
                part,
                offset,
                chains,
            },
            model.weights().to_vec(),
        ))
    }

    fn len(&self) -> usize {
        self.completed.num_features()
    }

    fn groups(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        self.part
            .groups
            .iter()
            .map(|g| g.members.iter().map(|&m| m + self.offset).collect())
    }

    fn read_back(&self, params: &[f64]) -> Result<MaxentModel> {
        let m = MaxentModel::new(params[self.offset..self.offset + self.len()].to_vec())?;
        let (stripped, _) = transforms::strip_anti_indicators(&m, &self.completed, &self.part)?;
        debug_assert_eq!(stripped.num_features(), self.original_features);
        Ok(stripped)
    }

    fn probs(&self, params: &[f64], event: usize) -> Vec<f64> {
        let q: Vec<f64> = self.chains[event]
            .iter()
            .map(|c| c.iter().map(|&p| params[p]).product())
            .collect();
        let total: f64 = q.iter().sum();
        q.into_iter().map(|x| x / total).collect()
    }
}

struct HiddenFbProblem<'a> {
    stages: &'a Stages,
    selector: FbStage,
    emitters: Vec<FbStage>,
    num_params: usize,
    groups: Vec<Vec<usize>>,
}

impl HiddenFbProblem<'_> {
    fn posteriors(&self, params: &[f64], n: usize) -> (Vec<f64>, f64) {
        let prior = self.selector.probs(params, n);
        let joint: Vec<f64> = if self.emitters.is_empty() {
            let map = self.stages.det_map.as_ref().unwrap();
            let truth = &self.stages.true_labels[n];
            prior
                .iter()
                .zip(map)
                .map(|(p, l)| if l == truth { *p } else { 0.0 })
                .collect()
        } else {
            self.emitters
                .iter()
                .zip(&prior)
                .map(|(st, p)| p * st.probs(params, n)[st.completed.events()[n].true_index()])
                .collect()
        };
        let total: f64 = joint.iter().sum();
        (joint.into_iter().map(|j| j / total).collect(), total.ln())
    }

    fn read_back(&self, params: &[f64]) -> Result<(MaxentModel, Vec<MaxentModel>)> {
        Ok((
            self.selector.read_back(params)?,
            self.emitters
                .iter()
                .map(|s| s.read_back(params))
                .collect::<Result<Vec<_>>>()?,
        ))
    }
}

impl EmProblem for HiddenFbProblem<'_> {
    fn num_params(&self) -> usize {
        self.num_params
    }

    fn e_step(&self, params: &[f64], _iteration: usize) -> Result<(ParamCounts, f64)> {
        let mut acc = ParamCounts::zeros(self.num_params);
        let mut ll = 0.0;
        let mut weights = Vec::new();
        for n in 0..self.selector.chains.len() {
            let (post, lp) = self.posteriors(params, n);
            ll += lp;
            accumulate_chain_counts(params, &self.selector.chains[n], &post, &mut acc);
            for (z, st) in self.emitters.iter().enumerate() {
                let chains = &st.chains[n];
                weights.clear();
                weights.resize(chains.len(), 0.0);
                weights[st.completed.events()[n].true_index()] = post[z];
                accumulate_chain_counts(params, chains, &weights, &mut acc);
            }
        }
        Ok((acc, ll))
    }

    fn stabilize(&self, params: &mut [f64]) {
        stabilize_groups(params, &self.groups, STABILIZED_GROUP_MAX);
    }

    fn residual(&self, params: &[f64]) -> Option<f64> {
        let (sel, emit) = self.read_back(params).ok()?;
        let sel_lw = sel.log_weights();
        let emit_lw: Vec<Vec<f64>> = emit.iter().map(MaxentModel::log_weights).collect();
        let soft = soft_stages(self.stages, &sel_lw, &emit_lw);
        Some(soft_residual(&soft, &sel_lw, &emit_lw))
    }
}

/// Forward-backward on the concatenated hidden-variable networks, with tied
/// selector and emitter tables. Stops on the same posterior-weighted
/// constraint residual as [`train_hv_em_gis`].
pub fn train_hv_fb(
    data: &HiddenDataset,
    init: &HiddenMaxentModel,
    opts: &TrainOptions,
) -> Result<(HiddenMaxentModel, TrainTrace)> {
    opts.validate()?;
    let stages = prepare(data, init)?;
    let sel_init = restrict(&init.selector, &stages.selector_remap)?;
    let (selector, mut params) = FbStage::new(&stages.selector, &sel_init, 0)?;
    let mut emitters = Vec::new();
    if let (Some(es), Emitters::Maxent(ms)) = (&stages.emitters, &init.emitters) {
        for ((d, r), m) in es.iter().zip(ms) {
            let (st, p) = FbStage::new(d, &restrict(m, r)?, params.len())?;
            params.extend(p);
            emitters.push(st);
        }
    }
    let groups = selector
        .groups()
        .chain(emitters.iter().flat_map(FbStage::groups))
        .collect();
    let problem = HiddenFbProblem {
        stages: &stages,
        num_params: params.len(),
        selector,
        emitters,
        groups,
    };
    problem.stabilize(&mut params);
    let (params, trace) = hmm::train_fb(&problem, &params, opts)?;
    let (sel, emit) = problem.read_back(&params)?;
    Ok((finish(&stages, data, init, &sel, &emit), trace))
}

/// The hidden-variable network for one block, plus the arc through which the
/// selector commits to each hidden value.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenNetwork {
    pub net: HmmNetwork,
    pub params: Vec<f64>,
    pub selector_exits: Vec<usize>,
}

/// Builds the two-stage network. All weights of `model` must be below one.
pub fn build_hidden_network(model: &HiddenMaxentModel, block: &HiddenEventBlock) -> Result<HiddenNetwork> {
    model.check(block)?;
    let (params, offsets) = model.param_table();
    if let Some((i, &w)) = params.iter().enumerate().find(|(_, &w)| !(w > 0.0 && w < 1.0)) {
        return Err(Error::InvalidWeight { feature: i, value: w });
    }
    let mut net = HmmNetwork::new();
    let (start, end) = (net.start(), net.end());
    let sel_cands = block.selector_candidates();
    let sel_chains = ChainLayout::in_id_order(&sel_cands).chains();
    let k = model.num_hidden();
    let (sel_exits, emitter_entries): (Vec<(usize, Option<&str>)>, Vec<usize>) = match &model.emitters {
        Emitters::Maxent(_) => {
            let entries: Vec<usize> = (0..k).map(|_| net.add_state()).collect();
            (entries.iter().map(|&s| (s, None)).collect(), entries)
        }
        Emitters::Deterministic(map) => (map.iter().map(|l| (end, Some(l.as_str()))).collect(), Vec::new()),
    };
    let sel_cloud = add_cloud(&mut net, start, start, &sel_chains, &sel_exits);
    if let Emitters::Maxent(_) = &model.emitters {
        for (z, b) in block.branches.iter().enumerate() {
            let chains: Vec<Vec<usize>> = ChainLayout::in_id_order(&b.outputs)
                .chains()
                .into_iter()
                .map(|c| c.into_iter().map(|p| p + offsets[z]).collect())
                .collect();
            let exits: Vec<_> = b.outputs.iter().map(|c| (end, Some(c.label.as_str()))).collect();
            add_cloud(&mut net, emitter_entries[z], emitter_entries[z], &chains, &exits);
        }
    }
    let selector_exits = sel_cloud
        .direct
        .iter()
        .zip(&sel_cloud.entry)
        .map(|(d, &e)| d.last().copied().unwrap_or(e))
        .collect();
    Ok(HiddenNetwork {
        net,
        params,
        selector_exits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{expected_counts, output_distribution};

    fn cand(label: &str, active: &[usize]) -> Candidate {
        Candidate::new(label, active.to_vec()).unwrap()
    }

    fn block() -> HiddenEventBlock {
        HiddenEventBlock::new(
            "e",
            "L",
            vec!["L".into(), "M".into()],
            vec![
                HiddenBranch {
                    selector: cand("N", &[0]),
                    outputs: vec![cand("L", &[0]), cand("M", &[1])],
                },
                HiddenBranch {
                    selector: cand("P", &[1]),
                    outputs: vec![cand("L", &[0]), cand("M", &[1])],
                },
            ],
        )
        .unwrap()
    }

    fn model(sel: [f64; 2], e0: [f64; 2], e1: [f64; 2]) -> HiddenMaxentModel {
        HiddenMaxentModel {
            hidden_values: vec!["N".into(), "P".into()],
            selector: MaxentModel::new(sel.to_vec()).unwrap(),
            emitters: Emitters::Maxent(vec![
                MaxentModel::new(e0.to_vec()).unwrap(),
                MaxentModel::new(e1.to_vec()).unwrap(),
            ]),
        }
    }

    #[test]
    fn identical_emitters_ignore_selector() {
        let m = model([0.3, 0.9], [0.2, 0.6], [0.2, 0.6]);
        let d = hv_evaluate(&m, &block()).unwrap();
        assert!((d.get("L").unwrap() - 0.25).abs() < 1e-12);
        let post = hv_posterior(&m, &block(), "L").unwrap();
        assert!((post.get("N").unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn degenerate_selector() {
        let m = model([1.0, 1e-15], [0.2, 0.6], [0.9, 0.1]);
        let d = hv_evaluate(&m, &block()).unwrap();
        assert!((d.get("L").unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn bayes_rule_by_hand() {
        let m = model([0.3, 0.6], [0.2, 0.6], [0.9, 0.1]);
        // P(N) = 1/3, P(L|N) = 0.25, P(L|P) = 0.9
        let pl = 1.0 / 3.0 * 0.25 + 2.0 / 3.0 * 0.9;
        let d = hv_evaluate(&m, &block()).unwrap();
        assert!((d.get("L").unwrap() - pl).abs() < 1e-12);
        let post = hv_posterior(&m, &block(), "L").unwrap();
        assert!((post.get("N").unwrap() - (1.0 / 3.0 * 0.25) / pl).abs() < 1e-12);
    }

    #[test]
    fn network_matches_mixture() {
        let m = model([0.3, 0.6], [0.2, 0.6], [0.9, 0.1]);
        let hn = build_hidden_network(&m, &block()).unwrap();
        let d = output_distribution(&hn.net, &hn.params).unwrap();
        let want = hv_evaluate(&m, &block()).unwrap();
        assert!(d.total_variation(&want) < 1e-12);
        let c = expected_counts(&hn.net, &hn.params, "L").unwrap();
        let post = hv_posterior(&m, &block(), "L").unwrap();
        assert!((c.arcs[hn.selector_exits[0]] - post.get("N").unwrap()).abs() < 1e-10);
        assert!((c.arcs[hn.selector_exits[1]] - post.get("P").unwrap()).abs() < 1e-10);
    }

    #[test]
    fn deterministic_emitters() {
        let m = HiddenMaxentModel {
            hidden_values: vec!["N".into(), "P".into()],
            selector: MaxentModel::new(vec![0.25, 0.75]).unwrap(),
            emitters: Emitters::Deterministic(vec!["M".into(), "L".into()]),
        };
        let d = hv_evaluate(&m, &block()).unwrap();
        assert!((d.get("L").unwrap() - 0.75).abs() < 1e-12);
        let post = hv_posterior(&m, &block(), "L").unwrap();
        assert_eq!(post.get("P"), Some(1.0));
        let hn = build_hidden_network(&m, &block()).unwrap();
        let nd = output_distribution(&hn.net, &hn.params).unwrap();
        assert!(nd.total_variation(&d) < 1e-12);
    }

    #[test]
    fn predict_argmax_and_ties() {
        let m = model([0.3, 0.6], [0.2, 0.6], [0.9, 0.1]);
        assert_eq!(hv_predict(&m, &block()).unwrap().label, "L");
        let tie = model([0.5, 0.5], [0.5, 0.5], [0.5, 0.5]);
        let p = hv_predict(&tie, &block()).unwrap();
        assert_eq!(p.label, "L");
        assert_eq!(p.posteriors.len(), 2);
    }

    #[test]
    fn expansion_splits_history_features() {
        let cands = vec![cand("L", &[0, 1, 3]), cand("M", &[0, 2, 3])];
        let branches = expand_candidates(&cands, 2, 4);
        assert_eq!(branches[0].selector.active(), &[0, 3]);
        assert_eq!(branches[1].selector.active(), &[4, 7]);
        assert_eq!(branches[1].outputs[0].active(), &[1]);
        assert_eq!(branches[1].outputs[1].active(), &[2]);
    }

    #[test]
    fn mismatched_outputs_rejected() {
        let err = HiddenEventBlock::new(
            "e",
            "L",
            vec!["L".into(), "M".into()],
            vec![HiddenBranch {
                selector: cand("N", &[]),
                outputs: vec![cand("M", &[]), cand("L", &[])],
            }],
        );
        assert!(err.is_err());
    }
}
