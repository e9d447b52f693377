//! Sequence models built from per-state maxent models.
//!
//! A MEMM conditions each transition on the current observation and
//! normalizes per source state, so training splits into one maxent problem
//! per state. The network builders wire the same clouds into HMMs with the
//! return-arc rule of each model family: failures go back to the state's own
//! entrance (MEMM), to the global start (CRF), or to the state's beginning in
//! a generative maxent-transition HMM.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::hmm::{HmmNetwork, ParamRef, StateId};
use crate::maxent::{
    self, candidate_probs, Candidate, Dataset, Distribution, EventBlock, MaxentModel, TrainOptions, TrainTrace,
};
use crate::reduction::{add_cloud, ChainLayout};

/// The transitions out of one source state at one position.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqEventBlock {
    pub sequence_id: String,
    /// 1-based.
    pub position: usize,
    pub source_state: String,
    pub observation: String,
    /// Candidate labels are next states.
    pub candidates: Vec<Candidate>,
    pub gold_next: String,
}

impl SeqEventBlock {
    pub fn new(
        sequence_id: impl Into<String>,
        position: usize,
        source_state: impl Into<String>,
        observation: impl Into<String>,
        candidates: Vec<Candidate>,
        gold_next: impl Into<String>,
    ) -> Result<Self> {
        let block = Self {
            sequence_id: sequence_id.into(),
            position,
            source_state: source_state.into(),
            observation: observation.into(),
            candidates,
            gold_next: gold_next.into(),
        };
        // reuse the plain block checks: distinct labels, gold present
        block.as_event()?;
        if position == 0 {
            return Err(Error::invalid("positions start at 1"));
        }
        Ok(block)
    }

    fn as_event(&self) -> Result<EventBlock> {
        EventBlock::new(
            format!("{}:{}:{}", self.sequence_id, self.position, self.source_state),
            self.gold_next.clone(),
            self.candidates.clone(),
        )
    }
}

/// Blocks of one or more sequences plus the shared feature-space size.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeqDataset {
    pub blocks: Vec<SeqEventBlock>,
    pub num_features: usize,
}

impl SeqDataset {
    pub fn new(blocks: Vec<SeqEventBlock>, num_features: usize) -> Result<Self> {
        for b in &blocks {
            for c in &b.candidates {
                if let Some(&f) = c.active().iter().find(|&&f| f >= num_features) {
                    return Err(Error::FeatureOutOfRange {
                        feature: f,
                        num_features,
                    });
                }
            }
        }
        let data = Self { blocks, num_features };
        for (id, seq) in data.sequences() {
            let mut seen = BTreeSet::new();
            let t_max = seq.iter().map(|b| b.position).max().unwrap_or(0);
            for b in &seq {
                if !seen.insert((b.position, b.source_state.as_str())) {
                    return Err(Error::invalid(format!(
                        "sequence {id:?}: two blocks for state {:?} at position {}",
                        b.source_state, b.position
                    )));
                }
            }
            let positions: BTreeSet<usize> = seen.iter().map(|(p, _)| *p).collect();
            if positions.len() != t_max {
                return Err(Error::invalid(format!(
                    "sequence {id:?}: positions must run from 1 to {t_max}"
                )));
            }
        }
        Ok(data)
    }

    /// Blocks grouped by sequence id, in order of first appearance.
    pub fn sequences(&self) -> Vec<(String, Vec<SeqEventBlock>)> {
        let mut order: Vec<String> = Vec::new();
        let mut by_id: BTreeMap<&str, Vec<SeqEventBlock>> = BTreeMap::new();
        for b in &self.blocks {
            if !by_id.contains_key(b.sequence_id.as_str()) {
                order.push(b.sequence_id.clone());
            }
            by_id.entry(&b.sequence_id).or_default().push(b.clone());
        }
        order
            .into_iter()
            .map(|id| {
                let blocks = by_id.remove(id.as_str()).unwrap();
                (id, blocks)
            })
            .collect()
    }
}

/// Per-source-state transition models.
#[derive(Clone, Debug, PartialEq)]
pub struct MemmModel {
    pub num_features: usize,
    pub models: BTreeMap<String, MaxentModel>,
    pub observations: BTreeSet<String>,
}

impl MemmModel {
    pub fn states(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }

    pub fn model(&self, state: &str) -> Result<&MaxentModel> {
        self.models
            .get(state)
            .ok_or_else(|| Error::UnseenState(state.to_string()))
    }

    /// `P(next | state, observation)` over `candidates`.
    pub fn step(&self, state: &str, candidates: &[Candidate]) -> Result<Distribution> {
        maxent::evaluate_candidates(self.model(state)?, candidates)
    }
}

/// Groups blocks by source state and trains one GIS model per state, each on
/// its own pruned feature set. Pruned features keep weight 1.
pub fn train_memm(data: &SeqDataset, opts: &TrainOptions) -> Result<(MemmModel, BTreeMap<String, TrainTrace>)> {
    if data.blocks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut per_state: BTreeMap<String, Vec<EventBlock>> = BTreeMap::new();
    for b in &data.blocks {
        per_state.entry(b.source_state.clone()).or_default().push(b.as_event()?);
    }
    let mut models = BTreeMap::new();
    let mut traces = BTreeMap::new();
    for (state, events) in per_state {
        let ds = Dataset::new(events, data.num_features)?;
        let (m, trace) = maxent::train_gis_pruned(&ds, opts)?;
        models.insert(state.clone(), m);
        traces.insert(state, trace);
    }
    let observations = data.blocks.iter().map(|b| b.observation.clone()).collect();
    Ok((
        MemmModel {
            num_features: data.num_features,
            models,
            observations,
        },
        traces,
    ))
}

/// Largest per-state constraint residual of `model` on `data`.
pub fn memm_residual(model: &MemmModel, data: &SeqDataset) -> Result<BTreeMap<String, f64>> {
    let mut per_state: BTreeMap<String, Vec<EventBlock>> = BTreeMap::new();
    for b in &data.blocks {
        per_state.entry(b.source_state.clone()).or_default().push(b.as_event()?);
    }
    per_state
        .into_iter()
        .map(|(s, events)| {
            let ds = Dataset::new(events, data.num_features)?;
            let (pruned, remap) = maxent::prune_unobserved(&ds);
            let m = model.model(&s)?;
            let kept = MaxentModel::new(
                remap
                    .map
                    .iter()
                    .enumerate()
                    .filter_map(|(i, j)| j.map(|_| m.weight(i)))
                    .collect(),
            )?;
            Ok((s, maxent::constraint_residual(&kept, &pruned)?))
        })
        .collect()
}

/// Transitions available at each position, keyed by source state.
#[derive(Clone, Debug, PartialEq)]
pub struct MemmLattice {
    pub steps: Vec<BTreeMap<String, Vec<Candidate>>>,
    pub observations: Vec<String>,
}

impl MemmLattice {
    /// Builds the lattice of one sequence for decoding. Positions must run
    /// 1..=T and every next state offered before the last position must appear
    /// as a source at the following one. Training files, which hold only the
    /// gold path, usually do not form a complete lattice.
    pub fn from_blocks(blocks: &[SeqEventBlock]) -> Result<Self> {
        let t_max = blocks.iter().map(|b| b.position).max().unwrap_or(0);
        let mut steps = vec![BTreeMap::new(); t_max];
        let mut observations = vec![None; t_max];
        for b in blocks {
            let t = b.position - 1;
            if steps[t].insert(b.source_state.clone(), b.candidates.clone()).is_some() {
                return Err(Error::invalid(format!(
                    "sequence {:?}: two blocks for state {:?} at position {}",
                    b.sequence_id, b.source_state, b.position
                )));
            }
            match &observations[t] {
                Some(o) if o != &b.observation => {
                    return Err(Error::invalid(format!(
                        "sequence {:?}: conflicting observations at position {}",
                        b.sequence_id, b.position
                    )))
                }
                _ => observations[t] = Some(b.observation.clone()),
            }
        }
        let observations = observations
            .into_iter()
            .enumerate()
            .map(|(t, o)| o.ok_or_else(|| Error::invalid(format!("missing position {}", t + 1))))
            .collect::<Result<Vec<_>>>()?;
        let lattice = Self { steps, observations };
        lattice.check_complete()?;
        Ok(lattice)
    }

    fn check_complete(&self) -> Result<()> {
        for t in 0..self.steps.len().saturating_sub(1) {
            for cands in self.steps[t].values() {
                for c in cands {
                    if !self.steps[t + 1].contains_key(&c.label) {
                        return Err(Error::invalid(format!(
                            "state {:?} reachable at position {} has no transitions at position {}",
                            c.label,
                            t + 1,
                            t + 2
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Sources available at the first position.
    pub fn initial_states(&self) -> Vec<String> {
        self.steps
            .first()
            .map(|s| s.keys().cloned().collect())
            .unwrap_or_default()
    }
}

/// Initial distribution over the lattice's first sources; uniform by default.
fn initial(lattice: &MemmLattice, init: Option<&Distribution>) -> Result<Vec<(String, f64)>> {
    let sources = lattice.initial_states();
    match init {
        None => {
            let p = 1.0 / sources.len() as f64;
            Ok(sources.into_iter().map(|s| (s, p)).collect())
        }
        Some(d) => {
            for (s, p) in d.entries() {
                if *p > 0.0 && !sources.contains(s) {
                    return Err(Error::UnseenState(s.clone()));
                }
            }
            Ok(sources
                .into_iter()
                .map(|s| {
                    let p = d.get(&s).unwrap_or(0.0);
                    (s, p)
                })
                .collect())
        }
    }
}

/// Log transition tables: per position, source -> (next labels, log probs).
type StepTables = Vec<BTreeMap<String, (Vec<String>, Vec<f64>)>>;

fn step_tables(model: &MemmModel, lattice: &MemmLattice) -> Result<StepTables> {
    lattice
        .steps
        .iter()
        .map(|step| {
            step.iter()
                .map(|(s, cands)| {
                    let lp = candidate_probs(&model.model(s)?.log_weights(), cands)
                        .into_iter()
                        .map(f64::ln)
                        .collect();
                    Ok((s.clone(), (cands.iter().map(|c| c.label.clone()).collect(), lp)))
                })
                .collect()
        })
        .collect()
}

/// `P(s_1..s_T | o_1..o_T) = Σ_{s_0} init(s_0) Π_t P_{s_{t-1}}(s_t | o_t)`.
pub fn memm_sequence_probability(
    model: &MemmModel,
    lattice: &MemmLattice,
    path: &[String],
    init: Option<&Distribution>,
) -> Result<f64> {
    if path.len() != lattice.len() {
        return Err(Error::invalid("path length differs from the sequence length"));
    }
    let mut total = 0.0;
    for (s0, p0) in initial(lattice, init)? {
        let mut p = p0;
        let mut prev = s0;
        for (t, next) in path.iter().enumerate() {
            let Some(cands) = lattice.steps[t].get(&prev) else {
                p = 0.0;
                break;
            };
            let dist = model.step(&prev, cands)?;
            p *= dist.get(next).unwrap_or(0.0);
            prev = next.clone();
        }
        total += p;
    }
    Ok(total)
}

/// Every state path through the lattice with its probability; exponential
/// in the length, meant for small checks.
pub fn enumerate_paths(
    model: &MemmModel,
    lattice: &MemmLattice,
    init: Option<&Distribution>,
) -> Result<Vec<(Vec<String>, f64)>> {
    all_paths(lattice)
        .into_iter()
        .map(|p| {
            let prob = memm_sequence_probability(model, lattice, &p, init)?;
            Ok((p, prob))
        })
        .collect()
}

/// All label sequences the lattice allows, in lexicographic order.
pub fn all_paths(lattice: &MemmLattice) -> Vec<Vec<String>> {
    let mut paths: Vec<Vec<String>> = vec![Vec::new()];
    for (t, step) in lattice.steps.iter().enumerate() {
        let mut next = Vec::new();
        for p in &paths {
            let sources: Vec<&String> = if t == 0 {
                step.keys().collect()
            } else {
                vec![p.last().unwrap()]
            };
            let mut labels = BTreeSet::new();
            for s in sources {
                if let Some(cands) = step.get(s) {
                    labels.extend(cands.iter().map(|c| c.label.clone()));
                }
            }
            for l in labels {
                let mut q = p.clone();
                q.push(l);
                next.push(q);
            }
        }
        paths = next;
    }
    paths
}

/// Max-product decode. The initial state is summed out, so the first score
/// of `s_1` is `Σ_{s_0} init(s_0) P_{s_0}(s_1 | o_1)`. Ties go to the
/// lexicographically smaller path.
pub fn memm_decode(
    model: &MemmModel,
    lattice: &MemmLattice,
    init: Option<&Distribution>,
) -> Result<(Vec<String>, f64)> {
    if lattice.is_empty() {
        return Ok((Vec::new(), 1.0));
    }
    let tables = step_tables(model, lattice)?;
    let mut first: BTreeMap<String, f64> = BTreeMap::new();
    for (s0, p0) in initial(lattice, init)? {
        let (labels, lp) = &tables[0][&s0];
        for (l, lp) in labels.iter().zip(lp) {
            *first.entry(l.clone()).or_insert(0.0) += p0 * lp.exp();
        }
    }
    let mut delta: BTreeMap<String, f64> = first.into_iter().map(|(s, p)| (s, p.ln())).collect();
    let mut back: Vec<BTreeMap<String, String>> = Vec::new();
    for table in &tables[1..] {
        let mut next: BTreeMap<String, f64> = BTreeMap::new();
        let mut ptr: BTreeMap<String, String> = BTreeMap::new();
        // BTreeMap iteration visits sources in order, so strict `>` keeps the smaller predecessor
        for (s, &score) in &delta {
            let (labels, lp) = &table[s];
            for (l, lp) in labels.iter().zip(lp) {
                let v = score + lp;
                if next.get(l).is_none_or(|&best| v > best) {
                    next.insert(l.clone(), v);
                    ptr.insert(l.clone(), s.clone());
                }
            }
        }
        delta = next;
        back.push(ptr);
    }
    let (mut state, &best) = delta
        .iter()
        .fold(None::<(&String, &f64)>, |acc, (s, v)| match acc {
            Some((_, bv)) if *bv >= *v => acc,
            _ => Some((s, v)),
        })
        .ok_or(Error::ZeroProbability)?;
    let mut path = vec![state.clone()];
    for ptr in back.iter().rev() {
        state = &ptr[state];
        path.push(state.clone());
    }
    path.reverse();
    Ok((path, best.exp()))
}

/// Unnormalized CRF weight of a path: `Σ_{s_0} init(s_0) Π_t Π_{i active} λ_i`.
pub fn crf_path_weight(
    model: &MemmModel,
    lattice: &MemmLattice,
    path: &[String],
    init: Option<&Distribution>,
) -> Result<f64> {
    let mut total = 0.0;
    for (s0, p0) in initial(lattice, init)? {
        let mut w = p0;
        let mut prev = s0;
        for (t, next) in path.iter().enumerate() {
            let cand = lattice.steps[t]
                .get(&prev)
                .and_then(|cs| cs.iter().find(|c| &c.label == next));
            let Some(cand) = cand else {
                w = 0.0;
                break;
            };
            let m = model.model(&prev)?;
            w *= cand.active().iter().map(|&i| m.weight(i)).product::<f64>();
            prev = next.clone();
        }
        total += w;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SequenceKind {
    MaxentHmm,
    Memm,
    Crf,
}

/// One transition of a generative maxent-transition HMM state: emit `symbol`
/// and move to `next` (`None` ends the sequence).
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub symbol: String,
    pub next: Option<String>,
    pub features: Vec<usize>,
}

/// A maxent-transition HMM: each state owns a model over its transitions.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxentHmmSpec {
    pub initial: String,
    pub states: BTreeMap<String, (MaxentModel, Vec<Transition>)>,
}

pub enum SequenceSpec<'a> {
    Lattice {
        model: &'a MemmModel,
        lattice: &'a MemmLattice,
        init: Option<&'a Distribution>,
    },
    Generative(&'a MaxentHmmSpec),
}

/// A sequence network and its parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceNetwork {
    pub net: HmmNetwork,
    pub params: Vec<f64>,
}

fn subunit_table<'a>(
    models: impl Iterator<Item = (&'a String, &'a MaxentModel)>,
) -> Result<(Vec<f64>, BTreeMap<String, usize>)> {
    let mut params = Vec::new();
    let mut offsets = BTreeMap::new();
    for (s, m) in models {
        if let Some((i, &w)) = m.weights().iter().enumerate().find(|(_, &w)| !(w > 0.0 && w < 1.0)) {
            return Err(Error::InvalidWeight { feature: i, value: w });
        }
        offsets.insert(s.clone(), params.len());
        params.extend_from_slice(m.weights());
    }
    Ok((params, offsets))
}

fn offset_chains(cands: &[Candidate], offset: usize) -> Vec<Vec<usize>> {
    ChainLayout::in_id_order(cands)
        .chains()
        .into_iter()
        .map(|c| c.into_iter().map(|p| p + offset).collect())
        .collect()
}

/// Wires a sequence model into an HMM. Component weights must all be below one.
///
/// For lattice kinds the emitted symbols are the successive next states, so
/// `sequence_probability(net, params, path)` is the MEMM path probability, or
/// for the CRF a quantity proportional to the path's global weight when every
/// source offers the same number of candidates.
pub fn build_sequence_network(kind: SequenceKind, spec: SequenceSpec<'_>) -> Result<SequenceNetwork> {
    match (kind, spec) {
        (SequenceKind::Memm | SequenceKind::Crf, SequenceSpec::Lattice { model, lattice, init }) => {
            build_lattice_network(kind == SequenceKind::Crf, model, lattice, init)
        }
        (SequenceKind::MaxentHmm, SequenceSpec::Generative(spec)) => build_generative_network(spec),
        (kind, _) => Err(Error::invalid(format!(
            "{kind:?} networks need a different specification"
        ))),
    }
}

fn build_lattice_network(
    global_return: bool,
    model: &MemmModel,
    lattice: &MemmLattice,
    init: Option<&Distribution>,
) -> Result<SequenceNetwork> {
    let used: BTreeSet<&String> = lattice.steps.iter().flat_map(|s| s.keys()).collect();
    let models = used
        .iter()
        .map(|s| Ok((*s, model.model(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let (params, offsets) = subunit_table(models.into_iter())?;
    let mut net = HmmNetwork::new();
    let (start, end) = (net.start(), net.end());
    let entrances: Vec<BTreeMap<String, StateId>> = lattice
        .steps
        .iter()
        .map(|step| step.keys().map(|s| (s.clone(), net.add_state())).collect())
        .collect();
    for (s0, p0) in initial(lattice, init)? {
        if p0 > 0.0 {
            net.add_arc(start, entrances[0][&s0], ParamRef::Fixed(p0));
        }
    }
    let last = lattice.len() - 1;
    for (t, step) in lattice.steps.iter().enumerate() {
        for (s, cands) in step {
            let entry = entrances[t][s];
            let fail_to = if global_return { start } else { entry };
            let exits: Vec<(StateId, Option<&str>)> = cands
                .iter()
                .map(|c| {
                    let dst = if t == last { end } else { entrances[t + 1][&c.label] };
                    (dst, Some(c.label.as_str()))
                })
                .collect();
            add_cloud(&mut net, entry, fail_to, &offset_chains(cands, offsets[s]), &exits);
        }
    }
    Ok(SequenceNetwork { net, params })
}

fn build_generative_network(spec: &MaxentHmmSpec) -> Result<SequenceNetwork> {
    let (params, offsets) = subunit_table(spec.states.iter().map(|(s, (m, _))| (s, m)))?;
    let mut net = HmmNetwork::new();
    let (start, end) = (net.start(), net.end());
    let entrances: BTreeMap<&String, StateId> = spec.states.keys().map(|s| (s, net.add_state())).collect();
    let first = entrances
        .get(&spec.initial)
        .ok_or_else(|| Error::UnseenState(spec.initial.clone()))?;
    net.add_arc(start, *first, ParamRef::Fixed(1.0));
    for (s, (_, transitions)) in &spec.states {
        let cands = transitions
            .iter()
            .enumerate()
            .map(|(j, tr)| Candidate::new(format!("{j}"), tr.features.clone()))
            .collect::<Result<Vec<_>>>()?;
        let exits = transitions
            .iter()
            .map(|tr| {
                let dst = match &tr.next {
                    None => Ok(end),
                    Some(n) => entrances.get(n).copied().ok_or_else(|| Error::UnseenState(n.clone())),
                }?;
                Ok((dst, Some(tr.symbol.as_str())))
            })
            .collect::<Result<Vec<_>>>()?;
        let entry = entrances[s];
        add_cloud(&mut net, entry, entry, &offset_chains(&cands, offsets[s]), &exits);
    }
    Ok(SequenceNetwork { net, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hmm::{output_distribution, sequence_probability, validate};

    fn cand(label: &str, active: &[usize]) -> Candidate {
        Candidate::new(label, active.to_vec()).unwrap()
    }

    /// Two states A, B; features: 0/1 = (A, next A/B), 2/3 = (B, next A/B),
    /// observation-specific features 4 + 2·o + next.
    fn block(seq: &str, pos: usize, src: &str, obs: usize, gold: &str) -> SeqEventBlock {
        let base = if src == "A" { 0 } else { 2 };
        SeqEventBlock::new(
            seq,
            pos,
            src,
            format!("o{obs}"),
            vec![cand("A", &[base, 4 + 2 * obs]), cand("B", &[base + 1, 5 + 2 * obs])],
            gold,
        )
        .unwrap()
    }

    fn lattice(obs: &[usize]) -> MemmLattice {
        let blocks: Vec<_> = obs
            .iter()
            .enumerate()
            .flat_map(|(t, &o)| [block("s", t + 1, "A", o, "A"), block("s", t + 1, "B", o, "A")])
            .collect();
        MemmLattice::from_blocks(&blocks).unwrap()
    }

    fn model(weights: &[f64]) -> MemmModel {
        let m = MaxentModel::new(weights.to_vec()).unwrap();
        MemmModel {
            num_features: weights.len(),
            models: [("A".to_string(), m.clone()), ("B".to_string(), m)].into(),
            observations: BTreeSet::new(),
        }
    }

    fn path(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn deterministic_transitions_are_learned() {
        // observation o0 always leads to A, o1 to B
        let mut blocks = Vec::new();
        for (n, (src, obs)) in [("A", 0), ("A", 1), ("B", 0), ("B", 1)].iter().enumerate() {
            let gold = if *obs == 0 { "A" } else { "B" };
            blocks.push(block(&format!("q{n}"), 1, src, *obs, gold));
        }
        let data = SeqDataset::new(blocks.clone(), 8).unwrap();
        let opts = TrainOptions {
            tol: 1e-8,
            max_iters: 200_000,
            ..TrainOptions::default()
        };
        let (m, traces) = train_memm(&data, &opts).unwrap();
        for b in &blocks {
            let d = m.step(&b.source_state, &b.candidates).unwrap();
            assert!(d.get(&b.gold_next).unwrap() >= 0.99);
        }
        assert!(traces.values().all(|t| t.max_decrease() <= 1e-9));
    }

    #[test]
    fn single_block_per_state() {
        let data = SeqDataset::new(vec![block("s", 1, "A", 0, "B"), block("t", 1, "B", 1, "A")], 8).unwrap();
        let (m, traces) = train_memm(
            &data,
            &TrainOptions {
                tol: 1e-3,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!(traces.values().all(|t| t.converged));
        let r = memm_residual(&m, &data).unwrap();
        assert!(r.values().all(|&x| x <= 1e-3));
        // the empirical frequency of the gold transition is 1
        let d = m.step("A", &data.blocks[0].candidates).unwrap();
        assert!(d.get("B").unwrap() > 0.999);
    }

    #[test]
    fn empty_data_rejected() {
        assert!(train_memm(&SeqDataset::default(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn uniform_model_spreads_mass_evenly() {
        let lat = lattice(&[0, 1, 0]);
        let m = model(&[1.0; 8]);
        let all = enumerate_paths(&m, &lat, None).unwrap();
        assert_eq!(all.len(), 8);
        for (_, p) in &all {
            assert!((p - 0.125).abs() < 1e-15);
        }
        assert!((all.iter().map(|(_, p)| p).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decode_matches_enumeration() {
        let lat = lattice(&[0, 1, 1, 0]);
        let m = model(&[0.3, 0.8, 0.5, 0.2, 0.9, 0.4, 0.35, 0.6]);
        let all = enumerate_paths(&m, &lat, None).unwrap();
        assert_eq!(all.len(), 16);
        let best = all.iter().fold(&all[0], |b, x| if x.1 > b.1 { x } else { b });
        let (p, prob) = memm_decode(&m, &lat, None).unwrap();
        assert_eq!(&p, &best.0);
        assert!((prob - best.1).abs() < 1e-12);
    }

    #[test]
    fn single_step_decode_is_argmax() {
        let lat = lattice(&[1]);
        let m = model(&[0.3, 0.8, 0.5, 0.2, 0.9, 0.4, 0.35, 0.6]);
        let init = Distribution::new(vec![("A".into(), 1.0)]);
        let (p, _) = memm_decode(&m, &lat, Some(&init)).unwrap();
        let step = m.step("A", &lat.steps[0]["A"]).unwrap();
        assert_eq!(p, vec![step.argmax().unwrap().to_string()]);
    }

    #[test]
    fn unseen_state_is_an_error() {
        let lat = lattice(&[0]);
        let mut m = model(&[0.5; 8]);
        m.models.remove("B");
        assert!(matches!(memm_decode(&m, &lat, None), Err(Error::UnseenState(_))));
    }

    #[test]
    fn incomplete_lattice_rejected() {
        let blocks = vec![block("s", 1, "A", 0, "A"), block("s", 2, "A", 0, "A")];
        assert!(MemmLattice::from_blocks(&blocks).is_err());
    }

    #[test]
    fn memm_network_matches_paths() {
        let lat = lattice(&[0, 1]);
        let m = model(&[0.3, 0.8, 0.5, 0.2, 0.9, 0.4, 0.35, 0.6]);
        let sn = build_sequence_network(
            SequenceKind::Memm,
            SequenceSpec::Lattice {
                model: &m,
                lattice: &lat,
                init: None,
            },
        )
        .unwrap();
        assert!(validate(&sn.net, &sn.params).is_empty());
        for (p, prob) in enumerate_paths(&m, &lat, None).unwrap() {
            let obs: Vec<&str> = p.iter().map(String::as_str).collect();
            let q = sequence_probability(&sn.net, &sn.params, &obs).unwrap();
            assert!((q - prob).abs() < 1e-10);
        }
    }

    #[test]
    fn single_memm_subnetwork_is_the_state_model() {
        let blocks =
            vec![SeqEventBlock::new("s", 1, "A", "o", vec![cand("A", &[0, 2]), cand("B", &[1])], "A").unwrap()];
        let lat = MemmLattice::from_blocks(&blocks).unwrap();
        let m = MemmModel {
            num_features: 3,
            models: [("A".to_string(), MaxentModel::new(vec![0.4, 0.7, 0.5]).unwrap())].into(),
            observations: BTreeSet::new(),
        };
        let sn = build_sequence_network(
            SequenceKind::Memm,
            SequenceSpec::Lattice {
                model: &m,
                lattice: &lat,
                init: None,
            },
        )
        .unwrap();
        let d = output_distribution(&sn.net, &sn.params).unwrap();
        let want = m.step("A", &blocks[0].candidates).unwrap();
        assert!(d.total_variation(&want) < 1e-10);
    }

    #[test]
    fn crf_network_is_proportional_to_path_weight() {
        let lat = lattice(&[0, 1]);
        let m = model(&[0.3, 0.8, 0.5, 0.2, 0.9, 0.4, 0.35, 0.6]);
        let sn = build_sequence_network(
            SequenceKind::Crf,
            SequenceSpec::Lattice {
                model: &m,
                lattice: &lat,
                init: None,
            },
        )
        .unwrap();
        let paths = all_paths(&lat);
        assert_eq!(paths.len(), 4);
        let weights: Vec<f64> = paths
            .iter()
            .map(|p| crf_path_weight(&m, &lat, p, None).unwrap())
            .collect();
        let net_probs: Vec<f64> = paths
            .iter()
            .map(|p| {
                let obs: Vec<&str> = p.iter().map(String::as_str).collect();
                sequence_probability(&sn.net, &sn.params, &obs).unwrap()
            })
            .collect();
        // restarts after an emission produce longer strings, so only the ratios are comparable
        let (wz, nz): (f64, f64) = (weights.iter().sum(), net_probs.iter().sum());
        assert!(nz < 1.0);
        for (w, n) in weights.iter().zip(&net_probs) {
            assert!((w / wz - n / nz).abs() < 1e-10);
        }
        // path A,B by hand: s0 uniform, numerators λ0λ4 · λ1λ7 from A, or λ2λ4 · λ1λ7 from B
        let ab = crf_path_weight(&m, &lat, &path("AB"), None).unwrap();
        let want = 0.5 * (0.3 * 0.9 + 0.5 * 0.9) * (0.8 * 0.6);
        assert!((ab - want).abs() < 1e-15);
    }

    #[test]
    fn one_transition_generative_network_is_a_single_cloud() {
        let m = MaxentModel::new(vec![0.3, 0.6, 0.8]).unwrap();
        let spec = MaxentHmmSpec {
            initial: "S".into(),
            states: [(
                "S".to_string(),
                (
                    m.clone(),
                    vec![
                        Transition {
                            symbol: "a".into(),
                            next: None,
                            features: vec![0, 2],
                        },
                        Transition {
                            symbol: "b".into(),
                            next: None,
                            features: vec![1],
                        },
                    ],
                ),
            )]
            .into(),
        };
        let sn = build_sequence_network(SequenceKind::MaxentHmm, SequenceSpec::Generative(&spec)).unwrap();
        let d = output_distribution(&sn.net, &sn.params).unwrap();
        let want = maxent::evaluate_candidates(&m, &[cand("a", &[0, 2]), cand("b", &[1])]).unwrap();
        assert!(d.total_variation(&want) < 1e-10);
    }

    #[test]
    fn generative_network_emits_then_moves() {
        // S emits "a" and moves to T (weight 0.5) or stops emitting "b"; T always stops with "c"
        let spec = MaxentHmmSpec {
            initial: "S".into(),
            states: [
                (
                    "S".to_string(),
                    (
                        MaxentModel::new(vec![0.5, 0.25]).unwrap(),
                        vec![
                            Transition {
                                symbol: "a".into(),
                                next: Some("T".into()),
                                features: vec![0],
                            },
                            Transition {
                                symbol: "b".into(),
                                next: None,
                                features: vec![1],
                            },
                        ],
                    ),
                ),
                (
                    "T".to_string(),
                    (
                        MaxentModel::new(vec![0.5]).unwrap(),
                        vec![Transition {
                            symbol: "c".into(),
                            next: None,
                            features: vec![0],
                        }],
                    ),
                ),
            ]
            .into(),
        };
        let sn = build_sequence_network(SequenceKind::MaxentHmm, SequenceSpec::Generative(&spec)).unwrap();
        assert!(validate(&sn.net, &sn.params).is_empty());
        let ac = sequence_probability(&sn.net, &sn.params, &["a", "c"]).unwrap();
        let b = sequence_probability(&sn.net, &sn.params, &["b"]).unwrap();
        assert!((ac - 2.0 / 3.0).abs() < 1e-12);
        assert!((b - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kind_and_spec_must_agree() {
        let lat = lattice(&[0]);
        let m = model(&[0.5; 8]);
        let r = build_sequence_network(
            SequenceKind::MaxentHmm,
            SequenceSpec::Lattice {
                model: &m,
                lattice: &lat,
                init: None,
            },
        );
        assert!(r.is_err());
        let big = model(&[1.5; 8]);
        let r = build_sequence_network(
            SequenceKind::Memm,
            SequenceSpec::Lattice {
                model: &big,
                lattice: &lat,
                init: None,
            },
        );
        assert!(matches!(r, Err(Error::InvalidWeight { .. })));
    }
}
