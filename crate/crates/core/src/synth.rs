//! Seeded synthetic data.
//!
//! Two generators live here. [`random_dataset`] produces small well-posed
//! training sets for equivalence checks: every candidate of every history is
//! observed at least once, so the maximum-likelihood model has finite weights.
//! [`synth_generate`] produces template-structured data from a random truth
//! model, either a plain maxent model or a hidden-variable mixture in which a
//! latent value decides how the output depends on the history.
//! [`grouped_dataset`] and [`memm_generate`] cover grouped features and
//! state sequences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};

use crate::error::{Error, Result};
use crate::hidden::{expand_block, hidden_value_names, hv_evaluate, Emitters, HiddenMaxentModel};
use std::collections::BTreeMap;

use crate::maxent::{self, candidate_probs, Candidate, Dataset, EventBlock, MaxentModel};
use crate::seq::{MemmModel, SeqDataset, SeqEventBlock};

pub(crate) fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn label(k: usize) -> String {
    format!("y{k}")
}

fn sample_index(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Shape of a [`random_dataset`].
#[derive(Clone, Debug)]
pub struct RandomDatasetSpec {
    pub num_outputs: usize,
    pub num_features: usize,
    pub num_histories: usize,
    pub num_events: usize,
    /// Upper bound on active features per candidate.
    pub max_active: usize,
}

/// Small random dataset with full empirical support; features that end up
/// unused are pruned, so every remaining feature is observed.
pub fn random_dataset(spec: &RandomDatasetSpec, seed: u64) -> Result<Dataset> {
    if spec.num_outputs == 0 || spec.num_features == 0 || spec.num_histories == 0 {
        return Err(Error::invalid("random dataset sizes must be positive"));
    }
    let mut rng = rng(seed);
    let truth: Vec<f64> = (0..spec.num_features).map(|_| rng.random_range(-1.0f64..1.0)).collect();
    let histories: Vec<Vec<Candidate>> = (0..spec.num_histories)
        .map(|_| {
            (0..spec.num_outputs)
                .map(|x| {
                    let k = rng.random_range(1..=spec.max_active.max(1).min(spec.num_features));
                    let mut ids: Vec<usize> = (0..spec.num_features).collect();
                    for i in 0..k {
                        let j = rng.random_range(i..ids.len());
                        ids.swap(i, j);
                    }
                    ids.truncate(k);
                    Candidate::new(label(x), ids).expect("distinct ids")
                })
                .collect()
        })
        .collect();
    let mut events = Vec::new();
    for (h, cands) in histories.iter().enumerate() {
        for (x, c) in cands.iter().enumerate() {
            if events.len() < spec.num_events {
                events.push(EventBlock::new(format!("h{h}.{x}"), c.label.clone(), cands.clone())?);
            }
        }
    }
    while events.len() < spec.num_events {
        let h = rng.random_range(0..histories.len());
        let probs = candidate_probs(&truth, &histories[h]);
        let x = sample_index(&mut rng, &probs);
        events.push(EventBlock::new(
            format!("h{h}.s{}", events.len()),
            histories[h][x].label.clone(),
            histories[h].clone(),
        )?);
    }
    let data = Dataset::new(events, spec.num_features)?;
    Ok(maxent::prune_unobserved(&data).0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GeneratorKind {
    Plain,
    Hidden,
}

/// Shape of a [`synth_generate`] run.
///
/// Each history draws one value per template. Template 0 plays the part of a
/// coarse context (say, a position); the others are finer descriptors (a tag,
/// a word identity). Every (template, value) pair is a history feature, active
/// on all candidates, and every (template, value, output) triple is a feature
/// active on that output only.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub kind: GeneratorKind,
    pub num_outputs: usize,
    pub template_sizes: Vec<usize>,
    /// Hidden values of the hidden generator; ignored for plain.
    pub num_hidden: usize,
    pub num_events: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            kind: GeneratorKind::Plain,
            num_outputs: 3,
            template_sizes: vec![4, 6, 6],
            num_hidden: 2,
            num_events: 1000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TruthModel {
    Plain(MaxentModel),
    Hidden(HiddenMaxentModel),
}

impl TruthModel {
    /// The generator's conditional for one event.
    pub fn conditional(&self, block: &EventBlock) -> Result<crate::maxent::Distribution> {
        match self {
            TruthModel::Plain(m) => maxent::evaluate(m, block),
            TruthModel::Hidden(m) => {
                let g = m.selector.num_features() / m.num_hidden();
                hv_evaluate(m, &expand_block(block, m.num_hidden(), g)?)
            }
        }
    }
}

/// Minimum mean KL divergence between emitter conditionals of the hidden truth.
pub const MIN_EMITTER_SEPARATION: f64 = 1.0;

struct Layout {
    offsets: Vec<usize>,
    num_history: usize,
    num_outputs: usize,
}

impl Layout {
    fn new(spec: &SynthSpec) -> Self {
        let mut offsets = Vec::new();
        let mut acc = 0;
        for &v in &spec.template_sizes {
            offsets.push(acc);
            acc += v;
        }
        Self {
            offsets,
            num_history: acc,
            num_outputs: spec.num_outputs,
        }
    }

    fn num_features(&self) -> usize {
        self.num_history * (1 + self.num_outputs)
    }

    fn history(&self, t: usize, v: usize) -> usize {
        self.offsets[t] + v
    }

    fn conj(&self, t: usize, v: usize, x: usize) -> usize {
        self.num_history + self.history(t, v) * self.num_outputs + x
    }

    fn candidates(&self, values: &[usize]) -> Vec<Candidate> {
        (0..self.num_outputs)
            .map(|x| {
                let mut ids: Vec<usize> = values.iter().enumerate().map(|(t, &v)| self.history(t, v)).collect();
                ids.extend(values.iter().enumerate().map(|(t, &v)| self.conj(t, v, x)));
                Candidate::new(label(x), ids).expect("distinct ids")
            })
            .collect()
    }

    fn names(&self, sizes: &[usize]) -> std::collections::BTreeMap<usize, String> {
        let mut names = std::collections::BTreeMap::new();
        for (t, &size) in sizes.iter().enumerate() {
            for v in 0..size {
                names.insert(self.history(t, v), format!("t{t}={v}"));
                for x in 0..self.num_outputs {
                    names.insert(self.conj(t, v, x), format!("t{t}={v}:{}", label(x)));
                }
            }
        }
        names
    }
}

fn normal(rng: &mut impl Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    scale * z
}

fn sample_history(rng: &mut impl Rng, sizes: &[usize]) -> Vec<usize> {
    sizes.iter().map(|&v| rng.random_range(0..v)).collect()
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b).ln())
        .sum()
}

fn plain_truth(rng: &mut impl Rng, lay: &Layout, sizes: &[usize]) -> Result<MaxentModel> {
    let mut w = vec![1.0; lay.num_features()];
    for (t, &size) in sizes.iter().enumerate() {
        for v in 0..size {
            for x in 0..lay.num_outputs {
                w[lay.conj(t, v, x)] = normal(rng, 1.0).exp();
            }
        }
    }
    Ok(MaxentModel::new(w)?.with_names(lay.names(sizes)))
}

/// Hidden truth: the selector reads template 0 only; emitter `z` leans
/// heavily on template `1 + z mod (T - 1)` and lightly on the rest. Emitter
/// spread grows until the emitters are separated by
/// [`MIN_EMITTER_SEPARATION`] nats on average.
fn hidden_truth(rng: &mut impl Rng, lay: &Layout, spec: &SynthSpec) -> Result<HiddenMaxentModel> {
    let sizes = &spec.template_sizes;
    let k = spec.num_hidden;
    let g = lay.num_features();
    let mut sel = vec![1.0; k * g];
    // every hidden value owns some gate values, so none of them is idle
    for v in 0..sizes[0] {
        let z = v % k;
        sel[z * g + lay.history(0, v)] = (3.0 + normal(rng, 0.5)).exp();
    }
    let raw: Vec<Vec<f64>> = (0..k)
        .map(|z| {
            let _ = z;
            let mut lw = vec![0.0; g];
            for (t, &size) in sizes.iter().enumerate() {
                let scale = if t == 1 { 2.0 } else { 0.25 };
                for v in 0..size {
                    for x in 0..lay.num_outputs {
                        lw[lay.conj(t, v, x)] = normal(rng, scale);
                    }
                }
            }
            lw
        })
        .collect();
    let probe: Vec<Vec<Candidate>> = (0..200).map(|_| lay.candidates(&sample_history(rng, sizes))).collect();
    let mut stretch = 1.0;
    for _ in 0..40 {
        let emitters: Vec<MaxentModel> = raw
            .iter()
            .map(|lw| MaxentModel::from_log_weights(&lw.iter().map(|w| w * stretch).collect::<Vec<_>>()))
            .collect::<Result<_>>()?;
        if k < 2 || mean_separation(&emitters, &probe) >= MIN_EMITTER_SEPARATION {
            let names = lay.names(sizes);
            return Ok(HiddenMaxentModel {
                hidden_values: hidden_value_names(k),
                selector: MaxentModel::new(sel)?,
                emitters: Emitters::Maxent(emitters.into_iter().map(|m| m.with_names(names.clone())).collect()),
            });
        }
        stretch *= 1.25;
    }
    Err(Error::invalid("could not separate the hidden emitters"))
}

fn mean_separation(emitters: &[MaxentModel], probe: &[Vec<Candidate>]) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for cands in probe {
        let dists: Vec<Vec<f64>> = emitters
            .iter()
            .map(|m| candidate_probs(&m.log_weights(), cands))
            .collect();
        for a in 0..dists.len() {
            for b in 0..dists.len() {
                if a != b {
                    total += kl(&dists[a], &dists[b]);
                    n += 1;
                }
            }
        }
    }
    total / n.max(1) as f64
}

/// Samples a truth model from `spec`, then `spec.num_events` events from it.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Dataset, TruthModel)> {
    if spec.num_outputs == 0 || spec.template_sizes.is_empty() || spec.template_sizes.contains(&0) {
        return Err(Error::invalid("synthetic outputs and templates must be non-empty"));
    }
    if spec.kind == GeneratorKind::Hidden && (spec.num_hidden == 0 || spec.template_sizes.len() < 2) {
        return Err(Error::invalid(
            "the hidden generator needs hidden values and at least two templates",
        ));
    }
    let mut rng = rng(spec.seed);
    let lay = Layout::new(spec);
    let truth = match spec.kind {
        GeneratorKind::Plain => TruthModel::Plain(plain_truth(&mut rng, &lay, &spec.template_sizes)?),
        GeneratorKind::Hidden => TruthModel::Hidden(hidden_truth(&mut rng, &lay, spec)?),
    };
    let mut events = Vec::with_capacity(spec.num_events);
    for n in 0..spec.num_events {
        let cands = lay.candidates(&sample_history(&mut rng, &spec.template_sizes));
        let scratch = EventBlock::new(format!("e{n}"), label(0), cands.clone())?;
        let probs: Vec<f64> = truth.conditional(&scratch)?.probs().collect();
        let x = sample_index(&mut rng, &probs);
        events.push(EventBlock::new(format!("e{n}"), label(x), cands)?);
    }
    Ok((Dataset::new(events, lay.num_features())?, truth))
}

/// Shape of a [`grouped_dataset`].
#[derive(Clone, Debug)]
pub struct GroupedSpec {
    pub num_outputs: usize,
    pub num_groups: usize,
    pub group_size: usize,
    pub num_histories: usize,
    pub num_events: usize,
    /// Probability that a candidate has no member of a group, which turns
    /// the groups into exclusive sets.
    pub skip_prob: f64,
}

/// Dataset whose features split into `num_groups` blocks of `group_size`
/// ids, each candidate activating at most one id per block. Full empirical
/// support as in [`random_dataset`]; unused features are pruned.
pub fn grouped_dataset(spec: &GroupedSpec, seed: u64) -> Result<Dataset> {
    if spec.num_outputs == 0 || spec.num_groups == 0 || spec.group_size == 0 || spec.num_histories == 0 {
        return Err(Error::invalid("grouped dataset sizes must be positive"));
    }
    let mut rng = rng(seed);
    let g = spec.num_groups * spec.group_size;
    let truth: Vec<f64> = (0..g).map(|_| rng.random_range(-1.5f64..1.5)).collect();
    let histories: Vec<Vec<Candidate>> = (0..spec.num_histories)
        .map(|_| {
            (0..spec.num_outputs)
                .map(|x| {
                    let mut ids = Vec::new();
                    for grp in 0..spec.num_groups {
                        let member = rng.random_range(0..spec.group_size);
                        if !rng.random_bool(spec.skip_prob) {
                            ids.push(grp * spec.group_size + member);
                        }
                    }
                    Candidate::new(label(x), ids).expect("one id per group")
                })
                .collect()
        })
        .collect();
    let mut events = Vec::new();
    for (h, cands) in histories.iter().enumerate() {
        for c in cands {
            if events.len() < spec.num_events {
                events.push(EventBlock::new(
                    format!("h{h}.{}", c.label),
                    c.label.clone(),
                    cands.clone(),
                )?);
            }
        }
    }
    while events.len() < spec.num_events {
        let h = rng.random_range(0..histories.len());
        let x = sample_index(&mut rng, &candidate_probs(&truth, &histories[h]));
        events.push(EventBlock::new(
            format!("h{h}.s{}", events.len()),
            histories[h][x].label.clone(),
            histories[h].clone(),
        )?);
    }
    Ok(maxent::prune_unobserved(&Dataset::new(events, g)?).0)
}

/// Shape of a [`memm_generate`] run.
#[derive(Clone, Debug)]
pub struct MemmSpec {
    pub num_states: usize,
    pub num_observations: usize,
    pub num_sequences: usize,
    pub length: usize,
    /// Sequences sampled for the held-out lattice file.
    pub num_test: usize,
    pub seed: u64,
}

/// State-transition data from a random MEMM.
pub struct MemmData {
    /// Gold-path blocks only, one per position.
    pub train: SeqDataset,
    /// Full lattices: every state is a source at every position.
    pub test: SeqDataset,
    pub truth: MemmModel,
}

fn state(k: usize) -> String {
    format!("s{k}")
}

/// Samples a MEMM whose transitions depend on (source, observation, next)
/// and (source, next) features, then sequences from it. Observations are
/// uniform; the initial state is uniform.
pub fn memm_generate(spec: &MemmSpec) -> Result<MemmData> {
    let (ns, no) = (spec.num_states, spec.num_observations);
    if ns == 0 || no == 0 || spec.length == 0 {
        return Err(Error::invalid("MEMM sizes must be positive"));
    }
    let mut rng = rng(spec.seed);
    let g = ns * no * ns + ns * ns;
    let candidates = |s: usize, o: usize| -> Vec<Candidate> {
        (0..ns)
            .map(|n| Candidate::new(state(n), vec![(s * no + o) * ns + n, ns * no * ns + s * ns + n]).expect("two ids"))
            .collect()
    };
    let models: BTreeMap<String, MaxentModel> = (0..ns)
        .map(|s| {
            let w = (0..g).map(|_| normal(&mut rng, 1.0).exp()).collect();
            Ok((state(s), MaxentModel::new(w)?))
        })
        .collect::<Result<_>>()?;
    let truth = MemmModel {
        num_features: g,
        models,
        observations: (0..no).map(|o| format!("o{o}")).collect(),
    };
    let mut sample = |n_seq: usize, prefix: &str, full: bool| -> Result<SeqDataset> {
        let mut blocks = Vec::new();
        for q in 0..n_seq {
            let id = format!("{prefix}{q}");
            let mut prev = rng.random_range(0..ns);
            for t in 1..=spec.length {
                let o = rng.random_range(0..no);
                let probs = candidate_probs(&truth.models[&state(prev)].log_weights(), &candidates(prev, o));
                let next = sample_index(&mut rng, &probs);
                let sources: Vec<usize> = if full { (0..ns).collect() } else { vec![prev] };
                for s in sources {
                    blocks.push(SeqEventBlock::new(
                        &id,
                        t,
                        state(s),
                        format!("o{o}"),
                        candidates(s, o),
                        state(next),
                    )?);
                }
                prev = next;
            }
        }
        SeqDataset::new(blocks, g)
    };
    let train = sample(spec.num_sequences, "train", false)?;
    let test = sample(spec.num_test, "test", true)?;
    Ok(MemmData { train, test, truth })
}
