#![allow(dead_code)]

use maxent_hmm::hmm::{self, HmmNetwork, ParamRef};
use maxent_hmm::maxent::{Dataset, MaxentModel};
use maxent_hmm::synth::{grouped_dataset, GroupedSpec};
use maxent_hmm::transforms::{self, GroupPartition};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Path masses summed length by length, with no linear solve involved.
pub struct Oracle {
    pub prob: f64,
    pub arcs: Vec<f64>,
    /// Mass still in flight when the enumeration stopped.
    pub tail: f64,
}

fn propagate(
    net: &HmmNetwork,
    params: &[f64],
    obs: &[usize],
    seed: (usize, usize),
    forward: bool,
) -> (Vec<Vec<f64>>, f64) {
    let n = net.num_states();
    let t_len = obs.len();
    let mut total = vec![vec![0.0; n]; t_len + 1];
    let mut frontier = vec![vec![0.0; n]; t_len + 1];
    frontier[seed.0][seed.1] = 1.0;
    let mut tail = 1.0;
    for _ in 0..2_000_000 {
        let mut next = vec![vec![0.0; n]; t_len + 1];
        let mut mass = 0.0;
        for t in 0..=t_len {
            for s in 0..n {
                let m = frontier[t][s];
                if m == 0.0 {
                    continue;
                }
                total[t][s] += m;
                for a in net.arcs() {
                    let p = a.prob.prob(params);
                    if forward && a.src == s {
                        match a.emit {
                            None => next[t][a.dst] += m * p,
                            Some(sym) if t < t_len && obs[t] == sym => next[t + 1][a.dst] += m * p,
                            _ => {}
                        }
                    } else if !forward && a.dst == s {
                        match a.emit {
                            None => next[t][a.src] += m * p,
                            Some(sym) if t > 0 && obs[t - 1] == sym => next[t - 1][a.src] += m * p,
                            _ => {}
                        }
                    }
                }
            }
        }
        for row in &next {
            mass += row.iter().sum::<f64>();
        }
        frontier = next;
        tail = mass;
        if mass < 1e-17 {
            break;
        }
    }
    (total, tail)
}

pub fn oracle(net: &HmmNetwork, params: &[f64], obs: &[&str]) -> Oracle {
    let ids: Vec<usize> = obs
        .iter()
        .map(|s| net.find_symbol(s).expect("symbol in network"))
        .collect();
    let t_len = ids.len();
    let (f, tf) = propagate(net, params, &ids, (0, net.start()), true);
    let (g, tg) = propagate(net, params, &ids, (t_len, net.end()), false);
    let prob = f[t_len][net.end()];
    let arcs = net
        .arcs()
        .iter()
        .map(|a| {
            let p = a.prob.prob(params);
            let c: f64 = match a.emit {
                None => (0..=t_len).map(|t| f[t][a.src] * p * g[t][a.dst]).sum(),
                Some(sym) => (0..t_len)
                    .filter(|&t| ids[t] == sym)
                    .map(|t| f[t][a.src] * p * g[t + 1][a.dst])
                    .sum(),
            };
            c / prob
        })
        .collect();
    Oracle {
        prob,
        arcs,
        tail: tf.max(tg),
    }
}

/// A random valid network with at most `max_states` states, non-emitting
/// cycles, emitting arcs over {a, b} and a tied three-entry parameter table.
pub fn random_network(rng: &mut impl Rng, max_states: usize) -> (HmmNetwork, Vec<f64>) {
    loop {
        let n = rng.random_range(3..=max_states);
        let params: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut net = HmmNetwork::new();
        for _ in 2..n {
            net.add_state();
        }
        let add = |net: &mut HmmNetwork, rng: &mut dyn rand::RngCore, src: usize, prob: ParamRef| {
            let dst = if rng.random_bool(0.3) {
                net.end()
            } else {
                rng.random_range(0..n)
            };
            if rng.random_bool(0.5) {
                let sym = if rng.random_bool(0.5) { "a" } else { "b" };
                net.add_emitting_arc(src, dst, prob, sym);
            } else {
                net.add_arc(src, dst, prob);
            }
        };
        for s in (0..n).filter(|&s| s != 1) {
            if rng.random_bool(0.5) {
                let p = rng.random_range(0..params.len());
                add(&mut net, rng, s, ParamRef::Direct(p));
                add(&mut net, rng, s, ParamRef::Complement(p));
            } else {
                let k = rng.random_range(1..=3);
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let z: f64 = raw.iter().sum();
                for r in raw {
                    add(&mut net, rng, s, ParamRef::Fixed(r / z));
                }
            }
        }
        // both symbols must exist so observations can be drawn from {a, b}
        if hmm::validate(&net, &params).is_empty() && net.find_symbol("a").is_some() && net.find_symbol("b").is_some() {
            return (net, params);
        }
    }
}

pub fn random_observation(rng: &mut impl Rng, max_len: usize) -> Vec<&'static str> {
    let len = rng.random_range(0..=max_len);
    (0..len).map(|_| if rng.random_bool(0.5) { "a" } else { "b" }).collect()
}

/// A grouped dataset with a random model, completed and scaled below one.
pub struct GroupedCase {
    pub original: MaxentModel,
    pub data: Dataset,
    pub subunit: MaxentModel,
    pub completed: Dataset,
    pub partition: GroupPartition,
}

pub fn grouped_case(seed: u64, max_outputs: usize, max_groups: usize) -> GroupedCase {
    let mut r = rng(seed);
    // redraw the rare shapes where every candidate skipped every group
    let data = loop {
        let spec = GroupedSpec {
            num_outputs: r.random_range(2..=max_outputs),
            num_groups: r.random_range(1..=max_groups),
            group_size: r.random_range(1..=3),
            num_histories: r.random_range(1..=3),
            num_events: r.random_range(1..=8),
            skip_prob: 0.3,
        };
        let data = grouped_dataset(&spec, r.random()).unwrap();
        if data.num_features() > 0 {
            break data;
        }
    };
    let original = MaxentModel::new(
        (0..data.num_features())
            .map(|_| r.random_range(-3.0f64..3.0).exp())
            .collect(),
    )
    .unwrap();
    let part = transforms::partition_exclusive(&data);
    let (full, completed, partition) = transforms::complete_groups(&original, &data, &part).unwrap();
    let subunit = transforms::to_subunit(&full, &partition).unwrap();
    GroupedCase {
        original,
        data,
        subunit,
        completed,
        partition,
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
