//! HMMs with non-emitting transitions and tied parameters.
//!
//! Arc probabilities refer into a shared parameter table, either directly
//! (`θ`), as a complement (`1 − θ`), or as a fixed constant. Non-emitting arcs
//! may form loops, so a finite observation can be explained by infinitely many
//! paths. Forward and backward quantities are obtained in closed form by solving
//! `(I − N)` systems, where `N` is the non-emitting transition matrix: between
//! two emissions the chain wanders through the non-emitting closure, and the
//! expected number of visits is the corresponding geometric series
//! `Σ_k N^k = (I − N)^{-1}`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::maxent::{Distribution, TrainOptions, TrainTrace};

pub type StateId = usize;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamRef {
    Direct(usize),
    Complement(usize),
    Fixed(f64),
}

impl ParamRef {
    pub fn prob(self, params: &[f64]) -> f64 {
        match self {
            ParamRef::Direct(p) => params[p],
            ParamRef::Complement(p) => 1.0 - params[p],
            ParamRef::Fixed(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arc {
    pub src: StateId,
    pub dst: StateId,
    pub prob: ParamRef,
    /// Index into the network's symbol table, or `None` for a non-emitting arc.
    pub emit: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HmmNetwork {
    num_states: usize,
    arcs: Vec<Arc>,
    start: StateId,
    end: StateId,
    symbols: Vec<String>,
}

impl HmmNetwork {
    /// A network with a start and an end state and no arcs.
    pub fn new() -> Self {
        Self {
            num_states: 2,
            arcs: Vec::new(),
            start: 0,
            end: 1,
            symbols: Vec::new(),
        }
    }

    pub fn add_state(&mut self) -> StateId {
        self.num_states += 1;
        self.num_states - 1
    }

    pub fn symbol_id(&mut self, symbol: &str) -> usize {
        match self.symbols.iter().position(|s| s == symbol) {
            Some(i) => i,
            None => {
                self.symbols.push(symbol.to_string());
                self.symbols.len() - 1
            }
        }
    }

    pub fn add_arc(&mut self, src: StateId, dst: StateId, prob: ParamRef) -> usize {
        self.arcs.push(Arc {
            src,
            dst,
            prob,
            emit: None,
        });
        self.arcs.len() - 1
    }

    pub fn add_emitting_arc(&mut self, src: StateId, dst: StateId, prob: ParamRef, symbol: &str) -> usize {
        let emit = Some(self.symbol_id(symbol));
        self.arcs.push(Arc { src, dst, prob, emit });
        self.arcs.len() - 1
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn arcs(&self) -> &[Arc] {
        &self.arcs
    }

    pub fn start(&self) -> StateId {
        self.start
    }

    pub fn end(&self) -> StateId {
        self.end
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn find_symbol(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn max_param(&self) -> Option<usize> {
        self.arcs
            .iter()
            .filter_map(|a| match a.prob {
                ParamRef::Direct(p) | ParamRef::Complement(p) => Some(p),
                ParamRef::Fixed(_) => None,
            })
            .max()
    }
}

/// Structural and numerical checks; an empty list means the network is usable.
pub fn validate(net: &HmmNetwork, params: &[f64]) -> Vec<String> {
    let mut out = Vec::new();
    let n = net.num_states;
    if net.start >= n || net.end >= n {
        out.push("start or end state out of range".into());
        return out;
    }
    let mut out_sum = vec![0.0; n];
    let mut adj = vec![Vec::new(); n];
    for (k, a) in net.arcs.iter().enumerate() {
        if a.src >= n || a.dst >= n {
            out.push(format!("arc {k} references a missing state"));
            continue;
        }
        if a.emit.is_some_and(|s| s >= net.symbols.len()) {
            out.push(format!("arc {k} emits an unknown symbol"));
        }
        let p = match a.prob {
            ParamRef::Direct(i) | ParamRef::Complement(i) => match params.get(i) {
                Some(&t) if t > 0.0 && t < 1.0 => a.prob.prob(params),
                Some(&t) => {
                    out.push(format!("arc {k}: parameter {i} = {t} outside (0, 1)"));
                    a.prob.prob(params)
                }
                None => {
                    out.push(format!("arc {k}: parameter {i} missing from table"));
                    continue;
                }
            },
            ParamRef::Fixed(v) => {
                if !(v > 0.0 && v <= 1.0) {
                    out.push(format!("arc {k}: fixed probability {v} outside (0, 1]"));
                }
                v
            }
        };
        if a.src == net.end {
            out.push(format!("arc {k} leaves the absorbing end state"));
        }
        out_sum[a.src] += p;
        if p > 0.0 {
            adj[a.src].push(a.dst);
        }
    }
    let reach = |from: StateId, adj: &[Vec<StateId>]| {
        let mut seen = vec![false; n];
        let mut stack = vec![from];
        seen[from] = true;
        while let Some(s) = stack.pop() {
            for &d in &adj[s] {
                if !seen[d] {
                    seen[d] = true;
                    stack.push(d);
                }
            }
        }
        seen
    };
    let from_start = reach(net.start, &adj);
    for s in 0..n {
        if s != net.end && from_start[s] && (out_sum[s] - 1.0).abs() > 1e-12 {
            out.push(format!("state {s}: out-sum {} != 1", out_sum[s]));
        }
    }
    if !from_start[net.end] {
        out.push("end state unreachable from start".into());
    }
    // every reachable state must still be able to reach end, otherwise some
    // probability mass cycles forever
    let mut radj = vec![Vec::new(); n];
    for (s, ds) in adj.iter().enumerate() {
        for &d in ds {
            radj[d].push(s);
        }
    }
    let to_end = reach(net.end, &radj);
    for s in 0..n {
        if from_start[s] && !to_end[s] {
            out.push(format!("state {s} cannot reach end (probability-1 cycle)"));
        }
    }
    out
}

fn ensure_valid(net: &HmmNetwork, params: &[f64]) -> Result<()> {
    let v = validate(net, params);
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidNetwork(v))
    }
}

/// LU factorizations of `I − N` and its transpose.
struct Closure {
    fwd: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    bwd: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
}

impl Closure {
    fn new(net: &HmmNetwork, params: &[f64]) -> Self {
        let n = net.num_states;
        // states the start cannot reach carry no mass; leaving them out keeps
        // stray cycles there from making the system singular
        let mut live = vec![false; n];
        live[net.start] = true;
        let mut stack = vec![net.start];
        while let Some(s) = stack.pop() {
            for a in net.arcs.iter().filter(|a| a.src == s) {
                if !live[a.dst] {
                    live[a.dst] = true;
                    stack.push(a.dst);
                }
            }
        }
        let mut m = DMatrix::<f64>::identity(n, n);
        for a in net.arcs.iter().filter(|a| a.emit.is_none() && live[a.src]) {
            m[(a.src, a.dst)] -= a.prob.prob(params);
        }
        Self {
            fwd: m.transpose().lu(),
            bwd: m.lu(),
        }
    }

    /// Expected visits `x = (I − Nᵀ)^{-1} b`.
    fn forward(&self, b: DVector<f64>) -> Result<DVector<f64>> {
        self.fwd.solve(&b).ok_or(Error::SingularSystem)
    }

    /// Completion probabilities `y = (I − N)^{-1} b`.
    fn backward(&self, b: DVector<f64>) -> Result<DVector<f64>> {
        self.bwd.solve(&b).ok_or(Error::SingularSystem)
    }
}

fn unit(n: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(n);
    v[i] = 1.0;
    v
}

/// Probability that the chain is absorbed in `end` having emitted exactly one
/// symbol, for every symbol of the network.
pub fn output_distribution(net: &HmmNetwork, params: &[f64]) -> Result<Distribution> {
    ensure_valid(net, params)?;
    let n = net.num_states;
    let closure = Closure::new(net, params);
    let alpha0 = closure.forward(unit(n, net.start))?;
    let beta1 = closure.backward(unit(n, net.end))?;
    let mut probs = vec![0.0; net.symbols.len()];
    for a in &net.arcs {
        if let Some(s) = a.emit {
            probs[s] += alpha0[a.src] * a.prob.prob(params) * beta1[a.dst];
        }
    }
    Ok(Distribution::new(net.symbols.iter().cloned().zip(probs).collect()))
}

/// Expected traversal counts conditioned on the observation, plus its log probability.
#[derive(Clone, Debug, PartialEq)]
pub struct ArcCounts {
    pub arcs: Vec<f64>,
    pub states: Vec<f64>,
    pub log_prob: f64,
}

struct Lattice {
    alpha: Vec<DVector<f64>>,
    beta: Vec<DVector<f64>>,
    prob: f64,
}

fn lattice(net: &HmmNetwork, params: &[f64], obs: &[usize]) -> Result<Lattice> {
    let n = net.num_states;
    let closure = Closure::new(net, params);
    let t_len = obs.len();
    let mut alpha = Vec::with_capacity(t_len + 1);
    alpha.push(closure.forward(unit(n, net.start))?);
    for &o in obs {
        let prev = alpha.last().unwrap();
        let mut b = DVector::zeros(n);
        for a in net.arcs.iter().filter(|a| a.emit == Some(o)) {
            b[a.dst] += prev[a.src] * a.prob.prob(params);
        }
        alpha.push(closure.forward(b)?);
    }
    let mut beta = vec![DVector::zeros(n); t_len + 1];
    beta[t_len] = closure.backward(unit(n, net.end))?;
    for t in (0..t_len).rev() {
        let mut b = DVector::zeros(n);
        for a in net.arcs.iter().filter(|a| a.emit == Some(obs[t])) {
            b[a.src] += a.prob.prob(params) * beta[t + 1][a.dst];
        }
        beta[t] = closure.backward(b)?;
    }
    let prob = alpha[t_len][net.end];
    Ok(Lattice { alpha, beta, prob })
}

fn symbol_ids(net: &HmmNetwork, obs: &[&str]) -> Option<Vec<usize>> {
    obs.iter().map(|s| net.find_symbol(s)).collect()
}

/// Probability of being absorbed in `end` after emitting exactly `obs`.
pub fn sequence_probability(net: &HmmNetwork, params: &[f64], obs: &[&str]) -> Result<f64> {
    ensure_valid(net, params)?;
    match symbol_ids(net, obs) {
        Some(ids) => Ok(lattice(net, params, &ids)?.prob),
        None => Ok(0.0),
    }
}

/// Expected arc and state counts given an emitted symbol sequence.
pub fn expected_counts_seq(net: &HmmNetwork, params: &[f64], obs: &[&str]) -> Result<ArcCounts> {
    ensure_valid(net, params)?;
    let ids = symbol_ids(net, obs).ok_or(Error::ZeroProbability)?;
    let lat = lattice(net, params, &ids)?;
    if !(lat.prob > 0.0) {
        return Err(Error::ZeroProbability);
    }
    let inv = 1.0 / lat.prob;
    let mut arcs = vec![0.0; net.arcs.len()];
    for (k, a) in net.arcs.iter().enumerate() {
        let p = a.prob.prob(params);
        arcs[k] = match a.emit {
            None => (0..=ids.len())
                .map(|t| lat.alpha[t][a.src] * p * lat.beta[t][a.dst])
                .sum::<f64>(),
            Some(sym) => (0..ids.len())
                .filter(|&t| ids[t] == sym)
                .map(|t| lat.alpha[t][a.src] * p * lat.beta[t + 1][a.dst])
                .sum::<f64>(),
        } * inv;
    }
    let states = (0..net.num_states)
        .map(|s| (0..=ids.len()).map(|t| lat.alpha[t][s] * lat.beta[t][s]).sum::<f64>() * inv)
        .collect();
    Ok(ArcCounts {
        arcs,
        states,
        log_prob: lat.prob.ln(),
    })
}

/// Expected counts given a single emitted symbol.
pub fn expected_counts(net: &HmmNetwork, params: &[f64], observed: &str) -> Result<ArcCounts> {
    expected_counts_seq(net, params, &[observed])
}

/// Largest violation of `inflow (+1 at start) = outflow` over non-absorbing states.
pub fn flow_conservation_error(net: &HmmNetwork, counts: &ArcCounts) -> f64 {
    let mut balance = vec![0.0; net.num_states];
    balance[net.start] += 1.0;
    for (a, &c) in net.arcs.iter().zip(&counts.arcs) {
        balance[a.dst] += c;
        balance[a.src] -= c;
    }
    balance
        .iter()
        .enumerate()
        .filter(|&(s, _)| s != net.end)
        .map(|(_, b)| b.abs())
        .fold(0.0, f64::max)
}

/// Sufficient statistics for re-estimating a tied parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCounts {
    pub direct: Vec<f64>,
    pub complement: Vec<f64>,
}

impl ParamCounts {
    pub fn zeros(num_params: usize) -> Self {
        Self {
            direct: vec![0.0; num_params],
            complement: vec![0.0; num_params],
        }
    }

    pub fn accumulate(&mut self, net: &HmmNetwork, counts: &ArcCounts) {
        for (a, &c) in net.arcs.iter().zip(&counts.arcs) {
            match a.prob {
                ParamRef::Direct(p) => self.direct[p] += c,
                ParamRef::Complement(p) => self.complement[p] += c,
                ParamRef::Fixed(_) => {}
            }
        }
    }

    pub fn add(&mut self, other: &ParamCounts) {
        for (a, b) in self.direct.iter_mut().zip(&other.direct) {
            *a += b;
        }
        for (a, b) in self.complement.iter_mut().zip(&other.complement) {
            *a += b;
        }
    }
}

/// Baum-Welch re-estimate `θ ← direct / (direct + complement)`. Parameters
/// whose arcs were never traversed keep their value and are reported.
pub fn bw_update(counts: &ParamCounts, params: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut flagged = Vec::new();
    let next = params
        .iter()
        .enumerate()
        .map(|(p, &old)| {
            let d = counts.direct[p];
            let total = d + counts.complement[p];
            if total > 0.0 {
                d / total
            } else {
                flagged.push(p);
                old
            }
        })
        .collect();
    (next, flagged)
}

/// An EM problem over a tied parameter table.
pub trait EmProblem {
    fn num_params(&self) -> usize;

    /// Aggregated expected counts and the data log-likelihood at `params`.
    /// `iteration` lets implementations vary the network layout between steps.
    fn e_step(&self, params: &[f64], iteration: usize) -> Result<(ParamCounts, f64)>;

    /// Likelihood-preserving renormalization applied after each update.
    fn stabilize(&self, _params: &mut [f64]) {}

    /// Problem-specific convergence test at `params`, e.g. a constraint residual.
    /// `None` defers to the likelihood-delta rule.
    fn residual(&self, _params: &[f64]) -> Option<f64> {
        None
    }
}

/// Forward-backward training: E-step, Baum-Welch update, stabilization.
///
/// Stops when the problem's residual drops to `opts.tol`, or, for problems
/// without one, when the likelihood improves by less than `opts.tol`.
pub fn train_fb<P: EmProblem + ?Sized>(
    problem: &P,
    init: &[f64],
    opts: &TrainOptions,
) -> Result<(Vec<f64>, TrainTrace)> {
    opts.validate()?;
    if init.len() != problem.num_params() {
        return Err(Error::invalid("parameter table length mismatch"));
    }
    let mut params = init.to_vec();
    let mut trace = TrainTrace::default();
    let mut prev_ll = f64::NEG_INFINITY;
    loop {
        let (counts, ll) = problem.e_step(&params, trace.iterations)?;
        trace.log_likelihood.push(ll);
        let done = match problem.residual(&params) {
            Some(r) => {
                trace.residual.push(r);
                r <= opts.tol
            }
            None => (ll - prev_ll).abs() < opts.tol,
        };
        if done {
            trace.converged = true;
            break;
        }
        if trace.iterations >= opts.max_iters {
            break;
        }
        prev_ll = ll;
        let (next, _) = bw_update(&counts, &params);
        params = next;
        problem.stabilize(&mut params);
        trace.iterations += 1;
    }
    if !opts.record_trace {
        let ll = trace.log_likelihood.pop();
        let r = trace.residual.pop();
        trace.log_likelihood = ll.into_iter().collect();
        trace.residual = r.into_iter().collect();
    }
    Ok((params, trace))
}

/// One network per observation, all referencing the same parameter table.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedNetwork {
    pub segments: Vec<Segment>,
    pub params: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub net: HmmNetwork,
    pub observation: Vec<String>,
}

impl SegmentedNetwork {
    pub fn log_likelihood(&self, params: &[f64]) -> Result<f64> {
        self.segments
            .iter()
            .map(|s| {
                let obs: Vec<&str> = s.observation.iter().map(String::as_str).collect();
                sequence_probability(&s.net, params, &obs).map(f64::ln)
            })
            .sum()
    }
}

impl EmProblem for SegmentedNetwork {
    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn e_step(&self, params: &[f64], _iteration: usize) -> Result<(ParamCounts, f64)> {
        let mut acc = ParamCounts::zeros(params.len());
        let mut ll = 0.0;
        for s in &self.segments {
            let obs: Vec<&str> = s.observation.iter().map(String::as_str).collect();
            let counts = expected_counts_seq(&s.net, params, &obs)?;
            ll += counts.log_prob;
            acc.accumulate(&s.net, &counts);
        }
        Ok((acc, ll))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// start → l1 (λ) → end emitting L, failure back to start.
    fn single_chain(lambda: f64) -> (HmmNetwork, Vec<f64>) {
        let mut net = HmmNetwork::new();
        let l1 = net.add_state();
        net.add_arc(net.start(), l1, ParamRef::Fixed(1.0));
        net.add_emitting_arc(l1, net.end(), ParamRef::Direct(0), "L");
        net.add_arc(l1, net.start(), ParamRef::Complement(0));
        (net, vec![lambda])
    }

    #[test]
    fn single_branch_outputs_only_its_label() {
        let (net, params) = single_chain(0.3);
        assert!(validate(&net, &params).is_empty());
        let d = output_distribution(&net, &params).unwrap();
        assert!((d.get("L").unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn geometric_retries() {
        let (net, params) = single_chain(0.5);
        let c = expected_counts(&net, &params, "L").unwrap();
        assert!((c.arcs[0] - 2.0).abs() < 1e-12);
        assert!((c.arcs[1] - 1.0).abs() < 1e-12);
        assert!((c.arcs[2] - 1.0).abs() < 1e-12);
        assert!((c.states[net.start()] - 2.0).abs() < 1e-12);
        assert!(flow_conservation_error(&net, &c) < 1e-12);
    }

    #[test]
    fn near_deterministic_chain() {
        let (net, params) = single_chain(1.0 - 1e-6);
        let c = expected_counts(&net, &params, "L").unwrap();
        assert!((c.arcs[0] - 1.0).abs() < 1e-3);
        assert!((c.arcs[1] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn validation_reports_problems() {
        let mut net = HmmNetwork::new();
        let s = net.add_state();
        net.add_arc(net.start(), s, ParamRef::Fixed(0.5));
        net.add_emitting_arc(s, net.end(), ParamRef::Fixed(1.0), "L");
        let v = validate(&net, &[]);
        assert!(v.iter().any(|m| m.contains("out-sum")), "{v:?}");

        let mut net = HmmNetwork::new();
        let s = net.add_state();
        net.add_arc(net.start(), s, ParamRef::Fixed(1.0));
        net.add_arc(s, net.start(), ParamRef::Fixed(1.0));
        let v = validate(&net, &[]);
        assert!(v.iter().any(|m| m.contains("unreachable")), "{v:?}");
        assert!(matches!(output_distribution(&net, &[]), Err(Error::InvalidNetwork(_))));
    }

    #[test]
    fn unreachable_cycle_is_ignored() {
        let (mut net, params) = single_chain(0.5);
        let a = net.add_state();
        let b = net.add_state();
        net.add_arc(a, b, ParamRef::Fixed(1.0));
        net.add_arc(b, a, ParamRef::Fixed(1.0));
        assert!(validate(&net, &params).is_empty());
        let c = expected_counts(&net, &params, "L").unwrap();
        assert!((c.arcs[0] - 2.0).abs() < 1e-12);
        assert_eq!(c.arcs[3], 0.0);
    }

    #[test]
    fn zero_probability_observation() {
        let (net, params) = single_chain(0.5);
        assert!(matches!(
            expected_counts(&net, &params, "M"),
            Err(Error::ZeroProbability)
        ));
        assert_eq!(sequence_probability(&net, &params, &["L", "L"]).unwrap(), 0.0);
    }

    #[test]
    fn bw_ratio_and_flags() {
        let counts = ParamCounts {
            direct: vec![3.0, 0.0],
            complement: vec![1.0, 0.0],
        };
        let (next, flagged) = bw_update(&counts, &[0.5, 0.2]);
        assert_eq!(next, vec![0.75, 0.2]);
        assert_eq!(flagged, vec![1]);
    }

    #[test]
    fn single_candidate_training_has_zero_likelihood() {
        let (net, params) = single_chain(0.4);
        let problem = SegmentedNetwork {
            segments: vec![Segment {
                net,
                observation: vec!["L".into()],
            }],
            params: params.clone(),
        };
        let opts = TrainOptions {
            max_iters: 5,
            tol: 1e-300,
            ..Default::default()
        };
        let (_, trace) = train_fb(&problem, &params, &opts).unwrap();
        assert!(trace.log_likelihood.iter().all(|ll| ll.abs() < 1e-12));
    }
}
