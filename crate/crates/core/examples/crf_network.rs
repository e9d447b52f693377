//! The same lattice wired two ways. With restarts local to each step the
//! network gives MEMM path probabilities; restarting from the very beginning
//! gives masses proportional to the unnormalized global path weight.

use maxent_hmm::hmm::sequence_probability;
use maxent_hmm::maxent::MaxentModel;
use maxent_hmm::seq::{
    all_paths, build_sequence_network, crf_path_weight, memm_sequence_probability, SequenceKind, SequenceSpec,
};
use maxent_hmm::seq::{MemmLattice, MemmModel};
use maxent_hmm::synth::{memm_generate, MemmSpec};

fn main() -> maxent_hmm::Result<()> {
    let d = memm_generate(&MemmSpec {
        num_states: 2,
        num_observations: 2,
        num_sequences: 1,
        length: 3,
        num_test: 1,
        seed: 4,
    })?;
    // network parameters must lie below one
    let model = MemmModel {
        models: d
            .truth
            .models
            .iter()
            .map(|(s, m)| {
                let max = m.max_weight() * 1.01;
                Ok((
                    s.clone(),
                    MaxentModel::new(m.weights().iter().map(|w| w / max).collect())?,
                ))
            })
            .collect::<maxent_hmm::Result<_>>()?,
        ..d.truth.clone()
    };
    let (_, blocks) = d.test.sequences().remove(0);
    let lattice = MemmLattice::from_blocks(&blocks)?;
    let spec = || SequenceSpec::Lattice {
        model: &model,
        lattice: &lattice,
        init: None,
    };
    let memm = build_sequence_network(SequenceKind::Memm, spec())?;
    let crf = build_sequence_network(SequenceKind::Crf, spec())?;

    let paths = all_paths(&lattice);
    let weights: Vec<f64> = paths
        .iter()
        .map(|p| crf_path_weight(&model, &lattice, p, None))
        .collect::<Result<_, _>>()?;
    let masses: Vec<f64> = paths
        .iter()
        .map(|p| sequence_probability(&crf.net, &crf.params, &p.iter().map(String::as_str).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    let (wz, mz): (f64, f64) = (weights.iter().sum(), masses.iter().sum());
    println!("path        memm      net(memm)  crf share  net share");
    for ((p, w), m) in paths.iter().zip(&weights).zip(&masses) {
        let obs: Vec<&str> = p.iter().map(String::as_str).collect();
        println!(
            "{:10}  {:.6}  {:.6}   {:.6}   {:.6}",
            p.join(","),
            memm_sequence_probability(&model, &lattice, p, None)?,
            sequence_probability(&memm.net, &memm.params, &obs)?,
            w / wz,
            m / mz
        );
    }
    println!(
        "mass on length-{} strings in the global network: {mz:.4}",
        lattice.len()
    );
    Ok(())
}
