//! Fit per-state transition models from gold paths and decode new sequences.

use maxent_hmm::maxent::TrainOptions;
use maxent_hmm::seq::{memm_decode, train_memm, MemmLattice};
use maxent_hmm::synth::{memm_generate, MemmSpec};

fn main() -> maxent_hmm::Result<()> {
    let d = memm_generate(&MemmSpec {
        num_states: 3,
        num_observations: 3,
        num_sequences: 500,
        length: 6,
        num_test: 4,
        seed: 9,
    })?;
    let (model, traces) = train_memm(
        &d.train,
        &TrainOptions {
            tol: 1e-4,
            ..Default::default()
        },
    )?;
    for (state, t) in &traces {
        println!("{state}: {} iterations", t.iterations);
    }
    for (id, blocks) in d.test.sequences() {
        let lattice = MemmLattice::from_blocks(&blocks)?;
        let (path, p) = memm_decode(&model, &lattice, None)?;
        let (truth_path, _) = memm_decode(&d.truth, &lattice, None)?;
        println!(
            "{id}: obs {}  decoded {}  (p={p:.3}; true model says {})",
            lattice.observations.join(" "),
            path.join(" "),
            truth_path.join(" ")
        );
    }
    Ok(())
}
