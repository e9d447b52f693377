//! Wire one history into an HMM with non-emitting arcs and check that its
//! output distribution is the maxent conditional.

use maxent_hmm::hmm::{expected_counts, output_distribution, validate};
use maxent_hmm::maxent::{evaluate, Candidate, EventBlock, MaxentModel};
use maxent_hmm::reduction::{build_event_network, ChainLayout};

fn main() -> maxent_hmm::Result<()> {
    // two exact groups: {0, 1, 2} and {3, 4}
    let model = MaxentModel::new(vec![0.2, 0.7, 0.45, 0.9, 0.3])?;
    let block = EventBlock::new(
        "h",
        "b",
        vec![
            Candidate::new("a", vec![0, 3])?,
            Candidate::new("b", vec![1, 4])?,
            Candidate::new("c", vec![2, 3])?,
        ],
    )?;
    let owner = [0, 0, 0, 1, 1];
    let layout = ChainLayout::from_groups(block.candidates(), &owner, 2)?;
    let ev = build_event_network(&model, &block, &layout)?;
    assert!(validate(&ev.net, model.weights()).is_empty());

    let net = output_distribution(&ev.net, model.weights())?;
    let direct = evaluate(&model, &block)?;
    for (label, p) in net.entries() {
        println!("{label}: network {p:.12}  maxent {:.12}", direct.get(label).unwrap());
    }
    let counts = expected_counts(&ev.net, model.weights(), "b")?;
    println!(
        "{} states, {} arcs; expected restarts given b: {:.4}",
        ev.net.num_states(),
        ev.net.arcs().len(),
        counts.states[ev.net.start()] - 1.0
    );
    Ok(())
}
