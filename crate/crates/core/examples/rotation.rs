//! Iterations to converge with and without rotating the chain order.

use maxent_hmm::maxent::TrainOptions;
use maxent_hmm::reduction::{train_maxent_via_hmm, ViaHmmOptions};
use maxent_hmm::synth::{grouped_dataset, GroupedSpec};

fn main() -> maxent_hmm::Result<()> {
    let spec = GroupedSpec {
        num_outputs: 3,
        num_groups: 3,
        group_size: 4,
        num_histories: 8,
        num_events: 80,
        skip_prob: 0.0,
    };
    let opts = TrainOptions {
        tol: 1e-3,
        max_iters: 100_000,
        ..Default::default()
    };
    println!("seed  rotate  fixed");
    for seed in 0..4 {
        let data = grouped_dataset(&spec, seed)?;
        let iters = |rotate| -> maxent_hmm::Result<usize> {
            let (_, r) = train_maxent_via_hmm(
                &data,
                &opts,
                &ViaHmmOptions {
                    rotate,
                    ..Default::default()
                },
            )?;
            Ok(r.trace.iterations)
        };
        println!("{seed:4}  {:6}  {:5}", iters(true)?, iters(false)?);
    }
    Ok(())
}
