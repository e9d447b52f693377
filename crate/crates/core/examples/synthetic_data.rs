//! Generate a small synthetic corpus and print it in the events file format.

use maxent_hmm::io::write_events;
use maxent_hmm::maxent::{evaluate, train_gis_pruned, TrainOptions};
use maxent_hmm::synth::{synth_generate, GeneratorKind, SynthSpec};

fn main() -> maxent_hmm::Result<()> {
    let spec = SynthSpec {
        kind: GeneratorKind::Plain,
        num_events: 400,
        template_sizes: vec![2, 3],
        seed: 1,
        ..SynthSpec::default()
    };
    let (data, truth) = synth_generate(&spec)?;
    let text = write_events(&data);
    for line in text.lines().take(9) {
        println!("{line}");
    }
    println!("... {} events, {} features", data.len(), data.num_features());

    let (model, _) = train_gis_pruned(
        &data,
        &TrainOptions {
            max_iters: 500,
            tol: 1e-4,
            ..Default::default()
        },
    )?;
    let e = &data.events()[0];
    println!("truth  {:?}", truth.conditional(e)?.entries());
    println!("fitted {:?}", evaluate(&model, e)?.entries());
    Ok(())
}
