//! Data whose label depends on an unobserved factor: a two-valued hidden
//! model against a plain one, both with a fixed iteration budget.

use maxent_hmm::hidden::{expand_block, expand_dataset, hv_init, hv_predict, train_hv_em_gis};
use maxent_hmm::maxent::{evaluate, train_gis_pruned, Dataset, TrainOptions};
use maxent_hmm::synth::{synth_generate, GeneratorKind, SynthSpec};

fn main() -> maxent_hmm::Result<()> {
    let (data, _truth) = synth_generate(&SynthSpec {
        kind: GeneratorKind::Hidden,
        num_events: 1500,
        seed: 3,
        ..SynthSpec::default()
    })?;
    let g = data.num_features();
    let (train, test) = data.events().split_at(1000);
    let train = Dataset::new(train.to_vec(), g)?;
    let opts = TrainOptions {
        max_iters: 200,
        tol: 1e-3,
        ..Default::default()
    };

    let (plain, _) = train_gis_pruned(&train, &opts)?;
    let hd = expand_dataset(&train, 2)?;
    let (hidden, trace) = train_hv_em_gis(&hd, &hv_init(&hd, 3), &opts)?;
    println!(
        "hidden log-likelihood {:.2} after {} iterations",
        trace.final_log_likelihood().unwrap(),
        trace.iterations
    );

    let (mut p_hits, mut h_hits) = (0, 0);
    for e in test {
        p_hits += usize::from(evaluate(&plain, e)?.argmax() == Some(e.true_label()));
        let pred = hv_predict(&hidden, &expand_block(e, 2, g)?)?;
        h_hits += usize::from(pred.label == e.true_label());
    }
    let n = test.len() as f64;
    println!(
        "test accuracy: plain {:.3}, hidden {:.3}",
        p_hits as f64 / n,
        h_hits as f64 / n
    );

    let first = hv_predict(&hidden, &expand_block(&test[0], 2, g)?)?;
    println!("{}: predicted {}", test[0].id, first.label);
    for (label, post) in &first.posteriors {
        println!("  P(z | {label}) = {:?}", post.entries());
    }
    Ok(())
}
