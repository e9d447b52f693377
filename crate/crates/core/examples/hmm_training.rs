//! GIS and forward-backward on the HMM reduction reach the same model.

use maxent_hmm::maxent::{train_gis_pruned, TrainOptions};
use maxent_hmm::reduction::{train_maxent_via_hmm, ViaHmmOptions};
use maxent_hmm::synth::{random_dataset, RandomDatasetSpec};

fn main() -> maxent_hmm::Result<()> {
    let spec = RandomDatasetSpec {
        num_outputs: 3,
        num_features: 8,
        num_histories: 4,
        num_events: 40,
        max_active: 3,
    };
    let data = random_dataset(&spec, 17)?;
    let opts = TrainOptions {
        tol: 1e-5,
        max_iters: 100_000,
        ..Default::default()
    };
    let (gis, gis_trace) = train_gis_pruned(&data, &opts)?;
    let (_, report) = train_maxent_via_hmm(
        &data,
        &opts,
        &ViaHmmOptions {
            reference: Some(gis),
            ..Default::default()
        },
    )?;
    println!(
        "gis: {} iterations, ll {:.6}",
        gis_trace.iterations,
        gis_trace.final_log_likelihood().unwrap()
    );
    println!(
        "fb:  {} iterations, ll {:.6}, {} groups, {} anti-indicators, {:.1} chain steps per event",
        report.trace.iterations,
        report.final_log_likelihood,
        report.num_groups,
        report.num_anti_indicators,
        report.ops_per_event
    );
    println!("max total variation between them: {:.2e}", report.max_tv.unwrap());
    Ok(())
}
