//! Train a tiny conditional model with GIS and print its distributions.

use maxent_hmm::maxent::{
    constraint_residual, evaluate, train_gis, Candidate, Dataset, EventBlock, MaxentModel, TrainOptions,
};

fn main() -> maxent_hmm::Result<()> {
    // features: 0 = rain & carry, 1 = sun & carry, 2 = leave
    let wet = |id: &str, gold: &str| {
        EventBlock::new(
            id,
            gold,
            vec![Candidate::new("carry", vec![0])?, Candidate::new("leave", vec![2])?],
        )
    };
    let dry = |id: &str, gold: &str| {
        EventBlock::new(
            id,
            gold,
            vec![Candidate::new("carry", vec![1])?, Candidate::new("leave", vec![2])?],
        )
    };
    let data = Dataset::new(
        vec![
            wet("wet1", "carry")?,
            wet("wet2", "carry")?,
            wet("wet3", "leave")?,
            dry("dry1", "leave")?,
            dry("dry2", "leave")?,
            dry("dry3", "leave")?,
            dry("dry4", "carry")?,
        ],
        3,
    )?;
    let (model, trace) = train_gis(&MaxentModel::uniform(3), &data, &TrainOptions::default())?;
    println!(
        "converged={} after {} iterations, residual {:.2e}",
        trace.converged,
        trace.iterations,
        constraint_residual(&model, &data)?
    );
    println!("weights {:?}", model.weights());
    for e in [&data.events()[0], &data.events()[3]] {
        println!("{}: {:?}", e.id, evaluate(&model, e)?.entries());
    }
    Ok(())
}
