//! Complete exclusive feature sets into exact groups, push every weight
//! below one, then undo it. The conditional distributions never move.

use maxent_hmm::maxent::{evaluate, MaxentModel};
use maxent_hmm::synth::{grouped_dataset, GroupedSpec};
use maxent_hmm::transforms::{complete_groups, partition_exclusive, strip_anti_indicators, to_subunit};

fn main() -> maxent_hmm::Result<()> {
    let spec = GroupedSpec {
        num_outputs: 3,
        num_groups: 2,
        group_size: 3,
        num_histories: 2,
        num_events: 6,
        skip_prob: 0.4,
    };
    let data = grouped_dataset(&spec, 3)?;
    let model = MaxentModel::new((0..data.num_features()).map(|i| 0.5 + i as f64).collect())?;

    let part = partition_exclusive(&data);
    let (full, completed, groups) = complete_groups(&model, &data, &part)?;
    let sub = to_subunit(&full, &groups)?;
    println!(
        "{} features -> {} after completion ({} anti-indicators); all weights below one: {}",
        data.num_features(),
        completed.num_features(),
        groups.anti_ids.len(),
        sub.max_weight() < 1.0
    );
    let (back, _) = strip_anti_indicators(&sub, &completed, &groups)?;
    for (orig, done) in data.events().iter().zip(completed.events()) {
        let tv = evaluate(&model, orig)?.total_variation(&evaluate(&sub, done)?);
        let tv_back = evaluate(&model, orig)?.total_variation(&evaluate(&back, orig)?);
        println!("{:8} tv(sub) {tv:.1e}  tv(stripped) {tv_back:.1e}", orig.id);
    }
    Ok(())
}
