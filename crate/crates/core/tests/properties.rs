mod common;

use common::grouped_case;
use maxent_hmm::hidden::{
    expand_dataset, hv_evaluate, hv_init, hv_posterior, train_hv_em_gis, Emitters, HiddenBranch, HiddenDataset,
    HiddenEventBlock, HiddenMaxentModel,
};
use maxent_hmm::io::{parse_events, parse_model, parse_seq, write_events, write_model, write_seq, ModelFile};
use maxent_hmm::maxent::{evaluate, Candidate, Dataset, EventBlock, MaxentModel, TrainOptions};
use maxent_hmm::reduction::max_tv_distance;
use maxent_hmm::seq::{enumerate_paths, MemmLattice};
use maxent_hmm::synth::{memm_generate, random_dataset, MemmSpec, RandomDatasetSpec};
use maxent_hmm::transforms::{materialize_groups, scale_group, strip_anti_indicators, ScaleFactor};
use proptest::prelude::*;

fn tv_between(a: &MaxentModel, da: &Dataset, b: &MaxentModel, db: &Dataset) -> f64 {
    da.events()
        .iter()
        .zip(db.events())
        .map(|(x, y)| evaluate(a, x).unwrap().total_variation(&evaluate(b, y).unwrap()))
        .fold(0.0, f64::max)
}

fn small_dataset(seed: u64) -> Dataset {
    random_dataset(
        &RandomDatasetSpec {
            num_outputs: 3,
            num_features: 6,
            num_histories: 3,
            num_events: 12,
            max_active: 3,
        },
        seed,
    )
    .unwrap()
}

fn random_model(n: usize, logs: &[f64]) -> MaxentModel {
    MaxentModel::new((0..n).map(|i| logs[i % logs.len()].exp()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn completion_and_scaling_preserve_distributions(seed in 0u64..10_000) {
        let case = grouped_case(seed, 4, 5);
        prop_assert!(case.subunit.weights().iter().all(|&w| w > 0.0 && w < 1.0));
        prop_assert!(tv_between(&case.original, &case.data, &case.subunit, &case.completed) < 1e-12);
        let (back, data) = strip_anti_indicators(&case.subunit, &case.completed, &case.partition).unwrap();
        prop_assert_eq!(data.num_features(), case.data.num_features());
        prop_assert!(tv_between(&case.original, &case.data, &back, &data) < 1e-12);
        prop_assert_eq!(materialize_groups(&case.data, &case.partition).unwrap(), case.completed.clone());
    }

    #[test]
    fn exact_group_scaling_is_invisible(seed in 0u64..10_000, log_alpha in -4.0f64..4.0, pick in 0usize..16) {
        let case = grouped_case(seed, 4, 5);
        let g = &case.partition.groups[pick % case.partition.groups.len()];
        let scaled = scale_group(&case.subunit, g, ScaleFactor::new(log_alpha.exp()).unwrap()).unwrap();
        prop_assert!(tv_between(&scaled, &case.completed, &case.subunit, &case.completed) < 1e-12);
    }

    #[test]
    fn candidate_order_does_not_matter(seed in 0u64..10_000, logs in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let data = small_dataset(seed);
        let m = random_model(data.num_features(), &logs);
        for e in data.events() {
            let mut cands = e.candidates().to_vec();
            cands.reverse();
            let rev = EventBlock::new(e.id.clone(), e.true_label(), cands).unwrap();
            let (a, b) = (evaluate(&m, e).unwrap(), evaluate(&m, &rev).unwrap());
            for (label, p) in a.entries() {
                prop_assert!((p - b.get(label).unwrap()).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn compare_is_symmetric(seed in 0u64..10_000, la in prop::collection::vec(-3.0f64..3.0, 1..8), lb in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let data = small_dataset(seed);
        let a = random_model(data.num_features(), &la);
        let b = random_model(data.num_features(), &lb);
        prop_assert_eq!(max_tv_distance(&a, &b, &data).unwrap(), max_tv_distance(&b, &a, &data).unwrap());
        prop_assert_eq!(max_tv_distance(&a, &a, &data).unwrap(), 0.0);
    }

    #[test]
    fn events_round_trip(seed in 0u64..10_000) {
        let data = small_dataset(seed);
        let text = write_events(&data);
        let parsed = parse_events(&text).unwrap();
        prop_assert!(parsed.warnings.is_empty());
        prop_assert_eq!(&parsed.value, &data);
        prop_assert_eq!(write_events(&parsed.value), text);
    }

    #[test]
    fn model_round_trip_is_bit_exact(logs in prop::collection::vec(-700.0f64..700.0, 1..20), seed in 0u64..10_000) {
        let m = ModelFile::plain(MaxentModel::new(logs.iter().map(|l| l.exp()).collect()).unwrap());
        prop_assert_eq!(parse_model(&write_model(&m)).unwrap(), m);
        let case = grouped_case(seed, 3, 3);
        let grouped = ModelFile::Maxent { model: case.subunit, partition: Some(case.partition) };
        prop_assert_eq!(parse_model(&write_model(&grouped)).unwrap(), grouped);
        let data = expand_dataset(&small_dataset(seed), 2).unwrap();
        let hidden = ModelFile::Hidden(hv_init(&data, seed));
        prop_assert_eq!(parse_model(&write_model(&hidden)).unwrap(), hidden);
    }

    #[test]
    fn memm_files_round_trip(seed in 0u64..10_000) {
        let d = memm_generate(&MemmSpec { num_states: 3, num_observations: 2, num_sequences: 3, length: 4, num_test: 2, seed }).unwrap();
        for data in [&d.train, &d.test] {
            let parsed = parse_seq(&write_seq(data)).unwrap();
            prop_assert_eq!(&parsed.value, data);
        }
        let m = ModelFile::Memm(d.truth.clone());
        prop_assert_eq!(parse_model(&write_model(&m)).unwrap(), m);
    }

    #[test]
    fn memm_is_locally_normalized(seed in 0u64..10_000, ns in 1usize..4, len in 1usize..5) {
        let d = memm_generate(&MemmSpec { num_states: ns, num_observations: 2, num_sequences: 1, length: len, num_test: 1, seed }).unwrap();
        for (_, blocks) in d.test.sequences() {
            let lattice = MemmLattice::from_blocks(&blocks).unwrap();
            for step in &lattice.steps {
                for (src, cands) in step {
                    let dist = d.truth.step(src, cands).unwrap();
                    prop_assert!((dist.total() - 1.0).abs() < 1e-12);
                }
            }
            let total: f64 = enumerate_paths(&d.truth, &lattice, None).unwrap().iter().map(|(_, p)| p).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}

/// Hand-built hidden blocks where selector feature 0 and emitter feature 0
/// fire on every candidate of their stage.
fn shared_feature_blocks(seed: u64, k: usize) -> (Vec<HiddenEventBlock>, HiddenMaxentModel) {
    use rand::Rng;
    let mut r = common::rng(seed);
    let labels: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
    let mut blocks = Vec::new();
    for h in 0..4 {
        let branches = (0..k)
            .map(|z| {
                let mut sel = vec![0, 1 + z];
                if r.random_bool(0.5) {
                    sel.push(1 + k + h);
                }
                let outputs = labels
                    .iter()
                    .enumerate()
                    .map(|(x, l)| {
                        let mut ids = vec![0, 1 + x];
                        if r.random_bool(0.5) {
                            ids.push(4 + h);
                        }
                        Candidate::new(l.clone(), ids).unwrap()
                    })
                    .collect();
                HiddenBranch {
                    selector: Candidate::new(format!("z{z}"), sel).unwrap(),
                    outputs,
                }
            })
            .collect();
        blocks.push(HiddenEventBlock::new(format!("h{h}"), "a", labels.clone(), branches).unwrap());
    }
    let mut w = |n: usize| MaxentModel::new((0..n).map(|_| r.random_range(-2.0f64..2.0).exp()).collect()).unwrap();
    let model = HiddenMaxentModel {
        hidden_values: (0..k).map(|z| format!("z{z}")).collect(),
        selector: w(1 + k + 4),
        emitters: Emitters::Maxent((0..k).map(|_| w(8)).collect()),
    };
    (blocks, model)
}

fn scale_first(m: &MaxentModel, alpha: f64) -> MaxentModel {
    let mut w = m.weights().to_vec();
    w[0] *= alpha;
    MaxentModel::new(w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn hidden_shared_features_scale_out(seed in 0u64..10_000, k in 1usize..4, la in -3.0f64..3.0, lb in -3.0f64..3.0) {
        let (blocks, model) = shared_feature_blocks(seed, k);
        let Emitters::Maxent(ms) = &model.emitters else { unreachable!() };
        let scaled = HiddenMaxentModel {
            hidden_values: model.hidden_values.clone(),
            selector: scale_first(&model.selector, la.exp()),
            emitters: Emitters::Maxent(ms.iter().map(|m| scale_first(m, lb.exp())).collect()),
        };
        for b in &blocks {
            let tv = hv_evaluate(&model, b).unwrap().total_variation(&hv_evaluate(&scaled, b).unwrap());
            prop_assert!(tv < 1e-12);
            let post = hv_posterior(&model, b, "b").unwrap();
            prop_assert!((post.total() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_value_relabeling_is_invisible(seed in 0u64..10_000, k in 2usize..4, shift in 1usize..3) {
        let (blocks, model) = shared_feature_blocks(seed, k);
        let perm: Vec<usize> = (0..k).map(|z| (z + shift) % k).collect();
        let (pb, pm) = permute(&blocks, &model, &perm);
        for (a, b) in blocks.iter().zip(&pb) {
            let tv = hv_evaluate(&model, a).unwrap().total_variation(&hv_evaluate(&pm, b).unwrap());
            prop_assert!(tv < 1e-12);
        }
    }
}

fn permute(
    blocks: &[HiddenEventBlock],
    model: &HiddenMaxentModel,
    perm: &[usize],
) -> (Vec<HiddenEventBlock>, HiddenMaxentModel) {
    let pb = blocks
        .iter()
        .map(|b| {
            let branches = perm.iter().map(|&z| b.branches()[z].clone()).collect();
            HiddenEventBlock::new(b.id.clone(), b.true_label(), b.labels().to_vec(), branches).unwrap()
        })
        .collect();
    let emitters = match &model.emitters {
        Emitters::Maxent(ms) => Emitters::Maxent(perm.iter().map(|&z| ms[z].clone()).collect()),
        Emitters::Deterministic(ls) => Emitters::Deterministic(perm.iter().map(|&z| ls[z].clone()).collect()),
    };
    let pm = HiddenMaxentModel {
        hidden_values: perm.iter().map(|&z| model.hidden_values[z].clone()).collect(),
        selector: model.selector.clone(),
        emitters,
    };
    (pb, pm)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn hidden_training_commutes_with_relabeling(seed in 0u64..10_000) {
        let data = expand_dataset(&small_dataset(seed), 2).unwrap();
        let init = hv_init(&data, seed);
        let opts = TrainOptions { max_iters: 30, tol: 1e-300, ..Default::default() };
        let (m1, t1) = train_hv_em_gis(&data, &init, &opts).unwrap();
        let perm = [1, 0];
        let (pb, pinit) = permute(&data.blocks, &init, &perm);
        let pdata = HiddenDataset { blocks: pb, hidden_values: pinit.hidden_values.clone(), ..data.clone() };
        let (m2, t2) = train_hv_em_gis(&pdata, &pinit, &opts).unwrap();
        for (a, b) in t1.log_likelihood.iter().zip(&t2.log_likelihood) {
            prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        }
        for (a, b) in data.blocks.iter().zip(&pdata.blocks) {
            let tv = hv_evaluate(&m1, a).unwrap().total_variation(&hv_evaluate(&m2, b).unwrap());
            prop_assert!(tv < 1e-9);
        }
    }
}
