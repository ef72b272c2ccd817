use exitsteal_core::attack::{estimate_exit_labels, train_baseline, train_substitute, AttackConfig, QueryRecord};
use exitsteal_core::changepoint::BcdConfig;
use exitsteal_core::data::LabeledSet;
use exitsteal_core::metrics::make_report;
use exitsteal_core::multiexit::{Activation, BackboneSpec, MultiExitNet, OutputStrategy};
use exitsteal_core::numerics::Tensor;
use exitsteal_core::search::{search_strategy, CalibrationPoint};
use exitsteal_core::victimlab::{train_victim, TimingModel, TrainConfig, VictimDeployment};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const CLASSES: usize = 3;
const FEATURES: usize = 4;

/// Well-separated Gaussian clusters, one per class, with the noise level
/// cycling through easy and hard tiers.
fn blobs(n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..CLASSES)
        .map(|c| (0..FEATURES).map(|f| if f == c { 3.0 } else { 0.0 }).collect())
        .collect();
    let tiers = [0.3, 1.0, 1.6, 2.2];
    let mut data = Vec::with_capacity(n * FEATURES);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = rng.gen_range(0..CLASSES);
        let noise = Normal::new(0.0, tiers[i % tiers.len()]).unwrap();
        data.extend(centers[c].iter().map(|m| m + noise.sample(&mut rng)));
        labels.push(c);
    }
    LabeledSet::new(Tensor::new(vec![n, FEATURES], data).unwrap(), labels).unwrap()
}

fn net(widths: &[usize], seed: u64) -> MultiExitNet {
    let backbone = BackboneSpec::dense(FEATURES, widths, Activation::Relu);
    MultiExitNet::build_evenly_partitioned(backbone, widths.len(), CLASSES, seed).unwrap()
}

fn trained_victim() -> (VictimDeployment, LabeledSet) {
    let train = blobs(600, 1);
    let cfg = TrainConfig {
        epochs: 30,
        ..TrainConfig::default()
    };
    let victim = train_victim(net(&[16; 4], 2), &train, &cfg).unwrap();
    let timing = TimingModel::uniform(&victim, 1.0, 0.2, 0.02, 3);
    let strategy = OutputStrategy::uniform(0.9, victim.exit_count()).unwrap();
    (VictimDeployment::new(victim, strategy, timing).unwrap(), train)
}

fn query(victim: &mut VictimDeployment, train: &LabeledSet) -> Vec<QueryRecord> {
    let calibration = train.subset(&(0..300).collect::<Vec<_>>());
    let (cp, records) =
        estimate_exit_labels(victim, calibration.inputs(), train.inputs(), &BcdConfig::default()).unwrap();
    let mut used: Vec<usize> = victim
        .ground_truth(calibration.inputs())
        .unwrap()
        .iter()
        .map(|o| o.exit_index)
        .collect();
    used.sort_unstable();
    used.dedup();
    assert_eq!(used, [1, 2, 3, 4], "every exit should fire");
    assert_eq!(cp.exit_count, 4, "boundaries {:?}", cp.boundaries);
    records
}

#[test]
fn victim_separates_the_low_noise_tiers() {
    let (victim, train) = trained_victim();
    // Rows cycle through the tiers; the two quietest barely overlap.
    let quiet: Vec<usize> = (0..train.len()).filter(|i| i % 4 < 2).collect();
    let quiet = train.subset(&quiet);
    let last = OutputStrategy::last_exit_only(4);
    let outs = victim.net().infer_batch(quiet.inputs(), &last).unwrap();
    let hits = outs
        .iter()
        .zip(quiet.labels())
        .filter(|(o, &l)| o.predicted_class == l)
        .count();
    assert!(hits as f64 / quiet.len() as f64 >= 0.95, "{hits}/{}", quiet.len());
}

#[test]
fn timing_side_channel_recovers_true_exits() {
    let (mut victim, train) = trained_victim();
    let records = query(&mut victim, &train);
    let truth = victim.ground_truth(train.inputs()).unwrap();
    let right = records
        .iter()
        .zip(&truth)
        .filter(|(r, t)| r.estimated_exit == t.exit_index)
        .count();
    assert!(right as f64 / records.len() as f64 >= 0.99, "{right}/{}", records.len());
}

#[test]
fn strategy_loss_falls_tenfold_at_half_weight() {
    let (mut victim, train) = trained_victim();
    let records = query(&mut victim, &train);
    let cfg = AttackConfig {
        lambda: 0.5,
        epochs: 40,
        lr: 0.01,
        ..AttackConfig::default()
    };
    let (_, trace) = train_substitute(net(&[16; 4], 7), &records, &cfg).unwrap();
    let first = trace.rows.first().unwrap().strategy_loss;
    let last = trace.rows.last().unwrap().strategy_loss;
    assert!(last * 10.0 <= first, "strategy loss {first} -> {last}");
}

#[test]
fn extracted_substitute_survives_a_checkpoint_and_tracks_the_victim() {
    let (mut victim, train) = trained_victim();
    let records = query(&mut victim, &train);
    let cfg = AttackConfig {
        epochs: 20,
        lr: 0.01,
        ..AttackConfig::default()
    };
    let (sub, _) = train_substitute(net(&[16; 4], 7), &records, &cfg).unwrap();
    let restored = MultiExitNet::from_checkpoint_bytes(&sub.to_checkpoint_bytes().unwrap()).unwrap();
    let probe = blobs(50, 9);
    assert_eq!(
        sub.forward_batch(probe.inputs()).unwrap(),
        restored.forward_batch(probe.inputs()).unwrap()
    );

    let conf = restored.confidences(train.inputs()).unwrap();
    let points: Vec<CalibrationPoint> = conf
        .into_iter()
        .zip(&records)
        .take(200)
        .map(|(conf, r)| CalibrationPoint {
            conf,
            target_exit: r.estimated_exit,
        })
        .collect();
    let found = search_strategy(&points).unwrap();
    let test = blobs(400, 11);
    let ours = make_report(&restored, &found.strategy, &victim, &test).unwrap();
    let (plain, _) = train_baseline(net(&[16; 4], 7), &records, &cfg).unwrap();
    let last = make_report(&plain, &OutputStrategy::last_exit_only(4), &victim, &test).unwrap();
    assert!(ours.acc >= 0.85, "{ours:?}");
    assert!(ours.clo > last.clo, "searched {} vs last-exit-only {}", ours.clo, last.clo);
}
