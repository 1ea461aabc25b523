use std::collections::BTreeMap;

use fedtta::dataio::{dedup, partition_clients, stratified_split, Manifest};
use fedtta::federation::{client_train_seed, run_federation, FederationConfig, TransportKind, WirePrecision};
use fedtta::imaging::PipelineSpec;
use fedtta::model::{init_params, load_dataset, train_on_dataset, ModelSpec};
use fedtta::synthdata::{generate_corpus, SynthSpec};

struct Corpus {
    _dir: tempfile::TempDir,
    train: Manifest,
    test: Manifest,
}

fn corpus(spec: &SynthSpec) -> Corpus {
    let dir = tempfile::tempdir().unwrap();
    let (kept, _) = dedup(&generate_corpus(spec, dir.path()).unwrap());
    let (train, test) = stratified_split(&kept, 0.8, 11).unwrap();
    Corpus { _dir: dir, train, test }
}

fn two_clients(train: &Manifest) -> BTreeMap<u32, Manifest> {
    partition_clients(train, 2, 4).unwrap().into_iter().enumerate().map(|(i, m)| (i as u32, m)).collect()
}

fn pipelines(size: usize) -> BTreeMap<u32, PipelineSpec> {
    [(0, PipelineSpec::original(size).unwrap()), (1, PipelineSpec::preprocessed(size).unwrap())].into_iter().collect()
}

#[test]
fn one_round_one_client_equals_centralized_training() {
    let c = corpus(&SynthSpec { per_class_counts: vec![25; 4], image_size: 16, ..SynthSpec::default() });
    let spec = ModelSpec::tiny_conv_net(16, 4);
    let pipeline = PipelineSpec::preprocessed(16).unwrap();
    let mut cfg = FederationConfig::new([(3, pipeline.clone())].into_iter().collect());
    cfg.num_rounds = 1;
    cfg.local_epochs = 2;
    cfg.seed = 42;
    let clients: BTreeMap<u32, Manifest> = [(3, c.train.clone())].into_iter().collect();
    let fed = run_federation(&cfg, &spec, &clients, &c.test, TransportKind::InProcess).unwrap();

    let data = load_dataset(&c.train, &pipeline, &spec).unwrap();
    let init = init_params(&spec, 42).unwrap();
    let central = train_on_dataset(&init, &spec, &data, &cfg.train_config(), client_train_seed(42, 3, 0)).unwrap();
    assert_eq!(fed.global.values(), central.values());
    let r = &fed.rounds[0];
    assert_eq!(r.clients[0].metrics, r.global[0].metrics);
}

#[test]
fn repeated_runs_and_transports_agree_bitwise() {
    let c = corpus(&SynthSpec { per_class_counts: vec![20; 4], image_size: 16, ..SynthSpec::default() });
    let spec = ModelSpec::tiny_conv_net(16, 4);
    let mut cfg = FederationConfig::new(pipelines(16));
    cfg.num_rounds = 2;
    cfg.local_epochs = 1;
    cfg.seed = 9;
    let clients = two_clients(&c.train);
    let a = run_federation(&cfg, &spec, &clients, &c.test, TransportKind::InProcess).unwrap();
    let b = run_federation(&cfg, &spec, &clients, &c.test, TransportKind::InProcess).unwrap();
    let s = run_federation(&cfg, &spec, &clients, &c.test, TransportKind::Socket).unwrap();
    assert_eq!(a.global.values(), b.global.values());
    assert_eq!(a.global.values(), s.global.values());
    assert_eq!(a.rounds, s.rounds);

    // FP16 on the wire changes the result but stays deterministic.
    cfg.wire_precision = WirePrecision::Fp16;
    let h1 = run_federation(&cfg, &spec, &clients, &c.test, TransportKind::InProcess).unwrap();
    let h2 = run_federation(&cfg, &spec, &clients, &c.test, TransportKind::Socket).unwrap();
    assert_eq!(h1.global.values(), h2.global.values());
    assert_ne!(h1.global.values(), a.global.values());
}

#[test]
fn separable_data_reaches_high_accuracy() {
    // Fixed placement keeps the classes linearly separable. Both clients use
    // the Original pipeline: equalizing a flat noisy background scrambles the
    // pixels a linear model relies on.
    let synth = SynthSpec { per_class_counts: vec![100; 4], image_size: 16, jitter: false, noise_sigma: 0.01, low_contrast_fraction: 0.0, ..SynthSpec::default() };
    let c = corpus(&synth);
    let spec = ModelSpec::softmax_regression(16, 4);
    let original = PipelineSpec::original(16).unwrap();
    let mut cfg = FederationConfig::new([(0, original.clone()), (1, original)].into_iter().collect());
    cfg.local_epochs = 20;
    let out = run_federation(&cfg, &spec, &two_clients(&c.train), &c.test, TransportKind::InProcess).unwrap();
    assert_eq!(out.rounds.len(), 3);
    let last = out.rounds.last().unwrap();
    assert!(last.global_accuracy >= 0.9, "{}", last.global_accuracy);
}

#[test]
fn mismatched_client_set_is_rejected() {
    let c = corpus(&SynthSpec { per_class_counts: vec![5; 4], image_size: 16, ..SynthSpec::default() });
    let cfg = FederationConfig::new(pipelines(16));
    let only_one: BTreeMap<u32, Manifest> = [(0, c.train.clone())].into_iter().collect();
    assert!(run_federation(&cfg, &ModelSpec::tiny_conv_net(16, 4), &only_one, &c.test, TransportKind::InProcess).is_err());
}
