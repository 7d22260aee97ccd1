mod common;

use common::*;
use fedsynth::autodiff::{Architecture, Model, SgdConfig};
use fedsynth::config::ExperimentConfig;
use fedsynth::data::{make_blobs, BlobsSpec, Dataset, PartitionScheme};
use fedsynth::engine::*;
use fedsynth::hfmds::{SyntheticDataset, SyntheticLabel, SyntheticSample};
use fedsynth::metrics::MetricsRow;
use fedsynth::parse_config;
use fedsynth::runner::{simulate, Simulation};
use fedsynth::seed::stream;
use fedsynth::Tensor;
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;

fn shard_and_syn() -> (Dataset, SyntheticDataset) {
    let b = make_blobs(&BlobsSpec { classes: 3, dim: 5, per_class: 4, spread: 0.3 }, 7).unwrap();
    let shard = b.train;
    let x = random_matrix(3, shard.len(), 5, 0.0, 1.0);
    let samples = (0..shard.len())
        .map(|i| SyntheticSample {
            input: x.row(i).to_vec(),
            label: SyntheticLabel::Hard(i % 3),
            client: 0,
            round: 1,
            paired_index: i,
            initial_loss: None,
            final_loss: None,
        })
        .collect();
    let syn = SyntheticDataset { samples, input_dim: 5, feature_dim: 0, classes: 3, client: None, round: 1, model_fingerprint: String::new() };
    (shard, syn)
}

fn oracle_mixed(m: &Model, shard: &Dataset, syn: &SyntheticDataset, alpha: f64) -> f64 {
    let ce = |x: &Tensor, y: &[usize]| {
        let o = oracle_forward(m, x);
        o.logits.iter().zip(y).map(|(q, &c)| oracle_ce(q, c)).sum::<f64>() / y.len() as f64
    };
    let idx: Vec<usize> = (0..syn.len()).collect();
    let sy: Vec<usize> = syn.samples.iter().map(|s| s.label.class()).collect();
    alpha * ce(&shard.all_inputs().unwrap(), shard.labels()) + (1.0 - alpha) * ce(&syn.batch(&idx).unwrap(), &sy)
}

#[test]
fn single_step_matches_oracle_gradient() {
    let (shard, syn) = shard_and_syn();
    for seed in 0..3 {
        let m = Model::init(Architecture::mlp(5, &[7], 4, 3), &mut stream(seed)).unwrap();
        let mut client = ClientState::new(0, shard.clone(), 4, stream(seed + 10));
        let cfg = LocalConfig {
            alpha: 0.3,
            epochs: 1,
            batch_size: shard.len(),
            sgd: SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 },
            lambda: 0.5,
        };
        let out = local_update(&m, &mut client, &syn, &cfg).unwrap();
        assert_eq!(out.steps, 1);
        let before = m.flat_params();
        let after = out.model.flat_params();
        let x_all = shard.all_inputs().unwrap();
        let idx: Vec<usize> = (0..syn.len()).collect();
        let xs = syn.batch(&idx).unwrap();
        let pattern = |m: &Model| (oracle_forward(m, &x_all).pattern, oracle_forward(m, &xs).pattern);
        let base = pattern(&m);
        let sizes: Vec<usize> = m.params().map(|p| p.tensor.numel()).collect();
        let mut rng = stream(seed + 99);
        let mut checked = 0;
        while checked < 40 {
            let pi = rng.random_range(0..sizes.len());
            let ci = rng.random_range(0..sizes[pi]);
            let flat = sizes[..pi].iter().sum::<usize>() + ci;
            let mut plus = m.clone();
            plus.params_mut().nth(pi).unwrap().tensor.data_mut()[ci] += H;
            let mut minus = m.clone();
            minus.params_mut().nth(pi).unwrap().tensor.data_mut()[ci] -= H;
            if pattern(&plus) != base || pattern(&minus) != base {
                continue;
            }
            let grad = (oracle_mixed(&plus, &shard, &syn, 0.3) - oracle_mixed(&minus, &shard, &syn, 0.3)) / (2.0 * H);
            let dw = after[flat] - before[flat];
            assert!((dw + 0.1 * grad).abs() < 1e-10, "seed {seed} coord {flat}: {dw} vs {}", -0.1 * grad);
            checked += 1;
        }
    }
}

#[test]
fn alpha_zero_ignores_real_labels_but_accumulates() {
    let (shard, syn) = shard_and_syn();
    let relabelled = Dataset::new(5, 3, shard.inputs().to_vec(), shard.labels().iter().map(|y| (y + 1) % 3).collect()).unwrap();
    let m = Model::init(Architecture::mlp(5, &[7], 4, 3), &mut stream(1)).unwrap();
    let cfg = LocalConfig { alpha: 0.0, epochs: 2, batch_size: 4, sgd: SgdConfig { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 }, lambda: 0.5 };
    let mut a = ClientState::new(0, shard.clone(), 4, stream(5));
    let mut b = ClientState::new(0, relabelled, 4, stream(5));
    let ma = local_update(&m, &mut a, &syn, &cfg).unwrap().model;
    let mb = local_update(&m, &mut b, &syn, &cfg).unwrap().model;
    let bits = |m: &Model| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&ma), bits(&mb));
    assert_eq!(a.accumulator.counts.iter().sum::<usize>(), cfg.epochs * shard.len());
}

#[test]
fn aggregate_matches_plain_mean() {
    let arch = Architecture::mlp(6, &[5], 4, 3);
    let models: Vec<Model> = (0..3).map(|s| Model::init(arch.clone(), &mut stream(s)).unwrap()).collect();
    let agg = aggregate(&models).unwrap().flat_params();
    let flats: Vec<Vec<f64>> = models.iter().map(Model::flat_params).collect();
    for (i, v) in agg.iter().enumerate() {
        let mean = (flats[0][i] + flats[1][i] + flats[2][i]) / 3.0;
        assert!((v - mean).abs() <= 1e-15);
    }
}

fn quick(extra: &str) -> ExperimentConfig {
    let base = r#"{"rounds": 6, "syn_interval": 3, "syn_steps": 5, "syn_size": 8, "clients": 4,
        "dataset": {"classes": 3, "dim": 5, "per_class": 20, "spread": 0.3},
        "model": {"hidden": [8], "feature_dim": 4}"#;
    parse_config(&format!("{base}{extra}}}")).unwrap()
}

fn without_ms(rows: &[MetricsRow]) -> Vec<MetricsRow> {
    rows.iter().map(|r| MetricsRow { ms: 0, ..r.clone() }).collect()
}

#[test]
fn synthesis_schedule() {
    let mut sim = Simulation::new(&quick(r#", "rounds": 7"#)).unwrap();
    let mut due = Vec::new();
    while !sim.finished() {
        let plan = sim.step().unwrap();
        assert_eq!(plan.active, vec![0, 1, 2, 3]);
        if plan.synthesis_due {
            due.push(plan.round);
        }
    }
    assert_eq!(due, vec![3, 6]);
    assert_eq!(sim.state.synthetic.len(), 4 * 8);
    let rows = sim.metrics();
    assert!(rows[..2].iter().all(|r| r.syn_size == 0 && r.psnr.is_none()));
    assert!(rows[2..].iter().all(|r| r.syn_size == 32 && r.psnr.is_some()));
}

#[test]
fn rounds_before_first_synthesis_match_fedavg() {
    let h = simulate(&quick(r#", "rounds": 3"#)).unwrap();
    let f = simulate(&quick(r#", "rounds": 3, "algorithm": "fedavg""#)).unwrap();
    for (a, b) in h.metrics[..2].iter().zip(&f.metrics[..2]) {
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
    }
}

#[test]
fn alpha_one_without_synthesis_is_fedavg() {
    let h = simulate(&quick(r#", "alpha": 1.0, "syn_interval": 100"#)).unwrap();
    let f = simulate(&quick(r#", "algorithm": "fedavg""#)).unwrap();
    let bits = |m: &Model| m.flat_params().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&h.final_model), bits(&f.final_model));
    for (a, b) in h.metrics.iter().zip(&f.metrics) {
        assert_eq!((a.accuracy.to_bits(), a.train_loss.to_bits()), (b.accuracy.to_bits(), b.train_loss.to_bits()));
    }
}

#[test]
fn twenty_clients_give_two_thousand_synthetic_samples() {
    let cfg = parse_config(
        r#"{"rounds": 1, "syn_interval": 1, "syn_steps": 1, "clients": 20,
            "dataset": {"classes": 10, "dim": 8, "per_class": 200, "spread": 0.3},
            "partition": {"scheme": "label_skew", "classes_per_client": 2},
            "model": {"hidden": [8], "feature_dim": 4}}"#,
    )
    .unwrap();
    let mut sim = Simulation::new(&cfg).unwrap();
    sim.step().unwrap();
    assert_eq!(sim.state.synthetic.len(), 2000);
}

#[test]
fn partial_participation_is_deterministic() {
    let cfg = quick(r#", "active_clients": 2"#);
    let a = simulate(&cfg).unwrap();
    let b = simulate(&cfg).unwrap();
    assert_eq!(without_ms(&a.metrics), without_ms(&b.metrics));
    assert_eq!(a.events, b.events);
}

#[test]
fn dirichlet_runs_end_to_end() {
    let mut cfg = quick("");
    cfg.partition = PartitionScheme::Dirichlet { concentration: 0.05 };
    let out = simulate(&cfg).unwrap();
    assert_eq!(out.metrics.len(), 6);
    assert!(out.metrics.iter().all(|r| (0.0..=1.0).contains(&r.accuracy)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn aggregate_is_order_insensitive(seeds in prop::collection::vec(0u64..1000, 2..6)) {
        let arch = Architecture::mlp(4, &[3], 3, 2);
        let models: Vec<Model> = seeds.iter().map(|&s| Model::init(arch.clone(), &mut stream(s)).unwrap()).collect();
        let mut rev = models.clone();
        rev.reverse();
        let a = aggregate(&models).unwrap().flat_params();
        let b = aggregate(&rev).unwrap().flat_params();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn sampled_clients_are_valid(k in 1usize..30, frac in 0.0f64..1.0, seed in any::<u64>()) {
        let active = ((k as f64 * frac).ceil() as usize).max(1);
        let ids = sample_clients(k, active, &mut stream(seed)).unwrap();
        prop_assert_eq!(ids.len(), active);
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ids.iter().all(|&i| i < k));
    }
}
