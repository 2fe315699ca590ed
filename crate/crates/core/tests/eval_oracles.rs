use proptest::prelude::*;
use rand::Rng;
use randprune::arch::{parse_network, NetworkSpec};
use randprune::engine::{self, init_params, train_epoch, Batch, ParamState, TrainConfig};
use randprune::eval::{self, auc_from_scores, ece_from_confidences, AttackConfig};
use randprune::mask::Mask;
use randprune::rng;

fn balanced(net: &NetworkSpec, per_class: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, 0);
    let len = net.input_len();
    let k = net.class_count();
    let inputs = (0..per_class * k * len).map(|_| r.random::<f64>()).collect();
    let labels = (0..per_class * k).map(|i| i % k).collect();
    Batch::new(inputs, labels, len).unwrap()
}

#[test]
fn zero_weight_network_baselines() {
    let net = parse_network("input 8\nclasses 10\nfc 8->16\nfc 16->10").unwrap();
    let params = ParamState::zeros(&net);
    let mask = Mask::all_ones(&net);
    let data = balanced(&net, 20, 1);
    assert!((eval::nll(&net, &params, &mask, &data).unwrap() - 10f64.ln()).abs() < 1e-12);
    let acc = eval::accuracy(&net, &params, &mask, &data).unwrap();
    assert!((acc - 0.1).abs() < 1e-12, "ties resolve to class 0, which is 10% of balanced data");
}

#[test]
fn empty_dataset_errors() {
    let net = parse_network("input 2\nclasses 2\nfc 2->2").unwrap();
    let params = init_params(&net, 0);
    let mask = Mask::all_ones(&net);
    let empty = Batch { inputs: vec![], labels: vec![], sample_len: 2 };
    assert!(eval::accuracy(&net, &params, &mask, &empty).is_err());
    assert!(eval::ece(&net, &params, &mask, &empty, 15).is_err());
    assert!(eval::nll(&net, &params, &mask, &empty).is_err());
    assert!(eval::ood_auc(&net, &params, &mask, &empty, &balanced(&net, 1, 0)).is_err());
}

#[test]
fn perfectly_calibrated_predictions() {
    // In bin b the confidence is c_b and exactly round(c_b · 100) of 100
    // predictions are correct.
    let mut conf = Vec::new();
    let mut ok = Vec::new();
    for b in 0..15 {
        let c = (b as f64 + 0.5) / 15.0;
        let hits = (c * 100.0).round() as usize;
        for i in 0..100 {
            conf.push(hits as f64 / 100.0);
            ok.push(i < hits);
        }
    }
    assert!(ece_from_confidences(&conf, &ok, 15).unwrap() <= 1e-12);
}

#[test]
fn nll_matches_stored_logits() {
    let net = parse_network("input 1x4x4\nclasses 4\nconv 1->2 k3\ngap\nfc 2->4").unwrap();
    let params = init_params(&net, 2);
    let mask = Mask::all_ones(&net);
    let data = balanced(&net, 5, 2);
    let logits = engine::logits(&net, &params, &mask, &data).unwrap();
    let direct: f64 = logits
        .iter()
        .zip(&data.labels)
        .map(|(z, &y)| {
            let s: f64 = z.iter().map(|v| v.exp()).sum();
            (s.ln() - z[y]).max(0.0)
        })
        .sum::<f64>()
        / data.len() as f64;
    assert!((eval::nll(&net, &params, &mask, &data).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn grad_flow_oracles() {
    let net = parse_network("input 6\nclasses 3\nfc 6->5\nfc 5->3").unwrap();
    let params = init_params(&net, 7);
    let data = balanced(&net, 4, 3);
    let ones = Mask::all_ones(&net);
    let full = engine::backward(&net, &params, &ones, &data).unwrap();
    let full_norm = full.weights.norm();
    assert!((eval::grad_flow_norm(&net, &params, &ones, &data).unwrap() - full_norm).abs() < 1e-12);

    let zeros: Vec<Vec<usize>> = full.weights.0.iter().map(|g| (0..g.len()).filter(|&i| g[i] != 0.0).collect()).collect();
    let complement = Mask::with_zeros(&net, &zeros);
    assert_eq!(eval::grad_flow_from_gradients(&full.weights, &complement), 0.0);

    let mask = Mask::with_zeros(&net, &[vec![0, 3, 7], vec![2, 9]]);
    let g = engine::backward(&net, &params, &mask, &data).unwrap();
    let mut acc = 0.0;
    for (l, layer) in g.weights.0.iter().enumerate() {
        for (i, v) in layer.iter().enumerate() {
            if mask.layers[l].bits[i] {
                acc += v * v;
            }
        }
    }
    assert!((eval::grad_flow_norm(&net, &params, &mask, &data).unwrap() - acc.sqrt()).abs() < 1e-12);
}

#[test]
fn fgsm_zero_epsilon_is_clean() {
    let net = parse_network("input 1x4x4\nclasses 4\nconv 1->2 k3\ngap\nfc 2->4").unwrap();
    let params = init_params(&net, 3);
    let mask = Mask::all_ones(&net);
    let data = balanced(&net, 10, 4);
    let attack = AttackConfig { epsilon: 0.0, ..Default::default() };
    let clean = eval::accuracy(&net, &params, &mask, &data).unwrap();
    assert_eq!(eval::fgsm_accuracy(&net, &params, &mask, &data, &attack).unwrap(), clean);
}

#[test]
fn fgsm_clamps_at_range_boundary() {
    // With a single positive weight the loss gradient on x has a fixed sign.
    let net = parse_network("input 1\nclasses 2\nfc 1->2").unwrap();
    let mut params = ParamState::zeros(&net);
    params.weights.0[0] = vec![1.0, -1.0];
    let mask = Mask::all_ones(&net);
    // label 1 prefers small x: gradient pushes x upward, already at 1.
    let data = Batch::new(vec![1.0, 0.0], vec![1, 0], 1).unwrap();
    let adv = eval::fgsm_perturb(&net, &params, &mask, &data, &AttackConfig::default()).unwrap();
    assert_eq!(adv.inputs, vec![1.0, 0.0]);
}

fn trained_model(seed: u64) -> (NetworkSpec, ParamState, Mask, Batch) {
    let net = parse_network("input 8\nclasses 4\nfc 8->16\nfc 16->4").unwrap();
    let mut r = rng::stream(seed, 5);
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..400 {
        let x: Vec<f64> = (0..8).map(|_| r.random::<f64>()).collect();
        labels.push(eval::argmax(&x[..4]));
        inputs.extend(x);
    }
    let data = Batch::new(inputs, labels, 8).unwrap();
    let mask = Mask::all_ones(&net);
    let mut params = init_params(&net, seed);
    let cfg = TrainConfig { epochs: 15, batch_size: 16, learning_rate: 0.05, decay_milestones: vec![10], ..TrainConfig::desk() };
    for e in 0..cfg.epochs {
        train_epoch(&net, &mut params, &mask, &data, &cfg, e, seed).unwrap();
    }
    (net, params, mask, data)
}

#[test]
fn fgsm_never_helps_trained_models() {
    let mut drops = Vec::new();
    for seed in 0..10 {
        let (net, params, mask, data) = trained_model(seed);
        let clean = eval::accuracy(&net, &params, &mask, &data).unwrap();
        let small = eval::fgsm_accuracy(&net, &params, &mask, &data, &AttackConfig::default()).unwrap();
        let big = eval::fgsm_accuracy(&net, &params, &mask, &data, &AttackConfig { epsilon: 0.1, ..Default::default() }).unwrap();
        assert!(small <= clean, "seed {seed}: {small} > {clean}");
        drops.push((small - big, clean - small));
    }
    // Monotone in ε on average over seeds.
    let mean_extra_drop = drops.iter().map(|d| d.0).sum::<f64>() / drops.len() as f64;
    assert!(mean_extra_drop >= 0.0);
}

#[test]
fn ood_auc_of_identical_sets_is_half() {
    let net = parse_network("input 4\nclasses 3\nfc 4->3").unwrap();
    let params = init_params(&net, 1);
    let mask = Mask::all_ones(&net);
    let data = balanced(&net, 5, 1);
    assert_eq!(eval::ood_auc(&net, &params, &mask, &data, &data).unwrap(), 0.5);
}

proptest! {
    #[test]
    fn auc_rank_symmetry(a in prop::collection::vec(0.0f64..1.0, 1..40), b in prop::collection::vec(0.0f64..1.0, 1..40)) {
        let ab = auc_from_scores(&a, &b).unwrap();
        let ba = auc_from_scores(&b, &a).unwrap();
        prop_assert_eq!(ab + ba, 1.0);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn auc_with_ties(a in prop::collection::vec(0u8..4, 1..30), b in prop::collection::vec(0u8..4, 1..30)) {
        let fa: Vec<f64> = a.iter().map(|&x| x as f64).collect();
        let fb: Vec<f64> = b.iter().map(|&x| x as f64).collect();
        let mut twice = 0u64;
        for x in &fa { for y in &fb { twice += if x > y { 2 } else if x == y { 1 } else { 0 }; } }
        let brute = twice as f64 / (2 * fa.len() * fb.len()) as f64;
        prop_assert!((auc_from_scores(&fa, &fb).unwrap() - brute).abs() < 1e-15);
        prop_assert_eq!(auc_from_scores(&fa, &fb).unwrap() + auc_from_scores(&fb, &fa).unwrap(), 1.0);
    }

    #[test]
    fn ece_in_unit_interval(conf in prop::collection::vec(0.0f64..=1.0, 1..50), bins in 1usize..20, seed in 0u64..100) {
        let mut r = rng::stream(seed, 0);
        let ok: Vec<bool> = conf.iter().map(|_| r.random::<bool>()).collect();
        let e = ece_from_confidences(&conf, &ok, bins).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
    }
}
