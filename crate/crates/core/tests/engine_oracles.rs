use rand::Rng;
use randprune::arch::{parse_network, NetworkSpec};
use randprune::engine::{
    self, backward, forward_loss, grasp_scores, hvp, hvp_fd, init_params, input_gradient, snip_ratios, train_epoch, Batch, ParamState,
    Tensors, TrainConfig,
};
use randprune::mask::Mask;
use randprune::{alloc, rng};

fn conv_fc_net() -> NetworkSpec {
    parse_network("input 2x6x6\nclasses 3\nconv 2->3 k3\nmaxpool 2\nfc 27->5\nfc 5->3").unwrap()
}

fn random_batch(net: &NetworkSpec, n: usize, seed: u64) -> Batch {
    let mut r = rng::stream(seed, 7);
    let len = net.input_len();
    let inputs = (0..n * len).map(|_| r.random::<f64>()).collect();
    let labels = (0..n).map(|_| r.random_range(0..net.class_count())).collect();
    Batch::new(inputs, labels, len).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss(net: &NetworkSpec, p: &ParamState, m: &Mask, b: &Batch) -> f64 {
    forward_loss(net, p, m, b).unwrap().0
}

#[test]
fn full_finite_difference_gradient_check() {
    let net = conv_fc_net();
    let mask = Mask::all_ones(&net);
    let mut params = init_params(&net, 11);
    for b in params.biases.0.iter_mut().flatten() {
        *b = 0.05;
    }
    let batch = random_batch(&net, 4, 3);
    let grads = backward(&net, &params, &mask, &batch).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for l in 0..net.layers().len() {
        for i in 0..params.weights.0[l].len() {
            let mut p = params.clone();
            p.weights.0[l][i] += h;
            let up = loss(&net, &p, &mask, &batch);
            p.weights.0[l][i] -= 2.0 * h;
            let down = loss(&net, &p, &mask, &batch);
            worst = worst.max(rel_err((up - down) / (2.0 * h), grads.weights.0[l][i]));
        }
        for i in 0..params.biases.0[l].len() {
            let mut p = params.clone();
            p.biases.0[l][i] += h;
            let up = loss(&net, &p, &mask, &batch);
            p.biases.0[l][i] -= 2.0 * h;
            let down = loss(&net, &p, &mask, &batch);
            worst = worst.max(rel_err((up - down) / (2.0 * h), grads.biases.0[l][i]));
        }
    }
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn avgpool_and_gap_gradients() {
    let net = parse_network("input 1x4x4\nclasses 2\nconv 1->2 k3\navgpool 2\nconv 2->2 k1\ngap\nfc 2->2").unwrap();
    let params = init_params(&net, 2);
    let mask = Mask::all_ones(&net);
    let batch = random_batch(&net, 3, 5);
    let grads = backward(&net, &params, &mask, &batch).unwrap();
    let h = 1e-4;
    for l in 0..net.layers().len() {
        for i in 0..params.weights.0[l].len() {
            let mut p = params.clone();
            p.weights.0[l][i] += h;
            let up = loss(&net, &p, &mask, &batch);
            p.weights.0[l][i] -= 2.0 * h;
            let down = loss(&net, &p, &mask, &batch);
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(fd, grads.weights.0[l][i]) < 1e-4, "layer {l} idx {i}: {fd} vs {}", grads.weights.0[l][i]);
        }
    }
}

#[test]
fn input_gradient_matches_finite_differences() {
    let net = conv_fc_net();
    let mask = Mask::all_ones(&net);
    let params = init_params(&net, 21);
    let batch = random_batch(&net, 2, 8);
    let gx = input_gradient(&net, &params, &mask, &batch).unwrap();
    let h = 1e-4;
    for i in 0..batch.inputs.len() {
        let mut b = batch.clone();
        b.inputs[i] += h;
        let up = loss(&net, &params, &mask, &b);
        b.inputs[i] -= 2.0 * h;
        let down = loss(&net, &params, &mask, &b);
        let fd = (up - down) / (2.0 * h);
        assert!(rel_err(fd, gx[i]) < 1e-4, "pixel {i}: {fd} vs {}", gx[i]);
    }
}

#[test]
fn input_gradient_scales_with_loss() {
    // Duplicating a sample halves the weight of each copy in the mean loss.
    let net = conv_fc_net();
    let params = init_params(&net, 4);
    let mask = Mask::all_ones(&net);
    let one = random_batch(&net, 1, 1);
    let two = one.select(&[0, 0]);
    let g1 = input_gradient(&net, &params, &mask, &one).unwrap();
    let g2 = input_gradient(&net, &params, &mask, &two).unwrap();
    for (a, b) in g1.iter().zip(&g2[..g1.len()]) {
        assert!((a * 0.5 - b).abs() <= 1e-15 * a.abs().max(1.0));
    }
}

#[test]
fn masking_identity() {
    let net = conv_fc_net();
    let plan = alloc::plan_erk(&net, 0.6).unwrap();
    let mask = randprune::mask::sample_mask(&plan, &net, 3, randprune::MaskMode::Exact).unwrap();
    let params = init_params(&net, 5);
    let batch = random_batch(&net, 5, 2);
    let mut zeroed = params.clone();
    zeroed.apply_mask(&mask);
    let a = forward_loss(&net, &params, &mask, &batch).unwrap();
    let b = forward_loss(&net, &zeroed, &Mask::all_ones(&net), &batch).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert_eq!(a.1, b.1);
}

/// Symmetric positive-definite A and the quadratic L = ½ wᵀAw.
fn quadratic(n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng::stream(seed, 3);
    let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| r.random::<f64>() - 0.5).collect()).collect();
    (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }).collect()).collect()
}

fn matvec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

#[test]
fn hvp_matches_analytic_quadratic() {
    let a = quadratic(12, 1);
    let grad = |w: &Tensors| Tensors(vec![matvec(&a, &w.0[0])]);
    let mut r = rng::stream(2, 0);
    let w = Tensors(vec![(0..12).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()]);
    let v = Tensors(vec![(0..12).map(|_| r.random::<f64>() * 2.0 - 1.0).collect()]);
    let hv = hvp_fd(&grad, &w, &v);
    let exact = matvec(&a, &v.0[0]);
    for (x, y) in hv.0[0].iter().zip(&exact) {
        assert!(rel_err(*x, *y) < 1e-5, "{x} vs {y}");
    }
    assert!(hvp_fd(&grad, &w, &Tensors::zeros_like(&v)).0[0].iter().all(|&x| x == 0.0));
}

#[test]
fn grasp_scores_match_quadratic_oracle() {
    let a = quadratic(10, 4);
    let grad = |w: &Tensors| Tensors(vec![matvec(&a, &w.0[0])]);
    let mut r = rng::stream(5, 0);
    let w = Tensors(vec![(0..10).map(|_| r.random::<f64>() - 0.5).collect()]);
    let scores = grasp_scores(&grad, &w);
    let hg = matvec(&a, &matvec(&a, &w.0[0]));
    for ((s, wi), h) in scores.0[0].iter().zip(&w.0[0]).zip(&hg) {
        let exact = -wi * h;
        assert!((s - exact).abs() <= 1e-5 * exact.abs().max(1.0), "{s} vs {exact}");
    }
}

#[test]
fn hessian_symmetry_on_network() {
    let net = conv_fc_net();
    let params = init_params(&net, 8);
    let mask = Mask::all_ones(&net);
    let batch = random_batch(&net, 6, 9);
    let mut r = rng::stream(13, 0);
    let rand_like = |r: &mut rand_chacha::ChaCha8Rng| Tensors(params.weights.0.iter().map(|t| t.iter().map(|_| r.random::<f64>() - 0.5).collect()).collect());
    let u = rand_like(&mut r);
    let v = rand_like(&mut r);
    let hv = hvp(&net, &params, &mask, &batch, &v).unwrap();
    let hu = hvp(&net, &params, &mask, &batch, &u).unwrap();
    let (a, b) = (u.dot(&hv), v.dot(&hu));
    assert!(rel_err(a, b) < 1e-4, "{a} vs {b}");
}

#[test]
fn snip_ratios_partition_identity() {
    let net = conv_fc_net();
    let batch = random_batch(&net, 16, 1);
    let total = randprune::arch::param_count(&net) as f64;
    for s in [0.0, 0.3, 0.7, 0.9] {
        let d = snip_ratios(&net, 3, &batch, s).unwrap();
        if s == 0.0 {
            assert!(d.iter().all(|&x| x == 1.0));
        }
        let plan = alloc::plan_from_ratios(&net, &d).unwrap();
        assert!((plan.global_sparsity - s).abs() <= (net.layers().len() as f64 + 0.5) / total, "{s} vs {}", plan.global_sparsity);
    }
}

#[test]
fn grasp_ratios_partition_identity() {
    let net = conv_fc_net();
    let batch = random_batch(&net, 16, 1);
    let total = randprune::arch::param_count(&net) as f64;
    for s in [0.0, 0.5, 0.8] {
        let d = engine::grasp_ratios(&net, 3, &batch, s, engine::PruneTail::Highest).unwrap();
        let plan = alloc::plan_from_ratios(&net, &d).unwrap();
        assert!((plan.global_sparsity - s).abs() <= (net.layers().len() as f64 + 0.5) / total);
    }
}

#[test]
fn kaiming_variance() {
    let net = parse_network("input 4\nclasses 10\nfc 4->10").unwrap();
    let samples: Vec<f64> = (0..300u64).flat_map(|s| init_params(&net, s).weights.0[0].clone()).collect();
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    assert!((var - 0.5).abs() < 0.03, "variance {var}");
}

fn toy_data(net: &NetworkSpec, n: usize, seed: u64) -> Batch {
    // Label = index of the largest of the first `classes` features.
    let mut r = rng::stream(seed, 1);
    let len = net.input_len();
    let k = net.class_count();
    let mut inputs = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let x: Vec<f64> = (0..len).map(|_| r.random::<f64>()).collect();
        labels.push(randprune::eval::argmax(&x[..k]));
        inputs.extend(x);
    }
    Batch::new(inputs, labels, len).unwrap()
}

#[test]
fn masking_commutes_with_structural_removal() {
    // Hidden unit 2 of a 6→5→3 MLP is masked out completely; the 6→4→3 net
    // without it must follow the same loss trajectory.
    let big = parse_network("input 6\nclasses 3\nfc 6->5\nfc 5->3").unwrap();
    let small = parse_network("input 6\nclasses 3\nfc 6->4\nfc 4->3").unwrap();
    let dropped = 2;
    let zeros = vec![(0..6).map(|i| dropped * 6 + i).collect(), (0..3).map(|o| o * 5 + dropped).collect()];
    let mask = Mask::with_zeros(&big, &zeros);
    let mut pb = init_params(&big, 3);
    pb.apply_mask(&mask);
    let mut ps = ParamState::zeros(&small);
    let keep: Vec<usize> = (0..5).filter(|&j| j != dropped).collect();
    for (jn, &j) in keep.iter().enumerate() {
        ps.weights.0[0][jn * 6..(jn + 1) * 6].copy_from_slice(&pb.weights.0[0][j * 6..(j + 1) * 6]);
        for o in 0..3 {
            ps.weights.0[1][o * 4 + jn] = pb.weights.0[1][o * 5 + j];
        }
    }
    let data = toy_data(&big, 64, 2);
    let cfg = TrainConfig { epochs: 10, batch_size: 8, decay_milestones: vec![5], ..TrainConfig::desk() };
    let ones = Mask::all_ones(&small);
    for epoch in 0..cfg.epochs {
        let lb = train_epoch(&big, &mut pb, &mask, &data, &cfg, epoch, 5).unwrap();
        let ls = train_epoch(&small, &mut ps, &ones, &data, &cfg, epoch, 5).unwrap();
        assert!((lb - ls).abs() < 1e-10, "epoch {epoch}: {lb} vs {ls}");
    }
}

#[test]
fn training_is_bit_reproducible_and_static() {
    let net = conv_fc_net();
    let plan = alloc::plan_uniform(&net, 0.8).unwrap();
    let mask = randprune::mask::sample_mask(&plan, &net, 1, randprune::MaskMode::Exact).unwrap();
    let data = toy_data(&net, 48, 4);
    let cfg = TrainConfig { epochs: 4, batch_size: 8, decay_milestones: vec![2], ..TrainConfig::desk() };
    let run = || {
        let mut p = init_params(&net, 9);
        p.apply_mask(&mask);
        let losses: Vec<u64> = (0..cfg.epochs).map(|e| train_epoch(&net, &mut p, &mask, &data, &cfg, e, 2).unwrap().to_bits()).collect();
        (losses, p)
    };
    let (l1, p1) = run();
    let (l2, p2) = run();
    assert_eq!(l1, l2);
    assert_eq!(p1, p2);
    for ((w, m), lm) in p1.weights.0.iter().zip(&p1.momentum_w.0).zip(&mask.layers) {
        for ((wi, mi), &keep) in w.iter().zip(m).zip(&lm.bits) {
            if !keep {
                assert_eq!(wi.to_bits(), 0);
                assert_eq!(mi.to_bits(), 0);
            }
        }
    }
}
