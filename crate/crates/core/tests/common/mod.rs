#![allow(dead_code)]

use rand::Rng;
use randprune::arch::{LayerSpec, NetworkSpec, Pool};
use randprune::rng;

/// Random sequential net: some 3x3/1x1/5x5 convs on an 8x8 input, then fc layers.
pub fn random_net(seed: u64, layers: usize) -> NetworkSpec {
    let mut r = rng::stream(seed, 0xabc);
    let convs = r.random_range(0..layers);
    let fcs = layers - convs;
    let mut specs = Vec::new();
    let mut channels = r.random_range(1..4usize);
    let input = (channels, 8, 8);
    for i in 0..convs {
        let out = r.random_range(2..24usize);
        let k = [1, 3, 5][r.random_range(0..3)];
        let mut l = LayerSpec::conv(format!("conv{i}"), channels, out, k, k);
        if i + 1 == convs {
            l.pool = Pool::Global;
        }
        specs.push(l);
        channels = out;
    }
    let mut fan_in = if convs == 0 { channels * 64 } else { channels };
    let classes = r.random_range(2..40usize);
    for j in 0..fcs {
        let out = if j + 1 == fcs { classes } else { r.random_range(4..64usize) };
        specs.push(LayerSpec::fc(format!("fc{j}"), fan_in, out));
        fan_in = out;
    }
    NetworkSpec::new(input, classes, specs).unwrap()
}

/// Random pure-fc net.
pub fn random_mlp(seed: u64, layers: usize) -> NetworkSpec {
    let mut r = rng::stream(seed, 0xdef);
    let input = r.random_range(2..100usize);
    let classes = r.random_range(2..20usize);
    let mut specs = Vec::new();
    let mut fan_in = input;
    for j in 0..layers {
        let out = if j + 1 == layers { classes } else { r.random_range(2..200usize) };
        specs.push(LayerSpec::fc(format!("fc{j}"), fan_in, out));
        fan_in = out;
    }
    NetworkSpec::new((input, 1, 1), classes, specs).unwrap()
}

/// Independent root of f(ε) = Σ min(1, ε r) p − budget by bisection.
pub fn bisect_scale(raw: &[f64], params: &[usize], forced: &[bool], budget: f64) -> f64 {
    let f = |eps: f64| -> f64 {
        raw.iter()
            .zip(params)
            .zip(forced)
            .map(|((&r, &p), &dense)| if dense { p as f64 } else { (eps * r).min(1.0) * p as f64 })
            .sum::<f64>()
            - budget
    };
    let mut lo = 0.0;
    let mut hi = 1.0;
    while f(hi) < 0.0 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}
