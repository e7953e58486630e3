use depthflow_core::tensor::{
    dispersion_loss, gelu, AdamW, AdamWConfig, Attention, DispersionPairs, Mlp,
};
use depthflow_core::{Module, Parameter, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn erf_gelu(x: f64) -> f64 {
    // x Phi(x) with Phi by Simpson's rule.
    let n = 4000;
    let (lo, h) = (-10.0, (x + 10.0) / n as f64);
    let pdf = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(lo) + pdf(x);
    for i in 1..n {
        s += pdf(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    x * s * h / 3.0
}

#[test]
fn gelu_tracks_the_exact_form() {
    for i in -40..=40 {
        let x = i as f64 / 10.0;
        assert!((gelu(x) - erf_gelu(x)).abs() < 1e-3, "{x}");
    }
}

fn weights(l: &depthflow_core::tensor::Linear) -> (Vec<Vec<f64>>, Vec<f64>) {
    let w = &l.weight.value;
    let (i, o) = w.dims2().unwrap();
    let rows = (0..i)
        .map(|r| w.data()[r * o..(r + 1) * o].to_vec())
        .collect();
    let b = l
        .bias
        .as_ref()
        .map_or(vec![0.0; o], |b| b.value.data().to_vec());
    (rows, b)
}

#[test]
fn mlp_matches_straight_line_arithmetic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mlp = Mlp::new(&[3, 5, 2], &mut rng).unwrap();
    let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let got = mlp
        .forward(&tape, tape.constant(x.clone()))
        .unwrap()
        .output
        .to_tensor();

    let (w0, b0) = weights(&mlp.layers[0]);
    let (w1, b1) = weights(&mlp.layers[1]);
    for r in 0..4 {
        let xr = x.row(r);
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut acc = b0[j];
            for i in 0..3 {
                acc += xr[i] * w0[i][j];
            }
            h[j] = gelu(acc);
        }
        for k in 0..2 {
            let mut acc = b1[k];
            for j in 0..5 {
                acc += h[j] * w1[j][k];
            }
            assert!((got.at2(r, k) - acc).abs() < 1e-12);
        }
    }
}

fn project(x: &[f64], w: &[Vec<f64>]) -> Vec<f64> {
    (0..w[0].len())
        .map(|j| x.iter().zip(w).map(|(a, row)| a * row[j]).sum())
        .collect()
}

/// Single-batch attention written out with explicit loops.
fn brute_attention(a: &Attention, tokens: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (wq, _) = weights(&a.query);
    let (wk, _) = weights(&a.key);
    let (wv, _) = weights(&a.value);
    let (wo, _) = weights(&a.output);
    let q: Vec<_> = tokens.iter().map(|t| project(t, &wq)).collect();
    let k: Vec<_> = tokens.iter().map(|t| project(t, &wk)).collect();
    let v: Vec<_> = tokens.iter().map(|t| project(t, &wv)).collect();
    let scale = 1.0 / (tokens[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut mix = vec![0.0; v[0].len()];
            for (ej, vj) in e.iter().zip(&v) {
                for (o, x) in mix.iter_mut().zip(vj) {
                    *o += ej / z * x;
                }
            }
            project(&mix, &wo)
        })
        .collect()
}

#[test]
fn attention_matches_brute_force_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let a = Attention::new(3, &mut rng);
    let x = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
    let tape = Tape::new();
    let got = a
        .forward(&tape, tape.constant(x.clone()), None)
        .unwrap()
        .to_tensor();
    for b in 0..2 {
        let toks: Vec<Vec<f64>> = (0..2)
            .map(|s| x.data()[(b * 2 + s) * 3..(b * 2 + s + 1) * 3].to_vec())
            .collect();
        let want = brute_attention(&a, &toks);
        for s in 0..2 {
            for d in 0..3 {
                assert!((got.data()[(b * 2 + s) * 3 + d] - want[s][d]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn every_input_token_reaches_every_output_token() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (seq, dim) = (6, 4);
    let a = Attention::new(dim, &mut rng);
    let x = Tensor::randn(&[1, seq, dim], 1.0, &mut rng);
    let run = |x: &Tensor| {
        let tape = Tape::new();
        a.forward(&tape, tape.constant(x.clone()), None)
            .unwrap()
            .to_tensor()
    };
    let base = run(&x);
    for src in 0..seq {
        let mut y = x.clone();
        y.data_mut()[src * dim] += 1e-4;
        let moved = run(&y);
        for dst in 0..seq {
            let delta: f64 = (0..dim)
                .map(|d| (moved.data()[dst * dim + d] - base.data()[dst * dim + d]).abs())
                .sum();
            assert!(delta > 1e-12, "token {src} -> {dst}");
        }
    }
}

proptest! {
    #[test]
    fn dispersion_is_never_positive(seed in 0u64..500, b in 1usize..6, d in 1usize..4, spread in 0.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::randn(&[b, d], spread, &mut rng);
        let tape = Tape::new();
        let l = dispersion_loss(&tape, tape.constant(f), 1.0, DispersionPairs::Inclusive).unwrap().item().unwrap();
        prop_assert!(l <= 1e-15);
        if b > 1 && spread > 1e-3 {
            prop_assert!(l < 0.0);
        }
    }

    #[test]
    fn wider_separation_lowers_dispersion(seed in 0u64..500, factor in 1.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let tape = Tape::new();
        let at = |t: Tensor| dispersion_loss(&tape, tape.constant(t), 1.0, DispersionPairs::Inclusive).unwrap().item().unwrap();
        prop_assert!(at(f.map(|v| v * factor)) < at(f));
    }
}

#[test]
fn adamw_follows_the_update_rule_over_several_steps() {
    let cfg = AdamWConfig {
        lr: 0.05,
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let grads = [0.3, -1.2, 0.7, 0.0, 2.5];
    let mut p = Parameter::new(Tensor::scalar(0.8));
    let mut opt = AdamW::new(cfg);
    let (mut want, mut m, mut v) = (0.8f64, 0.0, 0.0);
    for (t, &g) in grads.iter().enumerate() {
        opt.step_with(&mut [&mut p], &[Some(Tensor::scalar(g))])
            .unwrap();
        let t = t as i32 + 1;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        let mh = m / (1.0 - cfg.beta1.powi(t));
        let vh = v / (1.0 - cfg.beta2.powi(t));
        want -= cfg.lr * cfg.weight_decay * want + cfg.lr * mh / (vh.sqrt() + cfg.eps);
        assert!((p.value.data()[0] - want).abs() < 1e-14, "step {t}");
    }
}

#[test]
fn parameter_names_cover_every_tensor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut a = Attention::new(4, &mut rng);
    let names: Vec<String> = a.named_params().into_iter().map(|(n, _)| n).collect();
    assert_eq!(names.len(), a.params_mut().len());
    assert!(names.iter().all(|n| n.contains("weight")));
}
