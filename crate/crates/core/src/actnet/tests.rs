use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn air3d_norm() -> InputNormalization {
    InputNormalization::from_bounds(&[
        (0.0, 1.0),
        (-1.0, 1.0),
        (-1.0, 1.0),
        (-std::f64::consts::PI, std::f64::consts::PI),
    ])
    .unwrap()
}

fn net(structure: &str, width: usize, seed: u64) -> ValueNet {
    init_network(parse_structure(structure).unwrap(), 4, width, DEFAULT_OMEGA0, seed)
        .unwrap()
        .with_normalization(air3d_norm())
        .unwrap()
}

fn random_input(rng: &mut ChaCha8Rng) -> Vec<f64> {
    vec![
        rng.gen_range(0.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-1.0..1.0),
        rng.gen_range(-3.1..3.1),
    ]
}

/// Straight-line evaluation written independently of the batch tape.
fn reference_forward(net: &ValueNet, raw: &[f64]) -> f64 {
    let norm = net.normalization();
    let mut h: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, r)| (r - norm.offset()[i]) / norm.scale()[i])
        .collect();
    for layer in net.layers() {
        let mut z = vec![0.0; layer.fan_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut acc = layer.bias[o];
            for (i, hi) in h.iter().enumerate() {
                acc += layer.weight[o * layer.fan_in + i] * hi;
            }
            *zo = acc;
        }
        h = match layer.activation {
            Activation::Sine => z.iter().map(|v| (layer.freq * v).sin()).collect(),
            Activation::Rectifier => z.iter().map(|v| v.max(0.0)).collect(),
            Activation::Affine => z,
        };
    }
    h[0]
}

fn rectifier_preacts(net: &ValueNet, raw: &[f64]) -> Vec<f64> {
    let (_, trace) = net.forward_trace(raw).unwrap();
    trace
        .pre_activations
        .iter()
        .zip(net.layers())
        .filter(|(_, l)| l.activation == Activation::Rectifier)
        .flat_map(|(z, _)| z.clone())
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-300)
}

#[test]
fn init_shapes_follow_schedule() {
    let n = init_network(parse_structure("ssssl").unwrap(), 4, 512, 30.0, 0).unwrap();
    let shapes: Vec<(usize, usize)> = n.layers().iter().map(|l| (l.fan_in, l.fan_out)).collect();
    assert_eq!(shapes, vec![(4, 512), (512, 512), (512, 512), (512, 512), (512, 1)]);
    let again = init_network(parse_structure("ssssl").unwrap(), 4, 512, 30.0, 0).unwrap();
    assert_eq!(n, again);
    assert!(matches!(
        init_network(parse_structure("ssssl").unwrap(), 4, 0, 30.0, 0),
        Err(Error::InvalidArgument(_))
    ));
    assert!(init_network(parse_structure("ssssl").unwrap(), 1, 8, 30.0, 0).is_err());
}

#[test]
fn sine_initialization_ranges() {
    let n = init_network(parse_structure("srsl").unwrap(), 4, 64, 30.0, 5).unwrap();
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let l = n.layers();
    assert_eq!(l[0].freq, 30.0);
    assert!(max_abs(&l[0].weight) <= 0.25);
    assert!(max_abs(&l[1].weight) <= (6.0f64 / 64.0).sqrt());
    assert_eq!(l[2].freq, 1.0);
    assert!(max_abs(&l[2].weight) <= (6.0f64 / 64.0).sqrt());
    assert!(max_abs(&l[3].weight) <= (6.0f64 / 64.0).sqrt() / 30.0);
}

#[test]
fn zero_network_outputs_zero() {
    let mut n = net("ssrsl", 8, 1);
    for p in n.parameters_mut() {
        p.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert_eq!(n.forward(&random_input(&mut rng)).unwrap(), 0.0);
    }
}

#[test]
fn zero_input_single_sine_layer_returns_output_bias() {
    let mut n = init_network(parse_structure("sl").unwrap(), 3, 6, 30.0, 2).unwrap();
    n.layers_mut()[0].bias.iter_mut().for_each(|b| *b = 0.0);
    let out_bias = n.layers()[1].bias[0];
    assert_eq!(n.forward(&[0.0, 0.0, 0.0]).unwrap(), out_bias);
}

#[test]
fn forward_matches_independent_reimplementation() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for (k, s) in STUDIED_SCHEDULES.iter().enumerate() {
        let n = net(s, 32, k as u64);
        for _ in 0..50 {
            let x = random_input(&mut rng);
            let got = n.forward(&x).unwrap();
            let want = reference_forward(&n, &x);
            assert!((got - want).abs() < 1e-12, "{s}: {got} vs {want}");
        }
    }
}

#[test]
fn forward_is_bit_identical_alone_and_in_batch() {
    let n = net("srsrl", 24, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xs: Vec<Vec<f64>> = (0..37).map(|_| random_input(&mut rng)).collect();
    let flat: Vec<f64> = xs.iter().flatten().copied().collect();
    let batch = n.forward_batch(&flat).unwrap();
    let (bv, bg) = n.input_gradient_batch(&flat).unwrap();
    for (i, x) in xs.iter().enumerate() {
        assert_eq!(n.forward(x).unwrap().to_bits(), batch[i].to_bits());
        let g = n.input_gradient(x).unwrap();
        assert_eq!(g.value.to_bits(), bv[i].to_bits());
        assert_eq!(g.gradient, bg[i * 4..(i + 1) * 4]);
    }
}

#[test]
fn trace_replay_reproduces_output() {
    let n = net("ssrsl", 16, 4);
    let x = [0.3, 0.1, -0.2, 1.0];
    let (v, trace) = n.forward_trace(&x).unwrap();
    assert_eq!(trace.output().to_bits(), v.to_bits());
    assert_eq!(trace.replay(&n).to_bits(), v.to_bits());
    assert_eq!(trace.pre_activations.len(), 5);
    assert_eq!(trace.activations.len(), 4);
}

#[test]
fn forward_rejects_bad_input() {
    let n = net("ssl", 4, 0);
    assert!(matches!(n.forward(&[0.0; 3]), Err(Error::Dimension { .. })));
    assert!(matches!(
        n.forward(&[0.0, f64::NAN, 0.0, 0.0]),
        Err(Error::NonFinite(_))
    ));
}

/// Central differences in normalized coordinates, converted to raw ones.
fn fd_input_gradient(n: &ValueNet, x: &[f64], h: f64) -> Vec<f64> {
    let scale = n.normalization().scale().to_vec();
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h * scale[i];
            m[i] -= h * scale[i];
            (n.forward(&p).unwrap() - n.forward(&m).unwrap()) / (2.0 * h * scale[i])
        })
        .collect()
}

fn same_rectifier_pattern(n: &ValueNet, x: &[f64], h: f64) -> bool {
    let base: Vec<bool> = rectifier_preacts(n, x).iter().map(|z| *z > 0.0).collect();
    let scale = n.normalization().scale().to_vec();
    for i in 0..x.len() {
        for sgn in [-1.0, 1.0] {
            let mut p = x.to_vec();
            p[i] += sgn * h * scale[i];
            let pat: Vec<bool> = rectifier_preacts(n, &p).iter().map(|z| *z > 0.0).collect();
            if pat != base {
                return false;
            }
        }
    }
    true
}

#[test]
fn input_gradient_matches_finite_differences_for_studied_schedules() {
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for (k, s) in STUDIED_SCHEDULES.iter().enumerate() {
        let mut checked = 0;
        for probe in 0..100u64 {
            let n = net(s, 16, 1000 * k as u64 + probe);
            let x = random_input(&mut rng);
            let near_kink = rectifier_preacts(&n, &x).iter().any(|z| z.abs() < 1e-6);
            if near_kink || !same_rectifier_pattern(&n, &x, h) {
                continue;
            }
            let g = n.input_gradient(&x).unwrap();
            let fd = fd_input_gradient(&n, &x, h);
            let err = rel_err(&g.gradient, &fd);
            assert!(err < 1e-6, "{s} probe {probe}: rel err {err:e}");
            checked += 1;
        }
        assert!(checked >= 90, "{s}: only {checked} probes away from kinks");
    }
}

#[test]
fn dead_rectifier_layer_blocks_the_gradient() {
    let mut n = net("srl", 8, 9);
    n.layers_mut()[1].bias.iter_mut().for_each(|b| *b = -100.0);
    let g = n.input_gradient(&[0.5, 0.2, -0.3, 1.0]).unwrap();
    assert!(g.gradient.iter().all(|v| *v == 0.0));
    assert_eq!(g.value, n.layers()[2].bias[0]);
}

#[test]
fn all_active_rectifiers_give_the_linear_gradient() {
    let mut n = net("rrl", 5, 10);
    for layer in n.layers_mut() {
        layer.weight.iter_mut().for_each(|w| *w = w.abs());
        layer.bias.iter_mut().for_each(|b| *b = 10.0);
    }
    // product W_2 W_1 W_0 divided by the normalization scales
    let l = n.layers();
    let mut row = l[2].weight.clone();
    for layer in l[..2].iter().rev() {
        let mut next = vec![0.0; layer.fan_in];
        for (o, r) in row.iter().enumerate() {
            for (i, nx) in next.iter_mut().enumerate() {
                *nx += r * layer.weight[o * layer.fan_in + i];
            }
        }
        row = next;
    }
    let scale = n.normalization().scale().to_vec();
    let want: Vec<f64> = row.iter().zip(&scale).map(|(r, s)| r / s).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let g = n.input_gradient(&random_input(&mut rng)).unwrap();
        assert!(rel_err(&g.gradient, &want) < 1e-13);
    }
}

/// Scalar objective whose parameter gradient `parameter_gradients` returns.
fn objective(n: &ValueNet, xs: &[f64], ybar: &[f64], qbar: &[f64]) -> f64 {
    let (v, g) = n.input_gradient_batch(xs).unwrap();
    v.iter().zip(ybar).map(|(a, b)| a * b).sum::<f64>()
        + g.iter().zip(qbar).map(|(a, b)| a * b).sum::<f64>()
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for s in ["ssssl", "srsrl", "rrrsl", "ssrrsl"] {
        let n = net(s, 8, 17);
        let xs: Vec<f64> = (0..10).flat_map(|_| random_input(&mut rng)).collect();
        let ybar: Vec<f64> = (0..10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let qbar: Vec<f64> = (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let analytic = n.parameter_gradients(&xs, &ybar, &qbar).unwrap();
        let h = 1e-5;
        let mut fd = Vec::new();
        let mut an = Vec::new();
        let n_tensors = n.parameters().len();
        for t in 0..n_tensors {
            for j in 0..n.parameters()[t].len() {
                let mut p = n.clone();
                p.parameters_mut()[t][j] += h;
                let mut m = n.clone();
                m.parameters_mut()[t][j] -= h;
                fd.push(
                    (objective(&p, &xs, &ybar, &qbar) - objective(&m, &xs, &ybar, &qbar))
                        / (2.0 * h),
                );
                an.push(analytic.tensors[t][j]);
            }
        }
        let err = rel_err(&an, &fd);
        assert!(err < 1e-5, "{s}: rel err {err:e}");
    }
}

#[test]
fn zero_adjoints_give_zero_gradient() {
    let n = net("ssrsl", 8, 2);
    let xs = [0.1, 0.2, 0.3, 0.4, 0.5, -0.6, 0.7, -0.8];
    let g = n.parameter_gradients(&xs, &[0.0; 2], &[0.0; 8]).unwrap();
    assert_eq!(g.max_abs(), 0.0);
}

#[test]
fn duplicated_samples_with_scaled_adjoints_match_single_sample() {
    let n = net("srsrl", 8, 21);
    let x = [0.4, -0.3, 0.6, 2.0];
    let ybar = 0.7;
    let qbar = [0.1, -0.5, 0.25, 0.9];
    let single = n.parameter_gradients(&x, &[ybar], &qbar).unwrap();
    let k = 6;
    let xs: Vec<f64> = (0..k).flat_map(|_| x).collect();
    let ys = vec![ybar / k as f64; k];
    let qs: Vec<f64> = (0..k).flat_map(|_| qbar.map(|q| q / k as f64)).collect();
    let dup = n.parameter_gradients(&xs, &ys, &qs).unwrap();
    for (a, b) in single.tensors.iter().flatten().zip(dup.tensors.iter().flatten()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()), "{a} vs {b}");
    }
}

#[test]
fn parameter_gradients_reject_bad_shapes() {
    let n = net("ssl", 4, 0);
    let xs = [0.0; 8];
    assert!(n.parameter_gradients(&xs, &[0.0; 2], &[0.0; 7]).is_err());
    assert!(n.parameter_gradients(&[], &[], &[]).is_err());
}
