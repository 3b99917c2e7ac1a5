use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::actnet::{init_network, ActivationSchedule, Dense, InputNormalization, ValueNet};
use crate::dynamics::{Costate, SystemKind, SystemSpec};
use crate::error::Error;

fn small_net(spec: &SystemSpec, schedule: &str, width: usize, seed: u64) -> ValueNet {
    let s = ActivationSchedule::parse(schedule).unwrap();
    init_network(s, spec.dim() + 1, width, 30.0, seed)
        .unwrap()
        .with_normalization(InputNormalization::from_bounds(&spec.input_bounds()).unwrap())
        .unwrap()
}

fn constant_net(spec: &SystemSpec, c: f64) -> ValueNet {
    let mut net = small_net(spec, "ssl", 4, 0);
    for layer in net.layers_mut() {
        layer.weight.iter_mut().for_each(|w| *w = 0.0);
        layer.bias.iter_mut().for_each(|b| *b = 0.0);
    }
    let last: &mut Dense = net.layers_mut().last_mut().unwrap();
    last.bias[0] = c;
    net
}

fn tiny_config(schedule: &str, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk(SystemKind::Air3d);
    for (k, v) in [
        ("schedule", schedule),
        ("hidden_width", "8"),
        ("batch_size", "64"),
        ("pretrain_iters", "5"),
        ("curriculum_iters", "7"),
        ("log_interval", "2"),
        ("checkpoint_interval", "4"),
        ("learning_rate", "1e-3"),
    ] {
        c.set(k, v).unwrap();
    }
    c.seed = seed;
    c
}

#[test]
fn curriculum_window() {
    let at = |k| CurriculumState::at(k, 3, 5);
    assert!(at(0).pretraining && at(2).pretraining);
    assert_eq!(at(3).gamma, 0.0);
    assert!(!at(3).pretraining);
    assert_eq!(at(7).gamma, 1.0);
    assert_eq!(CurriculumState::at(4, 4, 1).gamma, 1.0);
}

proptest! {
    #[test]
    fn curriculum_is_monotone(pre in 1usize..50, cur in 1usize..500) {
        let mut last = 0.0;
        for k in 0..pre + cur {
            let g = CurriculumState::at(k, pre, cur).gamma;
            prop_assert!(g >= last && (0.0..=1.0).contains(&g));
            last = g;
        }
        prop_assert_eq!(last, 1.0);
    }
}

#[test]
fn pretraining_and_closed_window_pin_every_sample() {
    let spec = SystemSpec::air3d();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = sample_batch(&spec, &CurriculumState::at(0, 2, 2), 100, 0.1, &mut rng);
    assert_eq!(b.terminal_count(), 100);
    let b = sample_batch(&spec, &CurriculumState::with_gamma(0.0), 100, 0.1, &mut rng);
    assert_eq!(b.terminal_count(), 10);
    assert!((0..100).all(|i| b.sample(i)[0] == 0.0));
}

#[test]
fn samples_are_in_box_and_reproducible() {
    let spec = SystemSpec::vehicles9d();
    let state = CurriculumState::with_gamma(0.5);
    let draw = || sample_batch(&spec, &state, 500, 0.1, &mut ChaCha8Rng::seed_from_u64(3));
    let a = draw();
    assert_eq!(a, draw());
    for i in 0..a.len() {
        let s = a.sample(i);
        assert!(s[0] >= 0.0 && s[0] <= 0.5);
        for (v, (lo, hi)) in s[1..].iter().zip(&spec.state_box) {
            assert!(v >= lo && v <= hi);
        }
    }
}

fn ks_uniform(mut v: Vec<f64>, lo: f64, hi: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, x)| {
            let f = (x - lo) / (hi - lo);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn full_window_is_uniform_in_time() {
    let spec = SystemSpec::air3d();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = sample_batch(&spec, &CurriculumState::with_gamma(1.0), 100_000, 0.1, &mut rng);
    let taus: Vec<f64> = (0..b.len()).filter(|&i| !b.terminal[i]).map(|i| b.sample(i)[0]).collect();
    let d = ks_uniform(taus, 0.0, spec.horizon);
    assert!(d < 0.02, "KS {d}");
    let x1: Vec<f64> = (0..b.len()).map(|i| b.sample(i)[1]).collect();
    assert!(ks_uniform(x1, -1.0, 1.0) < 0.02);
}

#[test]
fn constant_net_residual() {
    let spec = SystemSpec::air3d();
    let net = constant_net(&spec, -0.5);
    // zero costate, dV/dtau = 0: r = min(0, l - c) = 0 since l > c everywhere
    for x in [[0.3, -0.2, 1.0], [0.9, 0.9, -3.0], [0.0, 0.0, 0.0]] {
        assert_eq!(vi_residual(&net, &spec, 0.4, &x).unwrap(), 0.0);
    }
    // c above l at the origin: r = l - c
    let net = constant_net(&spec, 0.5);
    let r = vi_residual(&net, &spec, 0.4, &[0.0, 0.0, 0.0]).unwrap();
    assert!((r + 0.75).abs() < 1e-15);
}

#[test]
fn batched_residuals_match_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for spec in [SystemSpec::air3d(), SystemSpec::vehicles6d(), SystemSpec::vehicles9d()] {
        let net = small_net(&spec, "srsrl", 16, 4);
        let batch = sample_batch(&spec, &CurriculumState::with_gamma(1.0), 50, 0.1, &mut rng);
        let rs = vi_residuals(&net, &spec, &batch.inputs).unwrap();
        for (i, r) in rs.iter().enumerate() {
            let s = batch.sample(i);
            let g = net.input_gradient(s).unwrap();
            let h = spec.hamiltonian(&s[1..], &Costate(g.d_state().to_vec())).unwrap();
            let l = spec.boundary_value(&s[1..]).unwrap();
            let want = (h - g.d_tau()).min(l - g.value);
            assert!((r - want).abs() < 1e-12);
            let single = vi_residual(&net, &spec, s[0], &s[1..]).unwrap();
            assert!((r - single).abs() < 1e-12);
            assert!(*r <= l - g.value);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn residual_never_exceeds_gap(seed in 0u64..1000, tau in 0.0f64..1.0, x1 in -1.0f64..1.0, x2 in -1.0f64..1.0, th in -3.0f64..3.0) {
        let spec = SystemSpec::air3d();
        let net = small_net(&spec, "ssrl", 8, seed);
        let x = [x1, x2, th];
        let r = vi_residual(&net, &spec, tau, &x).unwrap();
        let v = net.forward(&[tau, x1, x2, th]).unwrap();
        prop_assert!(r <= spec.boundary_value(&x).unwrap() - v);
    }
}

#[test]
fn loss_identities() {
    let spec = SystemSpec::air3d();
    let net = small_net(&spec, "ssssl", 16, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let state = CurriculumState::with_gamma(0.7);
    let batch = sample_batch(&spec, &state, 40, 0.1, &mut rng);
    let e = compute_loss(&net, &spec, &batch, 0.0, &state).unwrap().breakdown;
    assert_eq!(e.total, e.residual_term);
    let e = compute_loss(&net, &spec, &batch, 100.0, &state).unwrap().breakdown;
    assert_eq!(e.total, e.residual_term + 100.0 * e.terminal_term);
    let rs = vi_residuals(&net, &spec, &batch.inputs).unwrap();
    let mean = rs.iter().map(|r| r.abs()).sum::<f64>() / rs.len() as f64;
    assert!((mean - e.residual_term).abs() < 1e-14);
    let mut term = 0.0;
    for i in 0..batch.len() {
        if batch.terminal[i] {
            let s = batch.sample(i);
            term += (net.forward(s).unwrap() - spec.boundary_value(&s[1..]).unwrap()).abs();
        }
    }
    term /= batch.terminal_count() as f64;
    assert!((term - e.terminal_term).abs() < 1e-14);

    let pre = CurriculumState::at(0, 1, 1);
    let p = compute_loss(&net, &spec, &batch, 100.0, &pre).unwrap().breakdown;
    assert_eq!(p.residual_term, 0.0);
    assert_eq!(p.total, 100.0 * p.terminal_term);
}

#[test]
fn loss_requires_terminal_samples() {
    let spec = SystemSpec::air3d();
    let net = small_net(&spec, "ssl", 4, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batch = sample_batch(&spec, &CurriculumState::with_gamma(1.0), 10, 0.1, &mut rng);
    batch.terminal.iter_mut().for_each(|t| *t = false);
    let state = CurriculumState::with_gamma(1.0);
    assert!(matches!(
        compute_loss(&net, &spec, &batch, 1.0, &state),
        Err(Error::InvalidArgument(_))
    ));
}

/// Central differences of the total loss against every parameter.
fn check_loss_gradient(spec: &SystemSpec, schedule: &str, pretraining: bool, seed: u64) {
    let mut net = small_net(spec, schedule, 8, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let state = if pretraining {
        CurriculumState::at(0, 1, 1)
    } else {
        CurriculumState::with_gamma(1.0)
    };
    let batch = sample_batch(spec, &state, 10, 0.2, &mut rng);
    let lambda = 3.0;
    let eval = compute_loss(&net, spec, &batch, lambda, &state).unwrap();
    let analytic: Vec<f64> = eval.gradients.tensors.concat();
    let h = 1e-6;
    let mut fd = Vec::with_capacity(analytic.len());
    let n_tensors = net.parameters().len();
    for t in 0..n_tensors {
        let len = net.parameters()[t].len();
        for j in 0..len {
            let orig = net.parameters()[t][j];
            net.parameters_mut()[t][j] = orig + h;
            let up = compute_loss(&net, spec, &batch, lambda, &state).unwrap().breakdown.total;
            net.parameters_mut()[t][j] = orig - h;
            let dn = compute_loss(&net, spec, &batch, lambda, &state).unwrap().breakdown.total;
            net.parameters_mut()[t][j] = orig;
            fd.push((up - dn) / (2.0 * h));
        }
    }
    let diff: f64 = analytic.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(
        diff / norm < 1e-5,
        "{} {schedule} pretraining={pretraining}: rel err {}",
        spec.name(),
        diff / norm
    );
}

#[test]
fn loss_gradient_matches_finite_differences() {
    for (spec, schedule) in [
        (SystemSpec::air3d(), "ssssl"),
        (SystemSpec::air3d(), "srsrl"),
        (SystemSpec::air3d(), "rrrsl"),
        (SystemSpec::vehicles6d(), "ssrsl"),
        (SystemSpec::vehicles9d(), "sssl"),
    ] {
        check_loss_gradient(&spec, schedule, false, 7);
    }
    check_loss_gradient(&SystemSpec::air3d(), "ssssl", true, 8);
}

#[test]
fn training_is_deterministic_and_logs_identity() {
    let dir = tempfile::tempdir().unwrap();
    let c = tiny_config("srsrl", 3);
    let a = train(&c, Some(dir.path())).unwrap();
    let b = train(&c, None).unwrap();
    assert_eq!(a.net, b.net);
    assert_eq!(a.log, b.log);
    for r in &a.log {
        assert_eq!(r.total, r.residual_term + c.terminal_weight * r.terminal_term);
    }
    let iters: Vec<usize> = a.log.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![0, 2, 4, 6, 8, 10, 11]);
    let csv = std::fs::read_to_string(dir.path().join(files::LOSS)).unwrap();
    assert!(csv.starts_with("iter,gamma,total,residual,terminal\n"));
    assert_eq!(csv.lines().count(), 1 + a.log.len());
    let final_path = dir.path().join(files::final_checkpoint(&c.run_name()));
    assert!(dir.path().join(files::PRETRAIN).exists());
    assert!(dir.path().join("checkpoints/iter_4.ckpt").exists());
    assert!(dir.path().join("checkpoints/iter_8.ckpt").exists());

    let dir2 = tempfile::tempdir().unwrap();
    train(&c, Some(dir2.path())).unwrap();
    let b1 = std::fs::read(&final_path).unwrap();
    let b2 = std::fs::read(dir2.path().join(files::final_checkpoint(&c.run_name()))).unwrap();
    assert_eq!(b1, b2);
    let ck = crate::actnet::Checkpoint::from_bytes(&b1).unwrap();
    assert_eq!(ck.net, a.net);
    assert_eq!(TrainConfig::from_metadata(&ck.metadata).unwrap(), c);
}

#[test]
fn different_seeds_differ() {
    let a = train(&tiny_config("ssssl", 0), None).unwrap();
    let b = train(&tiny_config("ssssl", 1), None).unwrap();
    assert_ne!(a.net, b.net);
}

#[test]
fn divergence_aborts_with_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_config("rrrl", 0);
    c.learning_rate = 1e300;
    match train(&c, Some(dir.path())) {
        Err(Error::Diverged { iteration }) => assert!(iteration >= 1),
        other => panic!("expected divergence, got {other:?}"),
    }
    assert!(dir.path().join(files::DIVERGED).exists());
}

#[test]
fn pretraining_reduces_terminal_error() {
    let mut c = tiny_config("ssssl", 5);
    c.hidden_width = 32;
    c.batch_size = 256;
    c.pretrain_iters = 300;
    c.curriculum_iters = 1;
    let mut trainer = Trainer::new(c).unwrap();
    let first = trainer.step().unwrap().terminal_term;
    let mut last = first;
    while trainer.curriculum().pretraining {
        last = trainer.step().unwrap().terminal_term;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}
