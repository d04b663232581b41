use ndarray::{Array1, Array2};
use rand::Rng;

use super::*;
use crate::features::{to_planes, scm, Dataset, Planes, ScmExample};
use crate::rng::{complex_normal, substream, SimRng};

fn random_planes(m: usize, seed: u64) -> Planes {
    let mut rng = substream(seed, &[]);
    let x = Array2::from_shape_fn((m, 2 * m), |_| complex_normal(&mut rng, 1.0));
    to_planes(&scm(&x).unwrap(), true).unwrap()
}

fn small_arch(m: usize) -> CmnetArch {
    CmnetArch {
        conv1_filters: 4,
        conv2_filters: 5,
        fc1_units: 7,
        ..CmnetArch::new(m, Padding::Valid)
    }
}

fn randomized(arch: &CmnetArch, seed: u64) -> CmnetParams {
    let mut rng = substream(seed, &[]);
    let mut p = init_params(arch, &mut rng).unwrap();
    // nonzero biases so their gradients are exercised
    for t in [&mut p.conv1_b, &mut p.conv2_b, &mut p.fc1_b, &mut p.fc2_b] {
        t.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    p
}

type Volume = Vec<Vec<Vec<f64>>>;

/// Direct quadruple-loop evaluation of the network, used as an oracle.
fn naive_logits(p: &CmnetParams, planes: &Planes) -> (f64, f64) {
    let a = &p.arch;
    let (m, k, pad) = (a.input_dim, a.kernel, a.pad() as isize);
    let x: Volume = (0..2)
        .map(|c| (0..m).map(|i| (0..m).map(|j| planes.get(c, i, j)).collect()).collect())
        .collect();
    let conv = |x: &Volume, w: &Array2<f64>, b: &Array1<f64>, out: usize| -> Volume {
        let n = x[0].len() as isize;
        (0..w.nrows())
            .map(|o| {
                (0..out)
                    .map(|i| {
                        (0..out)
                            .map(|j| {
                                let mut s = b[o];
                                for (c, plane) in x.iter().enumerate() {
                                    for ki in 0..k {
                                        for kj in 0..k {
                                            let ii = i as isize + ki as isize - pad;
                                            let jj = j as isize + kj as isize - pad;
                                            if ii >= 0 && jj >= 0 && ii < n && jj < n {
                                                s += w[[o, c * k * k + ki * k + kj]]
                                                    * plane[ii as usize][jj as usize];
                                            }
                                        }
                                    }
                                }
                                s.max(0.0)
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect()
    };
    let a1 = conv(&x, &p.conv1_w, &p.conv1_b, a.conv1_out());
    let a2 = conv(&a1, &p.conv2_w, &p.conv2_b, a.conv2_out());
    let ph = a.pooled();
    let mut feat = Vec::new();
    for plane in &a2 {
        for pi in 0..ph {
            for pj in 0..ph {
                let mut best = f64::NEG_INFINITY;
                for di in 0..a.pool {
                    for dj in 0..a.pool {
                        best = best.max(plane[pi * a.pool + di][pj * a.pool + dj]);
                    }
                }
                feat.push(best);
            }
        }
    }
    let hidden: Vec<f64> = (0..a.fc1_units)
        .map(|u| {
            let z: f64 = p.fc1_b[u] + feat.iter().enumerate().map(|(f, v)| p.fc1_w[[u, f]] * v).sum::<f64>();
            z.max(0.0)
        })
        .collect();
    let logit = |cls: usize| {
        p.fc2_b[cls] + hidden.iter().enumerate().map(|(u, v)| p.fc2_w[[cls, u]] * v).sum::<f64>()
    };
    (logit(0), logit(1))
}

#[test]
fn forward_matches_naive_oracle() {
    for (arch, seed) in [
        (CmnetArch::new(16, Padding::Valid), 1),
        (CmnetArch::new(5, Padding::Same), 2),
        (small_arch(7), 3),
    ] {
        let p = randomized(&arch, seed);
        let inputs: Vec<Planes> = (0..3).map(|i| random_planes(arch.input_dim, seed * 10 + i)).collect();
        let refs: Vec<&Planes> = inputs.iter().collect();
        let scores = forward_eval_batch(&p, &refs).unwrap();
        for (s, planes) in scores.iter().zip(&inputs) {
            let (l0, l1) = naive_logits(&p, planes);
            for (got, want) in [(s.logit0, l0), (s.logit1, l1)] {
                assert!((got - want).abs() <= 1e-10 * want.abs().max(1.0), "{got} vs {want}");
            }
        }
    }
}

#[test]
fn zero_output_layer_gives_uniform_scores() {
    let arch = CmnetArch::new(8, Padding::Valid);
    let mut p = randomized(&arch, 4);
    p.fc2_w.fill(0.0);
    p.fc2_b.fill(0.0);
    let s = forward_eval(&p, &random_planes(8, 1)).unwrap();
    assert_eq!((s.p1, s.p0), (0.5, 0.5));
}

#[test]
fn scores_are_normalized_in_both_modes() {
    let arch = CmnetArch::new(8, Padding::Valid);
    let p = randomized(&arch, 5);
    let mut rng = substream(6, &[]);
    for i in 0..20 {
        let planes = random_planes(8, 100 + i);
        for mode in [Mode::Train, Mode::Eval] {
            let s = forward(&p, &planes, mode, &mut rng).unwrap();
            assert!(s.p1 > 0.0 && s.p0 > 0.0);
            assert!((s.p1 + s.p0 - 1.0).abs() <= 1e-12);
        }
    }
}

#[test]
fn eval_is_deterministic_and_rejects_bad_dims() {
    let arch = CmnetArch::new(8, Padding::Valid);
    let p = randomized(&arch, 7);
    let planes = random_planes(8, 3);
    assert_eq!(forward_eval(&p, &planes).unwrap(), forward_eval(&p, &planes).unwrap());
    assert!(matches!(
        forward_eval(&p, &random_planes(6, 3)),
        Err(crate::Error::Dimension { .. })
    ));
}

/// With nonnegative inputs, weights and biases every ReLU is the identity and
/// the dense stage is linear in the dropout masks, so the mean train-mode
/// logit equals the eval logit.
#[test]
fn inverted_dropout_is_unbiased_for_linear_head() {
    let arch = small_arch(8);
    let mut p = randomized(&arch, 8);
    let mut rng = substream(9, &[]);
    for w in [&mut p.conv1_w, &mut p.conv2_w, &mut p.fc1_w, &mut p.fc2_w] {
        w.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.2));
    }
    for b in [&mut p.conv1_b, &mut p.conv2_b, &mut p.fc1_b, &mut p.fc2_b] {
        b.iter_mut().for_each(|v| *v = rng.random_range(0.0..0.2));
    }
    let planes = Planes::from_vec(8, (0..128).map(|i| (i % 7) as f64 * 0.1).collect()).unwrap();
    let eval = forward_eval(&p, &planes).unwrap();
    let draws = 40_000;
    let feat = conv_features(&p, &[&planes]).unwrap();
    let (mut s0, mut s1, mut q0) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        let s = head_scores(&p, feat.clone(), Mode::Train, &mut rng)[0];
        s0 += s.logit0;
        s1 += s.logit1;
        q0 += s.logit0 * s.logit0;
    }
    let n = draws as f64;
    let sd = ((q0 / n - (s0 / n).powi(2)) / n).sqrt();
    assert!((s0 / n - eval.logit0).abs() < 5.0 * sd, "{} vs {}", s0 / n, eval.logit0);
    assert!((s1 / n - eval.logit1).abs() < 5.0 * sd * 2.0);
}

#[test]
fn loss_examples() {
    let s = |p1: f64| Scores {
        p1,
        p0: 1.0 - p1,
        logit1: 0.0,
        logit0: 0.0,
    };
    let eps = 1e-9;
    assert!((loss(&[s(1.0 - eps)], &[1]) - eps).abs() < 1e-15);
    assert!((loss(&[s(0.5)], &[0]) - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((loss(&[s(0.5)], &[1]) - std::f64::consts::LN_2).abs() < 1e-15);
    let batch = [s(0.9), s(0.2), s(0.7)];
    let want = -((0.9f64).ln() + (0.8f64).ln() + (0.3f64).ln()) / 3.0;
    assert!((loss(&batch, &[1, 0, 0]) - want).abs() < 1e-12);
    // clamped
    assert!((loss(&[s(1.0)], &[0]) - (-(1e-12f64).ln())).abs() < 1e-9);
}

fn batch_loss(p: &CmnetParams, batch: &[&Planes], labels: &[u8]) -> f64 {
    loss(&forward_eval_batch(p, batch).unwrap(), labels)
}

#[test]
fn gradients_match_central_differences() {
    let arch = small_arch(7);
    let p = randomized(&arch, 10);
    let inputs: Vec<Planes> = (0..3).map(|i| random_planes(7, 50 + i)).collect();
    let batch: Vec<&Planes> = inputs.iter().collect();
    let labels = [1, 0, 1];
    let mut dummy = substream(0, &[]);
    let (l, grads) = backward(&p, &batch, &labels, Mode::Eval, &mut dummy, false).unwrap();
    assert!((l - batch_loss(&p, &batch, &labels)).abs() < 1e-14);

    let h = 1e-5;
    let mut worst = 0.0f64;
    for t in 0..8 {
        let n = p.tensors()[t].len();
        for i in 0..n {
            let mut plus = p.clone();
            plus.tensors_mut()[t][i] += h;
            let mut minus = p.clone();
            minus.tensors_mut()[t][i] -= h;
            let fd = (batch_loss(&plus, &batch, &labels) - batch_loss(&minus, &batch, &labels)) / (2.0 * h);
            let g = grads.tensors()[t][i];
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn confident_correct_predictions_have_no_gradient() {
    let arch = small_arch(7);
    let mut p = randomized(&arch, 11);
    p.fc2_w.fill(0.0);
    p.fc2_b[1] = 60.0;
    p.fc2_b[0] = -60.0;
    let planes = random_planes(7, 1);
    let (l, g) = backward(&p, &[&planes], &[1], Mode::Eval, &mut substream(0, &[]), false).unwrap();
    assert!(l < 1e-40);
    for t in g.tensors() {
        assert!(t.iter().all(|v| v.abs() < 1e-40));
    }
}

fn separable_dataset(m: usize, n: usize) -> Dataset {
    // class 1: bright diagonal, class 0: bright first row
    let examples = (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let mut rng = substream(i as u64, &[]);
            let data = (0..2 * m * m)
                .map(|idx| {
                    let (r, c) = ((idx % (m * m)) / m, idx % m);
                    let on = idx < m * m && if label == 1 { r == c } else { r == 0 };
                    (if on { 1.0 } else { 0.0 }) + rng.random_range(-0.05..0.05)
                })
                .collect();
            ScmExample {
                planes: Planes::from_vec(m, data).unwrap(),
                label,
            }
        })
        .collect();
    Dataset::new(examples, true, None).unwrap()
}

#[test]
fn training_can_overfit_small_set() {
    let arch = CmnetArch::new(8, Padding::Valid);
    let p = init_params(&arch, &mut substream(12, &[])).unwrap();
    let data = separable_dataset(8, 32);
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 8,
        seed: 3,
        ..TrainConfig::default()
    };
    let (trained, report) = train(&p, &data, &cfg).unwrap();
    assert_eq!(report.epoch_losses.len(), 200);
    assert!(report.final_loss() < 0.01, "final loss {}", report.final_loss());
    let (again, _) = train(&p, &data, &cfg).unwrap();
    assert_eq!(trained, again);
}

#[test]
fn zero_learning_rate_and_zero_epochs() {
    let arch = small_arch(7);
    let p = randomized(&arch, 13);
    let data = separable_dataset(7, 6);
    let cfg = TrainConfig {
        epochs: 1,
        learning_rate: 0.0,
        ..TrainConfig::default()
    };
    assert_eq!(train(&p, &data, &cfg).unwrap().0, p);
    let cfg = TrainConfig { epochs: 0, ..cfg };
    assert!(train(&p, &data, &cfg).is_err());
    let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
    cfg.validate().unwrap();
    TrainConfig { epochs: 60, ..cfg }.validate().unwrap();
}

#[test]
fn frozen_training_leaves_conv_untouched() {
    let arch = small_arch(8);
    let p = randomized(&arch, 14);
    let data = separable_dataset(8, 16);
    let cfg = TrainConfig {
        epochs: 5,
        batch_size: 4,
        freeze_conv: true,
        ..TrainConfig::default()
    };
    let (q, _) = train(&p, &data, &cfg).unwrap();
    assert!(q.conv_equal(&p));
    assert_ne!(q.fc1_w, p.fc1_w);
    assert_ne!(q.fc2_w, p.fc2_w);

    let planes = random_planes(8, 2);
    let (_, g) = backward(&p, &[&planes], &[0], Mode::Train, &mut substream(1, &[]), true).unwrap();
    assert!(g.conv1_w.iter().chain(g.conv2_w.iter()).all(|&v| v == 0.0));
}

#[test]
fn model_file_round_trip_and_errors() {
    let arch = small_arch(7);
    let p = randomized(&arch, 15);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.txt");
    save_params(&p, &path).unwrap();
    let back = load_params(&path).unwrap();
    for (a, b) in p.tensors().iter().zip(back.tensors()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    assert_eq!(back, p);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_params(&path), Err(crate::Error::Corrupt { .. })));

    let big = init_params(&CmnetArch::new(16, Padding::Valid), &mut substream(1, &[])).unwrap();
    save_params(&big, &path).unwrap();
    let err = load_params_for(&path, &CmnetArch::new(8, Padding::Valid)).unwrap_err();
    assert!(matches!(err, crate::Error::ArchMismatch { .. }));
}

#[test]
fn eval_mode_ignores_stream() {
    let arch = small_arch(7);
    let p = randomized(&arch, 16);
    let planes = random_planes(7, 0);
    let mut rng = SimRng::from_seed_u64(0);
    let a = forward(&p, &planes, Mode::Eval, &mut rng).unwrap();
    assert_eq!(a, forward_eval(&p, &planes).unwrap());
}

trait FromSeed {
    fn from_seed_u64(seed: u64) -> Self;
}

impl FromSeed for SimRng {
    fn from_seed_u64(seed: u64) -> Self {
        use rand::SeedableRng;
        SimRng::seed_from_u64(seed)
    }
}
