use mixres_core::augment::{self, mixup, mixup_with, one_hot, sample_beta, MixupConfig, Rng};
use mixres_core::losses::{cross_entropy, mixup_loss, Reduction};
use mixres_core::tensor::{Tape, Tensor};
use proptest::prelude::*;

fn batch(rng: &mut Rng, n: usize, k: usize) -> (Tensor<f64>, Vec<u8>) {
    let x = Tensor::from_fn(&[n, 3, 4, 4], |_| rng.uniform());
    let labels = (0..n).map(|_| rng.below(k) as u8).collect();
    (x, labels)
}

/// Kolmogorov-Smirnov distance of a sample to Uniform(0, 1).
fn ks_uniform(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mixed_targets_are_distributions(seed in any::<u64>(), n in 1usize..16, alpha in 0.05f64..4.0) {
        let mut rng = Rng::seed(seed);
        let (x, labels) = batch(&mut rng, n, 10);
        let t = one_hot::<f64>(&labels, 10).unwrap();
        let cfg = MixupConfig { alpha, ..MixupConfig::default() };
        let d = mixup(&x, &t, &cfg, &mut rng).unwrap();
        for row in d.mixed_targets.data().chunks(10) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        let mut sorted = d.index.clone();
        sorted.sort();
        prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
        prop_assert!(d.lambda.iter().all(|l| (0.0..=1.0).contains(l)));
    }

    #[test]
    fn mixed_inputs_lie_between_sources(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::seed(seed);
        let (x, labels) = batch(&mut rng, n, 10);
        let x = x.cast::<f32>();
        let t = one_hot::<f32>(&labels, 10).unwrap();
        let d = mixup(&x, &t, &MixupConfig::default(), &mut rng).unwrap();
        let stride = x.numel() / n;
        for i in 0..n {
            let j = d.index[i];
            for e in 0..stride {
                let (a, b) = (x.data()[i * stride + e], x.data()[j * stride + e]);
                let m = d.mixed_inputs.data()[i * stride + e];
                prop_assert!(m >= a.min(b) && m <= a.max(b));
            }
        }
    }

    #[test]
    fn lambda_one_is_identity(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::seed(seed);
        let (x, labels) = batch(&mut rng, n, 10);
        let t = one_hot::<f32>(&labels, 10).unwrap();
        let x = x.cast::<f32>();
        let cfg = MixupConfig { lambda_override: Some(1.0), ..MixupConfig::default() };
        let d = mixup(&x, &t, &cfg, &mut rng).unwrap();
        prop_assert_eq!(d.mixed_inputs.data(), x.data());
        prop_assert_eq!(d.mixed_targets.data(), t.data());
    }

    #[test]
    fn loss_is_linear_in_targets(seed in any::<u64>(), n in 1usize..8, k in 2usize..12) {
        let mut rng = Rng::seed(seed);
        let logits = Tensor::from_fn(&[n, k], |_| rng.normal() * 3.0);
        let y1: Vec<u8> = (0..n).map(|_| rng.below(k) as u8).collect();
        let y2: Vec<u8> = (0..n).map(|_| rng.below(k) as u8).collect();
        let lambda: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let (t1, t2) = (one_hot::<f64>(&y1, k).unwrap(), one_hot::<f64>(&y2, k).unwrap());
        let mixed = Tensor::from_fn(&[n, k], |i| {
            let l = lambda[i / k];
            l * t1.data()[i] + (1.0 - l) * t2.data()[i]
        });
        let per_sample = |target: &Tensor<f64>| {
            let mut tape = Tape::<f64>::new();
            let z = tape.input(logits.clone(), false);
            mixup_loss(&mut tape, z, target, Reduction::Sum).unwrap().per_sample
        };
        let (m, a, b) = (per_sample(&mixed), per_sample(&t1), per_sample(&t2));
        for i in 0..n {
            prop_assert!((m[i] - (lambda[i] * a[i] + (1.0 - lambda[i]) * b[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn reductions_agree(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = Rng::seed(seed);
        let logits = Tensor::from_fn(&[n, 5], |_| rng.normal());
        let labels: Vec<u8> = (0..n).map(|_| rng.below(5) as u8).collect();
        let t = one_hot::<f64>(&labels, 5).unwrap();
        let total = |r| {
            let mut tape = Tape::<f64>::new();
            let z = tape.input(logits.clone(), false);
            let lp = tape.log_softmax_clamped(z).unwrap();
            let l = cross_entropy(&mut tape, &t, lp, r).unwrap();
            tape.value(l.total).data()[0]
        };
        prop_assert!((total(Reduction::Sum) - n as f64 * total(Reduction::Mean)).abs() < 1e-9);
    }
}

#[test]
fn beta_one_is_uniform() {
    let mut rng = Rng::seed(11);
    let xs = sample_beta(1.0, 100_000, &mut rng).unwrap();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    assert!((mean - 0.5).abs() < 0.005, "{mean}");
    let ks = ks_uniform(xs);
    assert!(ks < 0.01, "{ks}");
}

#[test]
fn small_alpha_concentrates_at_the_ends() {
    let mut rng = Rng::seed(12);
    let xs = sample_beta(0.2, 50_000, &mut rng).unwrap();
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
    // 1 / (4 (2 alpha + 1)) for the symmetric beta
    assert!((var - 1.0 / 5.6).abs() < 0.005, "{var}");
    assert!(var > 1.0 / 12.0);
    assert!(sample_beta(0.0, 1, &mut rng).is_err());
}

#[test]
fn fixed_pairing_matches_hand_mix() {
    let x = Tensor::new(&[2, 1], vec![0.0f64, 10.0]).unwrap();
    let t = one_hot::<f64>(&[0, 1], 2).unwrap();
    let d = mixup_with(&x, &t, &[0.3, 0.3], &[1, 0]).unwrap();
    assert!((d.mixed_inputs.data()[0] - 7.0).abs() < 1e-12);
    assert!((d.mixed_inputs.data()[1] - 3.0).abs() < 1e-12);
    assert!((d.mixed_targets.data()[0] - 0.3).abs() < 1e-12);
    assert!(mixup_with(&x, &t, &[0.3, 0.3], &[0, 0]).is_err());
    assert!(mixup_with(&x, &t, &[1.3, 0.3], &[1, 0]).is_err());
}

#[test]
fn crop_and_flip_preserve_content() {
    let mut rng = Rng::seed(3);
    let img = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |i| i as f32);
    let flipped = augment::horizontal_flip(&img, 1.0, &mut rng).unwrap();
    let back = augment::horizontal_flip(&flipped, 1.0, &mut rng).unwrap();
    assert_eq!(back.data(), img.data());
    assert_eq!(augment::random_crop(&img, 0, &mut rng).unwrap().data(), img.data());
    let cropped = augment::random_crop(&img, 4, &mut rng).unwrap();
    assert_eq!(cropped.shape(), img.shape());
}
