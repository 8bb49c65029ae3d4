use mixres_core::augment::Rng;
use mixres_core::model::{Mode, ResNet, ResNetConfig, Stem};
use mixres_core::tensor::{Tape, Tensor};

fn images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = Rng::seed(seed);
    Tensor::from_fn(&[n, 3, 32, 32], |_| rng.normal() as f32)
}

fn small(stage_blocks: [usize; 4], width: usize) -> ResNetConfig {
    ResNetConfig {
        stage_blocks,
        base_width: width,
        ..ResNetConfig::tiny()
    }
}

/// Parameter count written out layer by layer, for a CIFAR stem.
fn counted_params(blocks: [usize; 4], w0: usize, classes: usize) -> usize {
    let mut total = 27 * w0;
    let mut cin = w0;
    for (stage, &count) in blocks.iter().enumerate() {
        let w = w0 << stage;
        for i in 0..count {
            let proj = cin != 4 * w || (stage > 0 && i == 0);
            total += 2 * cin + cin * w + 2 * w + 9 * w * w + 2 * w + 4 * w * w;
            if proj {
                total += 4 * w * cin;
            }
            cin = 4 * w;
        }
    }
    total + 2 * cin + cin * classes + classes
}

#[test]
fn parameter_counts_match_golden_values() {
    let r50 = ResNet::new(&ResNetConfig::resnet50(), 0).unwrap();
    assert_eq!(r50.num_params(), 23_513_162);
    assert_eq!(counted_params([3, 4, 6, 3], 64, 10), 23_513_162);
    let tiny = ResNet::new(&ResNetConfig::tiny(), 0).unwrap();
    assert_eq!(tiny.num_params(), 507_674);
    for (blocks, w) in [([1, 2, 1, 1], 4), ([2, 1, 1, 2], 8), ([1, 1, 1, 1], 16)] {
        let m = ResNet::new(&small(blocks, w), 3).unwrap();
        assert_eq!(m.num_params(), counted_params(blocks, w, 10), "{blocks:?} {w}");
    }
}

#[test]
fn zero_initialized_residual_blocks_are_identities() {
    let cfg = ResNetConfig {
        zero_init_residual: true,
        ..small([2, 1, 1, 1], 4)
    };
    let model = ResNet::new(&cfg, 5).unwrap();
    let b = &model.blocks()[1];
    assert!(!b.has_projection());
    let mut rng = Rng::seed(1);
    let x = Tensor::from_fn(&[2, b.in_channels, 6, 6], |_| rng.normal() as f32);
    for mode in [Mode::Train, Mode::Eval] {
        let mut tape = Tape::new();
        let params = model.bind_params(&mut tape);
        let xv = tape.input(x.clone(), false);
        let (y, _) = model.block_forward(&mut tape, 1, xv, &params, mode).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }
}

#[test]
fn stages_halve_the_spatial_size() {
    let model = ResNet::new(&small([1, 2, 1, 1], 4), 0).unwrap();
    let mut tape = Tape::new();
    let params = model.bind_params(&mut tape);
    let mut h = tape.input(Tensor::from_fn(&[1, 4, 32, 32], |i| (i % 7) as f32), false);
    let mut sides = Vec::new();
    for (i, b) in model.blocks().iter().enumerate() {
        h = model.block_forward(&mut tape, i, h, &params, Mode::Train).unwrap().0;
        let shape = tape.value(h).shape().to_vec();
        assert_eq!(shape[1], b.out_channels());
        sides.push(shape[2]);
    }
    assert_eq!(sides, vec![32, 16, 16, 8, 4]);
}

#[test]
fn imagenet_stem_downsamples() {
    let cfg = ResNetConfig {
        stem: Stem::Imagenet,
        ..small([1, 1, 1, 1], 4)
    };
    let model = ResNet::new(&cfg, 0).unwrap();
    let logits = model.predict(&images(2, 0)).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
    assert_eq!(model.params()[0].shape(), &[4, 3, 7, 7]);
}

#[test]
fn gradients_reach_every_parameter() {
    let model = ResNet::new(&small([1, 1, 1, 1], 4), 2).unwrap();
    let mut tape = Tape::new();
    let f = model.forward(&mut tape, &images(4, 3), Mode::Train).unwrap();
    let r = Tensor::from_fn(&[4, 10], |i| ((i * 37) % 11) as f32 - 5.0);
    let r = tape.constant(r);
    let weighted = tape.mul(f.logits, r).unwrap();
    let loss = tape.sum_all(weighted);
    let grads = tape.backward(loss).unwrap();
    for (g, name) in model.param_grads(&f, &grads).iter().zip(model.param_names()) {
        assert!(g.iter().all(|v| v.is_finite()), "{name}");
        assert!(g.iter().any(|&v| v != 0.0), "{name} got no gradient");
    }
}

#[test]
fn train_and_eval_modes_differ_until_stats_settle() {
    let mut model = ResNet::new(&small([1, 1, 1, 1], 4), 4).unwrap();
    let x = images(8, 5);
    let train_logits = |m: &ResNet| {
        let mut tape = Tape::new();
        let f = m.forward(&mut tape, &x, Mode::Train).unwrap();
        (tape.value(f.logits).clone(), f.bn_stats)
    };
    let (t, stats) = train_logits(&model);
    let e = model.predict(&x).unwrap();
    let gap = |a: &Tensor<f32>, b: &Tensor<f32>| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0f32, f32::max)
    };
    let before = gap(&t, &e);
    assert!(before > 1e-3, "{before}");
    // running stats converge to the batch statistics of a fixed batch
    model.apply_bn_stats(&stats).unwrap();
    for _ in 0..200 {
        let (_, s) = train_logits(&model);
        model.apply_bn_stats(&s).unwrap();
    }
    let after = gap(&t, &model.predict(&x).unwrap());
    assert!(after < before / 10.0, "{after} vs {before}");
}

#[test]
fn load_state_rejects_foreign_shapes() {
    let mut a = ResNet::new(&small([1, 1, 1, 1], 4), 0).unwrap();
    let b = ResNet::new(&small([1, 1, 1, 1], 8), 0).unwrap();
    assert!(a.load_state(b.params().to_vec(), b.running_stats().to_vec()).is_err());
    let c = ResNet::new(&small([1, 1, 1, 1], 4), 1).unwrap();
    a.load_state(c.params().to_vec(), c.running_stats().to_vec()).unwrap();
    assert_eq!(a.params(), c.params());
}
