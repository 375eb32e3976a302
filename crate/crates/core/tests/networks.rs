//! Whole-network checks: forward oracle, end-to-end gradients and the
//! behaviour of the three training procedures on separable data.

mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tclab_core::augment::AugmentationSpec;
use tclab_core::dataio::PacketSeries;
use tclab_core::flowpic::{FlowpicConfig, Image};
use tclab_core::nn::{
    cross_entropy, evaluate, finetune, pretrain_simclr, simclr_batch_views, train_supervised, LabeledImages, Layer,
    Network, NetworkConfig, Tensor, TrainConfig, BACKBONE_LAYERS,
};
use tclab_core::synth::{generate, SynthConfig};

/// Plain nested-loop evaluation-mode forward pass in f64.
fn naive_forward(net: &Network<f64>, x: &[f64], size: usize) -> Vec<f64> {
    let (mut c, mut h, mut w) = (1usize, size, size);
    let mut a = x.to_vec();
    for (_, layer) in net.layers() {
        match layer {
            Layer::Conv2d(conv) => {
                let (k, s) = (conv.kernel, conv.stride);
                let (ho, wo) = ((h - k) / s + 1, (w - k) / s + 1);
                let mut out = vec![0.0; conv.out_channels * ho * wo];
                for o in 0..conv.out_channels {
                    for y in 0..ho {
                        for z in 0..wo {
                            let mut acc = conv.bias.data()[o];
                            for ci in 0..c {
                                for i in 0..k {
                                    for j in 0..k {
                                        let wv = conv.weight.data()[((o * c + ci) * k + i) * k + j];
                                        acc += wv * a[(ci * h + y * s + i) * w + z * s + j];
                                    }
                                }
                            }
                            out[(o * ho + y) * wo + z] = acc;
                        }
                    }
                }
                (c, h, w, a) = (conv.out_channels, ho, wo, out);
            }
            Layer::MaxPool2 => {
                let (ho, wo) = (h / 2, w / 2);
                let mut out = vec![f64::NEG_INFINITY; c * ho * wo];
                for ci in 0..c {
                    for y in 0..2 * ho {
                        for z in 0..2 * wo {
                            let o = &mut out[(ci * ho + y / 2) * wo + z / 2];
                            *o = o.max(a[(ci * h + y) * w + z]);
                        }
                    }
                }
                (h, w, a) = (ho, wo, out);
            }
            Layer::Linear(l) => {
                a = (0..l.out_features)
                    .map(|o| {
                        let row = &l.weight.data()[o * l.in_features..(o + 1) * l.in_features];
                        l.bias.data()[o] + row.iter().zip(&a).map(|(p, q)| p * q).sum::<f64>()
                    })
                    .collect();
            }
            Layer::Relu => a.iter_mut().for_each(|v| *v = v.max(0.0)),
            Layer::Dropout2d(_) | Layer::Dropout(_) | Layer::Flatten => {}
        }
    }
    a
}

fn random_images(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Image> {
    (0..n)
        .map(|_| Image::from_vec(size, (0..size * size).map(|_| rng.gen_range(0.0f32..1.0)).collect()))
        .collect()
}

fn randomize_biases(net: &mut Network<f64>, rng: &mut ChaCha8Rng) {
    for (i, (t, _)) in net.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
}

#[test]
fn forward_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let configs = [
        NetworkConfig::supervised(32, 5, true),
        NetworkConfig::supervised(64, 3, false),
        NetworkConfig::simclr(32, 5, false, 30),
        NetworkConfig::finetune(32, 4, 30),
    ];
    for config in configs {
        let net = Network::<f32>::new(config, 5).unwrap();
        let mut reference = net.cast::<f64>();
        randomize_biases(&mut reference, &mut rng);
        let net = reference.cast::<f32>();
        let reference = net.cast::<f64>();
        let images = random_images(3, config.flowpic_dim, &mut rng);
        let got = evaluate(&net, &images).unwrap().logits;
        for (img, row) in images.iter().zip(&got) {
            let x: Vec<f64> = img.data.iter().map(|&v| v as f64).collect();
            let want = naive_forward(&reference, &x, config.flowpic_dim);
            let row: Vec<f64> = row.iter().map(|&v| v as f64).collect();
            let e = common::rel_err(&row, &want);
            assert!(e < 1e-5, "{config:?}: relative error {e:e}");
        }
    }
}

#[test]
fn whole_network_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut net = Network::<f32>::new(NetworkConfig::supervised(32, 4, true), 3)
        .unwrap()
        .cast::<f64>();
    randomize_biases(&mut net, &mut rng);
    let images = random_images(3, 32, &mut rng);
    let refs: Vec<&Image> = images.iter().collect();
    let x = net.batch(&refs).unwrap();
    let labels = [0usize, 3, 1];
    let mask_rng = ChaCha8Rng::seed_from_u64(99);

    let loss_of = |n: &Network<f64>, x: Tensor<f64>| {
        let (logits, _) = n.forward_train(x, &mut mask_rng.clone()).unwrap();
        cross_entropy(&logits, &labels).unwrap().0
    };
    let (logits, tape) = net.forward_train(x.clone(), &mut mask_rng.clone()).unwrap();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let (grads, gx) = net.backward(&tape, g).unwrap();

    let eps = 1e-6;
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    let sizes: Vec<usize> = net.params().iter().map(|(_, t)| t.len()).collect();
    for (p, &len) in sizes.iter().enumerate() {
        let ga = grads.grads[p].as_ref().expect("nothing is frozen");
        for _ in 0..8 {
            let j = rng.gen_range(0..len);
            let probe = |delta: f64| {
                let mut n = net.clone();
                n.params_mut()[p].0.data_mut()[j] += delta;
                loss_of(&n, x.clone())
            };
            numeric.push((probe(eps) - probe(-eps)) / (2.0 * eps));
            analytic.push(ga.data()[j]);
        }
    }
    let gx = gx.expect("input gradient");
    for _ in 0..16 {
        let j = rng.gen_range(0..x.len());
        let probe = |delta: f64| {
            let mut xp = x.clone();
            xp.data_mut()[j] += delta;
            loss_of(&net, xp)
        };
        numeric.push((probe(eps) - probe(-eps)) / (2.0 * eps));
        analytic.push(gx.data()[j]);
    }
    let e = common::rel_err(&analytic, &numeric);
    assert!(e < 1e-5, "relative error {e:e}");
}

struct Data {
    series: Vec<PacketSeries>,
    labels: Vec<usize>,
}

fn separable(classes: usize, per_class: usize, seed: u64) -> Data {
    let d = generate(&SynthConfig {
        num_classes: classes,
        flows_per_class: per_class,
        seed,
        ..Default::default()
    })
    .unwrap();
    let names = d.labels();
    Data {
        series: d.records().iter().map(|r| r.series.clone()).collect(),
        labels: d
            .records()
            .iter()
            .map(|r| names.binary_search(&r.label).unwrap())
            .collect(),
    }
}

fn labeled(d: &Data, idx: impl Iterator<Item = usize>) -> LabeledImages {
    let fp = FlowpicConfig::with_resolution(32);
    let (images, labels) = idx.map(|i| (fp.image(&d.series[i]), d.labels[i])).unzip();
    LabeledImages::new(images, labels).unwrap()
}

fn accuracy(net: &Network<f32>, data: &LabeledImages) -> f64 {
    let pred = evaluate(net, &data.images).unwrap().predictions;
    pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64
}

fn quick(mut cfg: TrainConfig, epochs: usize) -> TrainConfig {
    cfg.max_epochs = epochs;
    cfg.with_seed(4)
}

#[test]
fn supervised_training_fits_separable_data_and_is_deterministic() {
    let d = separable(3, 40, 1);
    let train = labeled(&d, (0..d.labels.len()).filter(|i| i % 4 != 0));
    let val = labeled(&d, (0..d.labels.len()).filter(|i| i % 4 == 0));
    let net = || Network::new(NetworkConfig::supervised(32, 3, false), 9).unwrap();
    let cfg = quick(TrainConfig::supervised(), 40);
    let a = train_supervised(net(), &train, &val, &cfg).unwrap();
    assert!(accuracy(&a.network, &train) >= 0.99);

    // The returned parameters are those of the lowest validation loss.
    let best = a
        .history
        .iter()
        .min_by(|x, y| x.val_loss.unwrap().total_cmp(&y.val_loss.unwrap()))
        .unwrap();
    assert!(a.history.iter().position(|e| e.epoch == a.best_epoch).is_some());
    assert!(a.history[a.best_epoch - 1].val_loss.unwrap() <= best.val_loss.unwrap() + cfg.min_delta);
    if a.epochs_run < cfg.max_epochs {
        assert_eq!(a.epochs_run, a.best_epoch + cfg.patience);
    }

    let b = train_supervised(net(), &train, &val, &cfg).unwrap();
    assert_eq!(a.network, b.network);
    assert_eq!(a.history, b.history);
    let c = train_supervised(net(), &train, &val, &cfg.with_seed(5)).unwrap();
    assert_ne!(a.network, c.network);
}

#[test]
fn early_stopping_halts_a_stalled_run() {
    let d = separable(2, 10, 2);
    let data = labeled(&d, 0..d.labels.len());
    let mut cfg = quick(TrainConfig::supervised(), 200);
    cfg.learning_rate = 1e-9;
    cfg.patience = 2;
    let out = train_supervised(
        Network::new(NetworkConfig::supervised(32, 2, false), 1).unwrap(),
        &data,
        &data,
        &cfg,
    )
    .unwrap();
    assert!(out.epochs_run <= 1 + cfg.patience, "ran {} epochs", out.epochs_run);
    assert_eq!(out.best_epoch, 1);
}

#[test]
fn simclr_batches_hold_two_views_per_sample() {
    let d = separable(2, 16, 3);
    let refs: Vec<&PacketSeries> = d.series.iter().collect();
    let fp = FlowpicConfig::with_resolution(32);
    let pair = (AugmentationSpec::change_rtt(), AugmentationSpec::time_shift());
    let views = simclr_batch_views(&refs, pair, &fp, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(views.len(), 64);
    assert!(views.iter().all(|v| v.size == 32));
    let same = simclr_batch_views(
        &refs,
        (AugmentationSpec::NoAug, AugmentationSpec::NoAug),
        &fp,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    for (i, s) in refs.iter().enumerate() {
        assert_eq!(same[2 * i], fp.image(s));
        assert_eq!(same[2 * i + 1], fp.image(s));
    }
}

#[test]
fn finetuning_keeps_the_backbone_frozen() {
    let d = separable(3, 20, 4);
    let pre_cfg = TrainConfig {
        batch_size: 16,
        ..quick(TrainConfig::simclr(), 2)
    };
    let pair = (AugmentationSpec::change_rtt(), AugmentationSpec::time_shift());
    let fp = FlowpicConfig::with_resolution(32);
    let pre = pretrain_simclr(
        Network::new(NetworkConfig::simclr(32, 3, false, 30), 2).unwrap(),
        &d.series,
        pair,
        &fp,
        &pre_cfg,
    )
    .unwrap();
    assert!(pre.history.iter().all(|e| (0.0..=1.0).contains(&e.metric.unwrap())));

    // One labeled flow per class.
    let shots: Vec<usize> = (0..3).map(|c| d.labels.iter().position(|&l| l == c).unwrap()).collect();
    let train = labeled(&d, shots.into_iter());
    let out = finetune(&pre.network, 3, &train, &quick(TrainConfig::finetune(), 30)).unwrap();
    let tuned = &out.network;
    assert_eq!(tuned.frozen_layers(), BACKBONE_LAYERS);
    assert!(tuned.trainable_param_count() < tuned.param_count());
    let pre_params = pre.network.params();
    for (name, t) in tuned.params() {
        if let Some((_, p)) = pre_params.iter().find(|(n, _)| *n == name) {
            assert_eq!(*p, t, "{name} changed");
        }
    }
    assert_eq!(accuracy(tuned, &train), 1.0);

    let supervised = Network::new(NetworkConfig::supervised(32, 3, false), 0).unwrap();
    assert!(finetune(&supervised, 3, &train, &TrainConfig::finetune()).is_err());
}
