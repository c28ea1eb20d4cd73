use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssformer_core::data::{synth_dataset, Sample};
use ssformer_core::model::{ModelConfig, Profile, SsFormer};
use ssformer_core::train::*;
use ssformer_core::{Error, Param, Tensor};

fn adam(lr: f64, wd: f64) -> AdamWConfig {
    AdamWConfig {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: wd,
    }
}

fn params(rng: &mut ChaCha8Rng) -> Vec<Param> {
    (0..3)
        .map(|i| Param::new(format!("p{i}"), i, Tensor::from_fn(vec![i + 2, 3], |_| rng.gen_range(-1.0..1.0))))
        .collect()
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ps = params(&mut rng);
    let before = ps.clone();
    let mut opt = AdamW::new(&ps.iter().collect::<Vec<_>>());
    let grads: Vec<Vec<f32>> = ps.iter().map(|p| vec![0.0; p.numel()]).collect();
    for _ in 0..3 {
        opt.step(&mut ps.iter_mut().collect::<Vec<_>>(), &grads, &adam(1e-2, 0.0)).unwrap();
    }
    assert_eq!(ps, before);
}

#[test]
fn zero_gradient_with_decay_shrinks_by_one_minus_lr_wd() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = params(&mut rng);
    let before = ps.clone();
    let mut opt = AdamW::new(&ps.iter().collect::<Vec<_>>());
    let grads: Vec<Vec<f32>> = ps.iter().map(|p| vec![0.0; p.numel()]).collect();
    let (lr, wd) = (1e-2, 0.1);
    opt.step(&mut ps.iter_mut().collect::<Vec<_>>(), &grads, &adam(lr, wd)).unwrap();
    for (a, b) in ps.iter().zip(&before) {
        for (&x, &x0) in a.tensor.data().iter().zip(b.tensor.data()) {
            assert_eq!(x, (x0 as f64 * (1.0 - lr * wd)) as f32);
        }
    }
}

#[test]
fn first_step_moves_by_about_lr_against_the_gradient_sign() {
    let mut p = vec![Param::new("w", 0, Tensor::new(vec![1], vec![0.5]).unwrap())];
    let mut opt = AdamW::new(&p.iter().collect::<Vec<_>>());
    for g in [3.0f32, -0.02] {
        p[0].tensor.data_mut()[0] = 0.5;
        opt = AdamW::new(&p.iter().collect::<Vec<_>>());
        opt.step(&mut p.iter_mut().collect::<Vec<_>>(), &[vec![g]], &adam(1e-3, 0.0)).unwrap();
        let expect = 0.5 - 1e-3 * g as f64 / (g.abs() as f64 + 1e-8);
        assert!((p[0].tensor.data()[0] as f64 - expect).abs() < 1e-7);
    }
    assert_eq!(opt.step, 1);
}

#[test]
fn matches_a_double_precision_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut ps = params(&mut rng);
    let mut reference: Vec<Vec<f64>> = ps.iter().map(|p| p.tensor.data().iter().map(|&v| v as f64).collect()).collect();
    let mut m: Vec<Vec<f64>> = reference.iter().map(|r| vec![0.0; r.len()]).collect();
    let mut v = m.clone();
    let mut opt = AdamW::new(&ps.iter().collect::<Vec<_>>());
    let cfg = adam(3e-3, 0.0);
    for t in 1..=10 {
        let grads: Vec<Vec<f32>> = ps.iter().map(|p| (0..p.numel()).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        opt.step(&mut ps.iter_mut().collect::<Vec<_>>(), &grads, &cfg).unwrap();
        for i in 0..ps.len() {
            for j in 0..reference[i].len() {
                let g = grads[i][j] as f64;
                m[i][j] = 0.9 * m[i][j] + 0.1 * g;
                v[i][j] = 0.999 * v[i][j] + 0.001 * g * g;
                let mh = m[i][j] / (1.0 - 0.9f64.powi(t));
                let vh = v[i][j] / (1.0 - 0.999f64.powi(t));
                reference[i][j] -= 3e-3 * mh / (vh.sqrt() + 1e-8);
            }
        }
    }
    for (p, r) in ps.iter().zip(&reference) {
        for (&a, &b) in p.tensor.data().iter().zip(r) {
            assert!((a as f64 - b).abs() / b.abs().max(1e-3) < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn nan_gradient_names_the_parameter() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = params(&mut rng);
    let mut opt = AdamW::new(&ps.iter().collect::<Vec<_>>());
    let mut grads: Vec<Vec<f32>> = ps.iter().map(|p| vec![0.1; p.numel()]).collect();
    grads[1][4] = f32::NAN;
    let before = ps.clone();
    let err = opt.step(&mut ps.iter_mut().collect::<Vec<_>>(), &grads, &adam(1e-3, 0.0)).unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("p1")), "{err}");
    assert_eq!(ps, before);
    assert_eq!(opt.step, 0);
}

// ---- run configuration ----

#[test]
fn run_config_defaults_and_overrides() {
    let cfg = RunConfig::from_json(r#"{"train": {"profile": "toy"}}"#).unwrap();
    assert_eq!(cfg.train.lr, 6e-5);
    assert_eq!(cfg.train.betas, (0.9, 0.999));
    assert_eq!(cfg.train.weight_decay, 0.01);
    assert_eq!(cfg.model(), Profile::Toy.model_config());

    let cfg = RunConfig::from_json(r#"{"train": {"lr": 0.001}, "encoder": {"embed_dim": 16}, "decoder": {"num_classes": 4}}"#).unwrap();
    assert_eq!(cfg.encoder.embed_dim, 16);
    assert_eq!(cfg.encoder.depths, vec![1, 1, 1, 1]);
    assert_eq!(cfg.decoder.num_classes, 4);

    let cfg = RunConfig::from_json(r#"{"train": {"profile": "cityscapes"}}"#).unwrap();
    assert_eq!(cfg.decoder.num_classes, 19);
}

#[test]
fn run_config_rejects_unknown_keys_and_bad_values() {
    for text in [
        r#"{"trian": {}}"#,
        r#"{"train": {"learning_rate": 0.1}}"#,
        r#"{"encoder": {"windw": 7}}"#,
        r#"{"synth": {"samples": 3}}"#,
        r#"{"train": {"profile": "imagenet"}}"#,
        r#"{"train": {"batch_size": 0}}"#,
        r#"{"train": {"betas": [0.9, 1.0]}}"#,
        r#"{"train": {"lr": -1}}"#,
        r#"{"encoder": {"num_heads": [3, 3, 3, 3]}}"#,
        r#"[1, 2]"#,
        "not json",
    ] {
        let err = RunConfig::from_json(text).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn linear_decay_reaches_zero_at_the_end() {
    let tc = TrainConfig {
        lr: 1e-3,
        max_iters: 10,
        lr_linear_decay: true,
        ..Default::default()
    };
    assert_eq!(tc.lr_at(0), 1e-3);
    assert!((tc.lr_at(5) - 5e-4).abs() < 1e-15);
    assert_eq!(TrainConfig::default().lr_at(1999), 6e-5);
}

// ---- loop ----

fn small_run(seed: u64, lr: f64, iters: usize) -> RunConfig {
    let mut cfg = RunConfig::for_profile(TrainConfig {
        lr,
        batch_size: 2,
        max_iters: iters,
        seed,
        eval_interval: 0,
        ..Default::default()
    })
    .unwrap();
    cfg.synth = SynthConfig {
        seed,
        train_samples: 16,
        eval_samples: 4,
        height: 32,
        width: 32,
    };
    cfg
}

fn run(cfg: &RunConfig) -> (TrainOutcome, Vec<LogEvent>) {
    let (tr, ho) = synth_splits(&cfg.synth, cfg.decoder.num_classes).unwrap();
    let mut events = Vec::new();
    let out = train(cfg, &tr, &ho, |e| {
        events.push(e.clone());
        Ok(())
    })
    .unwrap();
    (out, events)
}

fn losses(events: &[LogEvent]) -> Vec<f64> {
    events
        .iter()
        .filter_map(|e| match e {
            LogEvent::Train { loss, .. } => Some(*loss),
            _ => None,
        })
        .collect()
}

#[test]
fn loss_decreases_over_200_iterations() {
    let mut deltas: Vec<f64> = (0..5)
        .map(|seed| {
            let (_, events) = run(&small_run(seed, 1e-3, 201));
            let l = losses(&events);
            l[200] - l[0]
        })
        .collect();
    deltas.sort_by(f64::total_cmp);
    assert!(deltas[2] < 0.0, "{deltas:?}");
}

#[test]
fn same_seed_gives_identical_checkpoints_and_losses() {
    let cfg = small_run(7, 1e-3, 6);
    let (a, ea) = run(&cfg);
    let (b, eb) = run(&cfg);
    assert_eq!(ea, eb);
    let ca = Checkpoint::from_model(&a.model, Some(&a.optimizer)).to_bytes();
    let cb = Checkpoint::from_model(&b.model, Some(&b.optimizer)).to_bytes();
    assert_eq!(ca, cb);
    let (c, _) = run(&small_run(8, 1e-3, 6));
    assert_ne!(ca, Checkpoint::from_model(&c.model, Some(&c.optimizer)).to_bytes());
}

#[test]
fn zero_learning_rate_keeps_initial_weights() {
    let mut cfg = small_run(3, 0.0, 4);
    cfg.train.weight_decay = 0.0;
    let (out, _) = run(&cfg);
    let init = SsFormer::new(&cfg.model(), cfg.train.seed).unwrap();
    for (a, b) in out.model.params().iter().zip(init.params()) {
        assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
    }
}

#[test]
fn non_finite_input_aborts_with_the_iteration() {
    let cfg = small_run(4, 1e-3, 3);
    let (mut tr, ho) = synth_splits(&cfg.synth, 3).unwrap();
    for s in &mut tr {
        s.image.data_mut()[5] = f32::NAN;
    }
    let err = train(&cfg, &tr, &ho, |_| Ok(())).err().unwrap();
    assert!(matches!(err, Error::Divergence { iter: 0, .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    assert!(matches!(train(&cfg, &[], &ho, |_| Ok(())), Err(Error::Data(_))));
}

#[test]
fn eval_events_follow_the_interval() {
    let mut cfg = small_run(5, 1e-3, 5);
    cfg.train.eval_interval = 2;
    let (out, events) = run(&cfg);
    let evals: Vec<usize> = events
        .iter()
        .filter_map(|e| match e {
            LogEvent::Eval { iter, .. } => Some(*iter),
            _ => None,
        })
        .collect();
    assert_eq!(evals, vec![2, 4, 5]);
    assert!(out.final_metrics.is_some());
    let line = serde_json::to_string(&events[0]).unwrap();
    assert!(line.starts_with(r#"{"event":"train","iter":0,"loss":"#), "{line}");
}

#[test]
fn one_step_reaches_every_parameter() {
    let cfg = Profile::Toy.model_config();
    let model = SsFormer::new(&cfg, 11).unwrap();
    let data = synth_dataset(11, 2, 64, 64, 3).unwrap();
    let batch: Vec<&Sample> = data.iter().collect();
    let g = batch_gradients(&model, &batch).unwrap();
    for (p, g) in model.params().iter().zip(&g.grads) {
        let norm: f64 = g.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(norm > 0.0, "{} has zero gradient", p.name);
    }
    let seq = batch_gradients_sequential(&model, &batch).unwrap();
    assert_eq!(seq.loss, g.loss);
    assert_eq!(seq.grads, g.grads);
}

#[test]
fn batch_loss_is_the_mean_over_labelled_pixels() {
    let cfg = Profile::Toy.model_config();
    let model = SsFormer::new(&cfg, 12).unwrap();
    let mut data = synth_dataset(12, 2, 32, 32, 3).unwrap();
    // ignore most of the second sample; it should weigh accordingly
    for l in data[1].label.data.iter_mut().skip(100) {
        *l = 255;
    }
    let both = batch_gradients(&model, &[&data[0], &data[1]]).unwrap();
    let a = batch_gradients(&model, &[&data[0]]).unwrap();
    let b = batch_gradients(&model, &[&data[1]]).unwrap();
    assert_eq!((a.pixels, b.pixels, both.pixels), (1024, 100, 1124));
    let expect = (a.loss * 1024.0 + b.loss * 100.0) / 1124.0;
    assert!((both.loss - expect).abs() < 1e-6);
}

// ---- checkpoints ----

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let mut cfg = Profile::Toy.model_config();
    cfg.encoder.embed_dim = 8 * rng.gen_range(1..3);
    cfg.encoder.num_heads = vec![1, 1, 2, 2];
    cfg.encoder.depths = (0..4).map(|_| rng.gen_range(1..3)).collect();
    cfg.decoder.embed_dim = rng.gen_range(4..10);
    cfg.decoder.num_classes = rng.gen_range(2..9);
    cfg
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let dir = tempfile::tempdir().unwrap();
    for trial in 0..20 {
        let cfg = random_config(&mut rng);
        let mut model = SsFormer::new(&cfg, rng.gen()).unwrap();
        // include values that do not survive a decimal roundtrip
        model.params_mut()[0].tensor.data_mut()[0] = f32::from_bits(0x3f80_0001);
        let opt = (trial % 2 == 0).then(|| {
            let mut o = AdamW::new(&model.params());
            o.step = 17;
            o.m[0][0] = 1.5e-20;
            o
        });
        let ck = Checkpoint::from_model(&model, opt.as_ref());
        let path = dir.path().join(format!("{trial}.ssfm"));
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.to_model(Some(&cfg)).unwrap();
        for (a, b) in restored.params().iter().zip(model.params()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.tensor), bits(&b.tensor), "{}", a.name);
        }
    }
}

#[test]
fn checkpoint_header_and_truncation_errors() {
    let model = SsFormer::new(&Profile::Toy.model_config(), 0).unwrap();
    let bytes = Checkpoint::from_model(&model, None).to_bytes();
    assert_eq!(&bytes[..4], b"SSFM");

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, "c"), Err(Error::Format { offset: 0, .. })));

    let cut = bytes.len() - 10;
    match Checkpoint::from_bytes(&bytes[..cut], "c") {
        Err(Error::Format { offset, msg, .. }) => {
            assert!(offset <= cut);
            assert!(msg.contains("truncated"));
        }
        other => panic!("{other:?}"),
    }

    let mut tampered = bytes.clone();
    tampered[8] ^= 1; // first digest byte
    assert!(matches!(Checkpoint::from_bytes(&tampered, "c"), Err(Error::Config(_))));

    let mut trailing = bytes;
    trailing.push(0);
    assert!(matches!(Checkpoint::from_bytes(&trailing, "c"), Err(Error::Format { .. })));
}

#[test]
fn evaluation_requires_a_matching_config() {
    let model = SsFormer::new(&Profile::Toy.model_config(), 0).unwrap();
    let ck = Checkpoint::from_model(&model, None);
    let mut other = Profile::Toy.model_config();
    other.decoder.num_classes = 4;
    let err = ck.to_model(Some(&other)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), 2);
}

// ---- evaluation ----

#[test]
fn ground_truth_predictions_score_one() {
    let data = synth_dataset(20, 6, 32, 32, 3).unwrap();
    let preds = data.iter().map(|s| Ok(s.label.data.clone())).collect();
    let cm = confusion_from_predictions(3, 255, &data, preds).unwrap();
    assert_eq!(cm.miou().unwrap(), 1.0);
}

#[test]
fn zero_classifier_predicts_the_first_class_everywhere() {
    let mut model = SsFormer::new(&Profile::Toy.model_config(), 0).unwrap();
    for p in model.params_mut() {
        if p.name.starts_with("decoder.classifier") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let data = synth_dataset(21, 8, 64, 64, 3).unwrap();
    let m = evaluate(&model, &data).unwrap();
    let counts = (0..3u32)
        .map(|c| data.iter().flat_map(|s| &s.label.data).filter(|&&l| l == c).count())
        .collect::<Vec<_>>();
    let total: usize = counts.iter().sum();
    assert_eq!(counts.iter().max(), Some(&counts[0]), "background dominates");
    assert!((m.pixel_acc - counts[0] as f64 / total as f64).abs() < 1e-12);
}

#[test]
fn metrics_do_not_depend_on_batching_or_sharding() {
    let model = SsFormer::new(&Profile::Toy.model_config(), 22).unwrap();
    let data = synth_dataset(22, 7, 32, 32, 3).unwrap();
    let whole = evaluate(&model, &data).unwrap();
    let mut one_by_one = ssformer_core::metrics::ConfusionMatrix::new(3);
    for s in &data {
        one_by_one.add(&confusion(&model, std::slice::from_ref(s)).unwrap()).unwrap();
    }
    assert_eq!(one_by_one.metrics().unwrap(), whole);
    for shards in [1, 2, 3, 7, 20] {
        assert_eq!(evaluate_sharded(&model, &data, shards).unwrap(), whole);
    }
    assert_eq!(confusion_sequential(&model, &data).unwrap(), confusion(&model, &data).unwrap());
}
