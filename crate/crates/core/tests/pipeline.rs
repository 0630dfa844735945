use mgnet::config::{TrainConfig, SEED_ENV};
use mgnet::data::{load_dataset, synth_generate, write_rgb, Split};
use mgnet::encoder::Profile;
use mgnet::model::{load_checkpoint, save_checkpoint, MgNet};
use mgnet::train::{evaluate, grad_norm, infer, predict_image, schedule, train, Sgd};
use mgnet::{Error, Tensor};

fn quick(max_steps: u64) -> TrainConfig {
    TrainConfig { input_size: 64, batch_size: 2, max_steps: Some(max_steps), tiny_channels: vec![4, 8, 8, 16, 16], ..TrainConfig::tiny() }
}

#[test]
fn config_files_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let toml = dir.path().join("c.toml");
    std::fs::write(&toml, "profile = \"tiny\"\ninput_size = 64\nseed = 3\nfrm = false\n").unwrap();
    let json = dir.path().join("c.json");
    std::fs::write(&json, r#"{"profile": "tiny", "input_size": 64, "seed": 3, "frm": false}"#).unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "profile = \"tiny\"\nbatchsize = 4\n").unwrap();
    let invalid = dir.path().join("invalid.json");
    std::fs::write(&invalid, r#"{"input_size": 100}"#).unwrap();

    // The only test in this binary that touches the environment.
    std::env::remove_var(SEED_ENV);
    let a = TrainConfig::load(&toml).unwrap();
    let b = TrainConfig::load(&json).unwrap();
    assert_eq!(a, b);
    assert_eq!((a.profile, a.seed, a.frm, a.label().as_str()), (Profile::Tiny, 3, false, "B+H+P+U"));
    assert!(matches!(TrainConfig::load(&bad), Err(Error::Config(_))));
    assert!(matches!(TrainConfig::load(&invalid), Err(Error::Config(_))));

    std::env::set_var(SEED_ENV, "41");
    assert_eq!(TrainConfig::load(&toml).unwrap().seed, 41);
    std::env::set_var(SEED_ENV, "x");
    assert!(TrainConfig::load(&toml).is_err());
    std::env::remove_var(SEED_ENV);
}

#[test]
fn schedule_counts_steps() {
    let cfg = TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::tiny() };
    assert_eq!(schedule(&cfg, 10), (3, 9));
    assert_eq!(schedule(&TrainConfig { max_steps: Some(5), ..cfg }, 10), (3, 5));
}

#[test]
fn train_checkpoint_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let layout = synth_generate(3, 64, 1, dir.path(), Split::Train).unwrap();
    let samples = load_dataset(&layout, 64).unwrap();
    let out = dir.path().join("run");
    std::fs::create_dir_all(&out).unwrap();
    let cfg = quick(3);
    let outcome = train::<f32>(&cfg, &samples, Some(&out)).unwrap();
    assert_eq!(outcome.history.len(), 3);
    assert!(outcome.history.iter().all(|h| h.loss.is_finite()));
    // Two batches per epoch: epochs 1 and 2 plus the final checkpoint.
    let names: Vec<String> = outcome.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["epoch_001.ckpt", "epoch_002.ckpt", "last.ckpt"]);

    let loaded = load_checkpoint::<f32>(&out.join("last.ckpt")).unwrap();
    assert_eq!(loaded.step, 3);
    assert_eq!(loaded.cfg, cfg);
    assert_eq!(loaded.optimizer.len(), outcome.optimizer.state().len());
    for (name, v) in outcome.store.params() {
        assert_eq!(loaded.store.get(name).unwrap(), v.value(), "{name}");
    }
    let r1 = evaluate(&outcome.net, &outcome.store, &samples, 2).unwrap();
    let r2 = evaluate(&loaded.net, &loaded.store, &samples, 3).unwrap();
    assert_eq!(r1, r2);

    // Inference maps back to the original image size.
    let img_path = dir.path().join("odd.png");
    let image = Tensor::<f32>::full(&[3, 50, 70], 0.5);
    write_rgb(&img_path, &image).unwrap();
    let pred = predict_image(&loaded.net, &loaded.store, &image, 64).unwrap();
    assert_eq!((pred.height, pred.width, pred.prob.len()), (50, 70, 3500));
    assert_eq!(pred.trace.len(), cfg.t_refine + 1);
    let written = infer(&loaded.net, &loaded.store, 64, &[img_path], &out, true).unwrap();
    let names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["odd_prob.png", "odd_mask.png", "odd_trace_0.png", "odd_trace_1.png", "odd_trace_2.png"]);
    let mask = image::open(&written[1]).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (70, 50));
    assert!(mask.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    let prob = image::open(&written[0]).unwrap().to_luma8();
    for (px, &p) in prob.pixels().zip(&pred.prob) {
        assert!((px.0[0] as f32 / 255.0 - p).abs() <= 1.0 / 255.0);
    }
}

#[test]
fn ablation_flags_change_parameter_count() {
    let count = |frm: bool, ppg: bool| MgNet::build::<f32>(&TrainConfig { frm, ppg, ..quick(1) }).unwrap().1.param_count();
    let full = count(true, true);
    assert!(count(false, true) < full);
    assert!(count(true, false) < full);
    let (_, a) = MgNet::build::<f32>(&TrainConfig { ual: false, ..quick(1) }).unwrap();
    assert_eq!(a.param_count(), full);
}

#[test]
fn checkpoint_mismatches_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick(1);
    let (_, store) = MgNet::build::<f32>(&cfg).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &store, &cfg, 0, &[]).unwrap();
    load_checkpoint::<f32>(&path).unwrap();
    // Stored f32 values widen to f64 exactly.
    let wide = load_checkpoint::<f64>(&path).unwrap();
    let (name, v) = store.params().next().unwrap();
    assert_eq!(wide.store.get(name).unwrap(), &v.value().cast::<f64>());

    let mut bytes = std::fs::read(&path).unwrap();
    bytes[8] = 99;
    let bumped = dir.path().join("v.ckpt");
    std::fs::write(&bumped, &bytes).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&bumped), Err(Error::CheckpointVersion { found: 99, .. })));

    let garbage = dir.path().join("g.ckpt");
    std::fs::write(&garbage, b"not a checkpoint at all").unwrap();
    assert!(load_checkpoint::<f32>(&garbage).is_err());

    // A snapshot whose architecture differs from the stored tensors.
    let other = TrainConfig { ppg: false, ..cfg.clone() };
    let wrong = dir.path().join("w.ckpt");
    save_checkpoint(&wrong, &store, &other, 0, &[]).unwrap();
    assert!(load_checkpoint::<f32>(&wrong).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights_unchanged() {
    let cfg = quick(1);
    let (net, mut store) = MgNet::build::<f64>(&cfg).unwrap();
    let before: Vec<Tensor<f64>> = store.params().map(|(_, v)| v.value().clone()).collect();
    let x = mgnet::Var::constant(Tensor::<f64>::full(&[1, 3, 64, 64], 0.3));
    let ctx = mgnet::nn::Ctx::new(&store, mgnet::nn::Mode::TRAIN);
    net.forward(&ctx, &x).unwrap().logits.sum().backward();
    assert!(grad_norm(&store) > 0.0);
    Sgd::new(0.9, 0.0).step(&mut store, 0.0);
    let after: Vec<Tensor<f64>> = store.params().map(|(_, v)| v.value().clone()).collect();
    assert_eq!(before, after);
}
