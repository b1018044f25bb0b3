use tfclip::config::TrainConfig;
use tfclip::data::synth_generate;
use tfclip::numerics::LrSchedule;
use tfclip::train::Trainer;

/// Two identities, every batch holds the whole set and sampling has no
/// freedom left, so each step is a full-batch Adam step.
fn smoke() -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.data.identities = 2;
    c.data.tracklets_per_identity = 2;
    c.data.frames_per_tracklet = 4;
    c.model.classes = 2;
    c.p_ids = 2;
    c.k = 2;
    c.epochs = 20;
    c.flip_p = 0.0;
    c.erase_p = 0.0;
    c.schedule = LrSchedule {
        base_lr: 1e-4,
        warmup_epochs: 0,
        warmup_start_lr: 1e-4,
        decay_epochs: vec![],
        decay_factor: 1.0,
    };
    c
}

#[test]
fn smoke_loss_strictly_decreases() {
    let c = smoke();
    let splits = synth_generate(&c.data).unwrap();
    let mut t = Trainer::<f32>::new(c, &splits.train).unwrap();
    let mut losses = vec![];
    while !t.is_done() {
        losses.extend(t.run_epoch(&splits.train, |_| {}).unwrap().iter().map(|s| s.total));
    }
    assert_eq!(losses.len(), 20);
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn embeddings_do_not_depend_on_thread_count() {
    let c = TrainConfig::desk();
    let splits = synth_generate(&c.data).unwrap();
    let t = Trainer::<f32>::new(c, &splits.train).unwrap();
    let run = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| t.model.embed_dataset(&splits.test, 4).unwrap())
    };
    let (a, b) = (run(1), run(3));
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
}

#[test]
fn generation_does_not_depend_on_thread_count() {
    let c = TrainConfig::desk().data;
    let gen = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| synth_generate(&c).unwrap())
    };
    let (a, b) = (gen(1), gen(4));
    assert_eq!(a.train.frames.to_bytes(), b.train.frames.to_bytes());
    assert_eq!(a.test.manifest, b.test.manifest);
}

#[test]
fn reference_schedule_points() {
    let s = TrainConfig::paper_shape().schedule;
    assert_eq!(s.lr(0), 5e-7);
    assert!((s.lr(29) - 5e-6).abs() < 1e-18);
    assert!((s.lr(30) - 5e-7).abs() < 1e-18);
    assert!((s.lr(50) - 5e-8).abs() < 1e-19);
}
