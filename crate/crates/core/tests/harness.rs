use foresight::harness::checkpoint::{self, CheckpointError};
use foresight::harness::train::{CHECKPOINT_FILE, METRICS_FILE, TIMING_FILE};
use foresight::harness::{run_train, Config, MetricRecord, Trainer};

fn small(seed: u64) -> Config {
    let mut cfg = Config::default();
    for spec in [
        "steps=500",
        "prefill=100",
        "train_ratio=32",
        "batch_size=4",
        "batch_length=8",
        "time_limit=60",
        "maze_width=5",
        "maze_height=5",
        "dyn_hidden=16",
        "dyn_deter=16",
        "dyn_stoch=4",
        "dyn_discrete=4",
        "units=16",
        "imag_horizon=4",
        "plan_max_horizon=4",
        "plan_choices=8",
        "num_cells=16",
        "num_epochs=2",
        "buffer_minimum=64",
        "plan_train_every=16",
        "seq_length=4",
    ] {
        cfg.apply_override(spec).unwrap();
    }
    cfg.seed = seed;
    cfg
}

fn step_of(r: &MetricRecord) -> u64 {
    match r {
        MetricRecord::Episode(e) => e.step,
        MetricRecord::Update(u) => u.step,
        MetricRecord::MetaUpdate(m) => m.step,
    }
}

#[test]
fn identical_config_and_seed_reproduce_the_metric_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_train(small(7), &a).unwrap();
    run_train(small(7), &b).unwrap();
    let read = |d: &std::path::Path| std::fs::read(d.join(METRICS_FILE)).unwrap();
    let stream = read(&a);
    assert!(!stream.is_empty());
    assert_eq!(stream, read(&b));
    let text = String::from_utf8(stream).unwrap();
    assert!(text.contains("\"kind\":\"episode\"") && text.contains("\"kind\":\"update\"") && text.contains("\"kind\":\"meta_update\""));
    // Planning-call timings go to their own file.
    assert!(!std::fs::read_to_string(a.join(TIMING_FILE)).unwrap().is_empty());

    run_train(small(8), &tmp.path().join("c")).unwrap();
    assert_ne!(read(&a), read(&tmp.path().join("c")));
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut straight = Trainer::new(small(3)).unwrap();
    straight.run_until(600).unwrap();

    let mut first = Trainer::new(small(3)).unwrap();
    first.run_until(500).unwrap();
    let path = tmp.path().join(CHECKPOINT_FILE);
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::resume(&path, None).unwrap();
    resumed.run_until(600).unwrap();

    let tail: Vec<&MetricRecord> = straight.records.iter().filter(|r| step_of(r) > 500).collect();
    assert!(!tail.is_empty());
    assert_eq!(tail, resumed.records.iter().collect::<Vec<_>>());
    assert!(resumed.state == straight.state, "trainer state diverged after resume");
}

#[test]
fn damaged_checkpoints_are_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small(1)).unwrap();
    t.run_until(20).unwrap();
    let path = tmp.path().join("ckpt.bin");
    t.save(&path).unwrap();
    let mut blob = std::fs::read(&path).unwrap();
    let mid = blob.len() / 2;
    blob[mid] ^= 0x10;
    std::fs::write(&path, &blob).unwrap();
    assert!(matches!(Trainer::resume(&path, None), Err(foresight::harness::HarnessError::Checkpoint(CheckpointError::CorruptBlob))));
    blob[mid] ^= 0x10;
    blob[8] = blob[8].wrapping_add(1);
    std::fs::write(&path, &blob).unwrap();
    assert!(matches!(checkpoint::load::<u8>(&path), Err(CheckpointError::VersionMismatch { .. })));
}
