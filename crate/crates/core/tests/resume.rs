use centermask::config::RunConfig;
use centermask::pipeline::{Trainer, TrainingData};

fn small_run() -> RunConfig {
    let mut run = RunConfig::default();
    run.model.input_size = (64, 64);
    run.data.scene.canvas = (64, 64);
    run.data.train_scenes = 16;
    run.optim.batch_size = 2;
    run.optim.steps = 6;
    run.validate().unwrap();
    run
}

#[test]
fn resumed_run_continues_the_same_trajectory() {
    let run = small_run();
    let data = || TrainingData::from_run(&run).unwrap();

    let mut straight = Trainer::new(run.clone(), data()).unwrap();
    let mut losses = Vec::new();
    while !straight.done() {
        losses.push(straight.step().unwrap().loss.l_seg);
    }

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("mid.ckpt");
    let mut first = Trainer::new(run.clone(), data()).unwrap();
    for _ in 0..3 {
        first.step().unwrap();
    }
    first.save(&ckpt).unwrap();
    drop(first);

    let mut resumed = Trainer::resume(&ckpt, data()).unwrap();
    assert_eq!(resumed.state.step, 3);
    let mut tail = Vec::new();
    while !resumed.done() {
        tail.push(resumed.step().unwrap().loss.l_seg);
    }
    assert_eq!(tail.len(), 3);
    for (a, b) in tail.iter().zip(&losses[3..]) {
        assert!((a - b).abs() < 1e-6, "resumed loss {a} vs uninterrupted {b}");
    }
    for (a, b) in resumed.params().tensors().iter().zip(straight.params().tensors()) {
        assert_eq!(a, b);
    }
}
