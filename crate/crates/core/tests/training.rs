use labelprop::datasets::render_sequence;
use labelprop::trainer::{evaluate, train};
use labelprop::{Exec, Frame, LabelMap, SynthConfig, TinySegModel, TrainConfig, TrainSample};

fn data() -> (Vec<TrainSample>, Vec<(Frame, LabelMap)>) {
    let cfg = SynthConfig::default();
    let train_set = (0..20)
        .map(|i| {
            let s = render_sequence(&cfg, i).unwrap();
            TrainSample::gt(s.frames[0].clone(), s.labels[0].clone()).unwrap()
        })
        .collect();
    let val = (1000..1008)
        .flat_map(|i| {
            let s = render_sequence(&cfg, i).unwrap();
            s.frames.into_iter().zip(s.labels)
        })
        .collect();
    (train_set, val)
}

#[test]
fn ground_truth_only_training_reaches_baseline() {
    let (train_set, val) = data();
    let cfg = TrainConfig::default();
    let model = TinySegModel::new(cfg.shape(4), cfg.init_seed).unwrap();
    let out = train(model, &train_set, &val, &cfg, Exec::default()).unwrap();
    let miou = evaluate(&out.model, &val, Exec::default()).unwrap().mean_iou().unwrap();
    assert!(miou >= 0.8, "val mIoU {miou}");
    assert_eq!(out.log.len(), cfg.epochs);
    assert_eq!(out.log.last().unwrap().step, (cfg.epochs * train_set.len()) as u64);
}

#[test]
fn training_is_reproducible_across_executors() {
    let (train_set, val) = data();
    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    let run = |exec| {
        let model = TinySegModel::new(cfg.shape(4), 1).unwrap();
        train(model, &train_set[..6], &val[..4], &cfg, exec).unwrap()
    };
    let (a, b) = (run(Exec::Sequential), run(Exec::Parallel));
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log, b.log);
}
