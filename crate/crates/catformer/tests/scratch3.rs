use catformer::backbone::ModelConfig;
use catformer::cil::{run_protocol, ProtocolOptions, RunHooks, TrainConfig};
use catformer::data::*;
use catformer::dtlif::ActiveTask;
use catformer::metrics::VecSink;

#[test]
#[ignore]
fn feature_separability() {
    let spec = SyntheticSpec {
        classes: 10,
        kind: InputKind::Image { channels: 1, height: 16, width: 16 },
        margin: 8.0,
        noise_sigma: 1.0,
        samples_per_class: 64,
        seed: 7,
    };
    let (train, test) = synth_train_test(&spec, 32).unwrap();
    let seq = make_splits(&train, &test, &SplitSpec::identity(10, 5)).unwrap();

    let cfg = ModelConfig::desk_default();
    let tcfg = TrainConfig { epochs_task0: 15, seed: 7, ..TrainConfig::default() };
    let mut sink = VecSink::default();
    let mut hooks = RunHooks::default();
    let (mut model, _report) = run_protocol(cfg, &tcfg, &seq, &ProtocolOptions::default(), &mut sink, &mut hooks).unwrap();

    // Per task: nearest-centroid on eval-mode features at the task's own thresholds.
    for task in &seq.tasks {
        let tr: Vec<&[f32]> = task.train.samples.iter().map(|s| s.as_slice()).collect();
        let te: Vec<&[f32]> = task.test.samples.iter().map(|s| s.as_slice()).collect();
        let ftr = model.features_at(ActiveTask::Task(task.id), &tr, task.train.kind).unwrap();
        let fte = model.features_at(ActiveTask::Task(task.id), &te, task.test.kind).unwrap();
        let remap = |ls: &[usize]| -> Vec<usize> { ls.iter().map(|&g| task.local_label(g).unwrap()).collect() };
        let dtr = Dataset { kind: InputKind::Image { channels: 1, height: 1, width: 64 }, samples: ftr, labels: remap(&task.train.labels) };
        let dte = Dataset { kind: dtr.kind, samples: fte, labels: remap(&task.test.labels) };
        let acc = nearest_centroid_accuracy(&dtr, &dte, 2);
        // Also at BASE thresholds:
        let ftrb = model.features_at(ActiveTask::Base, &tr, task.train.kind).unwrap();
        let fteb = model.features_at(ActiveTask::Base, &te, task.test.kind).unwrap();
        let dtrb = Dataset { kind: dtr.kind, samples: ftrb, labels: dtr.labels.clone() };
        let dteb = Dataset { kind: dtr.kind, samples: fteb, labels: dte.labels.clone() };
        let accb = nearest_centroid_accuracy(&dtrb, &dteb, 2);
        println!("task {}: NC on own-threshold features {:.3}, on BASE features {:.3}", task.id, acc, accb);
    }

    // Task-id separability of BASE features (routing signal).
    let mut all_tr = Vec::new();
    let mut all_lab = Vec::new();
    let mut all_te = Vec::new();
    let mut all_te_lab = Vec::new();
    for task in &seq.tasks {
        let tr: Vec<&[f32]> = task.train.samples.iter().map(|s| s.as_slice()).collect();
        let te: Vec<&[f32]> = task.test.samples.iter().map(|s| s.as_slice()).collect();
        all_tr.extend(model.features_at(ActiveTask::Base, &tr, task.train.kind).unwrap());
        all_lab.extend(std::iter::repeat(task.id as usize).take(tr.len()));
        all_te.extend(model.features_at(ActiveTask::Base, &te, task.test.kind).unwrap());
        all_te_lab.extend(std::iter::repeat(task.id as usize).take(te.len()));
    }
    let k = InputKind::Image { channels: 1, height: 1, width: 64 };
    let dtr = Dataset { kind: k, samples: all_tr, labels: all_lab };
    let dte = Dataset { kind: k, samples: all_te, labels: all_te_lab };
    println!("task-id NC on BASE features: {:.3}", nearest_centroid_accuracy(&dtr, &dte, 5));
}
