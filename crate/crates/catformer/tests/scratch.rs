use catformer::backbone::ModelConfig;
use catformer::cil::{run_protocol, ProtocolOptions, RunHooks, TrainConfig};
use catformer::data::{make_splits, synth_train_test, InputKind, SplitSpec, SyntheticSpec, nearest_centroid_accuracy};
use catformer::metrics::VecSink;

#[test]
#[ignore]
fn desk_scale_probe() {
    let t0 = std::time::Instant::now();
    let spec = SyntheticSpec {
        classes: 10,
        kind: InputKind::Image { channels: 1, height: 16, width: 16 },
        margin: 8.0,
        noise_sigma: 1.0,
        samples_per_class: 64,
        seed: 7,
    };
    let (train, test) = synth_train_test(&spec, 32).unwrap();
    let nc = nearest_centroid_accuracy(&train, &test, 10);
    println!("nearest-centroid oracle: {nc:.4}");
    let seq = make_splits(&train, &test, &SplitSpec::identity(10, 5)).unwrap();
    println!("data built in {:?}", t0.elapsed());

    let cfg = ModelConfig::desk_default();
    let tcfg = TrainConfig { seed: 7, ..TrainConfig::default() };
    let mut sink = VecSink::default();
    let mut hooks = RunHooks::default();
    let t1 = std::time::Instant::now();
    let (_model, report) = run_protocol(cfg, &tcfg, &seq, &ProtocolOptions::default(), &mut sink, &mut hooks).unwrap();
    println!("protocol ran in {:?}", t1.elapsed());
    for (k, em) in report.evals.iter().enumerate() {
        println!(
            "after task {k}: routed {:.4} oracle {:.4} routing {:.4}",
            em.overall_routed, em.overall_oracle, em.routing_accuracy
        );
    }
    for r in &sink.records {
        if r.event == catformer::metrics::EventKind::TaskDone {
            println!("task {} final train acc {:.4} loss {:.4}", r.task, r.acc, r.loss);
        }
    }
}
