use skillfuse::bench::{generate_stream, StreamSpec, TaskStream};
use skillfuse::driver::{run_continual, ContinualConfig, Strategy};
use skillfuse::identification::TrainConfig;
use skillfuse::metrics::{metric_ap, metric_bwt};
use skillfuse::RunOutput;

fn stream(seed: u64, tasks: usize, overlap: f64, n_train: usize) -> TaskStream {
    generate_stream(&StreamSpec { tasks, overlap, n_train, n_val: 20, n_test: 200, seed, ..Default::default() }).unwrap()
}

fn config(strategy: Strategy, seed: u64) -> ContinualConfig {
    ContinualConfig { strategy, seed, train: TrainConfig { epochs: 4, ..Default::default() }, ..Default::default() }
}

fn run(s: &TaskStream, strategy: Strategy, seed: u64) -> RunOutput {
    run_continual(s, &config(strategy, seed)).unwrap()
}

#[test]
fn single_task_run_is_the_trained_model() {
    let s = stream(1, 1, 0.3, 300);
    let kif = run(&s, Strategy::KifAdaptive, 1);
    assert!(kif.fusion.is_empty());
    assert_eq!(kif.model, kif.history[0].trained);
    assert_eq!(kif.eval.tasks(), 1);
    assert_eq!(metric_ap(&kif.eval).unwrap(), kif.eval.get(1, 1).unwrap());
    let seq = run(&s, Strategy::Seq, 1);
    assert_eq!(seq.model, kif.model);
    assert_eq!(seq.eval, kif.eval);
    let stat = run(&s, Strategy::KifStatic, 1);
    assert_eq!(stat.model, kif.model);
}

#[test]
fn tasks_warm_start_from_the_persisted_model_and_base_stays_frozen() {
    let s = stream(2, 3, 0.3, 200);
    for strategy in Strategy::ALL {
        let out = run(&s, strategy, 2);
        let base = out.history[0].start.base_fingerprint();
        for k in 1..out.history.len() {
            assert_eq!(out.history[k].start, out.history[k - 1].persisted, "{strategy} task {k}");
        }
        for snap in &out.history {
            assert_eq!(snap.trained.base_fingerprint(), base);
            assert_eq!(snap.persisted.base_fingerprint(), base);
        }
        assert_eq!(&out.model, &out.history.last().unwrap().persisted);
        for (i, j, v) in out.eval.entries() {
            assert!((0.0..=1.0).contains(&v), "{strategy} a[{i}][{j}] = {v}");
        }
        assert_eq!(out.eval.entries().len(), 9);
    }
}

#[test]
fn repeating_a_task_does_not_forget_it() {
    let base = stream(3, 1, 0.3, 400);
    let twice = TaskStream { tasks: vec![base.tasks[0].clone(), base.tasks[0].clone()], ..base.clone() };
    let out = run(&twice, Strategy::KifAdaptive, 3);
    let (a11, a21) = (out.eval.get(1, 1).unwrap(), out.eval.get(2, 1).unwrap());
    assert!(a21 >= a11 - 0.02, "{a11} -> {a21}");
}

#[test]
fn runs_are_reproducible() {
    let s = stream(4, 3, 0.3, 200);
    for strategy in [Strategy::KifAdaptive, Strategy::KifM, Strategy::Ema] {
        let (a, b) = (run(&s, strategy, 4), run(&s, strategy, 4));
        assert_eq!(a.model, b.model);
        assert_eq!(a.eval, b.eval);
        assert_eq!(a.scores, b.scores);
        assert_eq!(a.fusion, b.fusion);
    }
    let c = run(&s, Strategy::KifAdaptive, 5);
    assert_ne!(c.model, run(&s, Strategy::KifAdaptive, 4).model);
}

#[test]
fn sequential_baseline_forgets_on_disjoint_tasks() {
    let mut bwt = 0.0;
    for seed in 0..3 {
        let out = run(&stream(seed, 4, 0.0, 400), Strategy::Seq, seed);
        bwt += metric_bwt(&out.eval).unwrap() / 3.0;
    }
    assert!(bwt < 0.0, "{bwt}");
}

#[test]
fn shared_structure_reduces_forgetting() {
    let mean_bwt = |overlap: f64| {
        (0..3)
            .map(|seed| metric_bwt(&run(&stream(seed, 4, overlap, 400), Strategy::Seq, seed).eval).unwrap())
            .sum::<f64>()
            / 3.0
    };
    let (shared, disjoint) = (mean_bwt(1.0), mean_bwt(0.0));
    assert!(shared >= -0.02, "{shared}");
    assert!(shared > disjoint, "{shared} vs {disjoint}");
}

#[test]
fn replay_memory_sizes_round_up() {
    let s = stream(6, 3, 0.3, 333);
    let mut cfg = config(Strategy::KifM, 6);
    cfg.memory_fraction = 0.05;
    cfg.train.epochs = 1;
    let out = run_continual::<f64>(&s, &cfg).unwrap();
    assert_eq!(out.memory_sizes, vec![17, 17, 17]);
    let seq = run_continual::<f64>(&s, &ContinualConfig { strategy: Strategy::Seq, ..cfg }).unwrap();
    assert!(seq.memory_sizes.is_empty());
}

#[test]
fn full_memory_is_at_least_as_good_as_no_memory() {
    let (mut with, mut without) = (0.0, 0.0);
    for seed in 0..5 {
        let s = stream(seed, 4, 0.3, 200);
        let mut cfg = config(Strategy::KifLoraM, seed);
        cfg.memory_fraction = 1.0;
        with += metric_ap(&run_continual::<f64>(&s, &cfg).unwrap().eval).unwrap();
        without += metric_ap(&run(&s, Strategy::KifAdaptive, seed).eval).unwrap();
    }
    assert!(with >= without, "{} vs {}", with / 5.0, without / 5.0);
}

#[test]
fn single_precision_run_completes() {
    let s = stream(7, 2, 0.3, 200);
    let out = run_continual::<f32>(&s, &config(Strategy::KifAdaptive, 7)).unwrap();
    let ap = metric_ap(&out.eval).unwrap();
    assert!(ap.is_finite() && ap > 0.25, "{ap}");
    let wide = run(&s, Strategy::KifAdaptive, 7);
    assert!((ap as f64 - metric_ap(&wide.eval).unwrap()).abs() < 0.1);
}

#[test]
fn replay_strategies_reject_empty_memory() {
    let s = stream(8, 2, 0.3, 50);
    let mut cfg = config(Strategy::ReplayOnly, 8);
    cfg.memory_fraction = 0.0;
    assert!(run_continual::<f64>(&s, &cfg).is_err());
    let empty = TaskStream { tasks: Vec::new(), ..s };
    assert!(run_continual::<f64>(&empty, &config(Strategy::Seq, 8)).is_err());
}
