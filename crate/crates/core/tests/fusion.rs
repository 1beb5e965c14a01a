use proptest::prelude::*;
use skillfuse::fusion::{adaptive_weights, fuse_models, CaseLabel, FusionPolicy, FusionStrategy};
use skillfuse::lora::{gaussian, ModelSpec};
use skillfuse::rng::{indexed_substream, Stream};
use skillfuse::units::{Granularity, Partition};
use skillfuse::{Model, UnitScores};

fn model(seed: u64, k: u64) -> Model {
    let spec = ModelSpec { input_dim: 8, hidden: vec![6], classes: 3, rank: 3, head_rank: 2, ..Default::default() };
    // same base for every k, different adapters
    let mut m: Model = Model::new(&spec, &mut indexed_substream(seed, Stream::Init, 0)).unwrap();
    let mut rng = indexed_substream(seed, Stream::Init, k + 1);
    for l in 0..m.layers().len() {
        let (r, i) = m.layers()[l].a().shape();
        *m.layer_mut(l).a_mut() = gaussian(r, i, 1.0, &mut rng);
        let (o, r) = m.layers()[l].b().shape();
        *m.layer_mut(l).b_mut() = gaussian(o, r, 1.0, &mut rng);
    }
    m
}

fn scores(p: &Partition, values: &[f64], task: usize) -> UnitScores {
    UnitScores::new(task, p.units().to_vec(), values[..p.len()].to_vec()).unwrap()
}

fn policy(strategy: FusionStrategy) -> FusionPolicy {
    FusionPolicy::new(strategy)
}

const ALL: [FusionStrategy; 4] = [
    FusionStrategy::StaticWeighted,
    FusionStrategy::AdaptiveWeighted,
    FusionStrategy::CoarseAverage,
    FusionStrategy::EmaAverage,
];

/// Quantile threshold computed independently of the library.
fn oracle_flags(s: &[f64], q: f64) -> Vec<bool> {
    let mut v = s.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let delta = v[lo] + (pos - lo as f64) * (v[hi] - v[lo]);
    s.iter().map(|&x| x > delta).collect()
}

fn granularity(rank1: bool) -> Granularity {
    if rank1 {
        Granularity::LoraRank1
    } else {
        Granularity::MatrixLevel
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_coordinates_stay_between_parents(
        seed in 0u64..1000,
        rank1 in any::<bool>(),
        sp in prop::collection::vec(0.0f64..1.0, 16),
        sc in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let (a, b) = (model(seed, 0), model(seed, 1));
        let p = Partition::new(&a, granularity(rank1));
        for strategy in ALL {
            let (fused, report) = fuse_models(&a, &b, Some(&scores(&p, &sp, 1)), Some(&scores(&p, &sc, 2)), &p, &policy(strategy)).unwrap();
            for id in a.trainable_ids() {
                let (x, y, f) = (a.param(id).unwrap(), b.param(id).unwrap(), fused.param(id).unwrap());
                for k in 0..x.len() {
                    let (lo, hi) = (x.as_slice()[k].min(y.as_slice()[k]), x.as_slice()[k].max(y.as_slice()[k]));
                    let v = f.as_slice()[k];
                    prop_assert!(lo <= v && v <= hi);
                }
            }
            for (l, layer) in fused.layers().iter().enumerate() {
                prop_assert_eq!(layer.base(), b.layers()[l].base());
            }
            for u in &report.units {
                prop_assert!(u.w_prev >= 0.0 && u.w_prev <= 1.0);
                prop_assert_eq!(u.w_prev + u.w_cur, 1.0);
            }
        }
    }

    #[test]
    fn fusing_a_model_with_itself_is_identity(
        seed in 0u64..1000,
        rank1 in any::<bool>(),
        sp in prop::collection::vec(0.0f64..1.0, 16),
        sc in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let a = model(seed, 0);
        let p = Partition::new(&a, granularity(rank1));
        for strategy in ALL {
            let (fused, _) = fuse_models(&a, &a, Some(&scores(&p, &sp, 1)), Some(&scores(&p, &sc, 2)), &p, &policy(strategy)).unwrap();
            prop_assert_eq!(&fused, &a);
        }
    }

    #[test]
    fn each_unit_is_written_from_its_own_coordinates(
        seed in 0u64..1000,
        unit in 0usize..12,
        sp in prop::collection::vec(0.0f64..1.0, 16),
        sc in prop::collection::vec(0.0f64..1.0, 16),
    ) {
        let (a, b) = (model(seed, 0), model(seed, 1));
        let p = Partition::new(&a, Granularity::LoraRank1);
        let unit = unit % p.len();
        let mut b2 = b.clone();
        let id = p.units()[unit];
        let bumped: Vec<f64> = p.unit_values(id, &b).unwrap().iter().map(|v| v + 3.0).collect();
        p.set_unit_values(id, &mut b2, &bumped).unwrap();
        let (s1, s2) = (scores(&p, &sp, 1), scores(&p, &sc, 2));
        for strategy in ALL {
            let (f1, _) = fuse_models(&a, &b, Some(&s1), Some(&s2), &p, &policy(strategy)).unwrap();
            let (f2, _) = fuse_models(&a, &b2, Some(&s1), Some(&s2), &p, &policy(strategy)).unwrap();
            for (v, other) in p.units().iter().enumerate() {
                if v != unit {
                    prop_assert_eq!(p.unit_values(*other, &f1).unwrap(), p.unit_values(*other, &f2).unwrap());
                }
            }
        }
    }

    #[test]
    fn static_cases_follow_threshold_flags(
        seed in 0u64..1000,
        sp in prop::collection::vec(0.0f64..1.0, 16),
        sc in prop::collection::vec(0.0f64..1.0, 16),
        gamma in 0.0f64..1.0,
    ) {
        let (a, b) = (model(seed, 0), model(seed, 1));
        let p = Partition::new(&a, Granularity::LoraRank1);
        let pol = FusionPolicy { gamma, ..policy(FusionStrategy::StaticWeighted) };
        let (prev, cur) = (scores(&p, &sp, 1), scores(&p, &sc, 2));
        let (fused, report) = fuse_models(&a, &b, Some(&prev), Some(&cur), &p, &pol).unwrap();
        let fp = oracle_flags(prev.scores(), 0.8);
        let fc = oracle_flags(cur.scores(), 0.8);
        for (u, r) in report.units.iter().enumerate() {
            prop_assert_eq!(r.case, CaseLabel::from_flags(fp[u], fc[u]));
            let expect = match (fp[u], fc[u]) {
                (true, true) => gamma,
                (true, false) => 1.0,
                (false, true) => 0.0,
                (false, false) => 0.5,
            };
            prop_assert_eq!(r.w_prev, expect);
            let id = p.units()[u];
            match (fp[u], fc[u]) {
                (true, false) => prop_assert_eq!(p.unit_values(id, &fused).unwrap(), p.unit_values(id, &a).unwrap()),
                (false, true) => prop_assert_eq!(p.unit_values(id, &fused).unwrap(), p.unit_values(id, &b).unwrap()),
                _ => {}
            }
        }
    }

    #[test]
    fn adaptive_weights_are_shift_invariant(
        ip in -5.0f64..5.0,
        ic in -5.0f64..5.0,
        shift in -100.0f64..100.0,
        tau in 0.01f64..10.0,
    ) {
        let (p1, c1) = adaptive_weights(ip, ic, tau);
        let (p2, c2) = adaptive_weights(ip + shift, ic + shift, tau);
        prop_assert!((p1 - p2).abs() <= 1e-8);
        prop_assert!((c1 - c2).abs() <= 1e-8);
        prop_assert!((p1 + c1 - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn small_temperature_selects_the_more_important_side(
        ip in 0.0f64..1.0,
        gap in 0.01f64..1.0,
    ) {
        let (w_prev, w_cur) = adaptive_weights(ip + gap, ip, 1e-4);
        prop_assert!(w_prev >= 1.0 - 1e-8 && w_cur <= 1e-8);
        let (w_prev, w_cur) = adaptive_weights(ip, ip + gap, 1e-4);
        prop_assert!(w_cur >= 1.0 - 1e-8 && w_prev <= 1e-8);
    }
}

#[test]
fn equal_scores_average_halfway() {
    let (a, b) = (model(1, 0), model(1, 1));
    let p = Partition::new(&a, Granularity::LoraRank1);
    let s = scores(&p, &[0.4; 16], 1);
    let (fused, report) = fuse_models(&a, &b, Some(&s), Some(&s), &p, &policy(FusionStrategy::AdaptiveWeighted)).unwrap();
    assert!(report.units.iter().all(|u| u.w_prev == 0.5));
    let (coarse, _) = fuse_models(&a, &b, None, None, &p, &policy(FusionStrategy::CoarseAverage)).unwrap();
    for id in a.trainable_ids() {
        assert!(fused.param(id).unwrap().max_abs_diff(coarse.param(id).unwrap()) <= 1e-15);
        let mid: Vec<f64> = a.param(id).unwrap().as_slice().iter().zip(b.param(id).unwrap().as_slice()).map(|(x, y)| 0.5 * (x + y)).collect();
        for (f, m) in coarse.param(id).unwrap().as_slice().iter().zip(&mid) {
            assert!((f - m).abs() <= 1e-15);
        }
    }
}

#[test]
fn ema_strategy_keeps_the_current_model() {
    let (a, b) = (model(2, 0), model(2, 1));
    let p = Partition::new(&a, Granularity::LoraRank1);
    let (fused, report) = fuse_models(&a, &b, None, None, &p, &policy(FusionStrategy::EmaAverage)).unwrap();
    assert_eq!(fused, b);
    assert!(report.units.iter().all(|u| u.case == CaseLabel::Running));
}

#[test]
fn kif_fusion_requires_scores() {
    let (a, b) = (model(3, 0), model(3, 1));
    let p = Partition::new(&a, Granularity::LoraRank1);
    assert!(fuse_models(&a, &b, None, None, &p, &policy(FusionStrategy::AdaptiveWeighted)).is_err());
    assert!(fuse_models(&a, &b, None, None, &p, &policy(FusionStrategy::StaticWeighted)).is_err());
}
