mod common;

use common::{brute_assignment, naive_metrics, pair_cost, random_direction, random_frames, rng};
use proptest::prelude::*;
use seldlab::metrics::{angular_distance, e_seld, hungarian, Accumulator, Instance};
use seldlab::synth::N_CLASSES;

fn accumulate(frames: &[(Vec<Instance>, Vec<Instance>)]) -> Accumulator {
    let mut acc = Accumulator::new(N_CLASSES);
    for (r, p) in frames {
        acc.push(r, p).unwrap();
    }
    acc
}

#[test]
fn thousand_frames_match_exhaustive_recount() {
    let frames = random_frames(1000, N_CLASSES, 4, 77);
    for (refs, preds) in &frames {
        for c in 0..N_CLASSES {
            let r: Vec<_> = refs.iter().filter(|i| i.class == c).collect();
            let p: Vec<_> = preds.iter().filter(|i| i.class == c).collect();
            let cost: Vec<Vec<f64>> = r
                .iter()
                .map(|a| p.iter().map(|b| angular_distance(a.doa, b.doa).unwrap()).collect())
                .collect();
            let (best, _) = brute_assignment(&cost);
            assert_eq!(pair_cost(&cost, &hungarian(&cost)), best);
        }
    }
    let report = accumulate(&frames).finalize().unwrap();
    let (er, f, le, lr) = naive_metrics(&frames, N_CLASSES);
    assert!((report.er20 - er).abs() < 1e-12, "{} vs {er}", report.er20);
    assert!((report.f20 - f).abs() < 1e-12);
    assert!((report.le_cd - le).abs() < 1e-9);
    assert!((report.lr_cd - lr).abs() < 1e-12);
}

#[test]
fn perfect_predictions_score_zero() {
    let frames: Vec<_> = random_frames(50, N_CLASSES, 3, 5).into_iter().map(|(r, _)| (r.clone(), r)).collect();
    let rep = accumulate(&frames).finalize().unwrap();
    assert_eq!((rep.er20, rep.f20, rep.lr_cd), (0.0, 1.0, 1.0));
    assert!(rep.le_cd < 1e-6 && rep.e_seld < 1e-8);
}

#[test]
fn unmatched_class_scores_180_degrees() {
    let mut acc = Accumulator::new(N_CLASSES);
    let d = random_direction(&mut rng(1));
    acc.push(&[Instance { class: 2, doa: d }], &[]).unwrap();
    let rep = acc.finalize().unwrap();
    assert_eq!((rep.er20, rep.f20, rep.le_cd, rep.lr_cd), (1.0, 0.0, 180.0, 0.0));
    assert_eq!(rep.e_seld, 1.0);
}

#[test]
fn empty_reference_set_is_an_error() {
    assert!(matches!(Accumulator::new(3).finalize(), Err(seldlab::Error::NoReferenceEvents)));
}

#[test]
fn e_seld_rejects_out_of_range_localization_error() {
    assert!(e_seld(0.5, 0.5, 181.0, 0.5).is_err());
    assert!(e_seld(0.5, 0.5, -1.0, 0.5).is_err());
    assert_eq!(e_seld(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
}

fn cost_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| prop::collection::vec(prop::collection::vec(0.0f64..180.0, c), r))
}

fn unit() -> impl Strategy<Value = [f64; 3]> {
    (-180.0f64..180.0, -89.0f64..89.0).prop_map(|(a, e)| seldlab::synth::doa_vector(a, e))
}

proptest! {
    #[test]
    fn hungarian_equals_enumeration(cost in cost_matrix()) {
        let pairs = hungarian(&cost);
        let (best, _) = brute_assignment(&cost);
        prop_assert_eq!(pairs.len(), cost.len().min(cost[0].len()));
        prop_assert!((pair_cost(&cost, &pairs) - best).abs() <= 1e-9 * best.max(1.0));
    }

    #[test]
    fn angular_distance_is_symmetric_and_scale_free(u in unit(), v in unit(), s in 0.1f64..10.0) {
        let d = angular_distance(u, v).unwrap();
        prop_assert!((d - angular_distance(v, u).unwrap()).abs() < 1e-12);
        prop_assert!((d - angular_distance([u[0] * s, u[1] * s, u[2] * s], v).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=180.0).contains(&d));
    }

    #[test]
    fn merge_order_does_not_matter(seed in 0u64..1000, cut in 1usize..39) {
        let frames = random_frames(40, N_CLASSES, 3, seed);
        let whole = accumulate(&frames);
        let mut a = accumulate(&frames[..cut]);
        let b = accumulate(&frames[cut..]);
        let mut b2 = b.clone();
        a.merge(&b).unwrap();
        b2.merge(&accumulate(&frames[..cut])).unwrap();
        prop_assert_eq!(a.substitutions, whole.substitutions);
        prop_assert_eq!(b2.insertions, whole.insertions);
        if whole.n_ref > 0 {
            let (x, y, z) = (a.finalize().unwrap(), b2.finalize().unwrap(), whole.finalize().unwrap());
            prop_assert!((x.e_seld - z.e_seld).abs() < 1e-12 && (y.e_seld - z.e_seld).abs() < 1e-12);
        }
    }

    #[test]
    fn extra_false_positive_never_helps(seed in 0u64..1000, class in 0usize..N_CLASSES) {
        let frames = random_frames(20, N_CLASSES, 3, seed);
        let base = accumulate(&frames);
        prop_assume!(base.n_ref > 0);
        // a same-class extra could be matched and turn a miss into a hit
        prop_assume!(frames[0].0.iter().all(|r| r.class != class));
        let mut worse = frames.clone();
        let far = random_direction(&mut rng(seed + 1));
        worse[0].1.push(Instance { class, doa: far });
        let (a, b) = (base.finalize().unwrap(), accumulate(&worse).finalize().unwrap());
        prop_assert!(b.er20 >= a.er20);
    }

    #[test]
    fn swapping_prediction_order_is_invariant(seed in 0u64..1000) {
        let frames = random_frames(20, N_CLASSES, 4, seed);
        let reversed: Vec<_> = frames.iter().map(|(r, p)| {
            let mut r = r.clone();
            let mut p = p.clone();
            r.reverse();
            p.reverse();
            (r, p)
        }).collect();
        let (a, b) = (accumulate(&frames), accumulate(&reversed));
        prop_assert_eq!((a.substitutions, a.deletions, a.insertions), (b.substitutions, b.deletions, b.insertions));
        for (x, y) in a.per_class.iter().zip(&b.per_class) {
            prop_assert_eq!((x.tp, x.fp, x.fn_, x.n_matched), (y.tp, y.fp, y.fn_, y.n_matched));
            prop_assert!((x.le_sum - y.le_sum).abs() < 1e-9);
        }
    }
}
