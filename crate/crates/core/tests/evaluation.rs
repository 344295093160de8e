mod common;

use common::prediction;
use m2d::eval::{nms, recall_at, sort_predictions, tiou};

#[test]
fn nms_matches_brute_force_and_recall_matches_fixture() {
    common::checks::nms_and_recall().unwrap();
}

#[test]
fn tiou_matches_integer_ratio() {
    for a0 in 0..6i64 {
        for a1 in a0 + 1..8 {
            for b0 in 0..6i64 {
                for b1 in b0 + 1..8 {
                    let (i, u) = common::int_tiou((a0, a1), (b0, b1));
                    let got = tiou((a0 as f64, a1 as f64), (b0 as f64, b1 as f64)).unwrap();
                    assert_eq!(got, i as f64 / u as f64);
                }
            }
        }
    }
}

#[test]
fn degenerate_intervals_are_rejected() {
    assert!(tiou((1.0, 1.0), (0.0, 2.0)).is_err());
    assert!(tiou((0.0, f64::NAN), (0.0, 2.0)).is_err());
    assert!(nms(&[prediction(1.0, 1.0, 0.5)], 0.5).is_err());
    assert!(nms(&[], 1.0).is_err());
}

#[test]
fn oracle_predictions_give_perfect_recall() {
    let gts = vec![(0.0, 4.0), (2.5, 7.0), (1.0, 2.0)];
    let preds: Vec<_> = gts.iter().map(|&(s, e)| vec![prediction(s, e, 1.0)]).collect();
    for n in [1, 5] {
        for m in [0.3, 0.5, 0.7] {
            assert_eq!(recall_at(&preds, &gts, n, m).unwrap(), 1.0);
        }
    }
}

#[test]
fn ties_rank_by_start_then_length() {
    let mut p = vec![
        prediction(2.0, 5.0, 0.5),
        prediction(1.0, 9.0, 0.5),
        prediction(1.0, 3.0, 0.5),
        prediction(4.0, 5.0, 0.9),
    ];
    sort_predictions(&mut p);
    let order: Vec<_> = p.iter().map(|q| q.interval).collect();
    assert_eq!(order, vec![(4.0, 5.0), (1.0, 3.0), (1.0, 9.0), (2.0, 5.0)]);
}

#[test]
fn suppression_at_exact_threshold() {
    // tIoU of [0,4) and [2,6) is 2/6; of [0,4) and [0,2) is 0.5.
    let ranked = vec![prediction(0.0, 4.0, 0.9), prediction(0.0, 2.0, 0.8), prediction(2.0, 6.0, 0.7)];
    let kept = nms(&ranked, 0.5).unwrap();
    assert_eq!(kept.len(), 2);
    assert_eq!(kept[1].interval, (2.0, 6.0));
}
