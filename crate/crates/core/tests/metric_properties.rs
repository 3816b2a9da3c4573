use dualprompt::data::LabelMatrix;
use dualprompt::metrics::{average_precision, classwise_overall_metrics, topk_metrics};
use dualprompt::rng::seeded;
use dualprompt::scoring::class_probability;
use proptest::prelude::*;
use rand::Rng as _;

fn label() -> impl Strategy<Value = i8> {
    prop_oneof![Just(1i8), Just(-1i8), Just(0i8)]
}

proptest! {
    #[test]
    fn ap_ignores_strictly_increasing_transforms(
        cells in prop::collection::vec((-3.0f64..3.0, label()), 1..40),
    ) {
        let (scores, labels): (Vec<f64>, Vec<i8>) = cells.into_iter().unzip();
        let warped: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 5.0).collect();
        prop_assert_eq!(
            average_precision(&scores, &labels).unwrap(),
            average_precision(&warped, &labels).unwrap()
        );
    }

    #[test]
    fn threshold_metrics_are_bounded(
        rows in prop::collection::vec(prop::collection::vec((label(), any::<bool>()), 4), 1..12),
    ) {
        let truth: Vec<Vec<i8>> = rows.iter().map(|r| r.iter().map(|c| c.0).collect()).collect();
        let pred: Vec<Vec<i8>> = rows.iter().map(|r| r.iter().map(|c| if c.1 { 1 } else { -1 }).collect()).collect();
        let t = classwise_overall_metrics(
            &LabelMatrix::from_rows(&pred).unwrap(),
            &LabelMatrix::from_rows(&truth).unwrap(),
        ).unwrap();
        for (p, r, f) in [(t.cp, t.cr, t.cf1), (t.op, t.or, t.of1)] {
            for v in [p, r, f] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(f <= 2.0 * p.min(r) + 1e-15);
        }
    }

    #[test]
    fn topk_is_bounded_and_full_k_recalls_everything(
        rows in prop::collection::vec(prop::collection::vec((label(), 0.0f64..1.0), 5), 1..10),
        k in 1usize..=5,
    ) {
        let truth = LabelMatrix::from_rows(&rows.iter().map(|r| r.iter().map(|c| c.0).collect()).collect::<Vec<_>>()).unwrap();
        let scores: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|c| c.1).collect()).collect();
        let t = topk_metrics(&scores, &truth, k).unwrap();
        for v in [t.precision, t.recall, t.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(t.f1 <= 2.0 * t.precision.min(t.recall) + 1e-15);
        let full = topk_metrics(&scores, &truth, 5).unwrap();
        prop_assert_eq!(full.hits, full.truth_positives);
        prop_assert_eq!(full.recall, if full.truth_positives > 0 { 1.0 } else { 0.0 });
    }

    #[test]
    fn probability_and_margin_rank_alike(a in -0.2f64..0.2, b in -0.2f64..0.2, c in -0.2f64..0.2, d in -0.2f64..0.2) {
        // away from saturation p is a strictly increasing function of S+ - S-
        let tau = 0.05;
        let (m1, m2) = (a - b, c - d);
        let (p1, p2) = (class_probability(a, b, tau), class_probability(c, d, tau));
        if m1 > m2 {
            prop_assert!(p1 >= p2);
        } else if m1 < m2 {
            prop_assert!(p1 <= p2);
        }
    }
}

#[test]
fn equal_scores_pick_the_lowest_classes() {
    let truth = LabelMatrix::from_rows(&[vec![1, 1, -1, -1, 1]]).unwrap();
    let t = topk_metrics(&[vec![0.5; 5]], &truth, 3).unwrap();
    assert_eq!(t.hits, 2);
}

#[test]
fn hand_counted_examples() {
    let t = topk_metrics(
        &[vec![0.9, 0.8, 0.7, 0.1]],
        &LabelMatrix::from_rows(&[vec![1, 1, -1, -1]]).unwrap(),
        3,
    )
    .unwrap();
    assert_eq!((t.precision, t.recall), (2.0 / 3.0, 1.0));
    assert!((t.f1 - 0.8).abs() < 1e-15);

    let pred = LabelMatrix::from_rows(&[vec![1, 1], vec![-1, 1]]).unwrap();
    let truth = LabelMatrix::from_rows(&[vec![1, -1], vec![-1, 1]]).unwrap();
    let m = classwise_overall_metrics(&pred, &truth).unwrap();
    assert_eq!((m.cp, m.op, m.cr, m.or), (0.75, 2.0 / 3.0, 1.0, 1.0));

    let none = LabelMatrix::from_rows(&[vec![-1, -1], vec![-1, -1]]).unwrap();
    let m = classwise_overall_metrics(&none, &truth).unwrap();
    assert_eq!((m.cr, m.or), (0.0, 0.0));
}

/// Random scores on balanced truth: mAP stays within 3 sigma of the
/// positive fraction, sigma estimated from the 20 runs themselves.
#[test]
fn random_scores_hit_the_analytic_baseline() {
    let (n, m) = (400, 10);
    let mut rng = seeded(77);
    let rows: Vec<Vec<i8>> = (0..n)
        .map(|_| (0..m).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect())
        .collect();
    let positives = rows.iter().flatten().filter(|&&y| y == 1).count() as f64 / (n * m) as f64;
    let maps: Vec<f64> = (0..20)
        .map(|s| {
            let mut r = seeded(1000 + s);
            let mut sum = 0.0;
            for c in 0..m {
                let scores: Vec<f64> = (0..n).map(|_| r.random()).collect();
                let labels: Vec<i8> = rows.iter().map(|row| row[c]).collect();
                sum += average_precision(&scores, &labels).unwrap().unwrap();
            }
            sum / m as f64
        })
        .collect();
    let mean = maps.iter().sum::<f64>() / 20.0;
    let sd = (maps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 19.0).sqrt();
    assert!(
        (mean - positives).abs() <= 3.0 * sd,
        "mean {mean}, baseline {positives}, sd {sd}"
    );
}
