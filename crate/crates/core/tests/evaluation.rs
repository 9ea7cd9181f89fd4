mod common;

use common::{mann_whitney_auc, random_scored};
use octnet::evaluation::{
    aggregate, confusion_metrics, evaluate_level, load_scores, optimal_cutoff, roc_and_auroc, roc_csv, save_scores,
    Level, ScoredSample,
};
use octnet::Rng;
use proptest::prelude::*;

fn samples(scores: &[f64], labels: &[u8]) -> Vec<ScoredSample> {
    scores
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&s, &l))| ScoredSample::image(&format!("p{i}"), &format!("s{i}"), 0, l, s))
        .collect()
}

/// Best (threshold, J) over every candidate threshold, counting directly;
/// ties go to the lowest threshold.
fn exhaustive_cutoff(scores: &[f64], labels: &[u8]) -> (f64, f64) {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(f64::NEG_INFINITY);
    candidates.push(f64::INFINITY);
    candidates.sort_by(f64::total_cmp);
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for t in candidates {
        let tp = scores.iter().zip(labels).filter(|(&s, &l)| l == 1 && s >= t).count() as f64;
        let tn = scores.iter().zip(labels).filter(|(&s, &l)| l == 0 && s < t).count() as f64;
        let j = tp / pos + tn / neg - 1.0;
        if j > best.1 + 1e-12 {
            best = (t, j);
        }
    }
    best
}

#[test]
fn trapezoid_auroc_matches_mann_whitney() {
    let mut rng = Rng::new(99);
    for _ in 0..200 {
        let (s, l) = random_scored(&mut rng, 50);
        let auc = roc_and_auroc(&samples(&s, &l)).unwrap().auroc;
        assert!((auc - mann_whitney_auc(&s, &l)).abs() < 1e-9);
    }
}

#[test]
fn hand_auroc_cases() {
    let auc = |s: &[f64], l: &[u8]| roc_and_auroc(&samples(s, l)).unwrap().auroc;
    assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]), 0.75);
    assert_eq!(auc(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1]), 1.0);
    assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]), 0.5);
    assert!(roc_and_auroc(&samples(&[0.2, 0.9], &[1, 1])).is_err());
}

#[test]
fn roc_points_cover_every_threshold_and_sensitivity_falls() {
    let mut rng = Rng::new(7);
    for _ in 0..50 {
        let (s, l) = random_scored(&mut rng, 40);
        let roc = roc_and_auroc(&samples(&s, &l)).unwrap();
        let mut distinct = s.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        assert_eq!(roc.points.len(), distinct.len() + 2);
        assert_eq!(roc.points[0].threshold, f64::NEG_INFINITY);
        assert_eq!(roc.points.last().unwrap().threshold, f64::INFINITY);
        for w in roc.points.windows(2) {
            assert!(w[0].threshold < w[1].threshold);
            assert!(w[0].sensitivity >= w[1].sensitivity);
            assert!(w[0].specificity <= w[1].specificity);
        }
    }
}

#[test]
fn youden_cutoff_matches_exhaustive_search() {
    let c = optimal_cutoff(&roc_and_auroc(&samples(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])).unwrap());
    assert_eq!(c.threshold, 0.35);
    assert_eq!((c.sensitivity, c.specificity), (1.0, 0.5));

    let mut rng = Rng::new(31);
    for _ in 0..200 {
        let (s, l) = random_scored(&mut rng, 50);
        let roc = roc_and_auroc(&samples(&s, &l)).unwrap();
        let c = optimal_cutoff(&roc);
        let (t, j) = exhaustive_cutoff(&s, &l);
        assert_eq!(c.threshold, t);
        assert!((c.youden_j - j).abs() < 1e-12);
        assert!(roc.points.iter().any(|p| p.sensitivity == c.sensitivity && p.specificity == c.specificity));
    }
}

#[test]
fn degenerate_cutoffs() {
    let c = optimal_cutoff(&roc_and_auroc(&samples(&[0.1, 0.2, 0.7, 0.9], &[0, 0, 1, 1])).unwrap());
    assert_eq!((c.youden_j, c.sensitivity, c.specificity), (1.0, 1.0, 1.0));
    let c = optimal_cutoff(&roc_and_auroc(&samples(&[0.4; 4], &[0, 0, 1, 1])).unwrap());
    assert_eq!(c.youden_j, 0.0);
}

#[test]
fn confusion_counts() {
    let m = confusion_metrics(&samples(&[0.9, 0.4, 0.6], &[1, 0, 0]), 0.5).unwrap();
    assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!((m.sensitivity, m.specificity), (1.0, 0.5));
    let m = confusion_metrics(&samples(&[1.0, 0.0, 0.0, 1.0], &[1, 0, 0, 1]), 0.5).unwrap();
    assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
    let m = confusion_metrics(&samples(&[0.0, 1.0, 1.0, 0.0], &[1, 0, 0, 1]), 0.5).unwrap();
    assert_eq!((m.accuracy, m.sensitivity, m.specificity), (0.0, 0.0, 0.0));
    // Probability exactly at the threshold counts as positive.
    let m = confusion_metrics(&samples(&[0.5, 0.49], &[1, 0]), 0.5).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert!(confusion_metrics(&samples(&[0.5], &[1]), 0.5).is_err());
}

#[test]
fn aggregation_uses_flat_means() {
    let imgs = vec![
        ScoredSample::image("P1", "S1", 0, 1, 0.2),
        ScoredSample::image("P1", "S1", 1, 1, 0.8),
        ScoredSample::image("P1", "S2", 0, 1, 0.6),
        ScoredSample::image("P2", "S3", 0, 0, 0.1),
    ];
    let mac = aggregate(&imgs, Level::Macula).unwrap();
    assert_eq!(mac.len(), 3);
    assert!((mac[0].prob - 0.5).abs() < 1e-15);
    let pat = aggregate(&imgs, Level::Patient).unwrap();
    assert_eq!(pat.len(), 2);
    assert!((pat[0].prob - 1.6 / 3.0).abs() < 1e-15);
    assert_eq!((pat[0].label, pat[1].label), (1, 0));

    let one_per_scan = samples(&[0.3, 0.7], &[0, 1]);
    let mac = aggregate(&one_per_scan, Level::Macula).unwrap();
    assert_eq!(mac.iter().map(|s| s.prob).collect::<Vec<_>>(), vec![0.3, 0.7]);
    assert_eq!(aggregate(&imgs, Level::Image).unwrap(), imgs);

    let mixed = vec![ScoredSample::image("P1", "S1", 0, 1, 0.2), ScoredSample::image("P1", "S1", 1, 0, 0.2)];
    assert!(aggregate(&mixed, Level::Macula).is_err());
}

#[test]
fn level_metrics_and_scores_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = Rng::new(12);
    let mut imgs = Vec::new();
    for p in 0..6 {
        for i in 0..11 {
            let label = (p % 2) as u8;
            imgs.push(ScoredSample::image(&format!("P{p}"), &format!("P{p}S1"), 25 + i, label, rng.next_f64()));
        }
    }
    let path = dir.path().join("scores.csv");
    save_scores(&path, &imgs).unwrap();
    assert_eq!(load_scores(&path).unwrap(), imgs);
    for level in Level::ALL {
        let (m, roc) = evaluate_level(&imgs, level).unwrap();
        assert_eq!(m.n, if level == Level::Image { 66 } else { 6 });
        assert_eq!(m.auroc, roc.auroc);
        let csv = roc_csv(&roc);
        assert!(csv.starts_with("threshold,sens,spec\n-inf,1,0\n"));
        assert!(csv.trim_end().ends_with("inf,0,1"));
    }
}

proptest! {
    #[test]
    fn auroc_invariant_under_increasing_transform(seed in any::<u64>()) {
        let (s, l) = random_scored(&mut Rng::new(seed), 50);
        let base = roc_and_auroc(&samples(&s, &l)).unwrap().auroc;
        let t: Vec<f64> = s.iter().map(|&v| (3.0 * v).exp() / 30.0).collect();
        prop_assert_eq!(roc_and_auroc(&samples(&t, &l)).unwrap().auroc, base);
    }

    #[test]
    fn auroc_complement_symmetry(seed in any::<u64>()) {
        let (s, l) = random_scored(&mut Rng::new(seed), 50);
        let base = roc_and_auroc(&samples(&s, &l)).unwrap().auroc;
        let c: Vec<f64> = s.iter().map(|&v| 1.0 - v).collect();
        let comp = roc_and_auroc(&samples(&c, &l)).unwrap().auroc;
        prop_assert!((comp - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn aggregation_preserves_patients_and_labels(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut imgs = Vec::new();
        let patients = 1 + rng.below(8) as usize;
        for p in 0..patients {
            let label = rng.below(2) as u8;
            for s in 0..1 + rng.below(3) {
                for i in 0..1 + rng.below(4) as usize {
                    imgs.push(ScoredSample::image(&format!("P{p}"), &format!("P{p}S{s}"), i, label, rng.next_f64()));
                }
            }
        }
        let pat = aggregate(&imgs, Level::Patient).unwrap();
        prop_assert_eq!(pat.len(), patients);
        for a in &pat {
            prop_assert!(imgs.iter().filter(|s| s.patient_id == a.patient_id).all(|s| s.label == a.label));
        }
    }
}
