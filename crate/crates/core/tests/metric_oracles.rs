use privad::evaluation::{average_precision, build_tradeoff_report, cmap, roc_auc, MethodResult};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// All positive/negative pairs, ties counting a half.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice_wins, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice_wins += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice_wins as f64 / (2 * pairs) as f64
}

fn instance(rng: &mut impl Rng, n: usize, tied: bool) -> (Vec<f64>, Vec<bool>) {
    loop {
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if labels.iter().any(|&l| l) && labels.iter().any(|&l| !l) {
            let scores = (0..n)
                .map(|i| {
                    let bump = if labels[i] { 0.3 } else { 0.0 };
                    let v: f64 = rng.random_range(0.0..1.0) + bump;
                    if tied {
                        (v * 8.0).floor()
                    } else {
                        v
                    }
                })
                .collect();
            return (scores, labels);
        }
    }
}

pub fn auc_equals_the_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for case in 0..50 {
        let n = rng.random_range(2..=300);
        let (s, y) = instance(&mut rng, n, case % 2 == 0);
        assert_eq!(roc_auc(&s, &y).unwrap(), pairwise_auc(&s, &y), "case {case}, n {n}");
    }
}

pub fn auc_is_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for case in 0..20 {
        let (s, y) = instance(&mut rng, 200, false);
        let a = rng.random_range(0.1..3.0);
        let b = rng.random_range(-2.0..2.0);
        let mapped: Vec<f64> = match case % 4 {
            0 => s.iter().map(|v| a * v + b).collect(),
            1 => s.iter().map(|v| (a * v).exp()).collect(),
            2 => s.iter().map(|v| v.powi(3) * a + v).collect(),
            _ => s.iter().map(|v| (a * v + b).atan()).collect(),
        };
        assert_eq!(roc_auc(&mapped, &y).unwrap(), roc_auc(&s, &y).unwrap(), "map {case}");
    }
}

pub fn auc_of_negated_scores_is_the_complement() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for _ in 0..50 {
        let n = rng.random_range(2..100);
        let (s, y) = instance(&mut rng, n, false);
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        let sum = roc_auc(&s, &y).unwrap() + roc_auc(&neg, &y).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }
}

pub fn average_precision_hand_ranked_cases() {
    let ap = |s: &[f64], y: &[bool]| average_precision(s, y).unwrap();
    assert_eq!(ap(&[0.9, 0.8, 0.1], &[true, true, false]), 1.0);
    // Ranking: +, -, + -> (1/1 + 2/3) / 2.
    assert!((ap(&[0.9, 0.5, 0.4], &[true, false, true]) - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    // Ranking: -, -, + -> 1/3.
    assert!((ap(&[0.1, 0.8, 0.9], &[true, false, false]) - 1.0 / 3.0).abs() < 1e-15);
    // Ranking: -, +, -, + -> (1/2 + 2/4) / 2.
    assert!((ap(&[0.9, 0.7, 0.6, 0.2], &[false, true, false, true]) - 0.5).abs() < 1e-15);
    // Tied scores keep input order: -, + -> 1/2.
    assert!((ap(&[0.5, 0.5], &[false, true]) - 0.5).abs() < 1e-15);
    assert!(average_precision(&[0.2, 0.4], &[false, false]).is_err());
}

pub fn cmap_is_the_mean_of_per_class_ap() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..20 {
        let (n, a) = (rng.random_range(5..60), rng.random_range(1..8));
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..a).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let mut targets: Vec<Vec<bool>> = (0..n).map(|_| (0..a).map(|_| rng.random_bool(0.3)).collect()).collect();
        targets[0][0] = true;
        let r = cmap(&scores, &targets).unwrap();
        let mut aps = Vec::new();
        for k in 0..a {
            let col: Vec<f64> = scores.iter().map(|row| row[k]).collect();
            let lab: Vec<bool> = targets.iter().map(|row| row[k]).collect();
            if lab.contains(&true) {
                aps.push(average_precision(&col, &lab).unwrap());
            }
        }
        assert_eq!(r.excluded, a - aps.len());
        assert!((r.value - aps.iter().sum::<f64>() / aps.len() as f64).abs() < 1e-15);
    }
}

pub fn report_reproduces_reference_relative_changes() {
    let results = [
        MethodResult {
            method: "raw".into(),
            cmap: 62.30,
            utility: 77.68,
        },
        MethodResult {
            method: "ours".into(),
            cmap: 42.21,
            utility: 74.81,
        },
    ];
    let report = build_tradeoff_report(&results, "frame_auc").unwrap();
    let ours = &report.rows[1];
    assert_eq!(format!("{:.2}", ours.cmap_change_pct), "-32.25");
    assert_eq!(format!("{:.2}", ours.utility_change_pct), "-3.69");
    assert!((ours.cmap_change_pct - 100.0 * (42.21 - 62.30) / 62.30).abs() < 1e-10);
    assert!((ours.utility_change_pct - 100.0 * (74.81 - 77.68) / 77.68).abs() < 1e-10);
    assert!(report.to_csv().contains("ours,42.2100,74.8100,-32.25,-3.69"));
}

#[cfg(test)]
mod suite {
    #[test]
    fn auc_equals_the_pairwise_oracle() {
        super::auc_equals_the_pairwise_oracle();
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps() {
        super::auc_is_invariant_under_monotone_maps();
    }

    #[test]
    fn auc_of_negated_scores_is_the_complement() {
        super::auc_of_negated_scores_is_the_complement();
    }

    #[test]
    fn average_precision_hand_ranked_cases() {
        super::average_precision_hand_ranked_cases();
    }

    #[test]
    fn cmap_is_the_mean_of_per_class_ap() {
        super::cmap_is_the_mean_of_per_class_ap();
    }

    #[test]
    fn report_reproduces_reference_relative_changes() {
        super::report_reproduces_reference_relative_changes();
    }
}
