use mislabel_forge::corruption::{corrupt, realized_rates, CorruptionMode, CorruptionSpec};
use mislabel_forge::data::LabeledDataset;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn balanced(n: usize, k: usize) -> LabeledDataset {
    LabeledDataset::new(vec![0.0; n], 1, (0..n).map(|i| i % k).collect(), k).unwrap()
}

/// Pearson statistic of flip targets against uniform over the other classes,
/// and its degrees of freedom.
fn flip_target_statistic(data: &LabeledDataset) -> (f64, f64) {
    let k = data.num_classes();
    let flips = realized_rates(data).flips;
    let mut stat = 0.0;
    let mut cells = 0;
    for row in &flips {
        let total: usize = row.iter().sum();
        let expected = total as f64 / (k - 1) as f64;
        for (j, &obs) in row.iter().enumerate() {
            if std::ptr::eq(row, &flips[j]) {
                continue;
            }
            stat += (obs as f64 - expected).powi(2) / expected;
            cells += 1;
        }
    }
    (stat, (cells - flips.len()) as f64)
}

#[test]
fn uniform_flip_targets_pass_chi_square() {
    let data = corrupt(&balanced(40_000, 4), &CorruptionSpec::uniform(0.3, 5)).unwrap();
    assert_eq!(data.corrupted_mask.iter().filter(|&&m| m).count(), 12_000);
    let (stat, dof) = flip_target_statistic(&data);
    let critical = ChiSquared::new(dof).unwrap().inverse_cdf(1.0 - 0.001);
    assert!(stat < critical, "chi-square {stat} >= {critical}");
}

#[test]
fn exact_counts_and_no_self_flips() {
    for (n, eta) in [(1000, 0.4), (999, 0.25), (10, 0.05), (500, 0.0)] {
        let clean = balanced(n, 3);
        let data = corrupt(&clean, &CorruptionSpec::uniform(eta, 1)).unwrap();
        let flipped = (0..n)
            .filter(|&i| data.observed_labels[i] != data.clean_labels[i])
            .count();
        assert_eq!(flipped, (eta * n as f64).round() as usize);
        for i in 0..n {
            assert_eq!(data.corrupted_mask[i], data.observed_labels[i] != data.clean_labels[i]);
        }
    }
}

#[test]
fn same_seed_same_labels() {
    let clean = balanced(300, 5);
    let a = corrupt(&clean, &CorruptionSpec::uniform(0.3, 9)).unwrap();
    let b = corrupt(&clean, &CorruptionSpec::uniform(0.3, 9)).unwrap();
    let c = corrupt(&clean, &CorruptionSpec::uniform(0.3, 10)).unwrap();
    assert_eq!(a.observed_labels, b.observed_labels);
    assert_ne!(a.observed_labels, c.observed_labels);
}

#[test]
fn asymmetric_matrix_rates() {
    let matrix = vec![vec![0.0, 0.4, 0.0], vec![0.0, 0.0, 0.0], vec![0.1, 0.1, 0.0]];
    let data = corrupt(&balanced(60_000, 3), &CorruptionSpec::asymmetric(matrix, 3)).unwrap();
    let rates = realized_rates(&data);
    assert!((rates.per_class[0] - 0.4).abs() < 0.015);
    assert_eq!(rates.per_class[1], 0.0);
    assert!((rates.per_class[2] - 0.2).abs() < 0.015);
    assert_eq!(rates.flips[0][2], 0);
}

#[test]
fn symmetric_mode_spreads_evenly() {
    let spec = CorruptionSpec {
        mode: CorruptionMode::Symmetric,
        eta: 0.3,
        transition: None,
        seed: 4,
    };
    let data = corrupt(&balanced(40_000, 4), &spec).unwrap();
    let rates = realized_rates(&data);
    assert!((rates.overall - 0.3).abs() < 0.01);
    let (stat, dof) = flip_target_statistic(&data);
    assert!(stat < ChiSquared::new(dof).unwrap().inverse_cdf(0.999));
}
