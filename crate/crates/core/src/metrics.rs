//! Selection quality against the ground-truth noise mask.

/// Fraction of selected samples that are truly clean. An empty selection
/// scores 1.0; callers that care flag it separately.
pub fn selection_precision(clean_idx: &[usize], clean_mask: &[bool]) -> f64 {
    if clean_idx.is_empty() {
        return 1.0;
    }
    let hits = clean_idx.iter().filter(|&&i| clean_mask[i]).count();
    hits as f64 / clean_idx.len() as f64
}

/// Fraction of truly clean samples that were selected. 1.0 when nothing is clean.
pub fn selection_recall(clean_idx: &[usize], clean_mask: &[bool]) -> f64 {
    let total = clean_mask.iter().filter(|c| **c).count();
    if total == 0 {
        return 1.0;
    }
    let hits = clean_idx.iter().filter(|&&i| clean_mask[i]).count();
    hits as f64 / total as f64
}

/// Entropy of the selected samples' label distribution divided by `ln K`:
/// 1 for a perfectly even split, 0 for a single class or an empty selection.
pub fn class_balance(clean_idx: &[usize], given_labels: &[usize], num_classes: usize) -> f64 {
    if clean_idx.is_empty() || num_classes < 2 {
        return 0.0;
    }
    let mut counts = vec![0usize; num_classes];
    for &i in clean_idx {
        counts[given_labels[i]] += 1;
    }
    let n = clean_idx.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    (entropy / (num_classes as f64).ln()).clamp(0.0, 1.0)
}

/// Mean and sample standard deviation (n - 1). The deviation is 0 for fewer
/// than two values.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn precision_cases() {
        let mask = [true, true, false, true];
        assert_eq!(selection_precision(&[0, 1, 3], &mask), 1.0);
        assert!((selection_precision(&[0, 1, 2], &mask) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(selection_precision(&[], &mask), 1.0);
    }

    #[test]
    fn exact_partition_is_perfect() {
        let mask = [true, false, true, false, false];
        let clean: Vec<usize> = (0..5).filter(|&i| mask[i]).collect();
        assert_eq!(selection_precision(&clean, &mask), 1.0);
        assert_eq!(selection_recall(&clean, &mask), 1.0);
    }

    #[test]
    fn balance_cases() {
        let labels: Vec<usize> = [vec![0; 5], vec![1; 5]].concat();
        let all: Vec<usize> = (0..10).collect();
        assert!((class_balance(&all, &labels, 2) - 1.0).abs() < 1e-15);
        assert_eq!(class_balance(&all, &vec![0; 10], 2), 0.0);
        let skew: Vec<usize> = [vec![0; 8], vec![1; 2]].concat();
        let h = -(0.8f64 * 0.8f64.ln() + 0.2 * 0.2f64.ln()) / 2f64.ln();
        assert!((class_balance(&all, &skew, 2) - h).abs() < 1e-15);
        assert!((h - 0.7219).abs() < 1e-4);
        assert_eq!(class_balance(&[], &skew, 2), 0.0);
    }

    #[test]
    fn mean_sd_cases() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn precision_matches_double_loop(
            mask in proptest::collection::vec(any::<bool>(), 1000),
            pick in proptest::collection::vec(any::<bool>(), 1000),
        ) {
            let clean: Vec<usize> = (0..1000).filter(|&i| pick[i]).collect();
            let mut hits = 0usize;
            for &i in &clean {
                for (j, &m) in mask.iter().enumerate() {
                    if i == j && m {
                        hits += 1;
                    }
                }
            }
            let expect = if clean.is_empty() { 1.0 } else { hits as f64 / clean.len() as f64 };
            prop_assert_eq!(selection_precision(&clean, &mask), expect);
            let total = mask.iter().filter(|m| **m).count();
            let recall = if total == 0 { 1.0 } else { hits as f64 / total as f64 };
            prop_assert_eq!(selection_recall(&clean, &mask), recall);
        }
    }
}
