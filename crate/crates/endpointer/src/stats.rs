//! Small shared statistics helpers.

/// Nearest-rank percentile: the p-th percentile of `values` is the
/// ceil(p/100 * n)-th smallest sample (1-based). No interpolation.
///
/// `values` need not be sorted; `p` must be in (0, 100]. Returns `None` for
/// an empty slice.
pub fn nearest_rank_percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    let rank = rank.clamp(1, n);
    Some(sorted[rank - 1])
}

/// Mean of a non-empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population variance (divide by n) of a non-empty slice.
pub fn population_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_matches_hand_computation() {
        let samples = [0.0, 0.0, 0.0, 40.0, 60.0, 80.0, 120.0, 200.0, 300.0, 500.0];
        assert_eq!(nearest_rank_percentile(&samples, 95.0), Some(500.0));
        assert_eq!(nearest_rank_percentile(&samples, 50.0), Some(60.0));
    }

    #[test]
    fn single_sample_is_every_percentile() {
        assert_eq!(nearest_rank_percentile(&[7.0], 95.0), Some(7.0));
        assert_eq!(nearest_rank_percentile(&[7.0], 1.0), Some(7.0));
    }

    #[test]
    fn empty_input_has_no_percentile() {
        assert_eq!(nearest_rank_percentile(&[], 50.0), None);
    }

    #[test]
    fn variance_of_identical_samples_is_zero() {
        assert_eq!(population_variance(&[3.0, 3.0, 3.0]), 0.0);
    }
}
