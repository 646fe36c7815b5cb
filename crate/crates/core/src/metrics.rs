//! Recognition and segmentation scores.

use serde::Serialize;

use crate::error::{Error, Result};

/// Counts with rows indexed by the true class and columns by the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

/// Splits 100% across `counts` in hundredths of a percent so the rounded
/// entries sum to exactly 100.00 (largest-remainder rounding). Empty rows
/// yield `None`.
pub fn row_percentages(counts: &[u64]) -> Option<Vec<u64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return None;
    }
    const SCALE: u128 = 10_000;
    let exact: Vec<u128> = counts.iter().map(|&c| c as u128 * SCALE).collect();
    let mut out: Vec<u64> = exact.iter().map(|&e| (e / total as u128) as u64).collect();
    let mut short = SCALE as u64 - out.iter().sum::<u64>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    // Largest remainder first, ties to the lower index.
    order.sort_by(|&a, &b| {
        (exact[b] % total as u128)
            .cmp(&(exact[a] % total as u128))
            .then(a.cmp(&b))
    });
    for &i in order.iter() {
        if short == 0 {
            break;
        }
        out[i] += 1;
        short -= 1;
    }
    Some(out)
}

/// Hundredths of a percent as `12.34`.
pub fn format_hundredths(v: u64) -> String {
    format!("{}.{:02}", v / 100, v % 100)
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }

    /// Trace over total; 0 when empty.
    pub fn recognition_ratio(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.correct() as f64 / total as f64
        }
    }

    /// Per-class ratio of correctly recognized samples; `None` for absent classes.
    pub fn per_class_ratio(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::shape("confusion", &[truth.len()], &[predicted.len()]));
    }
    let mut m = ConfusionMatrix::new(classes);
    for (&t, &p) in truth.iter().zip(predicted) {
        for l in [t, p] {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        m.counts[t][p] += 1;
    }
    Ok(m)
}

/// Pixel counts, rows indexed by the true class and columns by the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PixelAccuracyMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl PixelAccuracyMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn accumulate(&mut self, predicted: &[u8], truth: &[u8]) -> Result<()> {
        if predicted.len() != truth.len() {
            return Err(Error::shape("pixel_accuracy", &[truth.len()], &[predicted.len()]));
        }
        let v = self.classes();
        for (&p, &t) in predicted.iter().zip(truth) {
            let (p, t) = (p as usize, t as usize);
            if p >= v || t >= v {
                return Err(Error::LabelOutOfRange { label: p.max(t), classes: v });
            }
            self.counts[t][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PixelAccuracyMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Correct pixels over all pixels; 0 when empty.
    pub fn overall(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let correct: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        correct as f64 / total as f64
    }

    /// Fraction of class-`v` pixels predicted as `v`; `None` if there are none.
    pub fn class_accuracy(&self, v: usize) -> Option<f64> {
        let row = &self.counts[v];
        let n: u64 = row.iter().sum();
        (n > 0).then(|| row[v] as f64 / n as f64)
    }
}

/// Overall pixel accuracy and the per-class matrix for one mask pair.
pub fn pixel_accuracy(predicted: &[u8], truth: &[u8], classes: usize) -> Result<(f64, PixelAccuracyMatrix)> {
    let mut m = PixelAccuracyMatrix::new(classes);
    m.accumulate(predicted, truth)?;
    Ok((m.overall(), m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_confusion() {
        let m = confusion(&[0, 0, 1, 1, 2, 2], &[0, 0, 1, 2, 2, 2], 3).unwrap();
        assert_eq!(m.counts, vec![vec![2, 0, 0], vec![0, 1, 1], vec![0, 0, 2]]);
        assert!((m.recognition_ratio() - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(m.per_class_ratio()[1], Some(0.5));
    }

    #[test]
    fn confusion_errors() {
        assert!(confusion(&[0, 1], &[0], 2).is_err());
        assert!(confusion(&[0, 2], &[0, 1], 2).is_err());
    }

    #[test]
    fn pixel_examples() {
        let (pa, m) = pixel_accuracy(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        assert_eq!(pa, 0.75);
        assert_eq!(m.counts, vec![vec![2, 1], vec![0, 1]]);
        assert_eq!(m.class_accuracy(0), Some(2.0 / 3.0));
        assert_eq!(pixel_accuracy(&[1, 0], &[0, 1], 2).unwrap().0, 0.0);
        assert_eq!(pixel_accuracy(&[1, 0], &[1, 0], 2).unwrap().0, 1.0);
        assert!(pixel_accuracy(&[1], &[1, 0], 2).is_err());
    }

    #[test]
    fn thirds_round_to_exactly_100() {
        let p = row_percentages(&[1, 1, 1]).unwrap();
        assert_eq!(p, vec![3334, 3333, 3333]);
        assert_eq!(format_hundredths(3334), "33.34");
        assert_eq!(row_percentages(&[0, 0]), None);
    }

    proptest! {
        #[test]
        fn percentages_always_sum_to_100(counts in proptest::collection::vec(0u64..1000, 1..12)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let p = row_percentages(&counts).unwrap();
            prop_assert_eq!(p.iter().sum::<u64>(), 10_000);
            let total: u64 = counts.iter().sum();
            for (c, v) in counts.iter().zip(&p) {
                let exact = *c as f64 * 10_000.0 / total as f64;
                prop_assert!((exact - *v as f64).abs() < 1.0);
            }
        }

        #[test]
        fn ratio_matches_mean_of_hits(pairs in proptest::collection::vec((0usize..5, 0usize..5), 1..200)) {
            let (t, p): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = confusion(&t, &p, 5).unwrap();
            let direct = t.iter().zip(&p).filter(|(a, b)| a == b).count() as f64 / t.len() as f64;
            prop_assert!((m.recognition_ratio() - direct).abs() < 1e-12);
        }
    }
}
