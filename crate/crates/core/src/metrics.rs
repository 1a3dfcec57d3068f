use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, IGNORE};

pub const DEFAULT_CONFLATION_THRESHOLD: f64 = 0.01;

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    total: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
            total: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn accumulate(&mut self, y_true: &LabelMap, y_pred: &LabelMap) -> Result<()> {
        if y_true.shape() != y_pred.shape() {
            return Err(Error::shape(
                format!("{:?}", y_true.shape()),
                format!("{:?}", y_pred.shape()),
            ));
        }
        if y_true.num_classes() != self.k || y_pred.num_classes() != self.k {
            return Err(Error::shape(
                format!("K={}", self.k),
                format!("K={} / K={}", y_true.num_classes(), y_pred.num_classes()),
            ));
        }
        if y_pred.data().contains(&IGNORE) {
            return Err(Error::InvalidInput("predictions must not contain IGNORE".into()));
        }
        for (&t, &p) in y_true.data().iter().zip(y_pred.data()) {
            if t == IGNORE {
                continue;
            }
            self.counts[t as usize * self.k + p as usize] += 1;
            self.total += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape(format!("K={}", self.k), format!("K={}", other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn iou(&self) -> IouReport {
        iou(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` where the class appears in neither truth nor prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes; `None` if no class is defined.
    pub miou: Option<f64>,
}

/// `TP / (TP + FP + FN)` per class, and their mean over defined classes.
pub fn iou(cm: &ConfusionMatrix) -> IouReport {
    let k = cm.k;
    let ratios: Vec<Option<(u64, u64)>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then_some((tp, denom))
        })
        .collect();
    let per_class: Vec<Option<f64>> = ratios
        .iter()
        .map(|r| r.map(|(tp, d)| tp as f64 / d as f64))
        .collect();
    let defined: Vec<(u64, u64)> = ratios.iter().flatten().copied().collect();
    let miou = (!defined.is_empty()).then(|| {
        exact_mean(&defined).unwrap_or_else(|| {
            per_class.iter().flatten().sum::<f64>() / defined.len() as f64
        })
    });
    IouReport { per_class, miou }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of the fractions with a single final rounding, when the reduced
/// numerator and denominator fit in an f64 mantissa.
fn exact_mean(fractions: &[(u64, u64)]) -> Option<f64> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(n, d) in fractions {
        let (n, d) = (n as u128, d as u128);
        let g = gcd(den, d);
        let lcm = den.checked_mul(d / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(n.checked_mul(lcm / d)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        (num, den) = (num / r, den / r);
    }
    den = den.checked_mul(fractions.len() as u128)?;
    let r = gcd(num, den).max(1);
    (num, den) = (num / r, den / r);
    const EXACT: u128 = 1 << 53;
    (num < EXACT && den < EXACT).then(|| num as f64 / den as f64)
}

/// Number of defined classes whose IoU is strictly below `threshold`.
pub fn conflation_count(per_class: &[Option<f64>], threshold: f64) -> usize {
    per_class.iter().flatten().filter(|&&v| v < threshold).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_by_two() -> (LabelMap, LabelMap) {
        (
            LabelMap::new(1, 2, 2, 2, vec![0, 0, 1, 1]).unwrap(),
            LabelMap::new(1, 2, 2, 2, vec![0, 1, 1, 1]).unwrap(),
        )
    }

    #[test]
    fn hand_counted_two_by_two() {
        let (t, p) = two_by_two();
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&t, &p).unwrap();
        assert_eq!((cm.get(0, 0), cm.get(0, 1), cm.get(1, 0), cm.get(1, 1)), (1, 1, 0, 2));
        let report = cm.iou();
        assert_eq!(report.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(report.miou, Some(7.0 / 12.0));
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let t = LabelMap::new(1, 2, 3, 4, vec![0, 1, 2, 3, 3, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&t, &t).unwrap();
        for a in 0..4 {
            for b in 0..4 {
                if a != b {
                    assert_eq!(cm.get(a, b), 0);
                }
            }
        }
        assert_eq!(cm.iou().miou, Some(1.0));
    }

    #[test]
    fn ignored_truth_leaves_counts_unchanged() {
        let t = LabelMap::filled(1, 2, 2, 3, IGNORE).unwrap();
        let p = LabelMap::filled(1, 2, 2, 3, 1).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&t, &p).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(3));
    }

    #[test]
    fn absent_class_is_undefined_and_excluded() {
        let t = LabelMap::new(1, 1, 2, 3, vec![0, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&t, &t).unwrap();
        let r = cm.iou();
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn shape_mismatch_and_ignore_predictions_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        let a = LabelMap::filled(1, 2, 2, 2, 0).unwrap();
        let b = LabelMap::filled(1, 2, 3, 2, 0).unwrap();
        assert!(matches!(cm.accumulate(&a, &b), Err(Error::ShapeMismatch { .. })));
        let ig = LabelMap::filled(1, 2, 2, 2, IGNORE).unwrap();
        assert!(cm.accumulate(&a, &ig).is_err());
    }

    #[test]
    fn conflation_examples() {
        assert_eq!(conflation_count(&[Some(1.0); 5], 0.01), 0);
        assert_eq!(conflation_count(&[Some(0.01), Some(0.0099), None], 0.01), 1);
    }

    fn label_pairs() -> impl Strategy<Value = Vec<(LabelMap, LabelMap)>> {
        prop::collection::vec(
            (
                prop::collection::vec(prop_oneof![9 => 0u8..4, 1 => Just(IGNORE)], 12),
                prop::collection::vec(0u8..4, 12),
            )
                .prop_map(|(t, p)| {
                    (
                        LabelMap::new(1, 3, 4, 4, t).unwrap(),
                        LabelMap::new(1, 3, 4, 4, p).unwrap(),
                    )
                }),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn accumulation_order_does_not_matter(pairs in label_pairs()) {
            let mut forward = ConfusionMatrix::new(4);
            for (t, p) in &pairs {
                forward.accumulate(t, p).unwrap();
            }
            let mut backward = ConfusionMatrix::new(4);
            for (t, p) in pairs.iter().rev() {
                backward.accumulate(t, p).unwrap();
            }
            prop_assert_eq!(&forward, &backward);

            let mut merged = ConfusionMatrix::new(4);
            for (t, p) in &pairs {
                let mut part = ConfusionMatrix::new(4);
                part.accumulate(t, p).unwrap();
                merged.merge(&part).unwrap();
            }
            prop_assert_eq!(&forward, &merged);
            let scored = pairs.iter().map(|(t, _)| t.data().iter().filter(|&&v| v != IGNORE).count() as u64).sum::<u64>();
            prop_assert_eq!(forward.total(), scored);
        }

        #[test]
        fn iou_bounds(pairs in label_pairs()) {
            let mut cm = ConfusionMatrix::new(4);
            for (t, p) in &pairs {
                cm.accumulate(t, p).unwrap();
            }
            let r = cm.iou();
            let defined: Vec<f64> = r.per_class.iter().flatten().copied().collect();
            prop_assert!(defined.iter().all(|v| (0.0..=1.0).contains(v)));
            if let Some(m) = r.miou {
                prop_assert!(m <= defined.iter().cloned().fold(0.0, f64::max) + 1e-15);
            }
        }
    }
}
