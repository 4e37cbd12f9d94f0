//! Confusion matrices and intersection-over-union.

use std::path::Path;

use thiserror::Error;

use crate::imagery::{LabelMap, Palette, VOID};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("dimension mismatch: prediction {pred:?}, truth {truth:?}")]
    DimensionMismatch { pred: (usize, usize), truth: (usize, usize) },
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: u8, classes: usize },
    #[error("prediction contains void at pixel {0}")]
    VoidPrediction(usize),
    #[error("class count mismatch: {0} vs {1}")]
    ClassMismatch(usize, usize),
    #[error("no class has a defined IoU")]
    NoDefinedClass,
    #[error("report: {0}")]
    Csv(#[from] csv::Error),
    #[error("report: {0}")]
    Io(#[from] std::io::Error),
}

/// Rows are truth, columns are prediction; void truth pixels are skipped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Builds from row-major counts.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::ClassMismatch(classes * classes, counts.len()));
        }
        Ok(Self { classes, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<(), MetricsError> {
        if pred.width() != truth.width() || pred.height() != truth.height() {
            return Err(MetricsError::DimensionMismatch {
                pred: (pred.width(), pred.height()),
                truth: (truth.width(), truth.height()),
            });
        }
        let c = self.classes;
        for (i, (&p, &g)) in pred.labels().iter().zip(truth.labels()).enumerate() {
            if g == VOID {
                continue;
            }
            if p == VOID {
                return Err(MetricsError::VoidPrediction(i));
            }
            for l in [p, g] {
                if l as usize >= c {
                    return Err(MetricsError::LabelOutOfRange { label: l, classes: c });
                }
            }
            self.counts[g as usize * c + p as usize] += 1;
        }
        Ok(())
    }

    /// Entrywise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::ClassMismatch(self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `tp / (row + col - tp)`; `None` when the class is absent from both.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..c).map(|j| self.get(j, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self) -> Result<f64, MetricsError> {
        mean_of_defined(&self.class_iou())
    }
}

/// Unweighted mean over defined entries.
pub fn mean_of_defined(ious: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoDefinedClass);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// `class,iou` rows plus a final `mean` row; undefined classes get an
/// empty cell.
pub fn write_report(path: &Path, conf: &ConfusionMatrix, palette: &Palette) -> Result<(), MetricsError> {
    if palette.len() != conf.num_classes() {
        return Err(MetricsError::ClassMismatch(palette.len(), conf.num_classes()));
    }
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["class", "iou"])?;
    for (c, iou) in conf.class_iou().iter().enumerate() {
        let cell = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([palette.name(c), &cell])?;
    }
    w.write_record(["mean", &format!("{:.6}", conf.mean_iou()?)])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lm(w: usize, h: usize, c: usize, v: &[u8]) -> LabelMap {
        LabelMap::new(w, h, v.to_vec(), c).unwrap()
    }

    #[test]
    fn hand_tally() {
        let pred = lm(2, 2, 3, &[0, 1, 2, 2]);
        let truth = lm(2, 2, 3, &[0, 2, 2, VOID]);
        let mut m = ConfusionMatrix::new(3);
        m.accumulate(&pred, &truth).unwrap();
        assert_eq!(m, ConfusionMatrix::from_counts(3, vec![1, 0, 0, 0, 0, 0, 0, 1, 1]).unwrap());
        assert_eq!(m.total(), 3);
    }

    #[test]
    fn perfect_and_void() {
        let t = lm(3, 1, 2, &[0, 1, 1]);
        let mut m = ConfusionMatrix::new(2);
        m.accumulate(&t, &t).unwrap();
        assert_eq!((m.get(0, 1), m.get(1, 0)), (0, 0));
        assert_eq!(m.class_iou(), vec![Some(1.0), Some(1.0)]);
        let mut e = ConfusionMatrix::new(2);
        e.accumulate(&t, &lm(3, 1, 2, &[VOID; 3])).unwrap();
        assert_eq!(e.total(), 0);
        assert!(matches!(e.mean_iou(), Err(MetricsError::NoDefinedClass)));
    }

    #[test]
    fn two_class_formula() {
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let iou = m.class_iou();
        assert_eq!(iou[0], Some(3.0 / 6.0));
        assert_eq!(iou[1], Some(4.0 / 7.0));
    }

    #[test]
    fn absent_class_excluded() {
        let m = ConfusionMatrix::from_counts(3, vec![5, 0, 0, 0, 0, 0, 0, 0, 5]).unwrap();
        assert_eq!(m.class_iou(), vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(m.mean_iou().unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let mut m = ConfusionMatrix::new(2);
        assert!(matches!(
            m.accumulate(&lm(2, 1, 2, &[0, 0]), &lm(1, 2, 2, &[0, 0])),
            Err(MetricsError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.accumulate(&lm(1, 1, 2, &[VOID]), &lm(1, 1, 2, &[0])),
            Err(MetricsError::VoidPrediction(0))
        ));
        assert!(m.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn report_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let m = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let pal = Palette::new(vec![("a".into(), [0, 0, 0]), ("b".into(), [1, 1, 1])]).unwrap();
        write_report(&p, &m, &pal).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "class,iou\na,0.500000\nb,0.571429\nmean,0.535714\n");
    }

    fn maps() -> impl Strategy<Value = Vec<(Vec<u8>, Vec<u8>)>> {
        proptest::collection::vec(
            (proptest::collection::vec(0u8..4, 12), proptest::collection::vec(prop_oneof![0u8..4, Just(VOID)], 12)),
            1..6,
        )
    }

    proptest! {
        #[test]
        fn order_independent_and_bounded(pairs in maps(), rot in 0usize..6) {
            let tally = |ps: &[(Vec<u8>, Vec<u8>)]| {
                let mut m = ConfusionMatrix::new(4);
                for (p, g) in ps {
                    m.accumulate(&lm(4, 3, 4, p), &lm(4, 3, 4, g)).unwrap();
                }
                m
            };
            let a = tally(&pairs);
            let mut rotated = pairs.clone();
            rotated.rotate_left(rot % pairs.len());
            prop_assert_eq!(&a, &tally(&rotated));

            // merge of per-image matrices equals joint accumulation
            let mut merged = ConfusionMatrix::new(4);
            for p in &pairs {
                merged.merge(&tally(std::slice::from_ref(p))).unwrap();
            }
            prop_assert_eq!(&a, &merged);

            let ious = a.class_iou();
            if let Ok(mean) = a.mean_iou() {
                let d: Vec<f64> = ious.iter().flatten().copied().collect();
                prop_assert!(d.iter().all(|v| (0.0..=1.0).contains(v)));
                let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
            }

            // permuting class ids permutes the IoUs
            let perm = [2u8, 0, 3, 1];
            let relabel = |v: &Vec<u8>| v.iter().map(|&l| if l == VOID { VOID } else { perm[l as usize] }).collect::<Vec<u8>>();
            let permuted: Vec<_> = pairs.iter().map(|(p, g)| (relabel(p), relabel(g))).collect();
            let b = tally(&permuted);
            let bi = b.class_iou();
            for c in 0..4 {
                prop_assert_eq!(ious[c], bi[perm[c] as usize]);
            }
        }
    }
}
