use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::synth::SegmentationSample;

/// Segmentation quality over non-ignore pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    /// `None` for classes absent from both prediction and label.
    pub per_class_iou: Vec<Option<f64>>,
    pub pixels: u64,
}

/// Rows are true classes, columns predicted classes; ignore pixels skipped.
pub fn confusion_matrix(
    pred: ArrayView2<u16>,
    label: ArrayView2<u16>,
    ignore: ArrayView2<bool>,
    num_classes: usize,
) -> Array2<u64> {
    let mut m = Array2::zeros((num_classes, num_classes));
    for ((&p, &l), &ign) in pred.iter().zip(label.iter()).zip(ignore.iter()) {
        if !ign {
            m[[l as usize, p as usize]] += 1;
        }
    }
    m
}

impl Metrics {
    pub fn from_confusion(m: &Array2<u64>) -> Result<Self> {
        let total: u64 = m.sum();
        if total == 0 {
            return Err(Error::AllPixelsIgnored);
        }
        let c = m.nrows();
        let correct: u64 = (0..c).map(|k| m[[k, k]]).sum();
        let per_class_iou: Vec<Option<f64>> = (0..c)
            .map(|k| {
                let tp = m[[k, k]];
                let union = m.row(k).sum() + m.column(k).sum() - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        Ok(Self {
            pixel_accuracy: correct as f64 / total as f64,
            mean_iou: present.iter().sum::<f64>() / present.len() as f64,
            per_class_iou,
            pixels: total,
        })
    }
}

/// Metrics for an arbitrary per-image predictor.
pub fn evaluate_predictions<F>(samples: &[SegmentationSample], num_classes: usize, predict: F) -> Result<Metrics>
where
    F: Fn(&SegmentationSample) -> Result<Array2<u16>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let parts: Vec<Array2<u64>> = samples
        .par_iter()
        .map(|s| {
            let pred = predict(s)?;
            Ok(confusion_matrix(pred.view(), s.label.view(), s.ignore.view(), num_classes))
        })
        .collect::<Result<_>>()?;
    let mut total = Array2::zeros((num_classes, num_classes));
    for p in &parts {
        total += p;
    }
    Metrics::from_confusion(&total)
}

/// Metrics of the plain network's argmax predictions.
pub fn evaluate<T: Scalar>(net: &Network<T>, samples: &[SegmentationSample]) -> Result<Metrics> {
    evaluate_predictions(samples, net.num_classes(), |s| net.predict(s.image.view()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn perfect_predictions() {
        let label = array![[0u16, 1], [1, 0]];
        let ignore = Array2::from_elem((2, 2), false);
        let m = Metrics::from_confusion(&confusion_matrix(label.view(), label.view(), ignore.view(), 2)).unwrap();
        assert_eq!(m.pixel_accuracy, 1.0);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn constant_prediction_on_balanced_labels() {
        let label = array![[0u16, 1], [1, 0]];
        let pred = Array2::zeros((2, 2));
        let ignore = Array2::from_elem((2, 2), false);
        let m = Metrics::from_confusion(&confusion_matrix(pred.view(), label.view(), ignore.view(), 2)).unwrap();
        assert_eq!(m.pixel_accuracy, 0.5);
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(0.0)]);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let label = array![[0u16, 1], [1, 0]];
        let pred = array![[0u16, 1], [0, 1]];
        let ignore = array![[false, false], [true, true]];
        let m = Metrics::from_confusion(&confusion_matrix(pred.view(), label.view(), ignore.view(), 3)).unwrap();
        assert_eq!(m.pixel_accuracy, 1.0);
        assert_eq!(m.pixels, 2);
        assert_eq!(m.per_class_iou[2], None);
        let all = Array2::from_elem((2, 2), true);
        assert!(Metrics::from_confusion(&confusion_matrix(pred.view(), label.view(), all.view(), 2)).is_err());
    }
}
