use serde::{Deserialize, Serialize};

use super::boxes::{iou_aabb, Aabb};
use crate::datagen::Stratum;
use crate::error::Result;

pub const IOU_THRESHOLDS: [f64; 2] = [0.25, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub iou: f64,
    pub stratum: Stratum,
}

/// Per-sample IoUs of the selected boxes plus stratified accuracies.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalRecord {
    pub samples: Vec<SampleOutcome>,
}

impl EvalRecord {
    /// Fraction of samples (optionally in one stratum) whose IoU reaches `threshold`.
    /// An empty selection scores zero.
    pub fn accuracy(&self, threshold: f64, stratum: Option<Stratum>) -> f64 {
        let picked: Vec<&SampleOutcome> = self
            .samples
            .iter()
            .filter(|s| stratum.is_none_or(|st| s.stratum == st))
            .collect();
        if picked.is_empty() {
            return 0.0;
        }
        picked.iter().filter(|s| s.iou >= threshold).count() as f64 / picked.len() as f64
    }

    pub fn count(&self, stratum: Option<Stratum>) -> usize {
        self.samples
            .iter()
            .filter(|s| stratum.is_none_or(|st| s.stratum == st))
            .count()
    }
}

/// Grounding accuracy inputs: one (possibly missing) predicted box per reference.
pub fn acc_at_iou(preds: &[Option<Aabb>], gts: &[Aabb], strata: &[Stratum]) -> Result<EvalRecord> {
    let mut samples = Vec::with_capacity(gts.len());
    for (i, (gt, stratum)) in gts.iter().zip(strata).enumerate() {
        let iou = match preds.get(i).copied().flatten() {
            Some(p) => iou_aabb(&p, gt)?,
            None => 0.0,
        };
        samples.push(SampleOutcome {
            iou,
            stratum: *stratum,
        });
    }
    Ok(EvalRecord { samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> Aabb {
        Aabb::new([x, 0.0, 0.5], [1.0, 1.0, 1.0])
    }

    #[test]
    fn perfect_predictions() {
        let gts = vec![b(0.0), b(3.0), b(6.0)];
        let preds: Vec<Option<Aabb>> = gts.iter().copied().map(Some).collect();
        let st = [Stratum::Unique, Stratum::Multiple, Stratum::Multiple];
        let rec = acc_at_iou(&preds, &gts, &st).unwrap();
        for t in IOU_THRESHOLDS {
            assert_eq!(rec.accuracy(t, None), 1.0);
            assert_eq!(rec.accuracy(t, Some(Stratum::Unique)), 1.0);
            assert_eq!(rec.accuracy(t, Some(Stratum::Multiple)), 1.0);
        }
    }

    #[test]
    fn all_miss() {
        let gts = vec![b(0.0), b(3.0)];
        let preds = vec![Some(b(10.0)), None];
        let rec = acc_at_iou(&preds, &gts, &[Stratum::Unique, Stratum::Multiple]).unwrap();
        assert_eq!(rec.accuracy(0.25, None), 0.0);
        assert_eq!(rec.accuracy(0.5, None), 0.0);
    }

    #[test]
    fn mixed_tally() {
        // offsets along x of a unit cube: IoU = (1 - dx) / (1 + dx)
        // dx 0.0 -> 1.0, 0.2 -> 0.667, 0.4 -> 0.4286, 0.55 -> 0.290, 0.8 -> 0.111
        let offsets = [0.0, 0.2, 0.4, 0.55, 0.8, 0.0, 0.2, 0.4, 0.55, 0.8];
        let strata = [
            Stratum::Unique,
            Stratum::Unique,
            Stratum::Unique,
            Stratum::Unique,
            Stratum::Unique,
            Stratum::Multiple,
            Stratum::Multiple,
            Stratum::Multiple,
            Stratum::Multiple,
            Stratum::Multiple,
        ];
        let gts: Vec<Aabb> = (0..10).map(|_| b(0.0)).collect();
        let mut preds: Vec<Option<Aabb>> = offsets.iter().map(|&dx| Some(b(dx))).collect();
        preds[9] = None;
        let rec = acc_at_iou(&preds, &gts, &strata).unwrap();
        // hand tally: @0.25 unique {0,.2,.4,.55} = 4/5, multiple {0,.2,.4,.55} = 4/5 (the .8 one is missing anyway)
        // @0.5 unique {0,.2} = 2/5, multiple {0,.2} = 2/5
        assert!((rec.accuracy(0.25, Some(Stratum::Unique)) - 0.8).abs() < 1e-12);
        assert!((rec.accuracy(0.25, Some(Stratum::Multiple)) - 0.8).abs() < 1e-12);
        assert!((rec.accuracy(0.5, None) - 0.4).abs() < 1e-12);
        assert!((rec.accuracy(0.25, None) - 0.8).abs() < 1e-12);
    }
}
