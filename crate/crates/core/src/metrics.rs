//! Segmentation metrics: per-example IoU, overall (accumulated) IoU, mean
//! IoU, the proposal upper bound, and the mask-class diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_io::{EvalRecord, GtInstance, InstanceMap, ProposalMap};
use crate::model::MaskProposal;

/// Intersection and union pixel counts of one prediction/target pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: usize,
    pub union: usize,
}

impl Overlap {
    pub fn of(a: &MaskProposal, b: &MaskProposal) -> Result<Self> {
        a.check_shape(b.shape())?;
        let (mut intersection, mut union) = (0, 0);
        for (&x, &y) in a.bits().iter().zip(b.bits()) {
            intersection += (x && y) as usize;
            union += (x || y) as usize;
        }
        Ok(Overlap { intersection, union })
    }

    /// IoU with both-empty defined as 1.
    pub fn iou(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

pub fn iou(a: &MaskProposal, b: &MaskProposal) -> Result<f64> {
    Ok(Overlap::of(a, b)?.iou())
}

/// Accumulated intersection over accumulated union. Zero when the total
/// union is zero.
pub fn overall_iou_from(overlaps: &[Overlap]) -> f64 {
    let (i, u) = overlaps
        .iter()
        .fold((0usize, 0usize), |(i, u), o| (i + o.intersection, u + o.union));
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

pub fn mean_iou_from(overlaps: &[Overlap]) -> f64 {
    if overlaps.is_empty() {
        return 0.0;
    }
    overlaps.iter().map(Overlap::iou).sum::<f64>() / overlaps.len() as f64
}

fn overlaps(pairs: &[(&MaskProposal, &MaskProposal)]) -> Result<Vec<Overlap>> {
    pairs.iter().map(|(p, g)| Overlap::of(p, g)).collect()
}

/// `pairs` are `(prediction, ground truth)`.
pub fn overall_iou(pairs: &[(&MaskProposal, &MaskProposal)]) -> Result<f64> {
    Ok(overall_iou_from(&overlaps(pairs)?))
}

pub fn mean_iou(pairs: &[(&MaskProposal, &MaskProposal)]) -> Result<f64> {
    Ok(mean_iou_from(&overlaps(pairs)?))
}

/// Index and overlap of the proposal with the highest IoU against `gt`
/// (lowest index on ties).
pub fn best_proposal(gt: &MaskProposal, proposals: &[MaskProposal]) -> Result<(usize, Overlap)> {
    let mut best: Option<(usize, Overlap)> = None;
    for (i, p) in proposals.iter().enumerate() {
        let o = Overlap::of(p, gt)?;
        if best.is_none_or(|(_, b)| o.iou() > b.iou()) {
            best = Some((i, o));
        }
    }
    best.ok_or(Error::SelectionImpossible)
}

/// Per-record overlaps of the best-IoU proposal.
pub fn upper_bound_overlaps(records: &[EvalRecord], proposals: &ProposalMap) -> Result<Vec<Overlap>> {
    records
        .iter()
        .map(|r| {
            let set = proposals.get(&r.image_id).ok_or(Error::SelectionImpossible)?;
            Ok(best_proposal(&r.gt_mask, set.proposals())?.1)
        })
        .collect()
}

/// `(oIoU, mIoU)` when every record is answered by its best proposal.
pub fn proposal_upper_bound(records: &[EvalRecord], proposals: &ProposalMap) -> Result<(f64, f64)> {
    let o = upper_bound_overlaps(records, proposals)?;
    Ok((overall_iou_from(&o), mean_iou_from(&o)))
}

/// Class of the annotated instance overlapping `pred` most (first on ties).
pub fn predicted_class<'a>(pred: &MaskProposal, inventory: &'a [GtInstance]) -> Result<Option<&'a str>> {
    let mut best: Option<(&str, f64)> = None;
    for inst in inventory {
        let v = iou(pred, &inst.mask)?;
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((&inst.class, v));
        }
    }
    Ok(best.map(|(c, _)| c))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub mc_acc: f64,
    pub cc_oiou: f64,
    pub class_correct: usize,
    pub total: usize,
}

/// Whether each prediction's class (taken from the best-IoU annotated
/// instance of its image) matches the record's class. Missing predictions
/// count as wrong.
pub fn class_matches(
    records: &[EvalRecord],
    predictions: &[Option<MaskProposal>],
    inventory: &InstanceMap,
) -> Result<Vec<bool>> {
    if records.len() != predictions.len() {
        return Err(Error::InvalidValue(format!(
            "{} records but {} predictions",
            records.len(),
            predictions.len()
        )));
    }
    records
        .iter()
        .zip(predictions)
        .map(|(r, p)| {
            let target = r
                .object_class
                .as_deref()
                .ok_or_else(|| Error::InvalidValue(format!("record {} has no object class", r.id)))?;
            let Some(pred) = p else { return Ok(false) };
            let instances = inventory.get(&r.image_id).map(Vec::as_slice).unwrap_or(&[]);
            Ok(predicted_class(pred, instances)? == Some(target))
        })
        .collect()
}

/// Mask-class accuracy and oIoU restricted to class-correct examples.
pub fn mask_class_metrics(
    records: &[EvalRecord],
    predictions: &[Option<MaskProposal>],
    inventory: &InstanceMap,
) -> Result<ClassMetrics> {
    let matches = class_matches(records, predictions, inventory)?;
    let mut correct = Vec::new();
    for ((r, p), ok) in records.iter().zip(predictions).zip(&matches) {
        if let (true, Some(pred)) = (ok, p) {
            correct.push(Overlap::of(pred, &r.gt_mask)?);
        }
    }
    let total = records.len();
    Ok(ClassMetrics {
        mc_acc: if total == 0 {
            0.0
        } else {
            correct.len() as f64 / total as f64
        },
        cc_oiou: overall_iou_from(&correct),
        class_correct: correct.len(),
        total,
    })
}
