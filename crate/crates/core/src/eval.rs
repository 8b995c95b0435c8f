//! Localization metrics over parse records and ground truth.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Point};
use crate::oracle::{OracleRecord, CORRECT_IOU};
use crate::parser::ParseRecord;

/// Center distance divided by the object's diagonal.
pub fn normalized_distance(pred: Point, gt: Point, diagonal: f64) -> Result<f64> {
    if !(diagonal > 0.0) {
        return Err(Error::ZeroDiagonal);
    }
    Ok((pred - gt).norm() / diagonal)
}

/// Whether the predicted box overlaps ground truth with IoU of at least one half.
pub fn pcp_correct(pred: &BBox, gt: &BBox) -> Result<bool> {
    Ok(pred.iou(gt)? >= CORRECT_IOU)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub predicted: BBox,
    pub ground_truth: BBox,
    pub normalized_distance: f64,
    pub pcp_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub mean_normalized_distance: f64,
    pub pcp: f64,
}

impl EvalSummary {
    pub fn of(records: &[EvalRecord]) -> EvalSummary {
        let n = records.len();
        if n == 0 {
            return EvalSummary {
                count: 0,
                mean_normalized_distance: 0.0,
                pcp: 0.0,
            };
        }
        EvalSummary {
            count: n,
            mean_normalized_distance: records.iter().map(|r| r.normalized_distance).sum::<f64>() / n as f64,
            pcp: records.iter().filter(|r| r.pcp_correct).count() as f64 / n as f64,
        }
    }
}

/// Scores every parse whose image holds the part. Parses of absent or unknown images are
/// skipped; a present image without an object size is an error.
pub fn evaluate(parses: &[ParseRecord], truth: &[OracleRecord]) -> Result<Vec<EvalRecord>> {
    let by_id: HashMap<&str, &OracleRecord> = truth.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut out = Vec::new();
    for p in parses {
        let Some(gt) = by_id.get(p.image_id.as_str()) else {
            continue;
        };
        if !gt.present {
            continue;
        }
        let gt_box = gt
            .gt_bbox
            .ok_or_else(|| Error::Config(format!("{:?} is present but has no gt_bbox", gt.image_id)))?;
        let diagonal = gt
            .object_diagonal()
            .ok_or_else(|| Error::Config(format!("{:?} has no image_size", gt.image_id)))?;
        let pred = p.bbox();
        out.push(EvalRecord {
            image_id: p.image_id.clone(),
            predicted: pred,
            ground_truth: gt_box,
            normalized_distance: normalized_distance(pred.center(), gt_box.center(), diagonal)?,
            pcp_correct: pcp_correct(&pred, &gt_box)?,
        });
    }
    Ok(out)
}
