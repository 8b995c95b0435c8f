//! Scripted answers from ground truth, standing in for a human annotator.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::AogModel;
use crate::qa::{Answer, AnswerSource, Question};
use crate::records::read_jsonl;

/// Ground truth for one image. `gt_bbox` is on the unmirrored image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    pub image_id: String,
    #[serde(default)]
    pub gt_bbox: Option<BBox>,
    #[serde(default)]
    pub gt_template: Option<String>,
    pub present: bool,
    #[serde(default)]
    pub flipped: bool,
    /// `[width, height]` of the object, whose diagonal normalizes localization errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_size: Option<(u32, u32)>,
}

impl OracleRecord {
    pub fn object_diagonal(&self) -> Option<f64> {
        self.image_size.map(|(w, h)| (w as f64).hypot(h as f64))
    }
}

/// Minimum overlap for a predicted box to count as correct.
pub const CORRECT_IOU: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    records: HashMap<String, OracleRecord>,
}

impl ScriptedOracle {
    pub fn new(records: Vec<OracleRecord>) -> Self {
        ScriptedOracle {
            records: records.into_iter().map(|r| (r.image_id.clone(), r)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_jsonl(path)?))
    }

    pub fn record(&self, image_id: &str) -> Option<&OracleRecord> {
        self.records.get(image_id)
    }

    /// The answer ground truth implies for `question` under `model`.
    pub fn respond(&self, question: &Question, model: &AogModel) -> Result<Answer> {
        let rec = self
            .records
            .get(&question.image_id)
            .ok_or_else(|| Error::OracleFailure(format!("no record for {:?}", question.image_id)))?;
        if !rec.present {
            return Ok(Answer::Absent);
        }
        let (bbox, name) = match (&rec.gt_bbox, &rec.gt_template) {
            (Some(b), Some(n)) => (*b, n),
            _ => {
                return Err(Error::OracleFailure(format!(
                    "{:?} is present but lacks gt_bbox or gt_template",
                    rec.image_id
                )))
            }
        };
        let Some(template) = model.template_by_name(name) else {
            return Ok(Answer::NewTemplate {
                bbox,
                name: Some(name.clone()),
            });
        };
        if question.template_id != Some(template.id) {
            return Ok(Answer::Retemplate {
                bbox,
                template_id: template.id,
                flipped: rec.flipped,
            });
        }
        let correct = match question.bbox {
            Some(pred) => pred.iou(&bbox).map(|v| v >= CORRECT_IOU).unwrap_or(false),
            None => false,
        };
        Ok(if correct { Answer::Correct } else { Answer::Relocate { bbox } })
    }
}

impl AnswerSource for ScriptedOracle {
    fn answer(&mut self, question: &Question, model: &AogModel) -> Result<Answer> {
        self.respond(question, model)
    }
}
