//! The four-layer And-Or graph: semantic part, part templates, latent patterns, neural units.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::LayerMeta;
use crate::geometry::{BBox, Point, Size};

pub const MODEL_SCHEMA_VERSION: u64 = 1;
pub const DEFAULT_NEIGHBOR_K: usize = 15;

/// Distance unit used by the deformation (`S_loc`) and pairwise (`S_pair`) terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeformUnit {
    /// Image-plane distances divided by the pattern layer's stride.
    #[default]
    Cells,
    /// Raw image-plane pixels.
    Pixels,
}

/// Constant weights of every score term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreWeights {
    pub lambda_rsp: f64,
    pub lambda_loc: f64,
    pub lambda_pair: f64,
    pub lambda_inf: f64,
    pub lambda_unant: f64,
    pub lambda_close: f64,
    /// Response assigned to non-activated units.
    pub s_none: f64,
    /// Truncation radius of `S_inf`, in pixels.
    pub d_px: f64,
    #[serde(default)]
    pub deform_unit: DeformUnit,
}

impl Default for ScoreWeights {
    fn default() -> Self {
        ScoreWeights {
            lambda_rsp: 1.5,
            lambda_loc: 1.0 / 3.0,
            lambda_pair: 10.0,
            lambda_inf: 5.0,
            lambda_unant: 5.0,
            lambda_close: 0.4,
            s_none: -3.0,
            d_px: 37.0,
            deform_unit: DeformUnit::Cells,
        }
    }
}

impl ScoreWeights {
    /// Factor converting an image-plane distance on a layer with `stride_px` into the
    /// deformation unit.
    #[inline]
    pub fn deform_scale(&self, stride_px: f64) -> f64 {
        match self.deform_unit {
            DeformUnit::Cells => 1.0 / stride_px,
            DeformUnit::Pixels => 1.0,
        }
    }

    /// Factor applied to `S_inf` when it is added to unit scores. `S_inf` is defined in
    /// pixels; under [`DeformUnit::Cells`] it is measured in cells of the finest layer,
    /// which rescales it by a constant and leaves the best template center unchanged.
    pub fn vote_scale(&self, layer_metas: &[LayerMeta]) -> f64 {
        let finest = layer_metas.iter().map(LayerMeta::stride).fold(f64::INFINITY, f64::min);
        if finest.is_finite() {
            let s = self.deform_scale(finest);
            s * s
        } else {
            1.0
        }
    }

    /// Weight of the localization loss under which the learning objective splits into
    /// independent per-pattern scores. Only used to document that split.
    pub fn localization_weight(&self, total_patterns: usize) -> f64 {
        self.lambda_inf * total_patterns as f64
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            self.lambda_rsp,
            self.lambda_loc,
            self.lambda_pair,
            self.lambda_inf,
            self.lambda_unant,
            self.lambda_close,
        ];
        if nonneg.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidModel("score weights must be finite and nonnegative".into()));
        }
        if !self.s_none.is_finite() || !(self.d_px >= 0.0) {
            return Err(Error::InvalidModel("S_none must be finite and d nonnegative".into()));
        }
        Ok(())
    }
}

/// Inclusive cell bounds of a deformation square.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRange {
    pub row_lo: usize,
    pub row_hi: usize,
    pub col_lo: usize,
    pub col_hi: usize,
}

impl CellRange {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row_lo..=self.row_hi).contains(&row) && (self.col_lo..=self.col_hi).contains(&col)
    }

    pub fn cells(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row_lo..=self.row_hi).flat_map(move |r| (self.col_lo..=self.col_hi).map(move |c| (r, c)))
    }
}

/// Square of `side` cells around `(row, col)`, clipped to an `height x width` map.
/// Even sides extend one cell further down/right than up/left.
pub fn deformation_square(row: usize, col: usize, side: usize, height: usize, width: usize) -> CellRange {
    let back = side.saturating_sub(1) / 2;
    let fwd = side.saturating_sub(1) - back;
    CellRange {
        row_lo: row.saturating_sub(back),
        row_hi: (row + fwd).min(height - 1),
        col_lo: col.saturating_sub(back),
        col_hi: (col + fwd).min(width - 1),
    }
}

/// OR node choosing one unit inside a square of one channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPattern {
    pub id: u32,
    /// Index into [`AogModel::layer_metas`].
    pub layer: usize,
    pub channel: usize,
    /// Cell at the center of the deformation square.
    pub row: usize,
    pub col: usize,
    /// Ideal position `p̄_u` on the image plane.
    pub ideal_center: Point,
    /// Average displacement `Δp_u` from the pattern to its template's center.
    pub displacement: Point,
    pub deform_side: usize,
}

impl LatentPattern {
    pub fn deformation_range(&self, meta: &LayerMeta) -> CellRange {
        deformation_square(self.row, self.col, self.deform_side, meta.height, meta.width)
    }
}

/// A ground-truth part box. Coordinates are in the frame of the feature maps the template
/// is mined from, i.e. already mirrored when `flipped` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BBox,
    pub template_id: u32,
    pub flipped: bool,
}

impl Annotation {
    /// Builds an annotation from a box drawn on the unmirrored image.
    pub fn ingest(image_id: &str, native: BBox, template_id: u32, flipped: bool, image_width: u32) -> Self {
        let bbox = if flipped {
            native.mirrored(image_width as f64)
        } else {
            native
        };
        Annotation {
            image_id: image_id.to_string(),
            bbox,
            template_id,
            flipped,
        }
    }

    pub fn validate(&self, image_size: (u32, u32)) -> Result<()> {
        if self.bbox.is_degenerate() {
            return Err(Error::DegenerateBox);
        }
        if !self.bbox.within(image_size.0 as f64, image_size.1 as f64) {
            return Err(Error::InvalidAnswer(format!(
                "box {:?} lies outside the {}x{} image {:?}",
                self.bbox, image_size.0, image_size.1, self.image_id
            )));
        }
        Ok(())
    }
}

/// AND node: one pose of the semantic part, composed of latent patterns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartTemplate {
    pub id: u32,
    pub name: String,
    pub scale: Size,
    /// Sorted by layer, then by selection order within the layer.
    pub patterns: Vec<LatentPattern>,
    pub annotations: Vec<Annotation>,
}

impl PartTemplate {
    pub fn patterns_in_layer(&self, layer: usize) -> impl Iterator<Item = (usize, &LatentPattern)> {
        self.patterns.iter().enumerate().filter(move |(_, p)| p.layer == layer)
    }

    /// Distinct layers holding patterns, deepest first.
    pub fn layers_top_down(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.patterns.iter().map(|p| p.layer).collect();
        set.into_iter().rev().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AogModel {
    pub semantic_part: String,
    pub weights: ScoreWeights,
    /// Valid conv-layers, shallow to deep.
    pub layer_metas: Vec<LayerMeta>,
    pub neighbor_k: usize,
    pub templates: Vec<PartTemplate>,
}

impl AogModel {
    pub fn new(semantic_part: impl Into<String>, layer_metas: Vec<LayerMeta>, weights: ScoreWeights) -> Self {
        AogModel {
            semantic_part: semantic_part.into(),
            weights,
            layer_metas,
            neighbor_k: DEFAULT_NEIGHBOR_K,
            templates: Vec::new(),
        }
    }

    pub fn template(&self, id: u32) -> Option<&PartTemplate> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn template_by_name(&self, name: &str) -> Option<&PartTemplate> {
        self.templates.iter().find(|t| t.name == name)
    }

    /// Smallest id not used by any template.
    pub fn fresh_template_id(&self) -> u32 {
        self.templates.iter().map(|t| t.id + 1).max().unwrap_or(0)
    }

    pub fn pattern_count(&self) -> usize {
        self.templates.iter().map(|t| t.patterns.len()).sum()
    }

    /// Checks the structural invariants of the model.
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for meta in &self.layer_metas {
            meta.validate()?;
        }
        let mut ids = BTreeSet::new();
        for t in &self.templates {
            if !ids.insert(t.id) {
                return Err(Error::InvalidModel(format!("duplicate template id {}", t.id)));
            }
            if !t.annotations.is_empty() && !(t.scale.w > 0.0 && t.scale.h > 0.0) {
                return Err(Error::InvalidModel(format!("template {} has a non-positive scale", t.id)));
            }
            for p in &t.patterns {
                let meta = self.layer_metas.get(p.layer).ok_or_else(|| {
                    Error::InvalidModel(format!("pattern {} of template {} uses unknown layer {}", p.id, t.id, p.layer))
                })?;
                if p.channel >= meta.channels || p.row >= meta.height || p.col >= meta.width {
                    return Err(Error::InvalidModel(format!(
                        "pattern {} of template {} lies outside layer {:?}",
                        p.id, t.id, meta.name
                    )));
                }
                if p.deform_side != meta.deform_side() {
                    return Err(Error::InvalidModel(format!(
                        "pattern {} of template {} has deformation side {} (layer expects {})",
                        p.id,
                        t.id,
                        p.deform_side,
                        meta.deform_side()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `Δp_u = p̄*_v - p̄_u`, where `p̄*_v` is the mean annotated part center.
pub fn compute_displacement(annotations: &[Annotation], ideal_center: Point) -> Result<Point> {
    let centers: Vec<Point> = annotations.iter().map(|a| a.bbox.center()).collect();
    let mean = Point::mean(&centers).ok_or(Error::NoAnnotations)?;
    Ok(mean - ideal_center)
}

/// Component-wise mean of the annotated box sizes.
pub fn estimate_template_scale(annotations: &[Annotation]) -> Result<Size> {
    if annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let n = annotations.len() as f64;
    let (w, h) = annotations
        .iter()
        .fold((0.0, 0.0), |(w, h), a| (w + a.bbox.w, h + a.bbox.h));
    Ok(Size { w: w / n, h: h / n })
}

#[derive(Serialize)]
struct ModelFileRef<'a> {
    schema_version: u64,
    semantic_part: &'a str,
    weights: &'a ScoreWeights,
    layer_metas: &'a [LayerMeta],
    neighbor_k: usize,
    templates: &'a [PartTemplate],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[allow(dead_code)]
    schema_version: u64,
    semantic_part: String,
    weights: ScoreWeights,
    layer_metas: Vec<LayerMeta>,
    #[serde(default = "default_neighbor_k")]
    neighbor_k: usize,
    templates: Vec<PartTemplate>,
}

fn default_neighbor_k() -> usize {
    DEFAULT_NEIGHBOR_K
}

/// Serializes the model as pretty-printed JSON.
pub fn save_model(model: &AogModel) -> Result<String> {
    model.validate()?;
    let file = ModelFileRef {
        schema_version: MODEL_SCHEMA_VERSION,
        semantic_part: &model.semantic_part,
        weights: &model.weights,
        layer_metas: &model.layer_metas,
        neighbor_k: model.neighbor_k,
        templates: &model.templates,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn load_model(text: &str) -> Result<AogModel> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let version = value
        .get("schema_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptPayload("missing schema_version".into()))?;
    if version != MODEL_SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            found: version,
            expected: MODEL_SCHEMA_VERSION,
        });
    }
    let file: ModelFile = serde_json::from_value(value).map_err(|e| Error::CorruptPayload(e.to_string()))?;
    let model = AogModel {
        semantic_part: file.semantic_part,
        weights: file.weights,
        layer_metas: file.layer_metas,
        neighbor_k: file.neighbor_k,
        templates: file.templates,
    };
    model.validate().map_err(|e| Error::CorruptPayload(e.to_string()))?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(cx: f64, cy: f64, w: f64, h: f64) -> Annotation {
        Annotation {
            image_id: "i".into(),
            bbox: BBox::new(cx, cy, w, h),
            template_id: 0,
            flipped: false,
        }
    }

    #[test]
    fn default_weights_match_published_constants() {
        let w = ScoreWeights::default();
        assert_eq!(w.lambda_rsp, 1.5);
        assert_eq!(w.lambda_loc, 1.0 / 3.0);
        assert_eq!(w.lambda_pair, 10.0);
        assert_eq!(w.lambda_inf, 5.0);
        assert_eq!(w.lambda_unant, 5.0);
        assert_eq!(w.lambda_close, 0.4);
        assert_eq!(w.s_none, -3.0);
        assert_eq!(w.d_px, 37.0);
    }

    #[test]
    fn displacement_examples() {
        let anns = [ann(40.0, 50.0, 1.0, 1.0), ann(60.0, 70.0, 1.0, 1.0)];
        assert_eq!(compute_displacement(&anns, Point::new(20.0, 20.0)).unwrap(), Point::new(30.0, 40.0));
        assert_eq!(
            compute_displacement(&[ann(5.0, 7.0, 1.0, 1.0)], Point::new(5.0, 7.0)).unwrap(),
            Point::new(0.0, 0.0)
        );
        let anns = [ann(10.0, 10.0, 1.0, 1.0), ann(30.0, 30.0, 1.0, 1.0)];
        assert_eq!(compute_displacement(&anns, Point::default()).unwrap(), Point::new(20.0, 20.0));
        assert!(matches!(compute_displacement(&[], Point::default()), Err(Error::NoAnnotations)));
    }

    #[test]
    fn scale_examples() {
        let anns = [ann(0.0, 0.0, 20.0, 30.0), ann(0.0, 0.0, 40.0, 50.0)];
        assert_eq!(estimate_template_scale(&anns).unwrap(), Size { w: 30.0, h: 40.0 });
        assert_eq!(
            estimate_template_scale(&[ann(0.0, 0.0, 25.0, 25.0)]).unwrap(),
            Size { w: 25.0, h: 25.0 }
        );
        assert!(matches!(estimate_template_scale(&[]), Err(Error::NoAnnotations)));
    }

    #[test]
    fn scale_matches_direct_mean() {
        let anns = [ann(0.0, 0.0, 17.5, 3.25), ann(0.0, 0.0, 9.0, 11.0), ann(0.0, 0.0, 30.125, 8.5)];
        let s = estimate_template_scale(&anns).unwrap();
        assert!((s.w - (17.5 + 9.0 + 30.125) / 3.0).abs() < 1e-12);
        assert!((s.h - (3.25 + 11.0 + 8.5) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn deformation_square_clips_at_borders() {
        let r = deformation_square(0, 0, 5, 14, 14);
        assert_eq!((r.row_lo, r.row_hi, r.col_lo, r.col_hi), (0, 2, 0, 2));
        let r = deformation_square(13, 6, 5, 14, 14);
        assert_eq!((r.row_lo, r.row_hi, r.col_lo, r.col_hi), (11, 13, 4, 8));
        let r = deformation_square(3, 3, 2, 6, 6);
        assert_eq!((r.row_lo, r.row_hi), (3, 4));
        assert_eq!(r.cells().count(), 4);
    }

    #[test]
    fn unknown_schema_version() {
        let text = r#"{"schema_version": 7, "semantic_part": "head"}"#;
        assert!(matches!(
            load_model(text),
            Err(Error::SchemaMismatch { found: 7, expected: 1 })
        ));
        assert!(matches!(load_model("not json"), Err(Error::CorruptPayload(_))));
    }

    #[test]
    fn empty_model_round_trips() {
        let m = AogModel::new("head", vec![], ScoreWeights::default());
        assert_eq!(load_model(&save_model(&m).unwrap()).unwrap(), m);
    }

    #[test]
    fn ingest_mirrors_flipped_boxes() {
        let a = Annotation::ingest("x", BBox::new(50.0, 60.0, 10.0, 10.0), 1, true, 224);
        assert_eq!(a.bbox.cx, 174.0);
        let b = Annotation::ingest("x", BBox::new(50.0, 60.0, 10.0, 10.0), 1, false, 224);
        assert_eq!(b.bbox.cx, 50.0);
    }
}
