//! Top-down inference of a parse graph.
//!
//! Latent patterns of the deepest layer are inferred first; their chosen units then
//! condition the pairwise term of the patterns one layer below. Each part template
//! places its center where the patterns' votes agree best, and the semantic part keeps
//! the template with the highest score.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{FeatureLayer, FeatureMapSet};
use crate::geometry::{BBox, Point};
use crate::model::{AogModel, LatentPattern, PartTemplate, ScoreWeights};

/// Above this many votes the template center is found by mean-shift instead of subset
/// enumeration.
pub const EXACT_VOTE_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct UnitRef {
    pub layer: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TerminalScore {
    pub rsp: f64,
    pub loc: f64,
    pub pair: f64,
}

impl TerminalScore {
    #[inline]
    pub fn total(&self) -> f64 {
        self.rsp + self.loc + self.pair
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitAssignment {
    pub pattern_id: u32,
    pub unit: UnitRef,
    pub unit_center: Point,
    /// `rsp + loc + pair`.
    pub score: f64,
    pub terms: TerminalScore,
}

/// An already-inferred neighboring pattern from the layer above.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborRef {
    /// Center of the unit the neighbor selected.
    pub actual: Point,
    /// The neighbor's ideal position.
    pub ideal: Point,
}

/// Score of one neural unit under its latent pattern.
///
/// `scale` converts image-plane distances into the deformation unit (see
/// [`ScoreWeights::deform_scale`]).
pub fn score_terminal(
    x: f64,
    unit_pos: Point,
    ideal: Point,
    neighbors: &[NeighborRef],
    scale: f64,
    w: &ScoreWeights,
) -> TerminalScore {
    let rsp = if x > 0.0 {
        w.lambda_rsp * x
    } else {
        w.lambda_rsp * w.s_none
    };
    let loc = -w.lambda_loc * (unit_pos - ideal).norm_sq() * scale * scale;
    let pair = if neighbors.is_empty() {
        0.0
    } else {
        let sum: f64 = neighbors
            .iter()
            .map(|n| ((unit_pos - n.actual) - (ideal - n.ideal)).norm() * scale)
            .sum();
        -w.lambda_pair * sum / neighbors.len() as f64
    };
    TerminalScore { rsp, loc, pair }
}

/// Picks the unit inside the pattern's deformation square with the highest terminal
/// score; ties go to the smallest `(row, col)`.
pub fn infer_latent_pattern(
    pattern: &LatentPattern,
    layer: &FeatureLayer,
    neighbors: &[NeighborRef],
    w: &ScoreWeights,
) -> Result<UnitAssignment> {
    let meta = &layer.meta;
    let x = layer
        .normalized
        .as_deref()
        .ok_or_else(|| Error::NotNormalized(meta.name.clone()))?;
    let scale = w.deform_scale(meta.stride());
    let range = pattern.deformation_range(meta);
    let mut best: Option<(UnitRef, Point, TerminalScore, f64)> = None;
    for (row, col) in range.cells() {
        let pos = meta.unit_center(row, col);
        let terms = score_terminal(
            x[meta.index(pattern.channel, row, col)],
            pos,
            pattern.ideal_center,
            neighbors,
            scale,
            w,
        );
        let total = terms.total();
        if best.as_ref().is_none_or(|b| total > b.3) {
            let unit = UnitRef {
                layer: pattern.layer,
                channel: pattern.channel,
                row,
                col,
            };
            best = Some((unit, pos, terms, total));
        }
    }
    let (unit, unit_center, terms, score) = best.ok_or(Error::EmptyDeformationRange(pattern.id))?;
    Ok(UnitAssignment {
        pattern_id: pattern.id,
        unit,
        unit_center,
        score,
        terms,
    })
}

/// `S_inf` of one vote `p_u + Δp_u` against a template center.
#[inline]
pub fn vote_score(vote: Point, center: Point, w: &ScoreWeights) -> f64 {
    -w.lambda_inf * vote.dist_sq(center).min(w.d_px * w.d_px)
}

pub fn total_vote_score(votes: &[Point], center: Point, w: &ScoreWeights) -> f64 {
    votes.iter().map(|&v| vote_score(v, center, w)).sum()
}

/// Template center maximizing the summed truncated-quadratic vote score.
///
/// Any maximizer is the mean of the votes it keeps inside the truncation radius, so for
/// up to [`EXACT_VOTE_LIMIT`] votes every subset mean is evaluated and the result is the
/// global optimum. Larger vote sets start a flat-kernel mean-shift from every vote and
/// from the overall mean. Ties go to the smallest `(x, y)`.
pub fn best_center(votes: &[Point], w: &ScoreWeights) -> Option<Point> {
    let mean = Point::mean(votes)?;
    let mut candidates = Vec::new();
    if votes.len() <= EXACT_VOTE_LIMIT {
        for mask in 1u32..(1 << votes.len()) {
            let subset: Vec<Point> = (0..votes.len())
                .filter(|i| mask & (1 << i) != 0)
                .map(|i| votes[i])
                .collect();
            candidates.push(Point::mean(&subset).unwrap_or(mean));
        }
    } else {
        candidates.extend_from_slice(votes);
        candidates.push(mean);
        let starts = candidates.clone();
        candidates.extend(starts.into_iter().map(|s| mean_shift(votes, s, w.d_px)));
    }
    let mut best = candidates[0];
    let mut best_score = total_vote_score(votes, best, w);
    for &c in &candidates[1..] {
        let s = total_vote_score(votes, c, w);
        if s > best_score || (s == best_score && c.lex_lt(best)) {
            best = c;
            best_score = s;
        }
    }
    Some(best)
}

/// Flat-kernel mean-shift: repeatedly move to the mean of the votes strictly within `d`.
/// Each step does not decrease the truncated objective; stops at a fixed point.
fn mean_shift(votes: &[Point], start: Point, d: f64) -> Point {
    let d2 = d * d;
    let mut p = start;
    for _ in 0..100 {
        let inliers: Vec<Point> = votes.iter().copied().filter(|v| v.dist_sq(p) < d2).collect();
        let Some(next) = Point::mean(&inliers) else {
            return p;
        };
        if next == p {
            break;
        }
        p = next;
    }
    p
}

/// Places the template center from its patterns' assignments.
///
/// Returns `(p_v, S_v)` with `S_v = Σ_u [S_u + vote_scale · S_inf(u | p_v)]`. Assignments
/// are matched to patterns by position.
pub fn infer_part_template(
    template: &PartTemplate,
    assignments: &[UnitAssignment],
    w: &ScoreWeights,
    vote_scale: f64,
) -> Result<(Point, f64)> {
    if template.patterns.is_empty() {
        return Err(Error::NoPatterns(template.id));
    }
    if assignments.len() != template.patterns.len() {
        return Err(Error::InvalidModel(format!(
            "template {} has {} patterns but {} assignments",
            template.id,
            template.patterns.len(),
            assignments.len()
        )));
    }
    let votes: Vec<Point> = template
        .patterns
        .iter()
        .zip(assignments)
        .map(|(p, a)| a.unit_center + p.displacement)
        .collect();
    let center = best_center(&votes, w).ok_or(Error::NoPatterns(template.id))?;
    let score = assignments
        .iter()
        .zip(&votes)
        .map(|(a, &v)| a.score + vote_scale * vote_score(v, center, w))
        .sum();
    Ok((center, score))
}

/// Up to `k` nearest patterns one layer deeper for every pattern of `template`, by
/// distance between ideal centers; ties by pattern index.
pub fn neighbor_lists(template: &PartTemplate, k: usize) -> Vec<Vec<usize>> {
    template
        .patterns
        .iter()
        .map(|p| {
            let mut upper: Vec<(f64, usize)> = template
                .patterns_in_layer(p.layer + 1)
                .map(|(j, q)| (p.ideal_center.dist_sq(q.ideal_center), j))
                .collect();
            upper.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            upper.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateScore {
    pub template_id: u32,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateParse {
    pub template_id: u32,
    pub center: Point,
    pub score: f64,
    /// Aligned with the template's patterns.
    pub assignments: Vec<UnitAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseResult {
    pub image_id: String,
    pub template_id: u32,
    pub center: Point,
    /// Part region: the chosen template's scale around `center`.
    pub bbox: BBox,
    pub score: f64,
    pub assignments: Vec<UnitAssignment>,
    pub template_scores: Vec<TemplateScore>,
}

struct TemplatePlan {
    /// Pattern indices in inference order: deepest layer first.
    order: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

/// A model prepared for parsing: neighbor sets and inference orders computed once.
pub struct Parser<'m> {
    model: &'m AogModel,
    plans: Vec<TemplatePlan>,
    vote_scale: f64,
}

impl<'m> Parser<'m> {
    pub fn new(model: &'m AogModel) -> Self {
        let plans = model
            .templates
            .iter()
            .map(|t| {
                let order = t
                    .layers_top_down()
                    .into_iter()
                    .flat_map(|layer| t.patterns_in_layer(layer).map(|(i, _)| i).collect::<Vec<_>>())
                    .collect();
                TemplatePlan {
                    order,
                    neighbors: neighbor_lists(t, model.neighbor_k),
                }
            })
            .collect();
        Parser {
            model,
            plans,
            vote_scale: model.weights.vote_scale(&model.layer_metas),
        }
    }

    pub fn model(&self) -> &AogModel {
        self.model
    }

    fn layer_for<'f>(&self, fmap: &'f FeatureMapSet, binding: &[usize], layer: usize) -> Result<&'f FeatureLayer> {
        let idx = *binding.get(layer).ok_or_else(|| {
            Error::InvalidModel(format!("pattern refers to layer {layer}, model has {}", binding.len()))
        })?;
        Ok(&fmap.layers[idx])
    }

    /// Infers one template on an image whose layers were bound with [`FeatureMapSet::bind`].
    pub fn parse_template(&self, index: usize, fmap: &FeatureMapSet, binding: &[usize]) -> Result<TemplateParse> {
        let template = &self.model.templates[index];
        let plan = &self.plans[index];
        let w = &self.model.weights;
        let mut slots: Vec<Option<UnitAssignment>> = vec![None; template.patterns.len()];
        for &pi in &plan.order {
            let pattern = &template.patterns[pi];
            let neighbors: Vec<NeighborRef> = plan.neighbors[pi]
                .iter()
                .map(|&j| {
                    let upper = slots[j].as_ref().expect("upper layer inferred first");
                    NeighborRef {
                        actual: upper.unit_center,
                        ideal: template.patterns[j].ideal_center,
                    }
                })
                .collect();
            let layer = self.layer_for(fmap, binding, pattern.layer)?;
            slots[pi] = Some(infer_latent_pattern(pattern, layer, &neighbors, w)?);
        }
        let assignments: Vec<UnitAssignment> = slots.into_iter().map(|s| s.expect("all patterns inferred")).collect();
        let (center, score) = infer_part_template(template, &assignments, w, self.vote_scale)?;
        Ok(TemplateParse {
            template_id: template.id,
            center,
            score,
            assignments,
        })
    }

    /// Parses every template and keeps the best; ties go to the smallest template id.
    pub fn parse(&self, fmap: &FeatureMapSet) -> Result<ParseResult> {
        if self.model.templates.is_empty() {
            return Err(Error::EmptyModel);
        }
        if !fmap.is_normalized() {
            return Err(Error::NotNormalized(fmap.image_id.clone()));
        }
        let binding = fmap.bind(&self.model.layer_metas)?;
        let mut best: Option<(usize, TemplateParse)> = None;
        let mut template_scores = Vec::with_capacity(self.model.templates.len());
        for (i, t) in self.model.templates.iter().enumerate() {
            let parsed = self.parse_template(i, fmap, &binding)?;
            template_scores.push(TemplateScore {
                template_id: t.id,
                score: parsed.score,
            });
            let better = match &best {
                None => true,
                Some((_, b)) => parsed.score > b.score || (parsed.score == b.score && parsed.template_id < b.template_id),
            };
            if better {
                best = Some((i, parsed));
            }
        }
        let (index, best) = best.expect("at least one template");
        let scale = self.model.templates[index].scale;
        Ok(ParseResult {
            image_id: fmap.image_id.clone(),
            template_id: best.template_id,
            center: best.center,
            bbox: BBox::from_center(best.center, scale),
            score: best.score,
            assignments: best.assignments,
            template_scores,
        })
    }
}

/// Parses one image with `model`.
pub fn parse_image(model: &AogModel, fmap: &FeatureMapSet) -> Result<ParseResult> {
    Parser::new(model).parse(fmap)
}

/// Parses many images in parallel; results keep the input order.
pub fn parse_all(model: &AogModel, maps: &[FeatureMapSet]) -> Result<Vec<ParseResult>> {
    let parser = Parser::new(model);
    maps.par_iter().map(|m| parser.parse(m)).collect()
}

/// Line-delimited export record consumed by the evaluation harness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParseRecord {
    pub image_id: String,
    pub template_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

impl From<&ParseResult> for ParseRecord {
    fn from(p: &ParseResult) -> Self {
        ParseRecord {
            image_id: p.image_id.clone(),
            template_id: p.template_id,
            cx: p.bbox.cx,
            cy: p.bbox.cy,
            w: p.bbox.w,
            h: p.bbox.h,
            score: p.score,
        }
    }
}

impl ParseRecord {
    pub fn bbox(&self) -> BBox {
        BBox::new(self.cx, self.cy, self.w, self.h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Size;
    use crate::model::DeformUnit;

    fn w() -> ScoreWeights {
        ScoreWeights::default()
    }

    #[test]
    fn terminal_score_examples() {
        let p = Point::new(40.0, 40.0);
        let s = score_terminal(2.0, p, p, &[], 1.0, &w());
        assert_eq!((s.rsp, s.loc, s.pair), (3.0, 0.0, 0.0));
        let s = score_terminal(-0.5, p, p, &[], 1.0, &w());
        assert_eq!(s.rsp, -4.5);
        let s = score_terminal(0.0, p, p, &[], 1.0, &w());
        assert_eq!(s.rsp, -4.5);
        let n = NeighborRef {
            actual: Point::new(70.0, 10.0),
            ideal: Point::new(72.0, 12.0),
        };
        // unit sits at ideal + 2px offset, exactly like the neighbor
        let s = score_terminal(1.0, Point::new(38.0, 38.0), Point::new(40.0, 40.0), &[n], 1.0, &w());
        assert_eq!(s.pair, 0.0);
    }

    #[test]
    fn terminal_score_units() {
        let mut wp = w();
        wp.deform_unit = DeformUnit::Pixels;
        let s = score_terminal(1.0, Point::new(3.0, 4.0), Point::default(), &[], wp.deform_scale(16.0), &wp);
        assert!((s.loc + 25.0 / 3.0).abs() < 1e-12);
        let wc = w();
        let s = score_terminal(1.0, Point::new(16.0, 0.0), Point::default(), &[], wc.deform_scale(16.0), &wc);
        assert!((s.loc + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn far_vote_is_truncated() {
        let s = vote_score(Point::new(100.0, 0.0), Point::default(), &w());
        assert_eq!(s, -5.0 * 37.0 * 37.0);
        assert_eq!(s, -6845.0);
    }

    #[test]
    fn coinciding_votes() {
        let q = Point::new(12.5, -3.0);
        let c = best_center(&[q, q, q], &w()).unwrap();
        assert_eq!(c, q);
        assert_eq!(total_vote_score(&[q, q, q], c, &w()), 0.0);
    }

    #[test]
    fn subset_mean_beats_votes_and_global_mean() {
        let votes = [Point::new(0.0, 0.0), Point::new(30.0, 0.0), Point::new(1000.0, 0.0)];
        let c = best_center(&votes, &w()).unwrap();
        assert_eq!(c, Point::new(15.0, 0.0));
    }

    fn template_with(patterns: Vec<LatentPattern>) -> PartTemplate {
        PartTemplate {
            id: 0,
            name: "t".into(),
            scale: Size { w: 10.0, h: 10.0 },
            patterns,
            annotations: vec![],
        }
    }

    fn pattern(id: u32, layer: usize, x: f64, y: f64) -> LatentPattern {
        LatentPattern {
            id,
            layer,
            channel: 0,
            row: 0,
            col: 0,
            ideal_center: Point::new(x, y),
            displacement: Point::default(),
            deform_side: 1,
        }
    }

    #[test]
    fn neighbors_come_from_the_next_layer_nearest_first() {
        let t = template_with(vec![
            pattern(0, 0, 0.0, 0.0),
            pattern(1, 1, 50.0, 0.0),
            pattern(2, 1, 10.0, 0.0),
            pattern(3, 2, 1.0, 0.0),
            pattern(4, 1, 10.0, 0.0),
        ]);
        let n = neighbor_lists(&t, 2);
        assert_eq!(n[0], vec![2, 4]);
        assert_eq!(n[1], vec![3]);
        assert!(n[3].is_empty());
    }

    #[test]
    fn part_template_requires_patterns() {
        let t = template_with(vec![]);
        assert!(matches!(infer_part_template(&t, &[], &w(), 1.0), Err(Error::NoPatterns(0))));
    }
}
