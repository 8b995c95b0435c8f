//! Mining the latent patterns of a part template from a handful of annotations.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{Corpus, FeatureMapSet, LayerMeta};
use crate::geometry::Point;
use crate::model::{
    compute_displacement, estimate_template_scale, AogModel, Annotation, LatentPattern, PartTemplate, ScoreWeights,
};
use crate::parser::{infer_latent_pattern, vote_score};
use crate::records::AnnotationRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    /// Number of deepest layers patterns are mined from.
    pub valid_layers: usize,
    /// Suppression radius: a selected pattern removes same-channel candidates within
    /// this Chebyshev cell distance.
    pub epsilon_cells: usize,
    /// Fixed pattern count per mined layer (shallow to deep); fitted when absent.
    pub n_k_override: Option<Vec<usize>>,
    /// Upper bound on the unannotated images used in the score expectation.
    pub unannotated_cap: usize,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            valid_layers: 9,
            epsilon_cells: 2,
            n_k_override: None,
            unannotated_cap: 64,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_cells == 0 {
            return Err(Error::Config("epsilon must be at least one cell".into()));
        }
        if self.valid_layers == 0 {
            return Err(Error::Config("at least one valid layer is required".into()));
        }
        Ok(())
    }

    /// Indices of the layers to mine, shallow to deep.
    pub fn mined_layers(&self, layer_count: usize) -> std::ops::Range<usize> {
        layer_count.saturating_sub(self.valid_layers)..layer_count
    }
}

/// A possible latent pattern: one channel and one deformation-square center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub layer: usize,
    pub channel: usize,
    pub row: usize,
    pub col: usize,
    /// Center of the deformation square.
    pub center: Point,
    /// Mean position of the units the pattern selects on the annotated images.
    pub ideal_center: Point,
    pub displacement: Point,
    /// `annotated_term + unannotated_term`.
    pub score: f64,
    pub annotated_term: f64,
    pub unannotated_term: f64,
}

/// One unscored candidate per `(channel, row, col)` cell, in that order.
pub fn enumerate_candidates(layer: usize, meta: &LayerMeta) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(meta.len());
    for channel in 0..meta.channels {
        for row in 0..meta.height {
            for col in 0..meta.width {
                out.push(Candidate {
                    layer,
                    channel,
                    row,
                    col,
                    center: meta.unit_center(row, col),
                    ideal_center: meta.unit_center(row, col),
                    displacement: Point::default(),
                    score: 0.0,
                    annotated_term: 0.0,
                    unannotated_term: 0.0,
                });
            }
        }
    }
    out
}

struct BoundImage<'a> {
    fmap: Cow<'a, FeatureMapSet>,
    binding: Vec<usize>,
}

impl<'a> BoundImage<'a> {
    fn new(fmap: Cow<'a, FeatureMapSet>, metas: &[LayerMeta]) -> Result<Self> {
        if !fmap.is_normalized() {
            return Err(Error::NotNormalized(fmap.image_id.clone()));
        }
        let binding = fmap.bind(metas)?;
        Ok(BoundImage { fmap, binding })
    }
}

/// Feature maps a template is mined from: its annotated images (mirrored when the
/// annotation is flipped) and a sample of unannotated images.
pub struct MiningCorpus<'a> {
    layer_metas: &'a [LayerMeta],
    annotations: Vec<Annotation>,
    annotated: Vec<BoundImage<'a>>,
    unannotated: Vec<BoundImage<'a>>,
}

impl<'a> MiningCorpus<'a> {
    pub fn new(
        layer_metas: &'a [LayerMeta],
        annotated: Vec<(&'a FeatureMapSet, Annotation)>,
        unannotated: Vec<&'a FeatureMapSet>,
    ) -> Result<Self> {
        let mut annotations = Vec::with_capacity(annotated.len());
        let mut images = Vec::with_capacity(annotated.len());
        for (fmap, ann) in annotated {
            let fmap = if ann.flipped {
                Cow::Owned(fmap.flipped_horizontal())
            } else {
                Cow::Borrowed(fmap)
            };
            images.push(BoundImage::new(fmap, layer_metas)?);
            annotations.push(ann);
        }
        let unannotated = unannotated
            .into_iter()
            .map(|f| BoundImage::new(Cow::Borrowed(f), layer_metas))
            .collect::<Result<_>>()?;
        Ok(MiningCorpus {
            layer_metas,
            annotations,
            annotated: images,
            unannotated,
        })
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn layer_metas(&self) -> &[LayerMeta] {
        self.layer_metas
    }
}

/// Best unit of a candidate pattern on one image under `S_rsp + S_loc`: `(score, position)`.
fn best_unit(pattern: &LatentPattern, image: &BoundImage<'_>, w: &ScoreWeights) -> Result<(f64, Point)> {
    let layer = &image.fmap.layers[image.binding[pattern.layer]];
    let a = infer_latent_pattern(pattern, layer, &[], w)?;
    Ok((a.score, a.unit_center))
}

fn candidate_pattern(c: &Candidate, meta: &LayerMeta, ideal_center: Point, displacement: Point) -> LatentPattern {
    LatentPattern {
        id: 0,
        layer: c.layer,
        channel: c.channel,
        row: c.row,
        col: c.col,
        ideal_center,
        displacement,
        deform_side: meta.deform_side(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CandidateScore {
    pub ideal_center: Point,
    pub displacement: Point,
    pub annotated_term: f64,
    pub unannotated_term: f64,
}

impl CandidateScore {
    pub fn total(&self) -> f64 {
        self.annotated_term + self.unannotated_term
    }
}

/// `Score(u)`: how well a candidate explains the annotated parts plus how reliably and
/// how close to the part it fires on unannotated objects.
///
/// The pattern's ideal position `p̄_u` is the mean of the units it selects on the
/// annotated images when anchored at the candidate cell, so `Δp_u = p̄*_v - p̄_u` is the
/// average displacement from the selected unit to the annotated center.
///
/// The annotated term is the mean over annotated images of `S_u + S_inf(Λ_u | Λ*_v)`;
/// the unannotated term is `λ_unant (mean S_u - λ_close |Δp_u|²)`, with the mean taken
/// as zero when no unannotated image is available. `S_u` is the best unit's
/// `S_rsp + S_loc`.
pub fn score_candidate(c: &Candidate, corpus: &MiningCorpus<'_>, w: &ScoreWeights) -> Result<CandidateScore> {
    if corpus.annotated.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let meta = &corpus.layer_metas[c.layer];
    let anchor = candidate_pattern(c, meta, c.center, Point::default());
    let positions = corpus
        .annotated
        .iter()
        .map(|image| best_unit(&anchor, image, w).map(|(_, pos)| pos))
        .collect::<Result<Vec<_>>>()?;
    let ideal_center = Point::mean(&positions).ok_or(Error::NoAnnotations)?;
    let displacement = compute_displacement(&corpus.annotations, ideal_center)?;
    let pattern = candidate_pattern(c, meta, ideal_center, displacement);

    let vote_scale = w.vote_scale(corpus.layer_metas);
    let mut annotated_sum = 0.0;
    for (image, ann) in corpus.annotated.iter().zip(&corpus.annotations) {
        let (s_u, pos) = best_unit(&pattern, image, w)?;
        annotated_sum += s_u + vote_scale * vote_score(pos + displacement, ann.bbox.center(), w);
    }
    let annotated_term = annotated_sum / corpus.annotated.len() as f64;

    let mut unannotated_sum = 0.0;
    for image in &corpus.unannotated {
        unannotated_sum += best_unit(&pattern, image, w)?.0;
    }
    let unannotated_mean = if corpus.unannotated.is_empty() {
        0.0
    } else {
        unannotated_sum / corpus.unannotated.len() as f64
    };
    let scale = w.deform_scale(meta.stride());
    let closeness = w.lambda_close * displacement.norm_sq() * scale * scale;
    let unannotated_term = w.lambda_unant * (unannotated_mean - closeness);
    Ok(CandidateScore {
        ideal_center,
        displacement,
        annotated_term,
        unannotated_term,
    })
}

fn rank_order(a: &Candidate, b: &Candidate) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.channel.cmp(&b.channel))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// Greedy selection with per-channel suppression: a selected candidate removes every
/// candidate of its channel within Chebyshev distance `epsilon_cells`. Returns indices
/// into `candidates` in selection order.
pub fn select_with_suppression(candidates: &[Candidate], n_k: usize, epsilon_cells: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&i, &j| rank_order(&candidates[i], &candidates[j]));
    let mut suppressed = vec![false; candidates.len()];
    let mut selected = Vec::new();
    for &i in &order {
        if selected.len() >= n_k {
            break;
        }
        if suppressed[i] {
            continue;
        }
        selected.push(i);
        let c = &candidates[i];
        for (j, other) in candidates.iter().enumerate() {
            if j != i
                && other.channel == c.channel
                && other.layer == c.layer
                && other.row.abs_diff(c.row) <= epsilon_cells
                && other.col.abs_diff(c.col) <= epsilon_cells
            {
                suppressed[j] = true;
            }
        }
    }
    selected
}

/// Fitted rank curve `score ≈ alpha * exp(-sqrt(xi * rank)) + gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCurve {
    pub alpha: f64,
    pub xi: f64,
    pub gamma: f64,
    pub sse: f64,
}

const XI_MIN: f64 = 1e-4;
const XI_MAX: f64 = 10.0;
const XI_GRID_PER_DECADE: usize = 40;

fn fit_at(ranked: &[f64], xi: f64) -> RankCurve {
    let n = ranked.len() as f64;
    let basis: Vec<f64> = (1..=ranked.len()).map(|r| (-(xi * r as f64).sqrt()).exp()).collect();
    let e_mean = basis.iter().sum::<f64>() / n;
    let y_mean = ranked.iter().sum::<f64>() / n;
    let (mut cov, mut var) = (0.0, 0.0);
    for (&e, &y) in basis.iter().zip(ranked) {
        cov += (e - e_mean) * (y - y_mean);
        var += (e - e_mean) * (e - e_mean);
    }
    let alpha = if var > 0.0 { cov / var } else { 0.0 };
    let gamma = y_mean - alpha * e_mean;
    let sse = basis
        .iter()
        .zip(ranked)
        .map(|(&e, &y)| {
            let r = y - alpha * e - gamma;
            r * r
        })
        .sum();
    RankCurve { alpha, xi, gamma, sse }
}

/// Least-squares fit of the rank curve: log-spaced grid over `xi`, refined by
/// golden-section search, with `alpha` and `gamma` solved in closed form per `xi`.
pub fn fit_rank_curve(ranked: &[f64]) -> Result<RankCurve> {
    let distinct: HashSet<u64> = ranked.iter().map(|s| s.to_bits()).collect();
    if distinct.len() < 3 || ranked.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateScores);
    }
    let decades = (XI_MAX / XI_MIN).log10();
    let steps = (decades * XI_GRID_PER_DECADE as f64).round() as usize;
    let grid: Vec<f64> = (0..=steps)
        .map(|i| XI_MIN.ln() + (XI_MAX / XI_MIN).ln() * i as f64 / steps as f64)
        .collect();
    let fits: Vec<RankCurve> = grid.iter().map(|&lx| fit_at(ranked, lx.exp())).collect();
    let best = (0..fits.len())
        .min_by(|&a, &b| fits[a].sse.total_cmp(&fits[b].sse))
        .expect("non-empty grid");

    let (mut lo, mut hi) = (grid[best.saturating_sub(1)], grid[(best + 1).min(grid.len() - 1)]);
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - phi * (hi - lo);
    let mut b = lo + phi * (hi - lo);
    let mut fa = fit_at(ranked, a.exp()).sse;
    let mut fb = fit_at(ranked, b.exp()).sse;
    for _ in 0..200 {
        if hi - lo < 1e-13 {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - phi * (hi - lo);
            fa = fit_at(ranked, a.exp()).sse;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + phi * (hi - lo);
            fb = fit_at(ranked, b.exp()).sse;
        }
    }
    let refined = fit_at(ranked, ((lo + hi) / 2.0).exp());
    Ok(if refined.sse <= fits[best].sse {
        refined
    } else {
        fits[best]
    })
}

/// `ceil(x)`, except that values within a relative `1e-6` of an integer round to it.
fn ceil_tolerant(x: f64) -> f64 {
    let r = x.round();
    if (x - r).abs() <= 1e-6 * r.abs().max(1.0) {
        r
    } else {
        x.ceil()
    }
}

/// Number of patterns to keep on a layer, `ceil(0.5 / xi)` of the fitted rank curve,
/// clamped to `[1, len]`. `ranked` must be sorted in descending order.
pub fn fit_layer_pattern_count(ranked: &[f64]) -> Result<usize> {
    let curve = fit_rank_curve(ranked)?;
    let n = ceil_tolerant(0.5 / curve.xi);
    Ok((n as usize).clamp(1, ranked.len()))
}

/// Scores every candidate of one layer.
pub fn score_layer(layer: usize, corpus: &MiningCorpus<'_>, w: &ScoreWeights) -> Result<Vec<Candidate>> {
    let meta = &corpus.layer_metas[layer];
    enumerate_candidates(layer, meta)
        .into_par_iter()
        .map(|mut c| {
            let s = score_candidate(&c, corpus, w)?;
            c.ideal_center = s.ideal_center;
            c.displacement = s.displacement;
            c.annotated_term = s.annotated_term;
            c.unannotated_term = s.unannotated_term;
            c.score = s.total();
            Ok(c)
        })
        .collect()
}

/// Mines the sub-graph of one part template from the corpus' annotations.
pub fn mine_template(
    id: u32,
    name: &str,
    corpus: &MiningCorpus<'_>,
    cfg: &MinerConfig,
    w: &ScoreWeights,
) -> Result<PartTemplate> {
    cfg.validate()?;
    let annotations = corpus.annotations();
    if annotations.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let mut patterns = Vec::new();
    for (k, layer) in cfg.mined_layers(corpus.layer_metas.len()).enumerate() {
        let meta = &corpus.layer_metas[layer];
        let candidates = score_layer(layer, corpus, w)?;
        // The count is fitted on the positive-score survivors of suppression; a pattern
        // with a non-positive score never raises the learning objective.
        let survivors = select_with_suppression(&candidates, usize::MAX, cfg.epsilon_cells);
        let n_k = match cfg.n_k_override.as_ref().and_then(|v| v.get(k)) {
            Some(&n) => n,
            None => {
                let ranked: Vec<f64> = survivors.iter().map(|&i| candidates[i].score).filter(|&s| s > 0.0).collect();
                fit_layer_pattern_count(&ranked).unwrap_or(ranked.len().max(1))
            }
        };
        for &i in survivors.iter().take(n_k) {
            let c = &candidates[i];
            let mut p = candidate_pattern(c, meta, c.ideal_center, c.displacement);
            p.id = patterns.len() as u32;
            patterns.push(p);
        }
    }
    Ok(PartTemplate {
        id,
        name: name.to_string(),
        scale: estimate_template_scale(annotations)?,
        patterns,
        annotations: annotations.to_vec(),
    })
}

/// Adds an annotation to the model: a new template id grows a new branch, an existing
/// one re-mines that template with the enlarged annotation set. Other templates are
/// left untouched.
pub fn grow_or_refine(
    model: &AogModel,
    annotation: Annotation,
    new_name: Option<&str>,
    corpus: &Corpus,
    unannotated_ids: &[&str],
    cfg: &MinerConfig,
) -> Result<AogModel> {
    if corpus.get(&annotation.image_id).is_none() {
        return Err(Error::UnknownImage(annotation.image_id));
    }
    let existing = model.template(annotation.template_id);
    let (name, mut annotations) = match existing {
        Some(t) => (t.name.clone(), t.annotations.clone()),
        None => (
            new_name
                .map(str::to_string)
                .unwrap_or_else(|| format!("template{}", annotation.template_id)),
            Vec::new(),
        ),
    };
    annotations.push(annotation.clone());

    let annotated = annotations
        .iter()
        .map(|a| {
            corpus
                .get(&a.image_id)
                .map(|f| (f, a.clone()))
                .ok_or_else(|| Error::UnknownImage(a.image_id.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let unannotated = unannotated_ids
        .iter()
        .take(cfg.unannotated_cap)
        .map(|id| corpus.get(id).ok_or_else(|| Error::UnknownImage(id.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mining = MiningCorpus::new(&model.layer_metas, annotated, unannotated)?;
    let template = mine_template(annotation.template_id, &name, &mining, cfg, &model.weights)?;

    let mut next = model.clone();
    match next.templates.iter_mut().find(|t| t.id == template.id) {
        Some(slot) => *slot = template,
        None => {
            next.templates.push(template);
            next.templates.sort_by_key(|t| t.id);
        }
    }
    Ok(next)
}

/// Mines one template per distinct template id from a batch of annotations, in
/// ascending id order. Images without an annotation form the unannotated pool.
pub fn learn_model(
    semantic_part: &str,
    corpus: &Corpus,
    records: &[AnnotationRecord],
    cfg: &MinerConfig,
    weights: ScoreWeights,
) -> Result<AogModel> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::NoAnnotations);
    }
    let metas = corpus.layer_metas();
    let mut model = AogModel::new(semantic_part, metas[cfg.mined_layers(metas.len())].to_vec(), weights);
    let mut names: BTreeMap<u32, Option<&str>> = BTreeMap::new();
    for r in records {
        let name = names.entry(r.template_id).or_default();
        if name.is_none() {
            *name = r.template_name.as_deref();
        }
    }
    let annotated_ids: HashSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let pool: Vec<&FeatureMapSet> = corpus
        .maps()
        .iter()
        .filter(|m| !annotated_ids.contains(m.image_id.as_str()))
        .take(cfg.unannotated_cap)
        .collect();
    for (&id, name) in &names {
        let annotated = records
            .iter()
            .filter(|r| r.template_id == id)
            .map(|r| {
                let fmap = corpus.get(&r.image_id).ok_or_else(|| Error::UnknownImage(r.image_id.clone()))?;
                let a = Annotation::ingest(&r.image_id, r.bbox, id, r.flipped, fmap.image_size.0);
                a.validate(fmap.image_size)?;
                Ok((fmap, a))
            })
            .collect::<Result<Vec<_>>>()?;
        let mining = MiningCorpus::new(&model.layer_metas, annotated, pool.clone())?;
        let name = name.map_or_else(|| format!("template{id}"), str::to_string);
        let template = mine_template(id, &name, &mining, cfg, &model.weights)?;
        model.templates.push(template);
    }
    Ok(model)
}
