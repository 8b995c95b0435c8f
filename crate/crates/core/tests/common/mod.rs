//! Independent reference implementations shared by the integration tests and the
//! acceptance suite. Nothing here calls the library's scoring or selection code; the
//! library types are used only as plain data.

#![allow(dead_code)]

use partaog::fmap::{FeatureLayer, FeatureMapSet, LayerMeta};
use partaog::geometry::{Point, Size};
use partaog::model::{AogModel, DeformUnit, LatentPattern, PartTemplate, ScoreWeights};
use partaog::qa::{PoolStatus, SelectionState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn layer(name: &str, channels: usize, side: usize, stride: f32) -> LayerMeta {
    LayerMeta {
        name: name.into(),
        channels,
        height: side,
        width: side,
        stride_px: stride,
        offset_px: stride / 2.0,
        rf_px: stride * 2.0,
    }
}

/// Feature map set whose normalized grids are given directly.
pub fn normalized_set(id: &str, size: (u32, u32), layers: Vec<(LayerMeta, Vec<f64>)>) -> FeatureMapSet {
    let layers = layers
        .into_iter()
        .map(|(meta, x)| {
            let raw = x.iter().map(|&v| v as f32).collect();
            let mut l = FeatureLayer::new(meta, raw).expect("valid layer");
            l.normalized = Some(x);
            l
        })
        .collect();
    FeatureMapSet::new(id, size, layers).expect("valid set")
}

fn random_x(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if rng.random_bool(0.3) {
                -rng.random::<f64>()
            } else {
                rng.random::<f64>() * 3.0
            }
        })
        .collect()
}

/// A random tiny parsing instance: two layers of at most 8×8 cells and 8 channels, up to
/// three templates of up to four patterns each.
pub fn tiny_instance(rng: &mut ChaCha8Rng) -> (AogModel, FeatureMapSet) {
    let side0 = rng.random_range(2..=8usize);
    let side1 = rng.random_range(1..=side0);
    let stride0 = [4.0f32, 8.0, 16.0][rng.random_range(0..3)];
    let metas = vec![
        layer("low", rng.random_range(1..=8), side0, stride0),
        layer("high", rng.random_range(1..=8), side1, stride0 * 2.0),
    ];
    let size = (stride0 as u32 * side0 as u32, stride0 as u32 * side0 as u32);
    let mut weights = ScoreWeights::default();
    if rng.random_bool(0.3) {
        weights.deform_unit = DeformUnit::Pixels;
    }
    let mut model = AogModel::new("part", metas.clone(), weights);
    model.neighbor_k = rng.random_range(1..=15);
    for t in 0..rng.random_range(1..=3u32) {
        let mut patterns = Vec::new();
        for id in 0..rng.random_range(1..=4u32) {
            let l = rng.random_range(0..2usize);
            let m = &metas[l];
            let (row, col) = (rng.random_range(0..m.height), rng.random_range(0..m.width));
            let s = m.stride_px as f64;
            let ideal = Point::new(
                m.offset_px as f64 + s * col as f64 + rng.random_range(-s..s),
                m.offset_px as f64 + s * row as f64 + rng.random_range(-s..s),
            );
            patterns.push(LatentPattern {
                id,
                layer: l,
                channel: rng.random_range(0..m.channels),
                row,
                col,
                ideal_center: ideal,
                displacement: Point::new(rng.random_range(-40.0..40.0), rng.random_range(-40.0..40.0)),
                deform_side: m.height.div_ceil(3),
            });
        }
        patterns.sort_by_key(|p| p.layer);
        model.templates.push(PartTemplate {
            id: t * 2 + 1,
            name: format!("t{t}"),
            scale: Size {
                w: rng.random_range(4.0..40.0),
                h: rng.random_range(4.0..40.0),
            },
            patterns,
            annotations: Vec::new(),
        });
    }
    let fmap = normalized_set(
        "img",
        size,
        metas.iter().map(|m| (m.clone(), random_x(rng, m.channels * m.height * m.width))).collect(),
    );
    (model, fmap)
}

/// Unit chosen for one pattern: `(row, col, center, score)`.
pub type RefUnit = (usize, usize, Point, f64);

#[derive(Debug, Clone)]
pub struct RefTemplateParse {
    pub template_id: u32,
    pub center: Point,
    pub score: f64,
    pub units: Vec<RefUnit>,
}

#[derive(Debug, Clone)]
pub struct RefParse {
    pub best: usize,
    pub templates: Vec<RefTemplateParse>,
}

fn sq(p: Point) -> f64 {
    p.x * p.x + p.y * p.y
}

fn cell_center(m: &LayerMeta, row: usize, col: usize) -> Point {
    Point::new(
        m.offset_px as f64 + m.stride_px as f64 * col as f64,
        m.offset_px as f64 + m.stride_px as f64 * row as f64,
    )
}

/// Rows (or columns) of a clipped square of `side` cells around `c`; even sides extend
/// further down/right.
fn square_axis(c: usize, side: usize, len: usize) -> std::ops::RangeInclusive<usize> {
    let back = (side - 1) / 2;
    let fwd = side - 1 - back;
    c.saturating_sub(back)..=(c + fwd).min(len - 1)
}

fn unit_scale(w: &ScoreWeights, stride: f64) -> f64 {
    match w.deform_unit {
        DeformUnit::Cells => 1.0 / stride,
        DeformUnit::Pixels => 1.0,
    }
}

/// Exhaustive scan of one pattern's square given the positions chosen one layer up.
fn ref_best_unit(
    p: &LatentPattern,
    m: &LayerMeta,
    x: &[f64],
    neighbors: &[(Point, Point)],
    w: &ScoreWeights,
) -> RefUnit {
    let scale = unit_scale(w, m.stride_px as f64);
    let mut best: Option<RefUnit> = None;
    for row in square_axis(p.row, p.deform_side, m.height) {
        for col in square_axis(p.col, p.deform_side, m.width) {
            let pos = cell_center(m, row, col);
            let v = x[(p.channel * m.height + row) * m.width + col];
            let rsp = if v > 0.0 { w.lambda_rsp * v } else { w.lambda_rsp * w.s_none };
            let loc = -w.lambda_loc * sq(Point::new(pos.x - p.ideal_center.x, pos.y - p.ideal_center.y)) * scale * scale;
            let pair = if neighbors.is_empty() {
                0.0
            } else {
                let mut sum = 0.0;
                for (actual, ideal) in neighbors {
                    let dx = (pos.x - actual.x) - (p.ideal_center.x - ideal.x);
                    let dy = (pos.y - actual.y) - (p.ideal_center.y - ideal.y);
                    sum += (dx * dx + dy * dy).sqrt() * scale;
                }
                -w.lambda_pair * sum / neighbors.len() as f64
            };
            let total = rsp + loc + pair;
            if best.is_none_or(|b| total > b.3) {
                best = Some((row, col, pos, total));
            }
        }
    }
    best.expect("non-empty square")
}

fn ref_vote(v: Point, c: Point, w: &ScoreWeights) -> f64 {
    let d2 = (v.x - c.x) * (v.x - c.x) + (v.y - c.y) * (v.y - c.y);
    -w.lambda_inf * d2.min(w.d_px * w.d_px)
}

/// Best template center by exhaustive search over the means of all vote subsets.
pub fn ref_center(votes: &[Point], w: &ScoreWeights) -> (Point, f64) {
    let mut best: Option<(Point, f64)> = None;
    for mask in 1u64..(1 << votes.len()) {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, v) in votes.iter().enumerate() {
            if mask & (1 << i) != 0 {
                sx += v.x;
                sy += v.y;
                n += 1.0;
            }
        }
        let c = Point::new(sx / n, sy / n);
        let s: f64 = votes.iter().map(|&v| ref_vote(v, c, w)).sum();
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && (c.x < b.x || (c.x == b.x && c.y < b.y))),
        };
        if better {
            best = Some((c, s));
        }
    }
    best.expect("at least one vote")
}

/// Sequential brute-force parse: deepest layer first, each pattern conditioned on the
/// units chosen one layer up, then the template center and the best template.
pub fn ref_parse(model: &AogModel, fmap: &FeatureMapSet) -> RefParse {
    let w = &model.weights;
    let finest = model.layer_metas.iter().map(|m| m.stride_px as f64).fold(f64::INFINITY, f64::min);
    let vs = unit_scale(w, finest).powi(2);
    let mut templates = Vec::new();
    for t in &model.templates {
        let mut units: Vec<Option<RefUnit>> = vec![None; t.patterns.len()];
        let max_layer = t.patterns.iter().map(|p| p.layer).max().unwrap();
        for layer in (0..=max_layer).rev() {
            for (i, p) in t.patterns.iter().enumerate().filter(|(_, p)| p.layer == layer) {
                let mut upper: Vec<(f64, usize)> = t
                    .patterns
                    .iter()
                    .enumerate()
                    .filter(|(_, q)| q.layer == layer + 1)
                    .map(|(j, q)| (sq(Point::new(p.ideal_center.x - q.ideal_center.x, p.ideal_center.y - q.ideal_center.y)), j))
                    .collect();
                upper.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                upper.truncate(model.neighbor_k);
                let neighbors: Vec<(Point, Point)> = upper
                    .iter()
                    .map(|&(_, j)| (units[j].unwrap().2, t.patterns[j].ideal_center))
                    .collect();
                let m = &model.layer_metas[p.layer];
                let l = fmap.layers.iter().find(|l| l.meta.name == m.name).unwrap();
                units[i] = Some(ref_best_unit(p, m, l.normalized.as_ref().unwrap(), &neighbors, w));
            }
        }
        let units: Vec<RefUnit> = units.into_iter().map(Option::unwrap).collect();
        let votes: Vec<Point> = t
            .patterns
            .iter()
            .zip(&units)
            .map(|(p, u)| Point::new(u.2.x + p.displacement.x, u.2.y + p.displacement.y))
            .collect();
        let (center, _) = ref_center(&votes, w);
        let score = units.iter().zip(&votes).map(|(u, &v)| u.3 + vs * ref_vote(v, center, w)).sum();
        templates.push(RefTemplateParse {
            template_id: t.id,
            center,
            score,
            units,
        });
    }
    let mut best = 0;
    for (i, t) in templates.iter().enumerate() {
        let b = &templates[best];
        if t.score > b.score || (t.score == b.score && t.template_id < b.template_id) {
            best = i;
        }
    }
    RefParse { best, templates }
}

/// A scored candidate cell: `(channel, row, col, score)`.
pub type RefCandidate = (usize, usize, usize, f64);

/// Greedy selection by repeated full scans: take the best remaining candidate (score
/// descending, then channel, row, col), drop every same-channel candidate within
/// Chebyshev distance `eps`, repeat.
pub fn ref_greedy(cands: &[RefCandidate], n: usize, eps: usize) -> Vec<usize> {
    let mut alive = vec![true; cands.len()];
    let mut out = Vec::new();
    while out.len() < n {
        let mut best: Option<usize> = None;
        for (i, c) in cands.iter().enumerate() {
            if !alive[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let o = &cands[b];
                    c.3 > o.3 || (c.3 == o.3 && (c.0, c.1, c.2) < (o.0, o.1, o.2))
                }
            };
            if better {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        out.push(b);
        let (ch, r, c) = (cands[b].0, cands[b].1, cands[b].2);
        for (i, o) in cands.iter().enumerate() {
            if o.0 == ch && o.1.abs_diff(r) <= eps && o.2.abs_diff(c) <= eps {
                alive[i] = false;
            }
        }
    }
    out
}

/// Straight-line `Score(u)` of one candidate cell: `(score, ideal center, displacement)`.
///
/// `annotated` pairs each (already mirrored) image with its annotated part center.
#[allow(clippy::too_many_arguments)]
pub fn ref_score(
    m: &LayerMeta,
    all_metas: &[LayerMeta],
    channel: usize,
    row: usize,
    col: usize,
    annotated: &[(&FeatureMapSet, Point)],
    unannotated: &[&FeatureMapSet],
    w: &ScoreWeights,
) -> (f64, Point, Point) {
    let grid = |f: &FeatureMapSet| -> Vec<f64> {
        f.layers.iter().find(|l| l.meta.name == m.name).unwrap().normalized.clone().unwrap()
    };
    let side = m.height.div_ceil(3);
    let mut p = LatentPattern {
        id: 0,
        layer: 0,
        channel,
        row,
        col,
        ideal_center: cell_center(m, row, col),
        displacement: Point::default(),
        deform_side: side,
    };
    let n = annotated.len() as f64;
    let (mut ix, mut iy) = (0.0, 0.0);
    for (f, _) in annotated {
        let u = ref_best_unit(&p, m, &grid(f), &[], w);
        ix += u.2.x;
        iy += u.2.y;
    }
    let ideal = Point::new(ix / n, iy / n);
    let (mut gx, mut gy) = (0.0, 0.0);
    for (_, c) in annotated {
        gx += c.x;
        gy += c.y;
    }
    let disp = Point::new(gx / n - ideal.x, gy / n - ideal.y);
    p.ideal_center = ideal;
    p.displacement = disp;
    let finest = all_metas.iter().map(|m| m.stride_px as f64).fold(f64::INFINITY, f64::min);
    let vs = unit_scale(w, finest).powi(2);
    let mut ann = 0.0;
    for (f, c) in annotated {
        let u = ref_best_unit(&p, m, &grid(f), &[], w);
        ann += u.3 + vs * ref_vote(Point::new(u.2.x + disp.x, u.2.y + disp.y), *c, w);
    }
    let ann = ann / n;
    let mut un = 0.0;
    for f in unannotated {
        un += ref_best_unit(&p, m, &grid(f), &[], w).3;
    }
    let un_mean = if unannotated.is_empty() { 0.0 } else { un / unannotated.len() as f64 };
    let scale = unit_scale(w, m.stride_px as f64);
    let close = w.lambda_close * sq(disp) * scale * scale;
    (ann + w.lambda_unant * (un_mean - close), ideal, disp)
}

fn ref_distance(a: &[f64], b: &[f64], m: &[f64]) -> f64 {
    let pa: Vec<f64> = a.iter().zip(m).map(|(x, w)| x * w).collect();
    let pb: Vec<f64> = b.iter().zip(m).map(|(x, w)| x * w).collect();
    let dot: f64 = pa.iter().zip(&pb).map(|(x, y)| x * y).sum();
    let na: f64 = pa.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = pb.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na * nb)
    }
}

/// `ln σ(z)` and `ln(1 - σ(z))`, stable for large `|z|`.
fn ln_sigmoid_pair(z: f64) -> (f64, f64) {
    let softplus = |t: f64| if t > 30.0 { t } else { (1.0 + t.exp()).ln() };
    (-softplus(-z), -softplus(z))
}

/// Predicted scores of every image after annotating `candidate`.
fn predicted_scores(state: &SelectionState, candidate: usize) -> Vec<f64> {
    let ant: Vec<f64> = state
        .images
        .iter()
        .filter(|i| i.status == PoolStatus::Annotated)
        .map(|i| i.s_top)
        .collect();
    let c = &state.images[candidate];
    let gap = if ant.is_empty() { -c.s_top } else { ant.iter().sum::<f64>() / ant.len() as f64 - c.s_top };
    state
        .images
        .iter()
        .map(|img| {
            let transfer = match (img.template, c.template) {
                (Some(a), Some(b)) if a == b => (-state.alpha * ref_distance(&img.features, &c.features, &state.reliability)).exp(),
                _ => 0.0,
            };
            img.s_top + gap * transfer
        })
        .collect()
}

/// Predicted KL decrease with the `P(y=-1)` terms dropped and `Q(+1) = exp(βS)/Z` for a
/// constant `Z`.
pub fn delta_kl_reduced(state: &SelectionState, candidate: usize, beta: f64) -> f64 {
    let ln_z = 3.0;
    let new = predicted_scores(state, candidate);
    let n = state.images.len() as f64;
    state
        .images
        .iter()
        .zip(&new)
        .map(|(img, &s_new)| img.prior * ((beta * s_new - ln_z) - (beta * img.s_top - ln_z)))
        .sum::<f64>()
        / n
}

/// Predicted KL decrease under the logistic `Q`, with or without the `P(y=-1)` terms.
pub fn delta_kl_logistic(state: &SelectionState, candidate: usize, beta: f64, negatives: bool) -> f64 {
    let new = predicted_scores(state, candidate);
    let n = state.images.len() as f64;
    state
        .images
        .iter()
        .zip(&new)
        .map(|(img, &s_new)| {
            let (pos_new, neg_new) = ln_sigmoid_pair(beta * s_new);
            let (pos, neg) = ln_sigmoid_pair(beta * img.s_top);
            let neg_term = if negatives { (1.0 - img.prior) * (neg_new - neg) } else { 0.0 };
            img.prior * (pos_new - pos) + neg_term
        })
        .sum::<f64>()
        / n
}

/// Unannotated candidate maximizing `f`; ties within `tol` (relative) go to the smallest
/// image id. Returns the index and every candidate whose value ties with the best.
pub fn ref_argmax(state: &SelectionState, f: impl Fn(usize) -> f64, tol: f64) -> (usize, Vec<usize>) {
    let vals: Vec<(usize, f64)> = state
        .images
        .iter()
        .enumerate()
        .filter(|(_, i)| i.status == PoolStatus::Unannotated)
        .map(|(i, _)| (i, f(i)))
        .collect();
    let max = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = vals
        .iter()
        .filter(|v| (max - v.1).abs() <= tol * max.abs().max(1e-300) || v.1 == max)
        .map(|v| v.0)
        .collect();
    let best = *ties.iter().min_by(|&&a, &&b| state.images[a].image_id.cmp(&state.images[b].image_id)).unwrap();
    (best, ties)
}
