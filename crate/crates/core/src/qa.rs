//! Active question answering.
//!
//! Every object image carries a prior `P(y=+1|I)` that the part is present and an
//! estimate `Q(y=+1|I)` derived from the current model's parse score. Each round the
//! session asks about the unannotated image whose annotation is predicted to shrink
//! `KL(P || Q)` the most, applies one of five answers and re-parses the corpus when
//! the model changed.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::Corpus;
use crate::geometry::BBox;
use crate::miner::{grow_or_refine, MinerConfig};
use crate::model::{AogModel, Annotation, ScoreWeights};
use crate::parser::{ParseResult, Parser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "strategy")]
pub enum SelectionStrategy {
    /// Largest predicted KL-divergence decrease.
    #[default]
    KlGain,
    /// Uniformly random unannotated image; the baseline for the gain ranking.
    Random { seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaConfig {
    /// Decay of score transfer with appearance distance.
    pub alpha: f64,
    /// Scale of the parse score inside `Q`.
    pub beta: f64,
    /// Maximum number of questions.
    pub budget: usize,
    pub selection: SelectionStrategy,
    pub miner: MinerConfig,
    pub weights: ScoreWeights,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            alpha: 4.0,
            beta: 1.0,
            budget: 20,
            selection: SelectionStrategy::KlGain,
            miner: MinerConfig::default(),
            weights: ScoreWeights::default(),
        }
    }
}

impl QaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be positive".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config("beta must be finite".into()));
        }
        self.miner.validate()?;
        self.weights.validate()
    }
}

/// `Q(y=+1|I)`: the logistic function of `beta * S_top`, i.e. `exp(beta S) / Z` with
/// `Z = 1 + exp(beta S)`.
pub fn estimate_q(s_top: f64, beta: f64) -> f64 {
    let z = beta * s_top;
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn xlogx_over(p: f64, q: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else if q <= 0.0 {
        f64::INFINITY
    } else {
        p * (p / q).ln()
    }
}

/// `KL(P || Q)` over binary part-presence distributions, weighted by the uniform image
/// prior `1/N`. `prior[i]` and `estimate[i]` are the `y=+1` probabilities of image `i`.
pub fn kl_divergence(prior: &[f64], estimate: &[f64]) -> f64 {
    if prior.is_empty() {
        return 0.0;
    }
    let sum: f64 = prior
        .iter()
        .zip(estimate)
        .map(|(&p, &q)| xlogx_over(p, q) + xlogx_over(1.0 - p, 1.0 - q))
        .sum();
    sum / prior.len() as f64
}

/// `1 - cos(M f_i, M f_j)`, or infinity when the images were parsed with different
/// templates. A zero vector is at distance 1 from everything.
pub fn appearance_distance(f_i: &[f64], f_j: &[f64], reliability: &[f64], same_template: bool) -> Result<f64> {
    if f_i.len() != f_j.len() {
        return Err(Error::LengthMismatch(f_i.len(), f_j.len()));
    }
    if reliability.len() != f_i.len() {
        return Err(Error::LengthMismatch(f_i.len(), reliability.len()));
    }
    if !same_template {
        return Ok(f64::INFINITY);
    }
    let (mut dot, mut ni, mut nj) = (0.0, 0.0, 0.0);
    for ((&a, &b), &m) in f_i.iter().zip(f_j).zip(reliability) {
        let (a, b) = (a * m, b * m);
        dot += a * b;
        ni += a * a;
        nj += b * b;
    }
    if ni == 0.0 || nj == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - dot / (ni * nj).sqrt()).max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStatus {
    Annotated,
    Unannotated,
}

/// What the gain ranking needs to know about one image that may still contain the part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionImage {
    pub image_id: String,
    pub status: PoolStatus,
    pub s_top: f64,
    pub template: Option<u32>,
    /// Rectified activations of the top valid layer.
    pub features: Vec<f64>,
    pub prior: f64,
}

/// Snapshot of a session for ranking questions. Images known to lack the part are not
/// included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionState {
    pub images: Vec<SelectionImage>,
    pub reliability: Vec<f64>,
    pub alpha: f64,
}

impl SelectionState {
    /// `ΔS = E_{I in ant} S_top,I - S_top,candidate`; `-S_top,candidate` before any annotation.
    pub fn score_gap(&self, candidate: usize) -> f64 {
        let (sum, n) = self
            .images
            .iter()
            .filter(|i| i.status == PoolStatus::Annotated)
            .fold((0.0, 0usize), |(s, n), i| (s + i.s_top, n + 1));
        let mean = if n == 0 { 0.0 } else { sum / n as f64 };
        mean - self.images[candidate].s_top
    }

    /// `G = Σ_I P(+1|I) ΔS exp(-alpha dist(I, candidate))`: the predicted KL decrease up to
    /// the constant factor `beta / N` once the `P(y=-1)` terms are dropped.
    pub fn gain(&self, candidate: usize) -> Result<f64> {
        let c = &self.images[candidate];
        let gap = self.score_gap(candidate);
        let mut g = 0.0;
        for img in &self.images {
            let same = img.template.is_some() && img.template == c.template;
            let d = appearance_distance(&img.features, &c.features, &self.reliability, same)?;
            g += img.prior * gap * (-self.alpha * d).exp();
        }
        Ok(g)
    }

    /// Unannotated image with the largest gain; ties go to the smallest image id.
    pub fn select(&self) -> Result<Option<usize>> {
        let gains: Vec<(usize, f64)> = self
            .images
            .par_iter()
            .enumerate()
            .filter(|(_, img)| img.status == PoolStatus::Unannotated)
            .map(|(i, _)| self.gain(i).map(|g| (i, g)))
            .collect::<Result<_>>()?;
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in gains {
            let better = match best {
                None => true,
                Some((b, bg)) => g > bg || (g == bg && self.images[i].image_id < self.images[b].image_id),
            };
            if better {
                best = Some((i, g));
            }
        }
        Ok(best.map(|(i, _)| i))
    }
}

/// `q = (I, v̂, Λ_v̂)`. The prediction is empty while the model has no template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub image_id: String,
    pub template_id: Option<u32>,
    pub template_name: Option<String>,
    pub bbox: Option<BBox>,
}

/// Wire form of an answer. Which optional fields are allowed depends on `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRecord {
    pub kind: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_name: Option<String>,
}

/// The five answer types. Boxes are drawn on the unmirrored image.
#[derive(Debug, Clone, PartialEq)]
pub enum Answer {
    /// 1: template and location are right.
    Correct,
    /// 2: right template, wrong location.
    Relocate { bbox: BBox },
    /// 3: wrong template; the user names the right one and whether the object is flipped.
    Retemplate { bbox: BBox, template_id: u32, flipped: bool },
    /// 4: the part shows a template the model does not have yet.
    NewTemplate { bbox: BBox, name: Option<String> },
    /// 5: the part is not in the image.
    Absent,
}

impl Answer {
    pub fn kind(&self) -> u8 {
        match self {
            Answer::Correct => 1,
            Answer::Relocate { .. } => 2,
            Answer::Retemplate { .. } => 3,
            Answer::NewTemplate { .. } => 4,
            Answer::Absent => 5,
        }
    }

    pub fn bbox(&self) -> Option<BBox> {
        match self {
            Answer::Relocate { bbox } | Answer::Retemplate { bbox, .. } | Answer::NewTemplate { bbox, .. } => Some(*bbox),
            Answer::Correct | Answer::Absent => None,
        }
    }
}

impl TryFrom<AnswerRecord> for Answer {
    type Error = Error;

    fn try_from(r: AnswerRecord) -> Result<Answer> {
        let unexpected = |field: &str| Err(Error::InvalidAnswer(format!("kind {} does not take `{field}`", r.kind)));
        let bbox = |r: &AnswerRecord| -> Result<BBox> {
            let b = r.bbox.ok_or(Error::MissingBbox(r.kind))?;
            if b.is_degenerate() {
                return Err(Error::DegenerateBox);
            }
            Ok(b)
        };
        match r.kind {
            1 | 5 => {
                if r.bbox.is_some() {
                    return unexpected("bbox");
                }
                if r.template_id.is_some() {
                    return unexpected("template_id");
                }
                if r.flipped.is_some() {
                    return unexpected("flipped");
                }
                if r.template_name.is_some() {
                    return unexpected("template_name");
                }
                Ok(if r.kind == 1 { Answer::Correct } else { Answer::Absent })
            }
            2 => {
                if r.template_id.is_some() {
                    return unexpected("template_id");
                }
                if r.flipped.is_some() {
                    return unexpected("flipped");
                }
                if r.template_name.is_some() {
                    return unexpected("template_name");
                }
                Ok(Answer::Relocate { bbox: bbox(&r)? })
            }
            3 => {
                let bbox = bbox(&r)?;
                if r.template_name.is_some() {
                    return unexpected("template_name");
                }
                let template_id = r
                    .template_id
                    .ok_or_else(|| Error::InvalidAnswer("kind 3 requires `template_id`".into()))?;
                let flipped = r
                    .flipped
                    .ok_or_else(|| Error::InvalidAnswer("kind 3 requires `flipped`".into()))?;
                Ok(Answer::Retemplate {
                    bbox,
                    template_id,
                    flipped,
                })
            }
            4 => {
                if r.template_id.is_some() {
                    return unexpected("template_id");
                }
                if r.flipped.is_some() {
                    return unexpected("flipped");
                }
                Ok(Answer::NewTemplate {
                    bbox: bbox(&r)?,
                    name: r.template_name,
                })
            }
            k => Err(Error::InvalidAnswer(format!("unknown answer kind {k}"))),
        }
    }
}

impl From<&Answer> for AnswerRecord {
    fn from(a: &Answer) -> Self {
        let mut r = AnswerRecord {
            kind: a.kind(),
            bbox: a.bbox(),
            template_id: None,
            flipped: None,
            template_name: None,
        };
        match a {
            Answer::Retemplate {
                template_id, flipped, ..
            } => {
                r.template_id = Some(*template_id);
                r.flipped = Some(*flipped);
            }
            Answer::NewTemplate { name, .. } => r.template_name = name.clone(),
            _ => {}
        }
        r
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub question: Question,
    pub answer: AnswerRecord,
}

/// Source of answers: a person behind the annotation UI or a scripted oracle.
pub trait AnswerSource {
    fn answer(&mut self, question: &Question, model: &AogModel) -> Result<Answer>;
}

/// Rectified top-layer activations of every image, flattened.
fn top_layer_features(corpus: &Corpus, layer_name: &str) -> Result<BTreeMap<String, Vec<f64>>> {
    corpus
        .maps()
        .iter()
        .map(|m| {
            let layer = m
                .layer_by_name(layer_name)
                .ok_or_else(|| Error::LayerMismatch(format!("{:?} has no layer {layer_name:?}", m.image_id)))?;
            let f = layer.raw.iter().map(|&a| (a as f64).max(0.0)).collect();
            Ok((m.image_id.clone(), f))
        })
        .collect()
}

/// Diagonal reliability `M_ii ∝ exp(mean normalized activation of dimension i)`, scaled
/// so that the largest entry is 1.
fn reliability_weights(corpus: &Corpus, layer_name: &str) -> Result<Vec<f64>> {
    let mut sums: Option<Vec<f64>> = None;
    for m in corpus.maps() {
        let layer = m
            .layer_by_name(layer_name)
            .ok_or_else(|| Error::LayerMismatch(format!("{:?} has no layer {layer_name:?}", m.image_id)))?;
        let x = layer
            .normalized
            .as_ref()
            .ok_or_else(|| Error::NotNormalized(m.image_id.clone()))?;
        let acc = sums.get_or_insert_with(|| vec![0.0; x.len()]);
        for (s, v) in acc.iter_mut().zip(x) {
            *s += v;
        }
    }
    let sums = sums.ok_or(Error::EmptyCorpus)?;
    let n = corpus.len() as f64;
    let max = sums.iter().map(|s| s / n).fold(f64::NEG_INFINITY, f64::max);
    Ok(sums.iter().map(|s| (s / n - max).exp()).collect())
}

/// One active-QA session: a single mutator over the model and the image pools.
#[derive(Debug, Clone)]
pub struct QaSession {
    corpus: Arc<Corpus>,
    config: QaConfig,
    model: AogModel,
    annotated: BTreeSet<String>,
    unannotated: BTreeSet<String>,
    absent: BTreeSet<String>,
    prior: BTreeMap<String, f64>,
    estimate: BTreeMap<String, f64>,
    parses: BTreeMap<String, ParseResult>,
    features: BTreeMap<String, Vec<f64>>,
    reliability: Vec<f64>,
    log: Vec<LogEntry>,
    rng: ChaCha8Rng,
}

impl QaSession {
    /// Starts with an empty model over the corpus' deepest `miner.valid_layers` layers;
    /// `P(+1) = 1` and `Q(+1) = 0` everywhere.
    pub fn new(corpus: Arc<Corpus>, semantic_part: &str, config: QaConfig) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let metas = corpus.layer_metas();
        let layers = config.miner.mined_layers(metas.len());
        let model = AogModel::new(semantic_part, metas[layers].to_vec(), config.weights);
        let top = model
            .layer_metas
            .last()
            .ok_or_else(|| Error::Config("corpus has no layers".into()))?
            .name
            .clone();
        let features = top_layer_features(&corpus, &top)?;
        let reliability = reliability_weights(&corpus, &top)?;
        let ids: BTreeSet<String> = corpus.ids().map(str::to_string).collect();
        let seed = match config.selection {
            SelectionStrategy::Random { seed } => seed,
            SelectionStrategy::KlGain => 0,
        };
        Ok(QaSession {
            prior: ids.iter().map(|id| (id.clone(), 1.0)).collect(),
            estimate: ids.iter().map(|id| (id.clone(), 0.0)).collect(),
            unannotated: ids,
            annotated: BTreeSet::new(),
            absent: BTreeSet::new(),
            parses: BTreeMap::new(),
            features,
            reliability,
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            corpus,
            config,
            model,
        })
    }

    pub fn model(&self) -> &AogModel {
        &self.model
    }

    pub fn config(&self) -> &QaConfig {
        &self.config
    }

    pub fn corpus(&self) -> &Arc<Corpus> {
        &self.corpus
    }

    pub fn annotated(&self) -> &BTreeSet<String> {
        &self.annotated
    }

    pub fn unannotated(&self) -> &BTreeSet<String> {
        &self.unannotated
    }

    pub fn absent(&self) -> &BTreeSet<String> {
        &self.absent
    }

    pub fn prior(&self, image_id: &str) -> Option<f64> {
        self.prior.get(image_id).copied()
    }

    pub fn estimate(&self, image_id: &str) -> Option<f64> {
        self.estimate.get(image_id).copied()
    }

    pub fn parse(&self, image_id: &str) -> Option<&ParseResult> {
        self.parses.get(image_id)
    }

    pub fn log(&self) -> &[LogEntry] {
        &self.log
    }

    pub fn questions_asked(&self) -> usize {
        self.log.len()
    }

    pub fn remaining_budget(&self) -> usize {
        self.config.budget.saturating_sub(self.log.len())
    }

    /// True once the budget is spent or no image is left to ask about.
    pub fn is_finished(&self) -> bool {
        self.remaining_budget() == 0 || self.unannotated.is_empty()
    }

    /// Current `KL(P || Q)` over the images that may contain the part.
    pub fn kl_divergence(&self) -> f64 {
        let ids: Vec<&String> = self.annotated.iter().chain(&self.unannotated).collect();
        let p: Vec<f64> = ids.iter().map(|id| self.prior[*id]).collect();
        let q: Vec<f64> = ids.iter().map(|id| self.estimate[*id]).collect();
        kl_divergence(&p, &q)
    }

    /// Inputs of the gain ranking, images in id order.
    pub fn selection_state(&self) -> Result<SelectionState> {
        let mut images = Vec::new();
        for (id, status) in self
            .annotated
            .iter()
            .map(|id| (id, PoolStatus::Annotated))
            .chain(self.unannotated.iter().map(|id| (id, PoolStatus::Unannotated)))
        {
            let parse = self.parses.get(id);
            images.push(SelectionImage {
                image_id: id.clone(),
                status,
                s_top: parse.map_or(0.0, |p| p.score),
                template: parse.map(|p| p.template_id),
                features: self.features[id].clone(),
                prior: self.prior[id],
            });
        }
        images.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        Ok(SelectionState {
            images,
            reliability: self.reliability.clone(),
            alpha: self.config.alpha,
        })
    }

    /// Predicted gain of asking about `image_id`.
    pub fn predict_selection_gain(&self, image_id: &str) -> Result<f64> {
        if !self.unannotated.contains(image_id) {
            return Err(Error::UnknownImage(image_id.to_string()));
        }
        let state = self.selection_state()?;
        let idx = state
            .images
            .iter()
            .position(|i| i.image_id == image_id)
            .expect("unannotated images are in the state");
        state.gain(idx)
    }

    fn question_for(&self, image_id: &str) -> Question {
        match self.parses.get(image_id) {
            Some(p) => Question {
                image_id: image_id.to_string(),
                template_id: Some(p.template_id),
                template_name: self.model.template(p.template_id).map(|t| t.name.clone()),
                bbox: Some(p.bbox),
            },
            None => Question {
                image_id: image_id.to_string(),
                template_id: None,
                template_name: None,
                bbox: None,
            },
        }
    }

    /// Picks the next image to ask about and fills in the current prediction for it.
    pub fn select_question(&mut self) -> Result<Question> {
        if self.unannotated.is_empty() {
            return Err(Error::PoolExhausted);
        }
        let image_id = match self.config.selection {
            SelectionStrategy::Random { .. } => {
                let i = self.rng.random_range(0..self.unannotated.len());
                self.unannotated.iter().nth(i).expect("index in range").clone()
            }
            SelectionStrategy::KlGain if self.model.templates.is_empty() => {
                self.unannotated.first().expect("non-empty pool").clone()
            }
            SelectionStrategy::KlGain => {
                let state = self.selection_state()?;
                let idx = state.select()?.ok_or(Error::PoolExhausted)?;
                state.images[idx].image_id.clone()
            }
        };
        Ok(self.question_for(&image_id))
    }

    /// Applies an answer to `question` and updates pools, priors, model and caches.
    pub fn apply_answer(&mut self, question: &Question, answer: &Answer) -> Result<()> {
        let id = question.image_id.clone();
        if !self.unannotated.contains(&id) {
            return Err(Error::UnknownImage(id));
        }
        let fmap = self.corpus.get(&id).ok_or_else(|| Error::UnknownImage(id.clone()))?;
        let width = fmap.image_size.0;
        let annotation = match answer {
            Answer::Correct | Answer::Absent => None,
            Answer::Relocate { bbox } => {
                let template_id = question
                    .template_id
                    .ok_or_else(|| Error::InvalidAnswer("kind 2 needs a predicted template".into()))?;
                if self.model.template(template_id).is_none() {
                    return Err(Error::UnknownTemplate(template_id));
                }
                Some((Annotation::ingest(&id, *bbox, template_id, false, width), None))
            }
            Answer::Retemplate {
                bbox,
                template_id,
                flipped,
            } => {
                if self.model.template(*template_id).is_none() {
                    return Err(Error::UnknownTemplate(*template_id));
                }
                Some((Annotation::ingest(&id, *bbox, *template_id, *flipped, width), None))
            }
            Answer::NewTemplate { bbox, name } => {
                let template_id = self.model.fresh_template_id();
                Some((Annotation::ingest(&id, *bbox, template_id, false, width), name.clone()))
            }
        };

        if let Some((annotation, name)) = annotation {
            annotation.validate(fmap.image_size)?;
            let pool: Vec<&str> = self
                .unannotated
                .iter()
                .filter(|other| **other != id)
                .map(String::as_str)
                .collect();
            self.model = grow_or_refine(
                &self.model,
                annotation,
                name.as_deref(),
                &self.corpus,
                &pool,
                &self.config.miner,
            )?;
        }

        self.unannotated.remove(&id);
        if matches!(answer, Answer::Absent) {
            self.absent.insert(id.clone());
            self.prior.insert(id.clone(), 0.0);
            self.estimate.remove(&id);
            self.parses.remove(&id);
        } else {
            self.annotated.insert(id.clone());
            self.prior.insert(id.clone(), 1.0);
        }
        self.log.push(LogEntry {
            question: question.clone(),
            answer: AnswerRecord::from(answer),
        });

        let asked: Vec<f64> = self
            .annotated
            .iter()
            .chain(&self.absent)
            .map(|i| self.prior[i])
            .collect();
        let mean = asked.iter().sum::<f64>() / asked.len() as f64;
        for other in &self.unannotated {
            self.prior.insert(other.clone(), mean);
        }

        if answer.bbox().is_some() {
            self.refresh_parses()?;
        }
        Ok(())
    }

    /// Re-parses every image that may contain the part and recomputes `Q`.
    fn refresh_parses(&mut self) -> Result<()> {
        let ids: Vec<&String> = self.annotated.iter().chain(&self.unannotated).collect();
        let parser = Parser::new(&self.model);
        let corpus = &self.corpus;
        let parses: Vec<ParseResult> = ids
            .par_iter()
            .map(|id| parser.parse(corpus.get(id).expect("pool ids come from the corpus")))
            .collect::<Result<_>>()?;
        self.parses = parses.into_iter().map(|p| (p.image_id.clone(), p)).collect();
        for (id, p) in &self.parses {
            self.estimate.insert(id.clone(), estimate_q(p.score, self.config.beta));
        }
        Ok(())
    }
}

/// Runs the select/answer loop until the budget is spent or the pool is empty.
pub fn run_session(
    corpus: Arc<Corpus>,
    semantic_part: &str,
    oracle: &mut dyn AnswerSource,
    config: QaConfig,
) -> Result<(AogModel, Vec<LogEntry>)> {
    let mut session = QaSession::new(corpus, semantic_part, config)?;
    while !session.is_finished() {
        let question = session.select_question()?;
        let answer = oracle
            .answer(&question, session.model())
            .map_err(|e| match e {
                Error::OracleFailure(_) => e,
                other => Error::OracleFailure(other.to_string()),
            })?;
        session.apply_answer(&question, &answer)?;
    }
    Ok((session.model, session.log))
}
