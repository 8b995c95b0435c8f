//! Planted-motif feature maps with known part locations.
//!
//! Each image shows one template: a fixed set of `(layer, channel, cell offset)` units
//! fires around a sampled part center, everything else is background noise. The
//! generator also writes the ground truth as an oracle file, so the whole pipeline can
//! be exercised without a CNN.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::{write_fmap, FeatureLayer, FeatureMapSet, LayerMeta, FMAP_EXTENSION};
use crate::geometry::{BBox, Point, Size};
use crate::oracle::OracleRecord;
use crate::records::to_jsonl;

pub const ORACLE_FILE: &str = "oracle.jsonl";
pub const SPEC_FILE: &str = "spec.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotifCell {
    pub layer: usize,
    pub channel: usize,
    /// Offset in cells from the cell nearest the part center.
    pub dx: i32,
    pub dy: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub name: String,
    pub cells: Vec<MotifCell>,
    /// Ground-truth part box size in pixels.
    pub part_size: Size,
}

/// How part centers scatter around the frame center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Jitter {
    /// Uniform over `[-radius, radius]` pixels on each axis.
    Uniform { radius: f64 },
    /// `step * k` pixels with integer `k` uniform in `[-steps, steps]`; with `step` a
    /// multiple of every stride, motifs land on identical cells relative to the center.
    Lattice { step: f64, steps: i32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub seed: u64,
    pub images: usize,
    pub templates: Vec<MotifSpec>,
    /// Standard deviation of the additive background noise; motif units fire at
    /// `amplitude` before noise.
    pub noise_sigma: f64,
    pub amplitude: f64,
    pub jitter: Jitter,
    /// Probability that an image does not contain the part.
    #[serde(default)]
    pub absent_rate: f64,
    pub image_size: (u32, u32),
    pub layers: Vec<LayerMeta>,
}

impl SynthSpec {
    /// Two layers shaped like the top of VGG-16 on a 224×224 frame.
    pub fn default_layers() -> Vec<LayerMeta> {
        vec![
            LayerMeta {
                name: "conv5_3".into(),
                channels: 8,
                height: 14,
                width: 14,
                stride_px: 16.0,
                offset_px: 8.0,
                rf_px: 196.0,
            },
            LayerMeta {
                name: "pool5".into(),
                channels: 8,
                height: 7,
                width: 7,
                stride_px: 32.0,
                offset_px: 16.0,
                rf_px: 212.0,
            },
        ]
    }

    /// Random motifs within one cell of the part center. On every layer all templates
    /// share one cell (channel and offset), the part's pose-independent appearance, and
    /// each template adds two cells of its own channels. Templates share those channels
    /// only once a layer runs out of them.
    pub fn random_motifs(seed: u64, count: usize, layers: &[LayerMeta]) -> Vec<MotifSpec> {
        const OWN_CELLS: usize = 2;
        const REACH: i32 = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d_6f74_6966);
        let sizes = [Size { w: 64.0, h: 64.0 }, Size { w: 80.0, h: 56.0 }, Size { w: 56.0, h: 80.0 }];
        let offset = |rng: &mut ChaCha8Rng| (rng.random_range(-REACH..=REACH), rng.random_range(-REACH..=REACH));
        let per_layer: Vec<(Vec<usize>, (i32, i32))> = layers
            .iter()
            .map(|l| {
                let mut order: Vec<usize> = (0..l.channels).collect();
                order.shuffle(&mut rng);
                (order, offset(&mut rng))
            })
            .collect();
        (0..count)
            .map(|t| {
                let mut cells: Vec<MotifCell> = Vec::new();
                for (layer, (order, shared)) in per_layer.iter().enumerate() {
                    cells.push(MotifCell {
                        layer,
                        channel: order[0],
                        dx: shared.0,
                        dy: shared.1,
                    });
                    let own = &order[1.min(order.len() - 1)..];
                    let mut offsets: Vec<(i32, i32)> = Vec::new();
                    while offsets.len() < OWN_CELLS {
                        let o = offset(&mut rng);
                        if !offsets.contains(&o) {
                            offsets.push(o);
                        }
                    }
                    for (k, (dx, dy)) in offsets.into_iter().enumerate() {
                        cells.push(MotifCell {
                            layer,
                            channel: own[(t * OWN_CELLS + k) % own.len()],
                            dx,
                            dy,
                        });
                    }
                }
                MotifSpec {
                    name: format!("pose{t}"),
                    cells,
                    part_size: sizes[t % sizes.len()],
                }
            })
            .collect()
    }

    pub fn standard(seed: u64, images: usize, templates: usize, noise_sigma: f64) -> SynthSpec {
        let layers = Self::default_layers();
        SynthSpec {
            seed,
            images,
            templates: Self::random_motifs(seed, templates, &layers),
            noise_sigma,
            amplitude: 1.0,
            jitter: Jitter::Uniform { radius: 32.0 },
            absent_rate: 0.0,
            image_size: (224, 224),
            layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(Error::Config("at least one template is required".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Config("at least one layer is required".into()));
        }
        for l in &self.layers {
            l.validate()?;
        }
        if !(self.noise_sigma >= 0.0) || !(self.amplitude > 0.0) {
            return Err(Error::Config("noise_sigma must be non-negative and amplitude positive".into()));
        }
        if !(0.0..=1.0).contains(&self.absent_rate) {
            return Err(Error::Config("absent_rate must lie in [0, 1]".into()));
        }
        for t in &self.templates {
            if t.part_size.w <= 0.0 || t.part_size.h <= 0.0 {
                return Err(Error::Config(format!("template {:?} has an empty part box", t.name)));
            }
            if let Some(c) = t.cells.iter().find(|c| c.layer >= self.layers.len()) {
                return Err(Error::Config(format!("template {:?} uses missing layer {}", t.name, c.layer)));
            }
            if let Some(c) = t.cells.iter().find(|c| c.channel >= self.layers[c.layer].channels) {
                return Err(Error::Config(format!(
                    "template {:?} uses missing channel {}",
                    t.name, c.channel
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    /// Raw activations, not normalized.
    pub maps: Vec<FeatureMapSet>,
    pub oracle: Vec<OracleRecord>,
}

/// Cell nearest to `p` along one axis, clamped to the map.
fn nearest_cell(p: f64, meta: &LayerMeta, len: usize) -> i64 {
    let c = ((p - meta.offset_px as f64) / meta.stride_px as f64).round() as i64;
    c.clamp(0, len as i64 - 1)
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let (iw, ih) = spec.image_size;
    let frame_center = Point::new(iw as f64 / 2.0, ih as f64 / 2.0);
    let mut maps = Vec::with_capacity(spec.images);
    let mut oracle = Vec::with_capacity(spec.images);

    for i in 0..spec.images {
        let image_id = format!("img{i:04}");
        let present = spec.absent_rate == 0.0 || rng.random::<f64>() >= spec.absent_rate;
        let template = &spec.templates[i % spec.templates.len()];
        let offset = match spec.jitter {
            Jitter::Uniform { radius } => Point::new(
                rng.random_range(-radius..=radius),
                rng.random_range(-radius..=radius),
            ),
            Jitter::Lattice { step, steps } => Point::new(
                step * rng.random_range(-steps..=steps) as f64,
                step * rng.random_range(-steps..=steps) as f64,
            ),
        };
        let center = frame_center + offset;

        let mut layers = Vec::with_capacity(spec.layers.len());
        for (li, meta) in spec.layers.iter().enumerate() {
            let mut clean = vec![0.0f64; meta.len()];
            if present {
                let r0 = nearest_cell(center.y, meta, meta.height);
                let c0 = nearest_cell(center.x, meta, meta.width);
                for cell in template.cells.iter().filter(|c| c.layer == li) {
                    let (r, c) = (r0 + cell.dy as i64, c0 + cell.dx as i64);
                    if (0..meta.height as i64).contains(&r) && (0..meta.width as i64).contains(&c) {
                        clean[meta.index(cell.channel, r as usize, c as usize)] = spec.amplitude;
                    }
                }
            }
            let raw: Vec<f32> = clean
                .into_iter()
                .map(|v| {
                    let n = if spec.noise_sigma > 0.0 {
                        spec.noise_sigma * noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (v + n).max(0.0) as f32
                })
                .collect();
            layers.push(FeatureLayer::new(meta.clone(), raw)?);
        }
        maps.push(FeatureMapSet::new(image_id.clone(), spec.image_size, layers)?);
        oracle.push(OracleRecord {
            image_id,
            gt_bbox: present.then(|| BBox::from_center(center, template.part_size)),
            gt_template: present.then(|| template.name.clone()),
            present,
            flipped: false,
            image_size: Some(spec.image_size),
        });
    }
    Ok(SynthCorpus { maps, oracle })
}

/// Writes `<image_id>.fmap` per image, the oracle file and the spec into `dir`.
pub fn write_synth(spec: &SynthSpec, corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for m in &corpus.maps {
        fs::write(dir.join(format!("{}.{FMAP_EXTENSION}", m.image_id)), write_fmap(m)?)?;
    }
    fs::write(dir.join(ORACLE_FILE), to_jsonl(&corpus.oracle)?)?;
    fs::write(dir.join(SPEC_FILE), serde_json::to_string_pretty(spec)?)?;
    Ok(())
}
