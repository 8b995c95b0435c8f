//! Per-image convolutional feature maps and the FMAP container.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "FMAP" | version u32 = 1 | image_id (u16 len + UTF-8) | width u32 | height u32
//! | layer count u16 | per layer:
//!     name (u16 len + UTF-8) | channels u16 | height u16 | width u16
//!     | stride_px f32 | offset_px f32 | rf_px f32
//!     | channels*height*width f32, channel-major then row-major
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Point;

pub const FMAP_MAGIC: [u8; 4] = *b"FMAP";
pub const FMAP_VERSION: u32 = 1;
pub const FMAP_EXTENSION: &str = "fmap";

/// Geometry of one convolutional layer and its projection onto the image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMeta {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub stride_px: f32,
    pub offset_px: f32,
    pub rf_px: f32,
}

/// Image region covered by one neural unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageRegion {
    pub center: Point,
    pub side: f64,
}

impl LayerMeta {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidLayer {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("dimensions must be at least 1");
        }
        if self.height != self.width {
            return bad("feature maps must be square");
        }
        if !(self.stride_px > 0.0) || !self.stride_px.is_finite() {
            return bad("stride must be positive");
        }
        if !(self.rf_px > 0.0) || !self.rf_px.is_finite() {
            return bad("receptive field must be positive");
        }
        if !self.offset_px.is_finite() {
            return bad("offset must be finite");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn len(&self) -> usize {
        self.channels * self.cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.height + row) * self.width + col
    }

    pub fn stride(&self) -> f64 {
        self.stride_px as f64
    }

    /// Center of the unit at `(row, col)`; no bounds check.
    #[inline]
    pub fn unit_center(&self, row: usize, col: usize) -> Point {
        let offset = self.offset_px as f64;
        let stride = self.stride_px as f64;
        Point::new(offset + stride * col as f64, offset + stride * row as f64)
    }

    /// Side of the square deformation range of a latent pattern on this layer.
    pub fn deform_side(&self) -> usize {
        self.height.div_ceil(3)
    }

    /// Same name and dimensions; geometry compared exactly.
    pub fn same_shape(&self, other: &LayerMeta) -> bool {
        self == other
    }
}

/// Receptive-field region of unit `(row, col)` projected onto the image plane.
pub fn unit_to_image_region(meta: &LayerMeta, row: usize, col: usize) -> Result<ImageRegion> {
    if row >= meta.height || col >= meta.width {
        return Err(Error::IndexOutOfRange {
            row,
            col,
            height: meta.height,
            width: meta.width,
        });
    }
    Ok(ImageRegion {
        center: meta.unit_center(row, col),
        side: meta.rf_px as f64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLayer {
    pub meta: LayerMeta,
    pub raw: Vec<f32>,
    /// `X = max(a, 0) / mu_channel`; present once the corpus has been normalized.
    pub normalized: Option<Vec<f64>>,
}

impl FeatureLayer {
    pub fn new(meta: LayerMeta, raw: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if raw.len() != meta.len() {
            return Err(Error::InvalidLayer {
                name: meta.name.clone(),
                reason: format!("grid has {} values, expected {}", raw.len(), meta.len()),
            });
        }
        Ok(FeatureLayer {
            meta,
            raw,
            normalized: None,
        })
    }

    #[inline]
    pub fn raw_at(&self, channel: usize, row: usize, col: usize) -> f32 {
        self.raw[self.meta.index(channel, row, col)]
    }

    /// Normalized response, or `None` before normalization.
    #[inline]
    pub fn x_at(&self, channel: usize, row: usize, col: usize) -> Option<f64> {
        self.normalized
            .as_ref()
            .map(|x| x[self.meta.index(channel, row, col)])
    }

    fn mirrored(&self) -> FeatureLayer {
        let m = &self.meta;
        let flip = |i: usize| {
            let col = i % m.width;
            i - col + (m.width - 1 - col)
        };
        FeatureLayer {
            meta: m.clone(),
            raw: (0..self.raw.len()).map(|i| self.raw[flip(i)]).collect(),
            normalized: self
                .normalized
                .as_ref()
                .map(|x| (0..x.len()).map(|i| x[flip(i)]).collect()),
        }
    }
}

/// All feature maps of one (cropped) object image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMapSet {
    pub image_id: String,
    /// `(width, height)` in pixels.
    pub image_size: (u32, u32),
    pub layers: Vec<FeatureLayer>,
}

impl FeatureMapSet {
    pub fn new(image_id: impl Into<String>, image_size: (u32, u32), layers: Vec<FeatureLayer>) -> Result<Self> {
        let set = FeatureMapSet {
            image_id: image_id.into(),
            image_size,
            layers,
        };
        if set.image_size.0 == 0 || set.image_size.1 == 0 {
            return Err(Error::InvalidLayer {
                name: set.image_id,
                reason: "image size must be positive".into(),
            });
        }
        Ok(set)
    }

    pub fn is_normalized(&self) -> bool {
        self.layers.iter().all(|l| l.normalized.is_some())
    }

    pub fn layer_by_name(&self, name: &str) -> Option<&FeatureLayer> {
        self.layers.iter().find(|l| l.meta.name == name)
    }

    /// Maps each of `metas` onto the index of the identically-shaped layer in this set.
    pub fn bind(&self, metas: &[LayerMeta]) -> Result<Vec<usize>> {
        metas
            .iter()
            .map(|meta| {
                let idx = self
                    .layers
                    .iter()
                    .position(|l| l.meta.name == meta.name)
                    .ok_or_else(|| {
                        Error::LayerMismatch(format!("{:?} has no layer {:?}", self.image_id, meta.name))
                    })?;
                if !self.layers[idx].meta.same_shape(meta) {
                    return Err(Error::LayerMismatch(format!(
                        "layer {:?} of {:?} differs from the model's geometry",
                        meta.name, self.image_id
                    )));
                }
                Ok(idx)
            })
            .collect()
    }

    /// The same object mirrored left-right. Unit `(r, c)` becomes `(r, width-1-c)`, which
    /// matches mirroring the image plane when `2*offset + stride*(width-1)` equals the image width.
    pub fn flipped_horizontal(&self) -> FeatureMapSet {
        FeatureMapSet {
            image_id: self.image_id.clone(),
            image_size: self.image_size,
            layers: self.layers.iter().map(FeatureLayer::mirrored).collect(),
        }
    }

    pub fn diagonal(&self) -> f64 {
        let (w, h) = (self.image_size.0 as f64, self.image_size.1 as f64);
        (w * w + h * h).sqrt()
    }
}

fn read_string<R: Read>(r: &mut R, what: &str) -> Result<String> {
    let len = r.read_u16::<LittleEndian>().map_err(|_| truncated(what))? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|_| truncated(what))?;
    String::from_utf8(buf).map_err(|_| Error::InvalidLayer {
        name: what.to_string(),
        reason: "string is not UTF-8".into(),
    })
}

fn truncated(what: &str) -> Error {
    Error::TruncatedPayload(format!("stream ended inside {what}"))
}

/// Parses an FMAP container. Normalized grids are left empty.
pub fn read_fmap(bytes: &[u8]) -> Result<FeatureMapSet> {
    let mut cur = Cursor::new(bytes);
    let remaining = |c: &Cursor<&[u8]>| bytes.len() - c.position() as usize;

    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| truncated("magic"))?;
    if magic != FMAP_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(|_| truncated("version"))?;
    if version != FMAP_VERSION {
        return Err(Error::BadVersion(version));
    }
    let image_id = read_string(&mut cur, "image id")?;
    let width = cur.read_u32::<LittleEndian>().map_err(|_| truncated("image size"))?;
    let height = cur.read_u32::<LittleEndian>().map_err(|_| truncated("image size"))?;
    let layer_count = cur.read_u16::<LittleEndian>().map_err(|_| truncated("layer count"))?;

    let mut layers = Vec::with_capacity(layer_count as usize);
    for _ in 0..layer_count {
        let name = read_string(&mut cur, "layer name")?;
        let mut dim = || cur.read_u16::<LittleEndian>().map_err(|_| truncated("layer header"));
        let (channels, h, w) = (dim()? as usize, dim()? as usize, dim()? as usize);
        let mut float = || cur.read_f32::<LittleEndian>().map_err(|_| truncated("layer header"));
        let (stride_px, offset_px, rf_px) = (float()?, float()?, float()?);
        let count = channels * h * w;
        if count * 4 > remaining(&cur) {
            return Err(Error::TruncatedPayload(format!(
                "layer {name:?} declares {count} values but only {} bytes remain",
                remaining(&cur)
            )));
        }
        let mut raw = vec![0f32; count];
        cur.read_f32_into::<LittleEndian>(&mut raw)
            .map_err(|_| truncated("layer values"))?;
        let meta = LayerMeta {
            name,
            channels,
            height: h,
            width: w,
            stride_px,
            offset_px,
            rf_px,
        };
        layers.push(FeatureLayer::new(meta, raw)?);
    }
    let trailing = remaining(&cur);
    if trailing != 0 {
        return Err(Error::TrailingData(trailing));
    }
    FeatureMapSet::new(image_id, (width, height), layers)
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u16::try_from(s.len())
        .map_err(|_| Error::Config(format!("string of {} bytes does not fit the container", s.len())))?;
    w.write_u16::<LittleEndian>(len)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn dim_u16(value: usize, layer: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::InvalidLayer {
        name: layer.to_string(),
        reason: format!("dimension {value} exceeds the container's u16 limit"),
    })
}

pub fn write_fmap_to<W: Write>(set: &FeatureMapSet, w: &mut W) -> Result<()> {
    w.write_all(&FMAP_MAGIC)?;
    w.write_u32::<LittleEndian>(FMAP_VERSION)?;
    write_string(w, &set.image_id)?;
    w.write_u32::<LittleEndian>(set.image_size.0)?;
    w.write_u32::<LittleEndian>(set.image_size.1)?;
    let count = u16::try_from(set.layers.len()).map_err(|_| Error::Config("too many layers".into()))?;
    w.write_u16::<LittleEndian>(count)?;
    for layer in &set.layers {
        let m = &layer.meta;
        write_string(w, &m.name)?;
        w.write_u16::<LittleEndian>(dim_u16(m.channels, &m.name)?)?;
        w.write_u16::<LittleEndian>(dim_u16(m.height, &m.name)?)?;
        w.write_u16::<LittleEndian>(dim_u16(m.width, &m.name)?)?;
        w.write_f32::<LittleEndian>(m.stride_px)?;
        w.write_f32::<LittleEndian>(m.offset_px)?;
        w.write_f32::<LittleEndian>(m.rf_px)?;
        for &v in &layer.raw {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn write_fmap(set: &FeatureMapSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    write_fmap_to(set, &mut out)?;
    Ok(out)
}

/// Statistic used as the per-channel normalizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStatistic {
    /// Mean over all strictly positive activations of the channel in the corpus.
    #[default]
    MeanPositive,
    /// Mean of `max(a, 0)` over every cell of the channel in the corpus.
    MeanRectified,
    /// Median of the strictly positive activations.
    MedianPositive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub name: String,
    pub channel_means: Vec<f64>,
}

/// Per-layer, per-channel normalizers computed over a corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub statistic: NormStatistic,
    pub layers: Vec<LayerStats>,
}

impl CorpusStats {
    /// Normalizes one feature map set with these statistics.
    pub fn apply(&self, set: &FeatureMapSet) -> Result<FeatureMapSet> {
        let mut out = set.clone();
        for layer in &mut out.layers {
            let stats = self
                .layers
                .iter()
                .find(|s| s.name == layer.meta.name)
                .ok_or_else(|| Error::LayerMismatch(format!("no statistics for layer {:?}", layer.meta.name)))?;
            if stats.channel_means.len() != layer.meta.channels {
                return Err(Error::LayerMismatch(format!(
                    "layer {:?} has {} channels, statistics have {}",
                    layer.meta.name,
                    layer.meta.channels,
                    stats.channel_means.len()
                )));
            }
            let cells = layer.meta.cells();
            let x = layer
                .raw
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let mu = stats.channel_means[i / cells];
                    if mu > 0.0 && a > 0.0 {
                        a as f64 / mu
                    } else {
                        0.0
                    }
                })
                .collect();
            layer.normalized = Some(x);
        }
        Ok(out)
    }
}

fn check_same_layout(maps: &[FeatureMapSet]) -> Result<()> {
    let first = &maps[0];
    for set in &maps[1..] {
        let same = set.layers.len() == first.layers.len()
            && set
                .layers
                .iter()
                .zip(&first.layers)
                .all(|(a, b)| a.meta.name == b.meta.name && a.meta.len() == b.meta.len() && a.meta.channels == b.meta.channels);
        if !same {
            return Err(Error::LayerMismatch(format!(
                "{:?} and {:?} have different layer layouts",
                first.image_id, set.image_id
            )));
        }
    }
    Ok(())
}

pub fn corpus_stats(maps: &[FeatureMapSet], statistic: NormStatistic) -> Result<CorpusStats> {
    if maps.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    check_same_layout(maps)?;
    let layers = maps[0]
        .layers
        .iter()
        .enumerate()
        .map(|(li, layer0)| {
            let meta = &layer0.meta;
            let cells = meta.cells();
            let channel_means = (0..meta.channels)
                .map(|c| {
                    let values = maps
                        .iter()
                        .flat_map(|m| m.layers[li].raw[c * cells..(c + 1) * cells].iter().map(|&a| a as f64));
                    channel_statistic(values, statistic)
                })
                .collect();
            LayerStats {
                name: meta.name.clone(),
                channel_means,
            }
        })
        .collect();
    Ok(CorpusStats { statistic, layers })
}

fn channel_statistic(values: impl Iterator<Item = f64>, statistic: NormStatistic) -> f64 {
    match statistic {
        NormStatistic::MeanPositive => {
            let (sum, n) = values
                .filter(|&a| a > 0.0)
                .fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        }
        NormStatistic::MeanRectified => {
            let (sum, n) = values.fold((0.0, 0usize), |(s, n), a| (s + a.max(0.0), n + 1));
            if n == 0 {
                0.0
            } else {
                sum / n as f64
            }
        }
        NormStatistic::MedianPositive => {
            let mut pos: Vec<f64> = values.filter(|&a| a > 0.0).collect();
            if pos.is_empty() {
                return 0.0;
            }
            pos.sort_by(f64::total_cmp);
            let n = pos.len();
            if n % 2 == 1 {
                pos[n / 2]
            } else {
                (pos[n / 2 - 1] + pos[n / 2]) / 2.0
            }
        }
    }
}

/// Computes corpus statistics and returns normalized copies of every map set.
pub fn normalize_activations(
    maps: &[FeatureMapSet],
    statistic: NormStatistic,
) -> Result<(Vec<FeatureMapSet>, CorpusStats)> {
    let stats = corpus_stats(maps, statistic)?;
    let normalized = maps.iter().map(|m| stats.apply(m)).collect::<Result<Vec<_>>>()?;
    Ok((normalized, stats))
}

/// A normalized collection of feature map sets addressable by image id.
#[derive(Debug, Clone)]
pub struct Corpus {
    maps: Vec<FeatureMapSet>,
    index: HashMap<String, usize>,
    stats: CorpusStats,
}

impl Corpus {
    pub fn from_raw(maps: Vec<FeatureMapSet>, statistic: NormStatistic) -> Result<Self> {
        let (mut normalized, stats) = normalize_activations(&maps, statistic)?;
        normalized.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut index = HashMap::with_capacity(normalized.len());
        for (i, m) in normalized.iter().enumerate() {
            if index.insert(m.image_id.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate image id {:?}", m.image_id)));
            }
        }
        Ok(Corpus {
            maps: normalized,
            index,
            stats,
        })
    }

    /// Loads every `*.fmap` file in `dir` and normalizes them together.
    pub fn load_dir(dir: &Path, statistic: NormStatistic) -> Result<Self> {
        Corpus::from_raw(load_fmap_dir(dir)?, statistic)
    }

    pub fn get(&self, image_id: &str) -> Option<&FeatureMapSet> {
        self.index.get(image_id).map(|&i| &self.maps[i])
    }

    pub fn maps(&self) -> &[FeatureMapSet] {
        &self.maps
    }

    /// Image ids in ascending order.
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.maps.iter().map(|m| m.image_id.as_str())
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    /// Layer geometry shared by every image.
    pub fn layer_metas(&self) -> Vec<LayerMeta> {
        self.maps[0].layers.iter().map(|l| l.meta.clone()).collect()
    }
}

pub fn load_fmap_dir(dir: &Path) -> Result<Vec<FeatureMapSet>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == FMAP_EXTENSION))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_fmap(&fs::read(p)?)).collect()
}
