//! How concentrated a parse is on strongly firing units, per layer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmap::FeatureMapSet;
use crate::model::AogModel;
use crate::parser::{ParseResult, UnitRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerActivationStats {
    pub layer: String,
    /// Distinct units the parse selected in this layer.
    pub inferred_units: usize,
    /// Share of the layer's total activation held by the inferred units.
    pub energy_ratio: f64,
    /// Mean activation of inferred units over the mean of all units.
    pub relative_magnitude: f64,
    /// Fraction of inferred units firing above the layer mean.
    pub activation_ratio: f64,
}

/// Statistics over normalized activations for every layer holding at least one inferred
/// unit, in model layer order.
pub fn pattern_activation_stats(
    model: &AogModel,
    parse: &ParseResult,
    fmap: &FeatureMapSet,
) -> Result<Vec<LayerActivationStats>> {
    let units: BTreeSet<UnitRef> = parse.assignments.iter().map(|a| a.unit).collect();
    if units.is_empty() {
        return Err(Error::EmptyLayer(format!("parse of {:?} selected no units", parse.image_id)));
    }
    let binding = fmap.bind(&model.layer_metas)?;
    let mut out = Vec::new();
    for (li, meta) in model.layer_metas.iter().enumerate() {
        let inferred: Vec<&UnitRef> = units.iter().filter(|u| u.layer == li).collect();
        if inferred.is_empty() {
            continue;
        }
        let layer = &fmap.layers[binding[li]];
        let x = layer
            .normalized
            .as_ref()
            .ok_or_else(|| Error::NotNormalized(fmap.image_id.clone()))?;
        if x.is_empty() {
            return Err(Error::EmptyLayer(meta.name.clone()));
        }
        let total: f64 = x.iter().sum();
        let tau = total / x.len() as f64;
        let vals: Vec<f64> = inferred
            .iter()
            .map(|u| x[meta.index(u.channel, u.row, u.col)])
            .collect();
        let sum: f64 = vals.iter().sum();
        let mean = sum / vals.len() as f64;
        out.push(LayerActivationStats {
            layer: meta.name.clone(),
            inferred_units: vals.len(),
            energy_ratio: if total > 0.0 { sum / total } else { 0.0 },
            relative_magnitude: if tau > 0.0 { mean / tau } else { 0.0 },
            activation_ratio: vals.iter().filter(|&&v| v > tau).count() as f64 / vals.len() as f64,
        });
    }
    Ok(out)
}
