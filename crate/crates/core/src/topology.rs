//! Layer-level model topology: parameter counts per layer group, extraction
//! of trainable suffixes under per-category parameter-fraction caps, and the
//! RAM-ratio-driven category selection.
//!
//! Sub-models are always output-side suffixes of the layer list. That is the
//! shape that lets backpropagation stop early below the trainable window,
//! and it is the only shape the category caps are defined against here.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::device::ResourceSnapshot;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("topology has no layers")]
    Empty,
    #[error("duplicate layer name '{0}'")]
    DuplicateLayerName(String),
    #[error("layer '{0}' has zero parameters")]
    ZeroParamLayer(String),
    #[error(
        "no feasible {category} sub-model: the last layer alone holds {last_fraction:.4} of the \
         parameters, above the cap {cap}"
    )]
    NoFeasibleSubModel {
        category: Category,
        cap: f64,
        last_fraction: f64,
    },
    #[error("manifest line {line}: {message}")]
    ManifestParse { line: usize, message: String },
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
}

/// Kind of a layer group; selection math only needs the parameter counts,
/// the kind is carried for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Birnn,
    Fc,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv => "conv",
            LayerKind::Birnn => "birnn",
            LayerKind::Fc => "fc",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub param_count: u64,
}

/// Ordered layer list, input side first.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTopology {
    layers: Vec<LayerSpec>,
}

/// Sub-model size category, largest to smallest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Heavy,
    Medium,
    Light,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Heavy => "heavy",
            Category::Medium => "medium",
            Category::Light => "light",
        };
        f.write_str(s)
    }
}

/// A contiguous trainable suffix of the layer list.
#[derive(Debug, Clone, PartialEq)]
pub struct SubModelSpec {
    pub category: Category,
    /// Index of the first trainable layer (0-based into the layer list).
    pub first_trainable_index: usize,
    pub trainable_layer_count: usize,
    pub trainable_params: u64,
    /// Trainable parameters over total parameters, in (0, 1].
    pub param_fraction: f64,
}

/// RAM-ratio thresholds (r1 > r2 > r3) and parameter-fraction caps per
/// category. Heavy is always capped at 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionThresholds {
    pub r1: f64,
    pub r2: f64,
    pub r3: f64,
    pub medium_cap: f64,
    pub light_cap: f64,
}

impl Default for SelectionThresholds {
    fn default() -> Self {
        SelectionThresholds {
            r1: 0.5,
            r2: 0.35,
            r3: 0.15,
            medium_cap: 0.70,
            light_cap: 0.10,
        }
    }
}

impl SelectionThresholds {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let ordered = 1.0 >= self.r1 && self.r1 > self.r2 && self.r2 > self.r3 && self.r3 > 0.0;
        if !ordered {
            return Err(TopologyError::InvalidThresholds(format!(
                "need 1 >= r1 > r2 > r3 > 0, got ({}, {}, {})",
                self.r1, self.r2, self.r3
            )));
        }
        if !(self.light_cap > 0.0 && self.light_cap < self.medium_cap && self.medium_cap <= 1.0) {
            return Err(TopologyError::InvalidThresholds(format!(
                "need 0 < light_cap < medium_cap <= 1, got ({}, {})",
                self.light_cap, self.medium_cap
            )));
        }
        Ok(())
    }

    pub fn cap_for(&self, category: Category) -> f64 {
        match category {
            Category::Heavy => 1.0,
            Category::Medium => self.medium_cap,
            Category::Light => self.light_cap,
        }
    }
}

impl ModelTopology {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self, TopologyError> {
        if layers.is_empty() {
            return Err(TopologyError::Empty);
        }
        for layer in &layers {
            if layer.param_count == 0 {
                return Err(TopologyError::ZeroParamLayer(layer.name.clone()));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layers[..i].iter().any(|other| other.name == layer.name) {
                return Err(TopologyError::DuplicateLayerName(layer.name.clone()));
            }
        }
        Ok(ModelTopology { layers })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn total_params(&self) -> u64 {
        self.layers.iter().map(|l| l.param_count).sum()
    }

    /// Parses a manifest: one `name kind param_count` record per line,
    /// `#` comments and blank lines ignored, `_` digit separators allowed.
    pub fn from_manifest_str(text: &str) -> Result<Self, TopologyError> {
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(TopologyError::ManifestParse {
                    line: idx + 1,
                    message: format!("expected 'name kind param_count', got '{line}'"),
                });
            }
            let kind = match fields[1] {
                "conv" => LayerKind::Conv,
                "birnn" => LayerKind::Birnn,
                "fc" => LayerKind::Fc,
                other => {
                    return Err(TopologyError::ManifestParse {
                        line: idx + 1,
                        message: format!("unknown layer kind '{other}'"),
                    })
                }
            };
            let count: u64 = fields[2].replace('_', "").parse().map_err(|e| {
                TopologyError::ManifestParse {
                    line: idx + 1,
                    message: format!("bad param count '{}': {e}", fields[2]),
                }
            })?;
            layers.push(LayerSpec {
                name: fields[0].to_string(),
                kind,
                param_count: count,
            });
        }
        ModelTopology::new(layers)
    }

    pub fn from_manifest_file(path: &Path) -> Result<Self, TopologyError> {
        let text = std::fs::read_to_string(path).map_err(|e| TopologyError::ManifestParse {
            line: 0,
            message: format!("cannot read '{}': {e}", path.display()),
        })?;
        Self::from_manifest_str(&text)
    }

    /// Names of the first and last layer of a sub-model's window.
    pub fn window_names(&self, spec: &SubModelSpec) -> (String, String) {
        let first = &self.layers[spec.first_trainable_index];
        let last = &self.layers[self.layers.len() - 1];
        (first.name.clone(), last.name.clone())
    }
}

/// Returns the longest suffix of the layer list whose parameter fraction is
/// within the category's cap. Heavy always spans the full list.
pub fn extract_submodel(
    topology: &ModelTopology,
    category: Category,
    thresholds: &SelectionThresholds,
) -> Result<SubModelSpec, TopologyError> {
    let cap = thresholds.cap_for(category);
    let layers = topology.layers();
    let total = topology.total_params();

    let mut suffix_params = 0u64;
    let mut best: Option<(usize, u64)> = None;
    for k in (0..layers.len()).rev() {
        suffix_params += layers[k].param_count;
        let fraction = suffix_params as f64 / total as f64;
        if fraction <= cap {
            best = Some((k, suffix_params));
        } else {
            break;
        }
    }
    match best {
        Some((first, params)) => Ok(SubModelSpec {
            category,
            first_trainable_index: first,
            trainable_layer_count: layers.len() - first,
            trainable_params: params,
            param_fraction: params as f64 / total as f64,
        }),
        None => Err(TopologyError::NoFeasibleSubModel {
            category,
            cap,
            last_fraction: layers.last().unwrap().param_count as f64 / total as f64,
        }),
    }
}

/// RAM-ratio-gated category selection: ratio ≥ r1 picks Heavy, ≥ r2 Medium,
/// ≥ r3 Light, anything lower skips training this round (`None`). Boundary
/// values select the larger category (≥, not >).
pub fn select_training_mode(
    snapshot: &ResourceSnapshot,
    thresholds: &SelectionThresholds,
    topology: &ModelTopology,
) -> Result<Option<SubModelSpec>, TopologyError> {
    let ratio = snapshot.ram_ratio();
    let category = if ratio >= thresholds.r1 {
        Category::Heavy
    } else if ratio >= thresholds.r2 {
        Category::Medium
    } else if ratio >= thresholds.r3 {
        Category::Light
    } else {
        return Ok(None);
    };
    extract_submodel(topology, category, thresholds).map(Some)
}
