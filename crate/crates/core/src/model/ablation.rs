//! Zero-ablation plans: which components write nothing this forward.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::report::write_atomic;

/// A component of one layer that can be zero-ablated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Component {
    SelfHead(usize),
    CrossHead(usize),
    AllSelfHeads,
    AllCrossHeads,
    Mlp,
    EntireLayer,
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::SelfHead(i) => write!(f, "self_head[{i}]"),
            Component::CrossHead(i) => write!(f, "cross_head[{i}]"),
            Component::AllSelfHeads => write!(f, "all_self_heads"),
            Component::AllCrossHeads => write!(f, "all_cross_heads"),
            Component::Mlp => write!(f, "mlp"),
            Component::EntireLayer => write!(f, "entire_layer"),
        }
    }
}

/// Set of (layer, component) ablation targets. Layers index the decoder
/// stack; the encoder of an encoder-decoder model is never ablated.
/// Duplicate entries collapse.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AblationPlan {
    entries: BTreeSet<(usize, Component)>,
}

impl AblationPlan {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Shared empty plan for call sites that don't ablate anything.
    pub fn none() -> &'static AblationPlan {
        static EMPTY: AblationPlan = AblationPlan { entries: BTreeSet::new() };
        &EMPTY
    }

    pub fn single(layer: usize, component: Component) -> Self {
        let mut p = Self::default();
        p.add(layer, component);
        p
    }

    pub fn add(&mut self, layer: usize, component: Component) {
        self.entries.insert((layer, component));
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = &(usize, Component)> {
        self.entries.iter()
    }

    /// Checks layer and head indices against a config, and that cross
    /// targets only appear for architectures that have cross-attention.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for &(layer, comp) in &self.entries {
            if layer >= cfg.layers {
                return Err(Error::PlanOutOfBounds {
                    layer,
                    detail: format!("model has {} layers", cfg.layers),
                });
            }
            match comp {
                Component::SelfHead(i) if i >= cfg.heads => {
                    return Err(Error::PlanOutOfBounds {
                        layer,
                        detail: format!("self head {i} out of {} heads", cfg.heads),
                    });
                }
                Component::CrossHead(i) => {
                    if !cfg.is_encoder_decoder() {
                        return Err(Error::PlanOutOfBounds {
                            layer,
                            detail: "cross head target on a decoder-only model".into(),
                        });
                    }
                    if i >= cfg.heads {
                        return Err(Error::PlanOutOfBounds {
                            layer,
                            detail: format!("cross head {i} out of {} heads", cfg.heads),
                        });
                    }
                }
                Component::AllCrossHeads if !cfg.is_encoder_decoder() => {
                    return Err(Error::PlanOutOfBounds {
                        layer,
                        detail: "cross-attention target on a decoder-only model".into(),
                    });
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn ablates_self_head(&self, layer: usize, head: usize) -> bool {
        self.entries.contains(&(layer, Component::SelfHead(head)))
            || self.entries.contains(&(layer, Component::AllSelfHeads))
            || self.entries.contains(&(layer, Component::EntireLayer))
    }

    pub fn ablates_cross_head(&self, layer: usize, head: usize) -> bool {
        self.entries.contains(&(layer, Component::CrossHead(head)))
            || self.entries.contains(&(layer, Component::AllCrossHeads))
            || self.entries.contains(&(layer, Component::EntireLayer))
    }

    pub fn ablates_mlp(&self, layer: usize) -> bool {
        self.entries.contains(&(layer, Component::Mlp))
            || self.entries.contains(&(layer, Component::EntireLayer))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| Error::Malformed {
            path: path.as_ref().display().to_string(),
            detail: e.to_string(),
        })
    }
}

/// File form: a JSON list of `{layer, component, index?}` entries.
#[derive(Serialize, Deserialize)]
struct PlanEntryJson {
    layer: usize,
    component: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    index: Option<usize>,
}

impl Serialize for AblationPlan {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let entries: Vec<PlanEntryJson> = self
            .entries
            .iter()
            .map(|&(layer, comp)| {
                let (component, index) = match comp {
                    Component::SelfHead(i) => ("self_head", Some(i)),
                    Component::CrossHead(i) => ("cross_head", Some(i)),
                    Component::AllSelfHeads => ("all_self_heads", None),
                    Component::AllCrossHeads => ("all_cross_heads", None),
                    Component::Mlp => ("mlp", None),
                    Component::EntireLayer => ("entire_layer", None),
                };
                PlanEntryJson { layer, component: component.into(), index }
            })
            .collect();
        entries.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AblationPlan {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let entries = Vec::<PlanEntryJson>::deserialize(deserializer)?;
        let mut plan = AblationPlan::default();
        for e in entries {
            let comp = match (e.component.as_str(), e.index) {
                ("self_head", Some(i)) => Component::SelfHead(i),
                ("cross_head", Some(i)) => Component::CrossHead(i),
                ("all_self_heads", None) => Component::AllSelfHeads,
                ("all_cross_heads", None) => Component::AllCrossHeads,
                ("mlp", None) => Component::Mlp,
                ("entire_layer", None) => Component::EntireLayer,
                (other, idx) => {
                    return Err(D::Error::custom(format!(
                        "bad plan entry: component {other:?} with index {idx:?}"
                    )))
                }
            };
            plan.add(e.layer, comp);
        }
        Ok(plan)
    }
}
