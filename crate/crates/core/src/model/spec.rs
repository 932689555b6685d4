use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Encoder,
    Decoder,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Decoder => "decoder",
        }
    }

    /// Module kinds of one layer, in execution order.
    pub fn kinds(self) -> [ModuleKind; 3] {
        match self {
            Stage::Encoder => ModuleKind::ENCODER,
            Stage::Decoder => ModuleKind::DECODER,
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "encoder" => Ok(Stage::Encoder),
            "decoder" => Ok(Stage::Decoder),
            _ => Err(Error::Format(format!("unknown stage {s:?}"))),
        }
    }
}

/// The prunable module types of the encoder and decoder layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    EncSelfAttn,
    EncCgMlp,
    EncFfn,
    DecSelfAttn,
    DecSrcAttn,
    DecFfn,
}

impl ModuleKind {
    pub const ENCODER: [ModuleKind; 3] = [
        ModuleKind::EncSelfAttn,
        ModuleKind::EncCgMlp,
        ModuleKind::EncFfn,
    ];
    pub const DECODER: [ModuleKind; 3] = [
        ModuleKind::DecSelfAttn,
        ModuleKind::DecSrcAttn,
        ModuleKind::DecFfn,
    ];

    pub fn stage(self) -> Stage {
        match self {
            ModuleKind::EncSelfAttn | ModuleKind::EncCgMlp | ModuleKind::EncFfn => Stage::Encoder,
            _ => Stage::Decoder,
        }
    }

    pub fn index_in_layer(self) -> usize {
        match self {
            ModuleKind::EncSelfAttn | ModuleKind::DecSelfAttn => 0,
            ModuleKind::EncCgMlp | ModuleKind::DecSrcAttn => 1,
            ModuleKind::EncFfn | ModuleKind::DecFfn => 2,
        }
    }

    /// Short name used in dumps, unique within a stage.
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::EncSelfAttn | ModuleKind::DecSelfAttn => "self_attn",
            ModuleKind::EncCgMlp => "cgmlp",
            ModuleKind::DecSrcAttn => "src_attn",
            ModuleKind::EncFfn | ModuleKind::DecFfn => "ffn",
        }
    }

    pub fn parse(stage: Stage, name: &str) -> Result<Self, Error> {
        stage
            .kinds()
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Format(format!("unknown {} module {name:?}", stage.name())))
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.stage().name(), self.name())
    }
}

/// Identity of one prunable module instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PrunableModuleSpec {
    pub kind: ModuleKind,
    pub layer_index: usize,
    pub module_index: usize,
}

impl PrunableModuleSpec {
    pub fn new(kind: ModuleKind, layer_index: usize) -> Self {
        Self {
            kind,
            layer_index,
            module_index: kind.index_in_layer(),
        }
    }

    /// Every prunable module of a stage with `layers` layers.
    pub fn enumerate(stage: Stage, layers: usize) -> Vec<Self> {
        (0..layers)
            .flat_map(|l| stage.kinds().into_iter().map(move |k| Self::new(k, l)))
            .collect()
    }
}
