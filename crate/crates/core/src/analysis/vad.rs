//! How closely encoder frame gates follow speech/silence labels.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::dump::FrameRecord;
use crate::error::{Error, Result};
use crate::gates::GateRecord;
use crate::model::Stage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadRow {
    pub layer: usize,
    pub module_kind: String,
    pub speech_frames: usize,
    pub silence_frames: usize,
    pub speech_keep: f64,
    pub silence_keep: f64,
    /// `speech_keep − silence_keep`; absent without both frame classes.
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VadReport {
    pub schema_version: u32,
    pub rows: Vec<VadRow>,
    /// Mean score over the modules of each layer.
    pub layers: Vec<(usize, f64)>,
}

impl VadReport {
    /// Mean of the per-layer scores over layers `>= from` (0-based).
    pub fn mean_from_layer(&self, from: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .layers
            .iter()
            .filter(|(l, _)| *l >= from)
            .map(|(_, s)| *s)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-(layer, module) keep rate on speech frames minus that on silence
/// frames, over the encoder rows of a temporal gate dump.
pub fn vad_likeness(gates: &[GateRecord], frames: &[FrameRecord]) -> Result<VadReport> {
    let labels: HashMap<(usize, usize), u8> =
        frames.iter().map(|f| ((f.utt, f.frame), f.label)).collect();
    // (layer, module) -> [kept_speech, speech, kept_silence, silence]
    let mut acc: BTreeMap<(usize, String), [usize; 4]> = BTreeMap::new();
    for g in gates.iter().filter(|g| g.stage == Stage::Encoder) {
        let label = *labels.get(&(g.utt, g.position)).ok_or_else(|| {
            Error::Contract(format!(
                "no frame label for utterance {} frame {}",
                g.utt, g.position
            ))
        })?;
        let e = acc.entry((g.layer, g.module_kind.clone())).or_default();
        let off = if label == 1 { 0 } else { 2 };
        e[off] += usize::from(g.decision);
        e[off + 1] += 1;
    }
    if acc.is_empty() {
        return Err(Error::Contract("gate dump has no encoder rows".into()));
    }
    let rate = |k: usize, n: usize| if n == 0 { 0.0 } else { k as f64 / n as f64 };
    let rows: Vec<VadRow> = acc
        .into_iter()
        .map(|((layer, module_kind), [ks, s, kq, q])| VadRow {
            layer,
            module_kind,
            speech_frames: s,
            silence_frames: q,
            speech_keep: rate(ks, s),
            silence_keep: rate(kq, q),
            score: (s > 0 && q > 0).then(|| rate(ks, s) - rate(kq, q)),
        })
        .collect();
    let mut per_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in &rows {
        if let Some(s) = r.score {
            per_layer.entry(r.layer).or_default().push(s);
        }
    }
    let layers = per_layer
        .into_iter()
        .map(|(l, v)| (l, v.iter().sum::<f64>() / v.len() as f64))
        .collect();
    Ok(VadReport {
        schema_version: 1,
        rows,
        layers,
    })
}
