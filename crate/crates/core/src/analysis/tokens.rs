//! Source-attention usage of word-initial versus word-internal tokens.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::dump::TokenRecord;
use super::stats::{mann_whitney_u, welch_t, StatTestResult};
use crate::error::{Error, Result};
use crate::gates::GateRecord;
use crate::model::{ModuleKind, Stage};
use crate::train::starts_word;

/// A decoder output token with its gate decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGateRecord {
    pub utt: usize,
    pub position: usize,
    pub token_id: usize,
    pub surface: String,
    /// Derived from the surface form only.
    pub starts_word: bool,
    /// `(layer, module_kind) → decision`.
    pub decisions: BTreeMap<(usize, String), u8>,
}

impl TokenGateRecord {
    /// Fraction of decoder layers whose source attention ran for this token.
    pub fn src_attention_rate(&self) -> Option<f64> {
        let name = ModuleKind::DecSrcAttn.name();
        let v: Vec<u8> = self
            .decisions
            .iter()
            .filter(|((_, m), _)| m == name)
            .map(|(_, &d)| d)
            .collect();
        (!v.is_empty()).then(|| v.iter().map(|&d| f64::from(d)).sum::<f64>() / v.len() as f64)
    }
}

/// Joins decoder gate rows with the token dump. Special tokens (surfaces in
/// angle brackets) are skipped.
pub fn token_gate_records(
    gates: &[GateRecord],
    tokens: &[TokenRecord],
) -> Result<Vec<TokenGateRecord>> {
    let mut by_pos: HashMap<(usize, usize), BTreeMap<(usize, String), u8>> = HashMap::new();
    for g in gates.iter().filter(|g| g.stage == Stage::Decoder) {
        by_pos
            .entry((g.utt, g.position))
            .or_default()
            .insert((g.layer, g.module_kind.clone()), g.decision);
    }
    if by_pos.is_empty() {
        return Err(Error::Contract("gate dump has no decoder rows".into()));
    }
    tokens
        .iter()
        .filter(|t| !t.surface.starts_with('<'))
        .map(|t| {
            let decisions = by_pos.get(&(t.utt, t.position)).cloned().ok_or_else(|| {
                Error::Contract(format!(
                    "no decoder gates for utterance {} position {}",
                    t.utt, t.position
                ))
            })?;
            Ok(TokenGateRecord {
                utt: t.utt,
                position: t.position,
                token_id: t.token_id,
                starts_word: starts_word(&t.surface),
                surface: t.surface.clone(),
                decisions,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    /// `pooled` or `layer<i>`.
    pub scope: String,
    pub n_word_start: usize,
    pub n_word_internal: usize,
    pub mean_word_start: Option<f64>,
    pub mean_word_internal: Option<f64>,
    /// Absent when a group is empty or the test is undefined.
    pub mann_whitney: Option<StatTestResult>,
    pub welch: Option<StatTestResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStatsReport {
    pub schema_version: u32,
    pub pooled: GroupComparison,
    pub per_layer: Vec<GroupComparison>,
}

fn compare(scope: String, start: &[f64], internal: &[f64]) -> GroupComparison {
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    GroupComparison {
        scope,
        n_word_start: start.len(),
        n_word_internal: internal.len(),
        mean_word_start: mean(start),
        mean_word_internal: mean(internal),
        mann_whitney: mann_whitney_u(start, internal).ok(),
        welch: welch_t(start, internal).ok(),
    }
}

/// Source-attention keep rate split by whether the token starts a word,
/// pooled over layers and per layer, each with both tests.
pub fn src_attention_token_stats(records: &[TokenGateRecord]) -> TokenStatsReport {
    let mut start = Vec::new();
    let mut internal = Vec::new();
    for r in records {
        if let Some(rate) = r.src_attention_rate() {
            if r.starts_word {
                start.push(rate);
            } else {
                internal.push(rate);
            }
        }
    }
    let name = ModuleKind::DecSrcAttn.name();
    let layers: Vec<usize> = {
        let mut l: Vec<usize> = records
            .iter()
            .flat_map(|r| {
                r.decisions
                    .keys()
                    .filter(|(_, m)| m == name)
                    .map(|(l, _)| *l)
            })
            .collect();
        l.sort_unstable();
        l.dedup();
        l
    };
    let per_layer = layers
        .into_iter()
        .map(|layer| {
            let key = (layer, name.to_string());
            let (mut s, mut i) = (Vec::new(), Vec::new());
            for r in records {
                if let Some(&d) = r.decisions.get(&key) {
                    if r.starts_word {
                        s.push(f64::from(d));
                    } else {
                        i.push(f64::from(d));
                    }
                }
            }
            compare(format!("layer{layer}"), &s, &i)
        })
        .collect();
    TokenStatsReport {
        schema_version: 1,
        pooled: compare("pooled".into(), &start, &internal),
        per_layer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(starts: bool, decisions: &[u8]) -> TokenGateRecord {
        TokenGateRecord {
            utt: 0,
            position: 0,
            token_id: 4,
            surface: if starts { " t4".into() } else { "t5".into() },
            starts_word: starts,
            decisions: decisions
                .iter()
                .enumerate()
                .map(|(l, &d)| ((l, "src_attn".to_string()), d))
                .collect(),
        }
    }

    #[test]
    fn counts_partition_input() {
        let recs: Vec<_> = (0..7)
            .map(|i| record(i % 3 == 0, &[1, (i % 2) as u8]))
            .collect();
        let r = src_attention_token_stats(&recs);
        assert_eq!(r.pooled.n_word_start + r.pooled.n_word_internal, 7);
        assert_eq!(r.pooled.n_word_start, 3);
        assert_eq!(r.per_layer.len(), 2);
    }

    #[test]
    fn empty_group_marks_tests_absent() {
        let recs: Vec<_> = (0..4).map(|_| record(true, &[1, 0])).collect();
        let r = src_attention_token_stats(&recs);
        assert!(r.pooled.mann_whitney.is_none());
        assert!(r.pooled.welch.is_none());
    }

    #[test]
    fn join_skips_special_tokens() {
        let gates = vec![GateRecord {
            utt: 2,
            stage: Stage::Decoder,
            layer: 0,
            module_kind: "src_attn".into(),
            position: 0,
            probability: 0.8,
            decision: 1,
        }];
        let tokens = vec![
            TokenRecord {
                utt: 2,
                position: 0,
                token_id: 4,
                surface: " t4".into(),
                starts_word: 1,
            },
            TokenRecord {
                utt: 2,
                position: 1,
                token_id: 0,
                surface: "</s>".into(),
                starts_word: 0,
            },
        ];
        let recs = token_gate_records(&gates, &tokens).unwrap();
        assert_eq!(recs.len(), 1);
        assert!(recs[0].starts_word);
        assert_eq!(recs[0].src_attention_rate(), Some(1.0));
    }
}
