//! CSV dumps written by evaluation and read by the analyses.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::context::SyntheticUtterance;
use crate::error::{Error, Result};
use crate::gates::GateRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub utt: usize,
    pub frame: usize,
    /// 1 = speech, 0 = silence.
    pub label: u8,
    pub energy: f64,
}

/// One decoder output token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub utt: usize,
    pub position: usize,
    pub token_id: usize,
    pub surface: String,
    pub starts_word: u8,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// `utt, frame, f0 … f{F-1}` rows for every frame of every utterance.
pub fn write_features(path: &Path, dataset: &[SyntheticUtterance]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let f = dataset.first().map_or(0, |u| u.feature_dim);
    let mut header = vec!["utt".to_string(), "frame".to_string()];
    header.extend((0..f).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for u in dataset {
        for t in 0..u.frames {
            let mut row = vec![u.id.to_string(), t.to_string()];
            row.extend(u.features[t * f..(t + 1) * f].iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-frame feature rows of one dump: `(utt, frame, values)`.
pub fn read_features(path: &Path) -> Result<Vec<(usize, usize, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .ok_or_else(|| Error::Format("short feature row".into()))?
                .parse::<f64>()
                .map_err(|e| Error::Format(e.to_string()))
        };
        let utt = num(0)? as usize;
        let frame = num(1)? as usize;
        let values = (2..rec.len()).map(num).collect::<Result<Vec<_>>>()?;
        out.push((utt, frame, values));
    }
    Ok(out)
}

/// The dump files of one evaluation directory.
#[derive(Debug, Clone, Default)]
pub struct EvalDump {
    pub gates: Vec<GateRecord>,
    pub frames: Vec<FrameRecord>,
    pub tokens: Vec<TokenRecord>,
}

impl EvalDump {
    /// Reads `gates.csv` plus whichever of `frames.csv` / `tokens.csv` exist.
    pub fn load(dir: &Path) -> Result<Self> {
        let gates = read_csv(&dir.join("gates.csv"))?;
        let optional = |name: &str| dir.join(name).exists();
        let frames = if optional("frames.csv") {
            read_csv(&dir.join("frames.csv"))?
        } else {
            Vec::new()
        };
        let tokens = if optional("tokens.csv") {
            read_csv(&dir.join("tokens.csv"))?
        } else {
            Vec::new()
        };
        Ok(Self {
            gates,
            frames,
            tokens,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("gates.csv"), &self.gates)?;
        write_csv(&dir.join("frames.csv"), &self.frames)?;
        write_csv(&dir.join("tokens.csv"), &self.tokens)
    }
}
