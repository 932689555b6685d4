//! Running a module under a gate.
//!
//! Temporal execution selects the kept frames (`h`), runs the module on that
//! shorter sequence and zero-pads the result back to full length (`pad`).
//! Utterance-wise execution either runs the module on everything or skips it.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::ModuleGate;
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Dense,
    Temporal,
    Utterance,
}

impl fmt::Display for ExecMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecMode::Dense => "dense",
            ExecMode::Temporal => "temporal",
            ExecMode::Utterance => "utterance",
        })
    }
}

impl FromStr for ExecMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ExecMode::Dense),
            "temporal" => Ok(ExecMode::Temporal),
            "utterance" => Ok(ExecMode::Utterance),
            _ => Err(Error::Parameter(format!("unknown mode {s:?}"))),
        }
    }
}

/// Indices of kept positions, in order.
pub fn kept_indices(keep: &[bool]) -> Vec<usize> {
    keep.iter()
        .enumerate()
        .filter_map(|(i, &k)| k.then_some(i))
        .collect()
}

/// `pad(module(h(x, keep)), keep)`. An empty selection skips the module and
/// returns zeros.
pub fn apply_temporal(
    module: impl FnOnce(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    keep: &[bool],
) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    if keep.len() != t {
        return Err(Error::Contract(format!(
            "temporal mask has {} entries for {t} frames",
            keep.len()
        )));
    }
    let idx = kept_indices(keep);
    if idx.is_empty() {
        return Ok(Tensor::zeros(&[t, d]));
    }
    if idx.len() == t {
        return module(x);
    }
    let y = module(&x.gather_rows(&idx)?)?;
    if y.dims2()?.0 != idx.len() {
        return Err(Error::Contract("module changed the sequence length".into()));
    }
    y.scatter_rows(&idx, t)
}

/// Full module when `keep`, otherwise zeros without evaluating the module.
pub fn apply_utterance(
    module: impl FnOnce(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    keep: bool,
) -> Result<Tensor> {
    if keep {
        module(x)
    } else {
        Ok(Tensor::zeros(x.shape()))
    }
}

/// Runs `module` on `x` under `gate` in `mode`, multiplying by the
/// differentiable mask when the gate carries one. `subset_frames = false`
/// runs the module on every frame and only masks its output (the cgMLP rule).
///
/// During training a temporal gate with pruned frames also evaluates the
/// module densely (without recording a graph) and attaches it to the pruned
/// rows through `mask - detach(mask)`. The forward value is unchanged, but the
/// mask gradient at a pruned frame becomes `<dL/dy_t, module(x)_t>` instead of
/// zero, so a pruned frame can be reopened by the task loss.
pub fn apply_gated(
    mode: ExecMode,
    gate: Option<&ModuleGate>,
    x: &Tensor,
    subset_frames: bool,
    module: impl Fn(&Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let Some(gate) = gate else {
        return module(x);
    };
    let t = x.shape()[0];
    match mode {
        ExecMode::Dense => module(x),
        ExecMode::Temporal => {
            if gate.decisions.len() != t {
                return Err(Error::Contract(format!(
                    "{} gate has {} positions for {t} frames",
                    gate.spec.kind,
                    gate.decisions.len()
                )));
            }
            let y = if subset_frames {
                apply_temporal(&module, x, &gate.decisions)?
            } else if gate.decisions.iter().all(|k| !k) {
                Tensor::zeros(x.shape())
            } else {
                module(x)?
            };
            match &gate.mask {
                Some(m) if subset_frames && gate.decisions.iter().any(|&k| !k) => {
                    let pruned: Vec<f64> = gate
                        .decisions
                        .iter()
                        .map(|&k| if k { 0.0 } else { 1.0 })
                        .collect();
                    let probe = m.sub(&m.detach())?.mul(&Tensor::new(&[t, 1], pruned)?)?;
                    let dense = no_grad(|| module(x))?;
                    y.mul_col(m)?.add(&dense.mul_col(&probe)?)
                }
                Some(m) => y.mul_col(m),
                None if subset_frames || gate.decisions.iter().all(|&k| k) => Ok(y),
                None => {
                    let col: Vec<f64> = gate
                        .decisions
                        .iter()
                        .map(|&k| f64::from(u8::from(k)))
                        .collect();
                    y.mul_col(&Tensor::new(&[t, 1], col)?)
                }
            }
        }
        ExecMode::Utterance => {
            if gate.decisions.len() != 1 {
                return Err(Error::Contract(format!(
                    "utterance gate for {} has {} positions",
                    gate.spec.kind,
                    gate.decisions.len()
                )));
            }
            let y = apply_utterance(module, x, gate.decisions[0])?;
            match (&gate.mask, gate.decisions[0]) {
                (Some(m), true) => y.mul_scalar_tensor(m),
                _ => Ok(y),
            }
        }
    }
}
