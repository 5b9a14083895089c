//! Binary checkpoints of a planner's `theta+`.
//!
//! Layout (little endian): magic `TPCK`, `u32` version, `u32` header length,
//! JSON header, `u32` length of `theta+`, the `f64` entries, then the
//! hypothesis set encoding. Rollout logs are not saved.

use serde::{Deserialize, Serialize};

use super::{DerivedParams, PlannerError, PlannerState, TensorPlan};
use crate::hypothesis::HypothesisSet;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    params: DerivedParams,
    config_seed: u64,
    episode_seed: u64,
    tau_plus: u64,
    next_stage: usize,
}

fn corrupt(m: impl Into<String>) -> PlannerError {
    PlannerError::Checkpoint(m.into())
}

fn read_u32(bytes: &[u8], pos: &mut usize) -> Result<u32, PlannerError> {
    let b = bytes.get(*pos..*pos + 4).ok_or_else(|| corrupt("truncated"))?;
    *pos += 4;
    Ok(u32::from_le_bytes(b.try_into().unwrap()))
}

/// Everything a checkpoint restores.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: DerivedParams,
    pub config_seed: u64,
    pub episode_seed: u64,
    pub next_stage: usize,
    pub state: PlannerState,
}

impl TensorPlan {
    /// Encodes the current `theta+`; `None` before initialisation.
    pub fn checkpoint(&self) -> Option<Vec<u8>> {
        let st = self.state.as_ref()?;
        let header = Header {
            params: self.params.clone(),
            config_seed: self.cfg.seed,
            episode_seed: self.episode_seed,
            tau_plus: st.tau_plus,
            next_stage: self.next_stage,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(st.theta_plus.len() as u32).to_le_bytes());
        for x in &st.theta_plus {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&st.hypothesis.to_bytes());
        Some(out)
    }

    pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, PlannerError> {
        if bytes.get(0..4) != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(corrupt("bad magic"));
        }
        let mut pos = 4;
        let version = read_u32(bytes, &mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let len = read_u32(bytes, &mut pos)? as usize;
        let json = bytes.get(pos..pos + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(e.to_string()))?;
        pos += len;
        let d = read_u32(bytes, &mut pos)? as usize;
        let raw = bytes.get(pos..pos + 8 * d).ok_or_else(|| corrupt("truncated theta"))?;
        let theta_plus = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        pos += 8 * d;
        let (hypothesis, used) = HypothesisSet::from_bytes(&bytes[pos..])?;
        if pos + used != bytes.len() {
            return Err(corrupt("trailing bytes"));
        }
        if hypothesis.d() != d {
            return Err(corrupt("theta length does not match the hypothesis set"));
        }
        Ok(Checkpoint {
            params: header.params,
            config_seed: header.config_seed,
            episode_seed: header.episode_seed,
            next_stage: header.next_stage,
            state: PlannerState {
                theta_plus,
                hypothesis,
                tau_plus: header.tau_plus,
                rollout_log: Vec::new(),
                selections: Vec::new(),
            },
        })
    }

    /// Rebuilds a planner mid-episode from a checkpoint.
    pub fn restore(cfg: super::PlannerConfig, bytes: &[u8]) -> Result<Self, PlannerError> {
        let ck = Self::decode_checkpoint(bytes)?;
        if ck.config_seed != cfg.seed {
            return Err(corrupt("checkpoint was taken under a different seed"));
        }
        let mut plan = Self::with_params(cfg, ck.params);
        plan.episode_seed = ck.episode_seed;
        plan.resume(ck.state, ck.next_stage);
        Ok(plan)
    }
}
