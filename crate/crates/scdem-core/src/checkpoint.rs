//! Versioned, self-describing persistence of the full training state:
//! backbones, snapshots, experts, and selectors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::TrainState;
use crate::error::{Result, ScdemError};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub input_dim: usize,
    pub feature_dim: usize,
    pub n_backbones: usize,
    pub tail_layers: usize,
    pub n_experts: usize,
    pub completed_tasks: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    meta: CheckpointMeta,
    state: TrainState,
}

pub fn describe(state: &TrainState) -> CheckpointMeta {
    CheckpointMeta {
        input_dim: state.backbones[0].input_dim(),
        feature_dim: state.backbones[0].feature_dim(),
        n_backbones: state.backbones.len(),
        tail_layers: state.backbones[0].tail_depth(),
        n_experts: state.experts.len(),
        completed_tasks: state.completed_tasks,
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format_version: CHECKPOINT_VERSION,
        meta: describe(state),
        state: clone_for_save(state),
    };
    let text = serde_json::to_string(&file)
        .map_err(|e| ScdemError::CheckpointIntegrity(format!("serialize failed: {e}")))?;
    std::fs::write(path, text).map_err(|e| ScdemError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let text = std::fs::read_to_string(path).map_err(|e| ScdemError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| ScdemError::CheckpointIntegrity(format!("unreadable checkpoint: {e}")))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ScdemError::CheckpointIntegrity("missing format_version".into()))?
        as u32;
    if found != CHECKPOINT_VERSION {
        return Err(ScdemError::CheckpointVersion {
            found,
            supported: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)
        .map_err(|e| ScdemError::CheckpointIntegrity(format!("malformed checkpoint: {e}")))?;
    let mut state = file.state;
    rebuild(&mut state);
    if state.backbones.is_empty() {
        return Err(ScdemError::CheckpointIntegrity("checkpoint holds no backbones".into()));
    }
    Ok(state)
}

/// TrainState is not Clone (the optimizer and diagnostics are transient);
/// round-trip through serde instead, which drops exactly those fields.
fn clone_for_save(state: &TrainState) -> TrainState {
    let text = serde_json::to_string(state).expect("state serializes");
    let mut copy: TrainState = serde_json::from_str(&text).expect("state deserializes");
    rebuild(&mut copy);
    copy
}

/// Name indexes are skipped during serialization; restore them.
fn rebuild(state: &mut TrainState) {
    for bb in &mut state.backbones {
        bb.params.rebuild_index();
    }
    for snap in &mut state.snapshots {
        snap.rebuild_index();
    }
    for e in &mut state.experts {
        e.params.rebuild_index();
        if e.frozen {
            e.params.freeze_all();
        }
    }
    for s in &mut state.selectors {
        s.params.rebuild_index();
    }
}
