//! File loaders: PLY point clouds, proposal JSON, `.hvf` patch features,
//! and the per-scene directory layout used by the pipeline.

pub mod features;
pub mod ply;
pub mod proposals;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geometry::{yaw_from_quaternion, AgentSituation, GeometryError, Point3, Quaternion, Scene};

pub use features::{load_patch_features, save_patch_features, FeatureFileError, PatchFeatureSet};
pub use ply::{load_point_cloud, PlyError};
pub use proposals::{load_proposals, save_proposals, LoadedProposals, ProposalError, ProposalLoadOptions};

/// Agent pose as stored on disk. Exactly one of `yaw` (radians) or
/// `rotation` (unit quaternion, `[w, x, y, z]`) must be given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SituationRecord {
    pub position: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yaw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation: Option<[f64; 4]>,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, thiserror::Error)]
pub enum SceneLoadError {
    #[error(transparent)]
    Ply(#[from] PlyError),
    #[error(transparent)]
    Proposals(#[from] ProposalError),
    #[error("situation: {0}")]
    Situation(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("scene id mismatch: directory '{dir}' but proposals say '{file}'")]
    SceneIdMismatch { dir: String, file: String },
}

impl SituationRecord {
    pub fn to_situation(&self) -> Result<AgentSituation, SceneLoadError> {
        let yaw = match (self.yaw, self.rotation) {
            (Some(y), None) => y,
            (None, Some([w, x, y, z])) => yaw_from_quaternion(Quaternion::new(w, x, y, z))?,
            _ => return Err(SceneLoadError::Situation("exactly one of 'yaw' or 'rotation' is required".into())),
        };
        Ok(AgentSituation::new(Point3::from(self.position), yaw, self.description.clone())?)
    }

    pub fn from_situation(s: &AgentSituation) -> Self {
        SituationRecord { position: s.position.to_array(), yaw: Some(s.yaw), rotation: None, description: s.description.clone() }
    }
}

/// File names inside one scene directory.
pub const CLOUD_FILE: &str = "cloud.ply";
pub const PROPOSALS_FILE: &str = "proposals.json";
pub const SITUATION_FILE: &str = "situation.json";

/// Load `<dir>/cloud.ply`, `<dir>/proposals.json` and, when present,
/// `<dir>/situation.json`. The scene id is the directory name.
pub fn load_scene_dir(dir: &Path, opts: ProposalLoadOptions) -> Result<Scene, SceneLoadError> {
    let dir_id = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let points = load_point_cloud(&dir.join(CLOUD_FILE))?;
    let loaded = load_proposals(&dir.join(PROPOSALS_FILE), opts)?;
    if loaded.scene_id != dir_id {
        return Err(SceneLoadError::SceneIdMismatch { dir: dir_id, file: loaded.scene_id });
    }
    let mut scene = Scene::new(loaded.scene_id, points, loaded.proposals)?;
    let sit_path = dir.join(SITUATION_FILE);
    if sit_path.exists() {
        let text = std::fs::read_to_string(&sit_path).map_err(|e| SceneLoadError::Situation(e.to_string()))?;
        let rec: SituationRecord = serde_json::from_str(&text).map_err(|e| SceneLoadError::Situation(e.to_string()))?;
        scene.situation = Some(rec.to_situation()?);
    }
    Ok(scene)
}

/// Scene directories under `root`, sorted by name.
pub fn list_scene_dirs(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join(PROPOSALS_FILE).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}
