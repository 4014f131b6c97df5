//! `proposals.json`: object proposals exported by any 3D instance segmenter.
//!
//! ```json
//! {
//!   "scene_id": "scene0000_00",
//!   "proposals": [
//!     { "label": "monitor", "box_min": [-0.4, 1.2, 0.7], "box_max": [0.02, 1.54, 1.22], "confidence": 0.93 }
//!   ]
//! }
//! ```
//!
//! `confidence` is optional and defaults to 1.0.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{Aabb3, GeometryError, ObjectProposal, Point3};

#[derive(Debug, thiserror::Error)]
pub enum ProposalError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("proposal file is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("proposal {index} ('{label}'): {source}")]
    Invalid { index: usize, label: String, source: GeometryError },
    #[error("scene_id is empty")]
    EmptySceneId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalEntry {
    pub label: String,
    pub box_min: [f64; 3],
    pub box_max: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProposalFile {
    pub scene_id: String,
    pub proposals: Vec<ProposalEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProposalLoadOptions {
    /// Drop proposals below this confidence. `None` keeps everything.
    pub min_confidence: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedProposals {
    pub scene_id: String,
    pub proposals: Vec<ObjectProposal>,
}

impl ProposalFile {
    pub fn validate(&self, opts: ProposalLoadOptions) -> Result<LoadedProposals, ProposalError> {
        if self.scene_id.trim().is_empty() {
            return Err(ProposalError::EmptySceneId);
        }
        let mut proposals = Vec::with_capacity(self.proposals.len());
        for (index, e) in self.proposals.iter().enumerate() {
            let invalid = |source| ProposalError::Invalid { index, label: e.label.clone(), source };
            let bbox = Aabb3::new(Point3::from(e.box_min), Point3::from(e.box_max)).map_err(invalid)?;
            let p = ObjectProposal::new(&e.label, bbox, e.confidence.unwrap_or(1.0)).map_err(invalid)?;
            if opts.min_confidence.is_some_and(|t| p.confidence < t) {
                continue;
            }
            proposals.push(p);
        }
        Ok(LoadedProposals { scene_id: self.scene_id.clone(), proposals })
    }

    pub fn from_proposals(scene_id: &str, proposals: &[ObjectProposal]) -> Self {
        ProposalFile {
            scene_id: scene_id.to_string(),
            proposals: proposals
                .iter()
                .map(|p| ProposalEntry {
                    label: p.class_label.clone(),
                    box_min: p.bbox.min.to_array(),
                    box_max: p.bbox.max.to_array(),
                    confidence: Some(p.confidence),
                })
                .collect(),
        }
    }
}

pub fn parse_proposals(json: &str, opts: ProposalLoadOptions) -> Result<LoadedProposals, ProposalError> {
    let file: ProposalFile = serde_json::from_str(json)?;
    file.validate(opts)
}

pub fn load_proposals(path: &Path, opts: ProposalLoadOptions) -> Result<LoadedProposals, ProposalError> {
    let text = std::fs::read_to_string(path).map_err(|source| ProposalError::Io { path: path.display().to_string(), source })?;
    parse_proposals(&text, opts)
}

/// Pretty-printed JSON with a trailing newline.
pub fn proposals_to_json(scene_id: &str, proposals: &[ObjectProposal]) -> String {
    let mut s = serde_json::to_string_pretty(&ProposalFile::from_proposals(scene_id, proposals)).expect("serializable");
    s.push('\n');
    s
}

pub fn save_proposals(path: &Path, scene_id: &str, proposals: &[ObjectProposal]) -> Result<(), ProposalError> {
    std::fs::write(path, proposals_to_json(scene_id, proposals))
        .map_err(|source| ProposalError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const ALL: ProposalLoadOptions = ProposalLoadOptions { min_confidence: None };

    #[test]
    fn single_monitor() {
        let json = r#"{"scene_id":"s0","proposals":[{"label":"Monitor","box_min":[0,0,0],"box_max":[1,1,1],"confidence":0.9}]}"#;
        let got = parse_proposals(json, ALL).unwrap();
        assert_eq!(got.proposals.len(), 1);
        assert_eq!(got.proposals[0].class_label, "monitor");
    }

    #[test]
    fn confidence_defaults_to_one() {
        let json = r#"{"scene_id":"s0","proposals":[{"label":"desk","box_min":[0,0,0],"box_max":[1,1,1]}]}"#;
        assert_eq!(parse_proposals(json, ALL).unwrap().proposals[0].confidence, 1.0);
    }

    #[test]
    fn inverted_box_names_axis() {
        let json = r#"{"scene_id":"s0","proposals":[{"label":"desk","box_min":[1,0,0],"box_max":[0,1,1]}]}"#;
        let err = parse_proposals(json, ALL).unwrap_err();
        assert!(matches!(err, ProposalError::Invalid { index: 0, source: GeometryError::InvertedBox { axis: 'x', .. }, .. }));
        assert!(err.to_string().contains("min.x"), "{err}");
    }

    #[test]
    fn rejects_bad_confidence_and_label() {
        let json = r#"{"scene_id":"s0","proposals":[{"label":"desk","box_min":[0,0,0],"box_max":[1,1,1],"confidence":1.2}]}"#;
        assert!(matches!(parse_proposals(json, ALL), Err(ProposalError::Invalid { source: GeometryError::Confidence(_), .. })));
        let json = r#"{"scene_id":"s0","proposals":[{"label":"  ","box_min":[0,0,0],"box_max":[1,1,1]}]}"#;
        assert!(matches!(parse_proposals(json, ALL), Err(ProposalError::Invalid { source: GeometryError::EmptyLabel, .. })));
    }

    #[test]
    fn threshold_option() {
        let json = r#"{"scene_id":"s0","proposals":[
            {"label":"a","box_min":[0,0,0],"box_max":[1,1,1],"confidence":0.2},
            {"label":"b","box_min":[0,0,0],"box_max":[1,1,1],"confidence":0.8}]}"#;
        assert_eq!(parse_proposals(json, ALL).unwrap().proposals.len(), 2);
        let kept = parse_proposals(json, ProposalLoadOptions { min_confidence: Some(0.5) }).unwrap();
        assert_eq!(kept.proposals.len(), 1);
        assert_eq!(kept.proposals[0].class_label, "b");
    }

    proptest! {
        #[test]
        fn save_load_round_trip(
            raw in prop::collection::vec(
                ("[a-z]{1,6}( [a-z]{1,6})?", prop::array::uniform3(-10.0..10.0f64), prop::array::uniform3(0.0..4.0f64), 0.0..=1.0f64),
                0..12,
            )
        ) {
            let proposals: Vec<ObjectProposal> = raw
                .iter()
                .map(|(l, lo, ext, c)| {
                    let hi = [lo[0] + ext[0], lo[1] + ext[1], lo[2] + ext[2]];
                    ObjectProposal::new(l, Aabb3::new((*lo).into(), hi.into()).unwrap(), *c).unwrap()
                })
                .collect();
            let back = parse_proposals(&proposals_to_json("scene", &proposals), ALL).unwrap();
            prop_assert_eq!(back.scene_id, "scene");
            prop_assert_eq!(back.proposals, proposals);
        }
    }
}
