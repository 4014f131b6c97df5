//! Seeded synthetic indoor scenes for tests, demos and golden fixtures.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{Aabb3, AgentSituation, ColoredPoint, ObjectProposal, Point3, Rgb, Scene};
use crate::ingest::ply::encode_ply_binary;
use crate::ingest::proposals::save_proposals;
use crate::ingest::{SituationRecord, CLOUD_FILE, PROPOSALS_FILE, SITUATION_FILE};

/// Label, color, and whether the object hangs on a wall (raised off the floor).
const CATALOG: &[(&str, [u8; 3], bool)] = &[
    ("chair", [150, 75, 0], false),
    ("table", [205, 133, 63], false),
    ("desk", [160, 82, 45], false),
    ("bed", [70, 130, 180], false),
    ("sofa", [128, 0, 32], false),
    ("lamp", [255, 215, 0], false),
    ("window", [135, 206, 235], true),
    ("door", [139, 69, 19], false),
    ("cabinet", [245, 245, 220], false),
    ("monitor", [20, 20, 20], false),
    ("plant", [34, 139, 34], false),
    ("trash can", [105, 105, 105], false),
    ("shelf", [222, 184, 135], false),
    ("radiator", [230, 230, 230], true),
    ("pillow", [255, 182, 193], false),
    ("picture", [218, 112, 214], true),
    ("box", [210, 180, 140], false),
    ("towel", [0, 128, 128], false),
];

/// Alternative names used for noisy duplicate proposals.
fn synonym(label: &str) -> &str {
    match label {
        "sofa" => "couch",
        "table" => "desk",
        "trash can" => "bin",
        "cabinet" => "dresser",
        "monitor" => "tv",
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub objects: usize,
    pub points_per_object: usize,
    pub floor_points: usize,
    /// Extra lower-confidence proposals overlapping existing objects.
    pub duplicates: usize,
    /// Room footprint in meters, centered on the origin.
    pub room: (f64, f64),
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { objects: 12, points_per_object: 60, floor_points: 400, duplicates: 4, room: (6.0, 5.0) }
    }
}

/// Build a room with box-shaped objects, their proposals and an agent pose.
/// Identical arguments give identical scenes.
pub fn synthetic_scene(scene_id: &str, seed: u64, spec: &SyntheticSpec) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hx, hy) = (spec.room.0 / 2.0, spec.room.1 / 2.0);
    let mut points = Vec::with_capacity(spec.floor_points + spec.objects * spec.points_per_object);
    for _ in 0..spec.floor_points {
        let p = Point3::new(rng.gen_range(-hx..hx), rng.gen_range(-hy..hy), 0.0);
        points.push(ColoredPoint { position: p, color: Rgb([190, 190, 190]) });
    }
    let mut proposals = Vec::with_capacity(spec.objects + spec.duplicates);
    for i in 0..spec.objects {
        let (label, color, raised) = CATALOG[(i + seed as usize) % CATALOG.len()];
        let (sx, sy, sz) = (rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.2), rng.gen_range(0.3..1.5));
        let cx = rng.gen_range(-hx + sx / 2.0..hx - sx / 2.0);
        let cy = rng.gen_range(-hy + sy / 2.0..hy - sy / 2.0);
        let z0 = if raised { rng.gen_range(0.5..1.2) } else { 0.0 };
        let bbox = Aabb3::new(Point3::new(cx - sx / 2.0, cy - sy / 2.0, z0), Point3::new(cx + sx / 2.0, cy + sy / 2.0, z0 + sz))
            .expect("positive extents");
        for _ in 0..spec.points_per_object {
            let p = Point3::new(
                rng.gen_range(bbox.min.x..bbox.max.x),
                rng.gen_range(bbox.min.y..bbox.max.y),
                rng.gen_range(bbox.min.z..bbox.max.z),
            );
            points.push(ColoredPoint { position: p, color: Rgb(color) });
        }
        let conf = rng.gen_range(0.6..0.99);
        proposals.push(ObjectProposal::new(label, bbox, conf).expect("catalog labels are valid"));
    }
    let mut order: Vec<usize> = (0..spec.objects).collect();
    order.shuffle(&mut rng);
    for &i in order.iter().cycle().take(spec.duplicates.min(spec.objects * 4)) {
        let src = proposals[i].clone();
        let e = src.bbox.extent();
        let j = Point3::new(e.x * rng.gen_range(-0.04..0.04), e.y * rng.gen_range(-0.04..0.04), 0.0);
        let label = if rng.gen_bool(0.5) { synonym(&src.class_label).to_string() } else { src.class_label.clone() };
        let conf = src.confidence * rng.gen_range(0.5..0.95);
        proposals.push(ObjectProposal::new(&label, src.bbox.translated(j), conf).expect("valid duplicate"));
    }
    let anchor = proposals.first().map(|p| p.class_label.clone()).unwrap_or_else(|| "wall".into());
    let situation = AgentSituation::new(
        Point3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0),
        rng.gen_range(0.0..std::f64::consts::TAU),
        format!("I am standing in the middle of the room and the {anchor} is nearby."),
    )
    .expect("finite pose");
    Scene { scene_id: scene_id.to_string(), points, proposals, situation: Some(situation) }
}

/// Write `cloud.ply`, `proposals.json` and (when present) `situation.json`
/// under `root/<scene_id>/`.
pub fn write_scene_dir(root: &Path, scene: &Scene) -> std::io::Result<PathBuf> {
    let dir = root.join(&scene.scene_id);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(CLOUD_FILE), encode_ply_binary(&scene.points))?;
    save_proposals(&dir.join(PROPOSALS_FILE), &scene.scene_id, &scene.proposals).map_err(std::io::Error::other)?;
    if let Some(s) = &scene.situation {
        let rec = SituationRecord::from_situation(s);
        let text = serde_json::to_string_pretty(&rec).expect("situation serializes") + "\n";
        std::fs::write(dir.join(SITUATION_FILE), text)?;
    }
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{load_scene_dir, ProposalLoadOptions};

    #[test]
    fn deterministic() {
        let spec = SyntheticSpec::default();
        assert_eq!(synthetic_scene("a", 3, &spec), synthetic_scene("a", 3, &spec));
        assert_ne!(synthetic_scene("a", 3, &spec).points, synthetic_scene("a", 4, &spec).points);
    }

    #[test]
    fn sizes() {
        let spec = SyntheticSpec { objects: 5, points_per_object: 10, floor_points: 20, duplicates: 3, room: (4.0, 4.0) };
        let s = synthetic_scene("x", 1, &spec);
        assert_eq!(s.points.len(), 70);
        assert_eq!(s.proposals.len(), 8);
        for p in &s.points {
            assert!(p.position.x.abs() <= 2.0 && p.position.y.abs() <= 2.0);
        }
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = synthetic_scene("scene0001_00", 2, &SyntheticSpec::default());
        let path = write_scene_dir(dir.path(), &s).unwrap();
        let back = load_scene_dir(&path, ProposalLoadOptions::default()).unwrap();
        assert_eq!(back.proposals, s.proposals);
        assert_eq!(back.points.len(), s.points.len());
        let sit = back.situation.unwrap();
        assert_eq!(sit.yaw, s.situation.as_ref().unwrap().yaw);
    }
}
