//! Shared scene types and pure 3D geometry.
//!
//! World frame is z-up, units are meters. Object coordinates used in the
//! text descriptions are box centers.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("invalid box: min.{axis} = {min} > max.{axis} = {max}")]
    InvertedBox { axis: char, min: f64, max: f64 },
    #[error("class label is empty")]
    EmptyLabel,
    #[error("confidence {0} outside [0, 1]")]
    Confidence(f64),
    #[error("quaternion norm {0} is not 1 (tolerance 1e-6)")]
    NonUnitQuaternion(f64),
    #[error("rotated +x axis has no horizontal component; yaw undefined")]
    GimbalDegenerate,
    #[error("scene id is empty")]
    EmptySceneId,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl std::ops::Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Point3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn scale(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Point3) -> Point3 {
        Point3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalized(self) -> Point3 {
        self.scale(1.0 / self.norm())
    }
}

impl From<[f64; 3]> for Point3 {
    fn from(a: [f64; 3]) -> Self {
        Point3::new(a[0], a[1], a[2])
    }
}

/// Axis-aligned box. Zero-volume boxes are valid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb3 {
    pub fn new(min: Point3, max: Point3) -> Result<Self, GeometryError> {
        if !min.is_finite() || !max.is_finite() {
            return Err(GeometryError::NonFinite("box corner"));
        }
        for (axis, lo, hi) in [('x', min.x, max.x), ('y', min.y, max.y), ('z', min.z, max.z)] {
            if lo > hi {
                return Err(GeometryError::InvertedBox { axis, min: lo, max: hi });
            }
        }
        Ok(Self { min, max })
    }

    /// Tight box around a nonempty point set.
    pub fn enclosing<'a, I: IntoIterator<Item = &'a Point3>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = *it.next()?;
        let (mut lo, mut hi) = (first, first);
        for p in it {
            lo = Point3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
            hi = Point3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
        }
        Some(Self { min: lo, max: hi })
    }

    pub fn extent(&self) -> Point3 {
        self.max - self.min
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    pub fn center(&self) -> Point3 {
        bbox_center(self)
    }

    pub fn translated(&self, t: Point3) -> Aabb3 {
        Aabb3 { min: self.min + t, max: self.max + t }
    }

    pub fn contains(&self, p: Point3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }
}

pub fn bbox_center(b: &Aabb3) -> Point3 {
    Point3::new(
        0.5 * (b.min.x + b.max.x),
        0.5 * (b.min.y + b.max.y),
        0.5 * (b.min.z + b.max.z),
    )
}

/// Intersection-over-union of two boxes. Returns 0 when the union has no
/// volume, so degenerate boxes never produce NaN.
pub fn aabb_iou(a: &Aabb3, b: &Aabb3) -> f64 {
    let overlap = |lo_a: f64, hi_a: f64, lo_b: f64, hi_b: f64| (hi_a.min(hi_b) - lo_a.max(lo_b)).max(0.0);
    let inter = overlap(a.min.x, a.max.x, b.min.x, b.max.x)
        * overlap(a.min.y, a.max.y, b.min.y, b.max.y)
        * overlap(a.min.z, a.max.z, b.min.z, b.max.z);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectProposal {
    pub class_label: String,
    #[serde(rename = "box")]
    pub bbox: Aabb3,
    pub confidence: f64,
}

impl ObjectProposal {
    pub fn new(label: &str, bbox: Aabb3, confidence: f64) -> Result<Self, GeometryError> {
        let class_label = normalize_label(label);
        if class_label.is_empty() {
            return Err(GeometryError::EmptyLabel);
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(GeometryError::Confidence(confidence));
        }
        Ok(Self { class_label, bbox, confidence })
    }

    pub fn center(&self) -> Point3 {
        bbox_center(&self.bbox)
    }
}

/// Lowercase, trim, and collapse runs of internal whitespace to one space.
pub fn normalize_label(label: &str) -> String {
    label.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Agent pose for situated questions. Yaw is counterclockwise from +x in
/// the xy-plane, kept in `[0, 2π)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSituation {
    pub position: Point3,
    pub yaw: f64,
    pub description: String,
}

impl AgentSituation {
    pub fn new(position: Point3, yaw: f64, description: impl Into<String>) -> Result<Self, GeometryError> {
        if !position.is_finite() || !yaw.is_finite() {
            return Err(GeometryError::NonFinite("agent pose"));
        }
        Ok(Self { position, yaw: normalize_angle(yaw), description: description.into() })
    }

    pub fn facing(&self) -> (f64, f64) {
        (self.yaw.cos(), self.yaw.sin())
    }
}

/// Wrap into `[0, 2π)`.
pub fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if r >= TAU {
        0.0
    } else {
        r
    }
}

/// Unit quaternion in (w, x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn rotate(&self, v: Point3) -> Point3 {
        let (w, x, y, z) = (self.w, self.x, self.y, self.z);
        // Rotation matrix of a unit quaternion applied to v.
        Point3::new(
            (1.0 - 2.0 * (y * y + z * z)) * v.x + 2.0 * (x * y - w * z) * v.y + 2.0 * (x * z + w * y) * v.z,
            2.0 * (x * y + w * z) * v.x + (1.0 - 2.0 * (x * x + z * z)) * v.y + 2.0 * (y * z - w * x) * v.z,
            2.0 * (x * z - w * y) * v.x + 2.0 * (y * z + w * x) * v.y + (1.0 - 2.0 * (x * x + y * y)) * v.z,
        )
    }
}

pub fn quaternion_from_yaw(yaw: f64) -> Quaternion {
    let h = 0.5 * yaw;
    Quaternion::new(h.cos(), 0.0, 0.0, h.sin())
}

/// Heading of the rotated +x axis projected onto the xy-plane.
pub fn yaw_from_quaternion(q: Quaternion) -> Result<f64, GeometryError> {
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(GeometryError::NonUnitQuaternion(n));
    }
    let fwd = q.rotate(Point3::new(1.0, 0.0, 0.0));
    if fwd.x.hypot(fwd.y) < 1e-9 {
        return Err(GeometryError::GimbalDegenerate);
    }
    Ok(normalize_angle(fwd.y.atan2(fwd.x)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const MID_GRAY: Rgb = Rgb([128, 128, 128]);
    pub const WHITE: Rgb = Rgb([255, 255, 255]);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColoredPoint {
    pub position: Point3,
    pub color: Rgb,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub points: Vec<ColoredPoint>,
    pub proposals: Vec<ObjectProposal>,
    pub situation: Option<AgentSituation>,
}

impl Scene {
    pub fn new(scene_id: impl Into<String>, points: Vec<ColoredPoint>, proposals: Vec<ObjectProposal>) -> Result<Self, GeometryError> {
        let scene_id = scene_id.into();
        if scene_id.is_empty() {
            return Err(GeometryError::EmptySceneId);
        }
        Ok(Self { scene_id, points, proposals, situation: None })
    }

    pub fn with_situation(mut self, situation: AgentSituation) -> Self {
        self.situation = Some(situation);
        self
    }

    pub fn point_bounds(&self) -> Option<Aabb3> {
        Aabb3::enclosing(self.points.iter().map(|p| &p.position))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn bx(min: [f64; 3], max: [f64; 3]) -> Aabb3 {
        Aabb3::new(min.into(), max.into()).unwrap()
    }

    #[test]
    fn iou_examples() {
        let unit = bx([0.0; 3], [1.0; 3]);
        assert_eq!(aabb_iou(&unit, &unit), 1.0);
        assert_eq!(aabb_iou(&unit, &bx([2.0; 3], [3.0; 3])), 0.0);
        let shifted = bx([0.5, 0.0, 0.0], [1.5, 1.0, 1.0]);
        assert!((aabb_iou(&unit, &shifted) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_degenerate_is_zero() {
        let flat = bx([0.0; 3], [1.0, 1.0, 0.0]);
        assert_eq!(aabb_iou(&flat, &flat), 0.0);
        let point = bx([0.5; 3], [0.5; 3]);
        assert_eq!(aabb_iou(&point, &bx([0.0; 3], [1.0; 3])), 0.0);
    }

    #[test]
    fn inverted_box_names_axis() {
        let err = Aabb3::new(Point3::new(0.0, 2.0, 0.0), Point3::new(1.0, 1.0, 1.0)).unwrap_err();
        assert!(matches!(err, GeometryError::InvertedBox { axis: 'y', .. }));
    }

    #[test]
    fn centers() {
        assert_eq!(bbox_center(&bx([0.0; 3], [2.0; 3])), Point3::new(1.0, 1.0, 1.0));
        assert_eq!(bbox_center(&bx([-1.0; 3], [1.0; 3])), Point3::new(0.0, 0.0, 0.0));
        assert_eq!(bbox_center(&bx([0.0, 1.0, 2.0], [4.0, 5.0, 6.0])), Point3::new(2.0, 3.0, 4.0));
    }

    #[test]
    fn yaw_examples() {
        assert_eq!(yaw_from_quaternion(Quaternion::new(1.0, 0.0, 0.0, 0.0)).unwrap(), 0.0);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((yaw_from_quaternion(Quaternion::new(h, 0.0, 0.0, h)).unwrap() - PI / 2.0).abs() < 1e-12);
        assert!((yaw_from_quaternion(Quaternion::new(0.0, 0.0, 0.0, 1.0)).unwrap() - PI).abs() < 1e-12);
    }

    #[test]
    fn yaw_rejects_bad_quaternions() {
        assert!(matches!(
            yaw_from_quaternion(Quaternion::new(1.0, 0.1, 0.0, 0.0)),
            Err(GeometryError::NonUnitQuaternion(_))
        ));
        // 90 degrees about y sends +x to -z.
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert_eq!(yaw_from_quaternion(Quaternion::new(h, 0.0, h, 0.0)), Err(GeometryError::GimbalDegenerate));
    }

    #[test]
    fn proposal_validation() {
        let b = bx([0.0; 3], [1.0; 3]);
        assert_eq!(ObjectProposal::new("  Office  Chair ", b, 0.5).unwrap().class_label, "office chair");
        assert_eq!(ObjectProposal::new(" ", b, 0.5), Err(GeometryError::EmptyLabel));
        assert_eq!(ObjectProposal::new("x", b, 1.5), Err(GeometryError::Confidence(1.5)));
    }

    fn arb_box() -> impl Strategy<Value = Aabb3> {
        (prop::array::uniform3(-5.0..5.0f64), prop::array::uniform3(0.05..3.0f64))
            .prop_map(|(lo, ext)| bx(lo, [lo[0] + ext[0], lo[1] + ext[1], lo[2] + ext[2]]))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = aabb_iou(&a, &b);
            prop_assert_eq!(ab, aabb_iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            if a.volume() > 0.0 {
                prop_assert!((aabb_iou(&a, &a) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn iou_translation_invariant(a in arb_box(), b in arb_box(), t in prop::array::uniform3(-10.0..10.0f64)) {
            let t = Point3::from(t);
            let moved = aabb_iou(&a.translated(t), &b.translated(t));
            prop_assert!((moved - aabb_iou(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn yaw_round_trip(yaw in 0.0..TAU) {
            let back = yaw_from_quaternion(quaternion_from_yaw(yaw)).unwrap();
            let diff = (back - yaw).abs();
            prop_assert!(diff.min(TAU - diff) < 1e-9);
        }
    }
}
