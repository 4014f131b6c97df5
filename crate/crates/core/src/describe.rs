//! Scene text descriptions.
//!
//! Two forms are produced from the pruned object list:
//!
//! * coordinate text: `In the scene there are the following objects: <monitor> at [-0.19, 1.37, 0.96], ...`
//! * coordinate + direction text, relative to the agent, using clock hours:
//!   `To my 12 o'clock there is a <monitor> [-0.19, 1.37, 0.96]. To my 2 o'clock there is a <desk> [...], and <window> [...].`
//!
//! Object coordinates are box centers rounded half-to-even at 2 or 4
//! decimals. Clock hours split the plan view into 30° half-open sectors
//! centered on each hour, measured clockwise from the agent's facing
//! direction; the agent's height is ignored.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::geometry::{AgentSituation, ObjectProposal, Point3};

pub const COORDINATE_PREFIX: &str = "In the scene there are the following objects: ";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum DescribeError {
    #[error("no objects to describe")]
    NoObjects,
    #[error("direction text needs an agent situation")]
    MissingSituation,
    #[error("object '{label}' sits on the agent's position; bearing undefined")]
    CoincidentTarget { label: String },
    #[error("unsupported precision {0} (expected 2 or 4)")]
    Precision(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Precision(usize);

impl Precision {
    pub const TWO: Precision = Precision(2);
    pub const FOUR: Precision = Precision(4);

    pub fn new(places: usize) -> Result<Self, DescribeError> {
        match places {
            2 | 4 => Ok(Precision(places)),
            p => Err(DescribeError::Precision(p)),
        }
    }

    pub fn places(self) -> usize {
        self.0
    }
}

impl Default for Precision {
    fn default() -> Self {
        Precision::TWO
    }
}

impl TryFrom<usize> for Precision {
    type Error = DescribeError;
    fn try_from(v: usize) -> Result<Self, Self::Error> {
        Precision::new(v)
    }
}

impl From<Precision> for usize {
    fn from(p: Precision) -> usize {
        p.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DescriptionMode {
    /// Coordinates only.
    #[default]
    #[serde(rename = "ct")]
    Coordinate,
    /// Coordinates grouped by clock direction relative to the agent.
    #[serde(rename = "cdt")]
    CoordinateDirection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DescriptionConfig {
    pub precision: Precision,
    pub mode: DescriptionMode,
    /// In direction mode, also append the plain coordinate list.
    #[serde(default)]
    pub append_coordinate_list: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub text: String,
    /// Indices into the proposal list, in the order they appear in `text`.
    pub object_order: Vec<usize>,
}

/// Fixed-point formatting with half-to-even rounding of the exact binary
/// value; negative zero prints as zero.
pub fn format_coord(v: f64, precision: Precision) -> String {
    let s = format!("{:.*}", precision.places(), v);
    match s.strip_prefix('-') {
        Some(rest) if rest.bytes().all(|b| b == b'0' || b == b'.') => rest.to_string(),
        _ => s,
    }
}

pub fn format_point(p: Point3, precision: Precision) -> String {
    format!(
        "[{}, {}, {}]",
        format_coord(p.x, precision),
        format_coord(p.y, precision),
        format_coord(p.z, precision)
    )
}

pub fn object_token(label: &str) -> String {
    format!("<{label}>")
}

pub fn coordinate_description(proposals: &[ObjectProposal], precision: Precision) -> Result<SceneDescription, DescribeError> {
    if proposals.is_empty() {
        return Err(DescribeError::NoObjects);
    }
    let mut text = String::from(COORDINATE_PREFIX);
    for (i, p) in proposals.iter().enumerate() {
        if i > 0 {
            text.push_str(", ");
        }
        let _ = write!(text, "{} at {}", object_token(&p.class_label), format_point(p.center(), precision));
    }
    text.push('.');
    Ok(SceneDescription { text, object_order: (0..proposals.len()).collect() })
}

/// Hour for a clockwise offset in degrees: `floor((δ + 15) / 30) mod 12`,
/// with 0 reported as 12.
pub fn hour_from_clockwise_degrees(delta_deg: f64) -> u8 {
    let h = ((delta_deg + 15.0) / 30.0).floor().rem_euclid(12.0) as u8;
    if h == 0 {
        12
    } else {
        h
    }
}

/// Clockwise angle in degrees, in `[0, 360)`, from the agent's facing
/// direction to the target.
pub fn clockwise_offset_degrees(agent: &AgentSituation, target_xy: (f64, f64)) -> Result<f64, f64> {
    let dx = target_xy.0 - agent.position.x;
    let dy = target_xy.1 - agent.position.y;
    let dist = dx.hypot(dy);
    if dist <= 1e-9 {
        return Err(dist);
    }
    let bearing = dy.atan2(dx);
    let d = (agent.yaw - bearing).to_degrees().rem_euclid(360.0);
    Ok(if d >= 360.0 { 0.0 } else { d })
}

pub fn clock_hour(agent: &AgentSituation, target_xy: (f64, f64)) -> Option<u8> {
    clockwise_offset_degrees(agent, target_xy).ok().map(hour_from_clockwise_degrees)
}

/// Emission order of hours: straight ahead first, then clockwise.
pub const HOUR_ORDER: [u8; 12] = [12, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

pub fn directional_description(
    proposals: &[ObjectProposal],
    agent: Option<&AgentSituation>,
    precision: Precision,
) -> Result<SceneDescription, DescribeError> {
    let agent = agent.ok_or(DescribeError::MissingSituation)?;
    if proposals.is_empty() {
        return Err(DescribeError::NoObjects);
    }
    let mut by_hour: [Vec<usize>; 13] = Default::default();
    for (i, p) in proposals.iter().enumerate() {
        let c = p.center();
        let h = clock_hour(agent, (c.x, c.y)).ok_or_else(|| DescribeError::CoincidentTarget { label: p.class_label.clone() })?;
        by_hour[h as usize].push(i);
    }
    let mut sentences = Vec::new();
    let mut object_order = Vec::with_capacity(proposals.len());
    for h in HOUR_ORDER {
        let group = &by_hour[h as usize];
        if group.is_empty() {
            continue;
        }
        let items: Vec<String> = group
            .iter()
            .map(|&i| {
                let p = &proposals[i];
                format!("{} {}", object_token(&p.class_label), format_point(p.center(), precision))
            })
            .collect();
        sentences.push(format!("To my {h} o'clock there is a {}.", items.join(", and ")));
        object_order.extend_from_slice(group);
    }
    Ok(SceneDescription { text: sentences.join(" "), object_order })
}

/// Text for the configured mode. Direction mode may append the coordinate
/// list after the directional sentences.
pub fn describe(proposals: &[ObjectProposal], agent: Option<&AgentSituation>, config: &DescriptionConfig) -> Result<SceneDescription, DescribeError> {
    match config.mode {
        DescriptionMode::Coordinate => coordinate_description(proposals, config.precision),
        DescriptionMode::CoordinateDirection => {
            let mut d = directional_description(proposals, agent, config.precision)?;
            if config.append_coordinate_list {
                let ct = coordinate_description(proposals, config.precision)?;
                d.text.push(' ');
                d.text.push_str(&ct.text);
                d.object_order.extend(ct.object_order);
            }
            Ok(d)
        }
    }
}

/// Extract `(label, [x, y, z])` pairs from either description form.
pub fn parse_description(text: &str) -> Vec<(String, [f64; 3])> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('<') {
        let after = &rest[open + 1..];
        let Some(close) = after.find('>') else { break };
        let label = &after[..close];
        let tail = &after[close + 1..];
        let tail = tail.strip_prefix(" at ").or_else(|| tail.strip_prefix(' ')).unwrap_or(tail);
        if let Some(body) = tail.strip_prefix('[') {
            if let Some(end) = body.find(']') {
                let nums: Vec<f64> = body[..end].split(',').filter_map(|t| t.trim().parse().ok()).collect();
                if nums.len() == 3 {
                    out.push((label.to_string(), [nums[0], nums[1], nums[2]]));
                }
                rest = &body[end + 1..];
                continue;
            }
        }
        rest = tail;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aabb3, AgentSituation};
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI, TAU};

    fn obj(label: &str, c: [f64; 3]) -> ObjectProposal {
        let h = 0.1;
        let bbox = Aabb3::new(Point3::new(c[0] - h, c[1] - h, c[2] - h), Point3::new(c[0] + h, c[1] + h, c[2] + h)).unwrap();
        ObjectProposal::new(label, bbox, 1.0).unwrap()
    }

    fn agent(x: f64, y: f64, yaw: f64) -> AgentSituation {
        AgentSituation::new(Point3::new(x, y, 0.0), yaw, "").unwrap()
    }

    #[test]
    fn coordinate_examples() {
        let d = coordinate_description(&[obj("monitor", [-0.19, 1.37, 0.96])], Precision::TWO).unwrap();
        assert_eq!(d.text, "In the scene there are the following objects: <monitor> at [-0.19, 1.37, 0.96].");
        let d = coordinate_description(&[obj("box", [0.0, 0.0, 0.0])], Precision::TWO).unwrap();
        assert_eq!(d.text, "In the scene there are the following objects: <box> at [0.00, 0.00, 0.00].");
        assert_eq!(format_point(Point3::new(1.23456, -2.0, 0.5), Precision::FOUR), "[1.2346, -2.0000, 0.5000]");
        assert_eq!(coordinate_description(&[], Precision::TWO), Err(DescribeError::NoObjects));
    }

    #[test]
    fn negative_zero_and_ties() {
        assert_eq!(format_coord(-0.001, Precision::TWO), "0.00");
        assert_eq!(format_coord(-0.0, Precision::FOUR), "0.0000");
        // 0.125 and 0.375 are exact binary ties.
        assert_eq!(format_coord(0.125, Precision::TWO), "0.12");
        assert_eq!(format_coord(0.375, Precision::TWO), "0.38");
        assert_eq!(format_coord(-0.005, Precision::TWO), "-0.01");
    }

    #[test]
    fn clock_examples() {
        assert_eq!(clock_hour(&agent(0.0, 0.0, 0.0), (1.0, 0.0)), Some(12));
        assert_eq!(clock_hour(&agent(0.0, 0.0, FRAC_PI_2), (1.0, 0.0)), Some(3));
        assert_eq!(clock_hour(&agent(0.0, 0.0, 0.0), (-1.0, 0.0)), Some(6));
        assert_eq!(clock_hour(&agent(0.0, 0.0, 0.0), (0.0, 1.0)), Some(9));
        assert_eq!(hour_from_clockwise_degrees(15.0), 1);
        assert_eq!(hour_from_clockwise_degrees(14.999_999), 12);
        assert_eq!(hour_from_clockwise_degrees(345.0), 12);
        assert_eq!(hour_from_clockwise_degrees(344.999_999), 11);
        assert_eq!(clock_hour(&agent(1.0, 1.0, 0.0), (1.0, 1.0)), None);
    }

    #[test]
    fn directional_single_and_grouped() {
        // Agent at origin facing +y, monitor dead ahead.
        let a = agent(-0.19, 0.0, FRAC_PI_2);
        let d = directional_description(&[obj("monitor", [-0.19, 1.37, 0.96])], Some(&a), Precision::TWO).unwrap();
        assert_eq!(d.text, "To my 12 o'clock there is a <monitor> [-0.19, 1.37, 0.96].");

        let a = agent(0.0, 0.0, 0.0);
        // 60 degrees clockwise of +x is (cos -60, sin -60).
        let at = |deg: f64, r: f64| [r * (-deg.to_radians()).cos(), r * (-deg.to_radians()).sin(), 0.5];
        let objs = [obj("desk", at(55.0, 1.0)), obj("window", at(65.0, 2.0))];
        let d = directional_description(&objs, Some(&a), Precision::TWO).unwrap();
        assert!(d.text.starts_with("To my 2 o'clock there is a <desk> ["), "{}", d.text);
        assert!(d.text.contains("], and <window> ["), "{}", d.text);
        assert_eq!(d.text.matches("To my").count(), 1);
    }

    #[test]
    fn directional_needs_situation() {
        assert_eq!(
            directional_description(&[obj("a", [1.0, 0.0, 0.0])], None, Precision::TWO),
            Err(DescribeError::MissingSituation)
        );
    }

    #[test]
    fn append_plain_list() {
        let cfg = DescriptionConfig { precision: Precision::TWO, mode: DescriptionMode::CoordinateDirection, append_coordinate_list: true };
        let a = agent(0.0, 0.0, 0.0);
        let d = describe(&[obj("a", [1.0, 0.0, 0.0])], Some(&a), &cfg).unwrap();
        assert_eq!(d.text, "To my 12 o'clock there is a <a> [1.00, 0.00, 0.00]. In the scene there are the following objects: <a> at [1.00, 0.00, 0.00].");
        assert_eq!(d.object_order, vec![0, 0]);
    }

    fn arb_objects() -> impl Strategy<Value = Vec<ObjectProposal>> {
        prop::collection::vec(("[a-z]{1,8}", prop::array::uniform3(-8.0..8.0f64)), 1..15)
            .prop_map(|v| v.into_iter().map(|(l, c)| obj(&l, c)).collect())
    }

    proptest! {
        #[test]
        fn parse_back_matches(objs in arb_objects(), four in any::<bool>()) {
            let precision = if four { Precision::FOUR } else { Precision::TWO };
            let d = coordinate_description(&objs, precision).unwrap();
            let parsed = parse_description(&d.text);
            prop_assert_eq!(parsed.len(), objs.len());
            for ((label, xyz), o) in parsed.iter().zip(&objs) {
                prop_assert_eq!(label, &o.class_label);
                let c = o.center();
                for (got, want) in xyz.iter().zip([c.x, c.y, c.z]) {
                    prop_assert_eq!(format_coord(*got, precision), format_coord(want, precision));
                }
            }
        }

        #[test]
        fn ct_and_cdt_share_coordinates(objs in arb_objects(), yaw in 0.0..TAU) {
            let a = agent(20.0, 20.0, yaw);
            let ct = coordinate_description(&objs, Precision::TWO).unwrap();
            let cdt = directional_description(&objs, Some(&a), Precision::TWO).unwrap();
            let mut seen = cdt.object_order.clone();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..objs.len()).collect::<Vec<_>>());
            let ct_pairs = parse_description(&ct.text);
            let cdt_pairs = parse_description(&cdt.text);
            for (k, &i) in cdt.object_order.iter().enumerate() {
                prop_assert_eq!(&cdt_pairs[k], &ct_pairs[i]);
            }
        }

        #[test]
        fn ahead_is_twelve(yaw in 0.0..TAU, r in 0.1..10.0f64) {
            let a = agent(1.0, -2.0, yaw);
            prop_assert_eq!(clock_hour(&a, (1.0 + r * yaw.cos(), -2.0 + r * yaw.sin())), Some(12));
        }

        #[test]
        fn rigid_motion_preserves_hours(
            yaw in 0.0..TAU, rot in 0.0..TAU, t in prop::array::uniform2(-5.0..5.0f64),
            target in prop::array::uniform2(-5.0..5.0f64),
        ) {
            let a = agent(0.3, -0.7, yaw);
            let Ok(delta) = clockwise_offset_degrees(&a, (target[0], target[1])) else { return Ok(()) };
            // Skip targets within 1e-6 rad of a sector boundary.
            let off = (delta + 15.0).rem_euclid(30.0);
            prop_assume!(off.min(30.0 - off).to_radians() > 1e-6);
            let (s, c) = rot.sin_cos();
            let rotate = |x: f64, y: f64| (c * x - s * y + t[0], s * x + c * y + t[1]);
            let (ax, ay) = rotate(0.3, -0.7);
            let moved = agent(ax, ay, yaw + rot);
            prop_assert_eq!(clock_hour(&moved, rotate(target[0], target[1])), clock_hour(&a, (target[0], target[1])));
        }
    }

    #[test]
    fn behind_any_yaw() {
        for k in 0..36 {
            let yaw = k as f64 * TAU / 36.0;
            let a = agent(0.0, 0.0, yaw);
            assert_eq!(clock_hour(&a, ((yaw + PI).cos(), (yaw + PI).sin())), Some(6));
        }
    }
}
