//! Deterministic point-splat rendering of five views per scene: one
//! orthographic bird's-eye view and four perspective views from the
//! cardinal directions, each angled down toward the scene center.
//!
//! Image conventions: pixel `(0, 0)` is the top-left corner, pixel centers
//! sit at half-integer coordinates, background is white, and each point is
//! a filled disc resolved with a z-buffer (nearest depth wins, earlier
//! points win exact ties).

use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::geometry::{Aabb3, ColoredPoint, Point3, Rgb, Scene};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RenderError {
    #[error("scene bounds have no horizontal footprint ({dx} x {dy} m)")]
    DegenerateBounds { dx: f64, dy: f64 },
    #[error("scene has no points to render")]
    EmptyCloud,
    #[error("image size {0}x{1} is empty")]
    ZeroSize(u32, u32),
    #[error("invalid camera: {0}")]
    Camera(&'static str),
    #[error("png encoding failed: {0}")]
    Png(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    OrthographicTopdown,
    PerspectiveOblique,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub kind: CameraKind,
    pub position: Point3,
    pub look_at: Point3,
    pub up: Point3,
    /// Vertical field of view in degrees (perspective only).
    pub vfov_deg: f64,
    /// Width in meters covered by the shorter image side (orthographic only).
    pub ortho_extent: f64,
}

/// Orthonormal camera frame: `right`, `up`, `forward`.
#[derive(Debug, Clone, Copy)]
struct Frame {
    right: Point3,
    up: Point3,
    forward: Point3,
}

impl CameraSpec {
    fn frame(&self) -> Result<Frame, RenderError> {
        let view = self.look_at - self.position;
        if view.norm() <= 0.0 {
            return Err(RenderError::Camera("position equals look_at"));
        }
        let forward = view.normalized();
        let right = forward.cross(self.up);
        if right.norm() < 1e-12 {
            return Err(RenderError::Camera("up is parallel to the view direction"));
        }
        let right = right.normalized();
        Ok(Frame { right, up: right.cross(forward), forward })
    }

    pub fn validate(&self) -> Result<(), RenderError> {
        self.frame().map(|_| ())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewId {
    Bev,
    Front,
    Left,
    Right,
    Back,
}

impl ViewId {
    /// Fixed rendering and prompt order.
    pub const ALL: [ViewId; 5] = [ViewId::Bev, ViewId::Front, ViewId::Left, ViewId::Right, ViewId::Back];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::Bev => "bev",
            ViewId::Front => "front",
            ViewId::Left => "left",
            ViewId::Right => "right",
            ViewId::Back => "back",
        }
    }

    /// Horizontal direction from the scene center to the camera.
    fn cardinal(self) -> Option<(f64, f64)> {
        match self {
            ViewId::Bev => None,
            ViewId::Front => Some((0.0, -1.0)),
            ViewId::Left => Some((-1.0, 0.0)),
            ViewId::Right => Some((1.0, 0.0)),
            ViewId::Back => Some((0.0, 1.0)),
        }
    }
}

impl std::fmt::Display for ViewId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Camera placement and raster constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub width: u32,
    pub height: u32,
    pub splat_radius: f64,
    /// Oblique camera distance as a multiple of the scene AABB diagonal.
    pub oblique_distance: f64,
    pub oblique_elevation_deg: f64,
    pub oblique_vfov_deg: f64,
    /// BEV extent as a multiple of the larger footprint side.
    pub bev_margin: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 448,
            height: 448,
            splat_radius: 2.0,
            oblique_distance: 1.2,
            oblique_elevation_deg: 45.0,
            oblique_vfov_deg: 60.0,
            bev_margin: 1.05,
        }
    }
}

pub fn plan_cameras(bounds: &Aabb3, cfg: &RenderConfig) -> Result<[CameraSpec; 5], RenderError> {
    let ext = bounds.extent();
    if !(ext.x > 0.0 && ext.y > 0.0) {
        return Err(RenderError::DegenerateBounds { dx: ext.x, dy: ext.y });
    }
    let center = bounds.center();
    let diag = bounds.diagonal();
    let dist = cfg.oblique_distance * diag;
    let elev = cfg.oblique_elevation_deg.to_radians();
    Ok(ViewId::ALL.map(|view| match view.cardinal() {
        None => CameraSpec {
            kind: CameraKind::OrthographicTopdown,
            position: Point3::new(center.x, center.y, bounds.max.z + diag),
            look_at: center,
            up: Point3::new(0.0, 1.0, 0.0),
            vfov_deg: 0.0,
            ortho_extent: ext.x.max(ext.y) * cfg.bev_margin,
        },
        Some((cx, cy)) => {
            let horizontal = dist * elev.cos();
            CameraSpec {
                kind: CameraKind::PerspectiveOblique,
                position: center + Point3::new(cx * horizontal, cy * horizontal, dist * elev.sin()),
                look_at: center,
                up: Point3::new(0.0, 0.0, 1.0),
                vfov_deg: cfg.oblique_vfov_deg,
                ortho_extent: 0.0,
            }
        }
    }))
}

/// Project a world point to continuous pixel coordinates and depth along
/// the view axis. `None` when behind the camera or outside the image.
pub fn project_point(camera: &CameraSpec, p: Point3, width: u32, height: u32) -> Option<(f64, f64, f64)> {
    let frame = camera.frame().ok()?;
    project_with(&frame, camera, p, width, height)
}

fn project_with(frame: &Frame, camera: &CameraSpec, p: Point3, width: u32, height: u32) -> Option<(f64, f64, f64)> {
    let (w, h) = (width as f64, height as f64);
    let d = p - camera.position;
    let depth = d.dot(frame.forward);
    let (xc, yc) = (d.dot(frame.right), d.dot(frame.up));
    let (px, py) = match camera.kind {
        CameraKind::OrthographicTopdown => {
            if depth < 0.0 {
                return None;
            }
            let scale = w.min(h) / camera.ortho_extent;
            (0.5 * w + xc * scale, 0.5 * h - yc * scale)
        }
        CameraKind::PerspectiveOblique => {
            if depth <= 1e-9 {
                return None;
            }
            let focal = 0.5 * h / (0.5 * camera.vfov_deg.to_radians()).tan();
            (0.5 * w + focal * xc / depth, 0.5 * h - focal * yc / depth)
        }
    };
    if !(px >= 0.0 && px < w && py >= 0.0 && py < h) {
        return None;
    }
    Some((px, py, depth))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub view_id: ViewId,
    pub camera: CameraSpec,
    pub width: u32,
    pub height: u32,
    /// Row-major RGB8.
    pub rgb: Vec<u8>,
    /// Row-major depth; `f64::INFINITY` where nothing was drawn.
    pub depth: Vec<f64>,
}

impl RenderedView {
    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        Rgb([self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]])
    }

    pub fn depth_at(&self, x: u32, y: u32) -> f64 {
        self.depth[y as usize * self.width as usize + x as usize]
    }

    /// SHA-256 over the dimensions and raw RGB raster, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.rgb);
        hex::encode(h.finalize())
    }

    pub fn to_png(&self) -> Result<Vec<u8>, RenderError> {
        let img = image::RgbImage::from_raw(self.width, self.height, self.rgb.clone())
            .ok_or_else(|| RenderError::Png("raster size mismatch".into()))?;
        let mut buf = Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).map_err(|e| RenderError::Png(e.to_string()))?;
        Ok(buf.into_inner())
    }

    pub fn file_name(&self, scene_id: &str) -> String {
        view_file_name(scene_id, self.view_id)
    }
}

pub fn view_file_name(scene_id: &str, view: ViewId) -> String {
    format!("{scene_id}_{}.png", view.as_str())
}

pub fn view_paths(dir: &Path, scene_id: &str) -> Vec<PathBuf> {
    ViewId::ALL.iter().map(|&v| dir.join(view_file_name(scene_id, v))).collect()
}

pub fn render_view(
    points: &[ColoredPoint],
    camera: &CameraSpec,
    view_id: ViewId,
    width: u32,
    height: u32,
    splat_radius: f64,
) -> Result<RenderedView, RenderError> {
    if width == 0 || height == 0 {
        return Err(RenderError::ZeroSize(width, height));
    }
    if points.is_empty() {
        return Err(RenderError::EmptyCloud);
    }
    let frame = camera.frame()?;
    let n = width as usize * height as usize;
    let mut rgb = [Rgb::WHITE.0].repeat(n).concat();
    let mut depth = vec![f64::INFINITY; n];
    let r2 = splat_radius * splat_radius;
    for p in points {
        let Some((px, py, z)) = project_with(&frame, camera, p.position, width, height) else { continue };
        let x0 = (px - splat_radius).floor().max(0.0) as i64;
        let x1 = ((px + splat_radius).floor() as i64).min(width as i64 - 1);
        let y0 = (py - splat_radius).floor().max(0.0) as i64;
        let y1 = ((py + splat_radius).floor() as i64).min(height as i64 - 1);
        let (home_x, home_y) = (px.floor() as i64, py.floor() as i64);
        for iy in y0..=y1 {
            for ix in x0..=x1 {
                let (dx, dy) = (ix as f64 + 0.5 - px, iy as f64 + 0.5 - py);
                if dx * dx + dy * dy > r2 && !(ix == home_x && iy == home_y) {
                    continue;
                }
                let k = iy as usize * width as usize + ix as usize;
                if z < depth[k] {
                    depth[k] = z;
                    rgb[3 * k..3 * k + 3].copy_from_slice(&p.color.0);
                }
            }
        }
    }
    Ok(RenderedView { view_id, camera: *camera, width, height, rgb, depth })
}

/// Plan the five cameras from the point-cloud bounds and render each view
/// in `[bev, front, left, right, back]` order.
pub fn render_scene(scene: &Scene, cfg: &RenderConfig) -> Result<Vec<RenderedView>, RenderError> {
    let bounds = scene.point_bounds().ok_or(RenderError::EmptyCloud)?;
    let cameras = plan_cameras(&bounds, cfg)?;
    std::thread::scope(|s| {
        let handles: Vec<_> = ViewId::ALL
            .iter()
            .zip(cameras.iter())
            .map(|(&view, cam)| s.spawn(move || render_view(&scene.points, cam, view, cfg.width, cfg.height, cfg.splat_radius)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("render thread panicked")).collect()
    })
}
