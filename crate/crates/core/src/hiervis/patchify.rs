//! Hand-crafted per-cell descriptors used in place of a pretrained image
//! encoder when no feature file is supplied.

use ndarray::Array2;

use super::HierError;
use crate::render::RenderedView;

/// Length of the raw cell descriptor before zero padding.
pub const DESCRIPTOR_LEN: usize = 6;

/// Split the view into a `grid x grid` lattice (row-major, top row first)
/// and describe each cell as `[R, G, B, depth, cx, cy]`: mean color in
/// `[0, 1]`, mean depth over drawn pixels (0 when none), and the cell
/// center in normalized image coordinates. Zero-padded to `dim`.
pub fn patchify_stub(view: &RenderedView, grid: usize, dim: usize) -> Result<Array2<f64>, HierError> {
    let (w, h) = (view.width as usize, view.height as usize);
    if grid == 0 || w % grid != 0 || h % grid != 0 {
        return Err(HierError::Grid { width: view.width, height: view.height, grid });
    }
    if dim < DESCRIPTOR_LEN {
        return Err(HierError::Dim { what: "patch descriptor", expected: DESCRIPTOR_LEN, got: dim });
    }
    let (cw, ch) = (w / grid, h / grid);
    let mut out = Array2::zeros((grid * grid, dim));
    for cy in 0..grid {
        for cx in 0..grid {
            let mut rgb = [0.0f64; 3];
            let (mut depth_sum, mut depth_n) = (0.0, 0usize);
            for y in cy * ch..(cy + 1) * ch {
                for x in cx * cw..(cx + 1) * cw {
                    let k = y * w + x;
                    for (c, sum) in rgb.iter_mut().enumerate() {
                        *sum += view.rgb[3 * k + c] as f64;
                    }
                    let d = view.depth[k];
                    if d.is_finite() {
                        depth_sum += d;
                        depth_n += 1;
                    }
                }
            }
            let n = (cw * ch) as f64;
            let mut row = out.row_mut(cy * grid + cx);
            for c in 0..3 {
                row[c] = rgb[c] / n / 255.0;
            }
            row[3] = if depth_n > 0 { depth_sum / depth_n as f64 } else { 0.0 };
            row[4] = (cx as f64 + 0.5) / grid as f64;
            row[5] = (cy as f64 + 0.5) / grid as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, Rgb};
    use crate::render::{CameraKind, CameraSpec, ViewId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn view(w: u32, h: u32, f: impl Fn(u32, u32) -> Rgb) -> RenderedView {
        let mut rgb = Vec::new();
        for y in 0..h {
            for x in 0..w {
                rgb.extend_from_slice(&f(x, y).0);
            }
        }
        RenderedView {
            view_id: ViewId::Bev,
            camera: CameraSpec {
                kind: CameraKind::OrthographicTopdown,
                position: Point3::new(0.0, 0.0, 1.0),
                look_at: Point3::new(0.0, 0.0, 0.0),
                up: Point3::new(0.0, 1.0, 0.0),
                vfov_deg: 0.0,
                ortho_extent: 1.0,
            },
            width: w,
            height: h,
            rgb,
            depth: vec![f64::INFINITY; (w * h) as usize],
        }
    }

    #[test]
    fn uniform_white() {
        let p = patchify_stub(&view(8, 8, |_, _| Rgb::WHITE), 4, 8).unwrap();
        assert_eq!(p.dim(), (16, 8));
        for r in p.rows() {
            assert_eq!((r[0], r[1], r[2], r[3], r[6], r[7]), (1.0, 1.0, 1.0, 0.0, 0.0, 0.0));
        }
    }

    #[test]
    fn red_left_blue_right() {
        let v = view(4, 4, |x, _| if x < 2 { Rgb([255, 0, 0]) } else { Rgb([0, 0, 255]) });
        let p = patchify_stub(&v, 2, 6).unwrap();
        for (cell, want) in [(0, [1.0, 0.0, 0.0]), (1, [0.0, 0.0, 1.0]), (2, [1.0, 0.0, 0.0]), (3, [0.0, 0.0, 1.0])] {
            assert_eq!([p[[cell, 0]], p[[cell, 1]], p[[cell, 2]]], want);
        }
        assert_eq!((p[[1, 4]], p[[1, 5]]), (0.75, 0.25));
    }

    #[test]
    fn random_image_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = view(12, 12, |_, _| Rgb::WHITE);
        v.rgb.iter_mut().for_each(|c| *c = rng.gen());
        for (i, d) in v.depth.iter_mut().enumerate() {
            if i % 3 != 0 {
                *d = rng.gen_range(0.5..5.0);
            }
        }
        let g = 3;
        let p = patchify_stub(&v, g, 6).unwrap();
        for cell in 0..g * g {
            let (cx, cy) = (cell % g, cell / g);
            let mut acc = [0.0; 4];
            let mut nd = 0.0;
            for i in 0..144 {
                let (x, y) = (i % 12, i / 12);
                if x / 4 == cx && y / 4 == cy {
                    for (c, sum) in acc.iter_mut().take(3).enumerate() {
                        *sum += v.rgb[3 * i + c] as f64 / 255.0 / 16.0;
                    }
                    if v.depth[i].is_finite() {
                        acc[3] += v.depth[i];
                        nd += 1.0;
                    }
                }
            }
            acc[3] /= nd;
            for c in 0..4 {
                assert!((p[[cell, c]] - acc[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn indivisible_grid() {
        assert!(matches!(patchify_stub(&view(10, 10, |_, _| Rgb::WHITE), 3, 8), Err(HierError::Grid { .. })));
        assert!(matches!(patchify_stub(&view(10, 10, |_, _| Rgb::WHITE), 5, 4), Err(HierError::Dim { .. })));
    }
}
