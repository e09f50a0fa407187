//! Software rasterizer for anchor feature meshes, plus a per-pixel
//! ray-intersection oracle with the identical contract.
//!
//! Coverage rule: a pixel is covered when its center lies inside the
//! projected triangle, with an inclusive-edge tie rule so pixels on shared
//! edges are claimed by exactly one of the two triangles. Interpolation is
//! perspective-correct (attributes and depth interpolated via 1/z). Depth
//! ties closer than [`DEPTH_TIE_EPS`] are resolved to the lower triangle
//! index in both implementations. Triangles with any vertex at or behind the
//! camera plane are culled; there is no near-plane clipping. No lighting or
//! shading is applied.

use crate::camera::CameraPose;
use crate::depthmesh::AnchorFeatureMesh;
use crate::grid::{FeatureGrid, FAR_SENTINEL};
use nalgebra::Vector3;

/// Depth difference treated as a tie; the lower triangle index wins.
pub const DEPTH_TIE_EPS: f64 = 1e-9;

/// Rendered features, visibility mask and depth buffer for one target view.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    /// Interpolated features; zero wherever the mask is zero.
    pub features: FeatureGrid,
    /// 1.0 where a triangle covers the pixel, 0.0 elsewhere.
    pub mask: FeatureGrid,
    /// Camera-space depth of the winning triangle; far sentinel where
    /// uncovered.
    pub depth: FeatureGrid,
}

impl RenderOutput {
    fn empty(out_h: usize, out_w: usize, channels: usize) -> RenderOutput {
        let mut depth = FeatureGrid::zeros(out_h, out_w, 1);
        depth.data_mut().fill(FAR_SENTINEL);
        RenderOutput {
            features: FeatureGrid::zeros(out_h, out_w, channels),
            mask: FeatureGrid::zeros(out_h, out_w, 1),
            depth,
        }
    }

    pub fn covered_pixels(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    /// Dumps the three grids as `<stem>_features.fgrid`, `<stem>_mask.fgrid`
    /// and `<stem>_depth.fgrid` under `dir`.
    pub fn write_fgrid_files(&self, dir: &std::path::Path, stem: &str) -> crate::error::Result<()> {
        std::fs::create_dir_all(dir)?;
        crate::grid::write_grid(&self.features, &dir.join(format!("{stem}_features.fgrid")))?;
        crate::grid::write_grid(&self.mask, &dir.join(format!("{stem}_mask.fgrid")))?;
        crate::grid::write_grid(&self.depth, &dir.join(format!("{stem}_depth.fgrid")))?;
        Ok(())
    }
}

#[derive(Clone, Copy)]
struct ProjectedVertex {
    u: f64,
    v: f64,
    z: f64,
}

#[inline]
fn edge_fn(ax: f64, ay: f64, bx: f64, by: f64, px: f64, py: f64) -> f64 {
    (bx - ax) * (py - ay) - (by - ay) * (px - ax)
}

/// Tie rule for pixel centers exactly on an edge: the edge from `a` to `b`
/// is inclusive when it descends in screen y, or is horizontal and points
/// left. For two triangles sharing an edge the directed edge appears once in
/// each orientation, so exactly one side claims the pixel.
#[inline]
fn edge_inclusive(a: &ProjectedVertex, b: &ProjectedVertex) -> bool {
    let dy = b.v - a.v;
    dy > 0.0 || (dy == 0.0 && b.u < a.u)
}

/// Z-buffered rasterization of the mesh into the target camera.
pub fn render(
    mesh: &AnchorFeatureMesh,
    cam: &CameraPose,
    out_h: usize,
    out_w: usize,
) -> RenderOutput {
    let channels = mesh.texture().channels();
    let mut out = RenderOutput::empty(out_h, out_w, channels);
    let mut zbuf = vec![f64::INFINITY; out_h * out_w];

    let projected: Vec<Option<ProjectedVertex>> = mesh
        .vertices()
        .iter()
        .map(|p| cam.project(p).map(|(u, v, z)| ProjectedVertex { u, v, z }))
        .collect();

    for tri in mesh.triangles() {
        let (Some(p0), Some(p1), Some(p2)) =
            (projected[tri[0]], projected[tri[1]], projected[tri[2]])
        else {
            continue; // vertex at or behind the camera plane
        };
        let f0 = mesh.vertex_features(tri[0]);
        let f1 = mesh.vertex_features(tri[1]);
        let f2 = mesh.vertex_features(tri[2]);

        // orient to positive signed area, carrying attributes along
        let mut v = [(p0, f0), (p1, f1), (p2, f2)];
        let area2 = edge_fn(v[0].0.u, v[0].0.v, v[1].0.u, v[1].0.v, v[2].0.u, v[2].0.v);
        if area2 == 0.0 {
            continue;
        }
        if area2 < 0.0 {
            v.swap(1, 2);
        }
        let (a, b, c) = (v[0].0, v[1].0, v[2].0);
        let area2 = area2.abs();

        let min_x = a.u.min(b.u).min(c.u).ceil().max(0.0) as usize;
        let max_x = a.u.max(b.u).max(c.u).floor().min(out_w as f64 - 1.0);
        let min_y = a.v.min(b.v).min(c.v).ceil().max(0.0) as usize;
        let max_y = a.v.max(b.v).max(c.v).floor().min(out_h as f64 - 1.0);
        if max_x < 0.0 || max_y < 0.0 {
            continue;
        }
        let (max_x, max_y) = (max_x as usize, max_y as usize);

        let inc_bc = edge_inclusive(&b, &c);
        let inc_ca = edge_inclusive(&c, &a);
        let inc_ab = edge_inclusive(&a, &b);

        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let (x, y) = (px as f64, py as f64);
                let w0 = edge_fn(b.u, b.v, c.u, c.v, x, y);
                let w1 = edge_fn(c.u, c.v, a.u, a.v, x, y);
                let w2 = edge_fn(a.u, a.v, b.u, b.v, x, y);
                let covered = (w0 > 0.0 || (w0 == 0.0 && inc_bc))
                    && (w1 > 0.0 || (w1 == 0.0 && inc_ca))
                    && (w2 > 0.0 || (w2 == 0.0 && inc_ab));
                if !covered {
                    continue;
                }
                let l0 = w0 / area2;
                let l1 = w1 / area2;
                let l2 = w2 / area2;
                let inv_z = l0 / a.z + l1 / b.z + l2 / c.z;
                let z = 1.0 / inv_z;
                let idx = py * out_w + px;
                if z < zbuf[idx] - DEPTH_TIE_EPS {
                    zbuf[idx] = z;
                    out.mask.set(py, px, 0, 1.0);
                    out.depth.set(py, px, 0, z);
                    for ch in 0..channels {
                        let num =
                            l0 * v[0].1[ch] / a.z + l1 * v[1].1[ch] / b.z + l2 * v[2].1[ch] / c.z;
                        out.features.set(py, px, ch, num / inv_z);
                    }
                }
            }
        }
    }
    out
}

/// Per-pixel ray-triangle oracle with the same contract as [`render`]:
/// rays through every pixel center, Moeller-Trumbore intersection against
/// every triangle, nearest hit wins with the identical depth tie rule.
pub fn render_bruteforce(
    mesh: &AnchorFeatureMesh,
    cam: &CameraPose,
    out_h: usize,
    out_w: usize,
) -> RenderOutput {
    let channels = mesh.texture().channels();
    let mut out = RenderOutput::empty(out_h, out_w, channels);

    // mirror the rasterizer's culling of triangles with any vertex behind
    let vertex_depth: Vec<f64> =
        mesh.vertices().iter().map(|p| cam.pose.inverse_transform(p).z).collect();

    for py in 0..out_h {
        for px in 0..out_w {
            // unnormalized direction with camera-space z = 1, so the ray
            // parameter is the camera depth
            let (origin, dir) = cam.pixel_ray(px as f64, py as f64);
            let mut best_t = f64::INFINITY;
            let mut best_feat: Option<Vec<f64>> = None;
            for tri in mesh.triangles() {
                if tri.iter().any(|&v| vertex_depth[v] <= 0.0) {
                    continue;
                }
                let v0 = mesh.vertices()[tri[0]];
                let v1 = mesh.vertices()[tri[1]];
                let v2 = mesh.vertices()[tri[2]];
                if let Some((t, bu, bv)) = moeller_trumbore(&origin, &dir, &v0, &v1, &v2) {
                    if t < best_t - DEPTH_TIE_EPS {
                        best_t = t;
                        let f0 = mesh.vertex_features(tri[0]);
                        let f1 = mesh.vertex_features(tri[1]);
                        let f2 = mesh.vertex_features(tri[2]);
                        let w0 = 1.0 - bu - bv;
                        best_feat = Some(
                            (0..channels)
                                .map(|ch| w0 * f0[ch] + bu * f1[ch] + bv * f2[ch])
                                .collect(),
                        );
                    }
                }
            }
            if let Some(feat) = best_feat {
                out.mask.set(py, px, 0, 1.0);
                out.depth.set(py, px, 0, best_t);
                for (ch, &f) in feat.iter().enumerate() {
                    out.features.set(py, px, ch, f);
                }
            }
        }
    }
    out
}

/// Returns `(t, u, v)` for a hit with `t > 0`, edges inclusive.
fn moeller_trumbore(
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    v0: &Vector3<f64>,
    v1: &Vector3<f64>,
    v2: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    const DET_EPS: f64 = 1e-14;
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < DET_EPS {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = origin - v0;
    let u = tvec.dot(&pvec) * inv_det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv_det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    let t = e2.dot(&qvec) * inv_det;
    if t > 0.0 {
        Some((t, u, v))
    } else {
        None
    }
}
