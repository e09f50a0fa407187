//! Anchor feature mesh construction from a depth map.
//!
//! The anchor mesh carries the anchor frame's feature map as a per-vertex
//! texture: every feature cell is unprojected at its (aligned) depth, the
//! cells are triangulated on the pixel grid, and triangles straddling depth
//! discontinuities are pruned so newly visible regions stay uncovered when
//! the mesh is rendered into other views.

use crate::camera::CameraPose;
use crate::error::{MvError, Result};
use crate::grid::{FeatureGrid, FAR_SENTINEL};
use nalgebra::Vector3;

/// A depth map is a C=1 grid of strictly positive scene distances.
pub type DepthMap = FeatureGrid;

/// Depth-gradient threshold above which triangles are discarded.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.05;

/// Depth-derived triangle mesh textured with the anchor feature map.
#[derive(Debug, Clone)]
pub struct AnchorFeatureMesh {
    vertex_rows: usize,
    vertex_cols: usize,
    vertices: Vec<Vector3<f64>>,
    triangles: Vec<[usize; 3]>,
    texture: FeatureGrid,
    source_pose: CameraPose,
}

impl AnchorFeatureMesh {
    /// Assembles a mesh from explicit parts, validating the type invariants:
    /// triangle indices in range, texture dimensions matching the vertex
    /// grid, and finite vertices.
    pub fn from_parts(
        vertex_rows: usize,
        vertex_cols: usize,
        vertices: Vec<Vector3<f64>>,
        triangles: Vec<[usize; 3]>,
        texture: FeatureGrid,
        source_pose: CameraPose,
    ) -> Result<AnchorFeatureMesh> {
        if vertices.len() != vertex_rows * vertex_cols {
            return Err(MvError::domain(format!(
                "{} vertices do not fill a {vertex_rows}x{vertex_cols} grid",
                vertices.len()
            )));
        }
        if texture.height() != vertex_rows || texture.width() != vertex_cols {
            return Err(MvError::domain(format!(
                "texture {}x{} does not match vertex grid {vertex_rows}x{vertex_cols}",
                texture.height(),
                texture.width()
            )));
        }
        if let Some(v) = vertices.iter().find(|v| !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite())) {
            return Err(MvError::domain(format!("non-finite vertex {v:?}")));
        }
        if let Some(tri) = triangles.iter().find(|t| t.iter().any(|&i| i >= vertices.len())) {
            return Err(MvError::domain(format!("triangle {tri:?} indexes past the vertex array")));
        }
        Ok(AnchorFeatureMesh { vertex_rows, vertex_cols, vertices, triangles, texture, source_pose })
    }

    pub fn vertex_rows(&self) -> usize {
        self.vertex_rows
    }
    pub fn vertex_cols(&self) -> usize {
        self.vertex_cols
    }
    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }
    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }
    pub fn texture(&self) -> &FeatureGrid {
        &self.texture
    }
    pub fn source_pose(&self) -> &CameraPose {
        &self.source_pose
    }

    /// Feature vector attached to a vertex.
    pub fn vertex_features(&self, vertex: usize) -> &[f64] {
        let row = vertex / self.vertex_cols;
        let col = vertex % self.vertex_cols;
        self.texture.cell(row, col)
    }
}

/// Aligns a relative depth map to the scene scale:
/// `aligned = raw / mean(|raw|) + d_med`.
///
/// The mean absolute value plays the role of the normalization; adding the
/// median depth shifts the unit-scale relief to the scene's distance.
pub fn align_depth(raw: &DepthMap, d_med: f64) -> Result<DepthMap> {
    if raw.channels() != 1 {
        return Err(MvError::domain(format!("depth map must have C=1, got {}", raw.channels())));
    }
    if !(d_med > 0.0) {
        return Err(MvError::domain(format!("median depth must be positive, got {d_med}")));
    }
    if let Some(bad) = raw.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(MvError::domain(format!("raw depth must be strictly positive, got {bad}")));
    }
    let mean_abs: f64 = raw.data().iter().map(|v| v.abs()).sum::<f64>() / raw.data().len() as f64;
    let data = raw.data().iter().map(|&v| v / mean_abs + d_med).collect();
    FeatureGrid::new(raw.height(), raw.width(), 1, data)
}

/// Median depth for alignment: the depth along the central pixel's ray when
/// valid, falling back to the global (lower) median of valid cells.
pub fn central_ray_depth(depth: &DepthMap) -> Result<f64> {
    if depth.channels() != 1 {
        return Err(MvError::domain("central_ray_depth expects C=1".to_string()));
    }
    let center = depth.get(depth.height() / 2, depth.width() / 2, 0);
    if center > 0.0 && center < FAR_SENTINEL {
        return Ok(center);
    }
    let mut valid: Vec<f64> =
        depth.data().iter().copied().filter(|&v| v > 0.0 && v < FAR_SENTINEL).collect();
    if valid.is_empty() {
        return Err(MvError::domain("depth map has no valid cells".to_string()));
    }
    valid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(valid[(valid.len() - 1) / 2])
}

/// Regular two-triangles-per-quad triangulation of an `h x w` vertex grid,
/// consistently wound. Vertex index = `row * w + col`.
pub fn grid_triangulate(h: usize, w: usize) -> Result<Vec<[usize; 3]>> {
    if h < 2 || w < 2 {
        return Err(MvError::domain(format!("triangulation needs at least 2x2 vertices, got {h}x{w}")));
    }
    let mut tris = Vec::with_capacity(2 * (h - 1) * (w - 1));
    for r in 0..h - 1 {
        for c in 0..w - 1 {
            let v00 = r * w + c;
            let v01 = v00 + 1;
            let v10 = v00 + w;
            let v11 = v10 + 1;
            tris.push([v00, v10, v01]);
            tris.push([v01, v10, v11]);
        }
    }
    Ok(tris)
}

/// Per-cell depth-gradient magnitude: central differences in the interior,
/// one-sided at the borders.
fn gradient_magnitude(depth: &DepthMap) -> FeatureGrid {
    let (h, w) = (depth.height(), depth.width());
    let mut grad = FeatureGrid::zeros(h, w, 1);
    for r in 0..h {
        for c in 0..w {
            let c_lo = c.saturating_sub(1);
            let c_hi = (c + 1).min(w - 1);
            let gx = if c_hi > c_lo {
                (depth.get(r, c_hi, 0) - depth.get(r, c_lo, 0)) / (c_hi - c_lo) as f64
            } else {
                0.0
            };
            let r_lo = r.saturating_sub(1);
            let r_hi = (r + 1).min(h - 1);
            let gy = if r_hi > r_lo {
                (depth.get(r_hi, c, 0) - depth.get(r_lo, c, 0)) / (r_hi - r_lo) as f64
            } else {
                0.0
            };
            grad.set(r, c, 0, (gx * gx + gy * gy).sqrt());
        }
    }
    grad
}

/// Keeps the triangles whose maximum depth-gradient magnitude over their
/// vertex cells is at most `zeta`; triangles straddling depth discontinuities
/// are discarded, leaving discontinuous mesh boundaries.
pub fn prune_discontinuities(
    depth: &DepthMap,
    tris: &[[usize; 3]],
    zeta: f64,
) -> Result<Vec<[usize; 3]>> {
    if !(zeta > 0.0) {
        return Err(MvError::domain(format!("prune threshold must be positive, got {zeta}")));
    }
    if depth.channels() != 1 {
        return Err(MvError::domain("prune_discontinuities expects C=1 depth".to_string()));
    }
    let grad = gradient_magnitude(depth);
    let kept = tris
        .iter()
        .filter(|tri| tri.iter().all(|&v| grad.data()[v] <= zeta))
        .copied()
        .collect();
    Ok(kept)
}

/// Builds the anchor mesh: vertices unproject every feature cell at its
/// depth, triangles come from the pruned grid triangulation, and the feature
/// grid itself is the texture. Depth must already be aligned and at feature
/// resolution.
pub fn build_anchor_mesh(
    feat: &FeatureGrid,
    depth: &DepthMap,
    cam: &CameraPose,
    zeta: f64,
) -> Result<AnchorFeatureMesh> {
    if depth.channels() != 1 {
        return Err(MvError::domain("anchor depth must have C=1".to_string()));
    }
    if feat.height() != depth.height() || feat.width() != depth.width() {
        return Err(MvError::domain(format!(
            "feature grid {}x{} does not match depth {}x{}",
            feat.height(),
            feat.width(),
            depth.height(),
            depth.width()
        )));
    }
    let (h, w) = (depth.height(), depth.width());
    let mut vertices = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            vertices.push(cam.unproject(c as f64, r as f64, depth.get(r, c, 0))?);
        }
    }
    let triangles = prune_discontinuities(depth, &grid_triangulate(h, w)?, zeta)?;
    Ok(AnchorFeatureMesh {
        vertex_rows: h,
        vertex_cols: w,
        vertices,
        triangles,
        texture: feat.clone(),
        source_pose: cam.clone(),
    })
}

/// Outcome of the median-depth grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedianDepthSearch {
    pub value: f64,
    /// True when every candidate was unevaluable (empty foreground mask) and
    /// the fallback value was returned.
    pub fell_back: bool,
}

/// Uniformly spaced candidates across `+/- 40%` of `d_med`.
pub fn candidate_range(d_med: f64, count: usize) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(MvError::domain("candidate count must be >= 1".to_string()));
    }
    if !(d_med > 0.0) {
        return Err(MvError::domain(format!("d_med must be positive, got {d_med}")));
    }
    if count == 1 {
        return Ok(vec![d_med]);
    }
    let lo = 0.6 * d_med;
    let hi = 1.4 * d_med;
    Ok((0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect())
}

/// Grid search over median-depth candidates. `objective` returns the masked
/// error for a candidate, or `None` when its foreground mask is empty. Ties
/// break deterministically to the smallest candidate; if no candidate is
/// evaluable the search falls back to `fallback` with a warning status.
pub fn median_depth_search<F>(
    candidates: &[f64],
    fallback: f64,
    mut objective: F,
) -> Result<MedianDepthSearch>
where
    F: FnMut(f64) -> Result<Option<f64>>,
{
    if candidates.is_empty() {
        return Err(MvError::domain("median depth search needs at least one candidate".to_string()));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].partial_cmp(&candidates[b]).unwrap());

    let mut best: Option<(f64, f64)> = None; // (error, candidate)
    for &i in &order {
        let cand = candidates[i];
        if let Some(err) = objective(cand)? {
            if !err.is_finite() {
                return Err(MvError::domain(format!("objective returned non-finite error {err}")));
            }
            // ascending candidate order + strict `<` keeps the smallest
            // candidate on ties
            if best.is_none_or(|(be, _)| err < be) {
                best = Some((err, cand));
            }
        }
    }
    match best {
        Some((_, cand)) => Ok(MedianDepthSearch { value: cand, fell_back: false }),
        None => Ok(MedianDepthSearch { value: fallback, fell_back: true }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraPose, Intrinsics, RigidPose};
    use proptest::prelude::*;

    fn depth_grid(h: usize, w: usize, data: Vec<f64>) -> DepthMap {
        FeatureGrid::new(h, w, 1, data).unwrap()
    }

    #[test]
    fn align_constant_depth() {
        // constant c normalizes to 1, so aligned depth is 1 + d_med
        let raw = FeatureGrid::constant(3, 3, 1, 4.2).unwrap();
        let out = align_depth(&raw, 2.0).unwrap();
        for &v in out.data() {
            assert!((v - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn align_two_values() {
        let raw = depth_grid(1, 2, vec![1.0, 3.0]); // mean 2
        let out = align_depth(&raw, 1.0).unwrap();
        assert!((out.get(0, 0, 0) - 1.5).abs() < 1e-12);
        assert!((out.get(0, 1, 0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn align_rejects_zero_median() {
        let raw = depth_grid(1, 2, vec![1.0, 3.0]);
        assert!(matches!(align_depth(&raw, 0.0), Err(MvError::Domain(_))));
    }

    #[test]
    fn align_rejects_nonpositive_depth() {
        let raw = FeatureGrid::new(1, 2, 1, vec![1.0, 0.0]).unwrap();
        assert!(align_depth(&raw, 1.0).is_err());
    }

    #[test]
    fn align_median_shift_is_exact() {
        // lower-median of the output equals lower-median of the normalized
        // input plus d_med, bit for bit (the shift is monotone)
        let raw = depth_grid(2, 3, vec![5.0, 1.0, 3.0, 2.0, 8.0, 4.0]);
        let d_med = 1.75;
        let out = align_depth(&raw, d_med).unwrap();
        let lower_median = |g: &FeatureGrid| {
            let mut v = g.data().to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[(v.len() - 1) / 2]
        };
        let mean_abs: f64 = raw.data().iter().sum::<f64>() / 6.0;
        let normalized = depth_grid(2, 3, raw.data().iter().map(|v| v / mean_abs).collect());
        assert_eq!(lower_median(&out), lower_median(&normalized) + d_med);
    }

    #[test]
    fn triangulate_counts() {
        assert_eq!(grid_triangulate(2, 2).unwrap().len(), 2);
        assert_eq!(grid_triangulate(3, 4).unwrap().len(), 12);
        assert!(grid_triangulate(1, 5).is_err());
    }

    #[test]
    fn prune_keeps_constant_plane() {
        let depth = FeatureGrid::constant(4, 4, 1, 2.0).unwrap();
        let tris = grid_triangulate(4, 4).unwrap();
        let kept = prune_discontinuities(&depth, &tris, 0.05).unwrap();
        assert_eq!(kept.len(), tris.len());
    }

    #[test]
    fn prune_step_depth_4x4() {
        // Columns [1, 1, 1, 2]: one-sided/central gradients per column are
        // 0, 0, 0.5, 1.0, so triangles with any vertex in columns 2 or 3 go.
        // Quad column 0 (vertex columns 0-1) survives: 6 triangles of 18.
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&[1.0, 1.0, 1.0, 2.0]);
        }
        let depth = depth_grid(4, 4, data);
        let tris = grid_triangulate(4, 4).unwrap();
        let kept = prune_discontinuities(&depth, &tris, 0.05).unwrap();
        assert_eq!(kept.len(), 6);
        for tri in &kept {
            for &v in tri {
                assert!(v % 4 <= 1, "vertex column {} should be pruned", v % 4);
            }
        }
    }

    #[test]
    fn prune_infinite_threshold_keeps_all() {
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&[1.0, 1.0, 1.0, 2.0]);
        }
        let depth = depth_grid(4, 4, data);
        let tris = grid_triangulate(4, 4).unwrap();
        let kept = prune_discontinuities(&depth, &tris, f64::INFINITY).unwrap();
        assert_eq!(kept.len(), tris.len());
    }

    proptest! {
        #[test]
        fn prune_is_monotone_in_threshold(
            data in proptest::collection::vec(0.5f64..4.0, 25),
            z1 in 0.01f64..0.5, z2 in 0.01f64..0.5,
        ) {
            let (lo, hi) = if z1 <= z2 { (z1, z2) } else { (z2, z1) };
            let depth = FeatureGrid::new(5, 5, 1, data).unwrap();
            let tris = grid_triangulate(5, 5).unwrap();
            let kept_lo = prune_discontinuities(&depth, &tris, lo).unwrap();
            let kept_hi = prune_discontinuities(&depth, &tris, hi).unwrap();
            // smaller threshold prunes at least as much
            prop_assert!(kept_lo.len() <= kept_hi.len());
            for tri in &kept_lo {
                prop_assert!(kept_hi.contains(tri));
            }
        }
    }

    #[test]
    fn build_mesh_2x2_plane() {
        let feat = FeatureGrid::constant(2, 2, 3, 0.5).unwrap();
        let depth = FeatureGrid::constant(2, 2, 1, 1.0).unwrap();
        let cam = CameraPose::new(Intrinsics::centered(2.0, 2, 2).unwrap(), RigidPose::identity());
        let mesh = build_anchor_mesh(&feat, &depth, &cam, 0.05).unwrap();
        assert_eq!(mesh.vertices().len(), 4);
        assert_eq!(mesh.triangles().len(), 2);
        for v in mesh.vertices() {
            assert!((v.z - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn build_mesh_dimension_mismatch() {
        let feat = FeatureGrid::constant(8, 8, 3, 0.5).unwrap();
        let depth = FeatureGrid::constant(4, 4, 1, 1.0).unwrap();
        let cam = CameraPose::new(Intrinsics::centered(8.0, 8, 8).unwrap(), RigidPose::identity());
        assert!(matches!(build_anchor_mesh(&feat, &depth, &cam, 0.05), Err(MvError::Domain(_))));
    }

    #[test]
    fn central_ray_depth_prefers_center() {
        let mut depth = FeatureGrid::constant(5, 5, 1, 2.0).unwrap();
        depth.set(2, 2, 0, 3.5);
        assert_eq!(central_ray_depth(&depth).unwrap(), 3.5);
    }

    #[test]
    fn central_ray_depth_falls_back_to_median() {
        let mut depth = FeatureGrid::constant(3, 3, 1, 2.0).unwrap();
        depth.set(1, 1, 0, FAR_SENTINEL);
        depth.set(0, 0, 0, 1.0);
        depth.set(2, 2, 0, 4.0);
        // valid values sorted: [1, 2, 2, 2, 2, 2, 4] -> lower median 2
        assert_eq!(central_ray_depth(&depth).unwrap(), 2.0);
    }

    #[test]
    fn search_single_candidate() {
        let res = median_depth_search(&[1.5], 1.0, |_| Ok(Some(0.3))).unwrap();
        assert_eq!(res.value, 1.5);
        assert!(!res.fell_back);
    }

    #[test]
    fn search_ties_break_to_smallest() {
        let cands = candidate_range(2.0, 21).unwrap();
        let res = median_depth_search(&cands, 2.0, |_| Ok(Some(1.0))).unwrap();
        assert_eq!(res.value, cands[0]);
        assert!((cands[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn search_empty_mask_falls_back() {
        let res = median_depth_search(&[1.0, 2.0], 1.7, |_| Ok(None)).unwrap();
        assert!(res.fell_back);
        assert_eq!(res.value, 1.7);
    }

    #[test]
    fn search_finds_planted_minimum() {
        let cands = candidate_range(2.0, 21).unwrap();
        let target = 2.31;
        let res =
            median_depth_search(&cands, 2.0, |c| Ok(Some((c - target).powi(2)))).unwrap();
        let step = cands[1] - cands[0];
        assert!((res.value - target).abs() <= step);
    }

    #[test]
    fn candidate_range_spans_pm_40_percent() {
        let c = candidate_range(2.0, 21).unwrap();
        assert_eq!(c.len(), 21);
        assert!((c[0] - 1.2).abs() < 1e-12);
        assert!((c[20] - 2.8).abs() < 1e-12);
        assert!((c[10] - 2.0).abs() < 1e-12);
    }
}
