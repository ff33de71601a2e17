//! 3D keypoint representations: interpolated bounding boxes (IBB), plain box
//! corners, and farthest point samples on a mesh.
//!
//! # IBB ordering
//!
//! Indices `0..8` are the box corners in lexicographic sign order, corner
//! `4*ix + 2*iy + iz` with `i = 1` meaning the positive half extent. Indices
//! `8..32` hold two interior points per edge, at parameters 1/3 and 2/3 from
//! the edge's negative end. Edges are enumerated as the four x-parallel edges,
//! then the four y-parallel, then the four z-parallel ones, each group ordered
//! lexicographically by the two fixed coordinates.

use crate::error::{Error, Result};
use crate::geometry::{project_point, CameraIntrinsics, Point2, Point3, Pose};
use crate::mesh::Mesh;

pub const NUM_CORNERS: usize = 8;
pub const NUM_EDGES: usize = 12;
pub const NUM_IBB_KEYPOINTS: usize = 32;

/// Cross-ratio of every IBB edge: points at 0, 1/3, 2/3, 1.
pub const IBB_CROSS_RATIO: f64 = 4.0 / 3.0;

/// Origin-centered 3D bounding box given by its half extents (meters).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox3D {
    half_extents: [f64; 3],
}

impl BBox3D {
    pub fn new(hx: f64, hy: f64, hz: f64) -> Result<Self> {
        if [hx, hy, hz].iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::invalid(
                "half extents",
                "must be positive and finite",
            ));
        }
        Ok(BBox3D {
            half_extents: [hx, hy, hz],
        })
    }

    /// Tight box around a mesh.
    pub fn enclosing(mesh: &Mesh) -> Result<Self> {
        let [hx, hy, hz] = mesh.half_extents();
        Self::new(hx, hy, hz)
    }

    pub fn half_extents(&self) -> [f64; 3] {
        self.half_extents
    }

    pub fn corner(&self, index: usize) -> Point3 {
        let [hx, hy, hz] = self.half_extents;
        let s = |bit: usize| if index & bit != 0 { 1.0 } else { -1.0 };
        Point3::new(s(4) * hx, s(2) * hy, s(1) * hz)
    }

    /// The 8 corners, the plain "BB" keypoint representation.
    pub fn corners(&self) -> [Point3; NUM_CORNERS] {
        std::array::from_fn(|i| self.corner(i))
    }
}

/// Corner index pairs `(negative end, positive end)` for the 12 edges.
pub const EDGES: [(usize, usize); NUM_EDGES] = {
    let mut edges = [(0, 0); NUM_EDGES];
    let mut axis = 0;
    while axis < 3 {
        // the bit that varies along this edge and the two fixed bits, high to low
        let vary = 4 >> axis;
        let fixed = match axis {
            0 => [2, 1],
            1 => [4, 1],
            _ => [4, 2],
        };
        let mut k = 0;
        while k < 4 {
            let base =
                (if k & 2 != 0 { fixed[0] } else { 0 }) | (if k & 1 != 0 { fixed[1] } else { 0 });
            edges[axis * 4 + k] = (base, base | vary);
            k += 1;
        }
        axis += 1;
    }
    edges
};

/// For each edge, the IBB indices of its four collinear points `(A, B, C, D)`
/// ordered along the edge.
pub const EDGE_QUADS: [[usize; 4]; NUM_EDGES] = {
    let mut quads = [[0; 4]; NUM_EDGES];
    let mut e = 0;
    while e < NUM_EDGES {
        quads[e] = [EDGES[e].0, 8 + 2 * e, 9 + 2 * e, EDGES[e].1];
        e += 1;
    }
    quads
};

/// The 32 model-frame IBB keypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    points: [Point3; NUM_IBB_KEYPOINTS],
}

impl KeypointSet {
    pub fn points(&self) -> &[Point3; NUM_IBB_KEYPOINTS] {
        &self.points
    }
}

pub fn ibb_keypoints(bbox: &BBox3D) -> KeypointSet {
    let corners = bbox.corners();
    let mut points = [Point3::origin(); NUM_IBB_KEYPOINTS];
    points[..NUM_CORNERS].copy_from_slice(&corners);
    for (e, &(a, d)) in EDGES.iter().enumerate() {
        let (pa, pd) = (corners[a], corners[d]);
        points[8 + 2 * e] = pa + (pd - pa) / 3.0;
        points[9 + 2 * e] = pa + (pd - pa) * (2.0 / 3.0);
    }
    KeypointSet { points }
}

/// Greedy farthest point sampling starting from vertex `start`.
///
/// Returns vertex indices in selection order. Ties go to the lowest index.
pub fn fps_indices(points: &[Point3], k: usize, start: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::TooFewVertices {
            requested: k,
            available: points.len(),
        });
    }
    let start = start % points.len();
    let mut chosen = Vec::with_capacity(k);
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut current = start;
    for _ in 0..k {
        chosen.push(current);
        min_dist[current] = f64::NEG_INFINITY;
        let p = points[current];
        let mut best = (f64::NEG_INFINITY, 0);
        for (i, q) in points.iter().enumerate() {
            if min_dist[i] == f64::NEG_INFINITY {
                continue;
            }
            let d = (q - p).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best.0 {
                best = (min_dist[i], i);
            }
        }
        current = best.1;
    }
    Ok(chosen)
}

/// Farthest point sample of `k` mesh vertices; the start vertex is `seed mod n`.
pub fn fps_sample(mesh: &Mesh, k: usize, seed: u64) -> Result<Vec<Point3>> {
    let verts = mesh.vertices();
    let start = (seed % verts.len() as u64) as usize;
    Ok(fps_indices(verts, k, start)?
        .into_iter()
        .map(|i| verts[i])
        .collect())
}

/// Projects any ordered keypoint list, reporting the first point behind the camera.
pub fn project_points(
    points: &[Point3],
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Result<Vec<Point2>> {
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            project_point(p, pose, cam).map_err(|e| match e {
                Error::BehindCamera { depth, .. } => Error::BehindCamera {
                    index: Some(i),
                    depth,
                },
                other => other,
            })
        })
        .collect()
}

pub fn project_keypoints(
    kps: &KeypointSet,
    pose: &Pose,
    cam: &CameraIntrinsics,
) -> Result<[Point2; NUM_IBB_KEYPOINTS]> {
    let v = project_points(kps.points(), pose, cam)?;
    Ok(std::array::from_fn(|i| v[i]))
}
