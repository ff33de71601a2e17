//! Synthetic multi-object scenes: a procedural object catalog, random poses
//! inside the camera frustum, projected IBB keypoints, and injected keypoint
//! noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Point2, Point3, Pose, RotationMatrix};
use crate::keypoints::{
    fps_sample, ibb_keypoints, project_keypoints, BBox3D, KeypointSet, NUM_IBB_KEYPOINTS,
};
use crate::losses::Box2D;
use crate::matching::{pad_targets, ObjectTarget, TargetTuple, SET_CARDINALITY};
use crate::mesh::Mesh;

/// Points per model used for metrics and losses.
pub const MODEL_POINTS: usize = 1500;
/// Pose draws per object before generation gives up.
pub const MAX_REJECTIONS: usize = 10_000;

/// One object class: mesh, bounding box, symmetry flag and subsampled points.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogEntry {
    pub name: String,
    pub mesh: Mesh,
    pub bbox: BBox3D,
    pub keypoints: KeypointSet,
    /// Continuous symmetry about the model z-axis.
    pub symmetric: bool,
    pub model_points: Vec<Point3>,
}

impl CatalogEntry {
    pub fn new(name: impl Into<String>, mesh: Mesh, symmetric: bool) -> Result<Self> {
        let bbox = BBox3D::enclosing(&mesh)?;
        let model_points = subsample_mesh(&mesh, MODEL_POINTS, 0)?;
        Ok(CatalogEntry {
            name: name.into(),
            keypoints: ibb_keypoints(&bbox),
            bbox,
            mesh,
            symmetric,
            model_points,
        })
    }

    pub fn diameter(&self) -> f64 {
        self.mesh.diameter()
    }
}

/// Object classes indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Catalog {
    entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn new(entries: Vec<CatalogEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("catalog", "needs at least one class"));
        }
        if entries.len() >= SET_CARDINALITY * 100 {
            return Err(Error::invalid("catalog", "too many classes"));
        }
        Ok(Catalog { entries })
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }

    pub fn get(&self, class_id: usize) -> Option<&CatalogEntry> {
        self.entries.get(class_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Eight boxes and prisms of distinct proportions, a cylinder and a ring.
    /// The last two are symmetric about z.
    pub fn procedural() -> Result<Self> {
        let entries = vec![
            CatalogEntry::new("box_flat", box_mesh(0.05, 0.03, 0.02, 16)?, false)?,
            CatalogEntry::new("box_long", box_mesh(0.08, 0.025, 0.025, 16)?, false)?,
            CatalogEntry::new("box_tall", box_mesh(0.04, 0.035, 0.065, 16)?, false)?,
            CatalogEntry::new("box_plate", box_mesh(0.07, 0.05, 0.012, 16)?, false)?,
            CatalogEntry::new("box_column", box_mesh(0.03, 0.02, 0.08, 16)?, false)?,
            CatalogEntry::new("box_chunky", box_mesh(0.06, 0.045, 0.035, 16)?, false)?,
            CatalogEntry::new("prism_triangular", prism_mesh(3, 0.05, 0.045, 24)?, false)?,
            CatalogEntry::new("prism_hexagonal", prism_mesh(6, 0.04, 0.02, 16)?, false)?,
            CatalogEntry::new("cylinder", cylinder_mesh(0.03, 0.055, 64, 24)?, true)?,
            CatalogEntry::new("ring", torus_mesh(0.05, 0.012, 72, 24)?, true)?,
        ];
        Catalog::new(entries)
    }
}

fn push_grid(
    verts: &mut Vec<Point3>,
    faces: &mut Vec<[usize; 3]>,
    n_u: usize,
    n_v: usize,
    wrap_u: bool,
    at: impl Fn(f64, f64) -> Point3,
) {
    let base = verts.len();
    let cols = if wrap_u { n_u } else { n_u + 1 };
    for j in 0..=n_v {
        for i in 0..cols {
            verts.push(at(i as f64 / n_u as f64, j as f64 / n_v as f64));
        }
    }
    for j in 0..n_v {
        for i in 0..n_u {
            let i1 = if wrap_u { (i + 1) % n_u } else { i + 1 };
            let a = base + j * cols + i;
            let b = base + j * cols + i1;
            let c = base + (j + 1) * cols + i;
            let d = base + (j + 1) * cols + i1;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
}

/// Box surface with each face tessellated into an `n × n` grid.
pub fn box_mesh(hx: f64, hy: f64, hz: f64, n: usize) -> Result<Mesh> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let h = [hx, hy, hz];
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
            push_grid(&mut verts, &mut faces, n, n, false, |a, b| {
                let mut p = [0.0; 3];
                p[axis] = sign * h[axis];
                p[u] = (2.0 * a - 1.0) * h[u];
                p[v] = (2.0 * b - 1.0) * h[v];
                Point3::new(p[0], p[1], p[2])
            });
        }
    }
    Mesh::new(verts, faces)
}

/// Right prism over a regular polygon, recentred on its bounding box.
pub fn prism_mesh(sides: usize, circumradius: f64, half_height: f64, n: usize) -> Result<Mesh> {
    if sides < 3 {
        return Err(Error::invalid("sides", "a prism needs at least 3 sides"));
    }
    let corner = |k: usize| {
        let a = 2.0 * PI * k as f64 / sides as f64 + PI / 2.0;
        (circumradius * a.cos(), circumradius * a.sin())
    };
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for k in 0..sides {
        let (x0, y0) = corner(k);
        let (x1, y1) = corner(k + 1);
        push_grid(&mut verts, &mut faces, n, n, false, |a, b| {
            Point3::new(
                x0 + a * (x1 - x0),
                y0 + a * (y1 - y0),
                (2.0 * b - 1.0) * half_height,
            )
        });
    }
    for z in [-half_height, half_height] {
        // Caps as concentric polygons shrinking to the centre.
        push_grid(&mut verts, &mut faces, sides * n, n, true, |a, b| {
            let pos = a * sides as f64;
            let k = (pos.floor() as usize).min(sides - 1);
            let f = pos - k as f64;
            let (x0, y0) = corner(k);
            let (x1, y1) = corner(k + 1);
            let r = 1.0 - b;
            Point3::new(r * (x0 + f * (x1 - x0)), r * (y0 + f * (y1 - y0)), z)
        });
    }
    recentre(verts, faces)
}

pub fn cylinder_mesh(radius: f64, half_height: f64, around: usize, along: usize) -> Result<Mesh> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let ring = |a: f64| (radius * (2.0 * PI * a).cos(), radius * (2.0 * PI * a).sin());
    push_grid(&mut verts, &mut faces, around, along, true, |a, b| {
        let (x, y) = ring(a);
        Point3::new(x, y, (2.0 * b - 1.0) * half_height)
    });
    for z in [-half_height, half_height] {
        push_grid(&mut verts, &mut faces, around, along / 2, true, |a, b| {
            let (x, y) = ring(a);
            let r = 1.0 - b;
            Point3::new(r * x, r * y, z)
        });
    }
    Mesh::new(verts, faces)
}

/// Torus around the z-axis.
pub fn torus_mesh(major: f64, minor: f64, around: usize, tube: usize) -> Result<Mesh> {
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let base = verts.len();
    for i in 0..around {
        let u = 2.0 * PI * i as f64 / around as f64;
        for j in 0..tube {
            let v = 2.0 * PI * j as f64 / tube as f64;
            let r = major + minor * v.cos();
            verts.push(Point3::new(r * u.cos(), r * u.sin(), minor * v.sin()));
        }
    }
    for i in 0..around {
        for j in 0..tube {
            let a = base + i * tube + j;
            let b = base + ((i + 1) % around) * tube + j;
            let c = base + i * tube + (j + 1) % tube;
            let d = base + ((i + 1) % around) * tube + (j + 1) % tube;
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    Mesh::new(verts, faces)
}

fn recentre(verts: Vec<Point3>, faces: Vec<[usize; 3]>) -> Result<Mesh> {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for v in &verts {
        lo = lo.inf(&v.coords);
        hi = hi.sup(&v.coords);
    }
    let c = (lo + hi) / 2.0;
    Mesh::new(
        verts
            .into_iter()
            .map(|v| Point3::from(v.coords - c))
            .collect(),
        faces,
    )
}

/// FPS subsample of `k` vertices, or every vertex when the mesh has at most `k`.
pub fn subsample_mesh(mesh: &Mesh, k: usize, seed: u64) -> Result<Vec<Point3>> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k >= mesh.vertices().len() {
        return Ok(mesh.vertices().to_vec());
    }
    fps_sample(mesh, k, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub camera: CameraIntrinsics,
    /// Width and height in pixels.
    pub image_size: [f64; 2],
    /// Inclusive range of objects per scene.
    pub objects_per_scene: [usize; 2],
    /// Depth range of object origins, meters.
    pub depth_range: [f64; 2],
    /// Every keypoint must land at least this many pixels inside the image.
    pub margin: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            camera: CameraIntrinsics::default(),
            image_size: [640.0, 480.0],
            objects_per_scene: [1, 6],
            depth_range: [0.5, 1.1],
            margin: 8.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        self.camera.validate()?;
        let [lo, hi] = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return Err(Error::invalid("objects_per_scene", "need 1 ≤ min ≤ max"));
        }
        if hi > SET_CARDINALITY {
            return Err(Error::invalid(
                "objects_per_scene",
                format!("at most {SET_CARDINALITY} objects"),
            ));
        }
        let [near, far] = self.depth_range;
        if !(near > 0.0 && near <= far && far.is_finite()) {
            return Err(Error::invalid("depth_range", "need 0 < near ≤ far"));
        }
        let [w, h] = self.image_size;
        if !(w > 0.0 && h > 0.0) {
            return Err(Error::invalid("image_size", "must be positive"));
        }
        if !(self.margin >= 0.0) || 2.0 * self.margin >= w.min(h) {
            return Err(Error::invalid(
                "margin",
                "must be non-negative and leave room inside the image",
            ));
        }
        Ok(())
    }

    fn inside(&self, p: &Point2) -> bool {
        let [w, h] = self.image_size;
        p.x >= self.margin && p.x <= w - self.margin && p.y >= self.margin && p.y <= h - self.margin
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class_id: usize,
    pub pose: Pose,
    /// Noise-free projections of the 32 IBB keypoints, pixels.
    pub keypoints: [Point2; NUM_IBB_KEYPOINTS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub index: u64,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Ground-truth set padded with ø to the set cardinality. Boxes and
    /// keypoints are normalized by the image size.
    pub fn targets(&self, catalog: &Catalog, cfg: &SceneConfig) -> Result<Vec<TargetTuple>> {
        let [w, h] = cfg.image_size;
        let objects = self
            .objects
            .iter()
            .map(|o| {
                let entry = catalog.get(o.class_id).ok_or(Error::invalid(
                    "class_id",
                    format!("unknown class {}", o.class_id),
                ))?;
                let kps = o.keypoints.map(|p| Point2::new(p.x / w, p.y / h));
                Ok(ObjectTarget {
                    class_id: o.class_id,
                    box2d: Box2D::enclosing(&kps),
                    keypoints: kps,
                    rotation: o.pose.rotation,
                    translation: o.pose.translation,
                    symmetric: entry.symmetric,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        pad_targets(objects, SET_CARDINALITY)
    }
}

/// Rejection-samples every object's pose until all 32 keypoints project inside
/// the margin. Deterministic in `(cfg.seed, index)`.
pub fn generate_scene(cfg: &SceneConfig, catalog: &Catalog, index: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);
    let count = rng.random_range(cfg.objects_per_scene[0]..=cfg.objects_per_scene[1]);
    let [w, h] = cfg.image_size;
    let cam = &cfg.camera;
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..catalog.len());
        let entry = &catalog.entries[class_id];
        let mut placed = None;
        for _ in 0..MAX_REJECTIONS {
            let rotation = RotationMatrix::random(&mut rng);
            let z = rng.random_range(cfg.depth_range[0]..=cfg.depth_range[1]);
            let u = rng.random_range(cfg.margin..=w - cfg.margin);
            let v = rng.random_range(cfg.margin..=h - cfg.margin);
            let t = Vector3::new((u - cam.px) * z / cam.fx, (v - cam.py) * z / cam.fy, z);
            let pose = Pose::new(rotation, t);
            let Ok(kps) = project_keypoints(&entry.keypoints, &pose, cam) else {
                continue;
            };
            if kps.iter().all(|p| cfg.inside(p)) {
                placed = Some(SceneObject {
                    class_id,
                    pose,
                    keypoints: kps,
                });
                break;
            }
        }
        objects.push(placed.ok_or(Error::SamplingExhausted(MAX_REJECTIONS))?);
    }
    Ok(Scene { index, objects })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-coordinate Gaussian standard deviation, pixels.
    pub sigma: f64,
    pub outlier_fraction: f64,
    /// Outliers are uniform in `[0, w] × [0, h]`.
    pub outlier_range: [f64; 2],
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            sigma: 0.0,
            outlier_fraction: 0.0,
            outlier_range: [640.0, 480.0],
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma", "must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.outlier_fraction) {
            return Err(Error::invalid("outlier_fraction", "must lie in [0, 1]"));
        }
        if !(self.outlier_range[0] > 0.0 && self.outlier_range[1] > 0.0) {
            return Err(Error::invalid("outlier_range", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub keypoints: Vec<Point2>,
    /// Realized mean ℓ2 displacement, pixels.
    pub mean_error: f64,
}

/// Gaussian jitter on every coordinate, then a random subset of
/// `round(fraction · n)` points replaced by uniform outliers.
pub fn perturb_keypoints(keypoints: &[Point2], spec: &NoiseSpec) -> Result<Perturbation> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = keypoints.to_vec();
    if spec.sigma > 0.0 {
        let normal = Normal::new(0.0, spec.sigma).expect("positive sigma");
        for p in &mut out {
            p.x += normal.sample(&mut rng);
            p.y += normal.sample(&mut rng);
        }
    }
    let n_out = (spec.outlier_fraction * keypoints.len() as f64).round() as usize;
    if n_out > 0 {
        for i in rand::seq::index::sample(&mut rng, keypoints.len(), n_out) {
            out[i] = Point2::new(
                rng.random_range(0.0..spec.outlier_range[0]),
                rng.random_range(0.0..spec.outlier_range[1]),
            );
        }
    }
    let mean_error = if keypoints.is_empty() {
        0.0
    } else {
        out.iter()
            .zip(keypoints)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / keypoints.len() as f64
    };
    Ok(Perturbation {
        keypoints: out,
        mean_error,
    })
}

// On-disk formats.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseStats {
    pub sigma: f64,
    pub outlier_fraction: f64,
    pub mean_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectRecord {
    pub class_id: usize,
    /// Row-major rotation.
    pub rotation: [f64; 9],
    /// Meters.
    pub translation: [f64; 3],
    pub keypoints: Vec<[f64; 2]>,
    pub noisy_keypoints: Vec<[f64; 2]>,
    pub noise: NoiseStats,
}

impl ObjectRecord {
    pub fn pose(&self) -> Result<Pose> {
        Ok(Pose::new(
            RotationMatrix::from_row_major(&self.rotation)?,
            Vector3::from(self.translation),
        ))
    }

    pub fn clean_keypoints(&self) -> Result<[Point2; NUM_IBB_KEYPOINTS]> {
        to_keypoint_array(&self.keypoints)
    }

    pub fn perturbed_keypoints(&self) -> Result<[Point2; NUM_IBB_KEYPOINTS]> {
        to_keypoint_array(&self.noisy_keypoints)
    }
}

fn to_keypoint_array(v: &[[f64; 2]]) -> Result<[Point2; NUM_IBB_KEYPOINTS]> {
    if v.len() != NUM_IBB_KEYPOINTS {
        return Err(Error::DimensionMismatch {
            expected: NUM_IBB_KEYPOINTS,
            actual: v.len(),
        });
    }
    Ok(std::array::from_fn(|i| Point2::new(v[i][0], v[i][1])))
}

/// One scene as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneRecord {
    pub index: u64,
    pub camera: CameraIntrinsics,
    pub image_size: [f64; 2],
    /// Keypoint noise in this file is injected, not produced by a detector.
    pub noise_model: String,
    pub objects: Vec<ObjectRecord>,
}

impl SceneRecord {
    /// Serializes a scene, perturbing each object's keypoints with `noise`
    /// reseeded per object.
    pub fn from_scene(scene: &Scene, cfg: &SceneConfig, noise: &NoiseSpec) -> Result<Self> {
        let objects = scene
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| {
                let spec = NoiseSpec {
                    seed: noise.seed
                        ^ scene
                            .index
                            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                            .wrapping_add(k as u64),
                    ..*noise
                };
                let p = perturb_keypoints(&o.keypoints, &spec)?;
                Ok(ObjectRecord {
                    class_id: o.class_id,
                    rotation: o.pose.rotation.to_row_major(),
                    translation: o.pose.translation.into(),
                    keypoints: o.keypoints.iter().map(|p| [p.x, p.y]).collect(),
                    noisy_keypoints: p.keypoints.iter().map(|p| [p.x, p.y]).collect(),
                    noise: NoiseStats {
                        sigma: noise.sigma,
                        outlier_fraction: noise.outlier_fraction,
                        mean_l2: p.mean_error,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneRecord {
            index: scene.index,
            camera: cfg.camera,
            image_size: cfg.image_size,
            noise_model: "injected".into(),
            objects,
        })
    }

    pub fn to_scene(&self) -> Result<Scene> {
        let objects = self
            .objects
            .iter()
            .map(|o| {
                Ok(SceneObject {
                    class_id: o.class_id,
                    pose: o.pose()?,
                    keypoints: o.clean_keypoints()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Scene {
            index: self.index,
            objects,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("scene serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub class_id: usize,
    pub name: String,
    /// Relative to the manifest's directory.
    pub mesh: PathBuf,
    pub half_extents: [f64; 3],
    pub diameter: f64,
    pub symmetric: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogManifest {
    pub classes: Vec<ManifestEntry>,
}

impl CatalogManifest {
    /// Writes each mesh as PLY under `dir/meshes` and the manifest as `dir/catalog.json`.
    pub fn write(catalog: &Catalog, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mesh_dir = dir.join("meshes");
        std::fs::create_dir_all(&mesh_dir).map_err(|e| Error::io(&mesh_dir, e))?;
        let mut classes = Vec::new();
        for (class_id, e) in catalog.entries.iter().enumerate() {
            let rel = PathBuf::from("meshes").join(format!("{:02}_{}.ply", class_id, e.name));
            e.mesh.save_ply(dir.join(&rel))?;
            classes.push(ManifestEntry {
                class_id,
                name: e.name.clone(),
                mesh: rel,
                half_extents: e.bbox.half_extents(),
                diameter: e.diameter(),
                symmetric: e.symmetric,
            });
        }
        let manifest = CatalogManifest { classes };
        let path = dir.join("catalog.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    /// Loads the referenced meshes. Class ids must be `0..n` in order.
    pub fn to_catalog(&self, base_dir: impl AsRef<Path>) -> Result<Catalog> {
        let base = base_dir.as_ref();
        let entries = self
            .classes
            .iter()
            .enumerate()
            .map(|(k, c)| {
                if c.class_id != k {
                    return Err(Error::invalid(
                        "class_id",
                        format!("expected {k}, found {}", c.class_id),
                    ));
                }
                CatalogEntry::new(c.name.clone(), Mesh::load(base.join(&c.mesh))?, c.symmetric)
            })
            .collect::<Result<Vec<_>>>()?;
        Catalog::new(entries)
    }
}

/// Ground-truth pose from a BOP `scene_gt.json`.
#[derive(Debug, Clone, PartialEq)]
pub struct BopPose {
    pub object_id: u32,
    /// Translation converted from millimetres to meters.
    pub pose: Pose,
}

#[derive(Deserialize)]
struct BopEntry {
    #[serde(rename = "cam_R_m2c")]
    rotation: [f64; 9],
    #[serde(rename = "cam_t_m2c")]
    translation_mm: [f64; 3],
    obj_id: u32,
}

/// Parses BOP ground truth, keyed by image id.
pub fn parse_bop_scene_gt(text: &str) -> std::result::Result<BTreeMap<u64, Vec<BopPose>>, String> {
    let raw: BTreeMap<String, Vec<BopEntry>> =
        serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for (key, entries) in raw {
        let id: u64 = key
            .parse()
            .map_err(|_| format!("image id {key:?} is not an integer"))?;
        let poses = entries
            .into_iter()
            .map(|e| {
                let rotation =
                    RotationMatrix::from_row_major(&e.rotation).map_err(|err| err.to_string())?;
                Ok(BopPose {
                    object_id: e.obj_id,
                    pose: Pose::new(rotation, Vector3::from(e.translation_mm) / 1000.0),
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        out.insert(id, poses);
    }
    Ok(out)
}

pub fn load_bop_scene_gt(path: impl AsRef<Path>) -> Result<BTreeMap<u64, Vec<BopPose>>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bop_scene_gt(&text).map_err(|m| Error::parse(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn procedural_catalog_shape() {
        let cat = Catalog::procedural().unwrap();
        assert_eq!(cat.len(), 10);
        assert_eq!(cat.entries().iter().filter(|e| e.symmetric).count(), 2);
        for e in cat.entries() {
            assert_eq!(e.model_points.len(), MODEL_POINTS);
            let [hx, hy, hz] = e.bbox.half_extents();
            assert!(hx > 0.0 && hy > 0.0 && hz > 0.0);
            for p in e.mesh.vertices() {
                assert!(
                    p.x.abs() <= hx + 1e-12 && p.y.abs() <= hy + 1e-12 && p.z.abs() <= hz + 1e-12
                );
            }
        }
    }

    #[test]
    fn scenes_are_deterministic_and_inside_the_margin() {
        let cat = Catalog::procedural().unwrap();
        let cfg = SceneConfig {
            seed: 5,
            ..Default::default()
        };
        for index in 0..20 {
            let a = generate_scene(&cfg, &cat, index).unwrap();
            assert_eq!(a, generate_scene(&cfg, &cat, index).unwrap());
            for o in &a.objects {
                assert!(o.keypoints.iter().all(|p| cfg.inside(p)));
            }
            let targets = a.targets(&cat, &cfg).unwrap();
            assert_eq!(targets.len(), SET_CARDINALITY);
            assert_eq!(
                targets.iter().filter(|t| t.is_object()).count(),
                a.objects.len()
            );
        }
    }

    #[test]
    fn noise_identity_and_full_outliers() {
        let kps: Vec<Point2> = (0..32)
            .map(|i| Point2::new(i as f64, 2.0 * i as f64))
            .collect();
        let p = perturb_keypoints(&kps, &NoiseSpec::default()).unwrap();
        assert_eq!(p.keypoints, kps);
        assert_eq!(p.mean_error, 0.0);
        let spec = NoiseSpec {
            outlier_fraction: 1.0,
            ..Default::default()
        };
        let p = perturb_keypoints(&kps, &spec).unwrap();
        assert!(p
            .keypoints
            .iter()
            .zip(&kps)
            .all(|(a, b)| a.x != b.x && a.y != b.y));
        assert!(perturb_keypoints(
            &kps,
            &NoiseSpec {
                sigma: -1.0,
                ..Default::default()
            }
        )
        .is_err());
    }

    #[test]
    fn subsample_returns_all_vertices_when_small() {
        let mesh = box_mesh(0.1, 0.1, 0.1, 2).unwrap();
        let all = subsample_mesh(&mesh, 10_000, 3).unwrap();
        assert_eq!(all, mesh.vertices());
        let some = subsample_mesh(&mesh, 10, 3).unwrap();
        assert!(some.iter().all(|p| mesh.vertices().contains(p)));
    }

    #[test]
    fn bop_ground_truth_is_converted_to_meters() {
        let text = r#"{"3": [{"cam_R_m2c": [1,0,0,0,1,0,0,0,1], "cam_t_m2c": [10, -20, 500], "obj_id": 7}],
                      "10": []}"#;
        let gt = parse_bop_scene_gt(text).unwrap();
        assert_eq!(gt.keys().copied().collect::<Vec<_>>(), vec![3, 10]);
        let p = &gt[&3][0];
        assert_eq!(p.object_id, 7);
        assert!((p.pose.translation - Vector3::new(0.01, -0.02, 0.5)).norm() < 1e-15);
        assert!(parse_bop_scene_gt(r#"{"x": []}"#).is_err());
    }
}
